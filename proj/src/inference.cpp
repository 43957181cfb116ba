#include "caplab/inference.hpp"

#include <cstdio>
#include <fstream>

#include <json.hpp>

namespace caplab {

void BeamConfig::validate() const {
  if (beam_width < 1) throw ContractError("beam width K must be at least 1");
  if (max_len < 1) throw ContractError("max_len must be at least 1");
  if (!(length_norm_alpha >= 0.0)) throw ContractError("length_norm_alpha must be non-negative");
}

double hypothesis_score(double log_prob, std::size_t length, double alpha) {
  if (alpha == 0.0) return log_prob;
  return log_prob / std::pow(static_cast<double>(length), alpha);
}

DecoderStep<DecodeState> ModelDecoder::step(const DecodeState& state, int token) const {
  StepOutput out = decode_step(model_, state, token);
  DecoderStep<DecodeState> result;
  const Tensor lp = log_softmax(out.logits);
  result.log_probs.assign(lp.data().begin(), lp.data().end());
  result.state = std::move(out.state);
  if (out.attention.defined()) result.attention.assign(out.attention.data().begin(), out.attention.data().end());
  return result;
}

std::vector<int> strip_end(const std::vector<int>& tokens) {
  std::vector<int> out;
  for (int t : tokens) {
    if (t == kEndId) break;
    out.push_back(t);
  }
  return out;
}

BeamHypothesis generate_caption(const CaptionModel& model, const FeatureGrid& grid, const BeamConfig& config,
                                bool greedy) {
  const ModelDecoder decoder(model, features_for(model.config(), grid));
  if (greedy) return greedy_decode(decoder, config.max_len);
  return beam_search(decoder, config).front();
}

CorpusReport evaluate_corpus(const CaptionModel& model, const std::vector<CaptionedExample>& examples,
                             const Vocabulary& vocab, const BeamConfig& config, bool greedy) {
  if (examples.empty()) throw ContractError("evaluate_corpus: empty dataset");
  std::vector<Tokens> candidates;
  std::vector<std::vector<Tokens>> references;
  for (const auto& ex : examples) {
    const BeamHypothesis best = generate_caption(model, ex.features, config, greedy);
    candidates.push_back(vocab.caption_words(best.tokens));
    std::vector<Tokens> refs;
    for (const auto& r : ex.references) refs.push_back(vocab.caption_words(r));
    references.push_back(std::move(refs));
  }
  return evaluate_captions(candidates, references);
}

std::vector<std::filesystem::path> export_attention_heatmap(const std::vector<AttentionStep>& trace,
                                                            std::size_t grid_h, std::size_t grid_w,
                                                            const std::filesystem::path& dir) {
  if (grid_h == 0 || grid_w == 0) throw DimensionError("heatmap grid extents must be positive");
  const std::size_t cells = grid_h * grid_w;
  for (std::size_t s = 0; s < trace.size(); ++s) {
    if (trace[s].weights.size() != cells) {
      throw DimensionError("attention step " + std::to_string(s) + " holds " + std::to_string(trace[s].weights.size()) +
                           " weights, grid " + std::to_string(grid_h) + "x" + std::to_string(grid_w) + " needs " +
                           std::to_string(cells));
    }
  }
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create heatmap directory " + dir.string() + ": " + ec.message());

  std::vector<std::filesystem::path> written;
  for (std::size_t s = 0; s < trace.size(); ++s) {
    const auto& w = trace[s].weights;
    const auto [lo_it, hi_it] = std::minmax_element(w.begin(), w.end());
    const double lo = *lo_it, hi = *hi_it;
    std::string pixels(cells, '\0');
    for (std::size_t i = 0; i < cells; ++i) {
      const double level = hi > lo ? std::round(255.0 * (w[i] - lo) / (hi - lo)) : 128.0;
      pixels[i] = static_cast<char>(static_cast<unsigned char>(level));
    }
    char stem[32];
    std::snprintf(stem, sizeof(stem), "step_%02zu", s);
    const auto pgm = dir / (std::string(stem) + ".pgm");
    std::ofstream img(pgm, std::ios::binary | std::ios::trunc);
    if (!img) throw std::runtime_error("cannot write heatmap " + pgm.string());
    img << "P5 " << grid_w << ' ' << grid_h << " 255\n";
    img.write(pixels.data(), static_cast<std::streamsize>(pixels.size()));
    written.push_back(pgm);

    const nlohmann::json side = {{"word", trace[s].word}, {"step", s}, {"weights", w}};
    std::ofstream js(dir / (std::string(stem) + ".json"), std::ios::trunc);
    if (!js) throw std::runtime_error("cannot write heatmap sidecar in " + dir.string());
    js << side.dump() << '\n';
  }
  return written;
}

}  // namespace caplab
