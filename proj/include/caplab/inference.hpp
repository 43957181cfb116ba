#pragma once

// Beam search and greedy decoding over any step decoder, plus the adapter
// that drives a CaptionModel.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <functional>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include "caplab/data.hpp"
#include "caplab/metrics.hpp"
#include "caplab/models.hpp"

namespace caplab {

struct BeamConfig {
  std::size_t beam_width = 7;
  std::size_t max_len = kMaxDecodeLength;
  double length_norm_alpha = 0.0;

  void validate() const;
};

template <typename State>
struct DecoderStep {
  std::vector<double> log_probs;  // one per vocabulary entry
  State state;
  std::vector<double> attention;  // empty for models without attention
};

// Anything that can start a sequence and extend it by one token.
template <typename D>
concept StepDecoder = requires(const D& d, const typename D::State& s, int token) {
  { d.initial() } -> std::convertible_to<typename D::State>;
  { d.step(s, token) } -> std::convertible_to<DecoderStep<typename D::State>>;
  { d.vocab_size() } -> std::convertible_to<std::size_t>;
};

struct BeamHypothesis {
  std::vector<int> tokens;  // generated tokens, end included when emitted
  double log_prob = 0.0;
  double score = 0.0;
  bool finished = false;
  std::vector<std::vector<double>> attention;  // per generated token
};

double hypothesis_score(double log_prob, std::size_t length, double alpha);

namespace detail {

// Score descending, then token ids ascending.
inline bool ranks_before(double score_a, const std::vector<int>& a, double score_b, const std::vector<int>& b) {
  if (score_a != score_b) return score_a > score_b;
  return a < b;
}

}  // namespace detail

// The first step feeds the start token. Finished hypotheses (end emitted or
// max_len reached) retire to a pool; the result is pool plus any live
// hypotheses, best first.
template <StepDecoder D>
std::vector<BeamHypothesis> beam_search(const D& decoder, const BeamConfig& config) {
  config.validate();
  using State = typename D::State;
  struct Live {
    BeamHypothesis hyp;
    State state;
  };
  struct Candidate {
    std::size_t parent;
    int token;
    double log_prob;
    double score;
    std::vector<int> tokens;
  };

  std::vector<Live> live;
  live.push_back({BeamHypothesis{}, decoder.initial()});
  std::vector<BeamHypothesis> pool;

  for (std::size_t step = 1; step <= config.max_len && !live.empty(); ++step) {
    std::vector<DecoderStep<State>> expanded;
    expanded.reserve(live.size());
    std::vector<Candidate> candidates;
    for (std::size_t i = 0; i < live.size(); ++i) {
      const int input = live[i].hyp.tokens.empty() ? kStartId : live[i].hyp.tokens.back();
      expanded.push_back(decoder.step(live[i].state, input));
      const auto& lp = expanded.back().log_probs;
      for (std::size_t v = 0; v < lp.size(); ++v) {
        Candidate c{i, static_cast<int>(v), live[i].hyp.log_prob + lp[v], 0.0, live[i].hyp.tokens};
        c.tokens.push_back(c.token);
        c.score = hypothesis_score(c.log_prob, c.tokens.size(), config.length_norm_alpha);
        candidates.push_back(std::move(c));
      }
    }
    const std::size_t keep = std::min(config.beam_width, candidates.size());
    std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(keep), candidates.end(),
                      [](const Candidate& a, const Candidate& b) {
                        return detail::ranks_before(a.score, a.tokens, b.score, b.tokens);
                      });

    std::vector<Live> next;
    for (std::size_t k = 0; k < keep; ++k) {
      Candidate& c = candidates[k];
      BeamHypothesis h;
      h.tokens = std::move(c.tokens);
      h.log_prob = c.log_prob;
      h.score = c.score;
      h.attention = live[c.parent].hyp.attention;
      if (!expanded[c.parent].attention.empty()) h.attention.push_back(expanded[c.parent].attention);
      if (c.token == kEndId || step == config.max_len) {
        h.finished = true;
        pool.push_back(std::move(h));
      } else {
        next.push_back({std::move(h), expanded[c.parent].state});
      }
    }
    live = std::move(next);

    // Without length normalisation scores only fall as hypotheses grow, so
    // once K finished hypotheses beat every live one the top K are final.
    if (config.length_norm_alpha == 0.0 && pool.size() >= config.beam_width && !live.empty()) {
      std::vector<double> finished;
      for (const auto& h : pool) finished.push_back(h.score);
      std::nth_element(finished.begin(), finished.begin() + static_cast<std::ptrdiff_t>(config.beam_width - 1),
                       finished.end(), std::greater<>());
      const double kth = finished[config.beam_width - 1];
      double best_live = -std::numeric_limits<double>::infinity();
      for (const auto& l : live) best_live = std::max(best_live, l.hyp.score);
      if (kth > best_live) break;
    }
  }

  std::vector<BeamHypothesis> out = std::move(pool);
  for (auto& l : live) out.push_back(std::move(l.hyp));
  std::stable_sort(out.begin(), out.end(), [](const BeamHypothesis& a, const BeamHypothesis& b) {
    return detail::ranks_before(a.score, a.tokens, b.score, b.tokens);
  });
  return out;
}

// Argmax at every step (lowest id on ties) until end or max_len.
template <StepDecoder D>
BeamHypothesis greedy_decode(const D& decoder, std::size_t max_len = kMaxDecodeLength) {
  if (max_len == 0) throw ContractError("greedy_decode: max_len must be positive");
  BeamHypothesis h;
  auto state = decoder.initial();
  int input = kStartId;
  for (std::size_t step = 1; step <= max_len; ++step) {
    auto out = decoder.step(state, input);
    std::size_t best = 0;
    for (std::size_t v = 1; v < out.log_probs.size(); ++v) {
      if (out.log_probs[v] > out.log_probs[best]) best = v;
    }
    input = static_cast<int>(best);
    h.tokens.push_back(input);
    h.log_prob += out.log_probs[best];
    if (!out.attention.empty()) h.attention.push_back(std::move(out.attention));
    state = std::move(out.state);
    if (input == kEndId) break;
  }
  h.finished = true;
  h.score = h.log_prob;
  return h;
}

// Drives a CaptionModel: log-softmax of decode_step logits.
class ModelDecoder {
 public:
  using State = DecodeState;

  ModelDecoder(const CaptionModel& model, Features features) : model_(model), features_(std::move(features)) {}

  State initial() const { return init_state(model_, features_); }
  DecoderStep<State> step(const State& state, int token) const;
  std::size_t vocab_size() const { return model_.config().vocab_size; }

 private:
  const CaptionModel& model_;
  Features features_;
};

static_assert(StepDecoder<ModelDecoder>);

// Generated ids without the end token.
std::vector<int> strip_end(const std::vector<int>& tokens);

// Top-1 caption by beam search, or greedy decoding when `greedy` is set.
BeamHypothesis generate_caption(const CaptionModel& model, const FeatureGrid& grid, const BeamConfig& config,
                                bool greedy = false);

// Top-1 caption per example, scored against its references.
CorpusReport evaluate_corpus(const CaptionModel& model, const std::vector<CaptionedExample>& examples,
                             const Vocabulary& vocab, const BeamConfig& config, bool greedy = false);

struct AttentionStep {
  std::string word;
  std::vector<double> weights;
};

// One binary PGM per step (weights min-max scaled to 0..255, a constant map
// becomes mid gray) and a JSON sidecar {word, step, weights}. Returns the
// image paths.
std::vector<std::filesystem::path> export_attention_heatmap(const std::vector<AttentionStep>& trace,
                                                            std::size_t grid_h, std::size_t grid_w,
                                                            const std::filesystem::path& dir);

}  // namespace caplab
