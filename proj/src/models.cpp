#include "caplab/models.hpp"

#include <algorithm>

namespace caplab {

namespace {

const std::vector<std::pair<Architecture, std::string>>& arch_names() {
  static const std::vector<std::pair<Architecture, std::string>> names = {
      {Architecture::Genesis, "genesis"},
      {Architecture::Contexta, "contexta"},
      {Architecture::Clarity, "clarity"},
      {Architecture::Focalis, "focalis"},
  };
  return names;
}

std::size_t output_in_dim(const ModelConfig& c) {
  return bidirectional_decoder(c.arch) ? 3 * c.decoder_units : c.decoder_units;
}

std::size_t decoder_in_dim(const ModelConfig& c) {
  return uses_attention(c.arch) ? c.embed_dim + 2 * c.spatial_units() : c.embed_dim;
}

std::size_t lstm_count(std::size_t in, std::size_t u) { return in * 4 * u + u * 4 * u + 4 * u; }

void check_caption(const std::vector<int>& caption, std::size_t vocab) {
  if (caption.size() < 2) throw ContractError("caption needs at least a start and an end token");
  if (caption.front() != kStartId) throw ContractError("caption must begin with the start token");
  for (int id : caption) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw IndexError("token id " + std::to_string(id) + " out of range for V=" + std::to_string(vocab));
    }
  }
}

Tensor pooled_logits(const CaptionModel& model, const Tensor& h, const Tensor& img, const Tensor& hb) {
  if (model.config().arch == Architecture::Genesis) return model.output.forward(add(h, img));
  return model.output.forward(concat({h, hb, img}, 0));
}

// Backward decoder direction over prefix tokens y_t .. y_0, seeded with the image.
Tensor backward_summary(const CaptionModel& model, const Tensor& img, std::span<const Tensor> embedded) {
  LstmState s{img, img};
  for (std::size_t k = embedded.size(); k-- > 0;) s = lstm_step(model.decoder_bwd, embedded[k], s.h, s.c);
  return s.h;
}

}  // namespace

std::string architecture_name(Architecture arch) {
  for (const auto& [a, n] : arch_names()) {
    if (a == arch) return n;
  }
  throw ConfigError("unknown architecture");
}

Architecture parse_architecture(std::string_view name) {
  std::string valid;
  for (const auto& [a, n] : arch_names()) {
    if (n == name) return a;
    valid += (valid.empty() ? "" : ", ") + n;
  }
  throw ConfigError("unknown architecture '" + std::string(name) + "'; valid: " + valid);
}

const std::vector<Architecture>& all_architectures() {
  static const std::vector<Architecture> archs = {Architecture::Genesis, Architecture::Contexta,
                                                  Architecture::Clarity, Architecture::Focalis};
  return archs;
}

bool uses_attention(Architecture arch) { return arch == Architecture::Focalis; }

bool bidirectional_decoder(Architecture arch) {
  return arch == Architecture::Contexta || arch == Architecture::Clarity;
}

ModelConfig ModelConfig::make(Architecture arch, std::size_t vocab_size, std::size_t feature_dim) {
  ModelConfig c;
  c.arch = arch;
  c.vocab_size = vocab_size;
  c.feature_dim = feature_dim;
  c.fusion = arch == Architecture::Genesis ? Fusion::Add : Fusion::Concat;
  return c;
}

void ModelConfig::validate() const {
  const std::string name = architecture_name(arch);
  if (vocab_size <= static_cast<std::size_t>(kEndId)) {
    throw ConfigError(name + ": vocab_size must cover the start and end tokens");
  }
  if (embed_dim == 0 || decoder_units == 0 || feature_dim == 0) {
    throw ConfigError(name + ": embed_dim, decoder_units and feature_dim must be positive");
  }
  if (arch == Architecture::Genesis && fusion != Fusion::Add) throw ConfigError("genesis requires additive fusion");
  if (bidirectional_decoder(arch) && fusion != Fusion::Concat) {
    throw ConfigError(name + " requires concatenate fusion");
  }
  if (uses_attention(arch)) {
    if (grid_h == 0 || grid_w == 0) throw ConfigError("focalis requires grid_h and grid_w");
    if (attn_dim == 0) throw ConfigError("focalis requires a positive attn_dim");
  }
}

std::size_t expected_parameter_count(const ModelConfig& c) {
  c.validate();
  const std::size_t V = c.vocab_size, E = c.embed_dim, u = c.decoder_units;
  std::size_t n = V * E + lstm_count(decoder_in_dim(c), u) + output_in_dim(c) * V + V;
  if (uses_attention(c.arch)) {
    const std::size_t e = c.spatial_units();
    n += 2 * lstm_count(c.feature_dim, e);
    n += u * c.attn_dim + 2 * e * c.attn_dim + c.attn_dim;
  } else {
    n += c.feature_dim * u + u;
    if (bidirectional_decoder(c.arch)) n += lstm_count(E, u);
  }
  return n;
}

CaptionModel build(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  CaptionModel m;
  m.config_ = config;
  Rng rng(seed);
  auto& p = m.params_;
  const std::size_t u = config.decoder_units;

  m.embedding = Embedding::create(config.vocab_size, config.embed_dim, rng);
  p.add("embedding", m.embedding.table);
  auto add_cell = [&](const std::string& prefix, const LstmCell& cell) {
    p.add(prefix + ".W", cell.W);
    p.add(prefix + ".U", cell.U);
    p.add(prefix + ".b", cell.b);
  };

  if (uses_attention(config.arch)) {
    const std::size_t e = config.spatial_units();
    m.encoder = BiLstm::create(config.feature_dim, e, rng);
    add_cell("encoder.fwd", m.encoder.forward);
    add_cell("encoder.bwd", m.encoder.backward);
    m.attention = AdditiveAttention::create(u, 2 * e, config.attn_dim, rng, config.score_form);
    p.add("attention.Wq", m.attention.Wq);
    p.add("attention.Wk", m.attention.Wk);
    p.add("attention.v", m.attention.v);
  } else {
    m.image_proj = Dense::create(config.feature_dim, u, rng);
    p.add("image_proj.weight", m.image_proj.weight);
    p.add("image_proj.bias", m.image_proj.bias);
  }

  m.decoder = LstmCell::create(decoder_in_dim(config), u, rng);
  add_cell("decoder", m.decoder);
  if (bidirectional_decoder(config.arch)) {
    m.decoder_bwd = LstmCell::create(config.embed_dim, u, rng);
    add_cell("decoder_bwd", m.decoder_bwd);
  }

  m.output = Dense::create(output_in_dim(config), config.vocab_size, rng);
  p.add("output.weight", m.output.weight);
  p.add("output.bias", m.output.bias);
  return m;
}

Features features_for(const ModelConfig& config, const FeatureGrid& grid) {
  if (uses_attention(config.arch)) return grid;
  return to_vector(grid);
}

EncodedImage encode_image(const CaptionModel& model, const Features& features) {
  const ModelConfig& c = model.config();
  const std::string name = architecture_name(c.arch);
  EncodedImage out;
  if (uses_attention(c.arch)) {
    const auto* grid = std::get_if<FeatureGrid>(&features);
    if (grid == nullptr) throw FeatureKindError(name + " consumes a feature grid, got a pooled vector");
    if (grid->height != c.grid_h || grid->width != c.grid_w || grid->channels != c.feature_dim) {
      throw FeatureKindError(name + " expects a " + std::to_string(c.grid_h) + "x" + std::to_string(c.grid_w) + "x" +
                             std::to_string(c.feature_dim) + " grid, got " + std::to_string(grid->height) + "x" +
                             std::to_string(grid->width) + "x" + std::to_string(grid->channels));
    }
    out.values = encode_spatial(model.encoder, grid->to_tensor()).encoded;
    out.keys = attention_keys(model.attention, out.values);
  } else {
    const auto* vec = std::get_if<FeatureVector>(&features);
    if (vec == nullptr) throw FeatureKindError(name + " consumes a pooled feature vector, got a grid");
    if (vec->dim() != c.feature_dim) {
      throw FeatureKindError(name + " expects " + std::to_string(c.feature_dim) + " feature channels, got " +
                             std::to_string(vec->dim()));
    }
    out.img = tanh(model.image_proj.forward(vec->to_tensor()));
  }
  return out;
}

std::vector<Tensor> teacher_forced_logits(const CaptionModel& model, const EncodedImage& image,
                                          const std::vector<int>& caption) {
  const ModelConfig& c = model.config();
  check_caption(caption, c.vocab_size);
  const std::size_t steps = caption.size() - 1;
  std::vector<Tensor> logits;
  logits.reserve(steps);

  if (uses_attention(c.arch)) {
    LstmState s = zero_state(c.decoder_units);
    for (std::size_t t = 0; t < steps; ++t) {
      const Tensor ctx = attend_with_keys(model.attention, s.h, image.values, image.keys).context;
      const Tensor x = concat({model.embedding.lookup(caption[t]), ctx}, 0);
      s = lstm_step(model.decoder, x, s.h, s.c);
      logits.push_back(model.output.forward(s.h));
    }
    return logits;
  }

  std::vector<Tensor> embedded;
  embedded.reserve(steps);
  LstmState s{image.img, image.img};
  for (std::size_t t = 0; t < steps; ++t) {
    embedded.push_back(model.embedding.lookup(caption[t]));
    s = lstm_step(model.decoder, embedded.back(), s.h, s.c);
    Tensor hb;
    if (bidirectional_decoder(c.arch)) hb = backward_summary(model, image.img, embedded);
    logits.push_back(pooled_logits(model, s.h, image.img, hb));
  }
  return logits;
}

Tensor forward_train(const CaptionModel& model, const Features& features, const std::vector<int>& caption,
                     double epsilon) {
  check_caption(caption, model.config().vocab_size);
  const EncodedImage image = encode_image(model, features);
  const auto logits = teacher_forced_logits(model, image, caption);
  std::vector<Tensor> losses;
  losses.reserve(logits.size());
  for (std::size_t t = 0; t < logits.size(); ++t) losses.push_back(label_smoothed_ce(logits[t], caption[t + 1], epsilon));
  return scale(sum(concat(losses, 0)), 1.0 / static_cast<double>(losses.size()));
}

Tensor batch_loss(const CaptionModel& model, const std::vector<EncodedImage>& images,
                  const std::vector<std::size_t>& row_image, const Batch& batch, double epsilon) {
  if (row_image.size() != batch.rows) {
    throw ContractError("batch_loss: " + std::to_string(row_image.size()) + " image indices for " +
                        std::to_string(batch.rows) + " rows");
  }
  std::vector<Tensor> losses;
  for (std::size_t r = 0; r < batch.rows; ++r) {
    std::vector<int> caption;
    for (std::size_t col = 0; col < batch.cols && batch.real(r, col); ++col) caption.push_back(batch.at(r, col));
    if (caption.empty()) continue;
    if (row_image[r] >= images.size()) throw IndexError("batch_loss: image index out of range");
    const auto logits = teacher_forced_logits(model, images[row_image[r]], caption);
    for (std::size_t t = 0; t < logits.size(); ++t) {
      losses.push_back(label_smoothed_ce(logits[t], caption[t + 1], epsilon));
    }
  }
  if (losses.empty()) throw ContractError("batch_loss: batch holds no real predictions");
  return scale(sum(concat(losses, 0)), 1.0 / static_cast<double>(losses.size()));
}

DecodeState init_state(const CaptionModel& model, const Features& features) {
  DecodeState s;
  s.arch = model.config().arch;
  s.image = encode_image(model, features);
  s.lstm = uses_attention(s.arch) ? zero_state(model.config().decoder_units) : LstmState{s.image.img, s.image.img};
  s.valid = true;
  return s;
}

StepOutput decode_step(const CaptionModel& model, const DecodeState& state, int token) {
  const ModelConfig& c = model.config();
  if (!state.valid || state.arch != c.arch) {
    throw ContractError("decode_step: state was not produced by init_state for this " + architecture_name(c.arch) +
                        " model");
  }
  if (token < 0 || static_cast<std::size_t>(token) >= c.vocab_size) {
    throw IndexError("token id " + std::to_string(token) + " out of range for V=" + std::to_string(c.vocab_size));
  }
  StepOutput out;
  out.state = state;
  out.state.prefix.push_back(token);
  const Tensor x_emb = model.embedding.lookup(token);

  if (uses_attention(c.arch)) {
    const AttentionResult a = attend_with_keys(model.attention, state.lstm.h, state.image.values, state.image.keys);
    out.state.lstm = lstm_step(model.decoder, concat({x_emb, a.context}, 0), state.lstm.h, state.lstm.c);
    out.logits = model.output.forward(out.state.lstm.h);
    out.attention = a.weights;
    return out;
  }

  out.state.lstm = lstm_step(model.decoder, x_emb, state.lstm.h, state.lstm.c);
  Tensor hb;
  if (bidirectional_decoder(c.arch)) {
    std::vector<Tensor> embedded;
    embedded.reserve(out.state.prefix.size());
    for (int id : out.state.prefix) embedded.push_back(model.embedding.lookup(id));
    hb = backward_summary(model, state.image.img, embedded);
  }
  out.logits = pooled_logits(model, out.state.lstm.h, state.image.img, hb);
  return out;
}

}  // namespace caplab
