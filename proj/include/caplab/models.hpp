#pragma once

// The four captioning architectures behind one interface: a teacher-forced
// loss and a single-step decoder.

#include <cstdint>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "caplab/data.hpp"
#include "caplab/features.hpp"
#include "caplab/layers.hpp"

namespace caplab {

inline constexpr std::size_t kMaxDecodeLength = 30;

enum class Architecture { Genesis, Contexta, Clarity, Focalis };
enum class Fusion { Add, Concat };

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class FeatureKindError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

std::string architecture_name(Architecture arch);
// Throws ConfigError listing the valid names.
Architecture parse_architecture(std::string_view name);
const std::vector<Architecture>& all_architectures();
bool uses_attention(Architecture arch);
bool bidirectional_decoder(Architecture arch);

struct ModelConfig {
  Architecture arch = Architecture::Genesis;
  std::size_t vocab_size = 0;
  std::size_t embed_dim = 32;
  std::size_t decoder_units = 256;
  std::size_t feature_dim = 0;
  std::size_t grid_h = 0;  // focalis only
  std::size_t grid_w = 0;
  std::size_t attn_dim = 256;
  std::size_t encoder_units = 0;  // focalis spatial encoder, 0 = decoder_units
  Fusion fusion = Fusion::Add;
  ScoreForm score_form = ScoreForm::Additive;

  // Config with the fusion mode the architecture requires.
  static ModelConfig make(Architecture arch, std::size_t vocab_size, std::size_t feature_dim);

  std::size_t spatial_units() const { return encoder_units == 0 ? decoder_units : encoder_units; }
  void validate() const;
};

using Features = std::variant<FeatureVector, FeatureGrid>;

class CaptionModel {
 public:
  const ModelConfig& config() const { return config_; }
  ParameterStore& params() { return params_; }
  const ParameterStore& params() const { return params_; }

  Embedding embedding;
  Dense image_proj;        // genesis/contexta/clarity
  LstmCell decoder;
  LstmCell decoder_bwd;    // contexta/clarity
  BiLstm encoder;          // focalis
  AdditiveAttention attention;  // focalis
  Dense output;

 private:
  friend CaptionModel build(const ModelConfig& config, std::uint64_t seed);
  ModelConfig config_;
  ParameterStore params_;
};

CaptionModel build(const ModelConfig& config, std::uint64_t seed);

// Closed-form parameter count for a config.
std::size_t expected_parameter_count(const ModelConfig& config);

// The feature kind an architecture consumes, derived from a grid: GAP vector
// for the pooled models, the grid itself for focalis.
Features features_for(const ModelConfig& config, const FeatureGrid& grid);

// Per-image tensors computed once and shared by every caption step.
struct EncodedImage {
  Tensor img;     // projected image vector [u], pooled models
  Tensor values;  // encoded patches [S x 2e], focalis
  Tensor keys;    // projected keys, focalis
};

EncodedImage encode_image(const CaptionModel& model, const Features& features);

// logits for positions 0..T-2 with caption[0..t] as the decoder input.
std::vector<Tensor> teacher_forced_logits(const CaptionModel& model, const EncodedImage& image,
                                          const std::vector<int>& caption);

// Mean label-smoothed cross-entropy over the caption's T-1 predictions.
Tensor forward_train(const CaptionModel& model, const Features& features, const std::vector<int>& caption,
                     double epsilon = 0.1);

// Mean over every real prediction in a padded batch. Row r uses
// images[row_image[r]]; rows whose mask is all zero contribute nothing.
Tensor batch_loss(const CaptionModel& model, const std::vector<EncodedImage>& images,
                  const std::vector<std::size_t>& row_image, const Batch& batch, double epsilon);

struct DecodeState {
  Architecture arch = Architecture::Genesis;
  EncodedImage image;
  LstmState lstm;
  std::vector<int> prefix;  // tokens consumed so far
  bool valid = false;
};

struct StepOutput {
  Tensor logits;
  DecodeState state;
  Tensor attention;  // [S] for focalis, undefined otherwise
};

DecodeState init_state(const CaptionModel& model, const Features& features);
StepOutput decode_step(const CaptionModel& model, const DecodeState& state, int token);

}  // namespace caplab
