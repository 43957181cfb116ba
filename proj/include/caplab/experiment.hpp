#pragma once

// Experiment specs (flat key=value text with [section] headers) and the
// bottleneck ablation: every architecture trained on the same positional
// data, budget and seeds, then scored on a held-out split.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "caplab/data.hpp"
#include "caplab/inference.hpp"
#include "caplab/models.hpp"
#include "caplab/training.hpp"

namespace caplab {

class SpecError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ExperimentSpec {
  // [data]; `data.source` is the base feature source, `rich_channels` and
  // `rich_noise` the richer one used by clarity and focalis.
  DatasetConfig data;
  std::size_t val_scenes = 100;
  std::size_t test_scenes = 200;
  std::size_t rich_channels = 32;
  double rich_noise = 0.1;
  // [model]
  Architecture arch = Architecture::Focalis;
  std::size_t embed_dim = 16;
  std::size_t decoder_units = 32;
  std::size_t attn_dim = 32;
  std::size_t encoder_units = 32;
  ScoreForm score_form = ScoreForm::Additive;
  // [train]
  TrainingConfig training;
  // [beam]
  BeamConfig beam;
  // [run]
  std::uint64_t seed = 0;
  std::vector<std::uint64_t> seeds = {0, 1, 2};
  std::filesystem::path output_dir = "runs/experiment";

  // Desk-scale defaults of the ablation.
  static ExperimentSpec defaults();

  // `section.key` form, e.g. "train.learning_rate". Throws SpecError.
  void set(std::string_view key, std::string_view value);
  void validate() const;

  // Feature source an architecture sees.
  FeatureSource source_for(Architecture a) const;
  ModelConfig model_config(Architecture a, std::size_t vocab_size) const;
};

ExperimentSpec parse_spec(std::string_view text);
ExperimentSpec load_spec(const std::filesystem::path& path);
// Canonical text; parse_spec(spec_text(s)) reproduces s.
std::string spec_text(const ExperimentSpec& spec);

struct AblationSplits {
  Dataset train;
  Dataset val;
  Dataset test;
};

// Splits for one seed, rendered with the feature source of `arch`.
AblationSplits ablation_splits(const ExperimentSpec& spec, Architecture arch, std::uint64_t seed);

struct AblationRun {
  Architecture arch = Architecture::Genesis;
  std::uint64_t seed = 0;
  double bleu[4] = {0, 0, 0, 0};
  double meteor = 0.0;
  double f1 = 0.0;
  std::size_t epochs = 0;
  double final_val_loss = 0.0;
};

struct AblationReport {
  std::vector<AblationRun> runs;
  bool focalis_beats_clarity = false;  // every seed, BLEU-4
  bool full_ordering = false;          // focalis > contexta >= genesis > clarity, seed means
};

struct AblationHooks {
  std::function<void(const std::string&)> log;
  // Called with each trained model and the splits it was scored on.
  std::function<void(const CaptionModel&, const AblationSplits&, const AblationRun&)> on_trained;
};

AblationRun run_one(const ExperimentSpec& spec, Architecture arch, std::uint64_t seed,
                    const AblationHooks& hooks = {});
AblationReport run_ablation(const ExperimentSpec& spec, const std::vector<Architecture>& archs,
                            const AblationHooks& hooks = {});
void summarize(AblationReport& report);

std::string ablation_csv(const AblationReport& report);
std::string ablation_markdown(const ExperimentSpec& spec, const AblationReport& report);

}  // namespace caplab
