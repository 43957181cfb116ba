// caplab: synth-data, train, evaluate, caption, ablate, select-champion.
// Exit status 0 on success, 1 on runtime errors, 2 on usage errors.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <regex>
#include <sstream>

#include <CLI11.hpp>

#include "caplab/experiment.hpp"

using namespace caplab;
namespace fs = std::filesystem;

namespace {

// Bad flag values detected after parsing. The message names the flag.
class UsageError : public std::runtime_error {
 public:
  UsageError(const std::string& flag, const std::string& what) : std::runtime_error(flag + ": " + what) {}
};

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

const CLI::Validator kPositive(
    [](std::string& v) -> std::string {
      double x = 0.0;
      try {
        x = std::stod(v);
      } catch (const std::exception&) {
        return "expected a number, got '" + v + "'";
      }
      return x > 0.0 ? "" : "must be positive, got " + v;
    },
    "POSITIVE");

std::string f4(double v) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(4) << v;
  return s.str();
}

// Flags shared by every command that builds an ExperimentSpec.
struct SpecFlags {
  std::string config;
  std::vector<std::string> sets;

  void add(CLI::App* cmd) {
    cmd->add_option("--config", config, "Experiment spec file ([section] key = value)")->check(CLI::ExistingFile);
    cmd->add_option("--set", sets, "Override one spec key, e.g. --set train.clipnorm=5")->take_all();
  }

  ExperimentSpec load() const {
    ExperimentSpec spec = config.empty() ? ExperimentSpec::defaults() : load_spec(config);
    for (const auto& kv : sets) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw UsageError("--set", "expected key=value, got '" + kv + "'");
      try {
        spec.set(kv.substr(0, eq), kv.substr(eq + 1));
      } catch (const SpecError& e) {
        throw UsageError("--set", e.what());
      }
    }
    return spec;
  }
};

Architecture arch_flag(const std::string& name) {
  try {
    return parse_architecture(name);
  } catch (const ConfigError& e) {
    throw UsageError("--arch", e.what());
  }
}

void validate_spec(const ExperimentSpec& spec) {
  try {
    spec.validate();
  } catch (const SpecError& e) {
    throw UsageError("spec", e.what());
  }
}

fs::path run_dir_of(const fs::path& checkpoint) {
  const fs::path parent = checkpoint.parent_path();
  return parent.filename() == "checkpoints" ? parent.parent_path() : parent;
}

// Decoding flags for evaluate and caption.
struct DecodeFlags {
  std::size_t beam = 0;
  bool greedy = false;
  std::size_t max_len = kMaxDecodeLength;
  double alpha = 0.0;
  CLI::Option* beam_opt = nullptr;

  void add(CLI::App* cmd) {
    beam_opt = cmd->add_option("--beam", beam, "Beam width (default 7)")->check(kPositive);
    auto* g = cmd->add_flag("--greedy", greedy, "Greedy decoding");
    beam_opt->excludes(g);
    cmd->add_option("--max-len", max_len, "Maximum generated tokens")->check(kPositive);
    cmd->add_option("--alpha", alpha, "Length normalisation exponent")->check(CLI::NonNegativeNumber);
  }

  BeamConfig config() const {
    BeamConfig c;
    if (beam_opt->count() > 0) c.beam_width = beam;
    c.max_len = max_len;
    c.length_norm_alpha = alpha;
    return c;
  }
};

void check_vocab(const Checkpoint& ck, const Vocabulary& vocab, const std::string& source) {
  if (vocab.size() != ck.model_config.vocab_size) {
    throw std::runtime_error("vocabulary of " + source + " has " + std::to_string(vocab.size()) +
                             " entries, the checkpoint expects " + std::to_string(ck.model_config.vocab_size));
  }
}

void check_features(const ModelConfig& c, const FeatureGrid& g, const std::string& source) {
  if (g.channels != c.feature_dim) {
    throw FeatureKindError(source + " has " + std::to_string(g.channels) + " channels, the " +
                           architecture_name(c.arch) + " model expects " + std::to_string(c.feature_dim));
  }
  if (c.arch == Architecture::Focalis && (g.height != c.grid_h || g.width != c.grid_w)) {
    throw FeatureKindError(source + " is a " + std::to_string(g.height) + "x" + std::to_string(g.width) +
                           " grid, the focalis model expects " + std::to_string(c.grid_h) + "x" +
                           std::to_string(c.grid_w));
  }
}

// ---------------------------------------------------------------------------

struct SynthFlags {
  std::size_t n = 0;
  std::string grid = "6";
  std::size_t classes = 3, colors = 3, refs = 2, channels = 16;
  double noise = 0.1, two_object_prob = 0.5;
  std::uint64_t seed = 0;
  std::string out;
};

std::pair<std::size_t, std::size_t> parse_grid(const std::string& text) {
  static const std::regex re(R"((\d+)(?:x(\d+))?)");
  std::smatch m;
  if (!std::regex_match(text, m, re)) throw UsageError("--grid", "expected N or HxW, got '" + text + "'");
  const std::size_t h = std::stoul(m[1].str());
  const std::size_t w = m[2].matched ? std::stoul(m[2].str()) : h;
  if (h == 0 || w == 0) throw UsageError("--grid", "extents must be positive");
  return {h, w};
}

int synth_data(const SynthFlags& f) {
  DatasetConfig c;
  c.n_scenes = f.n;
  std::tie(c.grid_h, c.grid_w) = parse_grid(f.grid);
  c.n_classes = f.classes;
  c.n_colors = f.colors;
  c.refs_per_scene = f.refs;
  c.two_object_prob = f.two_object_prob;
  c.source = FeatureSource{f.channels, f.noise, f.seed};
  c.seed = f.seed;
  Dataset ds;
  try {
    ds = gen_dataset(c);
  } catch (const std::invalid_argument& e) {
    throw UsageError("synth-data", e.what());
  }
  write_dataset(ds, f.out);
  std::cout << "wrote " << ds.examples.size() << " scenes (" << c.grid_h << "x" << c.grid_w << " grid, "
            << f.channels << " channels, vocabulary " << ds.vocab.size() << ") to " << f.out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct TrainFlags {
  SpecFlags spec;
  std::string data, val, out, arch;
  std::size_t epochs = 0;
  std::uint64_t seed = 0;
  double lr = 0.0;
  CLI::Option *epochs_opt = nullptr, *seed_opt = nullptr, *lr_opt = nullptr, *out_opt = nullptr,
              *arch_opt = nullptr;
};

int train_cmd(const TrainFlags& f) {
  ExperimentSpec spec = f.spec.load();
  if (f.arch_opt->count() > 0) spec.arch = arch_flag(f.arch);
  if (f.epochs_opt->count() > 0) spec.training.max_epochs = f.epochs;
  if (f.seed_opt->count() > 0) spec.seed = f.seed;
  if (f.lr_opt->count() > 0) spec.training.learning_rate = f.lr;
  if (f.out_opt->count() > 0) spec.output_dir = f.out;

  const Dataset train_set = load_dataset(f.data);
  const Dataset val_set = f.val.empty() ? train_set : load_dataset(f.val);
  if (train_set.examples.empty()) throw std::runtime_error("dataset " + f.data + " holds no scenes");
  if (!(val_set.vocab == train_set.vocab)) throw std::runtime_error("validation vocabulary differs from training");
  const FeatureGrid& g0 = train_set.examples.front().features;
  spec.data.grid_h = g0.height;
  spec.data.grid_w = g0.width;
  spec.data.source.channels = g0.channels;
  validate_spec(spec);

  ModelConfig mc = spec.model_config(spec.arch, train_set.vocab.size());
  mc.feature_dim = g0.channels;
  CaptionModel model = build(mc, spec.seed);
  TrainingConfig tc = spec.training;
  tc.seed = spec.seed;

  const fs::path out = spec.output_dir;
  fs::create_directories(out);
  write_text(out / "spec.txt", spec_text(spec));
  fs::copy_file(fs::path(f.data) / "vocab.tsv", out / "vocab.tsv", fs::copy_options::overwrite_existing);

  std::cout << architecture_name(mc.arch) << ": " << model.params().scalar_count() << " parameters, "
            << train_set.examples.size() << " training scenes, " << val_set.examples.size() << " validation scenes\n";
  TrainOptions opts;
  opts.output_dir = out;
  opts.on_epoch = [](const EpochRecord& e) {
    std::cout << "epoch " << e.epoch << "  train " << f4(e.train_loss) << "  val " << f4(e.val_loss) << "  lr "
              << e.lr << "\n"
              << std::flush;
  };
  const TrainResult r = train(model, train_set.examples, val_set.examples, tc, opts, spec.seed);
  std::cout << (r.stopped_early ? "early stop" : "done") << " after " << r.history.size() << " epochs; "
            << r.checkpoints.size() << " checkpoints in " << (out / "checkpoints").string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct EvalFlags {
  std::string checkpoint, data, out;
  DecodeFlags decode;
};

int evaluate_cmd(const EvalFlags& f) {
  const Checkpoint ck = load_checkpoint(f.checkpoint);
  const Dataset ds = load_dataset(f.data);
  if (ds.examples.empty()) throw std::runtime_error("dataset " + f.data + " holds no scenes");
  check_vocab(ck, ds.vocab, f.data);
  const CaptionModel model = model_from_checkpoint(ck);
  for (const auto& ex : ds.examples) check_features(model.config(), ex.features, "dataset " + f.data);

  const BeamConfig bc = f.decode.config();
  const CorpusReport report = evaluate_corpus(model, ds.examples, ds.vocab, bc, f.decode.greedy);
  const fs::path dir = f.out.empty() ? run_dir_of(f.checkpoint) / "metrics" : fs::path(f.out);
  char name[32];
  std::snprintf(name, sizeof(name), "epoch_%03zu", ck.epoch);
  fs::create_directories(dir);
  write_metrics_csv(report, dir / (std::string(name) + ".csv"));
  std::ostringstream caps;
  for (std::size_t i = 0; i < report.candidates.size(); ++i) {
    caps << report.examples[i].id << '\t';
    for (std::size_t w = 0; w < report.candidates[i].size(); ++w) caps << (w ? " " : "") << report.candidates[i][w];
    caps << '\n';
  }
  write_text(dir / (std::string(name) + ".captions.tsv"), caps.str());

  std::cout << architecture_name(model.config().arch) << " epoch " << ck.epoch << " on " << ds.examples.size()
            << " scenes ("
            << (f.decode.greedy ? std::string("greedy") : "beam " + std::to_string(bc.beam_width)) << ")\n";
  for (int n = 0; n < 4; ++n) std::cout << "BLEU-" << n + 1 << " " << f4(report.bleu[n]) << "\n";
  std::cout << "METEOR " << f4(report.meteor) << "\n"
            << "P/R/F1 " << f4(report.prf.precision) << " " << f4(report.prf.recall) << " " << f4(report.prf.f1)
            << "\n"
            << "metrics: " << (dir / (std::string(name) + ".csv")).string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct CaptionFlags {
  std::string checkpoint, features, vocab, out;
  bool heatmaps = false;
  DecodeFlags decode;
};

int caption_cmd(const CaptionFlags& f) {
  const Checkpoint ck = load_checkpoint(f.checkpoint);
  if (f.heatmaps && !uses_attention(ck.model_config.arch)) {
    throw UsageError("--heatmaps", architecture_name(ck.model_config.arch) +
                                       " has no attention; heatmaps need a focalis checkpoint");
  }
  const fs::path run = run_dir_of(f.checkpoint);
  const fs::path vocab_path = f.vocab.empty() ? run / "vocab.tsv" : fs::path(f.vocab);
  const Vocabulary vocab = Vocabulary::load(vocab_path);
  check_vocab(ck, vocab, vocab_path.string());
  const CaptionModel model = model_from_checkpoint(ck);
  const FeatureGrid grid = load_features(f.features);
  check_features(model.config(), grid, f.features);

  const BeamHypothesis best = generate_caption(model, grid, f.decode.config(), f.decode.greedy);
  const std::vector<std::string> words = vocab.caption_words(best.tokens);
  for (std::size_t w = 0; w < words.size(); ++w) std::cout << (w ? " " : "") << words[w];
  std::cout << "\n";

  if (f.heatmaps) {
    std::vector<AttentionStep> trace;
    for (std::size_t w = 0; w < words.size(); ++w) trace.push_back({words[w], best.attention[w]});
    const fs::path dir = (f.out.empty() ? run : fs::path(f.out)) / "heatmaps";
    const auto written = export_attention_heatmap(trace, model.config().grid_h, model.config().grid_w, dir);
    std::cout << written.size() << " heatmaps in " << dir.string() << "\n";
  }
  return 0;
}

// ---------------------------------------------------------------------------

struct AblateFlags {
  SpecFlags spec;
  std::string seeds, out;
  std::vector<std::string> archs;
  bool quiet = false;
};

int ablate_cmd(const AblateFlags& f) {
  ExperimentSpec spec = f.spec.load();
  if (!f.seeds.empty()) {
    try {
      spec.set("run.seeds", f.seeds);
    } catch (const SpecError& e) {
      throw UsageError("--seeds", e.what());
    }
  }
  if (!f.out.empty()) spec.output_dir = f.out;
  validate_spec(spec);
  std::vector<Architecture> archs;
  if (f.archs.empty()) archs = all_architectures();
  for (const auto& a : f.archs) archs.push_back(arch_flag(a));

  AblationHooks hooks;
  if (!f.quiet) hooks.log = [](const std::string& line) { std::cout << line << "\n" << std::flush; };
  const AblationReport report = run_ablation(spec, archs, hooks);

  const fs::path out = spec.output_dir;
  write_text(out / "spec.txt", spec_text(spec));
  write_text(out / "ablation.csv", ablation_csv(report));
  write_text(out / "ablation.md", ablation_markdown(spec, report));
  std::cout << "focalis beats clarity on every seed: " << (report.focalis_beats_clarity ? "yes" : "no") << "\n"
            << "ordering focalis > contexta >= genesis > clarity: " << (report.full_ordering ? "held" : "did not hold")
            << "\n"
            << "report: " << (out / "ablation.md").string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct ChampionFlags {
  std::string checkpoints, data, scores;
  std::size_t sample = 0;
  DecodeFlags decode;
};

std::map<std::size_t, double> parse_scores(const std::string& text) {
  std::map<std::size_t, double> out;
  std::stringstream ss(text);
  for (std::string part; std::getline(ss, part, ',');) {
    const auto colon = part.find(':');
    try {
      if (colon == std::string::npos) throw std::invalid_argument("missing ':'");
      const std::size_t epoch = std::stoul(part.substr(0, colon));
      const double score = std::stod(part.substr(colon + 1));
      out[epoch] = score;
    } catch (const std::exception&) {
      throw UsageError("--scores", "expected epoch:score[,epoch:score...], got '" + part + "'");
    }
  }
  if (out.empty()) throw UsageError("--scores", "no scores given");
  return out;
}

int select_champion_cmd(const ChampionFlags& f) {
  if (f.checkpoints.empty() && f.scores.empty()) throw UsageError("select-champion", "give --checkpoints or --scores");
  if (!f.checkpoints.empty() && f.scores.empty() && f.data.empty()) {
    throw UsageError("--data", "needed to score checkpoints (or give --scores)");
  }

  std::map<std::size_t, fs::path> files;
  if (!f.checkpoints.empty()) {
    fs::path dir = f.checkpoints;
    if (fs::is_directory(dir / "checkpoints")) dir /= "checkpoints";
    if (!fs::is_directory(dir)) throw std::runtime_error("no checkpoint directory " + dir.string());
    for (const auto& entry : fs::directory_iterator(dir)) {
      if (entry.path().extension() != ".ckpt") continue;
      files[load_checkpoint(entry.path()).epoch] = entry.path();
    }
    if (files.empty()) throw std::runtime_error("no checkpoints in " + dir.string());
  }

  std::vector<ScoredEpoch> scored;
  if (!f.scores.empty()) {
    const auto given = parse_scores(f.scores);
    if (!files.empty()) {
      for (const auto& [epoch, path] : files) {
        if (!given.count(epoch)) throw UsageError("--scores", "no score for epoch " + std::to_string(epoch));
      }
      for (const auto& [epoch, s] : given) {
        if (!files.count(epoch)) throw UsageError("--scores", "no checkpoint for epoch " + std::to_string(epoch));
      }
    }
    for (const auto& [epoch, s] : given) scored.push_back({epoch, s});
  } else {
    Dataset ds = load_dataset(f.data);
    if (ds.examples.empty()) throw std::runtime_error("dataset " + f.data + " holds no scenes");
    if (f.sample > 0 && f.sample < ds.examples.size()) ds.examples.resize(f.sample);
    for (const auto& [epoch, path] : files) {
      const Checkpoint ck = load_checkpoint(path);
      check_vocab(ck, ds.vocab, f.data);
      const CaptionModel model = model_from_checkpoint(ck);
      const CorpusReport r = evaluate_corpus(model, ds.examples, ds.vocab, f.decode.config(), f.decode.greedy);
      scored.push_back({epoch, r.bleu[3]});
    }
  }

  const ScoredEpoch best = select_champion(scored);
  std::cout << "| Epoch | BLEU-4 |\n|---|---|\n";
  for (const auto& s : scored) {
    std::cout << "| " << s.epoch << " | " << f4(s.score) << (s.epoch == best.epoch ? " (champion)" : "") << " |\n";
  }
  std::cout << "champion epoch " << best.epoch << "\n";
  if (!files.empty()) std::cout << files.at(best.epoch).string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Image captioning lab: synthetic data, four captioning architectures, beam search and metrics"};
  app.require_subcommand(1);

  SynthFlags synth;
  auto* synth_cmd = app.add_subcommand("synth-data", "Generate a positional synthetic dataset");
  synth_cmd->add_option("--n", synth.n, "Number of scenes")->required()->check(kPositive);
  synth_cmd->add_option("--grid", synth.grid, "Grid extents, N or HxW")->capture_default_str();
  synth_cmd->add_option("--classes", synth.classes, "Object classes")->capture_default_str()->check(kPositive);
  synth_cmd->add_option("--colors", synth.colors, "Object colours")->capture_default_str()->check(kPositive);
  synth_cmd->add_option("--refs", synth.refs, "References per scene")->capture_default_str()->check(kPositive);
  synth_cmd->add_option("--channels", synth.channels, "Feature channels")->capture_default_str()->check(kPositive);
  synth_cmd->add_option("--noise", synth.noise, "Feature noise sigma")->capture_default_str()->check(CLI::NonNegativeNumber);
  synth_cmd->add_option("--two-object-prob", synth.two_object_prob, "Chance of a second object")
      ->capture_default_str()
      ->check(CLI::Range(0.0, 1.0));
  synth_cmd->add_option("--seed", synth.seed, "Seed")->capture_default_str();
  synth_cmd->add_option("--out", synth.out, "Output directory")->required();

  TrainFlags trainf;
  auto* train_sub = app.add_subcommand("train", "Train one architecture");
  trainf.spec.add(train_sub);
  train_sub->add_option("--data", trainf.data, "Training dataset directory")->required();
  train_sub->add_option("--val", trainf.val, "Validation dataset directory (default: --data)");
  trainf.arch_opt = train_sub->add_option("--arch", trainf.arch, "genesis, contexta, clarity or focalis");
  trainf.epochs_opt = train_sub->add_option("--epochs", trainf.epochs, "Epoch budget")->check(kPositive);
  trainf.seed_opt = train_sub->add_option("--seed", trainf.seed, "Model and shuffling seed");
  trainf.lr_opt = train_sub->add_option("--lr", trainf.lr, "Initial learning rate")->check(kPositive);
  trainf.out_opt = train_sub->add_option("--out", trainf.out, "Run directory");

  EvalFlags evalf;
  auto* eval_sub = app.add_subcommand("evaluate", "Score a checkpoint on a dataset");
  eval_sub->add_option("--checkpoint", evalf.checkpoint, "Checkpoint file")->required();
  eval_sub->add_option("--data", evalf.data, "Dataset directory")->required();
  eval_sub->add_option("--out", evalf.out, "Metrics directory (default: <run>/metrics)");
  evalf.decode.add(eval_sub);

  CaptionFlags capf;
  auto* cap_sub = app.add_subcommand("caption", "Caption one feature file");
  cap_sub->add_option("--checkpoint", capf.checkpoint, "Checkpoint file")->required();
  cap_sub->add_option("--features", capf.features, "Feature grid file")->required();
  cap_sub->add_option("--vocab", capf.vocab, "Vocabulary (default: <run>/vocab.tsv)");
  cap_sub->add_flag("--heatmaps", capf.heatmaps, "Write one PGM and JSON per word (focalis only)");
  cap_sub->add_option("--out", capf.out, "Directory receiving heatmaps/ (default: the run directory)");
  capf.decode.add(cap_sub);

  AblateFlags ablf;
  auto* abl_sub = app.add_subcommand("ablate", "Train every architecture on shared data and seeds");
  ablf.spec.add(abl_sub);
  abl_sub->add_option("--seeds", ablf.seeds, "Comma separated seeds (default 0,1,2)");
  abl_sub->add_option("--archs", ablf.archs, "Architectures to include (default all four)")->delimiter(',');
  abl_sub->add_option("--out", ablf.out, "Report directory");
  abl_sub->add_flag("--quiet", ablf.quiet, "No per-epoch lines");

  ChampionFlags champf;
  auto* champ_sub = app.add_subcommand("select-champion", "Pick the checkpoint with the best BLEU-4");
  champ_sub->add_option("--checkpoints", champf.checkpoints, "Run or checkpoint directory");
  champ_sub->add_option("--data", champf.data, "Dataset the checkpoints are scored on");
  champ_sub->add_option("--sample", champf.sample, "Score only the first N scenes");
  champ_sub->add_option("--scores", champf.scores, "Scripted scores, epoch:bleu4[,...]");
  champf.decode.add(champ_sub);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*synth_cmd) return synth_data(synth);
    if (*train_sub) return train_cmd(trainf);
    if (*eval_sub) return evaluate_cmd(evalf);
    if (*cap_sub) return caption_cmd(capf);
    if (*abl_sub) return ablate_cmd(ablf);
    if (*champ_sub) return select_champion_cmd(champf);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return 1;
  } catch (const FeatureKindError& e) {
    std::cerr << "feature/model mismatch: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
