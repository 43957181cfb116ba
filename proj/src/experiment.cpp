#include "caplab/experiment.hpp"

#include <charconv>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

namespace caplab {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <typename T>
T parse_number(std::string_view key, std::string_view value) {
  T out{};
  const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc{} || ptr != value.data() + value.size() || value.empty()) {
    throw SpecError("bad value '" + std::string(value) + "' for " + std::string(key));
  }
  return out;
}

std::string fmt(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

std::string score_form_name(ScoreForm f) { return f == ScoreForm::Additive ? "additive" : "multiplicative"; }

double mean_bleu4(const AblationReport& r, Architecture a, bool& present) {
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& run : r.runs) {
    if (run.arch != a) continue;
    total += run.bleu[3];
    ++n;
  }
  present = n > 0;
  return n == 0 ? 0.0 : total / static_cast<double>(n);
}

}  // namespace

ExperimentSpec ExperimentSpec::defaults() {
  ExperimentSpec s;
  s.data.n_scenes = 500;
  s.data.grid_h = 6;
  s.data.grid_w = 6;
  s.data.refs_per_scene = 2;
  s.data.source = FeatureSource{16, 0.2, 1000};
  s.training.learning_rate = 5e-3;
  s.training.max_epochs = 40;
  s.training.batch_size = 32;
  s.training.plateau_patience = 3;
  s.training.early_stop_patience = 40;
  s.beam.beam_width = 3;
  return s;
}

void ExperimentSpec::set(std::string_view key, std::string_view raw) {
  const std::string value = trim(raw);
  const auto u = [&] { return parse_number<std::uint64_t>(key, value); };
  const auto z = [&] { return static_cast<std::size_t>(u()); };
  const auto d = [&] { return parse_number<double>(key, value); };

  if (key == "data.scenes") data.n_scenes = z();
  else if (key == "data.val_scenes") val_scenes = z();
  else if (key == "data.test_scenes") test_scenes = z();
  else if (key == "data.grid_h") data.grid_h = z();
  else if (key == "data.grid_w") data.grid_w = z();
  else if (key == "data.classes") data.n_classes = z();
  else if (key == "data.colors") data.n_colors = z();
  else if (key == "data.refs_per_scene") data.refs_per_scene = z();
  else if (key == "data.two_object_prob") data.two_object_prob = d();
  else if (key == "data.channels") data.source.channels = z();
  else if (key == "data.noise_sigma") data.source.noise_sigma = d();
  else if (key == "data.embedding_seed") data.source.embedding_seed = u();
  else if (key == "data.seed") data.seed = u();
  else if (key == "data.rich_channels") rich_channels = z();
  else if (key == "data.rich_noise") rich_noise = d();
  else if (key == "model.arch") {
    try {
      arch = parse_architecture(value);
    } catch (const ConfigError& e) {
      throw SpecError(std::string(key) + ": " + e.what());
    }
  } else if (key == "model.embed_dim") embed_dim = z();
  else if (key == "model.decoder_units") decoder_units = z();
  else if (key == "model.attn_dim") attn_dim = z();
  else if (key == "model.encoder_units") encoder_units = z();
  else if (key == "model.score_form") {
    if (value == "additive") score_form = ScoreForm::Additive;
    else if (value == "multiplicative") score_form = ScoreForm::Multiplicative;
    else throw SpecError("model.score_form must be additive or multiplicative, got '" + value + "'");
  } else if (key == "train.learning_rate") training.learning_rate = d();
  else if (key == "train.clipnorm") training.clipnorm = d();
  else if (key == "train.label_epsilon") training.label_epsilon = d();
  else if (key == "train.plateau_patience") training.plateau_patience = z();
  else if (key == "train.plateau_factor") training.plateau_factor = d();
  else if (key == "train.early_stop_patience") training.early_stop_patience = z();
  else if (key == "train.max_epochs") training.max_epochs = z();
  else if (key == "train.batch_size") training.batch_size = z();
  else if (key == "train.min_delta") training.min_delta = d();
  else if (key == "beam.width") beam.beam_width = z();
  else if (key == "beam.max_len") beam.max_len = z();
  else if (key == "beam.alpha") beam.length_norm_alpha = d();
  else if (key == "run.seed") seed = u();
  else if (key == "run.seeds") {
    std::vector<std::uint64_t> out;
    std::stringstream ss(value);
    for (std::string part; std::getline(ss, part, ',');) out.push_back(parse_number<std::uint64_t>(key, trim(part)));
    if (out.empty()) throw SpecError("run.seeds needs at least one seed");
    seeds = out;
  } else if (key == "run.output_dir") output_dir = value;
  else throw SpecError("unknown key '" + std::string(key) + "'");
}

void ExperimentSpec::validate() const {
  try {
    if (data.n_scenes == 0 || val_scenes == 0 || test_scenes == 0) throw SpecError("scene counts must be positive");
    if (rich_channels == 0) throw SpecError("data.rich_channels must be positive");
    if (!(rich_noise >= 0.0) || !(data.source.noise_sigma >= 0.0)) throw SpecError("noise must be non-negative");
    if (seeds.empty()) throw SpecError("run.seeds needs at least one seed");
    training.validate();
    beam.validate();
    model_config(arch, 5).validate();
  } catch (const SpecError&) {
    throw;
  } catch (const std::exception& e) {
    throw SpecError(e.what());
  }
}

FeatureSource ExperimentSpec::source_for(Architecture a) const {
  if (a == Architecture::Clarity || a == Architecture::Focalis) {
    return FeatureSource{rich_channels, rich_noise, data.source.embedding_seed};
  }
  return data.source;
}

ModelConfig ExperimentSpec::model_config(Architecture a, std::size_t vocab_size) const {
  ModelConfig c = ModelConfig::make(a, vocab_size, source_for(a).channels);
  c.embed_dim = embed_dim;
  c.decoder_units = decoder_units;
  c.attn_dim = attn_dim;
  c.encoder_units = encoder_units;
  c.score_form = score_form;
  c.grid_h = data.grid_h;
  c.grid_w = data.grid_w;
  return c;
}

ExperimentSpec parse_spec(std::string_view text) {
  ExperimentSpec spec = ExperimentSpec::defaults();
  std::istringstream in{std::string(text)};
  std::string section;
  std::size_t line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    const auto hash = line.find_first_of("#;");
    const std::string content = trim(hash == std::string::npos ? line : line.substr(0, hash));
    if (content.empty()) continue;
    const std::string where = "line " + std::to_string(line_no) + ": ";
    if (content.front() == '[') {
      if (content.back() != ']') throw SpecError(where + "unterminated section header");
      section = trim(content.substr(1, content.size() - 2));
      continue;
    }
    const auto eq = content.find('=');
    if (eq == std::string::npos) throw SpecError(where + "expected key = value");
    if (section.empty()) throw SpecError(where + "key outside any [section]");
    try {
      spec.set(section + "." + trim(content.substr(0, eq)), content.substr(eq + 1));
    } catch (const SpecError& e) {
      throw SpecError(where + e.what());
    }
  }
  return spec;
}

ExperimentSpec load_spec(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw SpecError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_spec(ss.str());
}

std::string spec_text(const ExperimentSpec& s) {
  std::ostringstream out;
  out << "[data]\n"
      << "scenes = " << s.data.n_scenes << "\n"
      << "val_scenes = " << s.val_scenes << "\n"
      << "test_scenes = " << s.test_scenes << "\n"
      << "grid_h = " << s.data.grid_h << "\n"
      << "grid_w = " << s.data.grid_w << "\n"
      << "classes = " << s.data.n_classes << "\n"
      << "colors = " << s.data.n_colors << "\n"
      << "refs_per_scene = " << s.data.refs_per_scene << "\n"
      << "two_object_prob = " << fmt(s.data.two_object_prob) << "\n"
      << "channels = " << s.data.source.channels << "\n"
      << "noise_sigma = " << fmt(s.data.source.noise_sigma) << "\n"
      << "embedding_seed = " << s.data.source.embedding_seed << "\n"
      << "seed = " << s.data.seed << "\n"
      << "rich_channels = " << s.rich_channels << "\n"
      << "rich_noise = " << fmt(s.rich_noise) << "\n"
      << "\n[model]\n"
      << "arch = " << architecture_name(s.arch) << "\n"
      << "embed_dim = " << s.embed_dim << "\n"
      << "decoder_units = " << s.decoder_units << "\n"
      << "attn_dim = " << s.attn_dim << "\n"
      << "encoder_units = " << s.encoder_units << "\n"
      << "score_form = " << score_form_name(s.score_form) << "\n"
      << "\n[train]\n"
      << "learning_rate = " << fmt(s.training.learning_rate) << "\n"
      << "clipnorm = " << fmt(s.training.clipnorm) << "\n"
      << "label_epsilon = " << fmt(s.training.label_epsilon) << "\n"
      << "plateau_patience = " << s.training.plateau_patience << "\n"
      << "plateau_factor = " << fmt(s.training.plateau_factor) << "\n"
      << "early_stop_patience = " << s.training.early_stop_patience << "\n"
      << "max_epochs = " << s.training.max_epochs << "\n"
      << "batch_size = " << s.training.batch_size << "\n"
      << "min_delta = " << fmt(s.training.min_delta) << "\n"
      << "\n[beam]\n"
      << "width = " << s.beam.beam_width << "\n"
      << "max_len = " << s.beam.max_len << "\n"
      << "alpha = " << fmt(s.beam.length_norm_alpha) << "\n"
      << "\n[run]\n"
      << "seed = " << s.seed << "\n"
      << "seeds = ";
  for (std::size_t i = 0; i < s.seeds.size(); ++i) out << (i ? "," : "") << s.seeds[i];
  out << "\noutput_dir = " << s.output_dir.string() << "\n";
  return out.str();
}

AblationSplits ablation_splits(const ExperimentSpec& spec, Architecture arch, std::uint64_t seed) {
  DatasetConfig base = spec.data;
  base.source.embedding_seed = spec.data.source.embedding_seed + seed;
  const auto split = [&](std::size_t n, std::uint64_t offset) {
    DatasetConfig c = base;
    c.n_scenes = n;
    c.seed = spec.data.seed + 3 * seed + offset;
    Dataset ds = gen_dataset(c);
    FeatureSource src = spec.source_for(arch);
    src.embedding_seed = base.source.embedding_seed;
    if (src.channels == c.source.channels && src.noise_sigma == c.source.noise_sigma) return ds;
    return render_with_source(ds, c, src);
  };
  return {split(spec.data.n_scenes, 1), split(spec.val_scenes, 2), split(spec.test_scenes, 3)};
}

AblationRun run_one(const ExperimentSpec& spec, Architecture arch, std::uint64_t seed, const AblationHooks& hooks) {
  const AblationSplits splits = ablation_splits(spec, arch, seed);
  CaptionModel model = build(spec.model_config(arch, splits.train.vocab.size()), seed);
  TrainingConfig tc = spec.training;
  tc.seed = seed;
  TrainOptions opts;
  if (hooks.log) {
    opts.on_epoch = [&](const EpochRecord& e) {
      std::ostringstream msg;
      msg << architecture_name(arch) << " seed " << seed << " epoch " << e.epoch << " train " << std::fixed
          << std::setprecision(4) << e.train_loss << " val " << e.val_loss << " lr " << std::setprecision(6) << e.lr;
      hooks.log(msg.str());
    };
  }
  const TrainResult tr = train(model, splits.train.examples, splits.val.examples, tc, opts, seed);
  const CorpusReport eval = evaluate_corpus(model, splits.test.examples, splits.test.vocab, spec.beam);

  AblationRun run;
  run.arch = arch;
  run.seed = seed;
  for (int n = 0; n < 4; ++n) run.bleu[n] = eval.bleu[n];
  run.meteor = eval.meteor;
  run.f1 = eval.prf.f1;
  run.epochs = tr.history.size();
  run.final_val_loss = tr.history.back().val_loss;
  if (hooks.log) {
    std::ostringstream msg;
    msg << architecture_name(arch) << " seed " << seed << " test BLEU-4 " << std::fixed << std::setprecision(4)
        << run.bleu[3];
    hooks.log(msg.str());
  }
  if (hooks.on_trained) hooks.on_trained(model, splits, run);
  return run;
}

void summarize(AblationReport& report) {
  std::map<std::uint64_t, std::pair<double, double>> per_seed;  // focalis, clarity
  std::map<std::uint64_t, int> seen;
  for (const auto& r : report.runs) {
    if (r.arch == Architecture::Focalis) {
      per_seed[r.seed].first = r.bleu[3];
      seen[r.seed] |= 1;
    } else if (r.arch == Architecture::Clarity) {
      per_seed[r.seed].second = r.bleu[3];
      seen[r.seed] |= 2;
    }
  }
  report.focalis_beats_clarity = !per_seed.empty();
  for (const auto& [seed, pair] : per_seed) {
    report.focalis_beats_clarity = report.focalis_beats_clarity && seen[seed] == 3 && pair.first > pair.second;
  }
  bool pf, pc, pg, pl;
  const double f = mean_bleu4(report, Architecture::Focalis, pf);
  const double c = mean_bleu4(report, Architecture::Contexta, pc);
  const double g = mean_bleu4(report, Architecture::Genesis, pg);
  const double l = mean_bleu4(report, Architecture::Clarity, pl);
  report.full_ordering = pf && pc && pg && pl && f > c && c >= g && g > l;
}

AblationReport run_ablation(const ExperimentSpec& spec, const std::vector<Architecture>& archs,
                            const AblationHooks& hooks) {
  spec.validate();
  AblationReport report;
  for (std::uint64_t seed : spec.seeds) {
    for (Architecture a : archs) report.runs.push_back(run_one(spec, a, seed, hooks));
  }
  summarize(report);
  return report;
}

std::string ablation_csv(const AblationReport& report) {
  std::ostringstream out;
  out << "arch,seed,bleu1,bleu2,bleu3,bleu4,meteor,f1,epochs,final_val_loss\n" << std::fixed << std::setprecision(6);
  for (const auto& r : report.runs) {
    out << architecture_name(r.arch) << ',' << r.seed;
    for (double b : r.bleu) out << ',' << b;
    out << ',' << r.meteor << ',' << r.f1 << ',' << r.epochs << ',' << r.final_val_loss << '\n';
  }
  return out.str();
}

std::string ablation_markdown(const ExperimentSpec& spec, const AblationReport& report) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(4);
  out << "# Bottleneck ablation\n\n"
      << "Corpus metrics on the held-out positional test split (" << spec.test_scenes << " scenes, grid "
      << spec.data.grid_h << "x" << spec.data.grid_w << "). P/R/F1 is unigram overlap with the best reference.\n\n"
      << "| arch | seed | BLEU-1 | BLEU-2 | BLEU-3 | BLEU-4 | METEOR | F1 | epochs | final val loss |\n"
      << "|---|---|---|---|---|---|---|---|---|---|\n";
  for (const auto& r : report.runs) {
    out << "| " << architecture_name(r.arch) << " | " << r.seed;
    for (double b : r.bleu) out << " | " << b;
    out << " | " << r.meteor << " | " << r.f1 << " | " << r.epochs << " | " << r.final_val_loss << " |\n";
  }
  out << "\n## Mean BLEU-4 per architecture\n\n| arch | mean BLEU-4 |\n|---|---|\n";
  for (Architecture a : all_architectures()) {
    bool present = false;
    const double m = mean_bleu4(report, a, present);
    if (present) out << "| " << architecture_name(a) << " | " << m << " |\n";
  }
  out << "\n## Checks\n\n"
      << "- focalis BLEU-4 > clarity BLEU-4 on every seed: " << (report.focalis_beats_clarity ? "held" : "did not hold")
      << "\n"
      << "- ordering focalis > contexta >= genesis > clarity (seed means): "
      << (report.full_ordering ? "held" : "did not hold") << "\n"
      << "\n## Experiment spec\n\n```ini\n"
      << spec_text(spec) << "```\n";
  return out.str();
}

}  // namespace caplab
