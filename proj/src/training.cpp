#include "caplab/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iterator>
#include <map>
#include <sstream>

#include <json.hpp>

#include "caplab/binary_io.hpp"

namespace caplab {

namespace {

using nlohmann::json;

constexpr std::string_view kCheckpointMagic = "CKPT";
constexpr std::uint32_t kCheckpointVersion = 1;

std::uint64_t epoch_seed(std::uint64_t seed, std::size_t epoch) {
  std::uint64_t x = seed ^ (0x9E3779B97F4A7C15ULL * (static_cast<std::uint64_t>(epoch) + 1));
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

bool improved(double value, double best, double min_delta) { return value < best - min_delta; }

json finite_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }
double inf_if_null(const json& j) {
  return j.is_null() ? std::numeric_limits<double>::infinity() : j.get<double>();
}

json model_config_json(const ModelConfig& c) {
  return json{{"arch", architecture_name(c.arch)},
              {"vocab_size", c.vocab_size},
              {"embed_dim", c.embed_dim},
              {"decoder_units", c.decoder_units},
              {"feature_dim", c.feature_dim},
              {"grid_h", c.grid_h},
              {"grid_w", c.grid_w},
              {"attn_dim", c.attn_dim},
              {"encoder_units", c.encoder_units},
              {"fusion", c.fusion == Fusion::Add ? "add" : "concat"},
              {"score_form", c.score_form == ScoreForm::Additive ? "additive" : "multiplicative"}};
}

ModelConfig model_config_from(const json& j) {
  ModelConfig c;
  c.arch = parse_architecture(j.at("arch").get<std::string>());
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.embed_dim = j.at("embed_dim").get<std::size_t>();
  c.decoder_units = j.at("decoder_units").get<std::size_t>();
  c.feature_dim = j.at("feature_dim").get<std::size_t>();
  c.grid_h = j.at("grid_h").get<std::size_t>();
  c.grid_w = j.at("grid_w").get<std::size_t>();
  c.attn_dim = j.at("attn_dim").get<std::size_t>();
  c.encoder_units = j.at("encoder_units").get<std::size_t>();
  c.fusion = j.at("fusion").get<std::string>() == "add" ? Fusion::Add : Fusion::Concat;
  c.score_form = j.at("score_form").get<std::string>() == "additive" ? ScoreForm::Additive : ScoreForm::Multiplicative;
  return c;
}

json training_config_json(const TrainingConfig& c) {
  return json{{"learning_rate", c.learning_rate},   {"clipnorm", c.clipnorm},
              {"label_epsilon", c.label_epsilon},   {"plateau_patience", c.plateau_patience},
              {"plateau_factor", c.plateau_factor}, {"early_stop_patience", c.early_stop_patience},
              {"max_epochs", c.max_epochs},         {"batch_size", c.batch_size},
              {"seed", c.seed},                     {"min_delta", c.min_delta}};
}

TrainingConfig training_config_from(const json& j) {
  TrainingConfig c;
  c.learning_rate = j.at("learning_rate").get<double>();
  c.clipnorm = j.at("clipnorm").get<double>();
  c.label_epsilon = j.at("label_epsilon").get<double>();
  c.plateau_patience = j.at("plateau_patience").get<std::size_t>();
  c.plateau_factor = j.at("plateau_factor").get<double>();
  c.early_stop_patience = j.at("early_stop_patience").get<std::size_t>();
  c.max_epochs = j.at("max_epochs").get<std::size_t>();
  c.batch_size = j.at("batch_size").get<std::size_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.min_delta = j.at("min_delta").get<double>();
  return c;
}

void write_record(binio::Writer& w, const std::string& name, const Shape& shape, std::span<const double> values) {
  w.u32(static_cast<std::uint32_t>(name.size()));
  w.bytes(name);
  w.u32(static_cast<std::uint32_t>(shape.size()));
  for (std::size_t d : shape) w.u64(d);
  for (double v : values) w.f64(v);
}

TensorRecord read_record(binio::Reader& r) {
  TensorRecord rec;
  const std::uint32_t name_len = r.u32();
  if (name_len == 0 || name_len > 4096) throw CheckpointError("implausible parameter name length");
  rec.name = std::string(r.bytes(name_len));
  const std::uint32_t rank = r.u32();
  if (rank == 0 || rank > 8) throw CheckpointError("implausible rank for '" + rec.name + "'");
  std::size_t count = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    const std::uint64_t d = r.u64();
    if (d == 0 || d > (1ULL << 32)) throw CheckpointError("implausible extent for '" + rec.name + "'");
    rec.shape.push_back(static_cast<std::size_t>(d));
    count *= static_cast<std::size_t>(d);
  }
  if (!r.has(count * 8)) throw CheckpointError("truncated values for '" + rec.name + "'");
  rec.values.resize(count);
  for (double& v : rec.values) v = r.f64();
  return rec;
}

}  // namespace

void TrainingConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (!(clipnorm > 0.0)) throw ConfigError("clipnorm must be positive");
  if (!(label_epsilon >= 0.0 && label_epsilon < 1.0)) throw ConfigError("label_epsilon must lie in [0, 1)");
  if (plateau_patience == 0 || early_stop_patience == 0) throw ConfigError("patience values must be positive");
  if (!(plateau_factor > 0.0 && plateau_factor < 1.0)) throw ConfigError("plateau_factor must lie in (0, 1)");
  if (max_epochs == 0 || batch_size == 0) throw ConfigError("max_epochs and batch_size must be positive");
  if (!(min_delta >= 0.0)) throw ConfigError("min_delta must be non-negative");
}

std::vector<std::vector<double>> clip_by_global_norm(std::vector<std::vector<double>> grads, double clipnorm) {
  if (!(clipnorm > 0.0)) throw ContractError("clipnorm must be positive");
  double sq = 0.0;
  for (const auto& g : grads) {
    for (double x : g) sq += x * x;
  }
  const double norm = std::sqrt(sq);
  if (norm > clipnorm) {
    const double factor = clipnorm / norm;
    for (auto& g : grads) {
      for (double& x : g) x *= factor;
    }
  }
  return grads;
}

double clip_gradients(ParameterStore& params, double clipnorm) {
  if (!(clipnorm > 0.0)) throw ContractError("clipnorm must be positive");
  double sq = 0.0;
  for (const auto& [name, t] : params.entries()) {
    for (double x : t.grad()) sq += x * x;
  }
  const double norm = std::sqrt(sq);
  if (norm > clipnorm) {
    const double factor = clipnorm / norm;
    for (auto [name, t] : params.entries()) {
      for (double& x : t.mutable_grad()) x *= factor;
    }
  }
  return norm;
}

AdamState AdamState::for_params(const ParameterStore& params) {
  AdamState s;
  for (const auto& [name, t] : params.entries()) {
    s.m.emplace_back(t.size(), 0.0);
    s.v.emplace_back(t.size(), 0.0);
  }
  return s;
}

void adam_update(ParameterStore& params, AdamState& state, double lr) {
  const auto& entries = params.entries();
  if (state.m.size() != entries.size() || state.v.size() != entries.size()) {
    throw DimensionError("adam_update: optimizer state tracks " + std::to_string(state.m.size()) +
                         " tensors, store holds " + std::to_string(entries.size()));
  }
  ++state.t;
  const double t = static_cast<double>(state.t);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < entries.size(); ++i) {
    Tensor p = entries[i].second;
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.size() != p.size() || v.size() != p.size()) {
      throw DimensionError("adam_update: moment size mismatch for '" + entries[i].first + "'");
    }
    auto data = p.mutable_data();
    auto grad = p.grad();
    for (std::size_t k = 0; k < data.size(); ++k) {
      const double g = grad[k];
      m[k] = state.beta1 * m[k] + (1.0 - state.beta1) * g;
      v[k] = state.beta2 * v[k] + (1.0 - state.beta2) * g * g;
      const double mhat = m[k] / c1;
      const double vhat = v[k] / c2;
      data[k] -= lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

double PlateauScheduler::update(double val_loss, double lr) {
  if (improved(val_loss, best_, min_delta_)) {
    best_ = val_loss;
    wait_ = 0;
    return lr;
  }
  if (++wait_ >= patience_) {
    wait_ = 0;
    return lr * factor_;
  }
  return lr;
}

bool EarlyStopping::update(double val_loss) {
  if (improved(val_loss, best_, min_delta_)) {
    best_ = val_loss;
    wait_ = 0;
    return false;
  }
  return ++wait_ >= patience_;
}

// ---------------------------------------------------------------------------
// Checkpoints

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  binio::Writer w;
  w.bytes(kCheckpointMagic);
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(ckpt.params.size()));
  for (const auto& rec : ckpt.params) write_record(w, rec.name, rec.shape, rec.values);
  w.u64(ckpt.adam.t);
  if (ckpt.adam.m.size() != ckpt.params.size() || ckpt.adam.v.size() != ckpt.params.size()) {
    throw CheckpointError("optimizer state does not mirror the parameters");
  }
  for (std::size_t i = 0; i < ckpt.params.size(); ++i) write_record(w, "m/" + ckpt.params[i].name, ckpt.params[i].shape, ckpt.adam.m[i]);
  for (std::size_t i = 0; i < ckpt.params.size(); ++i) write_record(w, "v/" + ckpt.params[i].name, ckpt.params[i].shape, ckpt.adam.v[i]);

  json history = json::array();
  for (const auto& e : ckpt.history) {
    history.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_loss", e.val_loss}, {"lr", e.lr}});
  }
  const json meta = {{"model", model_config_json(ckpt.model_config)},
                     {"training", training_config_json(ckpt.training_config)},
                     {"model_seed", ckpt.model_seed},
                     {"epoch", ckpt.epoch},
                     {"history", history},
                     {"next_lr", ckpt.next_lr},
                     {"plateau", {{"best", finite_or_null(ckpt.plateau_best)}, {"wait", ckpt.plateau_wait}}},
                     {"early_stop", {{"best", finite_or_null(ckpt.stop_best)}, {"wait", ckpt.stop_wait}}},
                     {"stopped", ckpt.stopped},
                     {"adam", {{"beta1", ckpt.adam.beta1}, {"beta2", ckpt.adam.beta2}, {"eps", ckpt.adam.eps}}}};
  const std::string text = meta.dump();
  w.u64(text.size());
  w.bytes(text);

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot write checkpoint " + path.string());
  out.write(w.buffer().data(), static_cast<std::streamsize>(w.buffer().size()));
  if (!out) throw CheckpointError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("checkpoint not found: " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::string where = " in checkpoint " + path.string();
  try {
    binio::Reader r(bytes);
    if (!r.has(8) || r.bytes(4) != kCheckpointMagic) throw CheckpointError("bad magic" + where);
    const std::uint32_t version = r.u32();
    if (version != kCheckpointVersion) throw CheckpointError("unsupported version " + std::to_string(version) + where);
    Checkpoint ckpt;
    const std::uint32_t count = r.u32();
    for (std::uint32_t i = 0; i < count; ++i) ckpt.params.push_back(read_record(r));
    ckpt.adam.t = r.u64();
    for (auto* moments : {&ckpt.adam.m, &ckpt.adam.v}) {
      const std::string prefix = moments == &ckpt.adam.m ? "m/" : "v/";
      for (std::uint32_t i = 0; i < count; ++i) {
        TensorRecord rec = read_record(r);
        if (rec.name != prefix + ckpt.params[i].name || rec.shape != ckpt.params[i].shape) {
          throw CheckpointError("optimizer record '" + rec.name + "' does not match its parameter" + where);
        }
        moments->push_back(std::move(rec.values));
      }
    }
    const std::uint64_t meta_len = r.u64();
    if (r.remaining() != meta_len) throw CheckpointError("metadata length mismatch" + where);
    const json meta = json::parse(r.bytes(meta_len));
    ckpt.model_config = model_config_from(meta.at("model"));
    ckpt.training_config = training_config_from(meta.at("training"));
    ckpt.model_seed = meta.at("model_seed").get<std::uint64_t>();
    ckpt.epoch = meta.at("epoch").get<std::size_t>();
    for (const auto& e : meta.at("history")) {
      ckpt.history.push_back({e.at("epoch").get<std::size_t>(), e.at("train_loss").get<double>(),
                              e.at("val_loss").get<double>(), e.at("lr").get<double>()});
    }
    ckpt.next_lr = meta.at("next_lr").get<double>();
    ckpt.plateau_best = inf_if_null(meta.at("plateau").at("best"));
    ckpt.plateau_wait = meta.at("plateau").at("wait").get<std::size_t>();
    ckpt.stop_best = inf_if_null(meta.at("early_stop").at("best"));
    ckpt.stop_wait = meta.at("early_stop").at("wait").get<std::size_t>();
    ckpt.stopped = meta.at("stopped").get<bool>();
    ckpt.adam.beta1 = meta.at("adam").at("beta1").get<double>();
    ckpt.adam.beta2 = meta.at("adam").at("beta2").get<double>();
    ckpt.adam.eps = meta.at("adam").at("eps").get<double>();
    return ckpt;
  } catch (const CheckpointError&) {
    throw;
  } catch (const std::out_of_range&) {
    throw CheckpointError("truncated data" + where);
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("corrupt metadata") + where + ": " + e.what());
  }
}

std::vector<TensorRecord> snapshot_params(const ParameterStore& params) {
  std::vector<TensorRecord> out;
  for (const auto& [name, t] : params.entries()) {
    out.push_back({name, t.shape(), std::vector<double>(t.data().begin(), t.data().end())});
  }
  return out;
}

void restore_params(ParameterStore& params, const std::vector<TensorRecord>& records) {
  const auto& entries = params.entries();
  if (records.size() != entries.size()) {
    throw CheckpointError("checkpoint holds " + std::to_string(records.size()) + " tensors, model expects " +
                          std::to_string(entries.size()));
  }
  for (std::size_t i = 0; i < records.size(); ++i) {
    Tensor t = entries[i].second;
    if (records[i].name != entries[i].first || records[i].shape != t.shape()) {
      throw CheckpointError("checkpoint tensor '" + records[i].name + "' " + shape_str(records[i].shape) +
                            " does not match model tensor '" + entries[i].first + "' " + shape_str(t.shape()));
    }
    std::copy(records[i].values.begin(), records[i].values.end(), t.mutable_data().begin());
  }
}

CaptionModel model_from_checkpoint(const Checkpoint& ckpt) {
  CaptionModel model = build(ckpt.model_config, ckpt.model_seed);
  restore_params(model.params(), ckpt.params);
  return model;
}

void write_loss_csv(const std::vector<EpochRecord>& history, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw TrainingError("cannot write loss curve " + path.string());
  out << "epoch,train_loss,val_loss,lr\n" << std::setprecision(17);
  for (const auto& e : history) out << e.epoch << ',' << e.train_loss << ',' << e.val_loss << ',' << e.lr << '\n';
}

// ---------------------------------------------------------------------------
// Training loop

double dataset_loss(const CaptionModel& model, const std::vector<CaptionedExample>& examples, double epsilon) {
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& ex : examples) {
    const EncodedImage image = encode_image(model, features_for(model.config(), ex.features));
    for (const auto& ref : ex.references) {
      const auto logits = teacher_forced_logits(model, image, ref);
      for (std::size_t t = 0; t < logits.size(); ++t) {
        total += label_smoothed_ce(logits[t], ref[t + 1], epsilon).item();
        ++count;
      }
    }
  }
  if (count == 0) throw TrainingError("dataset holds no predictions");
  return total / static_cast<double>(count);
}

TrainResult train(CaptionModel& model, const std::vector<CaptionedExample>& train_set,
                  const std::vector<CaptionedExample>& val_set, const TrainingConfig& config,
                  const TrainOptions& options, std::uint64_t model_seed) {
  config.validate();
  if (train_set.empty()) throw TrainingError("training split is empty");
  if (val_set.empty()) throw TrainingError("validation split is empty");

  std::vector<Features> features;
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t i = 0; i < train_set.size(); ++i) {
    features.push_back(features_for(model.config(), train_set[i].features));
    for (std::size_t r = 0; r < train_set[i].references.size(); ++r) pairs.emplace_back(i, r);
  }
  if (pairs.empty()) throw TrainingError("training split holds no references");

  TrainResult result;
  AdamState adam = AdamState::for_params(model.params());
  PlateauScheduler plateau(config.plateau_patience, config.plateau_factor, config.min_delta);
  EarlyStopping stopper(config.early_stop_patience, config.min_delta);
  double lr = config.learning_rate;
  std::size_t first_epoch = 1;

  if (options.resume != nullptr) {
    const Checkpoint& ck = *options.resume;
    restore_params(model.params(), ck.params);
    adam = ck.adam;
    lr = ck.next_lr;
    plateau.restore(ck.plateau_best, ck.plateau_wait);
    stopper.restore(ck.stop_best, ck.stop_wait);
    result.history = ck.history;
    result.last = ck;
    result.stopped_early = ck.stopped;
    first_epoch = ck.epoch + 1;
    if (ck.stopped) return result;
  }

  namespace fs = std::filesystem;
  if (!options.output_dir.empty()) {
    std::error_code ec;
    fs::create_directories(options.output_dir / "checkpoints", ec);
    if (ec) throw TrainingError("cannot create " + options.output_dir.string() + ": " + ec.message());
  }

  for (std::size_t epoch = first_epoch; epoch <= config.max_epochs; ++epoch) {
    std::vector<std::pair<std::size_t, std::size_t>> order = pairs;
    Rng shuffle_rng(epoch_seed(config.seed, epoch));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double loss_sum = 0.0;
    std::size_t predictions = 0;
    for (std::size_t start = 0, batch_no = 0; start < order.size(); start += config.batch_size, ++batch_no) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      std::map<std::size_t, std::size_t> slot;
      std::vector<std::size_t> scene_of_slot;
      std::vector<std::vector<int>> sequences;
      std::vector<std::size_t> row_image;
      std::size_t longest = 0;
      std::size_t batch_predictions = 0;
      for (std::size_t k = start; k < end; ++k) {
        const auto [scene, ref] = order[k];
        auto [it, inserted] = slot.emplace(scene, scene_of_slot.size());
        if (inserted) scene_of_slot.push_back(scene);
        row_image.push_back(it->second);
        sequences.push_back(train_set[scene].references[ref]);
        longest = std::max(longest, sequences.back().size());
        batch_predictions += sequences.back().size() - 1;
      }

      Tape tape;
      TapeScope scope(tape);
      model.params().zero_grad();
      std::vector<EncodedImage> images;
      images.reserve(scene_of_slot.size());
      for (std::size_t scene : scene_of_slot) images.push_back(encode_image(model, features[scene]));
      const Tensor loss = batch_loss(model, images, row_image, batch(sequences, longest), config.label_epsilon);
      const double value = loss.item();
      if (!std::isfinite(value)) {
        std::ostringstream msg;
        msg << "non-finite training loss (" << value << ") at epoch " << epoch << ", batch " << batch_no
            << ", lr " << lr << ", adam step " << adam.t;
        throw TrainingError(msg.str());
      }
      tape.backward(loss);
      clip_gradients(model.params(), config.clipnorm);
      adam_update(model.params(), adam, lr);
      loss_sum += value * static_cast<double>(batch_predictions);
      predictions += batch_predictions;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(predictions);
    rec.val_loss = dataset_loss(model, val_set, config.label_epsilon);
    rec.lr = lr;
    if (!std::isfinite(rec.val_loss)) {
      std::ostringstream msg;
      msg << "non-finite validation loss (" << rec.val_loss << ") at epoch " << epoch << ", lr " << lr;
      throw TrainingError(msg.str());
    }
    result.history.push_back(rec);

    const bool stop = stopper.update(rec.val_loss);
    const double next_lr = plateau.update(rec.val_loss, lr);

    Checkpoint& ck = result.last;
    ck.model_config = model.config();
    ck.training_config = config;
    ck.model_seed = model_seed;
    ck.params = snapshot_params(model.params());
    ck.adam = adam;
    ck.epoch = epoch;
    ck.history = result.history;
    ck.next_lr = next_lr;
    ck.plateau_best = plateau.best();
    ck.plateau_wait = plateau.wait();
    ck.stop_best = stopper.best();
    ck.stop_wait = stopper.wait();
    ck.stopped = stop;
    if (!options.output_dir.empty()) {
      std::ostringstream name;
      name << "epoch_" << std::setw(3) << std::setfill('0') << epoch << ".ckpt";
      const fs::path path = options.output_dir / "checkpoints" / name.str();
      save_checkpoint(ck, path);
      result.checkpoints.push_back(path);
      write_loss_csv(result.history, options.output_dir / "loss.csv");
    }
    if (options.on_epoch) options.on_epoch(rec);

    lr = next_lr;
    if (stop) {
      result.stopped_early = true;
      break;
    }
    if (options.halt_after_epoch != 0 && epoch >= options.halt_after_epoch) break;
  }
  return result;
}

// ---------------------------------------------------------------------------
// Champion selection

ScoredEpoch select_champion(const std::vector<ScoredEpoch>& scored) {
  if (scored.empty()) throw ContractError("select_champion: no checkpoints");
  ScoredEpoch best = scored.front();
  for (const auto& s : scored) {
    if (s.score > best.score || (s.score == best.score && s.epoch < best.epoch)) best = s;
  }
  return best;
}

const Checkpoint& select_champion(const std::vector<Checkpoint>& checkpoints,
                                  const std::function<double(const Checkpoint&)>& metric) {
  if (checkpoints.empty()) throw ContractError("select_champion: no checkpoints");
  std::vector<ScoredEpoch> scored;
  for (const auto& ck : checkpoints) scored.push_back({ck.epoch, metric(ck)});
  const ScoredEpoch best = select_champion(scored);
  for (std::size_t i = 0; i < checkpoints.size(); ++i) {
    if (checkpoints[i].epoch == best.epoch && scored[i].score == best.score) return checkpoints[i];
  }
  return checkpoints.front();
}

DivergenceReport loss_metric_divergence(const std::vector<EpochRecord>& history,
                                        const std::vector<ScoredEpoch>& scores) {
  if (history.empty() || scores.empty()) throw ContractError("loss_metric_divergence: empty input");
  DivergenceReport report;
  double best_loss = std::numeric_limits<double>::infinity();
  for (const auto& e : history) {
    if (e.val_loss < best_loss) {
      best_loss = e.val_loss;
      report.min_val_loss_epoch = e.epoch;
    }
  }
  report.max_metric_epoch = select_champion(scores).epoch;
  report.diverged = report.min_val_loss_epoch != report.max_metric_epoch;
  return report;
}

}  // namespace caplab
