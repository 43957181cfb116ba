#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "caplab/experiment.hpp"

namespace py = pybind11;
using namespace caplab;

namespace {

py::array_t<float> grid_to_array(const FeatureGrid& g) {
  py::array_t<float> out({g.height, g.width, g.channels});
  std::copy(g.data.begin(), g.data.end(), out.mutable_data());
  return out;
}

FeatureGrid array_to_grid(const py::array_t<float, py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() != 3) throw DimensionError("feature grid must be a 3-d array [H, W, C]");
  FeatureGrid g{static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)),
                static_cast<std::size_t>(a.shape(2)), std::vector<float>(a.data(), a.data() + a.size())};
  g.validate();
  return g;
}

py::dict corpus_dict(const CorpusReport& r) {
  py::dict d;
  d["bleu"] = std::vector<double>(r.bleu, r.bleu + 4);
  d["meteor"] = r.meteor;
  d["precision"] = r.prf.precision;
  d["recall"] = r.prf.recall;
  d["f1"] = r.prf.f1;
  d["candidates"] = r.candidates;
  return d;
}

}  // namespace

PYBIND11_MODULE(caplab, m) {
  m.doc() = "Captioning lab: synthetic positional data, four caption models, beam search and metrics";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<SpecError>(m, "SpecError", PyExc_ValueError);
  py::register_exception<DimensionError>(m, "DimensionError", PyExc_ValueError);
  py::register_exception<MetricError>(m, "MetricError", PyExc_ValueError);
  py::register_exception<CheckpointError>(m, "CheckpointError", PyExc_RuntimeError);

  m.def("tokenize", &tokenize, py::arg("text"));

  py::class_<Vocabulary>(m, "Vocabulary")
      .def(py::init<const std::vector<std::string>&>(), py::arg("words"))
      .def_static("load", &Vocabulary::load, py::arg("path"))
      .def("__len__", &Vocabulary::size)
      .def("id", &Vocabulary::id)
      .def("token", &Vocabulary::token)
      .def("encode_caption", &Vocabulary::encode_caption)
      .def("caption_words", &Vocabulary::caption_words);

  m.def("load_features", [](const std::filesystem::path& p) { return grid_to_array(load_features(p)); },
        py::arg("path"));
  m.def("save_features", [](const py::array_t<float>& a, const std::filesystem::path& p) {
    save_features(array_to_grid(a), p);
  }, py::arg("grid"), py::arg("path"));

  py::class_<Dataset>(m, "Dataset")
      .def_readonly("vocab", &Dataset::vocab)
      .def("__len__", [](const Dataset& d) { return d.examples.size(); })
      .def("features", [](const Dataset& d, std::size_t i) { return grid_to_array(d.examples.at(i).features); })
      .def("references", [](const Dataset& d, std::size_t i) {
        std::vector<std::vector<std::string>> out;
        for (const auto& r : d.examples.at(i).references) out.push_back(d.vocab.caption_words(r));
        return out;
      })
      .def("write", [](const Dataset& d, const std::filesystem::path& dir) { write_dataset(d, dir); });

  m.def("load_dataset", &load_dataset, py::arg("dir"));
  m.def(
      "gen_dataset",
      [](std::size_t n, std::size_t grid_h, std::size_t grid_w, std::size_t channels, double noise, std::size_t refs,
         std::uint64_t seed) {
        DatasetConfig c;
        c.n_scenes = n;
        c.grid_h = grid_h;
        c.grid_w = grid_w;
        c.refs_per_scene = refs;
        c.source = FeatureSource{channels, noise, seed};
        c.seed = seed;
        return gen_dataset(c);
      },
      py::arg("n"), py::arg("grid_h") = 6, py::arg("grid_w") = 6, py::arg("channels") = 16, py::arg("noise") = 0.1,
      py::arg("refs") = 2, py::arg("seed") = 0);

  m.def("architectures", [] {
    std::vector<std::string> out;
    for (Architecture a : all_architectures()) out.push_back(architecture_name(a));
    return out;
  });

  py::class_<CaptionModel>(m, "CaptionModel")
      .def_property_readonly("arch", [](const CaptionModel& c) { return architecture_name(c.config().arch); })
      .def_property_readonly("parameter_count", [](const CaptionModel& c) { return c.params().scalar_count(); })
      .def("loss", [](const CaptionModel& c, const py::array_t<float>& grid, const std::vector<int>& caption,
                      double epsilon) {
        return forward_train(c, features_for(c.config(), array_to_grid(grid)), caption, epsilon).item();
      }, py::arg("grid"), py::arg("caption"), py::arg("epsilon") = 0.1)
      .def("caption", [](const CaptionModel& c, const py::array_t<float>& grid, std::size_t beam, bool greedy,
                         std::size_t max_len) {
        BeamConfig bc;
        bc.beam_width = beam;
        bc.max_len = max_len;
        const BeamHypothesis h = generate_caption(c, array_to_grid(grid), bc, greedy);
        py::dict d;
        d["tokens"] = h.tokens;
        d["log_prob"] = h.log_prob;
        d["attention"] = h.attention;
        return d;
      }, py::arg("grid"), py::arg("beam") = 7, py::arg("greedy") = false, py::arg("max_len") = kMaxDecodeLength)
      .def("evaluate", [](const CaptionModel& c, const Dataset& d, std::size_t beam) {
        BeamConfig bc;
        bc.beam_width = beam;
        return corpus_dict(evaluate_corpus(c, d.examples, d.vocab, bc));
      }, py::arg("dataset"), py::arg("beam") = 7);

  m.def(
      "build_model",
      [](const std::string& arch, std::size_t vocab, std::size_t feature_dim, std::size_t grid_h, std::size_t grid_w,
         std::size_t embed_dim, std::size_t units, std::uint64_t seed) {
        ModelConfig c = ModelConfig::make(parse_architecture(arch), vocab, feature_dim);
        c.grid_h = grid_h;
        c.grid_w = grid_w;
        c.embed_dim = embed_dim;
        c.decoder_units = units;
        c.attn_dim = units;
        return build(c, seed);
      },
      py::arg("arch"), py::arg("vocab_size"), py::arg("feature_dim"), py::arg("grid_h") = 6, py::arg("grid_w") = 6,
      py::arg("embed_dim") = 16, py::arg("units") = 32, py::arg("seed") = 0);
  m.def("load_model", [](const std::filesystem::path& p) { return model_from_checkpoint(load_checkpoint(p)); },
        py::arg("path"));

  m.def("train", [](CaptionModel& model, const Dataset& train_set, const Dataset& val_set, std::size_t epochs,
                    double lr, std::size_t batch_size, std::uint64_t seed) {
    TrainingConfig tc;
    tc.max_epochs = epochs;
    tc.learning_rate = lr;
    tc.batch_size = batch_size;
    tc.seed = seed;
    std::vector<py::dict> out;
    for (const auto& e : train(model, train_set.examples, val_set.examples, tc, {}, seed).history) {
      py::dict d;
      d["epoch"] = e.epoch;
      d["train_loss"] = e.train_loss;
      d["val_loss"] = e.val_loss;
      d["lr"] = e.lr;
      out.push_back(d);
    }
    return out;
  }, py::arg("model"), py::arg("train_set"), py::arg("val_set"), py::arg("epochs") = 10, py::arg("lr") = 1e-3,
        py::arg("batch_size") = 32, py::arg("seed") = 0);

  m.def("corpus_bleu", [](const std::vector<Tokens>& c, const std::vector<std::vector<Tokens>>& r, std::size_t n) {
    return bleu_n(c, r, n).bleu;
  }, py::arg("candidates"), py::arg("references"), py::arg("n_max") = 4);
  m.def("meteor", [](const Tokens& c, const std::vector<Tokens>& r) { return meteor(c, r); }, py::arg("candidate"),
        py::arg("references"));
  m.def("evaluate_captions", [](const std::vector<Tokens>& c, const std::vector<std::vector<Tokens>>& r) {
    return corpus_dict(evaluate_captions(c, r));
  }, py::arg("candidates"), py::arg("references"));
  m.def("select_champion", [](const std::map<std::size_t, double>& scores) {
    std::vector<ScoredEpoch> s;
    for (const auto& [epoch, score] : scores) s.push_back({epoch, score});
    return select_champion(s).epoch;
  }, py::arg("scores"));

  m.def("parse_spec", [](const std::string& text) { return spec_text(parse_spec(text)); }, py::arg("text"),
        "Canonical text of a spec, defaults filled in");
}
