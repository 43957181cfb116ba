#include "caplab/data.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <iomanip>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <tuple>

namespace caplab {

namespace {

const std::vector<std::string> kSpecials = {"<pad>", "<start>", "<end>", "<unk>"};

std::string join(const std::vector<std::string>& words) {
  std::string out;
  for (const auto& w : words) {
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> parts;
  std::string cur;
  for (char ch : line) {
    if (ch == sep) {
      parts.push_back(cur);
      cur.clear();
    } else {
      cur += ch;
    }
  }
  parts.push_back(cur);
  return parts;
}

std::string strip_cr(std::string line) {
  if (!line.empty() && line.back() == '\r') line.pop_back();
  return line;
}

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t x = a * 0x9E3779B97F4A7C15ULL + b + 0x632BE59BD9B4E019ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

std::string object_phrase(const SceneObject& o) {
  return color_names()[static_cast<std::size_t>(o.color)] + " " + class_names()[static_cast<std::size_t>(o.object_class)];
}

void check_config(const DatasetConfig& c) {
  if (c.grid_h == 0 || c.grid_w == 0) throw DataError("grid extents must be positive");
  if (c.n_classes == 0 || c.n_classes > class_names().size()) {
    throw DataError("classes must be in 1.." + std::to_string(class_names().size()));
  }
  if (c.n_colors == 0 || c.n_colors > color_names().size()) {
    throw DataError("colors must be in 1.." + std::to_string(color_names().size()));
  }
  if (c.refs_per_scene == 0 || c.refs_per_scene > 3) throw DataError("refs_per_scene must be 1, 2 or 3");
  if (!(c.two_object_prob >= 0.0 && c.two_object_prob <= 1.0)) throw DataError("two_object_prob must be in [0,1]");
}

}  // namespace

// ---------------------------------------------------------------------------
// Vocabulary

Vocabulary::Vocabulary() : Vocabulary(std::vector<std::string>{}) {}

Vocabulary::Vocabulary(const std::vector<std::string>& words) {
  tokens_ = kSpecials;
  for (const auto& w : words) {
    if (std::find(kSpecials.begin(), kSpecials.end(), w) != kSpecials.end()) continue;
    tokens_.push_back(w);
  }
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!ids_.emplace(tokens_[i], static_cast<int>(i)).second) {
      throw DataError("duplicate vocabulary token '" + tokens_[i] + "'");
    }
  }
}

int Vocabulary::id(std::string_view token) const {
  auto it = ids_.find(std::string(token));
  return it == ids_.end() ? kUnkId : it->second;
}

bool Vocabulary::contains(std::string_view token) const { return ids_.count(std::string(token)) > 0; }

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw IndexError("token id " + std::to_string(id) + " out of range for vocabulary of size " +
                     std::to_string(tokens_.size()));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocabulary::encode(const std::vector<std::string>& tokens) const {
  std::vector<int> ids;
  ids.reserve(tokens.size());
  for (const auto& t : tokens) ids.push_back(id(t));
  return ids;
}

std::vector<std::string> Vocabulary::decode(const std::vector<int>& ids) const {
  std::vector<std::string> tokens;
  tokens.reserve(ids.size());
  for (int i : ids) tokens.push_back(token(i));
  return tokens;
}

std::vector<int> Vocabulary::encode_caption(const std::vector<std::string>& tokens) const {
  std::vector<int> ids{kStartId};
  for (const auto& t : tokens) ids.push_back(id(t));
  ids.push_back(kEndId);
  return ids;
}

std::vector<std::string> Vocabulary::caption_words(const std::vector<int>& ids) const {
  std::vector<std::string> words;
  for (int i : ids) {
    if (i == kEndId) break;
    if (i == kStartId || i == kPadId) continue;
    words.push_back(token(i));
  }
  return words;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write vocabulary file " + path.string());
  for (std::size_t i = 0; i < tokens_.size(); ++i) out << tokens_[i] << '\t' << i << '\n';
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("vocabulary file not found: " + path.string());
  std::vector<std::string> words;
  std::string line;
  std::size_t expected = 0;
  while (std::getline(in, line)) {
    line = strip_cr(line);
    if (line.empty()) continue;
    const auto parts = split(line, '\t');
    if (parts.size() != 2) throw DataError("malformed vocabulary line: " + line);
    std::size_t id = 0;
    try {
      id = std::stoul(parts[1]);
    } catch (const std::exception&) {
      throw DataError("malformed vocabulary id: " + line);
    }
    if (id != expected) throw DataError("vocabulary ids must be consecutive from 0; got " + parts[1]);
    if (id < kSpecials.size()) {
      if (parts[0] != kSpecials[id]) throw DataError("reserved id " + parts[1] + " must be " + kSpecials[id]);
    } else {
      words.push_back(parts[0]);
    }
    ++expected;
  }
  if (expected < kSpecials.size()) throw DataError("vocabulary file lacks reserved tokens");
  return Vocabulary(words);
}

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> tokens;
  std::istringstream in{std::string(text)};
  std::string raw;
  while (in >> raw) {
    std::string word;
    for (std::size_t i = 0; i < raw.size(); ++i) {
      const unsigned char ch = static_cast<unsigned char>(raw[i]);
      if (ch == '-') {
        const bool inner = i > 0 && i + 1 < raw.size() && std::isalnum(static_cast<unsigned char>(raw[i - 1])) &&
                           std::isalnum(static_cast<unsigned char>(raw[i + 1]));
        if (inner) word += '-';
      } else if (ch < 128 && std::ispunct(ch)) {
        continue;
      } else {
        word += static_cast<char>(std::tolower(ch));
      }
    }
    if (!word.empty()) tokens.push_back(word);
  }
  return tokens;
}

Vocabulary build_vocab(const std::vector<std::vector<std::string>>& corpus, std::size_t min_count) {
  if (corpus.empty()) throw DataError("build_vocab: empty corpus");
  std::map<std::string, std::size_t> counts;
  for (const auto& seq : corpus) {
    for (const auto& t : seq) ++counts[t];
  }
  std::vector<std::pair<std::string, std::size_t>> kept;
  for (const auto& [t, n] : counts) {
    if (n >= min_count && std::find(kSpecials.begin(), kSpecials.end(), t) == kSpecials.end()) kept.emplace_back(t, n);
  }
  std::stable_sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> words;
  for (const auto& [t, n] : kept) words.push_back(t);
  return Vocabulary(words);
}

// ---------------------------------------------------------------------------
// Synthetic scenes and captions

const std::vector<std::string>& class_names() {
  static const std::vector<std::string> names = {"square", "circle", "triangle", "star",
                                                 "cross",  "diamond", "heart",   "hexagon"};
  return names;
}

const std::vector<std::string>& color_names() {
  static const std::vector<std::string> names = {"red", "green", "blue", "yellow", "purple", "orange", "white", "black"};
  return names;
}

std::string row_word(std::size_t row) {
  static const std::vector<std::string> ordinals = {"first", "second", "third",  "fourth", "fifth",
                                                    "sixth", "seventh", "eighth", "ninth",  "tenth"};
  return row < ordinals.size() ? ordinals[row] : "row" + std::to_string(row + 1);
}

std::vector<std::string> describe_scene(const SceneSpec& scene, std::size_t refs) {
  if (scene.objects.empty() || scene.objects.size() > 2) throw DataError("scenes hold one or two objects");
  std::vector<SceneObject> objs = scene.objects;
  std::sort(objs.begin(), objs.end(), [](const SceneObject& a, const SceneObject& b) {
    return std::tie(a.row, a.col) < std::tie(b.row, b.col);
  });
  std::vector<std::string> out;
  if (objs.size() == 1) {
    const std::string obj = object_phrase(objs[0]);
    const std::string row = row_word(objs[0].row);
    out = {"a " + row + " " + obj, obj + " at " + row, row + " row has a " + obj};
  } else {
    const std::string a = object_phrase(objs[0]);
    const std::string b = object_phrase(objs[1]);
    const std::string ra = row_word(objs[0].row);
    const std::string rb = row_word(objs[1].row);
    out = {ra + " " + a + " and " + rb + " " + b, a + " at " + ra + " and " + b + " at " + rb,
           ra + " row has a " + a + " and " + rb + " row has a " + b};
  }
  out.resize(refs);
  return out;
}

Vocabulary template_vocabulary(const DatasetConfig& config) {
  check_config(config);
  std::vector<std::vector<std::string>> corpus;
  corpus.push_back({"a", "and", "at", "has", "row"});
  std::vector<std::string> words;
  for (std::size_t i = 0; i < config.n_classes; ++i) words.push_back(class_names()[i]);
  for (std::size_t i = 0; i < config.n_colors; ++i) words.push_back(color_names()[i]);
  for (std::size_t r = 0; r < config.grid_h; ++r) words.push_back(row_word(r));
  corpus.push_back(words);
  return build_vocab(corpus, 1);
}

std::uint64_t scene_noise_seed(std::uint64_t dataset_seed, std::size_t index) {
  return mix_seed(dataset_seed, static_cast<std::uint64_t>(index) + 1);
}

std::vector<SceneSpec> gen_scenes(const DatasetConfig& config) {
  check_config(config);
  if (config.n_scenes == 0) throw DataError("n_scenes must be at least 1");
  const std::size_t cells = config.grid_h * config.grid_w;
  const bool can_hold_two = cells >= 2;
  if (config.two_object_prob >= 1.0 && !can_hold_two) throw DataError("two objects cannot fit in a single-cell grid");
  std::mt19937_64 rng(mix_seed(config.seed, 0x5CE7E5ULL));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> cell_dist(0, cells - 1);
  std::uniform_int_distribution<int> class_dist(0, static_cast<int>(config.n_classes) - 1);
  std::uniform_int_distribution<int> color_dist(0, static_cast<int>(config.n_colors) - 1);
  const bool distinct_possible = config.n_classes * config.n_colors > 1;

  std::vector<SceneSpec> scenes;
  scenes.reserve(config.n_scenes);
  for (std::size_t s = 0; s < config.n_scenes; ++s) {
    SceneSpec scene{config.grid_h, config.grid_w, {}};
    const std::size_t count = (can_hold_two && unit(rng) < config.two_object_prob) ? 2 : 1;
    std::set<std::size_t> used;
    while (scene.objects.size() < count) {
      const std::size_t cell = cell_dist(rng);
      if (!used.insert(cell).second) continue;
      SceneObject o{class_dist(rng), color_dist(rng), cell / config.grid_w, cell % config.grid_w};
      if (!scene.objects.empty() && distinct_possible) {
        while (o.object_class == scene.objects[0].object_class && o.color == scene.objects[0].color) {
          o.object_class = class_dist(rng);
          o.color = color_dist(rng);
        }
      }
      scene.objects.push_back(o);
    }
    scenes.push_back(std::move(scene));
  }
  return scenes;
}

namespace {

CaptionedExample make_example(const SceneSpec& scene, const Vocabulary& vocab, const DatasetConfig& config,
                              const FeatureSource& source, std::size_t index) {
  CaptionedExample ex;
  ex.features = synth_scene_features(scene, source, scene_noise_seed(config.seed, index));
  for (const auto& text : describe_scene(scene, config.refs_per_scene)) {
    ex.references.push_back(vocab.encode_caption(tokenize(text)));
  }
  return ex;
}

}  // namespace

Dataset gen_dataset(const DatasetConfig& config) {
  Dataset ds;
  ds.vocab = template_vocabulary(config);
  ds.scenes = gen_scenes(config);
  ds.examples.reserve(ds.scenes.size());
  for (std::size_t i = 0; i < ds.scenes.size(); ++i) {
    ds.examples.push_back(make_example(ds.scenes[i], ds.vocab, config, config.source, i));
  }
  return ds;
}

Dataset render_with_source(const Dataset& dataset, const DatasetConfig& config, const FeatureSource& source) {
  Dataset out;
  out.vocab = dataset.vocab;
  out.scenes = dataset.scenes;
  out.examples = dataset.examples;
  for (std::size_t i = 0; i < out.scenes.size(); ++i) {
    out.examples[i].features = synth_scene_features(out.scenes[i], source, scene_noise_seed(config.seed, i));
  }
  return out;
}

std::pair<SceneSpec, SceneSpec> position_witness_pair(const DatasetConfig& config) {
  check_config(config);
  if (config.grid_h < 2) throw DataError("a position witness needs at least two rows");
  const SceneObject top{0, 0, 0, 0};
  const SceneObject bottom{0, 0, config.grid_h - 1, config.grid_w - 1};
  return {SceneSpec{config.grid_h, config.grid_w, {top}}, SceneSpec{config.grid_h, config.grid_w, {bottom}}};
}

Batch batch(const std::vector<std::vector<int>>& sequences, std::size_t pad_to) {
  Batch b;
  b.rows = sequences.size();
  b.cols = pad_to;
  b.ids.assign(b.rows * b.cols, kPadId);
  b.mask.assign(b.rows * b.cols, 0);
  for (std::size_t r = 0; r < sequences.size(); ++r) {
    if (sequences[r].size() > pad_to) {
      throw DataError("sequence of length " + std::to_string(sequences[r].size()) + " exceeds pad_to " +
                      std::to_string(pad_to));
    }
    for (std::size_t c = 0; c < sequences[r].size(); ++c) {
      b.ids[r * b.cols + c] = sequences[r][c];
      b.mask[r * b.cols + c] = 1;
    }
  }
  return b;
}

// ---------------------------------------------------------------------------
// Disk layout

void write_dataset(const Dataset& dataset, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir / "features", ec);
  if (ec) throw DataError("cannot create dataset directory " + dir.string() + ": " + ec.message());
  dataset.vocab.save(dir / "vocab.tsv");
  std::ofstream manifest(dir / "manifest.tsv", std::ios::trunc);
  if (!manifest) throw DataError("cannot write manifest in " + dir.string());
  for (std::size_t i = 0; i < dataset.examples.size(); ++i) {
    std::ostringstream name;
    name << "features/scene_" << std::setw(5) << std::setfill('0') << i << ".cfg";
    save_features(dataset.examples[i].features, dir / name.str());
    manifest << name.str();
    for (const auto& ref : dataset.examples[i].references) {
      manifest << '\t' << join(dataset.vocab.caption_words(ref));
    }
    manifest << '\n';
  }
}

Dataset load_dataset(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.tsv";
  std::ifstream manifest(manifest_path);
  if (!manifest) throw DataError("dataset manifest not found: " + manifest_path.string());
  Dataset ds;
  ds.vocab = Vocabulary::load(dir / "vocab.tsv");
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(manifest, line)) {
    ++line_no;
    line = strip_cr(line);
    if (line.empty()) continue;
    const auto parts = split(line, '\t');
    if (parts.size() < 2) {
      throw DataError("manifest line " + std::to_string(line_no) + " needs a feature path and a reference");
    }
    CaptionedExample ex;
    ex.features = load_features(dir / parts[0]);
    for (std::size_t i = 1; i < parts.size(); ++i) {
      const auto tokens = tokenize(parts[i]);
      if (tokens.empty()) throw DataError("empty reference on manifest line " + std::to_string(line_no));
      ex.references.push_back(ds.vocab.encode_caption(tokens));
    }
    ds.examples.push_back(std::move(ex));
  }
  if (ds.examples.empty()) throw DataError("dataset manifest is empty: " + manifest_path.string());
  return ds;
}

}  // namespace caplab
