#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "caplab/features.hpp"

namespace caplab {

inline constexpr int kPadId = 0;
inline constexpr int kStartId = 1;
inline constexpr int kEndId = 2;
inline constexpr int kUnkId = 3;

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Token <-> id bijection. Ids 0..3 are pad, start, end, unk.
class Vocabulary {
 public:
  Vocabulary();
  explicit Vocabulary(const std::vector<std::string>& words);

  std::size_t size() const { return tokens_.size(); }
  int id(std::string_view token) const;
  const std::string& token(int id) const;
  bool contains(std::string_view token) const;

  std::vector<int> encode(const std::vector<std::string>& tokens) const;
  std::vector<std::string> decode(const std::vector<int>& ids) const;
  // start + ids + end
  std::vector<int> encode_caption(const std::vector<std::string>& tokens) const;
  // Words of a generated sequence: skips start/pad, stops at end.
  std::vector<std::string> caption_words(const std::vector<int>& ids) const;

  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
};

// Lowercases, splits on whitespace, strips ASCII punctuation except hyphens
// between word characters.
std::vector<std::string> tokenize(std::string_view text);

// Tokens with count >= min_count, ordered by count desc then lexicographically.
Vocabulary build_vocab(const std::vector<std::vector<std::string>>& corpus, std::size_t min_count = 1);

struct CaptionedExample {
  FeatureGrid features;
  std::vector<std::vector<int>> references;  // each start ... end framed
};

struct DatasetConfig {
  std::size_t n_scenes = 100;
  std::size_t grid_h = 6;
  std::size_t grid_w = 6;
  std::size_t n_classes = 3;
  std::size_t n_colors = 3;
  std::size_t refs_per_scene = 2;  // 1..3
  double two_object_prob = 0.5;
  FeatureSource source{};
  std::uint64_t seed = 0;
};

struct Dataset {
  Vocabulary vocab;
  std::vector<SceneSpec> scenes;
  std::vector<CaptionedExample> examples;
};

const std::vector<std::string>& class_names();
const std::vector<std::string>& color_names();
std::string row_word(std::size_t row);

// Reference captions of a scene as raw text, one per template form.
std::vector<std::string> describe_scene(const SceneSpec& scene, std::size_t refs);

// Vocabulary over every word the templates can emit for this config. It
// depends only on the config's class/color/grid inventory, so splits drawn
// with different seeds share ids.
Vocabulary template_vocabulary(const DatasetConfig& config);

std::vector<SceneSpec> gen_scenes(const DatasetConfig& config);
Dataset gen_dataset(const DatasetConfig& config);

// Re-renders the features of a dataset's scenes from another source, with
// the same per-scene noise seeds.
Dataset render_with_source(const Dataset& dataset, const DatasetConfig& config, const FeatureSource& source);

std::uint64_t scene_noise_seed(std::uint64_t dataset_seed, std::size_t index);

// Two scenes holding the same objects in different rows.
std::pair<SceneSpec, SceneSpec> position_witness_pair(const DatasetConfig& config);

struct Batch {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<int> ids;        // rows x cols, pad-filled
  std::vector<std::uint8_t> mask;  // 1 on real tokens

  int at(std::size_t r, std::size_t c) const { return ids[r * cols + c]; }
  bool real(std::size_t r, std::size_t c) const { return mask[r * cols + c] != 0; }
};

Batch batch(const std::vector<std::vector<int>>& sequences, std::size_t pad_to);

// On-disk layout: manifest.tsv (feature path relative to the manifest,
// then each reference as raw text, tab separated), vocab.tsv
// ("token<TAB>id" by id) and the feature files.
void write_dataset(const Dataset& dataset, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace caplab
