#pragma once

// Visual feature sources standing in for a CNN backbone: feature grids
// loaded from disk, and a seeded synthetic scene renderer.

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "caplab/autodiff.hpp"

namespace caplab {

class FeatureFileError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class MissingFeatureFile : public FeatureFileError {
 public:
  using FeatureFileError::FeatureFileError;
};
class MalformedFeatureHeader : public FeatureFileError {
 public:
  using FeatureFileError::FeatureFileError;
};
class TruncatedFeaturePayload : public FeatureFileError {
 public:
  using FeatureFileError::FeatureFileError;
};

class SceneError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// H x W x C spatial features, row-major over cells, channels innermost.
struct FeatureGrid {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  std::vector<float> data;

  std::size_t cells() const { return height * width; }
  float at(std::size_t row, std::size_t col, std::size_t ch) const {
    return data[(row * width + col) * channels + ch];
  }
  void validate() const;
  Tensor to_tensor() const;

  bool operator==(const FeatureGrid&) const = default;
};

struct FeatureVector {
  std::vector<double> data;

  std::size_t dim() const { return data.size(); }
  Tensor to_tensor() const { return Tensor::vector(data); }
};

// Global average pooling of a grid.
FeatureVector to_vector(const FeatureGrid& grid);

// File layout: "CFG1", u32 height, u32 width, u32 channels, then
// height*width*channels f32 values, all little-endian.
void save_features(const FeatureGrid& grid, const std::filesystem::path& path);
FeatureGrid load_features(const std::filesystem::path& path);

struct SceneObject {
  int object_class = 0;
  int color = 0;
  std::size_t row = 0;
  std::size_t col = 0;

  bool operator==(const SceneObject&) const = default;
};

struct SceneSpec {
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;
  std::vector<SceneObject> objects;

  // Throws SceneError when an object is out of bounds or two share a cell.
  void validate() const;
};

struct FeatureSource {
  std::size_t channels = 16;
  double noise_sigma = 0.1;
  std::uint64_t embedding_seed = 0;

  // Stand-in for a stronger backbone: twice the channels, half the noise.
  FeatureSource richer() const { return {channels * 2, noise_sigma / 2.0, embedding_seed}; }
};

// Seeded embedding of one object identity; identity (-1, -1) is the
// background.
std::vector<float> identity_embedding(const FeatureSource& source, int object_class, int color);

// Each cell holds the embedding of its occupant (or the background) plus
// N(0, sigma) noise drawn from `noise_seed`.
FeatureGrid synth_scene_features(const SceneSpec& scene, const FeatureSource& source, std::uint64_t noise_seed);

}  // namespace caplab
