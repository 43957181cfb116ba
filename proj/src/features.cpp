#include "caplab/features.hpp"

#include <cmath>
#include <fstream>
#include <iterator>
#include <random>
#include <sstream>

#include "caplab/binary_io.hpp"

namespace caplab {

namespace {

constexpr std::string_view kFeatureMagic = "CFG1";

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

std::uint64_t mix(std::initializer_list<std::uint64_t> parts) {
  std::uint64_t h = 0x243F6A8885A308D3ULL;
  for (std::uint64_t p : parts) h = splitmix(h ^ p);
  return h;
}

}  // namespace

void FeatureGrid::validate() const {
  if (height == 0 || width == 0 || channels == 0) throw DimensionError("feature grid extents must be positive");
  if (data.size() != height * width * channels) {
    throw DimensionError("feature grid holds " + std::to_string(data.size()) + " values, expected " +
                         std::to_string(height * width * channels));
  }
  for (float v : data) {
    if (!std::isfinite(v)) throw DimensionError("feature grid contains a non-finite value");
  }
}

Tensor FeatureGrid::to_tensor() const {
  return Tensor::from({height, width, channels}, std::vector<double>(data.begin(), data.end()));
}

FeatureVector to_vector(const FeatureGrid& grid) {
  const Tensor pooled = mean_over_spatial(grid.to_tensor());
  return FeatureVector{std::vector<double>(pooled.data().begin(), pooled.data().end())};
}

void save_features(const FeatureGrid& grid, const std::filesystem::path& path) {
  grid.validate();
  binio::Writer w;
  w.bytes(kFeatureMagic);
  w.u32(static_cast<std::uint32_t>(grid.height));
  w.u32(static_cast<std::uint32_t>(grid.width));
  w.u32(static_cast<std::uint32_t>(grid.channels));
  for (float v : grid.data) w.f32(v);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FeatureFileError("cannot open feature file for writing: " + path.string());
  out.write(w.buffer().data(), static_cast<std::streamsize>(w.buffer().size()));
  if (!out) throw FeatureFileError("failed writing feature file: " + path.string());
}

FeatureGrid load_features(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingFeatureFile("feature file not found: " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  binio::Reader r(bytes);
  if (!r.has(16) || r.bytes(4) != kFeatureMagic) {
    throw MalformedFeatureHeader("malformed feature header in " + path.string());
  }
  FeatureGrid grid;
  grid.height = r.u32();
  grid.width = r.u32();
  grid.channels = r.u32();
  if (grid.height == 0 || grid.width == 0 || grid.channels == 0) {
    throw MalformedFeatureHeader("feature header has a zero extent in " + path.string());
  }
  const std::size_t expected = grid.height * grid.width * grid.channels;
  const std::size_t actual = r.remaining() / 4;
  if (actual < expected || r.remaining() % 4 != 0) {
    std::ostringstream msg;
    msg << "truncated feature payload in " << path.string() << ": expected " << expected << " values, found "
        << actual;
    throw TruncatedFeaturePayload(msg.str());
  }
  if (actual > expected) {
    throw MalformedFeatureHeader("feature file " + path.string() + " has trailing data after " +
                                 std::to_string(expected) + " values");
  }
  grid.data.resize(expected);
  for (float& v : grid.data) v = r.f32();
  return grid;
}

void SceneSpec::validate() const {
  if (grid_h == 0 || grid_w == 0) throw SceneError("scene grid extents must be positive");
  std::vector<bool> used(grid_h * grid_w, false);
  for (const auto& o : objects) {
    if (o.row >= grid_h || o.col >= grid_w) {
      throw SceneError("object at (" + std::to_string(o.row) + "," + std::to_string(o.col) +
                       ") lies outside the " + std::to_string(grid_h) + "x" + std::to_string(grid_w) + " grid");
    }
    const std::size_t cell = o.row * grid_w + o.col;
    if (used[cell]) {
      throw SceneError("two objects share cell (" + std::to_string(o.row) + "," + std::to_string(o.col) + ")");
    }
    used[cell] = true;
  }
}

std::vector<float> identity_embedding(const FeatureSource& source, int object_class, int color) {
  std::mt19937_64 rng(mix({source.embedding_seed, source.channels, static_cast<std::uint64_t>(object_class + 1),
               static_cast<std::uint64_t>(color + 1)}));
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<float> e(source.channels);
  for (float& v : e) v = static_cast<float>(normal(rng));
  return e;
}

FeatureGrid synth_scene_features(const SceneSpec& scene, const FeatureSource& source, std::uint64_t noise_seed) {
  scene.validate();
  if (source.channels == 0) throw DimensionError("feature source needs at least one channel");
  if (!(source.noise_sigma >= 0.0)) throw SceneError("noise sigma must be non-negative");
  FeatureGrid grid;
  grid.height = scene.grid_h;
  grid.width = scene.grid_w;
  grid.channels = source.channels;
  grid.data.resize(grid.cells() * grid.channels);

  const std::vector<float> background = identity_embedding(source, -1, -1);
  for (std::size_t cell = 0; cell < grid.cells(); ++cell) {
    std::copy(background.begin(), background.end(), grid.data.begin() + cell * grid.channels);
  }
  for (const auto& o : scene.objects) {
    const std::vector<float> e = identity_embedding(source, o.object_class, o.color);
    std::copy(e.begin(), e.end(), grid.data.begin() + (o.row * grid.width + o.col) * grid.channels);
  }
  if (source.noise_sigma > 0.0) {
    std::mt19937_64 rng(mix({noise_seed, 0x6E6F697365ULL}));
    std::normal_distribution<double> normal(0.0, source.noise_sigma);
    for (float& v : grid.data) v = static_cast<float>(static_cast<double>(v) + normal(rng));
  }
  return grid;
}

}  // namespace caplab
