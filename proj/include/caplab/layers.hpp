#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "caplab/autodiff.hpp"

namespace caplab {

using Rng = std::mt19937_64;

// Named, ordered parameter collection. Names are unique.
class ParameterStore {
 public:
  Tensor add(const std::string& name, Tensor tensor);
  Tensor get(const std::string& name) const;
  bool contains(const std::string& name) const;
  const std::vector<NamedTensor>& entries() const { return entries_; }
  std::size_t scalar_count() const;
  void zero_grad();

 private:
  std::vector<NamedTensor> entries_;
};

Tensor uniform_tensor(Shape shape, double limit, Rng& rng);
Tensor glorot_tensor(std::size_t fan_in, std::size_t fan_out, Rng& rng);

struct Embedding {
  Tensor table;  // [V x d]

  static Embedding create(std::size_t vocab, std::size_t dim, Rng& rng);
  // One row as a rank-1 vector.
  Tensor lookup(int id) const;
};

struct Dense {
  Tensor weight;  // [in x out]
  Tensor bias;    // [out]

  static Dense create(std::size_t in, std::size_t out, Rng& rng);
  Tensor forward(const Tensor& x) const;
};

// Gate layout along the 4*units axis: input, forget, cell, output.
struct LstmCell {
  std::size_t input_dim = 0;
  std::size_t units = 0;
  Tensor W;  // [input_dim x 4u]
  Tensor U;  // [u x 4u]
  Tensor b;  // [4u], forget slice starts at 1.0

  static LstmCell create(std::size_t input_dim, std::size_t units, Rng& rng);
};

struct LstmState {
  Tensor h;
  Tensor c;
};

LstmState zero_state(std::size_t units);

LstmState lstm_step(const LstmCell& cell, const Tensor& x, const Tensor& h, const Tensor& c);

struct BiLstm {
  LstmCell forward;
  LstmCell backward;

  static BiLstm create(std::size_t input_dim, std::size_t units, Rng& rng);
  std::size_t units() const { return forward.units; }
  std::size_t output_dim() const { return 2 * forward.units; }
};

// xs: [T x d] -> [T x 2u]; row t = concat(forward h_t, backward h_t), where
// the backward pass reads xs from row T-1 down to row 0.
Tensor bilstm_sequence(const BiLstm& layer, const Tensor& xs);

// Context-aware patch vectors over a raster-scanned grid.
struct SpatialEncoding {
  Tensor encoded;  // [S x 2u]
  std::size_t rows() const { return encoded.dim(0); }
};

// grid: [H x W x C], flattened row-major into S = H*W patch vectors.
SpatialEncoding encode_spatial(const BiLstm& layer, const Tensor& grid);

enum class ScoreForm { Additive, Multiplicative };

struct AdditiveAttention {
  Tensor Wq;  // [query_dim x attn_dim]
  Tensor Wk;  // [value_dim x attn_dim]
  Tensor v;   // [attn_dim]
  ScoreForm form = ScoreForm::Additive;

  static AdditiveAttention create(std::size_t query_dim, std::size_t value_dim, std::size_t attn_dim, Rng& rng,
                                  ScoreForm form = ScoreForm::Additive);
  std::size_t attn_dim() const { return v.size(); }
};

struct AttentionResult {
  Tensor context;  // [m]
  Tensor weights;  // [S]
};

// Key projections depend only on the values; decoders compute them once per
// image and reuse them at every step.
Tensor attention_keys(const AdditiveAttention& attn, const Tensor& values);

AttentionResult attend(const AdditiveAttention& attn, const Tensor& query, const Tensor& values);
AttentionResult attend_with_keys(const AdditiveAttention& attn, const Tensor& query, const Tensor& values,
                                 const Tensor& keys);

// -sum_i q_i log softmax(logits)_i with q = (1-eps) onehot(target) + eps/V.
Tensor label_smoothed_ce(const Tensor& logits, int target, double epsilon);

}  // namespace caplab
