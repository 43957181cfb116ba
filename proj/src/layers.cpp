#include "caplab/layers.hpp"

#include <algorithm>
#include <cmath>

namespace caplab {

Tensor ParameterStore::add(const std::string& name, Tensor tensor) {
  if (contains(name)) throw ContractError("duplicate parameter name '" + name + "'");
  if (!tensor.requires_grad()) tensor.set_requires_grad(true);
  entries_.emplace_back(name, tensor);
  return tensor;
}

Tensor ParameterStore::get(const std::string& name) const {
  for (const auto& [n, t] : entries_) {
    if (n == name) return t;
  }
  throw ContractError("no parameter named '" + name + "'");
}

bool ParameterStore::contains(const std::string& name) const {
  return std::any_of(entries_.begin(), entries_.end(), [&](const NamedTensor& e) { return e.first == name; });
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : entries_) n += t.size();
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& [name, t] : entries_) t.zero_grad();
}

Tensor uniform_tensor(Shape shape, double limit, Rng& rng) {
  Tensor t = Tensor::zeros(std::move(shape), true);
  std::uniform_real_distribution<double> dist(-limit, limit);
  for (double& v : t.mutable_data()) v = dist(rng);
  return t;
}

Tensor glorot_tensor(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  return uniform_tensor({fan_in, fan_out}, limit, rng);
}

Embedding Embedding::create(std::size_t vocab, std::size_t dim, Rng& rng) {
  return Embedding{glorot_tensor(vocab, dim, rng)};
}

Tensor Embedding::lookup(int id) const {
  const int ids[] = {id};
  return reshape(gather_rows(table, ids), {table.dim(1)});
}

Dense Dense::create(std::size_t in, std::size_t out, Rng& rng) {
  return Dense{glorot_tensor(in, out, rng), Tensor::zeros({out}, true)};
}

Tensor Dense::forward(const Tensor& x) const { return add(matmul(x, weight), bias); }

LstmCell LstmCell::create(std::size_t input_dim, std::size_t units, Rng& rng) {
  if (input_dim == 0 || units == 0) throw DimensionError("LstmCell: input_dim and units must be positive");
  LstmCell cell;
  cell.input_dim = input_dim;
  cell.units = units;
  cell.W = uniform_tensor({input_dim, 4 * units}, 0.08, rng);
  cell.U = uniform_tensor({units, 4 * units}, 0.08, rng);
  cell.b = Tensor::zeros({4 * units}, true);
  auto b = cell.b.mutable_data();
  std::fill(b.begin() + units, b.begin() + 2 * units, 1.0);
  return cell;
}

LstmState zero_state(std::size_t units) { return {Tensor::zeros({units}), Tensor::zeros({units})}; }

LstmState lstm_step(const LstmCell& cell, const Tensor& x, const Tensor& h, const Tensor& c) {
  const std::size_t u = cell.units;
  if (x.rank() != 1 || x.size() != cell.input_dim) {
    throw DimensionError("lstm_step: input " + shape_str(x.shape()) + " does not match input_dim " +
                         std::to_string(cell.input_dim));
  }
  if (h.rank() != 1 || h.size() != u || c.rank() != 1 || c.size() != u) {
    throw DimensionError("lstm_step: state " + shape_str(h.shape()) + "/" + shape_str(c.shape()) +
                         " does not match units " + std::to_string(u));
  }
  const Tensor gates = add(add(matmul(x, cell.W), matmul(h, cell.U)), cell.b);
  const Tensor i = sigmoid(slice(gates, 0, 0, u));
  const Tensor f = sigmoid(slice(gates, 0, u, 2 * u));
  const Tensor g = tanh(slice(gates, 0, 2 * u, 3 * u));
  const Tensor o = sigmoid(slice(gates, 0, 3 * u, 4 * u));
  Tensor c_next = add(mul(f, c), mul(i, g));
  Tensor h_next = mul(o, tanh(c_next));
  return {std::move(h_next), std::move(c_next)};
}

BiLstm BiLstm::create(std::size_t input_dim, std::size_t units, Rng& rng) {
  BiLstm layer;
  layer.forward = LstmCell::create(input_dim, units, rng);
  layer.backward = LstmCell::create(input_dim, units, rng);
  return layer;
}

Tensor bilstm_sequence(const BiLstm& layer, const Tensor& xs) {
  if (!xs.defined() || xs.rank() != 2) throw DimensionError("bilstm_sequence: expected [T x d] input");
  const std::size_t steps = xs.dim(0);
  if (steps == 0) throw ContractError("bilstm_sequence: empty sequence");
  std::vector<Tensor> inputs;
  inputs.reserve(steps);
  for (std::size_t t = 0; t < steps; ++t) inputs.push_back(select_row(xs, t));

  std::vector<Tensor> fwd(steps);
  LstmState s = zero_state(layer.units());
  for (std::size_t t = 0; t < steps; ++t) {
    s = lstm_step(layer.forward, inputs[t], s.h, s.c);
    fwd[t] = s.h;
  }
  std::vector<Tensor> bwd(steps);
  s = zero_state(layer.units());
  for (std::size_t t = steps; t-- > 0;) {
    s = lstm_step(layer.backward, inputs[t], s.h, s.c);
    bwd[t] = s.h;
  }
  return concat({stack_rows(fwd), stack_rows(bwd)}, 1);
}

SpatialEncoding encode_spatial(const BiLstm& layer, const Tensor& grid) {
  if (!grid.defined() || grid.rank() != 3) throw DimensionError("encode_spatial: expected an [H x W x C] grid");
  const Tensor patches = reshape(grid, {grid.dim(0) * grid.dim(1), grid.dim(2)});
  return SpatialEncoding{bilstm_sequence(layer, patches)};
}

AdditiveAttention AdditiveAttention::create(std::size_t query_dim, std::size_t value_dim, std::size_t attn_dim,
                                            Rng& rng, ScoreForm form) {
  AdditiveAttention attn;
  attn.Wq = glorot_tensor(query_dim, attn_dim, rng);
  attn.Wk = glorot_tensor(value_dim, attn_dim, rng);
  const double limit = std::sqrt(6.0 / static_cast<double>(attn_dim + 1));
  attn.v = uniform_tensor({attn_dim}, limit, rng);
  attn.form = form;
  return attn;
}

Tensor attention_keys(const AdditiveAttention& attn, const Tensor& values) {
  if (!values.defined() || values.rank() != 2 || values.dim(0) == 0) {
    throw DimensionError("attend: values must be [S x m] with S >= 1");
  }
  if (values.dim(1) != attn.Wk.dim(0)) {
    throw DimensionError("attend: value width " + std::to_string(values.dim(1)) + " does not match key projection " +
                         shape_str(attn.Wk.shape()));
  }
  return matmul(values, attn.Wk);
}

AttentionResult attend_with_keys(const AdditiveAttention& attn, const Tensor& query, const Tensor& values,
                                 const Tensor& keys) {
  if (query.rank() != 1 || query.size() != attn.Wq.dim(0)) {
    throw DimensionError("attend: query " + shape_str(query.shape()) + " does not match query projection " +
                         shape_str(attn.Wq.shape()));
  }
  const Tensor projected = matmul(query, attn.Wq);
  Tensor scores = attn.form == ScoreForm::Additive ? matmul(tanh(add(keys, projected)), attn.v)
                                                   : matmul(keys, projected);
  Tensor weights = softmax(scores);
  Tensor context = matmul(weights, values);
  return {std::move(context), std::move(weights)};
}

AttentionResult attend(const AdditiveAttention& attn, const Tensor& query, const Tensor& values) {
  return attend_with_keys(attn, query, values, attention_keys(attn, values));
}

Tensor label_smoothed_ce(const Tensor& logits, int target, double epsilon) {
  if (!(epsilon >= 0.0 && epsilon < 1.0)) throw ContractError("label_smoothed_ce: epsilon must lie in [0, 1)");
  if (logits.rank() != 1) throw DimensionError("label_smoothed_ce: logits must be rank 1, got " + shape_str(logits.shape()));
  const std::size_t vocab = logits.size();
  if (target < 0 || static_cast<std::size_t>(target) >= vocab) {
    throw IndexError("label_smoothed_ce: target " + std::to_string(target) + " out of range for V=" +
                     std::to_string(vocab));
  }
  std::vector<double> q(vocab, epsilon / static_cast<double>(vocab));
  q[static_cast<std::size_t>(target)] += 1.0 - epsilon;
  const Tensor smoothed = Tensor::vector(std::move(q));
  return scale(sum(mul(log_softmax(logits), smoothed)), -1.0);
}

}  // namespace caplab
