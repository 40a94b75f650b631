#pragma once

#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "dpf/autodiff.hpp"
#include "dpf/rng.hpp"

namespace dpf::ad {

enum class Act { Linear, Relu, Tanh, Sigmoid };

inline Var activate(const Var& x, Act act) {
  switch (act) {
    case Act::Relu: return relu(x);
    case Act::Tanh: return tanhv(x);
    case Act::Sigmoid: return sigmoid(x);
    case Act::Linear: return x;
  }
  throw UsageError("unknown activation");
}

/// activation(x * W + b); b is a (1 x out) row broadcast over the batch.
inline Var dense(const Var& x, const Var& W, const Var& b, Act act = Act::Linear) {
  return activate(add(matmul(x, W), b), act);
}

/// Glorot-uniform weight matrix.
inline Tensor glorot_uniform(std::size_t fan_in, std::size_t fan_out, RngStream& rng) {
  double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor t = Tensor::zeros({fan_in, fan_out});
  for (double& v : t.data) v = rng.uniform(-limit, limit);
  return t;
}

/// Inverted-dropout mask: entries are 1/keep_prob with probability keep_prob,
/// else 0, so the mask has unit expectation. Returned as a plain tensor; wrap
/// in ad::constant so backward treats it as a constant.
inline Tensor dropout_mask(std::vector<std::size_t> shape, double keep_prob, RngStream& rng) {
  if (!(keep_prob > 0.0) || keep_prob > 1.0) {
    throw UsageError("dropout_mask: keep_prob must be in (0, 1]");
  }
  Tensor t = Tensor::zeros(std::move(shape));
  double inv = 1.0 / keep_prob;
  for (double& v : t.data) v = rng.bernoulli(keep_prob) ? inv : 0.0;
  return t;
}

/// Named collection of trainable parameters. std::map keeps iteration order
/// deterministic, which checkpoints and Adam rely on.
struct ParamStore {
  std::map<std::string, Var> params;

  Var add(const std::string& name, Tensor init) {
    if (params.count(name)) throw UsageError("duplicate parameter: " + name);
    Var v = leaf(std::move(init), name);
    params.emplace(name, v);
    return v;
  }
  Var get(const std::string& name) const {
    auto it = params.find(name);
    if (it == params.end()) throw UsageError("unknown parameter: " + name);
    return it->second;
  }
  bool has(const std::string& name) const { return params.count(name) > 0; }

  void zero_grad() {
    for (auto& [name, v] : params) v.node()->zero_grad();
  }

  /// Parameters whose name starts with any of the given prefixes.
  std::vector<std::pair<std::string, Var>> with_prefixes(
      const std::vector<std::string>& prefixes) const {
    std::vector<std::pair<std::string, Var>> out;
    for (const auto& [name, v] : params) {
      for (const auto& p : prefixes) {
        if (name.rfind(p, 0) == 0) {
          out.emplace_back(name, v);
          break;
        }
      }
    }
    return out;
  }
  std::vector<std::pair<std::string, Var>> all() const {
    return {params.begin(), params.end()};
  }
};

struct LstmCellParams {
  Var Wx;  // (in x 4H), gate order i, f, g, o
  Var Wh;  // (H x 4H)
  Var b;   // (1 x 4H)
};

inline LstmCellParams make_lstm_cell(ParamStore& store, const std::string& prefix,
                                     std::size_t in, std::size_t hidden, RngStream& rng) {
  return LstmCellParams{
      store.add(prefix + "Wx", glorot_uniform(in, 4 * hidden, rng)),
      store.add(prefix + "Wh", glorot_uniform(hidden, 4 * hidden, rng)),
      store.add(prefix + "b", Tensor::zeros({1, 4 * hidden})),
  };
}

/// Standard LSTM cell. x: (n x in), h/c: (n x H). Returns (h', c').
inline std::pair<Var, Var> lstm_cell(const Var& x, const Var& h, const Var& c,
                                     const LstmCellParams& p) {
  std::size_t H = h.cols();
  Var gates = add(add(matmul(x, p.Wx), matmul(h, p.Wh)), p.b);
  Var ig = sigmoid(slice_cols(gates, 0, H));
  Var fg = sigmoid(slice_cols(gates, H, 2 * H));
  Var gg = tanhv(slice_cols(gates, 2 * H, 3 * H));
  Var og = sigmoid(slice_cols(gates, 3 * H, 4 * H));
  Var c_next = add(mul(fg, c), mul(ig, gg));
  Var h_next = mul(og, tanhv(c_next));
  return {h_next, c_next};
}

}  // namespace dpf::ad
