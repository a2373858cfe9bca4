#pragma once

// The two learnable components: an MLP control policy and an encoder-only
// transformer dynamics model. Both run batched: every input is [B, features].

#include "diffengine.hpp"

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace tubedpc {

using ad::Tensor;

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]

  Tensor operator()(const Tensor& x) const { return ad::add(ad::matmul(x, weight), bias); }
};

namespace detail {

inline Tensor normal_tensor(ad::Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(ad::numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v));
}

inline Linear make_linear(std::size_t in, std::size_t out, std::mt19937_64& rng) {
  return {normal_tensor({in, out}, 1.0 / std::sqrt(static_cast<double>(in)), rng), Tensor::zeros({out})};
}

inline Tensor reciprocal(const Tensor& t) {
  auto v = t.to_vector();
  for (auto& x : v) x = 1.0 / x;
  return Tensor(t.shape(), std::move(v));
}

}  // namespace detail

// ---------------------------------------------------------------- policy --

struct PolicyDims {
  std::size_t input_dim = 0;
  std::vector<std::size_t> hidden{64, 64};
  std::size_t output_dim = 4;
};

/// Feed-forward ReLU network u = H_L z_L + b_L. Inputs are shifted and scaled
/// by fixed (non-trained) normalization vectors before the first layer.
struct PolicyParams {
  std::size_t input_dim = 0;
  std::size_t output_dim = 0;
  Tensor input_offset;  // [input_dim]
  Tensor input_scale;   // [input_dim]
  std::vector<Linear> layers;

  /// f(name, tensor&, trainable) for every array, in a fixed order.
  template <class F>
  void visit(F&& f) {
    f("input_offset", input_offset, false);
    f("input_scale", input_scale, false);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      f("layer" + std::to_string(l) + ".weight", layers[l].weight, true);
      f("layer" + std::to_string(l) + ".bias", layers[l].bias, true);
    }
  }
  template <class F>
  void visit(F&& f) const {
    const_cast<PolicyParams*>(this)->visit([&](const std::string& n, Tensor& t, bool tr) {
      f(n, static_cast<const Tensor&>(t), tr);
    });
  }

  PolicyDims dims() const {
    PolicyDims d{input_dim, {}, output_dim};
    for (std::size_t l = 0; l + 1 < layers.size(); ++l) d.hidden.push_back(layers[l].weight.dim(1));
    return d;
  }
};

/// Per-sample policy inputs: the 11-dimensional output vector, the next-N
/// prices and, for the guaranteed variant only, the next-N tightening values.
struct PolicyInput {
  Tensor state;                      // [B, n_x]
  Tensor prices;                     // [B, N]
  std::optional<Tensor> tightening;  // [B, N]
};

inline PolicyParams init_policy(std::uint64_t seed, const PolicyDims& dims) {
  if (dims.input_dim == 0 || dims.output_dim == 0) throw std::invalid_argument("policy dims must be positive");
  std::mt19937_64 rng(seed);
  PolicyParams p;
  p.input_dim = dims.input_dim;
  p.output_dim = dims.output_dim;
  p.input_offset = Tensor::zeros({dims.input_dim});
  p.input_scale = Tensor::full({dims.input_dim}, 1.0);
  std::size_t in = dims.input_dim;
  for (auto h : dims.hidden) {
    if (h == 0) throw std::invalid_argument("policy hidden width must be positive");
    p.layers.push_back(detail::make_linear(in, h, rng));
    in = h;
  }
  p.layers.push_back(detail::make_linear(in, dims.output_dim, rng));
  return p;
}

inline Tensor policy_forward(const PolicyInput& input, const PolicyParams& params) {
  std::vector<Tensor> parts{input.state, input.prices};
  if (input.tightening) parts.push_back(*input.tightening);
  Tensor z = ad::concat(parts);
  if (z.cols() != params.input_dim)
    throw ShapeError("policy input width " + std::to_string(z.cols()) + " != expected " +
                     std::to_string(params.input_dim));
  z = ad::mul(ad::sub(z, params.input_offset), detail::reciprocal(params.input_scale));
  for (std::size_t l = 0; l + 1 < params.layers.size(); ++l) z = ad::relu(params.layers[l](z));
  return params.layers.back()(z);
}

// -------------------------------------------------------------- dynamics --

struct DynamicsConfig {
  std::size_t n_state = 8;   // zone temperatures
  std::size_t n_aux = 3;     // total energy, appliance energy, HP return temperature
  std::size_t n_action = 4;  // thermostat setpoints
  std::size_t width = 32;
  std::size_t blocks = 2;
  std::size_t heads = 2;
  std::size_t ff_width = 64;
  // Adds the current state/aux values to the head output (persistence skip).
  bool residual = true;

  std::size_t n_features() const { return n_state + n_aux + n_action; }
  std::size_t n_out() const { return n_state + n_aux; }
};

struct EncoderBlock {
  Tensor wq, wk, wv;  // [W, W]
  Linear out;         // [W, W]
  Tensor ln1_gain, ln1_offset;
  Linear ff1;  // [W, F]
  Linear ff2;  // [F, W]
  Tensor ln2_gain, ln2_offset;
};

/// Encoder-only transformer over one token per input feature. Each scalar
/// feature v_i becomes v_i * e_i + b_i + p_i (per-feature embedding, bias and
/// fixed sinusoidal position), followed by post-norm encoder blocks and a
/// linear head over the flattened tokens.
struct DynamicsParams {
  DynamicsConfig config;
  Tensor input_offset;  // [F]
  Tensor input_scale;   // [F]
  Tensor output_scale;  // [n_out]
  Tensor embed_weight;  // [F, W]
  Tensor embed_bias;    // [F, W]
  Tensor positional;    // [F, W], fixed
  std::vector<EncoderBlock> blocks;
  Linear head;  // [F*W, n_out]

  template <class F>
  void visit(F&& f) {
    f("input_offset", input_offset, false);
    f("input_scale", input_scale, false);
    f("output_scale", output_scale, false);
    f("embed_weight", embed_weight, true);
    f("embed_bias", embed_bias, true);
    f("positional", positional, false);
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      auto p = "block" + std::to_string(b) + ".";
      auto& k = blocks[b];
      f(p + "wq", k.wq, true);
      f(p + "wk", k.wk, true);
      f(p + "wv", k.wv, true);
      f(p + "out.weight", k.out.weight, true);
      f(p + "out.bias", k.out.bias, true);
      f(p + "ln1_gain", k.ln1_gain, true);
      f(p + "ln1_offset", k.ln1_offset, true);
      f(p + "ff1.weight", k.ff1.weight, true);
      f(p + "ff1.bias", k.ff1.bias, true);
      f(p + "ff2.weight", k.ff2.weight, true);
      f(p + "ff2.bias", k.ff2.bias, true);
      f(p + "ln2_gain", k.ln2_gain, true);
      f(p + "ln2_offset", k.ln2_offset, true);
    }
    f("head.weight", head.weight, true);
    f("head.bias", head.bias, true);
  }
  template <class F>
  void visit(F&& f) const {
    const_cast<DynamicsParams*>(this)->visit([&](const std::string& n, Tensor& t, bool tr) {
      f(n, static_cast<const Tensor&>(t), tr);
    });
  }
};

inline Tensor sinusoidal_positions(std::size_t tokens, std::size_t width) {
  std::vector<double> v(tokens * width);
  for (std::size_t p = 0; p < tokens; ++p)
    for (std::size_t i = 0; i < width; ++i) {
      double rate = std::pow(10000.0, -static_cast<double>(i / 2 * 2) / static_cast<double>(width));
      v[p * width + i] = i % 2 == 0 ? std::sin(static_cast<double>(p) * rate) : std::cos(static_cast<double>(p) * rate);
    }
  return Tensor({tokens, width}, std::move(v));
}

inline DynamicsParams init_dynamics(std::uint64_t seed, const DynamicsConfig& cfg) {
  if (cfg.n_state == 0 || cfg.n_action == 0 || cfg.width == 0 || cfg.blocks == 0 || cfg.heads == 0 ||
      cfg.ff_width == 0)
    throw std::invalid_argument("dynamics dims must be positive");
  if (cfg.width % cfg.heads != 0) throw std::invalid_argument("model width must be divisible by head count");
  std::mt19937_64 rng(seed);
  std::size_t F = cfg.n_features(), W = cfg.width;
  DynamicsParams p;
  p.config = cfg;
  p.input_offset = Tensor::zeros({F});
  p.input_scale = Tensor::full({F}, 1.0);
  p.output_scale = Tensor::full({cfg.n_out()}, 1.0);
  p.embed_weight = detail::normal_tensor({F, W}, 1.0, rng);
  p.embed_bias = Tensor::zeros({F, W});
  p.positional = sinusoidal_positions(F, W);
  for (std::size_t b = 0; b < cfg.blocks; ++b) {
    EncoderBlock k;
    double s = 1.0 / std::sqrt(static_cast<double>(W));
    k.wq = detail::normal_tensor({W, W}, s, rng);
    k.wk = detail::normal_tensor({W, W}, s, rng);
    k.wv = detail::normal_tensor({W, W}, s, rng);
    k.out = detail::make_linear(W, W, rng);
    k.ln1_gain = Tensor::full({W}, 1.0);
    k.ln1_offset = Tensor::zeros({W});
    k.ff1 = detail::make_linear(W, cfg.ff_width, rng);
    k.ff2 = detail::make_linear(cfg.ff_width, W, rng);
    k.ln2_gain = Tensor::full({W}, 1.0);
    k.ln2_offset = Tensor::zeros({W});
    p.blocks.push_back(std::move(k));
  }
  p.head = detail::make_linear(F * W, cfg.n_out(), rng);
  return p;
}

/// One-step prediction [B, n_out] = [next states, next aux] from state
/// [B, n_state], action [B, n_action] and aux [B, n_aux]. When `attention` is
/// given, the softmax weights of every block and head are appended to it.
inline Tensor dynamics_forward(const Tensor& state, const Tensor& action, const Tensor& aux,
                               const DynamicsParams& params, std::vector<Tensor>* attention = nullptr) {
  const auto& cfg = params.config;
  if (state.rank() != 2 || state.cols() != cfg.n_state || action.cols() != cfg.n_action ||
      aux.cols() != cfg.n_aux || action.rows() != state.rows() || aux.rows() != state.rows())
    throw ShapeError("dynamics input dims do not match the embedding");
  std::size_t B = state.rows(), F = cfg.n_features(), W = cfg.width, dh = W / cfg.heads;

  Tensor in = ad::concat({state, aux, action});
  Tensor z = ad::mul(ad::sub(in, params.input_offset), detail::reciprocal(params.input_scale));
  Tensor tokens = ad::mul(ad::reshape(z, {B, F, 1}), params.embed_weight);
  tokens = ad::add(tokens, ad::add(params.embed_bias, params.positional));

  double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  for (const auto& blk : params.blocks) {
    Tensor q = ad::matmul(tokens, blk.wq);
    Tensor k = ad::matmul(tokens, blk.wk);
    Tensor v = ad::matmul(tokens, blk.wv);
    std::vector<Tensor> heads;
    for (std::size_t h = 0; h < cfg.heads; ++h) {
      Tensor qh = ad::slice(q, h * dh, (h + 1) * dh);
      Tensor kh = ad::slice(k, h * dh, (h + 1) * dh);
      Tensor vh = ad::slice(v, h * dh, (h + 1) * dh);
      Tensor a = ad::softmax_rows(ad::scale(ad::matmul(qh, ad::transpose(kh)), att_scale));
      if (attention) attention->push_back(a);
      heads.push_back(ad::matmul(a, vh));
    }
    Tensor att = blk.out(heads.size() == 1 ? heads[0] : ad::concat(heads));
    Tensor h1 = ad::add(ad::mul(ad::layernorm_rows(ad::add(tokens, att)), blk.ln1_gain), blk.ln1_offset);
    Tensor ff = blk.ff2(ad::relu(blk.ff1(h1)));
    tokens = ad::add(ad::mul(ad::layernorm_rows(ad::add(h1, ff)), blk.ln2_gain), blk.ln2_offset);
  }
  Tensor out = ad::mul(params.head(ad::reshape(tokens, {B, F * W})), params.output_scale);
  if (cfg.residual) out = ad::add(out, ad::slice(in, 0, cfg.n_out()));
  return out;
}

// ------------------------------------------------------------ utilities --

/// Copy of a parameter set whose trainable tensors are leaves of `tape`.
template <class Params>
Params bind(ad::Tape& tape, const Params& params) {
  Params bound = params;
  bound.visit([&](const std::string&, Tensor& t, bool trainable) {
    if (trainable) t = tape.leaf(t);
  });
  return bound;
}

template <class Params>
std::size_t trainable_size(const Params& p) {
  std::size_t n = 0;
  p.visit([&](const std::string&, const Tensor& t, bool tr) {
    if (tr) n += t.size();
  });
  return n;
}

/// Gradient of every trainable tensor of a bound parameter set, flattened in
/// visit order.
template <class Params>
std::vector<double> flat_gradient(const ad::Gradients& g, const Params& bound) {
  std::vector<double> out;
  bound.visit([&](const std::string&, const Tensor& t, bool tr) {
    if (!tr) return;
    auto gt = g[t];
    out.insert(out.end(), gt.data().begin(), gt.data().end());
  });
  return out;
}

template <class Params>
std::vector<double> flat_values(const Params& p) {
  std::vector<double> out;
  p.visit([&](const std::string&, const Tensor& t, bool tr) {
    if (tr) out.insert(out.end(), t.data().begin(), t.data().end());
  });
  return out;
}

template <class Params>
void set_flat_values(Params& p, std::span<const double> values) {
  std::size_t off = 0;
  p.visit([&](const std::string&, Tensor& t, bool tr) {
    if (!tr) return;
    if (off + t.size() > values.size()) throw ShapeError("flat parameter vector too short");
    auto& d = t.mutable_data();
    std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(off), d.size(), d.begin());
    off += d.size();
  });
  if (off != values.size()) throw ShapeError("flat parameter vector length mismatch");
}

}  // namespace tubedpc
