#pragma once

// Dense rectifier hashing network with hand-written forward/backward passes,
// classical-momentum SGD for the student and EMA updates for the teacher.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "pts3h/binary_io.hpp"
#include "pts3h/matrix.hpp"

namespace pts3h {

struct Architecture {
  std::size_t input_dim = 0;
  std::vector<std::size_t> hidden{64, 64};
  std::size_t code_bits = 16;

  // Output widths of every layer, last one equal to code_bits.
  std::vector<std::size_t> layer_widths() const {
    std::vector<std::size_t> widths(hidden);
    widths.push_back(code_bits);
    return widths;
  }

  void validate() const {
    if (input_dim == 0) throw std::invalid_argument("architecture: input dim must be >= 1");
    if (code_bits == 0) throw std::invalid_argument("architecture: code bits must be >= 1");
    for (std::size_t h : hidden) {
      if (h == 0) throw std::invalid_argument("architecture: hidden widths must be >= 1");
    }
  }

  friend bool operator==(const Architecture&, const Architecture&) = default;
};

struct DenseLayer {
  Matrix weight;  // out x in
  std::vector<double> bias;

  friend bool operator==(const DenseLayer&, const DenseLayer&) = default;
};

// Used both for parameters and for the gradients / momentum buffers congruent to them.
using LayerStack = std::vector<DenseLayer>;

struct EncoderParams {
  Architecture arch;
  LayerStack layers;

  friend bool operator==(const EncoderParams&, const EncoderParams&) = default;
};

struct ForwardTrace {
  Matrix input;
  std::vector<Matrix> pre_activations;  // one per layer
  std::vector<Matrix> activations;      // relu(pre) for hidden layers, identity for the last

  std::size_t depth() const { return activations.size(); }
  const Matrix& embeddings() const { return activations.back(); }
};

struct OptimizerState {
  LayerStack velocity;
  double learning_rate = 1e-2;
  double momentum = 0.9;
  // Multiplier on learning_rate per layer; the last layer learns ten times faster by default.
  std::vector<double> layer_lr_scale;
};

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline LayerStack zeros_like(const LayerStack& layers) {
  LayerStack out;
  out.reserve(layers.size());
  for (const auto& layer : layers) {
    out.push_back({Matrix(layer.weight.rows(), layer.weight.cols()),
                   std::vector<double>(layer.bias.size(), 0.0)});
  }
  return out;
}

inline bool congruent(const LayerStack& a, const LayerStack& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t l = 0; l < a.size(); ++l) {
    if (!a[l].weight.same_shape(b[l].weight) || a[l].bias.size() != b[l].bias.size()) return false;
  }
  return true;
}

inline bool all_finite(const LayerStack& layers) {
  for (const auto& layer : layers) {
    for (double w : layer.weight.values()) {
      if (!std::isfinite(w)) return false;
    }
    for (double b : layer.bias) {
      if (!std::isfinite(b)) return false;
    }
  }
  return true;
}

// Fan-in scaled uniform init, U(-sqrt(6/fan_in), sqrt(6/fan_in)), zero biases.
inline EncoderParams init_params(std::uint64_t seed, const Architecture& arch) {
  arch.validate();
  std::mt19937_64 rng(seed);
  EncoderParams params{arch, {}};
  std::size_t fan_in = arch.input_dim;
  for (std::size_t width : arch.layer_widths()) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-limit, limit);
    DenseLayer layer{Matrix(width, fan_in), std::vector<double>(width, 0.0)};
    for (double& w : layer.weight.values()) w = dist(rng);
    params.layers.push_back(std::move(layer));
    fan_in = width;
  }
  return params;
}

inline OptimizerState make_optimizer(const EncoderParams& params, double learning_rate,
                                     double momentum = 0.9, double lower_layer_scale = 0.1) {
  OptimizerState state;
  state.velocity = zeros_like(params.layers);
  state.learning_rate = learning_rate;
  state.momentum = momentum;
  state.layer_lr_scale.assign(params.layers.size(), lower_layer_scale);
  if (!state.layer_lr_scale.empty()) state.layer_lr_scale.back() = 1.0;
  return state;
}

inline ForwardTrace forward(const EncoderParams& params, const Matrix& batch) {
  if (batch.cols() != params.arch.input_dim) {
    throw std::invalid_argument("forward: batch has " + std::to_string(batch.cols()) +
                                " columns, encoder expects " +
                                std::to_string(params.arch.input_dim));
  }
  ForwardTrace trace;
  trace.input = batch;
  const std::size_t n = batch.rows();
  const Matrix* x = &trace.input;
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    const DenseLayer& layer = params.layers[l];
    const std::size_t out_dim = layer.weight.rows();
    const std::size_t in_dim = layer.weight.cols();
    Matrix pre(n, out_dim);
    for (std::size_t i = 0; i < n; ++i) {
      auto xi = x->row(i);
      auto zi = pre.row(i);
      for (std::size_t o = 0; o < out_dim; ++o) {
        auto w = layer.weight.row(o);
        double acc = layer.bias[o];
        for (std::size_t k = 0; k < in_dim; ++k) acc += w[k] * xi[k];
        zi[o] = acc;
      }
    }
    Matrix act = pre;
    if (l + 1 < params.layers.size()) {
      for (double& v : act.values()) v = v > 0.0 ? v : 0.0;
    }
    trace.pre_activations.push_back(std::move(pre));
    trace.activations.push_back(std::move(act));
    x = &trace.activations.back();
  }
  return trace;
}

// Gradients of <grad_embeddings, F(x)> with respect to every weight and bias.
inline LayerStack backward(const ForwardTrace& trace, const EncoderParams& params,
                           const Matrix& grad_embeddings) {
  if (trace.depth() != params.layers.size()) {
    throw std::invalid_argument("backward: trace depth does not match layer count");
  }
  if (!grad_embeddings.same_shape(trace.embeddings())) {
    throw std::invalid_argument("backward: gradient shape does not match embeddings");
  }
  LayerStack grads = zeros_like(params.layers);
  Matrix delta = grad_embeddings;
  const std::size_t n = delta.rows();
  for (std::size_t l = params.layers.size(); l-- > 0;) {
    const DenseLayer& layer = params.layers[l];
    const Matrix& layer_input = l == 0 ? trace.input : trace.activations[l - 1];
    const std::size_t out_dim = layer.weight.rows();
    const std::size_t in_dim = layer.weight.cols();
    if (l + 1 < params.layers.size()) {
      const Matrix& pre = trace.pre_activations[l];
      for (std::size_t idx = 0; idx < delta.size(); ++idx) {
        if (pre.values()[idx] <= 0.0) delta.values()[idx] = 0.0;
      }
    }
    DenseLayer& g = grads[l];
    for (std::size_t i = 0; i < n; ++i) {
      auto di = delta.row(i);
      auto xi = layer_input.row(i);
      for (std::size_t o = 0; o < out_dim; ++o) {
        const double d = di[o];
        if (d == 0.0) continue;
        g.bias[o] += d;
        auto gw = g.weight.row(o);
        for (std::size_t k = 0; k < in_dim; ++k) gw[k] += d * xi[k];
      }
    }
    if (l == 0) break;
    Matrix next(n, in_dim);
    for (std::size_t i = 0; i < n; ++i) {
      auto di = delta.row(i);
      auto ni = next.row(i);
      for (std::size_t o = 0; o < out_dim; ++o) {
        const double d = di[o];
        if (d == 0.0) continue;
        auto w = layer.weight.row(o);
        for (std::size_t k = 0; k < in_dim; ++k) ni[k] += d * w[k];
      }
    }
    delta = std::move(next);
  }
  return grads;
}

// v <- mu * v + g;  theta <- theta - lr * scale_l * v
inline void sgd_momentum_step(EncoderParams& params, const LayerStack& grads,
                              OptimizerState& state) {
  if (!congruent(params.layers, grads) || !congruent(params.layers, state.velocity)) {
    throw std::invalid_argument("sgd_momentum_step: gradient/buffer shapes do not match params");
  }
  if (!all_finite(grads)) throw DivergenceError("sgd_momentum_step: non-finite gradient");
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    const double scale = l < state.layer_lr_scale.size() ? state.layer_lr_scale[l] : 1.0;
    const double lr = state.learning_rate * scale;
    auto& w = params.layers[l].weight.values();
    auto& vw = state.velocity[l].weight.values();
    const auto& gw = grads[l].weight.values();
    for (std::size_t k = 0; k < w.size(); ++k) {
      vw[k] = state.momentum * vw[k] + gw[k];
      w[k] -= lr * vw[k];
    }
    auto& b = params.layers[l].bias;
    auto& vb = state.velocity[l].bias;
    const auto& gb = grads[l].bias;
    for (std::size_t k = 0; k < b.size(); ++k) {
      vb[k] = state.momentum * vb[k] + gb[k];
      b[k] -= lr * vb[k];
    }
  }
}

// teacher <- alpha * teacher + (1 - alpha) * student, elementwise.
inline void ema_update(EncoderParams& teacher, const EncoderParams& student, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw std::invalid_argument("ema_update: alpha must lie in [0, 1]");
  }
  if (!congruent(teacher.layers, student.layers)) {
    throw std::invalid_argument("ema_update: teacher and student shapes differ");
  }
  const double beta = 1.0 - alpha;
  for (std::size_t l = 0; l < teacher.layers.size(); ++l) {
    auto& tw = teacher.layers[l].weight.values();
    const auto& sw = student.layers[l].weight.values();
    for (std::size_t k = 0; k < tw.size(); ++k) tw[k] = alpha * tw[k] + beta * sw[k];
    auto& tb = teacher.layers[l].bias;
    const auto& sb = student.layers[l].bias;
    for (std::size_t k = 0; k < tb.size(); ++k) tb[k] = alpha * tb[k] + beta * sb[k];
  }
}

// Matrix of +1/-1 values, one row per item.
struct SignCodes {
  std::size_t count = 0;
  std::size_t bits = 0;
  std::vector<std::int8_t> values;

  std::span<const std::int8_t> row(std::size_t i) const { return {values.data() + i * bits, bits}; }
  friend bool operator==(const SignCodes&, const SignCodes&) = default;
};

// sgn with sgn(0) = +1.
inline std::int8_t code_sign(double v) { return v >= 0.0 ? std::int8_t{1} : std::int8_t{-1}; }

inline SignCodes sign_codes(const Matrix& embeddings) {
  SignCodes codes{embeddings.rows(), embeddings.cols(), {}};
  codes.values.reserve(embeddings.size());
  for (double v : embeddings.values()) codes.values.push_back(code_sign(v));
  return codes;
}

inline SignCodes encode(const EncoderParams& params, const Matrix& data) {
  return sign_codes(forward(params, data).embeddings());
}

// ---------------------------------------------------------------------------
// Checkpoint container: "PTS3", version, architecture, then f32 weights for the
// student, the teacher and the momentum buffers, followed by optimizer scalars.

struct Checkpoint {
  EncoderParams student;
  EncoderParams teacher;
  OptimizerState optimizer;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void write_stack(std::ostream& out, const LayerStack& layers) {
  for (const auto& layer : layers) {
    for (double w : layer.weight.values()) io::write_f32(out, w);
    for (double b : layer.bias) io::write_f32(out, b);
  }
}

inline void read_stack(std::istream& in, LayerStack& layers) {
  for (auto& layer : layers) {
    for (double& w : layer.weight.values()) w = io::read_f32(in);
    for (double& b : layer.bias) b = io::read_f32(in);
  }
}

inline LayerStack shaped_stack(const Architecture& arch) {
  LayerStack layers;
  std::size_t fan_in = arch.input_dim;
  for (std::size_t width : arch.layer_widths()) {
    layers.push_back({Matrix(width, fan_in), std::vector<double>(width, 0.0)});
    fan_in = width;
  }
  return layers;
}

}  // namespace detail

inline void write_checkpoint(std::ostream& out, const Checkpoint& ckpt) {
  const Architecture& arch = ckpt.student.arch;
  io::write_magic(out, "PTS3");
  io::write_u32(out, kCheckpointVersion);
  io::write_u32(out, static_cast<std::uint32_t>(arch.input_dim));
  io::write_u32(out, static_cast<std::uint32_t>(arch.hidden.size()));
  for (std::size_t h : arch.hidden) io::write_u32(out, static_cast<std::uint32_t>(h));
  io::write_u32(out, static_cast<std::uint32_t>(arch.code_bits));
  detail::write_stack(out, ckpt.student.layers);
  detail::write_stack(out, ckpt.teacher.layers);
  detail::write_stack(out, ckpt.optimizer.velocity);
  io::write_f32(out, ckpt.optimizer.learning_rate);
  io::write_f32(out, ckpt.optimizer.momentum);
  for (std::size_t l = 0; l < ckpt.student.layers.size(); ++l) {
    io::write_f32(out, l < ckpt.optimizer.layer_lr_scale.size() ? ckpt.optimizer.layer_lr_scale[l]
                                                                 : 1.0);
  }
}

inline Checkpoint read_checkpoint(std::istream& in) {
  io::expect_magic(in, "PTS3");
  io::expect_version(in, kCheckpointVersion);
  Architecture arch;
  arch.input_dim = io::read_u32(in);
  const std::uint32_t hidden_count = io::read_u32(in);
  if (hidden_count > 1024) throw io::FormatError("checkpoint: implausible layer count");
  arch.hidden.clear();
  for (std::uint32_t i = 0; i < hidden_count; ++i) arch.hidden.push_back(io::read_u32(in));
  arch.code_bits = io::read_u32(in);
  arch.validate();
  Checkpoint ckpt;
  ckpt.student = {arch, detail::shaped_stack(arch)};
  ckpt.teacher = {arch, detail::shaped_stack(arch)};
  ckpt.optimizer.velocity = detail::shaped_stack(arch);
  detail::read_stack(in, ckpt.student.layers);
  detail::read_stack(in, ckpt.teacher.layers);
  detail::read_stack(in, ckpt.optimizer.velocity);
  ckpt.optimizer.learning_rate = io::read_f32(in);
  ckpt.optimizer.momentum = io::read_f32(in);
  ckpt.optimizer.layer_lr_scale.resize(ckpt.student.layers.size());
  for (double& s : ckpt.optimizer.layer_lr_scale) s = io::read_f32(in);
  return ckpt;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  write_checkpoint(out, ckpt);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  return read_checkpoint(in);
}

}  // namespace pts3h
