#pragma once

// Loss terms of the teacher-student hashing objective and their gradients with
// respect to the student embeddings. Teacher quantities are constant targets.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "pts3h/matrix.hpp"

namespace pts3h {

enum class PairLossKind { kKsh, kDsh, kDpsh };

inline std::string_view to_string(PairLossKind kind) {
  switch (kind) {
    case PairLossKind::kKsh: return "KSH";
    case PairLossKind::kDsh: return "DSH";
    case PairLossKind::kDpsh: return "DPSH";
  }
  return "?";
}

inline PairLossKind parse_pair_loss_kind(std::string_view name) {
  if (name == "KSH" || name == "ksh") return PairLossKind::kKsh;
  if (name == "DSH" || name == "dsh") return PairLossKind::kDsh;
  if (name == "DPSH" || name == "dpsh") return PairLossKind::kDpsh;
  throw std::invalid_argument("unknown pairwise loss kind: " + std::string(name));
}

// How the pseudo-labelled pairs are scored on normalized similarities.
enum class QuantizedForm {
  kNormalizedHinge,  // -w*u + (1-w)*max(0, margin + u), u in [-4, 0]
  kSupervisedKind,   // the supervised loss function applied verbatim to u
};

struct Hyperparams {
  std::size_t bits = 16;
  double omega = 8.0;
  double gamma = 0.5;
  double eta = 0.004;
  double alpha = 0.995;
  // Target pseudo-similar fraction; NaN means "use the labelled similar-pair fraction".
  double rho = std::numeric_limits<double>::quiet_NaN();
  PairLossKind kind = PairLossKind::kDsh;
  bool consistency = true;
  QuantizedForm quantized_form = QuantizedForm::kNormalizedHinge;
  double quantized_margin = 2.0;

  void validate() const {
    if (bits == 0) throw std::invalid_argument("hyperparams: bits must be >= 1");
    if (!(omega >= 0.0) || !(gamma >= 0.0) || !(eta >= 0.0)) {
      throw std::invalid_argument("hyperparams: omega, gamma and eta must be nonnegative");
    }
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("hyperparams: alpha not in [0,1]");
    if (!std::isnan(rho) && !(rho >= 0.0 && rho <= 1.0)) {
      throw std::invalid_argument("hyperparams: rho not in [0,1]");
    }
    if (!(quantized_margin > 0.0)) throw std::invalid_argument("hyperparams: margin must be > 0");
  }
};

struct PairLoss {
  double loss = 0.0;
  double grad = 0.0;  // d loss / d u
};

struct LossResult {
  double loss = 0.0;
  Matrix grad;  // d loss / d embeddings
  bool warning = false;
};

// Symmetric 0/1 matrix over batch positions.
struct BinaryMatrix {
  std::size_t n = 0;
  std::vector<std::uint8_t> bits;

  BinaryMatrix() = default;
  explicit BinaryMatrix(std::size_t size, std::uint8_t fill = 0) : n(size), bits(size * size, fill) {}

  std::uint8_t operator()(std::size_t i, std::size_t j) const { return bits[i * n + j]; }
  std::uint8_t& operator()(std::size_t i, std::size_t j) { return bits[i * n + j]; }
  std::size_t count() const { return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), 1)); }
  friend bool operator==(const BinaryMatrix&, const BinaryMatrix&) = default;
};

// Labelled part of a mini-batch: `labeled` holds batch positions and `similar`
// the |labeled| x |labeled| ground-truth similarities s_ij, over all ordered pairs.
struct PairSupervision {
  std::vector<std::size_t> labeled;
  BinaryMatrix similar;

  std::size_t pair_count() const { return labeled.size() * labeled.size(); }
};

inline constexpr double kNormEpsilon = 1e-12;

// L2-normalizes each row; norms below kNormEpsilon are replaced by it.
struct NormalizedRows {
  Matrix unit;
  std::vector<double> norms;  // guarded norms
  std::size_t degenerate = 0;
};

inline NormalizedRows normalize_rows(const Matrix& m) {
  NormalizedRows out{Matrix(m.rows(), m.cols()), std::vector<double>(m.rows()), 0};
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto r = m.row(i);
    double norm = std::sqrt(dot(r, r));
    if (norm < kNormEpsilon) {
      norm = kNormEpsilon;
      ++out.degenerate;
    }
    out.norms[i] = norm;
    auto u = out.unit.row(i);
    for (std::size_t k = 0; k < r.size(); ++k) u[k] = r[k] / norm;
  }
  return out;
}

inline double neg_sq_distance(std::span<const double> a, std::span<const double> b) {
  double acc = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    const double d = a[k] - b[k];
    acc += d * d;
  }
  return -acc;
}

// sim(s, t) = -|| s/|s| - t/|t| ||^2, in [-4, 0].
inline double sim_relaxed(std::span<const double> s, std::span<const double> t,
                          bool* degenerate = nullptr) {
  if (s.size() != t.size()) throw std::invalid_argument("sim_relaxed: length mismatch");
  double ns = std::sqrt(dot(s, s));
  double nt = std::sqrt(dot(t, t));
  const bool guarded = ns < kNormEpsilon || nt < kNormEpsilon;
  if (degenerate != nullptr) *degenerate = guarded;
  ns = std::max(ns, kNormEpsilon);
  nt = std::max(nt, kNormEpsilon);
  double acc = 0.0;
  for (std::size_t k = 0; k < s.size(); ++k) {
    const double d = s[k] / ns - t[k] / nt;
    acc += d * d;
  }
  // Rounding can push antipodal pairs a few ulps past the bound.
  return std::max(-4.0, -acc);
}

// All pairwise normalized similarities of the rows of `embeddings`.
inline Matrix similarity_matrix(const NormalizedRows& rows) {
  const std::size_t m = rows.unit.rows();
  Matrix sims(m, m);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = i; j < m; ++j) {
      const double u = i == j ? 0.0 : std::max(-4.0, neg_sq_distance(rows.unit.row(i), rows.unit.row(j)));
      sims(i, j) = u;
      sims(j, i) = u;
    }
  }
  return sims;
}

inline Matrix similarity_matrix(const Matrix& embeddings) {
  return similarity_matrix(normalize_rows(embeddings));
}

inline double softplus(double u) { return std::max(u, 0.0) + std::log1p(std::exp(-std::abs(u))); }

inline double sigmoid(double u) {
  if (u >= 0.0) return 1.0 / (1.0 + std::exp(-u));
  const double e = std::exp(u);
  return e / (1.0 + e);
}

// Pairwise supervised losses on a code-space similarity u:
//   KSH  (b(2s-1) - u)^2,                 u = h_i . h_j
//   DSH  -s u + (1-s) max(0, 2b + u),     u = -|h_i - h_j|^2
//   DPSH -s u + log(1 + e^u),             u = h_i . h_j / 2
inline PairLoss supervised_pair_loss(PairLossKind kind, double u, int s, std::size_t bits) {
  const double b = static_cast<double>(bits);
  const double sd = static_cast<double>(s);
  switch (kind) {
    case PairLossKind::kKsh: {
      const double r = b * (2.0 * sd - 1.0) - u;
      return {r * r, -2.0 * r};
    }
    case PairLossKind::kDsh: {
      const double hinge = 2.0 * b + u;
      const bool active = hinge > 0.0;
      return {-sd * u + (1.0 - sd) * (active ? hinge : 0.0), -sd + (1.0 - sd) * (active ? 1.0 : 0.0)};
    }
    case PairLossKind::kDpsh:
      return {softplus(u) - sd * u, sigmoid(u) - sd};
  }
  throw std::invalid_argument("supervised_pair_loss: unknown kind");
}

// Each kind's own real-valued similarity of two embeddings.
inline double kind_similarity(PairLossKind kind, std::span<const double> a, std::span<const double> b) {
  switch (kind) {
    case PairLossKind::kKsh: return dot(a, b);
    case PairLossKind::kDsh: return neg_sq_distance(a, b);
    case PairLossKind::kDpsh: return 0.5 * dot(a, b);
  }
  throw std::invalid_argument("kind_similarity: unknown kind");
}

// Adds g * d u(a, b) / d a to grad_a and g * d u(a, b) / d b to grad_b.
inline void accumulate_kind_similarity_grad(PairLossKind kind, double g, std::span<const double> a,
                                            std::span<const double> b, std::span<double> grad_a,
                                            std::span<double> grad_b) {
  for (std::size_t k = 0; k < a.size(); ++k) {
    switch (kind) {
      case PairLossKind::kKsh:
        grad_a[k] += g * b[k];
        grad_b[k] += g * a[k];
        break;
      case PairLossKind::kDsh: {
        const double d = a[k] - b[k];
        grad_a[k] -= 2.0 * g * d;
        grad_b[k] += 2.0 * g * d;
        break;
      }
      case PairLossKind::kDpsh:
        grad_a[k] += 0.5 * g * b[k];
        grad_b[k] += 0.5 * g * a[k];
        break;
    }
  }
}

// Mean supervised loss over every ordered labelled pair of the batch.
inline LossResult supervised_loss_relaxed(const Matrix& embeddings, const PairSupervision& sup,
                                          PairLossKind kind, std::size_t bits) {
  LossResult result{0.0, Matrix(embeddings.rows(), embeddings.cols()), false};
  const std::size_t pairs = sup.pair_count();
  if (pairs == 0) {
    result.warning = true;
    return result;
  }
  const double inv = 1.0 / static_cast<double>(pairs);
  const std::size_t l = sup.labeled.size();
  for (std::size_t a = 0; a < l; ++a) {
    const std::size_t i = sup.labeled[a];
    for (std::size_t c = 0; c < l; ++c) {
      const std::size_t j = sup.labeled[c];
      const double u = kind_similarity(kind, embeddings.row(i), embeddings.row(j));
      const PairLoss pl = supervised_pair_loss(kind, u, sup.similar(a, c), bits);
      result.loss += pl.loss;
      accumulate_kind_similarity_grad(kind, pl.grad * inv, embeddings.row(i), embeddings.row(j),
                                      result.grad.row(i), result.grad.row(j));
    }
  }
  result.loss *= inv;
  return result;
}

// (u - u_T)^2; the teacher similarity is a constant target.
inline PairLoss consistency_loss(double u, double u_teacher) {
  const double d = u - u_teacher;
  return {d * d, 2.0 * d};
}

// k-th largest similarity with k = round(rho * N); +inf when k = 0.
inline double threshold_select(std::span<const double> sims, double rho) {
  if (sims.empty()) throw std::invalid_argument("threshold_select: empty similarity list");
  if (!(rho >= 0.0 && rho <= 1.0)) throw std::invalid_argument("threshold_select: rho not in [0,1]");
  const auto k = static_cast<std::size_t>(std::llround(rho * static_cast<double>(sims.size())));
  if (k == 0) return std::numeric_limits<double>::infinity();
  std::vector<double> sorted(sims.begin(), sims.end());
  std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(k - 1), sorted.end(),
                   std::greater<>());
  return sorted[k - 1];
}

// W_ij = 1 iff u_T,ij >= thr.
inline BinaryMatrix pseudo_similarity(const Matrix& teacher_sims, double thr) {
  const std::size_t m = teacher_sims.rows();
  BinaryMatrix w(m);
  for (std::size_t idx = 0; idx < teacher_sims.size(); ++idx) {
    w.bits[idx] = teacher_sims.values()[idx] >= thr ? 1 : 0;
  }
  return w;
}

// Thresholds the teacher similarities at their k-th largest value and resolves
// ties at the threshold in row-major order, so exactly k entries are set.
// Identical to pseudo_similarity(teacher_sims, thr) whenever the k-th and
// (k+1)-th largest values differ.
struct PseudoPairs {
  BinaryMatrix w;
  double threshold = std::numeric_limits<double>::infinity();
  std::size_t target = 0;
};

inline PseudoPairs select_pseudo_pairs(const Matrix& teacher_sims, double rho) {
  PseudoPairs out;
  out.threshold = threshold_select(teacher_sims.values(), rho);
  out.target = static_cast<std::size_t>(std::llround(rho * static_cast<double>(teacher_sims.size())));
  out.w = BinaryMatrix(teacher_sims.rows());
  if (out.target == 0) return out;
  std::size_t strictly_above = 0;
  for (double v : teacher_sims.values()) strictly_above += v > out.threshold ? 1 : 0;
  std::size_t ties_left = out.target - strictly_above;
  for (std::size_t idx = 0; idx < teacher_sims.size(); ++idx) {
    const double v = teacher_sims.values()[idx];
    if (v > out.threshold) {
      out.w.bits[idx] = 1;
    } else if (v == out.threshold && ties_left > 0) {
      out.w.bits[idx] = 1;
      --ties_left;
    }
  }
  return out;
}

// Hinge on normalized similarities: -w u + (1-w) max(0, margin + u).
inline PairLoss quantized_pair_loss(double u, int w, double margin = 4.0) {
  if (!(margin > 0.0)) throw std::invalid_argument("quantized_pair_loss: margin must be > 0");
  const double wd = static_cast<double>(w);
  const double hinge = margin + u;
  const bool active = hinge > 0.0;
  return {-wd * u + (1.0 - wd) * (active ? hinge : 0.0), -wd + (1.0 - wd) * (active ? 1.0 : 0.0)};
}

// Mean over samples of || sgn(F) - F ||_1, i.e. sum_k | |F_k| - 1 |.
inline LossResult quantization_penalty(const Matrix& embeddings) {
  LossResult result{0.0, Matrix(embeddings.rows(), embeddings.cols()), false};
  if (embeddings.rows() == 0) return result;
  const double inv = 1.0 / static_cast<double>(embeddings.rows());
  for (std::size_t idx = 0; idx < embeddings.size(); ++idx) {
    const double f = embeddings.values()[idx];
    const double h = f >= 0.0 ? 1.0 : -1.0;
    const double r = h - f;
    result.loss += std::abs(r);
    // d|h - f|/df = -sign(h - f), 0 at |f| = 1
    const double g = r > 0.0 ? -1.0 : (r < 0.0 ? 1.0 : 0.0);
    result.grad.values()[idx] = g * inv;
  }
  result.loss *= inv;
  return result;
}

// Per-batch pairwise state built from the two views.
struct BatchPairState {
  NormalizedRows student_rows;
  Matrix student_sims;  // u^r
  Matrix teacher_sims;  // u^r_T
  BinaryMatrix pseudo;  // W
  double threshold = std::numeric_limits<double>::infinity();
};

inline BatchPairState build_batch_state(const Matrix& student_embeddings,
                                        const Matrix& teacher_embeddings, double rho) {
  if (!student_embeddings.same_shape(teacher_embeddings)) {
    throw std::invalid_argument("build_batch_state: student/teacher embedding shapes differ");
  }
  BatchPairState state;
  state.student_rows = normalize_rows(student_embeddings);
  state.student_sims = similarity_matrix(state.student_rows);
  state.teacher_sims = similarity_matrix(teacher_embeddings);
  PseudoPairs pseudo = select_pseudo_pairs(state.teacher_sims, rho);
  state.pseudo = std::move(pseudo.w);
  state.threshold = pseudo.threshold;
  return state;
}

struct LossBreakdown {
  double supervised = 0.0;
  double consistency = 0.0;   // mean (u - u_T)^2 over all ordered batch pairs
  double quantized = 0.0;     // mean l(u, W) over all ordered batch pairs
  double quantization = 0.0;  // mean L1 distance to the sign codes
  double total = 0.0;
};

struct TotalLoss {
  double value = 0.0;
  Matrix grad;
  LossBreakdown terms;
  bool empty_supervision = false;
};

inline PairLoss quantized_term(const Hyperparams& hp, double u, int w) {
  if (hp.quantized_form == QuantizedForm::kSupervisedKind) {
    return supervised_pair_loss(hp.kind, u, w, hp.bits);
  }
  return quantized_pair_loss(u, w, hp.quantized_margin);
}

// L = L_s + omega_t / m^2 * sum_ij [ (u_ij - uT_ij)^2 + gamma l(u_ij, W_ij) ] + eta * Q.
// Unsupervised terms are skipped entirely when their weight is zero, so
// omega_t = eta = 0 reproduces the supervised loss bit for bit.
inline TotalLoss total_loss(const BatchPairState& state, const Matrix& embeddings,
                            const PairSupervision& sup, const Hyperparams& hp, double omega_t) {
  TotalLoss out;
  LossResult supervised = supervised_loss_relaxed(embeddings, sup, hp.kind, hp.bits);
  out.empty_supervision = supervised.warning;
  out.terms.supervised = supervised.loss;
  out.value = supervised.loss;
  out.grad = std::move(supervised.grad);

  const std::size_t m = embeddings.rows();
  if (omega_t != 0.0 && m > 0) {
    if (state.student_sims.rows() != m || state.teacher_sims.rows() != m || state.pseudo.n != m) {
      throw std::invalid_argument("total_loss: batch state does not match embeddings");
    }
    const double inv_pairs = 1.0 / static_cast<double>(m * m);
    const bool with_quantized = hp.gamma != 0.0;
    // g_ij = d R / d u_ij, accumulated into a gradient on the unit vectors.
    Matrix unit_grad(m, embeddings.cols());
    double consistency_sum = 0.0;
    double quantized_sum = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < m; ++j) {
        const double u = state.student_sims(i, j);
        double g = 0.0;
        if (hp.consistency) {
          const PairLoss c = consistency_loss(u, state.teacher_sims(i, j));
          consistency_sum += c.loss;
          g += c.grad;
        }
        if (with_quantized) {
          const PairLoss q = quantized_term(hp, u, state.pseudo(i, j));
          quantized_sum += q.loss;
          g += hp.gamma * q.grad;
        }
        if (g == 0.0 || i == j) continue;
        // u = -|a - b|^2 on unit vectors: du/da = -2(a - b), du/db = 2(a - b)
        const double scale = 2.0 * g * omega_t * inv_pairs;
        auto a = state.student_rows.unit.row(i);
        auto b = state.student_rows.unit.row(j);
        auto ga = unit_grad.row(i);
        auto gb = unit_grad.row(j);
        for (std::size_t k = 0; k < a.size(); ++k) {
          const double d = scale * (a[k] - b[k]);
          ga[k] -= d;
          gb[k] += d;
        }
      }
    }
    out.terms.consistency = consistency_sum * inv_pairs;
    out.terms.quantized = quantized_sum * inv_pairs;
    const double regularizer =
        (hp.consistency ? out.terms.consistency : 0.0) + hp.gamma * out.terms.quantized;
    out.value += omega_t * regularizer;
    // Through the normalization: d(x/|x|)/dx = (I - x_hat x_hat^T) / |x|.
    for (std::size_t i = 0; i < m; ++i) {
      auto g = unit_grad.row(i);
      auto xh = state.student_rows.unit.row(i);
      const double norm = state.student_rows.norms[i];
      const bool guarded = norm == kNormEpsilon;
      const double proj = guarded ? 0.0 : dot(g, xh);
      auto dst = out.grad.row(i);
      for (std::size_t k = 0; k < g.size(); ++k) dst[k] += (g[k] - proj * xh[k]) / norm;
    }
  }
  if (hp.eta != 0.0) {
    LossResult q = quantization_penalty(embeddings);
    out.terms.quantization = q.loss;
    out.value += hp.eta * q.loss;
    for (std::size_t idx = 0; idx < out.grad.size(); ++idx) {
      out.grad.values()[idx] += hp.eta * q.grad.values()[idx];
    }
  }
  out.terms.total = out.value;
  return out;
}

}  // namespace pts3h
