#pragma once

// Randomized property suites and the gradient-check harness, shared by the
// unit tests and the acceptance binary. Each suite reports how many cases it
// ran and describes its first failure.

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "oracles.hpp"

namespace props {

using pts3h::Matrix;

struct Outcome {
  std::size_t cases = 0;
  std::size_t failures = 0;
  std::string first_failure;

  bool ok() const { return failures == 0 && cases > 0; }
  void fail(const std::string& what) {
    if (failures++ == 0) first_failure = what;
  }
};

inline std::vector<double> random_vector(std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> log_scale(-3.0, 3.0);
  const double scale = std::pow(10.0, log_scale(rng));
  std::vector<double> v(n);
  for (double& x : v) x = scale * normal(rng);
  return v;
}

// sim(s,t) = sim(t,s) in [-4, 0], invariant to positive rescaling, and equal
// to the coordinate-wise oracle.
inline Outcome sim_relaxed_suite(std::size_t cases, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> dim(1, 48);
  std::uniform_real_distribution<double> log_c(-3.0, 3.0);
  Outcome out;
  for (std::size_t c = 0; c < cases; ++c, ++out.cases) {
    const std::size_t n = dim(rng);
    const auto s = random_vector(n, rng);
    auto t = random_vector(n, rng);
    if (c % 10 == 0) {
      for (std::size_t k = 0; k < n; ++k) t[k] = -s[k] * 2.5;  // antipodal
    }
    const double st = pts3h::sim_relaxed(s, t);
    const double ts = pts3h::sim_relaxed(t, s);
    const double scale = std::pow(10.0, log_c(rng));
    std::vector<double> cs(s);
    for (double& v : cs) v *= scale;
    const double scaled = pts3h::sim_relaxed(cs, t);
    const double reference = oracle::normalized_similarity(s, t);
    std::ostringstream why;
    if (st != ts) why << "asymmetric " << st << " vs " << ts;
    if (!(st >= -4.0 && st <= 0.0)) why << "out of range " << st;
    if (std::abs(scaled - st) > 1e-12) why << "scale " << scale << " changed " << st << " to " << scaled;
    if (std::abs(reference - st) > 1e-12) why << "oracle " << reference << " vs " << st;
    if (!why.str().empty()) out.fail("case " + std::to_string(c) + ": " + why.str());
  }
  return out;
}

inline Matrix random_symmetric_sims(std::size_t m, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-4.0, 0.0);
  Matrix sims(m, m);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = i + 1; j < m; ++j) sims(i, j) = sims(j, i) = u(rng);
  }
  return sims;
}

// Raising thr never adds a 1 to W; W stays symmetric.
inline Outcome pseudo_antitone_suite(std::size_t cases, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> size(1, 24);
  std::uniform_real_distribution<double> thr(-4.5, 0.5);
  Outcome out;
  for (std::size_t c = 0; c < cases; ++c, ++out.cases) {
    const Matrix sims = random_symmetric_sims(size(rng), rng);
    double lo = thr(rng), hi = thr(rng);
    if (lo > hi) std::swap(lo, hi);
    const auto w_lo = pts3h::pseudo_similarity(sims, lo);
    const auto w_hi = pts3h::pseudo_similarity(sims, hi);
    bool bad = false;
    for (std::size_t i = 0; i < w_lo.n && !bad; ++i) {
      for (std::size_t j = 0; j < w_lo.n && !bad; ++j) {
        bad = w_hi(i, j) > w_lo(i, j) || w_hi(i, j) != w_hi(j, i);
      }
    }
    if (bad) out.fail("case " + std::to_string(c) + ": thr " + std::to_string(lo) + " -> " + std::to_string(hi));
  }
  return out;
}

// With distinct similarities exactly round(rho N) pairs pass the threshold.
inline Outcome pseudo_ratio_suite(std::size_t cases, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> size(1, 24);
  std::uniform_real_distribution<double> rho(0.0, 1.0);
  std::uniform_real_distribution<double> u(-4.0, 0.0);
  Outcome out;
  for (std::size_t c = 0; c < cases; ++c, ++out.cases) {
    const std::size_t m = size(rng);
    Matrix sims(m, m);
    for (double& v : sims.values()) v = u(rng);
    const double r = rho(rng);
    const auto expected = static_cast<std::size_t>(std::llround(r * static_cast<double>(m * m)));
    const double thr = pts3h::threshold_select(sims.values(), r);
    const std::size_t got = pts3h::pseudo_similarity(sims, thr).count();
    const std::size_t exact = pts3h::select_pseudo_pairs(sims, r).w.count();
    if (got != expected || exact != expected || thr != oracle::kth_largest(sims.values(), r)) {
      out.fail("case " + std::to_string(c) + ": expected " + std::to_string(expected) + ", got " +
               std::to_string(got) + " / " + std::to_string(exact));
    }
  }
  return out;
}

// Every reported metric lies in [0, 1], curve cutoffs strictly increase, and
// repeated evaluation gives an identical report.
inline Outcome metric_bounds_suite(std::size_t cases, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> bits(1, 64);
  std::uniform_int_distribution<std::size_t> db_size(0, 60);
  std::uniform_int_distribution<std::size_t> q_size(0, 8);
  std::uniform_int_distribution<int> classes(1, 5);
  std::uniform_int_distribution<std::size_t> cutoff(0, 70);
  Outcome out;
  for (std::size_t c = 0; c < cases; ++c, ++out.cases) {
    const std::size_t b = bits(rng);
    const int k = classes(rng);
    const auto db_plain = oracle::random_plain_codes(db_size(rng), b, k, rng);
    const auto q_plain = oracle::random_plain_codes(q_size(rng), b, k, rng, 1000);
    const auto db = oracle::to_code_set(db_plain, b);
    const auto q = oracle::to_code_set(q_plain, b);
    pts3h::EvalOptions opts;
    opts.map_k = cutoff(rng);
    opts.topk = {cutoff(rng) + 1, cutoff(rng) + 1, cutoff(rng) + 1};
    const auto report = pts3h::evaluate(q, db, opts);
    std::vector<double> values{report.map_at_k, report.precision_hamming2};
    for (const auto& [cut, p] : report.topk_curve) values.push_back(p);
    for (const auto& d : report.per_query) values.push_back(d.average_precision);
    bool bad = false;
    for (double v : values) bad = bad || !(v >= 0.0 && v <= 1.0);
    for (std::size_t i = 1; i < report.topk_curve.size(); ++i) {
      bad = bad || report.topk_curve[i].first <= report.topk_curve[i - 1].first;
    }
    bad = bad || !(pts3h::evaluate(q, db, opts) == report);
    if (bad) out.fail("case " + std::to_string(c));
  }
  return out;
}

// A random batch and every loss input needed by total_loss.
struct LossCase {
  Matrix student;
  Matrix teacher;
  pts3h::PairSupervision sup;
  pts3h::Hyperparams hp;
  double omega_t = 1.0;
};

inline LossCase random_loss_case(std::mt19937_64& rng, std::size_t m, std::size_t bits) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> kind(0, 2);
  LossCase lc;
  lc.student = oracle::random_matrix(m, bits, rng);
  lc.teacher = oracle::random_matrix(m, bits, rng);
  std::uniform_int_distribution<std::size_t> labeled(1, m);
  lc.sup = oracle::random_supervision(labeled(rng), 3, rng);
  lc.hp.bits = bits;
  lc.hp.kind = static_cast<pts3h::PairLossKind>(kind(rng));
  lc.hp.omega = 0.1 + 4.0 * unit(rng);
  lc.hp.gamma = 0.1 + unit(rng);
  lc.hp.eta = 0.001 + 0.1 * unit(rng);
  lc.hp.rho = 0.05 + 0.5 * unit(rng);
  lc.hp.quantized_form = unit(rng) < 0.5 ? pts3h::QuantizedForm::kNormalizedHinge
                                         : pts3h::QuantizedForm::kSupervisedKind;
  lc.omega_t = lc.hp.omega * unit(rng);
  return lc;
}

inline pts3h::TotalLoss evaluate_case(const LossCase& lc) {
  const auto state = pts3h::build_batch_state(lc.student, lc.teacher, lc.hp.rho);
  return pts3h::total_loss(state, lc.student, lc.sup, lc.hp, lc.omega_t);
}

// Relabels batch rows by `perm`: new row r is old row perm[r].
inline LossCase permute_case(const LossCase& lc, const std::vector<std::size_t>& perm) {
  LossCase out = lc;
  out.student = pts3h::gather_rows(lc.student, perm);
  out.teacher = pts3h::gather_rows(lc.teacher, perm);
  std::vector<std::size_t> where(perm.size());
  for (std::size_t r = 0; r < perm.size(); ++r) where[perm[r]] = r;
  out.sup.labeled.clear();
  for (std::size_t old : lc.sup.labeled) out.sup.labeled.push_back(where[old]);
  return out;
}

inline bool close(double a, double b, double rel = 1e-11) {
  return std::abs(a - b) <= rel * std::max({1.0, std::abs(a), std::abs(b)});
}

// True when entries from different interchangeable groups tie at the
// pseudo-pair threshold and only some of them are selected; which ones win
// then depends on batch order, so such draws are outside the permutation
// property. The diagonal is one group (all entries have u = 0) and each
// unordered pair {i, j} is another.
inline bool ambiguous_ties(const LossCase& lc) {
  const auto state = pts3h::build_batch_state(lc.student, lc.teacher, lc.hp.rho);
  const std::size_t m = state.teacher_sims.rows();
  std::size_t groups = 0, tied = 0, selected = 0;
  bool diagonal_group = false;
  for (std::size_t i = 0; i < m; ++i) {
    if (state.teacher_sims(i, i) == state.threshold) {
      ++tied;
      selected += state.pseudo(i, i);
      diagonal_group = true;
    }
    for (std::size_t j = i + 1; j < m; ++j) {
      if (state.teacher_sims(i, j) != state.threshold) continue;
      ++groups;
      tied += 2;
      selected += state.pseudo(i, j) + state.pseudo(j, i);
    }
  }
  groups += diagonal_group ? 1 : 0;
  return groups > 1 && selected < tied;
}

// Permuting the batch leaves every scalar loss term unchanged (up to
// summation-order rounding).
inline Outcome permutation_invariance_suite(std::size_t cases, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> size(1, 12);
  std::uniform_int_distribution<std::size_t> bits(1, 16);
  Outcome out;
  for (std::size_t c = 0; c < cases; ++c, ++out.cases) {
    const std::size_t m = size(rng);
    LossCase lc = random_loss_case(rng, m, bits(rng));
    while (ambiguous_ties(lc)) lc = random_loss_case(rng, m, bits(rng));
    std::vector<std::size_t> perm(m);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::shuffle(perm.begin(), perm.end(), rng);
    const auto a = evaluate_case(lc);
    const auto b = evaluate_case(permute_case(lc, perm));
    const bool same = close(a.terms.supervised, b.terms.supervised) && close(a.terms.consistency, b.terms.consistency) &&
                      close(a.terms.quantized, b.terms.quantized) && close(a.terms.quantization, b.terms.quantization) &&
                      close(a.value, b.value);
    if (!same) {
      std::ostringstream why;
      why << "case " << c << ": total " << a.value << " vs " << b.value;
      out.fail(why.str());
    }
  }
  return out;
}

// Teacher stays inside the coordinate-wise hull of its start and the students.
inline Outcome ema_hull_suite(std::size_t cases, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> steps(1, 30);
  Outcome out;
  const pts3h::Architecture arch{3, {4}, 2};
  for (std::size_t c = 0; c < cases; ++c, ++out.cases) {
    const double lo = -1.0 - unit(rng), hi = 1.0 + unit(rng);
    auto draw = [&](pts3h::EncoderParams& p) {
      for (double* v : oracle::parameter_refs(p)) *v = lo + (hi - lo) * unit(rng);
    };
    pts3h::EncoderParams teacher = pts3h::init_params(c, arch);
    pts3h::EncoderParams student = teacher;
    draw(teacher);
    const double alpha = unit(rng);
    const int n = steps(rng);
    for (int s = 0; s < n; ++s) {
      draw(student);
      pts3h::ema_update(teacher, student, alpha);
    }
    for (double* v : oracle::parameter_refs(teacher)) {
      if (*v < lo || *v > hi) {
        out.fail("case " + std::to_string(c) + ": " + std::to_string(*v) + " outside hull");
        break;
      }
    }
  }
  return out;
}

// Packed popcount evaluation against the naive unpacked oracle, bitwise.
inline Outcome retrieval_oracle_suite(std::size_t cases, std::uint64_t seed, std::size_t max_db = 200) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> bits(1, 64);
  std::uniform_int_distribution<std::size_t> db_size(1, max_db);
  std::uniform_int_distribution<std::size_t> q_size(5, 20);
  std::uniform_int_distribution<int> classes(2, 6);
  std::uniform_int_distribution<std::size_t> cutoff(0, max_db);
  std::bernoulli_distribution overlap(0.5);
  Outcome out;
  for (std::size_t c = 0; c < cases; ++c, ++out.cases) {
    const std::size_t b = bits(rng);
    const int k = classes(rng);
    const auto db_plain = oracle::random_plain_codes(db_size(rng), b, k, rng);
    // Half of the instances share ids with the database to exercise self-exclusion.
    const auto q_plain = oracle::random_plain_codes(q_size(rng), b, k, rng, overlap(rng) ? 0 : 100000);
    pts3h::EvalOptions opts;
    opts.map_k = cutoff(rng);
    opts.topk = {1, 5, 10, 50, 100};
    const auto report = pts3h::evaluate(oracle::to_code_set(q_plain, b), oracle::to_code_set(db_plain, b), opts);
    const auto naive = oracle::naive_evaluate(q_plain, db_plain, opts.map_k, opts.topk, opts.radius);
    bool same = report.map_at_k == naive.map && report.precision_hamming2 == naive.precision_radius &&
                report.topk_curve.size() == naive.topk.size();
    for (std::size_t t = 0; same && t < naive.topk.size(); ++t) same = report.topk_curve[t].second == naive.topk[t];
    // Rankings as well, query by query.
    const auto db_set = oracle::to_code_set(db_plain, b);
    const auto q_set = oracle::to_code_set(q_plain, b);
    for (std::size_t q = 0; same && q < q_plain.codes.size(); ++q) {
      const auto fast = pts3h::rank_database(q_set.code(q), db_set);
      const auto slow = oracle::naive_rank(q_plain.codes[q], db_plain);
      same = std::equal(fast.begin(), fast.end(), slow.begin(), slow.end(),
                        [](std::uint32_t x, std::size_t y) { return x == y; });
    }
    if (!same) {
      std::ostringstream why;
      why << "case " << c << " (b=" << b << ", n=" << db_plain.codes.size() << "): MAP " << report.map_at_k
          << " vs " << naive.map;
      out.fail(why.str());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Gradient check of total_loss back through the encoder.

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t parameters = 0;
  std::size_t attempts = 0;  // draws needed to land away from every kink
  std::string description;
};

struct GradCheckSpec {
  std::size_t m = 4;
  std::size_t bits = 4;
  pts3h::PairLossKind kind = pts3h::PairLossKind::kDsh;
};

// Loss as a function of the student parameters with teacher outputs and the
// batch fixed.
struct GradProblem {
  Matrix x;
  Matrix teacher_out;
  pts3h::PairSupervision sup;
  pts3h::Hyperparams hp;
  double omega_t = 1.0;

  pts3h::TotalLoss evaluate(const pts3h::EncoderParams& p) const {
    const Matrix f = pts3h::forward(p, x).embeddings();
    return pts3h::total_loss(pts3h::build_batch_state(f, teacher_out, hp.rho), f, sup, hp, omega_t);
  }
};

// True when every nonsmooth point of the objective is at least `delta` away.
inline bool away_from_kinks(const GradProblem& prob, const pts3h::EncoderParams& p, double delta) {
  const auto trace = pts3h::forward(p, prob.x);
  for (std::size_t l = 0; l + 1 < trace.depth(); ++l) {
    for (double z : trace.pre_activations[l].values()) {
      if (std::abs(z) < delta) return false;
    }
  }
  const Matrix& f = trace.embeddings();
  for (double v : f.values()) {
    if (std::abs(v) < delta || std::abs(std::abs(v) - 1.0) < delta) return false;
  }
  const double b = static_cast<double>(prob.hp.bits);
  if (prob.hp.kind == pts3h::PairLossKind::kDsh) {
    for (std::size_t a = 0; a < prob.sup.labeled.size(); ++a) {
      for (std::size_t c = 0; c < prob.sup.labeled.size(); ++c) {
        const double u = pts3h::neg_sq_distance(f.row(prob.sup.labeled[a]), f.row(prob.sup.labeled[c]));
        if (prob.sup.similar(a, c) == 0 && std::abs(2.0 * b + u) < delta) return false;
      }
    }
  }
  const auto state = pts3h::build_batch_state(f, prob.teacher_out, prob.hp.rho);
  for (std::size_t i = 0; i < f.rows(); ++i) {
    for (std::size_t j = 0; j < f.rows(); ++j) {
      if (i == j || state.pseudo(i, j) != 0) continue;
      const double u = state.student_sims(i, j);
      const double corner = prob.hp.quantized_form == pts3h::QuantizedForm::kNormalizedHinge
                                ? prob.hp.quantized_margin + u
                                : (prob.hp.kind == pts3h::PairLossKind::kDsh ? 2.0 * b + u : 1.0);
      if (std::abs(corner) < delta) return false;
    }
  }
  return true;
}

inline GradCheckResult gradient_check(const GradCheckSpec& spec, std::mt19937_64& rng, double floor_scale = 1e-6,
                                      double step = 1e-4) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> width(3, 8);
  GradCheckResult result;
  while (true) {
    ++result.attempts;
    pts3h::Architecture arch{width(rng), {width(rng), width(rng)}, spec.bits};
    const pts3h::EncoderParams student = pts3h::init_params(rng(), arch);
    const pts3h::EncoderParams teacher = pts3h::init_params(rng(), arch);
    GradProblem prob;
    prob.x = oracle::random_matrix(spec.m, arch.input_dim, rng);
    Matrix second = prob.x;
    for (double& v : second.values()) v += 0.1 * std::normal_distribution<double>(0.0, 1.0)(rng);
    prob.teacher_out = pts3h::forward(teacher, second).embeddings();
    std::uniform_int_distribution<std::size_t> labeled(2, spec.m);
    prob.sup = oracle::random_supervision(labeled(rng), 2, rng);
    prob.hp.bits = spec.bits;
    prob.hp.kind = spec.kind;
    prob.hp.omega = 0.5 + 4.0 * unit(rng);
    prob.hp.gamma = 0.1 + unit(rng);
    prob.hp.eta = 0.001 + 0.1 * unit(rng);
    prob.hp.rho = 0.1 + 0.4 * unit(rng);
    prob.hp.quantized_margin = 1.0 + 3.0 * unit(rng);
    prob.hp.quantized_form =
        unit(rng) < 0.75 ? pts3h::QuantizedForm::kNormalizedHinge : pts3h::QuantizedForm::kSupervisedKind;
    prob.omega_t = prob.hp.omega * (0.2 + 0.8 * unit(rng));
    if (!away_from_kinks(prob, student, 1e-3)) continue;

    const auto trace = pts3h::forward(student, prob.x);
    const auto loss = prob.evaluate(student);
    const auto analytic = oracle::flatten(pts3h::backward(trace, student, loss.grad));
    const auto numeric = oracle::numeric_gradient(
        student, [&](const pts3h::EncoderParams& p) { return prob.evaluate(p).value; }, step);
    result.max_rel_error = oracle::max_relative_error(analytic, numeric, floor_scale);
    std::ostringstream desc;
    desc << to_string(spec.kind) << " m=" << spec.m << " b=" << spec.bits << " d=" << arch.input_dim << " hidden="
         << arch.hidden[0] << "," << arch.hidden[1] << " omega_t=" << prob.omega_t << " gamma=" << prob.hp.gamma
         << " eta=" << prob.hp.eta;
    result.description = desc.str();
    return result;
  }
}

}  // namespace props
