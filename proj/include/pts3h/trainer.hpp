#pragma once

// Mini-batch teacher-student training loop and its supervised-only counterpart.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "pts3h/data.hpp"
#include "pts3h/encoder.hpp"
#include "pts3h/losses.hpp"
#include "pts3h/retrieval.hpp"

namespace pts3h {

struct TrainConfig {
  std::size_t epochs = 60;
  std::size_t batch = 64;
  std::size_t labeled_per_batch = 16;
  int rampup_epochs = -1;  // negative: a quarter of `epochs`
  double learning_rate = 0.1;  // last layer; lower layers are scaled by lower_lr_scale
  double lower_lr_scale = 0.1;
  double momentum = 0.9;
  bool rampup_learning_rate = true;
  std::uint64_t seed = 1;
  Hyperparams hp;
  std::vector<std::size_t> hidden{64, 64};
  double sigma_scale = 0.3;  // noise std as a multiple of each feature's std
  double validation_fraction = 0.1;
  bool track_validation = true;

  std::size_t rampup_length() const {
    return rampup_epochs < 0 ? epochs / 4 : static_cast<std::size_t>(rampup_epochs);
  }

  void validate() const {
    hp.validate();
    if (batch == 0) throw std::invalid_argument("train config: batch must be >= 1");
    if (labeled_per_batch == 0 || labeled_per_batch > batch) {
      throw std::invalid_argument("train config: need 1 <= m_l <= batch");
    }
    if (rampup_length() > epochs) throw std::invalid_argument("train config: ramp-up longer than training");
    if (!(learning_rate >= 0.0)) throw std::invalid_argument("train config: learning rate must be >= 0");
    if (!(sigma_scale >= 0.0)) throw std::invalid_argument("train config: sigma must be >= 0");
    if (!(validation_fraction >= 0.0 && validation_fraction < 1.0)) {
      throw std::invalid_argument("train config: validation fraction must be in [0, 1)");
    }
  }
};

struct IterationRecord {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double threshold = 0.0;
  std::size_t pseudo_pairs = 0;
  std::size_t batch_pairs = 0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  std::size_t iterations = 0;
  LossBreakdown mean_terms;
  double omega = 0.0;
  double learning_rate = 0.0;
  double mean_threshold = 0.0;
  double pseudo_fraction = 0.0;
  std::optional<double> validation_map;
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
  std::vector<IterationRecord> iterations;
  double rho = 0.0;
};

struct TrainResult {
  EncoderParams student;
  EncoderParams teacher;
  OptimizerState optimizer;
  TrainLog log;
};

// omega_max * exp(-5 (1 - t/T_r)^2) before T_r, omega_max afterwards.
inline double rampup_weight(double t, std::size_t rampup_length, double omega_max) {
  if (t < 0.0) throw std::invalid_argument("rampup_weight: t must be >= 0");
  if (rampup_length == 0) return omega_max;
  const double length = static_cast<double>(rampup_length);
  if (t >= length) return omega_max;
  const double phase = 1.0 - std::min(t, length) / length;
  return omega_max * std::exp(-5.0 * phase * phase);
}

struct Minibatch {
  std::vector<std::size_t> rows;  // rows of TrainingView::features(), labelled first
  PairSupervision supervision;
};

namespace detail {

// k distinct values from [0, n) via a partial Fisher-Yates shuffle.
inline std::vector<std::size_t> draw_distinct(std::size_t n, std::size_t k, std::mt19937_64& rng) {
  std::vector<std::size_t> pool(n);
  for (std::size_t i = 0; i < n; ++i) pool[i] = i;
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(pool[i], pool[pick(rng)]);
  }
  pool.resize(k);
  return pool;
}

}  // namespace detail

// m_l labelled plus m - m_l unlabelled rows, without replacement. Every
// ordered pair of labelled rows is supervised, s_ij = [label_i == label_j].
inline Minibatch sample_minibatch(const TrainingView& view, const TrainConfig& cfg,
                                  std::mt19937_64& rng) {
  const std::size_t ml = cfg.labeled_per_batch;
  const std::size_t mu = cfg.batch - ml;
  if (view.num_labeled() < ml) throw std::invalid_argument("sample_minibatch: not enough labelled samples");
  if (view.num_unlabeled() < mu) throw std::invalid_argument("sample_minibatch: not enough unlabelled samples");
  Minibatch mb;
  mb.rows = detail::draw_distinct(view.num_labeled(), ml, rng);
  for (std::size_t j : detail::draw_distinct(view.num_unlabeled(), mu, rng)) {
    mb.rows.push_back(view.num_labeled() + j);
  }
  mb.supervision.labeled.resize(ml);
  mb.supervision.similar = BinaryMatrix(ml);
  for (std::size_t a = 0; a < ml; ++a) {
    mb.supervision.labeled[a] = a;
    for (std::size_t c = 0; c < ml; ++c) {
      mb.supervision.similar(a, c) =
          static_cast<std::uint8_t>(pair_label(view.label(mb.rows[a]), view.label(mb.rows[c])));
    }
  }
  return mb;
}

// Adds N(0, sigma_k^2) noise to column k.
inline Matrix perturb_view(const Matrix& batch, std::span<const double> sigma, std::mt19937_64& rng) {
  if (sigma.size() != batch.cols()) throw std::invalid_argument("perturb: sigma length mismatch");
  Matrix out = batch;
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto r = out.row(i);
    for (std::size_t k = 0; k < r.size(); ++k) {
      if (!(sigma[k] >= 0.0)) throw std::invalid_argument("perturb: sigma must be >= 0");
      if (sigma[k] > 0.0) r[k] += sigma[k] * normal(rng);
    }
  }
  return out;
}

// Two independently perturbed views of the batch.
inline std::pair<Matrix, Matrix> perturb(const Matrix& batch, std::span<const double> sigma,
                                         std::mt19937_64& rng) {
  Matrix first = perturb_view(batch, sigma, rng);
  Matrix second = perturb_view(batch, sigma, rng);
  return {std::move(first), std::move(second)};
}

inline std::pair<Matrix, Matrix> perturb(const Matrix& batch, double sigma, std::mt19937_64& rng) {
  const std::vector<double> per_feature(batch.cols(), sigma);
  return perturb(batch, per_feature, rng);
}

// Supervised loss plus the optional quantization penalty: the objective the
// baseline trainer optimizes. Term order matches total_loss.
inline TotalLoss supervised_objective(const Matrix& embeddings, const PairSupervision& sup,
                                      const Hyperparams& hp) {
  TotalLoss out;
  LossResult supervised = supervised_loss_relaxed(embeddings, sup, hp.kind, hp.bits);
  out.empty_supervision = supervised.warning;
  out.terms.supervised = supervised.loss;
  out.value = supervised.loss;
  out.grad = std::move(supervised.grad);
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

inline nlohmann::json to_json(const LossBreakdown& t) {
  return {{"supervised", t.supervised},
          {"consistency", t.consistency},
          {"quantized", t.quantized},
          {"quantization", t.quantization},
          {"total", t.total}};
}

inline nlohmann::json to_json(const EpochRecord& r) {
  nlohmann::json j{{"epoch", r.epoch},
                   {"iterations", r.iterations},
                   {"loss", to_json(r.mean_terms)},
                   {"omega", r.omega},
                   {"learning_rate", r.learning_rate},
                   {"threshold", r.mean_threshold},
                   {"pseudo_fraction", r.pseudo_fraction}};
  j["validation_map"] = r.validation_map ? nlohmann::json(*r.validation_map) : nlohmann::json(nullptr);
  return j;
}

// One JSON object per epoch.
inline std::string to_json_lines(const TrainLog& log) {
  std::string out;
  for (const auto& r : log.epochs) out += to_json(r).dump() + "\n";
  return out;
}

namespace detail {

enum class Objective { kTeacherStudent, kSupervisedOnly };

// Independent generator per purpose so the supervised-only trainer consumes
// exactly the same batch and first-view noise as the teacher-student one.
struct RngStreams {
  explicit RngStreams(std::uint64_t seed)
      : init(stream(seed, 1)), batches(stream(seed, 2)), first_view(stream(seed, 3)),
        second_view(stream(seed, 4)), validation(stream(seed, 5)) {}

  static std::mt19937_64 stream(std::uint64_t seed, std::uint32_t id) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), id};
    return std::mt19937_64(seq);
  }

  std::mt19937_64 init, batches, first_view, second_view, validation;
};

inline double label_retrieval_map(const EncoderParams& params, const Matrix& query_x,
                                  const std::vector<std::int32_t>& query_labels, const Matrix& db_x,
                                  const std::vector<std::int32_t>& db_labels) {
  CodeSet queries = pack(encode(params, query_x));
  CodeSet db = pack(encode(params, db_x));
  queries.set_labels(query_labels);
  db.set_labels(db_labels);
  EvalOptions opts;
  opts.exclude_same_id = false;
  opts.topk.clear();
  return evaluate(queries, db, opts).map_at_k;
}

inline TrainResult run_training(const TrainingView& full_view, const TrainConfig& cfg, Objective objective) {
  cfg.validate();
  RngStreams rng(cfg.seed);

  // Hold out part of the labelled items for validation retrieval.
  TrainingView view = full_view;
  Matrix val_x, val_db_x;
  std::vector<std::int32_t> val_labels, val_db_labels;
  if (cfg.validation_fraction > 0.0) {
    const std::size_t nl = full_view.num_labeled();
    const auto held = static_cast<std::size_t>(std::llround(cfg.validation_fraction * static_cast<double>(nl)));
    if (held > 0 && nl - held >= cfg.labeled_per_batch) {
      std::vector<std::size_t> order = draw_distinct(nl, nl, rng.validation);
      std::vector<std::size_t> held_idx(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(held));
      std::vector<std::size_t> keep(order.begin() + static_cast<std::ptrdiff_t>(held), order.end());
      std::sort(keep.begin(), keep.end());
      view = full_view.with_labeled_subset(keep);
      val_x = gather_rows(full_view.features(), held_idx);
      for (std::size_t i : held_idx) val_labels.push_back(full_view.label(i));
      val_db_x = gather_rows(full_view.features(), keep);
      for (std::size_t i : keep) val_db_labels.push_back(full_view.label(i));
    }
  }
  const bool validate_epochs = cfg.track_validation && !val_labels.empty();

  Hyperparams hp = cfg.hp;
  const double rho = std::isnan(hp.rho) ? similar_pair_fraction(view.labels()) : hp.rho;

  Architecture arch{view.dim(), cfg.hidden, hp.bits};
  TrainResult result;
  result.student = init_params(rng.init(), arch);
  result.teacher = result.student;
  result.optimizer = make_optimizer(result.student, cfg.learning_rate, cfg.momentum, cfg.lower_lr_scale);
  result.log.rho = rho;

  std::vector<double> sigma = view.feature_std();
  for (double& s : sigma) s *= cfg.sigma_scale;

  const std::size_t unlabeled_per_batch = cfg.batch - cfg.labeled_per_batch;
  const std::size_t per_epoch =
      unlabeled_per_batch > 0
          ? (view.num_unlabeled() + unlabeled_per_batch - 1) / unlabeled_per_batch
          : (view.num_labeled() + cfg.batch - 1) / cfg.batch;
  const std::size_t rampup = cfg.rampup_length();
  const std::size_t pairs = cfg.batch * cfg.batch;
  std::size_t step = 0;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double t = static_cast<double>(epoch);
    const double omega_t = objective == Objective::kTeacherStudent ? rampup_weight(t, rampup, hp.omega) : 0.0;
    const double lr_t = cfg.rampup_learning_rate ? rampup_weight(t, rampup, cfg.learning_rate)
                                                 : cfg.learning_rate;
    result.optimizer.learning_rate = lr_t;
    EpochRecord record;
    record.epoch = epoch;
    record.omega = omega_t;
    record.learning_rate = lr_t;
    std::size_t threshold_count = 0;
    for (std::size_t it = 0; it < std::max<std::size_t>(per_epoch, 1); ++it, ++step) {
      Minibatch mb = sample_minibatch(view, cfg, rng.batches);
      const Matrix x = gather_rows(view.features(), mb.rows);
      const Matrix first = perturb_view(x, sigma, rng.first_view);
      const ForwardTrace trace = forward(result.student, first);

      TotalLoss loss;
      if (objective == Objective::kTeacherStudent) {
        const Matrix second = perturb_view(x, sigma, rng.second_view);
        const Matrix teacher_out = forward(result.teacher, second).embeddings();
        const BatchPairState state = build_batch_state(trace.embeddings(), teacher_out, rho);
        loss = total_loss(state, trace.embeddings(), mb.supervision, hp, omega_t);
        const std::size_t pseudo = state.pseudo.count();
        result.log.iterations.push_back({epoch, step, state.threshold, pseudo, pairs});
        if (std::isfinite(state.threshold)) {
          record.mean_threshold += state.threshold;
          ++threshold_count;
        }
        record.pseudo_fraction += static_cast<double>(pseudo) / static_cast<double>(pairs);
      } else {
        loss = supervised_objective(trace.embeddings(), mb.supervision, hp);
      }
      if (!std::isfinite(loss.value)) {
        std::ostringstream msg;
        msg << "training diverged: non-finite loss at epoch " << epoch << ", batch " << step
            << " (omega=" << omega_t << ", lr=" << lr_t << ")";
        throw DivergenceError(msg.str());
      }
      record.mean_terms.supervised += loss.terms.supervised;
      record.mean_terms.consistency += loss.terms.consistency;
      record.mean_terms.quantized += loss.terms.quantized;
      record.mean_terms.quantization += loss.terms.quantization;
      record.mean_terms.total += loss.terms.total;
      ++record.iterations;

      const LayerStack grads = backward(trace, result.student, loss.grad);
      sgd_momentum_step(result.student, grads, result.optimizer);
      if (objective == Objective::kTeacherStudent) ema_update(result.teacher, result.student, hp.alpha);
    }
    const double n = static_cast<double>(record.iterations);
    record.mean_terms.supervised /= n;
    record.mean_terms.consistency /= n;
    record.mean_terms.quantized /= n;
    record.mean_terms.quantization /= n;
    record.mean_terms.total /= n;
    record.pseudo_fraction /= n;
    if (threshold_count > 0) record.mean_threshold /= static_cast<double>(threshold_count);
    if (validate_epochs) {
      record.validation_map = label_retrieval_map(result.student, val_x, val_labels, val_db_x, val_db_labels);
    }
    result.log.epochs.push_back(record);
  }
  if (objective == Objective::kSupervisedOnly) result.teacher = result.student;
  return result;
}

}  // namespace detail

// Teacher-student training: per iteration sample a batch, draw two views,
// run the student on the first and the teacher on the second, pick the
// pseudo-similar pairs from the teacher similarities, take an SGD step on the
// student and then an EMA step on the teacher.
inline TrainResult train(const TrainingView& view, const TrainConfig& cfg) {
  return detail::run_training(view, cfg, detail::Objective::kTeacherStudent);
}

// Supervised-only baseline with the same sampling, noise and optimizer; the
// returned teacher is a copy of the student.
inline TrainResult train_supervised(const TrainingView& view, const TrainConfig& cfg) {
  return detail::run_training(view, cfg, detail::Objective::kSupervisedOnly);
}

}  // namespace pts3h
