#include <gtest/gtest.h>

#include "oracles.hpp"

using namespace pts3h;

namespace {

// Small problem so each training run takes milliseconds.
TrainingView small_view() {
  static const TrainingView view =
      TrainingView::from(split(generate_blobs(4, 60, 8, 0.3, 2), SplitOptions{0.25, 10, 1.0, 0}));
  return view;
}

TrainConfig small_config() {
  TrainConfig cfg;
  cfg.epochs = 4;
  cfg.batch = 16;
  cfg.labeled_per_batch = 4;
  cfg.hidden = {8};
  cfg.hp.bits = 8;
  cfg.seed = 3;
  return cfg;
}

}  // namespace

TEST(Minibatch, PairCountsForDefaultShape) {
  const TrainingView view = TrainingView::from(split(generate_blobs(10, 600, 32, 0.3, 0), SplitOptions{}));
  const TrainConfig cfg;
  std::mt19937_64 rng(1);
  const Minibatch mb = sample_minibatch(view, cfg, rng);
  ASSERT_EQ(mb.rows.size(), 64u);
  const std::size_t labeled_pairs = mb.supervision.similar.n * mb.supervision.similar.n;
  const std::size_t other_pairs = 64 * 64 - labeled_pairs;
  EXPECT_EQ(labeled_pairs, 256u);
  EXPECT_EQ(other_pairs, 3840u);
  EXPECT_EQ(other_pairs / labeled_pairs, 15u);
}

TEST(Minibatch, LabeledFirstDistinctAndSupervisionMatchesLabels) {
  const TrainingView view = small_view();
  const TrainConfig cfg = small_config();
  std::mt19937_64 rng(2);
  for (int c = 0; c < 50; ++c) {
    const Minibatch mb = sample_minibatch(view, cfg, rng);
    EXPECT_EQ(std::set<std::size_t>(mb.rows.begin(), mb.rows.end()).size(), mb.rows.size());
    for (std::size_t a = 0; a < cfg.labeled_per_batch; ++a) {
      EXPECT_LT(mb.rows[a], view.num_labeled());
      for (std::size_t b = 0; b < cfg.labeled_per_batch; ++b) {
        EXPECT_EQ(mb.supervision.similar(a, b), view.label(mb.rows[a]) == view.label(mb.rows[b]) ? 1 : 0);
      }
    }
    for (std::size_t a = cfg.labeled_per_batch; a < mb.rows.size(); ++a) EXPECT_GE(mb.rows[a], view.num_labeled());
  }
}

TEST(Minibatch, AllLabeledBoundary) {
  const TrainingView view = small_view();
  TrainConfig cfg = small_config();
  cfg.labeled_per_batch = cfg.batch;
  std::mt19937_64 rng(4);
  const Minibatch mb = sample_minibatch(view, cfg, rng);
  EXPECT_EQ(mb.supervision.labeled.size(), cfg.batch);
}

TEST(Minibatch, DeterministicAndRejectsOversizedBatches) {
  const TrainingView view = small_view();
  TrainConfig cfg = small_config();
  std::mt19937_64 a(7), b(7);
  EXPECT_EQ(sample_minibatch(view, cfg, a).rows, sample_minibatch(view, cfg, b).rows);
  cfg.labeled_per_batch = view.num_labeled() + 1;
  cfg.batch = cfg.labeled_per_batch;
  EXPECT_THROW(sample_minibatch(view, cfg, a), std::invalid_argument);
  cfg = small_config();
  cfg.batch = view.num_unlabeled() + cfg.labeled_per_batch + 1;
  EXPECT_THROW(sample_minibatch(view, cfg, a), std::invalid_argument);
}

TEST(Perturb, ZeroSigmaIsIdentity) {
  std::mt19937_64 rng(1);
  const Matrix x = oracle::random_matrix(5, 3, rng);
  const auto [first, second] = perturb(x, 0.0, rng);
  EXPECT_EQ(first, x);
  EXPECT_EQ(second, x);
}

TEST(Perturb, NoiseHasRequestedMoments) {
  std::mt19937_64 rng(2);
  const std::size_t n = 100000;
  const double sigma = 0.5;
  const Matrix x(n, 1, 1.0);
  const Matrix y = perturb_view(x, std::vector<double>{sigma}, rng);
  double mean = 0.0, sq = 0.0;
  for (double v : y.values()) mean += v - 1.0;
  mean /= static_cast<double>(n);
  for (double v : y.values()) sq += (v - 1.0 - mean) * (v - 1.0 - mean);
  const double sd = std::sqrt(sq / static_cast<double>(n));
  EXPECT_LT(std::abs(mean), 3.0 * sigma / std::sqrt(static_cast<double>(n)));
  EXPECT_NEAR(sd, sigma, 0.01);
}

TEST(Perturb, ViewsDifferAndAreReproducible) {
  std::mt19937_64 a(3), b(3), data(0);
  const Matrix x = oracle::random_matrix(4, 6, data);
  const auto va = perturb(x, 0.2, a);
  const auto vb = perturb(x, 0.2, b);
  EXPECT_EQ(va.first, vb.first);
  EXPECT_EQ(va.second, vb.second);
  EXPECT_NE(va.first, va.second);
  EXPECT_THROW(perturb_view(x, std::vector<double>{0.1}, a), std::invalid_argument);
}

TEST(Rampup, Values) {
  EXPECT_DOUBLE_EQ(rampup_weight(0, 10, 1.0), std::exp(-5.0));
  EXPECT_DOUBLE_EQ(rampup_weight(5, 10, 1.0), std::exp(-1.25));
  EXPECT_EQ(rampup_weight(10, 10, 2.0), 2.0);
  EXPECT_EQ(rampup_weight(50, 10, 2.0), 2.0);
  EXPECT_EQ(rampup_weight(0, 0, 3.0), 3.0);
  EXPECT_THROW(rampup_weight(-1, 10, 1.0), std::invalid_argument);
}

TEST(Rampup, MonotoneAndContinuousAtTheEnd) {
  double prev = 0.0;
  for (int k = 0; k <= 1000; ++k) {
    const double w = rampup_weight(k * 0.012, 10, 1.0);
    EXPECT_GE(w, prev);
    prev = w;
  }
  EXPECT_NEAR(rampup_weight(10.0 - 1e-9, 10, 1.0), 1.0, 1e-8);
}

TEST(Trainer, FrozenTeacherWithAlphaOne) {
  TrainConfig cfg = small_config();
  cfg.hp.alpha = 1.0;
  const TrainResult trained = train(small_view(), cfg);
  cfg.epochs = 0;
  cfg.rampup_epochs = 0;
  const TrainResult initial = train(small_view(), cfg);
  EXPECT_EQ(trained.teacher, initial.teacher);
  EXPECT_NE(trained.student, initial.student);
}

TEST(Trainer, AlphaZeroTeacherCopiesStudent) {
  TrainConfig cfg = small_config();
  cfg.hp.alpha = 0.0;
  const TrainResult r = train(small_view(), cfg);
  EXPECT_EQ(r.teacher, r.student);
}

TEST(Trainer, SameSeedIsBitIdentical) {
  const TrainResult a = train(small_view(), small_config());
  const TrainResult b = train(small_view(), small_config());
  EXPECT_EQ(a.student, b.student);
  EXPECT_EQ(a.teacher, b.teacher);
  EXPECT_EQ(to_json_lines(a.log), to_json_lines(b.log));
  TrainConfig other = small_config();
  other.seed = 4;
  EXPECT_NE(train(small_view(), other).student, a.student);
}

TEST(Trainer, ReducesToSupervisedWhenUnsupervisedWeightsVanish) {
  TrainConfig cfg = small_config();
  cfg.hp.omega = 0.0;
  cfg.hp.eta = 0.0;
  const TrainResult ts = train(small_view(), cfg);
  const TrainResult sup = train_supervised(small_view(), cfg);
  EXPECT_EQ(ts.student, sup.student);
  ASSERT_EQ(ts.log.epochs.size(), sup.log.epochs.size());
  for (std::size_t e = 0; e < ts.log.epochs.size(); ++e) {
    EXPECT_EQ(ts.log.epochs[e].mean_terms.total, sup.log.epochs[e].mean_terms.total);
  }
}

TEST(Trainer, LogsOneRecordPerEpochAndEveryIteration) {
  const TrainConfig cfg = small_config();
  const TrainingView view = small_view();
  const TrainResult r = train(view, cfg);
  ASSERT_EQ(r.log.epochs.size(), cfg.epochs);
  const std::size_t unlabeled = cfg.batch - cfg.labeled_per_batch;
  const std::size_t per_epoch = (view.num_unlabeled() + unlabeled - 1) / unlabeled;
  EXPECT_EQ(r.log.iterations.size(), cfg.epochs * per_epoch);
  for (const auto& e : r.log.epochs) {
    EXPECT_EQ(e.iterations, per_epoch);
    EXPECT_TRUE(e.validation_map.has_value());
    EXPECT_TRUE(std::isfinite(e.mean_terms.total));
  }
  const std::size_t expected_pairs =
      static_cast<std::size_t>(std::llround(r.log.rho * static_cast<double>(cfg.batch * cfg.batch)));
  for (const auto& it : r.log.iterations) {
    EXPECT_EQ(it.pseudo_pairs, expected_pairs);
    EXPECT_EQ(it.batch_pairs, cfg.batch * cfg.batch);
  }
  const std::string lines = to_json_lines(r.log);
  EXPECT_EQ(static_cast<std::size_t>(std::count(lines.begin(), lines.end(), '\n')), cfg.epochs);
}

TEST(Trainer, RhoDefaultsToLabeledSimilarFraction) {
  const TrainResult r = train(small_view(), small_config());
  EXPECT_GT(r.log.rho, 0.0);
  EXPECT_LT(r.log.rho, 0.5);
  TrainConfig fixed = small_config();
  fixed.hp.rho = 0.2;
  EXPECT_EQ(train(small_view(), fixed).log.rho, 0.2);
}

TEST(Trainer, RejectsInvalidConfig) {
  TrainConfig cfg = small_config();
  cfg.labeled_per_batch = 0;
  EXPECT_THROW(train(small_view(), cfg), std::invalid_argument);
  cfg = small_config();
  cfg.rampup_epochs = 10;
  EXPECT_THROW(train(small_view(), cfg), std::invalid_argument);
}

TEST(Trainer, DivergenceIsReported) {
  TrainConfig cfg = small_config();
  cfg.learning_rate = 1e200;
  cfg.rampup_learning_rate = false;
  EXPECT_THROW(train(small_view(), cfg), DivergenceError);
}
