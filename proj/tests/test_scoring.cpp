#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>

#include "nsa/scoring.hpp"

using namespace nsa;

namespace {

EmbeddingSet random_embeddings(int64_t n, int64_t d, uint64_t seed,
                               float spread = 1.0f, float offset = 0.0f) {
  EmbeddingSet e;
  e.n = n;
  e.d = d;
  e.feature_map = "test_map";
  e.data.resize(size_t(n * d));
  Rng rng(seed);
  for (auto& v : e.data) v = offset + spread * float(rng.normal());
  return e;
}

// Independent whitening for oracles: explicit dense covariance eigensolve.
Eigen::MatrixXd oracle_whitener(const EmbeddingSet& train, double lambda,
                                Eigen::VectorXd& mean) {
  int64_t n = train.n, d = train.d;
  Eigen::MatrixXd x(n, d);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < d; ++j) x(i, j) = double(train.row(i)[size_t(j)]);
  mean = x.colwise().mean();
  Eigen::MatrixXd xc = x.rowwise() - mean.transpose();
  Eigen::MatrixXd cov = xc.transpose() * xc / double(n - 1);
  Eigen::MatrixXd reg = (1.0 - lambda) * cov +
                        lambda * (cov.trace() / double(d)) *
                            Eigen::MatrixXd::Identity(d, d);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(reg);
  Eigen::VectorXd inv_sqrt = es.eigenvalues().cwiseMax(1e-8).cwiseSqrt().cwiseInverse();
  return es.eigenvectors() * inv_sqrt.asDiagonal() * es.eigenvectors().transpose();
}

double oracle_cos(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  double na = a.norm(), nb = b.norm();
  if (na <= 1e-12 || nb <= 1e-12) return 0.0;
  return a.dot(b) / (na * nb);
}

}  // namespace

TEST(Mahalanobis, WhitenedDataHasIdentityCovariance) {
  EmbeddingSet train = random_embeddings(2000, 8, 17, 1.0f);
  // Mildly anisotropic covariance; the shrinkage bias stays inside the
  // sampling-error budget.
  for (int64_t i = 0; i < train.n; ++i)
    for (int64_t j = 0; j < 8; ++j)
      train.data[size_t(i * 8 + j)] *= 1.0f + 0.15f * float(j);
  MahalanobisTransform t = fit_mahalanobis(train, 0.01);

  Eigen::MatrixXd w(2000, 8);
  std::vector<double> out;
  for (int64_t i = 0; i < train.n; ++i) {
    t.apply(train.row(i), out);
    for (int64_t j = 0; j < 8; ++j) w(i, j) = out[size_t(j)];
  }
  Eigen::MatrixXd cov = w.transpose() * w / double(train.n - 1);
  double rel = (cov - Eigen::MatrixXd::Identity(8, 8)).norm() /
               Eigen::MatrixXd::Identity(8, 8).norm();
  EXPECT_LT(rel, 0.05);
}

TEST(Mahalanobis, TransformSatisfiesWhiteningIdentity) {
  EmbeddingSet train = random_embeddings(500, 6, 23, 1.3f, 0.4f);
  double lambda = 0.05;
  MahalanobisTransform t = fit_mahalanobis(train, lambda);

  Eigen::VectorXd mean;
  Eigen::MatrixXd w_oracle = oracle_whitener(train, lambda, mean);
  // W Sigma_reg W^T == I within 1e-3 relative Frobenius.
  Eigen::MatrixXd w = t.materialize();
  Eigen::MatrixXd reg = w_oracle.inverse() * w_oracle.inverse();  // Sigma_reg
  Eigen::MatrixXd prod = w * reg * w.transpose();
  double rel = (prod - Eigen::MatrixXd::Identity(6, 6)).norm() / std::sqrt(6.0);
  EXPECT_LT(rel, 1e-3);
  // And the factored form must agree with the dense eigensolve route.
  EXPECT_LT((w - w_oracle).norm() / w_oracle.norm(), 1e-9);
}

TEST(Mahalanobis, IsotropicUnitCovarianceGivesIdentity) {
  // Exactly whitened synthetic data: mean 0, covariance I by construction.
  int64_t n = 400, d = 5;
  EmbeddingSet raw = random_embeddings(n, d, 29);
  Eigen::VectorXd mean;
  Eigen::MatrixXd w0 = oracle_whitener(raw, 0.0, mean);
  EmbeddingSet train;
  train.n = n;
  train.d = d;
  train.data.resize(size_t(n * d));
  for (int64_t i = 0; i < n; ++i) {
    Eigen::VectorXd x(d);
    for (int64_t j = 0; j < d; ++j) x[j] = double(raw.row(i)[size_t(j)]) - mean[j];
    Eigen::VectorXd y = w0 * x;
    for (int64_t j = 0; j < d; ++j) train.data[size_t(i * d + j)] = float(y[j]);
  }
  MahalanobisTransform t = fit_mahalanobis(train, 0.0);
  Eigen::MatrixXd w = t.materialize();
  EXPECT_LT((w - Eigen::MatrixXd::Identity(d, d)).norm() / std::sqrt(double(d)),
            1e-4);
}

TEST(Mahalanobis, RankDeficientHandledByShrinkage) {
  EmbeddingSet train = random_embeddings(5, 16, 31);
  MahalanobisTransform t = fit_mahalanobis(train, 0.1);
  Eigen::MatrixXd w = t.materialize();
  EXPECT_TRUE(w.allFinite());
  std::vector<double> out;
  t.apply(train.row(0), out);
  for (double v : out) EXPECT_TRUE(std::isfinite(v));
}

TEST(Mahalanobis, IdenticalRowsRaiseSingularity) {
  EmbeddingSet train;
  train.n = 10;
  train.d = 4;
  train.data.assign(40, 1.5f);
  EXPECT_THROW(fit_mahalanobis(train, 0.0), SingularityError);
}

TEST(Mahalanobis, RejectsBadArgs) {
  EmbeddingSet train = random_embeddings(10, 4, 1);
  EXPECT_THROW(fit_mahalanobis(train, -0.1), ConfigError);
  EXPECT_THROW(fit_mahalanobis(train, 1.5), ConfigError);
  EmbeddingSet one = random_embeddings(1, 4, 1);
  EXPECT_THROW(fit_mahalanobis(one, 0.1), InsufficientSamplesError);
}

TEST(ScoreKcos, TrainRowScoresZero) {
  EmbeddingSet train = random_embeddings(20, 6, 5);
  EmbeddingSet query;
  query.n = 1;
  query.d = 6;
  query.data.assign(train.row(3).begin(), train.row(3).end());
  ScoreReport rep = score_kcos(train, query);
  EXPECT_NEAR(rep.scores[0], 0.0, 1e-6);
}

TEST(ScoreKcos, OrthogonalQueryScoresHalfPi) {
  EmbeddingSet train;
  train.n = 2;
  train.d = 4;
  train.data = {1, 0, 0, 0, 0, 1, 0, 0};
  EmbeddingSet query;
  query.n = 1;
  query.d = 4;
  query.data = {0, 0, 1, 0};
  ScoreReport rep = score_kcos(train, query);
  EXPECT_NEAR(rep.scores[0], std::numbers::pi / 2.0, 1e-7);
}

TEST(ScoreKcos, MatchesBruteForceOracle) {
  EmbeddingSet train = random_embeddings(50, 7, 41, 1.0f, 0.2f);
  EmbeddingSet query = random_embeddings(20, 7, 43, 1.2f, -0.1f);

  // Plain space.
  ScoreReport plain = score_kcos(train, query);
  for (int64_t q = 0; q < query.n; ++q) {
    double best = -1.0;
    Eigen::VectorXd qv(7);
    for (int64_t j = 0; j < 7; ++j) qv[j] = double(query.row(q)[size_t(j)]);
    for (int64_t m = 0; m < train.n; ++m) {
      Eigen::VectorXd tv(7);
      for (int64_t j = 0; j < 7; ++j) tv[j] = double(train.row(m)[size_t(j)]);
      best = std::max(best, oracle_cos(qv, tv));
    }
    EXPECT_NEAR(plain.scores[size_t(q)], std::acos(std::clamp(best, -1.0, 1.0)), 1e-6);
  }

  // Mahalanobis space, whitened by an independent dense eigensolve.
  double lambda = 0.02;
  MahalanobisTransform t = fit_mahalanobis(train, lambda);
  ScoreReport mah = score_kcos(train, query, &t);
  Eigen::VectorXd mean;
  Eigen::MatrixXd w = oracle_whitener(train, lambda, mean);
  for (int64_t q = 0; q < query.n; ++q) {
    Eigen::VectorXd qv(7);
    for (int64_t j = 0; j < 7; ++j) qv[j] = double(query.row(q)[size_t(j)]);
    Eigen::VectorXd qw = w * (qv - mean);
    double best = -1.0;
    for (int64_t m = 0; m < train.n; ++m) {
      Eigen::VectorXd tv(7);
      for (int64_t j = 0; j < 7; ++j) tv[j] = double(train.row(m)[size_t(j)]);
      best = std::max(best, oracle_cos(qw, w * (tv - mean)));
    }
    EXPECT_NEAR(mah.scores[size_t(q)], std::acos(std::clamp(best, -1.0, 1.0)), 1e-6);
  }
}

TEST(ScoreKcos, IdentityCovarianceMatchesPlain) {
  // Pre-whitened data (mean 0, cov I): kcos_mah == kcos within 1e-5.
  int64_t n = 300, d = 6;
  EmbeddingSet raw = random_embeddings(n, d, 47);
  Eigen::VectorXd mean;
  Eigen::MatrixXd w0 = oracle_whitener(raw, 0.0, mean);
  EmbeddingSet train;
  train.n = n;
  train.d = d;
  train.data.resize(size_t(n * d));
  for (int64_t i = 0; i < n; ++i) {
    Eigen::VectorXd x(d);
    for (int64_t j = 0; j < d; ++j) x[j] = double(raw.row(i)[size_t(j)]) - mean[j];
    Eigen::VectorXd y = w0 * x;
    for (int64_t j = 0; j < d; ++j) train.data[size_t(i * d + j)] = float(y[j]);
  }
  EmbeddingSet query = random_embeddings(40, d, 49);
  MahalanobisTransform t = fit_mahalanobis(train, 0.0);
  ScoreReport plain = score_kcos(train, query);
  ScoreReport mah = score_kcos(train, query, &t);
  for (size_t i = 0; i < plain.scores.size(); ++i)
    EXPECT_NEAR(plain.scores[i], mah.scores[i], 1e-5);
}

TEST(ScoreCcos, MeanDirectionScoresZeroAndPi) {
  EmbeddingSet train = random_embeddings(30, 5, 53, 0.3f, 1.0f);
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(5);
  for (int64_t i = 0; i < train.n; ++i)
    for (int64_t j = 0; j < 5; ++j) mean[j] += double(train.row(i)[size_t(j)]);
  mean /= double(train.n);
  EmbeddingSet query;
  query.n = 2;
  query.d = 5;
  query.data.resize(10);
  for (int64_t j = 0; j < 5; ++j) {
    query.data[size_t(j)] = float(2.0 * mean[j]);       // along the mean
    query.data[size_t(5 + j)] = float(-0.5 * mean[j]);  // opposite
  }
  ScoreReport rep = score_ccos(train, query);
  EXPECT_NEAR(rep.scores[0], 0.0, 1e-6);
  EXPECT_NEAR(rep.scores[1], std::numbers::pi, 1e-6);
}

TEST(ScoreCcos, MatchesDirectOracle) {
  EmbeddingSet train = random_embeddings(60, 6, 59, 1.0f, 0.5f);
  EmbeddingSet query = random_embeddings(100, 6, 61);
  ScoreReport rep = score_ccos(train, query);
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(6);
  for (int64_t i = 0; i < train.n; ++i)
    for (int64_t j = 0; j < 6; ++j) mean[j] += double(train.row(i)[size_t(j)]);
  mean /= double(train.n);
  for (int64_t q = 0; q < query.n; ++q) {
    Eigen::VectorXd qv(6);
    for (int64_t j = 0; j < 6; ++j) qv[j] = double(query.row(q)[size_t(j)]);
    EXPECT_NEAR(rep.scores[size_t(q)],
                std::acos(std::clamp(oracle_cos(mean, qv), -1.0, 1.0)), 1e-6);
  }
}

TEST(ScoreCcos, WhitenedUsesResultantDirection) {
  EmbeddingSet train = random_embeddings(40, 5, 67, 1.0f, 0.8f);
  MahalanobisTransform t = fit_mahalanobis(train, 0.05);
  ScoreReport rep = score_ccos(train, train, &t);
  // Oracle: resultant of unit whitened train vectors.
  Eigen::MatrixXd w = t.materialize();
  Eigen::VectorXd mu = Eigen::Map<const Eigen::VectorXd>(t.mean.data(), 5);
  Eigen::VectorXd ref = Eigen::VectorXd::Zero(5);
  std::vector<Eigen::VectorXd> wrows;
  for (int64_t i = 0; i < train.n; ++i) {
    Eigen::VectorXd x(5);
    for (int64_t j = 0; j < 5; ++j) x[j] = double(train.row(i)[size_t(j)]);
    Eigen::VectorXd y = w * (x - mu);
    wrows.push_back(y);
    if (y.norm() > 1e-12) ref += y / y.norm();
  }
  for (int64_t i = 0; i < train.n; ++i)
    EXPECT_NEAR(rep.scores[size_t(i)],
                std::acos(std::clamp(oracle_cos(ref, wrows[size_t(i)]), -1.0, 1.0)),
                1e-6);
}

TEST(ScoreGde, NearTrainingPointScoresLower) {
  EmbeddingSet train = random_embeddings(25, 4, 71);
  EmbeddingSet query;
  query.n = 2;
  query.d = 4;
  query.data.resize(8);
  for (int64_t j = 0; j < 4; ++j) {
    query.data[size_t(j)] = train.row(0)[size_t(j)];  // on a training point
    query.data[size_t(4 + j)] = 50.0f;                // far away
  }
  ScoreReport rep = score_gde(train, query);
  EXPECT_LT(rep.scores[0], rep.scores[1]);
}

TEST(ScoreGde, TwoPointHandOracle) {
  EmbeddingSet train;
  train.n = 2;
  train.d = 2;
  train.data = {0, 0, 2, 0};
  EmbeddingSet query;
  query.n = 1;
  query.d = 2;
  query.data = {1, 0};
  double sigma = 0.8;
  ScoreReport rep = score_gde(train, query, sigma);
  double k = std::exp(-1.0 / (2.0 * sigma * sigma));  // both distances^2 = 1
  EXPECT_NEAR(rep.scores[0], -std::log(k), 1e-6);
}

TEST(ScoreGde, HugeBandwidthFlattensScores) {
  EmbeddingSet train = random_embeddings(30, 5, 73);
  EmbeddingSet query = random_embeddings(10, 5, 74);
  ScoreReport rep = score_gde(train, query, 1e6);
  for (size_t i = 1; i < rep.scores.size(); ++i)
    EXPECT_NEAR(rep.scores[i], rep.scores[0], 1e-4);
}

TEST(ScoreGde, SinglePointAutoBandwidthFails) {
  EmbeddingSet train = random_embeddings(1, 3, 75);
  EmbeddingSet query = random_embeddings(2, 3, 76);
  EXPECT_THROW(score_gde(train, query), ConfigError);
  EXPECT_THROW(score_gde(train, query, 0.0), ConfigError);
}

TEST(Ensemble, SingleReportIsAffineRescale) {
  EmbeddingSet train = random_embeddings(20, 4, 81);
  EmbeddingSet query = random_embeddings(15, 4, 82);
  ScoreReport rep = score_kcos(train, query);
  ScoreReport ens = ensemble(std::vector<ScoreReport>{rep});
  double range = rep.train_max - rep.train_min;
  for (size_t i = 0; i < rep.scores.size(); ++i)
    EXPECT_NEAR(ens.scores[i], (rep.scores[i] - rep.train_min) / range, 1e-12);
}

TEST(Ensemble, TrainScoresLandInUnitInterval) {
  EmbeddingSet train = random_embeddings(25, 5, 83);
  EmbeddingSet query = random_embeddings(10, 5, 84);
  std::vector<ScoreReport> reports{score_kcos(train, query),
                                   score_ccos(train, query)};
  ScoreReport ens = ensemble(reports);
  // Each component maps its own train scores into [0,1]; the sum of two
  // components lies in [0, 2].
  for (double s : ens.train_scores) {
    EXPECT_GE(s, -1e-12);
    EXPECT_LE(s, 2.0 + 1e-12);
  }
}

TEST(Ensemble, TwoReportHandComposition) {
  ScoreReport a, b;
  a.metric = b.metric = Metric::KCos;
  a.feature_map = "m1";
  b.feature_map = "m2";
  a.scores = {1.0, 2.0, 3.0, 0.5, 1.5};
  a.train_scores = {0.0, 2.0};
  a.finalize_range();
  b.scores = {10.0, 20.0, 30.0, 5.0, 15.0};
  b.train_scores = {10.0, 30.0};
  b.finalize_range();
  ScoreReport ens = ensemble(std::vector<ScoreReport>{a, b});
  for (size_t i = 0; i < 5; ++i) {
    double expected = (a.scores[i] - 0.0) / 2.0 + (b.scores[i] - 10.0) / 20.0;
    EXPECT_NEAR(ens.scores[i], expected, 1e-12);
  }
}

TEST(Ensemble, DegenerateRangeNamesFeatureMap) {
  ScoreReport a;
  a.metric = Metric::CCos;
  a.feature_map = "conv_block_2";
  a.scores = {1.0};
  a.train_scores = {0.7, 0.7};
  a.finalize_range();
  try {
    ensemble(std::vector<ScoreReport>{a});
    FAIL() << "expected DegenerateRangeError";
  } catch (const DegenerateRangeError& e) {
    EXPECT_NE(std::string(e.what()).find("conv_block_2"), std::string::npos);
  }
}

TEST(Scoring, RankInvarianceUnderGlobalScaling) {
  EmbeddingSet train = random_embeddings(40, 6, 91);
  EmbeddingSet query = random_embeddings(30, 6, 92);
  EmbeddingSet train_scaled = train, query_scaled = query;
  for (auto& v : train_scaled.data) v *= 7.5f;
  for (auto& v : query_scaled.data) v *= 7.5f;
  for (bool use_ccos : {false, true}) {
    ScoreReport a = use_ccos ? score_ccos(train, query) : score_kcos(train, query);
    ScoreReport b = use_ccos ? score_ccos(train_scaled, query_scaled)
                             : score_kcos(train_scaled, query_scaled);
    std::vector<size_t> ra(a.scores.size()), rb(b.scores.size());
    std::iota(ra.begin(), ra.end(), 0);
    std::iota(rb.begin(), rb.end(), 0);
    std::sort(ra.begin(), ra.end(),
              [&](size_t x, size_t y) { return a.scores[x] < a.scores[y]; });
    std::sort(rb.begin(), rb.end(),
              [&](size_t x, size_t y) { return b.scores[x] < b.scores[y]; });
    EXPECT_EQ(ra, rb);
  }
}

TEST(Scoring, ScoresLieInArccosRange) {
  EmbeddingSet train = random_embeddings(30, 5, 93);
  EmbeddingSet query = random_embeddings(30, 5, 94);
  for (const ScoreReport& rep :
       {score_kcos(train, query), score_ccos(train, query)}) {
    for (double s : rep.scores) {
      EXPECT_GE(s, 0.0);
      EXPECT_LE(s, std::numbers::pi);
    }
  }
}

TEST(Scoring, NearestNeighborMonotonicity) {
  // A query whose best cosine to the training set is strictly larger must
  // score strictly lower (k-Cos family orientation).
  EmbeddingSet train = random_embeddings(25, 6, 95);
  EmbeddingSet query = random_embeddings(40, 6, 96);
  ScoreReport rep = score_kcos(train, query);
  for (int64_t q = 0; q < query.n; ++q) {
    double best = -1.0;
    Eigen::VectorXd qv(6);
    for (int64_t j = 0; j < 6; ++j) qv[j] = double(query.row(q)[size_t(j)]);
    for (int64_t m = 0; m < train.n; ++m) {
      Eigen::VectorXd tv(6);
      for (int64_t j = 0; j < 6; ++j) tv[j] = double(train.row(m)[size_t(j)]);
      best = std::max(best, oracle_cos(qv, tv));
    }
    // arccos is strictly decreasing: higher best-cos => lower score.
    EXPECT_NEAR(rep.scores[size_t(q)], std::acos(std::clamp(best, -1.0, 1.0)), 1e-9);
  }
}
