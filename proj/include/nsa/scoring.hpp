#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "nsa/embedding.hpp"
#include "nsa/nets.hpp"

namespace nsa {

enum class Metric { KCos, KCosMah, CCos, CCosMah, Gde, Ens };

inline std::string metric_name(Metric m) {
  switch (m) {
    case Metric::KCos: return "kcos";
    case Metric::KCosMah: return "kcos_mah";
    case Metric::CCos: return "ccos";
    case Metric::CCosMah: return "ccos_mah";
    case Metric::Gde: return "gde";
    case Metric::Ens: return "ens";
  }
  return "?";
}

inline Metric parse_metric(const std::string& s) {
  if (s == "kcos") return Metric::KCos;
  if (s == "kcos_mah") return Metric::KCosMah;
  if (s == "ccos") return Metric::CCos;
  if (s == "ccos_mah") return Metric::CCosMah;
  if (s == "gde") return Metric::Gde;
  if (s == "ens") return Metric::Ens;
  throw ConfigError("unknown metric: " + s);
}

// ---------------------------------------------------------------------------
// Mahalanobis whitening
// ---------------------------------------------------------------------------

/// Whitener W = Sigma_reg^{-1/2} stored in factored form
/// W = comp_gain * (I - B B^T) + B diag(gains) B^T with orthonormal basis B
/// spanning the sample-covariance range. Equivalent to the symmetric
/// eigendecomposition route (descending eigenvalues, eigenvalue floor 1e-8,
/// column signs fixed by first nonzero component positive) while staying
/// O(d*r) to apply when N << d.
struct MahalanobisTransform {
  std::vector<double> mean;  // d
  Eigen::MatrixXd basis;     // d x r
  Eigen::VectorXd gains;     // r
  double comp_gain = 0.0;    // gain on the orthogonal complement of basis
  double lambda = 0.0;

  int64_t dim() const { return int64_t(mean.size()); }

  void apply(std::span<const float> x, std::vector<double>& out) const {
    int64_t d = dim();
    Eigen::VectorXd xc(d);
    for (int64_t j = 0; j < d; ++j) xc[j] = double(x[size_t(j)]) - mean[size_t(j)];
    Eigen::VectorXd proj = basis.transpose() * xc;
    Eigen::VectorXd w =
        comp_gain * xc + basis * ((gains.array() - comp_gain).matrix().asDiagonal() * proj);
    out.resize(size_t(d));
    Eigen::VectorXd::Map(out.data(), d) = w;
  }

  /// Dense d x d whitening matrix (small-d diagnostics and tests).
  Eigen::MatrixXd materialize() const {
    int64_t d = dim();
    Eigen::MatrixXd w = comp_gain * Eigen::MatrixXd::Identity(d, d);
    w += basis * (gains.array() - comp_gain).matrix().asDiagonal() *
         basis.transpose();
    return w;
  }
};

inline constexpr double kEigenvalueFloor = 1e-8;

/// Fits mean and whitener on training embeddings with shrinkage
/// Sigma_reg = (1-lambda) Sigma_sample + lambda (tr Sigma / d) I.
inline MahalanobisTransform fit_mahalanobis(const EmbeddingSet& train,
                                            double lambda = 0.01) {
  train.validate();
  if (train.n < 2)
    throw InsufficientSamplesError("fit_mahalanobis requires N >= 2, got " +
                                   std::to_string(train.n));
  if (lambda < 0.0 || lambda > 1.0)
    throw ConfigError("fit_mahalanobis: shrinkage must be in [0, 1]");
  int64_t n = train.n, d = train.d;

  MahalanobisTransform t;
  t.lambda = lambda;
  t.mean.assign(size_t(d), 0.0);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < d; ++j) t.mean[size_t(j)] += double(train.data[size_t(i * d + j)]);
  for (double& m : t.mean) m /= double(n);

  Eigen::MatrixXd xc(n, d);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < d; ++j)
      xc(i, j) = double(train.data[size_t(i * d + j)]) - t.mean[size_t(j)];

  double trace = xc.squaredNorm() / double(n - 1);
  if (trace <= 0.0)
    throw SingularityError(
        "fit_mahalanobis: sample covariance is zero (all rows identical); "
        "use shrinkage lambda > 0 with non-degenerate data");
  double shrink_target = trace / double(d);

  Eigen::BDCSVD<Eigen::MatrixXd> svd(xc, Eigen::ComputeThinV);
  const auto& sv = svd.singularValues();  // descending
  int64_t r = sv.size();
  t.basis = svd.matrixV();
  // Deterministic orientation: first component of magnitude > 1e-12 positive.
  for (int64_t c = 0; c < r; ++c) {
    for (int64_t j = 0; j < d; ++j) {
      double v = t.basis(j, c);
      if (std::fabs(v) > 1e-12) {
        if (v < 0.0) t.basis.col(c) = -t.basis.col(c);
        break;
      }
    }
  }
  t.gains.resize(r);
  for (int64_t c = 0; c < r; ++c) {
    double eig = (1.0 - lambda) * sv[c] * sv[c] / double(n - 1) +
                 lambda * shrink_target;
    t.gains[c] = 1.0 / std::sqrt(std::max(eig, kEigenvalueFloor));
  }
  double comp_eig = lambda * shrink_target;
  t.comp_gain = 1.0 / std::sqrt(std::max(comp_eig, kEigenvalueFloor));
  return t;
}

// ---------------------------------------------------------------------------
// Score reports
// ---------------------------------------------------------------------------

/// Per-query anomaly scores for one (feature map, metric) pair. Higher score
/// means more anomalous for every metric. train_scores hold the same metric
/// evaluated on the training set (leave-one-out for the kNN family); their
/// range drives ensemble normalization.
struct ScoreReport {
  Metric metric = Metric::KCos;
  std::string feature_map;
  std::vector<double> scores;
  std::vector<double> train_scores;
  double train_min = 0.0;
  double train_max = 0.0;
  std::vector<int64_t> flagged;  // query rows that hit the zero-norm eps guard

  void finalize_range() {
    if (train_scores.empty()) return;
    auto [lo, hi] = std::minmax_element(train_scores.begin(), train_scores.end());
    train_min = *lo;
    train_max = *hi;
  }
};

namespace detail {

inline constexpr double kNormEps = 1e-12;

// Rows of an embedding set, optionally whitened, as double vectors.
inline std::vector<std::vector<double>> prepare_rows(
    const EmbeddingSet& e, const MahalanobisTransform* transform) {
  std::vector<std::vector<double>> rows(size_t(e.n));
  for (int64_t i = 0; i < e.n; ++i) {
    if (transform) {
      transform->apply(e.row(i), rows[size_t(i)]);
    } else {
      rows[size_t(i)].resize(size_t(e.d));
      for (int64_t j = 0; j < e.d; ++j) rows[size_t(i)][size_t(j)] = double(e.row(i)[size_t(j)]);
    }
  }
  return rows;
}

inline double norm(const std::vector<double>& v) {
  double ss = 0.0;
  for (double x : v) ss += x * x;
  return std::sqrt(ss);
}

inline double cosine(const std::vector<double>& a, const std::vector<double>& b,
                     double na, double nb) {
  if (na <= kNormEps || nb <= kNormEps) return 0.0;
  double dot = 0.0;
  for (size_t i = 0; i < a.size(); ++i) dot += a[i] * b[i];
  return dot / (na * nb);
}

inline double arccos_clamped(double c) {
  return std::acos(std::clamp(c, -1.0, 1.0));
}

}  // namespace detail

/// Nearest-neighbor angular score: arccos of the maximum cosine similarity to
/// the (optionally whitened) training set. Training rows are scored
/// leave-one-out. Zero-norm vectors are eps-guarded (cosine 0) and flagged.
inline ScoreReport score_kcos(const EmbeddingSet& train, const EmbeddingSet& query,
                              const MahalanobisTransform* transform = nullptr) {
  train.validate();
  query.validate();
  if (train.n < 1) throw InsufficientSamplesError("score_kcos: empty training set");
  if (train.d != query.d)
    throw ShapeError("score_kcos: dimension mismatch " + std::to_string(train.d) +
                     " vs " + std::to_string(query.d));
  auto tr = detail::prepare_rows(train, transform);
  auto qr = detail::prepare_rows(query, transform);
  std::vector<double> tn(tr.size()), qn(qr.size());
  for (size_t i = 0; i < tr.size(); ++i) tn[i] = detail::norm(tr[i]);
  for (size_t i = 0; i < qr.size(); ++i) qn[i] = detail::norm(qr[i]);

  ScoreReport rep;
  rep.metric = transform ? Metric::KCosMah : Metric::KCos;
  rep.feature_map = query.feature_map.empty() ? train.feature_map : query.feature_map;
  rep.scores.resize(qr.size());
  for (size_t i = 0; i < qr.size(); ++i) {
    double best = -1.0;
    for (size_t m = 0; m < tr.size(); ++m)
      best = std::max(best, detail::cosine(qr[i], tr[m], qn[i], tn[m]));
    rep.scores[i] = detail::arccos_clamped(best);
    if (qn[i] <= detail::kNormEps) rep.flagged.push_back(int64_t(i));
  }
  rep.train_scores.resize(tr.size());
  for (size_t i = 0; i < tr.size(); ++i) {
    double best = -1.0;
    for (size_t m = 0; m < tr.size(); ++m) {
      if (m == i) continue;
      best = std::max(best, detail::cosine(tr[i], tr[m], tn[i], tn[m]));
    }
    rep.train_scores[i] = detail::arccos_clamped(best);
  }
  rep.finalize_range();
  return rep;
}

/// Angular distance to the training mean direction. Plain space uses the
/// direction of the training mean vector; whitened space (where the centered
/// mean is identically zero) uses the resultant direction of the unit
/// whitened training vectors.
inline ScoreReport score_ccos(const EmbeddingSet& train, const EmbeddingSet& query,
                              const MahalanobisTransform* transform = nullptr) {
  train.validate();
  query.validate();
  if (train.n < 1) throw InsufficientSamplesError("score_ccos: empty training set");
  if (train.d != query.d)
    throw ShapeError("score_ccos: dimension mismatch");
  auto tr = detail::prepare_rows(train, transform);
  auto qr = detail::prepare_rows(query, transform);

  std::vector<double> ref(size_t(train.d), 0.0);
  if (transform) {
    for (auto& row : tr) {
      double nr = detail::norm(row);
      if (nr <= detail::kNormEps) continue;
      for (size_t j = 0; j < ref.size(); ++j) ref[j] += row[j] / nr;
    }
  } else {
    for (auto& row : tr)
      for (size_t j = 0; j < ref.size(); ++j) ref[j] += row[j];
    for (double& v : ref) v /= double(train.n);
  }
  double ref_norm = detail::norm(ref);

  ScoreReport rep;
  rep.metric = transform ? Metric::CCosMah : Metric::CCos;
  rep.feature_map = query.feature_map.empty() ? train.feature_map : query.feature_map;
  rep.scores.resize(qr.size());
  for (size_t i = 0; i < qr.size(); ++i) {
    double qn = detail::norm(qr[i]);
    rep.scores[i] = detail::arccos_clamped(detail::cosine(qr[i], ref, qn, ref_norm));
    if (qn <= detail::kNormEps || ref_norm <= detail::kNormEps)
      rep.flagged.push_back(int64_t(i));
  }
  rep.train_scores.resize(tr.size());
  for (size_t i = 0; i < tr.size(); ++i) {
    double nr = detail::norm(tr[i]);
    rep.train_scores[i] =
        detail::arccos_clamped(detail::cosine(tr[i], ref, nr, ref_norm));
  }
  rep.finalize_range();
  return rep;
}

/// Gaussian kernel density score: -log of the mean RBF kernel value against
/// the training set (unnormalized). Auto bandwidth: median pairwise training
/// distance / sqrt(2).
inline ScoreReport score_gde(const EmbeddingSet& train, const EmbeddingSet& query,
                             std::optional<double> bandwidth = std::nullopt) {
  train.validate();
  query.validate();
  if (train.n < 1) throw InsufficientSamplesError("score_gde: empty training set");
  if (train.d != query.d) throw ShapeError("score_gde: dimension mismatch");
  double sigma;
  if (bandwidth) {
    sigma = *bandwidth;
  } else {
    if (train.n < 2)
      throw ConfigError(
          "score_gde: bandwidth underdetermined for a single training point");
    std::vector<double> dists;
    dists.reserve(size_t(train.n * (train.n - 1) / 2));
    for (int64_t i = 0; i < train.n; ++i)
      for (int64_t j = i + 1; j < train.n; ++j) {
        double ss = 0.0;
        for (int64_t k = 0; k < train.d; ++k) {
          double diff = double(train.data[size_t(i * train.d + k)]) -
                        double(train.data[size_t(j * train.d + k)]);
          ss += diff * diff;
        }
        dists.push_back(std::sqrt(ss));
      }
    std::sort(dists.begin(), dists.end());
    size_t mid = dists.size() / 2;
    double median =
        dists.size() % 2 ? dists[mid] : 0.5 * (dists[mid - 1] + dists[mid]);
    sigma = median / std::sqrt(2.0);
  }
  if (!(sigma > 0.0))
    throw ConfigError("score_gde: zero bandwidth (identical training points?)");

  double inv2s2 = 1.0 / (2.0 * sigma * sigma);
  auto kernel_score = [&](std::span<const float> y) {
    // -log(mean_m exp(-||y - x_m||^2/(2 sigma^2))), log-sum-exp stabilized.
    double best = -std::numeric_limits<double>::infinity();
    std::vector<double> expo(size_t(train.n));
    for (int64_t m = 0; m < train.n; ++m) {
      double ss = 0.0;
      for (int64_t k = 0; k < train.d; ++k) {
        double diff = double(y[size_t(k)]) - double(train.data[size_t(m * train.d + k)]);
        ss += diff * diff;
      }
      expo[size_t(m)] = -ss * inv2s2;
      best = std::max(best, expo[size_t(m)]);
    }
    double acc = 0.0;
    for (double e : expo) acc += std::exp(e - best);
    return -(best + std::log(acc) - std::log(double(train.n)));
  };

  ScoreReport rep;
  rep.metric = Metric::Gde;
  rep.feature_map = query.feature_map.empty() ? train.feature_map : query.feature_map;
  rep.scores.resize(size_t(query.n));
  for (int64_t i = 0; i < query.n; ++i) rep.scores[size_t(i)] = kernel_score(query.row(i));
  rep.train_scores.resize(size_t(train.n));
  for (int64_t i = 0; i < train.n; ++i)
    rep.train_scores[size_t(i)] = kernel_score(train.row(i));
  rep.finalize_range();
  return rep;
}

/// Feature ensembling: each report's scores are affinely mapped by its
/// training-score range, (s - min) / (max - min) without clipping, then
/// summed across reports.
inline ScoreReport ensemble(std::span<const ScoreReport> reports) {
  if (reports.empty()) throw ConfigError("ensemble: no reports");
  size_t nq = reports[0].scores.size();
  size_t nt = reports[0].train_scores.size();
  ScoreReport out;
  out.metric = Metric::Ens;
  out.feature_map = "ensemble";
  out.scores.assign(nq, 0.0);
  out.train_scores.assign(nt, 0.0);
  for (const ScoreReport& r : reports) {
    if (r.scores.size() != nq || r.train_scores.size() != nt)
      throw ShapeError("ensemble: sample count mismatch across reports");
    double range = r.train_max - r.train_min;
    if (!(range > 0.0))
      throw DegenerateRangeError(
          "ensemble: degenerate training score range for feature map '" +
          r.feature_map + "' (" + metric_name(r.metric) + ")");
    double inv = 1.0 / range;
    for (size_t i = 0; i < nq; ++i)
      out.scores[i] += (r.scores[i] - r.train_min) * inv;
    for (size_t i = 0; i < nt; ++i)
      out.train_scores[i] += (r.train_scores[i] - r.train_min) * inv;
  }
  out.finalize_range();
  return out;
}

/// The "Ens." preset: {kcos, kcos_mah} on flattened 2-D conv maps and
/// {ccos, ccos_mah} on 1-D maps (pooled conv, head layers, encoder output),
/// min-max normalized by training ranges and summed.
inline ScoreReport ens_preset(
    const std::map<FeatureMap, EmbeddingSet>& train_sets,
    const std::map<FeatureMap, EmbeddingSet>& query_sets, double lambda = 0.01) {
  std::vector<ScoreReport> reports;
  for (const auto& [map_id, train] : train_sets) {
    auto qit = query_sets.find(map_id);
    if (qit == query_sets.end()) continue;
    MahalanobisTransform mt = fit_mahalanobis(train, lambda);
    if (is_2d_map(map_id)) {
      reports.push_back(score_kcos(train, qit->second));
      reports.push_back(score_kcos(train, qit->second, &mt));
    } else {
      reports.push_back(score_ccos(train, qit->second));
      reports.push_back(score_ccos(train, qit->second, &mt));
    }
  }
  if (reports.empty()) throw ConfigError("ens_preset: no shared feature maps");
  return ensemble(reports);
}

/// Score CSV (sample_id, feature_map, metric, score) plus a JSON sidecar with
/// training min/max per (feature_map, metric).
inline void write_score_csv(const std::string& csv_path,
                            const std::string& sidecar_path,
                            std::span<const ScoreReport> reports) {
  std::ofstream os(csv_path);
  if (!os) throw Error("cannot open " + csv_path + " for writing");
  os << "sample_id,feature_map,metric,score\n";
  char buf[128];
  for (const ScoreReport& r : reports) {
    for (size_t i = 0; i < r.scores.size(); ++i) {
      std::snprintf(buf, sizeof(buf), "%zu,%s,%s,%.9g\n", i,
                    r.feature_map.c_str(), metric_name(r.metric).c_str(),
                    r.scores[i]);
      os << buf;
    }
  }
  nlohmann::json sidecar = nlohmann::json::array();
  for (const ScoreReport& r : reports) {
    sidecar.push_back({{"feature_map", r.feature_map},
                       {"metric", metric_name(r.metric)},
                       {"train_min", r.train_min},
                       {"train_max", r.train_max},
                       {"flagged", r.flagged}});
  }
  std::ofstream js(sidecar_path);
  if (!js) throw Error("cannot open " + sidecar_path + " for writing");
  js << sidecar.dump(2) << "\n";
}

}  // namespace nsa
