#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <vector>

#include "nsa/common.hpp"
#include "nsa/embedding.hpp"

namespace nsa {

inline constexpr double kKappaMax = 1e6;

/// von Mises-Fisher fit of unit-normalized embeddings.
struct VmfFit {
  std::vector<double> mu;  // unit mean direction
  double kappa = 0.0;      // concentration; 0 means uniform
  double rbar = 0.0;       // resultant length in [0, 1]
};

namespace detail {

inline void unit_rows(const float* data, int64_t n, int64_t d,
                      std::vector<double>& out) {
  out.resize(size_t(n * d));
  for (int64_t i = 0; i < n; ++i) {
    double ss = 0.0;
    for (int64_t j = 0; j < d; ++j) {
      double v = double(data[i * d + j]);
      ss += v * v;
    }
    double nrm = std::sqrt(ss);
    double inv = nrm > 1e-300 ? 1.0 / nrm : 0.0;
    for (int64_t j = 0; j < d; ++j) out[size_t(i * d + j)] = double(data[i * d + j]) * inv;
  }
}

}  // namespace detail

/// Banerjee closed-form concentration estimate:
/// rbar = ||sum_i z_i|| / N,  kappa = rbar (d - rbar^2) / (1 - rbar^2),
/// capped at 1e6 for numerically collapsed sets. Rows are normalized
/// internally. Requires N >= 10.
inline VmfFit fit_vmf(const float* data, int64_t n, int64_t d) {
  if (n < 10)
    throw InsufficientSamplesError("fit_vmf requires at least 10 rows, got " +
                                   std::to_string(n));
  std::vector<double> z;
  detail::unit_rows(data, n, d, z);
  std::vector<double> mean(size_t(d), 0.0);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < d; ++j) mean[size_t(j)] += z[size_t(i * d + j)];
  double ss = 0.0;
  for (double& m : mean) {
    m /= double(n);
    ss += m * m;
  }
  double rbar = std::sqrt(ss);
  VmfFit fit;
  fit.rbar = rbar;
  fit.mu.assign(size_t(d), 0.0);
  if (rbar > 0.0)
    for (int64_t j = 0; j < d; ++j) fit.mu[size_t(j)] = mean[size_t(j)] / rbar;
  if (rbar <= 0.0) {
    fit.kappa = 0.0;
  } else if (rbar >= 1.0) {
    fit.kappa = kKappaMax;
  } else {
    fit.kappa = std::min(rbar * (double(d) - rbar * rbar) / (1.0 - rbar * rbar),
                         kKappaMax);
  }
  return fit;
}

inline VmfFit fit_vmf(const EmbeddingSet& e) {
  e.validate();
  return fit_vmf(e.data.data(), e.n, e.d);
}

/// i.i.d. uniform samples on the unit hypersphere S^{d-1}: Gaussian draws
/// normalized to unit length. Deterministic per seed.
inline EmbeddingSet sample_uniform_sphere(int64_t n, int64_t d, uint64_t seed) {
  if (d < 2) throw ConfigError("sample_uniform_sphere requires d >= 2");
  EmbeddingSet e;
  e.n = n;
  e.d = d;
  e.data.resize(size_t(n * d));
  e.feature_map = "uniform_sphere";
  Rng rng(Rng::mix(seed, 0x5EED));
  std::vector<double> row(size_t(d), 0.0);
  for (int64_t i = 0; i < n; ++i) {
    double ss = 0.0;
    for (int64_t j = 0; j < d; ++j) {
      row[size_t(j)] = rng.normal();
      ss += row[size_t(j)] * row[size_t(j)];
    }
    double inv = 1.0 / std::sqrt(ss);
    for (int64_t j = 0; j < d; ++j)
      e.data[size_t(i * d + j)] = float(row[size_t(j)] * inv);
  }
  return e;
}

struct MmdResult {
  double mmd2 = 0.0;       // unbiased MMD^2 estimate
  double bandwidth = 0.0;  // RBF sigma actually used
  int64_t n_x = 0;
  int64_t n_y = 0;
};

/// Unbiased MMD^2 with an RBF kernel k(a,b) = exp(-||a-b||^2 / (2 sigma^2))
/// between two samples whose rows are unit-normalized internally. When no
/// bandwidth is given, sigma is the median pairwise distance over the pooled
/// set. Symmetric in its two arguments.
inline MmdResult mmd(const float* xdata, int64_t m, const float* ydata,
                     int64_t n, int64_t d,
                     std::optional<double> bandwidth = std::nullopt) {
  if (m < 2 || n < 2)
    throw InsufficientSamplesError("mmd requires at least 2 rows per set");
  std::vector<double> x, y;
  detail::unit_rows(xdata, m, d, x);
  detail::unit_rows(ydata, n, d, y);
  auto sqdist = [d](const double* a, const double* b) {
    double acc = 0.0;
    for (int64_t j = 0; j < d; ++j) {
      double t = a[j] - b[j];
      acc += t * t;
    }
    return acc;
  };

  double sigma;
  if (bandwidth) {
    sigma = *bandwidth;
  } else {
    std::vector<double> dists;
    dists.reserve(size_t((m + n) * (m + n - 1) / 2));
    auto at = [&](int64_t i) { return i < m ? &x[size_t(i * d)] : &y[size_t((i - m) * d)]; };
    for (int64_t i = 0; i < m + n; ++i)
      for (int64_t j = i + 1; j < m + n; ++j)
        dists.push_back(std::sqrt(sqdist(at(i), at(j))));
    std::sort(dists.begin(), dists.end());
    size_t mid = dists.size() / 2;
    sigma = dists.size() % 2 ? dists[mid]
                             : 0.5 * (dists[mid - 1] + dists[mid]);
  }
  if (!(sigma > 0.0))
    throw DegenerateKernelError(
        "mmd: zero kernel bandwidth (all points identical?)");

  double inv2s2 = 1.0 / (2.0 * sigma * sigma);
  double kxx = 0.0, kyy = 0.0, kxy = 0.0;
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = i + 1; j < m; ++j)
      kxx += std::exp(-sqdist(&x[size_t(i * d)], &x[size_t(j * d)]) * inv2s2);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = i + 1; j < n; ++j)
      kyy += std::exp(-sqdist(&y[size_t(i * d)], &y[size_t(j * d)]) * inv2s2);
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j)
      kxy += std::exp(-sqdist(&x[size_t(i * d)], &y[size_t(j * d)]) * inv2s2);

  MmdResult r;
  r.bandwidth = sigma;
  r.n_x = m;
  r.n_y = n;
  r.mmd2 = 2.0 * kxx / (double(m) * double(m - 1)) +
           2.0 * kyy / (double(n) * double(n - 1)) -
           2.0 * kxy / (double(m) * double(n));
  return r;
}

inline MmdResult mmd(const EmbeddingSet& x, const EmbeddingSet& y,
                     std::optional<double> bandwidth = std::nullopt) {
  x.validate();
  y.validate();
  if (x.d != y.d)
    throw ShapeError("mmd: dimension mismatch, " + std::to_string(x.d) + " vs " +
                     std::to_string(y.d));
  return mmd(x.data.data(), x.n, y.data.data(), y.n, x.d, bandwidth);
}

}  // namespace nsa
