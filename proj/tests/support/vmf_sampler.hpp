#pragma once

// Wood (1994) rejection sampler for the von Mises-Fisher distribution.
// Test-only oracle: generates ground-truth vMF samples so concentration
// estimates can be checked against a known kappa. Independent of the
// estimator under test.

#include <cmath>
#include <vector>

#include "nsa/common.hpp"
#include "nsa/embedding.hpp"

namespace nsa::testsupport {

// Marsaglia-Tsang Gamma(alpha, 1) for alpha >= 1.
inline double sample_gamma(double alpha, Rng& rng) {
  if (alpha < 1.0) {
    double u = rng.uniform();
    return sample_gamma(alpha + 1.0, rng) * std::pow(u, 1.0 / alpha);
  }
  double d = alpha - 1.0 / 3.0;
  double c = 1.0 / std::sqrt(9.0 * d);
  while (true) {
    double x = rng.normal();
    double v = 1.0 + c * x;
    if (v <= 0.0) continue;
    v = v * v * v;
    double u = rng.uniform();
    if (u <= 0.0) continue;
    if (std::log(u) < 0.5 * x * x + d - d * v + d * std::log(v)) return d * v;
  }
}

inline double sample_beta(double a, double b, Rng& rng) {
  double x = sample_gamma(a, rng);
  double y = sample_gamma(b, rng);
  return x / (x + y);
}

/// One vMF(mu, kappa) draw; mu must be unit length.
inline std::vector<double> sample_vmf_one(const std::vector<double>& mu,
                                          double kappa, Rng& rng) {
  int64_t d = int64_t(mu.size());
  double dm1 = double(d - 1);
  double b = (-2.0 * kappa + std::sqrt(4.0 * kappa * kappa + dm1 * dm1)) / dm1;
  double x0 = (1.0 - b) / (1.0 + b);
  double c = kappa * x0 + dm1 * std::log(1.0 - x0 * x0);
  double w;
  while (true) {
    double z = sample_beta(dm1 / 2.0, dm1 / 2.0, rng);
    double u = rng.uniform();
    w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z);
    if (u <= 0.0) continue;
    if (kappa * w + dm1 * std::log(1.0 - x0 * w) - c >= std::log(u)) break;
  }
  // Uniform direction in the orthogonal complement of e1.
  std::vector<double> v(size_t(d - 1), 0.0);
  double ss = 0.0;
  for (auto& x : v) {
    x = rng.normal();
    ss += x * x;
  }
  double inv = std::sqrt((1.0 - w * w) / ss);
  std::vector<double> sample(size_t(d), 0.0);
  sample[0] = w;
  for (int64_t j = 1; j < d; ++j) sample[size_t(j)] = v[size_t(j - 1)] * inv;

  // Householder reflection taking e1 to mu.
  std::vector<double> h(size_t(d), 0.0);
  h[0] = 1.0 - mu[0];
  double hh = h[0] * h[0];
  for (int64_t j = 1; j < d; ++j) {
    h[size_t(j)] = -mu[size_t(j)];
    hh += h[size_t(j)] * h[size_t(j)];
  }
  if (hh < 1e-24) return sample;  // mu == e1
  double dot = 0.0;
  for (int64_t j = 0; j < d; ++j) dot += h[size_t(j)] * sample[size_t(j)];
  double k2 = 2.0 * dot / hh;
  for (int64_t j = 0; j < d; ++j) sample[size_t(j)] -= k2 * h[size_t(j)];
  return sample;
}

inline EmbeddingSet sample_vmf(int64_t n, int64_t d, double kappa,
                               uint64_t seed) {
  std::vector<double> mu(size_t(d), 0.0);
  mu[size_t(d - 1)] = 1.0;  // arbitrary fixed direction
  Rng rng(Rng::mix(seed, 0x7F0D));
  EmbeddingSet e;
  e.n = n;
  e.d = d;
  e.feature_map = "vmf_oracle";
  e.data.resize(size_t(n * d));
  for (int64_t i = 0; i < n; ++i) {
    auto s = sample_vmf_one(mu, kappa, rng);
    for (int64_t j = 0; j < d; ++j) e.data[size_t(i * d + j)] = float(s[size_t(j)]);
  }
  return e;
}

}  // namespace nsa::testsupport
