#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "nsa/tensor.hpp"

namespace nsa {

namespace detail {

// C[m,n] += A[m,k] * B[k,n]
inline void gemm_nn_acc(const float* A, const float* B, float* C, int64_t m,
                        int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const float* a = A + i * k;
    float* c = C + i * n;
    for (int64_t l = 0; l < k; ++l) {
      float av = a[l];
      const float* b = B + l * n;
      for (int64_t j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

// C[m,k] += A[m,n] * B[k,n]^T   (C[i,l] = sum_j A[i,j] * B[l,j])
inline void gemm_nt_acc(const float* A, const float* B, float* C, int64_t m,
                        int64_t n, int64_t k) {
  for (int64_t i = 0; i < m; ++i) {
    const float* a = A + i * n;
    float* c = C + i * k;
    for (int64_t l = 0; l < k; ++l) {
      const float* b = B + l * n;
      float acc = 0.0f;
#pragma omp simd reduction(+ : acc)
      for (int64_t j = 0; j < n; ++j) acc += a[j] * b[j];
      c[l] += acc;
    }
  }
}

// C[k,n] += A[m,k]^T * B[m,n]
inline void gemm_tn_acc(const float* A, const float* B, float* C, int64_t m,
                        int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const float* a = A + i * k;
    const float* b = B + i * n;
    for (int64_t l = 0; l < k; ++l) {
      float av = a[l];
      float* c = C + l * n;
      for (int64_t j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

using DataPtr = std::shared_ptr<TensorData>;

inline bool want_grad(const Tensor& t) { return t.requires_grad(); }

/// Marks the op output as being on the gradient path and returns the tape to
/// record on, or nullptr when recording is off / no input needs gradients.
inline GradTape* prep_record(Tensor& out, bool any_input_grad) {
  GradTape* tape = GradTape::active();
  if (!tape || !any_input_grad) return nullptr;
  out.set_requires_grad(true);
  return tape;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Matrix ops
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw ShapeError("matmul expects rank-2 tensors, got " +
                     shape_str(a.shape()) + " and " + shape_str(b.shape()));
  if (a.dim(1) != b.dim(0))
    throw ShapeError("matmul inner dims differ: " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out = Tensor::zeros({m, n});
  detail::gemm_nn_acc(a.value().data(), b.value().data(), out.value().data(), m,
                      k, n);
  if (auto* tape = detail::prep_record(out, a.requires_grad() || b.requires_grad())) {
    auto ad = a.impl(), bd = b.impl(), od = out.impl();
    tape->record([ad, bd, od, m, k, n] {
      if (!od->has_grad()) return;
      const float* g = od->grad.data();
      if (ad->requires_grad) {
        ad->ensure_grad();
        detail::gemm_nt_acc(g, bd->value.data(), ad->grad.data(), m, n, k);
      }
      if (bd->requires_grad) {
        bd->ensure_grad();
        detail::gemm_tn_acc(ad->value.data(), g, bd->grad.data(), m, k, n);
      }
    });
  }
  return out;
}

inline Tensor transpose(const Tensor& a) {
  if (a.rank() != 2)
    throw ShapeError("transpose expects a rank-2 tensor, got " +
                     shape_str(a.shape()));
  int64_t m = a.dim(0), n = a.dim(1);
  Tensor out = Tensor::zeros({n, m});
  const float* src = a.value().data();
  float* dst = out.value().data();
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) dst[j * m + i] = src[i * n + j];
  if (auto* tape = detail::prep_record(out, a.requires_grad())) {
    auto ad = a.impl();
    auto od = out.impl();
    tape->record([ad, od, m, n] {
      if (!od->has_grad()) return;
      ad->ensure_grad();
      const float* g = od->grad.data();
      float* da = ad->grad.data();
      for (int64_t j = 0; j < n; ++j)
        for (int64_t i = 0; i < m; ++i) da[i * n + j] += g[j * m + i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise / shape ops
// ---------------------------------------------------------------------------

/// add(a, b): same-shape elementwise sum, or row-broadcast bias when
/// a is [N,d] and b is [d].
inline Tensor add(const Tensor& a, const Tensor& b) {
  bool bias_bcast = a.rank() == 2 && b.rank() == 1 && a.dim(1) == b.dim(0);
  if (!bias_bcast && a.shape() != b.shape())
    throw ShapeError("add: incompatible shapes " + shape_str(a.shape()) +
                     " and " + shape_str(b.shape()));
  Tensor out = Tensor::zeros(a.shape());
  const float* av = a.value().data();
  const float* bv = b.value().data();
  float* ov = out.value().data();
  int64_t n = a.size();
  if (bias_bcast) {
    int64_t cols = b.dim(0);
    for (int64_t i = 0; i < n; ++i) ov[i] = av[i] + bv[i % cols];
  } else {
    for (int64_t i = 0; i < n; ++i) ov[i] = av[i] + bv[i];
  }
  if (out.size() == 1 && a.impl()->has_precise && b.impl()->has_precise) {
    out.impl()->precise = a.impl()->precise + b.impl()->precise;
    out.impl()->has_precise = true;
  }
  if (auto* tape = detail::prep_record(out, a.requires_grad() || b.requires_grad())) {
    auto ad = a.impl(), bd = b.impl(), od = out.impl();
    tape->record([ad, bd, od, bias_bcast, n] {
      if (!od->has_grad()) return;
      const float* g = od->grad.data();
      if (ad->requires_grad) {
        ad->ensure_grad();
        float* da = ad->grad.data();
        for (int64_t i = 0; i < n; ++i) da[i] += g[i];
      }
      if (bd->requires_grad) {
        bd->ensure_grad();
        float* db = bd->grad.data();
        if (bias_bcast) {
          int64_t cols = int64_t(bd->value.size());
          int64_t rows = n / cols;
          for (int64_t j = 0; j < cols; ++j) {
            double acc = 0.0;
            for (int64_t i = 0; i < rows; ++i) acc += g[i * cols + j];
            db[j] += float(acc);
          }
        } else {
          for (int64_t i = 0; i < n; ++i) db[i] += g[i];
        }
      }
    });
  }
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ShapeError("mul: shapes differ, " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  Tensor out = Tensor::zeros(a.shape());
  const float* av = a.value().data();
  const float* bv = b.value().data();
  float* ov = out.value().data();
  int64_t n = a.size();
  for (int64_t i = 0; i < n; ++i) ov[i] = av[i] * bv[i];
  if (auto* tape = detail::prep_record(out, a.requires_grad() || b.requires_grad())) {
    auto ad = a.impl(), bd = b.impl(), od = out.impl();
    tape->record([ad, bd, od, n] {
      if (!od->has_grad()) return;
      const float* g = od->grad.data();
      if (ad->requires_grad) {
        ad->ensure_grad();
        float* da = ad->grad.data();
        const float* bv2 = bd->value.data();
        for (int64_t i = 0; i < n; ++i) da[i] += g[i] * bv2[i];
      }
      if (bd->requires_grad) {
        bd->ensure_grad();
        float* db = bd->grad.data();
        const float* av2 = ad->value.data();
        for (int64_t i = 0; i < n; ++i) db[i] += g[i] * av2[i];
      }
    });
  }
  return out;
}

inline Tensor scale(const Tensor& a, float c) {
  Tensor out = Tensor::zeros(a.shape());
  const float* av = a.value().data();
  float* ov = out.value().data();
  int64_t n = a.size();
  for (int64_t i = 0; i < n; ++i) ov[i] = av[i] * c;
  if (a.impl()->has_precise && n == 1) {
    out.impl()->precise = a.impl()->precise * double(c);
    out.impl()->has_precise = true;
  }
  if (auto* tape = detail::prep_record(out, a.requires_grad())) {
    auto ad = a.impl(), od = out.impl();
    tape->record([ad, od, c, n] {
      if (!od->has_grad()) return;
      ad->ensure_grad();
      const float* g = od->grad.data();
      float* da = ad->grad.data();
      for (int64_t i = 0; i < n; ++i) da[i] += c * g[i];
    });
  }
  return out;
}

inline Tensor relu(const Tensor& a) {
  Tensor out = Tensor::zeros(a.shape());
  const float* av = a.value().data();
  float* ov = out.value().data();
  int64_t n = a.size();
  for (int64_t i = 0; i < n; ++i) ov[i] = av[i] > 0.0f ? av[i] : 0.0f;
  if (auto* tape = detail::prep_record(out, a.requires_grad())) {
    auto ad = a.impl(), od = out.impl();
    tape->record([ad, od, n] {
      if (!od->has_grad()) return;
      ad->ensure_grad();
      const float* g = od->grad.data();
      const float* av2 = ad->value.data();
      float* da = ad->grad.data();
      for (int64_t i = 0; i < n; ++i)
        if (av2[i] > 0.0f) da[i] += g[i];
    });
  }
  return out;
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.size())
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                     shape_str(shape));
  Tensor out = Tensor::from_data(std::move(shape),
                                 std::vector<float>(a.value().begin(), a.value().end()));
  if (auto* tape = detail::prep_record(out, a.requires_grad())) {
    auto ad = a.impl(), od = out.impl();
    tape->record([ad, od] {
      if (!od->has_grad()) return;
      ad->ensure_grad();
      const float* g = od->grad.data();
      float* da = ad->grad.data();
      int64_t n = int64_t(ad->value.size());
      for (int64_t i = 0; i < n; ++i) da[i] += g[i];
    });
  }
  return out;
}

inline Tensor flatten_rows(const Tensor& a) {
  if (a.rank() < 2)
    throw ShapeError("flatten_rows expects rank >= 2, got " + shape_str(a.shape()));
  int64_t rows = a.dim(0);
  return reshape(a, {rows, a.size() / rows});
}

/// Contiguous row range [start, start+len) along dim 0.
inline Tensor slice_rows(const Tensor& a, int64_t start, int64_t len) {
  if (a.rank() < 1) throw ShapeError("slice_rows expects rank >= 1");
  if (start < 0 || len < 1 || start + len > a.dim(0))
    throw ShapeError("slice_rows: range [" + std::to_string(start) + ", " +
                     std::to_string(start + len) + ") out of bounds for " +
                     shape_str(a.shape()));
  Shape out_shape = a.shape();
  out_shape[0] = len;
  int64_t row = a.size() / a.dim(0);
  Tensor out = Tensor::from_data(
      out_shape, std::vector<float>(a.value().begin() + start * row,
                                    a.value().begin() + (start + len) * row));
  if (auto* tape = detail::prep_record(out, a.requires_grad())) {
    auto ad = a.impl(), od = out.impl();
    tape->record([ad, od, start, len, row] {
      if (!od->has_grad()) return;
      ad->ensure_grad();
      const float* g = od->grad.data();
      float* da = ad->grad.data() + start * row;
      for (int64_t i = 0; i < len * row; ++i) da[i] += g[i];
    });
  }
  return out;
}

/// Concatenates tensors along dim 0. All parts must share trailing dims.
inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  Shape base = parts[0].shape();
  int64_t rows = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != int(base.size()))
      throw ShapeError("concat_rows: rank mismatch");
    for (size_t i = 1; i < base.size(); ++i)
      if (p.shape()[i] != base[i])
        throw ShapeError("concat_rows: trailing dims differ, " +
                         shape_str(p.shape()) + " vs " + shape_str(base));
    rows += p.dim(0);
  }
  Shape out_shape = base;
  out_shape[0] = rows;
  Tensor out = Tensor::zeros(out_shape);
  float* dst = out.value().data();
  bool any_grad = false;
  int64_t offset = 0;
  for (const Tensor& p : parts) {
    std::copy(p.value().begin(), p.value().end(), dst + offset);
    offset += p.size();
    any_grad = any_grad || p.requires_grad();
  }
  if (auto* tape = detail::prep_record(out, any_grad)) {
    std::vector<detail::DataPtr> srcs;
    srcs.reserve(parts.size());
    for (const Tensor& p : parts) srcs.push_back(p.impl());
    auto od = out.impl();
    tape->record([srcs, od] {
      if (!od->has_grad()) return;
      const float* g = od->grad.data();
      int64_t off = 0;
      for (const auto& s : srcs) {
        int64_t n = int64_t(s->value.size());
        if (s->requires_grad) {
          s->ensure_grad();
          float* ds = s->grad.data();
          for (int64_t i = 0; i < n; ++i) ds[i] += g[off + i];
        }
        off += n;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions (64-bit accumulators; scalar outputs carry the double result)
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (float v : a.value()) acc += double(v);
  Tensor out = Tensor::scalar(float(acc));
  out.impl()->precise = acc;
  out.impl()->has_precise = true;
  if (auto* tape = detail::prep_record(out, a.requires_grad())) {
    auto ad = a.impl(), od = out.impl();
    tape->record([ad, od] {
      if (!od->has_grad()) return;
      ad->ensure_grad();
      float g = od->grad[0];
      for (float& dv : ad->grad) dv += g;
    });
  }
  return out;
}

inline Tensor mean(const Tensor& a) {
  int64_t n = a.size();
  double acc = 0.0;
  for (float v : a.value()) acc += double(v);
  acc /= double(n);
  Tensor out = Tensor::scalar(float(acc));
  out.impl()->precise = acc;
  out.impl()->has_precise = true;
  if (auto* tape = detail::prep_record(out, a.requires_grad())) {
    auto ad = a.impl(), od = out.impl();
    tape->record([ad, od, n] {
      if (!od->has_grad()) return;
      ad->ensure_grad();
      float g = od->grad[0] / float(n);
      for (float& dv : ad->grad) dv += g;
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// stop_grad and L2 normalization
// ---------------------------------------------------------------------------

/// Value passes through unchanged; the backward pass contributes exactly
/// zero to every ancestor of v.
inline Tensor stop_grad(const Tensor& v) {
  Tensor out = v.clone();
  out.set_requires_grad(false);
  return out;
}

/// out = v / max(||v||_2, eps) along `axis` (negative axis counts from the
/// back). eps guards zero fibers: they pass through scaled by 1/eps, which for
/// an exactly-zero fiber yields an exactly-zero output.
inline Tensor l2_normalize(const Tensor& v, int axis, float eps = 1e-12f) {
  if (eps <= 0.0f) throw ConfigError("l2_normalize: eps must be > 0");
  int r = v.rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r)
    throw ShapeError("l2_normalize: axis out of range for " + shape_str(v.shape()));
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= v.dim(i);
  int64_t len = v.dim(axis);
  for (int i = axis + 1; i < r; ++i) inner *= v.dim(i);

  Tensor out = Tensor::zeros(v.shape());
  const float* src = v.value().data();
  float* dst = out.value().data();
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t in = 0; in < inner; ++in) {
      const float* f = src + o * len * inner + in;
      float* g = dst + o * len * inner + in;
      double ss = 0.0;
      for (int64_t j = 0; j < len; ++j) {
        double x = double(f[j * inner]);
        ss += x * x;
      }
      double m = std::max(std::sqrt(ss), double(eps));
      for (int64_t j = 0; j < len; ++j) g[j * inner] = float(double(f[j * inner]) / m);
    }
  }
  if (auto* tape = detail::prep_record(out, v.requires_grad())) {
    auto vd = v.impl(), od = out.impl();
    tape->record([vd, od, outer, len, inner, eps] {
      if (!od->has_grad()) return;
      vd->ensure_grad();
      const float* x = vd->value.data();
      const float* gy = od->grad.data();
      float* gx = vd->grad.data();
      for (int64_t o = 0; o < outer; ++o) {
        for (int64_t in = 0; in < inner; ++in) {
          int64_t base = o * len * inner + in;
          double ss = 0.0;
          for (int64_t j = 0; j < len; ++j) {
            double v2 = double(x[base + j * inner]);
            ss += v2 * v2;
          }
          double nrm = std::sqrt(ss);
          if (nrm > double(eps)) {
            double dot = 0.0;
            for (int64_t j = 0; j < len; ++j)
              dot += double(x[base + j * inner]) * double(gy[base + j * inner]);
            double inv = 1.0 / nrm;
            double inv3 = inv * inv * inv;
            for (int64_t j = 0; j < len; ++j) {
              gx[base + j * inner] +=
                  float(double(gy[base + j * inner]) * inv -
                        double(x[base + j * inner]) * dot * inv3);
            }
          } else {
            // Clamped branch: out = v/eps is linear.
            for (int64_t j = 0; j < len; ++j)
              gx[base + j * inner] += float(double(gy[base + j * inner]) / double(eps));
          }
        }
      }
    });
  }
  return out;
}

/// Negative cosine similarity, -(p/||p||) . (z/||z||); for [N,d] inputs the
/// mean over rows. Zero vectors are eps-guarded and contribute 0.
inline Tensor neg_cosine(const Tensor& p, const Tensor& z, float eps = 1e-12f) {
  if (p.shape() != z.shape())
    throw ShapeError("neg_cosine: shapes differ, " + shape_str(p.shape()) +
                     " vs " + shape_str(z.shape()));
  if (p.rank() < 1 || p.rank() > 2)
    throw ShapeError("neg_cosine expects rank-1 or rank-2 tensors");
  int axis = p.rank() - 1;
  int64_t rows = p.rank() == 2 ? p.dim(0) : 1;
  Tensor ph = l2_normalize(p, axis, eps);
  Tensor zh = l2_normalize(z, axis, eps);
  return scale(sum(mul(ph, zh)), -1.0f / float(rows));
}

// ---------------------------------------------------------------------------
// Convolution and pooling
// ---------------------------------------------------------------------------

namespace detail {

inline void pad_image(const float* src, float* dst, int64_t C, int64_t H,
                      int64_t W, int64_t pad) {
  int64_t Hp = H + 2 * pad, Wp = W + 2 * pad;
  std::fill(dst, dst + C * Hp * Wp, 0.0f);
  for (int64_t c = 0; c < C; ++c)
    for (int64_t y = 0; y < H; ++y)
      std::copy(src + (c * H + y) * W, src + (c * H + y) * W + W,
                dst + (c * Hp + y + pad) * Wp + pad);
}

// im2col over the whole batch: cols[(c*kh+ky)*kw+kx, n*Ho*Wo + oy*Wo+ox] =
// padded_x[n, c, oy*s+ky, ox*s+kx]. Long inner dim keeps the GEMMs fed.
inline void im2col_batch(const float* xv, float* cols, int64_t N, int64_t C,
                         int64_t H, int64_t W, int64_t kh, int64_t kw,
                         int64_t Ho, int64_t Wo, int64_t s, int64_t p,
                         std::vector<float>& scratch) {
  int64_t Hp = H + 2 * p, Wp = W + 2 * p;
  int64_t S = Ho * Wo, NS = N * S;
  scratch.resize(size_t(C * Hp * Wp));
  for (int64_t n = 0; n < N; ++n) {
    pad_image(xv + n * C * H * W, scratch.data(), C, H, W, p);
    for (int64_t c = 0; c < C; ++c) {
      const float* xc = scratch.data() + c * Hp * Wp;
      for (int64_t ky = 0; ky < kh; ++ky)
        for (int64_t kx = 0; kx < kw; ++kx) {
          float* dst = cols + (((c * kh + ky) * kw + kx) * NS) + n * S;
          for (int64_t oy = 0; oy < Ho; ++oy) {
            const float* src = xc + (oy * s + ky) * Wp + kx;
            if (s == 1) {
              std::copy(src, src + Wo, dst + oy * Wo);
            } else {
              for (int64_t ox = 0; ox < Wo; ++ox) dst[oy * Wo + ox] = src[ox * s];
            }
          }
        }
    }
  }
}

// Scatter-add of column gradients back into the (padded) input gradient.
inline void col2im_batch_acc(const float* dcols, float* dx, int64_t N,
                             int64_t C, int64_t H, int64_t W, int64_t kh,
                             int64_t kw, int64_t Ho, int64_t Wo, int64_t s,
                             int64_t p, std::vector<float>& scratch) {
  int64_t Hp = H + 2 * p, Wp = W + 2 * p;
  int64_t S = Ho * Wo, NS = N * S;
  scratch.resize(size_t(C * Hp * Wp));
  for (int64_t n = 0; n < N; ++n) {
    std::fill(scratch.begin(), scratch.end(), 0.0f);
    for (int64_t c = 0; c < C; ++c) {
      float* xc = scratch.data() + c * Hp * Wp;
      for (int64_t ky = 0; ky < kh; ++ky)
        for (int64_t kx = 0; kx < kw; ++kx) {
          const float* src = dcols + (((c * kh + ky) * kw + kx) * NS) + n * S;
          for (int64_t oy = 0; oy < Ho; ++oy) {
            float* dst = xc + (oy * s + ky) * Wp + kx;
            if (s == 1) {
              const float* sr = src + oy * Wo;
              for (int64_t ox = 0; ox < Wo; ++ox) dst[ox] += sr[ox];
            } else {
              for (int64_t ox = 0; ox < Wo; ++ox) dst[ox * s] += src[oy * Wo + ox];
            }
          }
        }
    }
    float* out = dx + n * C * H * W;
    for (int64_t c = 0; c < C; ++c)
      for (int64_t y = 0; y < H; ++y) {
        const float* src = scratch.data() + (c * Hp + y + p) * Wp + p;
        float* dst = out + (c * H + y) * W;
        for (int64_t xw = 0; xw < W; ++xw) dst[xw] += src[xw];
      }
  }
}

}  // namespace detail

/// 2-D cross-correlation. x: [N,C,H,W], w: [F,C,kh,kw], bias: [F] or an
/// undefined tensor. Output spatial size floor((H+2p-k)/s)+1.
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias,
                     int stride, int pad) {
  if (x.rank() != 4 || w.rank() != 4)
    throw ShapeError("conv2d expects rank-4 input and kernel, got " +
                     shape_str(x.shape()) + " and " + shape_str(w.shape()));
  if (stride < 1) throw ConfigError("conv2d: stride must be >= 1");
  if (pad < 0) throw ConfigError("conv2d: pad must be >= 0");
  int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  int64_t F = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(1) != C)
    throw ShapeError("conv2d: kernel channels " + std::to_string(w.dim(1)) +
                     " != input channels " + std::to_string(C));
  if (kh > H + 2 * pad || kw > W + 2 * pad)
    throw ShapeError("conv2d: kernel exceeds padded input size");
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != F))
    throw ShapeError("conv2d: bias must be [F]");
  int64_t Ho = (H + 2 * pad - kh) / stride + 1;
  int64_t Wo = (W + 2 * pad - kw) / stride + 1;
  int64_t CKK = C * kh * kw;
  int64_t S = Ho * Wo, NS = N * S;

  Tensor out = Tensor::zeros({N, F, Ho, Wo});
  {
    std::vector<float> cols(size_t(CKK * NS));
    std::vector<float> scratch;
    detail::im2col_batch(x.value().data(), cols.data(), N, C, H, W, kh, kw, Ho,
                         Wo, stride, pad, scratch);
    std::vector<float> prod(size_t(F * NS), 0.0f);
    detail::gemm_nn_acc(w.value().data(), cols.data(), prod.data(), F, CKK, NS);
    const float* bv = bias.defined() ? bias.value().data() : nullptr;
    float* ov = out.value().data();
    for (int64_t n = 0; n < N; ++n)
      for (int64_t f = 0; f < F; ++f) {
        const float* src = prod.data() + f * NS + n * S;
        float* dst = ov + (n * F + f) * S;
        float bf = bv ? bv[f] : 0.0f;
        for (int64_t i = 0; i < S; ++i) dst[i] = src[i] + bf;
      }
  }

  bool any_grad = x.requires_grad() || w.requires_grad() ||
                  (bias.defined() && bias.requires_grad());
  if (auto* tape = detail::prep_record(out, any_grad)) {
    auto xd = x.impl(), wd = w.impl(), od = out.impl();
    auto bd = bias.defined() ? bias.impl() : detail::DataPtr{};
    int64_t s = stride, p = pad;
    tape->record([xd, wd, bd, od, N, C, H, W, F, kh, kw, Ho, Wo, CKK, S, NS, s, p] {
      if (!od->has_grad()) return;
      bool need_dx = xd->requires_grad;
      bool need_dw = wd->requires_grad;
      bool need_db = bd && bd->requires_grad;
      if (need_dx) xd->ensure_grad();
      if (need_dw) wd->ensure_grad();
      if (need_db) bd->ensure_grad();
      // Gather output grads into the [F, N*S] layout used by the GEMMs.
      std::vector<float> gy(size_t(F * NS));
      {
        const float* g = od->grad.data();
        for (int64_t n = 0; n < N; ++n)
          for (int64_t f = 0; f < F; ++f)
            std::copy(g + (n * F + f) * S, g + (n * F + f) * S + S,
                      gy.data() + f * NS + n * S);
      }
      if (need_db) {
        float* db = bd->grad.data();
        for (int64_t f = 0; f < F; ++f) {
          double acc = 0.0;
          const float* row = gy.data() + f * NS;
          for (int64_t i = 0; i < NS; ++i) acc += double(row[i]);
          db[f] += float(acc);
        }
      }
      std::vector<float> scratch;
      if (need_dw) {
        std::vector<float> cols(size_t(CKK * NS));
        detail::im2col_batch(xd->value.data(), cols.data(), N, C, H, W, kh, kw,
                             Ho, Wo, s, p, scratch);
        detail::gemm_nt_acc(gy.data(), cols.data(), wd->grad.data(), F, NS, CKK);
      }
      if (need_dx) {
        std::vector<float> dcols(size_t(CKK * NS), 0.0f);
        detail::gemm_tn_acc(wd->value.data(), gy.data(), dcols.data(), F, CKK, NS);
        detail::col2im_batch_acc(dcols.data(), xd->grad.data(), N, C, H, W, kh,
                                 kw, Ho, Wo, s, p, scratch);
      }
    });
  }
  return out;
}

/// Average pooling without padding; window must fit inside the input.
inline Tensor avg_pool2d(const Tensor& x, int window, int stride) {
  if (x.rank() != 4)
    throw ShapeError("avg_pool2d expects rank-4 input, got " + shape_str(x.shape()));
  if (window < 1 || stride < 1)
    throw ConfigError("avg_pool2d: window and stride must be >= 1");
  int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (window > H || window > W)
    throw ConfigError("avg_pool2d: window " + std::to_string(window) +
                      " exceeds input " + shape_str(x.shape()));
  int64_t Ho = (H - window) / stride + 1;
  int64_t Wo = (W - window) / stride + 1;
  Tensor out = Tensor::zeros({N, C, Ho, Wo});
  const float* xv = x.value().data();
  float* ov = out.value().data();
  float inv = 1.0f / float(window * window);
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const float* xc = xv + nc * H * W;
    float* oc = ov + nc * Ho * Wo;
    for (int64_t oy = 0; oy < Ho; ++oy)
      for (int64_t ox = 0; ox < Wo; ++ox) {
        float acc = 0.0f;
        for (int64_t ky = 0; ky < window; ++ky)
          for (int64_t kx = 0; kx < window; ++kx)
            acc += xc[(oy * stride + ky) * W + ox * stride + kx];
        oc[oy * Wo + ox] = acc * inv;
      }
  }
  if (auto* tape = detail::prep_record(out, x.requires_grad())) {
    auto xd = x.impl(), od = out.impl();
    int64_t win = window, s = stride;
    tape->record([xd, od, N, C, H, W, Ho, Wo, win, s] {
      if (!od->has_grad()) return;
      xd->ensure_grad();
      const float* g = od->grad.data();
      float* dx = xd->grad.data();
      float inv2 = 1.0f / float(win * win);
      for (int64_t nc = 0; nc < N * C; ++nc) {
        const float* gc = g + nc * Ho * Wo;
        float* dxc = dx + nc * H * W;
        for (int64_t oy = 0; oy < Ho; ++oy)
          for (int64_t ox = 0; ox < Wo; ++ox) {
            float gv = gc[oy * Wo + ox] * inv2;
            for (int64_t ky = 0; ky < win; ++ky)
              for (int64_t kx = 0; kx < win; ++kx)
                dxc[(oy * s + ky) * W + ox * s + kx] += gv;
          }
      }
    });
  }
  return out;
}

/// [N,C,H,W] -> [N,C] spatial mean.
inline Tensor global_avg_pool(const Tensor& x) {
  if (x.rank() != 4)
    throw ShapeError("global_avg_pool expects rank-4 input, got " +
                     shape_str(x.shape()));
  int64_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  Tensor out = Tensor::zeros({N, C});
  const float* xv = x.value().data();
  float* ov = out.value().data();
  for (int64_t nc = 0; nc < N * C; ++nc) {
    double acc = 0.0;
    const float* p = xv + nc * HW;
    for (int64_t i = 0; i < HW; ++i) acc += double(p[i]);
    ov[nc] = float(acc / double(HW));
  }
  if (auto* tape = detail::prep_record(out, x.requires_grad())) {
    auto xd = x.impl(), od = out.impl();
    tape->record([xd, od, N, C, HW] {
      if (!od->has_grad()) return;
      xd->ensure_grad();
      const float* g = od->grad.data();
      float* dx = xd->grad.data();
      float inv = 1.0f / float(HW);
      for (int64_t nc = 0; nc < N * C; ++nc) {
        float gv = g[nc] * inv;
        float* p = dx + nc * HW;
        for (int64_t i = 0; i < HW; ++i) p[i] += gv;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Affine layer and classification loss
// ---------------------------------------------------------------------------

/// x[N,in] * w[in,out] + b[out]; pass an undefined bias to skip it.
inline Tensor dense(const Tensor& x, const Tensor& w, const Tensor& b) {
  Tensor y = matmul(x, w);
  return b.defined() ? add(y, b) : y;
}

/// Mean softmax cross-entropy over rows; labels are class indices.
inline Tensor softmax_cross_entropy(const Tensor& logits,
                                    const std::vector<int64_t>& labels) {
  if (logits.rank() != 2)
    throw ShapeError("softmax_cross_entropy expects [N,K] logits, got " +
                     shape_str(logits.shape()));
  int64_t N = logits.dim(0), K = logits.dim(1);
  if (int64_t(labels.size()) != N)
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                     " labels for " + std::to_string(N) + " rows");
  for (int64_t y : labels)
    if (y < 0 || y >= K) throw ShapeError("softmax_cross_entropy: label out of range");
  const float* lv = logits.value().data();
  double total = 0.0;
  for (int64_t i = 0; i < N; ++i) {
    const float* row = lv + i * K;
    double mx = double(row[0]);
    for (int64_t j = 1; j < K; ++j) mx = std::max(mx, double(row[j]));
    double se = 0.0;
    for (int64_t j = 0; j < K; ++j) se += std::exp(double(row[j]) - mx);
    double lse = mx + std::log(se);
    total += lse - double(row[labels[size_t(i)]]);
  }
  total /= double(N);
  Tensor out = Tensor::scalar(float(total));
  out.impl()->precise = total;
  out.impl()->has_precise = true;
  if (auto* tape = detail::prep_record(out, logits.requires_grad())) {
    auto ld = logits.impl(), od = out.impl();
    auto labs = labels;
    tape->record([ld, od, labs, N, K] {
      if (!od->has_grad()) return;
      ld->ensure_grad();
      float g = od->grad[0] / float(N);
      const float* lv2 = ld->value.data();
      float* dl = ld->grad.data();
      for (int64_t i = 0; i < N; ++i) {
        const float* row = lv2 + i * K;
        double mx = double(row[0]);
        for (int64_t j = 1; j < K; ++j) mx = std::max(mx, double(row[j]));
        double se = 0.0;
        for (int64_t j = 0; j < K; ++j) se += std::exp(double(row[j]) - mx);
        for (int64_t j = 0; j < K; ++j) {
          double pj = std::exp(double(row[j]) - mx) / se;
          dl[i * K + j] += g * float(pj - (labs[size_t(i)] == j ? 1.0 : 0.0));
        }
      }
    });
  }
  return out;
}

}  // namespace nsa
