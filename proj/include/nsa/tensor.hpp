#pragma once

#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "nsa/common.hpp"

namespace nsa {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

namespace detail {

struct TensorData {
  Shape shape;
  std::vector<float> value;
  std::vector<float> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
  // Scalar reductions also keep a float64 copy of their result so that
  // finite-difference oracles see the full 64-bit accumulator.
  double precise = 0.0;
  bool has_precise = false;

  bool has_grad() const { return !grad.empty(); }
  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0f);
  }
};

}  // namespace detail

/// Dense row-major f32 tensor. Copies are shallow (shared storage); the value
/// buffer is treated as immutable once the tensor has entered a recorded op.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape) {
    return Tensor(std::move(shape), 0.0f);
  }

  static Tensor full(Shape shape, float v) { return Tensor(std::move(shape), v); }

  static Tensor scalar(float v) {
    Tensor t({1}, v);
    t.d_->precise = double(v);
    t.d_->has_precise = true;
    return t;
  }

  static Tensor from_data(Shape shape, std::vector<float> data) {
    if (int64_t(data.size()) != shape_numel(shape))
      throw ShapeError("from_data: " + std::to_string(data.size()) +
                       " values for shape " + shape_str(shape));
    Tensor t;
    t.d_ = std::make_shared<detail::TensorData>();
    t.d_->shape = std::move(shape);
    t.d_->value = std::move(data);
    return t;
  }

  static Tensor randn(Shape shape, Rng& rng, float stddev = 1.0f) {
    Tensor t(std::move(shape), 0.0f);
    for (float& v : t.d_->value) v = stddev * float(rng.normal());
    return t;
  }

  static Tensor uniform(Shape shape, Rng& rng, float lo, float hi) {
    Tensor t(std::move(shape), 0.0f);
    for (float& v : t.d_->value) v = rng.uniform(lo, hi);
    return t;
  }

  bool defined() const { return d_ != nullptr; }
  const Shape& shape() const { return d_->shape; }
  int rank() const { return int(d_->shape.size()); }
  int64_t dim(int i) const { return d_->shape[size_t(i)]; }
  int64_t size() const { return int64_t(d_->value.size()); }

  std::span<const float> value() const { return d_->value; }
  std::span<float> value() { return d_->value; }
  std::span<const float> grad() const {
    return d_->grad;  // empty span when no gradient ever reached this tensor
  }
  bool has_grad() const { return d_ && d_->has_grad(); }
  void zero_grad() {
    if (d_ && !d_->grad.empty()) std::fill(d_->grad.begin(), d_->grad.end(), 0.0f);
  }
  void drop_grad() {
    if (d_) d_->grad.clear();
  }

  bool requires_grad() const { return d_ && d_->requires_grad; }
  Tensor& set_requires_grad(bool rg) {
    d_->requires_grad = rg;
    return *this;
  }

  /// Scalar value; reductions report their 64-bit accumulator.
  double item() const {
    if (size() != 1) throw ShapeError("item() on non-scalar " + shape_str(shape()));
    return d_->has_precise ? d_->precise : double(d_->value[0]);
  }

  /// Deep copy of the value buffer (gradient state is not copied).
  Tensor clone() const {
    Tensor t;
    t.d_ = std::make_shared<detail::TensorData>();
    t.d_->shape = d_->shape;
    t.d_->value = d_->value;
    t.d_->precise = d_->precise;
    t.d_->has_precise = d_->has_precise;
    return t;
  }

  const std::shared_ptr<detail::TensorData>& impl() const { return d_; }

 private:
  Tensor(Shape shape, float fill) {
    d_ = std::make_shared<detail::TensorData>();
    int64_t n = shape_numel(shape);
    d_->shape = std::move(shape);
    d_->value.assign(size_t(n), fill);
  }

  std::shared_ptr<detail::TensorData> d_;
};

/// Record-replay gradient tape. One tape per training step; ops record onto
/// the innermost active tape, and backward() replays records in reverse
/// append order. Destroying the tape frees the recorded graph.
class GradTape {
 public:
  GradTape() : prev_(active_) { active_ = this; }
  ~GradTape() { active_ = prev_; }
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  static GradTape* active() { return active_; }

  void record(std::function<void()> backward_step) {
    records_.push_back(std::move(backward_step));
  }

  size_t size() const { return records_.size(); }

  /// Seeds the scalar loss with gradient 1 and replays the tape.
  void backward(const Tensor& loss) {
    if (loss.size() != 1)
      throw ShapeError("backward() expects a scalar loss, got " +
                       shape_str(loss.shape()));
    if (ran_) throw Error("backward() already ran on this tape");
    ran_ = true;
    loss.impl()->ensure_grad();
    loss.impl()->grad[0] = 1.0f;
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) (*it)();
  }

 private:
  friend class TapePause;
  std::vector<std::function<void()>> records_;
  GradTape* prev_;
  bool ran_ = false;
  inline static thread_local GradTape* active_ = nullptr;
};

/// Temporarily disables recording (eval-mode forwards inside a training step).
class TapePause {
 public:
  TapePause() : saved_(GradTape::active_) { GradTape::active_ = nullptr; }
  ~TapePause() { GradTape::active_ = saved_; }
  TapePause(const TapePause&) = delete;
  TapePause& operator=(const TapePause&) = delete;

 private:
  GradTape* saved_;
};

}  // namespace nsa
