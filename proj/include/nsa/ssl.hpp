#pragma once

#include <cmath>
#include <fstream>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "nsa/augment.hpp"
#include "nsa/dataset.hpp"
#include "nsa/diagnostics.hpp"
#include "nsa/nets.hpp"
#include "nsa/optim.hpp"

namespace nsa {

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Symmetric SimSiam objective:
/// L = 1/2 D(p1, stop_grad(z2^)) + 1/2 D(p2, stop_grad(z1^)),
/// D = negative cosine. The stop-grad can be lifted for collapse experiments.
inline Tensor simsiam_loss(const SslModel::Trace& t1, const SslModel::Trace& t2,
                           bool disable_stop_grad = false) {
  if (!t1.prediction.defined() || !t2.prediction.defined())
    throw ConfigError("simsiam_loss: model has no predictor");
  Tensor tgt2 = disable_stop_grad ? t2.loss_projection : stop_grad(t2.loss_projection);
  Tensor tgt1 = disable_stop_grad ? t1.loss_projection : stop_grad(t1.loss_projection);
  Tensor a = neg_cosine(t1.prediction, tgt2);
  Tensor b = neg_cosine(t2.prediction, tgt1);
  return scale(add(a, b), 0.5f);
}

/// BYOL objective: symmetric negative cosine between online predictions and
/// EMA-target projections. The target branch contributes no gradient.
inline Tensor byol_loss(const SslModel::Trace& online1,
                        const SslModel::Trace& online2,
                        const SslModel::Trace& target1,
                        const SslModel::Trace& target2) {
  if (!online1.prediction.defined() || !online2.prediction.defined())
    throw ConfigError("byol_loss: model has no predictor");
  if (!target1.loss_projection.defined() || !target2.loss_projection.defined())
    throw ConfigError("byol_loss: missing target traces");
  Tensor a = neg_cosine(online1.prediction, stop_grad(target2.loss_projection));
  Tensor b = neg_cosine(online2.prediction, stop_grad(target1.loss_projection));
  return scale(add(a, b), 0.5f);
}

/// NT-Xent. Rows of z are projections of 2N paired views: row i and row i+N
/// are the two views of one image. With shift_labels, entries >= 0 mark a
/// trailing block of shifted (rotated) views that act as negatives only:
/// they appear as keys for every anchor but are never anchors themselves.
/// Rows are L2-normalized internally.
inline Tensor simclr_loss(const Tensor& z, float tau,
                          std::span<const int> shift_labels = {}) {
  if (tau <= 0.0f) throw ConfigError("simclr_loss: temperature must be > 0");
  if (z.rank() != 2)
    throw ShapeError("simclr_loss expects [rows, d], got " + shape_str(z.shape()));
  int64_t rows = z.dim(0);
  int64_t n_extra = 0;
  if (!shift_labels.empty()) {
    if (int64_t(shift_labels.size()) != rows)
      throw ShapeError("simclr_loss: shift_labels size mismatch");
    int64_t first_shift = rows;
    for (int64_t i = 0; i < rows; ++i) {
      if (shift_labels[size_t(i)] >= 0) {
        first_shift = std::min(first_shift, i);
      } else if (first_shift != rows) {
        throw ConfigError("simclr_loss: shifted rows must form a trailing block");
      }
    }
    n_extra = rows - first_shift;
  }
  int64_t two_n = rows - n_extra;
  if (two_n < 4 || two_n % 2 != 0)
    throw ConfigError("simclr_loss needs at least 2 positive pairs (batch >= 4)");
  int64_t half = two_n / 2;

  Tensor zh = l2_normalize(z, 1);
  Tensor anchors = n_extra > 0 ? slice_rows(zh, 0, two_n) : zh;
  Tensor logits = scale(matmul(anchors, transpose(zh)), 1.0f / tau);
  // Self-similarities are masked out additively; the mask carries no grad.
  Tensor mask = Tensor::zeros({two_n, rows});
  for (int64_t i = 0; i < two_n; ++i) mask.value()[i * rows + i] = -1e9f;
  logits = add(logits, mask);
  std::vector<int64_t> labels(size_t(two_n), 0);
  for (int64_t i = 0; i < two_n; ++i)
    labels[size_t(i)] = i < half ? i + half : i - half;
  return softmax_cross_entropy(logits, labels);
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainConfig {
  Method method = Method::SimSiam;
  bool norm_f = true;
  bool norm_g = true;
  int batch_size = 64;
  int epochs = 100;
  float lr = 1e-3f;
  float lr_min = 0.0f;
  uint64_t seed = 0;
  float tau = 0.5f;            // SimCLR temperature
  float ema_momentum = 0.996f; // BYOL target momentum
  AugmentationPolicy augment;
  std::array<int, 4> channels{16, 32, 64, 128};
  int proj_dim = 64;
  int pred_hidden = 32;
  float weight_decay = 0.0f;       // decoupled (AdamW-style)
  bool disable_stop_grad = false;  // collapse experiments only
  int diag_every = 0;  // epochs between kappa/mmd log entries; 0 disables

  void validate() const {
    if (!(lr > 0.0f)) throw ConfigError("train: lr must be > 0");
    if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
    if (batch_size < 2) throw ConfigError("train: batch size must be >= 2");
    if ((method == Method::SimClr || method == Method::SimClrNeg) &&
        batch_size < 4)
      throw ConfigError("train: SimCLR needs batch size >= 4 for negatives");
    if ((method == Method::SimClr || method == Method::SimClrNeg) && tau <= 0.0f)
      throw ConfigError("train: SimCLR temperature must be > 0");
    if (ema_momentum < 0.0f || ema_momentum >= 1.0f)
      throw ConfigError("train: ema momentum must be in [0, 1)");
    if (weight_decay < 0.0f)
      throw ConfigError("train: weight decay must be >= 0");
    augment.validate();
  }

  ModelConfig model_config(int in_channels) const {
    ModelConfig m;
    m.method = method;
    m.norm_f = norm_f;
    m.norm_g = norm_g;
    m.in_channels = in_channels;
    m.channels = channels;
    m.proj_dim = proj_dim;
    m.pred_hidden = pred_hidden;
    m.ema_momentum = ema_momentum;
    return m;
  }
};

struct EpochLogRow {
  int epoch = 0;
  double loss = 0.0;
  double collapse_std = 0.0;
  std::optional<double> kappa_id;
  std::optional<double> mmd_id;
};

inline void write_epoch_log_csv(const std::string& path,
                                const std::vector<EpochLogRow>& rows) {
  std::ofstream os(path);
  if (!os) throw Error("cannot open " + path + " for writing");
  os << "epoch,loss,collapse_std,kappa_id,mmd_id\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%d,%.9g,%.9g", r.epoch, r.loss,
                  r.collapse_std);
    os << buf;
    if (r.kappa_id) {
      std::snprintf(buf, sizeof(buf), ",%.9g", *r.kappa_id);
      os << buf;
    } else {
      os << ",";
    }
    if (r.mmd_id) {
      std::snprintf(buf, sizeof(buf), ",%.9g", *r.mmd_id);
      os << buf;
    } else {
      os << ",";
    }
    os << "\n";
  }
}

struct TrainResult {
  SslModel model;
  std::vector<EpochLogRow> log;
};

/// Called after each epoch with the epoch index, model snapshot and log row.
using EpochCallback =
    std::function<void(int epoch, const SslModel& model, const EpochLogRow& row)>;

namespace detail {

struct ViewBatch {
  Tensor view1, view2;
  Tensor shifted;                // SimCLR(-) only
  std::vector<int> shift_labels; // labels for concat(view1, view2, shifted)
};

/// Deterministic two-view (plus optional shifted negative) batch assembly.
/// Streams are keyed by (seed, step, sample, view) only.
inline ViewBatch make_view_batch(const ImageDataset& ds,
                                 std::span<const int64_t> indices,
                                 const AugmentationPolicy& pol, uint64_t seed,
                                 int64_t step) {
  int c = ds.channels, h = ds.height, w = ds.width;
  int64_t n = int64_t(indices.size());
  bool shifted = pol.rotation_shift;
  ViewBatch out;
  out.view1 = Tensor::zeros({n, c, h, w});
  out.view2 = Tensor::zeros({n, c, h, w});
  if (shifted) out.shifted = Tensor::zeros({n, c, h, w});
  std::vector<float> base(size_t(ds.image_size()));
  std::vector<float> rotated(base.size());
  int64_t plane = ds.image_size();
  for (int64_t i = 0; i < n; ++i) {
    u8_to_float(ds.image(indices[size_t(i)]), base.data());
    {
      Rng rng(Rng::mix(Rng::mix(seed, uint64_t(step)), uint64_t(indices[size_t(i)]), 1));
      augment_image(base.data(), out.view1.value().data() + i * plane, c, h, w,
                    pol, rng);
    }
    {
      Rng rng(Rng::mix(Rng::mix(seed, uint64_t(step)), uint64_t(indices[size_t(i)]), 2));
      augment_image(base.data(), out.view2.value().data() + i * plane, c, h, w,
                    pol, rng);
    }
    if (shifted) {
      Rng rng(Rng::mix(Rng::mix(seed, uint64_t(step)), uint64_t(indices[size_t(i)]), 3));
      int k = draw_rotation_shift(rng);
      rot90_float(base.data(), rotated.data(), c, h, w, k);
      augment_image(rotated.data(), out.shifted.value().data() + i * plane, c, h,
                    w, pol, rng);
      out.shift_labels.push_back(k);
    }
  }
  if (shifted) {
    out.shift_labels.insert(out.shift_labels.begin(), size_t(2 * n), -1);
  }
  return out;
}

}  // namespace detail

/// Self-supervised training loop: Adam with cosine learning-rate decay,
/// two augmented views per image per step, single-threaded and fully
/// deterministic under a fixed config + seed. Pollution, when wanted, is
/// applied to `dataset` upstream.
inline TrainResult train(const TrainConfig& cfg, const ImageDataset& dataset,
                         const EpochCallback& callback = {}) {
  cfg.validate();
  dataset.validate();
  if (dataset.count < cfg.batch_size)
    throw ConfigError("train: dataset smaller than one batch");
  bool rotation = cfg.method == Method::SimClrNeg;
  AugmentationPolicy pol = cfg.augment;
  pol.rotation_shift = rotation;

  SslModel model(cfg.model_config(dataset.channels), cfg.seed);
  std::vector<Tensor> params = model.trainable_parameters();
  Adam adam(cfg.lr, 0.9f, 0.999f, 1e-8f, cfg.weight_decay);

  int64_t steps_per_epoch = dataset.count / cfg.batch_size;
  int64_t total_steps = steps_per_epoch * cfg.epochs;
  std::vector<int64_t> order(size_t(dataset.count));
  for (int64_t i = 0; i < dataset.count; ++i) order[size_t(i)] = i;

  TrainResult result;
  int64_t gstep = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng shuffle_rng(Rng::mix(cfg.seed, 0xE90C4, uint64_t(epoch)));
    shuffle_rng.shuffle(order);
    double loss_sum = 0.0;
    double last_collapse = 0.0;
    Tensor last_encoder_out;
    for (int64_t s = 0; s < steps_per_epoch; ++s, ++gstep) {
      std::span<const int64_t> idx(order.data() + s * cfg.batch_size,
                                   size_t(cfg.batch_size));
      detail::ViewBatch batch =
          detail::make_view_batch(dataset, idx, pol, cfg.seed, gstep);

      zero_grads(params);
      double loss_val;
      {
        GradTape tape;
        SslModel::Trace t1 =
            model.forward_trace(batch.view1, SslModel::Mode::Train, false);
        SslModel::Trace t2 =
            model.forward_trace(batch.view2, SslModel::Mode::Train, false);
        Tensor loss;
        switch (cfg.method) {
          case Method::SimSiam:
            loss = simsiam_loss(t1, t2, cfg.disable_stop_grad);
            break;
          case Method::Byol: {
            SslModel::Trace g1 = model.target_forward(batch.view1);
            SslModel::Trace g2 = model.target_forward(batch.view2);
            loss = byol_loss(t1, t2, g1, g2);
            break;
          }
          case Method::SimClr:
            loss = simclr_loss(
                concat_rows({t1.loss_projection, t2.loss_projection}), cfg.tau);
            break;
          case Method::SimClrNeg: {
            SslModel::Trace t3 =
                model.forward_trace(batch.shifted, SslModel::Mode::Train, false);
            Tensor all = concat_rows(
                {t1.loss_projection, t2.loss_projection, t3.loss_projection});
            loss = simclr_loss(all, cfg.tau, batch.shift_labels);
            break;
          }
        }
        loss_val = loss.item();
        if (!std::isfinite(loss_val))
          throw TrainError("training diverged: non-finite loss", epoch);
        tape.backward(loss);
        last_encoder_out = t1.encoder_output;
      }
      loss_sum += loss_val;
      adam.step(params, cosine_lr(cfg.lr, gstep, total_steps, cfg.lr_min));
      if (cfg.method == Method::Byol) model.ema_update_target();
      last_collapse = collapse_std(last_encoder_out);
    }
    EpochLogRow row;
    row.epoch = epoch;
    row.loss = loss_sum / double(steps_per_epoch);
    row.collapse_std = last_collapse;
    if (cfg.diag_every > 0 && (epoch % cfg.diag_every == 0 || epoch == cfg.epochs - 1)) {
      const Tensor& y = last_encoder_out;
      if (y.dim(0) >= 10) {
        VmfFit fit = fit_vmf(y.value().data(), y.dim(0), y.dim(1));
        row.kappa_id = fit.kappa;
        EmbeddingSet uni =
            sample_uniform_sphere(y.dim(0), y.dim(1), Rng::mix(cfg.seed, 0xD1A6));
        row.mmd_id =
            mmd(y.value().data(), y.dim(0), uni.data.data(), uni.n, y.dim(1)).mmd2;
      }
    }
    result.log.push_back(row);
    if (callback) callback(epoch, model, row);
  }
  result.model = std::move(model);
  return result;
}

}  // namespace nsa
