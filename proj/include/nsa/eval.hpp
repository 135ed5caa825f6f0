#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "nsa/dataset.hpp"
#include "nsa/scoring.hpp"
#include "nsa/ssl.hpp"

namespace nsa {

// ---------------------------------------------------------------------------
// One-vs-all splits with pollution
// ---------------------------------------------------------------------------

/// One-class split: the training set is drawn from the inlier class, with
/// round(p * |train|) rows replaced by other-class samples that are treated
/// as inliers during training (pollution). Test rows carry outlier labels.
struct EvalSplit {
  int inlier_class = 0;
  double pollution = 0.0;
  uint64_t seed = 0;
  int64_t n_polluted = 0;
  std::vector<int64_t> train_indices;
  std::vector<int64_t> test_indices;
  std::vector<uint8_t> test_outlier;  // parallel to test_indices
};

struct SplitParams {
  int64_t train_size = 128;     // inlier training rows (pollution replaces)
  int64_t test_inliers = 64;
  int64_t test_outliers = 64;
};

inline EvalSplit make_split(const ImageDataset& ds, int inlier_class, double p,
                            uint64_t seed, const SplitParams& params = {}) {
  ds.validate();
  if (ds.num_classes < 2)
    throw ConfigError("make_split requires a dataset with >= 2 classes");
  if (inlier_class < 0 || inlier_class >= ds.num_classes)
    throw ConfigError("make_split: inlier class out of range");
  if (p < 0.0 || p > 0.5)
    throw ConfigError("make_split: pollution ratio must be in [0, 0.5]");

  // Per-class pools, each split into a train-side half (training + pollution
  // source) and a test-side half, so test outliers never appear in training.
  std::vector<std::vector<int64_t>> pool(size_t(ds.num_classes));
  for (int64_t i = 0; i < ds.count; ++i)
    pool[size_t(ds.labels[size_t(i)])].push_back(i);
  for (int c = 0; c < ds.num_classes; ++c) {
    Rng rng(Rng::mix(seed, 0x517A, uint64_t(c)));
    rng.shuffle(pool[size_t(c)]);
  }

  const auto& inl = pool[size_t(inlier_class)];
  int64_t train_side = int64_t(inl.size()) * 7 / 10;
  int64_t t = std::min(params.train_size, train_side);
  if (t < 1) throw ConfigError("make_split: empty training pool");
  int64_t n_test_in = std::min(params.test_inliers, int64_t(inl.size()) - train_side);
  if (n_test_in < 1) throw ConfigError("make_split: empty inlier test pool");

  EvalSplit split;
  split.inlier_class = inlier_class;
  split.pollution = p;
  split.seed = seed;
  split.train_indices.assign(inl.begin(), inl.begin() + t);
  for (int64_t i = 0; i < n_test_in; ++i) {
    split.test_indices.push_back(inl[size_t(train_side + i)]);
    split.test_outlier.push_back(0);
  }

  // Outlier pools: interleave other classes deterministically.
  std::vector<int64_t> out_train_side, out_test_side;
  for (int c = 0; c < ds.num_classes; ++c) {
    if (c == inlier_class) continue;
    const auto& po = pool[size_t(c)];
    int64_t half = int64_t(po.size()) * 7 / 10;
    for (int64_t i = 0; i < half; ++i) out_train_side.push_back(po[size_t(i)]);
    for (int64_t i = half; i < int64_t(po.size()); ++i)
      out_test_side.push_back(po[size_t(i)]);
  }
  Rng rng(Rng::mix(seed, 0x517B, uint64_t(inlier_class)));
  rng.shuffle(out_train_side);
  rng.shuffle(out_test_side);

  split.n_polluted = int64_t(std::llround(p * double(t)));
  if (split.n_polluted > int64_t(out_train_side.size()))
    throw ConfigError("make_split: not enough outlier samples for pollution");
  if (split.n_polluted > 0) {
    std::vector<int64_t> slots(size_t(t), 0);
    std::iota(slots.begin(), slots.end(), 0);
    rng.shuffle(slots);
    for (int64_t i = 0; i < split.n_polluted; ++i)
      split.train_indices[size_t(slots[size_t(i)])] = out_train_side[size_t(i)];
  }

  int64_t n_test_out = std::min(params.test_outliers, int64_t(out_test_side.size()));
  if (n_test_out < 1) throw ConfigError("make_split: empty outlier test pool");
  for (int64_t i = 0; i < n_test_out; ++i) {
    split.test_indices.push_back(out_test_side[size_t(i)]);
    split.test_outlier.push_back(1);
  }
  return split;
}

/// Materializes dataset rows selected by indices into a standalone dataset.
inline ImageDataset subset_dataset(const ImageDataset& ds,
                                   std::span<const int64_t> indices,
                                   const std::string& name) {
  ImageDataset out;
  out.name = name;
  out.channels = ds.channels;
  out.height = ds.height;
  out.width = ds.width;
  out.num_classes = ds.num_classes;
  out.count = int64_t(indices.size());
  out.pixels.resize(size_t(out.count * out.image_size()));
  out.labels.resize(size_t(out.count));
  for (int64_t i = 0; i < out.count; ++i) {
    auto src = ds.image(indices[size_t(i)]);
    std::copy(src.begin(), src.end(), out.pixels.begin() + i * out.image_size());
    out.labels[size_t(i)] = ds.labels[size_t(indices[size_t(i)])];
  }
  return out;
}

// ---------------------------------------------------------------------------
// AUROC (rank-based, mid-rank ties)
// ---------------------------------------------------------------------------

struct AurocResult {
  double auroc = 0.0;
  int64_t n_pos = 0;  // outliers
  int64_t n_neg = 0;  // inliers
};

/// Mann-Whitney AUROC with mid-rank tie handling; higher score = outlier.
inline AurocResult auroc(std::span<const double> scores,
                         std::span<const uint8_t> labels) {
  if (scores.size() != labels.size())
    throw ShapeError("auroc: score/label count mismatch");
  int64_t n = int64_t(scores.size());
  AurocResult r;
  for (uint8_t l : labels) (l ? r.n_pos : r.n_neg)++;
  if (r.n_pos == 0 || r.n_neg == 0)
    throw UndefinedMetricError("auroc needs both classes present, got " +
                               std::to_string(r.n_pos) + " outliers / " +
                               std::to_string(r.n_neg) + " inliers");
  std::vector<int64_t> order(size_t(n), 0);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
    return scores[size_t(a)] < scores[size_t(b)];
  });
  double rank_sum_pos = 0.0;
  int64_t i = 0;
  while (i < n) {
    int64_t j = i;
    while (j < n && scores[size_t(order[size_t(j)])] == scores[size_t(order[size_t(i)])]) ++j;
    double mid_rank = 0.5 * double(i + 1 + j);  // average of ranks i+1 .. j
    for (int64_t k = i; k < j; ++k)
      if (labels[size_t(order[size_t(k)])]) rank_sum_pos += mid_rank;
    i = j;
  }
  double u = rank_sum_pos - double(r.n_pos) * double(r.n_pos + 1) / 2.0;
  r.auroc = u / (double(r.n_pos) * double(r.n_neg));
  return r;
}

// ---------------------------------------------------------------------------
// Representation quality probes
// ---------------------------------------------------------------------------

struct ProbeResult {
  double accuracy = 0.0;
  bool converged = false;
  int iterations = 0;
};

/// Multinomial logistic regression on frozen embeddings, full-batch Adam
/// until the loss plateaus. Non-convergence degrades to a warning flag.
inline ProbeResult linear_probe(const EmbeddingSet& train,
                                const EmbeddingSet& test, int max_iters = 400,
                                double tol = 1e-6) {
  train.validate();
  test.validate();
  if (train.class_ids.empty() || test.class_ids.empty())
    throw ConfigError("linear_probe requires class ids on both sets");
  int32_t num_classes = 0;
  for (int32_t c : train.class_ids) num_classes = std::max(num_classes, c + 1);
  if (num_classes < 2) throw ConfigError("linear_probe requires >= 2 classes");

  Tensor x = Tensor::from_data({train.n, train.d},
                               std::vector<float>(train.data.begin(), train.data.end()));
  std::vector<int64_t> labels(train.class_ids.begin(), train.class_ids.end());
  Tensor w = Tensor::zeros({train.d, num_classes}).set_requires_grad(true);
  Tensor b = Tensor::zeros({num_classes}).set_requires_grad(true);
  std::vector<Tensor> params{w, b};
  Adam adam(0.05f);
  ProbeResult result;
  double prev = std::numeric_limits<double>::infinity();
  for (int it = 0; it < max_iters; ++it) {
    zero_grads(params);
    double loss_val;
    {
      GradTape tape;
      Tensor loss = softmax_cross_entropy(dense(x, w, b), labels);
      loss_val = loss.item();
      tape.backward(loss);
    }
    adam.step(params);
    result.iterations = it + 1;
    if (std::fabs(prev - loss_val) < tol) {
      result.converged = true;
      break;
    }
    prev = loss_val;
  }

  int64_t correct = 0;
  std::vector<double> logits(size_t(num_classes), 0.0);
  for (int64_t i = 0; i < test.n; ++i) {
    auto row = test.row(i);
    for (int32_t k = 0; k < num_classes; ++k) {
      double acc = double(b.value()[size_t(k)]);
      for (int64_t j = 0; j < test.d; ++j)
        acc += double(row[size_t(j)]) * double(w.value()[size_t(j * num_classes + k)]);
      logits[size_t(k)] = acc;
    }
    int32_t pred = int32_t(std::max_element(logits.begin(), logits.end()) -
                           logits.begin());
    if (pred == test.class_ids[size_t(i)]) ++correct;
  }
  result.accuracy = double(correct) / double(test.n);
  return result;
}

struct KnnResult {
  double accuracy = 0.0;
  bool clipped = false;  // k exceeded the training set size
};

/// Weighted kNN classifier: cosine neighbors weighted by exp(cos / tau),
/// class votes summed over the k nearest training rows.
inline KnnResult weighted_knn(const EmbeddingSet& train, const EmbeddingSet& test,
                              int k, double tau = 0.07) {
  train.validate();
  test.validate();
  if (train.class_ids.empty() || test.class_ids.empty())
    throw ConfigError("weighted_knn requires class ids on both sets");
  if (k < 1) throw ConfigError("weighted_knn: k must be >= 1");
  if (tau <= 0.0) throw ConfigError("weighted_knn: tau must be > 0");
  KnnResult result;
  if (int64_t(k) > train.n) {
    k = int(train.n);
    result.clipped = true;
  }
  int32_t num_classes = 0;
  for (int32_t c : train.class_ids) num_classes = std::max(num_classes, c + 1);

  std::vector<std::vector<double>> tr(size_t(train.n)), qr(size_t(test.n));
  std::vector<double> tn(size_t(train.n)), qn(size_t(test.n));
  for (int64_t i = 0; i < train.n; ++i) {
    tr[size_t(i)].assign(train.row(i).begin(), train.row(i).end());
    tn[size_t(i)] = detail::norm(tr[size_t(i)]);
  }
  for (int64_t i = 0; i < test.n; ++i) {
    qr[size_t(i)].assign(test.row(i).begin(), test.row(i).end());
    qn[size_t(i)] = detail::norm(qr[size_t(i)]);
  }

  int64_t correct = 0;
  std::vector<std::pair<double, int64_t>> sims(size_t(train.n));
  std::vector<double> votes(size_t(num_classes), 0.0);
  for (int64_t i = 0; i < test.n; ++i) {
    for (int64_t m = 0; m < train.n; ++m)
      sims[size_t(m)] = {detail::cosine(qr[size_t(i)], tr[size_t(m)], qn[size_t(i)], tn[size_t(m)]), m};
    std::partial_sort(sims.begin(), sims.begin() + k, sims.end(),
                      [](const auto& a, const auto& b) {
                        return a.first > b.first ||
                               (a.first == b.first && a.second < b.second);
                      });
    std::fill(votes.begin(), votes.end(), 0.0);
    for (int j = 0; j < k; ++j)
      votes[size_t(train.class_ids[size_t(sims[size_t(j)].second)])] +=
          std::exp(sims[size_t(j)].first / tau);
    int32_t pred = int32_t(std::max_element(votes.begin(), votes.end()) -
                           votes.begin());
    if (pred == test.class_ids[size_t(i)]) ++correct;
  }
  result.accuracy = double(correct) / double(test.n);
  return result;
}

// ---------------------------------------------------------------------------
// Embedding extraction
// ---------------------------------------------------------------------------

/// 2-D conv maps larger than this are average-pooled before flattening.
inline constexpr int64_t kMaxFlattenedDim = 2048;

/// Eval-mode forward over a dataset, returning one embedding set per feature
/// map. Flattened conv maps respect the dimensionality cap.
inline std::map<FeatureMap, EmbeddingSet> embed_dataset(
    const SslModel& model, const ImageDataset& ds,
    std::span<const uint8_t> outlier_flags = {}, int batch_size = 128) {
  ds.validate();
  if (!outlier_flags.empty() && int64_t(outlier_flags.size()) != ds.count)
    throw ShapeError("embed_dataset: outlier flag count mismatch");
  std::map<FeatureMap, EmbeddingSet> out;
  std::string ckpt = model.param_hash();
  int64_t plane = ds.image_size();
  for (int64_t start = 0; start < ds.count; start += batch_size) {
    int64_t n = std::min<int64_t>(batch_size, ds.count - start);
    Tensor batch = Tensor::zeros({n, ds.channels, ds.height, ds.width});
    for (int64_t i = 0; i < n; ++i)
      detail::u8_to_float(ds.image(start + i), batch.value().data() + i * plane);
    SslModel::Trace trace = model.forward_trace(batch, SslModel::Mode::Eval, true);
    for (auto& [map_id, act] : trace.features) {
      Tensor flat;
      if (is_2d_map(map_id)) {
        Tensor t = act;
        while (t.size() / n > kMaxFlattenedDim && t.dim(2) >= 2 && t.dim(3) >= 2)
          t = avg_pool2d(t, 2, 2);
        flat = flatten_rows(t);
      } else {
        flat = act;
      }
      EmbeddingSet& e = out[map_id];
      if (start == 0) {
        e.d = flat.dim(1);
        e.feature_map = feature_map_name(map_id);
        e.checkpoint = ckpt;
      }
      e.data.insert(e.data.end(), flat.value().begin(), flat.value().end());
      e.n += n;
    }
  }
  for (auto& [map_id, e] : out) {
    e.class_ids.assign(ds.labels.begin(), ds.labels.end());
    if (!outlier_flags.empty())
      e.outlier.assign(outlier_flags.begin(), outlier_flags.end());
    e.validate();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Experiment protocol
// ---------------------------------------------------------------------------

struct ExperimentConfig {
  // dataset
  SynthKind kind = SynthKind::Blobs;
  int classes = 4;
  int n_per_class = 256;
  int image_size = 16;
  uint64_t dataset_seed = 7;
  // split
  double pollution = 0.1;
  SplitParams split;
  // training (seed field is overridden per run)
  TrainConfig train;
  // scoring
  std::vector<Metric> metrics{Metric::KCosMah};
  std::vector<FeatureMap> maps{FeatureMap::EncoderOutput};
  double lambda = 0.01;
  bool with_ensemble = false;
  // protocol
  std::vector<int> class_list{0, 1, 2, 3};
  std::vector<uint64_t> seeds{0, 1, 2, 3, 4};
  bool probe = true;
  int64_t probe_per_class = 32;
  // during-training AUROC tracking (0 = off)
  int eval_every = 0;
  Metric curve_metric = Metric::KCos;
};

struct RunRecord {
  int class_id = 0;
  uint64_t seed = 0;
  Method method = Method::SimSiam;
  bool norm_f = false, norm_g = false;
  double p = 0.0;
  std::string metric;
  double auroc = 0.0;
  double kappa_id = 0.0;
  double kappa_ood = 0.0;
  double mmd_id = 0.0;
  double probe_acc = 0.0;
};

struct CurvePoint {
  int class_id = 0;
  uint64_t seed = 0;
  int epoch = 0;
  double auroc = 0.0;
  double collapse_std = 0.0;
};

struct ExperimentResult {
  std::vector<RunRecord> records;
  std::vector<CurvePoint> curves;
};

namespace detail {

inline ScoreReport score_by_metric(Metric metric, const EmbeddingSet& train,
                                   const EmbeddingSet& query, double lambda) {
  switch (metric) {
    case Metric::KCos: return score_kcos(train, query);
    case Metric::CCos: return score_ccos(train, query);
    case Metric::Gde: return score_gde(train, query);
    case Metric::KCosMah: {
      MahalanobisTransform t = fit_mahalanobis(train, lambda);
      return score_kcos(train, query, &t);
    }
    case Metric::CCosMah: {
      MahalanobisTransform t = fit_mahalanobis(train, lambda);
      return score_ccos(train, query, &t);
    }
    case Metric::Ens:
      throw ConfigError("ens metric is computed via ens_preset");
  }
  throw ConfigError("unhandled metric");
}

}  // namespace detail

/// Number of worker threads for independent per-(class, seed) runs: the
/// hardware concurrency capped by the NSA_THREADS environment variable.
inline int eval_threads() {
  int hw = int(std::thread::hardware_concurrency());
  if (hw < 1) hw = 1;
  if (const char* env = std::getenv("NSA_THREADS")) {
    int cap = std::atoi(env);
    if (cap >= 1) hw = std::min(hw, cap);
  }
  return hw;
}

namespace detail {

struct RunOutput {
  std::vector<RunRecord> records;
  std::vector<CurvePoint> curves;
};

}  // namespace detail

/// Trains one model per (class, seed), scores the held-out test split with
/// every configured metric, and attaches vMF / MMD diagnostics and the linear
/// probe accuracy. Runs are independent and may execute on parallel workers;
/// the aggregation order is fixed by the (class, seed) grid, so results are
/// deterministic for a given config regardless of thread count.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg) {
  ImageDataset ds = synth_dataset(cfg.kind, cfg.classes, cfg.n_per_class,
                                  cfg.image_size, cfg.dataset_seed);

  // Probe split: a class-balanced sample, halves for fit and accuracy.
  std::vector<int64_t> probe_train_idx, probe_test_idx;
  if (cfg.probe) {
    std::vector<std::vector<int64_t>> pools(size_t(ds.num_classes));
    for (int64_t i = 0; i < ds.count; ++i)
      pools[size_t(ds.labels[size_t(i)])].push_back(i);
    for (int c = 0; c < ds.num_classes; ++c) {
      int64_t want = std::min<int64_t>(2 * cfg.probe_per_class,
                                       int64_t(pools[size_t(c)].size()));
      for (int64_t i = 0; i < want / 2; ++i)
        probe_train_idx.push_back(pools[size_t(c)][size_t(i)]);
      for (int64_t i = want / 2; i < want; ++i)
        probe_test_idx.push_back(pools[size_t(c)][size_t(i)]);
    }
  }

  std::vector<std::pair<int, uint64_t>> grid;
  for (int class_id : cfg.class_list)
    for (uint64_t seed : cfg.seeds) grid.emplace_back(class_id, seed);
  std::vector<detail::RunOutput> outputs(grid.size());
  std::vector<std::exception_ptr> errors(grid.size());

  auto run_one = [&](size_t slot) {
    auto [class_id, seed] = grid[slot];
    try {
      EvalSplit split = make_split(ds, class_id, cfg.pollution,
                                   Rng::mix(seed, 0xC1A5, uint64_t(class_id)),
                                   cfg.split);
      ImageDataset train_ds = subset_dataset(ds, split.train_indices, "train");
      ImageDataset test_ds = subset_dataset(ds, split.test_indices, "test");

      TrainConfig tc = cfg.train;
      tc.seed = Rng::mix(seed, 0x7241, uint64_t(class_id));

      EpochCallback callback;
      if (cfg.eval_every > 0) {
        callback = [&](int epoch, const SslModel& model, const EpochLogRow& row) {
          if (epoch % cfg.eval_every != 0 && epoch != tc.epochs - 1) return;
          auto train_emb = embed_dataset(model, train_ds);
          auto test_emb = embed_dataset(model, test_ds, split.test_outlier);
          const EmbeddingSet& tr = train_emb.at(FeatureMap::EncoderOutput);
          const EmbeddingSet& te = test_emb.at(FeatureMap::EncoderOutput);
          ScoreReport rep =
              detail::score_by_metric(cfg.curve_metric, tr, te, cfg.lambda);
          CurvePoint pt;
          pt.class_id = class_id;
          pt.seed = seed;
          pt.epoch = epoch;
          pt.auroc = auroc(rep.scores, te.outlier).auroc;
          pt.collapse_std = row.collapse_std;
          outputs[slot].curves.push_back(pt);
        };
      }

      TrainResult trained = train(tc, train_ds, callback);

      auto train_emb = embed_dataset(trained.model, train_ds);
      auto test_emb = embed_dataset(trained.model, test_ds, split.test_outlier);
      const EmbeddingSet& test_enc = test_emb.at(FeatureMap::EncoderOutput);

      // Diagnostics on encoder-output embeddings of the test split.
      EmbeddingSet id_emb, ood_emb;
      id_emb.d = ood_emb.d = test_enc.d;
      for (int64_t i = 0; i < test_enc.n; ++i) {
        auto row = test_enc.row(i);
        auto& dst = test_enc.outlier[size_t(i)] ? ood_emb : id_emb;
        dst.data.insert(dst.data.end(), row.begin(), row.end());
        dst.n++;
      }
      double kappa_id = fit_vmf(id_emb).kappa;
      double kappa_ood = fit_vmf(ood_emb).kappa;
      EmbeddingSet uniform = sample_uniform_sphere(
          id_emb.n, id_emb.d, Rng::mix(cfg.dataset_seed, 0xD1A6));
      double mmd_id = mmd(id_emb, uniform).mmd2;

      double probe_acc = 0.0;
      if (cfg.probe) {
        ImageDataset pr_train = subset_dataset(ds, probe_train_idx, "probe_train");
        ImageDataset pr_test = subset_dataset(ds, probe_test_idx, "probe_test");
        auto pe_train = embed_dataset(trained.model, pr_train);
        auto pe_test = embed_dataset(trained.model, pr_test);
        probe_acc = linear_probe(pe_train.at(FeatureMap::EncoderOutput),
                                 pe_test.at(FeatureMap::EncoderOutput))
                        .accuracy;
      }

      auto push_record = [&](const std::string& metric_label, double auc) {
        RunRecord rec;
        rec.class_id = class_id;
        rec.seed = seed;
        rec.method = cfg.train.method;
        rec.norm_f = cfg.train.norm_f;
        rec.norm_g = cfg.train.norm_g;
        rec.p = cfg.pollution;
        rec.metric = metric_label;
        rec.auroc = auc;
        rec.kappa_id = kappa_id;
        rec.kappa_ood = kappa_ood;
        rec.mmd_id = mmd_id;
        rec.probe_acc = probe_acc;
        outputs[slot].records.push_back(rec);
      };

      for (FeatureMap map_id : cfg.maps) {
        const EmbeddingSet& tr = train_emb.at(map_id);
        const EmbeddingSet& te = test_emb.at(map_id);
        for (Metric metric : cfg.metrics) {
          ScoreReport rep = detail::score_by_metric(metric, tr, te, cfg.lambda);
          std::string label = metric_name(metric);
          if (map_id != FeatureMap::EncoderOutput)
            label += "@" + feature_map_name(map_id);
          push_record(label, auroc(rep.scores, te.outlier).auroc);
        }
      }
      if (cfg.with_ensemble) {
        ScoreReport rep = ens_preset(train_emb, test_emb, cfg.lambda);
        push_record(metric_name(Metric::Ens),
                    auroc(rep.scores, test_enc.outlier).auroc);
      }
    } catch (const std::exception&) {
      errors[slot] = std::current_exception();
    }
  };

  int workers = std::min<int>(eval_threads(), int(grid.size()));
  if (workers <= 1) {
    for (size_t slot = 0; slot < grid.size(); ++slot) run_one(slot);
  } else {
    std::atomic<size_t> next{0};
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (size_t slot = next.fetch_add(1); slot < grid.size();
             slot = next.fetch_add(1))
          run_one(slot);
      });
    }
    for (auto& t : pool) t.join();
  }

  for (size_t slot = 0; slot < grid.size(); ++slot) {
    if (errors[slot]) {
      try {
        std::rethrow_exception(errors[slot]);
      } catch (const std::exception& e) {
        throw Error("experiment run (class " + std::to_string(grid[slot].first) +
                    ", seed " + std::to_string(grid[slot].second) +
                    ") failed: " + e.what());
      }
    }
  }
  ExperimentResult result;
  for (auto& out : outputs) {
    result.records.insert(result.records.end(), out.records.begin(),
                          out.records.end());
    result.curves.insert(result.curves.end(), out.curves.begin(),
                         out.curves.end());
  }
  return result;
}

/// Results CSV: class, seed, method, norm_f, norm_g, p, metric, auroc,
/// kappa_id, kappa_ood, mmd_id, probe_acc.
inline void write_results_csv(const std::string& path,
                              std::span<const RunRecord> records) {
  std::ofstream os(path);
  if (!os) throw Error("cannot open " + path + " for writing");
  os << "class,seed,method,norm_f,norm_g,p,metric,auroc,kappa_id,kappa_ood,"
        "mmd_id,probe_acc\n";
  char buf[512];
  for (const RunRecord& r : records) {
    std::snprintf(buf, sizeof(buf),
                  "%d,%llu,%s,%d,%d,%.9g,%s,%.9g,%.9g,%.9g,%.9g,%.9g\n",
                  r.class_id, static_cast<unsigned long long>(r.seed),
                  method_name(r.method).c_str(), int(r.norm_f), int(r.norm_g),
                  r.p, r.metric.c_str(), r.auroc, r.kappa_id, r.kappa_ood,
                  r.mmd_id, r.probe_acc);
    os << buf;
  }
}

inline void write_curves_csv(const std::string& path,
                             std::span<const CurvePoint> curves) {
  std::ofstream os(path);
  if (!os) throw Error("cannot open " + path + " for writing");
  os << "class,seed,epoch,auroc,collapse_std\n";
  char buf[256];
  for (const CurvePoint& c : curves) {
    std::snprintf(buf, sizeof(buf), "%d,%llu,%d,%.9g,%.9g\n", c.class_id,
                  static_cast<unsigned long long>(c.seed), c.epoch, c.auroc,
                  c.collapse_std);
    os << buf;
  }
}

}  // namespace nsa
