#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "nsa/eval.hpp"

namespace nsa {

// Declarative run description shared by all CLI subcommands. Each section is
// optional; a subcommand validates that the sections it needs are present.
// The schema round-trips losslessly through JSON.

struct DatasetSpec {
  std::string path;  // load when set; otherwise synthesize below
  SynthKind kind = SynthKind::Blobs;
  int classes = 4;
  int n_per_class = 256;
  int image_size = 16;
  uint64_t seed = 7;

  nlohmann::json to_json() const {
    nlohmann::json j{{"kind", synth_kind_name(kind)},
                     {"classes", classes},
                     {"n_per_class", n_per_class},
                     {"image_size", image_size},
                     {"seed", seed}};
    if (!path.empty()) j["path"] = path;
    return j;
  }
  static DatasetSpec from_json(const nlohmann::json& j) {
    DatasetSpec s;
    s.path = j.value("path", "");
    if (j.contains("kind")) s.kind = parse_synth_kind(j["kind"].get<std::string>());
    s.classes = j.value("classes", s.classes);
    s.n_per_class = j.value("n_per_class", s.n_per_class);
    s.image_size = j.value("image_size", s.image_size);
    s.seed = j.value("seed", s.seed);
    return s;
  }

  ImageDataset realize() const {
    if (!path.empty()) return ImageDataset::load(path);
    return synth_dataset(kind, classes, n_per_class, image_size, seed);
  }
};

struct SplitSpec {
  int inlier_class = 0;
  double pollution = 0.0;
  uint64_t seed = 0;
  SplitParams params;

  nlohmann::json to_json() const {
    return {{"inlier_class", inlier_class},
            {"pollution", pollution},
            {"seed", seed},
            {"train_size", params.train_size},
            {"test_inliers", params.test_inliers},
            {"test_outliers", params.test_outliers}};
  }
  static SplitSpec from_json(const nlohmann::json& j) {
    SplitSpec s;
    s.inlier_class = j.value("inlier_class", s.inlier_class);
    s.pollution = j.value("pollution", s.pollution);
    s.seed = j.value("seed", s.seed);
    s.params.train_size = j.value("train_size", s.params.train_size);
    s.params.test_inliers = j.value("test_inliers", s.params.test_inliers);
    s.params.test_outliers = j.value("test_outliers", s.params.test_outliers);
    return s;
  }
};

inline nlohmann::json augment_to_json(const AugmentationPolicy& p) {
  return {{"crop_scale_min", p.crop_scale_min},
          {"crop_scale_max", p.crop_scale_max},
          {"hflip_prob", p.hflip_prob},
          {"jitter", p.jitter},
          {"grayscale_prob", p.grayscale_prob}};
}

inline AugmentationPolicy augment_from_json(const nlohmann::json& j) {
  AugmentationPolicy p;
  p.crop_scale_min = j.value("crop_scale_min", p.crop_scale_min);
  p.crop_scale_max = j.value("crop_scale_max", p.crop_scale_max);
  p.hflip_prob = j.value("hflip_prob", p.hflip_prob);
  p.jitter = j.value("jitter", p.jitter);
  p.grayscale_prob = j.value("grayscale_prob", p.grayscale_prob);
  return p;
}

inline nlohmann::json train_to_json(const TrainConfig& t) {
  return {{"method", method_name(t.method)},
          {"norm_f", t.norm_f},
          {"norm_g", t.norm_g},
          {"batch_size", t.batch_size},
          {"epochs", t.epochs},
          {"lr", t.lr},
          {"lr_min", t.lr_min},
          {"seed", t.seed},
          {"tau", t.tau},
          {"ema_momentum", t.ema_momentum},
          {"weight_decay", t.weight_decay},
          {"channels", t.channels},
          {"proj_dim", t.proj_dim},
          {"pred_hidden", t.pred_hidden},
          {"diag_every", t.diag_every},
          {"augment", augment_to_json(t.augment)}};
}

inline TrainConfig train_from_json(const nlohmann::json& j) {
  TrainConfig t;
  if (j.contains("method")) t.method = parse_method(j["method"].get<std::string>());
  t.norm_f = j.value("norm_f", t.norm_f);
  t.norm_g = j.value("norm_g", t.norm_g);
  t.batch_size = j.value("batch_size", t.batch_size);
  t.epochs = j.value("epochs", t.epochs);
  t.lr = j.value("lr", t.lr);
  t.lr_min = j.value("lr_min", t.lr_min);
  t.seed = j.value("seed", t.seed);
  t.tau = j.value("tau", t.tau);
  t.ema_momentum = j.value("ema_momentum", t.ema_momentum);
  t.weight_decay = j.value("weight_decay", t.weight_decay);
  if (j.contains("channels")) {
    auto ch = j["channels"];
    for (int i = 0; i < 4; ++i) t.channels[size_t(i)] = ch.at(size_t(i)).get<int>();
  }
  t.proj_dim = j.value("proj_dim", t.proj_dim);
  t.pred_hidden = j.value("pred_hidden", t.pred_hidden);
  t.diag_every = j.value("diag_every", t.diag_every);
  if (j.contains("augment")) t.augment = augment_from_json(j["augment"]);
  return t;
}

struct ScoringSpec {
  std::vector<Metric> metrics{Metric::KCosMah};
  std::vector<FeatureMap> maps{FeatureMap::EncoderOutput};
  double lambda = 0.01;
  bool with_ensemble = false;
  std::optional<double> gde_bandwidth;

  nlohmann::json to_json() const {
    nlohmann::json m = nlohmann::json::array(), f = nlohmann::json::array();
    for (Metric x : metrics) m.push_back(metric_name(x));
    for (FeatureMap x : maps) f.push_back(feature_map_name(x));
    nlohmann::json j{{"metrics", m},
                     {"feature_maps", f},
                     {"lambda", lambda},
                     {"with_ensemble", with_ensemble}};
    if (gde_bandwidth) j["gde_bandwidth"] = *gde_bandwidth;
    return j;
  }
  static ScoringSpec from_json(const nlohmann::json& j) {
    ScoringSpec s;
    if (j.contains("metrics")) {
      s.metrics.clear();
      for (const auto& m : j["metrics"]) s.metrics.push_back(parse_metric(m.get<std::string>()));
    }
    if (j.contains("feature_maps")) {
      s.maps.clear();
      for (const auto& f : j["feature_maps"])
        s.maps.push_back(parse_feature_map(f.get<std::string>()));
    }
    s.lambda = j.value("lambda", s.lambda);
    s.with_ensemble = j.value("with_ensemble", s.with_ensemble);
    if (j.contains("gde_bandwidth")) s.gde_bandwidth = j["gde_bandwidth"].get<double>();
    return s;
  }
};

struct EvalSpec {
  std::vector<int> class_list{0, 1, 2, 3};
  std::vector<uint64_t> seeds{0, 1, 2, 3, 4};
  bool probe = true;
  int64_t probe_per_class = 32;
  int eval_every = 0;
  Metric curve_metric = Metric::KCos;

  nlohmann::json to_json() const {
    return {{"classes", class_list},
            {"seeds", seeds},
            {"probe", probe},
            {"probe_per_class", probe_per_class},
            {"eval_every", eval_every},
            {"curve_metric", metric_name(curve_metric)}};
  }
  static EvalSpec from_json(const nlohmann::json& j) {
    EvalSpec s;
    if (j.contains("classes")) s.class_list = j["classes"].get<std::vector<int>>();
    if (j.contains("seeds")) s.seeds = j["seeds"].get<std::vector<uint64_t>>();
    s.probe = j.value("probe", s.probe);
    s.probe_per_class = j.value("probe_per_class", s.probe_per_class);
    s.eval_every = j.value("eval_every", s.eval_every);
    if (j.contains("curve_metric"))
      s.curve_metric = parse_metric(j["curve_metric"].get<std::string>());
    return s;
  }
};

struct RunConfig {
  DatasetSpec dataset;
  std::optional<SplitSpec> split;
  TrainConfig train;
  ScoringSpec scoring;
  EvalSpec eval;

  nlohmann::json to_json() const {
    nlohmann::json j{{"dataset", dataset.to_json()},
                     {"train", train_to_json(train)},
                     {"scoring", scoring.to_json()},
                     {"eval", eval.to_json()}};
    if (split) j["split"] = split->to_json();
    return j;
  }
  static RunConfig from_json(const nlohmann::json& j) {
    RunConfig c;
    if (j.contains("dataset")) c.dataset = DatasetSpec::from_json(j["dataset"]);
    if (j.contains("split")) c.split = SplitSpec::from_json(j["split"]);
    if (j.contains("train")) c.train = train_from_json(j["train"]);
    if (j.contains("scoring")) c.scoring = ScoringSpec::from_json(j["scoring"]);
    if (j.contains("eval")) c.eval = EvalSpec::from_json(j["eval"]);
    return c;
  }

  ExperimentConfig experiment_config() const {
    ExperimentConfig e;
    e.kind = dataset.kind;
    e.classes = dataset.classes;
    e.n_per_class = dataset.n_per_class;
    e.image_size = dataset.image_size;
    e.dataset_seed = dataset.seed;
    if (split) {
      e.pollution = split->pollution;
      e.split = split->params;
    }
    e.train = train;
    e.metrics = scoring.metrics;
    e.maps = scoring.maps;
    e.lambda = scoring.lambda;
    e.with_ensemble = scoring.with_ensemble;
    e.class_list = eval.class_list;
    e.seeds = eval.seeds;
    e.probe = eval.probe;
    e.probe_per_class = eval.probe_per_class;
    e.eval_every = eval.eval_every;
    e.curve_metric = eval.curve_metric;
    return e;
  }
};

}  // namespace nsa
