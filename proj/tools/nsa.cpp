// nsa - command line front end for the anomaly-detection workbench.
//
// Subcommands: synth, train, embed, score, diag, eval. Every subcommand reads
// a JSON run config (see README) plus flag overrides, writes its artifacts
// into --out-dir together with a manifest that pins the full effective
// config and content hashes of all inputs. Exit codes: 0 success, 1 usage
// error, 2 runtime error.

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "nsa/run_config.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

nsa::RunConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw nsa::Error("cannot open config " + path);
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw nsa::ConfigError("bad config JSON in " + path + ": " + e.what());
  }
  return nsa::RunConfig::from_json(j);
}

std::string file_hash(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw nsa::Error("cannot open " + path);
  std::vector<char> bytes{std::istreambuf_iterator<char>(is), {}};
  return nsa::hash_hex(nsa::fnv1a64(bytes.data(), bytes.size()));
}

struct Manifest {
  std::string command;
  json config;
  json inputs = json::object();
  json outputs = json::object();

  void add_input(const std::string& path) { inputs[path] = file_hash(path); }
  void add_output(const std::string& path) { outputs[path] = file_hash(path); }

  void write(const fs::path& dir) const {
    json j{{"tool", "nsa"},
           {"format_version", 1},
           {"command", command},
           {"config", config},
           {"inputs", inputs},
           {"outputs", outputs}};
    std::ofstream os(dir / "manifest.json");
    os << j.dump(2) << "\n";
  }
};

fs::path ensure_out_dir(const std::string& out_dir) {
  fs::path dir(out_dir);
  fs::create_directories(dir);
  return dir;
}

// Applies the optional split section: training happens on the (possibly
// polluted) one-class subset.
nsa::ImageDataset training_subset(const nsa::RunConfig& cfg,
                                  const nsa::ImageDataset& ds) {
  if (!cfg.split) return ds;
  nsa::EvalSplit split =
      nsa::make_split(ds, cfg.split->inlier_class, cfg.split->pollution,
                      cfg.split->seed, cfg.split->params);
  return nsa::subset_dataset(ds, split.train_indices, ds.name + "_train");
}

int cmd_synth(const nsa::RunConfig& cfg, const std::string& config_path,
              const std::string& out_dir) {
  fs::path dir = ensure_out_dir(out_dir);
  nsa::ImageDataset ds = nsa::synth_dataset(cfg.dataset.kind, cfg.dataset.classes,
                                            cfg.dataset.n_per_class,
                                            cfg.dataset.image_size,
                                            cfg.dataset.seed);
  std::string path = (dir / "dataset.nsad").string();
  ds.save(path);
  Manifest m{"synth", cfg.to_json()};
  m.add_input(config_path);
  m.add_output(path);
  m.write(dir);
  std::cout << "wrote " << path << " (" << ds.count << " images)\n";
  return 0;
}

int cmd_train(const nsa::RunConfig& cfg, const std::string& config_path,
              const std::string& out_dir) {
  fs::path dir = ensure_out_dir(out_dir);
  nsa::ImageDataset full = cfg.dataset.realize();
  nsa::ImageDataset train_ds = training_subset(cfg, full);
  nsa::TrainResult result = nsa::train(cfg.train, train_ds);
  std::string model_path = (dir / "model.nsam").string();
  std::string log_path = (dir / "epoch_log.csv").string();
  result.model.save(model_path);
  nsa::write_epoch_log_csv(log_path, result.log);
  Manifest m{"train", cfg.to_json()};
  m.add_input(config_path);
  if (!cfg.dataset.path.empty()) m.add_input(cfg.dataset.path);
  m.add_output(model_path);
  m.add_output(log_path);
  m.write(dir);
  std::cout << "trained " << nsa::method_name(cfg.train.method) << " for "
            << cfg.train.epochs << " epochs; final loss "
            << result.log.back().loss << "\n";
  return 0;
}

int cmd_embed(const nsa::RunConfig& cfg, const std::string& config_path,
              const std::string& out_dir, const std::string& checkpoint,
              const std::string& dataset_path) {
  if (checkpoint.empty()) throw nsa::ConfigError("embed requires --checkpoint");
  fs::path dir = ensure_out_dir(out_dir);
  nsa::SslModel model = nsa::SslModel::load(checkpoint);
  nsa::ImageDataset ds = dataset_path.empty() ? cfg.dataset.realize()
                                              : nsa::ImageDataset::load(dataset_path);
  auto maps = nsa::embed_dataset(model, ds);
  Manifest m{"embed", cfg.to_json()};
  m.add_input(config_path);
  m.add_input(checkpoint);
  if (!dataset_path.empty()) m.add_input(dataset_path);
  for (nsa::FeatureMap map_id : cfg.scoring.maps) {
    auto it = maps.find(map_id);
    if (it == maps.end())
      throw nsa::ConfigError("feature map " + nsa::feature_map_name(map_id) +
                             " not present in this architecture");
    std::string path =
        (dir / (nsa::feature_map_name(map_id) + ".nsae")).string();
    it->second.save(path);
    m.add_output(path);
    std::cout << "wrote " << path << " (" << it->second.n << " x "
              << it->second.d << ")\n";
  }
  m.write(dir);
  return 0;
}

int cmd_score(const nsa::RunConfig& cfg, const std::string& config_path,
              const std::string& out_dir, const std::string& train_path,
              const std::string& query_path) {
  if (train_path.empty() || query_path.empty())
    throw nsa::ConfigError("score requires --train-embeddings and --query-embeddings");
  fs::path dir = ensure_out_dir(out_dir);
  nsa::EmbeddingSet train = nsa::EmbeddingSet::load(train_path);
  nsa::EmbeddingSet query = nsa::EmbeddingSet::load(query_path);
  std::vector<nsa::ScoreReport> reports;
  for (nsa::Metric metric : cfg.scoring.metrics) {
    switch (metric) {
      case nsa::Metric::KCos:
        reports.push_back(nsa::score_kcos(train, query));
        break;
      case nsa::Metric::CCos:
        reports.push_back(nsa::score_ccos(train, query));
        break;
      case nsa::Metric::Gde:
        reports.push_back(nsa::score_gde(train, query, cfg.scoring.gde_bandwidth));
        break;
      case nsa::Metric::KCosMah: {
        auto t = nsa::fit_mahalanobis(train, cfg.scoring.lambda);
        reports.push_back(nsa::score_kcos(train, query, &t));
        break;
      }
      case nsa::Metric::CCosMah: {
        auto t = nsa::fit_mahalanobis(train, cfg.scoring.lambda);
        reports.push_back(nsa::score_ccos(train, query, &t));
        break;
      }
      case nsa::Metric::Ens:
        throw nsa::ConfigError(
            "ens scoring needs per-feature-map embeddings; use eval");
    }
  }
  std::string csv = (dir / "scores.csv").string();
  std::string sidecar = (dir / "scores_ranges.json").string();
  nsa::write_score_csv(csv, sidecar, reports);
  Manifest m{"score", cfg.to_json()};
  m.add_input(config_path);
  m.add_input(train_path);
  m.add_input(query_path);
  m.add_output(csv);
  m.add_output(sidecar);
  m.write(dir);
  std::cout << "wrote " << csv << "\n";
  return 0;
}

int cmd_diag(const nsa::RunConfig& cfg, const std::string& config_path,
             const std::string& out_dir, const std::string& embeddings_path) {
  if (embeddings_path.empty()) throw nsa::ConfigError("diag requires --embeddings");
  fs::path dir = ensure_out_dir(out_dir);
  nsa::EmbeddingSet all = nsa::EmbeddingSet::load(embeddings_path);

  // Split by outlier label when present, else treat everything as ID.
  auto subset = [&](uint8_t flag) {
    nsa::EmbeddingSet e;
    e.d = all.d;
    e.feature_map = all.feature_map;
    for (int64_t i = 0; i < all.n; ++i) {
      uint8_t f = all.outlier.empty() ? 0 : all.outlier[size_t(i)];
      if (f != flag) continue;
      auto row = all.row(i);
      e.data.insert(e.data.end(), row.begin(), row.end());
      e.n++;
    }
    return e;
  };

  std::string path = (dir / "diagnostics.csv").string();
  std::ofstream os(path);
  os << "epoch,split,kappa,rbar,mmd2,bandwidth\n";
  char buf[256];
  for (uint8_t flag : {uint8_t(0), uint8_t(1)}) {
    nsa::EmbeddingSet part = subset(flag);
    if (part.n == 0) continue;
    nsa::VmfFit fit = nsa::fit_vmf(part);
    nsa::EmbeddingSet uniform = nsa::sample_uniform_sphere(
        part.n, part.d, nsa::Rng::mix(cfg.dataset.seed, 0xD1A6));
    nsa::MmdResult mm = nsa::mmd(part, uniform);
    std::snprintf(buf, sizeof(buf), "0,%s,%.9g,%.9g,%.9g,%.9g\n",
                  flag ? "ood" : "id", fit.kappa, fit.rbar, mm.mmd2,
                  mm.bandwidth);
    os << buf;
  }
  os.close();
  Manifest m{"diag", cfg.to_json()};
  m.add_input(config_path);
  m.add_input(embeddings_path);
  m.add_output(path);
  m.write(dir);
  std::cout << "wrote " << path << "\n";
  return 0;
}

int cmd_eval(const nsa::RunConfig& cfg, const std::string& config_path,
             const std::string& out_dir) {
  fs::path dir = ensure_out_dir(out_dir);
  nsa::ExperimentResult result = nsa::run_experiment(cfg.experiment_config());
  std::string results_path = (dir / "results.csv").string();
  nsa::write_results_csv(results_path, result.records);
  Manifest m{"eval", cfg.to_json()};
  m.add_input(config_path);
  m.add_output(results_path);
  if (!result.curves.empty()) {
    std::string curves_path = (dir / "curves.csv").string();
    nsa::write_curves_csv(curves_path, result.curves);
    m.add_output(curves_path);
  }
  m.write(dir);
  std::cout << "wrote " << results_path << " (" << result.records.size()
            << " records)\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"nsa: self-supervised one-class anomaly detection workbench"};
  app.require_subcommand(1);

  std::string config_path, out_dir = "out";
  std::optional<uint64_t> seed_override;
  std::string checkpoint, dataset_path, train_emb, query_emb, embeddings_path;

  auto add_common = [&](CLI::App* sub, bool config_required = true) {
    auto* opt = sub->add_option("--config", config_path, "run config JSON");
    if (config_required) opt->required();
    sub->add_option("--out-dir", out_dir, "output directory");
    sub->add_option("--seed", seed_override, "seed override");
  };

  CLI::App* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  add_common(synth);
  CLI::App* train = app.add_subcommand("train", "train an SSL model");
  add_common(train);
  CLI::App* embed = app.add_subcommand("embed", "extract feature-map embeddings");
  add_common(embed);
  embed->add_option("--checkpoint", checkpoint, "model checkpoint (.nsam)");
  embed->add_option("--dataset", dataset_path, "dataset file (.nsad)");
  CLI::App* score = app.add_subcommand("score", "score query embeddings");
  add_common(score);
  score->add_option("--train-embeddings", train_emb, "training .nsae");
  score->add_option("--query-embeddings", query_emb, "query .nsae");
  CLI::App* diag = app.add_subcommand("diag", "vMF/MMD compactness diagnostics");
  add_common(diag);
  diag->add_option("--embeddings", embeddings_path, "embeddings .nsae");
  CLI::App* eval_cmd = app.add_subcommand("eval", "run the one-vs-all protocol");
  add_common(eval_cmd);

  CLI11_PARSE(app, argc, argv);

  try {
    nsa::RunConfig cfg = load_config(config_path);
    if (seed_override) {
      cfg.dataset.seed = *seed_override;
      cfg.train.seed = *seed_override;
      if (cfg.split) cfg.split->seed = *seed_override;
      if (eval_cmd->parsed()) cfg.eval.seeds = {*seed_override};
    }
    if (synth->parsed()) return cmd_synth(cfg, config_path, out_dir);
    if (train->parsed()) return cmd_train(cfg, config_path, out_dir);
    if (embed->parsed())
      return cmd_embed(cfg, config_path, out_dir, checkpoint, dataset_path);
    if (score->parsed())
      return cmd_score(cfg, config_path, out_dir, train_emb, query_emb);
    if (diag->parsed())
      return cmd_diag(cfg, config_path, out_dir, embeddings_path);
    if (eval_cmd->parsed()) return cmd_eval(cfg, config_path, out_dir);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
