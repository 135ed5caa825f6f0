#pragma once

#include <array>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "nsa/ops.hpp"

namespace nsa {

enum class Method { SimSiam, Byol, SimClr, SimClrNeg };

inline std::string method_name(Method m) {
  switch (m) {
    case Method::SimSiam: return "simsiam";
    case Method::Byol: return "byol";
    case Method::SimClr: return "simclr";
    case Method::SimClrNeg: return "simclr_neg";
  }
  return "?";
}

inline Method parse_method(const std::string& s) {
  if (s == "simsiam") return Method::SimSiam;
  if (s == "byol") return Method::Byol;
  if (s == "simclr") return Method::SimClr;
  if (s == "simclr_neg") return Method::SimClrNeg;
  throw ConfigError("unknown method: " + s);
}

/// Named activations exposed by a forward trace. Conv block maps come in two
/// flavors: the block output itself (flattened for scoring) and its global
/// 1x1-pooled vector.
enum class FeatureMap {
  ConvBlock1,
  ConvBlock2,
  ConvBlock3,
  ConvBlock4,
  ConvBlock1Pooled,
  ConvBlock2Pooled,
  ConvBlock3Pooled,
  ConvBlock4Pooled,
  HeadLayer1,
  HeadLayer2,
  HeadLayer3,
  EncoderOutput,
};

inline std::string feature_map_name(FeatureMap m) {
  switch (m) {
    case FeatureMap::ConvBlock1: return "conv_block_1";
    case FeatureMap::ConvBlock2: return "conv_block_2";
    case FeatureMap::ConvBlock3: return "conv_block_3";
    case FeatureMap::ConvBlock4: return "conv_block_4";
    case FeatureMap::ConvBlock1Pooled: return "conv_block_1_1x1";
    case FeatureMap::ConvBlock2Pooled: return "conv_block_2_1x1";
    case FeatureMap::ConvBlock3Pooled: return "conv_block_3_1x1";
    case FeatureMap::ConvBlock4Pooled: return "conv_block_4_1x1";
    case FeatureMap::HeadLayer1: return "head_layer_1";
    case FeatureMap::HeadLayer2: return "head_layer_2";
    case FeatureMap::HeadLayer3: return "head_layer_3";
    case FeatureMap::EncoderOutput: return "encoder_output";
  }
  return "?";
}

inline FeatureMap parse_feature_map(const std::string& s) {
  static const std::map<std::string, FeatureMap> table = {
      {"conv_block_1", FeatureMap::ConvBlock1},
      {"conv_block_2", FeatureMap::ConvBlock2},
      {"conv_block_3", FeatureMap::ConvBlock3},
      {"conv_block_4", FeatureMap::ConvBlock4},
      {"conv_block_1_1x1", FeatureMap::ConvBlock1Pooled},
      {"conv_block_2_1x1", FeatureMap::ConvBlock2Pooled},
      {"conv_block_3_1x1", FeatureMap::ConvBlock3Pooled},
      {"conv_block_4_1x1", FeatureMap::ConvBlock4Pooled},
      {"head_layer_1", FeatureMap::HeadLayer1},
      {"head_layer_2", FeatureMap::HeadLayer2},
      {"head_layer_3", FeatureMap::HeadLayer3},
      {"encoder_output", FeatureMap::EncoderOutput},
  };
  auto it = table.find(s);
  if (it == table.end()) throw ConfigError("unknown feature map: " + s);
  return it->second;
}

/// Spatial (2-D) maps are scored in flattened space; everything else is 1-D.
inline bool is_2d_map(FeatureMap m) {
  return m == FeatureMap::ConvBlock1 || m == FeatureMap::ConvBlock2 ||
         m == FeatureMap::ConvBlock3 || m == FeatureMap::ConvBlock4;
}

struct ModelConfig {
  Method method = Method::SimSiam;
  bool norm_f = false;
  bool norm_g = false;
  int in_channels = 3;
  std::array<int, 4> channels{16, 32, 64, 128};
  int proj_dim = 64;
  int pred_hidden = 32;
  float ema_momentum = 0.996f;

  int projector_layers() const {
    return (method == Method::SimClr || method == Method::SimClrNeg) ? 2 : 3;
  }
  bool has_predictor() const {
    return method == Method::SimSiam || method == Method::Byol;
  }
  bool has_ema_target() const { return method == Method::Byol; }
  int encoder_dim() const { return channels[3]; }

  nlohmann::json to_json() const {
    return {{"method", method_name(method)},
            {"norm_f", norm_f},
            {"norm_g", norm_g},
            {"in_channels", in_channels},
            {"channels", channels},
            {"proj_dim", proj_dim},
            {"pred_hidden", pred_hidden},
            {"ema_momentum", ema_momentum}};
  }
  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.method = parse_method(j.at("method").get<std::string>());
    c.norm_f = j.at("norm_f").get<bool>();
    c.norm_g = j.at("norm_g").get<bool>();
    c.in_channels = j.at("in_channels").get<int>();
    auto ch = j.at("channels");
    for (int i = 0; i < 4; ++i) c.channels[size_t(i)] = ch.at(size_t(i)).get<int>();
    c.proj_dim = j.at("proj_dim").get<int>();
    c.pred_hidden = j.at("pred_hidden").get<int>();
    c.ema_momentum = j.at("ema_momentum").get<float>();
    return c;
  }
};

/// target <- m * target + (1 - m) * online, elementwise over parameter lists.
inline void ema_update(std::vector<Tensor>& target,
                       const std::vector<Tensor>& online, double m) {
  if (m < 0.0 || m >= 1.0)
    throw ConfigError("ema_update: momentum must be in [0, 1)");
  if (target.size() != online.size())
    throw ConfigError("ema_update: parameter count mismatch");
  for (size_t i = 0; i < target.size(); ++i) {
    if (target[i].shape() != online[i].shape())
      throw ConfigError("ema_update: shape mismatch at parameter " +
                        std::to_string(i));
    auto t = target[i].value();
    auto o = online[i].value();
    for (size_t j = 0; j < t.size(); ++j)
      t[j] = float(m * double(t[j]) + (1.0 - m) * double(o[j]));
  }
}

class SslModel {
 public:
  struct Trace {
    std::map<FeatureMap, Tensor> features;
    Tensor encoder_output;    // y, normalized when norm_f
    Tensor projection;        // z, last projector layer
    Tensor loss_projection;   // z-hat when norm_g, else z; loss target side
    Tensor prediction;        // p, defined when the model has a predictor
  };
  enum class Mode { Train, Eval };

  SslModel() = default;

  SslModel(ModelConfig cfg, uint64_t init_seed) : cfg_(cfg) {
    Rng rng(Rng::mix(init_seed, 0x1217));
    int in_c = cfg_.in_channels;
    for (int i = 0; i < 4; ++i) {
      int out_c = cfg_.channels[size_t(i)];
      enc_[size_t(i)] = make_conv(in_c, out_c, rng);
      in_c = out_c;
    }
    int prev = cfg_.encoder_dim();
    for (int i = 0; i < cfg_.projector_layers(); ++i) {
      proj_.push_back(make_dense(prev, cfg_.proj_dim, rng));
      prev = cfg_.proj_dim;
    }
    if (cfg_.has_predictor()) {
      pred_.push_back(make_dense(cfg_.proj_dim, cfg_.pred_hidden, rng));
      pred_.push_back(make_dense(cfg_.pred_hidden, cfg_.proj_dim, rng));
    }
    if (cfg_.has_ema_target()) reset_target();
  }

  const ModelConfig& config() const { return cfg_; }
  bool has_target() const { return !tgt_proj_.empty(); }

  /// Runs the encoder/projector/predictor and returns all named activations.
  /// Eval mode never records a graph, even inside an active tape.
  Trace forward_trace(const Tensor& batch, Mode mode,
                      bool collect_features = true) const {
    if (mode == Mode::Eval) {
      TapePause pause;
      return run_forward(enc_, proj_, pred_, batch, collect_features);
    }
    return run_forward(enc_, proj_, pred_, batch, collect_features);
  }

  /// BYOL target branch (EMA copy of encoder + projector, no predictor).
  Trace target_forward(const Tensor& batch) const {
    if (!has_target())
      throw ConfigError("target_forward: model has no EMA target (method " +
                        method_name(cfg_.method) + ")");
    return run_forward(tgt_enc_, tgt_proj_, {}, batch, false);
  }

  void ema_update_target() {
    if (!has_target()) throw ConfigError("ema_update_target: no EMA target");
    auto tgt = collect_params(tgt_enc_, tgt_proj_, {});
    auto onl = collect_params(enc_, proj_, {});
    ema_update(tgt, onl, cfg_.ema_momentum);
  }

  /// Online parameters in declaration order (optimizer operand).
  std::vector<Tensor> trainable_parameters() {
    return collect_params(enc_, proj_, pred_);
  }

  /// All parameters (online + EMA target) with checkpoint names.
  std::vector<std::pair<std::string, Tensor>> named_parameters() {
    std::vector<std::pair<std::string, Tensor>> out;
    name_params(out, "", enc_, proj_, pred_);
    if (has_target()) name_params(out, "target.", tgt_enc_, tgt_proj_, {});
    return out;
  }
  std::vector<std::pair<std::string, Tensor>> named_parameters() const {
    return const_cast<SslModel*>(this)->named_parameters();
  }

  std::string param_hash() const {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& [name, t] : named_parameters()) {
      h = fnv1a64(name.data(), name.size(), h);
      h = fnv1a64(t.value().data(), size_t(t.size()) * sizeof(float), h);
    }
    return hash_hex(h);
  }

  // NSAM checkpoint: magic, version u32, length-prefixed JSON config, then
  // each parameter as (u32 name length, name, u32 rank, u64 dims, f32 data).
  void save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot open " + path + " for writing");
    os.write("NSAM", 4);
    detail::write_le<uint32_t>(os, 1);
    std::string cfg = cfg_.to_json().dump();
    detail::write_le<uint32_t>(os, uint32_t(cfg.size()));
    os.write(cfg.data(), std::streamsize(cfg.size()));
    for (const auto& [name, t] : named_parameters()) {
      detail::write_le<uint32_t>(os, uint32_t(name.size()));
      os.write(name.data(), std::streamsize(name.size()));
      detail::write_le<uint32_t>(os, uint32_t(t.rank()));
      for (int i = 0; i < t.rank(); ++i)
        detail::write_le<uint64_t>(os, uint64_t(t.dim(i)));
      detail::write_f32_le(os, t.value());
    }
    if (!os) throw Error("short write to " + path);
  }

  static SslModel load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("cannot open " + path);
    int64_t off = 0;
    char magic[4];
    detail::read_exact(is, magic, 4, off, "magic");
    if (std::string(magic, 4) != "NSAM")
      throw FormatError("bad magic, expected NSAM", 0);
    uint32_t version = detail::read_le<uint32_t>(is, off, "version");
    if (version != 1)
      throw FormatError("unsupported NSAM version " + std::to_string(version), 4);
    uint32_t cfg_len = detail::read_le<uint32_t>(is, off, "config length");
    std::string cfg_str(cfg_len, '\0');
    detail::read_exact(is, cfg_str.data(), cfg_len, off, "config");
    ModelConfig cfg;
    try {
      cfg = ModelConfig::from_json(nlohmann::json::parse(cfg_str));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("bad config JSON: ") + e.what(), 8);
    }
    SslModel model(cfg, 0);
    for (auto& [name, t] : model.named_parameters()) {
      int64_t entry_off = off;
      uint32_t name_len = detail::read_le<uint32_t>(is, off, "parameter name length");
      std::string got(name_len, '\0');
      detail::read_exact(is, got.data(), name_len, off, "parameter name");
      if (got != name)
        throw FormatError("parameter order mismatch: expected " + name +
                              ", found " + got,
                          entry_off);
      uint32_t rank = detail::read_le<uint32_t>(is, off, "parameter rank");
      Shape dims(rank);
      for (auto& d : dims)
        d = int64_t(detail::read_le<uint64_t>(is, off, "parameter dims"));
      if (dims != t.shape())
        throw FormatError("parameter shape mismatch for " + name, entry_off);
      detail::read_f32_le(is, t.value(), off, name.c_str());
    }
    return model;
  }

 private:
  struct Conv {
    Tensor w, b;
  };
  struct Dense {
    Tensor w, b;
  };

  // He-normal weights; a small positive bias keeps narrow layers from being
  // born dead under ReLU. Filters are centered to zero sum so that, with no
  // batch norm in the stack, the all-positive relu common mode of the
  // previous layer does not swamp the structural response at init.
  static Conv make_conv(int in_c, int out_c, Rng& rng) {
    float stddev = std::sqrt(2.0f / float(in_c * 9));
    Conv c;
    c.w = Tensor::randn({out_c, in_c, 3, 3}, rng, stddev).set_requires_grad(true);
    int64_t filter = int64_t(in_c) * 9;
    auto w = c.w.value();
    for (int f = 0; f < out_c; ++f) {
      double mean = 0.0;
      for (int64_t j = 0; j < filter; ++j) mean += double(w[size_t(f * filter + j)]);
      mean /= double(filter);
      for (int64_t j = 0; j < filter; ++j) w[size_t(f * filter + j)] -= float(mean);
    }
    c.b = Tensor::full({out_c}, 0.01f).set_requires_grad(true);
    return c;
  }
  static Dense make_dense(int in_d, int out_d, Rng& rng) {
    float stddev = std::sqrt(2.0f / float(in_d));
    Dense d;
    d.w = Tensor::randn({in_d, out_d}, rng, stddev).set_requires_grad(true);
    d.b = Tensor::full({out_d}, 0.01f).set_requires_grad(true);
    return d;
  }

  void reset_target() {
    tgt_proj_.clear();
    for (int i = 0; i < 4; ++i) {
      tgt_enc_[size_t(i)].w = enc_[size_t(i)].w.clone();
      tgt_enc_[size_t(i)].b = enc_[size_t(i)].b.clone();
    }
    for (const Dense& d : proj_) tgt_proj_.push_back({d.w.clone(), d.b.clone()});
    // EMA parameters are never touched by the optimizer.
    for (auto& c : tgt_enc_) {
      c.w.set_requires_grad(false);
      c.b.set_requires_grad(false);
    }
    for (auto& d : tgt_proj_) {
      d.w.set_requires_grad(false);
      d.b.set_requires_grad(false);
    }
  }

  static std::vector<Tensor> collect_params(const std::array<Conv, 4>& enc,
                                            const std::vector<Dense>& proj,
                                            const std::vector<Dense>& pred) {
    std::vector<Tensor> out;
    for (const Conv& c : enc) {
      out.push_back(c.w);
      out.push_back(c.b);
    }
    for (const Dense& d : proj) {
      out.push_back(d.w);
      out.push_back(d.b);
    }
    for (const Dense& d : pred) {
      out.push_back(d.w);
      out.push_back(d.b);
    }
    return out;
  }

  static void name_params(std::vector<std::pair<std::string, Tensor>>& out,
                          const std::string& prefix, const std::array<Conv, 4>& enc,
                          const std::vector<Dense>& proj,
                          const std::vector<Dense>& pred) {
    for (size_t i = 0; i < enc.size(); ++i) {
      out.emplace_back(prefix + "enc.block" + std::to_string(i + 1) + ".weight",
                       enc[i].w);
      out.emplace_back(prefix + "enc.block" + std::to_string(i + 1) + ".bias",
                       enc[i].b);
    }
    for (size_t i = 0; i < proj.size(); ++i) {
      out.emplace_back(prefix + "proj.layer" + std::to_string(i + 1) + ".weight",
                       proj[i].w);
      out.emplace_back(prefix + "proj.layer" + std::to_string(i + 1) + ".bias",
                       proj[i].b);
    }
    for (size_t i = 0; i < pred.size(); ++i) {
      out.emplace_back(prefix + "pred.layer" + std::to_string(i + 1) + ".weight",
                       pred[i].w);
      out.emplace_back(prefix + "pred.layer" + std::to_string(i + 1) + ".bias",
                       pred[i].b);
    }
  }

  Trace run_forward(const std::array<Conv, 4>& enc, const std::vector<Dense>& proj,
                    const std::vector<Dense>& pred, const Tensor& batch,
                    bool collect_features) const {
    if (batch.rank() != 4)
      throw ShapeError("forward_trace expects [N,C,H,W], got " +
                       shape_str(batch.shape()));
    if (batch.dim(1) != cfg_.in_channels)
      throw ConfigError("forward_trace: input has " + std::to_string(batch.dim(1)) +
                        " channels, model expects " +
                        std::to_string(cfg_.in_channels));
    if (batch.dim(2) < 8 || batch.dim(3) < 8)
      throw ConfigError("forward_trace: input spatial size must be >= 8x8");

    Trace trace;
    // Center [0,1] pixels to [-1,1]; without batch norm this keeps the relu
    // features sign-diverse instead of sharing one positive common mode.
    Tensor h = scale(add(batch, Tensor::full(batch.shape(), -0.5f)), 2.0f);
    static constexpr FeatureMap kBlockMaps[4] = {
        FeatureMap::ConvBlock1, FeatureMap::ConvBlock2, FeatureMap::ConvBlock3,
        FeatureMap::ConvBlock4};
    static constexpr FeatureMap kPooledMaps[4] = {
        FeatureMap::ConvBlock1Pooled, FeatureMap::ConvBlock2Pooled,
        FeatureMap::ConvBlock3Pooled, FeatureMap::ConvBlock4Pooled};
    Tensor last_pre;  // block-4 pre-activation
    for (int i = 0; i < 4; ++i) {
      Tensor pre = conv2d(h, enc[size_t(i)].w, enc[size_t(i)].b, 1, 1);
      if (i == 3) last_pre = pre;
      h = relu(pre);
      if (h.dim(2) >= 2 && h.dim(3) >= 2) h = avg_pool2d(h, 2, 2);
      if (collect_features) {
        trace.features[kBlockMaps[i]] = h;
        trace.features[kPooledMaps[i]] = global_avg_pool(h);
      }
    }
    // The embedding pools the pre-activation response of the last block:
    // with no batch norm in the stack, the rectified features share a large
    // positive common mode that would crush the angular spread cosine
    // scoring depends on; the pre-activation response is near zero-mean.
    Tensor y = global_avg_pool(last_pre);
    trace.encoder_output = cfg_.norm_f ? l2_normalize(y, 1) : y;
    if (collect_features)
      trace.features[FeatureMap::EncoderOutput] = trace.encoder_output;

    static constexpr FeatureMap kHeadMaps[3] = {
        FeatureMap::HeadLayer1, FeatureMap::HeadLayer2, FeatureMap::HeadLayer3};
    Tensor z = trace.encoder_output;
    for (size_t i = 0; i < proj.size(); ++i) {
      z = dense(z, proj[i].w, proj[i].b);
      if (i + 1 < proj.size()) z = relu(z);
      if (collect_features && i < 3) trace.features[kHeadMaps[i]] = z;
    }
    trace.projection = z;
    trace.loss_projection = cfg_.norm_g ? l2_normalize(z, 1) : z;
    if (!pred.empty()) {
      Tensor p = trace.loss_projection;
      for (size_t i = 0; i < pred.size(); ++i) {
        p = dense(p, pred[i].w, pred[i].b);
        if (i + 1 < pred.size()) p = relu(p);
      }
      trace.prediction = p;
    }
    return trace;
  }

  ModelConfig cfg_;
  std::array<Conv, 4> enc_;
  std::vector<Dense> proj_;
  std::vector<Dense> pred_;
  std::array<Conv, 4> tgt_enc_;
  std::vector<Dense> tgt_proj_;
};

/// Per-dim standard deviation of encoder outputs across a batch, averaged
/// over dims. A healthy (non-collapsed) representation keeps this well above
/// zero; values near zero mean every input maps to one embedding.
inline double collapse_std(const Tensor& encoder_output) {
  if (encoder_output.rank() != 2)
    throw ShapeError("collapse_std expects [N,d] activations");
  int64_t n = encoder_output.dim(0), d = encoder_output.dim(1);
  const float* v = encoder_output.value().data();
  double total = 0.0;
  for (int64_t j = 0; j < d; ++j) {
    double mean = 0.0;
    for (int64_t i = 0; i < n; ++i) mean += double(v[i * d + j]);
    mean /= double(n);
    double var = 0.0;
    for (int64_t i = 0; i < n; ++i) {
      double x = double(v[i * d + j]) - mean;
      var += x * x;
    }
    total += std::sqrt(var / double(n));
  }
  return total / double(d);
}

}  // namespace nsa
