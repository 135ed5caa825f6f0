#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "nsa/nets.hpp"

using namespace nsa;

namespace {

Tensor random_batch(int64_t n, int c, int hw, uint64_t seed) {
  Rng rng(seed);
  return Tensor::uniform({n, c, hw, hw}, rng, 0.0f, 1.0f);
}

std::string tmp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST(ForwardTrace, ShapeContract32px) {
  SslModel model(ModelConfig{}, 3);
  Tensor batch = random_batch(5, 3, 32, 1);
  auto trace = model.forward_trace(batch, SslModel::Mode::Eval);
  EXPECT_EQ(trace.features.at(FeatureMap::ConvBlock4Pooled).shape(),
            (Shape{5, 128}));
  EXPECT_EQ(trace.features.at(FeatureMap::ConvBlock1).shape(),
            (Shape{5, 16, 16, 16}));
  EXPECT_EQ(trace.encoder_output.shape(), (Shape{5, 128}));
  EXPECT_EQ(trace.projection.shape(), (Shape{5, 64}));
  EXPECT_EQ(trace.prediction.shape(), (Shape{5, 64}));
  // SimSiam projector has three layers.
  EXPECT_TRUE(trace.features.count(FeatureMap::HeadLayer3));
}

TEST(ForwardTrace, SimClrHasTwoHeadLayersAndNoPredictor) {
  ModelConfig cfg;
  cfg.method = Method::SimClr;
  SslModel model(cfg, 3);
  Tensor batch = random_batch(2, 3, 16, 2);
  auto trace = model.forward_trace(batch, SslModel::Mode::Eval);
  EXPECT_TRUE(trace.features.count(FeatureMap::HeadLayer2));
  EXPECT_FALSE(trace.features.count(FeatureMap::HeadLayer3));
  EXPECT_FALSE(trace.prediction.defined());
}

TEST(ForwardTrace, NormFForcesUnitRows) {
  ModelConfig cfg;
  cfg.norm_f = true;
  SslModel model(cfg, 5);
  Tensor batch = random_batch(4, 3, 16, 3);
  auto trace = model.forward_trace(batch, SslModel::Mode::Eval);
  const Tensor& enc = trace.encoder_output;
  for (int64_t i = 0; i < enc.dim(0); ++i) {
    double ss = 0.0;
    for (int64_t j = 0; j < enc.dim(1); ++j) {
      double v = enc.value()[size_t(i * enc.dim(1) + j)];
      ss += v * v;
    }
    EXPECT_NEAR(std::sqrt(ss), 1.0, 1e-6);
  }
}

TEST(ForwardTrace, NormGNormalizesLossProjection) {
  ModelConfig cfg;
  cfg.norm_g = true;
  SslModel model(cfg, 7);
  Tensor batch = random_batch(3, 3, 16, 4);
  auto trace = model.forward_trace(batch, SslModel::Mode::Eval);
  const Tensor& z = trace.loss_projection;
  for (int64_t i = 0; i < z.dim(0); ++i) {
    double ss = 0.0;
    for (int64_t j = 0; j < z.dim(1); ++j) {
      double v = z.value()[size_t(i * z.dim(1) + j)];
      ss += v * v;
    }
    EXPECT_NEAR(std::sqrt(ss), 1.0, 1e-6);
  }
}

TEST(ForwardTrace, EvalEqualsTrainValues) {
  SslModel model(ModelConfig{}, 11);
  Tensor batch = random_batch(3, 3, 16, 5);
  auto eval_trace = model.forward_trace(batch, SslModel::Mode::Eval);
  GradTape tape;
  auto train_trace = model.forward_trace(batch, SslModel::Mode::Train);
  ASSERT_EQ(eval_trace.encoder_output.size(), train_trace.encoder_output.size());
  for (int64_t i = 0; i < eval_trace.encoder_output.size(); ++i)
    EXPECT_EQ(eval_trace.encoder_output.value()[size_t(i)],
              train_trace.encoder_output.value()[size_t(i)]);
  // Eval mode records nothing even inside an active tape.
  EXPECT_FALSE(eval_trace.encoder_output.requires_grad());
  EXPECT_TRUE(train_trace.encoder_output.requires_grad());
}

TEST(ForwardTrace, RejectsTinyInputs) {
  SslModel model(ModelConfig{}, 1);
  Tensor batch = random_batch(1, 3, 4, 1);
  EXPECT_THROW(model.forward_trace(batch, SslModel::Mode::Eval), ConfigError);
}

TEST(EmaUpdate, ZeroMomentumCopies) {
  Rng rng(13);
  std::vector<Tensor> target{Tensor::randn({3, 3}, rng)};
  std::vector<Tensor> online{Tensor::randn({3, 3}, rng)};
  ema_update(target, online, 0.0f);
  for (int64_t i = 0; i < 9; ++i)
    EXPECT_FLOAT_EQ(target[0].value()[size_t(i)], online[0].value()[size_t(i)]);
}

TEST(EmaUpdate, NearOneMomentumFreezes) {
  Rng rng(17);
  std::vector<Tensor> target{Tensor::randn({4}, rng)};
  std::vector<Tensor> online{Tensor::randn({4}, rng)};
  std::vector<float> before(target[0].value().begin(), target[0].value().end());
  ema_update(target, online, 1.0 - 1e-9);
  for (int64_t i = 0; i < 4; ++i)
    EXPECT_NEAR(target[0].value()[size_t(i)], before[size_t(i)], 1e-6f);
}

TEST(EmaUpdate, TwoStepsMatchClosedForm) {
  // Constant online: after two updates target = m^2 t0 + (1 - m^2) o.
  float m = 0.9f;
  std::vector<Tensor> target{Tensor::from_data({2}, {1.0f, -2.0f})};
  std::vector<Tensor> online{Tensor::from_data({2}, {3.0f, 5.0f})};
  std::vector<float> t0{1.0f, -2.0f};
  ema_update(target, online, m);
  ema_update(target, online, m);
  for (int64_t i = 0; i < 2; ++i) {
    float expected = m * m * t0[size_t(i)] + (1.0f - m * m) * online[0].value()[size_t(i)];
    EXPECT_NEAR(target[0].value()[size_t(i)], expected, 1e-6f);
  }
}

TEST(EmaUpdate, Validation) {
  std::vector<Tensor> target{Tensor::zeros({2})};
  std::vector<Tensor> online{Tensor::zeros({3})};
  EXPECT_THROW(ema_update(target, online, 0.5f), ConfigError);
  std::vector<Tensor> online2{Tensor::zeros({2})};
  EXPECT_THROW(ema_update(target, online2, 1.0f), ConfigError);
  EXPECT_THROW(ema_update(target, online2, -0.1f), ConfigError);
}

TEST(ByolTarget, NeverTouchedByOptimizerOnlyByEma) {
  ModelConfig cfg;
  cfg.method = Method::Byol;
  SslModel model(cfg, 19);
  auto named = model.named_parameters();
  bool saw_target = false;
  for (auto& [name, t] : named) {
    if (name.rfind("target.", 0) == 0) {
      saw_target = true;
      EXPECT_FALSE(t.requires_grad()) << name;
    } else {
      EXPECT_TRUE(t.requires_grad()) << name;
    }
  }
  EXPECT_TRUE(saw_target);
  // trainable_parameters excludes the target.
  auto trainable = model.trainable_parameters();
  size_t online_count = 0;
  for (auto& [name, t] : named)
    if (name.rfind("target.", 0) != 0) ++online_count;
  EXPECT_EQ(trainable.size(), online_count);
}

TEST(Checkpoint, RoundTripPreservesEverything) {
  ModelConfig cfg;
  cfg.method = Method::Byol;
  cfg.norm_f = true;
  cfg.norm_g = true;
  SslModel model(cfg, 23);
  std::string p1 = tmp_path("nsa_model_a.nsam");
  std::string p2 = tmp_path("nsa_model_b.nsam");
  model.save(p1);
  SslModel loaded = SslModel::load(p1);
  EXPECT_EQ(loaded.param_hash(), model.param_hash());
  EXPECT_EQ(loaded.config().method, cfg.method);
  EXPECT_EQ(loaded.config().norm_f, true);
  loaded.save(p2);
  std::ifstream a(p1, std::ios::binary), b(p2, std::ios::binary);
  std::vector<char> ba{std::istreambuf_iterator<char>(a), {}};
  std::vector<char> bb{std::istreambuf_iterator<char>(b), {}};
  EXPECT_EQ(ba, bb);
  // Loaded model computes identical activations.
  Tensor batch = random_batch(2, 3, 16, 9);
  auto t1 = model.forward_trace(batch, SslModel::Mode::Eval);
  auto t2 = loaded.forward_trace(batch, SslModel::Mode::Eval);
  for (int64_t i = 0; i < t1.projection.size(); ++i)
    EXPECT_EQ(t1.projection.value()[size_t(i)], t2.projection.value()[size_t(i)]);
  std::remove(p1.c_str());
  std::remove(p2.c_str());
}

TEST(Checkpoint, CorruptionDetected) {
  SslModel model(ModelConfig{}, 29);
  std::string path = tmp_path("nsa_model_corrupt.nsam");
  model.save(path);
  std::ifstream is(path, std::ios::binary);
  std::vector<char> bytes{std::istreambuf_iterator<char>(is), {}};
  is.close();
  std::ofstream os(path, std::ios::binary);
  os.write(bytes.data(), std::streamsize(bytes.size() - 64));
  os.close();
  EXPECT_THROW(SslModel::load(path), FormatError);
  std::ofstream os2(path, std::ios::binary);
  os2 << "NOPE";
  os2.close();
  EXPECT_THROW(SslModel::load(path), FormatError);
  std::remove(path.c_str());
}

TEST(CollapseStd, DistinguishesCollapsedBatches) {
  Rng rng(31);
  Tensor healthy = Tensor::randn({16, 8}, rng);
  EXPECT_GT(collapse_std(healthy), 0.5);
  Tensor collapsed = Tensor::zeros({16, 8});
  for (int64_t i = 0; i < 16; ++i)
    for (int64_t j = 0; j < 8; ++j) collapsed.value()[size_t(i * 8 + j)] = float(j);
  EXPECT_NEAR(collapse_std(collapsed), 0.0, 1e-9);
}

TEST(FeatureMapNames, RoundTrip) {
  for (FeatureMap m :
       {FeatureMap::ConvBlock1, FeatureMap::ConvBlock3Pooled,
        FeatureMap::HeadLayer2, FeatureMap::EncoderOutput}) {
    EXPECT_EQ(parse_feature_map(feature_map_name(m)), m);
  }
  EXPECT_THROW(parse_feature_map("bogus"), ConfigError);
  EXPECT_TRUE(is_2d_map(FeatureMap::ConvBlock2));
  EXPECT_FALSE(is_2d_map(FeatureMap::ConvBlock2Pooled));
  EXPECT_FALSE(is_2d_map(FeatureMap::EncoderOutput));
}
