#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "nsa/augment.hpp"
#include "nsa/dataset.hpp"
#include "nsa/embedding.hpp"
#include "nsa/eval.hpp"

using namespace nsa;

namespace {

std::string tmp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

std::vector<char> read_all(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST(SynthDataset, DeterministicPerSeed) {
  ImageDataset a = synth_dataset(SynthKind::Blobs, 4, 8, 16, 99);
  ImageDataset b = synth_dataset(SynthKind::Blobs, 4, 8, 16, 99);
  EXPECT_EQ(a.content_hash(), b.content_hash());
  ImageDataset c = synth_dataset(SynthKind::Blobs, 4, 8, 16, 100);
  EXPECT_NE(a.content_hash(), c.content_hash());
}

TEST(SynthDataset, BlobsLinearlySeparableUnderRandomProjection) {
  ImageDataset ds = synth_dataset(SynthKind::Blobs, 4, 64, 16, 5);
  // Fixed random projection of raw pixels to 32 dims, then a linear probe.
  int64_t in_dim = ds.image_size(), out_dim = 32;
  Rng rng(12345);
  std::vector<float> proj(size_t(in_dim * out_dim));
  for (auto& v : proj) v = float(rng.normal()) / std::sqrt(float(in_dim));
  auto project = [&](std::span<const uint8_t> img, float* dst) {
    for (int64_t k = 0; k < out_dim; ++k) {
      double acc = 0.0;
      for (int64_t j = 0; j < in_dim; ++j)
        acc += double(img[size_t(j)]) / 255.0 * double(proj[size_t(j * out_dim + k)]);
      dst[k] = float(acc);
    }
  };
  EmbeddingSet train, test;
  train.d = test.d = out_dim;
  for (int64_t i = 0; i < ds.count; ++i) {
    std::vector<float> row(size_t(out_dim), 0.0f);
    project(ds.image(i), row.data());
    bool is_test = (i % 2) == 1;
    EmbeddingSet& dst = is_test ? test : train;
    dst.data.insert(dst.data.end(), row.begin(), row.end());
    dst.class_ids.push_back(ds.labels[size_t(i)]);
    dst.n++;
  }
  ProbeResult r = linear_probe(train, test);
  EXPECT_GT(r.accuracy, 0.9);
}

TEST(SynthDataset, RotmixRotationCollidesWithNextClass) {
  ImageDataset ds = synth_dataset(SynthKind::Rotmix, 4, 6, 16, 7);
  int h = ds.height, w = ds.width, c = ds.channels;
  // Independent u8 rotation: class k sample i rotated by 90 degrees must be
  // pixel-identical to class (k+1) mod 4 sample i.
  auto rot90_u8 = [&](std::span<const uint8_t> src, std::vector<uint8_t>& dst) {
    dst.resize(src.size());
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          int sy = x, sx = w - 1 - y;
          dst[size_t((ch * h + y) * w + x)] = src[size_t((ch * h + sy) * w + sx)];
        }
  };
  std::vector<uint8_t> rotated;
  for (int k = 0; k < 4; ++k) {
    for (int64_t i = 0; i < 6; ++i) {
      int64_t src_idx = k * 6 + i;
      int64_t dst_idx = ((k + 1) % 4) * 6 + i;
      rot90_u8(ds.image(src_idx), rotated);
      auto expected = ds.image(dst_idx);
      ASSERT_EQ(rotated.size(), expected.size());
      for (size_t p = 0; p < rotated.size(); ++p)
        ASSERT_EQ(rotated[p], expected[p]) << "class " << k << " sample " << i;
    }
  }
}

TEST(SynthDataset, TexturesAndValidation) {
  ImageDataset ds = synth_dataset(SynthKind::Textures, 4, 8, 16, 3);
  ds.validate();
  EXPECT_EQ(ds.count, 32);
  EXPECT_THROW(synth_dataset(SynthKind::Blobs, 1, 8, 16, 0), ConfigError);
  EXPECT_THROW(synth_dataset(SynthKind::Blobs, 2, 8, 4, 0), ConfigError);
  EXPECT_THROW(synth_dataset(SynthKind::Rotmix, 3, 8, 16, 0), ConfigError);
}

TEST(DatasetFile, RoundTripIsByteExact) {
  ImageDataset ds = synth_dataset(SynthKind::Blobs, 3, 10, 16, 21);
  std::string p1 = tmp_path("nsa_test_a.nsad");
  std::string p2 = tmp_path("nsa_test_b.nsad");
  ds.save(p1);
  ImageDataset loaded = ImageDataset::load(p1);
  EXPECT_EQ(loaded.content_hash(), ds.content_hash());
  EXPECT_EQ(loaded.num_classes, ds.num_classes);
  loaded.save(p2);
  EXPECT_EQ(read_all(p1), read_all(p2));
  std::remove(p1.c_str());
  std::remove(p2.c_str());
}

TEST(DatasetFile, TruncationReportsOffset) {
  ImageDataset ds = synth_dataset(SynthKind::Blobs, 2, 4, 16, 22);
  std::string path = tmp_path("nsa_test_trunc.nsad");
  ds.save(path);
  auto bytes = read_all(path);
  std::ofstream os(path, std::ios::binary);
  os.write(bytes.data(), std::streamsize(bytes.size() / 2));
  os.close();
  try {
    ImageDataset::load(path);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_GT(e.offset(), 0);
    EXPECT_NE(std::string(e.what()).find("expected"), std::string::npos);
  }
  std::remove(path.c_str());
}

TEST(DatasetFile, BadMagicRejected) {
  std::string path = tmp_path("nsa_test_magic.nsad");
  std::ofstream os(path, std::ios::binary);
  os << "XXXX12345678";
  os.close();
  EXPECT_THROW(ImageDataset::load(path), FormatError);
  std::remove(path.c_str());
}

TEST(EmbeddingFile, RoundTripIsByteExact) {
  EmbeddingSet e;
  e.n = 100;
  e.d = 64;
  e.feature_map = "encoder_output";
  e.checkpoint = "abc123";
  Rng rng(31);
  e.data.resize(size_t(e.n * e.d));
  for (auto& v : e.data) v = float(rng.normal());
  e.outlier.resize(size_t(e.n));
  for (auto& o : e.outlier) o = uint8_t(rng.below(2));
  e.class_ids.resize(size_t(e.n));
  for (auto& c : e.class_ids) c = int32_t(rng.below(4));

  std::string p1 = tmp_path("nsa_test_a.nsae");
  std::string p2 = tmp_path("nsa_test_b.nsae");
  e.save(p1);
  EmbeddingSet loaded = EmbeddingSet::load(p1);
  EXPECT_EQ(loaded.data, e.data);
  EXPECT_EQ(loaded.outlier, e.outlier);
  EXPECT_EQ(loaded.class_ids, e.class_ids);
  EXPECT_EQ(loaded.feature_map, e.feature_map);
  EXPECT_EQ(loaded.checkpoint, e.checkpoint);
  loaded.save(p2);
  EXPECT_EQ(read_all(p1), read_all(p2));
  std::remove(p1.c_str());
  std::remove(p2.c_str());
}

TEST(EmbeddingFile, WrittenLittleEndian) {
  // Format contract: payload bytes are little-endian f32 regardless of host.
  EmbeddingSet e;
  e.n = 1;
  e.d = 1;
  e.data = {1.0f};  // 0x3F800000
  std::string path = tmp_path("nsa_test_le.nsae");
  e.save(path);
  auto bytes = read_all(path);
  // magic(4) + version(4) + n(8) + d(8) = offset 24 for the payload.
  ASSERT_GE(bytes.size(), size_t(28));
  EXPECT_EQ(uint8_t(bytes[24]), 0x00);
  EXPECT_EQ(uint8_t(bytes[25]), 0x00);
  EXPECT_EQ(uint8_t(bytes[26]), 0x80);
  EXPECT_EQ(uint8_t(bytes[27]), 0x3F);
  std::remove(path.c_str());
}

TEST(EmbeddingFile, TruncatedPayloadNamesLengths) {
  EmbeddingSet e;
  e.n = 10;
  e.d = 8;
  e.data.assign(80, 0.5f);
  std::string path = tmp_path("nsa_test_trunc.nsae");
  e.save(path);
  auto bytes = read_all(path);
  std::ofstream os(path, std::ios::binary);
  os.write(bytes.data(), 40);  // cuts inside the payload
  os.close();
  try {
    EmbeddingSet::load(path);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e2) {
    std::string msg = e2.what();
    EXPECT_NE(msg.find("expected"), std::string::npos);
    EXPECT_NE(msg.find("got"), std::string::npos);
  }
  std::remove(path.c_str());
}

TEST(Augment, DeterministicPerStream) {
  ImageDataset ds = synth_dataset(SynthKind::Blobs, 2, 4, 16, 3);
  AugmentationPolicy pol;
  std::vector<float> base(size_t(ds.image_size()));
  detail::u8_to_float(ds.image(0), base.data());
  std::vector<float> out1(base.size()), out2(base.size());
  {
    Rng rng(Rng::mix(7, 3, 1));
    augment_image(base.data(), out1.data(), 3, 16, 16, pol, rng);
  }
  {
    Rng rng(Rng::mix(7, 3, 1));
    augment_image(base.data(), out2.data(), 3, 16, 16, pol, rng);
  }
  EXPECT_EQ(out1, out2);
  {
    Rng rng(Rng::mix(7, 3, 2));
    augment_image(base.data(), out2.data(), 3, 16, 16, pol, rng);
  }
  EXPECT_NE(out1, out2);
}

TEST(Augment, OutputStaysInRange) {
  ImageDataset ds = synth_dataset(SynthKind::Textures, 2, 4, 16, 9);
  AugmentationPolicy pol;
  pol.jitter = 0.4f;
  std::vector<float> base(size_t(ds.image_size()));
  detail::u8_to_float(ds.image(1), base.data());
  std::vector<float> out(base.size());
  for (uint64_t s = 0; s < 20; ++s) {
    Rng rng(s);
    augment_image(base.data(), out.data(), 3, 16, 16, pol, rng);
    for (float v : out) {
      EXPECT_GE(v, 0.0f);
      EXPECT_LE(v, 1.0f);
    }
  }
}

TEST(Augment, PolicyValidation) {
  AugmentationPolicy pol;
  pol.crop_scale_min = 0.0f;
  EXPECT_THROW(pol.validate(), ConfigError);
  pol = {};
  pol.hflip_prob = 1.5f;
  EXPECT_THROW(pol.validate(), ConfigError);
  pol = {};
  pol.jitter = 1.0f;
  EXPECT_THROW(pol.validate(), ConfigError);
}

TEST(Augment, RotationDrawsAllQuarters) {
  Rng rng(5);
  std::array<int, 4> seen{0, 0, 0, 0};
  for (int i = 0; i < 200; ++i) seen[size_t(draw_rotation_shift(rng))]++;
  for (int k = 0; k < 4; ++k) EXPECT_GT(seen[size_t(k)], 20);
}
