#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "nsa/common.hpp"

namespace nsa {

/// N x d feature matrix with per-row labels. `outlier` rows mark ground-truth
/// OOD samples; `class_ids` keep the generating class for probe evaluation.
struct EmbeddingSet {
  int64_t n = 0;
  int64_t d = 0;
  std::vector<float> data;        // row-major
  std::vector<uint8_t> outlier;   // 0 = inlier, 1 = outlier (optional)
  std::vector<int32_t> class_ids; // optional
  std::string feature_map;
  std::string checkpoint;

  std::span<const float> row(int64_t i) const {
    return {data.data() + i * d, size_t(d)};
  }

  void validate() const {
    if (int64_t(data.size()) != n * d)
      throw ShapeError("embedding set: buffer size mismatch");
    if (!outlier.empty() && int64_t(outlier.size()) != n)
      throw ShapeError("embedding set: outlier label count mismatch");
    if (!class_ids.empty() && int64_t(class_ids.size()) != n)
      throw ShapeError("embedding set: class id count mismatch");
    for (float v : data)
      if (!std::isfinite(v))
        throw Error("embedding set contains NaN/Inf values");
  }

  std::string content_hash() const {
    return hash_hex(fnv1a64(data.data(), data.size() * sizeof(float)));
  }

  // NSAE: magic, version u32, N u64, d u64, N*d f32 row-major payload, then
  // u32 metadata length + UTF-8 JSON metadata; all little-endian.
  void save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot open " + path + " for writing");
    os.write("NSAE", 4);
    detail::write_le<uint32_t>(os, 1);
    detail::write_le<uint64_t>(os, uint64_t(n));
    detail::write_le<uint64_t>(os, uint64_t(d));
    detail::write_f32_le(os, data);
    nlohmann::json meta{{"feature_map", feature_map},
                        {"checkpoint", checkpoint},
                        {"outlier", outlier},
                        {"class_ids", class_ids}};
    std::string m = meta.dump();
    detail::write_le<uint32_t>(os, uint32_t(m.size()));
    os.write(m.data(), std::streamsize(m.size()));
    if (!os) throw Error("short write to " + path);
  }

  static EmbeddingSet load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("cannot open " + path);
    int64_t off = 0;
    char magic[4];
    detail::read_exact(is, magic, 4, off, "magic");
    if (std::string(magic, 4) != "NSAE")
      throw FormatError("bad magic, expected NSAE", 0);
    uint32_t version = detail::read_le<uint32_t>(is, off, "version");
    if (version != 1)
      throw FormatError("unsupported NSAE version " + std::to_string(version), 4);
    EmbeddingSet e;
    e.n = int64_t(detail::read_le<uint64_t>(is, off, "row count"));
    e.d = int64_t(detail::read_le<uint64_t>(is, off, "dimension"));
    e.data.resize(size_t(e.n * e.d));
    detail::read_f32_le(is, e.data, off, "payload");
    uint32_t meta_len = detail::read_le<uint32_t>(is, off, "metadata length");
    std::string m(meta_len, '\0');
    detail::read_exact(is, m.data(), meta_len, off, "metadata");
    try {
      auto meta = nlohmann::json::parse(m);
      e.feature_map = meta.value("feature_map", "");
      e.checkpoint = meta.value("checkpoint", "");
      if (meta.contains("outlier"))
        e.outlier = meta["outlier"].get<std::vector<uint8_t>>();
      if (meta.contains("class_ids"))
        e.class_ids = meta["class_ids"].get<std::vector<int32_t>>();
    } catch (const nlohmann::json::exception& ex) {
      throw FormatError(std::string("bad metadata JSON: ") + ex.what(),
                        off - int64_t(meta_len));
    }
    e.validate();
    return e;
  }
};

}  // namespace nsa
