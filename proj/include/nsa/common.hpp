#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <istream>
#include <numbers>
#include <ostream>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace nsa {

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shape/dimension mismatch between tensors or matrices.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration value (stride, temperature, flags, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed or truncated file. Carries the byte offset of the failure.
class FormatError : public Error {
 public:
  FormatError(const std::string& msg, int64_t offset)
      : Error(msg + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}
  int64_t offset() const { return offset_; }

 private:
  int64_t offset_;
};

/// Training diverged (NaN loss). Carries the epoch index.
class TrainError : public Error {
 public:
  TrainError(const std::string& msg, int epoch)
      : Error(msg + " (epoch " + std::to_string(epoch) + ")"), epoch_(epoch) {}
  int epoch() const { return epoch_; }

 private:
  int epoch_;
};

class SingularityError : public Error {
 public:
  using Error::Error;
};

class DegenerateRangeError : public Error {
 public:
  using Error::Error;
};

class DegenerateKernelError : public Error {
 public:
  using Error::Error;
};

class InsufficientSamplesError : public Error {
 public:
  using Error::Error;
};

class UndefinedMetricError : public Error {
 public:
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Deterministic RNG
//
// std::mt19937_64 is exactly specified by the standard; all distribution
// transforms below are hand-rolled so that streams are bit-identical across
// platforms and standard-library versions.
// ---------------------------------------------------------------------------

class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  /// Uniform double in [0, 1).
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  float uniform(float lo, float hi) {
    return lo + (hi - lo) * float(uniform());
  }

  /// Standard normal via Box-Muller (second value cached).
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double th = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(th);
    has_spare_ = true;
    return r * std::cos(th);
  }

  /// Uniform integer in [0, n). n must be positive.
  int64_t below(int64_t n) {
    // Lemire multiply-shift; bias-free enough for any desk-scale n and
    // fully deterministic.
    return int64_t((static_cast<unsigned __int128>(next_u64()) *
                    static_cast<unsigned __int128>(n)) >>
                   64);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (int64_t i = int64_t(v.size()) - 1; i > 0; --i) {
      std::swap(v[size_t(i)], v[size_t(below(i + 1))]);
    }
  }

  /// Mixes a stream id into a seed (splitmix64 finalizer) so that derived
  /// streams (per epoch, per sample, per view) are decorrelated.
  static uint64_t mix(uint64_t seed, uint64_t stream) {
    uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }
  static uint64_t mix(uint64_t seed, uint64_t a, uint64_t b) {
    return mix(mix(seed, a), b);
  }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// ---------------------------------------------------------------------------
// Content hashing (FNV-1a 64) for run manifests
// ---------------------------------------------------------------------------

inline uint64_t fnv1a64(const void* data, size_t len, uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hash_hex(uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

inline std::string content_hash(std::span<const uint8_t> bytes) {
  return hash_hex(fnv1a64(bytes.data(), bytes.size()));
}

// ---------------------------------------------------------------------------
// Little-endian binary IO (explicit byte order regardless of host)
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void write_le(std::ostream& os, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char bytes[sizeof(T)];
  if constexpr (std::is_floating_point_v<T>) {
    using U = std::conditional_t<sizeof(T) == 4, uint32_t, uint64_t>;
    U u;
    std::memcpy(&u, &v, sizeof(T));
    for (size_t i = 0; i < sizeof(T); ++i) bytes[i] = (u >> (8 * i)) & 0xFF;
  } else {
    auto u = static_cast<std::make_unsigned_t<T>>(v);
    for (size_t i = 0; i < sizeof(T); ++i)
      bytes[i] = static_cast<unsigned char>((u >> (8 * i)) & 0xFF);
  }
  os.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

inline void read_exact(std::istream& is, void* dst, size_t len, int64_t& offset,
                       const char* what) {
  is.read(static_cast<char*>(dst), std::streamsize(len));
  if (size_t(is.gcount()) != len) {
    throw FormatError(std::string("truncated file while reading ") + what +
                          ": expected " + std::to_string(len) + " bytes, got " +
                          std::to_string(is.gcount()),
                      offset);
  }
  offset += int64_t(len);
}

template <typename T>
T read_le(std::istream& is, int64_t& offset, const char* what) {
  unsigned char bytes[sizeof(T)];
  read_exact(is, bytes, sizeof(T), offset, what);
  if constexpr (std::is_floating_point_v<T>) {
    using U = std::conditional_t<sizeof(T) == 4, uint32_t, uint64_t>;
    U u = 0;
    for (size_t i = 0; i < sizeof(T); ++i) u |= U(bytes[i]) << (8 * i);
    T v;
    std::memcpy(&v, &u, sizeof(T));
    return v;
  } else {
    using U = std::make_unsigned_t<T>;
    U u = 0;
    for (size_t i = 0; i < sizeof(T); ++i) u |= U(bytes[i]) << (8 * i);
    return static_cast<T>(u);
  }
}

inline void write_f32_le(std::ostream& os, std::span<const float> v) {
  for (float f : v) write_le<float>(os, f);
}

inline void read_f32_le(std::istream& is, std::span<float> v, int64_t& offset,
                        const char* what) {
  for (float& f : v) f = read_le<float>(is, offset, what);
}

}  // namespace detail

}  // namespace nsa
