#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace binfm {

enum class Errc {
  malformed_header,
  entry_outside_sections,
  empty_input,
  insufficient_data,
  unknown_token_id,
  corrupt_model_file,
  too_few_samples,
  empty_dataset,
  parse_error,
  no_maskable_tokens,
  step_out_of_range,
  id_out_of_range,
  duplicate_api_name,
  no_mask_present,
  empty_document,
  too_few_chunks,
  single_class_input,
  invalid_config,
  io_error,
};

std::string_view errc_name(Errc code);

class Error : public std::runtime_error {
public:
  Error(Errc code, const std::string& msg)
      : std::runtime_error(std::string(errc_name(code)) + ": " + msg), code_(code) {}

  Errc code() const noexcept { return code_; }

private:
  Errc code_;
};

[[noreturn]] inline void raise(Errc code, const std::string& msg) { throw Error(code, msg); }

/// Deterministic RNG with hand-rolled transforms so streams are stable
/// across standard-library implementations. mt19937_64 core.
class Rng {
public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  /// Uniform double in [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  /// Standard normal via Box-Muller (spare cached).
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  /// Normal(0, stddev) resampled until within +/- bound_sigmas standard deviations.
  double truncated_normal(double stddev, double bound_sigmas = 2.0) {
    double z = 0.0;
    do {
      z = normal();
    } while (z < -bound_sigmas || z > bound_sigmas);
    return z * stddev;
  }

  /// Uniform integer in [0, n). Rejection sampling, unbiased.
  uint64_t below(uint64_t n) {
    if (n == 0) raise(Errc::invalid_config, "Rng::below(0)");
    const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t x = 0;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      const size_t j = static_cast<size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// Derives a child seed from a base seed and a stage name (FNV-1a mix),
/// so every randomized pipeline stage gets an independent stream.
uint64_t derive_seed(uint64_t base, std::string_view stage);

// ---- file and encoding helpers ----

std::vector<uint8_t> read_file_bytes(const std::string& path);
std::string read_file_text(const std::string& path);

/// Write-temp-then-rename so partially written artifacts are never observed.
void write_file_atomic(const std::string& path, const void* data, size_t size);
void write_file_atomic(const std::string& path, const std::vector<uint8_t>& bytes);
void write_file_atomic(const std::string& path, const std::string& text);

std::string to_hex(const uint8_t* data, size_t size);
std::vector<uint8_t> from_hex(std::string_view hex);

std::string md5_hex(const uint8_t* data, size_t size);
std::string md5_hex(const std::vector<uint8_t>& bytes);

/// FNV-1a over a string, used for config provenance digests.
uint64_t fnv1a64(std::string_view text);

// ---- little-endian binary stream helpers for model/checkpoint files ----

class BinWriter {
public:
  void u8(uint8_t v) { buf_.push_back(v); }
  void u32(uint32_t v);
  void u64(uint64_t v);
  void i64(int64_t v) { u64(static_cast<uint64_t>(v)); }
  void f64(double v);
  void str(std::string_view s);
  void bytes(const void* data, size_t size);
  const std::vector<uint8_t>& buffer() const { return buf_; }

private:
  std::vector<uint8_t> buf_;
};

class BinReader {
public:
  BinReader(const uint8_t* data, size_t size) : data_(data), size_(size) {}
  explicit BinReader(const std::vector<uint8_t>& bytes) : BinReader(bytes.data(), bytes.size()) {}

  uint8_t u8();
  uint32_t u32();
  uint64_t u64();
  int64_t i64() { return static_cast<int64_t>(u64()); }
  double f64();
  std::string str();
  void raw(void* out, size_t size);
  size_t remaining() const { return size_ - pos_; }
  size_t pos() const { return pos_; }

private:
  void need(size_t n);
  const uint8_t* data_;
  size_t size_;
  size_t pos_ = 0;
};

}  // namespace binfm
