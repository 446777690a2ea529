// Shared test fixtures: a minimal PE-image builder and a synthetic
// structured byte corpus used across suites.
#pragma once

#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "binfm/common.hpp"

namespace fixtures {

struct PeSection {
  std::string name;
  uint32_t virtual_address = 0;
  uint32_t virtual_size = 0;
  uint32_t characteristics = 0x60000020;  // code | execute | read
  std::vector<uint8_t> payload;
};

/// Assembles a minimal PE32 image: DOS header, PE signature, COFF header,
/// 0xE0-byte optional header, section table, and raw section data at
/// 0x200-aligned offsets. Offsets verified against the PE/COFF layout.
struct PeBuilder {
  uint16_t machine = 0x014C;
  uint32_t entry_rva = 0;
  std::vector<PeSection> sections;
  // overrides for malformed fixtures
  bool bad_dos_magic = false;
  bool bad_pe_signature = false;
  int32_t raw_size_excess = 0;  // claims this many bytes past the payload

  std::vector<uint8_t> build() const {
    auto put16 = [](std::vector<uint8_t>& b, size_t off, uint16_t v) {
      b[off] = static_cast<uint8_t>(v);
      b[off + 1] = static_cast<uint8_t>(v >> 8);
    };
    auto put32 = [](std::vector<uint8_t>& b, size_t off, uint32_t v) {
      for (int i = 0; i < 4; ++i) b[off + i] = static_cast<uint8_t>(v >> (8 * i));
    };

    const size_t n = sections.size();
    const size_t opt_size = 0xE0;
    const size_t headers_end = 0x40 + 4 + 20 + opt_size + 40 * n;
    size_t raw_cursor = (headers_end + 0x1FF) & ~size_t{0x1FF};

    std::vector<size_t> raw_offsets;
    size_t total = raw_cursor;
    for (const PeSection& s : sections) {
      raw_offsets.push_back(total);
      total += (s.payload.size() + 0x1FF) & ~size_t{0x1FF};
    }

    std::vector<uint8_t> file(total, 0);
    put16(file, 0, bad_dos_magic ? 0x4141 : 0x5A4D);  // "MZ"
    put32(file, 0x3C, 0x40);
    put32(file, 0x40, bad_pe_signature ? 0x41414141 : 0x00004550);  // "PE\0\0"
    const size_t coff = 0x44;
    put16(file, coff + 0, machine);
    put16(file, coff + 2, static_cast<uint16_t>(n));
    put16(file, coff + 16, static_cast<uint16_t>(opt_size));
    const size_t opt = coff + 20;
    put16(file, opt, 0x10B);  // PE32
    put32(file, opt + 16, entry_rva);
    put32(file, opt + 28, 0x400000);  // image base

    const size_t table = opt + opt_size;
    for (size_t i = 0; i < n; ++i) {
      const size_t s = table + i * 40;
      const PeSection& sec = sections[i];
      std::memcpy(file.data() + s, sec.name.data(), std::min<size_t>(8, sec.name.size()));
      put32(file, s + 8, sec.virtual_size);
      put32(file, s + 12, sec.virtual_address);
      put32(file, s + 16, static_cast<uint32_t>(sec.payload.size()) +
                              static_cast<uint32_t>(raw_size_excess));
      put32(file, s + 20, static_cast<uint32_t>(raw_offsets[i]));
      put32(file, s + 36, sec.characteristics);
      std::memcpy(file.data() + raw_offsets[i], sec.payload.data(), sec.payload.size());
    }
    return file;
  }
};

inline std::vector<uint8_t> pattern_bytes(size_t n, uint32_t seed = 7) {
  binfm::Rng rng(seed);
  std::vector<uint8_t> out(n);
  for (size_t i = 0; i < n; ++i) out[i] = static_cast<uint8_t>(rng.below(256));
  return out;
}

/// Structured synthetic "code" corpus: instruction-like motifs from a
/// small alphabet with occasional noise, deterministic per seed. Low
/// entropy and heavy pair repetition, so BPE finds plenty of merges.
inline std::vector<uint8_t> synthetic_code(size_t n, uint64_t seed = 42) {
  binfm::Rng rng(seed);
  static const std::vector<std::vector<uint8_t>> motifs = {
      {0x55, 0x8B, 0xEC},                    // prologue-like
      {0x8B, 0x45, 0x08},                    // load-like
      {0xFF, 0x15, 0x20, 0x30},              // call-like
      {0x83, 0xC4, 0x04},                    // stack-adjust-like
      {0xC3},                                // ret-like
      {0x90, 0x90},                          // nop pad
      {0x6A, 0x00, 0x6A, 0x01},              // push-args-like
      {0x33, 0xC0, 0x5D},                    // clear-return-like
  };
  std::vector<uint8_t> out;
  out.reserve(n + 8);
  while (out.size() < n) {
    if (rng.uniform() < 0.92) {
      const auto& m = motifs[rng.below(motifs.size())];
      out.insert(out.end(), m.begin(), m.end());
    } else {
      out.push_back(static_cast<uint8_t>(rng.below(256)));
    }
  }
  out.resize(n);
  return out;
}

}  // namespace fixtures
