#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "binfm/common.hpp"

namespace binfm::pe {

constexpr uint16_t kMachineI386 = 0x014C;
constexpr uint16_t kMachineAmd64 = 0x8664;

constexpr uint32_t kSectionExecutable = 0x20000000;
constexpr uint32_t kSectionReadable = 0x40000000;
constexpr uint32_t kSectionWritable = 0x80000000;

struct SectionInfo {
  std::string name;  // up to 8 bytes, NUL-trimmed
  uint32_t virtual_address = 0;
  uint32_t virtual_size = 0;
  uint32_t raw_offset = 0;
  uint32_t raw_size = 0;
  uint32_t characteristics = 0;

  bool executable() const { return (characteristics & kSectionExecutable) != 0; }
  bool readable() const { return (characteristics & kSectionReadable) != 0; }
  bool writable() const { return (characteristics & kSectionWritable) != 0; }

  /// Loader convention: a zero VirtualSize falls back to the raw size.
  uint32_t effective_virtual_size() const { return virtual_size != 0 ? virtual_size : raw_size; }

  bool contains_rva(uint32_t rva) const {
    return rva >= virtual_address &&
           static_cast<uint64_t>(rva) < static_cast<uint64_t>(virtual_address) + effective_virtual_size();
  }
};

struct PeImage {
  uint16_t machine_type = 0;
  uint32_t entry_point_rva = 0;
  std::vector<SectionInfo> sections;
  uint64_t total_size_bytes = 0;
};

struct CodeSection {
  std::vector<uint8_t> bytes;
  std::string source_section_name;
  double entropy_bits = 0.0;
};

/// Decodes the DOS/COFF/optional headers and the section table of a
/// 32-bit PE file. Section contents are not copied. Throws
/// MalformedHeader on bad magic, truncation, or raw ranges beyond the
/// file end; such samples are dropped from the corpus.
PeImage parse_pe(std::span<const uint8_t> file_bytes);

bool is_x86_32(const PeImage& image);

/// Returns the raw file bytes of the section whose virtual range
/// contains the entry point. If several sections contain it, the first
/// in section-table order wins and *multiple_matches is set. Throws
/// EntryOutsideSections when no section contains the entry point.
CodeSection extract_code_section(const PeImage& image, std::span<const uint8_t> file_bytes,
                                 bool* multiple_matches = nullptr);

/// Flag-gated extension: concatenated raw bytes of every readable and
/// executable section, in table order.
CodeSection extract_executable_sections(const PeImage& image, std::span<const uint8_t> file_bytes);

/// -sum p(b) log2 p(b) over the 256 byte values, in [0, 8].
double shannon_entropy(std::span<const uint8_t> bytes);

}  // namespace binfm::pe
