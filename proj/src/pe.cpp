#include "binfm/pe.hpp"

#include <array>
#include <cmath>
#include <cstring>

namespace binfm::pe {

namespace {

constexpr uint16_t kDosMagic = 0x5A4D;       // "MZ"
constexpr uint32_t kPeSignature = 0x00004550; // "PE\0\0"
constexpr uint16_t kOptionalMagicPe32 = 0x10B;
constexpr uint16_t kOptionalMagicPe32Plus = 0x20B;
constexpr size_t kSectionHeaderSize = 40;

uint16_t rd16(std::span<const uint8_t> b, size_t off) {
  return static_cast<uint16_t>(b[off] | (b[off + 1] << 8));
}

uint32_t rd32(std::span<const uint8_t> b, size_t off) {
  return static_cast<uint32_t>(b[off]) | (static_cast<uint32_t>(b[off + 1]) << 8) |
         (static_cast<uint32_t>(b[off + 2]) << 16) | (static_cast<uint32_t>(b[off + 3]) << 24);
}

void need(std::span<const uint8_t> b, size_t off, size_t n, const char* what) {
  if (off + n > b.size() || off + n < off) {
    raise(Errc::malformed_header, std::string("truncated ") + what);
  }
}

}  // namespace

PeImage parse_pe(std::span<const uint8_t> file_bytes) {
  if (file_bytes.empty()) raise(Errc::malformed_header, "empty input");

  need(file_bytes, 0, 0x40, "DOS header");
  if (rd16(file_bytes, 0) != kDosMagic) raise(Errc::malformed_header, "bad DOS magic");
  const uint32_t pe_offset = rd32(file_bytes, 0x3C);

  need(file_bytes, pe_offset, 4 + 20, "COFF header");
  if (rd32(file_bytes, pe_offset) != kPeSignature) raise(Errc::malformed_header, "bad PE signature");

  const size_t coff = pe_offset + 4;
  PeImage image;
  image.machine_type = rd16(file_bytes, coff + 0);
  image.total_size_bytes = file_bytes.size();
  const uint16_t n_sections = rd16(file_bytes, coff + 2);
  const uint16_t opt_size = rd16(file_bytes, coff + 16);
  if (n_sections == 0) raise(Errc::malformed_header, "no sections");
  if (opt_size < 24) raise(Errc::malformed_header, "optional header too small");

  const size_t opt = coff + 20;
  need(file_bytes, opt, opt_size, "optional header");
  const uint16_t opt_magic = rd16(file_bytes, opt);
  if (opt_magic != kOptionalMagicPe32 && opt_magic != kOptionalMagicPe32Plus) {
    raise(Errc::malformed_header, "unknown optional header magic");
  }
  image.entry_point_rva = rd32(file_bytes, opt + 16);

  size_t table = opt + opt_size;
  need(file_bytes, table, kSectionHeaderSize * n_sections, "section table");
  image.sections.reserve(n_sections);
  for (uint16_t i = 0; i < n_sections; ++i) {
    const size_t s = table + static_cast<size_t>(i) * kSectionHeaderSize;
    SectionInfo sec;
    char name[9] = {};
    std::memcpy(name, file_bytes.data() + s, 8);
    sec.name = name;
    sec.virtual_size = rd32(file_bytes, s + 8);
    sec.virtual_address = rd32(file_bytes, s + 12);
    sec.raw_size = rd32(file_bytes, s + 16);
    sec.raw_offset = rd32(file_bytes, s + 20);
    sec.characteristics = rd32(file_bytes, s + 36);
    const uint64_t raw_end = static_cast<uint64_t>(sec.raw_offset) + sec.raw_size;
    if (raw_end > file_bytes.size()) {
      raise(Errc::malformed_header, "section '" + sec.name + "' raw data beyond file end");
    }
    image.sections.push_back(std::move(sec));
  }
  return image;
}

bool is_x86_32(const PeImage& image) { return image.machine_type == kMachineI386; }

CodeSection extract_code_section(const PeImage& image, std::span<const uint8_t> file_bytes,
                                 bool* multiple_matches) {
  const SectionInfo* chosen = nullptr;
  int matches = 0;
  for (const SectionInfo& sec : image.sections) {
    if (sec.contains_rva(image.entry_point_rva)) {
      ++matches;
      if (chosen == nullptr) chosen = &sec;
    }
  }
  if (multiple_matches != nullptr) *multiple_matches = matches > 1;
  if (chosen == nullptr) {
    raise(Errc::entry_outside_sections, "entry point RVA lies outside every section");
  }

  CodeSection out;
  out.source_section_name = chosen->name;
  out.bytes.assign(file_bytes.begin() + chosen->raw_offset,
                   file_bytes.begin() + chosen->raw_offset + chosen->raw_size);
  out.entropy_bits = out.bytes.empty() ? 0.0 : shannon_entropy(out.bytes);
  return out;
}

CodeSection extract_executable_sections(const PeImage& image, std::span<const uint8_t> file_bytes) {
  CodeSection out;
  for (const SectionInfo& sec : image.sections) {
    if (!sec.readable() || !sec.executable()) continue;
    if (!out.source_section_name.empty()) out.source_section_name += "+";
    out.source_section_name += sec.name;
    out.bytes.insert(out.bytes.end(), file_bytes.begin() + sec.raw_offset,
                     file_bytes.begin() + sec.raw_offset + sec.raw_size);
  }
  if (out.bytes.empty()) raise(Errc::entry_outside_sections, "no readable+executable sections");
  out.entropy_bits = shannon_entropy(out.bytes);
  return out;
}

double shannon_entropy(std::span<const uint8_t> bytes) {
  if (bytes.empty()) raise(Errc::empty_input, "entropy of empty byte sequence");
  std::array<uint64_t, 256> counts{};
  for (uint8_t b : bytes) ++counts[b];
  const double n = static_cast<double>(bytes.size());
  double h = 0.0;
  for (uint64_t c : counts) {
    if (c == 0) continue;
    const double p = static_cast<double>(c) / n;
    h -= p * std::log2(p);
  }
  return h;
}

}  // namespace binfm::pe
