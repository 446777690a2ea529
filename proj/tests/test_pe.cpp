#include <doctest.h>

#include <algorithm>

#include "binfm/pe.hpp"
#include "fixtures.hpp"

using namespace binfm;
using fixtures::PeBuilder;
using fixtures::PeSection;

namespace {

PeBuilder one_text_section() {
  PeBuilder b;
  b.entry_rva = 0x1010;
  b.sections.push_back({".text", 0x1000, 0x1000, 0x60000020, fixtures::synthetic_code(0x300)});
  return b;
}

}  // namespace

TEST_CASE("parse_pe decodes a minimal one-section image") {
  const auto file = one_text_section().build();
  const pe::PeImage image = pe::parse_pe(file);
  CHECK(image.machine_type == pe::kMachineI386);
  CHECK(image.entry_point_rva == 0x1010);
  CHECK(image.total_size_bytes == file.size());
  REQUIRE(image.sections.size() == 1);
  const pe::SectionInfo& s = image.sections[0];
  CHECK(s.name == ".text");
  CHECK(s.virtual_address == 0x1000);
  CHECK(s.raw_offset == 0x200);
  CHECK(s.raw_size == 0x300);
  CHECK(s.executable());
  CHECK(s.readable());
  CHECK(!s.writable());
  CHECK(s.contains_rva(image.entry_point_rva));
}

TEST_CASE("parse_pe rejects malformed inputs with MalformedHeader") {
  auto expect_malformed = [](const std::vector<uint8_t>& file) {
    CHECK_THROWS_WITH_AS(pe::parse_pe(file), doctest::Contains("MalformedHeader"), Error);
  };
  SUBCASE("zero-length input") { expect_malformed({}); }
  SUBCASE("bad DOS magic") {
    auto b = one_text_section();
    b.bad_dos_magic = true;
    expect_malformed(b.build());
  }
  SUBCASE("bad PE signature") {
    auto b = one_text_section();
    b.bad_pe_signature = true;
    expect_malformed(b.build());
  }
  SUBCASE("section raw data beyond file end") {
    auto b = one_text_section();
    b.raw_size_excess = 0x1000;
    expect_malformed(b.build());
  }
  SUBCASE("truncated section table") {
    auto file = one_text_section().build();
    file.resize(0x60);
    expect_malformed(file);
  }
}

TEST_CASE("is_x86_32 keys on the COFF machine id") {
  auto b = one_text_section();
  CHECK(pe::is_x86_32(pe::parse_pe(b.build())));
  b.machine = pe::kMachineAmd64;
  CHECK(!pe::is_x86_32(pe::parse_pe(b.build())));
  b.machine = 0x0000;
  CHECK(!pe::is_x86_32(pe::parse_pe(b.build())));
}

TEST_CASE("extract_code_section returns the entry section bytes bit-exactly") {
  const auto builder = one_text_section();
  const auto file = builder.build();
  const pe::PeImage image = pe::parse_pe(file);
  const pe::CodeSection code = pe::extract_code_section(image, file);
  CHECK(code.source_section_name == ".text");
  REQUIRE(code.bytes.size() == builder.sections[0].payload.size());
  CHECK(code.bytes == builder.sections[0].payload);
  // round-trip locality: output equals the manual file slice
  const pe::SectionInfo& s = image.sections[0];
  const std::vector<uint8_t> slice(file.begin() + s.raw_offset,
                                   file.begin() + s.raw_offset + s.raw_size);
  CHECK(code.bytes == slice);
  CHECK(code.entropy_bits == doctest::Approx(pe::shannon_entropy(code.bytes)));
}

TEST_CASE("extract_code_section picks the section containing the entry point") {
  PeBuilder b;
  b.sections.push_back({".text", 0x1000, 0x1000, 0x60000020, fixtures::synthetic_code(0x200, 1)});
  b.sections.push_back({".code2", 0x2000, 0x1000, 0x60000020, fixtures::synthetic_code(0x200, 2)});
  b.entry_rva = 0x2004;  // inside the second executable section
  const auto file = b.build();
  const pe::PeImage image = pe::parse_pe(file);
  const pe::CodeSection code = pe::extract_code_section(image, file);
  CHECK(code.source_section_name == ".code2");
  CHECK(code.bytes == b.sections[1].payload);
}

TEST_CASE("extract_code_section flags overlapping matches and picks table order") {
  PeBuilder b;
  b.sections.push_back({".a", 0x1000, 0x2000, 0x60000020, fixtures::synthetic_code(0x200, 3)});
  b.sections.push_back({".b", 0x2000, 0x1000, 0x60000020, fixtures::synthetic_code(0x200, 4)});
  b.entry_rva = 0x2008;  // virtual ranges of .a and .b both contain it
  const auto file = b.build();
  bool multiple = false;
  const pe::CodeSection code = pe::extract_code_section(pe::parse_pe(file), file, &multiple);
  CHECK(multiple);
  CHECK(code.source_section_name == ".a");
}

TEST_CASE("extract_code_section reports an entry outside every section") {
  auto b = one_text_section();
  b.entry_rva = 0x9000;
  const auto file = b.build();
  CHECK_THROWS_WITH_AS(pe::extract_code_section(pe::parse_pe(file), file),
                       doctest::Contains("EntryOutsideSections"), Error);
}

TEST_CASE("extract_executable_sections concatenates R+X sections in table order") {
  PeBuilder b;
  b.sections.push_back({".text", 0x1000, 0x1000, 0x60000020, {1, 2, 3}});
  b.sections.push_back({".data", 0x2000, 0x1000, 0xC0000040, {9, 9}});  // read+write, no execute
  b.sections.push_back({".code2", 0x3000, 0x1000, 0x60000020, {4, 5}});
  b.entry_rva = 0x1000;
  const auto file = b.build();
  const pe::CodeSection code = pe::extract_executable_sections(pe::parse_pe(file), file);
  CHECK(code.source_section_name == ".text+.code2");
  CHECK(code.bytes == std::vector<uint8_t>{1, 2, 3, 4, 5});
}

TEST_CASE("shannon_entropy matches the closed forms") {
  SUBCASE("single symbol") {
    const std::vector<uint8_t> zeros(1000, 0x00);
    CHECK(pe::shannon_entropy(zeros) == doctest::Approx(0.0));
  }
  SUBCASE("uniform over all byte values") {
    std::vector<uint8_t> all(256);
    for (int i = 0; i < 256; ++i) all[static_cast<size_t>(i)] = static_cast<uint8_t>(i);
    CHECK(pe::shannon_entropy(all) == doctest::Approx(8.0));
  }
  SUBCASE("two equiprobable symbols") {
    const std::vector<uint8_t> aabb = {'a', 'a', 'b', 'b'};
    CHECK(pe::shannon_entropy(aabb) == doctest::Approx(1.0));
  }
  SUBCASE("empty input") {
    CHECK_THROWS_WITH_AS(pe::shannon_entropy({}), doctest::Contains("EmptyInput"), Error);
  }
}

TEST_CASE("entropy is bounded and permutation-invariant") {
  Rng rng(2024);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<uint8_t> bytes(1 + rng.below(4096));
    for (auto& b : bytes) b = static_cast<uint8_t>(rng.below(rng.below(255) + 1));
    const double h = pe::shannon_entropy(bytes);
    CHECK(h >= 0.0);
    CHECK(h <= 8.0);
    std::vector<uint8_t> shuffled = bytes;
    rng.shuffle(shuffled);
    CHECK(pe::shannon_entropy(shuffled) == h);  // histogram-identical, bit-exact
  }
}

TEST_CASE("parsing is total: every input yields a PeImage or a typed error") {
  Rng rng(99);
  int parsed = 0, rejected = 0;
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<uint8_t> junk(rng.below(2048));
    for (auto& b : junk) b = static_cast<uint8_t>(rng.below(256));
    try {
      (void)pe::parse_pe(junk);
      ++parsed;
    } catch (const Error& e) {
      CHECK(e.code() == Errc::malformed_header);
      ++rejected;
    }
  }
  CHECK(parsed + rejected == 200);
}
