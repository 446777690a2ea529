#include <doctest.h>

#include <algorithm>
#include <map>

#include "binfm/bpe.hpp"
#include "bpe_oracle.hpp"
#include "fixtures.hpp"

using namespace binfm;

namespace {

std::vector<uint8_t> str_bytes(const char* s) {
  return std::vector<uint8_t>(s, s + std::string(s).size());
}

int32_t byte_id(char c) { return bpe::kFirstByteId + static_cast<uint8_t>(c); }

}  // namespace

// Independently transcribed GPT-2 byte-to-codepoint table.
static const uint32_t kGpt2ByteTable[256] = {
    256, 257, 258, 259, 260, 261, 262, 263, 264, 265, 266, 267,
    268, 269, 270, 271, 272, 273, 274, 275, 276, 277, 278, 279,
    280, 281, 282, 283, 284, 285, 286, 287, 288, 33, 34, 35,
    36, 37, 38, 39, 40, 41, 42, 43, 44, 45, 46, 47,
    48, 49, 50, 51, 52, 53, 54, 55, 56, 57, 58, 59,
    60, 61, 62, 63, 64, 65, 66, 67, 68, 69, 70, 71,
    72, 73, 74, 75, 76, 77, 78, 79, 80, 81, 82, 83,
    84, 85, 86, 87, 88, 89, 90, 91, 92, 93, 94, 95,
    96, 97, 98, 99, 100, 101, 102, 103, 104, 105, 106, 107,
    108, 109, 110, 111, 112, 113, 114, 115, 116, 117, 118, 119,
    120, 121, 122, 123, 124, 125, 126, 289, 290, 291, 292, 293,
    294, 295, 296, 297, 298, 299, 300, 301, 302, 303, 304, 305,
    306, 307, 308, 309, 310, 311, 312, 313, 314, 315, 316, 317,
    318, 319, 320, 321, 322, 161, 162, 163, 164, 165, 166, 167,
    168, 169, 170, 171, 172, 323, 174, 175, 176, 177, 178, 179,
    180, 181, 182, 183, 184, 185, 186, 187, 188, 189, 190, 191,
    192, 193, 194, 195, 196, 197, 198, 199, 200, 201, 202, 203,
    204, 205, 206, 207, 208, 209, 210, 211, 212, 213, 214, 215,
    216, 217, 218, 219, 220, 221, 222, 223, 224, 225, 226, 227,
    228, 229, 230, 231, 232, 233, 234, 235, 236, 237, 238, 239,
    240, 241, 242, 243, 244, 245, 246, 247, 248, 249, 250, 251,
    252, 253, 254, 255};

TEST_CASE("byte_symbol_map matches the GPT-2 reference bijection") {
  const bpe::ByteSymbolMap& map = bpe::byte_symbol_map();
  for (int b = 0; b < 256; ++b) {
    CHECK(map.forward[static_cast<size_t>(b)] == kGpt2ByteTable[b]);
    CHECK(map.reverse.at(map.forward[static_cast<size_t>(b)]) == static_cast<uint8_t>(b));
  }
  CHECK(map.forward[0x41] == 'A');
  CHECK(map.forward[0x00] == 256);
  CHECK(map.forward[0x20] == 288);
}

TEST_CASE("window_corpus splits into non-overlapping 512-byte windows") {
  SUBCASE("exact multiple") {
    const auto w = bpe::window_corpus(std::vector<uint8_t>(1024, 7));
    REQUIRE(w.size() == 2);
    CHECK(w[0].size() == 512);
    CHECK(w[1].size() == 512);
  }
  SUBCASE("kept short remainder") {
    const auto w = bpe::window_corpus(std::vector<uint8_t>(1100, 7));
    REQUIRE(w.size() == 3);
    CHECK(w[0].size() == 512);
    CHECK(w[1].size() == 512);
    CHECK(w[2].size() == 76);
  }
  SUBCASE("short input") {
    const auto w = bpe::window_corpus(std::vector<uint8_t>(100, 7));
    REQUIRE(w.size() == 1);
    CHECK(w[0].size() == 100);
  }
  SUBCASE("empty input") {
    CHECK_THROWS_WITH_AS(bpe::window_corpus({}), doctest::Contains("EmptyInput"), Error);
  }
  SUBCASE("windows reassemble the input") {
    const auto code = fixtures::synthetic_code(1500);
    std::vector<uint8_t> glued;
    for (const auto& w : bpe::window_corpus(code)) glued.insert(glued.end(), w.begin(), w.end());
    CHECK(glued == code);
  }
}

TEST_CASE("train_bpe learns the single merge of an alternating window") {
  const bpe::BpeModel model = bpe::train_bpe({str_bytes("abababab")}, 257);
  REQUIRE(model.merges().size() == 1);
  CHECK(model.merges()[0].left == byte_id('a'));
  CHECK(model.merges()[0].right == byte_id('b'));
  CHECK(model.merges()[0].merged == bpe::kFirstMergedId);
  CHECK(model.encode(str_bytes("abab")).size() == 2);
  CHECK(model.encode(str_bytes("ababab")).size() == 3);
}

TEST_CASE("train_bpe with target 256 is the pure byte-level model") {
  const bpe::BpeModel model = bpe::train_bpe({str_bytes("abababab")}, 256);
  CHECK(model.merges().empty());
  CHECK(model.base_vocab_size() == 256);
  CHECK(model.vocab_size() == 261);
  const auto code = fixtures::synthetic_code(333);
  CHECK(model.encode(code).size() == code.size());
}

TEST_CASE("train_bpe breaks frequency ties lexicographically") {
  // "aabbaabb": pairs aa:2, ab:2, bb:2, ba:1 — tie resolved to ('a','a')
  const bpe::BpeModel model = bpe::train_bpe({str_bytes("aabbaabb")}, 258);
  REQUIRE(model.merges().size() == 2);
  CHECK(model.merges()[0].left == byte_id('a'));
  CHECK(model.merges()[0].right == byte_id('a'));
}

TEST_CASE("train_bpe raises InsufficientData when no pair repeats") {
  CHECK_THROWS_WITH_AS(bpe::train_bpe({str_bytes("abcd")}, 257),
                       doctest::Contains("InsufficientData"), Error);
  // ...but a 256 target needs no merges at all
  CHECK_NOTHROW(bpe::train_bpe({str_bytes("abcd")}, 256));
}

TEST_CASE("merges never cross window boundaries") {
  // 'ab' straddles the windows only if boundaries are ignored
  const bpe::BpeModel model = bpe::train_bpe({str_bytes("xxa"), str_bytes("bxx")}, 257);
  for (const auto& rule : model.merges()) {
    CHECK(!(rule.left == byte_id('a') && rule.right == byte_id('b')));
  }
}

TEST_CASE("encode basics") {
  const bpe::BpeModel model = bpe::train_bpe({str_bytes("abababab")}, 257);
  CHECK(model.encode({}).empty());
  CHECK(model.encode(str_bytes("ba")).size() == 2);  // no applicable merge
}

TEST_CASE("decode round-trips encode for random byte strings") {
  const auto corpus = fixtures::synthetic_code(4096);
  const bpe::BpeModel model = bpe::train_bpe(bpe::window_corpus(corpus), 300);
  Rng rng(11);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<uint8_t> input(rng.below(2049));
    for (auto& b : input) b = static_cast<uint8_t>(rng.below(256));
    CHECK(model.decode(model.encode(input)) == input);
  }
  CHECK(model.decode(std::vector<int32_t>{}).empty());
}

TEST_CASE("decode rejects ids outside the vocabulary and special ids") {
  const bpe::BpeModel model;
  CHECK_THROWS_WITH_AS(model.decode(std::vector<int32_t>{model.vocab_size()}),
                       doctest::Contains("UnknownTokenId"), Error);
  CHECK_THROWS_WITH_AS(model.decode(std::vector<int32_t>{bpe::kPadId}),
                       doctest::Contains("UnknownTokenId"), Error);
}

TEST_CASE("chunk layout follows the boundary and padding contract") {
  const std::vector<int32_t> none;
  SUBCASE("1022 content tokens fill one chunk with zero pads") {
    std::vector<int32_t> ids(1022, byte_id('x'));
    const auto set = bpe::chunk(ids, 1024);
    REQUIRE(set.chunks.size() == 1);
    CHECK(set.chunks[0].size() == 1024);
    CHECK(set.chunks[0].front() == bpe::kBosId);
    CHECK(set.chunks[0].back() == bpe::kEosId);
    CHECK(std::count(set.chunks[0].begin(), set.chunks[0].end(), bpe::kPadId) == 0);
  }
  SUBCASE("1023 content tokens spill one token into a padded chunk") {
    std::vector<int32_t> ids(1023, byte_id('x'));
    const auto set = bpe::chunk(ids, 1024);
    REQUIRE(set.chunks.size() == 2);
    CHECK(std::count(set.chunks[0].begin(), set.chunks[0].end(), bpe::kPadId) == 0);
    CHECK(set.chunks[1][0] == bpe::kBosId);
    CHECK(set.chunks[1][1] == byte_id('x'));
    CHECK(set.chunks[1][2] == bpe::kEosId);
    CHECK(std::count(set.chunks[1].begin(), set.chunks[1].end(), bpe::kPadId) == 1021);
  }
  SUBCASE("empty input produces one all-special chunk") {
    const auto set = bpe::chunk(none, 8);
    REQUIRE(set.chunks.size() == 1);
    CHECK(set.chunks[0] ==
          std::vector<int32_t>{bpe::kBosId, bpe::kEosId, bpe::kPadId, bpe::kPadId, bpe::kPadId,
                               bpe::kPadId, bpe::kPadId, bpe::kPadId});
  }
  SUBCASE("chunk_length below 3 is rejected") {
    CHECK_THROWS_AS(bpe::chunk(none, 2), Error);
  }
}

TEST_CASE("chunk invariants hold for random sizes and reconstruction is exact") {
  Rng rng(5);
  const bpe::BpeModel model = bpe::train_bpe({fixtures::synthetic_code(2048)}, 280);
  for (int trial = 0; trial < 40; ++trial) {
    std::vector<uint8_t> input(rng.below(3000));
    for (auto& b : input) b = static_cast<uint8_t>(rng.below(256));
    const auto ids = model.encode(input);
    const int64_t chunk_length = 8 + static_cast<int64_t>(rng.below(120));
    const auto set = bpe::chunk(ids, chunk_length);
    CHECK(set.content_token_count == static_cast<int64_t>(ids.size()));
    for (size_t c = 0; c < set.chunks.size(); ++c) {
      const auto& chunk = set.chunks[c];
      REQUIRE(static_cast<int64_t>(chunk.size()) == chunk_length);
      CHECK(chunk.front() == bpe::kBosId);
      // </s> follows the last content token; pads only a suffix of the final chunk
      const auto eos = std::find(chunk.begin(), chunk.end(), bpe::kEosId);
      REQUIRE(eos != chunk.end());
      for (auto it = eos + 1; it != chunk.end(); ++it) CHECK(*it == bpe::kPadId);
      if (c + 1 < set.chunks.size()) {
        CHECK(std::count(chunk.begin(), chunk.end(), bpe::kPadId) == 0);
      }
    }
    CHECK(bpe::strip_specials(set) == ids);
  }
}

TEST_CASE("model serialization round-trips and rejects corruption") {
  const auto corpus = fixtures::synthetic_code(8192);
  const bpe::BpeModel model = bpe::train_bpe(bpe::window_corpus(corpus), 320);
  const auto file = bpe::serialize_model(model);
  const bpe::BpeModel loaded = bpe::deserialize_model(file);
  CHECK(loaded.merges().size() == model.merges().size());

  Rng rng(3);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<uint8_t> input(rng.below(256));
    for (auto& b : input) b = static_cast<uint8_t>(rng.below(256));
    CHECK(loaded.encode(input) == model.encode(input));
  }

  SUBCASE("truncated file") {
    auto bad = file;
    bad.resize(bad.size() / 2);
    CHECK_THROWS_WITH_AS(bpe::deserialize_model(bad), doctest::Contains("CorruptModelFile"),
                         Error);
  }
  SUBCASE("flipped byte breaks the checksum") {
    auto bad = file;
    bad[bad.size() - 3] ^= 0xFF;
    CHECK_THROWS_WITH_AS(bpe::deserialize_model(bad), doctest::Contains("CorruptModelFile"),
                         Error);
  }
  SUBCASE("duplicate token id in the merge table") {
    // rebuild the payload with the second merge claiming the first merge's id
    REQUIRE(model.merges().size() >= 2);
    BinWriter payload;
    payload.u32(static_cast<uint32_t>(model.base_vocab_size()));
    payload.u32(static_cast<uint32_t>(model.merges().size()));
    for (size_t i = 0; i < model.merges().size(); ++i) {
      const auto& rule = model.merges()[i];
      payload.u32(static_cast<uint32_t>(rule.left));
      payload.u32(static_cast<uint32_t>(rule.right));
      payload.u32(static_cast<uint32_t>(i == 1 ? model.merges()[0].merged : rule.merged));
    }
    const auto& body = payload.buffer();
    BinWriter out;
    out.u64(0x3145504246424E42ull);
    out.u32(1);
    out.u64(fnv1a64(std::string_view(reinterpret_cast<const char*>(body.data()), body.size())));
    out.bytes(body.data(), body.size());
    CHECK_THROWS_WITH_AS(bpe::deserialize_model(out.buffer()),
                         doctest::Contains("CorruptModelFile"), Error);
  }
}

TEST_CASE("training is deterministic") {
  const auto corpus = fixtures::synthetic_code(4096, 17);
  const auto windows = bpe::window_corpus(corpus);
  const bpe::BpeModel a = bpe::train_bpe(windows, 300);
  const bpe::BpeModel b = bpe::train_bpe(windows, 300);
  REQUIRE(a.merges().size() == b.merges().size());
  for (size_t i = 0; i < a.merges().size(); ++i) {
    CHECK(a.merges()[i].left == b.merges()[i].left);
    CHECK(a.merges()[i].right == b.merges()[i].right);
  }
}

TEST_CASE("nested vocabularies are merge-prefix nested and compression is monotone") {
  const auto corpus = fixtures::synthetic_code(16384, 23);
  const auto windows = bpe::window_corpus(corpus);
  const bpe::BpeModel small = bpe::train_bpe(windows, 288);
  const bpe::BpeModel large = bpe::train_bpe(windows, 352);
  REQUIRE(small.merges().size() <= large.merges().size());
  for (size_t i = 0; i < small.merges().size(); ++i) {
    CHECK(small.merges()[i].left == large.merges()[i].left);
    CHECK(small.merges()[i].right == large.merges()[i].right);
  }
  Rng rng(29);
  for (int trial = 0; trial < 50; ++trial) {
    const auto input = fixtures::synthetic_code(64 + rng.below(1024), rng.next_u64());
    CHECK(large.encode(input).size() <= small.encode(input).size());
  }
}

TEST_CASE("incremental trainer matches the from-scratch recounting oracle") {
  Rng rng(31337);
  for (int trial = 0; trial < 50; ++trial) {
    // random corpora of at most 64 bytes over a narrow alphabet
    const size_t n_windows = 1 + rng.below(3);
    std::vector<std::vector<uint8_t>> windows;
    size_t total = 0;
    for (size_t w = 0; w < n_windows && total < 64; ++w) {
      const size_t len = 1 + rng.below(std::min<uint64_t>(64 - total, 32));
      std::vector<uint8_t> bytes(len);
      for (auto& b : bytes) b = static_cast<uint8_t>('a' + rng.below(4));
      total += len;
      windows.push_back(std::move(bytes));
    }
    const int32_t target = 257 + static_cast<int32_t>(rng.below(40));
    std::vector<bpe::MergeRule> expect;
    bool oracle_insufficient = false;
    try {
      expect = bpe_oracle::train(windows, target);
    } catch (const Error& e) {
      REQUIRE(e.code() == Errc::insufficient_data);
      oracle_insufficient = true;
    }
    if (oracle_insufficient) {
      CHECK_THROWS_AS(bpe::train_bpe(windows, target), Error);
      continue;
    }
    const bpe::BpeModel model = bpe::train_bpe(windows, target);
    REQUIRE(model.merges().size() == expect.size());
    for (size_t i = 0; i < expect.size(); ++i) {
      CHECK(model.merges()[i].left == expect[i].left);
      CHECK(model.merges()[i].right == expect[i].right);
      CHECK(model.merges()[i].merged == expect[i].merged);
    }
  }
}
