#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "binfm/common.hpp"

namespace binfm::bpe {

// Fixed token-id layout, stable across vocabulary sizes: the five special
// tokens first, the 256 byte tokens next (in byte order), merged tokens
// after in merge-rank order.
constexpr int32_t kBosId = 0;   // <s>
constexpr int32_t kEosId = 1;   // </s>
constexpr int32_t kPadId = 2;   // <pad>
constexpr int32_t kUnkId = 3;   // <unk>
constexpr int32_t kMaskId = 4;  // <mask>
constexpr int32_t kNumSpecials = 5;
constexpr int32_t kFirstByteId = kNumSpecials;
constexpr int32_t kFirstMergedId = kFirstByteId + 256;

constexpr std::array<const char*, kNumSpecials> kSpecialNames = {"<s>", "</s>", "<pad>", "<unk>",
                                                                 "<mask>"};

inline bool is_special(int32_t id) { return id >= 0 && id < kNumSpecials; }

/// Bijective byte <-> Unicode-codepoint mapping: printable bytes map to
/// themselves, the remaining 68 map in increasing byte order to
/// codepoints 256..323.
struct ByteSymbolMap {
  std::array<uint32_t, 256> forward{};
  std::map<uint32_t, uint8_t> reverse;
};

const ByteSymbolMap& byte_symbol_map();

struct MergeRule {
  int32_t left = 0;
  int32_t right = 0;
  int32_t merged = 0;  // always kFirstMergedId + rank
};

class BpeModel {
public:
  /// Pure byte-level model (no merges).
  BpeModel() : BpeModel(std::vector<MergeRule>{}) {}
  explicit BpeModel(std::vector<MergeRule> merges);

  int32_t base_vocab_size() const { return 256 + static_cast<int32_t>(merges_.size()); }
  int32_t vocab_size() const { return kNumSpecials + base_vocab_size(); }
  const std::vector<MergeRule>& merges() const { return merges_; }

  /// Codepoint string of a non-special token id.
  const std::vector<uint32_t>& token_codepoints(int32_t id) const;
  /// UTF-8 rendering of any token id (specials render as their names).
  std::string token_string(int32_t id) const;
  /// Full vocabulary, token string -> id, in id order when iterated.
  std::map<std::string, int32_t> vocab() const;

  std::vector<int32_t> encode(std::span<const uint8_t> bytes) const;
  std::vector<uint8_t> decode(std::span<const int32_t> ids) const;

private:
  std::vector<MergeRule> merges_;
  std::vector<std::vector<uint32_t>> codepoints_;        // by id - kFirstByteId
  std::map<uint64_t, int32_t> pair_rank_;                // (left,right) key -> rank
};

/// Consecutive non-overlapping 512-byte windows; a short trailing
/// remainder is kept as a final window.
std::vector<std::vector<uint8_t>> window_corpus(std::span<const uint8_t> code,
                                                size_t window_size = 512);

/// Greedy BPE: repeatedly merge the globally most frequent adjacent pair
/// until the base vocabulary reaches target_base_vocab or no pair occurs
/// at least twice. Ties break on the lexicographically smaller
/// (left codepoints, right codepoints) pair, then on smaller ids.
/// Merges never cross window boundaries.
BpeModel train_bpe(const std::vector<std::vector<uint8_t>>& windows, int32_t target_base_vocab);

struct TokenChunkSet {
  std::vector<std::vector<int32_t>> chunks;
  int64_t chunk_length = 0;
  int64_t content_token_count = 0;
};

/// Splits a token-id stream into fixed-length chunks of
/// [<s>, content..., </s>, pads...]; only the final chunk carries pads.
/// Empty input yields one all-special chunk.
TokenChunkSet chunk(std::span<const int32_t> ids, int64_t chunk_length);

/// Content tokens of a chunk set, specials stripped, in order.
std::vector<int32_t> strip_specials(const TokenChunkSet& chunk_set);

std::vector<uint8_t> serialize_model(const BpeModel& model);
BpeModel deserialize_model(std::span<const uint8_t> file_bytes);

void save_model(const BpeModel& model, const std::string& path);
BpeModel load_model(const std::string& path);

}  // namespace binfm::bpe
