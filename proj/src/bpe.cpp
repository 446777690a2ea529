#include "binfm/bpe.hpp"

#include <algorithm>
#include <limits>
#include <unordered_map>

namespace binfm::bpe {

namespace {

constexpr uint64_t kModelMagic = 0x3145504246424E42ull;  // "BNBFPE1" tag, version in header

uint64_t pair_key(int32_t a, int32_t b) {
  return (static_cast<uint64_t>(static_cast<uint32_t>(a)) << 32) | static_cast<uint32_t>(b);
}

void utf8_append(std::string& out, uint32_t cp) {
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
}

}  // namespace

const ByteSymbolMap& byte_symbol_map() {
  static const ByteSymbolMap map = [] {
    ByteSymbolMap m;
    auto printable = [](int b) {
      return (b >= 33 && b <= 126) || (b >= 161 && b <= 172) || (b >= 174 && b <= 255);
    };
    uint32_t next = 256;
    for (int b = 0; b < 256; ++b) {
      m.forward[b] = printable(b) ? static_cast<uint32_t>(b) : next++;
    }
    for (int b = 0; b < 256; ++b) m.reverse[m.forward[b]] = static_cast<uint8_t>(b);
    return m;
  }();
  return map;
}

BpeModel::BpeModel(std::vector<MergeRule> merges) : merges_(std::move(merges)) {
  const auto& bsm = byte_symbol_map();
  codepoints_.reserve(256 + merges_.size());
  for (int b = 0; b < 256; ++b) codepoints_.push_back({bsm.forward[b]});
  for (size_t rank = 0; rank < merges_.size(); ++rank) {
    const MergeRule& rule = merges_[rank];
    const int32_t expect = kFirstMergedId + static_cast<int32_t>(rank);
    if (rule.merged != expect || rule.left < kFirstByteId || rule.right < kFirstByteId ||
        rule.left >= expect || rule.right >= expect) {
      raise(Errc::corrupt_model_file, "merge rule " + std::to_string(rank) + " malformed");
    }
    std::vector<uint32_t> cps = codepoints_[rule.left - kFirstByteId];
    const auto& right = codepoints_[rule.right - kFirstByteId];
    cps.insert(cps.end(), right.begin(), right.end());
    codepoints_.push_back(std::move(cps));
    pair_rank_[pair_key(rule.left, rule.right)] = static_cast<int32_t>(rank);
  }
}

const std::vector<uint32_t>& BpeModel::token_codepoints(int32_t id) const {
  if (id < kFirstByteId || id >= vocab_size()) {
    raise(Errc::unknown_token_id, "id " + std::to_string(id) + " has no codepoint string");
  }
  return codepoints_[id - kFirstByteId];
}

std::string BpeModel::token_string(int32_t id) const {
  if (is_special(id)) return kSpecialNames[id];
  std::string out;
  for (uint32_t cp : token_codepoints(id)) utf8_append(out, cp);
  return out;
}

std::map<std::string, int32_t> BpeModel::vocab() const {
  std::map<std::string, int32_t> v;
  for (int32_t id = 0; id < vocab_size(); ++id) v[token_string(id)] = id;
  return v;
}

std::vector<int32_t> BpeModel::encode(std::span<const uint8_t> bytes) const {
  std::vector<int32_t> ids;
  ids.reserve(bytes.size());
  for (uint8_t b : bytes) ids.push_back(kFirstByteId + b);

  // Apply the lowest-rank applicable merge, all occurrences left to
  // right, until none applies.
  while (ids.size() >= 2) {
    int32_t best_rank = std::numeric_limits<int32_t>::max();
    for (size_t i = 0; i + 1 < ids.size(); ++i) {
      const auto it = pair_rank_.find(pair_key(ids[i], ids[i + 1]));
      if (it != pair_rank_.end() && it->second < best_rank) best_rank = it->second;
    }
    if (best_rank == std::numeric_limits<int32_t>::max()) break;
    const MergeRule& rule = merges_[best_rank];
    size_t w = 0;
    for (size_t i = 0; i < ids.size();) {
      if (i + 1 < ids.size() && ids[i] == rule.left && ids[i + 1] == rule.right) {
        ids[w++] = rule.merged;
        i += 2;
      } else {
        ids[w++] = ids[i++];
      }
    }
    ids.resize(w);
  }
  return ids;
}

std::vector<uint8_t> BpeModel::decode(std::span<const int32_t> ids) const {
  const auto& bsm = byte_symbol_map();
  std::vector<uint8_t> out;
  out.reserve(ids.size());
  for (int32_t id : ids) {
    if (is_special(id)) {
      raise(Errc::unknown_token_id, "special token in byte decode: " + std::string(kSpecialNames[id]));
    }
    if (id < kFirstByteId || id >= vocab_size()) {
      raise(Errc::unknown_token_id, "token id " + std::to_string(id) + " outside vocabulary");
    }
    for (uint32_t cp : token_codepoints(id)) out.push_back(bsm.reverse.at(cp));
  }
  return out;
}

std::vector<std::vector<uint8_t>> window_corpus(std::span<const uint8_t> code, size_t window_size) {
  if (code.empty()) raise(Errc::empty_input, "cannot window an empty byte sequence");
  std::vector<std::vector<uint8_t>> windows;
  windows.reserve(code.size() / window_size + 1);
  for (size_t off = 0; off < code.size(); off += window_size) {
    const size_t len = std::min(window_size, code.size() - off);
    windows.emplace_back(code.begin() + off, code.begin() + off + len);
  }
  return windows;
}

namespace {

// Training state: symbol sequences per window, incremental pair counts,
// and per-pair window-occurrence hints (may contain stale entries; the
// apply pass re-scans the hinted windows).
struct TrainerState {
  std::vector<std::vector<int32_t>> seqs;
  std::unordered_map<uint64_t, int64_t> counts;
  std::unordered_map<uint64_t, std::vector<uint32_t>> occ;

  void add(int32_t a, int32_t b, uint32_t window) {
    const uint64_t key = pair_key(a, b);
    ++counts[key];
    auto& list = occ[key];
    if (list.empty() || list.back() != window) list.push_back(window);
  }

  void sub(int32_t a, int32_t b) {
    const uint64_t key = pair_key(a, b);
    auto it = counts.find(key);
    if (it != counts.end() && --it->second == 0) {
      counts.erase(it);
      occ.erase(key);
    }
  }
};

}  // namespace

BpeModel train_bpe(const std::vector<std::vector<uint8_t>>& windows, int32_t target_base_vocab) {
  if (target_base_vocab < 256) {
    raise(Errc::invalid_config, "target base vocabulary must be at least 256");
  }
  if (windows.empty()) raise(Errc::empty_input, "BPE training corpus is empty");

  TrainerState st;
  st.seqs.reserve(windows.size());
  for (const auto& w : windows) {
    std::vector<int32_t> seq;
    seq.reserve(w.size());
    for (uint8_t b : w) seq.push_back(kFirstByteId + b);
    st.seqs.push_back(std::move(seq));
  }
  for (uint32_t wi = 0; wi < st.seqs.size(); ++wi) {
    const auto& s = st.seqs[wi];
    for (size_t i = 0; i + 1 < s.size(); ++i) st.add(s[i], s[i + 1], wi);
  }

  // Codepoint strings for the tie rule; grows as merges are minted.
  std::vector<std::vector<uint32_t>> cps;
  cps.reserve(static_cast<size_t>(target_base_vocab));
  const auto& bsm = byte_symbol_map();
  for (int b = 0; b < 256; ++b) cps.push_back({bsm.forward[b]});

  auto pair_less = [&cps](uint64_t lhs, uint64_t rhs) {
    const int32_t la = static_cast<int32_t>(lhs >> 32), lb = static_cast<int32_t>(lhs & 0xFFFFFFFF);
    const int32_t ra = static_cast<int32_t>(rhs >> 32), rb = static_cast<int32_t>(rhs & 0xFFFFFFFF);
    const auto& las = cps[la - kFirstByteId];
    const auto& ras = cps[ra - kFirstByteId];
    if (las != ras) return std::lexicographical_compare(las.begin(), las.end(), ras.begin(), ras.end());
    const auto& lbs = cps[lb - kFirstByteId];
    const auto& rbs = cps[rb - kFirstByteId];
    if (lbs != rbs) return std::lexicographical_compare(lbs.begin(), lbs.end(), rbs.begin(), rbs.end());
    return std::make_pair(la, lb) < std::make_pair(ra, rb);
  };

  std::vector<MergeRule> merges;
  const int32_t n_merges_wanted = target_base_vocab - 256;
  while (static_cast<int32_t>(merges.size()) < n_merges_wanted) {
    uint64_t best_key = 0;
    int64_t best_count = 1;  // pairs must occur at least twice
    bool found = false;
    for (const auto& [key, count] : st.counts) {
      if (count > best_count || (count == best_count && found && pair_less(key, best_key))) {
        best_key = key;
        best_count = count;
        found = true;
      }
    }
    if (!found) {
      if (merges.empty()) {
        raise(Errc::insufficient_data, "no adjacent pair occurs twice in the training corpus");
      }
      break;
    }

    const int32_t left = static_cast<int32_t>(best_key >> 32);
    const int32_t right = static_cast<int32_t>(best_key & 0xFFFFFFFF);
    const int32_t merged = kFirstMergedId + static_cast<int32_t>(merges.size());
    merges.push_back({left, right, merged});
    std::vector<uint32_t> merged_cps = cps[left - kFirstByteId];
    const auto& rcps = cps[right - kFirstByteId];
    merged_cps.insert(merged_cps.end(), rcps.begin(), rcps.end());
    cps.push_back(std::move(merged_cps));

    // Replace occurrences left to right in each hinted window, patching
    // neighbour-pair counts as we go.
    std::vector<uint32_t> hint = std::move(st.occ[best_key]);
    st.occ.erase(best_key);
    std::sort(hint.begin(), hint.end());
    hint.erase(std::unique(hint.begin(), hint.end()), hint.end());
    for (uint32_t wi : hint) {
      auto& s = st.seqs[wi];
      size_t w = 0;
      for (size_t i = 0; i < s.size();) {
        if (i + 1 < s.size() && s[i] == left && s[i + 1] == right) {
          st.sub(left, right);
          if (w > 0) {
            st.sub(s[w - 1], left);
            st.add(s[w - 1], merged, wi);
          }
          if (i + 2 < s.size()) {
            st.sub(right, s[i + 2]);
            st.add(merged, s[i + 2], wi);
          }
          s[w++] = merged;
          i += 2;
        } else {
          s[w++] = s[i++];
        }
      }
      s.resize(w);
    }
  }
  return BpeModel(std::move(merges));
}

TokenChunkSet chunk(std::span<const int32_t> ids, int64_t chunk_length) {
  if (chunk_length < 3) raise(Errc::invalid_config, "chunk_length must be at least 3");
  TokenChunkSet set;
  set.chunk_length = chunk_length;
  set.content_token_count = static_cast<int64_t>(ids.size());
  const int64_t capacity = chunk_length - 2;

  int64_t off = 0;
  do {
    const int64_t n = std::min<int64_t>(capacity, static_cast<int64_t>(ids.size()) - off);
    std::vector<int32_t> c;
    c.reserve(static_cast<size_t>(chunk_length));
    c.push_back(kBosId);
    c.insert(c.end(), ids.begin() + off, ids.begin() + off + n);
    c.push_back(kEosId);
    c.resize(static_cast<size_t>(chunk_length), kPadId);
    set.chunks.push_back(std::move(c));
    off += n;
  } while (off < static_cast<int64_t>(ids.size()));
  return set;
}

std::vector<int32_t> strip_specials(const TokenChunkSet& chunk_set) {
  std::vector<int32_t> out;
  out.reserve(static_cast<size_t>(chunk_set.content_token_count));
  for (const auto& c : chunk_set.chunks) {
    for (int32_t id : c) {
      if (!is_special(id)) out.push_back(id);
    }
  }
  return out;
}

std::vector<uint8_t> serialize_model(const BpeModel& model) {
  BinWriter payload;
  payload.u32(static_cast<uint32_t>(model.base_vocab_size()));
  payload.u32(static_cast<uint32_t>(model.merges().size()));
  for (const MergeRule& rule : model.merges()) {
    payload.u32(static_cast<uint32_t>(rule.left));
    payload.u32(static_cast<uint32_t>(rule.right));
    payload.u32(static_cast<uint32_t>(rule.merged));
  }
  const auto& body = payload.buffer();
  const uint64_t checksum =
      fnv1a64(std::string_view(reinterpret_cast<const char*>(body.data()), body.size()));

  BinWriter out;
  out.u64(kModelMagic);
  out.u32(1);  // format version
  out.u64(checksum);
  out.bytes(body.data(), body.size());
  return out.buffer();
}

BpeModel deserialize_model(std::span<const uint8_t> file_bytes) {
  BinReader r(file_bytes.data(), file_bytes.size());
  if (r.u64() != kModelMagic) raise(Errc::corrupt_model_file, "bad magic");
  if (r.u32() != 1) raise(Errc::corrupt_model_file, "unsupported version");
  const uint64_t checksum = r.u64();
  const size_t body_off = r.pos();
  const uint64_t actual = fnv1a64(std::string_view(
      reinterpret_cast<const char*>(file_bytes.data() + body_off), file_bytes.size() - body_off));
  if (checksum != actual) raise(Errc::corrupt_model_file, "checksum mismatch");

  const uint32_t base_vocab = r.u32();
  const uint32_t n_merges = r.u32();
  if (base_vocab != 256 + n_merges) raise(Errc::corrupt_model_file, "vocab/merge count mismatch");
  std::vector<MergeRule> merges;
  merges.reserve(n_merges);
  for (uint32_t i = 0; i < n_merges; ++i) {
    MergeRule rule;
    rule.left = static_cast<int32_t>(r.u32());
    rule.right = static_cast<int32_t>(r.u32());
    rule.merged = static_cast<int32_t>(r.u32());
    merges.push_back(rule);
  }
  if (r.remaining() != 0) raise(Errc::corrupt_model_file, "trailing bytes");
  return BpeModel(std::move(merges));  // constructor validates rule ids
}

void save_model(const BpeModel& model, const std::string& path) {
  write_file_atomic(path, serialize_model(model));
}

BpeModel load_model(const std::string& path) {
  const auto bytes = read_file_bytes(path);
  return deserialize_model(bytes);
}

}  // namespace binfm::bpe
