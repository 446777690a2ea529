// Brute-force BPE trainer used as an oracle: recounts every adjacent
// pair from scratch before each merge. Shares only the byte-symbol map
// (itself pinned against a frozen reference table) and the documented
// tie rule with the production trainer.
#pragma once

#include <map>
#include <vector>

#include "binfm/bpe.hpp"

namespace bpe_oracle {

inline std::vector<binfm::bpe::MergeRule> train(const std::vector<std::vector<uint8_t>>& windows,
                                                int32_t target_base_vocab) {
  using binfm::bpe::kFirstByteId;
  using binfm::bpe::kFirstMergedId;
  namespace bpe = binfm::bpe;

  if (target_base_vocab < 256) binfm::raise(binfm::Errc::invalid_config, "oracle target < 256");
  if (windows.empty()) binfm::raise(binfm::Errc::empty_input, "oracle corpus empty");

  std::vector<std::vector<int32_t>> seqs;
  for (const auto& w : windows) {
    std::vector<int32_t> s;
    for (uint8_t b : w) s.push_back(kFirstByteId + b);
    seqs.push_back(std::move(s));
  }

  std::vector<std::vector<uint32_t>> cps;
  for (int b = 0; b < 256; ++b) cps.push_back({bpe::byte_symbol_map().forward[b]});

  std::vector<bpe::MergeRule> merges;
  while (static_cast<int32_t>(merges.size()) < target_base_vocab - 256) {
    std::map<std::pair<int32_t, int32_t>, int64_t> counts;
    for (const auto& s : seqs) {
      for (size_t i = 0; i + 1 < s.size(); ++i) ++counts[{s[i], s[i + 1]}];
    }

    bool found = false;
    std::pair<int32_t, int32_t> best{0, 0};
    int64_t best_count = 1;
    auto better = [&](const std::pair<int32_t, int32_t>& cand) {
      const auto& [ca, cb] = cand;
      const auto& [ba, bb] = best;
      const auto& cas = cps[ca - kFirstByteId];
      const auto& bas = cps[ba - kFirstByteId];
      if (cas != bas) return cas < bas;
      const auto& cbs = cps[cb - kFirstByteId];
      const auto& bbs = cps[bb - kFirstByteId];
      if (cbs != bbs) return cbs < bbs;
      return cand < best;
    };
    for (const auto& [pair, count] : counts) {
      if (count > best_count || (count == best_count && found && better(pair))) {
        best = pair;
        best_count = count;
        found = true;
      }
    }
    if (!found) {
      if (merges.empty()) {
        binfm::raise(binfm::Errc::insufficient_data, "oracle: no pair repeats");
      }
      break;
    }

    const int32_t merged = kFirstMergedId + static_cast<int32_t>(merges.size());
    merges.push_back({best.first, best.second, merged});
    std::vector<uint32_t> joined = cps[best.first - kFirstByteId];
    const auto& right = cps[best.second - kFirstByteId];
    joined.insert(joined.end(), right.begin(), right.end());
    cps.push_back(std::move(joined));

    for (auto& s : seqs) {
      std::vector<int32_t> next;
      next.reserve(s.size());
      for (size_t i = 0; i < s.size();) {
        if (i + 1 < s.size() && s[i] == best.first && s[i + 1] == best.second) {
          next.push_back(merged);
          i += 2;
        } else {
          next.push_back(s[i++]);
        }
      }
      s = std::move(next);
    }
  }
  return merges;
}

}  // namespace bpe_oracle
