#include "binfm/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "binfm/pe.hpp"

namespace binfm::corpus {

namespace {

constexpr uint64_t kDatasetMagic = 0x3154534446424E42ull;  // "BNBFDST1" tag

bool older(const SampleRecord& a, const SampleRecord& b) {
  return std::tie(a.first_seen, a.sample_id) < std::tie(b.first_seen, b.sample_id);
}

}  // namespace

std::vector<SampleRecord> dedup_by_code_md5(const std::vector<SampleRecord>& records) {
  // winner per digest within each label class
  std::map<std::string, const SampleRecord*> benign_winner, malicious_winner;
  for (const SampleRecord& r : records) {
    auto& winner = r.malicious ? malicious_winner : benign_winner;
    auto [it, inserted] = winner.emplace(r.code_md5, &r);
    if (!inserted && older(r, *it->second)) it->second = &r;
  }
  std::vector<SampleRecord> out;
  out.reserve(records.size());
  for (const SampleRecord& r : records) {
    if (r.malicious) {
      if (benign_winner.count(r.code_md5) != 0) continue;  // shared with benign: drop
      if (malicious_winner.at(r.code_md5) == &r) out.push_back(r);
    } else {
      if (benign_winner.at(r.code_md5) == &r) out.push_back(r);
    }
  }
  return out;
}

std::vector<SampleRecord> cap_variants(const std::vector<SampleRecord>& records,
                                       int64_t malicious_cap, int64_t benign_cap) {
  std::map<std::string, std::vector<const SampleRecord*>> groups;
  for (const SampleRecord& r : records) {
    if (!r.variant_group.empty()) groups[r.variant_group].push_back(&r);
  }
  std::set<const SampleRecord*> keep;
  for (auto& [group, members] : groups) {
    std::sort(members.begin(), members.end(),
              [](const SampleRecord* a, const SampleRecord* b) { return older(*a, *b); });
    int64_t n_mal = 0, n_ben = 0;
    for (const SampleRecord* r : members) {
      int64_t& n = r->malicious ? n_mal : n_ben;
      const int64_t cap = r->malicious ? malicious_cap : benign_cap;
      if (n < cap) {
        keep.insert(r);
        ++n;
      }
    }
  }
  std::vector<SampleRecord> out;
  out.reserve(records.size());
  for (const SampleRecord& r : records) {
    if (r.variant_group.empty() || keep.count(&r) != 0) out.push_back(r);
  }
  return out;
}

SplitSizes split_50_10_40(int64_t n) {
  SplitSizes s;
  s.train = n / 2;
  s.validation = n / 10;
  s.test = n - s.train - s.validation;
  return s;
}

std::vector<SplitAssignment> temporal_split(const std::vector<SampleRecord>& records,
                                            int64_t pretrain_count, int64_t cohort_count) {
  if (cohort_count < 1) raise(Errc::invalid_config, "cohort_count must be >= 1");
  std::vector<const SampleRecord*> malicious, benign;
  for (const SampleRecord& r : records) (r.malicious ? malicious : benign).push_back(&r);

  std::sort(malicious.begin(), malicious.end(),
            [](const SampleRecord* a, const SampleRecord* b) { return older(*a, *b); });
  // Benign records are not sorted chronologically; order on sample_id so
  // the split is independent of input permutation.
  std::sort(benign.begin(), benign.end(), [](const SampleRecord* a, const SampleRecord* b) {
    return a->sample_id < b->sample_id;
  });

  const int64_t n_mal = static_cast<int64_t>(malicious.size());
  if (pretrain_count > n_mal) {
    raise(Errc::too_few_samples, "pretrain_count exceeds malicious sample count");
  }
  const int64_t remaining = n_mal - pretrain_count;
  if (remaining < cohort_count) {
    raise(Errc::too_few_samples, "cohorts would be empty");
  }

  std::vector<SplitAssignment> out;
  out.reserve(records.size());
  for (int64_t i = 0; i < pretrain_count; ++i) {
    out.push_back({malicious[static_cast<size_t>(i)]->sample_id, "M2", "train"});
  }

  // contiguous cohorts; the first (remaining % cohort_count) get one extra
  const int64_t base = remaining / cohort_count;
  const int64_t extra = remaining % cohort_count;
  int64_t offset = pretrain_count;
  for (int64_t c = 0; c < cohort_count; ++c) {
    const int64_t size = base + (c < extra ? 1 : 0);
    const SplitSizes sizes = split_50_10_40(size);
    const std::string cohort = "D" + std::to_string(c + 1);
    for (int64_t i = 0; i < size; ++i) {
      const char* role = i < sizes.train                     ? "train"
                         : i < sizes.train + sizes.validation ? "validation"
                                                               : "test";
      out.push_back({malicious[static_cast<size_t>(offset + i)]->sample_id, cohort, role});
    }
    offset += size;
  }

  const SplitSizes bsizes = split_50_10_40(static_cast<int64_t>(benign.size()));
  for (int64_t i = 0; i < static_cast<int64_t>(benign.size()); ++i) {
    const char* role = i < bsizes.train                       ? "train"
                       : i < bsizes.train + bsizes.validation ? "validation"
                                                               : "test";
    out.push_back({benign[static_cast<size_t>(i)]->sample_id, "benign", role});
  }
  return out;
}

PretrainSequenceSet build_pretrain_set(const std::vector<SampleRecord>& records,
                                       const bpe::BpeModel& tokenizer, double entropy_threshold,
                                       int64_t chunk_length, const CodeLoader& loader) {
  PretrainSequenceSet out;
  for (const SampleRecord& record : records) {
    const std::vector<uint8_t> code = loader(record);
    if (code.empty()) continue;
    const std::vector<int32_t> ids = tokenizer.encode(code);
    bpe::TokenChunkSet chunks = bpe::chunk(ids, chunk_length);
    for (auto& c : chunks.chunks) {
      std::vector<int32_t> content;
      for (int32_t id : c) {
        if (!bpe::is_special(id)) content.push_back(id);
      }
      if (content.empty()) continue;
      const std::vector<uint8_t> raw = tokenizer.decode(content);
      if (pe::shannon_entropy(raw) > entropy_threshold) continue;
      out.sequences.push_back(std::move(c));
      out.provenance.push_back(record.sample_id);
    }
  }
  return out;
}

std::vector<int32_t> tokenize_function(const FunctionRecord& function,
                                       const bpe::BpeModel& tokenizer, int64_t chunk_length) {
  std::vector<int32_t> content = tokenizer.encode(function.function_bytes);
  const int64_t capacity = chunk_length - 2;
  if (static_cast<int64_t>(content.size()) > capacity) {
    content.resize(static_cast<size_t>(capacity));
  }
  std::vector<int32_t> chunk;
  chunk.reserve(static_cast<size_t>(chunk_length));
  chunk.push_back(bpe::kBosId);
  chunk.insert(chunk.end(), content.begin(), content.end());
  chunk.push_back(bpe::kEosId);
  chunk.resize(static_cast<size_t>(chunk_length), bpe::kPadId);
  return chunk;
}

ApiMaskDataset build_api_mask_dataset(const std::vector<FunctionRecord>& functions,
                                      int64_t min_freq, int64_t per_api_cap,
                                      const bpe::BpeModel& tokenizer, int64_t chunk_length,
                                      uint64_t seed) {
  std::map<std::string, int64_t> freq;
  for (const FunctionRecord& f : functions) {
    for (const ApiSite& site : f.api_sites) ++freq[site.api_name];
  }
  ApiMaskDataset out;
  for (const auto& [name, count] : freq) {
    if (count >= min_freq) out.api_names.push_back(name);
  }
  if (out.api_names.empty()) raise(Errc::empty_dataset, "no API class reaches min_freq");
  std::map<std::string, int32_t> api_index;
  for (size_t i = 0; i < out.api_names.size(); ++i) {
    api_index[out.api_names[i]] = static_cast<int32_t>(i);
  }

  const int64_t capacity = chunk_length - 2;
  std::vector<MaskedExample> examples;
  for (const auto& api_name : out.api_names) {
    std::vector<size_t> candidates;
    for (size_t fi = 0; fi < functions.size(); ++fi) {
      for (const ApiSite& site : functions[fi].api_sites) {
        if (site.api_name == api_name) {
          candidates.push_back(fi);
          break;
        }
      }
    }
    Rng rng(derive_seed(derive_seed(seed, "api-sample"), api_name));
    rng.shuffle(candidates);
    if (static_cast<int64_t>(candidates.size()) > per_api_cap) {
      candidates.resize(static_cast<size_t>(per_api_cap));
    }
    for (size_t fi : candidates) {
      const FunctionRecord& f = functions[fi];
      for (const ApiSite& site : f.api_sites) {
        if (site.api_name != api_name) continue;
        if (site.offset < 0 || site.length <= 0 ||
            site.offset + site.length > static_cast<int64_t>(f.function_bytes.size())) {
          raise(Errc::parse_error, "API site outside function bytes in " + f.function_id);
        }
        std::span<const uint8_t> bytes(f.function_bytes);
        const std::vector<int32_t> prefix = tokenizer.encode(bytes.subspan(0, site.offset));
        const std::vector<int32_t> suffix =
            tokenizer.encode(bytes.subspan(static_cast<size_t>(site.offset + site.length)));
        std::vector<int32_t> content = prefix;
        const int64_t mask_content_pos = static_cast<int64_t>(content.size());
        if (mask_content_pos >= capacity) continue;  // mask would be truncated away
        content.push_back(bpe::kMaskId);
        content.insert(content.end(), suffix.begin(), suffix.end());
        if (static_cast<int64_t>(content.size()) > capacity) {
          content.resize(static_cast<size_t>(capacity));
        }
        MaskedExample ex;
        ex.function_id = f.function_id;
        ex.ids.reserve(static_cast<size_t>(chunk_length));
        ex.ids.push_back(bpe::kBosId);
        ex.ids.insert(ex.ids.end(), content.begin(), content.end());
        ex.ids.push_back(bpe::kEosId);
        ex.ids.resize(static_cast<size_t>(chunk_length), bpe::kPadId);
        ex.mask_position = 1 + mask_content_pos;
        ex.target = api_index.at(api_name);
        examples.push_back(std::move(ex));
      }
    }
  }
  if (examples.empty()) raise(Errc::empty_dataset, "no maskable API examples survived");

  std::vector<size_t> order(examples.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng split_rng(derive_seed(seed, "api-split"));
  split_rng.shuffle(order);
  const SplitSizes sizes = split_50_10_40(static_cast<int64_t>(examples.size()));
  for (int64_t i = 0; i < static_cast<int64_t>(order.size()); ++i) {
    MaskedExample& ex = examples[order[static_cast<size_t>(i)]];
    if (i < sizes.train) {
      out.train.push_back(std::move(ex));
    } else if (i < sizes.train + sizes.validation) {
      out.validation.push_back(std::move(ex));
    } else {
      out.test.push_back(std::move(ex));
    }
  }
  return out;
}

RuleShiftSplits build_rule_shift_splits(const std::vector<FunctionRecord>& functions,
                                        double holdout_fraction, int64_t min_train,
                                        int64_t train_cap, uint64_t seed) {
  RuleShiftSplits out;
  if (functions.empty()) return out;

  std::vector<size_t> order(functions.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng part_rng(derive_seed(seed, "partition"));
  part_rng.shuffle(order);
  const SplitSizes sizes = split_50_10_40(static_cast<int64_t>(order.size()));
  std::vector<size_t> train0, val0, test0;
  for (int64_t i = 0; i < static_cast<int64_t>(order.size()); ++i) {
    const size_t idx = order[static_cast<size_t>(i)];
    if (i < sizes.train) {
      train0.push_back(idx);
    } else if (i < sizes.train + sizes.validation) {
      val0.push_back(idx);
    } else {
      test0.push_back(idx);
    }
  }

  // rule inventory per class, over the whole corpus
  std::map<std::string, std::set<std::string>> class_rules;
  for (const FunctionRecord& f : functions) class_rules[f.label].insert(f.rule_id);

  std::set<std::string> held_out;
  for (const auto& [cls, rules] : class_rules) {
    if (rules.size() < 2) continue;
    std::vector<std::string> sorted_rules(rules.begin(), rules.end());
    Rng rule_rng(derive_seed(derive_seed(seed, "rule-holdout"), cls));
    rule_rng.shuffle(sorted_rules);
    const int64_t n_hold = static_cast<int64_t>(
        std::floor(holdout_fraction * static_cast<double>(sorted_rules.size())));
    for (int64_t i = 0; i < n_hold; ++i) held_out.insert(sorted_rules[static_cast<size_t>(i)]);
  }

  auto rule_held = [&held_out](const FunctionRecord& f) { return held_out.count(f.rule_id) != 0; };

  // drop held-out-rule entries from train/validation, then count
  std::map<std::string, std::vector<size_t>> train_by_class;
  for (size_t idx : train0) {
    if (!rule_held(functions[idx])) train_by_class[functions[idx].label].push_back(idx);
  }

  std::set<std::string> retained_classes;
  for (const auto& [cls, members] : train_by_class) {
    if (static_cast<int64_t>(members.size()) >= min_train) retained_classes.insert(cls);
  }

  for (const std::string& cls : retained_classes) out.class_names.push_back(cls);
  for (size_t i = 0; i < out.class_names.size(); ++i) {
    out.class_index[out.class_names[i]] = static_cast<int32_t>(i);
  }

  for (const std::string& cls : retained_classes) {
    std::vector<size_t> members = train_by_class.at(cls);
    if (static_cast<int64_t>(members.size()) > train_cap) {
      Rng cap_rng(derive_seed(derive_seed(seed, "train-cap"), cls));
      cap_rng.shuffle(members);
      members.resize(static_cast<size_t>(train_cap));
      std::sort(members.begin(), members.end());
    }
    out.train.insert(out.train.end(), members.begin(), members.end());
  }
  std::sort(out.train.begin(), out.train.end());

  for (size_t idx : val0) {
    const FunctionRecord& f = functions[idx];
    if (!rule_held(f) && retained_classes.count(f.label) != 0) out.validation.push_back(idx);
  }
  for (size_t idx : test0) {
    const FunctionRecord& f = functions[idx];
    if (retained_classes.count(f.label) == 0) continue;  // unscorable class
    (rule_held(f) ? out.rule_shift_test : out.normal_test).push_back(idx);
  }
  out.held_out_rules.assign(held_out.begin(), held_out.end());
  return out;
}

// ---- text formats ----

namespace {

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> fields;
  size_t start = 0;
  while (true) {
    const size_t tab = line.find('\t', start);
    if (tab == std::string::npos) {
      fields.push_back(line.substr(start));
      break;
    }
    fields.push_back(line.substr(start, tab - start));
    start = tab + 1;
  }
  return fields;
}

[[noreturn]] void parse_fail(const char* what, int line_no, const std::string& detail) {
  raise(Errc::parse_error,
        std::string(what) + " line " + std::to_string(line_no) + ": " + detail);
}

std::string or_dash(const std::string& s) { return s.empty() ? "-" : s; }
std::string from_dash(const std::string& s) { return s == "-" ? "" : s; }

}  // namespace

std::string write_manifest(const std::vector<SampleRecord>& records) {
  std::ostringstream out;
  for (const SampleRecord& r : records) {
    out << r.sample_id << "\t" << (r.malicious ? "malicious" : "benign") << "\t"
        << or_dash(r.first_seen) << "\t" << r.code_md5 << "\t" << or_dash(r.variant_group) << "\t"
        << or_dash(r.code_path) << "\n";
  }
  return out.str();
}

std::vector<SampleRecord> parse_manifest(const std::string& text) {
  std::vector<SampleRecord> records;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    const auto fields = split_tabs(line);
    if (fields.size() != 6) parse_fail("manifest", line_no, "expected 6 tab-separated fields");
    SampleRecord r;
    r.sample_id = fields[0];
    if (fields[1] == "malicious") {
      r.malicious = true;
    } else if (fields[1] == "benign") {
      r.malicious = false;
    } else {
      parse_fail("manifest", line_no, "label must be malicious|benign");
    }
    r.first_seen = from_dash(fields[2]);
    r.code_md5 = fields[3];
    if (r.code_md5.empty() || r.code_md5 == "-") {
      parse_fail("manifest", line_no, "missing code_md5");
    }
    r.variant_group = from_dash(fields[4]);
    r.code_path = from_dash(fields[5]);
    if (r.sample_id.empty()) parse_fail("manifest", line_no, "missing sample_id");
    records.push_back(std::move(r));
  }
  return records;
}

std::string write_assignments(const std::vector<SplitAssignment>& assignments) {
  std::ostringstream out;
  for (const SplitAssignment& a : assignments) {
    out << a.sample_id << "\t" << a.cohort << "\t" << a.role << "\n";
  }
  return out.str();
}

std::vector<SplitAssignment> parse_assignments(const std::string& text) {
  std::vector<SplitAssignment> out;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    const auto fields = split_tabs(line);
    if (fields.size() != 3) parse_fail("assignments", line_no, "expected 3 fields");
    out.push_back({fields[0], fields[1], fields[2]});
  }
  return out;
}

std::string write_function_records(const std::vector<FunctionRecord>& functions) {
  std::ostringstream out;
  for (const FunctionRecord& f : functions) {
    out << f.function_id << "\t" << f.label << "\t" << f.rule_id << "\t"
        << to_hex(f.function_bytes.data(), f.function_bytes.size()) << "\t";
    if (f.api_sites.empty()) {
      out << "-";
    } else {
      for (size_t i = 0; i < f.api_sites.size(); ++i) {
        const ApiSite& s = f.api_sites[i];
        if (i > 0) out << ";";
        out << s.offset << ":" << s.length << ":" << s.api_name;
      }
    }
    out << "\n";
  }
  return out.str();
}

std::vector<FunctionRecord> parse_function_records(const std::string& text) {
  std::vector<FunctionRecord> out;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    const auto fields = split_tabs(line);
    if (fields.size() != 5) parse_fail("function records", line_no, "expected 5 fields");
    FunctionRecord f;
    f.function_id = fields[0];
    f.label = fields[1];
    f.rule_id = fields[2];
    try {
      f.function_bytes = from_hex(fields[3]);
    } catch (const Error&) {
      parse_fail("function records", line_no, "bad hex bytes");
    }
    if (fields[4] != "-") {
      std::istringstream sites(fields[4]);
      std::string site;
      while (std::getline(sites, site, ';')) {
        const size_t c1 = site.find(':');
        const size_t c2 = site.find(':', c1 == std::string::npos ? c1 : c1 + 1);
        if (c1 == std::string::npos || c2 == std::string::npos) {
          parse_fail("function records", line_no, "bad site spec");
        }
        ApiSite s;
        s.offset = std::stoll(site.substr(0, c1));
        s.length = std::stoll(site.substr(c1 + 1, c2 - c1 - 1));
        s.api_name = site.substr(c2 + 1);
        if (s.offset < 0 || s.length <= 0 ||
            s.offset + s.length > static_cast<int64_t>(f.function_bytes.size())) {
          parse_fail("function records", line_no, "site outside function bytes");
        }
        f.api_sites.push_back(std::move(s));
      }
    }
    out.push_back(std::move(f));
  }
  return out;
}

// ---- binary dataset container ----

std::vector<uint8_t> serialize_dataset(const DatasetFile& dataset) {
  BinWriter w;
  w.u64(kDatasetMagic);
  w.u32(1);
  w.str(dataset.task);
  w.u64(dataset.config_digest);
  w.i64(dataset.chunk_length);
  w.u32(static_cast<uint32_t>(dataset.label_names.size()));
  for (const auto& name : dataset.label_names) w.str(name);
  w.u32(static_cast<uint32_t>(dataset.records.size()));
  for (const DatasetRecord& r : dataset.records) {
    w.str(r.sample_id);
    w.u8(r.split);
    w.u32(static_cast<uint32_t>(r.label));
    w.i64(r.aux);
    w.str(r.tag);
    w.u32(static_cast<uint32_t>(r.chunks.size()));
    for (const auto& chunk : r.chunks) {
      w.u32(static_cast<uint32_t>(chunk.size()));
      for (int32_t id : chunk) w.u32(static_cast<uint32_t>(id));
    }
  }
  const auto& body = w.buffer();
  BinWriter tail;
  tail.u64(fnv1a64(std::string_view(reinterpret_cast<const char*>(body.data()), body.size())));
  std::vector<uint8_t> out = body;
  out.insert(out.end(), tail.buffer().begin(), tail.buffer().end());
  return out;
}

DatasetFile deserialize_dataset(std::span<const uint8_t> bytes) {
  if (bytes.size() < 8) raise(Errc::corrupt_model_file, "dataset file too small");
  const size_t body_size = bytes.size() - 8;
  BinReader tail(bytes.data() + body_size, 8);
  const uint64_t expect = tail.u64();
  if (expect != fnv1a64(std::string_view(reinterpret_cast<const char*>(bytes.data()), body_size))) {
    raise(Errc::corrupt_model_file, "dataset checksum mismatch");
  }
  BinReader r(bytes.data(), body_size);
  if (r.u64() != kDatasetMagic) raise(Errc::corrupt_model_file, "bad dataset magic");
  if (r.u32() != 1) raise(Errc::corrupt_model_file, "unsupported dataset version");
  DatasetFile d;
  d.task = r.str();
  d.config_digest = r.u64();
  d.chunk_length = r.i64();
  const uint32_t n_labels = r.u32();
  for (uint32_t i = 0; i < n_labels; ++i) d.label_names.push_back(r.str());
  const uint32_t n_records = r.u32();
  for (uint32_t i = 0; i < n_records; ++i) {
    DatasetRecord rec;
    rec.sample_id = r.str();
    rec.split = r.u8();
    rec.label = static_cast<int32_t>(r.u32());
    rec.aux = r.i64();
    rec.tag = r.str();
    const uint32_t n_chunks = r.u32();
    rec.chunks.resize(n_chunks);
    for (uint32_t c = 0; c < n_chunks; ++c) {
      const uint32_t len = r.u32();
      rec.chunks[c].resize(len);
      for (uint32_t t = 0; t < len; ++t) rec.chunks[c][t] = static_cast<int32_t>(r.u32());
    }
    d.records.push_back(std::move(rec));
  }
  if (r.remaining() != 0) raise(Errc::corrupt_model_file, "trailing dataset bytes");
  return d;
}

void save_dataset(const DatasetFile& dataset, const std::string& path) {
  write_file_atomic(path, serialize_dataset(dataset));
}

DatasetFile load_dataset(const std::string& path) {
  const auto bytes = read_file_bytes(path);
  return deserialize_dataset(bytes);
}

}  // namespace binfm::corpus
