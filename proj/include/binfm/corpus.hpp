#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "binfm/bpe.hpp"
#include "binfm/common.hpp"

namespace binfm::corpus {

struct SampleRecord {
  std::string sample_id;
  bool malicious = false;
  std::string first_seen;      // ISO-8601; lexicographic order is temporal order
  std::string code_md5;        // hex digest of code-section bytes
  std::string variant_group;   // precomputed cluster id; empty when unclustered
  std::string code_path;
};

struct SplitAssignment {
  std::string sample_id;
  std::string cohort;  // "M2", "D1".."Dn", or "benign"
  std::string role;    // "train", "validation", "test"
};

struct ApiSite {
  int64_t offset = 0;
  int64_t length = 0;
  std::string api_name;
};

struct FunctionRecord {
  std::string function_id;
  std::vector<uint8_t> function_bytes;
  std::string label;    // functionality class name
  std::string rule_id;  // labeling rule
  std::vector<ApiSite> api_sites;
};

// ---- manifest curation ----

/// One record per digest (oldest first_seen wins, then sample_id); any
/// malicious record whose digest matches a benign record is removed.
std::vector<SampleRecord> dedup_by_code_md5(const std::vector<SampleRecord>& records);

/// Within each variant group keeps the oldest malicious_cap malicious and
/// benign_cap benign records; ungrouped records pass through.
std::vector<SampleRecord> cap_variants(const std::vector<SampleRecord>& records,
                                       int64_t malicious_cap = 2, int64_t benign_cap = 10);

/// Sorts malicious records by first_seen, reserves the oldest
/// pretrain_count for the pretraining-only cohort M2, partitions the rest
/// into cohort_count contiguous temporal cohorts each split 50/10/40 by
/// position, and splits benign records 50/10/40 without temporal sorting.
std::vector<SplitAssignment> temporal_split(const std::vector<SampleRecord>& records,
                                            int64_t pretrain_count, int64_t cohort_count = 3);

// floor/floor/remainder so the test bucket absorbs rounding
struct SplitSizes {
  int64_t train = 0, validation = 0, test = 0;
};
SplitSizes split_50_10_40(int64_t n);

// ---- pretraining sequence set ----

struct PretrainSequenceSet {
  std::vector<std::vector<int32_t>> sequences;
  std::vector<std::string> provenance;  // sample_id per sequence
};

using CodeLoader = std::function<std::vector<uint8_t>(const SampleRecord&)>;

/// Tokenizes each record's code bytes, chunks to chunk_length, and keeps
/// only chunks whose underlying raw bytes have entropy <= threshold.
PretrainSequenceSet build_pretrain_set(const std::vector<SampleRecord>& records,
                                       const bpe::BpeModel& tokenizer, double entropy_threshold,
                                       int64_t chunk_length, const CodeLoader& loader);

// ---- API-call masked dataset ----

struct MaskedExample {
  std::string function_id;
  std::vector<int32_t> ids;  // one fixed-length chunk containing exactly one <mask>
  int64_t mask_position = 0;
  int32_t target = 0;        // API class index
};

struct ApiMaskDataset {
  std::vector<std::string> api_names;  // class index -> API name
  std::vector<MaskedExample> train, validation, test;
};

/// Keeps API classes with at least min_freq call sites across the corpus,
/// samples at most per_api_cap functions per class (seeded), masks each
/// selected site with a single <mask> token, and splits 50/10/40.
ApiMaskDataset build_api_mask_dataset(const std::vector<FunctionRecord>& functions,
                                      int64_t min_freq, int64_t per_api_cap,
                                      const bpe::BpeModel& tokenizer, int64_t chunk_length,
                                      uint64_t seed);

/// Tokenized first chunk of a function (truncated to chunk capacity).
std::vector<int32_t> tokenize_function(const FunctionRecord& function,
                                       const bpe::BpeModel& tokenizer, int64_t chunk_length);

// ---- rule-shift functionality splits ----

struct RuleShiftSplits {
  std::vector<std::string> class_names;            // retained classes, index = label id
  std::map<std::string, int32_t> class_index;
  std::vector<size_t> train, validation, normal_test, rule_shift_test;  // indices into input
  std::vector<std::string> held_out_rules;
};

/// Partitions functions 50/10/40, holds out half of each multi-rule
/// class's rules from train/validation, drops classes left with fewer
/// than min_train training entries, caps classes at train_cap training
/// entries, and divides the untouched test split by rule retention.
RuleShiftSplits build_rule_shift_splits(const std::vector<FunctionRecord>& functions,
                                        double holdout_fraction, int64_t min_train,
                                        int64_t train_cap, uint64_t seed);

// ---- line-delimited text formats ----

std::string write_manifest(const std::vector<SampleRecord>& records);
std::vector<SampleRecord> parse_manifest(const std::string& text);

std::string write_assignments(const std::vector<SplitAssignment>& assignments);
std::vector<SplitAssignment> parse_assignments(const std::string& text);

std::string write_function_records(const std::vector<FunctionRecord>& functions);
std::vector<FunctionRecord> parse_function_records(const std::string& text);

// ---- binary task-dataset container ----

struct DatasetRecord {
  std::string sample_id;
  uint8_t split = 0;  // 0 train, 1 validation, 2 test, 3 rule-shift test
  int32_t label = 0;
  int64_t aux = -1;   // mask position for the API task; -1 otherwise
  std::string tag;    // cohort name / rule id; may be empty
  std::vector<std::vector<int32_t>> chunks;
};

constexpr uint8_t kSplitTrain = 0;
constexpr uint8_t kSplitValidation = 1;
constexpr uint8_t kSplitTest = 2;
constexpr uint8_t kSplitShiftTest = 3;

struct DatasetFile {
  std::string task;  // "pretrain" | "api" | "function" | "detection"
  uint64_t config_digest = 0;
  int64_t chunk_length = 0;
  std::vector<std::string> label_names;
  std::vector<DatasetRecord> records;
};

std::vector<uint8_t> serialize_dataset(const DatasetFile& dataset);
DatasetFile deserialize_dataset(std::span<const uint8_t> bytes);
void save_dataset(const DatasetFile& dataset, const std::string& path);
DatasetFile load_dataset(const std::string& path);

}  // namespace binfm::corpus
