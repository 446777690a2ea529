#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "binfm/common.hpp"

namespace binfm::metrics {

struct ScoredSet {
  std::vector<double> scores;  // higher = more likely positive
  std::vector<int> labels;     // 1 = positive (malicious), 0 = negative
};

/// Fraction of samples whose true label is among the k highest-scoring
/// classes; score ties break toward the lower class index.
double topk_accuracy(const std::vector<std::vector<double>>& logit_sets,
                     const std::vector<int>& labels, int64_t k);

/// Per-class F1 averaged with weights proportional to class support;
/// classes absent from the labels are excluded.
double weighted_f1(const std::vector<int>& predictions, const std::vector<int>& labels);

/// Probability a random positive outranks a random negative, ties
/// counting one half (Mann-Whitney).
double roc_auc(const ScoredSet& scored);

struct OperatingPoint {
  double tpr = 0.0;
  double threshold = 0.0;
  double achieved_fpr = 0.0;
  bool low_negative_count_warning = false;  // fewer than 1/target_fpr negatives
};

/// Smallest threshold whose empirical FPR does not exceed target_fpr;
/// no interpolation. Scores at or above the threshold predict positive.
OperatingPoint tpr_at_fpr(const ScoredSet& scored, double target_fpr);

struct TaskReport {
  // name -> value, emitted in insertion order for stable report files
  std::vector<std::pair<std::string, double>> values;
  OperatingPoint operating_point;
  bool has_operating_point = false;
};

struct DriftCell {
  std::string train_window;  // e.g. "D1+D2"
  std::string test_cohort;   // e.g. "D3"
  TaskReport report;
};

/// Fine-tunes once per training window via `train_fn`, then scores every
/// not-older cohort's test set (paired with the benign test set by the
/// caller inside `eval_fn`).
std::vector<DriftCell> drift_matrix(
    int64_t n_cohorts, const std::function<void(const std::vector<int>& window)>& train_fn,
    const std::function<TaskReport(int64_t cohort)>& eval_fn);

// ---- score / report files ----

struct ScoreRecord {
  std::string sample_id;
  int label = 0;
  double score = 0.0;
};

std::string write_score_lines(const std::vector<ScoreRecord>& records);
std::vector<ScoreRecord> parse_score_lines(const std::string& text);

std::string render_report(const std::vector<std::pair<std::string, TaskReport>>& sections,
                          const std::vector<DriftCell>& drift, uint64_t config_digest);

}  // namespace binfm::metrics
