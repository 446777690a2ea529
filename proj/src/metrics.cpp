#include "binfm/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

namespace binfm::metrics {

double topk_accuracy(const std::vector<std::vector<double>>& logit_sets,
                     const std::vector<int>& labels, int64_t k) {
  if (k < 1) raise(Errc::invalid_config, "k must be >= 1");
  if (logit_sets.size() != labels.size() || logit_sets.empty()) {
    raise(Errc::invalid_config, "logits/labels size mismatch");
  }
  int64_t hits = 0;
  for (size_t s = 0; s < logit_sets.size(); ++s) {
    const auto& logits = logit_sets[s];
    const int label = labels[s];
    const double label_score = logits[static_cast<size_t>(label)];
    // rank of the true label: classes strictly better, plus earlier-index ties
    int64_t better = 0;
    for (size_t c = 0; c < logits.size(); ++c) {
      if (static_cast<int>(c) == label) continue;
      if (logits[c] > label_score || (logits[c] == label_score && static_cast<int>(c) < label)) {
        ++better;
      }
    }
    if (better < k) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(logit_sets.size());
}

double weighted_f1(const std::vector<int>& predictions, const std::vector<int>& labels) {
  if (predictions.size() != labels.size() || labels.empty()) {
    raise(Errc::invalid_config, "predictions/labels size mismatch");
  }
  std::map<int, int64_t> support, tp, fp, fn;
  for (size_t i = 0; i < labels.size(); ++i) {
    ++support[labels[i]];
    if (predictions[i] == labels[i]) {
      ++tp[labels[i]];
    } else {
      ++fp[predictions[i]];
      ++fn[labels[i]];
    }
  }
  double weighted = 0.0;
  for (const auto& [cls, count] : support) {
    const double tpv = static_cast<double>(tp[cls]);
    const double fpv = static_cast<double>(fp[cls]);
    const double fnv = static_cast<double>(fn[cls]);
    const double precision = tpv + fpv > 0.0 ? tpv / (tpv + fpv) : 0.0;
    const double recall = tpv + fnv > 0.0 ? tpv / (tpv + fnv) : 0.0;
    const double f1 = precision + recall > 0.0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
    weighted += f1 * static_cast<double>(count);
  }
  return weighted / static_cast<double>(labels.size());
}

double roc_auc(const ScoredSet& scored) {
  if (scored.scores.size() != scored.labels.size()) {
    raise(Errc::invalid_config, "scores/labels size mismatch");
  }
  int64_t n_pos = 0, n_neg = 0;
  for (int l : scored.labels) (l != 0 ? n_pos : n_neg)++;
  if (n_pos == 0 || n_neg == 0) raise(Errc::single_class_input, "AUC needs both classes");

  // Mann-Whitney via average ranks over the pooled, sorted scores.
  std::vector<size_t> order(scored.scores.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](size_t a, size_t b) { return scored.scores[a] < scored.scores[b]; });
  double rank_sum_pos = 0.0;
  size_t i = 0;
  while (i < order.size()) {
    size_t j = i;
    while (j < order.size() && scored.scores[order[j]] == scored.scores[order[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // 1-based average rank
    for (size_t t = i; t < j; ++t) {
      if (scored.labels[order[t]] != 0) rank_sum_pos += avg_rank;
    }
    i = j;
  }
  const double u = rank_sum_pos - static_cast<double>(n_pos) * (static_cast<double>(n_pos) + 1.0) / 2.0;
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

OperatingPoint tpr_at_fpr(const ScoredSet& scored, double target_fpr) {
  if (target_fpr < 0.0 || target_fpr >= 1.0) raise(Errc::invalid_config, "target_fpr out of range");
  std::vector<double> neg, pos;
  for (size_t i = 0; i < scored.labels.size(); ++i) {
    (scored.labels[i] != 0 ? pos : neg).push_back(scored.scores[i]);
  }
  if (pos.empty() || neg.empty()) raise(Errc::single_class_input, "operating point needs both classes");

  OperatingPoint out;
  out.low_negative_count_warning =
      target_fpr > 0.0 && static_cast<double>(neg.size()) < 1.0 / target_fpr;

  auto fpr_at = [&](double threshold) {
    int64_t n = 0;
    for (double s : neg) {
      if (s >= threshold) ++n;
    }
    return static_cast<double>(n) / static_cast<double>(neg.size());
  };
  auto tpr_at = [&](double threshold) {
    int64_t n = 0;
    for (double s : pos) {
      if (s >= threshold) ++n;
    }
    return static_cast<double>(n) / static_cast<double>(pos.size());
  };

  // Candidate thresholds are the observed scores, ascending; pick the
  // smallest compliant one. If none complies the threshold sits just
  // above the largest negative.
  std::vector<double> candidates = scored.scores;
  std::sort(candidates.begin(), candidates.end());
  candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());
  for (double t : candidates) {
    const double f = fpr_at(t);
    if (f <= target_fpr) {
      out.threshold = t;
      out.achieved_fpr = f;
      out.tpr = tpr_at(t);
      return out;
    }
  }
  const double max_neg = *std::max_element(neg.begin(), neg.end());
  out.threshold = std::nextafter(max_neg, std::numeric_limits<double>::infinity());
  out.achieved_fpr = 0.0;
  out.tpr = tpr_at(out.threshold);
  return out;
}

std::vector<DriftCell> drift_matrix(
    int64_t n_cohorts, const std::function<void(const std::vector<int>& window)>& train_fn,
    const std::function<TaskReport(int64_t cohort)>& eval_fn) {
  std::vector<DriftCell> cells;
  for (int64_t w = 1; w <= n_cohorts; ++w) {
    std::vector<int> window;
    std::string window_name;
    for (int64_t c = 1; c <= w; ++c) {
      window.push_back(static_cast<int>(c));
      if (!window_name.empty()) window_name += "+";
      window_name += "D" + std::to_string(c);
    }
    train_fn(window);
    for (int64_t c = w; c <= n_cohorts; ++c) {
      DriftCell cell;
      cell.train_window = window_name;
      cell.test_cohort = "D" + std::to_string(c);
      cell.report = eval_fn(c);
      cells.push_back(std::move(cell));
    }
  }
  return cells;
}

std::string write_score_lines(const std::vector<ScoreRecord>& records) {
  std::ostringstream out;
  out.precision(17);
  for (const ScoreRecord& r : records) {
    out << r.sample_id << "\t" << r.label << "\t" << r.score << "\n";
  }
  return out.str();
}

std::vector<ScoreRecord> parse_score_lines(const std::string& text) {
  std::vector<ScoreRecord> records;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    ScoreRecord r;
    if (!(ls >> r.sample_id >> r.label >> r.score)) {
      raise(Errc::parse_error, "score line " + std::to_string(line_no));
    }
    records.push_back(std::move(r));
  }
  return records;
}

namespace {

void render_task_report(std::ostringstream& out, const TaskReport& report) {
  out.precision(17);
  for (const auto& [name, value] : report.values) {
    out << name << "\t" << value << "\n";
  }
  if (report.has_operating_point) {
    const OperatingPoint& op = report.operating_point;
    out << "threshold\t" << op.threshold << "\n";
    out << "achieved_fpr\t" << op.achieved_fpr << "\n";
    if (op.low_negative_count_warning) {
      out << "warning\tfewer negatives than 1/target_fpr; achieved FPR granularity is coarse\n";
    }
  }
}

}  // namespace

std::string render_report(const std::vector<std::pair<std::string, TaskReport>>& sections,
                          const std::vector<DriftCell>& drift, uint64_t config_digest) {
  std::ostringstream out;
  out << "# binfm evaluation report\n";
  out << "# config_digest=" << std::hex << config_digest << std::dec << "\n";
  for (const auto& [name, report] : sections) {
    out << "[" << name << "]\n";
    render_task_report(out, report);
  }
  for (const DriftCell& cell : drift) {
    out << "[drift train=" << cell.train_window << " test=" << cell.test_cohort << "]\n";
    render_task_report(out, cell.report);
  }
  return out.str();
}

}  // namespace binfm::metrics
