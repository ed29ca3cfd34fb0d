#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

#include "json.hpp"

#include "dynfuse/core/error.hpp"
#include "dynfuse/loss.hpp"

// Binary classification metrics. Predictions are prob >= threshold.
// Precision or recall with a zero denominator is reported as 0 and flagged.
namespace dynfuse {

struct Counts {
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
  std::size_t total() const { return tp + fp + tn + fn; }
};

struct EvalResult {
  double acc = 0, auc = 0, f1 = 0, precision = 0, recall = 0, ap = 0;
  double threshold = 0.5;
  Counts counts;
  bool precision_undefined = false;
  bool recall_undefined = false;
  bool auc_undefined = false;
  bool ap_undefined = false;
};

namespace detail {

inline void check_scores(const std::vector<int>& labels, const std::vector<double>& scores,
                         const char* op) {
  if (labels.empty()) throw ValueError(std::string(op) + ": empty input");
  if (labels.size() != scores.size()) {
    throw ShapeError(std::string(op) + ": " + std::to_string(labels.size()) + " labels vs " +
                     std::to_string(scores.size()) + " scores");
  }
  for (int l : labels) check_label(l);
  for (double s : scores)
    if (!std::isfinite(s)) throw NumericError(std::string(op) + ": non-finite score");
}

}  // namespace detail

inline double f1_score(double precision, double recall) {
  return precision + recall > 0.0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
}

inline EvalResult confusion_metrics(const std::vector<int>& labels,
                                    const std::vector<double>& probs, double threshold = 0.5) {
  detail::check_scores(labels, probs, "confusion_metrics");
  EvalResult r;
  r.threshold = threshold;
  auto& c = r.counts;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const bool pred = probs[i] >= threshold;
    if (labels[i] == 1) {
      pred ? ++c.tp : ++c.fn;
    } else {
      pred ? ++c.fp : ++c.tn;
    }
  }
  r.acc = static_cast<double>(c.tp + c.tn) / static_cast<double>(c.total());
  r.precision_undefined = c.tp + c.fp == 0;
  r.recall_undefined = c.tp + c.fn == 0;
  r.precision = r.precision_undefined ? 0.0 : static_cast<double>(c.tp) / (c.tp + c.fp);
  r.recall = r.recall_undefined ? 0.0 : static_cast<double>(c.tp) / (c.tp + c.fn);
  r.f1 = f1_score(r.precision, r.recall);
  return r;
}

// Mann-Whitney: P(s+ > s-) + P(s+ == s-)/2 over all positive/negative pairs.
// Computed from average ranks, O(n log n).
inline double roc_auc(const std::vector<int>& labels, const std::vector<double>& scores) {
  detail::check_scores(labels, scores, "roc_auc");
  const std::size_t n = labels.size();
  const std::size_t pos = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
  if (pos == 0 || pos == n) throw ValueError("roc_auc: labels contain a single class");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Twice the rank sum keeps tie averages integral.
  long double rank2_sum = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const long double avg2 = static_cast<long double>(i + 1 + j);  // 2 * mean rank
    for (std::size_t k = i; k < j; ++k)
      if (labels[order[k]] == 1) rank2_sum += avg2;
    i = j;
  }
  const long double neg = static_cast<long double>(n - pos);
  const long double u2 = rank2_sum - static_cast<long double>(pos) * (pos + 1);
  return static_cast<double>(u2 / (2.0L * pos * neg));
}

// AP = sum_k (R_k - R_{k-1}) P_k over the ranking by descending score; equal
// scores keep input order.
inline double average_precision(const std::vector<int>& labels,
                                const std::vector<double>& scores) {
  detail::check_scores(labels, scores, "average_precision");
  const std::size_t n = labels.size();
  const std::size_t pos = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
  if (pos == 0) throw ValueError("average_precision: no positive labels");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double ap = 0.0;
  std::size_t hits = 0;
  for (std::size_t k = 0; k < n; ++k) {
    if (labels[order[k]] != 1) continue;
    ++hits;
    ap += static_cast<double>(hits) / static_cast<double>(k + 1);
  }
  return ap / static_cast<double>(pos);
}

// Every metric at once. AUC/AP that are undefined for the given labels are
// reported as 0 with their flag set.
inline EvalResult evaluate(const std::vector<int>& labels, const std::vector<double>& probs,
                           double threshold = 0.5) {
  auto r = confusion_metrics(labels, probs, threshold);
  const auto pos = std::count(labels.begin(), labels.end(), 1);
  r.auc_undefined = pos == 0 || pos == static_cast<long>(labels.size());
  r.ap_undefined = pos == 0;
  if (!r.auc_undefined) r.auc = roc_auc(labels, probs);
  if (!r.ap_undefined) r.ap = average_precision(labels, probs);
  return r;
}

inline nlohmann::ordered_json to_json(const EvalResult& r) {
  const auto& c = r.counts;
  return {{"acc", r.acc},
          {"auc", r.auc},
          {"f1", r.f1},
          {"precision", r.precision},
          {"recall", r.recall},
          {"ap", r.ap},
          {"threshold", r.threshold},
          {"counts", {{"tp", c.tp}, {"fp", c.fp}, {"tn", c.tn}, {"fn", c.fn}}}};
}

// Names of metrics that fell back to a zero-denominator convention.
inline std::vector<std::string> metric_warnings(const EvalResult& r) {
  std::vector<std::string> w;
  if (r.precision_undefined) w.push_back("precision: no positive predictions");
  if (r.recall_undefined) w.push_back("recall: no positive labels");
  if (r.auc_undefined) w.push_back("auc: single-class labels");
  if (r.ap_undefined) w.push_back("ap: no positive labels");
  return w;
}

}  // namespace dynfuse
