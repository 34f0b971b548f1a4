#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "glaucad/error.hpp"
#include "json.hpp"

namespace glaucad {

// Positive class = glaucoma (label 1).
struct ConfusionCounts {
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
  std::size_t total() const { return tp + fp + tn + fn; }
  bool operator==(const ConfusionCounts&) const = default;
};

inline void check_scores(std::span<const double> scores, std::span<const int> labels) {
  if (scores.empty()) throw ConfigError("metrics: empty input");
  if (scores.size() != labels.size()) throw ConfigError("metrics: scores and labels differ in length");
  for (int l : labels) {
    if (l != 0 && l != 1) throw ConfigError("metrics: labels must be 0 or 1");
  }
}

// Predicts positive iff score >= threshold.
inline ConfusionCounts confusion(std::span<const double> scores, std::span<const int> labels,
                                 double threshold = 0.5) {
  check_scores(scores, labels);
  ConfusionCounts c;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool pos = scores[i] >= threshold;
    if (labels[i] == 1) (pos ? c.tp : c.fn)++;
    else (pos ? c.fp : c.tn)++;
  }
  return c;
}

struct BasicMetrics {
  double accuracy = 0, precision = 0, recall = 0, f1 = 0;
  // Set when a denominator was zero and the value was reported as 0.
  bool precision_undefined = false, recall_undefined = false, f1_undefined = false;
};

inline BasicMetrics basic_metrics(const ConfusionCounts& c) {
  BasicMetrics m;
  const auto ratio = [](std::size_t num, std::size_t den, bool& flag) {
    if (den == 0) {
      flag = true;
      return 0.0;
    }
    return static_cast<double>(num) / static_cast<double>(den);
  };
  bool acc_flag = false;
  m.accuracy = ratio(c.tp + c.tn, c.total(), acc_flag);
  m.precision = ratio(c.tp, c.tp + c.fp, m.precision_undefined);
  m.recall = ratio(c.tp, c.tp + c.fn, m.recall_undefined);
  // Harmonic mean in count form: 2tp / (2tp + fp + fn).
  m.f1 = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, m.f1_undefined);
  return m;
}

struct RocPoint {
  double threshold = 0;  // +inf for the (0, 0) start point
  double fpr = 0;
  double tpr = 0;
};

struct RocCurve {
  double auc = 0;
  std::vector<RocPoint> points;  // decreasing threshold, (0,0) ... (1,1)
};

// Tie-aware ROC. Points are placed after each group of equal scores, so a
// tie between a positive and a negative becomes a diagonal segment worth
// half credit. The trapezoid sum is accumulated in integers (twice the area
// times P*N), which makes it equal to the pairwise count exactly.
inline RocCurve roc_auc(std::span<const double> scores, std::span<const int> labels) {
  check_scores(scores, labels);
  const auto P = static_cast<std::uint64_t>(std::count(labels.begin(), labels.end(), 1));
  const auto N = static_cast<std::uint64_t>(labels.size()) - P;
  if (P == 0 || N == 0) throw ConfigError("roc_auc: both classes must be present (AUC undefined)");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] > scores[b]; });

  RocCurve roc;
  roc.points.push_back({std::numeric_limits<double>::infinity(), 0.0, 0.0});
  std::uint64_t tp = 0, fp = 0, twice_area = 0;
  for (std::size_t i = 0; i < order.size();) {
    const double s = scores[order[i]];
    const std::uint64_t tp0 = tp, fp0 = fp;
    for (; i < order.size() && scores[order[i]] == s; ++i) (labels[order[i]] == 1 ? tp : fp)++;
    twice_area += (fp - fp0) * (tp + tp0);
    roc.points.push_back({s, static_cast<double>(fp) / static_cast<double>(N),
                          static_cast<double>(tp) / static_cast<double>(P)});
  }
  roc.auc = static_cast<double>(twice_area) / static_cast<double>(2 * P * N);
  return roc;
}

struct MetricReport {
  double accuracy = 0, precision = 0, recall = 0, f1 = 0, auc = 0;
  bool precision_undefined = false, recall_undefined = false, f1_undefined = false;
  bool auc_undefined = false;
  std::vector<RocPoint> roc;
  ConfusionCounts counts;  // at threshold 0.5
  double threshold = 0.5;
};

inline MetricReport evaluate_scores(std::span<const double> scores, std::span<const int> labels,
                                    double threshold = 0.5) {
  MetricReport r;
  r.threshold = threshold;
  r.counts = confusion(scores, labels, threshold);
  const auto b = basic_metrics(r.counts);
  r.accuracy = b.accuracy;
  r.precision = b.precision;
  r.recall = b.recall;
  r.f1 = b.f1;
  r.precision_undefined = b.precision_undefined;
  r.recall_undefined = b.recall_undefined;
  r.f1_undefined = b.f1_undefined;
  const bool both = std::count(labels.begin(), labels.end(), 1) > 0 &&
                    std::count(labels.begin(), labels.end(), 0) > 0;
  if (both) {
    auto roc = roc_auc(scores, labels);
    r.auc = roc.auc;
    r.roc = std::move(roc.points);
  } else {
    r.auc_undefined = true;
  }
  return r;
}

// The ROC start point's infinite threshold is written as null.
inline void to_json(nlohmann::json& j, const RocPoint& p) {
  j = nlohmann::json::object();
  j["threshold"] = std::isfinite(p.threshold) ? nlohmann::json(p.threshold) : nlohmann::json(nullptr);
  j["fpr"] = p.fpr;
  j["tpr"] = p.tpr;
}

inline void to_json(nlohmann::json& j, const ConfusionCounts& c) {
  j = {{"tp", c.tp}, {"fp", c.fp}, {"tn", c.tn}, {"fn", c.fn}};
}

inline void to_json(nlohmann::json& j, const MetricReport& r) {
  j = nlohmann::json::object();
  j["accuracy"] = r.accuracy;
  j["precision"] = r.precision;
  j["recall"] = r.recall;
  j["f1"] = r.f1;
  j["auc"] = r.auc;
  j["threshold"] = r.threshold;
  j["counts"] = r.counts;
  j["degenerate"] = {{"precision", r.precision_undefined},
                     {"recall", r.recall_undefined},
                     {"f1", r.f1_undefined},
                     {"auc", r.auc_undefined}};
  j["roc"] = r.roc;
}

inline std::string metric_report_json(const MetricReport& r) { return nlohmann::json(r).dump(2) + "\n"; }

inline std::string roc_csv(const std::vector<RocPoint>& roc) {
  std::ostringstream os;
  os.precision(17);
  os << "threshold,fpr,tpr\n";
  for (const auto& p : roc) {
    if (std::isfinite(p.threshold)) os << p.threshold;
    else os << "inf";
    os << ',' << p.fpr << ',' << p.tpr << '\n';
  }
  return os.str();
}

struct MeanStd {
  double mean = 0;
  double stddev = 0;  // population
};

inline MeanStd mean_std(std::span<const double> xs) {
  if (xs.empty()) throw ConfigError("mean_std: empty input");
  double m = 0;
  for (double x : xs) m += x;
  m /= static_cast<double>(xs.size());
  double v = 0;
  for (double x : xs) v += (x - m) * (x - m);
  return {m, std::sqrt(v / static_cast<double>(xs.size()))};
}

// "0.91±0.02"
inline std::string format_mean_std(const MeanStd& ms, int decimals = 2) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f±%.*f", decimals, ms.mean, decimals, ms.stddev);
  return buf;
}

}  // namespace glaucad
