// Copyright 2026 The HFUS Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

// Study-level evaluation: ROC staircase, full and partial AUC, recall at fixed
// precision, and averaging across cross-validation folds.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "hfus/error.hpp"

namespace hfus {

struct RocPoint {
  double fpr = 0;
  double tpr = 0;
  double threshold = 0;  // predictions >= threshold are positive
};

using RocCurve = std::vector<RocPoint>;

inline constexpr double kPartialAucFprMax = 0.3;
inline constexpr std::array<double, 3> kRecallPrecisions{0.90, 0.85, 0.80};
inline constexpr std::size_t kMeanRocGridPoints = 201;

namespace detail {

inline void check_scores(std::span<const double> scores, std::span<const int> labels, bool need_negative) {
  if (scores.size() != labels.size()) throw ShapeError("evaluation: scores and labels differ in length");
  std::size_t pos = 0, neg = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!std::isfinite(scores[i])) throw DomainError("evaluation: non-finite score");
    if (labels[i] == 1) {
      ++pos;
    } else if (labels[i] == 0) {
      ++neg;
    } else {
      throw DomainError("evaluation: labels must be 0 or 1");
    }
  }
  if (pos == 0 || (need_negative && neg == 0)) {
    throw DomainError("evaluation: need at least one positive and one negative label");
  }
}

// Indices sorted by descending score; ties keep input order (stable).
inline std::vector<std::size_t> descending_order(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

// Calls visit(tp, fp, threshold) after each group of tied scores.
template <class Visit>
void for_each_cut(std::span<const double> scores, std::span<const int> labels, Visit visit) {
  const auto order = descending_order(scores);
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < order.size();) {
    const double threshold = scores[order[i]];
    for (; i < order.size() && scores[order[i]] == threshold; ++i) (labels[order[i]] ? tp : fp)++;
    visit(tp, fp, threshold);
  }
}

}  // namespace detail

// Staircase from (0,0) to (1,1), one point per distinct score. Tied scores
// advance TP and FP together, giving a diagonal segment.
inline RocCurve roc_curve(std::span<const double> scores, std::span<const int> labels) {
  detail::check_scores(scores, labels, true);
  const double pos = static_cast<double>(std::count(labels.begin(), labels.end(), 1));
  const double neg = static_cast<double>(labels.size()) - pos;
  RocCurve curve{{0.0, 0.0, std::numeric_limits<double>::infinity()}};
  detail::for_each_cut(scores, labels, [&](std::size_t tp, std::size_t fp, double threshold) {
    curve.push_back({static_cast<double>(fp) / neg, static_cast<double>(tp) / pos, threshold});
  });
  return curve;
}

// Trapezoidal area under the curve.
inline double auc(const RocCurve& curve) {
  double area = 0;
  for (std::size_t i = 1; i < curve.size(); ++i) {
    area += (curve[i].fpr - curve[i - 1].fpr) * (curve[i].tpr + curve[i - 1].tpr) / 2.0;
  }
  return area;
}

// Area over FPR in [0, fpr_max], divided by fpr_max so a perfect classifier
// scores 1.
inline double partial_auc(const RocCurve& curve, double fpr_max = kPartialAucFprMax) {
  if (!(fpr_max > 0.0 && fpr_max <= 1.0)) throw DomainError("partial_auc: fpr_max must be in (0, 1]");
  double area = 0;
  for (std::size_t i = 1; i < curve.size(); ++i) {
    const RocPoint& a = curve[i - 1];
    const RocPoint& b = curve[i];
    if (a.fpr >= fpr_max) break;
    if (b.fpr <= fpr_max) {
      area += (b.fpr - a.fpr) * (a.tpr + b.tpr) / 2.0;
    } else {
      const double t = (fpr_max - a.fpr) / (b.fpr - a.fpr);
      const double tpr_cut = a.tpr + t * (b.tpr - a.tpr);
      area += (fpr_max - a.fpr) * (a.tpr + tpr_cut) / 2.0;
    }
  }
  return area / fpr_max;
}

// Highest recall over all score thresholds whose precision is at least
// `precision`; 0 when no threshold qualifies.
inline double recall_at_precision(std::span<const double> scores, std::span<const int> labels, double precision) {
  if (!(precision > 0.0 && precision <= 1.0)) throw DomainError("recall_at_precision: precision must be in (0, 1]");
  detail::check_scores(scores, labels, false);
  const double pos = static_cast<double>(std::count(labels.begin(), labels.end(), 1));
  double best = 0.0;
  detail::for_each_cut(scores, labels, [&](std::size_t tp, std::size_t fp, double) {
    const double p = static_cast<double>(tp) / static_cast<double>(tp + fp);
    if (p >= precision - 1e-12) best = std::max(best, static_cast<double>(tp) / pos);
  });
  return best;
}

// TPR at `fpr` on the piecewise-linear curve; at a vertical jump the upper
// value is returned.
inline double tpr_at(const RocCurve& curve, double fpr) {
  std::size_t last = 0;
  for (std::size_t i = 0; i < curve.size(); ++i)
    if (curve[i].fpr <= fpr) last = i;
  if (last + 1 >= curve.size() || curve[last].fpr == fpr) return curve[last].tpr;
  const RocPoint& a = curve[last];
  const RocPoint& b = curve[last + 1];
  return a.tpr + (fpr - a.fpr) / (b.fpr - a.fpr) * (b.tpr - a.tpr);
}

// Vertical average of the curves on a uniform FPR grid with `points` points.
inline RocCurve mean_roc(std::span<const RocCurve> curves, std::size_t points = kMeanRocGridPoints) {
  if (curves.empty()) throw DomainError("mean_roc: no curves");
  RocCurve out;
  for (std::size_t i = 0; i < points; ++i) {
    const double x = static_cast<double>(i) / static_cast<double>(points - 1);
    double acc = 0;
    for (const auto& c : curves) acc += tpr_at(c, x);
    out.push_back({x, acc / static_cast<double>(curves.size()), std::numeric_limits<double>::quiet_NaN()});
  }
  return out;
}

struct MetricsReport {
  double auc = 0;
  double partial_auc = 0;  // normalized, FPR in [0, 0.3]
  double r_at_p90 = 0;
  double r_at_p85 = 0;
  double r_at_p80 = 0;
};

inline MetricsReport compute_metrics(std::span<const double> scores, std::span<const int> labels) {
  const RocCurve curve = roc_curve(scores, labels);
  return {auc(curve), partial_auc(curve), recall_at_precision(scores, labels, 0.90),
          recall_at_precision(scores, labels, 0.85), recall_at_precision(scores, labels, 0.80)};
}

// Arithmetic mean of every metric.
inline MetricsReport cross_fold_mean(std::span<const MetricsReport> reports) {
  if (reports.empty()) throw DomainError("cross_fold_mean: no reports");
  MetricsReport m;
  for (const auto& r : reports) {
    m.auc += r.auc;
    m.partial_auc += r.partial_auc;
    m.r_at_p90 += r.r_at_p90;
    m.r_at_p85 += r.r_at_p85;
    m.r_at_p80 += r.r_at_p80;
  }
  const double n = static_cast<double>(reports.size());
  return {m.auc / n, m.partial_auc / n, m.r_at_p90 / n, m.r_at_p85 / n, m.r_at_p80 / n};
}

// ---------------------------------------------------------------------------
// CSV output. Numbers use %.17g so files round-trip and rerun byte-identically.

inline std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline constexpr const char* kMetricsHeader = "fold,variant,norm,auc,pauc30,r_at_p90,r_at_p85,r_at_p80";
inline constexpr const char* kRocHeader = "fpr,tpr,threshold";

inline std::string metrics_row(const std::string& fold, const std::string& variant, const std::string& norm,
                               const MetricsReport& r) {
  return fold + "," + variant + "," + norm + "," + format_number(r.auc) + "," + format_number(r.partial_auc) + "," +
         format_number(r.r_at_p90) + "," + format_number(r.r_at_p85) + "," + format_number(r.r_at_p80);
}

inline void write_roc_csv(const std::filesystem::path& path, const RocCurve& curve) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << kRocHeader << '\n';
  for (const auto& p : curve) {
    out << format_number(p.fpr) << ',' << format_number(p.tpr) << ',' << format_number(p.threshold) << '\n';
  }
  if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace hfus
