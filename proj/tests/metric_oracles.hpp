#pragma once

// Brute-force reference implementations of the evaluation metrics, shared by
// the unit suite and the acceptance runner. They are deliberately written in
// the most literal form possible (pairwise comparisons, dense threshold
// sweeps) so they can serve as oracles for the production implementations.

#include <algorithm>
#include <numeric>
#include <set>
#include <utility>
#include <vector>

#include "kag/metrics.hpp"

namespace kag::oracle {

// exhaustive pairwise-comparison AUROC
inline double auroc_oracle(const ScoredSet& s) {
  double wins = 0.0;
  size_t pairs = 0;
  for (size_t i = 0; i < s.scores.size(); ++i) {
    if (!s.labels[i]) continue;
    for (size_t j = 0; j < s.scores.size(); ++j) {
      if (s.labels[j]) continue;
      ++pairs;
      if (s.scores[i] > s.scores[j]) wins += 1.0;
      else if (s.scores[i] == s.scores[j]) wins += 0.5;
    }
  }
  return wins / static_cast<double>(pairs);
}

// step-integrated PR area: sum of (recall step) x (precision at that rank)
inline double aupr_oracle(const ScoredSet& s) {
  size_t n = s.scores.size(), pos = 0;
  for (int l : s.labels) pos += static_cast<size_t>(l != 0);
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t a, size_t b) { return s.scores[a] > s.scores[b]; });
  double area = 0.0, prev_recall = 0.0;
  size_t tp = 0;
  for (size_t k = 0; k < n; ++k) {
    if (!s.labels[order[k]]) continue;
    ++tp;
    double recall = static_cast<double>(tp) / static_cast<double>(pos);
    double precision = static_cast<double>(tp) / static_cast<double>(k + 1);
    area += (recall - prev_recall) * precision;
    prev_recall = recall;
  }
  return area;
}

// dense threshold-sweep PRO oracle: same curve definition, rebuilt from
// scratch with explicit (0, first) anchoring and plain trapezoids
inline double pro_oracle(const std::vector<std::vector<double>>& maps,
                         const std::vector<std::vector<int>>& masks, int h, int w,
                         double fpr_limit) {
  std::set<double, std::greater<double>> ths;
  for (const auto& m : maps) ths.insert(m.begin(), m.end());
  std::vector<std::vector<std::vector<int>>> regions;
  size_t neg = 0;
  for (const auto& m : masks) {
    regions.push_back(connected_components(m, h, w));
    for (int v : m) neg += static_cast<size_t>(v == 0);
  }
  size_t region_count = 0;
  for (const auto& r : regions) region_count += r.size();

  std::vector<std::pair<double, double>> pts;
  for (double th : ths) {
    double ov = 0.0;
    size_t fp = 0;
    for (size_t im = 0; im < maps.size(); ++im) {
      for (const auto& comp : regions[im]) {
        int hit = 0;
        for (int p : comp) hit += static_cast<int>(maps[im][static_cast<size_t>(p)] >= th);
        ov += static_cast<double>(hit) / static_cast<double>(comp.size());
      }
      for (size_t p = 0; p < maps[im].size(); ++p)
        fp += static_cast<size_t>(maps[im][p] >= th && masks[im][p] == 0);
    }
    pts.emplace_back(static_cast<double>(fp) / static_cast<double>(neg),
                     ov / static_cast<double>(region_count));
  }
  // parametric curve: anchor at FPR 0 with the first point's value, then one
  // point per threshold; repeated FPRs are vertical zero-width rises
  std::vector<std::pair<double, double>> curve = {{0.0, pts.front().second}};
  curve.insert(curve.end(), pts.begin(), pts.end());
  if (curve.back().first < fpr_limit) curve.emplace_back(fpr_limit, curve.back().second);
  double area = 0.0;
  for (size_t i = 1; i < curve.size(); ++i) {
    double lo = curve[i - 1].first, hi = curve[i].first;
    if (lo >= fpr_limit) break;
    if (hi <= lo) continue;
    double v0 = curve[i - 1].second, v1 = curve[i].second;
    double clip = std::min(hi, fpr_limit);
    double v_clip = v0 + (v1 - v0) * (clip - lo) / (hi - lo);
    area += 0.5 * (v0 + v_clip) * (clip - lo);
  }
  return area / fpr_limit;
}

}  // namespace kag::oracle
