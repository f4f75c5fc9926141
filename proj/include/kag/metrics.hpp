#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <queue>
#include <vector>

#include "kag/tensor.hpp"

namespace kag {

struct ScoredSet {
  std::vector<double> scores;
  std::vector<int> labels;  // 1 = anomalous
};

// Rank-based AUROC with midrank tie handling (equals trapezoidal ROC area).
inline double auroc(const ScoredSet& s) {
  if (s.scores.size() != s.labels.size()) throw Error("auroc: scores/labels length mismatch");
  size_t n = s.scores.size();
  size_t pos = 0;
  for (int l : s.labels) pos += static_cast<size_t>(l != 0);
  size_t neg = n - pos;
  if (pos == 0 || neg == 0) throw Error("auroc: both classes must be present");
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t a, size_t b) { return s.scores[a] < s.scores[b]; });
  std::vector<double> rank(n);
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j + 1 < n && s.scores[order[j + 1]] == s.scores[order[i]]) ++j;
    double mid = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (size_t k = i; k <= j; ++k) rank[order[k]] = mid;
    i = j + 1;
  }
  double rank_sum = 0.0;
  for (size_t k = 0; k < n; ++k)
    if (s.labels[k] != 0) rank_sum += rank[k];
  return (rank_sum - static_cast<double>(pos) * (pos + 1) / 2.0) /
         (static_cast<double>(pos) * static_cast<double>(neg));
}

// Average precision: sum of precision-at-rank over positives, descending
// scores, ties broken by stable original index.
inline double aupr(const ScoredSet& s) {
  if (s.scores.size() != s.labels.size()) throw Error("aupr: scores/labels length mismatch");
  size_t n = s.scores.size();
  size_t pos = 0;
  for (int l : s.labels) pos += static_cast<size_t>(l != 0);
  if (pos == 0) throw Error("aupr: at least one positive required");
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t a, size_t b) { return s.scores[a] > s.scores[b]; });
  double ap = 0.0;
  size_t tp = 0;
  for (size_t k = 0; k < n; ++k) {
    if (s.labels[order[k]] != 0) {
      ++tp;
      ap += static_cast<double>(tp) / static_cast<double>(k + 1);
    }
  }
  return ap / static_cast<double>(pos);
}

// 4-connected components of a binary mask, ordered by smallest linear index.
inline std::vector<std::vector<int>> connected_components(const std::vector<int>& mask, int h,
                                                          int w) {
  std::vector<char> seen(static_cast<size_t>(h) * w, 0);
  std::vector<std::vector<int>> components;
  for (int start = 0; start < h * w; ++start) {
    if (!mask[static_cast<size_t>(start)] || seen[static_cast<size_t>(start)]) continue;
    std::vector<int> comp;
    std::queue<int> frontier;
    frontier.push(start);
    seen[static_cast<size_t>(start)] = 1;
    while (!frontier.empty()) {
      int p = frontier.front();
      frontier.pop();
      comp.push_back(p);
      int y = p / w, x = p % w;
      const int ny[4] = {y - 1, y + 1, y, y};
      const int nx[4] = {x, x, x - 1, x + 1};
      for (int d = 0; d < 4; ++d) {
        if (ny[d] < 0 || ny[d] >= h || nx[d] < 0 || nx[d] >= w) continue;
        int q = ny[d] * w + nx[d];
        if (mask[static_cast<size_t>(q)] && !seen[static_cast<size_t>(q)]) {
          seen[static_cast<size_t>(q)] = 1;
          frontier.push(q);
        }
      }
    }
    std::sort(comp.begin(), comp.end());
    components.push_back(std::move(comp));
  }
  return components;
}

// Per-region-overlap: sweep every distinct score as a threshold (predict
// score >= threshold), average the per-GT-region overlap against the global
// FPR, integrate the curve up to fpr_limit and normalize by it. The first
// curve point is extended flat back to FPR 0.
inline double pro(const std::vector<std::vector<double>>& maps,
                  const std::vector<std::vector<int>>& masks, int h, int w,
                  double fpr_limit = 0.3) {
  if (maps.size() != masks.size()) throw Error("pro: maps/masks count mismatch");
  if (fpr_limit <= 0.0 || fpr_limit > 1.0) throw Error("pro: fpr_limit must lie in (0,1]");

  struct Region {
    size_t image;
    std::vector<int> pixels;
  };
  std::vector<Region> regions;
  size_t total_neg = 0;
  for (size_t im = 0; im < masks.size(); ++im) {
    for (auto& comp : connected_components(masks[im], h, w))
      regions.push_back({im, std::move(comp)});
    for (int v : masks[im]) total_neg += static_cast<size_t>(v == 0);
  }
  if (regions.empty()) throw Error("pro: no anomalous regions in the ground truth");

  std::vector<double> thresholds;
  for (const auto& m : maps) thresholds.insert(thresholds.end(), m.begin(), m.end());
  std::sort(thresholds.begin(), thresholds.end(), std::greater<double>());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());

  // descending thresholds: fpr and overlaps both grow monotonically
  std::vector<std::pair<double, double>> curve;  // (fpr, mean overlap)
  for (double th : thresholds) {
    double overlap_sum = 0.0;
    for (const auto& region : regions) {
      int hit = 0;
      for (int p : region.pixels)
        hit += static_cast<int>(maps[region.image][static_cast<size_t>(p)] >= th);
      overlap_sum += static_cast<double>(hit) / static_cast<double>(region.pixels.size());
    }
    size_t fp = 0;
    for (size_t im = 0; im < maps.size(); ++im)
      for (size_t p = 0; p < maps[im].size(); ++p)
        fp += static_cast<size_t>(maps[im][p] >= th && masks[im][p] == 0);
    double fpr = total_neg ? static_cast<double>(fp) / static_cast<double>(total_neg) : 0.0;
    curve.emplace_back(fpr, overlap_sum / static_cast<double>(regions.size()));
  }

  // trapezoid over the parametric threshold sequence; repeated FPRs are
  // vertical rises of zero width, the first point extends flat to FPR 0
  double area = 0.0;
  double prev_fpr = 0.0, prev_pro = curve.front().second;
  for (const auto& [fpr, value] : curve) {
    double lo = prev_fpr, hi = std::min(fpr, fpr_limit);
    if (hi > lo) {
      // linear segment between the two curve points, clipped at the limit
      double t0 = prev_pro;
      double t1 = prev_pro + (value - prev_pro) * (hi - prev_fpr) / (fpr - prev_fpr);
      area += 0.5 * (t0 + t1) * (hi - lo);
    }
    prev_fpr = std::max(prev_fpr, fpr);
    prev_pro = value;
    if (prev_fpr >= fpr_limit) break;
  }
  if (prev_fpr < fpr_limit) area += prev_pro * (fpr_limit - prev_fpr);
  return area / fpr_limit;
}

}  // namespace kag
