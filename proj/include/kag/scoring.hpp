#pragma once

#include <algorithm>
#include <vector>

#include "kag/tensor.hpp"

namespace kag {

// Frozen normal/abnormal text features (unit vectors in the shared space).
struct TextFeatures {
  std::vector<double> f_n;
  std::vector<double> f_a;
  double logit_scale = 10.0;

  int dim() const { return static_cast<int>(f_n.size()); }

  // [C, 2] matrix with columns (F_n, F_a), as a detached constant tensor
  Tensor stacked() const {
    int c = dim();
    std::vector<double> v(static_cast<size_t>(c) * 2);
    for (int i = 0; i < c; ++i) {
      v[static_cast<size_t>(i) * 2] = f_n[static_cast<size_t>(i)];
      v[static_cast<size_t>(i) * 2 + 1] = f_a[static_cast<size_t>(i)];
    }
    return Tensor::leaf({c, 2}, std::move(v));
  }
};

// L2-normalized support-patch features, one flat [count, C] store per layer.
struct MemoryBank {
  int c = 0;
  std::vector<std::vector<double>> layers;  // row-major [count, C]

  int layer_count() const { return static_cast<int>(layers.size()); }
  int patches_in_layer(int i) const {
    return static_cast<int>(layers[static_cast<size_t>(i)].size()) / c;
  }
};

struct TextMaps {
  Tensor m_p;                    // [H, W]
  std::vector<Tensor> per_layer;  // [H', W'] each, values in [0,1]
};

// Per-patch 2-class alignment with (F_n, F_a); abnormal channel per layer,
// layer-mean upsampled to [H, W].
inline TextMaps text_alignment_map(const std::vector<Tensor>& outputs, const TextFeatures& text,
                                   int out_h, int out_w, int grid_h, int grid_w) {
  if (outputs.empty()) throw Error("text_alignment_map: no layers");
  Tensor ft = text.stacked();
  TextMaps maps;
  Tensor acc;
  for (size_t i = 0; i < outputs.size(); ++i) {
    const Tensor& o = outputs[i];
    if (o.rank() != 2 || o.shape[1] != text.dim())
      throw Error("text_alignment_map: features must be [P, C] with C matching the text space");
    Tensor logits = scale(matmul(l2_normalize(o, /*axis=*/1), ft), text.logit_scale);
    Tensor abnormal = column(softmax(logits, /*axis=*/1), 1);
    Tensor layer_map = reshape(abnormal, {grid_h, grid_w});
    maps.per_layer.push_back(layer_map);
    acc = (i == 0) ? layer_map : add(acc, layer_map);
  }
  Tensor mean_map = scale(acc, 1.0 / static_cast<double>(outputs.size()));
  maps.m_p = reshape(bilinear_upsample(reshape(mean_map, {1, grid_h, grid_w}), out_h, out_w),
                     {out_h, out_w});
  return maps;
}

// Stores the L2-normalized patches of every support shot, per layer.
inline MemoryBank build_memory_bank(const std::vector<std::vector<Tensor>>& support_outputs) {
  if (support_outputs.empty()) throw Error("build_memory_bank: empty support set");
  MemoryBank bank;
  bank.c = support_outputs[0][0].shape[1];
  bank.layers.resize(support_outputs[0].size());
  for (const auto& shot : support_outputs) {
    if (shot.size() != bank.layers.size())
      throw Error("build_memory_bank: inconsistent layer counts across shots");
    for (size_t i = 0; i < shot.size(); ++i) {
      Tensor normed = l2_normalize(shot[i], /*axis=*/1);
      auto& store = bank.layers[i];
      store.insert(store.end(), normed.data->begin(), normed.data->end());
    }
  }
  return bank;
}

// M_v per Eq. 13 reading: per layer and patch, (1 - max cosine to the bank)/2,
// layer-mean, bilinear to [H, W]. Not differentiable by contract (no loss).
inline Tensor memory_map(const std::vector<Tensor>& outputs, const MemoryBank& bank, int out_h,
                         int out_w, int grid_h, int grid_w) {
  if (static_cast<int>(outputs.size()) != bank.layer_count())
    throw Error("memory_map: bank layer count does not match query layers");
  int p = grid_h * grid_w;
  std::vector<double> mean_d(static_cast<size_t>(p), 0.0);
  for (size_t i = 0; i < outputs.size(); ++i) {
    int count = bank.patches_in_layer(static_cast<int>(i));
    if (count == 0) throw Error("memory_map: empty bank layer " + std::to_string(i));
    Tensor q = l2_normalize(outputs[i], /*axis=*/1);
    detail::CMatMap Q(q.data->data(), p, bank.c);
    detail::CMatMap R(bank.layers[i].data(), count, bank.c);
    detail::RowMat sims = Q * R.transpose();  // [P, count]
    for (int pi = 0; pi < p; ++pi) {
      double best = sims.row(pi).maxCoeff();
      mean_d[static_cast<size_t>(pi)] += (1.0 - best) / 2.0;
    }
  }
  for (double& v : mean_d) v /= static_cast<double>(outputs.size());
  Tensor d = Tensor::leaf({1, grid_h, grid_w}, std::move(mean_d));
  return reshape(bilinear_upsample(d, out_h, out_w), {out_h, out_w});
}

// M = gamma * M_p + (1 - gamma) * M_v
inline Tensor fuse_maps(const Tensor& m_p, const Tensor& m_v, double gamma) {
  if (gamma < 0.0 || gamma > 1.0) throw Error("fuse_maps: gamma must lie in [0,1]");
  if (m_p.shape != m_v.shape) throw Error("fuse_maps: map shapes differ");
  return add(scale(m_p, gamma), scale(m_v, 1.0 - gamma));
}

// Adapter + text alignment for the cls token; returns the 2-class logits.
// s_1 is the abnormal-channel softmax of these.
inline Tensor global_score_logits(const std::vector<double>& f_cls, const Tensor& adapter_w,
                                  const Tensor& adapter_b, const TextFeatures& text) {
  Tensor cls = Tensor::leaf({static_cast<int>(f_cls.size()), 1}, f_cls);
  Tensor adapted = add(reshape(matmul(adapter_w, cls), {adapter_w.shape[0]}), adapter_b);
  Tensor logits = scale(
      reshape(matmul(reshape(l2_normalize(adapted, 0), {1, adapter_w.shape[0]}), text.stacked()), {2}),
      text.logit_scale);
  return logits;
}

inline double abnormal_probability(const Tensor& logits) {
  double a = logits[0], b = logits[1];
  double m = std::max(a, b);
  double ea = std::exp(a - m), eb = std::exp(b - m);
  return eb / (ea + eb);
}

// s_2 = mean of the k largest map values (k clamped to the pixel count);
// s = gamma * s_1 + (1 - gamma) * s_2.
inline std::pair<double, double> image_score(double s_1, const std::vector<double>& map,
                                             double gamma, int k) {
  if (k <= 0) throw Error("image_score: k must be >= 1");
  if (gamma < 0.0 || gamma > 1.0) throw Error("image_score: gamma must lie in [0,1]");
  int n = static_cast<int>(map.size());
  int kk = std::min(k, n);
  std::vector<double> v = map;
  std::nth_element(v.begin(), v.begin() + (kk - 1), v.end(), std::greater<double>());
  double s_2 = 0.0;
  for (int i = 0; i < kk; ++i) s_2 += v[static_cast<size_t>(i)];
  s_2 /= kk;
  return {s_2, gamma * s_1 + (1.0 - gamma) * s_2};
}

// Everything the scorer produces for one query image.
struct AnomalyResult {
  std::vector<double> m_p, m_v, m;              // [H*W], values in [0,1]
  std::vector<std::vector<double>> per_layer;   // [H'*W'] each
  double s1_logits[2] = {0.0, 0.0};
  double s_1 = 0.0, s_2 = 0.0, s = 0.0;
};

}  // namespace kag
