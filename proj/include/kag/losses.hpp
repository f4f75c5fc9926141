#pragma once

#include <vector>

#include "kag/tensor.hpp"

namespace kag {

struct LossWeights {
  double lambda1 = 1.0;
  double lambda2 = 1.0;
};

// -log softmax(logits)[label], stabilized by max subtraction.
inline Tensor cross_entropy(const Tensor& logits, int label) {
  if (logits.size() != 2) throw Error("cross_entropy: expected 2-class logits");
  if (label != 0 && label != 1) throw Error("cross_entropy: label must be 0 or 1");
  Tape* tape = detail::joint_tape({&logits});
  Tensor out = detail::make_output({1}, tape);
  double a = logits[0], b = logits[1];
  double m = std::max(a, b);
  double lse = m + std::log(std::exp(a - m) + std::exp(b - m));
  (*out.data)[0] = lse - logits[label];
  int lid = logits.id;
  double p0 = std::exp(a - lse), p1 = std::exp(b - lse);
  detail::finish(out, tape, [lid, p0, p1, label](Tape& t, const std::vector<double>& gy) {
    if (lid < 0) return;
    auto& g = t.acc(lid);
    g[0] += gy[0] * (p0 - (label == 0 ? 1.0 : 0.0));
    g[1] += gy[0] * (p1 - (label == 1 ? 1.0 : 0.0));
  });
  return out;
}

namespace detail {

inline Tensor mask_tensor(const std::vector<double>& mask, const Shape& shape) {
  for (double v : mask)
    if (v != 0.0 && v != 1.0) throw Error("ground-truth mask must be binary");
  return Tensor::leaf(shape, mask);
}

}  // namespace detail

// Focal loss over the two-channel concatenation [1-M, M] vs the binary mask:
// p_t is M at anomalous pixels and 1-M at normal ones, gamma_f = 2.
inline Tensor focal_loss(const Tensor& map, const std::vector<double>& mask) {
  if (static_cast<int>(mask.size()) != map.size())
    throw Error("focal_loss: mask size does not match the map");
  Tensor g = detail::mask_tensor(mask, map.shape);
  Tensor p_t = add(mul(map, g), mul(affine(map, -1.0, 1.0), affine(g, -1.0, 1.0)));
  Tensor mod = mul(affine(p_t, -1.0, 1.0), affine(p_t, -1.0, 1.0));
  Tensor nll = scale(log(clamp_min(p_t, 1e-8)), -1.0);
  return mean(mul(mod, nll));
}

// 1 - (2 sum(M*G) + eps) / (sum M + sum G + eps), eps = 1e-5.
inline Tensor dice_loss(const Tensor& map, const std::vector<double>& mask) {
  if (static_cast<int>(mask.size()) != map.size())
    throw Error("dice_loss: mask size does not match the map");
  constexpr double eps = 1e-5;
  Tensor g = Tensor::leaf(map.shape, mask);
  Tensor num = affine(sum(mul(map, g)), 2.0, eps);
  Tensor den = affine(add(sum(map), sum(g)), 1.0, eps);
  return affine(div(num, den), -1.0, 1.0);
}

// Average-pool the full-resolution mask to the feature grid and threshold at
// 0.5 (the per-layer losses act at feature resolution).
inline std::vector<double> downsample_mask(const std::vector<double>& mask, int h, int w, int grid_h,
                                           int grid_w) {
  if (h % grid_h != 0 || w % grid_w != 0)
    throw Error("downsample_mask: image extent must be an integer multiple of the grid");
  int fy = h / grid_h, fx = w / grid_w;
  std::vector<double> out(static_cast<size_t>(grid_h) * grid_w);
  for (int gy = 0; gy < grid_h; ++gy)
    for (int gx = 0; gx < grid_w; ++gx) {
      double acc = 0.0;
      for (int y = 0; y < fy; ++y)
        for (int x = 0; x < fx; ++x)
          acc += mask[static_cast<size_t>(gy * fy + y) * w + (gx * fx + x)];
      out[static_cast<size_t>(gy) * grid_w + gx] = (acc / (fy * fx) >= 0.5) ? 1.0 : 0.0;
    }
  return out;
}

// L = CE(s1 logits, c) + l1 * sum_i Focal(M_i, G) +
//     l2 * sum_i (Dice(M_i, G) + Dice(1-M_i, 1-G))
// with G already at feature resolution.
inline Tensor total_loss(const Tensor& s1_logits, int label, const std::vector<Tensor>& per_layer_maps,
                         const std::vector<double>& mask, const LossWeights& w) {
  if (w.lambda1 < 0 || w.lambda2 < 0) throw Error("total_loss: loss weights must be >= 0");
  Tensor loss = cross_entropy(s1_logits, label);
  std::vector<double> inv_mask(mask.size());
  for (size_t i = 0; i < mask.size(); ++i) inv_mask[i] = 1.0 - mask[i];
  for (const Tensor& m : per_layer_maps) {
    loss = add(loss, scale(focal_loss(m, mask), w.lambda1));
    Tensor dice = add(dice_loss(m, mask), dice_loss(affine(m, -1.0, 1.0), inv_mask));
    loss = add(loss, scale(dice, w.lambda2));
  }
  return loss;
}

}  // namespace kag
