#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "kag/rng.hpp"
#include "kag/scoring.hpp"
#include "kag/tensor.hpp"

namespace kag {

// One toy image with its ground truth. Images are 1-channel, values in [0,1].
struct SyntheticSample {
  std::vector<double> image;  // [size*size]
  std::vector<double> mask;   // binary, same extent
  int label = 0;              // 1 = anomalous
  uint64_t seed = 0;
  int size = 64;
};

struct StyleParams {
  int image_size = 64;
  int waves = 6;
  double noise_amp = 0.01;
  uint64_t style_seed = 7;     // family-level texture structure, shared by all samples
  double phase_jitter = 0.2;   // per-sample phase wobble (radians)
};

// Smooth seeded texture: a few low-frequency sinusoids plus light noise.
// The wave family (frequencies, base phases, amplitudes) is drawn from the
// style seed and shared by every sample of a dataset; the per-sample seed
// only jitters the phases and adds noise. Normals therefore form a tight
// appearance family — the regime few-shot anomaly detection assumes — while
// a rectangle pasted from a different location still breaks the position-
// locked structure.
inline SyntheticSample gen_normal(uint64_t seed, const StyleParams& style = {}) {
  SplitMix64 family(mix_seed(style.style_seed, 0x7374796cull));
  SplitMix64 rng(seed);
  int n = style.image_size;
  SyntheticSample s;
  s.size = n;
  s.seed = seed;
  s.image.assign(static_cast<size_t>(n) * n, 0.5);
  s.mask.assign(static_cast<size_t>(n) * n, 0.0);
  constexpr double two_pi = 6.283185307179586;
  for (int wv = 0; wv < style.waves; ++wv) {
    // wavelengths of a few pixels so local patches carry real structure and a
    // blend of two field locations falls visibly off the normal manifold
    double fx = family.uniform(3.0, 14.0), fy = family.uniform(3.0, 14.0);
    if (family.uniform(0.0, 1.0) < 0.5) fy = -fy;
    double phase = family.uniform(0.0, two_pi) + rng.gaussian(0.0, style.phase_jitter);
    double amp = family.uniform(0.06, 0.14);
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x)
        s.image[static_cast<size_t>(y) * n + x] +=
            amp * std::sin(two_pi * (fx * x + fy * y) / n + phase);
  }
  for (double& v : s.image) {
    v += rng.gaussian(0.0, style.noise_amp);
    v = std::clamp(v, 0.0, 1.0);
  }
  return s;
}

// NSA-inspired paste: blend a seeded random rectangle cut from the donor into
// the normal image; the pasted region is the ground-truth mask.
inline SyntheticSample synth_anomaly(const SyntheticSample& normal, const SyntheticSample& donor,
                                     uint64_t seed) {
  SplitMix64 rng(seed);
  int n = normal.size;
  SyntheticSample s = normal;
  s.seed = seed;
  s.label = 1;
  int lo = std::min(4, n), hi = std::min(20, n);  // side bounds, clamped for small images
  for (int attempt = 0; attempt < 64; ++attempt) {
    int rw = rng.uniform_int(lo, hi), rh = rng.uniform_int(lo, hi);
    int dst_x = rng.uniform_int(0, n - rw), dst_y = rng.uniform_int(0, n - rh);
    int src_x = rng.uniform_int(0, n - rw), src_y = rng.uniform_int(0, n - rh);
    double blend = rng.uniform(0.5, 1.0);
    s.image = normal.image;
    s.mask.assign(static_cast<size_t>(n) * n, 0.0);
    double delta = 0.0;
    for (int y = 0; y < rh; ++y)
      for (int x = 0; x < rw; ++x) {
        size_t d = static_cast<size_t>(dst_y + y) * n + (dst_x + x);
        size_t src = static_cast<size_t>(src_y + y) * n + (src_x + x);
        double v = (1.0 - blend) * normal.image[d] + blend * donor.image[src];
        delta += std::abs(v - normal.image[d]);
        s.image[d] = v;
        s.mask[d] = 1.0;
      }
    // guarantee the defect is detectable in principle; a zero-difference
    // paste (donor patch identical to the target region) is re-drawn
    if (delta > 1e-6 * rw * rh) return s;
  }
  return s;
}

// Frozen seeded conv stack standing in for a pretrained multi-layer backbone.
// Four tapped stages at [C_enc, grid, grid] plus a cls projection.
struct ToyEncoder {
  int c_enc = 16;
  int c_cls = 32;
  int image_size = 64;
  int grid = 16;
  std::vector<double> stem;                 // [C_enc, 1, 5, 5], stride image_size/grid
  std::vector<std::vector<double>> stages;  // 3 x [C_enc, C_enc, 3, 3], stride 1
  std::vector<double> cls_w;                // [C_cls, C_enc]
  std::vector<double> cls_b;                // [C_cls]

  static ToyEncoder init(uint64_t seed, int c_enc = 16, int c_cls = 32, int image_size = 64,
                         int grid = 16) {
    SplitMix64 rng(mix_seed(seed, 0x656e63ull));
    ToyEncoder e;
    e.c_enc = c_enc;
    e.c_cls = c_cls;
    e.image_size = image_size;
    e.grid = grid;
    auto fill = [&rng](std::vector<double>& v, size_t n, double stddev) {
      v.resize(n);
      for (double& x : v) x = rng.gaussian(0.0, stddev);
    };
    fill(e.stem, static_cast<size_t>(c_enc) * 25, 1.0 / 5.0);
    e.stages.resize(3);
    for (auto& st : e.stages)
      fill(st, static_cast<size_t>(c_enc) * c_enc * 9, 1.0 / (3.0 * std::sqrt(c_enc)));
    fill(e.cls_w, static_cast<size_t>(c_cls) * c_enc, 1.0 / std::sqrt(c_enc));
    fill(e.cls_b, static_cast<size_t>(c_cls), 0.1);
    return e;
  }
};

struct EncodedSample {
  std::vector<Tensor> layers;  // 4 x [C_enc, grid, grid], detached
  std::vector<double> cls;     // [C_cls]
};

// Deterministic frozen forward: strided stem tap, then three 3x3 stages, each
// tanh-squashed and tapped. cls is a projection of the deepest layer's GAP.
inline EncodedSample toy_encode(const std::vector<double>& image, const ToyEncoder& enc) {
  int n = enc.image_size, g = enc.grid, c = enc.c_enc;
  if (static_cast<int>(image.size()) != n * n)
    throw Error("toy_encode: expected a " + std::to_string(n) + "x" + std::to_string(n) + " image");
  int stride = n / g;
  std::vector<double> feat(static_cast<size_t>(c) * g * g, 0.0);
  for (int co = 0; co < c; ++co)
    for (int gy = 0; gy < g; ++gy)
      for (int gx = 0; gx < g; ++gx) {
        double acc = 0.0;
        for (int ky = 0; ky < 5; ++ky)
          for (int kx = 0; kx < 5; ++kx) {
            int sy = gy * stride + ky - 2, sx = gx * stride + kx - 2;
            if (sy < 0 || sy >= n || sx < 0 || sx >= n) continue;
            acc += enc.stem[(static_cast<size_t>(co) * 5 + ky) * 5 + kx] *
                   image[static_cast<size_t>(sy) * n + sx];
          }
        feat[(static_cast<size_t>(co) * g + gy) * g + gx] = std::tanh(acc);
      }

  EncodedSample out;
  out.layers.push_back(Tensor::leaf({c, g, g}, feat));
  for (const auto& stage : enc.stages) {
    std::vector<double> next(static_cast<size_t>(c) * g * g, 0.0);
    for (int co = 0; co < c; ++co)
      for (int ci = 0; ci < c; ++ci)
        for (int ky = 0; ky < 3; ++ky)
          for (int kx = 0; kx < 3; ++kx) {
            double wv = stage[((static_cast<size_t>(co) * c + ci) * 3 + ky) * 3 + kx];
            int dy = ky - 1, dx = kx - 1;
            int y0 = std::max(0, -dy), y1 = std::min(g, g - dy);
            int x0 = std::max(0, -dx), x1 = std::min(g, g - dx);
            for (int y = y0; y < y1; ++y)
              for (int x = x0; x < x1; ++x)
                next[(static_cast<size_t>(co) * g + y) * g + x] +=
                    wv * feat[(static_cast<size_t>(ci) * g + (y + dy)) * g + (x + dx)];
          }
    for (double& v : next) v = std::tanh(v);
    feat = std::move(next);
    out.layers.push_back(Tensor::leaf({c, g, g}, feat));
  }

  std::vector<double> pooled(static_cast<size_t>(c), 0.0);
  for (int ch = 0; ch < c; ++ch) {
    double acc = 0.0;
    for (int i = 0; i < g * g; ++i) acc += feat[static_cast<size_t>(ch) * g * g + i];
    pooled[static_cast<size_t>(ch)] = acc / (g * g);
  }
  out.cls.assign(static_cast<size_t>(enc.c_cls), 0.0);
  for (int o = 0; o < enc.c_cls; ++o) {
    double acc = enc.cls_b[static_cast<size_t>(o)];
    for (int ch = 0; ch < c; ++ch)
      acc += enc.cls_w[static_cast<size_t>(o) * c + ch] * pooled[static_cast<size_t>(ch)];
    out.cls[static_cast<size_t>(o)] = acc;
  }
  return out;
}

// Two seeded unit vectors with |cos| <= 0.5 (resampled until satisfied),
// standing in for encoded prompt-template text features.
inline TextFeatures text_stub(uint64_t seed, int dim) {
  SplitMix64 rng(mix_seed(seed, 0x747874ull));
  auto unit = [&rng, dim]() {
    std::vector<double> v(static_cast<size_t>(dim));
    double ss = 0.0;
    for (double& x : v) {
      x = rng.gaussian();
      ss += x * x;
    }
    double nrm = std::sqrt(ss);
    for (double& x : v) x /= nrm;
    return v;
  };
  TextFeatures text;
  text.logit_scale = 10.0;
  text.f_n = unit();
  for (int attempt = 0; attempt < 1000; ++attempt) {
    text.f_a = unit();
    double cosv = 0.0;
    for (int i = 0; i < dim; ++i) cosv += text.f_n[static_cast<size_t>(i)] * text.f_a[static_cast<size_t>(i)];
    if (std::abs(cosv) <= 0.5) return text;
  }
  throw Error("text_stub: failed to draw text features with |cos| <= 0.5");
}

// Train / support / test splits with disjoint seed substreams.
struct Dataset {
  std::vector<SyntheticSample> train;    // normals followed by their paired anomalies
  std::vector<SyntheticSample> support;  // k held-out normals
  std::vector<SyntheticSample> test;     // fresh normals and anomalies
};

inline Dataset make_splits(int n_train, int n_test, int shots, uint64_t seed,
                           const StyleParams& style = {}) {
  if (shots < 1 || shots > n_train) throw Error("make_splits: shots must lie in [1, n_train]");
  Dataset ds;
  enum : uint64_t { kTrain = 1, kTrainAnom = 2, kSupport = 3, kTest = 4, kTestAnom = 5, kDonor = 6 };
  std::vector<SyntheticSample> normals;
  for (int i = 0; i < n_train; ++i)
    normals.push_back(gen_normal(mix_seed(seed, kTrain, static_cast<uint64_t>(i)), style));
  for (int i = 0; i < n_train; ++i) {
    const SyntheticSample& donor =
        n_train > 1 ? normals[static_cast<size_t>((i + 1) % n_train)]
                    : gen_normal(mix_seed(seed, kDonor, static_cast<uint64_t>(i)), style);
    ds.train.push_back(normals[static_cast<size_t>(i)]);
    ds.train.push_back(
        synth_anomaly(normals[static_cast<size_t>(i)], donor, mix_seed(seed, kTrainAnom, static_cast<uint64_t>(i))));
  }
  for (int i = 0; i < shots; ++i)
    ds.support.push_back(gen_normal(mix_seed(seed, kSupport, static_cast<uint64_t>(i)), style));
  for (int i = 0; i < n_test; ++i)
    ds.test.push_back(gen_normal(mix_seed(seed, kTest, static_cast<uint64_t>(i)), style));
  for (int i = 0; i < n_test; ++i) {
    SyntheticSample base = gen_normal(mix_seed(seed, kTestAnom, static_cast<uint64_t>(i) * 2), style);
    SyntheticSample donor = gen_normal(mix_seed(seed, kTestAnom, static_cast<uint64_t>(i) * 2 + 1), style);
    ds.test.push_back(synth_anomaly(base, donor, mix_seed(seed, kTestAnom, 0x10000ull + static_cast<uint64_t>(i))));
  }
  return ds;
}

}  // namespace kag
