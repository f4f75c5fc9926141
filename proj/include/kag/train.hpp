#pragma once

#include <map>
#include <string>
#include <tuple>
#include <vector>

#include "kag/checkpoint.hpp"
#include "kag/config.hpp"
#include "kag/graph.hpp"
#include "kag/losses.hpp"
#include "kag/metrics.hpp"
#include "kag/scoring.hpp"
#include "kag/synth.hpp"

namespace kag {

inline int effective_iterations(const RunConfig& cfg) { return cfg.graph_enabled ? cfg.T : 0; }

inline KahgConfig graph_config(const RunConfig& cfg) {
  KahgConfig g;
  g.layers = 4;
  g.c_enc = cfg.c_enc;
  g.c = cfg.c_hidden;
  g.h = cfg.grid;
  g.w = cfg.grid;
  g.c_cls = cfg.c_cls;
  g.multi_kernel = cfg.kernel_enabled;
  return g;
}

// Frozen pieces shared by training and evaluation, all derived from the
// config seed.
struct Pipeline {
  RunConfig cfg;
  ToyEncoder encoder;
  TextFeatures text;
  Dataset data;
  std::vector<EncodedSample> train_enc, support_enc, test_enc;
};

inline Pipeline build_pipeline(const RunConfig& cfg) {
  validate(cfg);
  Pipeline p;
  p.cfg = cfg;
  p.encoder = ToyEncoder::init(cfg.seed, cfg.c_enc, cfg.c_cls, cfg.image_size, cfg.grid);
  p.text = text_stub(cfg.seed, cfg.c_hidden);
  StyleParams style;
  style.image_size = cfg.image_size;
  p.data = make_splits(cfg.n_train, cfg.n_test, cfg.shots, cfg.seed, style);
  auto encode_all = [&p](const std::vector<SyntheticSample>& in, std::vector<EncodedSample>& out) {
    out.reserve(in.size());
    for (const auto& s : in) out.push_back(toy_encode(s.image, p.encoder));
  };
  encode_all(p.data.train, p.train_enc);
  encode_all(p.data.support, p.support_enc);
  encode_all(p.data.test, p.test_enc);
  return p;
}

// Eq.-17-style objective for one sample; builds the full differentiable path
// from the encoder features through the graph and text alignment.
inline Tensor sample_loss(const KahgParams& bound, const EncodedSample& enc,
                          const SyntheticSample& sample, const TextFeatures& text,
                          const RunConfig& cfg) {
  std::vector<Tensor> outputs = run_kahg(enc.layers, bound, effective_iterations(cfg));
  TextMaps maps = text_alignment_map(outputs, text, cfg.image_size, cfg.image_size, cfg.grid, cfg.grid);
  Tensor logits = global_score_logits(enc.cls, bound.adapter_w, bound.adapter_b, text);
  std::vector<double> grid_mask =
      downsample_mask(sample.mask, cfg.image_size, cfg.image_size, cfg.grid, cfg.grid);
  return total_loss(logits, sample.label, maps.per_layer, grid_mask, {cfg.lambda1, cfg.lambda2});
}

// Adam with bias correction; update order follows the fixed parameter
// enumeration so training is deterministic.
struct Adam {
  double lr = 1e-3;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  int64_t t = 0;
  std::map<std::string, std::vector<double>> m, v;

  void step(KahgParams& params, const std::map<std::string, std::vector<double>>& grads) {
    ++t;
    double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    params.for_each([&](const std::string& name, Tensor& p) {
      const auto& g = grads.at(name);
      auto& mi = m[name];
      auto& vi = v[name];
      if (mi.empty()) mi.assign(g.size(), 0.0);
      if (vi.empty()) vi.assign(g.size(), 0.0);
      auto& pv = *p.data;
      for (size_t i = 0; i < g.size(); ++i) {
        mi[i] = beta1 * mi[i] + (1.0 - beta1) * g[i];
        vi[i] = beta2 * vi[i] + (1.0 - beta2) * g[i] * g[i];
        pv[i] -= lr * (mi[i] / bc1) / (std::sqrt(vi[i] / bc2) + eps);
      }
    });
  }
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<double> epoch_losses;
};

inline Checkpoint make_checkpoint(KahgParams& params, const Adam& opt, const RunConfig& cfg,
                                  int epoch) {
  Checkpoint ckpt;
  ckpt.config = cfg;
  ckpt.epoch = epoch;
  ckpt.adam_step = opt.t;
  params.for_each([&](const std::string& name, Tensor& p) {
    ckpt.records.emplace_back(name, Tensor::leaf(p.shape, *p.data));
  });
  params.for_each([&](const std::string& name, Tensor& p) {
    auto mi = opt.m.find(name);
    auto vi = opt.v.find(name);
    std::vector<double> zero(static_cast<size_t>(p.size()), 0.0);
    ckpt.records.emplace_back("opt.m." + name,
                              Tensor::leaf(p.shape, mi != opt.m.end() ? mi->second : zero));
    ckpt.records.emplace_back("opt.v." + name,
                              Tensor::leaf(p.shape, vi != opt.v.end() ? vi->second : zero));
  });
  return ckpt;
}

inline KahgParams params_from_checkpoint(const Checkpoint& ckpt) {
  KahgParams params = KahgParams::init(graph_config(ckpt.config), ckpt.config.seed);
  params.for_each([&](const std::string& name, Tensor& p) {
    const Tensor& rec = ckpt.find(name);
    if (rec.shape != p.shape)
      throw CheckpointError("record '" + name + "' has shape " + shape_str(rec.shape) +
                            ", expected " + shape_str(p.shape));
    p = rec;
  });
  return params;
}

inline Adam optimizer_from_checkpoint(const Checkpoint& ckpt, KahgParams& params) {
  Adam opt;
  opt.lr = ckpt.config.lr;
  opt.t = ckpt.adam_step;
  params.for_each([&](const std::string& name, Tensor&) {
    opt.m[name] = *ckpt.find("opt.m." + name).data;
    opt.v[name] = *ckpt.find("opt.v." + name).data;
  });
  return opt;
}

// Minibatch Adam on the total loss; frozen encoder and text features. The
// shuffle is seeded per epoch, so (config, seed) fixes the whole run.
inline TrainResult train(const RunConfig& cfg, const Pipeline* prebuilt = nullptr) {
  Pipeline local;
  const Pipeline& pipe = prebuilt ? *prebuilt : (local = build_pipeline(cfg), local);
  KahgParams params = KahgParams::init(graph_config(cfg), cfg.seed);
  Adam opt;
  opt.lr = cfg.lr;
  TrainResult result;

  int n = static_cast<int>(pipe.data.train.size());
  std::vector<int> order(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    SplitMix64 shuffle_rng(mix_seed(cfg.seed, 0x73687566ull, static_cast<uint64_t>(epoch)));
    for (int i = n - 1; i > 0; --i)
      std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(shuffle_rng.uniform_int(0, i))]);

    double epoch_loss = 0.0;
    for (int start = 0; start < n; start += cfg.batch_size) {
      int end = std::min(start + cfg.batch_size, n);
      std::map<std::string, std::vector<double>> grads;
      params.for_each([&](const std::string& name, Tensor& p) {
        grads[name].assign(static_cast<size_t>(p.size()), 0.0);
      });
      for (int bi = start; bi < end; ++bi) {
        int idx = order[static_cast<size_t>(bi)];
        Tape tape;
        KahgParams bound = params.bound(tape);
        Tensor loss = sample_loss(bound, pipe.train_enc[static_cast<size_t>(idx)],
                                  pipe.data.train[static_cast<size_t>(idx)], pipe.text, cfg);
        double lv = loss[0];
        if (!std::isfinite(lv))
          throw Error("NaN loss in epoch " + std::to_string(epoch) + ", batch at index " +
                      std::to_string(start) + " (sample seed " +
                      std::to_string(pipe.data.train[static_cast<size_t>(idx)].seed) + ")");
        epoch_loss += lv;
        tape.backward(loss);
        bound.for_each([&](const std::string& name, Tensor& p) {
          Tensor g = tape.grad(p);
          auto& acc = grads.at(name);
          for (size_t i = 0; i < acc.size(); ++i) acc[i] += (*g.data)[i];
        });
      }
      double inv = 1.0 / static_cast<double>(end - start);
      for (auto& [name, g] : grads)
        for (double& x : g) x *= inv;
      opt.step(params, grads);
    }
    result.epoch_losses.push_back(epoch_loss / n);
  }
  result.checkpoint = make_checkpoint(params, opt, cfg, cfg.epochs);
  return result;
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

struct EvalOutput {
  double image_auroc = 0.0, image_aupr = 0.0;
  double pixel_auroc = 0.0, pixel_pro = 0.0;
  std::vector<std::tuple<std::string, std::string, double>> rows;
  std::vector<AnomalyResult> results;  // per test sample, in dataset order
};

// Scores one query against trained parameters and a memory bank.
inline AnomalyResult score_sample(const EncodedSample& enc, const KahgParams& params,
                                  const MemoryBank& bank, const TextFeatures& text,
                                  const RunConfig& cfg) {
  std::vector<Tensor> outputs = run_kahg(enc.layers, params, effective_iterations(cfg));
  TextMaps maps = text_alignment_map(outputs, text, cfg.image_size, cfg.image_size, cfg.grid, cfg.grid);
  Tensor m_v = memory_map(outputs, bank, cfg.image_size, cfg.image_size, cfg.grid, cfg.grid);
  Tensor m = fuse_maps(maps.m_p, m_v, cfg.gamma);
  Tensor logits = global_score_logits(enc.cls, params.adapter_w, params.adapter_b, text);
  AnomalyResult r;
  r.m_p = *maps.m_p.data;
  r.m_v = *m_v.data;
  r.m = *m.data;
  for (const Tensor& pl : maps.per_layer) r.per_layer.push_back(*pl.data);
  r.s1_logits[0] = logits[0];
  r.s1_logits[1] = logits[1];
  r.s_1 = abnormal_probability(logits);
  std::tie(r.s_2, r.s) = image_score(r.s_1, r.m, cfg.gamma, cfg.top_k);
  return r;
}

// k-shot memory bank from the support split, then metrics over the test set.
inline EvalOutput evaluate(const KahgParams& params, const RunConfig& cfg,
                           const std::string& run_name, const Pipeline* prebuilt = nullptr,
                           bool keep_results = false) {
  Pipeline local;
  const Pipeline& pipe = prebuilt ? *prebuilt : (local = build_pipeline(cfg), local);
  if (cfg.shots > static_cast<int>(pipe.data.support.size()))
    throw Error("evaluate: config requests more shots than the support split holds");

  std::vector<std::vector<Tensor>> support_outputs;
  for (int s = 0; s < cfg.shots; ++s)
    support_outputs.push_back(
        run_kahg(pipe.support_enc[static_cast<size_t>(s)].layers, params, effective_iterations(cfg)));
  MemoryBank bank = build_memory_bank(support_outputs);

  ScoredSet image_set, pixel_set;
  std::vector<std::vector<double>> pixel_maps;
  std::vector<std::vector<int>> pixel_masks;
  EvalOutput out;
  for (size_t i = 0; i < pipe.data.test.size(); ++i) {
    AnomalyResult r = score_sample(pipe.test_enc[i], params, bank, pipe.text, cfg);
    image_set.scores.push_back(r.s);
    image_set.labels.push_back(pipe.data.test[i].label);
    const auto& mask = pipe.data.test[i].mask;
    std::vector<int> imask(mask.size());
    for (size_t p = 0; p < mask.size(); ++p) {
      pixel_set.scores.push_back(r.m[p]);
      pixel_set.labels.push_back(mask[p] != 0.0 ? 1 : 0);
      imask[p] = mask[p] != 0.0 ? 1 : 0;
    }
    pixel_maps.push_back(r.m);
    pixel_masks.push_back(std::move(imask));
    if (keep_results) out.results.push_back(std::move(r));
  }

  out.image_auroc = auroc(image_set);
  out.image_aupr = aupr(image_set);
  out.pixel_auroc = auroc(pixel_set);
  out.pixel_pro = pro(pixel_maps, pixel_masks, cfg.image_size, cfg.image_size);
  out.rows = {{run_name, "image_auroc", out.image_auroc},
              {run_name, "image_aupr", out.image_aupr},
              {run_name, "pixel_auroc", out.pixel_auroc},
              {run_name, "pixel_pro", out.pixel_pro}};
  return out;
}

// ---------------------------------------------------------------------------
// parameter sweeps
// ---------------------------------------------------------------------------

// Scoring-only parameters reuse a single trained model; the rest retrain.
inline std::vector<std::tuple<std::string, std::string, double>> sweep(
    const std::string& param, const std::vector<std::string>& values, const RunConfig& base) {
  if (values.empty()) throw Error("sweep: no values given");
  const bool scoring_only = (param == "top_k" || param == "gamma");
  const bool known = scoring_only || param == "T" || param == "lr" || param == "epochs" ||
                     param == "lambda1" || param == "lambda2";
  if (!known) throw Error("sweep: unknown parameter '" + param + "'");

  std::vector<std::tuple<std::string, std::string, double>> rows;
  if (scoring_only) {
    Pipeline pipe = build_pipeline(base);
    TrainResult trained = train(base, &pipe);
    KahgParams params = params_from_checkpoint(trained.checkpoint);
    for (const std::string& v : values) {
      RunConfig cfg = base;
      apply_override(cfg, param, v);
      validate(cfg);
      EvalOutput ev = evaluate(params, cfg, param + "=" + v, &pipe);
      rows.insert(rows.end(), ev.rows.begin(), ev.rows.end());
    }
    return rows;
  }
  for (const std::string& v : values) {
    RunConfig cfg = base;
    apply_override(cfg, param, v);
    validate(cfg);
    Pipeline pipe = build_pipeline(cfg);
    TrainResult trained = train(cfg, &pipe);
    KahgParams params = params_from_checkpoint(trained.checkpoint);
    EvalOutput ev = evaluate(params, cfg, param + "=" + v, &pipe);
    rows.insert(rows.end(), ev.rows.begin(), ev.rows.end());
  }
  return rows;
}

}  // namespace kag
