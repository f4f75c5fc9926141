#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "kag/io.hpp"
#include "kag/train.hpp"

using namespace kag;

namespace {

RunConfig small_config() {
  RunConfig cfg;
  cfg.seed = 1;
  cfg.epochs = 2;
  cfg.batch_size = 4;
  cfg.T = 2;
  cfg.top_k = 4;
  cfg.n_train = 6;
  cfg.n_test = 5;
  cfg.c_hidden = 8;
  cfg.c_enc = 8;
  cfg.grid = 4;
  cfg.image_size = 16;
  cfg.c_cls = 8;
  return cfg;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

std::vector<char> read_bytes(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

void write_bytes(const std::string& path, const std::vector<char>& bytes) {
  std::ofstream os(path, std::ios::binary);
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST_CASE("config parsing") {
  SECTION("empty file gives the reference defaults") {
    RunConfig cfg = parse_config_text("");
    CHECK(cfg.epochs == 50);
    CHECK(cfg.lr == 1e-3);
    CHECK(cfg.T == 5);
    CHECK(cfg.gamma == 0.1);
    CHECK(cfg.top_k == 30);
    CHECK(cfg.lambda1 == 1.0);
    CHECK(cfg.lambda2 == 1.0);
    CHECK(cfg.batch_size == 8);
    CHECK(cfg.shots == 1);
    CHECK(cfg.graph_enabled);
    CHECK(cfg.kernel_enabled);
  }
  SECTION("key = value lines with comments and blanks") {
    RunConfig cfg = parse_config_text("# a comment\n\nT = 3\n  gamma = 0.4  # inline\nepochs=7\n");
    CHECK(cfg.T == 3);
    CHECK(cfg.gamma == 0.4);
    CHECK(cfg.epochs == 7);
  }
  SECTION("constraint violations name the key") {
    CHECK_THROWS_WITH(parse_config_text("gamma = 1.5"), Catch::Matchers::ContainsSubstring("gamma"));
    CHECK_THROWS_AS(parse_config_text("gamma = 1.5"), ConfigError);
    CHECK_THROWS_AS(parse_config_text("shots = 3"), ConfigError);
    CHECK_THROWS_AS(parse_config_text("lr = 0"), ConfigError);
    CHECK_THROWS_AS(parse_config_text("image_size = 65"), ConfigError);
  }
  SECTION("unknown keys and bad values are rejected by name") {
    CHECK_THROWS_WITH(parse_config_text("warmup = 5"), Catch::Matchers::ContainsSubstring("warmup"));
    CHECK_THROWS_WITH(parse_config_text("T = five"), Catch::Matchers::ContainsSubstring("T"));
    CHECK_THROWS_AS(parse_config_text("no_equals_sign"), ConfigError);
  }
  SECTION("overrides win over file values") {
    RunConfig cfg = parse_config_text("T = 5");
    apply_override(cfg, "T", "3");
    validate(cfg);
    CHECK(cfg.T == 3);
  }
  SECTION("json snapshot roundtrip") {
    RunConfig cfg = small_config();
    cfg.gamma = 0.37;
    cfg.graph_enabled = false;
    RunConfig back = config_from_json(config_to_json(cfg));
    CHECK(back.gamma == cfg.gamma);
    CHECK(back.seed == cfg.seed);
    CHECK(back.graph_enabled == cfg.graph_enabled);
    CHECK(config_to_json(back) == config_to_json(cfg));
  }
}

TEST_CASE("checkpoint save/load") {
  RunConfig cfg = small_config();
  KahgParams params = KahgParams::init(graph_config(cfg), cfg.seed);
  Adam opt;
  opt.t = 3;
  params.for_each([&](const std::string& name, Tensor& p) {
    opt.m[name].assign(static_cast<size_t>(p.size()), 0.25);
    opt.v[name].assign(static_cast<size_t>(p.size()), 0.5);
  });
  Checkpoint ckpt = make_checkpoint(params, opt, cfg, 2);
  std::string path = temp_path("kag_test_ckpt.kagp");
  save_checkpoint(ckpt, path);

  SECTION("roundtrip is bit-identical") {
    Checkpoint back = load_checkpoint(path);
    REQUIRE(back.records.size() == ckpt.records.size());
    for (size_t i = 0; i < ckpt.records.size(); ++i) {
      CHECK(back.records[i].first == ckpt.records[i].first);
      CHECK(back.records[i].second.shape == ckpt.records[i].second.shape);
      CHECK(*back.records[i].second.data == *ckpt.records[i].second.data);
    }
    CHECK(back.epoch == 2);
    CHECK(back.adam_step == 3);
    CHECK(config_to_json(back.config) == config_to_json(cfg));

    KahgParams restored = params_from_checkpoint(back);
    std::map<std::string, Tensor> by_name;
    restored.for_each([&](const std::string& name, Tensor& p) { by_name.emplace(name, p); });
    params.for_each([&](const std::string& name, Tensor& p) {
      CHECK(*by_name.at(name).data == *p.data);
    });
  }
  SECTION("truncation at any prefix is a TruncatedError") {
    std::vector<char> bytes = read_bytes(path);
    for (size_t len : {size_t{0}, size_t{2}, size_t{7}, size_t{12}, size_t{40}, bytes.size() - 1}) {
      std::string tpath = temp_path("kag_test_trunc.kagp");
      write_bytes(tpath, std::vector<char>(bytes.begin(), bytes.begin() + static_cast<long>(len)));
      CHECK_THROWS_AS(load_checkpoint(tpath), TruncatedError);
      std::remove(tpath.c_str());
    }
  }
  SECTION("bad magic is a BadMagicError") {
    std::vector<char> bytes = read_bytes(path);
    bytes[0] = 'X';
    std::string bpath = temp_path("kag_test_magic.kagp");
    write_bytes(bpath, bytes);
    CHECK_THROWS_AS(load_checkpoint(bpath), BadMagicError);
    std::remove(bpath.c_str());
  }
  SECTION("unsupported version is a BadVersionError") {
    std::vector<char> bytes = read_bytes(path);
    bytes[4] = 2;
    std::string vpath = temp_path("kag_test_version.kagp");
    write_bytes(vpath, bytes);
    CHECK_THROWS_AS(load_checkpoint(vpath), BadVersionError);
    std::remove(vpath.c_str());
  }
  SECTION("missing record is a CheckpointError") {
    Checkpoint broken = ckpt;
    broken.records.erase(broken.records.begin());
    CHECK_THROWS_AS(params_from_checkpoint(broken), CheckpointError);
  }
  std::remove(path.c_str());
}

TEST_CASE("render_pgm") {
  std::string path = temp_path("kag_test_map.pgm");
  SECTION("all-zero map renders all zeros") {
    render_pgm(std::vector<double>(6, 0.0), 2, 3, path);
    PgmImage img = read_pgm(path);
    CHECK(img.h == 2);
    CHECK(img.w == 3);
    for (int p : img.pixels) CHECK(p == 0);
  }
  SECTION("0.5 rounds half away from zero to 128") {
    render_pgm({0.5, 1.0, 0.0, 0.25}, 2, 2, path);
    PgmImage img = read_pgm(path);
    CHECK(img.pixels == std::vector<int>{128, 255, 0, 64});
  }
  SECTION("roundtrip error is at most one quantization step") {
    SplitMix64 rng(11);
    std::vector<double> map(64);
    for (double& v : map) v = rng.uniform();
    render_pgm(map, 8, 8, path);
    PgmImage img = read_pgm(path);
    for (size_t i = 0; i < map.size(); ++i)
      CHECK(std::abs(map[i] - img.pixels[i] / 255.0) <= 1.0 / 255.0);
  }
  SECTION("out-of-range values rejected") {
    CHECK_THROWS_AS(render_pgm({1.2}, 1, 1, path), Error);
    CHECK_THROWS_AS(render_pgm({-0.1}, 1, 1, path), Error);
    CHECK_THROWS_AS(render_pgm({std::nan("")}, 1, 1, path), Error);
  }
  std::remove(path.c_str());
}

TEST_CASE("format_csv") {
  std::string csv = format_csv({{"b_run", "z_metric", 0.5},
                                {"a_run", "m_metric", 1.0 / 3.0},
                                {"b_run", "a_metric", 0.1234567},
                                {"a_run", "a_metric", 2.0}});
  CHECK(csv ==
        "run,metric,value\n"
        "a_run,a_metric,2.000000\n"
        "a_run,m_metric,0.333333\n"
        "b_run,a_metric,0.123457\n"
        "b_run,z_metric,0.500000\n");
}

TEST_CASE("train") {
  RunConfig cfg = small_config();
  Pipeline pipe = build_pipeline(cfg);

  SECTION("epochs=0 equals initialization bit-exactly") {
    RunConfig zero = cfg;
    zero.epochs = 0;
    TrainResult r = train(zero, &pipe);
    KahgParams init = KahgParams::init(graph_config(zero), zero.seed);
    init.for_each([&](const std::string& name, Tensor& p) {
      CHECK(*r.checkpoint.find(name).data == *p.data);
    });
    CHECK(r.epoch_losses.empty());
  }
  SECTION("one epoch logs one finite loss") {
    RunConfig one = cfg;
    one.epochs = 1;
    TrainResult r = train(one, &pipe);
    REQUIRE(r.epoch_losses.size() == 1);
    CHECK(std::isfinite(r.epoch_losses[0]));
    CHECK(r.epoch_losses[0] > 0.0);
  }
  SECTION("training is deterministic") {
    TrainResult a = train(cfg, &pipe);
    TrainResult b = train(cfg, &pipe);
    CHECK(a.epoch_losses == b.epoch_losses);
    REQUIRE(a.checkpoint.records.size() == b.checkpoint.records.size());
    for (size_t i = 0; i < a.checkpoint.records.size(); ++i)
      CHECK(*a.checkpoint.records[i].second.data == *b.checkpoint.records[i].second.data);
  }
  SECTION("a few epochs reduce the mean loss") {
    RunConfig more = cfg;
    more.epochs = 6;
    TrainResult r = train(more, &pipe);
    CHECK(r.epoch_losses.back() < r.epoch_losses.front());
  }
}

TEST_CASE("evaluate") {
  RunConfig cfg = small_config();
  Pipeline pipe = build_pipeline(cfg);
  TrainResult trained = train(cfg, &pipe);
  KahgParams params = params_from_checkpoint(trained.checkpoint);

  SECTION("identical CSV bytes on repeated evaluation") {
    EvalOutput a = evaluate(params, cfg, "run", &pipe);
    EvalOutput b = evaluate(params, cfg, "run", &pipe);
    CHECK(format_csv(a.rows) == format_csv(b.rows));
  }
  SECTION("metrics are sane and the report is complete") {
    EvalOutput out = evaluate(params, cfg, "run", &pipe);
    CHECK(out.rows.size() == 4);
    for (double v : {out.image_auroc, out.image_aupr, out.pixel_auroc, out.pixel_pro}) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
  SECTION("untrained parameters still separate pixels via the memory path") {
    // needs a feature grid fine enough for the memory map to resolve defects
    RunConfig mid = cfg;
    mid.image_size = 32;
    mid.grid = 8;
    mid.n_test = 8;
    Pipeline mp = build_pipeline(mid);
    KahgParams fresh = KahgParams::init(graph_config(mid), mid.seed);
    EvalOutput out = evaluate(fresh, mid, "untrained", &mp);
    CHECK(out.pixel_auroc > 0.5);
  }
  SECTION("max-baseline configuration runs (graph off, k=1, gamma=0)") {
    RunConfig base = cfg;
    base.graph_enabled = false;
    base.top_k = 1;
    base.gamma = 0.0;
    Pipeline bp = build_pipeline(base);
    KahgParams fresh = KahgParams::init(graph_config(base), base.seed);
    EvalOutput out = evaluate(fresh, base, "max_baseline", &bp);
    // gamma=0, k=1: the image score is exactly max(M) = max(M_v)
    MemoryBank bank = build_memory_bank(
        {run_kahg(bp.support_enc[0].layers, fresh, 0)});
    AnomalyResult r = score_sample(bp.test_enc[0], fresh, bank, bp.text, base);
    CHECK(r.s == *std::max_element(r.m.begin(), r.m.end()));
    CHECK(r.m == r.m_v);
    CHECK(out.rows.size() == 4);
  }
}

TEST_CASE("sweep") {
  RunConfig cfg = small_config();
  cfg.epochs = 1;

  SECTION("unknown parameter rejected") {
    CHECK_THROWS_AS(sweep("momentum", {"0.9"}, cfg), Error);
    CHECK_THROWS_AS(sweep("T", {}, cfg), Error);
  }
  SECTION("single-value sweep equals plain train+evaluate") {
    auto rows = sweep("T", {"2"}, cfg);
    Pipeline pipe = build_pipeline(cfg);
    TrainResult trained = train(cfg, &pipe);
    KahgParams params = params_from_checkpoint(trained.checkpoint);
    EvalOutput ev = evaluate(params, cfg, "T=2", &pipe);
    CHECK(format_csv(rows) == format_csv(ev.rows));
  }
  SECTION("top_k sweep reuses one trained model and matches per-k evaluation") {
    auto rows = sweep("top_k", {"1", "4", "16"}, cfg);
    CHECK(rows.size() == 12);
    Pipeline pipe = build_pipeline(cfg);
    TrainResult trained = train(cfg, &pipe);
    KahgParams params = params_from_checkpoint(trained.checkpoint);
    std::vector<std::tuple<std::string, std::string, double>> want;
    for (int k : {1, 4, 16}) {
      RunConfig c = cfg;
      c.top_k = k;
      EvalOutput ev = evaluate(params, c, "top_k=" + std::to_string(k), &pipe);
      want.insert(want.end(), ev.rows.begin(), ev.rows.end());
    }
    CHECK(format_csv(rows) == format_csv(want));
  }
}
