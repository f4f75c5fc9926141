#include <catch2/catch_amalgamated.hpp>

#include "kag/rng.hpp"
#include "kag/scoring.hpp"

using namespace kag;

namespace {

TextFeatures make_text(std::vector<double> fn, std::vector<double> fa, double scale = 10.0) {
  TextFeatures t;
  t.f_n = std::move(fn);
  t.f_a = std::move(fa);
  t.logit_scale = scale;
  return t;
}

Tensor random_tensor(Shape shape, SplitMix64& rng, double scale = 1.0) {
  std::vector<double> v(static_cast<size_t>(numel(shape)));
  for (double& x : v) x = rng.gaussian(0.0, scale);
  return Tensor::leaf(std::move(shape), std::move(v));
}

}  // namespace

TEST_CASE("text_alignment_map") {
  SECTION("patch collinear with F_a saturates to 1 at large scale") {
    TextFeatures t = make_text({1, 0}, {0, 1}, 200.0);
    Tensor o = Tensor::leaf({1, 2}, {0.0, 3.0});  // normalizes to F_a
    TextMaps m = text_alignment_map({o}, t, 1, 1, 1, 1);
    CHECK(m.m_p[0] == Catch::Approx(1.0).margin(1e-12));
  }
  SECTION("F_n == F_a gives 0.5 everywhere") {
    TextFeatures t = make_text({0.6, 0.8}, {0.6, 0.8});
    SplitMix64 rng(1);
    Tensor o = random_tensor({4, 2}, rng);
    TextMaps m = text_alignment_map({o, o}, t, 4, 4, 2, 2);
    for (const Tensor& layer : m.per_layer)
      for (int i = 0; i < layer.size(); ++i) CHECK(layer[i] == Catch::Approx(0.5).margin(1e-12));
    for (int i = 0; i < m.m_p.size(); ++i) CHECK(m.m_p[i] == Catch::Approx(0.5).margin(1e-12));
  }
  SECTION("single patch hand softmax oracle") {
    TextFeatures t = make_text({1, 0}, {0, 1}, 10.0);
    Tensor o = Tensor::leaf({1, 2}, {3.0, 4.0});  // normalizes to (0.6, 0.8)
    TextMaps m = text_alignment_map({o}, t, 1, 1, 1, 1);
    double want = std::exp(8.0) / (std::exp(6.0) + std::exp(8.0));
    CHECK(m.m_p[0] == Catch::Approx(want).margin(1e-12));
    CHECK(m.per_layer[0][0] == Catch::Approx(want).margin(1e-12));
  }
  SECTION("empty layer list rejected") {
    TextFeatures t = make_text({1, 0}, {0, 1});
    CHECK_THROWS_AS(text_alignment_map({}, t, 4, 4, 2, 2), Error);
  }
  SECTION("maps stay in [0,1]") {
    SplitMix64 rng(2);
    TextFeatures t = make_text({1, 0}, {0, 1});
    std::vector<Tensor> layers = {random_tensor({16, 2}, rng), random_tensor({16, 2}, rng)};
    TextMaps m = text_alignment_map(layers, t, 8, 8, 4, 4);
    for (int i = 0; i < m.m_p.size(); ++i) {
      CHECK(m.m_p[i] >= 0.0);
      CHECK(m.m_p[i] <= 1.0);
    }
  }
}

TEST_CASE("build_memory_bank") {
  SplitMix64 rng(3);
  SECTION("counts and unit norms") {
    std::vector<std::vector<Tensor>> support;
    for (int shot = 0; shot < 2; ++shot) {
      std::vector<Tensor> layers;
      for (int l = 0; l < 4; ++l) layers.push_back(random_tensor({4, 3}, rng));
      support.push_back(layers);
    }
    MemoryBank bank = build_memory_bank(support);
    REQUIRE(bank.layer_count() == 4);
    for (int l = 0; l < 4; ++l) {
      CHECK(bank.patches_in_layer(l) == 8);  // 2 shots x 4 patches
      for (int p = 0; p < 8; ++p) {
        double n2 = 0.0;
        for (int c = 0; c < 3; ++c) {
          double v = bank.layers[static_cast<size_t>(l)][static_cast<size_t>(p * 3 + c)];
          n2 += v * v;
        }
        CHECK(std::sqrt(n2) == Catch::Approx(1.0).margin(1e-12));
      }
    }
  }
  SECTION("duplicate shots are kept") {
    std::vector<Tensor> layer = {Tensor::leaf({1, 2}, {3, 4})};
    MemoryBank bank = build_memory_bank({layer, layer});
    CHECK(bank.patches_in_layer(0) == 2);
    CHECK(bank.layers[0][0] == Catch::Approx(0.6));
    CHECK(bank.layers[0][2] == Catch::Approx(0.6));
  }
  SECTION("zero patches stored as zero and score 0 similarity") {
    std::vector<Tensor> layer = {Tensor::zeros({1, 2})};
    MemoryBank bank = build_memory_bank({layer});
    CHECK(bank.layers[0][0] == 0.0);
    CHECK(bank.layers[0][1] == 0.0);
  }
  SECTION("empty support rejected") { CHECK_THROWS_AS(build_memory_bank({}), Error); }
}

TEST_CASE("memory_map") {
  SECTION("query identical to support scores zero") {
    SplitMix64 rng(4);
    std::vector<Tensor> layers = {random_tensor({4, 3}, rng), random_tensor({4, 3}, rng)};
    MemoryBank bank = build_memory_bank({layers});
    Tensor mv = memory_map(layers, bank, 2, 2, 2, 2);
    for (int i = 0; i < mv.size(); ++i) CHECK(mv[i] == Catch::Approx(0.0).margin(1e-12));
  }
  SECTION("opposite of a lone bank vector scores one") {
    std::vector<Tensor> support = {Tensor::leaf({1, 2}, {1.0, 0.0})};
    MemoryBank bank = build_memory_bank({support});
    std::vector<Tensor> query = {Tensor::leaf({1, 2}, {-2.0, 0.0})};
    Tensor mv = memory_map(query, bank, 1, 1, 1, 1);
    CHECK(mv[0] == Catch::Approx(1.0).margin(1e-12));
  }
  SECTION("hand max-cosine oracle over 2 bank vectors") {
    std::vector<Tensor> support = {Tensor::leaf({2, 2}, {1.0, 0.0, 0.0, 1.0})};
    MemoryBank bank = build_memory_bank({support});
    std::vector<Tensor> query = {Tensor::leaf({1, 2}, {3.0, 4.0})};
    Tensor mv = memory_map(query, bank, 1, 1, 1, 1);
    // cosines 0.6 and 0.8 -> best 0.8 -> (1-0.8)/2 = 0.1
    CHECK(mv[0] == Catch::Approx(0.1).margin(1e-12));
  }
  SECTION("invariant under positive rescaling of the query") {
    SplitMix64 rng(5);
    std::vector<Tensor> support = {random_tensor({3, 4}, rng)};
    MemoryBank bank = build_memory_bank({support});
    Tensor q = random_tensor({4, 4}, rng);
    Tensor q_scaled = scale(q, 17.3);
    Tensor a = memory_map({q}, bank, 2, 2, 2, 2);
    Tensor b = memory_map({q_scaled}, bank, 2, 2, 2, 2);
    for (int i = 0; i < a.size(); ++i) CHECK(a[i] == Catch::Approx(b[i]).margin(1e-12));
  }
  SECTION("bank growth monotonicity") {
    SplitMix64 rng(6);
    Tensor q = random_tensor({4, 4}, rng);
    std::vector<Tensor> s1 = {random_tensor({3, 4}, rng)};
    MemoryBank small = build_memory_bank({s1});
    Tensor before = memory_map({q}, small, 2, 2, 2, 2);
    // add more vectors: max-similarity can only rise, so M_v never increases
    std::vector<Tensor> s2 = {random_tensor({3, 4}, rng)};
    MemoryBank big = build_memory_bank({s1, s2});
    Tensor after = memory_map({q}, big, 2, 2, 2, 2);
    for (int i = 0; i < before.size(); ++i) CHECK(after[i] <= before[i] + 1e-12);
  }
  SECTION("layer count mismatch rejected") {
    std::vector<Tensor> support = {Tensor::leaf({1, 2}, {1.0, 0.0})};
    MemoryBank bank = build_memory_bank({support});
    std::vector<Tensor> query = {Tensor::leaf({1, 2}, {1.0, 0.0}), Tensor::leaf({1, 2}, {1.0, 0.0})};
    CHECK_THROWS_AS(memory_map(query, bank, 1, 1, 1, 1), Error);
  }
}

TEST_CASE("fuse_maps") {
  SplitMix64 rng(7);
  Tensor mp = sigmoid(random_tensor({3, 3}, rng));
  Tensor mv = sigmoid(random_tensor({3, 3}, rng));
  SECTION("gamma 1 returns M_p") {
    Tensor m = fuse_maps(mp, mv, 1.0);
    for (int i = 0; i < 9; ++i) CHECK(m[i] == Catch::Approx(mp[i]).margin(1e-15));
  }
  SECTION("gamma 0 returns M_v") {
    Tensor m = fuse_maps(mp, mv, 0.0);
    for (int i = 0; i < 9; ++i) CHECK(m[i] == Catch::Approx(mv[i]).margin(1e-15));
  }
  SECTION("gamma 0.1 convex combination") {
    Tensor ones = Tensor::full({2, 2}, 1.0);
    Tensor zeros = Tensor::zeros({2, 2});
    Tensor m = fuse_maps(ones, zeros, 0.1);
    for (int i = 0; i < 4; ++i) CHECK(m[i] == Catch::Approx(0.1).margin(1e-15));
  }
  SECTION("fused map lies between the inputs") {
    Tensor m = fuse_maps(mp, mv, 0.3);
    for (int i = 0; i < 9; ++i) {
      CHECK(m[i] >= std::min(mp[i], mv[i]) - 1e-12);
      CHECK(m[i] <= std::max(mp[i], mv[i]) + 1e-12);
    }
  }
  SECTION("invalid gamma rejected") {
    CHECK_THROWS_AS(fuse_maps(mp, mv, -0.1), Error);
    CHECK_THROWS_AS(fuse_maps(mp, mv, 1.5), Error);
    CHECK_THROWS_AS(fuse_maps(mp, Tensor::zeros({2, 2}), 0.5), Error);
  }
}

TEST_CASE("global_score_logits and s_1") {
  SECTION("adapted cls equal to F_a saturates at large scale") {
    TextFeatures t = make_text({1, 0}, {0, 1}, 500.0);
    Tensor w = Tensor::leaf({2, 2}, {0, 0, 1, 0});  // maps (c0,c1) to (0, c0)
    Tensor b = Tensor::zeros({2});
    Tensor logits = global_score_logits({5.0, 0.0}, w, b, t);
    CHECK(abnormal_probability(logits) == Catch::Approx(1.0).margin(1e-12));
  }
  SECTION("F_n == F_a gives s_1 = 0.5") {
    TextFeatures t = make_text({0.6, 0.8}, {0.6, 0.8});
    SplitMix64 rng(8);
    Tensor w = random_tensor({2, 3}, rng);
    Tensor b = random_tensor({2}, rng);
    Tensor logits = global_score_logits({1.0, -2.0, 0.5}, w, b, t);
    CHECK(abnormal_probability(logits) == Catch::Approx(0.5).margin(1e-12));
  }
  SECTION("hand 2-d softmax oracle") {
    TextFeatures t = make_text({1, 0}, {0, 1}, 10.0);
    Tensor w = Tensor::leaf({2, 2}, {1, 0, 0, 1});  // identity adapter
    Tensor b = Tensor::zeros({2});
    Tensor logits = global_score_logits({3.0, 4.0}, w, b, t);
    CHECK(logits[0] == Catch::Approx(6.0).margin(1e-12));
    CHECK(logits[1] == Catch::Approx(8.0).margin(1e-12));
    double want = std::exp(8.0) / (std::exp(6.0) + std::exp(8.0));
    CHECK(abnormal_probability(logits) == Catch::Approx(want).margin(1e-12));
  }
}

TEST_CASE("image_score") {
  SECTION("k=1 is the max, and with gamma=0 exactly the max baseline") {
    std::vector<double> m = {0.2, 0.9, 0.4};
    auto [s2, s] = image_score(0.77, m, 0.0, 1);
    CHECK(s2 == 0.9);
    CHECK(s == 0.9);
  }
  SECTION("constant map gives the constant for any k") {
    std::vector<double> m(25, 0.3);
    for (int k : {1, 5, 25, 100}) {
      auto [s2, s] = image_score(0.0, m, 0.5, k);
      CHECK(s2 == Catch::Approx(0.3));
    }
  }
  SECTION("sorted-oracle example") {
    std::vector<double> m = {0.9, 0.5, 0.1, 0.0};
    auto [s2, s] = image_score(0.5, m, 0.1, 2);
    CHECK(s2 == Catch::Approx(0.7));
    CHECK(s == Catch::Approx(0.1 * 0.5 + 0.9 * 0.7));
  }
  SECTION("monotone non-increasing in k") {
    SplitMix64 rng(9);
    std::vector<double> m(64);
    for (double& v : m) v = rng.uniform();
    double prev = 2.0;
    for (int k = 1; k <= 64; ++k) {
      auto [s2, s] = image_score(0.0, m, 0.0, k);
      CHECK(s2 <= prev + 1e-12);
      prev = s2;
    }
  }
  SECTION("k clamps to the map size") {
    std::vector<double> m = {0.25, 0.75};
    auto [s2, s] = image_score(0.0, m, 0.0, 10);
    CHECK(s2 == Catch::Approx(0.5));
  }
  SECTION("invalid arguments rejected") {
    std::vector<double> m = {0.5};
    CHECK_THROWS_AS(image_score(0.0, m, 0.0, 0), Error);
    CHECK_THROWS_AS(image_score(0.0, m, 1.2, 1), Error);
  }
}
