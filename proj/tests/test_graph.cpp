#include <doctest.h>

#include <cmath>
#include <cstring>
#include <vector>

#include "voxmatch/core/gradcheck.hpp"
#include "voxmatch/core/graph.hpp"
#include "voxmatch/core/param_store.hpp"
#include "voxmatch/core/rng.hpp"

using namespace voxmatch::core;
using voxmatch::kernels::Conv2dShape;
using voxmatch::kernels::Conv3dShape;
using voxmatch::kernels::PadMode;

namespace {

Tensor<double> randt(Rng& rng, std::vector<int> shape, double lo = -1.0,
                     double hi = 1.0) {
  Tensor<double> t = Tensor<double>::zeros(std::move(shape));
  for (auto& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

GradCheckResult fd(const BuilderFn& b, std::vector<Tensor<double>> leaves,
                   std::vector<bool> wrt, std::uint64_t seed) {
  GradCheckConfig cfg;
  cfg.seed = seed;
  return check_gradients(b, leaves, wrt, cfg);
}

}  // namespace

TEST_CASE("elementwise basics") {
  Graph<float> g;
  int x = g.leaf(Tensor<float>({3}, {-1.0f, 0.0f, 2.0f}), false);
  int r = g.relu(x);
  CHECK(g.value(r) == std::vector<float>{0.0f, 0.0f, 2.0f});

  int l = g.leaf(Tensor<float>({2}, {0.0f, 0.0f}), false);
  int sm = g.softmax_axis(l, 0);
  CHECK(g.value(sm)[0] == doctest::Approx(0.5));
  CHECK(g.value(sm)[1] == doctest::Approx(0.5));

  int a = g.constant(Tensor<float>::zeros({16, 4, 4}));
  int b = g.constant(Tensor<float>::zeros({16, 4, 4}));
  int c = g.concat_axis(a, b, 0);
  CHECK(g.shape(c) == std::vector<int>{32, 4, 4});
}

TEST_CASE("backward on composed reductions") {
  // sum(x) composed as linear with unit weights.
  Graph<float> g;
  int x = g.leaf(Tensor<float>({3}, {1.0f, -2.0f, 5.0f}), true);
  int w = g.constant(Tensor<float>({1, 3}, {1.0f, 1.0f, 1.0f}));
  int b = g.constant(Tensor<float>({1}, {0.0f}));
  int s = g.linear(x, w, b);
  CHECK(g.value(s)[0] == doctest::Approx(4.0));
  g.backward(s);
  CHECK(g.grad(x) == std::vector<float>{1.0f, 1.0f, 1.0f});

  // smooth-l1 at x=2 against target 0 sits on the linear branch.
  Graph<float> g2;
  int p = g2.leaf(Tensor<float>({1}, {2.0f}), true);
  int t = g2.constant(Tensor<float>({1}, {0.0f}));
  int loss = g2.smooth_l1(p, t);
  CHECK(g2.scalar(loss) == doctest::Approx(1.5));
  g2.backward(loss);
  CHECK(g2.grad(p)[0] == doctest::Approx(1.0));

  CHECK_THROWS(g2.backward(g2.constant(Tensor<float>::zeros({2, 2}))));
}

TEST_CASE("masked entries forward and backward exactly zero") {
  Graph<float> g;
  int x = g.leaf(Tensor<float>({4}, {1.5f, -2.0f, 3.0f, -0.5f}), true);
  int m = g.mask_zero(x, {1, 0, 0, 1});
  int w = g.constant(Tensor<float>({1, 4}, {1.0f, 1.0f, 1.0f, 1.0f}));
  int b = g.constant(Tensor<float>({1}, {0.0f}));
  int s = g.linear(m, w, b);
  g.backward(s);
  const auto& mv = g.value(m);
  CHECK(std::memcmp(&mv[1], "\0\0\0\0", 4) == 0);
  CHECK(std::memcmp(&mv[2], "\0\0\0\0", 4) == 0);
  const auto& gx = g.grad(x);
  CHECK(std::memcmp(&gx[1], "\0\0\0\0", 4) == 0);
  CHECK(std::memcmp(&gx[2], "\0\0\0\0", 4) == 0);
  CHECK(gx[0] == 1.0f);

  // All-masked: every gradient entry is bit-zero.
  Graph<float> g3;
  int x3 = g3.leaf(Tensor<float>({3}, {1.0f, 2.0f, 3.0f}), true);
  int m3 = g3.mask_zero(x3, {0, 0, 0});
  int w3 = g3.constant(Tensor<float>({1, 3}, {1.0f, 1.0f, 1.0f}));
  int s3 = g3.linear(m3, w3, g3.constant(Tensor<float>({1}, {0.0f})));
  g3.backward(s3);
  for (float v : g3.grad(x3)) CHECK(std::memcmp(&v, "\0\0\0\0", 4) == 0);
}

TEST_CASE("shape violations are rejected") {
  Graph<float> g;
  int x = g.constant(Tensor<float>::zeros({2, 3, 3}));
  int w = g.constant(Tensor<float>::zeros({4, 2, 3, 3}));
  int b = g.constant(Tensor<float>::zeros({3}));  // wrong: cout is 4
  Conv2dShape s{2, 3, 3, 4, 3, 3, 1, PadMode::kZero};
  CHECK_THROWS(g.conv2d(x, w, b, s));
  CHECK_THROWS(g.add(x, g.constant(Tensor<float>::zeros({2, 3, 4}))));
  CHECK_THROWS(g.softmax_axis(x, 3));
}

TEST_CASE("forward evaluation is deterministic") {
  auto build = [] {
    Rng rng(77);
    Graph<float> g;
    Tensor<float> img = Tensor<float>::zeros({2, 6, 7});
    for (auto& v : img.data) v = float(rng.uniform(-1, 1));
    Tensor<float> w = Tensor<float>::zeros({3, 2, 3, 3});
    for (auto& v : w.data) v = float(rng.uniform(-1, 1));
    int x = g.leaf(std::move(img), false);
    int wi = g.leaf(std::move(w), false);
    int b = g.constant(Tensor<float>::zeros({3}));
    int c = g.conv2d(x, wi, b, {2, 6, 7, 3, 3, 3, 1, PadMode::kReplicate});
    int r = g.relu(c);
    int sm = g.softmax_axis(r, 0);
    return g.value(sm);
  };
  auto a = build();
  auto b = build();
  CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0);
}

// ------------------------------------------------------------------ FD

TEST_CASE("finite differences: convolutions") {
  Rng rng(100);
  for (int inst = 0; inst < 10; ++inst) {
    const PadMode pm = inst % 2 ? PadMode::kZero : PadMode::kReplicate;
    Conv2dShape s2{2, 4, 5, 2, 3, 3, 1, pm};
    auto res = fd(
        [&](Graph<double>& g, const std::vector<int>& ids) {
          return g.conv2d(ids[0], ids[1], ids[2], s2);
        },
        {randt(rng, {2, 4, 5}), randt(rng, {2, 2, 3, 3}), randt(rng, {2})},
        {true, true, true}, 100 + inst);
    INFO("conv2d instance ", inst, " max rel err ", res.max_rel_err);
    CHECK(res.ok());

    Conv3dShape s3{2, 4, 4, 5, 2, 3, 3, 3, 1, inst % 2 ? 2 : 1};
    auto res3 = fd(
        [&](Graph<double>& g, const std::vector<int>& ids) {
          return g.conv3d(ids[0], ids[1], ids[2], s3);
        },
        {randt(rng, {2, 4, 4, 5}), randt(rng, {2, 2, 3, 3, 3}),
         randt(rng, {2})},
        {true, true, true}, 200 + inst);
    INFO("conv3d instance ", inst, " max rel err ", res3.max_rel_err);
    CHECK(res3.ok());
  }
}

TEST_CASE("finite differences: activations and reductions") {
  Rng rng(300);
  for (int inst = 0; inst < 10; ++inst) {
    auto r1 = fd(
        [](Graph<double>& g, const std::vector<int>& ids) {
          return g.relu(ids[0]);
        },
        {randt(rng, {11})}, {true}, 300 + inst);
    CHECK(r1.ok());

    auto r2 = fd(
        [](Graph<double>& g, const std::vector<int>& ids) {
          return g.linear(ids[0], ids[1], ids[2]);
        },
        {randt(rng, {3, 4}), randt(rng, {2, 4}), randt(rng, {2})},
        {true, true, true}, 400 + inst);
    CHECK(r2.ok());

    auto r3 = fd(
        [](Graph<double>& g, const std::vector<int>& ids) {
          return g.softmax_axis(ids[0], 0);
        },
        {randt(rng, {8})}, {true}, 500 + inst);
    CHECK(r3.ok());

    auto r4 = fd(
        [](Graph<double>& g, const std::vector<int>& ids) {
          return g.weighted_index_sum(g.softmax_axis(ids[0], 0), 0);
        },
        {randt(rng, {6, 2, 3})}, {true}, 600 + inst);
    CHECK(r4.ok());

    auto r5 = fd(
        [](Graph<double>& g, const std::vector<int>& ids) {
          return g.add(g.mul(ids[0], ids[1]), ids[2]);
        },
        {randt(rng, {7}), randt(rng, {7}), randt(rng, {7})},
        {true, true, true}, 700 + inst);
    CHECK(r5.ok());

    auto r6 = fd(
        [](Graph<double>& g, const std::vector<int>& ids) {
          return g.concat_axis(ids[0], ids[1], 1);
        },
        {randt(rng, {2, 3, 2}), randt(rng, {2, 2, 2})}, {true, true},
        800 + inst);
    CHECK(r6.ok());

    auto r7 = fd(
        [](Graph<double>& g, const std::vector<int>& ids) {
          return g.reshape(ids[0], {6, 2});
        },
        {randt(rng, {3, 4})}, {true}, 900 + inst);
    CHECK(r7.ok());
  }
}

namespace {

// Normalization probes need healthy per-channel spread: near-degenerate
// sample variance inflates the finite-difference truncation error without
// saying anything about the analytic gradient.
Tensor<double> spread_data(Rng& rng, int channels, int sp,
                           const std::vector<std::uint8_t>& mask) {
  Tensor<double> t = Tensor<double>::zeros({channels, sp});
  for (int c = 0; c < channels; ++c) {
    for (;;) {
      double sum = 0, sum2 = 0;
      std::size_t m = 0;
      for (int i = 0; i < sp; ++i) {
        const double v = rng.uniform(-2.5, 2.5);
        t.data[std::size_t(c) * sp + i] = v;
        if (mask.empty() || mask[std::size_t(i)]) {
          sum += v;
          sum2 += v * v;
          ++m;
        }
      }
      const double mu = sum / double(m);
      if (sum2 / double(m) - mu * mu >= 0.7) break;
    }
  }
  return t;
}

}  // namespace

TEST_CASE("finite differences: normalization and losses") {
  Rng rng(1000);
  std::vector<std::uint8_t> mask = {1, 1, 0, 1, 1, 0, 1, 1};
  for (int inst = 0; inst < 10; ++inst) {
    auto r1 = fd(
        [&](Graph<double>& g, const std::vector<int>& ids) {
          return g.instance_norm(ids[0], mask, 1e-5);
        },
        {spread_data(rng, 3, 8, mask)}, {true}, 1000 + inst);
    INFO("instance-norm max rel err ", r1.max_rel_err);
    CHECK(r1.ok());

    auto r2 = fd(
        [&](Graph<double>& g, const std::vector<int>& ids) {
          return g.instance_norm(ids[0], ids[1], ids[2], mask, 1e-5);
        },
        {spread_data(rng, 2, 8, mask), randt(rng, {2}, 0.5, 1.5),
         randt(rng, {2})},
        {true, true, true}, 1100 + inst);
    CHECK(r2.ok());

    auto r3 = fd(
        [&](Graph<double>& g, const std::vector<int>& ids) {
          return g.smooth_l1(ids[0], ids[1], mask);
        },
        {randt(rng, {8}, -2.5, 2.5), randt(rng, {8})}, {true, true},
        1200 + inst);
    CHECK(r3.ok());

    auto r4 = fd(
        [&](Graph<double>& g, const std::vector<int>& ids) {
          return g.bce_with_logits(ids[0], ids[1], mask);
        },
        {randt(rng, {8}, -3, 3), randt(rng, {8}, 0, 1)}, {true, true},
        1300 + inst);
    CHECK(r4.ok());
  }
}

TEST_CASE("finite differences: samplers and volume ops") {
  Rng rng(2000);
  for (int inst = 0; inst < 10; ++inst) {
    std::vector<double> tri;
    for (int k = 0; k < 5; ++k) {
      tri.push_back(rng.uniform(0.2, 3.8));
      tri.push_back(rng.uniform(0.2, 3.8));
      tri.push_back(rng.uniform(0.2, 4.8));
    }
    auto r1 = fd(
        [&](Graph<double>& g, const std::vector<int>& ids) {
          return g.trilinear_sample(ids[0], tri);
        },
        {randt(rng, {2, 5, 5, 6})}, {true}, 2000 + inst);
    CHECK(r1.ok());

    // Include an exact node point: the cubic weights there reduce to
    // picking the node.
    std::vector<double> cub = tri;
    cub[0] = 2.0;
    auto r2 = fd(
        [&](Graph<double>& g, const std::vector<int>& ids) {
          return g.cubic_d_sample(ids[0], cub);
        },
        {randt(rng, {2, 5, 5, 6})}, {true}, 2100 + inst);
    CHECK(r2.ok());

    std::vector<double> bil;
    for (int k = 0; k < 6; ++k) {
      bil.push_back(rng.uniform(0.2, 4.8));
      bil.push_back(rng.uniform(0.2, 5.8));
    }
    auto r3 = fd(
        [&](Graph<double>& g, const std::vector<int>& ids) {
          return g.bilinear_sample(ids[0], bil);
        },
        {randt(rng, {2, 6, 7})}, {true}, 2200 + inst);
    CHECK(r3.ok());

    std::vector<std::uint8_t> keep(12);
    for (auto& k : keep) k = rng.uniform() < 0.5 ? 1 : 0;
    auto r4 = fd(
        [&](Graph<double>& g, const std::vector<int>& ids) {
          return g.mask_zero(ids[0], keep);
        },
        {randt(rng, {3, 4})}, {true}, 2300 + inst);
    CHECK(r4.ok());

    auto r5 = fd(
        [&](Graph<double>& g, const std::vector<int>& ids) {
          return g.shift_concat_volume(ids[0], ids[1], 3);
        },
        {randt(rng, {2, 3, 5}), randt(rng, {2, 3, 5})}, {true, true},
        2400 + inst);
    CHECK(r5.ok());
  }
}

TEST_CASE("kink probes are excluded, not failed") {
  // relu probed exactly at 0: the two-sided evaluations land on
  // different branches and the checker must skip the coordinate.
  Tensor<double> x({3}, {0.0, 1.0, -1.0});
  auto res = fd(
      [](Graph<double>& g, const std::vector<int>& ids) {
        return g.relu(ids[0]);
      },
      {x}, {true}, 31);
  CHECK(res.failures == 0);
  CHECK(res.skipped_kinks >= 1);
  CHECK(res.checked == 2);
}

TEST_CASE("linear gradient equals the transpose rule") {
  Rng rng(41);
  Tensor<double> x = randt(rng, {5});
  Tensor<double> w = randt(rng, {3, 5});
  Graph<double> g;
  int xi = g.leaf(x, true);
  int wi = g.leaf(w, false);
  int bi = g.constant(Tensor<double>::zeros({3}));
  int y = g.linear(xi, wi, bi);
  std::vector<double> seed = {1.0, -2.0, 0.5};
  g.backward(y, &seed);
  for (int i = 0; i < 5; ++i) {
    double want = 0;
    for (int o = 0; o < 3; ++o) want += seed[o] * w.data[o * 5 + i];
    CHECK(g.grad(xi)[i] == doctest::Approx(want).epsilon(1e-10));
  }
}

TEST_CASE("adaptive-moment optimizer") {
  AdamConfig cfg;
  cfg.lr = 0.1;

  ParamStore store;
  store.create_const("w", {1}, 1.0f);
  std::vector<float> g1 = {1.0f};
  store.adam_step({{"w", &g1}}, cfg);
  const float w1 = store.get("w").data[0];
  CHECK(w1 < 1.0f);
  // Bias corrections cancel on the first step: the move is lr / (1+eps).
  CHECK(w1 == doctest::Approx(1.0 - 0.1).epsilon(1e-6));

  store.adam_step({{"w", &g1}}, cfg);
  const float w2 = store.get("w").data[0];
  CHECK(w2 < w1);
  // Identical gradients keep both moment ratios at 1, so each step
  // moves by lr again.
  CHECK(w2 == doctest::Approx(1.0 - 0.2).epsilon(1e-6));

  ParamStore store2;
  store2.create_const("w", {1}, 1.0f);
  std::vector<float> g0 = {0.0f};
  store2.adam_step({{"w", &g0}}, cfg);
  CHECK(store2.get("w").data[0] == 1.0f);
}

TEST_CASE("parameter store round-trips through a checkpoint") {
  Rng rng(55);
  ParamStore store;
  store.create_he("conv.w", {4, 2, 3, 3}, 18, rng);
  store.create_const("conv.b", {4}, 0.25f);
  std::vector<float> g(store.get("conv.w").numel(), 0.01f);
  store.adam_step({{"conv.w", &g}}, {});

  const std::string path = "/tmp/voxmatch_test_ckpt.bin";
  store.save(path);
  ParamStore loaded;
  loaded.load(path);
  CHECK(loaded.step_count() == store.step_count());
  CHECK(loaded.size() == store.size());
  CHECK(loaded.get("conv.w").shape == store.get("conv.w").shape);
  CHECK(std::memcmp(loaded.get("conv.w").data.data(),
                    store.get("conv.w").data.data(),
                    store.get("conv.w").numel() * sizeof(float)) == 0);
  CHECK(loaded.get("conv.b").data[0] == 0.25f);
}
