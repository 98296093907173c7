#include <algorithm>
#include <cmath>
#include <vector>

#include "doctest.h"
#include "test_util.hpp"
#include "voxmatch/core/gradcheck.hpp"
#include "voxmatch/stereo/stereo.hpp"

using voxmatch::core::Graph;
using voxmatch::core::ParamStore;
using voxmatch::core::Rng;
using voxmatch::core::Tensor;
namespace stereo = voxmatch::stereo;

namespace {

ParamStore make_stereo_store(std::uint64_t seed, int refine_channels) {
  ParamStore s;
  Rng rng(seed);
  stereo::init_stereo_params(s, rng, {refine_channels});
  return s;
}

}  // namespace

TEST_CASE("constant image gives spatially constant 16-channel features") {
  auto store = make_stereo_store(7, 8);
  Graph<float> g;
  auto p = voxmatch::core::make_param_leaves(g, store, false);
  const int H = 9, W = 11;
  int img = g.leaf(Tensor<float>::full({1, H, W}, 0.4f), false);
  int f = stereo::extract_features(g, img, p);
  REQUIRE(g.shape(f) == std::vector<int>{16, H, W});
  const auto& v = g.value(f);
  for (int c = 0; c < 16; ++c) {
    const float ref = v[std::size_t(c) * H * W];
    for (int i = 0; i < H * W; ++i)
      CHECK(v[std::size_t(c) * H * W + i] == ref);
  }
}

TEST_CASE("identical inputs share features bit-exactly") {
  auto store = make_stereo_store(11, 8);
  Graph<float> g;
  auto p = voxmatch::core::make_param_leaves(g, store, false);
  Rng rng(3);
  Tensor<float> img = Tensor<float>::zeros({1, 6, 10});
  for (auto& x : img.data) x = float(rng.uniform());
  int l = stereo::extract_features(g, g.leaf(img, false), p);
  int r = stereo::extract_features(g, g.leaf(img, false), p);
  CHECK(g.value(l) == g.value(r));
}

TEST_CASE("non-finite pixels are rejected") {
  auto store = make_stereo_store(5, 8);
  Graph<float> g;
  auto p = voxmatch::core::make_param_leaves(g, store, false);
  Tensor<float> img = Tensor<float>::full({1, 2, 2}, 0.5f);
  img.data[3] = std::nanf("");
  int id = g.leaf(img, false);
  CHECK_THROWS_AS(stereo::extract_features(g, id, p),
                  std::invalid_argument);
}

TEST_CASE("cost volume shift rule on a hand row") {
  Graph<double> g;
  int l = g.leaf(Tensor<double>{{1, 1, 3}, {1, 2, 3}}, false);
  int r = g.leaf(Tensor<double>{{1, 1, 3}, {4, 5, 6}}, false);
  int vol = stereo::build_cost_volume(g, l, r, 2);
  REQUIRE(g.shape(vol) == std::vector<int>{2, 2, 1, 3});
  const auto& v = g.value(vol);
  // layout [c][d][y][x]
  CHECK(v[0] == 1.0);  // c0 d0: 1 2 3
  CHECK(v[1] == 2.0);
  CHECK(v[2] == 3.0);
  CHECK(v[3] == 1.0);  // c0 d1: 1 2 3
  CHECK(v[4] == 2.0);
  CHECK(v[5] == 3.0);
  CHECK(v[6] == 4.0);  // c1 d0: 4 5 6
  CHECK(v[7] == 5.0);
  CHECK(v[8] == 6.0);
  CHECK(v[9] == 0.0);  // c1 d1: 0 4 5
  CHECK(v[10] == 4.0);
  CHECK(v[11] == 5.0);
}

TEST_CASE("zero shift matches the two feature blocks") {
  Graph<float> g;
  Rng rng(21);
  Tensor<float> f = Tensor<float>::zeros({3, 2, 5});
  for (auto& x : f.data) x = float(rng.uniform(-1.0, 1.0));
  int a = g.leaf(f, false);
  int b = g.leaf(f, false);
  int vol = stereo::build_cost_volume(g, a, b, 4);
  REQUIRE(g.shape(vol) == std::vector<int>{6, 4, 2, 5});
  const auto& v = g.value(vol);
  const std::size_t plane = 4 * 2 * 5, row = 2 * 5;
  for (int c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < row; ++i)
      CHECK(v[c * plane + i] == v[(3 + c) * plane + i]);
}

TEST_CASE("shift consistency and out-of-view zero fill") {
  Graph<float> g;
  Rng rng(33);
  Tensor<float> fl = Tensor<float>::zeros({2, 4, 7});
  Tensor<float> fr = Tensor<float>::zeros({2, 4, 7});
  for (auto& x : fl.data) x = float(rng.uniform(-1.0, 1.0));
  for (auto& x : fr.data) x = float(rng.uniform(-1.0, 1.0));
  int vol = stereo::build_cost_volume(g, g.leaf(fl, false),
                                      g.leaf(fr, false), 5);
  const auto& v = g.value(vol);
  const int C = 2, D = 5, H = 4, W = 7;
  auto at = [&](int c, int d, int y, int x) {
    return v[std::size_t(((c * D + d) * H + y) * W + x)];
  };
  for (int c = 0; c < C; ++c)
    for (int d = 0; d < D; ++d)
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          if (x >= d)
            CHECK(at(C + c, d, y, x) == fr.data[(c * H + y) * W + x - d]);
          else
            CHECK(at(C + c, d, y, x) == 0.0f);
          CHECK(at(c, d, y, x) == fl.data[(c * H + y) * W + x]);
        }
}

TEST_CASE("disparity count outside [1, W] is rejected") {
  Graph<float> g;
  int a = g.leaf(Tensor<float>::zeros({1, 1, 3}), false);
  int b = g.leaf(Tensor<float>::zeros({1, 1, 3}), false);
  CHECK_THROWS_AS(stereo::build_cost_volume(g, a, b, 4),
                  std::invalid_argument);
  CHECK_THROWS_AS(stereo::build_cost_volume(g, a, b, 0),
                  std::invalid_argument);
}

// With raw intensities as stand-in features, the per-disparity match
// distance has its minimum at the true shift for every visible pixel.
TEST_CASE("intensity features recover an integer shift") {
  const int W = 16, G = 3, D = 8;
  Rng rng(17);
  std::vector<double> left(W);
  for (auto& x : left) x = rng.uniform(0.1, 1.0);
  std::vector<double> right(W);
  for (int x = 0; x < W; ++x)
    right[std::size_t(x)] = (x + G < W) ? left[std::size_t(x + G)]
                                        : rng.uniform(0.1, 1.0);

  Graph<double> g;
  int l = g.leaf(Tensor<double>{{1, 1, W}, left}, false);
  int r = g.leaf(Tensor<double>{{1, 1, W}, right}, false);
  int vol = stereo::build_cost_volume(g, l, r, D);
  const auto& v = g.value(vol);
  for (int u = G; u < W; ++u) {
    int best = -1;
    double best_dist = 1e30;
    for (int d = 0; d < D; ++d) {
      const double lv = v[std::size_t(d * W + u)];
      const double rv = v[std::size_t((D + d) * W + u)];
      const double dist = std::abs(lv - rv);
      if (dist < best_dist) {
        best_dist = dist;
        best = d;
      }
    }
    CHECK(best == G);
    CHECK(best_dist == 0.0);
  }
}

TEST_CASE("identity-initialized refinement passes volumes through") {
  ParamStore s;
  Rng rng(1);
  const int C = 3;
  voxmatch::core::init_conv3d(s, "refine.c1", C, C, 3, rng);
  voxmatch::core::init_conv3d(s, "refine.c2", C, C, 3, rng);
  auto& w1 = s.get("refine.c1.w");
  auto& w2 = s.get("refine.c2.w");
  std::fill(w1.data.begin(), w1.data.end(), 0.0f);
  std::fill(w2.data.begin(), w2.data.end(), 0.0f);
  for (int c = 0; c < C; ++c) {
    w1.at({c, c, 1, 1, 1}) = 1.0f;
    w2.at({c, c, 1, 1, 1}) = 1.0f;
  }

  Graph<float> g;
  auto p = voxmatch::core::make_param_leaves(g, s, false);
  Rng vr(9);
  Tensor<float> vol = Tensor<float>::zeros({C, 4, 3, 5});
  for (auto& x : vol.data) x = float(vr.uniform());  // non-negative
  int out = stereo::refine_volume(g, g.leaf(vol, false), p);
  CHECK(g.value(out) == vol.data);
}

TEST_CASE("zero weights reduce refinement to its bias") {
  ParamStore s;
  Rng rng(2);
  voxmatch::core::init_conv3d(s, "refine.c1", 32, 4, 3, rng);
  voxmatch::core::init_conv3d(s, "refine.c2", 4, 4, 3, rng);
  auto& w1 = s.get("refine.c1.w");
  auto& w2 = s.get("refine.c2.w");
  std::fill(w1.data.begin(), w1.data.end(), 0.0f);
  std::fill(w2.data.begin(), w2.data.end(), 0.0f);
  auto& b2 = s.get("refine.c2.b");
  for (int c = 0; c < 4; ++c) b2.data[std::size_t(c)] = 0.1f * float(c + 1);

  Graph<float> g;
  auto p = voxmatch::core::make_param_leaves(g, s, false);
  int out = stereo::refine_volume(
      g, g.leaf(Tensor<float>::zeros({32, 3, 4, 4}), false), p);
  REQUIRE(g.shape(out) == std::vector<int>{4, 3, 4, 4});
  const auto& v = g.value(out);
  for (int c = 0; c < 4; ++c)
    for (int i = 0; i < 3 * 4 * 4; ++i)
      CHECK(v[std::size_t(c * 48 + i)] == b2.data[std::size_t(c)]);
}

TEST_CASE("unit aggregation head reproduces a single-channel volume") {
  ParamStore s;
  Rng rng(3);
  voxmatch::core::init_conv3d(s, "agg", 1, 1, 1, rng);
  s.get("agg.w").data[0] = 1.0f;
  s.get("agg.b").data[0] = 0.0f;

  Graph<float> g;
  auto p = voxmatch::core::make_param_leaves(g, s, false);
  Rng vr(4);
  Tensor<float> vol = Tensor<float>::zeros({1, 5, 3, 4});
  for (auto& x : vol.data) x = float(vr.uniform(-2.0, 2.0));
  int out = stereo::aggregate_volume(g, g.leaf(vol, false), p);
  REQUIRE(g.shape(out) == std::vector<int>{5, 3, 4});
  CHECK(g.value(out) == vol.data);
}

TEST_CASE("refine-aggregate gradients match finite differences") {
  const int C = 2, D = 3, H = 3, W = 4;
  std::vector<Tensor<double>> leaves;
  leaves.push_back(Tensor<double>::zeros({2 * C, D, H, W}));  // volume
  leaves.push_back(Tensor<double>::zeros({3, 2 * C, 3, 3, 3}));
  leaves.push_back(Tensor<double>::zeros({3}));
  leaves.push_back(Tensor<double>::zeros({3, 3, 3, 3, 3}));
  leaves.push_back(Tensor<double>::zeros({3}));
  leaves.push_back(Tensor<double>::zeros({1, 3, 1, 1, 1}));
  leaves.push_back(Tensor<double>::zeros({1}));
  Rng fill(101);
  testutil::fill_uniform(leaves[0], fill, -1.0, 1.0);
  for (std::size_t i = 1; i < leaves.size(); ++i)
    testutil::fill_uniform(leaves[i], fill, -0.4, 0.4);

  auto builder = [&](Graph<double>& g, const std::vector<int>& ids) {
    voxmatch::core::ParamLeaves p;
    p.ids = {{"refine.c1.w", ids[1]}, {"refine.c1.b", ids[2]},
             {"refine.c2.w", ids[3]}, {"refine.c2.b", ids[4]},
             {"agg.w", ids[5]},       {"agg.b", ids[6]}};
    int ref = stereo::refine_volume(g, ids[0], p);
    return stereo::aggregate_volume(g, ref, p);
  };

  voxmatch::core::GradCheckConfig cfg;
  cfg.max_coords = 40;
  auto res = voxmatch::core::check_gradients(
      builder, leaves, std::vector<bool>(leaves.size(), true), cfg);
  INFO(doctest::String(res.messages.empty() ? "" : res.messages.front().c_str()));
  CHECK(res.ok());
  CHECK(res.max_rel_err <= 1e-4);
}
