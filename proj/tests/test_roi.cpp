#include <cmath>
#include <limits>
#include <set>
#include <vector>

#include "doctest.h"
#include "test_util.hpp"
#include "voxmatch/core/gradcheck.hpp"
#include "voxmatch/core/rng.hpp"
#include "voxmatch/roi/roi.hpp"

using voxmatch::core::Graph;
using voxmatch::core::Rng;
using voxmatch::core::Tensor;
namespace roi = voxmatch::roi;

namespace {

Tensor<float> random_volume(std::uint64_t seed, int c, int d, int h, int w) {
  Rng rng(seed);
  Tensor<float> t = Tensor<float>::zeros({c, d, h, w});
  for (auto& x : t.data) x = float(rng.uniform(-1.0, 1.0));
  return t;
}

}  // namespace

TEST_CASE("degenerate boxes are rejected") {
  Graph<float> g;
  int vol = g.leaf(random_volume(1, 2, 4, 4, 4), false);
  roi::Roi3D r{1.0, 1.0, 1.0, 3.0, 3.0, 1.0 + 5e-7};
  CHECK_THROWS_AS(roi::trilinear_sample(g, vol, r, 4),
                  std::invalid_argument);
  CHECK_THROWS_AS(roi::deep_sample(g, vol, r, 4), std::invalid_argument);
  roi::Roi3D inverted{3.0, 1.0, 1.0, 1.0, 3.0, 3.0};
  CHECK_THROWS_AS(roi::trilinear_sample(g, vol, inverted, 4),
                  std::invalid_argument);
}

TEST_CASE("both interpolators reproduce constants") {
  Graph<double> g;
  int vol = g.leaf(Tensor<double>::full({2, 6, 5, 7}, 0.731), false);
  roi::Roi3D r{0.3, 0.7, 1.1, 5.8, 3.9, 4.4};
  auto tri = roi::trilinear_sample(g, vol, r, 5);
  auto deep = roi::deep_sample(g, vol, r, 5);
  for (double x : g.value(tri.node))
    CHECK(x == doctest::Approx(0.731).epsilon(1e-9));
  for (double x : g.value(deep.node))
    CHECK(x == doctest::Approx(0.731).epsilon(1e-9));
}

TEST_CASE("cell centers on grid nodes reproduce node values") {
  // Box [-0.5, s-0.5] has its s cell centers exactly on 0..s-1.
  Graph<float> g;
  Tensor<float> volt = random_volume(5, 3, 4, 4, 4);
  int vol = g.leaf(volt, false);
  roi::Roi3D r{-0.5, -0.5, -0.5, 3.5, 3.5, 3.5};
  auto tri = roi::trilinear_sample(g, vol, r, 4);
  auto deep = roi::deep_sample(g, vol, r, 4);
  REQUIRE(g.shape(tri.node) == std::vector<int>{3, 4, 4, 4});
  const auto& tv = g.value(tri.node);
  const auto& dv = g.value(deep.node);
  for (std::size_t i = 0; i < volt.data.size(); ++i) {
    CHECK(tv[i] == doctest::Approx(volt.data[i]).epsilon(1e-6));
    CHECK(dv[i] == doctest::Approx(volt.data[i]).epsilon(1e-6));
  }
}

TEST_CASE("cubic equals trilinear on fields linear in d") {
  // Away from the d borders both kernels reproduce a linear field.
  Graph<double> g;
  const int C = 1, D = 12, H = 6, W = 6;
  Tensor<double> t = Tensor<double>::zeros({C, D, H, W});
  for (int d = 0; d < D; ++d)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x)
        t.at({0, d, y, x}) = 0.7 * d - 0.3 * y + 0.11 * x + 2.0;
  int vol = g.leaf(t, false);
  roi::Roi3D r{0.4, 0.9, 1.2, 4.7, 4.8, 9.5};
  auto tri = roi::trilinear_sample(g, vol, r, 6);
  auto deep = roi::deep_sample(g, vol, r, 6);
  const auto& a = g.value(tri.node);
  const auto& b = g.value(deep.node);
  for (std::size_t i = 0; i < a.size(); ++i)
    CHECK(std::abs(a[i] - b[i]) <= 1e-9);
}

TEST_CASE("selective mask drops columns whose surface misses the box") {
  roi::Roi3D r{0.0, 0.0, 10.0, 8.0, 8.0, 20.0};
  Tensor<float> disp = Tensor<float>::full({16, 16}, 30.0f);
  auto mask = roi::selective_mask(r, disp, 8, 2.0);
  for (auto m : mask) CHECK(m == 0);
}

TEST_CASE("surface through the box center keeps whole columns") {
  roi::Roi3D r{0.0, 0.0, 10.0, 8.0, 8.0, 20.0};
  Tensor<float> disp = Tensor<float>::full({16, 16}, 15.0f);
  auto mask = roi::selective_mask(r, disp, 8, 5.0);
  for (auto m : mask) CHECK(m == 1);
}

TEST_CASE("infinite margin keeps everything") {
  roi::Roi3D r{0.0, 0.0, 0.0, 8.0, 8.0, 24.0};
  Rng rng(3);
  Tensor<float> disp = Tensor<float>::zeros({12, 12});
  for (auto& x : disp.data) x = float(rng.uniform(0.0, 40.0));
  auto mask = roi::selective_mask(r, disp, 8,
                                  std::numeric_limits<double>::infinity());
  for (auto m : mask) CHECK(m == 1);
}

TEST_CASE("the band rule keeps voxels near the surface only") {
  roi::Roi3D r{-0.5, -0.5, -0.5, 7.5, 7.5, 15.5};
  const int s = 8;
  // Surface at disparity 6.1; d cell centers sit at 2k + 0.5.
  Tensor<float> disp = Tensor<float>::full({8, 8}, 6.1f);
  auto mask = roi::selective_mask(r, disp, s, 2.0);
  for (int k = 0; k < s; ++k) {
    const double ds = -0.5 + (k + 0.5) * 2.0;
    const bool want = std::abs(ds - 6.1) <= 2.0;
    for (int j = 0; j < s; ++j)
      for (int i = 0; i < s; ++i)
        CHECK(mask[std::size_t(k * s + j) * s + i] == (want ? 1 : 0));
  }
}

TEST_CASE("mode trilinear matches the plain sampler") {
  Graph<float> g;
  int vol = g.leaf(random_volume(7, 4, 8, 8, 8), false);
  roi::Roi3D r{1.0, 2.0, 1.5, 6.0, 7.0, 6.5};
  auto a = roi::roi_select<float>(g, vol, r, nullptr,
                                  roi::SampleMode::kTrilinear, 6);
  auto b = roi::trilinear_sample(g, vol, r, 6);
  CHECK(g.value(a.node) == g.value(b.node));
}

TEST_CASE("selective with a vacuous mask equals deep sampling") {
  Graph<float> g;
  int vol = g.leaf(random_volume(9, 3, 8, 8, 8), false);
  roi::Roi3D r{1.0, 1.0, 1.0, 7.0, 7.0, 7.0};
  Tensor<float> disp = Tensor<float>::full({8, 8}, 4.0f);
  auto sel = roi::roi_select(g, vol, r, &disp, roi::SampleMode::kSelective,
                             5, std::numeric_limits<double>::infinity());
  auto deep = roi::deep_sample(g, vol, r, 5);
  CHECK(g.value(sel.node) == g.value(deep.node));
}

TEST_CASE("masked voxels carry zero forward value and zero gradient") {
  Graph<float> g;
  int vol = g.leaf(random_volume(11, 2, 10, 9, 9), true);
  roi::Roi3D r{0.5, 0.5, 1.0, 8.0, 8.0, 8.5};
  Rng rng(4);
  Tensor<float> disp = Tensor<float>::zeros({9, 9});
  for (auto& x : disp.data) x = float(rng.uniform(0.0, 10.0));
  auto sel = roi::roi_select(g, vol, r, &disp, roi::SampleMode::kSelective,
                             6, 1.5);
  const int C = 2;
  const std::size_t cells = 6 * 6 * 6;
  std::size_t masked = 0;
  for (auto m : sel.valid) masked += m ? 0 : 1;
  REQUIRE(masked > 0);       // the check is vacuous otherwise
  REQUIRE(masked < cells);

  const auto& val = g.value(sel.node);
  for (int c = 0; c < C; ++c)
    for (std::size_t p = 0; p < cells; ++p)
      if (!sel.valid[p]) CHECK(val[c * cells + p] == 0.0f);

  // Backward: the pre-mask node must see exactly zero at masked entries.
  std::vector<float> seed(val.size(), 1.0f);
  g.backward(sel.node, &seed);
  // sel.node is mask_zero(pre); its input holds the raw cubic samples.
  const int pre = g.node(sel.node).inputs[0];
  const auto& pre_grad = g.grad(pre);
  for (int c = 0; c < C; ++c)
    for (std::size_t p = 0; p < cells; ++p) {
      if (!sel.valid[p])
        CHECK(pre_grad[c * cells + p] == 0.0f);
      else
        CHECK(pre_grad[c * cells + p] == 1.0f);
    }
}

TEST_CASE("selective gradient equals deep gradient restricted to the mask") {
  const int C = 2;
  Tensor<float> volt = random_volume(13, C, 10, 9, 9);
  roi::Roi3D r{0.5, 0.5, 1.0, 8.0, 8.0, 8.5};
  Rng rng(6);
  Tensor<float> disp = Tensor<float>::zeros({9, 9});
  for (auto& x : disp.data) x = float(rng.uniform(0.0, 10.0));

  Graph<float> gs;
  int vs = gs.leaf(volt, true);
  auto sel = roi::roi_select(gs, vs, r, &disp, roi::SampleMode::kSelective,
                             6, 1.5);
  std::vector<float> seed(gs.value(sel.node).size(), 1.0f);
  gs.backward(sel.node, &seed);

  Graph<float> gd;
  int vd = gd.leaf(volt, true);
  auto deep = roi::deep_sample(gd, vd, r, 6);
  // Same seed, but zeroed where the selective mask dropped the sample.
  std::vector<float> dseed(seed.size(), 0.0f);
  const std::size_t cells = sel.valid.size();
  for (int c = 0; c < C; ++c)
    for (std::size_t p = 0; p < cells; ++p)
      dseed[c * cells + p] = sel.valid[p] ? 1.0f : 0.0f;
  gd.backward(deep.node, &dseed);

  const auto& ga = gs.grad(vs);
  const auto& gb = gd.grad(vd);
  REQUIRE(ga.size() == gb.size());
  for (std::size_t i = 0; i < ga.size(); ++i)
    CHECK(std::abs(double(ga[i]) - double(gb[i])) <= 1e-10);
}

TEST_CASE("gradients reach only stencil voxels of kept samples") {
  const int C = 1, D = 10, H = 8, W = 8;
  Graph<float> g;
  int vol = g.leaf(random_volume(17, C, D, H, W), true);
  roi::Roi3D r{1.0, 1.0, 2.0, 6.5, 6.5, 7.5};
  Tensor<float> disp = Tensor<float>::zeros({H, W});
  Rng rng(8);
  for (auto& x : disp.data) x = float(rng.uniform(0.0, 10.0));
  auto sel = roi::roi_select(g, vol, r, &disp, roi::SampleMode::kSelective,
                             5, 1.0);
  std::vector<float> seed(g.value(sel.node).size(), 1.0f);
  g.backward(sel.node, &seed);

  std::set<std::size_t> stencil;
  auto clampi = [](int x, int lo, int hi) {
    return x < lo ? lo : (x > hi ? hi : x);
  };
  for (std::size_t p = 0; p < sel.valid.size(); ++p) {
    if (!sel.valid[p]) continue;
    const double d = sel.coords[3 * p + 0];
    const double v = sel.coords[3 * p + 1];
    const double u = sel.coords[3 * p + 2];
    const int db = clampi(int(std::floor(d)), 0, D - 1);
    const int v0 = clampi(int(std::floor(v)), 0, H - 2);
    const int u0 = clampi(int(std::floor(u)), 0, W - 2);
    for (int dd = -1; dd <= 2; ++dd)
      for (int dy = 0; dy <= 1; ++dy)
        for (int dx = 0; dx <= 1; ++dx) {
          const int dk = clampi(db + dd, 0, D - 1);
          stencil.insert(std::size_t((dk * H + v0 + dy) * W + u0 + dx));
        }
  }
  const auto& gv = g.grad(vol);
  for (std::size_t i = 0; i < gv.size(); ++i)
    if (gv[i] != 0.0f) CHECK(stencil.count(i % (D * H * W)) == 1);
}

TEST_CASE("sampling is deterministic") {
  Tensor<float> volt = random_volume(19, 2, 6, 6, 6);
  roi::Roi3D r{0.7, 0.9, 0.4, 5.1, 5.3, 5.6};
  Graph<float> g1, g2;
  auto a = roi::deep_sample(g1, g1.leaf(volt, false), r, 7);
  auto b = roi::deep_sample(g2, g2.leaf(volt, false), r, 7);
  CHECK(g1.value(a.node) == g2.value(b.node));
}

TEST_CASE("sampler gradients match finite differences") {
  const int C = 2, D = 6, H = 5, W = 5;
  std::vector<Tensor<double>> leaves{Tensor<double>::zeros({C, D, H, W})};
  Rng fill(103);
  testutil::fill_uniform(leaves[0], fill, -2.0, 2.0);
  roi::Roi3D r{0.6, 0.8, 0.9, 3.9, 4.1, 4.8};

  for (auto mode : {roi::SampleMode::kTrilinear, roi::SampleMode::kDeep,
                    roi::SampleMode::kSelective}) {
    Tensor<double> disp = Tensor<double>::zeros({H, W});
    Rng rng(21);
    for (auto& x : disp.data) x = rng.uniform(0.0, double(D));
    auto builder = [&](Graph<double>& g, const std::vector<int>& ids) {
      auto out = roi::roi_select(g, ids[0], r, &disp, mode, 4, 1.5);
      return out.node;
    };
    voxmatch::core::GradCheckConfig cfg;
    cfg.max_coords = 60;
    auto res = voxmatch::core::check_gradients(builder, leaves, {true}, cfg);
    INFO(doctest::String(res.messages.empty() ? "" : res.messages.front().c_str()));
    CHECK(res.ok());
  }
}
