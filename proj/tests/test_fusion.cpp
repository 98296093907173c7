#include <cmath>
#include <vector>

#include "doctest.h"
#include "test_util.hpp"
#include "voxmatch/core/gradcheck.hpp"
#include "voxmatch/core/rng.hpp"
#include "voxmatch/fusion/fusion.hpp"

using voxmatch::core::Graph;
using voxmatch::core::Rng;
using voxmatch::core::Tensor;
namespace roi = voxmatch::roi;
namespace fusion = voxmatch::fusion;

TEST_CASE("patch extraction reproduces constants and node values") {
  Graph<float> g;
  int flat = g.leaf(Tensor<float>::full({10, 12}, 7.25f), false);
  roi::Roi3D r{2.0, 1.0, 0.0, 9.0, 8.0, 16.0};
  auto patch = fusion::extract_roi2d(g, flat, r, 5);
  REQUIRE(g.shape(patch.node) == std::vector<int>{5, 5});
  for (float x : g.value(patch.node)) CHECK(x == 7.25f);

  // Cell centers on integer pixels read the pixels straight through.
  Graph<float> g2;
  Rng rng(2);
  Tensor<float> disp = Tensor<float>::zeros({6, 6});
  for (auto& x : disp.data) x = float(rng.uniform(0.0, 30.0));
  int dn = g2.leaf(disp, false);
  roi::Roi3D aligned{-0.5, -0.5, 0.0, 5.5, 5.5, 16.0};
  auto p2 = fusion::extract_roi2d(g2, dn, aligned, 6);
  const auto& pv = g2.value(p2.node);
  for (std::size_t i = 0; i < disp.data.size(); ++i)
    CHECK(pv[i] == disp.data[i]);
}

TEST_CASE("footprints entirely off the image are rejected") {
  Graph<float> g;
  int dn = g.leaf(Tensor<float>::zeros({8, 8}), false);
  roi::Roi3D off{20.0, 2.0, 0.0, 30.0, 6.0, 8.0};
  CHECK_THROWS_AS(fusion::extract_roi2d(g, dn, off, 4),
                  std::invalid_argument);
  roi::Roi3D neg{-9.0, -9.0, 0.0, -2.0, -2.0, 8.0};
  CHECK_THROWS_AS(fusion::extract_roi2d(g, dn, neg, 4),
                  std::invalid_argument);
  // Partial overlap is fine (clamped sampling).
  roi::Roi3D partial{-3.0, 2.0, 0.0, 3.0, 6.0, 8.0};
  CHECK_NOTHROW(fusion::extract_roi2d(g, dn, partial, 4));
}

TEST_CASE("patch extraction gradients match finite differences") {
  std::vector<Tensor<double>> leaves{Tensor<double>::zeros({7, 9})};
  roi::Roi3D r{0.8, 0.4, 0.0, 7.3, 5.9, 10.0};
  auto builder = [&](Graph<double>& g, const std::vector<int>& ids) {
    return fusion::extract_roi2d(g, ids[0], r, 5).node;
  };
  auto res = voxmatch::core::check_gradients(builder, leaves, {true});
  INFO(doctest::String(res.messages.empty() ? "" : res.messages.front().c_str()));
  CHECK(res.ok());
}

TEST_CASE("a flat surface at the box center occupies the middle slice") {
  const int s = 16;
  roi::Roi3D r{0.0, 0.0, 10.0, 16.0, 16.0, 20.0};
  std::vector<double> patch(std::size_t(s) * s, 15.0);
  auto occ = fusion::back_project(patch, r, s);
  for (int k = 0; k < s; ++k)
    for (int j = 0; j < s; ++j)
      for (int i = 0; i < s; ++i)
        CHECK(occ.grid[(std::size_t(k) * s + j) * s + i] ==
              ((k == s / 2) ? 1 : 0));
}

TEST_CASE("surfaces outside the disparity range leave the grid empty") {
  const int s = 8;
  roi::Roi3D r{0.0, 0.0, 10.0, 8.0, 8.0, 20.0};
  std::vector<double> patch(std::size_t(s) * s, 25.0);
  auto occ = fusion::back_project(patch, r, s);
  for (auto v : occ.grid) CHECK(v == 0);
  std::vector<double> behind(std::size_t(s) * s, 3.0);
  auto occ2 = fusion::back_project(behind, r, s);
  for (auto v : occ2.grid) CHECK(v == 0);
}

TEST_CASE("range endpoints land on the first and last slices") {
  const int s = 8;
  roi::Roi3D r{0.0, 0.0, 4.0, 8.0, 8.0, 12.0};
  std::vector<double> at_min(std::size_t(s) * s, 4.0);
  auto lo = fusion::back_project(at_min, r, s);
  std::vector<double> at_max(std::size_t(s) * s, 12.0);
  auto hi = fusion::back_project(at_max, r, s);
  for (int j = 0; j < s; ++j)
    for (int i = 0; i < s; ++i) {
      CHECK(lo.grid[(0 * s + j) * s + i] == 1);
      CHECK(hi.grid[std::size_t((s - 1) * s + j) * s + i] == 1);
    }
}

TEST_CASE("each column holds at most one occupied voxel") {
  const int s = 12;
  roi::Roi3D r{0.0, 0.0, 0.0, 12.0, 12.0, 30.0};
  Rng rng(7);
  std::vector<double> patch(std::size_t(s) * s);
  for (auto& x : patch) x = rng.uniform(-5.0, 40.0);
  auto occ = fusion::back_project(patch, r, s);
  std::size_t ones = 0;
  for (int j = 0; j < s; ++j)
    for (int i = 0; i < s; ++i) {
      int count = 0;
      for (int k = 0; k < s; ++k)
        count += occ.grid[(std::size_t(k) * s + j) * s + i];
      CHECK(count <= 1);
      ones += std::size_t(count);
    }
  CHECK(ones <= std::size_t(s) * s);
  CHECK(ones > 0);
}

namespace {

// Sampled RoI + aligned occupancy grid over a random volume.
template <class T>
struct FusePair {
  roi::SampledRoi r3d;
  fusion::OccupancyRoi occ;
};

template <class T>
FusePair<T> make_pair_for_fuse(Graph<T>& g, std::uint64_t seed, int c,
                               int s) {
  Rng rng(seed);
  Tensor<T> vol = Tensor<T>::zeros({c, 12, 10, 10});
  for (auto& x : vol.data) x = T(rng.uniform(-2.0, 2.0));
  int vn = g.leaf(vol, false);
  roi::Roi3D r{1.0, 1.0, 2.0, 9.0, 9.0, 10.0};
  Tensor<T> disp = Tensor<T>::zeros({10, 10});
  for (auto& x : disp.data) x = T(rng.uniform(2.0, 10.0));
  FusePair<T> fp;
  fp.r3d = roi::roi_select(g, vn, r, &disp, roi::SampleMode::kSelective, s,
                           2.5);
  auto patch = fusion::extract_roi2d(g, g.leaf(disp, false), r, s);
  fp.occ = fusion::back_project(
      std::vector<double>(g.value(patch.node).begin(),
                          g.value(patch.node).end()),
      r, s);
  return fp;
}

}  // namespace

TEST_CASE("fusion appends the occupancy channel bit-exactly") {
  Graph<float> g;
  auto fp = make_pair_for_fuse(g, 31, 3, 8);
  int fused = fusion::fuse(g, fp.r3d, fp.occ);
  REQUIRE(g.shape(fused) == std::vector<int>{4, 8, 8, 8});
  const auto& v = g.value(fused);
  const std::size_t cells = 8 * 8 * 8;
  for (std::size_t p = 0; p < cells; ++p)
    CHECK(v[3 * cells + p] == (fp.occ.grid[p] ? 1.0f : 0.0f));
}

TEST_CASE("normalized channels have zero mean and unit variance") {
  Graph<double> g;
  auto fp = make_pair_for_fuse(g, 37, 3, 8);
  std::size_t m = 0;
  for (auto b : fp.r3d.valid) m += b ? 1 : 0;
  REQUIRE(m >= 2);
  int fused = fusion::fuse(g, fp.r3d, fp.occ);
  const auto& v = g.value(fused);
  const std::size_t cells = 8 * 8 * 8;
  for (int c = 0; c < 3; ++c) {
    double mean = 0.0, var = 0.0;
    for (std::size_t p = 0; p < cells; ++p)
      if (fp.r3d.valid[p]) mean += v[c * cells + p];
    mean /= double(m);
    for (std::size_t p = 0; p < cells; ++p)
      if (fp.r3d.valid[p]) {
        const double d = v[c * cells + p] - mean;
        var += d * d;
      }
    var /= double(m);
    CHECK(std::abs(mean) < 1e-6);
    CHECK(std::abs(var - 1.0) < 1e-4);
    // Dropped voxels stay exactly zero after normalization.
    for (std::size_t p = 0; p < cells; ++p)
      if (!fp.r3d.valid[p]) CHECK(v[c * cells + p] == 0.0);
  }
}

TEST_CASE("a constant channel normalizes to zero") {
  Graph<float> g;
  const int s = 4;
  int vn = g.leaf(Tensor<float>::full({1, 8, 8, 8}, 3.7f), false);
  roi::Roi3D r{1.0, 1.0, 1.0, 7.0, 7.0, 7.0};
  auto r3d = roi::trilinear_sample(g, vn, r, s);
  fusion::OccupancyRoi occ;
  occ.s = s;
  occ.box = r;
  occ.grid.assign(std::size_t(s) * s * s, 0);
  int fused = fusion::fuse(g, r3d, occ);
  const auto& v = g.value(fused);
  for (std::size_t p = 0; p < std::size_t(s) * s * s; ++p)
    CHECK(v[p] == 0.0f);
}

TEST_CASE("nearly empty masks pass features through unnormalized") {
  Graph<float> g;
  const int s = 4;
  Rng rng(5);
  Tensor<float> vol = Tensor<float>::zeros({2, 8, 8, 8});
  for (auto& x : vol.data) x = float(rng.uniform(-1.0, 1.0));
  int vn = g.leaf(vol, false);
  roi::Roi3D r{1.0, 1.0, 1.0, 7.0, 7.0, 7.0};
  auto r3d = roi::deep_sample(g, vn, r, s);
  // Re-mask to a single surviving voxel.
  r3d.valid.assign(std::size_t(s) * s * s, 0);
  r3d.valid[10] = 1;
  r3d.node = g.mask_zero(r3d.node, roi::expand_mask(r3d.valid, 2));
  fusion::OccupancyRoi occ;
  occ.s = s;
  occ.box = r;
  occ.grid.assign(std::size_t(s) * s * s, 0);
  int fused = fusion::fuse(g, r3d, occ);
  const auto& v = g.value(fused);
  const auto& raw = g.value(r3d.node);
  const std::size_t cells = std::size_t(s) * s * s;
  for (int c = 0; c < 2; ++c)
    for (std::size_t p = 0; p < cells; ++p)
      CHECK(v[c * cells + p] == (p == 10 ? raw[c * cells + p] : 0.0f));
}

TEST_CASE("misaligned inputs are rejected") {
  Graph<float> g;
  auto fp = make_pair_for_fuse(g, 41, 2, 8);
  fusion::OccupancyRoi wrong_s = fp.occ;
  wrong_s.s = 4;
  wrong_s.grid.assign(4 * 4 * 4, 0);
  CHECK_THROWS_AS(fusion::fuse(g, fp.r3d, wrong_s), std::invalid_argument);
  fusion::OccupancyRoi wrong_box = fp.occ;
  wrong_box.box.u0 += 0.5;
  CHECK_THROWS_AS(fusion::fuse(g, fp.r3d, wrong_box),
                  std::invalid_argument);
}

TEST_CASE("grid-representable surfaces agree with the selective band") {
  // Disparity equal to a cell center in every column: the back-projected
  // voxel and the 0.5-cell selective band pick the same cells.
  const int s = 8;
  roi::Roi3D r{-0.5, -0.5, 4.0, 7.5, 7.5, 20.0};
  const double cell = r.dd() / s;
  Rng rng(43);
  Tensor<float> disp = Tensor<float>::zeros({8, 8});
  std::vector<int> want_k(64);
  for (int j = 0; j < s; ++j)
    for (int i = 0; i < s; ++i) {
      const int k = int(rng.below(s));
      want_k[std::size_t(j) * s + i] = k;
      disp.data[std::size_t(j) * s + i] =
          float(r.d0 + (double(k) + 0.5) * cell);
    }

  auto mask = roi::selective_mask(r, disp, s, 0.5 * cell);
  std::vector<double> patch(64);
  for (int j = 0; j < s; ++j)
    for (int i = 0; i < s; ++i)
      patch[std::size_t(j) * s + i] =
          roi::bilinear_at(disp, double(j), double(i));
  auto occ = fusion::back_project(patch, r, s);

  std::size_t agree = 0;
  for (int j = 0; j < s; ++j)
    for (int i = 0; i < s; ++i) {
      bool same = true;
      for (int k = 0; k < s; ++k) {
        const std::size_t at = (std::size_t(k) * s + j) * s + i;
        if (mask[at] != occ.grid[at]) same = false;
      }
      agree += same ? 1 : 0;
      // Both structures select exactly the constructed cell.
      const std::size_t hot =
          (std::size_t(want_k[std::size_t(j) * s + i]) * s + j) * s + i;
      CHECK(occ.grid[hot] == 1);
      CHECK(mask[hot] == 1);
    }
  CHECK(agree == 64);
}

TEST_CASE("fusion gradients match finite differences") {
  const int C = 2, D = 6, H = 6, W = 6, s = 3;
  std::vector<Tensor<double>> leaves{Tensor<double>::zeros({C, D, H, W})};
  Rng fill(107);
  testutil::fill_uniform(leaves[0], fill, -3.0, 3.0);
  roi::Roi3D r{0.8, 0.8, 1.0, 4.9, 5.1, 4.9};
  Tensor<double> disp = Tensor<double>::zeros({H, W});
  Rng rng(11);
  for (auto& x : disp.data) x = rng.uniform(1.0, 5.0);

  auto builder = [&](Graph<double>& g, const std::vector<int>& ids) {
    auto r3d =
        roi::roi_select(g, ids[0], r, &disp, roi::SampleMode::kSelective,
                        s, 2.0);
    std::vector<double> patch;
    {
      // Occupancy is data, not a differentiable path; read it eagerly.
      int dn = g.constant(disp);
      auto p2 = fusion::extract_roi2d(g, dn, r, s);
      const auto& pv = g.value(p2.node);
      patch.assign(pv.begin(), pv.end());
    }
    auto occ = fusion::back_project(patch, r, s);
    return fusion::fuse(g, r3d, occ);
  };
  voxmatch::core::GradCheckConfig cfg;
  cfg.max_coords = 80;
  auto res = voxmatch::core::check_gradients(builder, leaves, {true}, cfg);
  INFO(doctest::String(res.messages.empty() ? "" : res.messages.front().c_str()));
  CHECK(res.ok());
}
