#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "voxmatch/core/graph.hpp"
#include "voxmatch/roi/roi.hpp"

// Fusion by occupancy: the disparity patch under a 3D RoI is re-read as a
// surface, voxelized into a binary grid aligned with the sampled RoI, and
// appended to the normalized features as an extra channel.
namespace voxmatch::fusion {

// Disparity patch over the RoI's image footprint, still attached to the
// graph (gradients flow back into the disparity estimate).
struct Roi2D {
  int node = -1;                // [s,s] patch, row-major [j][i]
  int s = 0;
  roi::Roi3D box;
  std::vector<double> coords;   // (v,u) per patch cell
};

template <class T>
Roi2D extract_roi2d(core::Graph<T>& g, int disp, const roi::Roi3D& r,
                    int s) {
  roi::validate_roi(r);
  const auto& ds = g.shape(disp);
  if (ds.size() != 2)
    throw std::invalid_argument("extract_roi2d: disparity map must be [H,W]");
  const int H = ds[0], W = ds[1];
  if (r.u1 < 0.0 || r.v1 < 0.0 || r.u0 > double(W - 1) ||
      r.v0 > double(H - 1))
    throw std::invalid_argument("extract_roi2d: footprint outside image");

  Roi2D out;
  out.s = s;
  out.box = r;
  out.coords.reserve(std::size_t(s) * s * 2);
  for (int j = 0; j < s; ++j) {
    const double v = roi::cell_center(r.v0, r.dv(), j, s);
    for (int i = 0; i < s; ++i) {
      out.coords.push_back(v);
      out.coords.push_back(roi::cell_center(r.u0, r.du(), i, s));
    }
  }
  int img = g.reshape(disp, {1, H, W});
  int patch = g.bilinear_sample(img, out.coords);
  out.node = g.reshape(patch, {s, s});
  return out;
}

// Binary surface grid [k][j][i]; at most one occupied cell per column.
struct OccupancyRoi {
  int s = 0;
  roi::Roi3D box;
  std::vector<std::uint8_t> grid;
};

// Snap each column's disparity onto its nearest cell along d. Columns
// whose disparity leaves [d0, d1] stay empty. Ties round half-up.
inline OccupancyRoi back_project(const std::vector<double>& patch,
                                 const roi::Roi3D& r, int s) {
  roi::validate_roi(r);
  if (patch.size() != std::size_t(s) * s)
    throw std::invalid_argument("back_project: patch is not s x s");
  OccupancyRoi occ;
  occ.s = s;
  occ.box = r;
  occ.grid.assign(std::size_t(s) * s * s, 0);
  for (int j = 0; j < s; ++j)
    for (int i = 0; i < s; ++i) {
      const double d = patch[std::size_t(j) * s + i];
      if (!(d >= r.d0 && d <= r.d1)) continue;
      const double ns = (d - r.d0) / (r.d1 - r.d0) * double(s) - 0.5;
      int k = int(std::floor(ns + 0.5));
      k = k < 0 ? 0 : (k > s - 1 ? s - 1 : k);
      occ.grid[(std::size_t(k) * s + j) * s + i] = 1;
    }
  return occ;
}

// Normalizes the feature RoI per channel over its valid voxels (invalid
// ones stay zero and are excluded from the statistics), then appends the
// occupancy grid as channel C+1. The occupancy channel is pass-through:
// no gradient is defined for it.
// 2D fallback: no occupancy grid, the disparity patch itself is replicated
// along the d axis, normalized, and appended. Unlike the binary occupancy
// channel this stays differentiable, so gradients reach the disparity map.
template <class T>
int fuse_stacked(core::Graph<T>& g, const roi::SampledRoi& r3d,
                 const Roi2D& patch, double eps = 1e-5) {
  if (r3d.s != patch.s)
    throw std::invalid_argument("fuse_stacked: grid sizes differ");
  if (!(r3d.box == patch.box))
    throw std::invalid_argument("fuse_stacked: RoI alignment differs");
  const int s = r3d.s;
  int normed = g.instance_norm(r3d.node, r3d.valid, eps);
  int slice = g.reshape(patch.node, {1, 1, s, s});
  int stack = slice;
  for (int k = 1; k < s; ++k) stack = g.concat_axis(stack, slice, 1);
  std::vector<std::uint8_t> all(std::size_t(s) * s * s, 1);
  int snorm = g.instance_norm(stack, all, eps);
  return g.concat_axis(normed, snorm, 0);
}

template <class T>
int fuse(core::Graph<T>& g, const roi::SampledRoi& r3d,
         const OccupancyRoi& occ, double eps = 1e-5) {
  if (r3d.s != occ.s)
    throw std::invalid_argument("fuse: grid sizes differ");
  if (!(r3d.box == occ.box))
    throw std::invalid_argument("fuse: RoI alignment differs");
  const int s = r3d.s;
  int normed = g.instance_norm(r3d.node, r3d.valid, eps);
  core::Tensor<T> oc;
  oc.shape = {1, s, s, s};
  oc.data.reserve(occ.grid.size());
  for (auto b : occ.grid) oc.data.push_back(b ? T(1) : T(0));
  int occ_node = g.constant(std::move(oc));
  return g.concat_axis(normed, occ_node, 0);
}

}  // namespace voxmatch::fusion
