#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "voxmatch/core/graph.hpp"
#include "voxmatch/core/tensor.hpp"

// Fixed-size sampling of axis-aligned 3D regions from a cost volume.
// Three flavors: plain trilinear, cubic along the disparity axis, and the
// cubic variant with low-confidence voxels masked out by the estimated
// disparity surface.
namespace voxmatch::roi {

// Axis-aligned box in continuous volume coordinates. u runs along image
// columns (volume W), v along rows (H), d along disparity slices (D).
struct Roi3D {
  double u0 = 0, v0 = 0, d0 = 0;
  double u1 = 0, v1 = 0, d1 = 0;

  double du() const { return u1 - u0; }
  double dv() const { return v1 - v0; }
  double dd() const { return d1 - d0; }

  bool operator==(const Roi3D&) const = default;
};

inline void validate_roi(const Roi3D& r) {
  if (!(std::isfinite(r.u0) && std::isfinite(r.v0) && std::isfinite(r.d0) &&
        std::isfinite(r.u1) && std::isfinite(r.v1) && std::isfinite(r.d1)))
    throw std::invalid_argument("roi: non-finite bounds");
  if (r.du() < 1e-6 || r.dv() < 1e-6 || r.dd() < 1e-6)
    throw std::invalid_argument("roi: degenerate extent");
}

enum class SampleMode { kTrilinear, kDeep, kSelective };

// Cell-center positions: sample i of s lies at lo + (i+0.5)*extent/s, so
// box borders are never double-counted between adjacent RoIs.
inline double cell_center(double lo, double extent, int i, int s) {
  return lo + (double(i) + 0.5) * extent / double(s);
}

// (d,v,u) triples for the s^3 grid, d-major then v then u; sample index
// p = (k*s + j)*s + i matches the [*,k,j,i] feature layout.
inline std::vector<double> sample_grid_coords(const Roi3D& r, int s) {
  validate_roi(r);
  if (s < 1) throw std::invalid_argument("roi: grid size must be >= 1");
  std::vector<double> co;
  co.reserve(std::size_t(s) * s * s * 3);
  for (int k = 0; k < s; ++k) {
    const double d = cell_center(r.d0, r.dd(), k, s);
    for (int j = 0; j < s; ++j) {
      const double v = cell_center(r.v0, r.dv(), j, s);
      for (int i = 0; i < s; ++i) {
        co.push_back(d);
        co.push_back(v);
        co.push_back(cell_center(r.u0, r.du(), i, s));
      }
    }
  }
  return co;
}

// Clamped bilinear lookup used for mask decisions; deliberately outside
// the graph, since validity is data rather than a differentiable value.
template <class T>
double bilinear_at(const core::Tensor<T>& img, double v, double u) {
  const int H = img.shape[int(img.shape.size()) - 2];
  const int W = img.shape[int(img.shape.size()) - 1];
  auto clampd = [](double x, double lo, double hi) {
    return x < lo ? lo : (x > hi ? hi : x);
  };
  v = clampd(v, 0.0, double(H - 1));
  u = clampd(u, 0.0, double(W - 1));
  int v0 = int(std::floor(v)), u0 = int(std::floor(u));
  v0 = v0 > H - 2 ? (H >= 2 ? H - 2 : 0) : v0;
  u0 = u0 > W - 2 ? (W >= 2 ? W - 2 : 0) : u0;
  const int v1 = v0 + 1 < H ? v0 + 1 : v0;
  const int u1 = u0 + 1 < W ? u0 + 1 : u0;
  const double tv = v - v0, tu = u - u0;
  return (1 - tv) * (1 - tu) * double(img.data[std::size_t(v0) * W + u0]) +
         (1 - tv) * tu * double(img.data[std::size_t(v0) * W + u1]) +
         tv * (1 - tu) * double(img.data[std::size_t(v1) * W + u0]) +
         tv * tu * double(img.data[std::size_t(v1) * W + u1]);
}

// Validity grid [k][j][i]. A column survives only if the estimated
// surface runs within `margin` of the RoI's disparity range; inside such
// a column exactly the voxels within `margin` of the surface stay.
template <class T>
std::vector<std::uint8_t> selective_mask(const Roi3D& r,
                                         const core::Tensor<T>& disp, int s,
                                         double margin) {
  validate_roi(r);
  if (disp.shape.size() != 2)
    throw std::invalid_argument("selective_mask: disparity map must be [H,W]");
  if (margin < 0) throw std::invalid_argument("selective_mask: margin < 0");
  std::vector<std::uint8_t> mask(std::size_t(s) * s * s, 0);
  for (int j = 0; j < s; ++j) {
    const double v = cell_center(r.v0, r.dv(), j, s);
    for (int i = 0; i < s; ++i) {
      const double u = cell_center(r.u0, r.du(), i, s);
      const double est = bilinear_at(disp, v, u);
      if (!(est >= r.d0 - margin && est <= r.d1 + margin)) continue;
      for (int k = 0; k < s; ++k) {
        const double ds = cell_center(r.d0, r.dd(), k, s);
        if (std::abs(ds - est) <= margin)
          mask[(std::size_t(k) * s + j) * s + i] = 1;
      }
    }
  }
  return mask;
}

// One sampled region: a graph node holding [C,s,s,s] features, the
// validity grid that produced it, and the source coordinates.
struct SampledRoi {
  int node = -1;
  int s = 0;
  Roi3D box;
  std::vector<std::uint8_t> valid;   // [k][j][i], 1 = sample kept
  std::vector<double> coords;        // (d,v,u) per sample point
};

template <class T>
SampledRoi trilinear_sample(core::Graph<T>& g, int vol, const Roi3D& r,
                            int s) {
  SampledRoi out;
  out.s = s;
  out.box = r;
  out.coords = sample_grid_coords(r, s);
  const int C = g.shape(vol)[0];
  int x = g.trilinear_sample(vol, out.coords);
  out.node = g.reshape(x, {C, s, s, s});
  out.valid.assign(std::size_t(s) * s * s, 1);
  return out;
}

template <class T>
SampledRoi deep_sample(core::Graph<T>& g, int vol, const Roi3D& r, int s) {
  SampledRoi out;
  out.s = s;
  out.box = r;
  out.coords = sample_grid_coords(r, s);
  const int C = g.shape(vol)[0];
  int x = g.cubic_d_sample(vol, out.coords);
  out.node = g.reshape(x, {C, s, s, s});
  out.valid.assign(std::size_t(s) * s * s, 1);
  return out;
}

inline constexpr double kDefaultMargin = 3.0;  // disparity levels

// Broadcast a spatial validity grid across C channels for mask_zero.
inline std::vector<std::uint8_t> expand_mask(
    const std::vector<std::uint8_t>& spatial, int channels) {
  std::vector<std::uint8_t> full;
  full.reserve(spatial.size() * std::size_t(channels));
  for (int c = 0; c < channels; ++c)
    full.insert(full.end(), spatial.begin(), spatial.end());
  return full;
}

// Masked entries are zero in the forward value and contribute exactly
// zero gradient to the volume.
template <class T>
SampledRoi roi_select(core::Graph<T>& g, int vol, const Roi3D& r,
                      const core::Tensor<T>* disp, SampleMode mode,
                      int s = 16, double margin = kDefaultMargin) {
  switch (mode) {
    case SampleMode::kTrilinear:
      return trilinear_sample(g, vol, r, s);
    case SampleMode::kDeep:
      return deep_sample(g, vol, r, s);
    case SampleMode::kSelective: {
      if (disp == nullptr)
        throw std::invalid_argument("roi_select: selective mode needs disp");
      SampledRoi out = deep_sample(g, vol, r, s);
      out.valid = selective_mask(r, *disp, s, margin);
      out.node = g.mask_zero(out.node, expand_mask(out.valid,
                                                   g.shape(out.node)[0]));
      return out;
    }
  }
  throw std::invalid_argument("roi_select: unknown mode");
}

}  // namespace voxmatch::roi
