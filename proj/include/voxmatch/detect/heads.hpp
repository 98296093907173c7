#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <vector>

#include "voxmatch/core/camera.hpp"
#include "voxmatch/core/nn.hpp"
#include "voxmatch/detect/anchors.hpp"
#include "voxmatch/detect/boxes.hpp"
#include "voxmatch/stereo/stereo.hpp"

namespace voxmatch::detect {

// Proposal head over the refined volume: three stride-2 convs bring the
// grid to the anchor stride of 8, then 1x1x1 projections score each anchor
// and regress its box. The objectness bias starts negative so the first
// steps are not swamped by background terms.
inline void init_rpn_params(core::ParamStore& s, core::Rng& rng, int cin,
                            int num_templates, int channels = 16) {
  core::init_conv3d(s, "rpn.t1", cin, channels, 3, rng);
  core::init_conv3d(s, "rpn.t2", channels, channels, 3, rng);
  core::init_conv3d(s, "rpn.t3", channels, channels, 3, rng);
  core::init_conv3d(s, "rpn.cls", channels, num_templates, 1, rng, -2.0f);
  core::init_conv3d(s, "rpn.reg", channels, 6 * num_templates, 1, rng);
}

struct RpnOut {
  int cls = -1;  // [A, D/8, H/8, W/8] objectness logits
  int reg = -1;  // [6A, D/8, H/8, W/8] box offsets
  int nd = 0, nh = 0, nw = 0;
  int num_templates = 0;
};

template <class T>
RpnOut rpn_forward(core::Graph<T>& g, int vol,
                   const core::ParamLeaves& p) {
  const auto& vs = g.shape(vol);
  if (vs.size() != 4)
    throw std::invalid_argument("rpn_forward: volume must be [C,D,H,W]");
  if (vs[1] % 8 != 0 || vs[2] % 8 != 0 || vs[3] % 8 != 0)
    throw std::invalid_argument("rpn_forward: extents must divide by 8");
  int x = stereo::conv3d_named(g, vol, p, "rpn.t1", 1, 2);
  x = g.relu(x);
  x = stereo::conv3d_named(g, x, p, "rpn.t2", 1, 2);
  x = g.relu(x);
  x = stereo::conv3d_named(g, x, p, "rpn.t3", 1, 2);
  x = g.relu(x);
  RpnOut out;
  out.cls = stereo::conv3d_named(g, x, p, "rpn.cls", 0, 1);
  out.reg = stereo::conv3d_named(g, x, p, "rpn.reg", 0, 1);
  const auto& cs = g.shape(out.cls);
  out.num_templates = cs[0];
  out.nd = cs[1];
  out.nh = cs[2];
  out.nw = cs[3];
  return out;
}

// Anchor i was emitted d-major, then v, u, template; head tensors are
// template-major. These translate between the two layouts.
struct AnchorCell {
  int t = 0, gd = 0, gv = 0, gu = 0;
};

inline AnchorCell anchor_cell(std::size_t i, int num_templates, int nh,
                              int nw) {
  AnchorCell c;
  c.t = static_cast<int>(i % num_templates);
  std::size_t cell = i / num_templates;
  c.gu = static_cast<int>(cell % nw);
  cell /= nw;
  c.gv = static_cast<int>(cell % nh);
  c.gd = static_cast<int>(cell / nh);
  return c;
}

inline std::size_t cls_index(const AnchorCell& c, int nd, int nh, int nw) {
  return ((std::size_t(c.t) * nd + c.gd) * nh + c.gv) * nw + c.gu;
}

inline std::size_t reg_index(const AnchorCell& c, int k, int nd, int nh,
                             int nw) {
  return ((std::size_t(c.t) * 6 + k) * std::size_t(nd) * nh * nw) +
         (std::size_t(c.gd) * nh + c.gv) * nw + c.gu;
}

template <class T>
struct RpnTargets {
  core::Tensor<T> cls_target, reg_target;
  std::vector<std::uint8_t> cls_mask, reg_mask;
  int positives = 0;
};

// Lays assignment results out in head order. Ignored anchors vanish from
// both masks; offsets exist only where an anchor owns a box.
template <class T>
RpnTargets<T> build_rpn_targets(const AnchorAssignment& asg,
                                const std::vector<Anchor>& anchors,
                                const std::vector<roi::Roi3D>& gts,
                                const RpnOut& out) {
  const int A = out.num_templates, nd = out.nd, nh = out.nh, nw = out.nw;
  if (asg.target.size() != anchors.size() ||
      anchors.size() != std::size_t(A) * nd * nh * nw)
    throw std::invalid_argument("build_rpn_targets: anchor count mismatch");
  RpnTargets<T> t;
  t.cls_target = core::Tensor<T>::zeros({A, nd, nh, nw});
  t.reg_target = core::Tensor<T>::zeros({6 * A, nd, nh, nw});
  t.cls_mask.assign(t.cls_target.data.size(), 0);
  t.reg_mask.assign(t.reg_target.data.size(), 0);
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    const int tgt = asg.target[i];
    if (tgt == AnchorAssignment::kIgnore) continue;
    const AnchorCell c = anchor_cell(i, A, nh, nw);
    const std::size_t ci = cls_index(c, nd, nh, nw);
    t.cls_mask[ci] = 1;
    if (tgt < 0) continue;
    t.cls_target.data[ci] = T(1);
    const auto off = encode_box(anchors[i], gts[std::size_t(tgt)]);
    for (int k = 0; k < 6; ++k) {
      const std::size_t ri = reg_index(c, k, nd, nh, nw);
      t.reg_target.data[ri] = T(off[std::size_t(k)]);
      t.reg_mask[ri] = 1;
    }
    ++t.positives;
  }
  return t;
}

// Objectness BCE over labeled anchors plus smooth-L1 on the offsets of
// positive ones. With nothing labeled both terms collapse to zero and no
// gradient flows.
template <class T>
int rpn_loss(core::Graph<T>& g, const RpnOut& out,
             const RpnTargets<T>& t) {
  const int ct = g.constant(t.cls_target);
  const int rt = g.constant(t.reg_target);
  const int cls = g.bce_with_logits(out.cls, ct, t.cls_mask);
  const int reg = g.smooth_l1(out.reg, rt, t.reg_mask);
  return g.add(cls, reg);
}

struct ScoredRoi {
  double score = 0;  // objectness logit
  roi::Roi3D box;
};

// Decoded proposals ranked by objectness, best first; ties keep the lower
// anchor index. Call after the forward pass has produced values.
template <class T>
std::vector<ScoredRoi> top_rois(const core::Graph<T>& g, const RpnOut& out,
                                const std::vector<Anchor>& anchors,
                                std::size_t k) {
  const auto& cls = g.value(out.cls);
  const auto& reg = g.value(out.reg);
  std::vector<std::size_t> order(anchors.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> score(anchors.size());
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    const AnchorCell c = anchor_cell(i, out.num_templates, out.nh, out.nw);
    score[i] = double(cls[cls_index(c, out.nd, out.nh, out.nw)]);
  }
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a,
                                                   std::size_t b) {
    return score[a] > score[b];
  });
  if (order.size() > k) order.resize(k);
  std::vector<ScoredRoi> rois;
  rois.reserve(order.size());
  for (std::size_t i : order) {
    const AnchorCell c = anchor_cell(i, out.num_templates, out.nh, out.nw);
    std::array<double, 6> off;
    for (int j = 0; j < 6; ++j)
      off[std::size_t(j)] =
          double(reg[reg_index(c, j, out.nd, out.nh, out.nw)]);
    rois.push_back({score[i], decode_box(anchors[i], off)});
  }
  return rois;
}

// Per-proposal refinement: the fused grid collapses through two stride-2
// convs and an average pool into a 9-way readout: center shifts (in RoI
// extents), log metric sizes, heading as (sin, cos), confidence logit.
inline void init_header_params(core::ParamStore& s, core::Rng& rng, int cin,
                               int channels = 16) {
  core::init_conv3d(s, "hdr.c1", cin, channels, 3, rng);
  core::init_conv3d(s, "hdr.c2", channels, channels, 3, rng);
  core::init_linear(s, "hdr.fc1", channels, 2 * channels, rng);
  core::init_linear(s, "hdr.fc2", 2 * channels, 9, rng);
}

inline constexpr int kHeaderOutputs = 9;
inline constexpr int kHeaderCube = 16;  // RoI grid resolution the head expects

template <class T>
int header_forward(core::Graph<T>& g, int fused,
                   const core::ParamLeaves& p) {
  const auto& fs = g.shape(fused);
  if (fs.size() != 4 || fs[1] != kHeaderCube || fs[2] != kHeaderCube ||
      fs[3] != kHeaderCube)
    throw std::invalid_argument("header_forward: need a [C,16,16,16] grid");
  int x = stereo::conv3d_named(g, fused, p, "hdr.c1", 1, 2);
  x = g.relu(x);
  x = stereo::conv3d_named(g, x, p, "hdr.c2", 1, 2);
  x = g.relu(x);

  // Average pool as a frozen depthwise conv: identity across channels,
  // uniform weight over the remaining cube.
  const auto& xs = g.shape(x);
  const int ch = xs[0], cube = xs[1];
  core::Tensor<T> w = core::Tensor<T>::zeros({ch, ch, cube, cube, cube});
  const T inv = T(1.0 / (double(cube) * cube * cube));
  const std::size_t tap = std::size_t(cube) * cube * cube;
  for (int c = 0; c < ch; ++c)
    std::fill_n(w.data.begin() + (std::size_t(c) * ch + c) * tap, tap, inv);
  kernels::Conv3dShape ps;
  ps.cin = ch;
  ps.d = ps.h = ps.w = cube;
  ps.cout = ch;
  ps.kd = ps.kh = ps.kw = cube;
  ps.pad = 0;
  ps.stride = 1;
  x = g.conv3d(x, g.constant(std::move(w)),
               g.constant(core::Tensor<T>::zeros({ch})), ps);

  x = g.reshape(x, {1, ch});
  x = g.linear(x, p("hdr.fc1.w"), p("hdr.fc1.b"));
  x = g.relu(x);
  x = g.linear(x, p("hdr.fc2.w"), p("hdr.fc2.b"));
  return g.reshape(x, {kHeaderOutputs});
}

struct HeaderTarget {
  std::array<double, 3> dc{};       // center offset in RoI extents (u,v,d)
  std::array<double, 3> logsize{};  // log metric w, h, l
  double siny = 0, cosy = 1;
  double conf = 0;
  bool matched = false;
};

inline HeaderTarget make_header_target(const roi::Roi3D& r,
                                       const core::Vec3& gt_center_uvd,
                                       const ObjectBox& gt) {
  roi::validate_roi(r);
  if (!(gt.w > 0) || !(gt.h > 0) || !(gt.l > 0))
    throw std::invalid_argument("make_header_target: non-positive size");
  HeaderTarget t;
  t.dc = {(gt_center_uvd.x - 0.5 * (r.u0 + r.u1)) / r.du(),
          (gt_center_uvd.y - 0.5 * (r.v0 + r.v1)) / r.dv(),
          (gt_center_uvd.z - 0.5 * (r.d0 + r.d1)) / r.dd()};
  t.logsize = {std::log(gt.w), std::log(gt.h), std::log(gt.l)};
  t.siny = std::sin(gt.yaw);
  t.cosy = std::cos(gt.yaw);
  t.conf = 1.0;
  t.matched = true;
  return t;
}

// L1 over the eight regression outputs plus confidence BCE. Unmatched
// proposals train only the confidence; their regression rows are zeroed
// out of the sum instead of being given fake targets.
template <class T>
int header_loss(core::Graph<T>& g, int pred, const HeaderTarget& t) {
  if (g.shape(pred) != std::vector<int>{kHeaderOutputs})
    throw std::invalid_argument("header_loss: pred must be [9]");
  core::Tensor<T> tv = core::Tensor<T>::zeros({kHeaderOutputs});
  for (int i = 0; i < 3; ++i) {
    tv.data[std::size_t(i)] = T(t.dc[std::size_t(i)]);
    tv.data[std::size_t(3 + i)] = T(t.logsize[std::size_t(i)]);
  }
  tv.data[6] = T(t.siny);
  tv.data[7] = T(t.cosy);
  tv.data[8] = T(t.conf);

  core::Tensor<T> neg = tv;
  for (auto& v : neg.data) v = -v;
  const int diff = g.add(pred, g.constant(std::move(neg)));
  core::Tensor<T> m1 = core::Tensor<T>::zeros({kHeaderOutputs});
  m1.data.assign(kHeaderOutputs, T(-1));
  const int l1 = g.add(g.relu(diff), g.relu(g.mul(diff, g.constant(m1))));

  core::Tensor<T> row = core::Tensor<T>::zeros({1, kHeaderOutputs});
  if (t.matched) std::fill_n(row.data.begin(), 8, T(1));
  const int reg = g.linear(g.reshape(l1, {1, kHeaderOutputs}),
                           g.constant(std::move(row)),
                           g.constant(core::Tensor<T>::zeros({1})));

  std::vector<std::uint8_t> conf_only(kHeaderOutputs, 0);
  conf_only[8] = 1;
  const int bce = g.bce_with_logits(pred, g.constant(tv), conf_only);
  return g.add(g.reshape(reg, {1}), bce);
}

inline double sigmoid(double x) {
  return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

// Readout to a metric box. The heading comes from the renormalized
// (sin, cos) pair; a vanishing pair means no heading evidence and maps to
// zero. Boxes whose center leaves the valid disparity range are dropped.
inline std::optional<ObjectBox> decode_header_box(
    const std::array<double, kHeaderOutputs>& pred, const roi::Roi3D& r,
    const core::Camera& cam) {
  const double u = 0.5 * (r.u0 + r.u1) + pred[0] * r.du();
  const double v = 0.5 * (r.v0 + r.v1) + pred[1] * r.dv();
  const double d = 0.5 * (r.d0 + r.d1) + pred[2] * r.dd();
  if (!(d > 1e-3)) return std::nullopt;
  ObjectBox b;
  const core::Vec3 c = core::volume_to_metric(u, v, d, cam);
  b.x = c.x;
  b.y = c.y;
  b.z = c.z;
  b.w = std::exp(pred[3]);
  b.h = std::exp(pred[4]);
  b.l = std::exp(pred[5]);
  const double norm = std::hypot(pred[6], pred[7]);
  b.yaw = norm < 1e-12 ? 0.0 : std::atan2(pred[6] / norm, pred[7] / norm);
  if (b.yaw <= -M_PI) b.yaw += 2.0 * M_PI;
  b.conf = sigmoid(pred[8]);
  return b;
}

// Graph-side counterpart of total_loss; all three inputs are scalars.
template <class T>
int total_loss_node(core::Graph<T>& g, int l_disp, int l_rpn,
                    int l_header) {
  core::Tensor<T> two = core::Tensor<T>::zeros({1});
  two.data[0] = T(2);
  return g.add(g.add(l_disp, l_rpn), g.mul(l_header, g.constant(two)));
}

}  // namespace voxmatch::detect
