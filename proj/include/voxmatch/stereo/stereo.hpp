#pragma once

#include <cmath>
#include <stdexcept>
#include <string>

#include "voxmatch/core/graph.hpp"
#include "voxmatch/core/nn.hpp"

// Siamese feature extraction and cost-volume construction. Both images go
// through the same weights; the volume stacks left features against
// right features shifted by each disparity candidate.
namespace voxmatch::stereo {

inline constexpr int kFeatureChannels = 16;

struct StereoConfig {
  int refine_channels = 32;  // working width of the two 3x3x3 volume convs
};

inline void init_stereo_params(core::ParamStore& s, core::Rng& rng,
                               const StereoConfig& cfg) {
  const int fc = kFeatureChannels;
  core::init_conv2d(s, "feat.c1", 1, fc, 3, rng);
  core::init_conv2d(s, "feat.c2", fc, fc, 3, rng);
  core::init_conv2d(s, "feat.c3", fc, fc, 3, rng);
  core::init_conv3d(s, "refine.c1", 2 * fc, cfg.refine_channels, 3, rng);
  core::init_conv3d(s, "refine.c2", cfg.refine_channels, cfg.refine_channels,
                    3, rng);
  core::init_conv3d(s, "agg", cfg.refine_channels, 1, 1, rng);
}

template <class T>
int conv2d_named(core::Graph<T>& g, int x, const core::ParamLeaves& p,
                 const std::string& name, kernels::PadMode pad_mode,
                 int pad = 1) {
  const auto& xs = g.shape(x);
  const auto& ws = g.shape(p(name + ".w"));
  kernels::Conv2dShape s;
  s.cin = xs[0];
  s.h = xs[1];
  s.w = xs[2];
  s.cout = ws[0];
  s.kh = ws[2];
  s.kw = ws[3];
  s.pad = pad;
  s.pad_mode = pad_mode;
  return g.conv2d(x, p(name + ".w"), p(name + ".b"), s);
}

template <class T>
int conv3d_named(core::Graph<T>& g, int x, const core::ParamLeaves& p,
                 const std::string& name, int pad, int stride) {
  const auto& xs = g.shape(x);
  const auto& ws = g.shape(p(name + ".w"));
  kernels::Conv3dShape s;
  s.cin = xs[0];
  s.d = xs[1];
  s.h = xs[2];
  s.w = xs[3];
  s.cout = ws[0];
  s.kd = ws[2];
  s.kh = ws[3];
  s.kw = ws[4];
  s.pad = pad;
  s.stride = stride;
  return g.conv3d(x, p(name + ".w"), p(name + ".b"), s);
}

// image [1,H,W] in [0,1] -> features [16,H,W]. Replicate padding keeps
// border pixels statistically comparable to the interior.
template <class T>
int extract_features(core::Graph<T>& g, int image,
                     const core::ParamLeaves& p) {
  const auto& s = g.shape(image);
  if (s.size() != 3 || s[0] != 1)
    throw std::invalid_argument("extract_features: image must be [1,H,W]");
  for (T v : g.value(image))
    if (!std::isfinite(double(v)))
      throw std::invalid_argument("extract_features: non-finite pixel");
  int x = conv2d_named(g, image, p, "feat.c1", kernels::PadMode::kReplicate);
  x = g.relu(x);
  x = conv2d_named(g, x, p, "feat.c2", kernels::PadMode::kReplicate);
  x = g.relu(x);
  x = conv2d_named(g, x, p, "feat.c3", kernels::PadMode::kReplicate);
  return x;
}

// left/right features [C,H,W] -> volume [2C,D,H,W] where slice d holds
// left(u) stacked on right(u-d); u-d < 0 is out of view and stays zero.
template <class T>
int build_cost_volume(core::Graph<T>& g, int left, int right, int d_max) {
  const auto& ls = g.shape(left);
  const auto& rs = g.shape(right);
  if (ls != rs)
    throw std::invalid_argument("build_cost_volume: feature shapes differ");
  if (d_max < 1 || d_max > ls[2])
    throw std::invalid_argument("build_cost_volume: bad disparity count");
  return g.shift_concat_volume(left, right, d_max);
}

// volume [2C,D,H,W] -> refined volume [refine_channels,D,H,W].
template <class T>
int refine_volume(core::Graph<T>& g, int vol, const core::ParamLeaves& p) {
  int x = conv3d_named(g, vol, p, "refine.c1", 1, 1);
  x = g.relu(x);
  x = conv3d_named(g, x, p, "refine.c2", 1, 1);
  return x;
}

// refined volume [C,D,H,W] -> matching scores [D,H,W]. A 1x1x1 head keeps
// per-voxel scores aligned with their disparity slice.
template <class T>
int aggregate_volume(core::Graph<T>& g, int refined,
                     const core::ParamLeaves& p) {
  int x = conv3d_named(g, refined, p, "agg", 0, 1);
  const auto& s = g.shape(x);
  return g.reshape(x, {s[1], s[2], s[3]});
}

}  // namespace voxmatch::stereo
