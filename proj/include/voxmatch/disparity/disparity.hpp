#pragma once

#include <cstdint>
#include <vector>

#include "voxmatch/core/graph.hpp"
#include "voxmatch/core/tensor.hpp"

// Disparity regression and depth-space evaluation.
namespace voxmatch::disparity {

// scores [D,H,W] -> expected disparity [H,W]. Softmax over the disparity
// axis, then the probability-weighted sum of candidate indices. Fully
// differentiable, unlike a hard argmax.
template <class T>
int soft_argmax(core::Graph<T>& g, int scores) {
  if (g.shape(scores).size() != 3)
    throw std::invalid_argument("soft_argmax: scores must be [D,H,W]");
  int p = g.softmax_axis(scores, 0);
  return g.weighted_index_sum(p, 0);
}

// Masked mean smooth-L1 between predicted and ground-truth disparity.
// Unlike the detection losses, an empty mask here is a caller bug: a
// training pair with no supervised pixels carries no signal.
template <class T>
int disparity_loss(core::Graph<T>& g, int pred, int target,
                   const std::vector<std::uint8_t>& valid) {
  std::size_t n = 0;
  for (auto v : valid) n += v ? 1 : 0;
  if (valid.empty() || n == 0)
    throw std::invalid_argument("disparity_loss: no valid pixels");
  return g.smooth_l1(pred, target, valid);
}

// Depth values in meters with a per-pixel validity mask. Double storage:
// the reciprocal projection must round-trip well below float precision.
struct DepthMap {
  std::vector<int> shape;
  std::vector<double> z;
  std::vector<std::uint8_t> valid;
};

// z = f*b/d. Disparities below kMinDisparity (in pixels) would explode the
// depth, so they are marked invalid instead.
inline constexpr double kMinDisparity = 1e-3;

DepthMap disparity_to_depth(const core::Tensor<float>& disp,
                            const std::vector<std::uint8_t>& valid,
                            double focal, double baseline);

// d = f*b/z, the exact inverse on valid pixels.
struct DisparityMap {
  std::vector<int> shape;
  std::vector<double> d;
  std::vector<std::uint8_t> valid;
};

DisparityMap depth_to_disparity(const DepthMap& depth, double focal,
                                double baseline);

struct DepthMetrics {
  double abs_rel = 0.0;  // mean |zhat - z| / z
  double sq_rel = 0.0;   // mean (zhat - z)^2 / z
  double rmse = 0.0;     // sqrt(mean (zhat - z)^2)
  std::size_t count = 0;
};

// Averages over pixels valid in both maps; rejects an empty overlap.
DepthMetrics depth_metrics(const DepthMap& pred, const DepthMap& gt);

}  // namespace voxmatch::disparity
