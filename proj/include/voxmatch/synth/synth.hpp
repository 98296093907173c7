#pragma once

#include <cstdint>
#include <vector>

#include "voxmatch/core/camera.hpp"
#include "voxmatch/detect/boxes.hpp"

// Deterministic ray-cast renderer for rectified stereo pairs: a textured
// ground plane plus oriented boxes, with exact disparity from the z-buffer.
// Every end-to-end test uses these scenes as its oracle.
namespace voxmatch::synth {

struct GroundParams {
  bool enabled = true;
  double height = 1.5;        // camera height above the plane, meters
  double albedo_bias = 0.5;   // texture midpoint
  double albedo_scale = 0.4;  // texture contrast
};

// Metric box resting in camera coordinates (x right, y down, z forward);
// (x,y,z) is the box center, yaw about the vertical axis.
struct BoxPlacement {
  double x = 0, y = 0, z = 0;
  double w = 0, h = 0, l = 0;
  double yaw = 0;
};

struct SceneSpec {
  std::uint64_t seed = 0;
  core::Camera cam{200.0, 128.0, 64.0, 0.5};
  int height = 128, width = 256;
  int d_max = 48;
  GroundParams ground;
  std::vector<BoxPlacement> boxes;
  double texture_density = 1.0;  // spatial frequency multiplier

  // Boxes must sit in front of both cameras with every corner's disparity
  // inside [1, d_max-1], so each one is matchable end to end.
  void validate() const;
};

struct RenderedScene {
  int height = 0, width = 0;
  std::vector<float> left, right;       // row-major [H*W], intensities [0,1]
  std::vector<float> gt_disp;           // left frame; 0 marks no surface
  std::vector<std::uint8_t> occlusion;  // 1 = not matchable in the right view
  std::vector<detect::LabeledBox> labels;
  std::vector<int> visible_px;  // left-image pixel count per label

  std::size_t at(int v, int u) const {
    return std::size_t(v) * std::size_t(width) + std::size_t(u);
  }
};

RenderedScene render(const SceneSpec& spec);

// Reproducible random scene set. occluder_mix in [0,1] is the fraction of
// scenes that stage a partially occluding box pair; the rest keep their
// boxes well separated. Scenes where some box ends up with fewer than 50
// visible pixels are re-rolled from the next derived seed.
std::vector<SceneSpec> make_dataset_specs(int n, std::uint64_t seed,
                                          double occluder_mix);
std::vector<RenderedScene> make_dataset(int n, std::uint64_t seed,
                                        double occluder_mix);

}  // namespace voxmatch::synth
