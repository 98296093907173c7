#pragma once

#include <string>
#include <vector>

#include "voxmatch/core/camera.hpp"
#include "voxmatch/core/graph.hpp"
#include "voxmatch/core/nn.hpp"
#include "voxmatch/core/param_store.hpp"
#include "voxmatch/core/rng.hpp"
#include "voxmatch/detect/boxes.hpp"
#include "voxmatch/disparity/disparity.hpp"
#include "voxmatch/io/io.hpp"
#include "voxmatch/roi/roi.hpp"
#include "voxmatch/synth/synth.hpp"

// End-to-end assembly: stereo network, detection heads, training loop, and
// dataset-level evaluation, all driven by one PipelineConfig. The ablation
// flags decide which stages exist and how the sampled RoI is fused.
namespace voxmatch::pipeline {

// Axis-aligned hull of the eight projected box corners, in (u,v,d) volume
// coordinates. Every corner must sit in front of the camera.
roi::Roi3D project_box(const detect::ObjectBox& b, const core::Camera& cam);

struct Model {
  io::PipelineConfig cfg;
  core::ParamStore params;

  bool detection_on() const { return cfg.ablation.rpn_on; }
  bool header_on() const {
    return cfg.ablation.rpn_on && cfg.ablation.header_on;
  }
  // Channel count of the volume the detection heads read.
  int det_channels() const {
    return cfg.ablation.input_volume == io::InputVolume::kCostA
               ? 1
               : cfg.refine_channels;
  }
  // Header input: sampled channels plus the fused channel, if any.
  int header_channels() const {
    return det_channels() + (cfg.ablation.fusion == io::Fusion::kNone ? 0 : 1);
  }
};

// Initializes every parameter the flag set needs. The stereo trunk draws
// from the RNG first, so models that differ only in detection flags start
// from identical disparity weights under the same seed.
Model make_model(const io::PipelineConfig& cfg);

// Node ids of one stereo forward pass.
struct StereoNodes {
  int refined = -1;    // [C,D,H,W]
  int scores = -1;     // [D,H,W]
  int disp = -1;       // [H,W]
  int det_input = -1;  // volume the detection heads read; -1 when off
};

StereoNodes stereo_forward(core::Graph<float>& g, const core::ParamLeaves& p,
                           const Model& m, const std::vector<float>& left,
                           const std::vector<float>& right, int height,
                           int width);

// Samples the RoI from the detection volume, fuses it with the disparity
// estimate per the config, and runs the box head. Returns the [9] node.
int apply_header(core::Graph<float>& g, const core::ParamLeaves& p,
                 const Model& m, const StereoNodes& nodes,
                 const core::Tensor<float>& disp_data, const roi::Roi3D& box);

// The training objective: w_d * L_disp + w_r * L_rpn + w_h * L_header,
// assembled in this fixed order so reruns reduce identically.
int weighted_total(core::Graph<float>& g, int l_disp, int l_rpn,
                   int l_header, const io::PipelineConfig& cfg);

struct StepStats {
  int step = 0;
  double l_disp = 0, l_rpn = 0, l_header = 0, total = 0;
  int rpn_positives = 0, header_rois = 0;
};

// One optimizer step on a random supervised crop of the scene.
StepStats train_step(Model& m, const io::LoadedScene& scene, core::Rng& rng);

// Full loop per cfg.optimizer: seeded scene/crop sampling, optional
// append-only loss table.
std::vector<StepStats> train(Model& m,
                             const std::vector<io::LoadedScene>& scenes,
                             const std::string& loss_table_path = "");

struct SceneInference {
  core::Tensor<float> disp;                   // [H,W]
  std::vector<detect::ObjectBox> detections;  // post-NMS, confidence order
};

SceneInference infer_scene(const Model& m, const io::LoadedScene& scene,
                           bool with_detection);

// Pixel-pooled disparity/depth errors and dataset-level AP.
struct DatasetEval {
  std::size_t pixels = 0;
  double disp_rmse = 0;  // pixels
  disparity::DepthMetrics depth;
  detect::ApResult ap_bev, ap_3d;
  std::size_t detections = 0;
};

DatasetEval evaluate(const Model& m, const std::vector<io::LoadedScene>& scenes,
                     bool with_detection);

// Pixels that carry matching supervision: a surface is present and visible
// in both views.
std::vector<std::uint8_t> supervised_mask(const std::vector<float>& gt_disp,
                                          const std::vector<std::uint8_t>& occ);

// In-memory adapter so synthetic scenes can train or evaluate without a
// file round trip.
io::LoadedScene to_loaded(const synth::RenderedScene& s,
                          const core::Camera& cam);

}  // namespace voxmatch::pipeline
