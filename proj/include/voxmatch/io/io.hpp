#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "voxmatch/core/camera.hpp"
#include "voxmatch/detect/boxes.hpp"
#include "voxmatch/synth/synth.hpp"

// File formats and configuration. Everything here is deterministic plumbing:
// write->read round-trips are bit-exact for PFM and lossless for the config,
// and every error message names the offending path (and byte offset for
// binary formats).
namespace voxmatch::io {

// ---------------------------------------------------------------------------
// PFM, grayscale ("Pf") only. The scale's sign encodes payload endianness
// (negative = little-endian); rows are stored bottom-to-top. In-memory
// layout is row-major, top row first.

struct PfmImage {
  int height = 0, width = 0;
  std::vector<float> data;

  std::size_t at(int v, int u) const {
    return std::size_t(v) * std::size_t(width) + std::size_t(u);
  }
};

void write_pfm(const std::string& path, const std::vector<float>& data,
               int height, int width);
PfmImage read_pfm(const std::string& path);

// ---------------------------------------------------------------------------
// Binary PGM (P5), 8-bit. Intensities map [0,1] <-> [0,maxval].

void write_pgm(const std::string& path, const std::vector<float>& data,
               int height, int width);
PfmImage read_pgm(const std::string& path);

// ---------------------------------------------------------------------------
// Calibration text: "P2:" / "P3:" lines each followed by a 3x4 projection,
// row-major. The left camera is P2; the baseline comes from the tx offsets.

struct CalibInfo {
  std::array<double, 12> p2{}, p3{};
  double f = 0, cu = 0, cv = 0, b = 0;

  core::Camera camera() const { return core::Camera{f, cu, cv, b}; }
};

CalibInfo read_calib(const std::string& path);
void write_calib(const std::string& path, const core::Camera& cam);

// ---------------------------------------------------------------------------
// Label / detection rows, one object per line:
//   Object trunc occ alpha x1 y1 x2 y2 h w l x y z yaw [score]
// Ground-truth rows carry the difficulty bin in the occlusion slot and no
// score; detection rows end with the confidence. The stored y is the box
// bottom (KITTI convention); ObjectBox.y is the center.

void write_labels(const std::string& path,
                  const std::vector<detect::LabeledBox>& labels);
std::vector<detect::LabeledBox> read_labels(const std::string& path);

void write_detections(const std::string& path,
                      const std::vector<detect::ObjectBox>& dets);
std::vector<detect::ObjectBox> read_detections(const std::string& path);

// ---------------------------------------------------------------------------
// Dataset layout: <root>/scenes/<id>/{left.pgm,right.pgm,disp.pfm,occ.pgm,
// calib.txt,labels.txt}.

std::string scene_dir(const std::string& root, int index);

struct LoadedScene {
  int height = 0, width = 0;
  std::vector<float> left, right, gt_disp;
  std::vector<std::uint8_t> occlusion;
  std::vector<detect::LabeledBox> labels;
  core::Camera cam;

  std::size_t at(int v, int u) const {
    return std::size_t(v) * std::size_t(width) + std::size_t(u);
  }
};

void write_scene(const std::string& dir, const synth::RenderedScene& scene,
                 const core::Camera& cam);
LoadedScene read_scene(const std::string& dir);
std::vector<std::string> list_scene_dirs(const std::string& root);

// ---------------------------------------------------------------------------
// Pipeline configuration. JSON on disk with a stable key schema; missing
// keys take the defaults below, unknown keys are rejected so typos cannot
// silently fall back. Flag combinations cover the ablation grid: which
// detection stages run, how the sampled RoI is fused with the disparity
// map, and which volume the detection heads read.

enum class Fusion { kNone, k2d, k3d };
enum class InputVolume { kCostV, kCostA };

struct AblationFlags {
  bool rpn_on = false;
  bool header_on = false;
  bool deep_sample_on = false;
  bool selective_on = false;
  Fusion fusion = Fusion::kNone;
  InputVolume input_volume = InputVolume::kCostV;

  bool operator==(const AblationFlags&) const = default;
};

// Preset methods 1..9: 1 is the disparity-only baseline, 2-5 add rpn,
// header, deep sampling, and selective masking cumulatively (5 = full
// model), 6-9 keep all four stages and vary the fused input: 6 = refined
// volume without fusion, 7 = aggregated volume, 8 = 2D fusion (disparity
// patch stacked along d), 9 = 3D occupancy fusion (identical to 5).
AblationFlags method_flags(int method);

struct OptimizerConfig {
  double lr = 1e-3;
  double beta1 = 0.9, beta2 = 0.999;
  double eps = 1e-8;
  int steps = 600;
  int crop_height = 32, crop_width = 64;
  std::uint64_t seed = 1;

  bool operator==(const OptimizerConfig&) const = default;
};

struct PipelineConfig {
  int d_max = 48;
  int feature_channels = 16;
  int refine_channels = 32;
  int roi_grid = 16;
  double selective_margin = 3.0;
  int anchor_stride = 8;
  std::vector<std::array<double, 3>> anchor_extents{{32.0, 24.0, 8.0}};
  double w_disparity = 1.0, w_rpn = 1.0, w_header = 2.0;
  OptimizerConfig optimizer;
  AblationFlags ablation;

  void validate() const;
  bool operator==(const PipelineConfig&) const = default;
};

std::string dump_config(const PipelineConfig& cfg);
PipelineConfig parse_config(const std::string& text);
void save_config(const std::string& path, const PipelineConfig& cfg);
PipelineConfig load_config(const std::string& path);

// ---------------------------------------------------------------------------
// Append-only loss table; a header line is written when the file is new.

void append_loss_row(const std::string& path, int step, double l_disp,
                     double l_rpn, double l_header, double total);

}  // namespace voxmatch::io
