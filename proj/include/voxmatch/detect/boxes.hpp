#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "voxmatch/core/camera.hpp"

namespace voxmatch::detect {

// Oriented box in camera coordinates: x right, y down, z forward. (x,y,z)
// is the box center, (w,h,l) the full widths along the box axes (w across,
// h vertical, l along heading), yaw the rotation about the vertical axis
// with 0 facing +z, normalized to (-pi, pi].
struct ObjectBox {
  double x = 0, y = 0, z = 0;
  double w = 0, h = 0, l = 0;
  double yaw = 0;
  double conf = 0;
};

// Footprint corners on the ground plane (x,z), counter-clockwise.
std::array<std::array<double, 2>, 4> footprint(const ObjectBox& b);

// Overlap of the yawed footprints via convex polygon clipping. Boxes with a
// non-positive footprint give 0.
double bev_iou(const ObjectBox& a, const ObjectBox& b);

// Footprint overlap times vertical extent overlap, over the union volume.
double iou_3d(const ObjectBox& a, const ObjectBox& b);

// Greedy suppression in confidence order; ties keep the earlier input. Every
// kept box has bev_iou <= thr with all higher-confidence kept boxes.
std::vector<ObjectBox> nms(const std::vector<ObjectBox>& boxes, double thr);

enum class Difficulty { kEasy = 0, kModerate = 1, kHard = 2 };

struct LabeledBox {
  ObjectBox box;
  Difficulty difficulty = Difficulty::kEasy;
};

// Eleven-point interpolated average precision at one IoU threshold, per
// difficulty tier. A tier evaluates boxes at or below its difficulty;
// harder boxes are ignorable: detections matched to them are dropped from
// the ranking instead of counting either way. Tiers with no evaluated box
// report no score at all.
struct ApResult {
  std::optional<double> easy, moderate, hard;
};
ApResult average_precision(const std::vector<ObjectBox>& detections,
                           const std::vector<LabeledBox>& labels,
                           double iou_thr = 0.7, bool bev = true);

// Multi-scene variant: detections rank globally by confidence but can only
// match ground truth from their own scene. Group i of each list is scene i.
ApResult average_precision(
    const std::vector<std::vector<ObjectBox>>& detections,
    const std::vector<std::vector<LabeledBox>>& labels, double iou_thr = 0.7,
    bool bev = true);

// Weighted sum of the three training terms; the box head counts double.
// Any non-finite part is rejected by name.
double total_loss(double l_disp, double l_rpn, double l_header);

// One detection as a KITTI-style label row. Volume-side fields that this
// pipeline does not estimate (truncation, occlusion, alpha, 2D box) are
// emitted as the conventional placeholders.
std::string format_detection_row(const ObjectBox& b);

}  // namespace voxmatch::detect
