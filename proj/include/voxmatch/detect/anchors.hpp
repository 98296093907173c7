#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "voxmatch/core/rng.hpp"
#include "voxmatch/roi/roi.hpp"

namespace voxmatch::detect {

// Axis-aligned template box in volume coordinates. Extents are full widths.
struct Anchor {
  double cu = 0, cv = 0, cd = 0;  // center
  double eu = 0, ev = 0, ed = 0;  // extent along u, v, d

  roi::Roi3D box() const {
    return {cu - 0.5 * eu, cv - 0.5 * ev, cd - 0.5 * ed,
            cu + 0.5 * eu, cv + 0.5 * ev, cd + 0.5 * ed};
  }
};

// One anchor per template per stride cell, centered on the cell. Order is
// d-major, then v, then u, then template, matching a [A, D/s, H/s, W/s]
// head read back in anchor-major order per position. The stride must divide
// every volume extent and at least one template is required.
std::vector<Anchor> generate_anchors(
    int d, int h, int w, int stride,
    const std::vector<std::array<double, 3>>& extents_uvd);

// Overlap of two axis-aligned boxes. Degenerate boxes give 0.
double iou_aligned(const roi::Roi3D& a, const roi::Roi3D& b);

// Per-anchor label: a ground-truth index, or one of the sentinels below.
struct AnchorAssignment {
  static constexpr int kNegative = -1;
  static constexpr int kIgnore = -2;
  std::vector<int> target;
  int positives = 0;
  int negatives = 0;
};

// IoU >= pos_thr claims the best-overlapping box; IoU < neg_thr is
// background; the band between is ignored. Every ground-truth box is
// force-matched to its best anchor so no box goes unsupervised, even when
// all its overlaps sit below pos_thr.
AnchorAssignment assign_anchors(const std::vector<Anchor>& anchors,
                                const std::vector<roi::Roi3D>& gts,
                                double pos_thr = 0.5, double neg_thr = 0.3);

// Rewrites surplus negatives to ignore so positives:negatives stays near
// 1:ratio, keeping at least min_neg. Selection is seeded and order-stable.
void subsample_negatives(AnchorAssignment& asg, core::Rng& rng,
                         int ratio = 3, int min_neg = 32);

// Center-size offsets: centers shifted in units of the anchor extent, sizes
// as log ratios. decode(encode(gt)) reproduces gt; exp keeps sizes positive.
std::array<double, 6> encode_box(const Anchor& anchor, const roi::Roi3D& gt);
roi::Roi3D decode_box(const Anchor& anchor, const std::array<double, 6>& off);

}  // namespace voxmatch::detect
