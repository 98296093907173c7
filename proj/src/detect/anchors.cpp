#include "voxmatch/detect/anchors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace voxmatch::detect {

std::vector<Anchor> generate_anchors(
    int d, int h, int w, int stride,
    const std::vector<std::array<double, 3>>& extents_uvd) {
  if (d <= 0 || h <= 0 || w <= 0)
    throw std::invalid_argument("generate_anchors: empty volume");
  if (stride <= 0 || d % stride != 0 || h % stride != 0 || w % stride != 0)
    throw std::invalid_argument(
        "generate_anchors: stride must divide volume extents");
  if (extents_uvd.empty())
    throw std::invalid_argument("generate_anchors: no box templates");
  for (const auto& e : extents_uvd)
    if (!(e[0] > 0) || !(e[1] > 0) || !(e[2] > 0))
      throw std::invalid_argument("generate_anchors: non-positive extent");

  const int nd = d / stride, nh = h / stride, nw = w / stride;
  const double half = 0.5 * (stride - 1);
  std::vector<Anchor> out;
  out.reserve(static_cast<std::size_t>(nd) * nh * nw * extents_uvd.size());
  for (int gd = 0; gd < nd; ++gd)
    for (int gv = 0; gv < nh; ++gv)
      for (int gu = 0; gu < nw; ++gu)
        for (const auto& e : extents_uvd) {
          Anchor a;
          a.cu = gu * stride + half;
          a.cv = gv * stride + half;
          a.cd = gd * stride + half;
          a.eu = e[0];
          a.ev = e[1];
          a.ed = e[2];
          out.push_back(a);
        }
  return out;
}

double iou_aligned(const roi::Roi3D& a, const roi::Roi3D& b) {
  const double va = a.du() * a.dv() * a.dd();
  const double vb = b.du() * b.dv() * b.dd();
  if (!(va > 0) || !(vb > 0)) return 0.0;
  const double iu = std::min(a.u1, b.u1) - std::max(a.u0, b.u0);
  const double iv = std::min(a.v1, b.v1) - std::max(a.v0, b.v0);
  const double id = std::min(a.d1, b.d1) - std::max(a.d0, b.d0);
  if (iu <= 0 || iv <= 0 || id <= 0) return 0.0;
  const double inter = iu * iv * id;
  return inter / (va + vb - inter);
}

AnchorAssignment assign_anchors(const std::vector<Anchor>& anchors,
                                const std::vector<roi::Roi3D>& gts,
                                double pos_thr, double neg_thr) {
  if (!(pos_thr >= neg_thr))
    throw std::invalid_argument("assign_anchors: pos_thr below neg_thr");
  const std::size_t n = anchors.size();
  const std::size_t m = gts.size();
  AnchorAssignment asg;
  asg.target.assign(n, AnchorAssignment::kNegative);

  std::vector<double> best_gt_iou(m, 0.0);
  std::vector<std::size_t> best_gt_anchor(m, 0);
  std::vector<double> anchor_iou(n, 0.0);

  for (std::size_t i = 0; i < n; ++i) {
    const roi::Roi3D abox = anchors[i].box();
    double best = 0.0;
    int hit = AnchorAssignment::kNegative;
    for (std::size_t j = 0; j < m; ++j) {
      const double v = iou_aligned(abox, gts[j]);
      if (v > best) {
        best = v;
        hit = static_cast<int>(j);
      }
      if (v > best_gt_iou[j]) {
        best_gt_iou[j] = v;
        best_gt_anchor[j] = i;
      }
    }
    anchor_iou[i] = best;
    if (best >= pos_thr)
      asg.target[i] = hit;
    else if (best >= neg_thr)
      asg.target[i] = AnchorAssignment::kIgnore;
  }

  // A box whose overlaps all fall short of pos_thr still claims its best
  // anchor, as long as it overlaps at all. Later boxes win exact ties.
  for (std::size_t j = 0; j < m; ++j) {
    if (best_gt_iou[j] <= 0.0 || best_gt_iou[j] >= pos_thr) continue;
    asg.target[best_gt_anchor[j]] = static_cast<int>(j);
  }

  for (int t : asg.target) {
    if (t >= 0)
      ++asg.positives;
    else if (t == AnchorAssignment::kNegative)
      ++asg.negatives;
  }
  return asg;
}

void subsample_negatives(AnchorAssignment& asg, core::Rng& rng, int ratio,
                         int min_neg) {
  const int keep_target =
      std::max(min_neg, ratio * std::max(asg.positives, 0));
  if (asg.negatives <= keep_target) return;

  std::vector<std::size_t> negs;
  negs.reserve(asg.negatives);
  for (std::size_t i = 0; i < asg.target.size(); ++i)
    if (asg.target[i] == AnchorAssignment::kNegative) negs.push_back(i);

  // Partial Fisher-Yates: the first keep_target slots become the kept set.
  for (int k = 0; k < keep_target; ++k) {
    const std::size_t pick =
        k + static_cast<std::size_t>(
                rng.below(static_cast<std::uint64_t>(negs.size() - k)));
    std::swap(negs[k], negs[pick]);
  }
  for (std::size_t k = keep_target; k < negs.size(); ++k)
    asg.target[negs[k]] = AnchorAssignment::kIgnore;
  asg.negatives = keep_target;
}

std::array<double, 6> encode_box(const Anchor& anchor,
                                 const roi::Roi3D& gt) {
  roi::validate_roi(gt);
  const double gcu = 0.5 * (gt.u0 + gt.u1);
  const double gcv = 0.5 * (gt.v0 + gt.v1);
  const double gcd = 0.5 * (gt.d0 + gt.d1);
  return {(gcu - anchor.cu) / anchor.eu, (gcv - anchor.cv) / anchor.ev,
          (gcd - anchor.cd) / anchor.ed, std::log(gt.du() / anchor.eu),
          std::log(gt.dv() / anchor.ev), std::log(gt.dd() / anchor.ed)};
}

roi::Roi3D decode_box(const Anchor& anchor,
                      const std::array<double, 6>& off) {
  const double cu = anchor.cu + off[0] * anchor.eu;
  const double cv = anchor.cv + off[1] * anchor.ev;
  const double cd = anchor.cd + off[2] * anchor.ed;
  const double eu = anchor.eu * std::exp(off[3]);
  const double ev = anchor.ev * std::exp(off[4]);
  const double ed = anchor.ed * std::exp(off[5]);
  return {cu - 0.5 * eu, cv - 0.5 * ev, cd - 0.5 * ed,
          cu + 0.5 * eu, cv + 0.5 * ev, cd + 0.5 * ed};
}

}  // namespace voxmatch::detect
