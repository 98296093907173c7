#include "voxmatch/detect/boxes.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <stdexcept>

namespace voxmatch::detect {
namespace {

using Pt = std::array<double, 2>;

double cross(const Pt& o, const Pt& a, const Pt& b) {
  return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
}

// Clips a convex polygon against one directed edge, keeping the left side.
std::vector<Pt> clip_edge(const std::vector<Pt>& poly, const Pt& a,
                          const Pt& b) {
  std::vector<Pt> out;
  out.reserve(poly.size() + 1);
  const std::size_t n = poly.size();
  for (std::size_t i = 0; i < n; ++i) {
    const Pt& p = poly[i];
    const Pt& q = poly[(i + 1) % n];
    const double sp = cross(a, b, p);
    const double sq = cross(a, b, q);
    if (sp >= 0) out.push_back(p);
    if ((sp > 0 && sq < 0) || (sp < 0 && sq > 0)) {
      const double t = sp / (sp - sq);
      out.push_back({p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])});
    }
  }
  return out;
}

double shoelace(const std::vector<Pt>& poly) {
  if (poly.size() < 3) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < poly.size(); ++i) {
    const Pt& p = poly[i];
    const Pt& q = poly[(i + 1) % poly.size()];
    s += p[0] * q[1] - q[0] * p[1];
  }
  return 0.5 * s;
}

double footprint_intersection(const ObjectBox& a, const ObjectBox& b) {
  const auto fa = footprint(a);
  const auto fb = footprint(b);
  std::vector<Pt> poly(fa.begin(), fa.end());
  for (int i = 0; i < 4 && !poly.empty(); ++i)
    poly = clip_edge(poly, fb[i], fb[(i + 1) % 4]);
  return shoelace(poly);
}

bool degenerate_footprint(const ObjectBox& b) {
  return !(b.w > 0) || !(b.l > 0) || !std::isfinite(b.x) ||
         !std::isfinite(b.z) || !std::isfinite(b.yaw);
}

}  // namespace

std::array<Pt, 4> footprint(const ObjectBox& b) {
  const double c = std::cos(b.yaw), s = std::sin(b.yaw);
  const double hx = 0.5 * b.w, hz = 0.5 * b.l;
  std::array<Pt, 4> out;
  const double dx[4] = {-hx, hx, hx, -hx};
  const double dz[4] = {-hz, -hz, hz, hz};
  for (int i = 0; i < 4; ++i)
    out[i] = {b.x + dx[i] * c + dz[i] * s, b.z - dx[i] * s + dz[i] * c};
  return out;
}

double bev_iou(const ObjectBox& a, const ObjectBox& b) {
  if (degenerate_footprint(a) || degenerate_footprint(b)) return 0.0;
  const double inter = footprint_intersection(a, b);
  if (!(inter > 0)) return 0.0;
  const double uni = a.w * a.l + b.w * b.l - inter;
  if (!(uni > 0)) return 0.0;
  return std::clamp(inter / uni, 0.0, 1.0);
}

double iou_3d(const ObjectBox& a, const ObjectBox& b) {
  if (degenerate_footprint(a) || degenerate_footprint(b) || !(a.h > 0) ||
      !(b.h > 0))
    return 0.0;
  const double oy = std::min(a.y + 0.5 * a.h, b.y + 0.5 * b.h) -
                    std::max(a.y - 0.5 * a.h, b.y - 0.5 * b.h);
  if (!(oy > 0)) return 0.0;
  const double inter = footprint_intersection(a, b) * oy;
  if (!(inter > 0)) return 0.0;
  const double uni = a.w * a.h * a.l + b.w * b.h * b.l - inter;
  if (!(uni > 0)) return 0.0;
  return std::clamp(inter / uni, 0.0, 1.0);
}

std::vector<ObjectBox> nms(const std::vector<ObjectBox>& boxes, double thr) {
  std::vector<std::size_t> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t i, std::size_t j) {
                     return boxes[i].conf > boxes[j].conf;
                   });
  std::vector<ObjectBox> kept;
  for (std::size_t idx : order) {
    bool ok = true;
    for (const auto& k : kept)
      if (bev_iou(boxes[idx], k) > thr) {
        ok = false;
        break;
      }
    if (ok) kept.push_back(boxes[idx]);
  }
  return kept;
}

ApResult average_precision(const std::vector<ObjectBox>& detections,
                           const std::vector<LabeledBox>& labels,
                           double iou_thr, bool bev) {
  return average_precision(std::vector<std::vector<ObjectBox>>{detections},
                           std::vector<std::vector<LabeledBox>>{labels},
                           iou_thr, bev);
}

ApResult average_precision(
    const std::vector<std::vector<ObjectBox>>& detections,
    const std::vector<std::vector<LabeledBox>>& labels, double iou_thr,
    bool bev) {
  if (detections.size() != labels.size())
    throw std::invalid_argument(
        "average_precision: detection and label scene counts differ");

  struct Ref {
    std::size_t scene, idx;
  };
  std::vector<Ref> order;
  for (std::size_t s = 0; s < detections.size(); ++s)
    for (std::size_t i = 0; i < detections[s].size(); ++i)
      order.push_back({s, i});
  std::stable_sort(order.begin(), order.end(), [&](const Ref& a, const Ref& b) {
    return detections[a.scene][a.idx].conf > detections[b.scene][b.idx].conf;
  });

  auto measure = [&](const ObjectBox& a, const ObjectBox& b) {
    return bev ? bev_iou(a, b) : iou_3d(a, b);
  };

  auto tier_ap = [&](int tier) -> std::optional<double> {
    int total = 0;
    for (const auto& scene : labels)
      for (const auto& lb : scene)
        if (static_cast<int>(lb.difficulty) <= tier) ++total;
    if (total == 0) return std::nullopt;

    std::vector<std::vector<char>> matched;
    for (const auto& scene : labels) matched.emplace_back(scene.size(), 0);
    std::vector<char> is_tp;  // ranking after dropping ignored matches
    is_tp.reserve(order.size());
    for (const Ref& r : order) {
      const auto& det = detections[r.scene][r.idx];
      const auto& gts = labels[r.scene];
      int best = -1;
      double best_iou = iou_thr;
      int best_ign = -1;
      double best_ign_iou = iou_thr;
      for (std::size_t j = 0; j < gts.size(); ++j) {
        if (matched[r.scene][j]) continue;
        const double v = measure(det, gts[j].box);
        const bool counted = static_cast<int>(gts[j].difficulty) <= tier;
        if (counted && v >= best_iou) {
          best_iou = v;
          best = static_cast<int>(j);
        } else if (!counted && v >= best_ign_iou) {
          best_ign_iou = v;
          best_ign = static_cast<int>(j);
        }
      }
      if (best >= 0) {
        matched[r.scene][std::size_t(best)] = 1;
        is_tp.push_back(1);
      } else if (best_ign >= 0) {
        matched[r.scene][std::size_t(best_ign)] = 1;  // absorbed, not ranked
      } else {
        is_tp.push_back(0);
      }
    }

    std::vector<double> precision, recall;
    int tp = 0, fp = 0;
    for (char t : is_tp) {
      t ? ++tp : ++fp;
      precision.push_back(double(tp) / double(tp + fp));
      recall.push_back(double(tp) / double(total));
    }
    double ap = 0.0;
    for (int k = 0; k <= 10; ++k) {
      const double r = k / 10.0;
      double p = 0.0;
      for (std::size_t i = 0; i < recall.size(); ++i)
        if (recall[i] >= r) p = std::max(p, precision[i]);
      ap += p;
    }
    return ap / 11.0;
  };

  ApResult res;
  res.easy = tier_ap(0);
  res.moderate = tier_ap(1);
  res.hard = tier_ap(2);
  return res;
}

double total_loss(double l_disp, double l_rpn, double l_header) {
  if (!std::isfinite(l_disp))
    throw std::invalid_argument("total_loss: disparity term not finite");
  if (!std::isfinite(l_rpn))
    throw std::invalid_argument("total_loss: rpn term not finite");
  if (!std::isfinite(l_header))
    throw std::invalid_argument("total_loss: header term not finite");
  return l_disp + l_rpn + 2.0 * l_header;
}

std::string format_detection_row(const ObjectBox& b) {
  // KITTI-style row; the location is the bottom center of the box, so the
  // vertical center moves down by half the height on the way out.
  char buf[320];
  std::snprintf(buf, sizeof(buf),
                "Object 0.00 0 -10.00 -1.00 -1.00 -1.00 -1.00 "
                "%.6f %.6f %.6f %.6f %.6f %.6f %.6f %.6f",
                b.h, b.w, b.l, b.x, b.y + 0.5 * b.h, b.z, b.yaw, b.conf);
  return std::string(buf);
}

}  // namespace voxmatch::detect
