#include "voxmatch/pipeline/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <stdexcept>

#include "voxmatch/detect/anchors.hpp"
#include "voxmatch/detect/heads.hpp"
#include "voxmatch/fusion/fusion.hpp"
#include "voxmatch/stereo/stereo.hpp"

namespace voxmatch::pipeline {
namespace {

constexpr int kEvalProposals = 16;   // RoIs the box head scores per scene
constexpr double kNmsIou = 0.5;      // BEV overlap for duplicate suppression
constexpr double kMinConf = 0.05;    // detections below this never surface
constexpr int kMaxMatchedRois = 2;   // per-step positive RoIs for the head
constexpr int kCropAttempts = 8;
constexpr std::size_t kMinCropValid = 64;

}  // namespace

roi::Roi3D project_box(const detect::ObjectBox& b, const core::Camera& cam) {
  const double cy = std::cos(b.yaw), sy = std::sin(b.yaw);
  roi::Roi3D r{1e30, 1e30, 1e30, -1e30, -1e30, -1e30};
  for (int i = 0; i < 8; ++i) {
    const double dx = (i & 1 ? 0.5 : -0.5) * b.w;
    const double dy = (i & 2 ? 0.5 : -0.5) * b.h;
    const double dz = (i & 4 ? 0.5 : -0.5) * b.l;
    const double wx = b.x + dx * cy + dz * sy;
    const double wz = b.z - dx * sy + dz * cy;
    if (!(wz > 1e-6))
      throw std::invalid_argument("project_box: corner behind the camera");
    const core::Vec3 p = core::metric_to_volume(wx, b.y + dy, wz, cam);
    r.u0 = std::min(r.u0, p.x);
    r.u1 = std::max(r.u1, p.x);
    r.v0 = std::min(r.v0, p.y);
    r.v1 = std::max(r.v1, p.y);
    r.d0 = std::min(r.d0, p.z);
    r.d1 = std::max(r.d1, p.z);
  }
  return r;
}

Model make_model(const io::PipelineConfig& cfg) {
  cfg.validate();
  if (cfg.ablation.header_on && !cfg.ablation.rpn_on)
    throw std::invalid_argument(
        "make_model: header_on requires rpn_on, proposals feed the box head");
  if (cfg.ablation.rpn_on && cfg.d_max % 8 != 0)
    throw std::invalid_argument(
        "make_model: d_max must divide by 8 for the proposal trunk");
  if (cfg.ablation.header_on && cfg.roi_grid != detect::kHeaderCube)
    throw std::invalid_argument("make_model: the box head expects a " +
                                std::to_string(detect::kHeaderCube) +
                                "^3 RoI grid");

  Model m;
  m.cfg = cfg;
  // The stereo trunk draws first: models differing only in detection flags
  // share identical disparity weights under the same seed.
  core::Rng rng(core::hash_combine(cfg.optimizer.seed, 0x9a7a11));
  stereo::init_stereo_params(m.params, rng, {cfg.refine_channels});
  if (m.detection_on())
    detect::init_rpn_params(m.params, rng, m.det_channels(),
                            int(cfg.anchor_extents.size()));
  if (m.header_on()) detect::init_header_params(m.params, rng, m.header_channels());
  return m;
}

StereoNodes stereo_forward(core::Graph<float>& g, const core::ParamLeaves& p,
                           const Model& m, const std::vector<float>& left,
                           const std::vector<float>& right, int height,
                           int width) {
  if (left.size() != std::size_t(height) * std::size_t(width) ||
      right.size() != left.size())
    throw std::invalid_argument("stereo_forward: image sizes disagree");
  core::Tensor<float> li({1, height, width}, left);
  core::Tensor<float> ri({1, height, width}, right);
  const int fl = stereo::extract_features(g, g.constant(std::move(li)), p);
  const int fr = stereo::extract_features(g, g.constant(std::move(ri)), p);
  const int vol = stereo::build_cost_volume(g, fl, fr, m.cfg.d_max);

  StereoNodes out;
  out.refined = stereo::refine_volume(g, vol, p);
  out.scores = stereo::aggregate_volume(g, out.refined, p);
  out.disp = disparity::soft_argmax(g, out.scores);
  if (m.detection_on()) {
    if (m.cfg.ablation.input_volume == io::InputVolume::kCostA)
      out.det_input =
          g.reshape(out.scores, {1, m.cfg.d_max, height, width});
    else
      out.det_input = out.refined;
  }
  return out;
}

int apply_header(core::Graph<float>& g, const core::ParamLeaves& p,
                 const Model& m, const StereoNodes& nodes,
                 const core::Tensor<float>& disp_data,
                 const roi::Roi3D& box) {
  if (nodes.det_input < 0)
    throw std::invalid_argument("apply_header: detection volume missing");
  const auto& abl = m.cfg.ablation;
  const roi::SampleMode mode =
      abl.selective_on ? roi::SampleMode::kSelective
      : abl.deep_sample_on ? roi::SampleMode::kDeep
                           : roi::SampleMode::kTrilinear;
  roi::SampledRoi sampled =
      roi::roi_select(g, nodes.det_input, box, &disp_data, mode,
                      m.cfg.roi_grid, m.cfg.selective_margin);
  int fused = sampled.node;
  switch (abl.fusion) {
    case io::Fusion::kNone:
      break;
    case io::Fusion::k2d: {
      fusion::Roi2D patch =
          fusion::extract_roi2d(g, nodes.disp, box, m.cfg.roi_grid);
      fused = fusion::fuse_stacked(g, sampled, patch);
      break;
    }
    case io::Fusion::k3d: {
      fusion::Roi2D patch =
          fusion::extract_roi2d(g, nodes.disp, box, m.cfg.roi_grid);
      const auto& pv = g.value(patch.node);
      std::vector<double> vals(pv.begin(), pv.end());
      fused = fusion::fuse(g, sampled,
                           fusion::back_project(vals, box, m.cfg.roi_grid));
      break;
    }
  }
  return detect::header_forward(g, fused, p);
}

std::vector<std::uint8_t> supervised_mask(const std::vector<float>& gt_disp,
                                          const std::vector<std::uint8_t>& occ) {
  if (gt_disp.size() != occ.size())
    throw std::invalid_argument("supervised_mask: sizes disagree");
  std::vector<std::uint8_t> valid(gt_disp.size(), 0);
  for (std::size_t i = 0; i < gt_disp.size(); ++i)
    valid[i] = (gt_disp[i] > 0.0f && !occ[i]) ? 1 : 0;
  return valid;
}

io::LoadedScene to_loaded(const synth::RenderedScene& s,
                          const core::Camera& cam) {
  io::LoadedScene out;
  out.height = s.height;
  out.width = s.width;
  out.left = s.left;
  out.right = s.right;
  out.gt_disp = s.gt_disp;
  out.occlusion = s.occlusion;
  out.labels = s.labels;
  out.cam = cam;
  return out;
}

namespace {

struct Crop {
  int v0 = 0, u0 = 0, h = 0, w = 0;
  std::vector<float> left, right, disp;
  std::vector<std::uint8_t> valid;
  std::size_t valid_count = 0;
};

// Windows are biased toward labeled boxes, which carry most of the scene
// structure. A pixel is supervised only if its match column lies inside the
// crop: the cost volume treats the crop edge exactly like an image edge.
Crop make_crop(const io::LoadedScene& s, int ch, int cw, core::Rng& rng) {
  Crop best;
  for (int attempt = 0; attempt < kCropAttempts; ++attempt) {
    int u0, v0;
    if (!s.labels.empty() && rng.uniform() < 0.7) {
      const auto& lb = s.labels[rng.below(s.labels.size())];
      const core::Vec3 c =
          core::metric_to_volume(lb.box.x, lb.box.y, lb.box.z, s.cam);
      u0 = int(std::lround(c.x)) - cw / 2 + int(rng.below(std::uint64_t(cw / 2 + 1))) - cw / 4;
      v0 = int(std::lround(c.y)) - ch / 2 + int(rng.below(std::uint64_t(ch / 2 + 1))) - ch / 4;
    } else {
      u0 = int(rng.below(std::uint64_t(s.width - cw + 1)));
      v0 = int(rng.below(std::uint64_t(s.height - ch + 1)));
    }
    Crop c;
    c.u0 = std::clamp(u0, 0, s.width - cw);
    c.v0 = std::clamp(v0, 0, s.height - ch);
    c.h = ch;
    c.w = cw;
    const std::size_t n = std::size_t(ch) * std::size_t(cw);
    c.left.resize(n);
    c.right.resize(n);
    c.disp.resize(n);
    c.valid.assign(n, 0);
    for (int v = 0; v < ch; ++v)
      for (int u = 0; u < cw; ++u) {
        const std::size_t src = s.at(c.v0 + v, c.u0 + u);
        const std::size_t dst = std::size_t(v) * std::size_t(cw) + u;
        c.left[dst] = s.left[src];
        c.right[dst] = s.right[src];
        const float d = s.gt_disp[src];
        c.disp[dst] = d;
        if (d > 0.0f && !s.occlusion[src] && double(u) - double(d) >= -0.5) {
          c.valid[dst] = 1;
          ++c.valid_count;
        }
      }
    if (c.valid_count >= kMinCropValid) return c;
    if (c.valid_count > best.valid_count) best = std::move(c);
  }
  if (best.valid_count == 0)
    throw std::runtime_error("train_step: no supervised pixels in any crop");
  return best;
}

roi::Roi3D jitter_roi(const roi::Roi3D& r, core::Rng& rng) {
  auto axis = [&rng](double lo, double hi, double& o0, double& o1) {
    const double e = hi - lo, c = 0.5 * (lo + hi);
    const double scale = 0.9 + 0.25 * rng.uniform();
    const double shift = (rng.uniform() - 0.5) * 0.2 * e;
    o0 = c + shift - 0.5 * e * scale;
    o1 = c + shift + 0.5 * e * scale;
  };
  roi::Roi3D out;
  axis(r.u0, r.u1, out.u0, out.u1);
  axis(r.v0, r.v1, out.v0, out.v1);
  axis(r.d0, r.d1, out.d0, out.d1);
  return out;
}

std::optional<roi::Roi3D> negative_roi(const std::vector<roi::Roi3D>& gts,
                                       int d, int h, int w,
                                       const std::array<double, 3>& ext,
                                       core::Rng& rng) {
  for (int attempt = 0; attempt < 8; ++attempt) {
    const double cu = rng.uniform() * w;
    const double cv = rng.uniform() * h;
    const double cd = rng.uniform() * d;
    roi::Roi3D r{cu - 0.5 * ext[0], cv - 0.5 * ext[1], cd - 0.5 * ext[2],
                 cu + 0.5 * ext[0], cv + 0.5 * ext[1], cd + 0.5 * ext[2]};
    bool clear = true;
    for (const auto& gt : gts)
      if (detect::iou_aligned(r, gt) >= 0.3) {
        clear = false;
        break;
      }
    if (clear) return r;
  }
  return std::nullopt;
}

int scalar_const(core::Graph<float>& g, double v) {
  return g.constant(core::Tensor<float>::scalar(float(v)));
}

}  // namespace

int weighted_total(core::Graph<float>& g, int l_disp, int l_rpn, int l_header,
                   const io::PipelineConfig& cfg) {
  return g.add(g.add(g.mul(l_disp, scalar_const(g, cfg.w_disparity)),
                     g.mul(l_rpn, scalar_const(g, cfg.w_rpn))),
               g.mul(l_header, scalar_const(g, cfg.w_header)));
}

StepStats train_step(Model& m, const io::LoadedScene& scene, core::Rng& rng) {
  const auto& cfg = m.cfg;
  const int ch = std::min(cfg.optimizer.crop_height, scene.height);
  const int cw = std::min(cfg.optimizer.crop_width, scene.width);
  if (m.detection_on() && (ch % 8 != 0 || cw % 8 != 0))
    throw std::invalid_argument(
        "train_step: crop dimensions must divide by 8 for the proposal trunk");
  Crop crop = make_crop(scene, ch, cw, rng);

  core::Graph<float> g;
  core::ParamLeaves leaves = core::make_param_leaves(g, m.params, true);
  StereoNodes nodes =
      stereo_forward(g, leaves, m, crop.left, crop.right, ch, cw);

  core::Tensor<float> gt({ch, cw}, crop.disp);
  const int l_disp = disparity::disparity_loss(
      g, nodes.disp, g.constant(std::move(gt)), crop.valid);

  StepStats st;
  int l_rpn = -1, l_header = -1;
  if (m.detection_on()) {
    std::vector<roi::Roi3D> gt_rois;
    std::vector<const detect::LabeledBox*> gt_boxes;
    for (const auto& lb : scene.labels) {
      roi::Roi3D r;
      try {
        r = project_box(lb.box, scene.cam);
      } catch (const std::invalid_argument&) {
        continue;
      }
      r.u0 -= crop.u0;
      r.u1 -= crop.u0;
      r.v0 -= crop.v0;
      r.v1 -= crop.v0;
      gt_rois.push_back(r);
      gt_boxes.push_back(&lb);
    }

    detect::RpnOut rpn = detect::rpn_forward(g, nodes.det_input, leaves);
    std::vector<detect::Anchor> anchors = detect::generate_anchors(
        cfg.d_max, ch, cw, cfg.anchor_stride, cfg.anchor_extents);
    detect::AnchorAssignment asg = detect::assign_anchors(anchors, gt_rois);
    detect::subsample_negatives(asg, rng);
    detect::RpnTargets<float> targets =
        detect::build_rpn_targets<float>(asg, anchors, gt_rois, rpn);
    l_rpn = detect::rpn_loss(g, rpn, targets);
    st.rpn_positives = asg.positives;

    if (m.header_on()) {
      core::Tensor<float> disp_data({ch, cw}, g.value(nodes.disp));
      std::vector<int> losses;
      int matched = 0;
      for (std::size_t i = 0;
           i < gt_rois.size() && matched < kMaxMatchedRois; ++i) {
        const auto& b = gt_boxes[i]->box;
        core::Vec3 c = core::metric_to_volume(b.x, b.y, b.z, scene.cam);
        c.x -= crop.u0;
        c.y -= crop.v0;
        if (!(c.x >= 0 && c.x < cw && c.y >= 0 && c.y < ch && c.z >= 0 &&
              c.z < cfg.d_max))
          continue;
        const roi::Roi3D r = jitter_roi(gt_rois[i], rng);
        const detect::HeaderTarget t = detect::make_header_target(r, c, b);
        const int pred = apply_header(g, leaves, m, nodes, disp_data, r);
        losses.push_back(detect::header_loss(g, pred, t));
        ++matched;
      }
      if (auto neg = negative_roi(gt_rois, cfg.d_max, ch, cw,
                                  cfg.anchor_extents[0], rng)) {
        const int pred = apply_header(g, leaves, m, nodes, disp_data, *neg);
        losses.push_back(detect::header_loss(g, pred, detect::HeaderTarget{}));
      }
      if (!losses.empty()) {
        int acc = losses[0];
        for (std::size_t i = 1; i < losses.size(); ++i)
          acc = g.add(acc, losses[i]);
        if (losses.size() > 1)
          acc = g.mul(acc, scalar_const(g, 1.0 / double(losses.size())));
        l_header = acc;
        st.header_rois = int(losses.size());
      }
    }
  }

  const int zero = scalar_const(g, 0.0);
  if (l_rpn < 0) l_rpn = zero;
  if (l_header < 0) l_header = zero;
  const int total = weighted_total(g, l_disp, l_rpn, l_header, cfg);

  st.l_disp = double(g.scalar(l_disp));
  st.l_rpn = double(g.scalar(l_rpn));
  st.l_header = double(g.scalar(l_header));
  st.total = double(g.scalar(total));
  if (!std::isfinite(st.total))
    throw std::runtime_error("train_step: non-finite loss");

  g.backward(total);
  std::vector<std::vector<float>> scratch;
  core::AdamConfig adam{cfg.optimizer.lr, cfg.optimizer.beta1,
                        cfg.optimizer.beta2, cfg.optimizer.eps};
  m.params.adam_step(core::collect_grads(g, leaves, scratch), adam);
  return st;
}

std::vector<StepStats> train(Model& m,
                             const std::vector<io::LoadedScene>& scenes,
                             const std::string& loss_table_path) {
  if (scenes.empty()) throw std::invalid_argument("train: no scenes");
  core::Rng rng(m.cfg.optimizer.seed);
  std::vector<StepStats> stats;
  stats.reserve(std::size_t(m.cfg.optimizer.steps));
  for (int step = 0; step < m.cfg.optimizer.steps; ++step) {
    const auto& scene = scenes[rng.below(scenes.size())];
    StepStats st = train_step(m, scene, rng);
    st.step = step;
    if (!loss_table_path.empty())
      io::append_loss_row(loss_table_path, step, st.l_disp, st.l_rpn,
                          st.l_header, st.total);
    stats.push_back(st);
  }
  return stats;
}

SceneInference infer_scene(const Model& m, const io::LoadedScene& scene,
                           bool with_detection) {
  core::Graph<float> g;
  core::ParamLeaves leaves = core::make_param_leaves(g, m.params, false);
  StereoNodes nodes = stereo_forward(g, leaves, m, scene.left, scene.right,
                                     scene.height, scene.width);
  SceneInference out;
  out.disp = core::Tensor<float>({scene.height, scene.width},
                                 g.value(nodes.disp));

  if (!with_detection || !m.header_on()) return out;

  detect::RpnOut rpn = detect::rpn_forward(g, nodes.det_input, leaves);
  std::vector<detect::Anchor> anchors =
      detect::generate_anchors(m.cfg.d_max, scene.height, scene.width,
                               m.cfg.anchor_stride, m.cfg.anchor_extents);
  std::vector<detect::ScoredRoi> proposals =
      detect::top_rois(g, rpn, anchors, kEvalProposals);

  core::Tensor<float> disp_data = out.disp;
  std::vector<detect::ObjectBox> cands;
  for (const auto& prop : proposals) {
    std::array<double, detect::kHeaderOutputs> vals{};
    try {
      const int pred =
          apply_header(g, leaves, m, nodes, disp_data, prop.box);
      const auto& pv = g.value(pred);
      for (int i = 0; i < detect::kHeaderOutputs; ++i)
        vals[std::size_t(i)] = double(pv[std::size_t(i)]);
    } catch (const std::invalid_argument&) {
      continue;  // degenerate or fully off-image proposal
    }
    auto box = detect::decode_header_box(vals, prop.box, scene.cam);
    if (box && box->conf >= kMinConf) cands.push_back(*box);
  }
  out.detections = detect::nms(cands, kNmsIou);
  return out;
}

DatasetEval evaluate(const Model& m, const std::vector<io::LoadedScene>& scenes,
                     bool with_detection) {
  DatasetEval ev;
  const bool det = with_detection && m.header_on();
  double sum_sq_disp = 0, sum_abs_rel = 0, sum_sq_rel = 0, sum_sq_z = 0;
  std::vector<std::vector<detect::ObjectBox>> det_groups;
  std::vector<std::vector<detect::LabeledBox>> label_groups;

  for (const auto& scene : scenes) {
    SceneInference inf = infer_scene(m, scene, det);
    const std::vector<std::uint8_t> valid =
        supervised_mask(scene.gt_disp, scene.occlusion);
    core::Tensor<float> gt({scene.height, scene.width}, scene.gt_disp);
    const disparity::DepthMap pred_z = disparity::disparity_to_depth(
        inf.disp, valid, scene.cam.f, scene.cam.b);
    const disparity::DepthMap gt_z = disparity::disparity_to_depth(
        gt, valid, scene.cam.f, scene.cam.b);
    for (std::size_t i = 0; i < valid.size(); ++i) {
      if (!pred_z.valid[i] || !gt_z.valid[i]) continue;
      const double de = double(inf.disp.data[i]) - double(scene.gt_disp[i]);
      sum_sq_disp += de * de;
      const double dz = pred_z.z[i] - gt_z.z[i];
      sum_abs_rel += std::abs(dz) / gt_z.z[i];
      sum_sq_rel += dz * dz / gt_z.z[i];
      sum_sq_z += dz * dz;
      ++ev.pixels;
    }
    if (det) {
      det_groups.push_back(inf.detections);
      label_groups.push_back(scene.labels);
      ev.detections += inf.detections.size();
    }
  }

  if (ev.pixels > 0) {
    const double n = double(ev.pixels);
    ev.disp_rmse = std::sqrt(sum_sq_disp / n);
    ev.depth.abs_rel = sum_abs_rel / n;
    ev.depth.sq_rel = sum_sq_rel / n;
    ev.depth.rmse = std::sqrt(sum_sq_z / n);
    ev.depth.count = ev.pixels;
  }
  if (det) {
    ev.ap_bev = detect::average_precision(det_groups, label_groups, 0.7, true);
    ev.ap_3d = detect::average_precision(det_groups, label_groups, 0.7, false);
  }
  return ev;
}

}  // namespace voxmatch::pipeline
