// Command-line surface: dataset synthesis, training, matching, metric
// reports, and the gradient audit. Every run with a fixed seed writes
// bit-identical artifacts.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "voxmatch/detect/boxes.hpp"
#include "voxmatch/disparity/disparity.hpp"
#include "voxmatch/io/io.hpp"
#include "voxmatch/pipeline/gradient_suite.hpp"
#include "voxmatch/pipeline/pipeline.hpp"
#include "voxmatch/synth/synth.hpp"

namespace fs = std::filesystem;
using namespace voxmatch;

namespace {

std::vector<io::LoadedScene> load_dataset(const std::string& root) {
  std::vector<io::LoadedScene> scenes;
  for (const auto& dir : io::list_scene_dirs(root))
    scenes.push_back(io::read_scene(dir));
  if (scenes.empty())
    throw std::runtime_error("no scenes under " + root);
  return scenes;
}

io::PipelineConfig resolve_config(const std::string& path, int method,
                                  int steps) {
  io::PipelineConfig cfg;
  if (!path.empty()) cfg = io::load_config(path);
  if (method != 0) cfg.ablation = io::method_flags(method);
  if (steps > 0) cfg.optimizer.steps = steps;
  cfg.validate();
  return cfg;
}

void print_ap(const char* tag, const detect::ApResult& ap) {
  auto cell = [](const std::optional<double>& v) {
    char buf[32];
    if (v)
      std::snprintf(buf, sizeof buf, "%10.4f", *v);
    else
      std::snprintf(buf, sizeof buf, "%10s", "n/a");
    return std::string(buf);
  };
  std::printf("  %-8s %s %s %s\n", tag, cell(ap.easy).c_str(),
              cell(ap.moderate).c_str(), cell(ap.hard).c_str());
}

double ap_or_nan(const std::optional<double>& v) {
  return v ? *v : std::nan("");
}

int cmd_synth(const std::string& out, int count, std::uint64_t seed,
              double occluders) {
  auto specs = synth::make_dataset_specs(count, seed, occluders);
  fs::create_directories(fs::path(out) / "scenes");
  for (int i = 0; i < count; ++i) {
    auto scene = synth::render(specs[std::size_t(i)]);
    io::write_scene(io::scene_dir(out, i), scene, specs[std::size_t(i)].cam);
    std::printf("scene %04d  boxes=%zu\n", i,
                specs[std::size_t(i)].boxes.size());
  }
  std::printf("wrote %d scenes under %s\n", count, out.c_str());
  return 0;
}

int cmd_train(const std::string& data, const std::string& out,
              const std::string& config, int method, int steps) {
  auto cfg = resolve_config(config, method, steps);
  auto scenes = load_dataset(data);
  fs::create_directories(out);
  const std::string table = (fs::path(out) / "loss.txt").string();
  if (fs::exists(table)) fs::remove(table);

  auto model = pipeline::make_model(cfg);
  const int every = std::max(1, cfg.optimizer.steps / 10);
  std::printf("training %d steps on %zu scenes\n", cfg.optimizer.steps,
              scenes.size());
  auto stats = pipeline::train(model, scenes, table);
  for (const auto& st : stats)
    if (st.step % every == 0 || st.step + 1 == int(stats.size()))
      std::printf("  step %5d  l_disp %.5f  l_rpn %.5f  l_header %.5f  "
                  "total %.5f\n",
                  st.step, st.l_disp, st.l_rpn, st.l_header, st.total);

  io::save_config((fs::path(out) / "config.json").string(), cfg);
  model.params.save((fs::path(out) / "params.bin").string());
  std::printf("saved %s and %s\n",
              (fs::path(out) / "params.bin").string().c_str(),
              (fs::path(out) / "config.json").string().c_str());
  return 0;
}

pipeline::Model load_model(const std::string& dir) {
  auto cfg = io::load_config((fs::path(dir) / "config.json").string());
  auto model = pipeline::make_model(cfg);
  model.params.load((fs::path(dir) / "params.bin").string());
  return model;
}

int cmd_match(const std::string& data, const std::string& model_dir,
              const std::string& out, bool no_detections) {
  auto model = load_model(model_dir);
  const bool det = !no_detections && model.header_on();
  for (const auto& dir : io::list_scene_dirs(data)) {
    auto scene = io::read_scene(dir);
    auto inf = pipeline::infer_scene(model, scene, det);
    const std::string id = fs::path(dir).filename().string();
    const fs::path pred_dir = fs::path(out) / "scenes" / id;
    fs::create_directories(pred_dir);
    io::write_pfm((pred_dir / "disp.pfm").string(), inf.disp.data,
                  scene.height, scene.width);
    if (det)
      io::write_detections((pred_dir / "detections.txt").string(),
                           inf.detections);
    std::printf("scene %s  detections=%zu\n", id.c_str(),
                inf.detections.size());
  }
  return 0;
}

int cmd_eval_depth(const std::string& data, const std::string& pred) {
  double sum_sq_disp = 0, sum_abs_rel = 0, sum_sq_rel = 0, sum_sq_z = 0;
  std::size_t pixels = 0;
  for (const auto& dir : io::list_scene_dirs(data)) {
    auto scene = io::read_scene(dir);
    const std::string id = fs::path(dir).filename().string();
    const std::string ppath =
        (fs::path(pred) / "scenes" / id / "disp.pfm").string();
    auto pmap = io::read_pfm(ppath);
    if (pmap.height != scene.height || pmap.width != scene.width)
      throw std::runtime_error("prediction size mismatch: " + ppath);
    auto valid = pipeline::supervised_mask(scene.gt_disp, scene.occlusion);
    core::Tensor<float> gt({scene.height, scene.width}, scene.gt_disp);
    core::Tensor<float> pr({scene.height, scene.width}, pmap.data);
    auto gt_z = disparity::disparity_to_depth(gt, valid, scene.cam.f,
                                              scene.cam.b);
    auto pr_z = disparity::disparity_to_depth(pr, valid, scene.cam.f,
                                              scene.cam.b);
    for (std::size_t i = 0; i < valid.size(); ++i) {
      if (!gt_z.valid[i] || !pr_z.valid[i]) continue;
      const double de = double(pmap.data[i]) - double(scene.gt_disp[i]);
      sum_sq_disp += de * de;
      const double dz = pr_z.z[i] - gt_z.z[i];
      sum_abs_rel += std::abs(dz) / gt_z.z[i];
      sum_sq_rel += dz * dz / gt_z.z[i];
      sum_sq_z += dz * dz;
      ++pixels;
    }
  }
  if (pixels == 0) throw std::runtime_error("no supervised pixels");
  const double n = double(pixels);
  const double abs_rel = sum_abs_rel / n, sq_rel = sum_sq_rel / n;
  const double rmse = std::sqrt(sum_sq_z / n);
  const double disp_rmse = std::sqrt(sum_sq_disp / n);
  std::printf("  %10s %10s %10s %10s %12s\n", "abs_rel", "sq_rel", "rmse",
              "disp_rmse", "pixels");
  std::printf("  %10.4f %10.4f %10.4f %10.4f %12zu\n", abs_rel, sq_rel, rmse,
              disp_rmse, pixels);
  std::printf("eval-depth %.9g %.9g %.9g %.9g %zu\n", abs_rel, sq_rel, rmse,
              disp_rmse, pixels);
  return 0;
}

int cmd_eval_det(const std::string& data, const std::string& pred,
                 double iou) {
  std::vector<std::vector<detect::ObjectBox>> det_groups;
  std::vector<std::vector<detect::LabeledBox>> label_groups;
  for (const auto& dir : io::list_scene_dirs(data)) {
    const std::string id = fs::path(dir).filename().string();
    label_groups.push_back(io::read_labels(dir + "/labels.txt"));
    det_groups.push_back(io::read_detections(
        (fs::path(pred) / "scenes" / id / "detections.txt").string()));
  }
  auto bev = detect::average_precision(det_groups, label_groups, iou, true);
  auto box = detect::average_precision(det_groups, label_groups, iou, false);
  std::printf("  AP at IoU %.2f %10s %10s %10s\n", iou, "easy", "moderate",
              "hard");
  print_ap("bev", bev);
  print_ap("3d", box);
  std::printf("eval-det %.9g %.9g %.9g %.9g %.9g %.9g\n", ap_or_nan(bev.easy),
              ap_or_nan(bev.moderate), ap_or_nan(bev.hard),
              ap_or_nan(box.easy), ap_or_nan(box.moderate),
              ap_or_nan(box.hard));
  return 0;
}

int cmd_gradcheck(int instances, std::uint64_t seed) {
  auto results = pipeline::run_gradient_suite(instances, seed);
  int failing = 0;
  std::printf("  %-26s %6s %8s %7s %12s\n", "case", "status", "coords",
              "kinks", "max_rel_err");
  for (const auto& c : results) {
    std::printf("  %-26s %6s %8zu %7zu %12.3g\n", c.name.c_str(),
                c.pass ? "pass" : "FAIL", c.coords, c.kinks, c.max_rel_err);
    if (!c.pass) {
      ++failing;
      std::printf("    %s\n", c.message.c_str());
    }
  }
  std::printf("gradcheck %zu cases, %d failing\n", results.size(), failing);
  return failing == 0 ? 0 : 1;
}

int cmd_ablate(int method, const std::string& data, const std::string& out,
               const std::string& eval_data, const std::string& config,
               int steps) {
  const std::string eval_root = eval_data.empty() ? data : eval_data;
  int rc = cmd_train(data, out, config, method, steps);
  if (rc != 0) return rc;
  auto model = load_model(out);
  auto scenes = load_dataset(eval_root);
  auto ev = pipeline::evaluate(model, scenes, true);
  std::printf("method %d on %zu scenes\n", method, scenes.size());
  std::printf("  %10s %10s %10s %10s %12s\n", "abs_rel", "sq_rel", "rmse",
              "disp_rmse", "pixels");
  std::printf("  %10.4f %10.4f %10.4f %10.4f %12zu\n", ev.depth.abs_rel,
              ev.depth.sq_rel, ev.depth.rmse, ev.disp_rmse, ev.pixels);
  if (model.header_on()) {
    std::printf("  AP at IoU 0.70 %10s %10s %10s\n", "easy", "moderate",
                "hard");
    print_ap("bev", ev.ap_bev);
    print_ap("3d", ev.ap_3d);
  }
  std::printf("ablate %d %.9g %.9g %.9g %.9g %.9g %.9g\n", method,
              ev.depth.abs_rel, ev.depth.rmse, ev.disp_rmse,
              ap_or_nan(ev.ap_bev.easy), ap_or_nan(ev.ap_3d.easy),
              double(ev.detections));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"stereo volume matching: synthesis, training, evaluation"};
  app.require_subcommand(1);

  std::string out, data, config, model_dir, pred, eval_data;
  int count = 8, method = 0, steps = 0, instances = 3;
  std::uint64_t seed = 1;
  double occluders = 0.5, iou = 0.7;
  bool no_detections = false;

  auto* s_synth = app.add_subcommand("synth", "render a synthetic dataset");
  s_synth->add_option("--out", out, "dataset root")->required();
  s_synth->add_option("--scenes", count, "scene count")
      ->check(CLI::PositiveNumber);
  s_synth->add_option("--seed", seed, "generator seed");
  s_synth->add_option("--occluders", occluders,
                      "fraction of scenes with box pairs")
      ->check(CLI::Range(0.0, 1.0));

  auto* s_train = app.add_subcommand("train", "fit a model on a dataset");
  s_train->add_option("--data", data, "dataset root")->required();
  s_train->add_option("--out", out, "checkpoint directory")->required();
  s_train->add_option("--config", config, "pipeline config file");
  s_train->add_option("--method", method, "ablation preset 1..9")
      ->check(CLI::Range(1, 9));
  s_train->add_option("--steps", steps, "override optimizer steps");

  auto* s_match = app.add_subcommand("match", "run inference over a dataset");
  s_match->add_option("--data", data, "dataset root")->required();
  s_match->add_option("--model", model_dir, "checkpoint directory")
      ->required();
  s_match->add_option("--out", pred, "prediction root")->required();
  s_match->add_flag("--no-detections", no_detections,
                    "write disparity maps only");

  auto* s_depth = app.add_subcommand("eval-depth",
                                     "disparity and depth error report");
  s_depth->add_option("--data", data, "dataset root")->required();
  s_depth->add_option("--pred", pred, "prediction root")->required();

  auto* s_det = app.add_subcommand("eval-det", "detection AP report");
  s_det->add_option("--data", data, "dataset root")->required();
  s_det->add_option("--pred", pred, "prediction root")->required();
  s_det->add_option("--iou", iou, "match threshold")
      ->check(CLI::Range(0.05, 0.95));

  auto* s_grad = app.add_subcommand("gradcheck",
                                    "finite-difference audit of every op");
  s_grad->add_option("--instances", instances, "random rebuilds per case")
      ->check(CLI::PositiveNumber);
  s_grad->add_option("--seed", seed, "probe seed");

  auto* s_ablate = app.add_subcommand("ablate",
                                      "train and score one method preset");
  s_ablate->add_option("--method", method, "ablation preset 1..9")
      ->required()
      ->check(CLI::Range(1, 9));
  s_ablate->add_option("--data", data, "training dataset root")->required();
  s_ablate->add_option("--out", out, "checkpoint directory")->required();
  s_ablate->add_option("--eval", eval_data,
                       "held-out dataset root (defaults to --data)");
  s_ablate->add_option("--config", config, "pipeline config file");
  s_ablate->add_option("--steps", steps, "override optimizer steps");

  CLI11_PARSE(app, argc, argv);

  try {
    if (s_synth->parsed())
      return cmd_synth(out, count, seed, occluders);
    if (s_train->parsed())
      return cmd_train(data, out, config, method, steps);
    if (s_match->parsed())
      return cmd_match(data, model_dir, pred, no_detections);
    if (s_depth->parsed()) return cmd_eval_depth(data, pred);
    if (s_det->parsed()) return cmd_eval_det(data, pred, iou);
    if (s_grad->parsed()) return cmd_gradcheck(instances, seed);
    if (s_ablate->parsed())
      return cmd_ablate(method, data, out, eval_data, config, steps);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
