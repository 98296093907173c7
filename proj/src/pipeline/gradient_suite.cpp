#include "voxmatch/pipeline/gradient_suite.hpp"

#include <array>
#include <functional>
#include <utility>

#include "voxmatch/core/gradcheck.hpp"
#include "voxmatch/core/nn.hpp"
#include "voxmatch/core/rng.hpp"
#include "voxmatch/detect/anchors.hpp"
#include "voxmatch/detect/heads.hpp"
#include "voxmatch/disparity/disparity.hpp"
#include "voxmatch/fusion/fusion.hpp"
#include "voxmatch/roi/roi.hpp"
#include "voxmatch/stereo/stereo.hpp"

namespace voxmatch::pipeline {

namespace {

using core::Graph;
using core::Rng;
using core::Tensor;

struct Instance {
  core::BuilderFn builder;
  std::vector<Tensor<double>> leaves;
  std::vector<bool> wrt;
};

struct Case {
  std::string name;
  std::function<Instance(Rng&)> make;
};

Tensor<double> rand_t(Rng& rng, std::vector<int> sh, double lo, double hi) {
  auto t = Tensor<double>::zeros(std::move(sh));
  for (auto& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

// Magnitudes bounded away from zero so relu probes rarely cross a kink.
Tensor<double> rand_signed(Rng& rng, std::vector<int> sh) {
  auto t = Tensor<double>::zeros(std::move(sh));
  for (auto& v : t.data) {
    const double m = rng.uniform(0.2, 1.0);
    v = rng.uniform() < 0.5 ? -m : m;
  }
  return t;
}

std::vector<std::uint8_t> rand_mask(Rng& rng, std::size_t n, double p_keep) {
  std::vector<std::uint8_t> m(n, 0);
  bool any = false;
  for (auto& b : m) {
    b = rng.uniform() < p_keep ? 1 : 0;
    any = any || b;
  }
  if (!any) m[rng.below(n)] = 1;
  return m;
}

// Leaves are appended in a fixed order; builders look them up by index, so
// each case documents its own layout.
std::vector<Case> build_cases() {
  std::vector<Case> cases;

  cases.push_back({"add", [](Rng& rng) {
                     Instance in;
                     in.leaves = {rand_t(rng, {3, 4}, -1, 1),
                                  rand_t(rng, {3, 4}, -1, 1)};
                     in.wrt = {true, true};
                     in.builder = [](Graph<double>& g,
                                     const std::vector<int>& ids) {
                       return g.add(ids[0], ids[1]);
                     };
                     return in;
                   }});

  cases.push_back({"mul", [](Rng& rng) {
                     Instance in;
                     in.leaves = {rand_t(rng, {3, 4}, -1, 1),
                                  rand_t(rng, {3, 4}, -1, 1)};
                     in.wrt = {true, true};
                     in.builder = [](Graph<double>& g,
                                     const std::vector<int>& ids) {
                       return g.mul(ids[0], ids[1]);
                     };
                     return in;
                   }});

  cases.push_back({"relu", [](Rng& rng) {
                     Instance in;
                     in.leaves = {rand_signed(rng, {4, 5})};
                     in.wrt = {true};
                     in.builder = [](Graph<double>& g,
                                     const std::vector<int>& ids) {
                       return g.relu(ids[0]);
                     };
                     return in;
                   }});

  cases.push_back({"linear", [](Rng& rng) {
                     Instance in;
                     in.leaves = {rand_t(rng, {3, 4}, -1, 1),
                                  rand_t(rng, {5, 4}, -1, 1),
                                  rand_t(rng, {5}, -0.5, 0.5)};
                     in.wrt = {true, true, true};
                     in.builder = [](Graph<double>& g,
                                     const std::vector<int>& ids) {
                       return g.linear(ids[0], ids[1], ids[2]);
                     };
                     return in;
                   }});

  cases.push_back({"conv2d", [](Rng& rng) {
                     Instance in;
                     in.leaves = {rand_t(rng, {2, 5, 6}, -1, 1),
                                  rand_t(rng, {3, 2, 3, 3}, -0.5, 0.5),
                                  rand_t(rng, {3}, -0.2, 0.2)};
                     in.wrt = {true, true, true};
                     in.builder = [](Graph<double>& g,
                                     const std::vector<int>& ids) {
                       core::ParamLeaves p;
                       p.ids = {{"k.w", ids[1]}, {"k.b", ids[2]}};
                       return stereo::conv2d_named(
                           g, ids[0], p, "k", kernels::PadMode::kReplicate);
                     };
                     return in;
                   }});

  cases.push_back({"conv3d", [](Rng& rng) {
                     Instance in;
                     in.leaves = {rand_t(rng, {2, 4, 5, 5}, -1, 1),
                                  rand_t(rng, {3, 2, 3, 3, 3}, -0.3, 0.3),
                                  rand_t(rng, {3}, -0.2, 0.2)};
                     in.wrt = {true, true, true};
                     in.builder = [](Graph<double>& g,
                                     const std::vector<int>& ids) {
                       core::ParamLeaves p;
                       p.ids = {{"k.w", ids[1]}, {"k.b", ids[2]}};
                       return stereo::conv3d_named(g, ids[0], p, "k", 1, 1);
                     };
                     return in;
                   }});

  cases.push_back({"conv3d_stride2", [](Rng& rng) {
                     Instance in;
                     in.leaves = {rand_t(rng, {2, 4, 6, 6}, -1, 1),
                                  rand_t(rng, {3, 2, 3, 3, 3}, -0.3, 0.3),
                                  rand_t(rng, {3}, -0.2, 0.2)};
                     in.wrt = {true, true, true};
                     in.builder = [](Graph<double>& g,
                                     const std::vector<int>& ids) {
                       core::ParamLeaves p;
                       p.ids = {{"k.w", ids[1]}, {"k.b", ids[2]}};
                       return stereo::conv3d_named(g, ids[0], p, "k", 1, 2);
                     };
                     return in;
                   }});

  cases.push_back({"softmax_axis", [](Rng& rng) {
                     Instance in;
                     in.leaves = {rand_t(rng, {5, 3, 2}, -2, 2)};
                     in.wrt = {true};
                     in.builder = [](Graph<double>& g,
                                     const std::vector<int>& ids) {
                       return g.softmax_axis(ids[0], 0);
                     };
                     return in;
                   }});

  cases.push_back({"weighted_index_sum", [](Rng& rng) {
                     Instance in;
                     in.leaves = {rand_t(rng, {5, 3, 2}, -2, 2)};
                     in.wrt = {true};
                     in.builder = [](Graph<double>& g,
                                     const std::vector<int>& ids) {
                       return g.weighted_index_sum(
                           g.softmax_axis(ids[0], 0), 0);
                     };
                     return in;
                   }});

  cases.push_back({"instance_norm", [](Rng& rng) {
                     Instance in;
                     in.leaves = {rand_t(rng, {2, 3, 3, 3}, -1, 1)};
                     in.wrt = {true};
                     auto valid = rand_mask(rng, 27, 0.8);
                     in.builder = [valid](Graph<double>& g,
                                          const std::vector<int>& ids) {
                       return g.instance_norm(ids[0], valid, 1e-5);
                     };
                     return in;
                   }});

  cases.push_back({"instance_norm_affine", [](Rng& rng) {
                     Instance in;
                     in.leaves = {rand_t(rng, {2, 3, 3, 3}, -1, 1),
                                  rand_t(rng, {2}, 0.5, 1.5),
                                  rand_t(rng, {2}, -0.5, 0.5)};
                     in.wrt = {true, true, true};
                     auto valid = rand_mask(rng, 27, 0.85);
                     in.builder = [valid](Graph<double>& g,
                                          const std::vector<int>& ids) {
                       return g.instance_norm(ids[0], ids[1], ids[2], valid,
                                              1e-5);
                     };
                     return in;
                   }});

  cases.push_back({"concat_axis", [](Rng& rng) {
                     Instance in;
                     in.leaves = {rand_t(rng, {2, 3, 4}, -1, 1),
                                  rand_t(rng, {3, 3, 4}, -1, 1)};
                     in.wrt = {true, true};
                     in.builder = [](Graph<double>& g,
                                     const std::vector<int>& ids) {
                       int c = g.concat_axis(ids[0], ids[1], 0);
                       return g.mul(c, c);
                     };
                     return in;
                   }});

  cases.push_back({"reshape", [](Rng& rng) {
                     Instance in;
                     in.leaves = {rand_t(rng, {3, 4}, -1, 1)};
                     in.wrt = {true};
                     in.builder = [](Graph<double>& g,
                                     const std::vector<int>& ids) {
                       int r = g.reshape(ids[0], {2, 2, 3});
                       return g.mul(r, r);
                     };
                     return in;
                   }});

  cases.push_back({"mask_zero", [](Rng& rng) {
                     Instance in;
                     in.leaves = {rand_t(rng, {3, 4}, -1, 1)};
                     in.wrt = {true};
                     auto keep = rand_mask(rng, 12, 0.6);
                     in.builder = [keep](Graph<double>& g,
                                         const std::vector<int>& ids) {
                       int m = g.mask_zero(ids[0], keep);
                       return g.mul(m, m);
                     };
                     return in;
                   }});

  cases.push_back({"smooth_l1", [](Rng& rng) {
                     Instance in;
                     in.leaves = {rand_t(rng, {4, 5}, -2, 2),
                                  rand_t(rng, {4, 5}, -2, 2)};
                     in.wrt = {true, true};
                     auto valid = rand_mask(rng, 20, 0.7);
                     in.builder = [valid](Graph<double>& g,
                                          const std::vector<int>& ids) {
                       return g.smooth_l1(ids[0], ids[1], valid);
                     };
                     return in;
                   }});

  cases.push_back({"bce_with_logits", [](Rng& rng) {
                     Instance in;
                     in.leaves = {rand_t(rng, {4, 5}, -3, 3)};
                     in.wrt = {true};
                     auto targets = rand_t(rng, {4, 5}, 0, 1);
                     auto valid = rand_mask(rng, 20, 0.7);
                     in.builder = [targets, valid](
                                      Graph<double>& g,
                                      const std::vector<int>& ids) {
                       int t = g.constant(targets);
                       return g.bce_with_logits(ids[0], t, valid);
                     };
                     return in;
                   }});

  cases.push_back({"trilinear_sample", [](Rng& rng) {
                     Instance in;
                     in.leaves = {rand_t(rng, {2, 4, 5, 6}, -1, 1)};
                     in.wrt = {true};
                     std::vector<double> coords;
                     for (int i = 0; i < 6; ++i) {
                       coords.push_back(rng.uniform(0.6, 2.4));
                       coords.push_back(rng.uniform(0.6, 3.4));
                       coords.push_back(rng.uniform(0.6, 4.4));
                     }
                     in.builder = [coords](Graph<double>& g,
                                           const std::vector<int>& ids) {
                       return g.trilinear_sample(ids[0], coords);
                     };
                     return in;
                   }});

  cases.push_back({"cubic_d_sample", [](Rng& rng) {
                     Instance in;
                     in.leaves = {rand_t(rng, {2, 6, 5, 5}, -1, 1)};
                     in.wrt = {true};
                     std::vector<double> coords;
                     for (int i = 0; i < 6; ++i) {
                       coords.push_back(rng.uniform(1.6, 3.4));
                       coords.push_back(rng.uniform(0.6, 3.4));
                       coords.push_back(rng.uniform(0.6, 3.4));
                     }
                     in.builder = [coords](Graph<double>& g,
                                           const std::vector<int>& ids) {
                       return g.cubic_d_sample(ids[0], coords);
                     };
                     return in;
                   }});

  cases.push_back({"bilinear_sample", [](Rng& rng) {
                     Instance in;
                     in.leaves = {rand_t(rng, {2, 5, 6}, -1, 1)};
                     in.wrt = {true};
                     std::vector<double> coords;
                     for (int i = 0; i < 6; ++i) {
                       coords.push_back(rng.uniform(0.6, 3.4));
                       coords.push_back(rng.uniform(0.6, 4.4));
                     }
                     in.builder = [coords](Graph<double>& g,
                                           const std::vector<int>& ids) {
                       return g.bilinear_sample(ids[0], coords);
                     };
                     return in;
                   }});

  cases.push_back({"shift_concat_volume", [](Rng& rng) {
                     Instance in;
                     in.leaves = {rand_t(rng, {3, 4, 6}, -1, 1),
                                  rand_t(rng, {3, 4, 6}, -1, 1)};
                     in.wrt = {true, true};
                     in.builder = [](Graph<double>& g,
                                     const std::vector<int>& ids) {
                       int v = g.shift_concat_volume(ids[0], ids[1], 3);
                       return g.mul(v, v);
                     };
                     return in;
                   }});

  // Composite: the whole disparity trunk at toy size, every weight and
  // both images differentiated.
  cases.push_back({"stereo_trunk", [](Rng& rng) {
                     Instance in;
                     in.leaves = {
                         rand_t(rng, {1, 6, 8}, 0, 1),             // 0 left
                         rand_t(rng, {1, 6, 8}, 0, 1),             // 1 right
                         rand_t(rng, {2, 1, 3, 3}, -0.5, 0.5),     // feat.c1
                         rand_t(rng, {2}, -0.2, 0.2),
                         rand_t(rng, {2, 2, 3, 3}, -0.4, 0.4),     // feat.c2
                         rand_t(rng, {2}, -0.2, 0.2),
                         rand_t(rng, {2, 2, 3, 3}, -0.4, 0.4),     // feat.c3
                         rand_t(rng, {2}, -0.2, 0.2),
                         rand_t(rng, {2, 4, 3, 3, 3}, -0.3, 0.3),  // refine.c1
                         rand_t(rng, {2}, -0.2, 0.2),
                         rand_t(rng, {2, 2, 3, 3, 3}, -0.3, 0.3),  // refine.c2
                         rand_t(rng, {2}, -0.2, 0.2),
                         rand_t(rng, {1, 2, 1, 1, 1}, -0.5, 0.5),  // agg
                         rand_t(rng, {1}, -0.2, 0.2),
                     };
                     in.wrt.assign(in.leaves.size(), true);
                     in.builder = [](Graph<double>& g,
                                     const std::vector<int>& ids) {
                       core::ParamLeaves p;
                       const char* names[] = {"feat.c1", "feat.c2", "feat.c3",
                                              "refine.c1", "refine.c2", "agg"};
                       for (int i = 0; i < 6; ++i) {
                         p.ids[std::string(names[i]) + ".w"] = ids[2 + 2 * i];
                         p.ids[std::string(names[i]) + ".b"] = ids[3 + 2 * i];
                       }
                       int fl = stereo::extract_features(g, ids[0], p);
                       int fr = stereo::extract_features(g, ids[1], p);
                       int vol = stereo::build_cost_volume(g, fl, fr, 3);
                       int ref = stereo::refine_volume(g, vol, p);
                       int agg = stereo::aggregate_volume(g, ref, p);
                       return disparity::soft_argmax(g, agg);
                     };
                     return in;
                   }});

  cases.push_back({"soft_argmax_of_aggregate", [](Rng& rng) {
                     Instance in;
                     in.leaves = {rand_t(rng, {2, 3, 4, 4}, -1, 1),
                                  rand_t(rng, {1, 2, 1, 1, 1}, -0.5, 0.5),
                                  rand_t(rng, {1}, -0.2, 0.2)};
                     in.wrt = {true, true, true};
                     in.builder = [](Graph<double>& g,
                                     const std::vector<int>& ids) {
                       core::ParamLeaves p;
                       p.ids = {{"agg.w", ids[1]}, {"agg.b", ids[2]}};
                       int agg = stereo::aggregate_volume(g, ids[0], p);
                       return disparity::soft_argmax(g, agg);
                     };
                     return in;
                   }});

  cases.push_back({"disparity_loss", [](Rng& rng) {
                     Instance in;
                     in.leaves = {rand_t(rng, {4, 5}, 0, 4)};
                     in.wrt = {true};
                     auto gt = rand_t(rng, {4, 5}, 0, 4);
                     auto valid = rand_mask(rng, 20, 0.7);
                     in.builder = [gt, valid](Graph<double>& g,
                                              const std::vector<int>& ids) {
                       int t = g.constant(gt);
                       return disparity::disparity_loss(g, ids[0], t, valid);
                     };
                     return in;
                   }});

  const roi::Roi3D box{0.9, 1.2, 0.8, 4.8, 4.4, 3.1};
  for (auto [mode, tag] :
       {std::pair{roi::SampleMode::kTrilinear, "roi_select_trilinear"},
        std::pair{roi::SampleMode::kDeep, "roi_select_deep"},
        std::pair{roi::SampleMode::kSelective, "roi_select_selective"}}) {
    cases.push_back({tag, [box, mode](Rng& rng) {
                       Instance in;
                       in.leaves = {rand_t(rng, {2, 4, 6, 6}, -1, 1)};
                       in.wrt = {true};
                       auto disp = rand_t(rng, {6, 6}, 1.0, 4.5);
                       in.builder = [box, mode, disp](
                                        Graph<double>& g,
                                        const std::vector<int>& ids) {
                         auto s = roi::roi_select(g, ids[0], box, &disp,
                                                  mode, 4, 1.0);
                         return s.node;
                       };
                       return in;
                     }});
  }

  cases.push_back({"fuse_occupancy", [box](Rng& rng) {
                     Instance in;
                     in.leaves = {rand_t(rng, {2, 4, 6, 6}, -1, 1)};
                     in.wrt = {true};
                     std::vector<double> patch;
                     for (int i = 0; i < 16; ++i)
                       patch.push_back(rng.uniform(1.0, 4.0));
                     auto occ = fusion::back_project(patch, box, 4);
                     in.builder = [box, occ](Graph<double>& g,
                                             const std::vector<int>& ids) {
                       auto s = roi::deep_sample(g, ids[0], box, 4);
                       return fusion::fuse(g, s, occ);
                     };
                     return in;
                   }});

  cases.push_back({"fuse_stacked", [box](Rng& rng) {
                     Instance in;
                     in.leaves = {rand_t(rng, {2, 4, 6, 6}, -1, 1),
                                  rand_t(rng, {6, 6}, 1.0, 5.0)};
                     in.wrt = {true, true};
                     in.builder = [box](Graph<double>& g,
                                        const std::vector<int>& ids) {
                       auto s = roi::deep_sample(g, ids[0], box, 4);
                       auto patch = fusion::extract_roi2d(g, ids[1], box, 4);
                       return fusion::fuse_stacked(g, s, patch);
                     };
                     return in;
                   }});

  cases.push_back({"rpn_head", [](Rng& rng) {
                     Instance in;
                     in.leaves = {
                         rand_t(rng, {2, 8, 8, 8}, -1, 1),          // volume
                         rand_t(rng, {4, 2, 3, 3, 3}, -0.3, 0.3),   // t1
                         rand_t(rng, {4}, -0.2, 0.2),
                         rand_t(rng, {4, 4, 3, 3, 3}, -0.3, 0.3),   // t2
                         rand_t(rng, {4}, -0.2, 0.2),
                         rand_t(rng, {4, 4, 3, 3, 3}, -0.3, 0.3),   // t3
                         rand_t(rng, {4}, -0.2, 0.2),
                         rand_t(rng, {1, 4, 1, 1, 1}, -0.5, 0.5),   // cls
                         rand_t(rng, {1}, -0.5, 0.5),
                         rand_t(rng, {6, 4, 1, 1, 1}, -0.5, 0.5),   // reg
                         rand_t(rng, {6}, -0.2, 0.2),
                     };
                     in.wrt.assign(in.leaves.size(), true);
                     auto anchors = detect::generate_anchors(
                         8, 8, 8, 8, {{{6.0, 6.0, 4.0}}});
                     std::vector<roi::Roi3D> gts{{1.5, 1.2, 2.1,
                                                  6.4, 6.8, 5.9}};
                     auto asg = detect::assign_anchors(anchors, gts);
                     in.builder = [anchors, gts, asg](
                                      Graph<double>& g,
                                      const std::vector<int>& ids) {
                       core::ParamLeaves p;
                       const char* names[] = {"rpn.t1", "rpn.t2", "rpn.t3",
                                              "rpn.cls", "rpn.reg"};
                       for (int i = 0; i < 5; ++i) {
                         p.ids[std::string(names[i]) + ".w"] = ids[1 + 2 * i];
                         p.ids[std::string(names[i]) + ".b"] = ids[2 + 2 * i];
                       }
                       auto out = detect::rpn_forward(g, ids[0], p);
                       auto t = detect::build_rpn_targets<double>(
                           asg, anchors, gts, out);
                       return detect::rpn_loss(g, out, t);
                     };
                     return in;
                   }});

  cases.push_back({"header_head", [](Rng& rng) {
                     Instance in;
                     in.leaves = {
                         rand_t(rng, {2, 16, 16, 16}, -1, 1),
                         rand_t(rng, {3, 2, 3, 3, 3}, -0.25, 0.25),  // c1
                         rand_t(rng, {3}, -0.2, 0.2),
                         rand_t(rng, {3, 3, 3, 3, 3}, -0.25, 0.25),  // c2
                         rand_t(rng, {3}, -0.2, 0.2),
                         rand_t(rng, {6, 3}, -0.5, 0.5),             // fc1
                         rand_t(rng, {6}, -0.2, 0.2),
                         rand_t(rng, {9, 6}, -0.5, 0.5),             // fc2
                         rand_t(rng, {9}, -0.2, 0.2),
                     };
                     in.wrt.assign(in.leaves.size(), true);
                     roi::Roi3D r{10.0, 8.0, 2.0, 42.0, 40.0, 7.0};
                     detect::ObjectBox gt{0.3, -0.2, 12.0, 1.8, 1.5,
                                          4.2, 0.5, 1.0};
                     auto target = detect::make_header_target(
                         r, core::Vec3{26.5, 23.0, 4.6}, gt);
                     in.builder = [target](Graph<double>& g,
                                           const std::vector<int>& ids) {
                       core::ParamLeaves p;
                       const char* names[] = {"hdr.c1", "hdr.c2", "hdr.fc1",
                                              "hdr.fc2"};
                       for (int i = 0; i < 4; ++i) {
                         p.ids[std::string(names[i]) + ".w"] = ids[1 + 2 * i];
                         p.ids[std::string(names[i]) + ".b"] = ids[2 + 2 * i];
                       }
                       int pred = detect::header_forward(g, ids[0], p);
                       return detect::header_loss(g, pred, target);
                     };
                     return in;
                   }});

  cases.push_back({"weighted_objective", [](Rng& rng) {
                     Instance in;
                     in.leaves = {rand_t(rng, {1}, 0.1, 2),
                                  rand_t(rng, {1}, 0.1, 2),
                                  rand_t(rng, {1}, 0.1, 2)};
                     in.wrt = {true, true, true};
                     in.builder = [](Graph<double>& g,
                                     const std::vector<int>& ids) {
                       int wd = g.constant(Tensor<double>::scalar(1.0));
                       int wr = g.constant(Tensor<double>::scalar(1.0));
                       int wh = g.constant(Tensor<double>::scalar(2.0));
                       return g.add(g.add(g.mul(ids[0], wd),
                                          g.mul(ids[1], wr)),
                                    g.mul(ids[2], wh));
                     };
                     return in;
                   }});

  return cases;
}

}  // namespace

std::vector<GradSuiteCase> run_gradient_suite(int instances,
                                              std::uint64_t seed) {
  if (instances < 1)
    throw std::invalid_argument("run_gradient_suite: need >= 1 instance");
  auto cases = build_cases();
  std::vector<GradSuiteCase> out;
  out.reserve(cases.size());
  for (std::size_t c = 0; c < cases.size(); ++c) {
    GradSuiteCase res;
    res.name = cases[c].name;
    res.pass = true;
    for (int k = 0; k < instances; ++k) {
      Rng rng(core::hash_combine(seed, c * 1009 + std::size_t(k)));
      Instance in = cases[c].make(rng);
      core::GradCheckConfig cfg;
      cfg.seed = core::hash_combine(seed ^ 0xfeed, c * 131 + std::size_t(k));
      cfg.max_coords = 24;
      auto r = core::check_gradients(in.builder, in.leaves, in.wrt, cfg);
      res.instances += 1;
      res.coords += r.checked;
      res.kinks += r.skipped_kinks;
      res.max_rel_err = std::max(res.max_rel_err, r.max_rel_err);
      if (!r.ok()) {
        res.pass = false;
        if (res.message.empty())
          res.message = r.messages.empty() ? "no coordinates checked"
                                           : r.messages.front();
      }
    }
    out.push_back(std::move(res));
  }
  return out;
}

}  // namespace voxmatch::pipeline
