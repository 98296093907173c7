#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace voxmatch::pipeline {

struct GradSuiteCase {
  std::string name;
  int instances = 0;
  std::size_t coords = 0;  // coordinates probed across all instances
  std::size_t kinks = 0;   // probes skipped for crossing a relu boundary
  double max_rel_err = 0.0;
  bool pass = false;
  std::string message;  // first failure detail, empty when passing
};

// Finite-difference audit of every differentiable primitive plus the
// composite stages (feature trunk, RoI sampling, fusion, both detection
// heads, the weighted objective). Each case rebuilds with `instances`
// fresh random inputs; probe positions rotate with the instance so
// coverage accumulates.
std::vector<GradSuiteCase> run_gradient_suite(int instances,
                                              std::uint64_t seed);

}  // namespace voxmatch::pipeline
