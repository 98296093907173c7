#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "voxmatch/core/graph.hpp"
#include "voxmatch/core/tensor.hpp"

namespace voxmatch::core {

struct GradCheckConfig {
  double step = 1e-3;
  double rel_tol = 1e-4;
  double abs_floor = 1e-8;
  std::uint64_t seed = 1234;
  // Coordinates are subsampled beyond this per leaf.
  std::size_t max_coords = 200;
};

struct GradCheckResult {
  std::size_t checked = 0;
  std::size_t skipped_kinks = 0;
  std::size_t failures = 0;
  double max_rel_err = 0.0;
  std::vector<std::string> messages;

  bool ok() const { return failures == 0 && checked > 0; }
};

// builder receives a fresh graph plus the ids of the given leaves (in
// order) and returns the output node. The checker compares reverse-mode
// gradients of a randomly weighted sum of the output against central
// differences, re-running the builder per probe. Probes that step across
// an activation branch (detected by the graph's sign hash) are skipped.
using BuilderFn =
    std::function<int(Graph<double>&, const std::vector<int>&)>;

GradCheckResult check_gradients(const BuilderFn& builder,
                                const std::vector<Tensor<double>>& leaves,
                                const std::vector<bool>& wrt,
                                const GradCheckConfig& cfg = {});

}  // namespace voxmatch::core
