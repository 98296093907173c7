#include "voxmatch/core/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "voxmatch/core/rng.hpp"

namespace voxmatch::core {

namespace {

struct Eval {
  double weighted;
  std::uint64_t sign_hash;
};

Eval run(const BuilderFn& builder, const std::vector<Tensor<double>>& leaves,
         const std::vector<bool>& wrt, const std::vector<double>& weights) {
  Graph<double> g;
  g.set_record_activation_signs(true);
  std::vector<int> ids;
  ids.reserve(leaves.size());
  for (std::size_t i = 0; i < leaves.size(); ++i)
    ids.push_back(g.leaf(leaves[i], wrt[i]));
  const int out = builder(g, ids);
  const auto& v = g.value(out);
  double acc = 0;
  for (std::size_t i = 0; i < v.size(); ++i) acc += weights[i] * v[i];
  return {acc, g.activation_sign_hash()};
}

}  // namespace

GradCheckResult check_gradients(const BuilderFn& builder,
                                const std::vector<Tensor<double>>& leaves,
                                const std::vector<bool>& wrt,
                                const GradCheckConfig& cfg) {
  GradCheckResult res;
  Rng rng(cfg.seed);

  // Reference pass: analytic gradients of sum(weights * output).
  Graph<double> g;
  std::vector<int> ids;
  for (std::size_t i = 0; i < leaves.size(); ++i)
    ids.push_back(g.leaf(leaves[i], wrt[i]));
  const int out = builder(g, ids);
  const std::size_t n_out = g.value(out).size();
  std::vector<double> weights(n_out);
  for (auto& w : weights) {
    w = rng.uniform(0.5, 1.5);
    if (rng.uniform() < 0.5) w = -w;
  }
  g.backward(out, &weights);

  std::vector<std::vector<double>> analytic(leaves.size());
  for (std::size_t i = 0; i < leaves.size(); ++i)
    if (wrt[i]) {
      const auto& gr = g.grad(ids[i]);
      analytic[i].assign(gr.begin(), gr.end());
      if (analytic[i].empty())
        analytic[i].assign(leaves[i].numel(), 0.0);
    }

  for (std::size_t li = 0; li < leaves.size(); ++li) {
    if (!wrt[li]) continue;
    const std::size_t n = leaves[li].numel();
    std::vector<std::size_t> coords;
    if (n <= cfg.max_coords) {
      coords.resize(n);
      for (std::size_t i = 0; i < n; ++i) coords[i] = i;
    } else {
      for (std::size_t i = 0; i < cfg.max_coords; ++i)
        coords.push_back(std::size_t(rng.below(n)));
      std::sort(coords.begin(), coords.end());
      coords.erase(std::unique(coords.begin(), coords.end()), coords.end());
    }

    std::vector<Tensor<double>> probe = leaves;
    for (std::size_t ci : coords) {
      const double x0 = probe[li].data[ci];
      probe[li].data[ci] = x0 + cfg.step;
      const Eval ep = run(builder, probe, wrt, weights);
      probe[li].data[ci] = x0 - cfg.step;
      const Eval em = run(builder, probe, wrt, weights);
      probe[li].data[ci] = x0;

      if (ep.sign_hash != em.sign_hash) {
        ++res.skipped_kinks;
        continue;
      }
      ++res.checked;
      const double fd = (ep.weighted - em.weighted) / (2.0 * cfg.step);
      const double an = analytic[li][ci];
      const double err = std::abs(fd - an);
      const double scale = std::max(std::abs(fd), std::abs(an));
      const double rel = scale > 0 ? err / scale : 0.0;
      if (err > std::max(cfg.rel_tol * scale, cfg.abs_floor)) {
        ++res.failures;
        if (res.messages.size() < 8)
          res.messages.push_back(
              "leaf " + std::to_string(li) + " coord " + std::to_string(ci) +
              ": analytic " + std::to_string(an) + " fd " +
              std::to_string(fd));
      }
      res.max_rel_err = std::max(res.max_rel_err, rel);
    }
  }
  return res;
}

}  // namespace voxmatch::core
