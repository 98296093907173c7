#pragma once

// Monte-Carlo reference for ground-plane overlap of rotated boxes. Kept
// free of the production geometry code on purpose: only the box fields
// are shared, so the two computations can only agree by being right.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>

#include "voxmatch/core/rng.hpp"
#include "voxmatch/detect/boxes.hpp"

namespace iou_oracle {

inline bool footprint_contains(const voxmatch::detect::ObjectBox& b,
                               double px, double pz) {
  const double qx = px - b.x, qz = pz - b.z;
  const double c = std::cos(b.yaw), s = std::sin(b.yaw);
  const double dx = qx * c - qz * s;
  const double dz = qx * s + qz * c;
  return std::abs(dx) <= b.w / 2.0 && std::abs(dz) <= b.l / 2.0;
}

// Jittered stratified sampling over the joint bounding rectangle: one
// probe per grid cell, uniformly placed inside it. Only cells crossed by
// a footprint edge contribute variance, so the error falls off like
// N^(-3/4) rather than N^(-1/2); 1e5 probes already land well inside
// 2e-3 for desk-scale boxes.
inline double mc_bev_iou(const voxmatch::detect::ObjectBox& a,
                         const voxmatch::detect::ObjectBox& b,
                         std::size_t samples, voxmatch::core::Rng& rng) {
  const auto reach = [](const voxmatch::detect::ObjectBox& q) {
    return std::hypot(q.w / 2.0, q.l / 2.0);
  };
  const double x0 = std::min(a.x - reach(a), b.x - reach(b));
  const double x1 = std::max(a.x + reach(a), b.x + reach(b));
  const double z0 = std::min(a.z - reach(a), b.z - reach(b));
  const double z1 = std::max(a.z + reach(a), b.z + reach(b));
  const std::size_t m =
      std::max<std::size_t>(1, std::size_t(std::sqrt(double(samples))));
  const double sx = (x1 - x0) / double(m), sz = (z1 - z0) / double(m);
  std::size_t inter = 0, uni = 0;
  for (std::size_t gz = 0; gz < m; ++gz)
    for (std::size_t gx = 0; gx < m; ++gx) {
      const double px = x0 + (double(gx) + rng.uniform()) * sx;
      const double pz = z0 + (double(gz) + rng.uniform()) * sz;
      const bool ina = footprint_contains(a, px, pz);
      const bool inb = footprint_contains(b, px, pz);
      inter += ina && inb ? 1 : 0;
      uni += ina || inb ? 1 : 0;
    }
  return uni == 0 ? 0.0 : double(inter) / double(uni);
}

// Self-seeding variant: the probe set is a deterministic function of the
// pair, so calls stay reproducible without threading an Rng through.
inline double mc_bev_iou(const voxmatch::detect::ObjectBox& a,
                         const voxmatch::detect::ObjectBox& b,
                         std::size_t samples) {
  std::uint64_t seed = 0x51ab;
  for (double v : {a.x, a.z, a.w, a.l, a.yaw, b.x, b.z, b.w, b.l, b.yaw})
    seed = voxmatch::core::hash_combine(
        seed, std::bit_cast<std::uint64_t>(v));
  voxmatch::core::Rng rng(seed);
  return mc_bev_iou(a, b, samples, rng);
}

}  // namespace iou_oracle
