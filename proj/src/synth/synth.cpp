#include "voxmatch/synth/synth.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

#include "voxmatch/core/rng.hpp"

namespace voxmatch::synth {
namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

struct Vec {
  double x = 0, y = 0, z = 0;
};

// Box-local frame, consistent with the detection footprint convention.
struct BoxFrame {
  Vec c;
  double hw, hh, hl;  // half extents along local x, y, z
  double cy, sy;      // cos/sin yaw

  Vec to_local(const Vec& p) const {
    const double wx = p.x - c.x, wz = p.z - c.z;
    return {cy * wx - sy * wz, p.y - c.y, sy * wx + cy * wz};
  }
  Vec rot_local(const Vec& d) const {
    return {cy * d.x - sy * d.z, d.y, sy * d.x + cy * d.z};
  }
};

// Entry distance of the ray o + t*dir, or infinity. dir.z is 1, so the
// returned t is the camera-space depth of the hit.
double ray_box(const BoxFrame& b, const Vec& o, const Vec& dir) {
  const Vec ol = b.to_local(o);
  const Vec dl = b.rot_local(dir);
  double tmin = -kInf, tmax = kInf;
  const double olv[3] = {ol.x, ol.y, ol.z};
  const double dlv[3] = {dl.x, dl.y, dl.z};
  const double half[3] = {b.hw, b.hh, b.hl};
  for (int a = 0; a < 3; ++a) {
    if (std::abs(dlv[a]) < 1e-12) {
      if (std::abs(olv[a]) > half[a]) return kInf;
      continue;
    }
    double t0 = (-half[a] - olv[a]) / dlv[a];
    double t1 = (half[a] - olv[a]) / dlv[a];
    if (t0 > t1) std::swap(t0, t1);
    tmin = std::max(tmin, t0);
    tmax = std::min(tmax, t1);
    if (tmax < tmin) return kInf;
  }
  return tmin > 1e-9 ? tmin : kInf;
}

double lattice(std::uint64_t seed, std::int64_t ix, std::int64_t iy,
               std::int64_t iz) {
  using core::hash_combine;
  const std::uint64_t h = hash_combine(
      hash_combine(hash_combine(seed, std::uint64_t(ix)), std::uint64_t(iy)),
      std::uint64_t(iz));
  return double(h >> 11) * 0x1.0p-53;
}

// Trilinear value noise: band-limited by construction, so neighbouring
// rays that land a fraction of a pixel apart see nearly the same albedo.
double vnoise(std::uint64_t seed, double x, double y, double z) {
  const double fx = std::floor(x), fy = std::floor(y), fz = std::floor(z);
  const auto ix = std::int64_t(fx), iy = std::int64_t(fy),
             iz = std::int64_t(fz);
  const double tx = x - fx, ty = y - fy, tz = z - fz;
  double c[2][2][2];
  for (int a = 0; a < 2; ++a)
    for (int b = 0; b < 2; ++b)
      for (int d = 0; d < 2; ++d)
        c[a][b][d] = lattice(seed, ix + a, iy + b, iz + d);
  auto lerp = [](double u, double v, double t) { return u + (v - u) * t; };
  const double x00 = lerp(c[0][0][0], c[1][0][0], tx);
  const double x10 = lerp(c[0][1][0], c[1][1][0], tx);
  const double x01 = lerp(c[0][0][1], c[1][0][1], tx);
  const double x11 = lerp(c[0][1][1], c[1][1][1], tx);
  const double y0 = lerp(x00, x10, ty);
  const double y1 = lerp(x01, x11, ty);
  return lerp(y0, y1, tz);
}

float shade(std::uint64_t surface_seed, const Vec& p, const SceneSpec& s) {
  static constexpr double kScale[3] = {0.4, 1.0, 2.3};
  static constexpr double kWeight[3] = {0.55, 0.3, 0.15};
  double v = 0;
  for (int k = 0; k < 3; ++k) {
    const double sc = kScale[k] * s.texture_density;
    v += kWeight[k] *
         (2.0 * vnoise(surface_seed + std::uint64_t(k) * 0x9E37ull,
                       p.x * sc, p.y * sc, p.z * sc) -
          1.0);
  }
  const double tone =
      0.24 * (double(core::hash_u64(surface_seed) >> 11) * 0x1.0p-53 - 0.5);
  const double val = s.ground.albedo_bias + tone + s.ground.albedo_scale * v;
  return float(std::clamp(val, 0.02, 0.98));
}

struct ViewBuffers {
  std::vector<double> depth;  // camera z of the nearest hit, inf for sky
  std::vector<int> id;        // -1 sky, 0 ground, 1+i box i
};

void trace_view(const SceneSpec& s, const std::vector<BoxFrame>& frames,
                double origin_x, std::vector<float>& image,
                ViewBuffers& buf) {
  const int H = s.height, W = s.width;
  image.assign(std::size_t(H) * W, 0.72f);
  buf.depth.assign(std::size_t(H) * W, kInf);
  buf.id.assign(std::size_t(H) * W, -1);
  const Vec o{origin_x, 0.0, 0.0};
  const std::uint64_t tex_seed = core::hash_combine(s.seed, 0x7e67u);

  for (int v = 0; v < H; ++v) {
    const double diry = (double(v) - s.cam.cv) / s.cam.f;
    for (int u = 0; u < W; ++u) {
      const Vec dir{(double(u) - s.cam.cu) / s.cam.f, diry, 1.0};
      double best = kInf;
      int id = -1;
      if (s.ground.enabled && diry > 1e-12) {
        best = s.ground.height / diry;
        id = 0;
      }
      for (std::size_t i = 0; i < frames.size(); ++i) {
        const double t = ray_box(frames[i], o, dir);
        if (t < best) {
          best = t;
          id = int(i) + 1;
        }
      }
      const std::size_t px = std::size_t(v) * W + u;
      if (id < 0) continue;
      buf.depth[px] = best;
      buf.id[px] = id;
      const Vec p{o.x + best * dir.x, best * dir.y, best};
      image[px] = shade(core::hash_combine(tex_seed, std::uint64_t(id)), p, s);
    }
  }
}

}  // namespace

void SceneSpec::validate() const {
  cam.validate();
  if (height <= 0 || width <= 0 || d_max < 2)
    throw std::invalid_argument("scene: empty image or disparity range");
  const double fb = cam.f * cam.b;
  if (ground.enabled) {
    if (!(ground.height > 0))
      throw std::invalid_argument("scene: camera must sit above the ground");
    const double dmax_ground =
        cam.b * (double(height - 1) - cam.cv) / ground.height;
    if (dmax_ground > double(d_max - 1))
      throw std::invalid_argument("scene: ground exceeds the disparity range");
  }
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    const auto& b = boxes[i];
    if (!(b.w > 0) || !(b.h > 0) || !(b.l > 0))
      throw std::invalid_argument("scene: box " + std::to_string(i) +
                                  " has a non-positive size");
    const double cy = std::cos(b.yaw), sy = std::sin(b.yaw);
    for (int corner = 0; corner < 8; ++corner) {
      const double dx = (corner & 1 ? 0.5 : -0.5) * b.w;
      const double dz = (corner & 2 ? 0.5 : -0.5) * b.l;
      const double z = b.z - dx * sy + dz * cy;
      if (!(z > 0))
        throw std::invalid_argument("scene: box " + std::to_string(i) +
                                    " reaches behind the camera");
      const double d = fb / z;
      if (d < 1.0 || d > double(d_max - 1))
        throw std::invalid_argument("scene: box " + std::to_string(i) +
                                    " leaves the disparity range");
    }
  }
}

RenderedScene render(const SceneSpec& spec) {
  spec.validate();
  const int H = spec.height, W = spec.width;
  const double fb = spec.cam.f * spec.cam.b;

  std::vector<BoxFrame> frames;
  frames.reserve(spec.boxes.size());
  for (const auto& b : spec.boxes)
    frames.push_back({{b.x, b.y, b.z},
                      0.5 * b.w,
                      0.5 * b.h,
                      0.5 * b.l,
                      std::cos(b.yaw),
                      std::sin(b.yaw)});

  RenderedScene out;
  out.height = H;
  out.width = W;
  ViewBuffers lb, rb;
  trace_view(spec, frames, 0.0, out.left, lb);
  trace_view(spec, frames, spec.cam.b, out.right, rb);

  out.gt_disp.assign(std::size_t(H) * W, 0.0f);
  out.occlusion.assign(std::size_t(H) * W, 0);
  for (int v = 0; v < H; ++v)
    for (int u = 0; u < W; ++u) {
      const std::size_t px = out.at(v, u);
      if (lb.id[px] < 0) {
        out.occlusion[px] = 1;  // sky: nothing to match
        continue;
      }
      const double d = fb / lb.depth[px];
      if (!(d >= 0.0) || d >= double(spec.d_max))
        throw std::logic_error("render: disparity left its range");
      out.gt_disp[px] = float(d);
      const double ur = double(u) - d;
      if (ur < -0.5) {
        out.occlusion[px] = 1;  // left of the right image
        continue;
      }
      const int un = std::clamp(int(std::lround(ur)), 0, W - 1);
      const double zr = rb.depth[out.at(v, un)];
      if (zr < lb.depth[px] * (1.0 - 1e-3) - 1e-3) out.occlusion[px] = 1;
    }

  for (std::size_t i = 0; i < spec.boxes.size(); ++i) {
    int total = 0, occluded = 0;
    for (std::size_t px = 0; px < lb.id.size(); ++px)
      if (lb.id[px] == int(i) + 1) {
        ++total;
        if (out.occlusion[px]) ++occluded;
      }
    const auto& b = spec.boxes[i];
    detect::LabeledBox lbx;
    lbx.box.x = b.x;
    lbx.box.y = b.y;
    lbx.box.z = b.z;
    lbx.box.w = b.w;
    lbx.box.h = b.h;
    lbx.box.l = b.l;
    lbx.box.yaw = b.yaw;
    lbx.box.conf = 1.0;
    const double occ_frac = total > 0 ? double(occluded) / total : 1.0;
    if (occ_frac <= 0.1 && b.z <= 12.0)
      lbx.difficulty = detect::Difficulty::kEasy;
    else if (occ_frac <= 0.35 && b.z <= 16.0)
      lbx.difficulty = detect::Difficulty::kModerate;
    else
      lbx.difficulty = detect::Difficulty::kHard;
    out.labels.push_back(lbx);
    out.visible_px.push_back(total - occluded);
  }
  return out;
}

namespace {

// One attempt at a scene layout; visibility is checked by the caller.
SceneSpec propose_scene(core::Rng& rng, std::uint64_t scene_seed,
                        bool occluder_pair) {
  SceneSpec s;
  s.seed = scene_seed;
  const int n_boxes = occluder_pair ? 2 : 1 + int(rng.below(3));

  auto sample_box = [&](double z) {
    BoxPlacement b;
    b.z = z;
    b.w = rng.uniform(1.6, 2.1);
    b.h = rng.uniform(1.35, 1.75);
    b.l = rng.uniform(3.4, 4.6);
    b.yaw = rng.uniform(-M_PI, M_PI);
    b.y = s.ground.height - 0.5 * b.h;
    const double radius = 0.5 * std::hypot(b.w, b.l);
    const double lim =
        std::max(0.3, z * (0.5 * s.width - 24.0) / s.cam.f - radius);
    b.x = rng.uniform(-lim, lim);
    return b;
  };

  if (occluder_pair) {
    BoxPlacement front = sample_box(rng.uniform(6.0, 9.0));
    BoxPlacement back = sample_box(front.z + rng.uniform(3.0, 5.0));
    // Same line of sight, nudged sideways so the far box peeks out.
    back.x = front.x * back.z / front.z +
             (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.9, 1.6);
    s.boxes = {front, back};
    return s;
  }

  for (int i = 0; i < n_boxes; ++i) {
    for (int attempt = 0; attempt < 64; ++attempt) {
      BoxPlacement b = sample_box(rng.uniform(5.0, 15.0));
      bool clear = true;
      for (const auto& other : s.boxes) {
        const double dist = std::hypot(b.x - other.x, b.z - other.z);
        const double ra = 0.5 * std::hypot(b.w, b.l);
        const double rb = 0.5 * std::hypot(other.w, other.l);
        // Keep footprints disjoint and lines of sight separated.
        const double du = s.cam.f * std::abs(b.x / b.z - other.x / other.z);
        if (dist < ra + rb + 1.0 || du < 40.0) clear = false;
      }
      if (clear) {
        s.boxes.push_back(b);
        break;
      }
    }
  }
  return s;
}

}  // namespace

std::vector<SceneSpec> make_dataset_specs(int n, std::uint64_t seed,
                                          double occluder_mix) {
  if (n < 1) throw std::invalid_argument("make_dataset: need n >= 1");
  std::vector<SceneSpec> specs;
  specs.reserve(std::size_t(n));
  for (int i = 0; i < n; ++i) {
    SceneSpec accepted;
    bool ok = false;
    for (int attempt = 0; attempt < 64 && !ok; ++attempt) {
      const std::uint64_t scene_seed = core::hash_combine(
          seed, std::uint64_t(i) * 131 + std::uint64_t(attempt));
      core::Rng rng(scene_seed);
      const bool pair = rng.uniform() < occluder_mix;
      SceneSpec cand = propose_scene(rng, scene_seed, pair);
      try {
        cand.validate();
      } catch (const std::invalid_argument&) {
        continue;
      }
      const RenderedScene scene = render(cand);
      ok = !scene.visible_px.empty();
      for (int px : scene.visible_px)
        if (px < 50) ok = false;
      if (ok) accepted = cand;
    }
    if (!ok)
      throw std::runtime_error("make_dataset: could not stage scene " +
                               std::to_string(i));
    specs.push_back(accepted);
  }
  return specs;
}

std::vector<RenderedScene> make_dataset(int n, std::uint64_t seed,
                                        double occluder_mix) {
  const auto specs = make_dataset_specs(n, seed, occluder_mix);
  std::vector<RenderedScene> scenes;
  scenes.reserve(specs.size());
  for (const auto& s : specs) scenes.push_back(render(s));
  return scenes;
}

}  // namespace voxmatch::synth
