#pragma once

#include <stdexcept>

namespace voxmatch::core {

// Rectified pinhole pair: shared intrinsics, horizontal baseline. Volume
// coordinates (u,v,d) are pixel column, pixel row, disparity.
struct Camera {
  double f = 0;   // focal length, pixels
  double cu = 0;  // principal point column
  double cv = 0;  // principal point row
  double b = 0;   // baseline, meters

  void validate() const {
    if (!(f > 0) || !(b > 0))
      throw std::invalid_argument("camera: need f > 0 and b > 0");
  }
};

struct Vec3 {
  double x = 0, y = 0, z = 0;
};

// z from disparity, then the pinhole ray. d must be positive.
inline Vec3 volume_to_metric(double u, double v, double d,
                             const Camera& cam) {
  const double z = cam.f * cam.b / d;
  return {(u - cam.cu) * z / cam.f, (v - cam.cv) * z / cam.f, z};
}

// Inverse of volume_to_metric; z must be positive.
inline Vec3 metric_to_volume(double x, double y, double z,
                             const Camera& cam) {
  return {cam.cu + x * cam.f / z, cam.cv + y * cam.f / z,
          cam.f * cam.b / z};
}

}  // namespace voxmatch::core
