#include "voxmatch/disparity/disparity.hpp"

#include <cmath>
#include <stdexcept>

namespace voxmatch::disparity {

DepthMap disparity_to_depth(const core::Tensor<float>& disp,
                            const std::vector<std::uint8_t>& valid,
                            double focal, double baseline) {
  if (!valid.empty() && valid.size() != disp.data.size())
    throw std::invalid_argument("disparity_to_depth: mask size mismatch");
  if (!(focal > 0.0) || !(baseline > 0.0))
    throw std::invalid_argument("disparity_to_depth: need f > 0 and b > 0");
  DepthMap out;
  out.shape = disp.shape;
  out.z.resize(disp.data.size(), 0.0);
  out.valid.resize(disp.data.size(), 0);
  const double fb = focal * baseline;
  for (std::size_t i = 0; i < disp.data.size(); ++i) {
    const double d = disp.data[i];
    const bool ok = (valid.empty() || valid[i]) && std::isfinite(d) &&
                    d > kMinDisparity;
    if (ok) {
      out.z[i] = fb / d;
      out.valid[i] = 1;
    }
  }
  return out;
}

DisparityMap depth_to_disparity(const DepthMap& depth, double focal,
                                double baseline) {
  if (!(focal > 0.0) || !(baseline > 0.0))
    throw std::invalid_argument("depth_to_disparity: need f > 0 and b > 0");
  DisparityMap out;
  out.shape = depth.shape;
  out.d.resize(depth.z.size(), 0.0);
  out.valid.resize(depth.z.size(), 0);
  const double fb = focal * baseline;
  for (std::size_t i = 0; i < depth.z.size(); ++i) {
    const double z = depth.z[i];
    if (depth.valid[i] && std::isfinite(z) && z > 1e-6) {
      out.d[i] = fb / z;
      out.valid[i] = 1;
    }
  }
  return out;
}

DepthMetrics depth_metrics(const DepthMap& pred, const DepthMap& gt) {
  if (pred.z.size() != gt.z.size())
    throw std::invalid_argument("depth_metrics: map sizes differ");
  DepthMetrics m;
  double abs_rel = 0.0, sq_rel = 0.0, sq = 0.0;
  for (std::size_t i = 0; i < gt.z.size(); ++i) {
    if (!pred.valid[i] || !gt.valid[i]) continue;
    const double e = pred.z[i] - gt.z[i];
    abs_rel += std::abs(e) / gt.z[i];
    sq_rel += e * e / gt.z[i];
    sq += e * e;
    ++m.count;
  }
  if (m.count == 0)
    throw std::invalid_argument("depth_metrics: no jointly valid pixels");
  m.abs_rel = abs_rel / double(m.count);
  m.sq_rel = sq_rel / double(m.count);
  m.rmse = std::sqrt(sq / double(m.count));
  return m;
}

}  // namespace voxmatch::disparity
