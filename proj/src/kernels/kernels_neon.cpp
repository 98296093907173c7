// NEON kernel variants for aarch64. Same contract as the AVX2 file:
// explicit mul + add (no fused ops; the build sets -ffp-contract=off),
// bit-exact elementwise class, tolerance-class reductions. vld2/vst2
// give the stride-2 deinterleave directly.

#include "voxmatch/kernels/kernels.hpp"

#if defined(__aarch64__)

#include <arm_neon.h>

namespace voxmatch::kernels {
namespace {

void axpy_f32(std::size_t n, float a, const float* x, float* y) {
  const float32x4_t va = vdupq_n_f32(a);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    float32x4_t vy = vld1q_f32(y + i);
    vy = vaddq_f32(vy, vmulq_f32(va, vld1q_f32(x + i)));
    vst1q_f32(y + i, vy);
  }
  for (; i < n; ++i) y[i] += a * x[i];
}

void axpy_gather2_f32(std::size_t n, float a, const float* x, float* y) {
  const float32x4_t va = vdupq_n_f32(a);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    float32x4x2_t vx = vld2q_f32(x + 2 * i);
    float32x4_t vy = vld1q_f32(y + i);
    vy = vaddq_f32(vy, vmulq_f32(va, vx.val[0]));
    vst1q_f32(y + i, vy);
  }
  for (; i < n; ++i) y[i] += a * x[2 * i];
}

void axpy_scatter2_f32(std::size_t n, float a, const float* x, float* y) {
  const float32x4_t va = vdupq_n_f32(a);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    float32x4x2_t vy = vld2q_f32(y + 2 * i);
    vy.val[0] = vaddq_f32(vy.val[0], vmulq_f32(va, vld1q_f32(x + i)));
    vst2q_f32(y + 2 * i, vy);
  }
  for (; i < n; ++i) y[2 * i] += a * x[i];
}

void add_f32(std::size_t n, const float* a, const float* b, float* out) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    vst1q_f32(out + i, vaddq_f32(vld1q_f32(a + i), vld1q_f32(b + i)));
  for (; i < n; ++i) out[i] = a[i] + b[i];
}

void mul_f32(std::size_t n, const float* a, const float* b, float* out) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    vst1q_f32(out + i, vmulq_f32(vld1q_f32(a + i), vld1q_f32(b + i)));
  for (; i < n; ++i) out[i] = a[i] * b[i];
}

void scale_f32(std::size_t n, float a, float* y) {
  const float32x4_t va = vdupq_n_f32(a);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    vst1q_f32(y + i, vmulq_f32(va, vld1q_f32(y + i)));
  for (; i < n; ++i) y[i] *= a;
}

void relu_f32(std::size_t n, const float* x, float* out) {
  const float32x4_t zero = vdupq_n_f32(0.0f);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    float32x4_t vx = vld1q_f32(x + i);
    // bsl keeps x where x > 0, +0.0 elsewhere (so -0.0 maps to +0.0,
    // matching the scalar ternary).
    uint32x4_t m = vcgtq_f32(vx, zero);
    vst1q_f32(out + i, vbslq_f32(m, vx, zero));
  }
  for (; i < n; ++i) out[i] = x[i] > 0.0f ? x[i] : 0.0f;
}

void relu_grad_f32(std::size_t n, const float* x, const float* g, float* gx) {
  const float32x4_t zero = vdupq_n_f32(0.0f);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    uint32x4_t m = vcgtq_f32(vld1q_f32(x + i), zero);
    float32x4_t upd = vbslq_f32(m, vld1q_f32(g + i), zero);
    vst1q_f32(gx + i, vaddq_f32(vld1q_f32(gx + i), upd));
  }
  for (; i < n; ++i) gx[i] += x[i] > 0.0f ? g[i] : 0.0f;
}

void vmax_f32(std::size_t n, const float* x, float* y) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    float32x4_t vx = vld1q_f32(x + i);
    float32x4_t vy = vld1q_f32(y + i);
    // Select x only on strict greater-than, like the scalar ternary
    // (vmaxq differs on signed-zero ties).
    vst1q_f32(y + i, vbslq_f32(vcgtq_f32(vx, vy), vx, vy));
  }
  for (; i < n; ++i) y[i] = x[i] > y[i] ? x[i] : y[i];
}

void recip_mul_f32(std::size_t n, const float* x, const float* d, float* out) {
  const float32x4_t one = vdupq_n_f32(1.0f);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    float32x4_t r = vdivq_f32(one, vld1q_f32(d + i));
    vst1q_f32(out + i, vmulq_f32(vld1q_f32(x + i), r));
  }
  for (; i < n; ++i) out[i] = x[i] * (1.0f / d[i]);
}

float dot_f32(std::size_t n, const float* x, const float* y) {
  float32x4_t acc0 = vdupq_n_f32(0.0f);
  float32x4_t acc1 = vdupq_n_f32(0.0f);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    acc0 = vaddq_f32(acc0, vmulq_f32(vld1q_f32(x + i), vld1q_f32(y + i)));
    acc1 = vaddq_f32(acc1,
                     vmulq_f32(vld1q_f32(x + i + 4), vld1q_f32(y + i + 4)));
  }
  for (; i + 4 <= n; i += 4)
    acc0 = vaddq_f32(acc0, vmulq_f32(vld1q_f32(x + i), vld1q_f32(y + i)));
  float r = vaddvq_f32(vaddq_f32(acc0, acc1));
  for (; i < n; ++i) r += x[i] * y[i];
  return r;
}

float dot_gather2_f32(std::size_t n, const float* x, const float* y) {
  float32x4_t acc = vdupq_n_f32(0.0f);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    float32x4x2_t vx = vld2q_f32(x + 2 * i);
    acc = vaddq_f32(acc, vmulq_f32(vx.val[0], vld1q_f32(y + i)));
  }
  float r = vaddvq_f32(acc);
  for (; i < n; ++i) r += x[2 * i] * y[i];
  return r;
}

float sum_f32(std::size_t n, const float* x) {
  float32x4_t acc = vdupq_n_f32(0.0f);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) acc = vaddq_f32(acc, vld1q_f32(x + i));
  float r = vaddvq_f32(acc);
  for (; i < n; ++i) r += x[i];
  return r;
}

}  // namespace

template <>
const KernelTable<float>* neon_table<float>() {
  static const KernelTable<float> t = [] {
    KernelTable<float> k = scalar_table<float>();
    k.axpy = axpy_f32;
    k.axpy_gather2 = axpy_gather2_f32;
    k.axpy_scatter2 = axpy_scatter2_f32;
    k.add = add_f32;
    k.mul = mul_f32;
    k.scale = scale_f32;
    k.relu = relu_f32;
    k.relu_grad = relu_grad_f32;
    k.vmax = vmax_f32;
    k.recip_mul = recip_mul_f32;
    k.dot = dot_f32;
    k.dot_gather2 = dot_gather2_f32;
    k.sum = sum_f32;
    k.name = "neon";
    return k;
  }();
  return &t;
}

template <>
const KernelTable<double>* neon_table<double>() {
  // Double mode is gradcheck-only; the scalar path is fast enough there.
  static const KernelTable<double> t = [] {
    KernelTable<double> k = scalar_table<double>();
    k.name = "neon";
    return k;
  }();
  return &t;
}

}  // namespace voxmatch::kernels

#else

namespace voxmatch::kernels {
template <>
const KernelTable<float>* neon_table<float>() { return nullptr; }
template <>
const KernelTable<double>* neon_table<double>() { return nullptr; }
}  // namespace voxmatch::kernels

#endif  // __aarch64__
