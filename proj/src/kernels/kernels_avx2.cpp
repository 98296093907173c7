// AVX2 kernel variants. Compiled with -mavx2 only (no -mfma): every
// per-element formula uses the same multiply/add sequence as the scalar
// reference, so results are bit-identical lane by lane. Reductions keep
// vector partial accumulators and differ from the reference only in
// association order.

#include "voxmatch/kernels/kernels.hpp"

#if defined(__AVX2__)

#include <immintrin.h>

namespace voxmatch::kernels {
namespace {

// ---------------------------------------------------------------- float

void axpy_f32(std::size_t n, float a, const float* x, float* y) {
  const __m256 va = _mm256_set1_ps(a);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256 vy = _mm256_loadu_ps(y + i);
    vy = _mm256_add_ps(vy, _mm256_mul_ps(va, _mm256_loadu_ps(x + i)));
    _mm256_storeu_ps(y + i, vy);
  }
  for (; i < n; ++i) y[i] += a * x[i];
}

// [a0..a7],[a8..a15] -> [a0,a2,a4,a6,a8,a10,a12,a14]
static inline __m256 pack_even(__m256 v0, __m256 v1) {
  __m256 s = _mm256_shuffle_ps(v0, v1, _MM_SHUFFLE(2, 0, 2, 0));
  return _mm256_castpd_ps(
      _mm256_permute4x64_pd(_mm256_castps_pd(s), 0xD8));
}

void axpy_gather2_f32(std::size_t n, float a, const float* x, float* y) {
  const __m256 va = _mm256_set1_ps(a);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256 xe = pack_even(_mm256_loadu_ps(x + 2 * i),
                          _mm256_loadu_ps(x + 2 * i + 8));
    __m256 vy = _mm256_loadu_ps(y + i);
    vy = _mm256_add_ps(vy, _mm256_mul_ps(va, xe));
    _mm256_storeu_ps(y + i, vy);
  }
  for (; i < n; ++i) y[i] += a * x[2 * i];
}

void axpy_scatter2_f32(std::size_t n, float a, const float* x, float* y) {
  const __m256 va = _mm256_set1_ps(a);
  const __m256i idx_lo = _mm256_setr_epi32(0, 0, 1, 1, 2, 2, 3, 3);
  const __m256i idx_hi = _mm256_setr_epi32(4, 4, 5, 5, 6, 6, 7, 7);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256 xv = _mm256_loadu_ps(x + i);
    __m256 xlo = _mm256_permutevar8x32_ps(xv, idx_lo);
    __m256 xhi = _mm256_permutevar8x32_ps(xv, idx_hi);
    __m256 y0 = _mm256_loadu_ps(y + 2 * i);
    __m256 y1 = _mm256_loadu_ps(y + 2 * i + 8);
    __m256 s0 = _mm256_add_ps(y0, _mm256_mul_ps(va, xlo));
    __m256 s1 = _mm256_add_ps(y1, _mm256_mul_ps(va, xhi));
    // Even lanes take the updated sum; odd lanes keep their bits.
    y0 = _mm256_blend_ps(y0, s0, 0x55);
    y1 = _mm256_blend_ps(y1, s1, 0x55);
    _mm256_storeu_ps(y + 2 * i, y0);
    _mm256_storeu_ps(y + 2 * i + 8, y1);
  }
  for (; i < n; ++i) y[2 * i] += a * x[i];
}

void add_f32(std::size_t n, const float* a, const float* b, float* out) {
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(out + i, _mm256_add_ps(_mm256_loadu_ps(a + i),
                                            _mm256_loadu_ps(b + i)));
  for (; i < n; ++i) out[i] = a[i] + b[i];
}

void mul_f32(std::size_t n, const float* a, const float* b, float* out) {
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(out + i, _mm256_mul_ps(_mm256_loadu_ps(a + i),
                                            _mm256_loadu_ps(b + i)));
  for (; i < n; ++i) out[i] = a[i] * b[i];
}

void scale_f32(std::size_t n, float a, float* y) {
  const __m256 va = _mm256_set1_ps(a);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(y + i, _mm256_mul_ps(va, _mm256_loadu_ps(y + i)));
  for (; i < n; ++i) y[i] *= a;
}

void relu_f32(std::size_t n, const float* x, float* out) {
  const __m256 zero = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(out + i, _mm256_max_ps(_mm256_loadu_ps(x + i), zero));
  for (; i < n; ++i) out[i] = x[i] > 0.0f ? x[i] : 0.0f;
}

void relu_grad_f32(std::size_t n, const float* x, const float* g, float* gx) {
  const __m256 zero = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256 mask = _mm256_cmp_ps(_mm256_loadu_ps(x + i), zero, _CMP_GT_OQ);
    __m256 upd = _mm256_and_ps(mask, _mm256_loadu_ps(g + i));
    _mm256_storeu_ps(gx + i, _mm256_add_ps(_mm256_loadu_ps(gx + i), upd));
  }
  for (; i < n; ++i) gx[i] += x[i] > 0.0f ? g[i] : 0.0f;
}

void vmax_f32(std::size_t n, const float* x, float* y) {
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(
        y + i, _mm256_max_ps(_mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i)));
  for (; i < n; ++i) y[i] = x[i] > y[i] ? x[i] : y[i];
}

void recip_mul_f32(std::size_t n, const float* x, const float* d, float* out) {
  const __m256 one = _mm256_set1_ps(1.0f);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256 r = _mm256_div_ps(one, _mm256_loadu_ps(d + i));
    _mm256_storeu_ps(out + i, _mm256_mul_ps(_mm256_loadu_ps(x + i), r));
  }
  for (; i < n; ++i) out[i] = x[i] * (1.0f / d[i]);
}

static inline float hsum(__m256 v) {
  __m128 lo = _mm256_castps256_ps128(v);
  __m128 hi = _mm256_extractf128_ps(v, 1);
  lo = _mm_add_ps(lo, hi);
  lo = _mm_add_ps(lo, _mm_movehl_ps(lo, lo));
  lo = _mm_add_ss(lo, _mm_shuffle_ps(lo, lo, 1));
  return _mm_cvtss_f32(lo);
}

float dot_f32(std::size_t n, const float* x, const float* y) {
  __m256 acc0 = _mm256_setzero_ps();
  __m256 acc1 = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 16 <= n; i += 16) {
    acc0 = _mm256_add_ps(acc0, _mm256_mul_ps(_mm256_loadu_ps(x + i),
                                             _mm256_loadu_ps(y + i)));
    acc1 = _mm256_add_ps(acc1, _mm256_mul_ps(_mm256_loadu_ps(x + i + 8),
                                             _mm256_loadu_ps(y + i + 8)));
  }
  for (; i + 8 <= n; i += 8)
    acc0 = _mm256_add_ps(acc0, _mm256_mul_ps(_mm256_loadu_ps(x + i),
                                             _mm256_loadu_ps(y + i)));
  float acc = hsum(_mm256_add_ps(acc0, acc1));
  for (; i < n; ++i) acc += x[i] * y[i];
  return acc;
}

float dot_gather2_f32(std::size_t n, const float* x, const float* y) {
  __m256 acc = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256 xe = pack_even(_mm256_loadu_ps(x + 2 * i),
                          _mm256_loadu_ps(x + 2 * i + 8));
    acc = _mm256_add_ps(acc, _mm256_mul_ps(xe, _mm256_loadu_ps(y + i)));
  }
  float r = hsum(acc);
  for (; i < n; ++i) r += x[2 * i] * y[i];
  return r;
}

float sum_f32(std::size_t n, const float* x) {
  __m256 acc = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    acc = _mm256_add_ps(acc, _mm256_loadu_ps(x + i));
  float r = hsum(acc);
  for (; i < n; ++i) r += x[i];
  return r;
}

// --------------------------------------------------------------- double

void axpy_f64(std::size_t n, double a, const double* x, double* y) {
  const __m256d va = _mm256_set1_pd(a);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d vy = _mm256_loadu_pd(y + i);
    vy = _mm256_add_pd(vy, _mm256_mul_pd(va, _mm256_loadu_pd(x + i)));
    _mm256_storeu_pd(y + i, vy);
  }
  for (; i < n; ++i) y[i] += a * x[i];
}

void add_f64(std::size_t n, const double* a, const double* b, double* out) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(out + i, _mm256_add_pd(_mm256_loadu_pd(a + i),
                                            _mm256_loadu_pd(b + i)));
  for (; i < n; ++i) out[i] = a[i] + b[i];
}

void mul_f64(std::size_t n, const double* a, const double* b, double* out) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(out + i, _mm256_mul_pd(_mm256_loadu_pd(a + i),
                                            _mm256_loadu_pd(b + i)));
  for (; i < n; ++i) out[i] = a[i] * b[i];
}

void scale_f64(std::size_t n, double a, double* y) {
  const __m256d va = _mm256_set1_pd(a);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(y + i, _mm256_mul_pd(va, _mm256_loadu_pd(y + i)));
  for (; i < n; ++i) y[i] *= a;
}

void relu_f64(std::size_t n, const double* x, double* out) {
  const __m256d zero = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(out + i, _mm256_max_pd(_mm256_loadu_pd(x + i), zero));
  for (; i < n; ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
}

void relu_grad_f64(std::size_t n, const double* x, const double* g,
                   double* gx) {
  const __m256d zero = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d mask = _mm256_cmp_pd(_mm256_loadu_pd(x + i), zero, _CMP_GT_OQ);
    __m256d upd = _mm256_and_pd(mask, _mm256_loadu_pd(g + i));
    _mm256_storeu_pd(gx + i, _mm256_add_pd(_mm256_loadu_pd(gx + i), upd));
  }
  for (; i < n; ++i) gx[i] += x[i] > 0.0 ? g[i] : 0.0;
}

void vmax_f64(std::size_t n, const double* x, double* y) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(
        y + i, _mm256_max_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
  for (; i < n; ++i) y[i] = x[i] > y[i] ? x[i] : y[i];
}

void recip_mul_f64(std::size_t n, const double* x, const double* d,
                   double* out) {
  const __m256d one = _mm256_set1_pd(1.0);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d r = _mm256_div_pd(one, _mm256_loadu_pd(d + i));
    _mm256_storeu_pd(out + i, _mm256_mul_pd(_mm256_loadu_pd(x + i), r));
  }
  for (; i < n; ++i) out[i] = x[i] * (1.0 / d[i]);
}

static inline double hsum(__m256d v) {
  __m128d lo = _mm256_castpd256_pd128(v);
  __m128d hi = _mm256_extractf128_pd(v, 1);
  lo = _mm_add_pd(lo, hi);
  return _mm_cvtsd_f64(_mm_add_sd(lo, _mm_unpackhi_pd(lo, lo)));
}

double dot_f64(std::size_t n, const double* x, const double* y) {
  __m256d acc = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    acc = _mm256_add_pd(acc, _mm256_mul_pd(_mm256_loadu_pd(x + i),
                                           _mm256_loadu_pd(y + i)));
  double r = hsum(acc);
  for (; i < n; ++i) r += x[i] * y[i];
  return r;
}

double sum_f64(std::size_t n, const double* x) {
  __m256d acc = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    acc = _mm256_add_pd(acc, _mm256_loadu_pd(x + i));
  double r = hsum(acc);
  for (; i < n; ++i) r += x[i];
  return r;
}

}  // namespace

template <>
const KernelTable<float>* avx2_table<float>() {
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
    k.name = "avx2";
    return k;
  }();
  return &t;
}

template <>
const KernelTable<double>* avx2_table<double>() {
  // The strided entries stay scalar; double mode only runs the small
  // gradient-check shapes.
  static const KernelTable<double> t = [] {
    KernelTable<double> k = scalar_table<double>();
    k.axpy = axpy_f64;
    k.add = add_f64;
    k.mul = mul_f64;
    k.scale = scale_f64;
    k.relu = relu_f64;
    k.relu_grad = relu_grad_f64;
    k.vmax = vmax_f64;
    k.recip_mul = recip_mul_f64;
    k.dot = dot_f64;
    k.sum = sum_f64;
    k.name = "avx2";
    return k;
  }();
  return &t;
}

}  // namespace voxmatch::kernels

#else

namespace voxmatch::kernels {
template <>
const KernelTable<float>* avx2_table<float>() { return nullptr; }
template <>
const KernelTable<double>* avx2_table<double>() { return nullptr; }
}  // namespace voxmatch::kernels

#endif  // __AVX2__
