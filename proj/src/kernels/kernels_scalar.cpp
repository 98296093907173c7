// Scalar reference kernels. These define the semantics the SIMD variants
// must reproduce; keep the formulas in exact correspondence with the
// vector code (no fused multiply-add, explicit reciprocal in recip_mul).

#include "voxmatch/kernels/kernels.hpp"

namespace voxmatch::kernels {
namespace {

template <class T>
void axpy_(std::size_t n, T a, const T* x, T* y) {
  for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

template <class T>
void axpy_gather2_(std::size_t n, T a, const T* x, T* y) {
  for (std::size_t i = 0; i < n; ++i) y[i] += a * x[2 * i];
}

template <class T>
void axpy_scatter2_(std::size_t n, T a, const T* x, T* y) {
  for (std::size_t i = 0; i < n; ++i) y[2 * i] += a * x[i];
}

template <class T>
void add_(std::size_t n, const T* a, const T* b, T* out) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
}

template <class T>
void mul_(std::size_t n, const T* a, const T* b, T* out) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
}

template <class T>
void scale_(std::size_t n, T a, T* y) {
  for (std::size_t i = 0; i < n; ++i) y[i] *= a;
}

template <class T>
void relu_(std::size_t n, const T* x, T* out) {
  for (std::size_t i = 0; i < n; ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
}

template <class T>
void relu_grad_(std::size_t n, const T* x, const T* g, T* gx) {
  // Always performs the add so masked lanes behave like the SIMD blend.
  for (std::size_t i = 0; i < n; ++i) gx[i] += x[i] > T(0) ? g[i] : T(0);
}

template <class T>
void vmax_(std::size_t n, const T* x, T* y) {
  for (std::size_t i = 0; i < n; ++i) y[i] = x[i] > y[i] ? x[i] : y[i];
}

template <class T>
void recip_mul_(std::size_t n, const T* x, const T* d, T* out) {
  for (std::size_t i = 0; i < n; ++i) out[i] = x[i] * (T(1) / d[i]);
}

template <class T>
T dot_(std::size_t n, const T* x, const T* y) {
  T acc = 0;
  for (std::size_t i = 0; i < n; ++i) acc += x[i] * y[i];
  return acc;
}

template <class T>
T dot_gather2_(std::size_t n, const T* x, const T* y) {
  T acc = 0;
  for (std::size_t i = 0; i < n; ++i) acc += x[2 * i] * y[i];
  return acc;
}

template <class T>
T sum_(std::size_t n, const T* x) {
  T acc = 0;
  for (std::size_t i = 0; i < n; ++i) acc += x[i];
  return acc;
}

template <class T>
KernelTable<T> make_table() {
  KernelTable<T> t;
  t.axpy = axpy_<T>;
  t.axpy_gather2 = axpy_gather2_<T>;
  t.axpy_scatter2 = axpy_scatter2_<T>;
  t.add = add_<T>;
  t.mul = mul_<T>;
  t.scale = scale_<T>;
  t.relu = relu_<T>;
  t.relu_grad = relu_grad_<T>;
  t.vmax = vmax_<T>;
  t.recip_mul = recip_mul_<T>;
  t.dot = dot_<T>;
  t.dot_gather2 = dot_gather2_<T>;
  t.sum = sum_<T>;
  t.name = "scalar";
  return t;
}

}  // namespace

template <>
const KernelTable<float>& scalar_table<float>() {
  static const KernelTable<float> t = make_table<float>();
  return t;
}

template <>
const KernelTable<double>& scalar_table<double>() {
  static const KernelTable<double> t = make_table<double>();
  return t;
}

}  // namespace voxmatch::kernels
