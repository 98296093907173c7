#pragma once

#include <cstddef>
#include <string_view>

namespace voxmatch::kernels {

// Data-parallel inner loops behind the tensor engine. Every entry has a
// scalar reference implementation and, where the platform provides them,
// SIMD variants selected once at runtime.
//
// Equivalence classes (checked by tests/test_kernels.cpp):
//   bit-exact:  axpy, axpy_gather2, axpy_scatter2, add, mul, scale, relu,
//               relu_grad, vmax, recip_mul  (same per-element formula and
//               accumulation order as the scalar reference; no FMA)
//   tolerance:  dot, dot_gather2, sum  (vector variants keep partial
//               accumulators, so the association order differs)
template <class T>
struct KernelTable {
  // y[i] += a * x[i]
  void (*axpy)(std::size_t n, T a, const T* x, T* y);
  // y[i] += a * x[2*i]
  void (*axpy_gather2)(std::size_t n, T a, const T* x, T* y);
  // y[2*i] += a * x[i]
  void (*axpy_scatter2)(std::size_t n, T a, const T* x, T* y);
  // out[i] = a[i] + b[i]
  void (*add)(std::size_t n, const T* a, const T* b, T* out);
  // out[i] = a[i] * b[i]
  void (*mul)(std::size_t n, const T* a, const T* b, T* out);
  // y[i] *= a
  void (*scale)(std::size_t n, T a, T* y);
  // out[i] = max(x[i], 0)
  void (*relu)(std::size_t n, const T* x, T* out);
  // gx[i] += (x[i] > 0) ? g[i] : 0
  void (*relu_grad)(std::size_t n, const T* x, const T* g, T* gx);
  // y[i] = max(x[i], y[i])
  void (*vmax)(std::size_t n, const T* x, T* y);
  // out[i] = x[i] * (1 / d[i])   (reciprocal taken once per element)
  void (*recip_mul)(std::size_t n, const T* x, const T* d, T* out);
  // sum_i x[i] * y[i]
  T (*dot)(std::size_t n, const T* x, const T* y);
  // sum_i x[2*i] * y[i]
  T (*dot_gather2)(std::size_t n, const T* x, const T* y);
  // sum_i x[i]
  T (*sum)(std::size_t n, const T* x);

  const char* name;
};

template <class T>
const KernelTable<T>& scalar_table();

// Null when the build or the running CPU lacks the instruction set.
template <class T>
const KernelTable<T>* avx2_table();
template <class T>
const KernelTable<T>* neon_table();

// Best table for this process. Resolved once; override with
// force_backend() or the VOXMATCH_KERNELS environment variable
// ("scalar", "avx2", "neon").
template <class T>
const KernelTable<T>& active();

// name = "" restores automatic selection. Throws on unknown/unavailable.
void force_backend(std::string_view name);
std::string_view active_backend_name();

}  // namespace voxmatch::kernels
