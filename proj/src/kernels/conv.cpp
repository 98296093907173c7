#include "voxmatch/kernels/conv.hpp"

#include <algorithm>
#include <cstring>

#include "voxmatch/kernels/kernels.hpp"

namespace voxmatch::kernels {
namespace {

// Output-index range [o0, o1) for which stride*o + off lands in [0, extent).
struct Range {
  int o0, o1;
  int len() const { return o1 > o0 ? o1 - o0 : 0; }
};

Range valid_range(int out_extent, int in_extent, int off, int stride) {
  int o0 = 0;
  if (off < 0) o0 = (-off + stride - 1) / stride;
  int o1 = out_extent;
  if (in_extent - 1 - off < 0)
    o1 = 0;
  else
    o1 = std::min(out_extent, (in_extent - 1 - off) / stride + 1);
  return {o0, o1};
}

int clampi(int v, int lo, int hi) { return v < lo ? lo : (v > hi ? hi : v); }

template <class T>
void fill_bias(T* out, const T* bias, int cout, std::size_t plane) {
  for (int co = 0; co < cout; ++co) {
    T v = bias ? bias[co] : T(0);
    std::fill(out + co * plane, out + (co + 1) * plane, v);
  }
}

}  // namespace

// ----------------------------------------------------------------- 2D

template <class T>
void conv2d_fwd(const Conv2dShape& s, const T* in, const T* weight,
                const T* bias, T* out) {
  const auto& K = active<T>();
  const int ho = s.out_h(), wo = s.out_w();
  const std::size_t in_plane = std::size_t(s.h) * s.w;
  const std::size_t out_plane = std::size_t(ho) * wo;
  const std::size_t wsz = std::size_t(s.kh) * s.kw;
  fill_bias(out, bias, s.cout, out_plane);

  for (int oy = 0; oy < ho; ++oy) {
    for (int ci = 0; ci < s.cin; ++ci) {
      for (int ky = 0; ky < s.kh; ++ky) {
        int iy = oy + ky - s.pad;
        if (s.pad_mode == PadMode::kReplicate)
          iy = clampi(iy, 0, s.h - 1);
        else if (iy < 0 || iy >= s.h)
          continue;
        const T* in_row = in + ci * in_plane + std::size_t(iy) * s.w;
        for (int co = 0; co < s.cout; ++co) {
          T* out_row = out + co * out_plane + std::size_t(oy) * wo;
          const T* wrow = weight + (co * s.cin + ci) * wsz + ky * s.kw;
          for (int kx = 0; kx < s.kw; ++kx) {
            const T wv = wrow[kx];
            const int off = kx - s.pad;
            Range r = valid_range(wo, s.w, off, 1);
            if (r.len() > 0)
              K.axpy(std::size_t(r.len()), wv, in_row + r.o0 + off,
                     out_row + r.o0);
            if (s.pad_mode == PadMode::kReplicate) {
              for (int ox = 0; ox < std::min(r.o0, wo); ++ox)
                out_row[ox] += wv * in_row[0];
              for (int ox = std::max(r.o1, 0); ox < wo; ++ox)
                out_row[ox] += wv * in_row[s.w - 1];
            }
          }
        }
      }
    }
  }
}

template <class T>
void conv2d_bwd_input(const Conv2dShape& s, const T* weight, const T* gout,
                      T* gin) {
  const auto& K = active<T>();
  const int ho = s.out_h(), wo = s.out_w();
  const std::size_t in_plane = std::size_t(s.h) * s.w;
  const std::size_t out_plane = std::size_t(ho) * wo;
  const std::size_t wsz = std::size_t(s.kh) * s.kw;

  for (int oy = 0; oy < ho; ++oy) {
    for (int ci = 0; ci < s.cin; ++ci) {
      for (int ky = 0; ky < s.kh; ++ky) {
        int iy = oy + ky - s.pad;
        if (s.pad_mode == PadMode::kReplicate)
          iy = clampi(iy, 0, s.h - 1);
        else if (iy < 0 || iy >= s.h)
          continue;
        T* gin_row = gin + ci * in_plane + std::size_t(iy) * s.w;
        for (int co = 0; co < s.cout; ++co) {
          const T* gout_row = gout + co * out_plane + std::size_t(oy) * wo;
          const T* wrow = weight + (co * s.cin + ci) * wsz + ky * s.kw;
          for (int kx = 0; kx < s.kw; ++kx) {
            const T wv = wrow[kx];
            const int off = kx - s.pad;
            Range r = valid_range(wo, s.w, off, 1);
            if (r.len() > 0)
              K.axpy(std::size_t(r.len()), wv, gout_row + r.o0,
                     gin_row + r.o0 + off);
            if (s.pad_mode == PadMode::kReplicate) {
              const int left = std::min(r.o0, wo);
              if (left > 0)
                gin_row[0] += wv * K.sum(std::size_t(left), gout_row);
              const int rs = std::max(r.o1, 0);
              if (rs < wo)
                gin_row[s.w - 1] +=
                    wv * K.sum(std::size_t(wo - rs), gout_row + rs);
            }
          }
        }
      }
    }
  }
}

template <class T>
void conv2d_bwd_weight(const Conv2dShape& s, const T* in, const T* gout,
                       T* gweight, T* gbias) {
  const auto& K = active<T>();
  const int ho = s.out_h(), wo = s.out_w();
  const std::size_t in_plane = std::size_t(s.h) * s.w;
  const std::size_t out_plane = std::size_t(ho) * wo;
  const std::size_t wsz = std::size_t(s.kh) * s.kw;

  if (gbias)
    for (int co = 0; co < s.cout; ++co)
      gbias[co] += K.sum(out_plane, gout + co * out_plane);

  for (int oy = 0; oy < ho; ++oy) {
    for (int ci = 0; ci < s.cin; ++ci) {
      for (int ky = 0; ky < s.kh; ++ky) {
        int iy = oy + ky - s.pad;
        if (s.pad_mode == PadMode::kReplicate)
          iy = clampi(iy, 0, s.h - 1);
        else if (iy < 0 || iy >= s.h)
          continue;
        const T* in_row = in + ci * in_plane + std::size_t(iy) * s.w;
        for (int co = 0; co < s.cout; ++co) {
          const T* gout_row = gout + co * out_plane + std::size_t(oy) * wo;
          T* gwrow = gweight + (co * s.cin + ci) * wsz + ky * s.kw;
          for (int kx = 0; kx < s.kw; ++kx) {
            const int off = kx - s.pad;
            Range r = valid_range(wo, s.w, off, 1);
            T acc = 0;
            if (r.len() > 0)
              acc += K.dot(std::size_t(r.len()), in_row + r.o0 + off,
                           gout_row + r.o0);
            if (s.pad_mode == PadMode::kReplicate) {
              const int left = std::min(r.o0, wo);
              if (left > 0)
                acc += in_row[0] * K.sum(std::size_t(left), gout_row);
              const int rs = std::max(r.o1, 0);
              if (rs < wo)
                acc += in_row[s.w - 1] * K.sum(std::size_t(wo - rs),
                                               gout_row + rs);
            }
            gwrow[kx] += acc;
          }
        }
      }
    }
  }
}

// ----------------------------------------------------------------- 3D

template <class T>
void conv3d_fwd(const Conv3dShape& s, const T* in, const T* weight,
                const T* bias, T* out) {
  const auto& K = active<T>();
  const int od_n = s.out_d(), oh_n = s.out_h(), ow_n = s.out_w();
  const std::size_t in_plane = std::size_t(s.h) * s.w;
  const std::size_t in_vol = std::size_t(s.d) * in_plane;
  const std::size_t out_plane = std::size_t(oh_n) * ow_n;
  const std::size_t out_vol = std::size_t(od_n) * out_plane;
  const std::size_t wsz = std::size_t(s.kd) * s.kh * s.kw;
  fill_bias(out, bias, s.cout, out_vol);

  for (int od = 0; od < od_n; ++od) {
    for (int oy = 0; oy < oh_n; ++oy) {
      for (int ci = 0; ci < s.cin; ++ci) {
        for (int kd = 0; kd < s.kd; ++kd) {
          const int id = s.stride * od + kd - s.pad;
          if (id < 0 || id >= s.d) continue;
          for (int ky = 0; ky < s.kh; ++ky) {
            const int iy = s.stride * oy + ky - s.pad;
            if (iy < 0 || iy >= s.h) continue;
            const T* in_row =
                in + ci * in_vol + id * in_plane + std::size_t(iy) * s.w;
            for (int co = 0; co < s.cout; ++co) {
              T* out_row = out + co * out_vol + od * out_plane +
                           std::size_t(oy) * ow_n;
              const T* wrow = weight + (co * s.cin + ci) * wsz +
                              (kd * s.kh + ky) * s.kw;
              for (int kx = 0; kx < s.kw; ++kx) {
                const int off = kx - s.pad;
                Range r = valid_range(ow_n, s.w, off, s.stride);
                if (r.len() <= 0) continue;
                const std::size_t n = std::size_t(r.len());
                if (s.stride == 1)
                  K.axpy(n, wrow[kx], in_row + r.o0 + off, out_row + r.o0);
                else
                  K.axpy_gather2(n, wrow[kx], in_row + 2 * r.o0 + off,
                                 out_row + r.o0);
              }
            }
          }
        }
      }
    }
  }
}

template <class T>
void conv3d_bwd_input(const Conv3dShape& s, const T* weight, const T* gout,
                      T* gin) {
  const auto& K = active<T>();
  const int od_n = s.out_d(), oh_n = s.out_h(), ow_n = s.out_w();
  const std::size_t in_plane = std::size_t(s.h) * s.w;
  const std::size_t in_vol = std::size_t(s.d) * in_plane;
  const std::size_t out_plane = std::size_t(oh_n) * ow_n;
  const std::size_t out_vol = std::size_t(od_n) * out_plane;
  const std::size_t wsz = std::size_t(s.kd) * s.kh * s.kw;

  for (int od = 0; od < od_n; ++od) {
    for (int oy = 0; oy < oh_n; ++oy) {
      for (int ci = 0; ci < s.cin; ++ci) {
        for (int kd = 0; kd < s.kd; ++kd) {
          const int id = s.stride * od + kd - s.pad;
          if (id < 0 || id >= s.d) continue;
          for (int ky = 0; ky < s.kh; ++ky) {
            const int iy = s.stride * oy + ky - s.pad;
            if (iy < 0 || iy >= s.h) continue;
            T* gin_row =
                gin + ci * in_vol + id * in_plane + std::size_t(iy) * s.w;
            for (int co = 0; co < s.cout; ++co) {
              const T* gout_row = gout + co * out_vol + od * out_plane +
                                  std::size_t(oy) * ow_n;
              const T* wrow = weight + (co * s.cin + ci) * wsz +
                              (kd * s.kh + ky) * s.kw;
              for (int kx = 0; kx < s.kw; ++kx) {
                const int off = kx - s.pad;
                Range r = valid_range(ow_n, s.w, off, s.stride);
                if (r.len() <= 0) continue;
                const std::size_t n = std::size_t(r.len());
                if (s.stride == 1)
                  K.axpy(n, wrow[kx], gout_row + r.o0, gin_row + r.o0 + off);
                else
                  K.axpy_scatter2(n, wrow[kx], gout_row + r.o0,
                                  gin_row + 2 * r.o0 + off);
              }
            }
          }
        }
      }
    }
  }
}

template <class T>
void conv3d_bwd_weight(const Conv3dShape& s, const T* in, const T* gout,
                       T* gweight, T* gbias) {
  const auto& K = active<T>();
  const int od_n = s.out_d(), oh_n = s.out_h(), ow_n = s.out_w();
  const std::size_t in_plane = std::size_t(s.h) * s.w;
  const std::size_t in_vol = std::size_t(s.d) * in_plane;
  const std::size_t out_plane = std::size_t(oh_n) * ow_n;
  const std::size_t out_vol = std::size_t(od_n) * out_plane;
  const std::size_t wsz = std::size_t(s.kd) * s.kh * s.kw;

  if (gbias)
    for (int co = 0; co < s.cout; ++co)
      gbias[co] += K.sum(out_vol, gout + co * out_vol);

  for (int od = 0; od < od_n; ++od) {
    for (int oy = 0; oy < oh_n; ++oy) {
      for (int ci = 0; ci < s.cin; ++ci) {
        for (int kd = 0; kd < s.kd; ++kd) {
          const int id = s.stride * od + kd - s.pad;
          if (id < 0 || id >= s.d) continue;
          for (int ky = 0; ky < s.kh; ++ky) {
            const int iy = s.stride * oy + ky - s.pad;
            if (iy < 0 || iy >= s.h) continue;
            const T* in_row =
                in + ci * in_vol + id * in_plane + std::size_t(iy) * s.w;
            for (int co = 0; co < s.cout; ++co) {
              const T* gout_row = gout + co * out_vol + od * out_plane +
                                  std::size_t(oy) * ow_n;
              T* gwrow = gweight + (co * s.cin + ci) * wsz +
                         (kd * s.kh + ky) * s.kw;
              for (int kx = 0; kx < s.kw; ++kx) {
                const int off = kx - s.pad;
                Range r = valid_range(ow_n, s.w, off, s.stride);
                if (r.len() <= 0) continue;
                const std::size_t n = std::size_t(r.len());
                if (s.stride == 1)
                  gwrow[kx] +=
                      K.dot(n, in_row + r.o0 + off, gout_row + r.o0);
                else
                  gwrow[kx] += K.dot_gather2(n, in_row + 2 * r.o0 + off,
                                             gout_row + r.o0);
              }
            }
          }
        }
      }
    }
  }
}

template void conv2d_fwd<float>(const Conv2dShape&, const float*,
                                const float*, const float*, float*);
template void conv2d_bwd_input<float>(const Conv2dShape&, const float*,
                                      const float*, float*);
template void conv2d_bwd_weight<float>(const Conv2dShape&, const float*,
                                       const float*, float*, float*);
template void conv3d_fwd<float>(const Conv3dShape&, const float*,
                                const float*, const float*, float*);
template void conv3d_bwd_input<float>(const Conv3dShape&, const float*,
                                      const float*, float*);
template void conv3d_bwd_weight<float>(const Conv3dShape&, const float*,
                                       const float*, float*, float*);

template void conv2d_fwd<double>(const Conv2dShape&, const double*,
                                 const double*, const double*, double*);
template void conv2d_bwd_input<double>(const Conv2dShape&, const double*,
                                       const double*, double*);
template void conv2d_bwd_weight<double>(const Conv2dShape&, const double*,
                                        const double*, double*, double*);
template void conv3d_fwd<double>(const Conv3dShape&, const double*,
                                 const double*, const double*, double*);
template void conv3d_bwd_input<double>(const Conv3dShape&, const double*,
                                       const double*, double*);
template void conv3d_bwd_weight<double>(const Conv3dShape&, const double*,
                                        const double*, double*, double*);

}  // namespace voxmatch::kernels
