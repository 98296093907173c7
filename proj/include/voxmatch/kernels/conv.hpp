#pragma once

#include <cstddef>

namespace voxmatch::kernels {

// Direct convolutions built from the row kernels in kernels.hpp. Layouts
// are dense row-major: conv2d in [Cin][H][W], weight [Cout][Cin][Kh][Kw],
// out [Cout][Ho][Wo]; conv3d adds a leading depth axis to the spatial
// dims. Backward functions accumulate (+=) into their gradient outputs.

enum class PadMode { kZero, kReplicate };

struct Conv2dShape {
  int cin, h, w;
  int cout, kh, kw;
  int pad;            // symmetric, stride fixed at 1
  PadMode pad_mode;

  int out_h() const { return h + 2 * pad - kh + 1; }
  int out_w() const { return w + 2 * pad - kw + 1; }
};

struct Conv3dShape {
  int cin, d, h, w;
  int cout, kd, kh, kw;
  int pad;            // symmetric zero padding
  int stride;         // 1 or 2, same on all axes

  int out_d() const { return (d + 2 * pad - kd) / stride + 1; }
  int out_h() const { return (h + 2 * pad - kh) / stride + 1; }
  int out_w() const { return (w + 2 * pad - kw) / stride + 1; }
};

// bias may be null (then the output starts at zero).
template <class T>
void conv2d_fwd(const Conv2dShape& s, const T* in, const T* weight,
                const T* bias, T* out);
template <class T>
void conv2d_bwd_input(const Conv2dShape& s, const T* weight, const T* gout,
                      T* gin);
template <class T>
void conv2d_bwd_weight(const Conv2dShape& s, const T* in, const T* gout,
                       T* gweight, T* gbias);

template <class T>
void conv3d_fwd(const Conv3dShape& s, const T* in, const T* weight,
                const T* bias, T* out);
template <class T>
void conv3d_bwd_input(const Conv3dShape& s, const T* weight, const T* gout,
                      T* gin);
template <class T>
void conv3d_bwd_weight(const Conv3dShape& s, const T* in, const T* gout,
                       T* gweight, T* gbias);

}  // namespace voxmatch::kernels
