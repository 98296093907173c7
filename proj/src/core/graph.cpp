#include "voxmatch/core/graph.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>
#include <type_traits>

#include "voxmatch/kernels/kernels.hpp"

namespace voxmatch::core {

namespace {

[[noreturn]] void fail(const std::string& msg) {
  throw std::runtime_error("graph: " + msg);
}

void check(bool ok, const char* msg) {
  if (!ok) fail(msg);
}

// [outer, n, inner] view of `shape` around `axis`.
struct AxisView {
  std::size_t outer, n, inner;
};

AxisView axis_view(const std::vector<int>& shape, int axis) {
  check(axis >= 0 && axis < int(shape.size()), "axis out of range");
  AxisView v{1, std::size_t(shape[axis]), 1};
  for (int i = 0; i < axis; ++i) v.outer *= std::size_t(shape[i]);
  for (int i = axis + 1; i < int(shape.size()); ++i)
    v.inner *= std::size_t(shape[i]);
  return v;
}

double clampd(double x, double lo, double hi) {
  return x < lo ? lo : (x > hi ? hi : x);
}

// Catmull-Rom weights at fractional position t in [0,1].
void catmull_rom(double t, double w[4]) {
  const double t2 = t * t, t3 = t2 * t;
  w[0] = -0.5 * t3 + t2 - 0.5 * t;
  w[1] = 1.5 * t3 - 2.5 * t2 + 1.0;
  w[2] = -1.5 * t3 + 2.0 * t2 + 0.5 * t;
  w[3] = 0.5 * t3 - 0.5 * t2;
}

int clampi(int v, int lo, int hi) { return v < lo ? lo : (v > hi ? hi : v); }

}  // namespace

template <class T>
int Graph<T>::leaf(Tensor<T> t, bool requires_grad) {
  Node nd;
  nd.kind = OpKind::kLeaf;
  nd.shape = std::move(t.shape);
  nd.value = std::move(t.data);
  nd.requires_grad = requires_grad;
  nodes_.push_back(std::move(nd));
  return int(nodes_.size()) - 1;
}

template <class T>
int Graph<T>::apply(OpKind kind, std::vector<int> inputs, Attrs attrs) {
  check(kind != OpKind::kLeaf, "use leaf() for inputs");
  Node nd;
  nd.kind = kind;
  nd.inputs = std::move(inputs);
  nd.attrs = std::move(attrs);
  for (int i : nd.inputs) {
    check(i >= 0 && i < size(), "input id out of range");
    nd.requires_grad = nd.requires_grad || n(i).requires_grad;
  }
  forward_op(nd);
  nodes_.push_back(std::move(nd));
  return int(nodes_.size()) - 1;
}

template <class T>
T Graph<T>::scalar(int id) const {
  check(node(id).value.size() == 1, "scalar() on non-scalar node");
  return node(id).value[0];
}

template <class T>
void Graph<T>::ensure_grad(int id) {
  Node& nd = n(id);
  if (nd.grad.empty()) nd.grad.assign(nd.value.size(), T(0));
}

template <class T>
void Graph<T>::backward(int id, const std::vector<T>* seed) {
  check(id >= 0 && id < size(), "backward id out of range");
  ensure_grad(id);
  if (seed) {
    check(seed->size() == n(id).value.size(), "seed size mismatch");
    n(id).grad = *seed;
  } else {
    check(n(id).value.size() == 1, "default seed needs scalar output");
    n(id).grad[0] = T(1);
  }
  for (int k = id; k >= 0; --k) {
    Node& nd = n(k);
    if (nd.kind == OpKind::kLeaf) continue;
    if (!nd.requires_grad || nd.grad.empty()) continue;
    backward_op(k);
  }
}

// ------------------------------------------------------------- forward

template <class T>
void Graph<T>::forward_op(Node& out) {
  const auto& K = kernels::active<T>();
  switch (out.kind) {
    case OpKind::kLeaf:
      fail("leaf in forward_op");

    case OpKind::kConv2d: {
      check(out.inputs.size() == 3, "conv2d wants {x, w, b}");
      const Node& x = n(out.inputs[0]);
      const Node& w = n(out.inputs[1]);
      const Node& b = n(out.inputs[2]);
      const auto& s = out.attrs.conv2d;
      check(x.value.size() == std::size_t(s.cin) * s.h * s.w,
            "conv2d input size");
      check(w.value.size() == std::size_t(s.cout) * s.cin * s.kh * s.kw,
            "conv2d weight size");
      check(b.value.size() == std::size_t(s.cout), "conv2d bias size");
      check(s.out_h() > 0 && s.out_w() > 0, "conv2d empty output");
      out.shape = {s.cout, s.out_h(), s.out_w()};
      out.value.resize(Tensor<T>::numel_of(out.shape));
      kernels::conv2d_fwd<T>(s, x.value.data(), w.value.data(),
                             b.value.data(), out.value.data());
      break;
    }

    case OpKind::kConv3d: {
      check(out.inputs.size() == 3, "conv3d wants {x, w, b}");
      const Node& x = n(out.inputs[0]);
      const Node& w = n(out.inputs[1]);
      const Node& b = n(out.inputs[2]);
      const auto& s = out.attrs.conv3d;
      check(s.stride == 1 || s.stride == 2, "conv3d stride");
      check(x.value.size() == std::size_t(s.cin) * s.d * s.h * s.w,
            "conv3d input size");
      check(w.value.size() ==
                std::size_t(s.cout) * s.cin * s.kd * s.kh * s.kw,
            "conv3d weight size");
      check(b.value.size() == std::size_t(s.cout), "conv3d bias size");
      check(s.out_d() > 0 && s.out_h() > 0 && s.out_w() > 0,
            "conv3d empty output");
      out.shape = {s.cout, s.out_d(), s.out_h(), s.out_w()};
      out.value.resize(Tensor<T>::numel_of(out.shape));
      kernels::conv3d_fwd<T>(s, x.value.data(), w.value.data(),
                             b.value.data(), out.value.data());
      break;
    }

    case OpKind::kRelu: {
      const Node& x = n(out.inputs[0]);
      out.shape = x.shape;
      out.value.resize(x.value.size());
      K.relu(x.value.size(), x.value.data(), out.value.data());
      if (record_signs_) {
        std::uint64_t h = sign_hash_;
        for (const T v : x.value)
          h = h * 1099511628211ull + (v > T(0) ? 1u : 0u);
        sign_hash_ = h;
      }
      break;
    }

    case OpKind::kLinear: {
      check(out.inputs.size() == 3, "linear wants {x, w, b}");
      const Node& x = n(out.inputs[0]);
      const Node& w = n(out.inputs[1]);
      const Node& b = n(out.inputs[2]);
      check(w.shape.size() == 2, "linear weight rank");
      const int outf = w.shape[0], inf = w.shape[1];
      check(int(b.value.size()) == outf, "linear bias size");
      std::size_t rows = 1;
      if (x.shape.size() == 1) {
        check(x.shape[0] == inf, "linear input size");
        out.shape = {outf};
      } else {
        check(x.shape.size() == 2 && x.shape[1] == inf, "linear input size");
        rows = std::size_t(x.shape[0]);
        out.shape = {x.shape[0], outf};
      }
      out.value.resize(rows * std::size_t(outf));
      for (std::size_t r = 0; r < rows; ++r)
        for (int o = 0; o < outf; ++o)
          out.value[r * outf + o] =
              b.value[o] + K.dot(std::size_t(inf), x.value.data() + r * inf,
                                 w.value.data() + std::size_t(o) * inf);
      break;
    }

    case OpKind::kSoftmaxAxis: {
      const Node& x = n(out.inputs[0]);
      const AxisView v = axis_view(x.shape, out.attrs.axis);
      check(v.n >= 1, "softmax over empty axis");
      out.shape = x.shape;
      out.value.resize(x.value.size());
      std::vector<T> m(v.inner), s(v.inner);
      for (std::size_t o = 0; o < v.outer; ++o) {
        const T* xb = x.value.data() + o * v.n * v.inner;
        T* ob = out.value.data() + o * v.n * v.inner;
        std::memcpy(m.data(), xb, v.inner * sizeof(T));
        for (std::size_t j = 1; j < v.n; ++j)
          K.vmax(v.inner, xb + j * v.inner, m.data());
        for (std::size_t j = 0; j < v.n; ++j) {
          const T* xr = xb + j * v.inner;
          T* orow = ob + j * v.inner;
          for (std::size_t i = 0; i < v.inner; ++i)
            orow[i] = std::exp(xr[i] - m[i]);
        }
        std::memcpy(s.data(), ob, v.inner * sizeof(T));
        for (std::size_t j = 1; j < v.n; ++j)
          K.add(v.inner, ob + j * v.inner, s.data(), s.data());
        for (std::size_t j = 0; j < v.n; ++j)
          K.recip_mul(v.inner, ob + j * v.inner, s.data(), ob + j * v.inner);
      }
      break;
    }

    case OpKind::kWeightedIndexSum: {
      const Node& x = n(out.inputs[0]);
      const AxisView v = axis_view(x.shape, out.attrs.axis);
      out.shape = x.shape;
      out.shape.erase(out.shape.begin() + out.attrs.axis);
      if (out.shape.empty()) out.shape = {1};
      out.value.assign(v.outer * v.inner, T(0));
      // Wider accumulator, so index*weight products stay exact and the
      // uniform-input case rounds to (n-1)/2 rather than drifting an ulp.
      using Acc = std::conditional_t<std::is_same_v<T, float>, double,
                                     long double>;
      std::vector<Acc> acc(v.inner);
      for (std::size_t o = 0; o < v.outer; ++o) {
        const T* xb = x.value.data() + o * v.n * v.inner;
        T* ob = out.value.data() + o * v.inner;
        std::fill(acc.begin(), acc.end(), Acc(0));
        for (std::size_t j = 1; j < v.n; ++j) {
          const T* row = xb + j * v.inner;
          for (std::size_t i = 0; i < v.inner; ++i)
            acc[i] += Acc(j) * Acc(row[i]);
        }
        for (std::size_t i = 0; i < v.inner; ++i) ob[i] = T(acc[i]);
      }
      break;
    }

    case OpKind::kInstanceNorm: {
      check(out.inputs.size() == 1 || out.inputs.size() == 3,
            "instance-norm wants {x} or {x, gamma, beta}");
      const Node& x = n(out.inputs[0]);
      check(x.shape.size() >= 2, "instance-norm input rank");
      const int C = x.shape[0];
      const std::size_t sp = x.value.size() / std::size_t(C);
      const auto& mask = out.attrs.mask;
      check(mask.empty() || mask.size() == sp, "instance-norm mask size");
      const bool affine = out.inputs.size() == 3;
      const T* gamma = affine ? n(out.inputs[1]).value.data() : nullptr;
      const T* beta = affine ? n(out.inputs[2]).value.data() : nullptr;
      if (affine) {
        check(n(out.inputs[1]).value.size() == std::size_t(C) &&
                  n(out.inputs[2]).value.size() == std::size_t(C),
              "instance-norm affine size");
      }
      std::size_t m = 0;
      if (mask.empty())
        m = sp;
      else
        for (std::size_t i = 0; i < sp; ++i) m += mask[i] ? 1 : 0;
      out.shape = x.shape;
      out.value.assign(x.value.size(), T(0));
      for (int c = 0; c < C; ++c) {
        const T* xc = x.value.data() + std::size_t(c) * sp;
        T* oc = out.value.data() + std::size_t(c) * sp;
        if (m < 2) {
          // Degenerate support: pass values through (affine skipped so a
          // single voxel is not collapsed to beta).
          for (std::size_t i = 0; i < sp; ++i)
            oc[i] = (mask.empty() || mask[i]) ? xc[i] : T(0);
          continue;
        }
        double mu = 0;
        for (std::size_t i = 0; i < sp; ++i)
          if (mask.empty() || mask[i]) mu += double(xc[i]);
        mu /= double(m);
        double var = 0;
        for (std::size_t i = 0; i < sp; ++i)
          if (mask.empty() || mask[i]) {
            const double d = double(xc[i]) - mu;
            var += d * d;
          }
        var /= double(m);
        const double inv = 1.0 / std::sqrt(var + out.attrs.eps);
        const double g = affine ? double(gamma[c]) : 1.0;
        const double bb = affine ? double(beta[c]) : 0.0;
        for (std::size_t i = 0; i < sp; ++i)
          if (mask.empty() || mask[i])
            oc[i] = T(g * (double(xc[i]) - mu) * inv + bb);
      }
      break;
    }

    case OpKind::kConcatAxis: {
      check(out.inputs.size() == 2, "concat wants two inputs");
      const Node& a = n(out.inputs[0]);
      const Node& b = n(out.inputs[1]);
      const int axis = out.attrs.axis;
      check(a.shape.size() == b.shape.size(), "concat rank mismatch");
      for (int i = 0; i < int(a.shape.size()); ++i)
        if (i != axis)
          check(a.shape[i] == b.shape[i], "concat extent mismatch");
      const AxisView va = axis_view(a.shape, axis);
      const AxisView vb = axis_view(b.shape, axis);
      out.shape = a.shape;
      out.shape[axis] += b.shape[axis];
      out.value.resize(a.value.size() + b.value.size());
      const std::size_t arow = va.n * va.inner, brow = vb.n * vb.inner;
      for (std::size_t o = 0; o < va.outer; ++o) {
        std::memcpy(out.value.data() + o * (arow + brow),
                    a.value.data() + o * arow, arow * sizeof(T));
        std::memcpy(out.value.data() + o * (arow + brow) + arow,
                    b.value.data() + o * brow, brow * sizeof(T));
      }
      break;
    }

    case OpKind::kAdd: {
      const Node& a = n(out.inputs[0]);
      const Node& b = n(out.inputs[1]);
      check(a.shape == b.shape, "add shape mismatch");
      out.shape = a.shape;
      out.value.resize(a.value.size());
      K.add(a.value.size(), a.value.data(), b.value.data(),
            out.value.data());
      break;
    }

    case OpKind::kMul: {
      const Node& a = n(out.inputs[0]);
      const Node& b = n(out.inputs[1]);
      check(a.shape == b.shape, "mul shape mismatch");
      out.shape = a.shape;
      out.value.resize(a.value.size());
      K.mul(a.value.size(), a.value.data(), b.value.data(),
            out.value.data());
      break;
    }

    case OpKind::kSmoothL1: {
      const Node& p = n(out.inputs[0]);
      const Node& t = n(out.inputs[1]);
      check(p.shape == t.shape, "smooth-l1 shape mismatch");
      const auto& mask = out.attrs.mask;
      check(mask.empty() || mask.size() == p.value.size(),
            "smooth-l1 mask size");
      std::size_t m = 0;
      double acc = 0;
      std::uint64_t h = sign_hash_;
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        if (!mask.empty() && !mask[i]) continue;
        ++m;
        const double d = double(p.value[i]) - double(t.value[i]);
        const double a = std::abs(d);
        acc += a < 1.0 ? 0.5 * d * d : a - 0.5;
        if (record_signs_)
          h = h * 1099511628211ull + (a < 1.0 ? 1u : 0u);
      }
      if (record_signs_) sign_hash_ = h;
      out.shape = {1};
      out.value = {T(m ? acc / double(m) : 0.0)};
      break;
    }

    case OpKind::kBceWithLogits: {
      const Node& z = n(out.inputs[0]);
      const Node& y = n(out.inputs[1]);
      check(z.shape == y.shape, "bce shape mismatch");
      const auto& mask = out.attrs.mask;
      check(mask.empty() || mask.size() == z.value.size(), "bce mask size");
      std::size_t m = 0;
      double acc = 0;
      for (std::size_t i = 0; i < z.value.size(); ++i) {
        if (!mask.empty() && !mask[i]) continue;
        ++m;
        const double zi = double(z.value[i]), yi = double(y.value[i]);
        acc += std::max(zi, 0.0) - zi * yi + std::log1p(std::exp(-std::abs(zi)));
      }
      out.shape = {1};
      out.value = {T(m ? acc / double(m) : 0.0)};
      break;
    }

    case OpKind::kTrilinearSample: {
      const Node& x = n(out.inputs[0]);
      check(x.shape.size() == 4, "trilinear wants [C,D,H,W]");
      const auto& co = out.attrs.coords;
      check(co.size() % 3 == 0, "trilinear coords are (d,v,u) triples");
      const int C = x.shape[0], D = x.shape[1], H = x.shape[2],
                W = x.shape[3];
      const std::size_t N = co.size() / 3;
      out.shape = {C, int(N)};
      out.value.assign(std::size_t(C) * N, T(0));
      const std::size_t plane = std::size_t(H) * W;
      const std::size_t vol = std::size_t(D) * plane;
      for (std::size_t s = 0; s < N; ++s) {
        const double d = clampd(co[3 * s + 0], 0.0, double(D - 1));
        const double v = clampd(co[3 * s + 1], 0.0, double(H - 1));
        const double u = clampd(co[3 * s + 2], 0.0, double(W - 1));
        const int d0 = clampi(int(std::floor(d)), 0, std::max(D - 2, 0));
        const int v0 = clampi(int(std::floor(v)), 0, std::max(H - 2, 0));
        const int u0 = clampi(int(std::floor(u)), 0, std::max(W - 2, 0));
        const double td = d - d0, tv = v - v0, tu = u - u0;
        const int d1 = std::min(d0 + 1, D - 1), v1 = std::min(v0 + 1, H - 1),
                  u1 = std::min(u0 + 1, W - 1);
        const double w000 = (1 - td) * (1 - tv) * (1 - tu);
        const double w001 = (1 - td) * (1 - tv) * tu;
        const double w010 = (1 - td) * tv * (1 - tu);
        const double w011 = (1 - td) * tv * tu;
        const double w100 = td * (1 - tv) * (1 - tu);
        const double w101 = td * (1 - tv) * tu;
        const double w110 = td * tv * (1 - tu);
        const double w111 = td * tv * tu;
        for (int c = 0; c < C; ++c) {
          const T* xc = x.value.data() + c * vol;
          const double r =
              w000 * xc[d0 * plane + v0 * W + u0] +
              w001 * xc[d0 * plane + v0 * W + u1] +
              w010 * xc[d0 * plane + v1 * W + u0] +
              w011 * xc[d0 * plane + v1 * W + u1] +
              w100 * xc[d1 * plane + v0 * W + u0] +
              w101 * xc[d1 * plane + v0 * W + u1] +
              w110 * xc[d1 * plane + v1 * W + u0] +
              w111 * xc[d1 * plane + v1 * W + u1];
          out.value[std::size_t(c) * N + s] = T(r);
        }
      }
      break;
    }

    case OpKind::kCubicDSample: {
      const Node& x = n(out.inputs[0]);
      check(x.shape.size() == 4, "cubic-d wants [C,D,H,W]");
      const auto& co = out.attrs.coords;
      check(co.size() % 3 == 0, "cubic-d coords are (d,v,u) triples");
      const int C = x.shape[0], D = x.shape[1], H = x.shape[2],
                W = x.shape[3];
      const std::size_t N = co.size() / 3;
      out.shape = {C, int(N)};
      out.value.assign(std::size_t(C) * N, T(0));
      const std::size_t plane = std::size_t(H) * W;
      const std::size_t vol = std::size_t(D) * plane;
      for (std::size_t s = 0; s < N; ++s) {
        const double d = clampd(co[3 * s + 0], 0.0, double(D - 1));
        const double v = clampd(co[3 * s + 1], 0.0, double(H - 1));
        const double u = clampd(co[3 * s + 2], 0.0, double(W - 1));
        const int db = clampi(int(std::floor(d)), 0, D - 1);
        const int v0 = clampi(int(std::floor(v)), 0, std::max(H - 2, 0));
        const int u0 = clampi(int(std::floor(u)), 0, std::max(W - 2, 0));
        const double tv = v - v0, tu = u - u0;
        const int v1 = std::min(v0 + 1, H - 1), u1 = std::min(u0 + 1, W - 1);
        double wd[4];
        catmull_rom(d - db, wd);
        const int dj[4] = {clampi(db - 1, 0, D - 1), db,
                           clampi(db + 1, 0, D - 1), clampi(db + 2, 0, D - 1)};
        const double bw[4] = {(1 - tv) * (1 - tu), (1 - tv) * tu,
                              tv * (1 - tu), tv * tu};
        const std::size_t bo[4] = {std::size_t(v0) * W + u0,
                                   std::size_t(v0) * W + u1,
                                   std::size_t(v1) * W + u0,
                                   std::size_t(v1) * W + u1};
        for (int c = 0; c < C; ++c) {
          const T* xc = x.value.data() + c * vol;
          double r = 0;
          for (int j = 0; j < 4; ++j) {
            const T* pl = xc + std::size_t(dj[j]) * plane;
            double bil = 0;
            for (int k = 0; k < 4; ++k) bil += bw[k] * double(pl[bo[k]]);
            r += wd[j] * bil;
          }
          out.value[std::size_t(c) * N + s] = T(r);
        }
      }
      break;
    }

    case OpKind::kMaskZero: {
      const Node& x = n(out.inputs[0]);
      const auto& mask = out.attrs.mask;
      check(mask.size() == x.value.size(), "mask-zero size mismatch");
      out.shape = x.shape;
      out.value.resize(x.value.size());
      for (std::size_t i = 0; i < x.value.size(); ++i)
        out.value[i] = mask[i] ? x.value[i] : T(0);
      break;
    }

    case OpKind::kShiftConcatVolume: {
      check(out.inputs.size() == 2, "shift-concat wants {left, right}");
      const Node& l = n(out.inputs[0]);
      const Node& r = n(out.inputs[1]);
      check(l.shape.size() == 3 && l.shape == r.shape,
            "shift-concat wants matching [C,H,W]");
      const int C = l.shape[0], H = l.shape[1], W = l.shape[2];
      const int D = out.attrs.levels;
      check(D >= 1, "shift-concat needs at least one level");
      out.shape = {2 * C, D, H, W};
      out.value.assign(Tensor<T>::numel_of(out.shape), T(0));
      const std::size_t plane = std::size_t(H) * W;
      const std::size_t vol = std::size_t(D) * plane;
      for (int c = 0; c < C; ++c) {
        const T* lc = l.value.data() + c * plane;
        const T* rc = r.value.data() + c * plane;
        for (int d = 0; d < D; ++d) {
          T* od = out.value.data() + c * vol + d * plane;
          std::memcpy(od, lc, plane * sizeof(T));
          T* os = out.value.data() + (C + c) * vol + d * plane;
          for (int h = 0; h < H; ++h)
            if (W - d > 0)
              std::memcpy(os + std::size_t(h) * W + d,
                          rc + std::size_t(h) * W,
                          std::size_t(W - d) * sizeof(T));
        }
      }
      break;
    }

    case OpKind::kBilinearSample: {
      const Node& x = n(out.inputs[0]);
      check(x.shape.size() == 3, "bilinear wants [C,H,W]");
      const auto& co = out.attrs.coords;
      check(co.size() % 2 == 0, "bilinear coords are (v,u) pairs");
      const int C = x.shape[0], H = x.shape[1], W = x.shape[2];
      const std::size_t N = co.size() / 2;
      out.shape = {C, int(N)};
      out.value.assign(std::size_t(C) * N, T(0));
      const std::size_t plane = std::size_t(H) * W;
      for (std::size_t s = 0; s < N; ++s) {
        const double v = clampd(co[2 * s + 0], 0.0, double(H - 1));
        const double u = clampd(co[2 * s + 1], 0.0, double(W - 1));
        const int v0 = clampi(int(std::floor(v)), 0, std::max(H - 2, 0));
        const int u0 = clampi(int(std::floor(u)), 0, std::max(W - 2, 0));
        const double tv = v - v0, tu = u - u0;
        const int v1 = std::min(v0 + 1, H - 1), u1 = std::min(u0 + 1, W - 1);
        for (int c = 0; c < C; ++c) {
          const T* xc = x.value.data() + c * plane;
          const double r = (1 - tv) * (1 - tu) * double(xc[v0 * W + u0]) +
                           (1 - tv) * tu * double(xc[v0 * W + u1]) +
                           tv * (1 - tu) * double(xc[v1 * W + u0]) +
                           tv * tu * double(xc[v1 * W + u1]);
          out.value[std::size_t(c) * N + s] = T(r);
        }
      }
      break;
    }

    case OpKind::kReshape: {
      const Node& x = n(out.inputs[0]);
      check(Tensor<T>::numel_of(out.attrs.out_shape) == x.value.size(),
            "reshape element count mismatch");
      out.shape = out.attrs.out_shape;
      out.value = x.value;
      break;
    }
  }
}

// ------------------------------------------------------------ backward

template <class T>
void Graph<T>::backward_op(int id) {
  Node& out = n(id);
  const auto& K = kernels::active<T>();
  const std::vector<T>& g = out.grad;

  auto want = [&](int slot) {
    const int in = out.inputs[std::size_t(slot)];
    if (!n(in).requires_grad) return false;
    ensure_grad(in);
    return true;
  };

  switch (out.kind) {
    case OpKind::kLeaf:
      break;

    case OpKind::kConv2d: {
      const Node& x = n(out.inputs[0]);
      const auto& s = out.attrs.conv2d;
      if (want(0))
        kernels::conv2d_bwd_input<T>(s, n(out.inputs[1]).value.data(),
                                     g.data(),
                                     n(out.inputs[0]).grad.data());
      const bool ww = want(1), wb = want(2);
      if (ww || wb)
        kernels::conv2d_bwd_weight<T>(
            s, x.value.data(), g.data(),
            ww ? n(out.inputs[1]).grad.data() : nullptr,
            wb ? n(out.inputs[2]).grad.data() : nullptr);
      break;
    }

    case OpKind::kConv3d: {
      const Node& x = n(out.inputs[0]);
      const auto& s = out.attrs.conv3d;
      if (want(0))
        kernels::conv3d_bwd_input<T>(s, n(out.inputs[1]).value.data(),
                                     g.data(),
                                     n(out.inputs[0]).grad.data());
      const bool ww = want(1), wb = want(2);
      if (ww || wb)
        kernels::conv3d_bwd_weight<T>(
            s, x.value.data(), g.data(),
            ww ? n(out.inputs[1]).grad.data() : nullptr,
            wb ? n(out.inputs[2]).grad.data() : nullptr);
      break;
    }

    case OpKind::kRelu: {
      if (want(0)) {
        const Node& x = n(out.inputs[0]);
        K.relu_grad(x.value.size(), x.value.data(), g.data(),
                    n(out.inputs[0]).grad.data());
      }
      break;
    }

    case OpKind::kLinear: {
      const Node& x = n(out.inputs[0]);
      const Node& w = n(out.inputs[1]);
      const int outf = w.shape[0], inf = w.shape[1];
      const std::size_t rows = x.value.size() / std::size_t(inf);
      if (want(0)) {
        T* gx = n(out.inputs[0]).grad.data();
        for (std::size_t r = 0; r < rows; ++r)
          for (int o = 0; o < outf; ++o)
            K.axpy(std::size_t(inf), g[r * outf + o],
                   w.value.data() + std::size_t(o) * inf, gx + r * inf);
      }
      if (want(1)) {
        T* gw = n(out.inputs[1]).grad.data();
        for (std::size_t r = 0; r < rows; ++r)
          for (int o = 0; o < outf; ++o)
            K.axpy(std::size_t(inf), g[r * outf + o],
                   x.value.data() + r * inf, gw + std::size_t(o) * inf);
      }
      if (want(2)) {
        T* gb = n(out.inputs[2]).grad.data();
        for (std::size_t r = 0; r < rows; ++r)
          for (int o = 0; o < outf; ++o) gb[o] += g[r * outf + o];
      }
      break;
    }

    case OpKind::kSoftmaxAxis: {
      if (!want(0)) break;
      const AxisView v = axis_view(out.shape, out.attrs.axis);
      T* gx = n(out.inputs[0]).grad.data();
      const T* p = out.value.data();
      std::vector<T> dot(v.inner);
      for (std::size_t o = 0; o < v.outer; ++o) {
        const T* pb = p + o * v.n * v.inner;
        const T* gb = g.data() + o * v.n * v.inner;
        T* xb = gx + o * v.n * v.inner;
        std::fill(dot.begin(), dot.end(), T(0));
        for (std::size_t j = 0; j < v.n; ++j) {
          const T* pr = pb + j * v.inner;
          const T* gr = gb + j * v.inner;
          for (std::size_t i = 0; i < v.inner; ++i) dot[i] += pr[i] * gr[i];
        }
        for (std::size_t j = 0; j < v.n; ++j) {
          const T* pr = pb + j * v.inner;
          const T* gr = gb + j * v.inner;
          T* xr = xb + j * v.inner;
          for (std::size_t i = 0; i < v.inner; ++i)
            xr[i] += pr[i] * (gr[i] - dot[i]);
        }
      }
      break;
    }

    case OpKind::kWeightedIndexSum: {
      if (!want(0)) break;
      const Node& x = n(out.inputs[0]);
      const AxisView v = axis_view(x.shape, out.attrs.axis);
      T* gx = n(out.inputs[0]).grad.data();
      for (std::size_t o = 0; o < v.outer; ++o) {
        const T* gb = g.data() + o * v.inner;
        T* xb = gx + o * v.n * v.inner;
        for (std::size_t j = 1; j < v.n; ++j)
          K.axpy(v.inner, T(j), gb, xb + j * v.inner);
      }
      break;
    }

    case OpKind::kInstanceNorm: {
      const Node& x = n(out.inputs[0]);
      const int C = x.shape[0];
      const std::size_t sp = x.value.size() / std::size_t(C);
      const auto& mask = out.attrs.mask;
      const bool affine = out.inputs.size() == 3;
      std::size_t m = 0;
      if (mask.empty())
        m = sp;
      else
        for (std::size_t i = 0; i < sp; ++i) m += mask[i] ? 1 : 0;
      const bool wx = want(0);
      const bool wg = affine && want(1);
      const bool wb = affine && want(2);
      if (!wx && !wg && !wb) break;
      if (m < 2) {
        if (wx) {
          T* gx = n(out.inputs[0]).grad.data();
          for (int c = 0; c < C; ++c)
            for (std::size_t i = 0; i < sp; ++i)
              if (mask.empty() || mask[i])
                gx[std::size_t(c) * sp + i] += g[std::size_t(c) * sp + i];
        }
        break;
      }
      const T* gamma = affine ? n(out.inputs[1]).value.data() : nullptr;
      for (int c = 0; c < C; ++c) {
        const T* xc = x.value.data() + std::size_t(c) * sp;
        const T* gc = g.data() + std::size_t(c) * sp;
        double mu = 0;
        for (std::size_t i = 0; i < sp; ++i)
          if (mask.empty() || mask[i]) mu += double(xc[i]);
        mu /= double(m);
        double var = 0;
        for (std::size_t i = 0; i < sp; ++i)
          if (mask.empty() || mask[i]) {
            const double d = double(xc[i]) - mu;
            var += d * d;
          }
        var /= double(m);
        const double inv = 1.0 / std::sqrt(var + out.attrs.eps);
        const double gam = affine ? double(gamma[c]) : 1.0;
        double sum_g = 0, sum_gx = 0;
        for (std::size_t i = 0; i < sp; ++i)
          if (mask.empty() || mask[i]) {
            const double xh = (double(xc[i]) - mu) * inv;
            sum_g += double(gc[i]);
            sum_gx += double(gc[i]) * xh;
          }
        if (wg)
          n(out.inputs[1]).grad[std::size_t(c)] += T(sum_gx);
        if (wb)
          n(out.inputs[2]).grad[std::size_t(c)] += T(sum_g);
        if (wx) {
          T* gx = n(out.inputs[0]).grad.data() + std::size_t(c) * sp;
          const double mg = sum_g / double(m);
          const double mgx = sum_gx / double(m);
          for (std::size_t i = 0; i < sp; ++i)
            if (mask.empty() || mask[i]) {
              const double xh = (double(xc[i]) - mu) * inv;
              gx[i] += T(gam * inv *
                         (double(gc[i]) - mg - xh * mgx));
            }
        }
      }
      break;
    }

    case OpKind::kConcatAxis: {
      const Node& a = n(out.inputs[0]);
      const Node& b = n(out.inputs[1]);
      const int axis = out.attrs.axis;
      const AxisView va = axis_view(a.shape, axis);
      const AxisView vb = axis_view(b.shape, axis);
      const std::size_t arow = va.n * va.inner, brow = vb.n * vb.inner;
      if (want(0)) {
        T* ga = n(out.inputs[0]).grad.data();
        for (std::size_t o = 0; o < va.outer; ++o)
          K.axpy(arow, T(1), g.data() + o * (arow + brow), ga + o * arow);
      }
      if (want(1)) {
        T* gb = n(out.inputs[1]).grad.data();
        for (std::size_t o = 0; o < va.outer; ++o)
          K.axpy(brow, T(1), g.data() + o * (arow + brow) + arow,
                 gb + o * brow);
      }
      break;
    }

    case OpKind::kAdd: {
      if (want(0))
        K.axpy(g.size(), T(1), g.data(), n(out.inputs[0]).grad.data());
      if (want(1))
        K.axpy(g.size(), T(1), g.data(), n(out.inputs[1]).grad.data());
      break;
    }

    case OpKind::kMul: {
      const Node& a = n(out.inputs[0]);
      const Node& b = n(out.inputs[1]);
      if (want(0)) {
        T* ga = n(out.inputs[0]).grad.data();
        for (std::size_t i = 0; i < g.size(); ++i)
          ga[i] += g[i] * b.value[i];
      }
      if (want(1)) {
        T* gb = n(out.inputs[1]).grad.data();
        for (std::size_t i = 0; i < g.size(); ++i)
          gb[i] += g[i] * a.value[i];
      }
      break;
    }

    case OpKind::kSmoothL1: {
      const Node& p = n(out.inputs[0]);
      const Node& t = n(out.inputs[1]);
      const auto& mask = out.attrs.mask;
      std::size_t m = 0;
      if (mask.empty())
        m = p.value.size();
      else
        for (auto b : mask) m += b ? 1 : 0;
      if (m == 0) break;
      const double gs = double(g[0]) / double(m);
      const bool wp = want(0), wt = want(1);
      if (!wp && !wt) break;
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        if (!mask.empty() && !mask[i]) continue;
        const double d = double(p.value[i]) - double(t.value[i]);
        const double dd =
            std::abs(d) < 1.0 ? d : (d > 0 ? 1.0 : -1.0);
        if (wp) n(out.inputs[0]).grad[i] += T(gs * dd);
        if (wt) n(out.inputs[1]).grad[i] -= T(gs * dd);
      }
      break;
    }

    case OpKind::kBceWithLogits: {
      const Node& z = n(out.inputs[0]);
      const Node& y = n(out.inputs[1]);
      const auto& mask = out.attrs.mask;
      std::size_t m = 0;
      if (mask.empty())
        m = z.value.size();
      else
        for (auto b : mask) m += b ? 1 : 0;
      if (m == 0) break;
      const double gs = double(g[0]) / double(m);
      const bool wz = want(0), wy = want(1);
      if (!wz && !wy) break;
      for (std::size_t i = 0; i < z.value.size(); ++i) {
        if (!mask.empty() && !mask[i]) continue;
        const double zi = double(z.value[i]);
        const double sig =
            zi >= 0 ? 1.0 / (1.0 + std::exp(-zi))
                    : std::exp(zi) / (1.0 + std::exp(zi));
        if (wz)
          n(out.inputs[0]).grad[i] += T(gs * (sig - double(y.value[i])));
        if (wy) n(out.inputs[1]).grad[i] += T(gs * (-zi));
      }
      break;
    }

    case OpKind::kTrilinearSample: {
      if (!want(0)) break;
      const Node& x = n(out.inputs[0]);
      const auto& co = out.attrs.coords;
      const int C = x.shape[0], D = x.shape[1], H = x.shape[2],
                W = x.shape[3];
      const std::size_t N = co.size() / 3;
      const std::size_t plane = std::size_t(H) * W;
      const std::size_t vol = std::size_t(D) * plane;
      T* gx = n(out.inputs[0]).grad.data();
      for (std::size_t s = 0; s < N; ++s) {
        const double d = clampd(co[3 * s + 0], 0.0, double(D - 1));
        const double v = clampd(co[3 * s + 1], 0.0, double(H - 1));
        const double u = clampd(co[3 * s + 2], 0.0, double(W - 1));
        const int d0 = clampi(int(std::floor(d)), 0, std::max(D - 2, 0));
        const int v0 = clampi(int(std::floor(v)), 0, std::max(H - 2, 0));
        const int u0 = clampi(int(std::floor(u)), 0, std::max(W - 2, 0));
        const double td = d - d0, tv = v - v0, tu = u - u0;
        const int d1 = std::min(d0 + 1, D - 1), v1 = std::min(v0 + 1, H - 1),
                  u1 = std::min(u0 + 1, W - 1);
        const double w[8] = {
            (1 - td) * (1 - tv) * (1 - tu), (1 - td) * (1 - tv) * tu,
            (1 - td) * tv * (1 - tu),       (1 - td) * tv * tu,
            td * (1 - tv) * (1 - tu),       td * (1 - tv) * tu,
            td * tv * (1 - tu),             td * tv * tu};
        const std::size_t off[8] = {
            std::size_t(d0) * plane + std::size_t(v0) * W + u0,
            std::size_t(d0) * plane + std::size_t(v0) * W + u1,
            std::size_t(d0) * plane + std::size_t(v1) * W + u0,
            std::size_t(d0) * plane + std::size_t(v1) * W + u1,
            std::size_t(d1) * plane + std::size_t(v0) * W + u0,
            std::size_t(d1) * plane + std::size_t(v0) * W + u1,
            std::size_t(d1) * plane + std::size_t(v1) * W + u0,
            std::size_t(d1) * plane + std::size_t(v1) * W + u1};
        for (int c = 0; c < C; ++c) {
          const T gv = g[std::size_t(c) * N + s];
          T* gc = gx + c * vol;
          for (int k = 0; k < 8; ++k) gc[off[k]] += T(w[k] * double(gv));
        }
      }
      break;
    }

    case OpKind::kCubicDSample: {
      if (!want(0)) break;
      const Node& x = n(out.inputs[0]);
      const auto& co = out.attrs.coords;
      const int C = x.shape[0], D = x.shape[1], H = x.shape[2],
                W = x.shape[3];
      const std::size_t N = co.size() / 3;
      const std::size_t plane = std::size_t(H) * W;
      const std::size_t vol = std::size_t(D) * plane;
      T* gx = n(out.inputs[0]).grad.data();
      for (std::size_t s = 0; s < N; ++s) {
        const double d = clampd(co[3 * s + 0], 0.0, double(D - 1));
        const double v = clampd(co[3 * s + 1], 0.0, double(H - 1));
        const double u = clampd(co[3 * s + 2], 0.0, double(W - 1));
        const int db = clampi(int(std::floor(d)), 0, D - 1);
        const int v0 = clampi(int(std::floor(v)), 0, std::max(H - 2, 0));
        const int u0 = clampi(int(std::floor(u)), 0, std::max(W - 2, 0));
        const double tv = v - v0, tu = u - u0;
        const int v1 = std::min(v0 + 1, H - 1), u1 = std::min(u0 + 1, W - 1);
        double wd[4];
        catmull_rom(d - db, wd);
        const int dj[4] = {clampi(db - 1, 0, D - 1), db,
                           clampi(db + 1, 0, D - 1), clampi(db + 2, 0, D - 1)};
        const double bw[4] = {(1 - tv) * (1 - tu), (1 - tv) * tu,
                              tv * (1 - tu), tv * tu};
        const std::size_t bo[4] = {std::size_t(v0) * W + u0,
                                   std::size_t(v0) * W + u1,
                                   std::size_t(v1) * W + u0,
                                   std::size_t(v1) * W + u1};
        for (int c = 0; c < C; ++c) {
          const double gv = double(g[std::size_t(c) * N + s]);
          T* gc = gx + c * vol;
          for (int j = 0; j < 4; ++j) {
            T* pl = gc + std::size_t(dj[j]) * plane;
            for (int k = 0; k < 4; ++k)
              pl[bo[k]] += T(gv * wd[j] * bw[k]);
          }
        }
      }
      break;
    }

    case OpKind::kMaskZero: {
      if (!want(0)) break;
      const auto& mask = out.attrs.mask;
      T* gx = n(out.inputs[0]).grad.data();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (mask[i]) gx[i] += g[i];
      break;
    }

    case OpKind::kShiftConcatVolume: {
      const Node& l = n(out.inputs[0]);
      const int C = l.shape[0], H = l.shape[1], W = l.shape[2];
      const int D = out.attrs.levels;
      const std::size_t plane = std::size_t(H) * W;
      const std::size_t vol = std::size_t(D) * plane;
      if (want(0)) {
        T* gl = n(out.inputs[0]).grad.data();
        for (int c = 0; c < C; ++c)
          for (int d = 0; d < D; ++d)
            K.axpy(plane, T(1), g.data() + c * vol + d * plane,
                   gl + c * plane);
      }
      if (want(1)) {
        T* gr = n(out.inputs[1]).grad.data();
        for (int c = 0; c < C; ++c)
          for (int d = 0; d < D; ++d)
            for (int h = 0; h < H; ++h)
              if (W - d > 0)
                K.axpy(std::size_t(W - d), T(1),
                       g.data() + (C + c) * vol + d * plane +
                           std::size_t(h) * W + d,
                       gr + c * plane + std::size_t(h) * W);
      }
      break;
    }

    case OpKind::kBilinearSample: {
      if (!want(0)) break;
      const Node& x = n(out.inputs[0]);
      const auto& co = out.attrs.coords;
      const int C = x.shape[0], H = x.shape[1], W = x.shape[2];
      const std::size_t N = co.size() / 2;
      const std::size_t plane = std::size_t(H) * W;
      T* gx = n(out.inputs[0]).grad.data();
      for (std::size_t s = 0; s < N; ++s) {
        const double v = clampd(co[2 * s + 0], 0.0, double(H - 1));
        const double u = clampd(co[2 * s + 1], 0.0, double(W - 1));
        const int v0 = clampi(int(std::floor(v)), 0, std::max(H - 2, 0));
        const int u0 = clampi(int(std::floor(u)), 0, std::max(W - 2, 0));
        const double tv = v - v0, tu = u - u0;
        const int v1 = std::min(v0 + 1, H - 1), u1 = std::min(u0 + 1, W - 1);
        for (int c = 0; c < C; ++c) {
          const double gv = double(g[std::size_t(c) * N + s]);
          T* gc = gx + c * plane;
          gc[v0 * W + u0] += T(gv * (1 - tv) * (1 - tu));
          gc[v0 * W + u1] += T(gv * (1 - tv) * tu);
          gc[v1 * W + u0] += T(gv * tv * (1 - tu));
          gc[v1 * W + u1] += T(gv * tv * tu);
        }
      }
      break;
    }

    case OpKind::kReshape: {
      if (want(0))
        K.axpy(g.size(), T(1), g.data(), n(out.inputs[0]).grad.data());
      break;
    }
  }
}

// -------------------------------------------------------- typed helpers

template <class T>
int Graph<T>::conv2d(int x, int w, int b, const kernels::Conv2dShape& s) {
  Attrs a;
  a.conv2d = s;
  return apply(OpKind::kConv2d, {x, w, b}, std::move(a));
}

template <class T>
int Graph<T>::conv3d(int x, int w, int b, const kernels::Conv3dShape& s) {
  Attrs a;
  a.conv3d = s;
  return apply(OpKind::kConv3d, {x, w, b}, std::move(a));
}

template <class T>
int Graph<T>::relu(int x) {
  return apply(OpKind::kRelu, {x});
}

template <class T>
int Graph<T>::linear(int x, int w, int b) {
  return apply(OpKind::kLinear, {x, w, b});
}

template <class T>
int Graph<T>::softmax_axis(int x, int axis) {
  Attrs a;
  a.axis = axis;
  return apply(OpKind::kSoftmaxAxis, {x}, std::move(a));
}

template <class T>
int Graph<T>::weighted_index_sum(int x, int axis) {
  Attrs a;
  a.axis = axis;
  return apply(OpKind::kWeightedIndexSum, {x}, std::move(a));
}

template <class T>
int Graph<T>::instance_norm(int x, std::vector<std::uint8_t> valid,
                            double eps) {
  Attrs a;
  a.mask = std::move(valid);
  a.eps = eps;
  return apply(OpKind::kInstanceNorm, {x}, std::move(a));
}

template <class T>
int Graph<T>::instance_norm(int x, int gamma, int beta,
                            std::vector<std::uint8_t> valid, double eps) {
  Attrs a;
  a.mask = std::move(valid);
  a.eps = eps;
  return apply(OpKind::kInstanceNorm, {x, gamma, beta}, std::move(a));
}

template <class T>
int Graph<T>::concat_axis(int x, int y, int axis) {
  Attrs a;
  a.axis = axis;
  return apply(OpKind::kConcatAxis, {x, y}, std::move(a));
}

template <class T>
int Graph<T>::add(int x, int y) {
  return apply(OpKind::kAdd, {x, y});
}

template <class T>
int Graph<T>::mul(int x, int y) {
  return apply(OpKind::kMul, {x, y});
}

template <class T>
int Graph<T>::smooth_l1(int pred, int target,
                        std::vector<std::uint8_t> valid) {
  Attrs a;
  a.mask = std::move(valid);
  return apply(OpKind::kSmoothL1, {pred, target}, std::move(a));
}

template <class T>
int Graph<T>::bce_with_logits(int logits, int targets,
                              std::vector<std::uint8_t> valid) {
  Attrs a;
  a.mask = std::move(valid);
  return apply(OpKind::kBceWithLogits, {logits, targets}, std::move(a));
}

template <class T>
int Graph<T>::trilinear_sample(int vol, std::vector<double> coords_dvu) {
  Attrs a;
  a.coords = std::move(coords_dvu);
  return apply(OpKind::kTrilinearSample, {vol}, std::move(a));
}

template <class T>
int Graph<T>::cubic_d_sample(int vol, std::vector<double> coords_dvu) {
  Attrs a;
  a.coords = std::move(coords_dvu);
  return apply(OpKind::kCubicDSample, {vol}, std::move(a));
}

template <class T>
int Graph<T>::mask_zero(int x, std::vector<std::uint8_t> keep) {
  Attrs a;
  a.mask = std::move(keep);
  return apply(OpKind::kMaskZero, {x}, std::move(a));
}

template <class T>
int Graph<T>::shift_concat_volume(int left, int right, int levels) {
  Attrs a;
  a.levels = levels;
  return apply(OpKind::kShiftConcatVolume, {left, right}, std::move(a));
}

template <class T>
int Graph<T>::bilinear_sample(int img, std::vector<double> coords_vu) {
  Attrs a;
  a.coords = std::move(coords_vu);
  return apply(OpKind::kBilinearSample, {img}, std::move(a));
}

template <class T>
int Graph<T>::reshape(int x, std::vector<int> shape) {
  Attrs a;
  a.out_shape = std::move(shape);
  return apply(OpKind::kReshape, {x}, std::move(a));
}

template class Graph<float>;
template class Graph<double>;

}  // namespace voxmatch::core
