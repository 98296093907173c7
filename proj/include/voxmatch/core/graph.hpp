#pragma once

#include <cstdint>
#include <vector>

#include "voxmatch/core/tensor.hpp"
#include "voxmatch/kernels/conv.hpp"

namespace voxmatch::core {

// Closed operation catalog. Everything the models compute is spelled in
// these ops, so checking their gradients checks the whole system.
enum class OpKind {
  kLeaf,
  kConv2d,
  kConv3d,
  kRelu,
  kLinear,
  kSoftmaxAxis,
  kWeightedIndexSum,
  kInstanceNorm,
  kConcatAxis,
  kAdd,
  kMul,
  kSmoothL1,
  kBceWithLogits,
  kTrilinearSample,
  kCubicDSample,
  kMaskZero,
  kShiftConcatVolume,
  kBilinearSample,
  kReshape,
};

// Per-op constants. Coordinates and masks live here, not in the graph:
// sampling locations and validity decisions are data, not differentiable
// quantities.
struct Attrs {
  int axis = -1;
  int levels = 0;                    // disparity count for shift-concat
  kernels::Conv2dShape conv2d{};
  kernels::Conv3dShape conv3d{};
  double eps = 1e-5;                 // instance-norm stabilizer
  std::vector<double> coords;        // (d,v,u) or (v,u) tuples, flattened
  std::vector<std::uint8_t> mask;    // op-specific validity
  std::vector<int> out_shape;        // reshape target
};

// Eager reverse-mode tape. apply() runs the forward immediately;
// backward() walks the recorded nodes in reverse. One graph per training
// step; parameters enter as leaves and their gradients are read back out
// after backward().
template <class T>
class Graph {
 public:
  struct Node {
    OpKind kind = OpKind::kLeaf;
    std::vector<int> shape;
    std::vector<T> value;
    std::vector<T> grad;     // allocated on first touch in backward
    std::vector<int> inputs;
    Attrs attrs;
    bool requires_grad = false;
  };

  int leaf(Tensor<T> t, bool requires_grad);
  int constant(Tensor<T> t) { return leaf(std::move(t), false); }

  int apply(OpKind kind, std::vector<int> inputs, Attrs attrs = {});

  // Typed wrappers.
  int conv2d(int x, int w, int b, const kernels::Conv2dShape& s);
  int conv3d(int x, int w, int b, const kernels::Conv3dShape& s);
  int relu(int x);
  int linear(int x, int w, int b);  // x [N,in], w [out,in], b [out]
  int softmax_axis(int x, int axis);
  int weighted_index_sum(int x, int axis);
  int instance_norm(int x, std::vector<std::uint8_t> valid, double eps);
  int instance_norm(int x, int gamma, int beta,
                    std::vector<std::uint8_t> valid, double eps);
  int concat_axis(int a, int b, int axis);
  int add(int a, int b);
  int mul(int a, int b);
  int smooth_l1(int pred, int target, std::vector<std::uint8_t> valid = {});
  int bce_with_logits(int logits, int targets,
                      std::vector<std::uint8_t> valid = {});
  int trilinear_sample(int vol, std::vector<double> coords_dvu);
  int cubic_d_sample(int vol, std::vector<double> coords_dvu);
  int mask_zero(int x, std::vector<std::uint8_t> keep);
  int shift_concat_volume(int left, int right, int levels);
  int bilinear_sample(int img, std::vector<double> coords_vu);
  int reshape(int x, std::vector<int> shape);

  void backward(int id, const std::vector<T>* seed = nullptr);

  const Node& node(int id) const { return nodes_[std::size_t(id)]; }
  const std::vector<T>& value(int id) const { return node(id).value; }
  const std::vector<int>& shape(int id) const { return node(id).shape; }
  const std::vector<T>& grad(int id) const { return node(id).grad; }
  T scalar(int id) const;
  int size() const { return int(nodes_.size()); }

  // Kink detection for finite differencing: when enabled, every relu
  // forward folds its input signs into this hash. Two evaluations that
  // disagree stepped across an activation boundary.
  void set_record_activation_signs(bool on) { record_signs_ = on; sign_hash_ = 0x9E3779B97F4A7C15ull; }
  std::uint64_t activation_sign_hash() const { return sign_hash_; }

 private:
  std::vector<Node> nodes_;
  bool record_signs_ = false;
  std::uint64_t sign_hash_ = 0x9E3779B97F4A7C15ull;

  Node& n(int id) { return nodes_[std::size_t(id)]; }
  void ensure_grad(int id);
  void forward_op(Node& out);
  void backward_op(int id);
};

extern template class Graph<float>;
extern template class Graph<double>;

}  // namespace voxmatch::core
