#pragma once

#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace voxmatch::core {

// Dense row-major array. Shape is kept separate from data so graph nodes
// can reinterpret without copying the extents around.
template <class T>
struct Tensor {
  std::vector<int> shape;
  std::vector<T> data;

  Tensor() = default;
  Tensor(std::vector<int> sh, std::vector<T> d)
      : shape(std::move(sh)), data(std::move(d)) {
    if (data.size() != numel_of(shape))
      throw std::invalid_argument("tensor data does not match shape");
  }

  static std::size_t numel_of(const std::vector<int>& sh) {
    std::size_t n = 1;
    for (int e : sh) {
      if (e < 0) throw std::invalid_argument("negative extent");
      n *= std::size_t(e);
    }
    return n;
  }

  static Tensor zeros(std::vector<int> sh) {
    std::size_t n = numel_of(sh);
    return Tensor(std::move(sh), std::vector<T>(n, T(0)));
  }

  static Tensor full(std::vector<int> sh, T v) {
    std::size_t n = numel_of(sh);
    return Tensor(std::move(sh), std::vector<T>(n, v));
  }

  static Tensor scalar(T v) { return Tensor({1}, {v}); }

  std::size_t numel() const { return data.size(); }

  T& at(std::initializer_list<int> idx) {
    return data[offset_of(idx)];
  }
  const T& at(std::initializer_list<int> idx) const {
    return data[offset_of(idx)];
  }

  std::size_t offset_of(std::initializer_list<int> idx) const {
    if (idx.size() != shape.size())
      throw std::invalid_argument("index rank mismatch");
    std::size_t off = 0;
    auto it = idx.begin();
    for (std::size_t a = 0; a < shape.size(); ++a, ++it) {
      if (*it < 0 || *it >= shape[a])
        throw std::out_of_range("index out of range");
      off = off * std::size_t(shape[a]) + std::size_t(*it);
    }
    return off;
  }

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.assign(data.begin(), data.end());
    return out;
  }
};

inline std::string shape_str(const std::vector<int>& sh) {
  std::string s = "[";
  for (std::size_t i = 0; i < sh.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(sh[i]);
  }
  return s + "]";
}

}  // namespace voxmatch::core
