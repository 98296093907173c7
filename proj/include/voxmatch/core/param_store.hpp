#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "voxmatch/core/rng.hpp"
#include "voxmatch/core/tensor.hpp"

namespace voxmatch::core {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Named parameter set with Adam state. Parameters keep insertion order so
// checkpoints and update sweeps are deterministic.
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor<float> value;
    std::vector<float> m, v;
  };

  // He-style init: normal with std sqrt(2 / fan_in).
  Tensor<float>& create_he(const std::string& name, std::vector<int> shape,
                           std::size_t fan_in, Rng& rng);
  Tensor<float>& create_const(const std::string& name,
                              std::vector<int> shape, float v);

  bool has(const std::string& name) const;
  Tensor<float>& get(const std::string& name);
  const Tensor<float>& get(const std::string& name) const;

  // One optimizer step over the listed (name, gradient) pairs. Gradients
  // must match the parameter sizes; parameters not listed keep their
  // moments untouched.
  void adam_step(
      const std::vector<std::pair<std::string, const std::vector<float>*>>&
          grads,
      const AdamConfig& cfg);

  std::int64_t step_count() const { return step_; }
  std::size_t size() const { return entries_.size(); }
  const std::vector<Entry>& entries() const { return entries_; }

  void save(const std::string& path) const;
  void load(const std::string& path);

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
  std::int64_t step_ = 0;

  Entry& emplace(const std::string& name, Tensor<float> t);
};

}  // namespace voxmatch::core
