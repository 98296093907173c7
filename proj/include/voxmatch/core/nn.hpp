#pragma once

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "voxmatch/core/graph.hpp"
#include "voxmatch/core/param_store.hpp"

namespace voxmatch::core {

// Conv/linear parameter registration. Weights are He-initialized from the
// receptive-field fan-in; biases start at `bias` (zero unless a head needs
// a prior, like objectness).
inline void init_conv2d(ParamStore& s, const std::string& name, int cin,
                        int cout, int k, Rng& rng, float bias = 0.0f) {
  s.create_he(name + ".w", {cout, cin, k, k}, std::size_t(cin) * k * k, rng);
  s.create_const(name + ".b", {cout}, bias);
}

inline void init_conv3d(ParamStore& s, const std::string& name, int cin,
                        int cout, int k, Rng& rng, float bias = 0.0f) {
  s.create_he(name + ".w", {cout, cin, k, k, k},
              std::size_t(cin) * k * k * k, rng);
  s.create_const(name + ".b", {cout}, bias);
}

inline void init_linear(ParamStore& s, const std::string& name, int in,
                        int out, Rng& rng, float bias = 0.0f) {
  s.create_he(name + ".w", {out, in}, std::size_t(in), rng);
  s.create_const(name + ".b", {out}, bias);
}

// Node ids of the parameter leaves inside one graph instance.
struct ParamLeaves {
  std::map<std::string, int> ids;

  int operator()(const std::string& name) const {
    auto it = ids.find(name);
    if (it == ids.end())
      throw std::out_of_range("no parameter leaf " + name);
    return it->second;
  }
};

// Copies every stored parameter into the graph as a leaf. Training graphs
// set requires_grad; evaluation graphs skip gradient buffers entirely.
template <class T>
ParamLeaves make_param_leaves(Graph<T>& g, const ParamStore& store,
                              bool requires_grad) {
  ParamLeaves leaves;
  for (const auto& e : store.entries()) {
    Tensor<T> t;
    t.shape = e.value.shape;
    t.data.assign(e.value.data.begin(), e.value.data.end());
    leaves.ids[e.name] = g.leaf(std::move(t), requires_grad);
  }
  return leaves;
}

// Gradient views for ParamStore::adam_step after backward(). Parameters
// whose leaves were never touched contribute zero-filled buffers.
inline std::vector<std::pair<std::string, const std::vector<float>*>>
collect_grads(Graph<float>& g, const ParamLeaves& leaves,
              std::vector<std::vector<float>>& scratch) {
  std::vector<std::pair<std::string, const std::vector<float>*>> out;
  scratch.clear();
  scratch.reserve(leaves.ids.size());
  for (const auto& [name, id] : leaves.ids) {
    const auto& gr = g.grad(id);
    if (gr.empty()) {
      scratch.emplace_back(g.value(id).size(), 0.0f);
      out.emplace_back(name, &scratch.back());
    } else {
      out.emplace_back(name, &gr);
    }
  }
  return out;
}

}  // namespace voxmatch::core
