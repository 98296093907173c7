#include "voxmatch/core/param_store.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace voxmatch::core {

namespace {
constexpr char kMagic[4] = {'V', 'X', 'M', 'P'};
constexpr std::uint32_t kVersion = 1;

template <class T>
void put(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T take(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("checkpoint truncated");
  return v;
}
}  // namespace

ParamStore::Entry& ParamStore::emplace(const std::string& name,
                                       Tensor<float> t) {
  if (has(name)) throw std::invalid_argument("duplicate parameter " + name);
  Entry e;
  e.name = name;
  e.m.assign(t.numel(), 0.0f);
  e.v.assign(t.numel(), 0.0f);
  e.value = std::move(t);
  entries_.push_back(std::move(e));
  index_[name] = entries_.size() - 1;
  return entries_.back();
}

Tensor<float>& ParamStore::create_he(const std::string& name,
                                     std::vector<int> shape,
                                     std::size_t fan_in, Rng& rng) {
  Tensor<float> t = Tensor<float>::zeros(std::move(shape));
  const double std = std::sqrt(2.0 / double(fan_in ? fan_in : 1));
  for (auto& v : t.data) v = float(std * rng.normal());
  return emplace(name, std::move(t)).value;
}

Tensor<float>& ParamStore::create_const(const std::string& name,
                                        std::vector<int> shape, float v) {
  return emplace(name, Tensor<float>::full(std::move(shape), v)).value;
}

bool ParamStore::has(const std::string& name) const {
  return index_.count(name) != 0;
}

Tensor<float>& ParamStore::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end())
    throw std::out_of_range("unknown parameter " + name);
  return entries_[it->second].value;
}

const Tensor<float>& ParamStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end())
    throw std::out_of_range("unknown parameter " + name);
  return entries_[it->second].value;
}

void ParamStore::adam_step(
    const std::vector<std::pair<std::string, const std::vector<float>*>>&
        grads,
    const AdamConfig& cfg) {
  ++step_;
  const double bc1 = 1.0 - std::pow(cfg.beta1, double(step_));
  const double bc2 = 1.0 - std::pow(cfg.beta2, double(step_));
  for (const auto& [name, g] : grads) {
    auto it = index_.find(name);
    if (it == index_.end())
      throw std::out_of_range("unknown parameter " + name);
    Entry& e = entries_[it->second];
    if (!g || g->size() != e.value.numel())
      throw std::invalid_argument("gradient size mismatch for " + name);
    for (std::size_t i = 0; i < g->size(); ++i) {
      const double gi = double((*g)[i]);
      const double m =
          cfg.beta1 * double(e.m[i]) + (1.0 - cfg.beta1) * gi;
      const double v =
          cfg.beta2 * double(e.v[i]) + (1.0 - cfg.beta2) * gi * gi;
      e.m[i] = float(m);
      e.v[i] = float(v);
      const double mh = m / bc1;
      const double vh = v / bc2;
      e.value.data[i] -= float(cfg.lr * mh / (std::sqrt(vh) + cfg.eps));
    }
  }
}

void ParamStore::save(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path);
  os.write(kMagic, 4);
  put(os, kVersion);
  put(os, std::int64_t(step_));
  put(os, std::uint32_t(entries_.size()));
  for (const Entry& e : entries_) {
    put(os, std::uint32_t(e.name.size()));
    os.write(e.name.data(), std::streamsize(e.name.size()));
    put(os, std::uint32_t(e.value.shape.size()));
    for (int d : e.value.shape) put(os, std::int32_t(d));
    os.write(reinterpret_cast<const char*>(e.value.data.data()),
             std::streamsize(e.value.numel() * sizeof(float)));
    os.write(reinterpret_cast<const char*>(e.m.data()),
             std::streamsize(e.m.size() * sizeof(float)));
    os.write(reinterpret_cast<const char*>(e.v.data()),
             std::streamsize(e.v.size() * sizeof(float)));
  }
  if (!os) throw std::runtime_error("write failed for " + path);
}

void ParamStore::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("not a checkpoint: " + path);
  if (take<std::uint32_t>(is) != kVersion)
    throw std::runtime_error("unsupported checkpoint version");
  entries_.clear();
  index_.clear();
  step_ = take<std::int64_t>(is);
  const std::uint32_t count = take<std::uint32_t>(is);
  for (std::uint32_t k = 0; k < count; ++k) {
    const std::uint32_t name_len = take<std::uint32_t>(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    const std::uint32_t rank = take<std::uint32_t>(is);
    std::vector<int> shape(rank);
    for (auto& d : shape) d = int(take<std::int32_t>(is));
    Tensor<float> t = Tensor<float>::zeros(shape);
    is.read(reinterpret_cast<char*>(t.data.data()),
            std::streamsize(t.numel() * sizeof(float)));
    Entry& e = emplace(name, std::move(t));
    is.read(reinterpret_cast<char*>(e.m.data()),
            std::streamsize(e.m.size() * sizeof(float)));
    is.read(reinterpret_cast<char*>(e.v.data()),
            std::streamsize(e.v.size() * sizeof(float)));
    if (!is) throw std::runtime_error("checkpoint truncated");
  }
}

}  // namespace voxmatch::core
