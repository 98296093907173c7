#include "voxmatch/kernels/kernels.hpp"

#include <cstdlib>
#include <stdexcept>
#include <string>

namespace voxmatch::kernels {
namespace {

bool avx2_available() {
#if defined(__x86_64__) || defined(_M_X64)
  return __builtin_cpu_supports("avx2");
#else
  return false;
#endif
}

bool neon_available() {
#if defined(__aarch64__)
  return true;
#else
  return false;
#endif
}

// "" = automatic.
std::string& forced() {
  static std::string s;
  return s;
}

std::string resolve_name() {
  if (!forced().empty()) return forced();
  if (const char* env = std::getenv("VOXMATCH_KERNELS"); env && *env) {
    std::string want(env);
    if (want == "scalar") return want;
    if (want == "avx2" && avx2_available()) return want;
    if (want == "neon" && neon_available()) return want;
    // Unusable env override falls through to autodetection rather than
    // aborting the process.
  }
  if (avx2_available()) return "avx2";
  if (neon_available()) return "neon";
  return "scalar";
}

template <class T>
const KernelTable<T>& table_for(const std::string& name) {
  if (name == "avx2") {
    if (const KernelTable<T>* t = avx2_table<T>()) return *t;
  } else if (name == "neon") {
    if (const KernelTable<T>* t = neon_table<T>()) return *t;
  }
  return scalar_table<T>();
}

// Re-resolved whenever force_backend() changes the selection.
std::string& selected() {
  static std::string s = resolve_name();
  return s;
}

}  // namespace

template <>
const KernelTable<float>& active<float>() {
  return table_for<float>(selected());
}

template <>
const KernelTable<double>& active<double>() {
  return table_for<double>(selected());
}

void force_backend(std::string_view name) {
  if (name.empty()) {
    forced().clear();
    selected() = resolve_name();
    return;
  }
  std::string want(name);
  if (want != "scalar" && want != "avx2" && want != "neon")
    throw std::invalid_argument("unknown kernel backend: " + want);
  if (want == "avx2" && !avx2_available())
    throw std::runtime_error("avx2 kernels unavailable on this machine");
  if (want == "neon" && !neon_available())
    throw std::runtime_error("neon kernels unavailable on this machine");
  forced() = want;
  selected() = want;
}

std::string_view active_backend_name() { return selected(); }

}  // namespace voxmatch::kernels
