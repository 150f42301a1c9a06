#include "cki/kernels.hpp"

#include <cstdlib>
#include <stdexcept>

namespace cki::kernels {
namespace {

const Ops* g_active = nullptr;

const Ops* pick_auto() {
#if defined(__x86_64__) || defined(_M_X64)
  if (avx2_supported()) return &avx2_ops;
#endif
  return &scalar_ops;
}

const Ops* resolve(const std::string& name) {
  if (name == "auto") return pick_auto();
  if (name == "scalar") return &scalar_ops;
#if defined(__x86_64__) || defined(_M_X64)
  if (name == "avx2") {
    if (!avx2_supported()) throw std::runtime_error("avx2 backend not supported on this CPU");
    return &avx2_ops;
  }
#endif
  throw std::runtime_error("unknown kernel backend: " + name);
}

}  // namespace

bool avx2_supported() {
#if defined(__x86_64__) || defined(_M_X64)
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

const Ops& ops() {
  if (g_active == nullptr) {
    const char* env = std::getenv("CKI_KERNEL_BACKEND");
    g_active = env != nullptr ? resolve(env) : pick_auto();
  }
  return *g_active;
}

void set_backend(const std::string& name) { g_active = resolve(name); }

std::string backend_name() { return ops().name; }

}  // namespace cki::kernels
