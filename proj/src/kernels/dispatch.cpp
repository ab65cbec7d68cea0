#include <atomic>
#include <cstdlib>
#include <string_view>

#include "patchmoe/kernels.hpp"

namespace patchmoe::kernels {
namespace {

const KernelTable* initial_choice() {
  if (const char* env = std::getenv("PATCHMOE_KERNELS")) {
    const std::string_view want{env};
    if (want == "scalar") return &scalar_table();
    if (want == "avx2" && avx2_table() != nullptr) return avx2_table();
  }
  if (const KernelTable* t = avx2_table()) return t;
  return &scalar_table();
}

std::atomic<const KernelTable*>& current() {
  static std::atomic<const KernelTable*> table{initial_choice()};
  return table;
}

}  // namespace

const KernelTable& active() { return *current().load(std::memory_order_acquire); }

bool select(std::string_view name) {
  const KernelTable* t = nullptr;
  if (name == "scalar")
    t = &scalar_table();
  else if (name == "avx2")
    t = avx2_table();
  if (t == nullptr) return false;
  current().store(t, std::memory_order_release);
  return true;
}

}  // namespace patchmoe::kernels
