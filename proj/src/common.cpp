#include "fedspike/common.hpp"

#include <atomic>
#include <iostream>

namespace fedspike {

namespace {
std::atomic<bool> g_warnings_enabled{true};
}

const char* error_kind_name(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kConfig: return "config";
    case ErrorKind::kData: return "data";
    case ErrorKind::kTraining: return "training";
    case ErrorKind::kAudit: return "audit";
    case ErrorKind::kVersionMismatch: return "version-mismatch";
    case ErrorKind::kTimeout: return "timeout";
    case ErrorKind::kMalformedFrame: return "malformed-frame";
    case ErrorKind::kInsufficientNodes: return "insufficient-nodes";
  }
  return "unknown";
}

std::uint64_t Rng::below(std::uint64_t n) {
  if (n == 0) throw std::invalid_argument("Rng::below(0)");
  // Rejection sampling keeps the draw unbiased.
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t x;
  do {
    x = engine_();
  } while (x >= limit);
  return x % n;
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
  std::uint64_t z = base + 0x9E3779B97F4A7C15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

void warn(const std::string& message) {
  if (g_warnings_enabled.load()) std::cerr << "warning: " << message << '\n';
}

void set_warnings_enabled(bool enabled) { g_warnings_enabled.store(enabled); }

int argmax(const double* row, int n) {
  int best = 0;
  for (int j = 1; j < n; ++j) {
    if (row[j] > row[best]) best = j;
  }
  return best;
}

}  // namespace fedspike
