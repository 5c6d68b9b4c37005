#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace fedspike {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

// Values double as process exit codes in the CLI.
enum class ErrorKind : int {
  kConfig = 2,
  kData = 3,
  kTraining = 4,
  kAudit = 5,
  kVersionMismatch = 6,
  kTimeout = 7,
  kMalformedFrame = 8,
  kInsufficientNodes = 9,
};

const char* error_kind_name(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

// Thin wrapper over mt19937_64 whose derived draws do not depend on the
// standard library's distribution implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }
  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);

  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::swap(items[i - 1], items[below(i)]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

// Independent seed for a numbered sub-stream (splitmix64 finaliser).
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream);

// Emits a diagnostic line on stderr. Kept behind a function so tests can
// silence it.
void warn(const std::string& message);
void set_warnings_enabled(bool enabled);

// Index of the largest entry; ties resolve to the lowest index.
int argmax(const double* row, int n);

}  // namespace fedspike
