#pragma once

#include <string>

#include "fedspike/common.hpp"
#include "fedspike/sequences.hpp"

namespace fedspike::test {

inline std::string random_residues(Rng& rng, std::size_t n, int alphabet = Alphabet::kSize) {
  std::string s(n, 'A');
  for (auto& c : s) c = Alphabet::symbol(static_cast<int>(rng.below(static_cast<std::uint64_t>(alphabet))));
  return s;
}

inline Matrix random_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols, double lo = -1.0, double hi = 1.0) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(lo, hi);
  return m;
}

template <typename F>
ErrorKind error_kind_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  return static_cast<ErrorKind>(0);
}

template <typename F>
std::string error_text_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.what();
  }
  return {};
}

}  // namespace fedspike::test
