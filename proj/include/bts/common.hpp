#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace bts {

// Row-major double matrix. The workhorse container for multichannel signals
// (samples x channels) and feature sequences (frames x dims). Signal
// preprocessing runs in double precision — referencing must cancel channel
// means far below any float32 rounding floor — and is narrowed to float32
// only at the tensor boundary and in on-disk files.
struct Matrix {
  int64_t rows = 0;
  int64_t cols = 0;
  std::vector<double> data;  // rows * cols entries

  Matrix() = default;
  Matrix(int64_t r, int64_t c, double fill = 0.0)
      : rows(r), cols(c), data(static_cast<size_t>(r * c), fill) {}

  double& at(int64_t r, int64_t c) { return data[static_cast<size_t>(r * cols + c)]; }
  double at(int64_t r, int64_t c) const { return data[static_cast<size_t>(r * cols + c)]; }
  double* row(int64_t r) { return data.data() + r * cols; }
  const double* row(int64_t r) const { return data.data() + r * cols; }
  bool empty() const { return rows == 0 || cols == 0; }
};

[[noreturn]] inline void fail(const std::string& msg) { throw std::runtime_error(msg); }

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

// Join helper for diagnostics: "[a, b, c]".
template <typename Seq>
std::string seq_str(const Seq& xs) {
  std::ostringstream os;
  os << "[";
  bool first = true;
  for (const auto& x : xs) {
    if (!first) os << ", ";
    os << x;
    first = false;
  }
  os << "]";
  return os.str();
}

}  // namespace bts
