#include "bts/fft.hpp"

#include <cmath>

#include "bts/common.hpp"

namespace bts {

namespace {
constexpr double kPi = 3.14159265358979323846;
}

int64_t next_pow2(int64_t n) {
  int64_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

void fft_inplace(std::vector<std::complex<double>>& a, bool inverse) {
  const size_t n = a.size();
  require(n > 0 && (n & (n - 1)) == 0, "fft size must be a power of two, got " + std::to_string(n));
  // Bit-reversal permutation.
  for (size_t i = 1, j = 0; i < n; ++i) {
    size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (size_t len = 2; len <= n; len <<= 1) {
    const double ang = 2.0 * kPi / static_cast<double>(len) * (inverse ? 1.0 : -1.0);
    const std::complex<double> wlen(std::cos(ang), std::sin(ang));
    for (size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (size_t j = 0; j < len / 2; ++j) {
        std::complex<double> u = a[i + j];
        std::complex<double> v = a[i + j + len / 2] * w;
        a[i + j] = u + v;
        a[i + j + len / 2] = u - v;
        w *= wlen;
      }
    }
  }
  if (inverse) {
    for (auto& x : a) x /= static_cast<double>(n);
  }
}

std::vector<double> power_spectrum(std::span<const double> x, int nfft) {
  require(nfft > 0 && (nfft & (nfft - 1)) == 0,
          "power_spectrum nfft must be a power of two, got " + std::to_string(nfft));
  std::vector<std::complex<double>> buf(static_cast<size_t>(nfft), {0.0, 0.0});
  const size_t n = std::min(x.size(), static_cast<size_t>(nfft));
  for (size_t i = 0; i < n; ++i) buf[i] = {x[i], 0.0};
  fft_inplace(buf);
  std::vector<double> out(static_cast<size_t>(nfft / 2 + 1));
  for (size_t k = 0; k < out.size(); ++k) out[k] = std::norm(buf[k]);
  return out;
}

double goertzel_power(std::span<const double> x, double freq_hz, double rate_hz) {
  require(rate_hz > 0.0, "goertzel rate must be positive");
  const double w = 2.0 * kPi * freq_hz / rate_hz;
  const double coeff = 2.0 * std::cos(w);
  double s1 = 0.0, s2 = 0.0;
  for (double v : x) {
    double s0 = v + coeff * s1 - s2;
    s2 = s1;
    s1 = s0;
  }
  // |X|^2 for the probed bin.
  return s1 * s1 + s2 * s2 - coeff * s1 * s2;
}

}  // namespace bts
