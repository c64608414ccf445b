#pragma once

#include <complex>
#include <cstdint>
#include <span>
#include <vector>

namespace bts {

// In-place radix-2 Cooley-Tukey FFT; size must be a power of two.
// inverse=true applies the conjugate transform including the 1/n scale.
void fft_inplace(std::vector<std::complex<double>>& a, bool inverse = false);

// Smallest power of two >= n.
int64_t next_pow2(int64_t n);

// Power |X_k|^2 of the length-nfft DFT of x (zero padded / truncated),
// for bins k = 0 .. nfft/2. No window is applied.
std::vector<double> power_spectrum(std::span<const double> x, int nfft);

// Power of a single frequency component measured with the Goertzel
// recurrence: |sum_n x[n] e^{-i 2 pi f n / fs}|^2. Used to probe filter
// attenuation at an exact frequency without committing to an FFT grid.
double goertzel_power(std::span<const double> x, double freq_hz, double rate_hz);

}  // namespace bts
