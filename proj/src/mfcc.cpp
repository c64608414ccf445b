#include "bts/mfcc.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>

#include "bts/fft.hpp"

namespace bts::features {
namespace {

constexpr double kPi = std::numbers::pi;

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

// Triangular mel filters, peak response 1, spanning 0 Hz .. Nyquist of the
// 16 kHz analysis rate. kNumCoeffs filters need kNumCoeffs + 2 edge points.
struct MelBank {
  // weights[f] covers FFT bins [first_bin[f], first_bin[f] + weights[f].size())
  std::vector<int> first_bin;
  std::vector<std::vector<double>> weights;
  std::vector<double> center_hz;
};

const MelBank& mel_bank() {
  static const MelBank bank = [] {
    MelBank b;
    const int n_bins = kNfft / 2 + 1;
    const double bin_hz = static_cast<double>(kAnalysisRateHz) / kNfft;
    const double mel_lo = hz_to_mel(0.0);
    const double mel_hi = hz_to_mel(kAnalysisRateHz / 2.0);
    std::vector<double> edges(kNumCoeffs + 2);
    for (int i = 0; i < kNumCoeffs + 2; ++i) {
      edges[i] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * i / (kNumCoeffs + 1));
    }
    b.first_bin.resize(kNumCoeffs);
    b.weights.resize(kNumCoeffs);
    b.center_hz.resize(kNumCoeffs);
    for (int f = 0; f < kNumCoeffs; ++f) {
      const double lo = edges[f], mid = edges[f + 1], hi = edges[f + 2];
      b.center_hz[f] = mid;
      int first = static_cast<int>(std::ceil(lo / bin_hz));
      if (first < 0) first = 0;
      std::vector<double> w;
      for (int bin = first; bin < n_bins; ++bin) {
        const double hz = bin * bin_hz;
        if (hz >= hi) break;
        double v = hz <= mid ? (mid > lo ? (hz - lo) / (mid - lo) : 0.0)
                             : (hi > mid ? (hi - hz) / (hi - mid) : 0.0);
        w.push_back(std::max(0.0, v));
      }
      // Trim leading zeros (bin exactly at the lower edge).
      while (!w.empty() && w.front() == 0.0) {
        w.erase(w.begin());
        ++first;
      }
      b.first_bin[f] = first;
      b.weights[f] = std::move(w);
    }
    return b;
  }();
  return bank;
}

// Orthonormal DCT-II matrix, kNumCoeffs x kNumCoeffs.
const std::vector<double>& dct_matrix() {
  static const std::vector<double> m = [] {
    std::vector<double> d(static_cast<size_t>(kNumCoeffs) * kNumCoeffs);
    const int n = kNumCoeffs;
    for (int k = 0; k < n; ++k) {
      const double scale = std::sqrt((k == 0 ? 1.0 : 2.0) / n);
      for (int j = 0; j < n; ++j) {
        d[static_cast<size_t>(k) * n + j] = scale * std::cos(kPi * (j + 0.5) * k / n);
      }
    }
    return d;
  }();
  return m;
}

const std::vector<double>& hann_window() {
  static const std::vector<double> w = [] {
    std::vector<double> v(kWindowSamples);
    for (int i = 0; i < kWindowSamples; ++i) {
      v[i] = 0.5 - 0.5 * std::cos(2.0 * kPi * i / (kWindowSamples - 1));
    }
    return v;
  }();
  return w;
}

}  // namespace

std::vector<double> resample(const std::vector<double>& x, int from_hz, int to_hz) {
  require(from_hz > 0 && to_hz > 0, "resample: rates must be positive");
  if (from_hz == to_hz) return x;
  if (x.empty()) return {};
  const double ratio = static_cast<double>(from_hz) / to_hz;
  // Output length preserves duration: ceil(n * to / from).
  const auto n_out = static_cast<size_t>(
      (x.size() * static_cast<uint64_t>(to_hz) + from_hz - 1) / from_hz);
  // Anti-aliasing cutoff at the lower Nyquist; 16-tap half-width sinc.
  const double cutoff = 0.5 * std::min(from_hz, to_hz) / from_hz;  // cycles/sample of x
  const double half_width = 16.0 * std::max(1.0, ratio);
  std::vector<double> y(n_out);
  for (size_t i = 0; i < n_out; ++i) {
    const double t = i * ratio;  // position in input samples
    const auto lo = static_cast<int64_t>(std::ceil(t - half_width));
    const auto hi = static_cast<int64_t>(std::floor(t + half_width));
    double acc = 0.0, wsum = 0.0;
    for (int64_t j = lo; j <= hi; ++j) {
      const double d = t - j;
      double s = 2.0 * cutoff;
      if (d != 0.0) s = std::sin(2.0 * kPi * cutoff * d) / (kPi * d);
      const double u = d / half_width;  // Hann taper over the kernel support
      const double w = 0.5 + 0.5 * std::cos(kPi * std::clamp(u, -1.0, 1.0));
      const double xv =
          (j >= 0 && j < static_cast<int64_t>(x.size())) ? x[static_cast<size_t>(j)] : 0.0;
      acc += s * w * xv;
      wsum += s * w;
    }
    // Normalizing by the kernel sum keeps unit DC gain for constant inputs.
    y[i] = wsum != 0.0 ? acc / wsum : 0.0;
  }
  return y;
}

std::vector<double> mel_filter_centers() { return mel_bank().center_hz; }

std::vector<double> mel_bank_response(const std::vector<double>& power) {
  require(power.size() == static_cast<size_t>(kNfft / 2 + 1),
          "mel_bank_response: expected " + std::to_string(kNfft / 2 + 1) + " bins, got " +
              std::to_string(power.size()));
  const MelBank& bank = mel_bank();
  std::vector<double> out(kNumCoeffs, 0.0);
  for (int f = 0; f < kNumCoeffs; ++f) {
    double acc = 0.0;
    const auto& w = bank.weights[f];
    const int first = bank.first_bin[f];
    for (size_t j = 0; j < w.size(); ++j) acc += w[j] * power[first + j];
    out[f] = acc;
  }
  return out;
}

MfccFrames extract_mfcc(const AudioClip& clip) {
  require(clip.sample_rate_hz > 0, "extract_mfcc: sample rate must be positive");
  require(!clip.samples.empty(), "extract_mfcc: empty clip");
  const double duration_ms = clip.duration_ms();
  require(duration_ms + 1e-9 >= kFramePeriodMs,
          "extract_mfcc: clip shorter than one frame (" + std::to_string(duration_ms) +
              " ms < " + std::to_string(kFramePeriodMs) + " ms)");

  std::vector<double> audio = resample(clip.samples, clip.sample_rate_hz, kAnalysisRateHz);

  // Pre-emphasis.
  std::vector<double> emph(audio.size());
  emph[0] = audio[0];
  for (size_t i = 1; i < audio.size(); ++i) emph[i] = audio[i] - kPreEmphasis * audio[i - 1];

  const int n_frames = static_cast<int>(std::ceil(duration_ms / kFramePeriodMs - 1e-9));
  const auto& win = hann_window();
  const auto& dct = dct_matrix();

  Matrix out(n_frames, kNumCoeffs);
  std::vector<double> frame(kNfft);
  for (int t = 0; t < n_frames; ++t) {
    // Window centered on the frame: starts at t*hop - (win-hop)/2 so frame t
    // describes audio around [t*8ms, (t+1)*8ms); out-of-range samples are 0.
    const int64_t start = static_cast<int64_t>(t) * kHopSamples - (kWindowSamples - kHopSamples) / 2;
    std::fill(frame.begin(), frame.end(), 0.0);
    for (int i = 0; i < kWindowSamples; ++i) {
      const int64_t src = start + i;
      if (src >= 0 && src < static_cast<int64_t>(emph.size())) {
        frame[i] = emph[static_cast<size_t>(src)] * win[i];
      }
    }
    std::vector<double> power = power_spectrum(frame, kNfft);
    std::vector<double> mel = mel_bank_response(power);
    for (double& v : mel) v = std::log(std::max(v, kLogFloor));
    for (int k = 0; k < kNumCoeffs; ++k) {
      double acc = 0.0;
      const double* row = dct.data() + static_cast<size_t>(k) * kNumCoeffs;
      for (int j = 0; j < kNumCoeffs; ++j) acc += row[j] * mel[j];
      out.at(t, k) = acc;
    }
  }
  MfccFrames result;
  result.frames = std::move(out);
  return result;
}

std::pair<MfccFrames, std::vector<int>> build_training_target(
    const AudioClip& clip, const phoneme::AlignedTranscript& transcript,
    const phoneme::PhonemeInventory& inv) {
  transcript.validate(inv);
  const double audio_ms = clip.duration_ms();
  const double trans_ms = transcript.duration_ms();
  require(std::abs(audio_ms - trans_ms) <= 50.0 + 1e-9,
          "build_training_target: transcript duration " + std::to_string(trans_ms) +
              " ms differs from audio duration " + std::to_string(audio_ms) +
              " ms by more than 50 ms");

  MfccFrames mfcc = extract_mfcc(clip);
  const int n_frames = static_cast<int>(mfcc.frames.rows);

  // A transcript running past the audio is clamped to the audio extent so the
  // label grid covers exactly the analyzed frames.
  phoneme::AlignedTranscript clamped = transcript;
  if (trans_ms > audio_ms) {
    auto& segs = clamped.segments;
    while (!segs.empty() && segs.back().start_ms >= audio_ms) segs.pop_back();
    require(!segs.empty(), "build_training_target: transcript entirely past the audio");
    segs.back().end_ms = std::min(segs.back().end_ms, audio_ms);
  }

  std::vector<int> labels = phoneme::frame_labels(clamped, kFramePeriodMs, n_frames, inv);
  return {std::move(mfcc), std::move(labels)};
}

}  // namespace bts::features
