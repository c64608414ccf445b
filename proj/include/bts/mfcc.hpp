#pragma once

#include <utility>
#include <vector>

#include "bts/common.hpp"
#include "bts/phoneme.hpp"

namespace bts::features {

// Analysis constants: 16 kHz internal rate, 32 ms Hann window, 8 ms hop so
// audio frames line up one-to-one with the model's 1000 Hz / 8 frame grid.
inline constexpr int kNumCoeffs = 80;
inline constexpr int kAnalysisRateHz = 16000;
inline constexpr int kWindowSamples = 512;  // 32 ms
inline constexpr int kHopSamples = 128;     // 8 ms
inline constexpr int kNfft = 1024;
inline constexpr double kFramePeriodMs = 8.0;
inline constexpr double kPreEmphasis = 0.97;
inline constexpr double kLogFloor = 1e-10;

struct AudioClip {
  std::vector<double> samples;  // mono, nominally within [-1, 1]
  int sample_rate_hz = 0;

  double duration_ms() const {
    return sample_rate_hz > 0 ? 1000.0 * static_cast<double>(samples.size()) / sample_rate_hz
                              : 0.0;
  }
};

struct MfccFrames {
  Matrix frames;  // T x 80
  double frame_period_ms = kFramePeriodMs;
};

// Windowed-sinc resampler (anti-aliased when downsampling).
std::vector<double> resample(const std::vector<double>& x, int from_hz, int to_hz);

// 80-dim MFCC at 8 ms frame period; frame count = ceil(duration_ms / 8).
MfccFrames extract_mfcc(const AudioClip& clip);

// Center frequencies (Hz) of the 80 mel filters, exposed for direct tests of
// the filter-bank response.
std::vector<double> mel_filter_centers();
// Applies the mel bank to a power spectrum over bins 0..kNfft/2.
std::vector<double> mel_bank_response(const std::vector<double>& power);

// MFCC target plus per-frame labels, lengths equal; the transcript must
// match the clip duration within 50 ms (shorter transcripts leave trailing
// silence frames).
std::pair<MfccFrames, std::vector<int>> build_training_target(
    const AudioClip& clip, const phoneme::AlignedTranscript& transcript,
    const phoneme::PhonemeInventory& inv);

}  // namespace bts::features
