#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bts/common.hpp"
#include "bts/phoneme.hpp"

// Synthetic corpus generator: every phoneme class gets a fixed random spatial
// pattern over channels and a fixed feature template, sentences are rendered
// by modulating those patterns over silence-delimited segment timelines, and
// a matched-filter oracle recovers the planted labels. This gives the whole
// pipeline a ground-truth corpus at desk scale.
namespace bts::synthgen {

struct SynthConfig {
  int n_sentences = 10;
  int min_phonemes = 3;  // non-silence tokens per sentence
  int max_phonemes = 8;
  int eeg_channels = 127;
  int emg_channels = 10;
  int sample_rate_hz = 1000;
  double min_segment_ms = 40.0;
  double max_segment_ms = 200.0;
  // Signal-to-noise ratio of the additive white noise; +infinity disables the
  // noise entirely (the noiseless oracle case).
  double snr_db = 10.0;
  uint64_t seed = 0;
  // When positive, phoneme patterns ride a sinusoidal carrier at this
  // frequency (for band-ablation experiments); 0 means a broadband carrier.
  double band_center_hz = 0.0;
  int mfcc_dim = 80;
  double frame_period_ms = 8.0;
  double template_jitter = 0.05;  // per-frame feature noise around the template
  double gap_ms = 200.0;          // inter-trial gap in the emitted recording

  int channels() const { return eeg_channels + emg_channels; }
  int samples_per_frame() const;
  void validate() const;
};

// Fixed per-class generators: unit-norm spatial patterns and feature
// templates, drawn once from the config seed.
struct Signatures {
  Matrix spatial;    // (classes x channels), each row unit L2 norm
  Matrix templates;  // (classes x mfcc_dim)
};

Signatures make_signatures(const SynthConfig& config, const phoneme::PhonemeInventory& inv);

struct SynthTrial {
  phoneme::AlignedTranscript transcript;
  Matrix signals;      // (samples x channels), pattern + noise
  Matrix target_mfcc;  // (frames x mfcc_dim)
  std::vector<int> frame_labels;
};

struct SynthDataset {
  SynthConfig config;
  Signatures signatures;
  std::vector<SynthTrial> trials;
};

// Deterministic per seed (per-sentence derived streams). Frame labels come
// from the same frame-center rule the alignment reader uses, so alignment
// files round-trip with zero disagreements.
SynthDataset generate(const SynthConfig& config, const phoneme::PhonemeInventory& inv);

// Matched-filter reference decoder: per frame, the class whose spatial
// pattern captures the most projected energy. The ceiling against which
// trained models are compared.
std::vector<int> oracle_decode(const Matrix& signals, const Signatures& signatures,
                               int samples_per_frame);

// Writes the corpus in the shared on-disk layout: one continuous recording
// (trials separated by flat gaps, one marker per trial), per-sentence
// alignment files and feature targets, and a manifest tying them together.
// Byte-identical for identical datasets.
void write_dataset(const SynthDataset& dataset, const std::string& dir);

}  // namespace bts::synthgen
