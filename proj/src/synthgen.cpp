#include "bts/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <numbers>

#include "bts/dataset.hpp"
#include "bts/rng.hpp"
#include "bts/signal.hpp"

namespace bts::synthgen {

int SynthConfig::samples_per_frame() const {
  const double exact = static_cast<double>(sample_rate_hz) * frame_period_ms / 1000.0;
  const int spf = static_cast<int>(std::llround(exact));
  require(spf >= 1 && std::abs(exact - spf) < 1e-6,
          "frame period " + std::to_string(frame_period_ms) + " ms at " +
              std::to_string(sample_rate_hz) + " Hz is not a whole number of samples");
  return spf;
}

void SynthConfig::validate() const {
  require(n_sentences >= 0, "n_sentences must be non-negative");
  require(min_phonemes >= 1 && min_phonemes <= max_phonemes,
          "phonemes-per-sentence range is degenerate");
  require(eeg_channels >= 0 && emg_channels >= 0 && channels() > 0,
          "channel counts must be non-negative with at least one channel in total");
  require(sample_rate_hz > 0, "sample rate must be positive");
  require(frame_period_ms > 0.0, "frame period must be positive");
  require(min_segment_ms >= frame_period_ms && min_segment_ms <= max_segment_ms,
          "segment duration range is degenerate (min must cover one frame)");
  require(!std::isnan(snr_db) && snr_db > -std::numeric_limits<double>::infinity(),
          "snr_db must be a number (+infinity means noiseless)");
  require(mfcc_dim >= 2, "feature dimension must be at least 2");
  require(template_jitter >= 0.0, "template jitter must be non-negative");
  require(gap_ms > 0.0, "inter-trial gap must be positive");
  if (band_center_hz != 0.0)
    require(band_center_hz > 0.0 && band_center_hz < sample_rate_hz / 2.0,
            "band_center_hz must lie below the Nyquist frequency");
  samples_per_frame();  // throws when the grid does not divide evenly
}

Signatures make_signatures(const SynthConfig& config, const phoneme::PhonemeInventory& inv) {
  config.validate();
  Rng rng(Rng::derive(config.seed, 1));
  const int classes = inv.size();
  Signatures sig;
  sig.spatial = Matrix(classes, config.channels());
  sig.templates = Matrix(classes, config.mfcc_dim);
  for (int c = 0; c < classes; ++c) {
    double norm_sq = 0.0;
    for (int64_t ch = 0; ch < sig.spatial.cols; ++ch) {
      const double v = rng.gaussian();
      sig.spatial.at(c, ch) = v;
      norm_sq += v * v;
    }
    const double inv_norm = 1.0 / std::sqrt(norm_sq);
    for (int64_t ch = 0; ch < sig.spatial.cols; ++ch) sig.spatial.at(c, ch) *= inv_norm;
  }
  for (int c = 0; c < classes; ++c)
    for (int64_t d = 0; d < sig.templates.cols; ++d) sig.templates.at(c, d) = rng.gaussian();
  return sig;
}

namespace {

std::string sentence_name(int index) {
  std::string digits = std::to_string(index + 1);
  while (digits.size() < 4) digits.insert(digits.begin(), '0');
  return "s" + digits;
}

}  // namespace

SynthDataset generate(const SynthConfig& config, const phoneme::PhonemeInventory& inv) {
  config.validate();
  SynthDataset ds;
  ds.config = config;
  ds.signatures = make_signatures(config, inv);
  const int spf = config.samples_per_frame();
  const int sil = inv.sil_index();

  for (int s = 0; s < config.n_sentences; ++s) {
    Rng rng(Rng::derive(config.seed, 1000 + static_cast<uint64_t>(s)));
    SynthTrial trial;

    // Silence-delimited token sequence over the non-silence classes.
    const int k = config.min_phonemes + rng.uniform_int(config.max_phonemes -
                                                        config.min_phonemes + 1);
    std::vector<int> tokens{sil};
    for (int i = 0; i < k; ++i) tokens.push_back(rng.uniform_int(inv.size() - 1));
    tokens.push_back(sil);

    // Whole-frame segment durations keep every frame label pure.
    trial.transcript.sentence_id = sentence_name(s);
    double clock_ms = 0.0;
    int total_frames = 0;
    for (size_t i = 0; i < tokens.size(); ++i) {
      const double want_ms = rng.uniform(config.min_segment_ms, config.max_segment_ms);
      const int frames = std::max<int>(1, static_cast<int>(std::llround(want_ms /
                                                                        config.frame_period_ms)));
      const double dur_ms = frames * config.frame_period_ms;
      trial.transcript.segments.push_back(
          {inv.label(tokens[i]), clock_ms, clock_ms + dur_ms});
      clock_ms += dur_ms;
      total_frames += frames;
    }
    for (size_t i = 0; i < tokens.size(); ++i) {
      if (tokens[i] == sil) continue;
      if (!trial.transcript.text.empty()) trial.transcript.text += ' ';
      trial.transcript.text += inv.label(tokens[i]);
    }
    trial.transcript.validate(inv);

    trial.frame_labels =
        phoneme::frame_labels(trial.transcript, config.frame_period_ms, total_frames, inv);

    // Clean signal: each segment drives its class's spatial pattern with a
    // sinusoidal carrier at band_center_hz, or a broadband one when unset.
    const int64_t n_samples = static_cast<int64_t>(total_frames) * spf;
    trial.signals = Matrix(n_samples, config.channels());
    const double phase = config.band_center_hz > 0.0
                             ? rng.uniform(0.0, 2.0 * std::numbers::pi)
                             : 0.0;
    int64_t g = 0;
    for (size_t i = 0; i < tokens.size(); ++i) {
      const double seg_ms =
          trial.transcript.segments[i].end_ms - trial.transcript.segments[i].start_ms;
      const int64_t seg_samples =
          std::llround(seg_ms / config.frame_period_ms) * static_cast<int64_t>(spf);
      for (int64_t t = 0; t < seg_samples; ++t, ++g) {
        const double carrier =
            config.band_center_hz > 0.0
                ? std::sin(2.0 * std::numbers::pi * config.band_center_hz *
                               static_cast<double>(g) / config.sample_rate_hz +
                           phase)
                : rng.gaussian();
        for (int64_t ch = 0; ch < trial.signals.cols; ++ch)
          trial.signals.at(g, ch) = carrier * ds.signatures.spatial.at(tokens[i], ch);
      }
    }

    // Additive white noise calibrated to the clean signal's mean power.
    if (std::isfinite(config.snr_db)) {
      double power = 0.0;
      for (const double v : trial.signals.data) power += v * v;
      power /= static_cast<double>(trial.signals.data.size());
      const double sigma = std::sqrt(power / std::pow(10.0, config.snr_db / 10.0));
      for (double& v : trial.signals.data) v += sigma * rng.gaussian();
    }

    // Feature targets: the class template plus small per-frame jitter.
    trial.target_mfcc = Matrix(total_frames, config.mfcc_dim);
    for (int t = 0; t < total_frames; ++t) {
      const int label = trial.frame_labels[static_cast<size_t>(t)];
      for (int64_t d = 0; d < trial.target_mfcc.cols; ++d)
        trial.target_mfcc.at(t, d) =
            ds.signatures.templates.at(label, d) + config.template_jitter * rng.gaussian();
    }

    ds.trials.push_back(std::move(trial));
  }
  return ds;
}

std::vector<int> oracle_decode(const Matrix& signals, const Signatures& signatures,
                               int samples_per_frame) {
  require(samples_per_frame >= 1, "oracle_decode: samples_per_frame must be positive");
  require(signals.cols == signatures.spatial.cols,
          "oracle_decode: " + std::to_string(signals.cols) + " signal channels vs " +
              std::to_string(signatures.spatial.cols) + " signature channels");
  const int classes = static_cast<int>(signatures.spatial.rows);
  const int64_t frames = signals.rows / samples_per_frame;
  std::vector<int> labels(static_cast<size_t>(frames), 0);
  for (int64_t f = 0; f < frames; ++f) {
    int best = 0;
    double best_score = -1.0;
    for (int c = 0; c < classes; ++c) {
      double score = 0.0;
      for (int64_t t = f * samples_per_frame; t < (f + 1) * samples_per_frame; ++t) {
        double proj = 0.0;
        for (int64_t ch = 0; ch < signals.cols; ++ch)
          proj += signals.at(t, ch) * signatures.spatial.at(c, ch);
        score += proj * proj;
      }
      if (score > best_score) {
        best_score = score;
        best = c;
      }
    }
    labels[static_cast<size_t>(f)] = best;
  }
  return labels;
}

void write_dataset(const SynthDataset& dataset, const std::string& dir) {
  namespace fs = std::filesystem;
  const SynthConfig& cfg = dataset.config;
  cfg.validate();
  fs::create_directories(fs::path(dir) / "align");
  fs::create_directories(fs::path(dir) / "mfcc");

  const int64_t gap = std::max<int64_t>(
      1, std::llround(cfg.gap_ms * cfg.sample_rate_hz / 1000.0));
  int64_t total = gap;
  for (const SynthTrial& trial : dataset.trials) total += trial.signals.rows + gap;

  signal::RawRecording rec;
  rec.sample_rate_hz = cfg.sample_rate_hz;
  rec.samples = Matrix(total, cfg.channels());
  for (int c = 0; c < cfg.eeg_channels; ++c) rec.channel_roles.push_back(signal::Role::EEG);
  for (int c = 0; c < cfg.emg_channels; ++c) rec.channel_roles.push_back(signal::Role::EMG);

  std::vector<dataset::ManifestEntry> manifest;
  int64_t cursor = gap;
  for (const SynthTrial& trial : dataset.trials) {
    const std::string& id = trial.transcript.sentence_id;
    for (int64_t r = 0; r < trial.signals.rows; ++r)
      for (int64_t c = 0; c < trial.signals.cols; ++c)
        rec.samples.at(cursor + r, c) = trial.signals.at(r, c);
    rec.trial_markers.push_back({cursor, cursor + trial.signals.rows, id});
    cursor += trial.signals.rows + gap;

    const std::string align_rel = "align/" + id + ".txt";
    const std::string mfcc_rel = "mfcc/" + id + ".f32";
    dataset::write_alignment((fs::path(dir) / align_rel).string(), trial.transcript.segments);
    dataset::write_mfcc((fs::path(dir) / mfcc_rel).string(), trial.target_mfcc,
                        cfg.frame_period_ms);
    manifest.push_back({id, trial.transcript.text, align_rel, mfcc_rel, "recording.f32"});
  }

  dataset::write_recording((fs::path(dir) / "recording.f32").string(), rec);
  dataset::write_manifest((fs::path(dir) / "manifest.tsv").string(), manifest);
}

}  // namespace bts::synthgen
