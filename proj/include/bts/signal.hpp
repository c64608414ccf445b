#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bts/common.hpp"

namespace bts::signal {

enum class Role { EEG, EMG };

Role parse_role(const std::string& name);
std::string role_name(Role role);

struct TrialMarker {
  int64_t onset_sample = 0;
  int64_t offset_sample = 0;  // exclusive
  std::string sentence_id;
};

// A continuous multichannel recording: samples are (frames x channels) in
// microvolts, each channel tagged with its modality.
struct RawRecording {
  Matrix samples;
  int sample_rate_hz = 0;
  std::vector<Role> channel_roles;
  std::vector<TrialMarker> trial_markers;

  void validate() const;
};

// One trial's samples after filtering / referencing / baseline correction.
struct Epoch {
  Matrix samples;
  std::string sentence_id;
  int sample_rate_hz = 0;
  std::vector<Role> channel_roles;
  double baseline_window_ms = 0.0;
};

enum class FilterKind { band_pass, high_pass, notch_comb };

struct FilterSpec {
  FilterKind kind = FilterKind::band_pass;
  double low_hz = 0.0;         // band_pass low edge; high_pass cutoff
  double high_hz = 0.0;        // band_pass high edge
  double notch_base_hz = 0.0;  // notch_comb fundamental
  // Highest harmonic to suppress; 0 means every harmonic that fits below
  // Nyquist with its stop band and transition intact.
  double notch_max_hz = 0.0;
  double notch_halfwidth_hz = 2.5;
  // Transition band width used to size the kernel when taps == 0.
  double transition_hz = 2.5;
  int taps = 0;  // explicit odd kernel length; 0 = derive from transition_hz
  bool zero_phase = true;
};

// Designs the linear-phase FIR kernel (odd length, symmetric) realizing the
// spec at the given rate. Windowed-sinc with a Hamming window; notch combs
// are cascaded band-stops merged into one kernel.
std::vector<double> design_fir(const FilterSpec& spec, int rate_hz);

// Applies a symmetric FIR with no net delay; edges are handled by mirror
// extension so output length equals input length.
std::vector<double> filter_zero_phase(std::span<const double> x, std::span<const double> taps);
// Causal counterpart (zero initial state), used when spec.zero_phase is off.
std::vector<double> filter_causal(std::span<const double> x, std::span<const double> taps);

// Filters the channels whose role matches channel_subset (all channels when
// unset); other channels pass through untouched.
RawRecording apply_filter(const RawRecording& rec, const FilterSpec& spec,
                          std::optional<Role> channel_subset);

// Subtracts the cross-channel mean at every time step, per modality group
// when per_role is set, otherwise across all channels at once.
void car_in_place(Matrix& samples, const std::vector<Role>& roles, bool per_role);
RawRecording common_average_reference(const RawRecording& rec, bool per_role);
Epoch common_average_reference(const Epoch& epoch, bool per_role);

// Cuts marker [onset, offset) out of the recording and subtracts, per
// channel, the mean of the baseline_ms window immediately preceding onset.
Epoch epoch_and_baseline(const RawRecording& rec, int marker_index, double baseline_ms);

struct BandDef {
  std::string name;
  double low_hz = 0.0;
  double high_hz = 0.0;
};

// delta, theta, alpha, beta, gamma, high_gamma with their edge frequencies.
const std::vector<BandDef>& frequency_bands();
const BandDef& band_by_name(const std::string& name);

// Zero-phase band-pass restricted to the named band's edges.
Epoch band_isolate(const Epoch& epoch, const std::string& band);

}  // namespace bts::signal
