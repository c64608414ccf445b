#include "bts/signal.hpp"

#include <algorithm>
#include <cmath>
#include <complex>

#include "bts/fft.hpp"

namespace bts::signal {

namespace {

constexpr double kPi = 3.14159265358979323846;

// Unit-DC-gain windowed-sinc low-pass, odd length, Hamming window.
std::vector<double> lowpass_kernel(double cutoff_hz, int rate_hz, int taps) {
  std::vector<double> h(static_cast<size_t>(taps));
  const int mid = (taps - 1) / 2;
  const double fc = cutoff_hz / static_cast<double>(rate_hz);
  double sum = 0.0;
  for (int i = 0; i < taps; ++i) {
    const int x = i - mid;
    double v = (x == 0) ? 2.0 * fc : std::sin(2.0 * kPi * fc * x) / (kPi * x);
    v *= 0.54 - 0.46 * std::cos(2.0 * kPi * i / (taps - 1));  // Hamming
    h[static_cast<size_t>(i)] = v;
    sum += v;
  }
  for (auto& v : h) v /= sum;  // exact unit gain at DC
  return h;
}

int auto_taps(double transition_hz, int rate_hz) {
  int n = static_cast<int>(std::ceil(3.3 * rate_hz / transition_hz));
  if (n % 2 == 0) ++n;
  return n;
}

// h_out = a - b elementwise; both odd, same length.
std::vector<double> kernel_sub(const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<double> out(a.size());
  for (size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
  return out;
}

std::vector<double> delta_kernel(int taps) {
  std::vector<double> d(static_cast<size_t>(taps), 0.0);
  d[static_cast<size_t>((taps - 1) / 2)] = 1.0;
  return d;
}

// Linear convolution of two symmetric kernels (for cascading notch stages).
std::vector<double> kernel_convolve(const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<double> out(a.size() + b.size() - 1, 0.0);
  for (size_t i = 0; i < a.size(); ++i) {
    for (size_t j = 0; j < b.size(); ++j) out[i + j] += a[i] * b[j];
  }
  return out;
}

// Full linear convolution via FFT (double precision, deterministic).
std::vector<double> convolve_full(std::span<const double> x, std::span<const double> h) {
  const int64_t n = static_cast<int64_t>(x.size());
  const int64_t m = static_cast<int64_t>(h.size());
  const int64_t full = n + m - 1;
  // Direct form for small problems; frequency domain when it pays off.
  if (n * m <= (1 << 18)) {
    std::vector<double> out(static_cast<size_t>(full), 0.0);
    for (int64_t i = 0; i < n; ++i) {
      const double xv = x[static_cast<size_t>(i)];
      if (xv == 0.0) continue;
      for (int64_t j = 0; j < m; ++j) out[static_cast<size_t>(i + j)] += xv * h[static_cast<size_t>(j)];
    }
    return out;
  }
  const int64_t nfft = next_pow2(full);
  std::vector<std::complex<double>> fx(static_cast<size_t>(nfft), {0.0, 0.0});
  std::vector<std::complex<double>> fh(static_cast<size_t>(nfft), {0.0, 0.0});
  for (int64_t i = 0; i < n; ++i) fx[static_cast<size_t>(i)] = {x[static_cast<size_t>(i)], 0.0};
  for (int64_t j = 0; j < m; ++j) fh[static_cast<size_t>(j)] = {h[static_cast<size_t>(j)], 0.0};
  fft_inplace(fx);
  fft_inplace(fh);
  for (int64_t i = 0; i < nfft; ++i) fx[static_cast<size_t>(i)] *= fh[static_cast<size_t>(i)];
  fft_inplace(fx, /*inverse=*/true);
  std::vector<double> out(static_cast<size_t>(full));
  for (int64_t i = 0; i < full; ++i) out[static_cast<size_t>(i)] = fx[static_cast<size_t>(i)].real();
  return out;
}

// Mirror extension (no edge repetition): index -1 -> 1, n -> n-2.
int64_t reflect_index(int64_t i, int64_t n) {
  if (n == 1) return 0;
  const int64_t period = 2 * (n - 1);
  i = ((i % period) + period) % period;
  return i < n ? i : period - i;
}

std::vector<int> role_channel_list(const std::vector<Role>& roles, std::optional<Role> subset) {
  std::vector<int> idx;
  for (size_t c = 0; c < roles.size(); ++c) {
    if (!subset.has_value() || roles[c] == *subset) idx.push_back(static_cast<int>(c));
  }
  return idx;
}

}  // namespace

Role parse_role(const std::string& name) {
  if (name == "EEG" || name == "eeg") return Role::EEG;
  if (name == "EMG" || name == "emg") return Role::EMG;
  throw std::invalid_argument("unknown channel role '" + name + "' (expected EEG or EMG)");
}

std::string role_name(Role role) { return role == Role::EEG ? "EEG" : "EMG"; }

void RawRecording::validate() const {
  require(sample_rate_hz > 0, "recording sample rate must be positive");
  require(static_cast<int64_t>(channel_roles.size()) == samples.cols,
          "recording has " + std::to_string(samples.cols) + " channels but " +
              std::to_string(channel_roles.size()) + " role tags");
  for (const TrialMarker& m : trial_markers) {
    require(m.onset_sample >= 0 && m.onset_sample < m.offset_sample &&
                m.offset_sample <= samples.rows,
            "trial marker '" + m.sentence_id + "' [" + std::to_string(m.onset_sample) + ", " +
                std::to_string(m.offset_sample) + ") exceeds the recording length " +
                std::to_string(samples.rows));
  }
}

std::vector<double> design_fir(const FilterSpec& spec, int rate_hz) {
  require(rate_hz > 0, "filter design requires a positive sample rate");
  const double nyq = rate_hz / 2.0;
  const int taps = spec.taps > 0 ? (spec.taps | 1) : auto_taps(spec.transition_hz, rate_hz);
  require(spec.transition_hz > 0.0, "filter transition width must be positive");

  switch (spec.kind) {
    case FilterKind::band_pass: {
      require(spec.low_hz > 0.0 && spec.low_hz < spec.high_hz && spec.high_hz < nyq,
              "band_pass needs 0 < low (" + std::to_string(spec.low_hz) + ") < high (" +
                  std::to_string(spec.high_hz) + ") < Nyquist (" + std::to_string(nyq) + ")");
      return kernel_sub(lowpass_kernel(spec.high_hz, rate_hz, taps),
                        lowpass_kernel(spec.low_hz, rate_hz, taps));
    }
    case FilterKind::high_pass: {
      require(spec.low_hz > 0.0 && spec.low_hz < nyq,
              "high_pass cutoff " + std::to_string(spec.low_hz) + " must lie in (0, Nyquist " +
                  std::to_string(nyq) + ")");
      // Spectral inversion of a unit-DC low-pass: exact zero at DC.
      return kernel_sub(delta_kernel(taps), lowpass_kernel(spec.low_hz, rate_hz, taps));
    }
    case FilterKind::notch_comb: {
      require(spec.notch_base_hz > 0.0 && spec.notch_base_hz < nyq,
              "notch base " + std::to_string(spec.notch_base_hz) + " must lie in (0, Nyquist " +
                  std::to_string(nyq) + ")");
      const double margin = spec.notch_halfwidth_hz + spec.transition_hz;
      const double limit = spec.notch_max_hz > 0.0
                               ? std::min(spec.notch_max_hz, nyq - margin)
                               : nyq - margin;
      std::vector<double> kernel = delta_kernel(1);
      int harmonics = 0;
      for (double f = spec.notch_base_hz; f <= limit + 1e-9; f += spec.notch_base_hz) {
        const auto band = kernel_sub(lowpass_kernel(f + spec.notch_halfwidth_hz, rate_hz, taps),
                                     lowpass_kernel(f - spec.notch_halfwidth_hz, rate_hz, taps));
        const auto stop = kernel_sub(delta_kernel(taps), band);
        kernel = kernel_convolve(kernel, stop);
        ++harmonics;
      }
      require(harmonics > 0, "notch comb has no harmonic below Nyquist for base " +
                                 std::to_string(spec.notch_base_hz));
      return kernel;
    }
  }
  fail("unreachable filter kind");
}

std::vector<double> filter_zero_phase(std::span<const double> x, std::span<const double> taps) {
  require(!x.empty(), "cannot filter an empty signal");
  require(taps.size() % 2 == 1, "zero-phase filtering requires an odd kernel length");
  const int64_t n = static_cast<int64_t>(x.size());
  const int64_t m = static_cast<int64_t>(taps.size());
  const int64_t half = (m - 1) / 2;
  std::vector<double> padded(static_cast<size_t>(n + 2 * half));
  for (int64_t i = 0; i < n + 2 * half; ++i)
    padded[static_cast<size_t>(i)] = x[static_cast<size_t>(reflect_index(i - half, n))];
  std::vector<double> full = convolve_full(padded, taps);
  std::vector<double> out(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) out[static_cast<size_t>(i)] = full[static_cast<size_t>(i + 2 * half)];
  return out;
}

std::vector<double> filter_causal(std::span<const double> x, std::span<const double> taps) {
  require(!x.empty(), "cannot filter an empty signal");
  std::vector<double> full = convolve_full(x, taps);
  return std::vector<double>(full.begin(), full.begin() + static_cast<int64_t>(x.size()));
}

RawRecording apply_filter(const RawRecording& rec, const FilterSpec& spec,
                          std::optional<Role> channel_subset) {
  rec.validate();
  const std::vector<double> taps = design_fir(spec, rec.sample_rate_hz);
  const std::vector<int> chans = role_channel_list(rec.channel_roles, channel_subset);
  require(!chans.empty(), "channel subset " +
                              (channel_subset ? role_name(*channel_subset) : std::string("all")) +
                              " selects no channels");
  RawRecording out = rec;
  std::vector<double> column(static_cast<size_t>(rec.samples.rows));
  for (int c : chans) {
    for (int64_t r = 0; r < rec.samples.rows; ++r) column[static_cast<size_t>(r)] = rec.samples.at(r, c);
    const std::vector<double> filtered =
        spec.zero_phase ? filter_zero_phase(column, taps) : filter_causal(column, taps);
    for (int64_t r = 0; r < rec.samples.rows; ++r) out.samples.at(r, c) = filtered[static_cast<size_t>(r)];
  }
  return out;
}

void car_in_place(Matrix& samples, const std::vector<Role>& roles, bool per_role) {
  require(static_cast<int64_t>(roles.size()) == samples.cols,
          "role tags (" + std::to_string(roles.size()) + ") must match channel count (" +
              std::to_string(samples.cols) + ")");
  std::vector<std::vector<int>> groups;
  if (per_role) {
    for (Role r : {Role::EEG, Role::EMG}) {
      std::vector<int> g = role_channel_list(roles, r);
      if (!g.empty()) groups.push_back(std::move(g));
    }
  } else {
    groups.push_back(role_channel_list(roles, std::nullopt));
  }
  for (const auto& g : groups) {
    require(g.size() >= 2, "referencing group with " + std::to_string(g.size()) +
                               " channel(s); need at least 2 (single-channel group would be zeroed)");
  }
  for (int64_t r = 0; r < samples.rows; ++r) {
    double* row = samples.row(r);
    for (const auto& g : groups) {
      double m = 0.0;
      for (int c : g) m += row[c];
      m /= static_cast<double>(g.size());
      for (int c : g) row[c] -= m;
    }
  }
}

RawRecording common_average_reference(const RawRecording& rec, bool per_role) {
  rec.validate();
  RawRecording out = rec;
  car_in_place(out.samples, out.channel_roles, per_role);
  return out;
}

Epoch common_average_reference(const Epoch& epoch, bool per_role) {
  Epoch out = epoch;
  car_in_place(out.samples, out.channel_roles, per_role);
  return out;
}

Epoch epoch_and_baseline(const RawRecording& rec, int marker_index, double baseline_ms) {
  rec.validate();
  require(marker_index >= 0 && marker_index < static_cast<int>(rec.trial_markers.size()),
          "marker index " + std::to_string(marker_index) + " out of range; recording has " +
              std::to_string(rec.trial_markers.size()) + " markers");
  require(baseline_ms >= 0.0, "baseline window must be non-negative");
  const TrialMarker& mk = rec.trial_markers[static_cast<size_t>(marker_index)];
  const int64_t bl = static_cast<int64_t>(std::llround(baseline_ms * rec.sample_rate_hz / 1000.0));
  require(mk.onset_sample >= bl,
          "trial '" + mk.sentence_id + "' needs " + std::to_string(bl) +
              " pre-trial samples for the baseline window but only " +
              std::to_string(mk.onset_sample) + " exist (short by " +
              std::to_string(bl - mk.onset_sample) + ")");
  Epoch ep;
  ep.sentence_id = mk.sentence_id;
  ep.sample_rate_hz = rec.sample_rate_hz;
  ep.channel_roles = rec.channel_roles;
  ep.baseline_window_ms = baseline_ms;
  const int64_t len = mk.offset_sample - mk.onset_sample;
  ep.samples = Matrix(len, rec.samples.cols);
  for (int64_t c = 0; c < rec.samples.cols; ++c) {
    double base = 0.0;
    if (bl > 0) {
      for (int64_t r = mk.onset_sample - bl; r < mk.onset_sample; ++r) base += rec.samples.at(r, c);
      base /= static_cast<double>(bl);
    }
    for (int64_t r = 0; r < len; ++r)
      ep.samples.at(r, c) = rec.samples.at(mk.onset_sample + r, c) - base;
  }
  return ep;
}

const std::vector<BandDef>& frequency_bands() {
  static const std::vector<BandDef> bands = {
      {"delta", 0.5, 4.0},  {"theta", 4.0, 8.0},   {"alpha", 8.0, 12.0},
      {"beta", 12.0, 30.0}, {"gamma", 30.0, 70.0}, {"high_gamma", 70.0, 200.0},
  };
  return bands;
}

const BandDef& band_by_name(const std::string& name) {
  for (const BandDef& b : frequency_bands()) {
    if (b.name == name) return b;
  }
  throw std::invalid_argument("unknown frequency band '" + name +
                              "' (expected delta, theta, alpha, beta, gamma, or high_gamma)");
}

Epoch band_isolate(const Epoch& epoch, const std::string& band) {
  const BandDef& def = band_by_name(band);
  FilterSpec spec;
  spec.kind = FilterKind::band_pass;
  spec.low_hz = def.low_hz;
  spec.high_hz = def.high_hz;
  const std::vector<double> taps = design_fir(spec, epoch.sample_rate_hz);
  Epoch out = epoch;
  std::vector<double> column(static_cast<size_t>(epoch.samples.rows));
  for (int64_t c = 0; c < epoch.samples.cols; ++c) {
    for (int64_t r = 0; r < epoch.samples.rows; ++r) column[static_cast<size_t>(r)] = epoch.samples.at(r, c);
    const std::vector<double> filtered = filter_zero_phase(column, taps);
    for (int64_t r = 0; r < epoch.samples.rows; ++r) out.samples.at(r, c) = filtered[static_cast<size_t>(r)];
  }
  return out;
}

}  // namespace bts::signal
