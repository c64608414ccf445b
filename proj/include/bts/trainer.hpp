#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "bts/common.hpp"
#include "bts/losses.hpp"
#include "bts/model.hpp"
#include "bts/tensor.hpp"

namespace bts::trainer {

// ---------------- concatenation batching ----------------
//
// Trials are concatenated along time into one stream of N_S samples, zero
// padded up to the next multiple of the row length l, and reshaped into
// (B, C, l) rows with B = ceil(N_S / l). A trial may cross row boundaries;
// the layout records where each trial lives in the concatenated stream so
// its output frames can be sliced back out after the forward pass.

// Half-open sample range [start, end) of one trial in the concatenated
// stream; `trial` is the index into the list handed to make_batch.
struct TrialSpan {
  int trial = 0;
  int64_t start = 0;
  int64_t end = 0;
};

struct BatchLayout {
  int64_t row_len = 0;    // l: samples per row
  int64_t n_samples = 0;  // N_S: total real (non-pad) samples
  int channels = 0;       // C
  int rows = 0;           // B = ceil(N_S / l)
  int64_t pad_len = 0;    // rows * row_len - n_samples
  std::vector<TrialSpan> spans;  // partition of [0, N_S) in input order
};

// Packs trials (each a samples x channels matrix) into a zero-padded
// (rows, channels, row_len) float tensor plus its layout. row_len must be a
// positive multiple of 8 (the model's downsample factor) and every trial must
// have the same channel count and at least one sample. Trial lengths are
// taken as given; trimming to multiples of 8 is the caller's job (see fit).
std::pair<ad::Tensor, BatchLayout> make_batch(const std::vector<const Matrix*>& trials,
                                              int64_t row_len);

// Slices per-trial frame sequences back out of downsampled network outputs of
// shape (rows, row_len / 8, dim). Returns one (trial_frames, dim) tensor per
// span, in span order; padding frames are dropped. Gradients flow through the
// slices. Every span must cover a multiple of 8 samples (trials must have
// been trimmed before batching), otherwise its frame range is ill-defined and
// this throws.
std::vector<ad::Tensor> unbatch(const ad::Tensor& outputs, const BatchLayout& layout);

// Greedily groups trial lengths, in order, into batches whose total sample
// count stays at or below target_samples; a trial longer than the target gets
// a batch of its own. Every index appears in exactly one group.
std::vector<std::vector<int>> group_trials(const std::vector<int64_t>& lengths,
                                           int64_t target_samples);

// ---------------- configuration ----------------

enum class Mode { overt, whispered, imagined };
Mode parse_mode(const std::string& name);
std::string mode_name(Mode mode);
// Overt trials have time-aligned targets; whispered/imagined trials are
// scored against a reference recording via the alignment-based loss.
inline bool uses_aligned_loss(Mode mode) { return mode == Mode::overt; }

enum class Modality { eeg, eeg_emg };
Modality parse_modality(const std::string& name);
std::string modality_name(Modality modality);

struct TrainConfig {
  double lr = 1e-3;
  double lr_min = 1e-5;
  int t_max = 200;  // cosine schedule period, in epochs
  double weight_decay = 1e-5;
  int max_epochs = 200;
  int early_stop_patience = 10;
  double val_fraction = 0.1;
  std::uint64_t seed = 0;
  Mode mode = Mode::overt;
  Modality modality = Modality::eeg;
  int batch_rows = 4;        // target rows per optimizer step (N_S ~ batch_rows * batch_len)
  int64_t batch_len = 2048;  // l: samples per row
  losses::LossConfig loss;

  void validate() const;
  // Single-line key=value form; from_text rejects unknown and duplicate keys
  // and validates the result.
  std::string to_text() const;
  static TrainConfig from_text(const std::string& text);
};

// Cosine-annealed learning rate: lr_min + 0.5 (lr - lr_min)(1 + cos(pi epoch / t_max))
// for epoch in [0, t_max]. Monotone non-increasing in epoch.
double cosine_lr(int epoch, const TrainConfig& config);

// ---------------- AdamW ----------------

inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.999;
inline constexpr double kAdamEps = 1e-8;

// First/second moment estimates per parameter tensor, plus the step count
// used for bias correction. Moments are kept in double precision.
struct AdamWState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  int64_t steps = 0;
};

AdamWState init_adamw(const model::Parameters& params);

// One decoupled-weight-decay Adam step, in place:
//   p <- p - lr * weight_decay * p - lr * m_hat / (sqrt(v_hat) + eps)
// with bias-corrected moments. `grads` must align with `params` (one tensor
// per parameter, same shapes — e.g. Tape::grad per bound handle). Throws if
// any gradient entry is non-finite, naming the parameter.
void adamw_step(model::Parameters& params, const std::vector<ad::Tensor>& grads,
                AdamWState& state, double lr, double weight_decay);

// ---------------- training loop ----------------

// One training example: input signals at the model's sample rate plus its
// targets. For overt mode the targets must be frame-synchronized with the
// signals (frames = samples / 8); for whispered/imagined they describe the
// reference recording and may have any length.
struct TrainTrial {
  Matrix signals;  // (samples, channels)
  losses::TrialTargets targets;
};

struct EpochLog {
  int epoch = 0;
  std::string split;  // "train" or "val"
  double loss = 0.0;
  double lr = 0.0;
  double wall_ms = 0.0;
};

struct FitResult {
  std::vector<EpochLog> log;  // two rows per completed epoch
  int best_epoch = 0;         // epoch whose validation loss was lowest
  double best_val_loss = std::numeric_limits<double>::infinity();
  int epochs_run = 0;
  bool aborted_non_finite = false;  // training stopped on a non-finite loss
};

// Trains `model` on `dataset`:
//  - trims every trial to a multiple of 8 samples (and, in overt mode, its
//    targets to the matching frame count), rejecting trials shorter than 8;
//  - holds out round(n * val_fraction) trials (at least 1) as validation,
//    chosen by a seed-fixed shuffle;
//  - each epoch: shuffles the training trials, groups them into batches of
//    about batch_rows * batch_len samples, and for each batch runs a tracked
//    forward pass, the mode's loss (overt or alignment-based), backward, and
//    one AdamW step at the cosine-annealed learning rate;
//  - tracks validation loss after each epoch and stops once it has not
//    improved for early_stop_patience epochs (or at max_epochs);
//  - on a non-finite train or validation loss, stops immediately and flags
//    the result instead of stepping further.
// On return the model holds the parameters of the best validation epoch
// (the initial parameters if no epoch completed). Loss values in the log are
// per-trial means; wall_ms is the measured wall time per split.
FitResult fit(model::Model& model, std::vector<TrainTrial> dataset, const TrainConfig& config);

// Appends log rows to a CSV file ("epoch,split,loss,lr,wall_ms"), writing the
// header first when the file does not yet exist or is empty.
void append_training_log(const std::string& path, const std::vector<EpochLog>& log);

}  // namespace bts::trainer
