#pragma once

#include <utility>
#include <vector>

#include "bts/common.hpp"
#include "bts/phoneme.hpp"
#include "bts/tensor.hpp"

namespace bts::losses {

enum class BlankPolicy { reuse_sil, extra_blank };

BlankPolicy parse_blank_policy(const std::string& name);
std::string blank_policy_name(BlankPolicy policy);

struct LossConfig {
  float alpha = 0.5f;  // weight of the audio / warped-audio term
  float beta = 0.5f;   // weight of the phoneme log-probability term inside DTW costs
  BlankPolicy ctc_blank_policy = BlankPolicy::reuse_sil;
};

// Alignment produced by the warped-audio loss / evaluation warping.
struct DtwAlignment {
  Matrix dist;  // T_pred x T_gt Euclidean distances
  Matrix cost;  // dist + beta * (-log p_hat), the matrix the path minimizes
  std::vector<std::pair<int, int>> path;  // monotone, (0,0) .. (T_pred-1, T_gt-1)
  std::vector<int> align;                 // per prediction step: first matched GT frame
  int t_pred = 0;
};

// Classic DTW over an explicit cost matrix: steps (1,0), (0,1), (1,1); ties
// prefer diagonal, then vertical (advance prediction), then horizontal.
// Returns the path from (0,0) to (rows-1, cols-1).
std::vector<std::pair<int, int>> dtw_path(const Matrix& cost);
double dtw_path_cost(const Matrix& cost, const std::vector<std::pair<int, int>>& path);
// First GT index the path visits in each prediction row.
std::vector<int> dtw_align_first(const std::vector<std::pair<int, int>>& path, int t_pred);

// Mean over frames of the per-frame 80-dim Euclidean distance. Optional
// per-frame weights (e.g. 0 on padding) turn the mean into a weighted mean.
ad::Tensor audio_loss(const ad::Tensor& pred, const Matrix& target,
                      const std::vector<double>& frame_weights = {});

// Mean over frames of -logprob[t, target_t].
ad::Tensor phoneme_ce(const ad::Tensor& logprobs, const std::vector<int>& frame_targets,
                      const std::vector<double>& frame_weights = {});

// Sequence-level CTC: -log of the total probability over all alignments that
// collapse to `labels`, with `blank` as the collapsible filler symbol.
// `labels` must not contain `blank`.
ad::Tensor ctc_loss(const ad::Tensor& logprobs, const std::vector<int>& labels, int blank);

// Label preparation for ctc_loss: collapses frame labels to a sequence and
// applies the blank policy (reuse_sil drops silence tokens, making silence
// the blank; extra_blank keeps all 40 classes and appends logit index 40 as
// the blank).
std::vector<int> ctc_labels(const std::vector<int>& frame_labels, BlankPolicy policy,
                            const phoneme::PhonemeInventory& inv);
int ctc_blank_index(BlankPolicy policy, const phoneme::PhonemeInventory& inv);
// Shortest T that can emit `labels` (adjacent duplicates need a separator).
int ctc_min_frames(const std::vector<int>& labels);

// Phoneme-weighted DTW loss: cost(i,j) = ||pred_mfcc_i - gt_mfcc_j||
// + beta * (-logprob[i, gt_labels[j]]), log floored at 1e-12; the best
// monotone path is found by dynamic programming, then the loss is the mean
// over prediction steps of the cost at the first matched cell per step.
// Gradients treat the selected path as constant.
std::pair<ad::Tensor, DtwAlignment> dtw_loss(const ad::Tensor& pred_mfcc,
                                             const ad::Tensor& pred_logprobs,
                                             const Matrix& gt_mfcc,
                                             const std::vector<int>& gt_labels, float beta);

// One decoded trial: model outputs for its frames.
struct TrialOutputs {
  ad::Tensor mfcc;      // (T, 80)
  ad::Tensor logprobs;  // (T, K) log-softmax output
};

// The matching targets.
struct TrialTargets {
  Matrix mfcc;                   // (T, 80), time-synchronized (overt mode)
  std::vector<int> frame_labels; // length T
  std::vector<double> frame_weights;  // optional; 0 marks padded frames
};

struct LossBreakdown {
  ad::Tensor total;    // scalar, differentiable
  double audio = 0.0;  // component values for logging
  double phoneme = 0.0;
  double ctc = 0.0;
  double dtw = 0.0;
};

// alpha * L_audio + L_phoneme + L_CTC, each component averaged across trials.
LossBreakdown overt_loss(const std::vector<TrialOutputs>& outputs,
                         const std::vector<TrialTargets>& targets, const LossConfig& config,
                         const phoneme::PhonemeInventory& inv);

// alpha * L_DTW + L_CTC for unaligned (whispered / imagined) trials; targets
// hold the reference overt recording's features and labels.
LossBreakdown silent_loss(const std::vector<TrialOutputs>& outputs,
                          const std::vector<TrialTargets>& targets, const LossConfig& config,
                          const phoneme::PhonemeInventory& inv);

}  // namespace bts::losses
