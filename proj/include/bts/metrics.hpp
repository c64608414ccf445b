#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "bts/common.hpp"
#include "bts/phoneme.hpp"

namespace bts::metrics {

// ---------------- frame-label metrics ----------------

// 100 * matching frames / total frames. Sequences must pair one-to-one; map
// unaligned (whispered/imagined) predictions onto the reference first with
// dtw_frame_map.
double phoneme_accuracy(const std::vector<int>& pred_frames, const std::vector<int>& gt_frames);

// Unweighted mean of per-class F1 over classes that appear in either
// sequence; classes absent from both are skipped. Same pairing rule as
// phoneme_accuracy.
double macro_f1(const std::vector<int>& pred_frames, const std::vector<int>& gt_frames);

// ---------------- feature-sequence metrics ----------------

// Minimal-cost monotone alignment between two feature sequences under plain
// per-pair Euclidean distance over every coefficient (steps (1,0), (0,1),
// (1,1); ties prefer diagonal, then advancing the prediction).
std::vector<std::pair<int, int>> feature_dtw_path(const Matrix& pred, const Matrix& gt);

// Root-mean-square error pooled over every aligned frame pair and every
// coefficient, after aligning the sequences with feature_dtw_path.
double rmse_after_dtw(const Matrix& pred, const Matrix& gt);

// Mel-cepstral distortion in dB: the mean over aligned pairs of
// (10 / ln 10) * sqrt(2 * sum_{d>=1} (c_d - c_hat_d)^2). Coefficient 0
// (energy) is excluded throughout — including from the alignment distances —
// so the result is invariant to any change of coefficient 0.
double mcd(const Matrix& pred, const Matrix& gt);

// For each predicted frame, the first reference frame its alignment path
// visits (monotone, non-decreasing). Used to map reference labels onto
// predicted frames when lengths differ.
std::vector<int> dtw_frame_map(const Matrix& pred, const Matrix& gt);

// ---------------- sequence error rate ----------------

// Unit-cost Levenshtein distance divided by the reference length. Works for
// any symbol type: characters for CER, phoneme indices for PER.
template <class T>
double error_rate(const std::vector<T>& pred, const std::vector<T>& gt) {
  require(!gt.empty(), "error_rate: reference sequence is empty");
  const size_t n = pred.size(), m = gt.size();
  std::vector<int64_t> prev(m + 1), cur(m + 1);
  for (size_t j = 0; j <= m; ++j) prev[j] = static_cast<int64_t>(j);
  for (size_t i = 1; i <= n; ++i) {
    cur[0] = static_cast<int64_t>(i);
    for (size_t j = 1; j <= m; ++j) {
      const int64_t sub = prev[j - 1] + (pred[i - 1] == gt[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return static_cast<double>(prev[m]) / static_cast<double>(m);
}

// Lowercases ASCII letters, strips punctuation, and collapses whitespace
// runs into single spaces (trimming the ends).
std::string normalize_text(const std::string& text);

// error_rate over the characters of the normalized texts (spaces count).
double character_error_rate(const std::string& pred_text, const std::string& gt_text);

// ---------------- confusion ----------------

struct Confusion {
  Matrix counts;  // (classes x classes), counts[gt][pred], exact integers
  int64_t total = 0;
  // Fraction of frames whose predicted class lies in the same articulatory
  // group as the reference class (diagonal hits included).
  double within_group_fraction = 0.0;
};

Confusion confusion_matrix(const std::vector<int>& pred_frames, const std::vector<int>& gt_frames,
                           const phoneme::PhonemeInventory& inv);

// ---------------- per-class feature means ----------------

struct ClassMeans {
  Matrix means;                 // (n_classes x dim); rows of absent classes stay zero
  std::vector<int64_t> counts;  // frames per class
  std::vector<bool> present;    // counts[c] > 0
};

// Mean feature vector per class over (frames x dim) features with per-frame
// labels. Exported for external embedding tools; classes with no frames are
// flagged absent rather than invented.
ClassMeans phoneme_mean_features(const Matrix& features, const std::vector<int>& frame_labels,
                                 int n_classes);

// ---------------- per-sentence report ----------------

struct SentenceMetrics {
  std::string sentence_id;
  double accuracy_pct = 0.0;
  double rmse = 0.0;
  double mcd = 0.0;
  double f1 = 0.0;
  double error_rate = 0.0;  // collapsed-sequence phoneme error rate
};

struct EvalTrial {
  std::string sentence_id;
  Matrix pred_mfcc;              // (T_pred x dim)
  std::vector<int> pred_frames;  // length T_pred
  Matrix gt_mfcc;                // (T_gt x dim)
  std::vector<int> gt_frames;    // length T_gt
};

struct MetricReport {
  std::vector<SentenceMetrics> per_sentence;
  SentenceMetrics aggregate;  // unweighted means across sentences, id "aggregate"
  Confusion confusion;        // pooled over every scored frame
};

// Scores every trial and pools the confusion counts. With time_aligned the
// frame sequences must pair one-to-one (overt mode); otherwise each trial's
// predictions are first mapped onto its reference frames along the feature
// alignment path. The per-sentence error_rate compares collapsed phoneme
// sequences (frame runs merged), always against the unmapped reference.
MetricReport evaluate_trials(const std::vector<EvalTrial>& trials,
                             const phoneme::PhonemeInventory& inv, bool time_aligned);

// ---------------- file emission ----------------

// Per-sentence rows plus the aggregate row:
// sentence_id,phoneme_accuracy_pct,rmse,mcd,f1,error_rate
void write_report_csv(const std::string& path, const MetricReport& report);

// Square count matrix with labeled header row/column (reference rows,
// predicted columns).
void write_confusion_csv(const std::string& path, const Confusion& confusion,
                         const phoneme::PhonemeInventory& inv);

// Row-normalized heat map with red boxes around the articulatory group
// blocks on the diagonal.
void write_confusion_svg(const std::string& path, const Confusion& confusion,
                         const phoneme::PhonemeInventory& inv);

// class_index,label,present,count,mean_0,... per inventory class.
void write_class_means_csv(const std::string& path, const ClassMeans& means,
                           const phoneme::PhonemeInventory& inv);

}  // namespace bts::metrics
