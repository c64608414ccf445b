#pragma once

#include <string>
#include <vector>

#include "bts/common.hpp"
#include "bts/metrics.hpp"
#include "bts/model.hpp"
#include "bts/phoneme.hpp"
#include "bts/trainer.hpp"

namespace bts::analysis {

// ---------------------------------------------------------------------------
// Sentence-property study: per-phoneme corpus frequencies, sentence-level
// difficulty predictors, and their correlation with decoding accuracy.
// ---------------------------------------------------------------------------

// Per-phoneme occurrence frequencies over a training corpus, in two variants:
// one counting silence tokens, one excluding silence from both the counts and
// the total. Each variant is a probability distribution (sums to 1).
struct WScoreTable {
  std::vector<double> with_sil;     // one entry per inventory class
  std::vector<double> without_sil;  // silence entry fixed at 0
};

// `corpus` holds one class-index token sequence per training sentence.
WScoreTable w_scores(const std::vector<std::vector<int>>& corpus,
                     const phoneme::PhonemeInventory& inv);

// Sentence-level predictors: token count (silence included) and the mean
// training-corpus frequency of the sentence's tokens in both variants.
struct SentenceProperties {
  std::string sentence_id;
  int phoneme_seq_len = 0;
  double w_score_with_sil = 0.0;
  double w_score_without_sil = 0.0;
};

SentenceProperties sentence_properties(const std::string& sentence_id,
                                       const std::vector<int>& tokens,
                                       const WScoreTable& table,
                                       const phoneme::PhonemeInventory& inv);

// Product-moment correlation coefficient in [-1, 1]. Needs at least two
// points and nonzero variance on both sides.
double pearson(const std::vector<double>& xs, const std::vector<double>& ys);

// ---------------------------------------------------------------------------
// Paired two-sided Wilcoxon signed-rank test.
// ---------------------------------------------------------------------------

struct WilcoxonResult {
  double w_plus = 0.0;     // rank sum of positive differences (a - b > 0)
  double w_minus = 0.0;    // rank sum of negative differences
  double statistic = 0.0;  // min(w_plus, w_minus)
  double p_value = 1.0;    // two-sided
  int n_effective = 0;     // pairs left after dropping zero differences
  bool exact = false;      // exact null distribution vs normal approximation
};

// Drops zero differences, ranks |a_i - b_i| with average ranks for ties, and
// reports a two-sided p-value: exact (full sign-pattern distribution) for up
// to 25 effective pairs, a tie-corrected normal approximation beyond that.
// Requires at least 5 nonzero differences.
WilcoxonResult wilcoxon_signed_rank(const std::vector<double>& a, const std::vector<double>& b);

// ---------------------------------------------------------------------------
// Model evaluation bridge and the band-ablation experiment.
// ---------------------------------------------------------------------------

// Runs the network on each trial (inference mode) and scores the two heads
// against the trial's own targets. Predicted frames are the arg-max class per
// frame. With time_aligned set, reference frames are truncated to the decoded
// length (targets must cover it); otherwise references keep their own length
// and the scorer warps them onto the decoded frames.
metrics::MetricReport evaluate_model(const model::Model& net,
                                     const std::vector<trainer::TrainTrial>& trials,
                                     const std::vector<std::string>& sentence_ids,
                                     const phoneme::PhonemeInventory& inv, bool time_aligned);

struct BandAblationConfig {
  model::ModelConfig model;
  trainer::TrainConfig train;
  int sample_rate_hz = 1000;
  uint64_t init_seed = 0;         // model initialization stream
  bool time_aligned_eval = true;  // matches the aligned-loss training modes
};

struct BandAblationRow {
  std::string band;
  metrics::MetricReport report;
  double best_val_loss = 0.0;
  int epochs_run = 0;
};

// For each named frequency band: band-pass both splits to that band, train a
// fresh model on the filtered training set, and score it on the filtered
// evaluation set. Same seeds for every band, so rows differ only through the
// surviving signal content. Deterministic for fixed inputs and seeds.
std::vector<BandAblationRow> band_ablation(const std::vector<trainer::TrainTrial>& train_set,
                                           const std::vector<trainer::TrainTrial>& eval_set,
                                           const std::vector<std::string>& eval_ids,
                                           const std::vector<std::string>& bands,
                                           const BandAblationConfig& config,
                                           const phoneme::PhonemeInventory& inv);

// ---------------------------------------------------------------------------
// Correlation report emission.
// ---------------------------------------------------------------------------

struct PropertyCorrelations {
  double length_pcc = 0.0;
  double w_with_sil_pcc = 0.0;
  double w_without_sil_pcc = 0.0;
};

// Correlates per-sentence accuracy with each sentence property. `accuracies`
// pairs up with `props` by position.
PropertyCorrelations property_correlations(const std::vector<SentenceProperties>& props,
                                           const std::vector<double>& accuracies);

// One row per sentence: id, length, both W scores, accuracy.
void write_property_scatter_csv(const std::string& path,
                                const std::vector<SentenceProperties>& props,
                                const std::vector<double>& accuracies);

// Scatter plot with labeled axes and the correlation annotated.
void write_scatter_svg(const std::string& path, const std::vector<double>& xs,
                       const std::vector<double>& ys, const std::string& x_label,
                       const std::string& y_label, double pcc);

// Band-ablation summary table: band, phoneme accuracy, RMSE, MCD per row.
void write_band_table_csv(const std::string& path, const std::vector<BandAblationRow>& rows);

}  // namespace bts::analysis
