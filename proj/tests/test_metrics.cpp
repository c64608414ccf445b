#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "bts/metrics.hpp"
#include "bts/rng.hpp"

using namespace bts;
using namespace bts::metrics;
namespace fs = std::filesystem;

namespace {

// Pairwise Euclidean distances over columns [dim_lo, cols) — the same local
// metric the alignment-based scores are defined on, rebuilt independently.
Matrix pair_dist(const Matrix& a, const Matrix& b, int64_t dim_lo) {
  Matrix d(a.rows, b.rows);
  for (int64_t i = 0; i < a.rows; ++i) {
    for (int64_t j = 0; j < b.rows; ++j) {
      double ss = 0.0;
      for (int64_t k = dim_lo; k < a.cols; ++k) {
        const double diff = a.at(i, k) - b.at(j, k);
        ss += diff * diff;
      }
      d.at(i, j) = std::sqrt(ss);
    }
  }
  return d;
}

// Minimum corner-to-corner monotone path total by exhaustive enumeration.
double brute_min_path_cost(const Matrix& dist) {
  double best = std::numeric_limits<double>::infinity();
  std::function<void(int64_t, int64_t, double)> rec = [&](int64_t i, int64_t j, double acc) {
    acc += dist.at(i, j);
    if (i == dist.rows - 1 && j == dist.cols - 1) {
      best = std::min(best, acc);
      return;
    }
    if (i + 1 < dist.rows && j + 1 < dist.cols) rec(i + 1, j + 1, acc);
    if (i + 1 < dist.rows) rec(i + 1, j, acc);
    if (j + 1 < dist.cols) rec(i, j + 1, acc);
  };
  rec(0, 0, 0.0);
  return best;
}

double path_cost(const Matrix& dist, const std::vector<std::pair<int, int>>& path) {
  double total = 0.0;
  for (const auto& [i, j] : path) total += dist.at(i, j);
  return total;
}

// Random feature matrix whose rows are far apart (row t centred on spread*t),
// so the optimal alignment of a sequence against a perturbed copy of itself
// is the identity and anchor values can be computed by hand.
Matrix separated_rows(Rng& rng, int64_t rows, int64_t cols, double spread) {
  Matrix m(rows, cols);
  for (int64_t i = 0; i < rows; ++i)
    for (int64_t k = 0; k < cols; ++k) m.at(i, k) = spread * static_cast<double>(i) + rng.uniform(-0.1, 0.1);
  return m;
}

std::vector<std::string> read_lines(const fs::path& path) {
  std::ifstream in(path);
  REQUIRE(in.good());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) lines.push_back(line);
  return lines;
}

size_t count_occurrences(const std::string& text, const std::string& needle) {
  size_t n = 0, pos = 0;
  while ((pos = text.find(needle, pos)) != std::string::npos) {
    ++n;
    pos += needle.size();
  }
  return n;
}

}  // namespace

// ---------------------------------------------------------------------------
// frame accuracy
// ---------------------------------------------------------------------------

TEST_CASE("frame accuracy counts exact per-frame matches") {
  CHECK(phoneme_accuracy({1, 2, 3, 1}, {1, 2, 2, 1}) == 75.0);
  CHECK(phoneme_accuracy({5, 5, 5}, {5, 5, 5}) == 100.0);
  CHECK(phoneme_accuracy({0, 0}, {1, 2}) == 0.0);
}

TEST_CASE("predicting silence everywhere scores the silence share of the frames") {
  const auto inv = phoneme::PhonemeInventory::standard();
  const int sil = inv.sil_index();
  // 400 frames, exactly 44 of them silence: an all-silence decoder gets 11%.
  std::vector<int> gt, pred;
  Rng rng(91);
  for (int t = 0; t < 400; ++t) {
    gt.push_back(t < 44 ? sil : rng.uniform_int(inv.size() - 1));
    pred.push_back(sil);
  }
  rng.shuffle(gt);
  CHECK(phoneme_accuracy(pred, gt) == 11.0);
}

TEST_CASE("frame accuracy validates its inputs") {
  CHECK_THROWS_WITH_AS(phoneme_accuracy({1, 2}, {1}), doctest::Contains("length mismatch"),
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(phoneme_accuracy({}, {}), doctest::Contains("empty"),
                       std::invalid_argument);
}

// ---------------------------------------------------------------------------
// macro F1
// ---------------------------------------------------------------------------

TEST_CASE("macro F1 matches the hand-worked two-class example") {
  // gt = [a a b b], pred = [a b b b]: F1(a) = 2/3, F1(b) = 4/5, mean = 11/15.
  CHECK(macro_f1({0, 1, 1, 1}, {0, 0, 1, 1}) == doctest::Approx(11.0 / 15.0));
  CHECK(macro_f1({3, 3, 9}, {3, 3, 9}) == 1.0);
}

TEST_CASE("macro F1 skips classes absent from both streams but scores spurious ones") {
  // Classes 1..6 appear nowhere: perfect agreement on {0, 7} is a clean 1.0.
  CHECK(macro_f1({0, 0, 7, 7}, {0, 0, 7, 7}) == 1.0);
  // Class 2 appears only as a false positive: it contributes a zero F1.
  // F1(1) = 2*1 / (2*1 + 0 + 1) = 2/3, F1(2) = 0, macro = 1/3.
  CHECK(macro_f1({1, 2}, {1, 1}) == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("macro F1 rejects negative class indices") {
  CHECK_THROWS_WITH_AS(macro_f1({-1, 0}, {0, 0}), doctest::Contains("negative"),
                       std::invalid_argument);
}

// ---------------------------------------------------------------------------
// feature DTW path and RMSE
// ---------------------------------------------------------------------------

TEST_CASE("feature DTW path is cost-minimal versus exhaustive enumeration") {
  Rng rng(2024);
  for (int instance = 0; instance < 30; ++instance) {
    const int64_t rp = 1 + rng.uniform_int(8), rg = 1 + rng.uniform_int(8);
    Matrix pred(rp, 3), gt(rg, 3);
    for (int64_t i = 0; i < rp; ++i)
      for (int64_t k = 0; k < 3; ++k) pred.at(i, k) = rng.uniform(-2.0, 2.0);
    for (int64_t j = 0; j < rg; ++j)
      for (int64_t k = 0; k < 3; ++k) gt.at(j, k) = rng.uniform(-2.0, 2.0);

    const auto path = feature_dtw_path(pred, gt);
    REQUIRE(!path.empty());
    CHECK(path.front() == std::pair<int, int>(0, 0));
    CHECK(path.back() == std::pair<int, int>(static_cast<int>(rp) - 1, static_cast<int>(rg) - 1));
    for (size_t s = 1; s < path.size(); ++s) {
      const int di = path[s].first - path[s - 1].first;
      const int dj = path[s].second - path[s - 1].second;
      CHECK(di >= 0);
      CHECK(dj >= 0);
      CHECK(di + dj >= 1);
      CHECK(di <= 1);
      CHECK(dj <= 1);
    }
    const Matrix dist = pair_dist(pred, gt, 0);
    CHECK(path_cost(dist, path) == doctest::Approx(brute_min_path_cost(dist)));
  }
}

TEST_CASE("feature DTW keeps the diagonal when sequences already match") {
  Rng rng(7);
  const Matrix a = separated_rows(rng, 5, 4, 10.0);
  const auto path = feature_dtw_path(a, a);
  REQUIRE(path.size() == 5);
  for (int t = 0; t < 5; ++t) CHECK(path[static_cast<size_t>(t)] == std::pair<int, int>(t, t));
}

TEST_CASE("DTW RMSE is zero on identical sequences and recovers a constant offset") {
  Rng rng(11);
  const Matrix a = separated_rows(rng, 12, 5, 10.0);
  CHECK(rmse_after_dtw(a, a) == 0.0);

  Matrix b = a;
  for (double& v : b.data) v += 0.7;
  // Rows sit ~10 apart while the offset moves them 0.7, so the optimal
  // alignment is still the identity and every aligned pair differs by 0.7
  // in each coordinate.
  CHECK(rmse_after_dtw(b, a) == doctest::Approx(0.7));
}

TEST_CASE("DTW RMSE evaluates the squared error along its own optimal path") {
  Rng rng(404);
  for (int instance = 0; instance < 10; ++instance) {
    const int64_t rp = 2 + rng.uniform_int(6), rg = 2 + rng.uniform_int(6);
    Matrix pred(rp, 4), gt(rg, 4);
    for (double& v : pred.data) v = rng.uniform(-1.0, 1.0);
    for (double& v : gt.data) v = rng.uniform(-1.0, 1.0);

    const auto path = feature_dtw_path(pred, gt);
    double ss = 0.0;
    for (const auto& [i, j] : path)
      for (int64_t k = 0; k < 4; ++k) {
        const double diff = pred.at(i, k) - gt.at(j, k);
        ss += diff * diff;
      }
    const double expected = std::sqrt(ss / (static_cast<double>(path.size()) * 4.0));
    CHECK(rmse_after_dtw(pred, gt) == doctest::Approx(expected));
  }
}

TEST_CASE("feature alignment rejects dimension mismatches and empty inputs") {
  Matrix a(3, 4, 0.0), b(3, 5, 0.0);
  CHECK_THROWS_WITH_AS(rmse_after_dtw(a, b), doctest::Contains("dimension mismatch"),
                       std::invalid_argument);
  Matrix empty;
  CHECK_THROWS_WITH_AS(feature_dtw_path(empty, a), doctest::Contains("non-empty"),
                       std::invalid_argument);
}

// ---------------------------------------------------------------------------
// mel cepstral distortion
// ---------------------------------------------------------------------------

TEST_CASE("mel cepstral distortion reproduces the unit-difference closed form") {
  Rng rng(21);
  const Matrix gt = separated_rows(rng, 10, 80, 5.0);
  Matrix pred = gt;
  // One higher coefficient off by exactly 1 in every frame: each aligned pair
  // contributes (10/ln 10) * sqrt(2 * 1).
  for (int64_t i = 0; i < pred.rows; ++i) pred.at(i, 3) += 1.0;
  const double expected = (10.0 / std::log(10.0)) * std::sqrt(2.0);
  CHECK(mcd(pred, gt) == doctest::Approx(expected).epsilon(1e-12));
  CHECK(std::abs(mcd(pred, gt) - 6.141851463713754) < 1e-9);
}

TEST_CASE("mel cepstral distortion is invariant to coefficient zero") {
  Rng rng(22);
  Matrix pred(9, 12), gt(7, 12);
  for (double& v : pred.data) v = rng.uniform(-3.0, 3.0);
  for (double& v : gt.data) v = rng.uniform(-3.0, 3.0);
  const double base = mcd(pred, gt);

  // Slam coefficient 0 on both sides with arbitrary junk: the score must not
  // move at all, which also means the alignment path cannot depend on it.
  Matrix pred2 = pred, gt2 = gt;
  for (int64_t i = 0; i < pred2.rows; ++i) pred2.at(i, 0) = rng.uniform(-1000.0, 1000.0);
  for (int64_t j = 0; j < gt2.rows; ++j) gt2.at(j, 0) = rng.uniform(-1000.0, 1000.0);
  CHECK(mcd(pred2, gt2) == base);
}

TEST_CASE("mel cepstral distortion needs at least two coefficients") {
  Matrix a(4, 1, 0.5), b(4, 1, 0.25);
  CHECK_THROWS_WITH_AS(mcd(a, b), doctest::Contains("at least 2"), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// error rate (Levenshtein / reference length)
// ---------------------------------------------------------------------------

TEST_CASE("error rate matches classic edit distances") {
  const std::vector<char> kitten{'k', 'i', 't', 't', 'e', 'n'};
  const std::vector<char> sitting{'s', 'i', 't', 't', 'i', 'n', 'g'};
  CHECK(error_rate(kitten, sitting) == doctest::Approx(3.0 / 7.0));
  CHECK(error_rate(sitting, kitten) == doctest::Approx(3.0 / 6.0));
  CHECK(error_rate(std::vector<int>{4, 4, 2}, std::vector<int>{4, 4, 2}) == 0.0);
  CHECK(error_rate(std::vector<int>{}, std::vector<int>{1, 2}) == 1.0);
  CHECK_THROWS_WITH_AS(error_rate(std::vector<int>{1}, std::vector<int>{}),
                       doctest::Contains("reference sequence is empty"), std::invalid_argument);
}

TEST_CASE("error rate satisfies the edit-distance identities on random pairs") {
  Rng rng(77);
  for (int instance = 0; instance < 100; ++instance) {
    std::vector<int> p(static_cast<size_t>(rng.uniform_int(11)));
    std::vector<int> g(static_cast<size_t>(1 + rng.uniform_int(10)));
    for (int& v : p) v = rng.uniform_int(4);
    for (int& v : g) v = rng.uniform_int(4);
    const double er = error_rate(p, g);
    CHECK(er >= 0.0);
    CHECK(er <= (static_cast<double>(p.size()) + static_cast<double>(g.size())) /
                    static_cast<double>(g.size()));
    CHECK((er == 0.0) == (p == g));
    if (!p.empty()) {
      // The underlying edit distance is symmetric; only the normalizer flips.
      const double forward = er * static_cast<double>(g.size());
      const double backward = error_rate(g, p) * static_cast<double>(p.size());
      CHECK(std::llround(forward) == std::llround(backward));
    }
  }
}

TEST_CASE("text normalization lowercases, strips punctuation and collapses whitespace") {
  CHECK(normalize_text("  Hello,   WORLD!! ") == "hello world");
  CHECK(normalize_text("don't\tstop\nnow") == "dont stop now");
  CHECK(normalize_text("...") == "");
  CHECK(normalize_text("already clean") == "already clean");
}

TEST_CASE("character error rate reproduces the transcription anchor") {
  // Reference "what a wonderful world" is 22 characters once normalized; the
  // hypothesis needs 4 edits ("a " inserted, "wild" -> "world"), so 4/22.
  const double cer = character_error_rate("what wonderful wild", "What a wonderful world.");
  CHECK(cer == doctest::Approx(4.0 / 22.0));
  CHECK(std::abs(cer - 0.18) < 0.02);
  CHECK(character_error_rate("same text", "Same text!") == 0.0);
  CHECK_THROWS_WITH_AS(character_error_rate("anything", "?!."),
                       doctest::Contains("reference text is empty"), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// confusion matrix
// ---------------------------------------------------------------------------

TEST_CASE("confusion matrix counts are exact with reference rows and prediction columns") {
  const auto inv = phoneme::PhonemeInventory::standard();
  const std::vector<int> gt{0, 0, 1, 39};
  const std::vector<int> pred{0, 1, 1, 39};
  const Confusion c = confusion_matrix(pred, gt, inv);
  CHECK(c.total == 4);
  CHECK(c.counts.at(0, 0) == 1.0);
  CHECK(c.counts.at(0, 1) == 1.0);
  CHECK(c.counts.at(1, 1) == 1.0);
  CHECK(c.counts.at(39, 39) == 1.0);

  // Row sums recover the per-class reference frame counts, the grand total
  // covers every scored frame, and the diagonal reproduces frame accuracy.
  double total = 0.0, trace = 0.0;
  std::vector<double> row_sums(40, 0.0);
  for (int g = 0; g < 40; ++g)
    for (int p = 0; p < 40; ++p) {
      total += c.counts.at(g, p);
      row_sums[static_cast<size_t>(g)] += c.counts.at(g, p);
      if (g == p) trace += c.counts.at(g, p);
    }
  CHECK(total == 4.0);
  CHECK(row_sums[0] == 2.0);
  CHECK(row_sums[1] == 1.0);
  CHECK(row_sums[39] == 1.0);
  CHECK(100.0 * trace / total == phoneme_accuracy(pred, gt));
}

TEST_CASE("within-group fraction is one for matches and in-group substitutions") {
  const auto inv = phoneme::PhonemeInventory::standard();
  const std::vector<int> stops = inv.group_members(phoneme::Group::Stops);
  REQUIRE(stops.size() >= 2);
  std::vector<int> gt, pred;
  for (size_t t = 0; t < stops.size(); ++t) {
    gt.push_back(stops[t]);
    pred.push_back(stops[(t + 1) % stops.size()]);  // wrong class, same group
  }
  CHECK(confusion_matrix(pred, gt, inv).within_group_fraction == 1.0);
  CHECK(confusion_matrix(gt, gt, inv).within_group_fraction == 1.0);

  // A vowel predicted for every stop is fully out of group.
  const int vowel = inv.group_members(phoneme::Group::Vowels).front();
  std::vector<int> vowels(gt.size(), vowel);
  CHECK(confusion_matrix(vowels, gt, inv).within_group_fraction == 0.0);
}

TEST_CASE("within-group fraction of uniform guessing follows the group-size chance rate") {
  const auto inv = phoneme::PhonemeInventory::standard();
  Rng rng(3131);
  const int n = 200000;
  std::vector<int> gt(static_cast<size_t>(n)), pred(static_cast<size_t>(n));
  for (int t = 0; t < n; ++t) {
    // Skewed reference distribution; uniform independent predictions.
    gt[static_cast<size_t>(t)] = rng.uniform() < 0.7 ? rng.uniform_int(10) : rng.uniform_int(40);
    pred[static_cast<size_t>(t)] = rng.uniform_int(40);
  }
  // Conditioned on the drawn references, the expected fraction is the mean of
  // |group(gt_t)| / 40 across frames.
  double expected = 0.0;
  for (int t = 0; t < n; ++t) {
    const auto members = inv.group_members(inv.group_of(gt[static_cast<size_t>(t)]));
    expected += static_cast<double>(members.size()) / 40.0;
  }
  expected /= static_cast<double>(n);
  const Confusion c = confusion_matrix(pred, gt, inv);
  CHECK(std::abs(c.within_group_fraction - expected) < 0.01);
}

TEST_CASE("confusion matrix validates class indices") {
  const auto inv = phoneme::PhonemeInventory::standard();
  CHECK_THROWS_WITH_AS(confusion_matrix({40}, {0}, inv), doctest::Contains("out of range"),
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(confusion_matrix({0}, {0, 1}, inv), doctest::Contains("length mismatch"),
                       std::invalid_argument);
}

// ---------------------------------------------------------------------------
// per-class feature means
// ---------------------------------------------------------------------------

TEST_CASE("per-class feature means are exact and flag absent classes") {
  Matrix feats(5, 3);
  const double rows[5][3] = {{1, 2, 3}, {10, 20, 30}, {3, 4, 5}, {20, 40, 60}, {30, 60, 90}};
  for (int64_t i = 0; i < 5; ++i)
    for (int64_t k = 0; k < 3; ++k) feats.at(i, k) = rows[i][k];
  const ClassMeans cm = phoneme_mean_features(feats, {0, 2, 0, 2, 2}, 4);

  CHECK(cm.counts == std::vector<int64_t>{2, 0, 3, 0});
  CHECK(cm.present == std::vector<bool>{true, false, true, false});
  CHECK(cm.means.at(0, 0) == 2.0);
  CHECK(cm.means.at(0, 1) == 3.0);
  CHECK(cm.means.at(0, 2) == 4.0);
  CHECK(cm.means.at(2, 0) == 20.0);
  CHECK(cm.means.at(2, 1) == 40.0);
  CHECK(cm.means.at(2, 2) == 60.0);
  for (int64_t k = 0; k < 3; ++k) {
    CHECK(cm.means.at(1, k) == 0.0);
    CHECK(cm.means.at(3, k) == 0.0);
  }
}

TEST_CASE("per-class feature means are invariant to frame order") {
  Rng rng(55);
  const int64_t frames = 60, dim = 4;
  Matrix feats(frames, dim);
  for (double& v : feats.data) v = rng.uniform(-5.0, 5.0);
  std::vector<int> labels(static_cast<size_t>(frames));
  for (int& v : labels) v = rng.uniform_int(5);

  std::vector<int> order(static_cast<size_t>(frames));
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  Matrix shuffled(frames, dim);
  std::vector<int> shuffled_labels(static_cast<size_t>(frames));
  for (int64_t i = 0; i < frames; ++i) {
    const int src = order[static_cast<size_t>(i)];
    shuffled_labels[static_cast<size_t>(i)] = labels[static_cast<size_t>(src)];
    for (int64_t k = 0; k < dim; ++k) shuffled.at(i, k) = feats.at(src, k);
  }

  const ClassMeans a = phoneme_mean_features(feats, labels, 5);
  const ClassMeans b = phoneme_mean_features(shuffled, shuffled_labels, 5);
  CHECK(a.counts == b.counts);
  CHECK(a.present == b.present);
  for (int64_t c = 0; c < 5; ++c)
    for (int64_t k = 0; k < dim; ++k)
      CHECK(a.means.at(c, k) == doctest::Approx(b.means.at(c, k)).epsilon(1e-12));
}

TEST_CASE("per-class feature means validate their inputs") {
  Matrix feats(3, 2, 0.0);
  CHECK_THROWS_WITH_AS(phoneme_mean_features(feats, {0, 1}, 2),
                       doctest::Contains("feature rows"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(phoneme_mean_features(feats, {0, 1, 5}, 2),
                       doctest::Contains("out of range"), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// DTW frame map
// ---------------------------------------------------------------------------

TEST_CASE("DTW frame map is the identity for identical sequences") {
  Rng rng(66);
  const Matrix a = separated_rows(rng, 6, 3, 8.0);
  const std::vector<int> map = dtw_frame_map(a, a);
  REQUIRE(map.size() == 6);
  for (int t = 0; t < 6; ++t) CHECK(map[static_cast<size_t>(t)] == t);
}

TEST_CASE("DTW frame map pairs duplicated predicted frames with their source") {
  Rng rng(67);
  const Matrix gt = separated_rows(rng, 6, 3, 8.0);
  Matrix pred(12, 3);
  for (int64_t i = 0; i < 12; ++i)
    for (int64_t k = 0; k < 3; ++k) pred.at(i, k) = gt.at(i / 2, k);
  const std::vector<int> map = dtw_frame_map(pred, gt);
  REQUIRE(map.size() == 12);
  for (int64_t i = 0; i < 12; ++i) CHECK(map[static_cast<size_t>(i)] == static_cast<int>(i / 2));
}

// ---------------------------------------------------------------------------
// trial evaluation
// ---------------------------------------------------------------------------

namespace {

// A trial whose predictions match the reference exactly.
EvalTrial perfect_trial(const std::string& id, Rng& rng) {
  EvalTrial t;
  t.sentence_id = id;
  t.gt_mfcc = separated_rows(rng, 4, 3, 6.0);
  t.pred_mfcc = t.gt_mfcc;
  t.gt_frames = {4, 4, 9, 9};
  t.pred_frames = t.gt_frames;
  return t;
}

}  // namespace

TEST_CASE("trial evaluation scores aligned predictions and pools the confusion") {
  const auto inv = phoneme::PhonemeInventory::standard();
  Rng rng(88);
  EvalTrial a = perfect_trial("s01", rng);
  EvalTrial b = perfect_trial("s02", rng);
  b.pred_frames = {4, 4, 9, 2};  // one frame wrong, and collapse changes too
  for (int64_t k = 0; k < b.pred_mfcc.cols; ++k) b.pred_mfcc.at(3, k) += 0.5;

  const MetricReport report = evaluate_trials({a, b}, inv, /*time_aligned=*/true);
  REQUIRE(report.per_sentence.size() == 2);
  CHECK(report.per_sentence[0].sentence_id == "s01");
  CHECK(report.per_sentence[0].accuracy_pct == 100.0);
  CHECK(report.per_sentence[0].rmse == 0.0);
  CHECK(report.per_sentence[0].mcd == 0.0);
  CHECK(report.per_sentence[0].f1 == 1.0);
  CHECK(report.per_sentence[0].error_rate == 0.0);

  CHECK(report.per_sentence[1].accuracy_pct == 75.0);
  CHECK(report.per_sentence[1].rmse > 0.0);
  // Collapsed sequences: prediction (4 9 2) vs reference (4 9) — one insertion
  // over a length-2 reference.
  CHECK(report.per_sentence[1].error_rate == doctest::Approx(0.5));

  CHECK(report.aggregate.sentence_id == "aggregate");
  CHECK(report.aggregate.accuracy_pct == doctest::Approx(87.5));
  CHECK(report.aggregate.error_rate == doctest::Approx(0.25));
  CHECK(report.confusion.total == 8);
  CHECK(report.confusion.counts.at(4, 4) == 4.0);
  CHECK(report.confusion.counts.at(9, 9) == 3.0);
  CHECK(report.confusion.counts.at(9, 2) == 1.0);
}

TEST_CASE("trial evaluation aligns unequal-length trials through feature warping") {
  const auto inv = phoneme::PhonemeInventory::standard();
  Rng rng(89);
  EvalTrial t;
  t.sentence_id = "dup";
  t.gt_mfcc = separated_rows(rng, 5, 3, 8.0);
  t.gt_frames = {1, 1, 6, 6, 12};
  t.pred_mfcc = Matrix(10, 3);
  t.pred_frames.clear();
  for (int64_t i = 0; i < 10; ++i) {
    for (int64_t k = 0; k < 3; ++k) t.pred_mfcc.at(i, k) = t.gt_mfcc.at(i / 2, k);
    t.pred_frames.push_back(t.gt_frames[static_cast<size_t>(i / 2)]);
  }

  const MetricReport report = evaluate_trials({t}, inv, /*time_aligned=*/false);
  // Every predicted frame inherits the label of its warped reference frame,
  // and the collapsed sequences agree even though the lengths differ.
  CHECK(report.per_sentence[0].accuracy_pct == 100.0);
  CHECK(report.per_sentence[0].f1 == 1.0);
  CHECK(report.per_sentence[0].error_rate == 0.0);
  CHECK(report.confusion.total == 10);

  CHECK_THROWS_WITH_AS(evaluate_trials({t}, inv, /*time_aligned=*/true),
                       doctest::Contains("equal frame counts"), std::invalid_argument);
}

TEST_CASE("trial evaluation validates shapes and rejects empty batches") {
  const auto inv = phoneme::PhonemeInventory::standard();
  CHECK_THROWS_WITH_AS(evaluate_trials({}, inv, true), doctest::Contains("no trials"),
                       std::invalid_argument);
  Rng rng(90);
  EvalTrial t = perfect_trial("bad", rng);
  t.pred_frames.pop_back();
  CHECK_THROWS_WITH_AS(evaluate_trials({t}, inv, true), doctest::Contains("predicted labels"),
                       std::invalid_argument);
}

// ---------------------------------------------------------------------------
// report files
// ---------------------------------------------------------------------------

TEST_CASE("metric reports round-trip through the CSV writer") {
  const auto inv = phoneme::PhonemeInventory::standard();
  Rng rng(91);
  EvalTrial a = perfect_trial("s01", rng);
  EvalTrial b = perfect_trial("s02", rng);
  b.pred_frames = {4, 4, 9, 2};
  for (int64_t k = 0; k < b.pred_mfcc.cols; ++k) b.pred_mfcc.at(3, k) += 0.5;
  const MetricReport report = evaluate_trials({a, b}, inv, true);

  const fs::path path = fs::temp_directory_path() / "metrics_report_test.csv";
  std::error_code ec;
  fs::remove(path, ec);
  write_report_csv(path.string(), report);
  const auto lines = read_lines(path);
  REQUIRE(lines.size() == 4);  // header + 2 sentences + aggregate
  CHECK(lines[0] == "sentence_id,phoneme_accuracy_pct,rmse,mcd,f1,error_rate");
  CHECK(lines[1].rfind("s01,100,0,0,1,0", 0) == 0);
  CHECK(lines[3].rfind("aggregate,87.5,", 0) == 0);
  fs::remove(path, ec);
}

TEST_CASE("confusion artifacts carry full label axes and group boundaries") {
  const auto inv = phoneme::PhonemeInventory::standard();
  std::vector<int> gt, pred;
  Rng rng(92);
  for (int t = 0; t < 500; ++t) {
    gt.push_back(rng.uniform_int(40));
    pred.push_back(rng.uniform_int(40));
  }
  const Confusion c = confusion_matrix(pred, gt, inv);

  const fs::path csv = fs::temp_directory_path() / "metrics_confusion_test.csv";
  std::error_code ec;
  fs::remove(csv, ec);
  write_confusion_csv(csv.string(), c, inv);
  const auto lines = read_lines(csv);
  REQUIRE(lines.size() == 41);
  CHECK(lines[0].rfind("gt\\pred,", 0) == 0);
  CHECK(lines[0].find(',' + inv.label(39)) != std::string::npos);
  // Each data row starts with its reference label and sums to that class's
  // reference frame count.
  int64_t grand = 0;
  for (int g = 0; g < 40; ++g) {
    const std::string& row = lines[static_cast<size_t>(g) + 1];
    CHECK(row.rfind(inv.label(g) + ",", 0) == 0);
    std::stringstream ss(row);
    std::string cell;
    std::getline(ss, cell, ',');  // label
    int64_t row_sum = 0;
    while (std::getline(ss, cell, ',')) row_sum += std::stoll(cell);
    int64_t expected = 0;
    for (int v : gt) expected += v == g;
    CHECK(row_sum == expected);
    grand += row_sum;
  }
  CHECK(grand == c.total);
  fs::remove(csv, ec);

  const fs::path svg = fs::temp_directory_path() / "metrics_confusion_test.svg";
  fs::remove(svg, ec);
  write_confusion_svg(svg.string(), c, inv);
  std::ifstream in(svg);
  std::stringstream buf;
  buf << in.rdbuf();
  const std::string body = buf.str();
  CHECK(body.rfind("<svg", 0) == 0);
  CHECK(body.find("</svg>") != std::string::npos);
  CHECK(count_occurrences(body, "class=\"cell\"") == 1600);
  CHECK(count_occurrences(body, "class=\"group-box\"") == 9);
  CHECK(body.find("stroke=\"red\"") != std::string::npos);
  CHECK(count_occurrences(body, ">" + inv.label(0) + "<") == 2);  // row + column label
  fs::remove(svg, ec);
}

TEST_CASE("class means CSV lists every class with presence flags") {
  const auto inv = phoneme::PhonemeInventory::standard();
  Matrix feats(6, 2);
  Rng rng(93);
  for (double& v : feats.data) v = rng.uniform(0.0, 1.0);
  const ClassMeans cm = phoneme_mean_features(feats, {0, 0, 5, 5, 39, 39}, 40);

  const fs::path path = fs::temp_directory_path() / "metrics_means_test.csv";
  std::error_code ec;
  fs::remove(path, ec);
  write_class_means_csv(path.string(), cm, inv);
  const auto lines = read_lines(path);
  REQUIRE(lines.size() == 41);
  CHECK(lines[0] == "class_index,label,present,count,mean_0,mean_1");
  CHECK(lines[1].rfind("0," + inv.label(0) + ",1,2,", 0) == 0);
  CHECK(lines[2].rfind("1," + inv.label(1) + ",0,0,", 0) == 0);
  CHECK(lines[40].rfind("39,sil,1,2,", 0) == 0);
  fs::remove(path, ec);
}
