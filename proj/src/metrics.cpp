#include "bts/metrics.hpp"

#include <cctype>
#include <cmath>
#include <fstream>

#include "bts/kvconfig.hpp"
#include "bts/losses.hpp"

namespace bts::metrics {

// ---------------- frame-label metrics ----------------

namespace {

void require_paired(const std::vector<int>& pred, const std::vector<int>& gt, const char* what) {
  require(pred.size() == gt.size(),
          std::string(what) + ": length mismatch (pred " + std::to_string(pred.size()) +
              " vs reference " + std::to_string(gt.size()) +
              "); map unaligned trials with dtw_frame_map first");
  require(!gt.empty(), std::string(what) + ": empty sequences");
}

}  // namespace

double phoneme_accuracy(const std::vector<int>& pred_frames, const std::vector<int>& gt_frames) {
  require_paired(pred_frames, gt_frames, "phoneme_accuracy");
  int64_t hits = 0;
  for (size_t t = 0; t < gt_frames.size(); ++t) hits += pred_frames[t] == gt_frames[t];
  return 100.0 * static_cast<double>(hits) / static_cast<double>(gt_frames.size());
}

double macro_f1(const std::vector<int>& pred_frames, const std::vector<int>& gt_frames) {
  require_paired(pred_frames, gt_frames, "macro_f1");
  int max_label = 0;
  for (int v : pred_frames) {
    require(v >= 0, "macro_f1: negative class index");
    max_label = std::max(max_label, v);
  }
  for (int v : gt_frames) {
    require(v >= 0, "macro_f1: negative class index");
    max_label = std::max(max_label, v);
  }
  const int classes = max_label + 1;
  std::vector<int64_t> tp(static_cast<size_t>(classes), 0), fp(tp), fn(tp);
  for (size_t t = 0; t < gt_frames.size(); ++t) {
    const int p = pred_frames[t], g = gt_frames[t];
    if (p == g) {
      ++tp[static_cast<size_t>(g)];
    } else {
      ++fp[static_cast<size_t>(p)];
      ++fn[static_cast<size_t>(g)];
    }
  }
  double sum = 0.0;
  int scored = 0;
  for (int c = 0; c < classes; ++c) {
    const size_t i = static_cast<size_t>(c);
    if (tp[i] + fp[i] + fn[i] == 0) continue;  // absent everywhere: skipped
    ++scored;
    const double denom = static_cast<double>(2 * tp[i] + fp[i] + fn[i]);
    sum += denom > 0.0 ? 2.0 * static_cast<double>(tp[i]) / denom : 0.0;
  }
  return scored > 0 ? sum / static_cast<double>(scored) : 0.0;
}

// ---------------- feature-sequence metrics ----------------

namespace {

// Per-pair Euclidean distances over columns [dim_lo, cols).
Matrix pair_distances(const Matrix& pred, const Matrix& gt, int64_t dim_lo) {
  require(pred.rows >= 1 && gt.rows >= 1, "feature alignment needs non-empty sequences");
  require(pred.cols == gt.cols, "feature alignment: dimension mismatch (" +
                                    std::to_string(pred.cols) + " vs " +
                                    std::to_string(gt.cols) + ")");
  Matrix d(pred.rows, gt.rows);
  for (int64_t i = 0; i < pred.rows; ++i) {
    for (int64_t j = 0; j < gt.rows; ++j) {
      double ss = 0.0;
      for (int64_t k = dim_lo; k < pred.cols; ++k) {
        const double diff = pred.at(i, k) - gt.at(j, k);
        ss += diff * diff;
      }
      d.at(i, j) = std::sqrt(ss);
    }
  }
  return d;
}

}  // namespace

std::vector<std::pair<int, int>> feature_dtw_path(const Matrix& pred, const Matrix& gt) {
  return losses::dtw_path(pair_distances(pred, gt, 0));
}

double rmse_after_dtw(const Matrix& pred, const Matrix& gt) {
  const auto path = feature_dtw_path(pred, gt);
  double ss = 0.0;
  for (const auto& [i, j] : path) {
    for (int64_t k = 0; k < pred.cols; ++k) {
      const double diff = pred.at(i, k) - gt.at(j, k);
      ss += diff * diff;
    }
  }
  return std::sqrt(ss / (static_cast<double>(path.size()) * static_cast<double>(pred.cols)));
}

double mcd(const Matrix& pred, const Matrix& gt) {
  require(pred.cols >= 2 && gt.cols >= 2,
          "mcd: need at least 2 coefficients (coefficient 0 is excluded)");
  // Align on the same coefficients the distortion sums over, so changes to
  // coefficient 0 can never move the path (or the result).
  const auto path = losses::dtw_path(pair_distances(pred, gt, 1));
  const double scale = 10.0 / std::log(10.0);
  double sum = 0.0;
  for (const auto& [i, j] : path) {
    double ss = 0.0;
    for (int64_t k = 1; k < pred.cols; ++k) {
      const double diff = pred.at(i, k) - gt.at(j, k);
      ss += diff * diff;
    }
    sum += scale * std::sqrt(2.0 * ss);
  }
  return sum / static_cast<double>(path.size());
}

std::vector<int> dtw_frame_map(const Matrix& pred, const Matrix& gt) {
  const auto path = feature_dtw_path(pred, gt);
  return losses::dtw_align_first(path, static_cast<int>(pred.rows));
}

// ---------------- sequence error rate ----------------

std::string normalize_text(const std::string& text) {
  std::string out;
  bool in_space = true;  // swallow leading whitespace
  for (unsigned char ch : text) {
    if (std::isalnum(ch)) {
      out.push_back(static_cast<char>(std::tolower(ch)));
      in_space = false;
    } else if (std::isspace(ch)) {
      if (!in_space) out.push_back(' ');
      in_space = true;
    }
    // punctuation and other bytes are stripped
  }
  if (!out.empty() && out.back() == ' ') out.pop_back();
  return out;
}

double character_error_rate(const std::string& pred_text, const std::string& gt_text) {
  const std::string p = normalize_text(pred_text);
  const std::string g = normalize_text(gt_text);
  require(!g.empty(), "character_error_rate: reference text is empty after normalization");
  return error_rate(std::vector<char>(p.begin(), p.end()), std::vector<char>(g.begin(), g.end()));
}

// ---------------- confusion ----------------

Confusion confusion_matrix(const std::vector<int>& pred_frames, const std::vector<int>& gt_frames,
                           const phoneme::PhonemeInventory& inv) {
  require_paired(pred_frames, gt_frames, "confusion_matrix");
  const int classes = inv.size();
  Confusion out;
  out.counts = Matrix(classes, classes, 0.0);
  int64_t within = 0;
  for (size_t t = 0; t < gt_frames.size(); ++t) {
    const int p = pred_frames[t], g = gt_frames[t];
    require(p >= 0 && p < classes && g >= 0 && g < classes,
            "confusion_matrix: class index out of range at frame " + std::to_string(t));
    out.counts.at(g, p) += 1.0;
    within += inv.group_of(g) == inv.group_of(p);
  }
  out.total = static_cast<int64_t>(gt_frames.size());
  out.within_group_fraction = static_cast<double>(within) / static_cast<double>(out.total);
  return out;
}

// ---------------- per-class feature means ----------------

ClassMeans phoneme_mean_features(const Matrix& features, const std::vector<int>& frame_labels,
                                 int n_classes) {
  require(n_classes >= 1, "phoneme_mean_features: n_classes must be >= 1");
  require(static_cast<size_t>(features.rows) == frame_labels.size(),
          "phoneme_mean_features: " + std::to_string(features.rows) + " feature rows vs " +
              std::to_string(frame_labels.size()) + " labels");
  ClassMeans out;
  out.means = Matrix(n_classes, features.cols, 0.0);
  out.counts.assign(static_cast<size_t>(n_classes), 0);
  out.present.assign(static_cast<size_t>(n_classes), false);
  for (int64_t t = 0; t < features.rows; ++t) {
    const int c = frame_labels[static_cast<size_t>(t)];
    require(c >= 0 && c < n_classes,
            "phoneme_mean_features: class index out of range at frame " + std::to_string(t));
    for (int64_t k = 0; k < features.cols; ++k) out.means.at(c, k) += features.at(t, k);
    ++out.counts[static_cast<size_t>(c)];
  }
  for (int c = 0; c < n_classes; ++c) {
    if (out.counts[static_cast<size_t>(c)] == 0) continue;
    out.present[static_cast<size_t>(c)] = true;
    const double inv_n = 1.0 / static_cast<double>(out.counts[static_cast<size_t>(c)]);
    for (int64_t k = 0; k < out.means.cols; ++k) out.means.at(c, k) *= inv_n;
  }
  return out;
}

// ---------------- per-sentence report ----------------

MetricReport evaluate_trials(const std::vector<EvalTrial>& trials,
                             const phoneme::PhonemeInventory& inv, bool time_aligned) {
  require(!trials.empty(), "evaluate_trials: no trials to score");
  MetricReport report;
  std::vector<int> pooled_pred, pooled_gt;
  double acc = 0.0, rmse_sum = 0.0, mcd_sum = 0.0, f1 = 0.0, er = 0.0;
  for (size_t n = 0; n < trials.size(); ++n) {
    const EvalTrial& tr = trials[n];
    require(tr.pred_frames.size() == static_cast<size_t>(tr.pred_mfcc.rows),
            "trial '" + tr.sentence_id + "': " + std::to_string(tr.pred_frames.size()) +
                " predicted labels vs " + std::to_string(tr.pred_mfcc.rows) + " feature rows");
    require(tr.gt_frames.size() == static_cast<size_t>(tr.gt_mfcc.rows),
            "trial '" + tr.sentence_id + "': " + std::to_string(tr.gt_frames.size()) +
                " reference labels vs " + std::to_string(tr.gt_mfcc.rows) + " feature rows");
    std::vector<int> gt_on_pred;
    if (time_aligned) {
      require(tr.pred_frames.size() == tr.gt_frames.size(),
              "trial '" + tr.sentence_id +
                  "': time-aligned scoring needs equal frame counts, got " +
                  std::to_string(tr.pred_frames.size()) + " vs " +
                  std::to_string(tr.gt_frames.size()));
      gt_on_pred = tr.gt_frames;
    } else {
      const std::vector<int> map = dtw_frame_map(tr.pred_mfcc, tr.gt_mfcc);
      gt_on_pred.reserve(map.size());
      for (int j : map) gt_on_pred.push_back(tr.gt_frames[static_cast<size_t>(j)]);
    }
    SentenceMetrics sm;
    sm.sentence_id = tr.sentence_id;
    sm.accuracy_pct = phoneme_accuracy(tr.pred_frames, gt_on_pred);
    sm.rmse = rmse_after_dtw(tr.pred_mfcc, tr.gt_mfcc);
    sm.mcd = mcd(tr.pred_mfcc, tr.gt_mfcc);
    sm.f1 = macro_f1(tr.pred_frames, gt_on_pred);
    sm.error_rate = error_rate(phoneme::collapse(tr.pred_frames), phoneme::collapse(tr.gt_frames));
    report.per_sentence.push_back(sm);
    pooled_pred.insert(pooled_pred.end(), tr.pred_frames.begin(), tr.pred_frames.end());
    pooled_gt.insert(pooled_gt.end(), gt_on_pred.begin(), gt_on_pred.end());
    acc += sm.accuracy_pct;
    rmse_sum += sm.rmse;
    mcd_sum += sm.mcd;
    f1 += sm.f1;
    er += sm.error_rate;
  }
  report.confusion = confusion_matrix(pooled_pred, pooled_gt, inv);
  const double inv_n = 1.0 / static_cast<double>(trials.size());
  report.aggregate = {"aggregate", acc * inv_n, rmse_sum * inv_n, mcd_sum * inv_n, f1 * inv_n,
                      er * inv_n};
  return report;
}

// ---------------- file emission ----------------

namespace {

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path);
  if (!out) fail("cannot open '" + path + "' for writing");
  return out;
}

void finish_out(std::ofstream& out, const std::string& path) {
  out.flush();
  if (!out) fail("failed writing '" + path + "'");
}

void csv_metrics_row(std::ostream& out, const SentenceMetrics& sm) {
  out << sm.sentence_id << ',' << kvcfg::fmt_double(sm.accuracy_pct) << ','
      << kvcfg::fmt_double(sm.rmse) << ',' << kvcfg::fmt_double(sm.mcd) << ','
      << kvcfg::fmt_double(sm.f1) << ',' << kvcfg::fmt_double(sm.error_rate) << '\n';
}

}  // namespace

void write_report_csv(const std::string& path, const MetricReport& report) {
  std::ofstream out = open_out(path);
  out << "sentence_id,phoneme_accuracy_pct,rmse,mcd,f1,error_rate\n";
  for (const SentenceMetrics& sm : report.per_sentence) csv_metrics_row(out, sm);
  csv_metrics_row(out, report.aggregate);
  finish_out(out, path);
}

void write_confusion_csv(const std::string& path, const Confusion& confusion,
                         const phoneme::PhonemeInventory& inv) {
  require(confusion.counts.rows == inv.size() && confusion.counts.cols == inv.size(),
          "confusion matrix size does not match the inventory");
  std::ofstream out = open_out(path);
  out << "gt\\pred";
  for (int c = 0; c < inv.size(); ++c) out << ',' << inv.label(c);
  out << '\n';
  for (int g = 0; g < inv.size(); ++g) {
    out << inv.label(g);
    for (int p = 0; p < inv.size(); ++p)
      out << ',' << static_cast<int64_t>(confusion.counts.at(g, p));
    out << '\n';
  }
  finish_out(out, path);
}

void write_confusion_svg(const std::string& path, const Confusion& confusion,
                         const phoneme::PhonemeInventory& inv) {
  require(confusion.counts.rows == inv.size() && confusion.counts.cols == inv.size(),
          "confusion matrix size does not match the inventory");
  const int n = inv.size();
  const int cell = 14, margin = 78;
  const int side = margin + n * cell + 16;
  std::ofstream out = open_out(path);
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << side << "\" height=\"" << side
      << "\" font-family=\"sans-serif\" font-size=\"9\">\n";
  out << "<rect width=\"" << side << "\" height=\"" << side << "\" fill=\"white\"/>\n";
  // Row-normalized cells: intensity is count / row sum.
  for (int g = 0; g < n; ++g) {
    double row_sum = 0.0;
    for (int p = 0; p < n; ++p) row_sum += confusion.counts.at(g, p);
    for (int p = 0; p < n; ++p) {
      const double t = row_sum > 0.0 ? confusion.counts.at(g, p) / row_sum : 0.0;
      const int rg = 255 - static_cast<int>(std::lround(205.0 * t));
      const int b = 255 - static_cast<int>(std::lround(55.0 * t));
      out << "<rect class=\"cell\" x=\"" << margin + p * cell << "\" y=\"" << margin + g * cell
          << "\" width=\"" << cell << "\" height=\"" << cell << "\" fill=\"rgb(" << rg << ','
          << rg << ',' << b << ")\"/>\n";
    }
  }
  // Class labels: reference rows on the left, predictions along the top.
  for (int c = 0; c < n; ++c) {
    out << "<text x=\"" << margin - 4 << "\" y=\"" << margin + c * cell + cell - 4
        << "\" text-anchor=\"end\">" << inv.label(c) << "</text>\n";
    out << "<text x=\"" << margin + c * cell + cell / 2 << "\" y=\"" << margin - 6
        << "\" text-anchor=\"start\" transform=\"rotate(-60 " << margin + c * cell + cell / 2
        << ' ' << margin - 6 << ")\">" << inv.label(c) << "</text>\n";
  }
  // Red boxes around the diagonal blocks of each articulatory group.
  int start = 0;
  while (start < n) {
    int end = start + 1;
    while (end < n && inv.group_of(end) == inv.group_of(start)) ++end;
    out << "<rect class=\"group-box\" x=\"" << margin + start * cell << "\" y=\""
        << margin + start * cell << "\" width=\"" << (end - start) * cell << "\" height=\""
        << (end - start) * cell << "\" fill=\"none\" stroke=\"red\" stroke-width=\"1.5\"/>\n";
    start = end;
  }
  out << "</svg>\n";
  finish_out(out, path);
}

void write_class_means_csv(const std::string& path, const ClassMeans& means,
                           const phoneme::PhonemeInventory& inv) {
  require(means.means.rows == inv.size(), "class means do not match the inventory size");
  std::ofstream out = open_out(path);
  out << "class_index,label,present,count";
  for (int64_t k = 0; k < means.means.cols; ++k) out << ",mean_" << k;
  out << '\n';
  for (int c = 0; c < inv.size(); ++c) {
    out << c << ',' << inv.label(c) << ',' << (means.present[static_cast<size_t>(c)] ? 1 : 0)
        << ',' << means.counts[static_cast<size_t>(c)];
    for (int64_t k = 0; k < means.means.cols; ++k)
      out << ',' << kvcfg::fmt_double(means.means.at(c, k));
    out << '\n';
  }
  finish_out(out, path);
}

}  // namespace bts::metrics
