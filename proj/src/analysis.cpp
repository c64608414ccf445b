#include "bts/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>

#include "bts/kvconfig.hpp"
#include "bts/signal.hpp"

namespace bts::analysis {

// ---------------- W scores ----------------

WScoreTable w_scores(const std::vector<std::vector<int>>& corpus,
                     const phoneme::PhonemeInventory& inv) {
  require(!corpus.empty(), "w_scores: empty corpus");
  const int classes = inv.size();
  const int sil = inv.sil_index();
  std::vector<int64_t> counts(static_cast<size_t>(classes), 0);
  int64_t total = 0;
  for (const std::vector<int>& sentence : corpus) {
    for (int tok : sentence) {
      require(tok >= 0 && tok < classes, "w_scores: token index out of range");
      ++counts[static_cast<size_t>(tok)];
      ++total;
    }
  }
  require(total > 0, "w_scores: corpus has no tokens");
  const int64_t non_sil_total = total - counts[static_cast<size_t>(sil)];
  require(non_sil_total > 0, "w_scores: corpus contains only silence tokens");

  WScoreTable table;
  table.with_sil.assign(static_cast<size_t>(classes), 0.0);
  table.without_sil.assign(static_cast<size_t>(classes), 0.0);
  for (int c = 0; c < classes; ++c) {
    table.with_sil[static_cast<size_t>(c)] =
        static_cast<double>(counts[static_cast<size_t>(c)]) / static_cast<double>(total);
    if (c != sil)
      table.without_sil[static_cast<size_t>(c)] =
          static_cast<double>(counts[static_cast<size_t>(c)]) / static_cast<double>(non_sil_total);
  }
  return table;
}

SentenceProperties sentence_properties(const std::string& sentence_id,
                                       const std::vector<int>& tokens,
                                       const WScoreTable& table,
                                       const phoneme::PhonemeInventory& inv) {
  require(tokens.size() >= 2,
          "sentence_properties: need at least 2 tokens (sentences are silence-delimited)");
  const int classes = inv.size();
  require(table.with_sil.size() == static_cast<size_t>(classes) &&
              table.without_sil.size() == static_cast<size_t>(classes),
          "sentence_properties: frequency table does not match the inventory");
  const int sil = inv.sil_index();
  double with = 0.0, without = 0.0;
  int64_t non_sil = 0;
  for (int tok : tokens) {
    require(tok >= 0 && tok < classes, "sentence_properties: token index out of range");
    with += table.with_sil[static_cast<size_t>(tok)];
    if (tok != sil) {
      without += table.without_sil[static_cast<size_t>(tok)];
      ++non_sil;
    }
  }
  require(non_sil > 0, "sentence_properties: sentence has no non-silence tokens");
  SentenceProperties props;
  props.sentence_id = sentence_id;
  props.phoneme_seq_len = static_cast<int>(tokens.size());
  props.w_score_with_sil = with / static_cast<double>(tokens.size());
  props.w_score_without_sil = without / static_cast<double>(non_sil);
  return props;
}

// ---------------- Pearson correlation ----------------

double pearson(const std::vector<double>& xs, const std::vector<double>& ys) {
  require(xs.size() == ys.size(), "pearson: input lengths differ");
  require(xs.size() >= 2, "pearson: need at least 2 points");
  const double n = static_cast<double>(xs.size());
  const double mx = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
  const double my = std::accumulate(ys.begin(), ys.end(), 0.0) / n;
  double sxx = 0.0, syy = 0.0, sxy = 0.0;
  for (size_t i = 0; i < xs.size(); ++i) {
    const double dx = xs[i] - mx, dy = ys[i] - my;
    sxx += dx * dx;
    syy += dy * dy;
    sxy += dx * dy;
  }
  require(sxx > 0.0 && syy > 0.0, "pearson: zero variance makes the correlation undefined");
  return sxy / std::sqrt(sxx * syy);
}

// ---------------- Wilcoxon signed-rank ----------------

WilcoxonResult wilcoxon_signed_rank(const std::vector<double>& a, const std::vector<double>& b) {
  require(a.size() == b.size(), "wilcoxon_signed_rank: input lengths differ");
  std::vector<double> diffs;
  diffs.reserve(a.size());
  for (size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    if (d != 0.0) diffs.push_back(d);
  }
  require(!diffs.empty(), "wilcoxon_signed_rank: all differences are zero");
  require(diffs.size() >= 5,
          "wilcoxon_signed_rank: need at least 5 nonzero differences, got " +
              std::to_string(diffs.size()));

  const int n = static_cast<int>(diffs.size());
  std::vector<int> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](int i, int j) { return std::abs(diffs[static_cast<size_t>(i)]) <
                                       std::abs(diffs[static_cast<size_t>(j)]); });

  // Average ranks over tie runs; doubled ranks stay integral, which the exact
  // distribution below relies on.
  std::vector<double> rank(static_cast<size_t>(n), 0.0);
  std::vector<int64_t> tie_sizes;
  int pos = 0;
  while (pos < n) {
    int end = pos + 1;
    while (end < n && std::abs(diffs[static_cast<size_t>(order[static_cast<size_t>(end)])]) ==
                          std::abs(diffs[static_cast<size_t>(order[static_cast<size_t>(pos)])]))
      ++end;
    const double avg = 0.5 * static_cast<double>(pos + 1 + end);  // mean of ranks pos+1 .. end
    for (int i = pos; i < end; ++i) rank[static_cast<size_t>(order[static_cast<size_t>(i)])] = avg;
    tie_sizes.push_back(end - pos);
    pos = end;
  }

  WilcoxonResult res;
  res.n_effective = n;
  for (int i = 0; i < n; ++i) {
    if (diffs[static_cast<size_t>(i)] > 0.0)
      res.w_plus += rank[static_cast<size_t>(i)];
    else
      res.w_minus += rank[static_cast<size_t>(i)];
  }
  res.statistic = std::min(res.w_plus, res.w_minus);

  if (n <= 25) {
    res.exact = true;
    // Null distribution of the rank sum over all 2^n sign patterns, tracked
    // on doubled ranks so ties' half-integer ranks index an integer array.
    std::vector<int64_t> r2(static_cast<size_t>(n));
    int64_t total2 = 0;
    for (int i = 0; i < n; ++i) {
      r2[static_cast<size_t>(i)] = std::llround(2.0 * rank[static_cast<size_t>(i)]);
      total2 += r2[static_cast<size_t>(i)];
    }
    std::vector<uint64_t> patterns(static_cast<size_t>(total2) + 1, 0);
    patterns[0] = 1;
    int64_t reach = 0;
    for (int i = 0; i < n; ++i) {
      reach += r2[static_cast<size_t>(i)];
      for (int64_t s = reach; s >= r2[static_cast<size_t>(i)]; --s)
        patterns[static_cast<size_t>(s)] +=
            patterns[static_cast<size_t>(s - r2[static_cast<size_t>(i)])];
    }
    const int64_t stat2 = std::llround(2.0 * res.statistic);
    uint64_t at_or_below = 0;
    for (int64_t s = 0; s <= stat2; ++s) at_or_below += patterns[static_cast<size_t>(s)];
    const double p = 2.0 * static_cast<double>(at_or_below) /
                     std::pow(2.0, static_cast<double>(n));
    res.p_value = std::min(1.0, p);
  } else {
    res.exact = false;
    const double dn = static_cast<double>(n);
    const double mu = dn * (dn + 1.0) / 4.0;
    double var = dn * (dn + 1.0) * (2.0 * dn + 1.0) / 24.0;
    for (int64_t t : tie_sizes) {
      const double dt = static_cast<double>(t);
      var -= (dt * dt * dt - dt) / 48.0;
    }
    if (var <= 0.0) fail("wilcoxon_signed_rank: degenerate null variance");
    const double z = (res.statistic - mu) / std::sqrt(var);
    // statistic = min(W+, W-) <= mu, so z <= 0 and the two-sided p is
    // 2 * Phi(z) = erfc(-z / sqrt(2)).
    res.p_value = std::min(1.0, std::erfc(-z / std::sqrt(2.0)));
  }
  return res;
}

// ---------------- model evaluation bridge ----------------

metrics::MetricReport evaluate_model(const model::Model& net,
                                     const std::vector<trainer::TrainTrial>& trials,
                                     const std::vector<std::string>& sentence_ids,
                                     const phoneme::PhonemeInventory& inv, bool time_aligned) {
  require(!trials.empty(), "evaluate_model: no trials");
  require(trials.size() == sentence_ids.size(),
          "evaluate_model: " + std::to_string(trials.size()) + " trials vs " +
              std::to_string(sentence_ids.size()) + " sentence ids");
  const model::ModelConfig& cfg = net.config();
  std::vector<metrics::EvalTrial> scored;
  scored.reserve(trials.size());
  for (size_t n = 0; n < trials.size(); ++n) {
    const trainer::TrainTrial& trial = trials[n];
    require(trial.signals.cols == cfg.in_channels,
            "evaluate_model: trial '" + sentence_ids[n] + "' has " +
                std::to_string(trial.signals.cols) + " channels, model expects " +
                std::to_string(cfg.in_channels));
    const int64_t n8 = trial.signals.rows - trial.signals.rows % cfg.downsample();
    require(n8 > 0, "evaluate_model: trial '" + sentence_ids[n] + "' is shorter than " +
                        std::to_string(cfg.downsample()) + " samples");
    Matrix trimmed(n8, trial.signals.cols);
    for (int64_t r = 0; r < n8; ++r)
      for (int64_t c = 0; c < trial.signals.cols; ++c) trimmed.at(r, c) = trial.signals.at(r, c);

    const auto [x, layout] = trainer::make_batch({&trimmed}, n8);
    const model::ModelOutput out = net.forward(x, /*train=*/false);
    const int64_t frames = n8 / cfg.downsample();

    metrics::EvalTrial et;
    et.sentence_id = sentence_ids[n];
    et.pred_mfcc = Matrix(frames, cfg.mfcc_dim);
    const float* mf = out.mfcc.data();
    for (int64_t t = 0; t < frames; ++t)
      for (int64_t d = 0; d < cfg.mfcc_dim; ++d)
        et.pred_mfcc.at(t, d) = static_cast<double>(mf[t * cfg.mfcc_dim + d]);
    const float* lp = out.phoneme_logprobs.data();
    et.pred_frames.resize(static_cast<size_t>(frames));
    for (int64_t t = 0; t < frames; ++t) {
      const float* row = lp + t * cfg.n_classes;
      int best = 0;
      for (int c = 1; c < cfg.n_classes; ++c)
        if (row[c] > row[best]) best = c;
      et.pred_frames[static_cast<size_t>(t)] = best;
    }

    const losses::TrialTargets& tg = trial.targets;
    if (time_aligned) {
      require(tg.mfcc.rows >= frames &&
                  tg.frame_labels.size() >= static_cast<size_t>(frames),
              "evaluate_model: trial '" + sentence_ids[n] +
                  "' targets cover fewer frames than the decoded output");
      et.gt_mfcc = Matrix(frames, tg.mfcc.cols);
      for (int64_t t = 0; t < frames; ++t)
        for (int64_t d = 0; d < tg.mfcc.cols; ++d) et.gt_mfcc.at(t, d) = tg.mfcc.at(t, d);
      et.gt_frames.assign(tg.frame_labels.begin(),
                          tg.frame_labels.begin() + static_cast<std::ptrdiff_t>(frames));
    } else {
      et.gt_mfcc = tg.mfcc;
      et.gt_frames = tg.frame_labels;
    }
    scored.push_back(std::move(et));
  }
  return metrics::evaluate_trials(scored, inv, time_aligned);
}

// ---------------- band ablation ----------------

namespace {

std::vector<trainer::TrainTrial> isolate_band(const std::vector<trainer::TrainTrial>& trials,
                                              const std::string& band, int sample_rate_hz) {
  std::vector<trainer::TrainTrial> out;
  out.reserve(trials.size());
  for (const trainer::TrainTrial& trial : trials) {
    signal::Epoch epoch;
    epoch.samples = trial.signals;
    epoch.sample_rate_hz = sample_rate_hz;
    trainer::TrainTrial filtered = trial;
    filtered.signals = signal::band_isolate(epoch, band).samples;
    out.push_back(std::move(filtered));
  }
  return out;
}

}  // namespace

std::vector<BandAblationRow> band_ablation(const std::vector<trainer::TrainTrial>& train_set,
                                           const std::vector<trainer::TrainTrial>& eval_set,
                                           const std::vector<std::string>& eval_ids,
                                           const std::vector<std::string>& bands,
                                           const BandAblationConfig& config,
                                           const phoneme::PhonemeInventory& inv) {
  require(!bands.empty(), "band_ablation: no bands requested");
  require(config.sample_rate_hz > 0, "band_ablation: sample rate must be positive");
  std::vector<BandAblationRow> rows;
  rows.reserve(bands.size());
  for (const std::string& band : bands) {
    const std::vector<trainer::TrainTrial> train_b =
        isolate_band(train_set, band, config.sample_rate_hz);
    const std::vector<trainer::TrainTrial> eval_b =
        isolate_band(eval_set, band, config.sample_rate_hz);

    model::Model net = model::Model::init(config.model, config.init_seed);
    const trainer::FitResult fit_res = trainer::fit(net, train_b, config.train);

    BandAblationRow row;
    row.band = band;
    row.report = evaluate_model(net, eval_b, eval_ids, inv, config.time_aligned_eval);
    row.best_val_loss = fit_res.best_val_loss;
    row.epochs_run = fit_res.epochs_run;
    rows.push_back(std::move(row));
  }
  return rows;
}

// ---------------- correlation report ----------------

namespace {

std::vector<double> property_column(const std::vector<SentenceProperties>& props,
                                    double (*get)(const SentenceProperties&)) {
  std::vector<double> xs;
  xs.reserve(props.size());
  for (const SentenceProperties& p : props) xs.push_back(get(p));
  return xs;
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path);
  if (!out) fail("cannot open '" + path + "' for writing");
  return out;
}

}  // namespace

PropertyCorrelations property_correlations(const std::vector<SentenceProperties>& props,
                                           const std::vector<double>& accuracies) {
  require(props.size() == accuracies.size(),
          "property_correlations: properties and accuracies differ in length");
  require(props.size() >= 2, "property_correlations: need at least 2 sentences");
  PropertyCorrelations out;
  out.length_pcc = pearson(
      property_column(props, [](const SentenceProperties& p) {
        return static_cast<double>(p.phoneme_seq_len);
      }),
      accuracies);
  out.w_with_sil_pcc = pearson(
      property_column(props, [](const SentenceProperties& p) { return p.w_score_with_sil; }),
      accuracies);
  out.w_without_sil_pcc = pearson(
      property_column(props, [](const SentenceProperties& p) { return p.w_score_without_sil; }),
      accuracies);
  return out;
}

void write_property_scatter_csv(const std::string& path,
                                const std::vector<SentenceProperties>& props,
                                const std::vector<double>& accuracies) {
  require(props.size() == accuracies.size(),
          "write_property_scatter_csv: properties and accuracies differ in length");
  std::ofstream out = open_out(path);
  out << "sentence_id,phoneme_seq_len,w_score_with_sil,w_score_without_sil,accuracy_pct\n";
  for (size_t i = 0; i < props.size(); ++i) {
    out << props[i].sentence_id << ',' << props[i].phoneme_seq_len << ','
        << kvcfg::fmt_double(props[i].w_score_with_sil) << ','
        << kvcfg::fmt_double(props[i].w_score_without_sil) << ','
        << kvcfg::fmt_double(accuracies[i]) << '\n';
  }
  out.flush();
  if (!out) fail("failed writing '" + path + "'");
}

void write_scatter_svg(const std::string& path, const std::vector<double>& xs,
                       const std::vector<double>& ys, const std::string& x_label,
                       const std::string& y_label, double pcc) {
  require(xs.size() == ys.size(), "write_scatter_svg: x and y differ in length");
  require(!xs.empty(), "write_scatter_svg: no points");
  const int width = 480, height = 360, ml = 64, mr = 20, mt = 28, mb = 52;
  const double plot_w = width - ml - mr, plot_h = height - mt - mb;

  double xlo = *std::min_element(xs.begin(), xs.end());
  double xhi = *std::max_element(xs.begin(), xs.end());
  double ylo = *std::min_element(ys.begin(), ys.end());
  double yhi = *std::max_element(ys.begin(), ys.end());
  if (xhi == xlo) { xlo -= 1.0; xhi += 1.0; }
  if (yhi == ylo) { ylo -= 1.0; yhi += 1.0; }
  const auto px = [&](double x) { return ml + (x - xlo) / (xhi - xlo) * plot_w; };
  const auto py = [&](double y) { return mt + plot_h - (y - ylo) / (yhi - ylo) * plot_h; };

  std::ofstream out = open_out(path);
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
      << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  out << "<rect width=\"" << width << "\" height=\"" << height << "\" fill=\"white\"/>\n";
  out << "<line x1=\"" << ml << "\" y1=\"" << mt + plot_h << "\" x2=\"" << ml + plot_w
      << "\" y2=\"" << mt + plot_h << "\" stroke=\"black\"/>\n";
  out << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\"" << mt + plot_h
      << "\" stroke=\"black\"/>\n";
  for (int tick = 0; tick <= 4; ++tick) {
    const double fx = xlo + (xhi - xlo) * tick / 4.0;
    const double fy = ylo + (yhi - ylo) * tick / 4.0;
    out << "<line x1=\"" << px(fx) << "\" y1=\"" << mt + plot_h << "\" x2=\"" << px(fx)
        << "\" y2=\"" << mt + plot_h + 4 << "\" stroke=\"black\"/>\n";
    out << "<text x=\"" << px(fx) << "\" y=\"" << mt + plot_h + 16
        << "\" text-anchor=\"middle\">" << kvcfg::fmt_double(fx) << "</text>\n";
    out << "<line x1=\"" << ml - 4 << "\" y1=\"" << py(fy) << "\" x2=\"" << ml << "\" y2=\""
        << py(fy) << "\" stroke=\"black\"/>\n";
    out << "<text x=\"" << ml - 6 << "\" y=\"" << py(fy) + 4 << "\" text-anchor=\"end\">"
        << kvcfg::fmt_double(fy) << "</text>\n";
  }
  out << "<text x=\"" << ml + plot_w / 2 << "\" y=\"" << height - 12
      << "\" text-anchor=\"middle\" class=\"x-label\">" << x_label << "</text>\n";
  out << "<text x=\"14\" y=\"" << mt + plot_h / 2
      << "\" text-anchor=\"middle\" class=\"y-label\" transform=\"rotate(-90 14 "
      << mt + plot_h / 2 << ")\">" << y_label << "</text>\n";
  out << "<text x=\"" << width - mr << "\" y=\"" << mt - 8
      << "\" text-anchor=\"end\" class=\"pcc\">PCC = " << kvcfg::fmt_double(pcc) << "</text>\n";
  for (size_t i = 0; i < xs.size(); ++i)
    out << "<circle class=\"point\" cx=\"" << px(xs[i]) << "\" cy=\"" << py(ys[i])
        << "\" r=\"3\" fill=\"steelblue\" fill-opacity=\"0.7\"/>\n";
  out << "</svg>\n";
  out.flush();
  if (!out) fail("failed writing '" + path + "'");
}

void write_band_table_csv(const std::string& path, const std::vector<BandAblationRow>& rows) {
  std::ofstream out = open_out(path);
  out << "band,phoneme_accuracy_pct,rmse,mcd,best_val_loss,epochs_run\n";
  for (const BandAblationRow& row : rows) {
    out << row.band << ',' << kvcfg::fmt_double(row.report.aggregate.accuracy_pct) << ','
        << kvcfg::fmt_double(row.report.aggregate.rmse) << ','
        << kvcfg::fmt_double(row.report.aggregate.mcd) << ','
        << kvcfg::fmt_double(row.best_val_loss) << ',' << row.epochs_run << '\n';
  }
  out.flush();
  if (!out) fail("failed writing '" + path + "'");
}

}  // namespace bts::analysis
