#include "bts/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "bts/ops.hpp"

namespace bts::losses {
namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();
constexpr double kLogFloor = -27.631021115928547;  // log(1e-12)

double lse2(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double m = std::max(a, b);
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

std::vector<double> ones_if_empty(const std::vector<double>& w, size_t n, const char* op) {
  if (w.empty()) return std::vector<double>(n, 1.0);
  require(w.size() == n, std::string(op) + ": weight count " + std::to_string(w.size()) +
                             " != frame count " + std::to_string(n));
  for (double v : w) {
    require(v >= 0.0, std::string(op) + ": negative frame weight");
  }
  return w;
}

}  // namespace

BlankPolicy parse_blank_policy(const std::string& name) {
  if (name == "reuse_sil") return BlankPolicy::reuse_sil;
  if (name == "extra_blank") return BlankPolicy::extra_blank;
  throw std::invalid_argument("unknown CTC blank policy '" + name +
                              "' (expected reuse_sil or extra_blank)");
}

std::string blank_policy_name(BlankPolicy policy) {
  return policy == BlankPolicy::reuse_sil ? "reuse_sil" : "extra_blank";
}

std::vector<std::pair<int, int>> dtw_path(const Matrix& cost) {
  require(cost.rows > 0 && cost.cols > 0, "dtw_path: empty cost matrix");
  const int64_t r = cost.rows, c = cost.cols;
  Matrix g(r, c);
  for (int64_t i = 0; i < r; ++i) {
    for (int64_t j = 0; j < c; ++j) {
      double best;
      if (i == 0 && j == 0) {
        best = 0.0;
      } else if (i == 0) {
        best = g.at(0, j - 1);
      } else if (j == 0) {
        best = g.at(i - 1, 0);
      } else {
        best = std::min({g.at(i - 1, j - 1), g.at(i - 1, j), g.at(i, j - 1)});
      }
      g.at(i, j) = cost.at(i, j) + best;
    }
  }
  std::vector<std::pair<int, int>> rev;
  int64_t i = r - 1, j = c - 1;
  rev.emplace_back(static_cast<int>(i), static_cast<int>(j));
  while (i > 0 || j > 0) {
    if (i == 0) {
      --j;
    } else if (j == 0) {
      --i;
    } else {
      const double d = g.at(i - 1, j - 1), v = g.at(i - 1, j), h = g.at(i, j - 1);
      if (d <= v && d <= h) {
        --i;
        --j;
      } else if (v <= h) {
        --i;
      } else {
        --j;
      }
    }
    rev.emplace_back(static_cast<int>(i), static_cast<int>(j));
  }
  std::reverse(rev.begin(), rev.end());
  return rev;
}

double dtw_path_cost(const Matrix& cost, const std::vector<std::pair<int, int>>& path) {
  double s = 0.0;
  for (auto [i, j] : path) s += cost.at(i, j);
  return s;
}

std::vector<int> dtw_align_first(const std::vector<std::pair<int, int>>& path, int t_pred) {
  std::vector<int> align(static_cast<size_t>(t_pred), -1);
  for (auto [i, j] : path) {
    require(i >= 0 && i < t_pred, "dtw_align_first: path row out of range");
    if (align[static_cast<size_t>(i)] < 0) align[static_cast<size_t>(i)] = j;
  }
  for (int i = 0; i < t_pred; ++i) {
    require(align[static_cast<size_t>(i)] >= 0,
            "dtw_align_first: path skips prediction row " + std::to_string(i));
  }
  return align;
}

ad::Tensor audio_loss(const ad::Tensor& pred, const Matrix& target,
                      const std::vector<double>& frame_weights) {
  require(pred.ndim() == 2, "audio_loss: prediction must be (T, D)");
  const int64_t t = pred.dim(0), d = pred.dim(1);
  require(t == target.rows && d == target.cols,
          "audio_loss: prediction " + std::to_string(t) + "x" + std::to_string(d) +
              " vs target " + std::to_string(target.rows) + "x" + std::to_string(target.cols));
  const std::vector<double> w = ones_if_empty(frame_weights, static_cast<size_t>(t), "audio_loss");
  double wsum = 0.0;
  for (double v : w) wsum += v;
  require(wsum > 0.0, "audio_loss: all frame weights are zero");

  // Per-frame Euclidean norms and the weighted-mean loss.
  const float* p = pred.data();
  std::vector<double> norms(static_cast<size_t>(t), 0.0);
  double loss = 0.0;
  for (int64_t i = 0; i < t; ++i) {
    double acc = 0.0;
    for (int64_t k = 0; k < d; ++k) {
      const double diff = static_cast<double>(p[i * d + k]) - target.at(i, k);
      acc += diff * diff;
    }
    norms[static_cast<size_t>(i)] = std::sqrt(acc);
    loss += w[static_cast<size_t>(i)] * norms[static_cast<size_t>(i)];
  }
  loss /= wsum;

  ad::Tape* tp = pred.tracked() ? pred.tape() : nullptr;
  std::vector<float> out{static_cast<float>(loss)};
  if (!tp) return ad::Tensor(ad::Shape{1}, std::move(out));

  // d loss / d pred_ik = w_i * (pred_ik - target_ik) / (norm_i * wsum);
  // zero-distance frames get the zero subgradient.
  std::vector<float> grad(static_cast<size_t>(t * d), 0.0f);
  for (int64_t i = 0; i < t; ++i) {
    const double n = norms[static_cast<size_t>(i)];
    if (n == 0.0 || w[static_cast<size_t>(i)] == 0.0) continue;
    const double scale = w[static_cast<size_t>(i)] / (n * wsum);
    for (int64_t k = 0; k < d; ++k) {
      grad[static_cast<size_t>(i * d + k)] =
          static_cast<float>(scale * (static_cast<double>(p[i * d + k]) - target.at(i, k)));
    }
  }
  return tp->record(ad::Shape{1}, std::move(out), {&pred},
                    [grad = std::move(grad)](const float* dy, const std::vector<float*>& dp) {
                      if (!dp[0]) return;
                      for (size_t i = 0; i < grad.size(); ++i) dp[0][i] += dy[0] * grad[i];
                    });
}

ad::Tensor phoneme_ce(const ad::Tensor& logprobs, const std::vector<int>& frame_targets,
                      const std::vector<double>& frame_weights) {
  require(logprobs.ndim() == 2, "phoneme_ce: logprobs must be (T, K)");
  const int64_t t = logprobs.dim(0), k = logprobs.dim(1);
  require(static_cast<int64_t>(frame_targets.size()) == t,
          "phoneme_ce: " + std::to_string(frame_targets.size()) + " targets for " +
              std::to_string(t) + " frames");
  for (int idx : frame_targets) {
    require(idx >= 0 && idx < k,
            "phoneme_ce: target class " + std::to_string(idx) + " outside [0, " +
                std::to_string(k) + ")");
  }
  const std::vector<double> w =
      ones_if_empty(frame_weights, static_cast<size_t>(t), "phoneme_ce");
  double wsum = 0.0;
  for (double v : w) wsum += v;
  require(wsum > 0.0, "phoneme_ce: all frame weights are zero");

  ad::Tensor picks = ad::take_per_row(logprobs, frame_targets);  // (T,)
  std::vector<float> wf(w.begin(), w.end());
  ad::Tensor weights(ad::Shape{static_cast<int>(t)}, std::move(wf));
  ad::Tensor weighted = ad::mul(picks, weights);
  return ad::scale(ad::sum(weighted), static_cast<float>(-1.0 / wsum));
}

int ctc_min_frames(const std::vector<int>& labels) {
  int extra = 0;
  for (size_t i = 1; i < labels.size(); ++i) {
    if (labels[i] == labels[i - 1]) ++extra;
  }
  return static_cast<int>(labels.size()) + extra;
}

std::vector<int> ctc_labels(const std::vector<int>& frame_labels, BlankPolicy policy,
                            const phoneme::PhonemeInventory& inv) {
  std::vector<int> seq = phoneme::collapse(frame_labels);
  if (policy == BlankPolicy::reuse_sil) {
    seq.erase(std::remove(seq.begin(), seq.end(), inv.sil_index()), seq.end());
  }
  return seq;
}

int ctc_blank_index(BlankPolicy policy, const phoneme::PhonemeInventory& inv) {
  return policy == BlankPolicy::reuse_sil ? inv.sil_index() : inv.size();
}

ad::Tensor ctc_loss(const ad::Tensor& logprobs, const std::vector<int>& labels, int blank) {
  require(logprobs.ndim() == 2, "ctc_loss: logprobs must be (T, K)");
  const int64_t t_len = logprobs.dim(0), k = logprobs.dim(1);
  require(blank >= 0 && blank < k,
          "ctc_loss: blank index " + std::to_string(blank) + " outside [0, " +
              std::to_string(k) + ")");
  for (int lab : labels) {
    require(lab >= 0 && lab < k,
            "ctc_loss: label " + std::to_string(lab) + " outside [0, " + std::to_string(k) + ")");
    require(lab != blank, "ctc_loss: labels must not contain the blank symbol");
  }
  const int min_t = ctc_min_frames(labels);
  require(t_len >= min_t, "ctc_loss: label sequence needs at least " + std::to_string(min_t) +
                              " frames but only " + std::to_string(t_len) + " are available");

  // Extended label sequence: blank, l1, blank, l2, ..., lL, blank.
  const int l = static_cast<int>(labels.size());
  const int s_len = 2 * l + 1;
  std::vector<int> ext(static_cast<size_t>(s_len), blank);
  for (int i = 0; i < l; ++i) ext[static_cast<size_t>(2 * i + 1)] = labels[static_cast<size_t>(i)];

  const float* lpf = logprobs.data();
  auto lp = [&](int64_t t, int s) {
    return static_cast<double>(lpf[t * k + ext[static_cast<size_t>(s)]]);
  };
  auto skip_allowed = [&](int s) {
    return s >= 2 && ext[static_cast<size_t>(s)] != blank &&
           ext[static_cast<size_t>(s)] != ext[static_cast<size_t>(s - 2)];
  };

  // Forward scores: alpha(t, s) = log P(prefix paths reaching state s at t).
  std::vector<double> alpha(static_cast<size_t>(t_len) * s_len, kNegInf);
  auto a = [&](int64_t t, int s) -> double& { return alpha[static_cast<size_t>(t * s_len + s)]; };
  a(0, 0) = lp(0, 0);
  if (s_len > 1) a(0, 1) = lp(0, 1);
  for (int64_t t = 1; t < t_len; ++t) {
    for (int s = 0; s < s_len; ++s) {
      double acc = a(t - 1, s);
      if (s >= 1) acc = lse2(acc, a(t - 1, s - 1));
      if (skip_allowed(s)) acc = lse2(acc, a(t - 1, s - 2));
      if (acc != kNegInf) a(t, s) = acc + lp(t, s);
    }
  }
  double log_p = a(t_len - 1, s_len - 1);
  if (s_len > 1) log_p = lse2(log_p, a(t_len - 1, s_len - 2));
  require(log_p != kNegInf, "ctc_loss: no feasible alignment");
  const double loss = -log_p;

  ad::Tape* tp = logprobs.tracked() ? logprobs.tape() : nullptr;
  std::vector<float> out{static_cast<float>(loss)};
  if (!tp) return ad::Tensor(ad::Shape{1}, std::move(out));

  // Backward scores: beta(t, s) = log P(suffix from state s after emitting at
  // t), excluding the emission at t itself, so alpha + beta always accounts
  // each emission exactly once.
  std::vector<double> beta(static_cast<size_t>(t_len) * s_len, kNegInf);
  auto b = [&](int64_t t, int s) -> double& { return beta[static_cast<size_t>(t * s_len + s)]; };
  b(t_len - 1, s_len - 1) = 0.0;
  if (s_len > 1) b(t_len - 1, s_len - 2) = 0.0;
  for (int64_t t = t_len - 2; t >= 0; --t) {
    for (int s = 0; s < s_len; ++s) {
      double acc = b(t + 1, s) == kNegInf ? kNegInf : b(t + 1, s) + lp(t + 1, s);
      if (s + 1 < s_len && b(t + 1, s + 1) != kNegInf) {
        acc = lse2(acc, b(t + 1, s + 1) + lp(t + 1, s + 1));
      }
      if (s + 2 < s_len && skip_allowed(s + 2) && b(t + 1, s + 2) != kNegInf) {
        acc = lse2(acc, b(t + 1, s + 2) + lp(t + 1, s + 2));
      }
      b(t, s) = acc;
    }
  }

  // d loss / d logprob(t, c) = -exp(lse_{s: ext_s = c}(alpha + beta) - log_p).
  std::vector<float> grad(static_cast<size_t>(t_len * k), 0.0f);
  std::vector<double> by_class(static_cast<size_t>(k));
  for (int64_t t = 0; t < t_len; ++t) {
    std::fill(by_class.begin(), by_class.end(), kNegInf);
    for (int s = 0; s < s_len; ++s) {
      if (a(t, s) == kNegInf || b(t, s) == kNegInf) continue;
      double& slot = by_class[static_cast<size_t>(ext[static_cast<size_t>(s)])];
      slot = lse2(slot, a(t, s) + b(t, s));
    }
    for (int64_t c = 0; c < k; ++c) {
      if (by_class[static_cast<size_t>(c)] != kNegInf) {
        grad[static_cast<size_t>(t * k + c)] =
            static_cast<float>(-std::exp(by_class[static_cast<size_t>(c)] - log_p));
      }
    }
  }
  return tp->record(ad::Shape{1}, std::move(out), {&logprobs},
                    [grad = std::move(grad)](const float* dy, const std::vector<float*>& dp) {
                      if (!dp[0]) return;
                      for (size_t i = 0; i < grad.size(); ++i) dp[0][i] += dy[0] * grad[i];
                    });
}

std::pair<ad::Tensor, DtwAlignment> dtw_loss(const ad::Tensor& pred_mfcc,
                                             const ad::Tensor& pred_logprobs,
                                             const Matrix& gt_mfcc,
                                             const std::vector<int>& gt_labels, float beta) {
  require(pred_mfcc.ndim() == 2 && pred_logprobs.ndim() == 2,
          "dtw_loss: predictions must be 2-D");
  const int64_t tp_len = pred_mfcc.dim(0), d = pred_mfcc.dim(1);
  const int64_t k = pred_logprobs.dim(1);
  require(pred_logprobs.dim(0) == tp_len,
          "dtw_loss: mfcc has " + std::to_string(tp_len) + " frames but logprobs has " +
              std::to_string(pred_logprobs.dim(0)));
  const int64_t tg_len = gt_mfcc.rows;
  require(tg_len > 0 && tp_len > 0, "dtw_loss: empty sequence");
  require(gt_mfcc.cols == d, "dtw_loss: feature dims differ (" + std::to_string(d) + " vs " +
                                 std::to_string(gt_mfcc.cols) + ")");
  require(static_cast<int64_t>(gt_labels.size()) == tg_len,
          "dtw_loss: " + std::to_string(gt_labels.size()) + " labels for " +
              std::to_string(tg_len) + " reference frames");
  for (int lab : gt_labels) {
    require(lab >= 0 && lab < k, "dtw_loss: label " + std::to_string(lab) + " outside [0, " +
                                     std::to_string(k) + ")");
  }
  require(beta >= 0.0f, "dtw_loss: beta must be non-negative");

  DtwAlignment out;
  out.t_pred = static_cast<int>(tp_len);
  out.dist = Matrix(tp_len, tg_len);
  out.cost = Matrix(tp_len, tg_len);
  const float* pm = pred_mfcc.data();
  const float* pl = pred_logprobs.data();
  for (int64_t i = 0; i < tp_len; ++i) {
    for (int64_t j = 0; j < tg_len; ++j) {
      double acc = 0.0;
      for (int64_t f = 0; f < d; ++f) {
        const double diff = static_cast<double>(pm[i * d + f]) - gt_mfcc.at(j, f);
        acc += diff * diff;
      }
      const double dist = std::sqrt(acc);
      // -log p, clamped so a vanishing class probability cannot blow up the
      // cost (equivalent to flooring p at 1e-12).
      const double neg_lp =
          std::min(-static_cast<double>(pl[i * k + gt_labels[static_cast<size_t>(j)]]),
                   -kLogFloor);
      out.dist.at(i, j) = dist;
      out.cost.at(i, j) = dist + static_cast<double>(beta) * neg_lp;
    }
  }
  out.path = dtw_path(out.cost);
  out.align = dtw_align_first(out.path, out.t_pred);

  double loss = 0.0;
  for (int64_t i = 0; i < tp_len; ++i) loss += out.cost.at(i, out.align[static_cast<size_t>(i)]);
  loss /= static_cast<double>(tp_len);

  ad::Tape* tape = nullptr;
  if (pred_mfcc.tracked()) tape = pred_mfcc.tape();
  if (pred_logprobs.tracked()) {
    require(!tape || tape == pred_logprobs.tape(), "dtw_loss: inputs on different tapes");
    tape = pred_logprobs.tape();
  }
  std::vector<float> val{static_cast<float>(loss)};
  if (!tape) return {ad::Tensor(ad::Shape{1}, std::move(val)), std::move(out)};

  // Gradients through the selected cells only.
  std::vector<float> gm(static_cast<size_t>(tp_len * d), 0.0f);
  std::vector<float> gl(static_cast<size_t>(tp_len * k), 0.0f);
  for (int64_t i = 0; i < tp_len; ++i) {
    const int j = out.align[static_cast<size_t>(i)];
    const double dist = out.dist.at(i, j);
    if (dist > 0.0) {
      const double scale = 1.0 / (dist * tp_len);
      for (int64_t f = 0; f < d; ++f) {
        gm[static_cast<size_t>(i * d + f)] = static_cast<float>(
            scale * (static_cast<double>(pm[i * d + f]) - gt_mfcc.at(j, f)));
      }
    }
    const int lab = gt_labels[static_cast<size_t>(j)];
    const double neg_lp = -static_cast<double>(pl[i * k + lab]);
    if (neg_lp < -kLogFloor) {  // floor not binding: d cost / d lp = -beta
      gl[static_cast<size_t>(i * k + lab)] =
          static_cast<float>(-static_cast<double>(beta) / tp_len);
    }
  }
  ad::Tensor scalar = tape->record(
      ad::Shape{1}, std::move(val), {&pred_mfcc, &pred_logprobs},
      [gm = std::move(gm), gl = std::move(gl)](const float* dy, const std::vector<float*>& dp) {
        if (dp[0]) {
          for (size_t i = 0; i < gm.size(); ++i) dp[0][i] += dy[0] * gm[i];
        }
        if (dp[1]) {
          for (size_t i = 0; i < gl.size(); ++i) dp[1][i] += dy[0] * gl[i];
        }
      });
  return {std::move(scalar), std::move(out)};
}

namespace {

ad::Tensor mean_of(std::vector<ad::Tensor>& terms) {
  ad::Tensor acc = terms[0];
  for (size_t i = 1; i < terms.size(); ++i) acc = ad::add(acc, terms[i]);
  return ad::scale(acc, 1.0f / static_cast<float>(terms.size()));
}

void check_batch(const std::vector<TrialOutputs>& outputs,
                 const std::vector<TrialTargets>& targets, const char* op) {
  require(!outputs.empty(), std::string(op) + ": empty batch");
  require(outputs.size() == targets.size(),
          std::string(op) + ": " + std::to_string(outputs.size()) + " outputs vs " +
              std::to_string(targets.size()) + " targets");
}

}  // namespace

LossBreakdown overt_loss(const std::vector<TrialOutputs>& outputs,
                         const std::vector<TrialTargets>& targets, const LossConfig& config,
                         const phoneme::PhonemeInventory& inv) {
  check_batch(outputs, targets, "overt_loss");
  const int blank = ctc_blank_index(config.ctc_blank_policy, inv);
  std::vector<ad::Tensor> audio_terms, ce_terms, ctc_terms;
  for (size_t n = 0; n < outputs.size(); ++n) {
    const auto& o = outputs[n];
    const auto& t = targets[n];
    require(o.mfcc.dim(0) == t.mfcc.rows,
            "overt_loss: trial " + std::to_string(n) + " has " + std::to_string(o.mfcc.dim(0)) +
                " predicted frames but " + std::to_string(t.mfcc.rows) + " target frames");
    audio_terms.push_back(audio_loss(o.mfcc, t.mfcc, t.frame_weights));
    ce_terms.push_back(phoneme_ce(o.logprobs, t.frame_labels, t.frame_weights));
    ctc_terms.push_back(
        ctc_loss(o.logprobs, ctc_labels(t.frame_labels, config.ctc_blank_policy, inv), blank));
  }
  ad::Tensor audio = mean_of(audio_terms);
  ad::Tensor ce = mean_of(ce_terms);
  ad::Tensor ctc = mean_of(ctc_terms);
  LossBreakdown out;
  out.audio = audio.item();
  out.phoneme = ce.item();
  out.ctc = ctc.item();
  out.total = ad::add(ad::scale(audio, config.alpha), ad::add(ce, ctc));
  return out;
}

LossBreakdown silent_loss(const std::vector<TrialOutputs>& outputs,
                          const std::vector<TrialTargets>& targets, const LossConfig& config,
                          const phoneme::PhonemeInventory& inv) {
  check_batch(outputs, targets, "silent_loss");
  const int blank = ctc_blank_index(config.ctc_blank_policy, inv);
  std::vector<ad::Tensor> dtw_terms, ctc_terms;
  for (size_t n = 0; n < outputs.size(); ++n) {
    const auto& o = outputs[n];
    const auto& t = targets[n];
    auto [term, alignment] =
        dtw_loss(o.mfcc, o.logprobs, t.mfcc, t.frame_labels, config.beta);
    (void)alignment;
    dtw_terms.push_back(std::move(term));
    ctc_terms.push_back(
        ctc_loss(o.logprobs, ctc_labels(t.frame_labels, config.ctc_blank_policy, inv), blank));
  }
  ad::Tensor dtw = mean_of(dtw_terms);
  ad::Tensor ctc = mean_of(ctc_terms);
  LossBreakdown out;
  out.dtw = dtw.item();
  out.ctc = ctc.item();
  out.total = ad::add(ad::scale(dtw, config.alpha), ctc);
  return out;
}

}  // namespace bts::losses
