#include "bts/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "bts/kvconfig.hpp"
#include "bts/ops.hpp"
#include "bts/phoneme.hpp"
#include "bts/rng.hpp"

namespace bts::trainer {

// ---------------- concatenation batching ----------------

std::pair<ad::Tensor, BatchLayout> make_batch(const std::vector<const Matrix*>& trials,
                                              int64_t row_len) {
  require(!trials.empty(), "make_batch: need at least one trial");
  require(row_len >= 8 && row_len % 8 == 0,
          "make_batch: row length must be a positive multiple of 8, got " +
              std::to_string(row_len));
  const int64_t channels = trials[0]->cols;
  require(channels >= 1, "make_batch: trials have no channels");
  int64_t n_samples = 0;
  for (size_t i = 0; i < trials.size(); ++i) {
    const Matrix& m = *trials[i];
    require(m.cols == channels, "make_batch: mixed channel counts (trial 0 has " +
                                    std::to_string(channels) + ", trial " + std::to_string(i) +
                                    " has " + std::to_string(m.cols) + ")");
    require(m.rows >= 1, "make_batch: trial " + std::to_string(i) + " has no samples");
    n_samples += m.rows;
  }
  const int64_t rows = (n_samples + row_len - 1) / row_len;

  BatchLayout layout;
  layout.row_len = row_len;
  layout.n_samples = n_samples;
  layout.channels = static_cast<int>(channels);
  layout.rows = static_cast<int>(rows);
  layout.pad_len = rows * row_len - n_samples;

  ad::Tensor x(ad::Shape{static_cast<int>(rows), static_cast<int>(channels),
                         static_cast<int>(row_len)},
               0.0f);
  float* xd = x.data();
  int64_t offset = 0;
  for (size_t i = 0; i < trials.size(); ++i) {
    const Matrix& m = *trials[i];
    layout.spans.push_back({static_cast<int>(i), offset, offset + m.rows});
    for (int64_t r = 0; r < m.rows; ++r) {
      const int64_t g = offset + r;
      const int64_t b = g / row_len;
      const int64_t t = g % row_len;
      const double* src = m.row(r);
      for (int64_t c = 0; c < channels; ++c)
        xd[(b * channels + c) * row_len + t] = static_cast<float>(src[c]);
    }
    offset += m.rows;
  }
  return {x, layout};
}

std::vector<ad::Tensor> unbatch(const ad::Tensor& outputs, const BatchLayout& layout) {
  require(outputs.ndim() == 3, "unbatch: expected (rows, frames, dim) outputs, got " +
                                   ad::shape_str(outputs.shape()));
  require(outputs.dim(0) == layout.rows,
          "unbatch: outputs have " + std::to_string(outputs.dim(0)) + " rows but the layout has " +
              std::to_string(layout.rows));
  require(static_cast<int64_t>(outputs.dim(1)) * 8 == layout.row_len,
          "unbatch: outputs have " + std::to_string(outputs.dim(1)) +
              " frames per row; a row of " + std::to_string(layout.row_len) +
              " samples downsampled by 8 should give " + std::to_string(layout.row_len / 8));
  const int dim = outputs.dim(2);
  const int total_frames = layout.rows * static_cast<int>(layout.row_len / 8);
  ad::Tensor flat = ad::reshape(outputs, {total_frames, dim});
  std::vector<ad::Tensor> out;
  out.reserve(layout.spans.size());
  for (const TrialSpan& s : layout.spans) {
    const int64_t len = s.end - s.start;
    require(len > 0 && len % 8 == 0 && s.start % 8 == 0,
            "unbatch: trial " + std::to_string(s.trial) + " covers samples [" +
                std::to_string(s.start) + ", " + std::to_string(s.end) +
                "), not 8-aligned; trim trials to multiples of 8 before batching");
    require(s.end <= layout.n_samples,
            "unbatch: trial " + std::to_string(s.trial) + " ends at sample " +
                std::to_string(s.end) + ", past the layout's " +
                std::to_string(layout.n_samples));
    out.push_back(ad::slice(flat, 0, static_cast<int>(s.start / 8), static_cast<int>(len / 8)));
  }
  return out;
}

std::vector<std::vector<int>> group_trials(const std::vector<int64_t>& lengths,
                                           int64_t target_samples) {
  require(target_samples >= 1,
          "group_trials: target must be >= 1, got " + std::to_string(target_samples));
  std::vector<std::vector<int>> groups;
  std::vector<int> cur;
  int64_t cur_sum = 0;
  for (int i = 0; i < static_cast<int>(lengths.size()); ++i) {
    require(lengths[i] >= 1, "group_trials: trial " + std::to_string(i) + " has no samples");
    if (!cur.empty() && cur_sum + lengths[i] > target_samples) {
      groups.push_back(std::move(cur));
      cur.clear();
      cur_sum = 0;
    }
    cur.push_back(i);
    cur_sum += lengths[i];
  }
  if (!cur.empty()) groups.push_back(std::move(cur));
  return groups;
}

// ---------------- configuration ----------------

Mode parse_mode(const std::string& name) {
  if (name == "overt") return Mode::overt;
  if (name == "whispered") return Mode::whispered;
  if (name == "imagined") return Mode::imagined;
  throw std::invalid_argument("unknown mode '" + name +
                              "' (expected overt, whispered or imagined)");
}

std::string mode_name(Mode mode) {
  switch (mode) {
    case Mode::overt: return "overt";
    case Mode::whispered: return "whispered";
    case Mode::imagined: return "imagined";
  }
  throw std::invalid_argument("invalid mode value");
}

Modality parse_modality(const std::string& name) {
  if (name == "eeg") return Modality::eeg;
  if (name == "eeg+emg") return Modality::eeg_emg;
  throw std::invalid_argument("unknown modality '" + name + "' (expected eeg or eeg+emg)");
}

std::string modality_name(Modality modality) {
  switch (modality) {
    case Modality::eeg: return "eeg";
    case Modality::eeg_emg: return "eeg+emg";
  }
  throw std::invalid_argument("invalid modality value");
}

void TrainConfig::validate() const {
  require(lr > 0.0, "lr must be > 0, got " + kvcfg::fmt_double(lr));
  require(lr_min >= 0.0, "lr_min must be >= 0, got " + kvcfg::fmt_double(lr_min));
  require(lr_min < lr, "lr_min (" + kvcfg::fmt_double(lr_min) + ") must be below lr (" +
                           kvcfg::fmt_double(lr) + ")");
  require(t_max >= 1, "t_max must be >= 1, got " + std::to_string(t_max));
  require(weight_decay >= 0.0,
          "weight_decay must be >= 0, got " + kvcfg::fmt_double(weight_decay));
  require(max_epochs >= 1, "max_epochs must be >= 1, got " + std::to_string(max_epochs));
  require(early_stop_patience >= 1,
          "early_stop_patience must be >= 1, got " + std::to_string(early_stop_patience));
  require(val_fraction > 0.0 && val_fraction < 1.0,
          "val_fraction must be in (0, 1), got " + kvcfg::fmt_double(val_fraction));
  require(batch_rows >= 1, "batch_rows must be >= 1, got " + std::to_string(batch_rows));
  require(batch_len >= 8 && batch_len % 8 == 0,
          "batch_len must be a positive multiple of 8, got " + std::to_string(batch_len));
  require(loss.alpha >= 0.0f, "loss alpha must be >= 0");
  require(loss.beta >= 0.0f, "loss beta must be >= 0");
}

std::string TrainConfig::to_text() const {
  std::ostringstream os;
  os << "lr=" << kvcfg::fmt_double(lr) << " lr_min=" << kvcfg::fmt_double(lr_min)
     << " t_max=" << t_max << " weight_decay=" << kvcfg::fmt_double(weight_decay)
     << " max_epochs=" << max_epochs << " early_stop_patience=" << early_stop_patience
     << " val_fraction=" << kvcfg::fmt_double(val_fraction) << " seed=" << seed
     << " mode=" << mode_name(mode) << " modality=" << modality_name(modality)
     << " batch_rows=" << batch_rows << " batch_len=" << batch_len
     << " alpha=" << kvcfg::fmt_double(loss.alpha) << " beta=" << kvcfg::fmt_double(loss.beta)
     << " ctc_blank_policy=" << losses::blank_policy_name(loss.ctc_blank_policy);
  return os.str();
}

TrainConfig TrainConfig::from_text(const std::string& text) {
  TrainConfig cfg;
  kvcfg::for_each_entry(text, [&](const std::string& key, const std::string& val) {
    if (key == "lr") cfg.lr = kvcfg::parse_double(key, val);
    else if (key == "lr_min") cfg.lr_min = kvcfg::parse_double(key, val);
    else if (key == "t_max") cfg.t_max = kvcfg::parse_int(key, val);
    else if (key == "weight_decay") cfg.weight_decay = kvcfg::parse_double(key, val);
    else if (key == "max_epochs") cfg.max_epochs = kvcfg::parse_int(key, val);
    else if (key == "early_stop_patience") cfg.early_stop_patience = kvcfg::parse_int(key, val);
    else if (key == "val_fraction") cfg.val_fraction = kvcfg::parse_double(key, val);
    else if (key == "seed") cfg.seed = kvcfg::parse_u64(key, val);
    else if (key == "mode") cfg.mode = parse_mode(val);
    else if (key == "modality") cfg.modality = parse_modality(val);
    else if (key == "batch_rows") cfg.batch_rows = kvcfg::parse_int(key, val);
    else if (key == "batch_len") cfg.batch_len = kvcfg::parse_int(key, val);
    else if (key == "alpha") cfg.loss.alpha = static_cast<float>(kvcfg::parse_double(key, val));
    else if (key == "beta") cfg.loss.beta = static_cast<float>(kvcfg::parse_double(key, val));
    else if (key == "ctc_blank_policy") cfg.loss.ctc_blank_policy = losses::parse_blank_policy(val);
    else throw std::invalid_argument("unknown config key '" + key + "'");
  });
  cfg.validate();
  return cfg;
}

double cosine_lr(int epoch, const TrainConfig& config) {
  config.validate();
  require(epoch >= 0 && epoch <= config.t_max,
          "cosine_lr: epoch must be in [0, " + std::to_string(config.t_max) + "], got " +
              std::to_string(epoch));
  const double phase = std::numbers::pi * static_cast<double>(epoch) /
                       static_cast<double>(config.t_max);
  return config.lr_min + 0.5 * (config.lr - config.lr_min) * (1.0 + std::cos(phase));
}

// ---------------- AdamW ----------------

AdamWState init_adamw(const model::Parameters& params) {
  AdamWState state;
  state.m.resize(params.size());
  state.v.resize(params.size());
  for (size_t i = 0; i < params.size(); ++i) {
    const size_t n = static_cast<size_t>(params.values[i].numel());
    state.m[i].assign(n, 0.0);
    state.v[i].assign(n, 0.0);
  }
  return state;
}

void adamw_step(model::Parameters& params, const std::vector<ad::Tensor>& grads,
                AdamWState& state, double lr, double weight_decay) {
  require(grads.size() == params.size(), "adamw_step: " + std::to_string(params.size()) +
                                             " parameters but " + std::to_string(grads.size()) +
                                             " gradients");
  require(state.m.size() == params.size() && state.v.size() == params.size(),
          "adamw_step: optimizer state does not match the parameter list");
  require(lr >= 0.0 && weight_decay >= 0.0,
          "adamw_step: lr and weight_decay must be non-negative");
  // Validate every gradient before touching any parameter, so a bad batch
  // cannot leave the model half-stepped.
  for (size_t i = 0; i < params.size(); ++i) {
    const ad::Tensor& g = grads[i];
    require(g.defined() && g.numel() == params.values[i].numel(),
            "adamw_step: gradient for '" + params.names[i] + "' has the wrong size");
    const float* gd = g.data();
    const int64_t n = g.numel();
    for (int64_t j = 0; j < n; ++j) {
      if (!std::isfinite(gd[j]))
        fail("adamw_step: non-finite gradient in '" + params.names[i] + "' (element " +
             std::to_string(j) + ")");
    }
  }
  state.steps += 1;
  const double bias1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(state.steps));
  const double bias2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(state.steps));
  for (size_t i = 0; i < params.size(); ++i) {
    float* pd = params.values[i].data();
    const float* gd = grads[i].data();
    std::vector<double>& m = state.m[i];
    std::vector<double>& v = state.v[i];
    const int64_t n = params.values[i].numel();
    for (int64_t j = 0; j < n; ++j) {
      const double g = gd[j];
      m[j] = kAdamBeta1 * m[j] + (1.0 - kAdamBeta1) * g;
      v[j] = kAdamBeta2 * v[j] + (1.0 - kAdamBeta2) * g * g;
      const double m_hat = m[j] / bias1;
      const double v_hat = v[j] / bias2;
      const double p = pd[j];
      pd[j] = static_cast<float>(p - lr * weight_decay * p -
                                 lr * m_hat / (std::sqrt(v_hat) + kAdamEps));
    }
  }
}

// ---------------- training loop ----------------

namespace {

std::vector<std::vector<float>> snapshot_params(const model::Parameters& params) {
  std::vector<std::vector<float>> out(params.size());
  for (size_t i = 0; i < params.size(); ++i) {
    const float* d = params.values[i].data();
    out[i].assign(d, d + params.values[i].numel());
  }
  return out;
}

void restore_params(model::Parameters& params, const std::vector<std::vector<float>>& snap) {
  for (size_t i = 0; i < params.size(); ++i)
    std::copy(snap[i].begin(), snap[i].end(), params.values[i].data());
}

losses::LossBreakdown mode_loss(const TrainConfig& cfg,
                                const std::vector<losses::TrialOutputs>& outs,
                                const std::vector<losses::TrialTargets>& tgts,
                                const phoneme::PhonemeInventory& inv) {
  return uses_aligned_loss(cfg.mode) ? losses::overt_loss(outs, tgts, cfg.loss, inv)
                                     : losses::silent_loss(outs, tgts, cfg.loss, inv);
}

// Batches `ids` in order and returns the per-trial mean loss without touching
// gradients (eval-mode forward).
double evaluate_split(const model::Model& m, const std::vector<TrainTrial>& dataset,
                      const std::vector<int>& ids, const TrainConfig& cfg,
                      const phoneme::PhonemeInventory& inv) {
  std::vector<int64_t> lengths;
  lengths.reserve(ids.size());
  for (int id : ids) lengths.push_back(dataset[static_cast<size_t>(id)].signals.rows);
  const auto groups = group_trials(lengths, static_cast<int64_t>(cfg.batch_rows) * cfg.batch_len);
  double sum = 0.0;
  int64_t count = 0;
  for (const std::vector<int>& group : groups) {
    std::vector<const Matrix*> sigs;
    std::vector<int> batch_ids;
    for (int k : group) {
      sigs.push_back(&dataset[static_cast<size_t>(ids[static_cast<size_t>(k)])].signals);
      batch_ids.push_back(ids[static_cast<size_t>(k)]);
    }
    auto [x, layout] = make_batch(sigs, cfg.batch_len);
    model::ModelOutput out = m.forward(x, false, 0);
    std::vector<ad::Tensor> mf = unbatch(out.mfcc, layout);
    std::vector<ad::Tensor> lp = unbatch(out.phoneme_logprobs, layout);
    std::vector<losses::TrialOutputs> outs;
    std::vector<losses::TrialTargets> tgts;
    for (size_t s = 0; s < layout.spans.size(); ++s) {
      outs.push_back({mf[s], lp[s]});
      tgts.push_back(dataset[static_cast<size_t>(batch_ids[static_cast<size_t>(
                         layout.spans[s].trial)])].targets);
    }
    const losses::LossBreakdown bd = mode_loss(cfg, outs, tgts, inv);
    sum += static_cast<double>(bd.total.item()) * static_cast<double>(outs.size());
    count += static_cast<int64_t>(outs.size());
  }
  return sum / static_cast<double>(count);
}

double elapsed_ms(std::chrono::steady_clock::time_point since) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - since)
      .count();
}

}  // namespace

FitResult fit(model::Model& m, std::vector<TrainTrial> dataset, const TrainConfig& config) {
  config.validate();
  require(!dataset.empty(), "fit: dataset is empty");
  const model::ModelConfig& mc = m.config();

  // Trim every trial to a whole number of 8-sample frames; in overt mode the
  // targets are trimmed to the matching frame count.
  for (size_t i = 0; i < dataset.size(); ++i) {
    TrainTrial& tr = dataset[i];
    require(tr.signals.cols == mc.in_channels,
            "fit: trial " + std::to_string(i) + " has " + std::to_string(tr.signals.cols) +
                " channels; the model expects " + std::to_string(mc.in_channels));
    const int64_t n8 = tr.signals.rows - tr.signals.rows % 8;
    require(n8 > 0, "fit: trial " + std::to_string(i) + " has only " +
                        std::to_string(tr.signals.rows) + " samples (need at least 8)");
    if (n8 != tr.signals.rows) {
      tr.signals.data.resize(static_cast<size_t>(n8 * tr.signals.cols));
      tr.signals.rows = n8;
    }
    if (uses_aligned_loss(config.mode)) {
      const int64_t frames = n8 / 8;
      losses::TrialTargets& tg = tr.targets;
      require(tg.mfcc.rows >= frames && static_cast<int64_t>(tg.frame_labels.size()) >= frames,
              "fit: trial " + std::to_string(i) + " has " + std::to_string(frames) +
                  " signal frames but only " + std::to_string(tg.mfcc.rows) +
                  " target frames / " + std::to_string(tg.frame_labels.size()) + " labels");
      if (tg.mfcc.rows != frames) {
        tg.mfcc.data.resize(static_cast<size_t>(frames * tg.mfcc.cols));
        tg.mfcc.rows = frames;
      }
      tg.frame_labels.resize(static_cast<size_t>(frames));
      if (!tg.frame_weights.empty()) {
        require(static_cast<int64_t>(tg.frame_weights.size()) >= frames,
                "fit: trial " + std::to_string(i) + " has fewer frame weights than frames");
        tg.frame_weights.resize(static_cast<size_t>(frames));
      }
    }
  }
  require(dataset.size() >= 2, "fit: need at least 2 trials to hold out validation data");

  // Seed-fixed validation split.
  const int n = static_cast<int>(dataset.size());
  std::vector<int> order(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
  Rng split_rng(Rng::derive(config.seed, 101));
  split_rng.shuffle(order);
  const int val_count = std::clamp(static_cast<int>(std::llround(n * config.val_fraction)), 1,
                                   n - 1);
  const std::vector<int> val_ids(order.begin(), order.begin() + val_count);
  const std::vector<int> train_ids(order.begin() + val_count, order.end());

  const phoneme::PhonemeInventory& inv = phoneme::PhonemeInventory::standard();
  AdamWState opt = init_adamw(m.params());
  std::vector<std::vector<float>> best = snapshot_params(m.params());
  int best_epoch = 0;
  double best_val = std::numeric_limits<double>::infinity();

  FitResult res;
  for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
    const auto train_start = std::chrono::steady_clock::now();
    const double lr_t = cosine_lr(std::min(epoch - 1, config.t_max), config);

    std::vector<int> idx = train_ids;
    Rng epoch_rng(Rng::derive(config.seed, 10000 + static_cast<std::uint64_t>(epoch)));
    epoch_rng.shuffle(idx);

    std::vector<int64_t> lengths;
    lengths.reserve(idx.size());
    for (int id : idx) lengths.push_back(dataset[static_cast<size_t>(id)].signals.rows);
    const auto groups =
        group_trials(lengths, static_cast<int64_t>(config.batch_rows) * config.batch_len);

    double loss_sum = 0.0;
    int64_t loss_count = 0;
    bool non_finite = false;
    double bad_loss = 0.0;
    for (size_t g = 0; g < groups.size(); ++g) {
      std::vector<const Matrix*> sigs;
      std::vector<int> batch_ids;
      for (int k : groups[g]) {
        sigs.push_back(&dataset[static_cast<size_t>(idx[static_cast<size_t>(k)])].signals);
        batch_ids.push_back(idx[static_cast<size_t>(k)]);
      }
      auto [x, layout] = make_batch(sigs, config.batch_len);
      ad::Tape tape;
      std::vector<ad::Tensor> bound;
      const std::uint64_t drop_seed =
          Rng::derive(config.seed, 20000 + static_cast<std::uint64_t>(epoch) * 1048576 +
                                       static_cast<std::uint64_t>(g));
      model::ModelOutput out = m.forward_tracked(tape, bound, x, true, drop_seed);
      std::vector<ad::Tensor> mf = unbatch(out.mfcc, layout);
      std::vector<ad::Tensor> lp = unbatch(out.phoneme_logprobs, layout);
      std::vector<losses::TrialOutputs> outs;
      std::vector<losses::TrialTargets> tgts;
      for (size_t s = 0; s < layout.spans.size(); ++s) {
        outs.push_back({mf[s], lp[s]});
        tgts.push_back(dataset[static_cast<size_t>(batch_ids[static_cast<size_t>(
                           layout.spans[s].trial)])].targets);
      }
      const losses::LossBreakdown bd = mode_loss(config, outs, tgts, inv);
      const double loss_value = static_cast<double>(bd.total.item());
      if (!std::isfinite(loss_value)) {
        non_finite = true;
        bad_loss = loss_value;
        break;
      }
      tape.backward(bd.total);
      std::vector<ad::Tensor> grads;
      grads.reserve(bound.size());
      for (const ad::Tensor& b : bound) grads.push_back(tape.grad(b));
      adamw_step(m.params(), grads, opt, lr_t, config.weight_decay);
      loss_sum += loss_value * static_cast<double>(outs.size());
      loss_count += static_cast<int64_t>(outs.size());
    }
    res.epochs_run = epoch;

    if (non_finite) {
      res.log.push_back({epoch, "train", bad_loss, lr_t, elapsed_ms(train_start)});
      res.aborted_non_finite = true;
      break;
    }
    const double train_loss = loss_sum / static_cast<double>(loss_count);
    res.log.push_back({epoch, "train", train_loss, lr_t, elapsed_ms(train_start)});

    const auto val_start = std::chrono::steady_clock::now();
    const double val_loss = evaluate_split(m, dataset, val_ids, config, inv);
    res.log.push_back({epoch, "val", val_loss, lr_t, elapsed_ms(val_start)});
    if (!std::isfinite(val_loss)) {
      res.aborted_non_finite = true;
      break;
    }

    if (val_loss < best_val) {
      best_val = val_loss;
      best_epoch = epoch;
      best = snapshot_params(m.params());
    }
    if (epoch - best_epoch >= config.early_stop_patience) break;
  }

  restore_params(m.params(), best);
  res.best_epoch = best_epoch;
  res.best_val_loss = best_val;
  return res;
}

void append_training_log(const std::string& path, const std::vector<EpochLog>& log) {
  bool need_header = true;
  {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (in.good() && in.tellg() > 0) need_header = false;
  }
  std::ofstream out(path, std::ios::app);
  if (!out) fail("cannot open training log '" + path + "' for appending");
  if (need_header) out << "epoch,split,loss,lr,wall_ms\n";
  for (const EpochLog& row : log) {
    out << row.epoch << ',' << row.split << ',' << kvcfg::fmt_double(row.loss) << ','
        << kvcfg::fmt_double(row.lr) << ',' << kvcfg::fmt_double(row.wall_ms) << '\n';
  }
  out.flush();
  if (!out) fail("failed writing training log '" + path + "'");
}

}  // namespace bts::trainer
