// bts: command-line front end for the biosignal-to-speech decoding library.
//
// Subcommands:
//   synth       generate a synthetic labeled corpus on disk
//   preprocess  filter / re-reference / epoch a recorded corpus
//   train       fit the decoder and save checkpoint + training log
//   eval        score a checkpoint on held-out sentences (CSV/SVG reports)
//   analyze     corpus statistics, accuracy correlations, paired tests,
//               and the band-ablation experiment
//
// Conventions shared by every command: inputs are never modified, all
// artifacts land in --out-dir, the fully resolved configuration is written
// next to them as <command>_config.txt (directly reusable via --config), and
// any failure exits nonzero after a one-line diagnostic naming the offending
// path or key.
#include <cstdio>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "bts/analysis.hpp"
#include "bts/common.hpp"
#include "bts/dataset.hpp"
#include "bts/kvconfig.hpp"
#include "bts/losses.hpp"
#include "bts/metrics.hpp"
#include "bts/model.hpp"
#include "bts/phoneme.hpp"
#include "bts/signal.hpp"
#include "bts/synthgen.hpp"
#include "bts/trainer.hpp"

namespace fs = std::filesystem;
using namespace bts;

namespace {

const phoneme::PhonemeInventory& inventory() {
  static const phoneme::PhonemeInventory inv = phoneme::PhonemeInventory::standard();
  return inv;
}

// ---------------------------------------------------------------------------
// Resolved-config echo: key=value lines, keys named after the long flags so
// the file can be fed back through --config.
// ---------------------------------------------------------------------------

class ConfigEcho {
 public:
  explicit ConfigEcho(std::string section) : section_(std::move(section)) {}

  void add(const std::string& key, const std::string& value) { entries_.push_back({key, value}); }
  void add(const std::string& key, const char* value) { add(key, std::string(value)); }
  void add(const std::string& key, bool value) { add(key, std::string(value ? "true" : "false")); }
  void add(const std::string& key, int value) { add(key, std::to_string(value)); }
  void add(const std::string& key, int64_t value) { add(key, std::to_string(value)); }
  void add(const std::string& key, uint64_t value) { add(key, std::to_string(value)); }
  void add(const std::string& key, double value) { add(key, kvcfg::fmt_double(value)); }

  void write(const fs::path& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail("cannot open '" + path.string() + "' for writing");
    out << '[' << section_ << "]\n";
    for (const auto& [key, value] : entries_) out << key << '=' << value << '\n';
    out.flush();
    if (!out) fail("failed writing '" + path.string() + "'");
  }

 private:
  std::string section_;
  std::vector<std::pair<std::string, std::string>> entries_;
};

// ---------------------------------------------------------------------------
// Split files and corpus loading.
// ---------------------------------------------------------------------------

// One sentence id per line; blank lines and '#' comments are skipped.
std::vector<std::string> read_split_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail("cannot open split file '" + path + "'");
  std::vector<std::string> ids;
  std::string line;
  while (std::getline(in, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ' || line.back() == '\t'))
      line.pop_back();
    size_t start = 0;
    while (start < line.size() && (line[start] == ' ' || line[start] == '\t')) ++start;
    line = line.substr(start);
    if (line.empty() || line[0] == '#') continue;
    ids.push_back(line);
  }
  require(!ids.empty(), "split file '" + path + "' names no sentences");
  return ids;
}

// One manifest entry fully materialized: transcript, feature targets, and the
// trial's signal slice with its channel roles.
struct CorpusTrial {
  dataset::ManifestEntry entry;
  phoneme::AlignedTranscript transcript;
  dataset::MfccCache targets;
  Matrix signals;  // (samples x channels), every channel of the recording
  std::vector<signal::Role> roles;
  int sample_rate_hz = 0;
};

std::vector<CorpusTrial> load_corpus(const std::string& data_dir) {
  const fs::path root(data_dir);
  const std::vector<dataset::ManifestEntry> manifest =
      dataset::read_manifest((root / "manifest.tsv").string());
  std::map<std::string, signal::RawRecording> recordings;
  std::vector<CorpusTrial> trials;
  for (const dataset::ManifestEntry& e : manifest) {
    CorpusTrial t;
    t.entry = e;
    t.transcript.sentence_id = e.sentence_id;
    t.transcript.text = e.text;
    t.transcript.segments = dataset::read_alignment((root / e.alignment_path).string());
    t.transcript.validate(inventory());
    t.targets = dataset::read_mfcc((root / e.mfcc_path).string());

    auto it = recordings.find(e.recording_path);
    if (it == recordings.end())
      it = recordings
               .emplace(e.recording_path,
                        dataset::read_recording((root / e.recording_path).string()))
               .first;
    const signal::RawRecording& rec = it->second;
    const signal::TrialMarker* marker = nullptr;
    for (const signal::TrialMarker& m : rec.trial_markers)
      if (m.sentence_id == e.sentence_id) {
        marker = &m;
        break;
      }
    if (!marker)
      fail("recording '" + e.recording_path + "' has no trial marker for sentence '" +
           e.sentence_id + "'");
    t.signals = Matrix(marker->offset_sample - marker->onset_sample, rec.samples.cols);
    for (int64_t r = 0; r < t.signals.rows; ++r)
      for (int64_t c = 0; c < t.signals.cols; ++c)
        t.signals.at(r, c) = rec.samples.at(marker->onset_sample + r, c);
    t.roles = rec.channel_roles;
    t.sample_rate_hz = rec.sample_rate_hz;
    trials.push_back(std::move(t));
  }
  return trials;
}

// eeg keeps only EEG-tagged channels; eeg+emg keeps every channel present.
Matrix select_channels(const Matrix& samples, const std::vector<signal::Role>& roles,
                       trainer::Modality modality) {
  if (modality == trainer::Modality::eeg_emg) return samples;
  std::vector<int64_t> keep;
  for (size_t c = 0; c < roles.size(); ++c)
    if (roles[c] == signal::Role::EEG) keep.push_back(static_cast<int64_t>(c));
  require(!keep.empty(), "modality 'eeg' selects no channels (no EEG role tags in the data)");
  Matrix out(samples.rows, static_cast<int64_t>(keep.size()));
  for (int64_t r = 0; r < out.rows; ++r)
    for (size_t c = 0; c < keep.size(); ++c)
      out.at(r, static_cast<int64_t>(c)) = samples.at(r, keep[c]);
  return out;
}

trainer::TrainTrial to_train_trial(const CorpusTrial& t, trainer::Modality modality) {
  trainer::TrainTrial out;
  out.signals = select_channels(t.signals, t.roles, modality);
  out.targets.mfcc = t.targets.frames;
  out.targets.frame_labels = phoneme::frame_labels(
      t.transcript, t.targets.period_ms, static_cast<int>(t.targets.frames.rows), inventory());
  return out;
}

// Partitions trials into (in split, not in split), verifying every split id
// actually exists in the corpus.
std::pair<std::vector<const CorpusTrial*>, std::vector<const CorpusTrial*>> partition_by_split(
    const std::vector<CorpusTrial>& trials, const std::vector<std::string>& split_ids,
    const std::string& split_path) {
  std::set<std::string> wanted(split_ids.begin(), split_ids.end());
  std::pair<std::vector<const CorpusTrial*>, std::vector<const CorpusTrial*>> out;
  for (const CorpusTrial& t : trials) {
    if (wanted.erase(t.entry.sentence_id) > 0)
      out.first.push_back(&t);
    else
      out.second.push_back(&t);
  }
  if (!wanted.empty())
    fail("split file '" + split_path + "' names sentence '" + *wanted.begin() +
         "' but the manifest has no such sentence");
  return out;
}

int64_t feature_dim(const std::vector<const CorpusTrial*>& trials) {
  require(!trials.empty(), "no trials to inspect for the feature dimension");
  const int64_t dim = trials.front()->targets.frames.cols;
  for (const CorpusTrial* t : trials)
    require(t->targets.frames.cols == dim,
            "feature dimension varies across trials (" + std::to_string(dim) + " vs " +
                std::to_string(t->targets.frames.cols) + " for sentence '" +
                t->entry.sentence_id + "')");
  return dim;
}

void copy_file_to(const fs::path& from, const fs::path& to) {
  fs::create_directories(to.parent_path());
  fs::copy_file(from, to, fs::copy_options::overwrite_existing);
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

struct SynthArgs {
  std::string out_dir;
  synthgen::SynthConfig cfg;
  bool no_noise = false;
  int holdout = 0;
};

int cmd_synth(SynthArgs& a) {
  if (a.no_noise) a.cfg.snr_db = std::numeric_limits<double>::infinity();
  require(a.holdout >= 0 && a.holdout <= a.cfg.n_sentences,
          "--holdout must lie between 0 and --sentences");
  const synthgen::SynthDataset ds = synthgen::generate(a.cfg, inventory());
  fs::create_directories(a.out_dir);
  synthgen::write_dataset(ds, a.out_dir);

  if (a.holdout > 0) {
    std::ofstream split(fs::path(a.out_dir) / "split.txt", std::ios::binary | std::ios::trunc);
    if (!split) fail("cannot open '" + a.out_dir + "/split.txt' for writing");
    for (size_t i = ds.trials.size() - static_cast<size_t>(a.holdout); i < ds.trials.size(); ++i)
      split << ds.trials[i].transcript.sentence_id << '\n';
  }

  ConfigEcho echo("synth");
  echo.add("out-dir", a.out_dir);
  echo.add("sentences", a.cfg.n_sentences);
  echo.add("seed", a.cfg.seed);
  echo.add("snr-db", a.cfg.snr_db);
  echo.add("no-noise", a.no_noise);
  echo.add("band-center-hz", a.cfg.band_center_hz);
  echo.add("eeg-channels", a.cfg.eeg_channels);
  echo.add("emg-channels", a.cfg.emg_channels);
  echo.add("sample-rate-hz", a.cfg.sample_rate_hz);
  echo.add("min-phonemes", a.cfg.min_phonemes);
  echo.add("max-phonemes", a.cfg.max_phonemes);
  echo.add("min-segment-ms", a.cfg.min_segment_ms);
  echo.add("max-segment-ms", a.cfg.max_segment_ms);
  echo.add("mfcc-dim", a.cfg.mfcc_dim);
  echo.add("frame-period-ms", a.cfg.frame_period_ms);
  echo.add("template-jitter", a.cfg.template_jitter);
  echo.add("gap-ms", a.cfg.gap_ms);
  echo.add("holdout", a.holdout);
  echo.write(fs::path(a.out_dir) / "synth_config.txt");

  std::printf("synth: wrote %d sentences (%d channels at %d Hz) to %s\n", a.cfg.n_sentences,
              a.cfg.channels(), a.cfg.sample_rate_hz, a.out_dir.c_str());
  if (a.holdout > 0)
    std::printf("synth: split file lists the last %d sentences as held out\n", a.holdout);
  return 0;
}

// ---------------------------------------------------------------------------
// preprocess
// ---------------------------------------------------------------------------

struct PreprocessArgs {
  std::string data_dir;
  std::string out_dir;
  std::string band = "full";
  double low_hz = 0.5;
  double high_hz = 200.0;
  double notch_base_hz = 60.0;
  double notch_max_hz = 180.0;
  double baseline_ms = 200.0;
  bool car = true;
};

int cmd_preprocess(const PreprocessArgs& a) {
  const fs::path root(a.data_dir);
  const fs::path out(a.out_dir);
  const std::vector<dataset::ManifestEntry> manifest =
      dataset::read_manifest((root / "manifest.tsv").string());
  require(!manifest.empty(), "manifest '" + (root / "manifest.tsv").string() + "' lists no trials");
  fs::create_directories(out);

  // Filter and re-reference each distinct recording once, then cut epochs.
  std::map<std::string, signal::RawRecording> processed;
  for (const dataset::ManifestEntry& e : manifest) {
    if (processed.count(e.recording_path)) continue;
    signal::RawRecording rec = dataset::read_recording((root / e.recording_path).string());
    if (a.high_hz > 0.0) {
      signal::FilterSpec spec;
      spec.kind = signal::FilterKind::band_pass;
      spec.low_hz = a.low_hz;
      spec.high_hz = a.high_hz;
      rec = signal::apply_filter(rec, spec, std::nullopt);
    }
    if (a.notch_base_hz > 0.0) {
      signal::FilterSpec spec;
      spec.kind = signal::FilterKind::notch_comb;
      spec.notch_base_hz = a.notch_base_hz;
      spec.notch_max_hz = a.notch_max_hz;
      rec = signal::apply_filter(rec, spec, std::nullopt);
    }
    if (a.car) rec = signal::common_average_reference(rec, /*per_role=*/true);
    processed.emplace(e.recording_path, std::move(rec));
  }

  std::vector<dataset::ManifestEntry> out_manifest;
  for (const dataset::ManifestEntry& e : manifest) {
    const signal::RawRecording& rec = processed.at(e.recording_path);
    int marker_index = -1;
    for (size_t m = 0; m < rec.trial_markers.size(); ++m)
      if (rec.trial_markers[m].sentence_id == e.sentence_id) {
        marker_index = static_cast<int>(m);
        break;
      }
    if (marker_index < 0)
      fail("recording '" + e.recording_path + "' has no trial marker for sentence '" +
           e.sentence_id + "'");
    signal::Epoch ep = signal::epoch_and_baseline(rec, marker_index, a.baseline_ms);
    if (a.band != "full") ep = signal::band_isolate(ep, a.band);

    signal::RawRecording epoch_rec;
    epoch_rec.samples = std::move(ep.samples);
    epoch_rec.sample_rate_hz = ep.sample_rate_hz;
    epoch_rec.channel_roles = ep.channel_roles;
    epoch_rec.trial_markers = {{0, epoch_rec.samples.rows, e.sentence_id}};
    const std::string epoch_rel = "epochs/" + e.sentence_id + ".f32";
    fs::create_directories(out / "epochs");
    dataset::write_recording((out / epoch_rel).string(), epoch_rec);

    // Validate, then carry the alignment and feature files over byte-for-byte.
    dataset::read_alignment((root / e.alignment_path).string());
    dataset::read_mfcc((root / e.mfcc_path).string());
    const std::string align_rel = "align/" + e.sentence_id + ".txt";
    const std::string mfcc_rel = "mfcc/" + e.sentence_id + ".f32";
    copy_file_to(root / e.alignment_path, out / align_rel);
    copy_file_to(root / e.mfcc_path, out / mfcc_rel);
    copy_file_to(root / (e.mfcc_path + ".hdr"), out / (mfcc_rel + ".hdr"));
    out_manifest.push_back({e.sentence_id, e.text, align_rel, mfcc_rel, epoch_rel});
  }
  dataset::write_manifest((out / "manifest.tsv").string(), out_manifest);

  ConfigEcho echo("preprocess");
  echo.add("data-dir", a.data_dir);
  echo.add("out-dir", a.out_dir);
  echo.add("band", a.band);
  echo.add("low-hz", a.low_hz);
  echo.add("high-hz", a.high_hz);
  echo.add("notch-base-hz", a.notch_base_hz);
  echo.add("notch-max-hz", a.notch_max_hz);
  echo.add("baseline-ms", a.baseline_ms);
  echo.add("car", a.car);
  echo.write(out / "preprocess_config.txt");

  std::printf("preprocess: wrote %zu epochs to %s (band=%s, car=%s)\n", out_manifest.size(),
              a.out_dir.c_str(), a.band.c_str(), a.car ? "per-role" : "off");
  return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string data_dir;
  std::string out_dir;
  std::string split_file;
  std::string mode = "overt";
  std::string modality = "eeg+emg";
  std::string blank_policy = "reuse_sil";
  uint64_t seed = 0;
  double lr = 1e-3;
  double lr_min = 1e-5;
  int t_max = 200;
  double weight_decay = 1e-5;
  int max_epochs = 200;
  int patience = 10;
  double val_fraction = 0.1;
  int batch_rows = 4;
  int64_t batch_len = 2048;
  double alpha = 0.5;
  double beta = 0.5;
  double dropout = 0.1;
  int conv_channels = 512;
  int gru_hidden = 512;
  int gru_layers = 2;
  int norm_groups = 16;
  int kernel = 3;
};

void echo_train_flags(ConfigEcho& echo, const TrainArgs& a) {
  echo.add("data-dir", a.data_dir);
  echo.add("out-dir", a.out_dir);
  if (!a.split_file.empty()) echo.add("split-file", a.split_file);
  echo.add("mode", a.mode);
  echo.add("modality", a.modality);
  echo.add("seed", a.seed);
  echo.add("lr", a.lr);
  echo.add("lr-min", a.lr_min);
  echo.add("t-max", a.t_max);
  echo.add("weight-decay", a.weight_decay);
  echo.add("max-epochs", a.max_epochs);
  echo.add("patience", a.patience);
  echo.add("val-fraction", a.val_fraction);
  echo.add("batch-rows", a.batch_rows);
  echo.add("batch-len", a.batch_len);
  echo.add("alpha", a.alpha);
  echo.add("beta", a.beta);
  echo.add("blank-policy", a.blank_policy);
  echo.add("dropout", a.dropout);
  echo.add("conv-channels", a.conv_channels);
  echo.add("gru-hidden", a.gru_hidden);
  echo.add("gru-layers", a.gru_layers);
  echo.add("norm-groups", a.norm_groups);
  echo.add("kernel", a.kernel);
}

trainer::TrainConfig train_config_from_args(const TrainArgs& a) {
  trainer::TrainConfig tc;
  tc.lr = a.lr;
  tc.lr_min = a.lr_min;
  tc.t_max = a.t_max;
  tc.weight_decay = a.weight_decay;
  tc.max_epochs = a.max_epochs;
  tc.early_stop_patience = a.patience;
  tc.val_fraction = a.val_fraction;
  tc.seed = a.seed;
  tc.mode = trainer::parse_mode(a.mode);
  tc.modality = trainer::parse_modality(a.modality);
  tc.batch_rows = a.batch_rows;
  tc.batch_len = a.batch_len;
  tc.loss.alpha = static_cast<float>(a.alpha);
  tc.loss.beta = static_cast<float>(a.beta);
  tc.loss.ctc_blank_policy = losses::parse_blank_policy(a.blank_policy);
  tc.validate();
  return tc;
}

int cmd_train(const TrainArgs& a) {
  const trainer::TrainConfig tc = train_config_from_args(a);
  const std::vector<CorpusTrial> corpus = load_corpus(a.data_dir);

  std::vector<const CorpusTrial*> train_ptrs;
  if (!a.split_file.empty()) {
    const std::vector<std::string> held_out = read_split_file(a.split_file);
    auto [held, kept] = partition_by_split(corpus, held_out, a.split_file);
    train_ptrs = std::move(kept);
    std::printf("train: holding out %zu of %zu sentences per %s\n", held.size(), corpus.size(),
                a.split_file.c_str());
  } else {
    for (const CorpusTrial& t : corpus) train_ptrs.push_back(&t);
  }
  require(!train_ptrs.empty(), "no training sentences left after applying the split file");

  const int64_t dim = feature_dim(train_ptrs);
  std::vector<trainer::TrainTrial> trials;
  for (const CorpusTrial* t : train_ptrs) trials.push_back(to_train_trial(*t, tc.modality));

  model::ModelConfig mc;
  mc.in_channels = static_cast<int>(trials.front().signals.cols);
  mc.conv_channels = a.conv_channels;
  mc.gru_hidden = a.gru_hidden;
  mc.gru_layers = a.gru_layers;
  mc.norm_groups = a.norm_groups;
  mc.kernel = a.kernel;
  mc.dropout = a.dropout;
  mc.mfcc_dim = static_cast<int>(dim);
  mc.n_classes = inventory().size() +
                 (tc.loss.ctc_blank_policy == losses::BlankPolicy::extra_blank ? 1 : 0);
  mc.validate();

  if (trainer::uses_aligned_loss(tc.mode))
    std::printf("train: loss path time-aligned (audio error + per-frame phoneme error + CTC)\n");
  else
    std::printf(
        "train: loss path warped alignment (phoneme-weighted feature warping + CTC; "
        "targets unaligned)\n");
  std::printf("train: %zu sentences, %d input channels, feature dim %d, seed %llu\n",
              trials.size(), mc.in_channels, mc.mfcc_dim,
              static_cast<unsigned long long>(a.seed));

  model::Model net = model::Model::init(mc, a.seed);
  const trainer::FitResult result = trainer::fit(net, std::move(trials), tc);

  fs::create_directories(a.out_dir);
  const fs::path out(a.out_dir);
  model::save_checkpoint((out / "checkpoint.ckpt").string(), net);
  // The log is rewritten from scratch so identical runs leave identical
  // artifact sets (wall_ms still reports measured time and varies).
  fs::remove(out / "train_log.csv");
  trainer::append_training_log((out / "train_log.csv").string(), result.log);

  ConfigEcho echo("train");
  echo_train_flags(echo, a);
  echo.write(out / "train_config.txt");

  std::printf("train: best epoch %d (validation loss %s) after %d epochs\n", result.best_epoch,
              kvcfg::fmt_double(result.best_val_loss).c_str(), result.epochs_run);
  std::printf("train: checkpoint %s\n", (out / "checkpoint.ckpt").string().c_str());
  if (result.aborted_non_finite) {
    std::fprintf(stderr,
                 "train: stopped on a non-finite loss; the checkpoint holds the best earlier "
                 "parameters\n");
    return 1;
  }
  return 0;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string data_dir;
  std::string out_dir;
  std::string checkpoint;
  std::string split_file;
  std::string mode = "overt";
  std::string modality = "eeg+emg";
};

// Returns the evaluation subset (split file when given, otherwise everything).
std::vector<const CorpusTrial*> eval_subset(const std::vector<CorpusTrial>& corpus,
                                            const std::string& split_file) {
  if (split_file.empty()) {
    std::vector<const CorpusTrial*> all;
    for (const CorpusTrial& t : corpus) all.push_back(&t);
    return all;
  }
  auto [held, rest] = partition_by_split(corpus, read_split_file(split_file), split_file);
  (void)rest;
  require(!held.empty(), "split file '" + split_file + "' selects no sentences");
  return held;
}

metrics::MetricReport run_model_eval(const model::Model& net,
                                     const std::vector<const CorpusTrial*>& subset,
                                     trainer::Modality modality, bool time_aligned,
                                     std::vector<std::string>* ids_out) {
  std::vector<trainer::TrainTrial> trials;
  std::vector<std::string> ids;
  for (const CorpusTrial* t : subset) {
    trials.push_back(to_train_trial(*t, modality));
    ids.push_back(t->entry.sentence_id);
  }
  if (ids_out) *ids_out = ids;
  return analysis::evaluate_model(net, trials, ids, inventory(), time_aligned);
}

int cmd_eval(const EvalArgs& a) {
  const model::Model net = model::load_checkpoint(a.checkpoint);
  require(net.config().n_classes == inventory().size(),
          "checkpoint has an extra CTC blank class; evaluation supports the silence-as-blank "
          "policy only");
  const trainer::Mode mode = trainer::parse_mode(a.mode);
  const trainer::Modality modality = trainer::parse_modality(a.modality);

  const std::vector<CorpusTrial> corpus = load_corpus(a.data_dir);
  const std::vector<const CorpusTrial*> subset = eval_subset(corpus, a.split_file);
  const metrics::MetricReport report =
      run_model_eval(net, subset, modality, trainer::uses_aligned_loss(mode), nullptr);

  fs::create_directories(a.out_dir);
  const fs::path out(a.out_dir);
  metrics::write_report_csv((out / "report.csv").string(), report);
  metrics::write_confusion_csv((out / "confusion.csv").string(), report.confusion, inventory());
  metrics::write_confusion_svg((out / "confusion.svg").string(), report.confusion, inventory());

  ConfigEcho echo("eval");
  echo.add("data-dir", a.data_dir);
  echo.add("out-dir", a.out_dir);
  echo.add("checkpoint", a.checkpoint);
  if (!a.split_file.empty()) echo.add("split-file", a.split_file);
  echo.add("mode", a.mode);
  echo.add("modality", a.modality);
  echo.write(out / "eval_config.txt");

  const metrics::SentenceMetrics& agg = report.aggregate;
  std::printf("eval: %zu sentences (%s scoring)\n", report.per_sentence.size(),
              trainer::uses_aligned_loss(mode) ? "time-aligned" : "warped");
  std::printf("eval: accuracy %.2f%%, rmse %.4f, mcd %.4f, macro-F1 %.4f, error rate %.4f\n",
              agg.accuracy_pct, agg.rmse, agg.mcd, agg.f1, agg.error_rate);
  std::printf("eval: report %s\n", (out / "report.csv").string().c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// analyze
// ---------------------------------------------------------------------------

struct AnalyzeArgs {
  std::string data_dir;
  std::string out_dir;
  std::string checkpoint;
  std::string checkpoint_b;
  std::string split_file;
  std::string mode = "overt";
  std::string modality = "eeg+emg";
  std::vector<std::string> bands;
  uint64_t seed = 0;
  // Compact per-band training budget (band ablation trains one fresh model
  // per requested band).
  int max_epochs = 30;
  int batch_rows = 4;
  int64_t batch_len = 512;
  double val_fraction = 0.2;
  int conv_channels = 64;
  int gru_hidden = 32;
  int gru_layers = 1;
  int norm_groups = 8;
  double alpha = 0.5;
  double beta = 0.5;
};

std::vector<int> segment_tokens(const phoneme::AlignedTranscript& transcript) {
  std::vector<int> tokens;
  for (const phoneme::Segment& seg : transcript.segments)
    tokens.push_back(inventory().index_of(seg.phoneme));
  return tokens;
}

double safe_pearson(const std::vector<double>& xs, const std::vector<double>& ys) {
  try {
    return analysis::pearson(xs, ys);
  } catch (const std::invalid_argument&) {
    return std::numeric_limits<double>::quiet_NaN();
  }
}

int cmd_analyze(const AnalyzeArgs& a) {
  const trainer::Mode mode = trainer::parse_mode(a.mode);
  const trainer::Modality modality = trainer::parse_modality(a.modality);
  const bool time_aligned = trainer::uses_aligned_loss(mode);
  const std::vector<CorpusTrial> corpus = load_corpus(a.data_dir);
  require(!corpus.empty(), "corpus '" + a.data_dir + "' lists no trials");

  std::vector<const CorpusTrial*> eval_ptrs, train_ptrs;
  if (!a.split_file.empty()) {
    auto [held, rest] = partition_by_split(corpus, read_split_file(a.split_file), a.split_file);
    eval_ptrs = std::move(held);
    train_ptrs = std::move(rest);
    require(!eval_ptrs.empty(), "split file '" + a.split_file + "' selects no sentences");
    require(!train_ptrs.empty(), "split file leaves no training sentences for corpus statistics");
  } else {
    for (const CorpusTrial& t : corpus) {
      eval_ptrs.push_back(&t);
      train_ptrs.push_back(&t);
    }
  }

  fs::create_directories(a.out_dir);
  const fs::path out(a.out_dir);

  // Phoneme frequencies over the training sentences.
  std::vector<std::vector<int>> token_corpus;
  for (const CorpusTrial* t : train_ptrs) token_corpus.push_back(segment_tokens(t->transcript));
  const analysis::WScoreTable table = analysis::w_scores(token_corpus, inventory());
  {
    std::ofstream ws(out / "w_scores.csv", std::ios::binary | std::ios::trunc);
    if (!ws) fail("cannot open '" + (out / "w_scores.csv").string() + "' for writing");
    ws << "class_index,label,w_with_sil,w_without_sil\n";
    for (int c = 0; c < inventory().size(); ++c)
      ws << c << ',' << inventory().label(c) << ',' << kvcfg::fmt_double(table.with_sil[c]) << ','
         << kvcfg::fmt_double(table.without_sil[c]) << '\n';
  }
  std::printf("analyze: phoneme frequencies over %zu training sentences -> w_scores.csv\n",
              train_ptrs.size());

  if (!a.checkpoint.empty()) {
    const model::Model net = model::load_checkpoint(a.checkpoint);
    require(net.config().n_classes == inventory().size(),
            "checkpoint has an extra CTC blank class; evaluation supports the silence-as-blank "
            "policy only");
    std::vector<std::string> ids;
    const metrics::MetricReport report = run_model_eval(net, eval_ptrs, modality, time_aligned,
                                                        &ids);
    std::vector<analysis::SentenceProperties> props;
    std::vector<double> accuracy;
    for (size_t i = 0; i < eval_ptrs.size(); ++i) {
      props.push_back(analysis::sentence_properties(
          ids[i], segment_tokens(eval_ptrs[i]->transcript), table, inventory()));
      accuracy.push_back(report.per_sentence[i].accuracy_pct);
    }
    analysis::write_property_scatter_csv((out / "properties.csv").string(), props, accuracy);

    std::vector<double> len_x, with_x, without_x;
    for (const analysis::SentenceProperties& p : props) {
      len_x.push_back(static_cast<double>(p.phoneme_seq_len));
      with_x.push_back(p.w_score_with_sil);
      without_x.push_back(p.w_score_without_sil);
    }
    const double pcc_len = safe_pearson(len_x, accuracy);
    const double pcc_with = safe_pearson(with_x, accuracy);
    const double pcc_without = safe_pearson(without_x, accuracy);
    analysis::write_scatter_svg((out / "scatter_length.svg").string(), len_x, accuracy,
                                "phoneme sequence length", "accuracy (%)", pcc_len);
    analysis::write_scatter_svg((out / "scatter_w_with_sil.svg").string(), with_x, accuracy,
                                "W score (with silence)", "accuracy (%)", pcc_with);
    analysis::write_scatter_svg((out / "scatter_w_without_sil.svg").string(), without_x, accuracy,
                                "W score (without silence)", "accuracy (%)", pcc_without);
    {
      std::ofstream cs(out / "correlations.csv", std::ios::binary | std::ios::trunc);
      if (!cs) fail("cannot open '" + (out / "correlations.csv").string() + "' for writing");
      cs << "property,pcc\n";
      cs << "phoneme_seq_len," << kvcfg::fmt_double(pcc_len) << '\n';
      cs << "w_score_with_sil," << kvcfg::fmt_double(pcc_with) << '\n';
      cs << "w_score_without_sil," << kvcfg::fmt_double(pcc_without) << '\n';
    }
    std::printf(
        "analyze: accuracy correlations over %zu sentences (length %.3f, W+sil %.3f, "
        "W-sil %.3f) -> properties.csv, correlations.csv, scatter_*.svg\n",
        props.size(), pcc_len, pcc_with, pcc_without);

    if (!a.checkpoint_b.empty()) {
      const model::Model net_b = model::load_checkpoint(a.checkpoint_b);
      require(net_b.config().n_classes == inventory().size(),
              "checkpoint has an extra CTC blank class; evaluation supports the silence-as-blank "
              "policy only");
      const metrics::MetricReport report_b =
          run_model_eval(net_b, eval_ptrs, modality, time_aligned, nullptr);
      std::vector<double> accuracy_b;
      for (const metrics::SentenceMetrics& row : report_b.per_sentence)
        accuracy_b.push_back(row.accuracy_pct);
      const analysis::WilcoxonResult w = analysis::wilcoxon_signed_rank(accuracy, accuracy_b);
      {
        std::ofstream wf(out / "wilcoxon.csv", std::ios::binary | std::ios::trunc);
        if (!wf) fail("cannot open '" + (out / "wilcoxon.csv").string() + "' for writing");
        wf << "w_plus,w_minus,statistic,p_value,n_effective,exact\n";
        wf << kvcfg::fmt_double(w.w_plus) << ',' << kvcfg::fmt_double(w.w_minus) << ','
           << kvcfg::fmt_double(w.statistic) << ',' << kvcfg::fmt_double(w.p_value) << ','
           << w.n_effective << ',' << (w.exact ? "true" : "false") << '\n';
      }
      std::printf(
          "analyze: Wilcoxon signed-rank statistic %s, two-sided p = %s (n=%d, %s) -> "
          "wilcoxon.csv\n",
          kvcfg::fmt_double(w.statistic).c_str(), kvcfg::fmt_double(w.p_value).c_str(),
          w.n_effective, w.exact ? "exact" : "normal approximation");
    }
  }

  if (!a.bands.empty()) {
    require(!a.split_file.empty(),
            "band ablation needs --split-file to separate training and evaluation sentences");
    std::vector<trainer::TrainTrial> train_set, eval_set;
    std::vector<std::string> eval_ids;
    for (const CorpusTrial* t : train_ptrs) train_set.push_back(to_train_trial(*t, modality));
    for (const CorpusTrial* t : eval_ptrs) {
      eval_set.push_back(to_train_trial(*t, modality));
      eval_ids.push_back(t->entry.sentence_id);
    }
    analysis::BandAblationConfig cfg;
    cfg.model.in_channels = static_cast<int>(train_set.front().signals.cols);
    cfg.model.conv_channels = a.conv_channels;
    cfg.model.gru_hidden = a.gru_hidden;
    cfg.model.gru_layers = a.gru_layers;
    cfg.model.norm_groups = a.norm_groups;
    cfg.model.dropout = 0.0;
    cfg.model.mfcc_dim = static_cast<int>(feature_dim(train_ptrs));
    cfg.model.n_classes = inventory().size();
    cfg.model.validate();
    cfg.train.mode = mode;
    cfg.train.modality = modality;
    cfg.train.max_epochs = a.max_epochs;
    cfg.train.batch_rows = a.batch_rows;
    cfg.train.batch_len = a.batch_len;
    cfg.train.val_fraction = a.val_fraction;
    cfg.train.seed = a.seed;
    cfg.train.loss.alpha = static_cast<float>(a.alpha);
    cfg.train.loss.beta = static_cast<float>(a.beta);
    cfg.train.validate();
    cfg.sample_rate_hz = eval_ptrs.front()->sample_rate_hz;
    cfg.init_seed = a.seed;
    cfg.time_aligned_eval = time_aligned;

    std::printf("analyze: band ablation over %zu bands (%d epochs each) ...\n", a.bands.size(),
                a.max_epochs);
    const std::vector<analysis::BandAblationRow> rows = analysis::band_ablation(
        train_set, eval_set, eval_ids, a.bands, cfg, inventory());
    analysis::write_band_table_csv((out / "band_table.csv").string(), rows);
    for (const analysis::BandAblationRow& row : rows)
      std::printf("analyze: band %-10s accuracy %.2f%% (val loss %s)\n", row.band.c_str(),
                  row.report.aggregate.accuracy_pct,
                  kvcfg::fmt_double(row.best_val_loss).c_str());
    std::printf("analyze: band table -> band_table.csv\n");
  }

  ConfigEcho echo("analyze");
  echo.add("data-dir", a.data_dir);
  echo.add("out-dir", a.out_dir);
  if (!a.checkpoint.empty()) echo.add("checkpoint", a.checkpoint);
  if (!a.checkpoint_b.empty()) echo.add("checkpoint-b", a.checkpoint_b);
  if (!a.split_file.empty()) echo.add("split-file", a.split_file);
  echo.add("mode", a.mode);
  echo.add("modality", a.modality);
  if (!a.bands.empty()) {
    std::string joined;
    for (const std::string& b : a.bands) {
      if (!joined.empty()) joined += ',';
      joined += b;
    }
    echo.add("bands", joined);
  }
  echo.add("seed", a.seed);
  echo.add("max-epochs", a.max_epochs);
  echo.add("batch-rows", a.batch_rows);
  echo.add("batch-len", a.batch_len);
  echo.add("val-fraction", a.val_fraction);
  echo.add("conv-channels", a.conv_channels);
  echo.add("gru-hidden", a.gru_hidden);
  echo.add("gru-layers", a.gru_layers);
  echo.add("norm-groups", a.norm_groups);
  echo.add("alpha", a.alpha);
  echo.add("beta", a.beta);
  echo.write(out / "analyze_config.txt");
  return 0;
}

// ---------------------------------------------------------------------------
// wiring
// ---------------------------------------------------------------------------

// --config lives on the root app (that is where the file actually gets
// processed); fallthrough lets it be written after the subcommand name. Keys
// belong in a [subcommand] section, exactly as the echoed *_config.txt files
// are laid out.
void add_config_flag(CLI::App* cmd) { cmd->fallthrough(); }

const std::vector<std::string> kModes = {"overt", "whispered", "imagined"};
const std::vector<std::string> kModalities = {"eeg", "eeg+emg"};
const std::vector<std::string> kBandChoices = {"delta", "theta",      "alpha", "beta",
                                               "gamma", "high_gamma", "full"};
const std::vector<std::string> kBandNames = {"delta", "theta", "alpha",
                                             "beta",  "gamma", "high_gamma"};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"biosignal-to-speech decoding toolkit"};
  app.require_subcommand(1);
  app.set_config("--config", "",
                 "Key=value defaults in a [subcommand] section; explicit flags override it");
  app.allow_config_extras(false);
  int rc = 0;

  SynthArgs sa;
  CLI::App* synth = app.add_subcommand("synth", "Generate a synthetic labeled corpus");
  add_config_flag(synth);
  synth->add_option("--out-dir", sa.out_dir, "Directory receiving the dataset")->required();
  synth->add_option("--sentences", sa.cfg.n_sentences, "Number of sentences")
      ->capture_default_str();
  synth->add_option("--seed", sa.cfg.seed, "Generator seed")->capture_default_str();
  synth->add_option("--snr-db", sa.cfg.snr_db, "Additive-noise SNR in dB")->capture_default_str();
  synth->add_flag("--no-noise", sa.no_noise, "Disable additive noise (overrides --snr-db)");
  synth->add_option("--band-center-hz", sa.cfg.band_center_hz,
                    "Sinusoidal carrier frequency; 0 = broadband")
      ->capture_default_str();
  synth->add_option("--eeg-channels", sa.cfg.eeg_channels, "EEG channel count")
      ->capture_default_str();
  synth->add_option("--emg-channels", sa.cfg.emg_channels, "EMG channel count")
      ->capture_default_str();
  synth->add_option("--sample-rate-hz", sa.cfg.sample_rate_hz, "Sampling rate")
      ->capture_default_str();
  synth->add_option("--min-phonemes", sa.cfg.min_phonemes, "Fewest non-silence tokens")
      ->capture_default_str();
  synth->add_option("--max-phonemes", sa.cfg.max_phonemes, "Most non-silence tokens")
      ->capture_default_str();
  synth->add_option("--min-segment-ms", sa.cfg.min_segment_ms, "Shortest segment")
      ->capture_default_str();
  synth->add_option("--max-segment-ms", sa.cfg.max_segment_ms, "Longest segment")
      ->capture_default_str();
  synth->add_option("--mfcc-dim", sa.cfg.mfcc_dim, "Feature dimension")->capture_default_str();
  synth->add_option("--frame-period-ms", sa.cfg.frame_period_ms, "Feature frame period")
      ->capture_default_str();
  synth->add_option("--template-jitter", sa.cfg.template_jitter, "Per-frame target noise")
      ->capture_default_str();
  synth->add_option("--gap-ms", sa.cfg.gap_ms, "Inter-trial gap in the recording")
      ->capture_default_str();
  synth->add_option("--holdout", sa.holdout,
                    "Also write split.txt naming the last N sentences as held out")
      ->capture_default_str();
  synth->callback([&]() { rc = cmd_synth(sa); });

  PreprocessArgs pa;
  CLI::App* pre = app.add_subcommand(
      "preprocess", "Filter, re-reference, and epoch a corpus into a new directory");
  add_config_flag(pre);
  pre->add_option("--data-dir", pa.data_dir, "Corpus directory (with manifest.tsv)")->required();
  pre->add_option("--out-dir", pa.out_dir, "Directory receiving the epochs")->required();
  pre->add_option("--band", pa.band, "Restrict epochs to one frequency band")
      ->capture_default_str()
      ->check(CLI::IsMember(kBandChoices));
  pre->add_option("--low-hz", pa.low_hz, "Band-pass low edge")->capture_default_str();
  pre->add_option("--high-hz", pa.high_hz, "Band-pass high edge; 0 disables the band-pass")
      ->capture_default_str();
  pre->add_option("--notch-base-hz", pa.notch_base_hz, "Notch comb fundamental; 0 disables")
      ->capture_default_str();
  pre->add_option("--notch-max-hz", pa.notch_max_hz, "Highest notch harmonic")
      ->capture_default_str();
  pre->add_option("--baseline-ms", pa.baseline_ms, "Pre-trial window subtracted per channel")
      ->capture_default_str();
  pre->add_flag("--car,!--no-car", pa.car, "Common average reference per modality group")
      ->capture_default_str();
  pre->callback([&]() { rc = cmd_preprocess(pa); });

  TrainArgs ta;
  CLI::App* train = app.add_subcommand("train", "Fit the decoder on a corpus");
  add_config_flag(train);
  train->add_option("--data-dir", ta.data_dir, "Corpus directory (with manifest.tsv)")
      ->required();
  train->add_option("--out-dir", ta.out_dir, "Directory receiving checkpoint and log")
      ->required();
  train->add_option("--split-file", ta.split_file,
                    "Sentence ids excluded from training (the held-out set)");
  train->add_option("--mode", ta.mode, "Speaking condition; selects the loss path")
      ->capture_default_str()
      ->check(CLI::IsMember(kModes));
  train->add_option("--modality", ta.modality, "Channel selection")
      ->capture_default_str()
      ->check(CLI::IsMember(kModalities));
  train->add_option("--seed", ta.seed, "Initialization and shuffling seed")
      ->capture_default_str();
  train->add_option("--lr", ta.lr, "Peak learning rate")->capture_default_str();
  train->add_option("--lr-min", ta.lr_min, "Cosine schedule floor")->capture_default_str();
  train->add_option("--t-max", ta.t_max, "Cosine schedule period (epochs)")
      ->capture_default_str();
  train->add_option("--weight-decay", ta.weight_decay, "Decoupled weight decay")
      ->capture_default_str();
  train->add_option("--max-epochs", ta.max_epochs, "Epoch cap")->capture_default_str();
  train->add_option("--patience", ta.patience, "Early-stop patience (epochs)")
      ->capture_default_str();
  train->add_option("--val-fraction", ta.val_fraction, "Trials held for validation")
      ->capture_default_str();
  train->add_option("--batch-rows", ta.batch_rows, "Target rows per optimizer step")
      ->capture_default_str();
  train->add_option("--batch-len", ta.batch_len, "Samples per batch row (multiple of 8)")
      ->capture_default_str();
  train->add_option("--alpha", ta.alpha, "Weight of the audio / warped-audio term")
      ->capture_default_str();
  train->add_option("--beta", ta.beta, "Phoneme weight inside warping costs")
      ->capture_default_str();
  train->add_option("--blank-policy", ta.blank_policy, "CTC blank handling")
      ->capture_default_str()
      ->check(CLI::IsMember({"reuse_sil", "extra_blank"}));
  train->add_option("--dropout", ta.dropout, "Dropout between recurrent layers")
      ->capture_default_str();
  train->add_option("--conv-channels", ta.conv_channels, "Convolution width")
      ->capture_default_str();
  train->add_option("--gru-hidden", ta.gru_hidden, "Recurrent hidden size")
      ->capture_default_str();
  train->add_option("--gru-layers", ta.gru_layers, "Recurrent layers")->capture_default_str();
  train->add_option("--norm-groups", ta.norm_groups, "Group-normalization groups")
      ->capture_default_str();
  train->add_option("--kernel", ta.kernel, "Convolution kernel size")->capture_default_str();
  train->callback([&]() { rc = cmd_train(ta); });

  EvalArgs ea;
  CLI::App* eval_cmd = app.add_subcommand("eval", "Score a checkpoint on a corpus");
  add_config_flag(eval_cmd);
  eval_cmd->add_option("--data-dir", ea.data_dir, "Corpus directory (with manifest.tsv)")
      ->required();
  eval_cmd->add_option("--out-dir", ea.out_dir, "Directory receiving the reports")->required();
  eval_cmd->add_option("--checkpoint", ea.checkpoint, "Checkpoint file to score")->required();
  eval_cmd->add_option("--split-file", ea.split_file,
                       "Evaluate only these sentence ids (default: all)");
  eval_cmd->add_option("--mode", ea.mode,
                       "overt scores time-aligned; whispered/imagined warp references")
      ->capture_default_str()
      ->check(CLI::IsMember(kModes));
  eval_cmd->add_option("--modality", ea.modality, "Channel selection")
      ->capture_default_str()
      ->check(CLI::IsMember(kModalities));
  eval_cmd->callback([&]() { rc = cmd_eval(ea); });

  AnalyzeArgs aa;
  CLI::App* analyze = app.add_subcommand(
      "analyze", "Corpus statistics, accuracy correlations, paired tests, band ablation");
  add_config_flag(analyze);
  analyze->add_option("--data-dir", aa.data_dir, "Corpus directory (with manifest.tsv)")
      ->required();
  analyze->add_option("--out-dir", aa.out_dir, "Directory receiving the reports")->required();
  analyze->add_option("--checkpoint", aa.checkpoint,
                      "Checkpoint for per-sentence accuracy analyses");
  analyze->add_option("--checkpoint-b", aa.checkpoint_b,
                      "Second checkpoint: paired Wilcoxon test against --checkpoint");
  analyze->add_option("--split-file", aa.split_file,
                      "Held-out sentence ids (evaluation set; the rest feed corpus statistics)");
  analyze->add_option("--mode", aa.mode, "Scoring mode (overt = time-aligned)")
      ->capture_default_str()
      ->check(CLI::IsMember(kModes));
  analyze->add_option("--modality", aa.modality, "Channel selection")
      ->capture_default_str()
      ->check(CLI::IsMember(kModalities));
  analyze->add_option("--bands", aa.bands, "Frequency bands for the ablation experiment")
      ->delimiter(',')
      ->check(CLI::IsMember(kBandNames));
  analyze->add_option("--seed", aa.seed, "Ablation training seed")->capture_default_str();
  analyze->add_option("--max-epochs", aa.max_epochs, "Ablation epochs per band")
      ->capture_default_str();
  analyze->add_option("--batch-rows", aa.batch_rows, "Ablation rows per optimizer step")
      ->capture_default_str();
  analyze->add_option("--batch-len", aa.batch_len, "Ablation samples per batch row")
      ->capture_default_str();
  analyze->add_option("--val-fraction", aa.val_fraction, "Ablation validation fraction")
      ->capture_default_str();
  analyze->add_option("--conv-channels", aa.conv_channels, "Ablation convolution width")
      ->capture_default_str();
  analyze->add_option("--gru-hidden", aa.gru_hidden, "Ablation recurrent hidden size")
      ->capture_default_str();
  analyze->add_option("--gru-layers", aa.gru_layers, "Ablation recurrent layers")
      ->capture_default_str();
  analyze->add_option("--norm-groups", aa.norm_groups, "Ablation normalization groups")
      ->capture_default_str();
  analyze->add_option("--alpha", aa.alpha, "Ablation audio-term weight")->capture_default_str();
  analyze->add_option("--beta", aa.beta, "Ablation phoneme weight in warping costs")
      ->capture_default_str();
  analyze->callback([&]() { rc = cmd_analyze(aa); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "bts: %s\n", e.what());
    return 1;
  }
  return rc;
}
