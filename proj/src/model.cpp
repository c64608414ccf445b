#include "bts/model.hpp"

#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "bts/common.hpp"
#include "bts/kvconfig.hpp"
#include "bts/ops.hpp"
#include "bts/rng.hpp"

namespace bts::model {

// ---------------- configuration ----------------

int ModelConfig::downsample() const {
  int ds = 1;
  for (int b = 0; b < n_blocks; ++b) ds *= stride_per_block;
  return ds;
}

void ModelConfig::validate() const {
  require(in_channels >= 1, "in_channels must be >= 1, got " + std::to_string(in_channels));
  require(conv_channels >= 1, "conv_channels must be >= 1, got " + std::to_string(conv_channels));
  require(n_blocks >= 1, "n_blocks must be >= 1, got " + std::to_string(n_blocks));
  require(stride_per_block >= 1,
          "stride_per_block must be >= 1, got " + std::to_string(stride_per_block));
  require(kernel >= stride_per_block,
          "kernel (" + std::to_string(kernel) + ") must be >= stride (" +
              std::to_string(stride_per_block) + ") so same-style padding is non-negative");
  require(downsample() == 8, "the conv stack must downsample time by exactly 8 to pair inputs "
                             "with feature frames; stride " +
                                 std::to_string(stride_per_block) + " over " +
                                 std::to_string(n_blocks) + " blocks gives " +
                                 std::to_string(downsample()));
  require(norm_groups >= 1 && conv_channels % norm_groups == 0,
          "norm_groups (" + std::to_string(norm_groups) + ") must divide conv_channels (" +
              std::to_string(conv_channels) + ")");
  require(gru_hidden >= 1, "gru_hidden must be >= 1, got " + std::to_string(gru_hidden));
  require(gru_layers >= 1, "gru_layers must be >= 1, got " + std::to_string(gru_layers));
  require(dropout >= 0.0 && dropout < 1.0,
          "dropout must be in [0, 1), got " + std::to_string(dropout));
  require(mfcc_dim >= 1, "mfcc_dim must be >= 1, got " + std::to_string(mfcc_dim));
  require(n_classes >= 2, "n_classes must be >= 2, got " + std::to_string(n_classes));
}

std::string ModelConfig::to_text() const {
  std::ostringstream os;
  os << "in_channels=" << in_channels << " conv_channels=" << conv_channels
     << " n_blocks=" << n_blocks << " stride_per_block=" << stride_per_block
     << " kernel=" << kernel << " norm_groups=" << norm_groups << " gru_hidden=" << gru_hidden
     << " gru_layers=" << gru_layers << " bidirectional=" << (bidirectional ? "true" : "false")
     << " dropout=" << kvcfg::fmt_double(dropout) << " mfcc_dim=" << mfcc_dim
     << " n_classes=" << n_classes;
  return os.str();
}

ModelConfig ModelConfig::from_text(const std::string& text) {
  ModelConfig cfg;
  kvcfg::for_each_entry(text, [&](const std::string& key, const std::string& val) {
    if (key == "in_channels") cfg.in_channels = kvcfg::parse_int(key, val);
    else if (key == "conv_channels") cfg.conv_channels = kvcfg::parse_int(key, val);
    else if (key == "n_blocks") cfg.n_blocks = kvcfg::parse_int(key, val);
    else if (key == "stride_per_block") cfg.stride_per_block = kvcfg::parse_int(key, val);
    else if (key == "kernel") cfg.kernel = kvcfg::parse_int(key, val);
    else if (key == "norm_groups") cfg.norm_groups = kvcfg::parse_int(key, val);
    else if (key == "gru_hidden") cfg.gru_hidden = kvcfg::parse_int(key, val);
    else if (key == "gru_layers") cfg.gru_layers = kvcfg::parse_int(key, val);
    else if (key == "bidirectional") cfg.bidirectional = kvcfg::parse_bool(key, val);
    else if (key == "dropout") cfg.dropout = kvcfg::parse_double(key, val);
    else if (key == "mfcc_dim") cfg.mfcc_dim = kvcfg::parse_int(key, val);
    else if (key == "n_classes") cfg.n_classes = kvcfg::parse_int(key, val);
    else throw std::invalid_argument("unknown config key '" + key + "'");
  });
  cfg.validate();
  return cfg;
}

// ---------------- parameter layout ----------------

std::vector<ParamSpec> parameter_specs(const ModelConfig& c) {
  c.validate();
  std::vector<ParamSpec> out;
  for (int b = 0; b < c.n_blocks; ++b) {
    const int cin = b == 0 ? c.in_channels : c.conv_channels;
    const int fan = cin * c.kernel;
    const std::string p = "conv" + std::to_string(b) + ".";
    out.push_back({p + "weight", {c.conv_channels, cin, c.kernel}, fan, 0.f});
    out.push_back({p + "bias", {c.conv_channels}, fan, 0.f});
    out.push_back({p + "gamma", {c.conv_channels}, 0, 1.0f});
    out.push_back({p + "beta", {c.conv_channels}, 0, 0.0f});
    out.push_back({p + "prelu", {1}, 0, 0.25f});
  }
  const int h3 = 3 * c.gru_hidden;
  for (int l = 0; l < c.gru_layers; ++l) {
    const int in = l == 0 ? c.conv_channels : c.gru_out_dim();
    const int n_dirs = c.bidirectional ? 2 : 1;
    for (int d = 0; d < n_dirs; ++d) {
      const std::string p = "gru" + std::to_string(l) + (d == 0 ? ".fwd." : ".bwd.");
      out.push_back({p + "w_ih", {in, h3}, in, 0.f});
      out.push_back({p + "w_hh", {c.gru_hidden, h3}, c.gru_hidden, 0.f});
      out.push_back({p + "b_ih", {h3}, in, 0.f});
      out.push_back({p + "b_hh", {h3}, c.gru_hidden, 0.f});
    }
  }
  const int feat = c.gru_out_dim();
  out.push_back({"head_mfcc.weight", {feat, c.mfcc_dim}, feat, 0.f});
  out.push_back({"head_mfcc.bias", {c.mfcc_dim}, feat, 0.f});
  out.push_back({"head_phoneme.weight", {feat, c.n_classes}, feat, 0.f});
  out.push_back({"head_phoneme.bias", {c.n_classes}, feat, 0.f});
  return out;
}

// ---------------- parameter registry ----------------

int64_t Parameters::total_elements() const {
  int64_t n = 0;
  for (const ad::Tensor& t : values) n += t.numel();
  return n;
}

int Parameters::index_of(const std::string& name) const {
  for (size_t i = 0; i < names.size(); ++i) {
    if (names[i] == name) return static_cast<int>(i);
  }
  return -1;
}

ad::Tensor& Parameters::at(const std::string& name) {
  const int i = index_of(name);
  require(i >= 0, "unknown parameter '" + name + "'");
  return values[static_cast<size_t>(i)];
}

const ad::Tensor& Parameters::at(const std::string& name) const {
  const int i = index_of(name);
  require(i >= 0, "unknown parameter '" + name + "'");
  return values[static_cast<size_t>(i)];
}

void Parameters::add(const std::string& name, ad::Tensor value) {
  require(!name.empty() && value.defined(), "parameter records need a name and a tensor");
  require(index_of(name) < 0, "duplicate parameter name '" + name + "'");
  names.push_back(name);
  values.push_back(std::move(value));
}

// ---------------- recurrent scan ----------------

ad::Tensor gru_scan(const ad::Tensor& seq, const GruDirection& dir, bool reverse) {
  require(seq.ndim() == 3, "gru_scan expects a (T, B, in) sequence, got " +
                               ad::shape_str(seq.shape()));
  const int t_len = seq.dim(0);
  const int batch = seq.dim(1);
  const int in_dim = seq.dim(2);
  require(dir.w_ih.ndim() == 2 && dir.w_ih.dim(0) == in_dim,
          "gru input weights must be (in, 3*hidden) with in = " + std::to_string(in_dim) +
              ", got " + ad::shape_str(dir.w_ih.shape()));
  const int h3 = dir.w_ih.dim(1);
  require(h3 % 3 == 0, "gru gate width must be a multiple of 3, got " + std::to_string(h3));
  const int hidden = h3 / 3;
  require(dir.w_hh.shape() == ad::Shape({hidden, h3}),
          "gru recurrent weights must be (hidden, 3*hidden), got " +
              ad::shape_str(dir.w_hh.shape()));
  require(dir.b_ih.shape() == ad::Shape({h3}) && dir.b_hh.shape() == ad::Shape({h3}),
          "gru biases must be (3*hidden)");

  // Input projections for all steps at once; step t owns rows [t*B, (t+1)*B).
  ad::Tensor flat = ad::reshape(seq, {t_len * batch, in_dim});
  ad::Tensor gx = ad::add_bias(ad::matmul(flat, dir.w_ih), dir.b_ih);

  ad::Tensor h(ad::Shape{batch, hidden}, 0.0f);  // zero initial state, a constant
  std::vector<ad::Tensor> out(static_cast<size_t>(t_len));
  for (int step = 0; step < t_len; ++step) {
    const int t = reverse ? t_len - 1 - step : step;
    ad::Tensor gxt = ad::slice(gx, 0, t * batch, batch);
    ad::Tensor gh = ad::add_bias(ad::matmul(h, dir.w_hh), dir.b_hh);
    ad::Tensor reset =
        ad::sigmoid(ad::add(ad::slice(gxt, 1, 0, hidden), ad::slice(gh, 1, 0, hidden)));
    ad::Tensor update =
        ad::sigmoid(ad::add(ad::slice(gxt, 1, hidden, hidden), ad::slice(gh, 1, hidden, hidden)));
    ad::Tensor cand = ad::tanh(ad::add(ad::slice(gxt, 1, 2 * hidden, hidden),
                                       ad::mul(reset, ad::slice(gh, 1, 2 * hidden, hidden))));
    h = ad::add(cand, ad::mul(update, ad::sub(h, cand)));
    out[static_cast<size_t>(t)] = ad::reshape(h, {1, batch, hidden});
  }
  return ad::concat(out, 0);
}

ad::Tensor bigru_layer(const ad::Tensor& seq, const GruDirection& fwd, const GruDirection& bwd) {
  return ad::concat({gru_scan(seq, fwd, false), gru_scan(seq, bwd, true)}, 2);
}

// ---------------- forward ----------------

std::pair<int, int> conv_padding(int kernel, int stride) {
  const int total = kernel - stride;
  const int left = (total + 1) / 2;
  return {left, total - left};
}

ModelOutput forward_with(const ModelConfig& config, const std::vector<ad::Tensor>& params,
                         const ad::Tensor& x, bool train, uint64_t dropout_seed) {
  config.validate();
  const auto specs = parameter_specs(config);
  require(params.size() == specs.size(),
          "parameter list has " + std::to_string(params.size()) + " tensors; this configuration "
          "needs " + std::to_string(specs.size()));
  require(x.ndim() == 3,
          "model input must be (batch, channels, length), got " + ad::shape_str(x.shape()));
  require(x.dim(1) == config.in_channels,
          "input has " + std::to_string(x.dim(1)) + " channels; the model expects " +
              std::to_string(config.in_channels));
  const int ds = config.downsample();
  require(x.dim(2) > 0 && x.dim(2) % ds == 0,
          "input length " + std::to_string(x.dim(2)) + " is not divisible by " +
              std::to_string(ds) + " (the conv stack downsamples time by " + std::to_string(ds) +
              ")");

  size_t pi = 0;
  const auto [pad_l, pad_r] = conv_padding(config.kernel, config.stride_per_block);
  ad::Tensor h = x;
  for (int b = 0; b < config.n_blocks; ++b) {
    const ad::Tensor& w = params[pi++];
    const ad::Tensor& bias = params[pi++];
    const ad::Tensor& gamma = params[pi++];
    const ad::Tensor& beta = params[pi++];
    const ad::Tensor& slope = params[pi++];
    h = ad::conv1d(h, ad::weight_standardize(w, kNormEps), bias, config.stride_per_block, pad_l,
                   pad_r);
    h = ad::group_norm(h, gamma, beta, config.norm_groups, kNormEps);
    h = ad::prelu(h, slope);
  }
  ModelOutput out;
  out.conv_shape = h.shape();

  ad::Tensor seq = ad::permute(h, {2, 0, 1});  // (T, B, C)
  for (int l = 0; l < config.gru_layers; ++l) {
    if (l > 0) {
      seq = ad::dropout(seq, config.dropout, train,
                        Rng::derive(dropout_seed, static_cast<uint64_t>(l)));
    }
    GruDirection fwd{params[pi], params[pi + 1], params[pi + 2], params[pi + 3]};
    pi += 4;
    if (config.bidirectional) {
      GruDirection bwd{params[pi], params[pi + 1], params[pi + 2], params[pi + 3]};
      pi += 4;
      seq = bigru_layer(seq, fwd, bwd);
    } else {
      seq = gru_scan(seq, fwd, false);
    }
  }

  ad::Tensor feat = ad::permute(seq, {1, 0, 2});  // (B, T, D)
  out.gru_shape = feat.shape();
  const int bsz = feat.dim(0);
  const int t_len = feat.dim(1);
  const int d_feat = feat.dim(2);
  ad::Tensor flat = ad::reshape(feat, {bsz * t_len, d_feat});
  const ad::Tensor& mfcc_w = params[pi++];
  const ad::Tensor& mfcc_b = params[pi++];
  const ad::Tensor& ph_w = params[pi++];
  const ad::Tensor& ph_b = params[pi++];
  out.mfcc = ad::reshape(ad::add_bias(ad::matmul(flat, mfcc_w), mfcc_b),
                         {bsz, t_len, config.mfcc_dim});
  out.phoneme_logits = ad::reshape(ad::add_bias(ad::matmul(flat, ph_w), ph_b),
                                   {bsz, t_len, config.n_classes});
  out.phoneme_logprobs = ad::log_softmax(out.phoneme_logits);
  return out;
}

// ---------------- model ----------------

Model::Model(ModelConfig config, Parameters params)
    : config_(config), params_(std::move(params)) {
  const auto specs = parameter_specs(config_);
  require(params_.size() == specs.size(),
          "parameter set has " + std::to_string(params_.size()) + " records; this configuration "
          "needs " + std::to_string(specs.size()));
  for (size_t i = 0; i < specs.size(); ++i) {
    require(params_.names[i] == specs[i].name, "parameter " + std::to_string(i) + " is '" +
                                                   params_.names[i] + "'; expected '" +
                                                   specs[i].name + "'");
    require(params_.values[i].shape() == specs[i].shape,
            "parameter '" + specs[i].name + "' has shape " +
                ad::shape_str(params_.values[i].shape()) + "; expected " +
                ad::shape_str(specs[i].shape));
  }
}

Model Model::init(const ModelConfig& config, uint64_t seed) {
  Parameters ps;
  Rng rng(seed);
  for (const ParamSpec& spec : parameter_specs(config)) {
    ad::Tensor t(spec.shape, spec.init_const);
    if (spec.fan_in > 0) {
      const double bound = std::sqrt(1.0 / spec.fan_in);
      float* p = t.data();
      const int64_t n = t.numel();
      for (int64_t i = 0; i < n; ++i) p[i] = static_cast<float>(rng.uniform(-bound, bound));
    }
    ps.add(spec.name, std::move(t));
  }
  return Model(config, std::move(ps));
}

ModelOutput Model::forward(const ad::Tensor& x, bool train, uint64_t dropout_seed) const {
  return forward_with(config_, params_.values, x, train, dropout_seed);
}

ModelOutput Model::forward_tracked(ad::Tape& tape, std::vector<ad::Tensor>& bound,
                                   const ad::Tensor& x, bool train, uint64_t dropout_seed) const {
  bound.clear();
  bound.reserve(params_.size());
  for (const ad::Tensor& t : params_.values) bound.push_back(tape.watch(t));
  return forward_with(config_, bound, x, train, dropout_seed);
}

// ---------------- checkpoints ----------------

namespace {

void encode_f32le(const float* src, int64_t n, std::string& buf) {
  buf.resize(static_cast<size_t>(n) * 4);
  for (int64_t i = 0; i < n; ++i) {
    uint32_t bits = 0;
    std::memcpy(&bits, &src[i], 4);
    buf[static_cast<size_t>(i) * 4 + 0] = static_cast<char>(bits & 0xff);
    buf[static_cast<size_t>(i) * 4 + 1] = static_cast<char>((bits >> 8) & 0xff);
    buf[static_cast<size_t>(i) * 4 + 2] = static_cast<char>((bits >> 16) & 0xff);
    buf[static_cast<size_t>(i) * 4 + 3] = static_cast<char>((bits >> 24) & 0xff);
  }
}

void decode_f32le(const std::string& buf, int64_t n, float* dst) {
  const unsigned char* p = reinterpret_cast<const unsigned char*>(buf.data());
  for (int64_t i = 0; i < n; ++i) {
    const uint32_t bits = static_cast<uint32_t>(p[i * 4 + 0]) |
                          (static_cast<uint32_t>(p[i * 4 + 1]) << 8) |
                          (static_cast<uint32_t>(p[i * 4 + 2]) << 16) |
                          (static_cast<uint32_t>(p[i * 4 + 3]) << 24);
    std::memcpy(&dst[i], &bits, 4);
  }
}

}  // namespace

void save_checkpoint(const std::string& path, const Model& model) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) fail("cannot open checkpoint file for writing: " + path);
  const Parameters& ps = model.params();
  std::string head = "BTSCKPT 1 " + std::to_string(ps.size()) + "\n" + model.config().to_text() +
                     "\n";
  f.write(head.data(), static_cast<std::streamsize>(head.size()));
  std::string payload;
  for (size_t i = 0; i < ps.size(); ++i) {
    const ad::Tensor& t = ps.values[i];
    std::string rec = ps.names[i] + " " + std::to_string(t.ndim());
    for (int d = 0; d < t.ndim(); ++d) rec += " " + std::to_string(t.dim(d));
    rec += "\n";
    f.write(rec.data(), static_cast<std::streamsize>(rec.size()));
    encode_f32le(t.data(), t.numel(), payload);
    f.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  }
  f.flush();
  if (!f) fail("failed while writing checkpoint: " + path);
}

Model load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail("cannot open checkpoint file: " + path);
  std::string line;
  if (!std::getline(f, line)) fail("checkpoint file is empty: " + path);
  std::istringstream head(line);
  std::string magic;
  long version = -1;
  long count = -1;
  head >> magic >> version >> count;
  if (magic != "BTSCKPT") fail("not a checkpoint file (bad magic): " + path);
  if (version != 1)
    fail("unsupported checkpoint version " + std::to_string(version) + " in " + path);
  if (head.fail() || count < 0) fail("malformed checkpoint header in " + path);

  if (!std::getline(f, line)) fail("checkpoint is missing its config line: " + path);
  ModelConfig cfg = ModelConfig::from_text(line);

  Parameters ps;
  std::string payload;
  for (long i = 0; i < count; ++i) {
    if (!std::getline(f, line))
      fail("checkpoint truncated before record " + std::to_string(i) + ": " + path);
    std::istringstream rec(line);
    std::string name;
    int ndim = -1;
    rec >> name >> ndim;
    if (rec.fail() || name.empty() || ndim < 1 || ndim > 8)
      fail("malformed record header '" + line + "' in " + path);
    ad::Shape shape(static_cast<size_t>(ndim));
    for (int d = 0; d < ndim; ++d) {
      rec >> shape[static_cast<size_t>(d)];
      if (rec.fail() || shape[static_cast<size_t>(d)] < 1)
        fail("malformed record header '" + line + "' in " + path);
    }
    std::string extra;
    if (rec >> extra) fail("malformed record header '" + line + "' in " + path);
    const int64_t n = ad::shape_numel(shape);
    payload.resize(static_cast<size_t>(n) * 4);
    f.read(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (f.gcount() != static_cast<std::streamsize>(payload.size()))
      fail("checkpoint payload truncated for '" + name + "' in " + path);
    ad::Tensor t(shape, 0.0f);
    decode_f32le(payload, n, t.data());
    ps.add(name, std::move(t));
  }
  if (f.peek() != std::ifstream::traits_type::eof())
    fail("trailing bytes after the last record in " + path);
  return Model(cfg, std::move(ps));
}

}  // namespace bts::model
