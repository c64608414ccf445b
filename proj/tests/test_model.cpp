#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "bts/model.hpp"
#include "bts/ops.hpp"
#include "bts/rng.hpp"
#include "testutil.hpp"

using namespace bts;
using ad::Shape;
using ad::Tensor;
namespace fs = std::filesystem;

namespace {

model::ModelConfig tiny_config() {
  model::ModelConfig c;
  c.in_channels = 3;
  c.conv_channels = 8;
  c.norm_groups = 4;
  c.gru_hidden = 4;
  c.gru_layers = 2;
  c.mfcc_dim = 6;
  c.n_classes = 5;
  return c;
}

Tensor random_input(int b, int ch, int len, uint64_t seed, double amp = 1.0) {
  Rng rng(seed);
  Tensor x(Shape{b, ch, len});
  float* p = x.data();
  for (int64_t i = 0; i < x.numel(); ++i) p[i] = static_cast<float>(rng.uniform(-amp, amp));
  return x;
}

std::vector<double> to_doubles(const Tensor& t) {
  std::vector<double> out(static_cast<size_t>(t.numel()));
  for (int64_t i = 0; i < t.numel(); ++i) out[static_cast<size_t>(i)] = t.data()[i];
  return out;
}

bool bytes_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data(), b.data(), static_cast<size_t>(a.numel()) * sizeof(float)) == 0;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE(static_cast<bool>(f));
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

void spew(const fs::path& p, const std::string& bytes) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  REQUIRE(static_cast<bool>(f));
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

// ---------------------------------------------------------------------------
// Double-precision reference network: the same architecture written as plain
// loops. Used both to cross-check forward values and as the 64-bit function
// that finite differences are taken on.
// ---------------------------------------------------------------------------

double dsigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

struct RefOut {
  int batch = 0;
  int t_out = 0;
  std::vector<double> mfcc;      // (B, T, M)
  std::vector<double> logprobs;  // (B, T, K)
};

RefOut ref_forward(const model::ModelConfig& c, const std::vector<std::vector<double>>& p,
                   const std::vector<double>& x, int batch, int len) {
  size_t pi = 0;
  const auto [pad_l, pad_r] = model::conv_padding(c.kernel, c.stride_per_block);
  std::vector<double> cur = x;
  int cin = c.in_channels;
  int length = len;
  for (int b = 0; b < c.n_blocks; ++b) {
    const auto& w = p[pi++];
    const auto& bias = p[pi++];
    const auto& gamma = p[pi++];
    const auto& beta = p[pi++];
    const double slope = p[pi++][0];
    const int fan = cin * c.kernel;
    std::vector<double> ws(w.size());
    for (int co = 0; co < c.conv_channels; ++co) {
      double m = 0.0;
      for (int i = 0; i < fan; ++i) m += w[static_cast<size_t>(co) * fan + i];
      m /= fan;
      double v = 0.0;
      for (int i = 0; i < fan; ++i) {
        const double d = w[static_cast<size_t>(co) * fan + i] - m;
        v += d * d;
      }
      v /= fan;
      const double inv = 1.0 / std::sqrt(v + model::kNormEps);
      for (int i = 0; i < fan; ++i)
        ws[static_cast<size_t>(co) * fan + i] = (w[static_cast<size_t>(co) * fan + i] - m) * inv;
    }
    const int lout = (length + pad_l + pad_r - c.kernel) / c.stride_per_block + 1;
    std::vector<double> y(static_cast<size_t>(batch) * c.conv_channels * lout, 0.0);
    for (int bb = 0; bb < batch; ++bb) {
      for (int co = 0; co < c.conv_channels; ++co) {
        for (int t = 0; t < lout; ++t) {
          double acc = bias[static_cast<size_t>(co)];
          for (int ci = 0; ci < cin; ++ci) {
            for (int kk = 0; kk < c.kernel; ++kk) {
              const int pos = t * c.stride_per_block + kk - pad_l;
              if (pos >= 0 && pos < length)
                acc += ws[(static_cast<size_t>(co) * cin + ci) * c.kernel + kk] *
                       cur[(static_cast<size_t>(bb) * cin + ci) * length + pos];
            }
          }
          y[(static_cast<size_t>(bb) * c.conv_channels + co) * lout + t] = acc;
        }
      }
    }
    const int cs = c.conv_channels / c.norm_groups;
    const int gsz = cs * lout;
    for (int bb = 0; bb < batch; ++bb) {
      for (int g = 0; g < c.norm_groups; ++g) {
        const size_t base = (static_cast<size_t>(bb) * c.conv_channels + g * cs) *
                            static_cast<size_t>(lout);
        double m = 0.0;
        for (int i = 0; i < gsz; ++i) m += y[base + i];
        m /= gsz;
        double v = 0.0;
        for (int i = 0; i < gsz; ++i) {
          const double d = y[base + i] - m;
          v += d * d;
        }
        v /= gsz;
        const double inv = 1.0 / std::sqrt(v + model::kNormEps);
        for (int cc = 0; cc < cs; ++cc) {
          const int ci = g * cs + cc;
          for (int t = 0; t < lout; ++t) {
            const size_t i = base + static_cast<size_t>(cc) * lout + t;
            y[i] = gamma[static_cast<size_t>(ci)] * ((y[i] - m) * inv) +
                   beta[static_cast<size_t>(ci)];
          }
        }
      }
    }
    for (double& v : y) v = v >= 0.0 ? v : slope * v;
    cur = std::move(y);
    cin = c.conv_channels;
    length = lout;
  }

  const int t_len = length;
  std::vector<double> seq(static_cast<size_t>(t_len) * batch * cin);
  for (int t = 0; t < t_len; ++t)
    for (int bb = 0; bb < batch; ++bb)
      for (int ci = 0; ci < cin; ++ci)
        seq[(static_cast<size_t>(t) * batch + bb) * cin + ci] =
            cur[(static_cast<size_t>(bb) * cin + ci) * t_len + t];
  int in_dim = cin;
  const int hidden = c.gru_hidden;
  const int h3 = 3 * hidden;
  for (int l = 0; l < c.gru_layers; ++l) {
    auto scan = [&](const std::vector<double>& w_ih, const std::vector<double>& w_hh,
                    const std::vector<double>& b_ih, const std::vector<double>& b_hh,
                    bool reverse) {
      std::vector<double> out(static_cast<size_t>(t_len) * batch * hidden);
      std::vector<double> hstate(static_cast<size_t>(batch) * hidden, 0.0);
      std::vector<double> gx(static_cast<size_t>(h3)), gh(static_cast<size_t>(h3));
      std::vector<double> hnew(static_cast<size_t>(hidden));
      for (int step = 0; step < t_len; ++step) {
        const int t = reverse ? t_len - 1 - step : step;
        for (int bb = 0; bb < batch; ++bb) {
          const double* xt = &seq[(static_cast<size_t>(t) * batch + bb) * in_dim];
          double* hrow = &hstate[static_cast<size_t>(bb) * hidden];
          for (int j = 0; j < h3; ++j) {
            double s = b_ih[static_cast<size_t>(j)];
            for (int i = 0; i < in_dim; ++i) s += xt[i] * w_ih[static_cast<size_t>(i) * h3 + j];
            gx[static_cast<size_t>(j)] = s;
          }
          for (int j = 0; j < h3; ++j) {
            double s = b_hh[static_cast<size_t>(j)];
            for (int i = 0; i < hidden; ++i) s += hrow[i] * w_hh[static_cast<size_t>(i) * h3 + j];
            gh[static_cast<size_t>(j)] = s;
          }
          for (int j = 0; j < hidden; ++j) {
            const double r = dsigmoid(gx[static_cast<size_t>(j)] + gh[static_cast<size_t>(j)]);
            const double z = dsigmoid(gx[static_cast<size_t>(hidden + j)] +
                                      gh[static_cast<size_t>(hidden + j)]);
            const double n = std::tanh(gx[static_cast<size_t>(2 * hidden + j)] +
                                       r * gh[static_cast<size_t>(2 * hidden + j)]);
            hnew[static_cast<size_t>(j)] = n + z * (hrow[j] - n);
          }
          for (int j = 0; j < hidden; ++j) {
            hrow[j] = hnew[static_cast<size_t>(j)];
            out[(static_cast<size_t>(t) * batch + bb) * hidden + j] = hrow[j];
          }
        }
      }
      return out;
    };
    const auto& fw_ih = p[pi++];
    const auto& fw_hh = p[pi++];
    const auto& fb_ih = p[pi++];
    const auto& fb_hh = p[pi++];
    std::vector<double> fwd = scan(fw_ih, fw_hh, fb_ih, fb_hh, false);
    if (c.bidirectional) {
      const auto& bw_ih = p[pi++];
      const auto& bw_hh = p[pi++];
      const auto& bb_ih = p[pi++];
      const auto& bb_hh = p[pi++];
      std::vector<double> bwd = scan(bw_ih, bw_hh, bb_ih, bb_hh, true);
      std::vector<double> nxt(static_cast<size_t>(t_len) * batch * 2 * hidden);
      for (size_t rb = 0; rb < static_cast<size_t>(t_len) * batch; ++rb) {
        for (int j = 0; j < hidden; ++j) {
          nxt[rb * 2 * hidden + static_cast<size_t>(j)] = fwd[rb * hidden + static_cast<size_t>(j)];
          nxt[rb * 2 * hidden + static_cast<size_t>(hidden + j)] =
              bwd[rb * hidden + static_cast<size_t>(j)];
        }
      }
      seq = std::move(nxt);
      in_dim = 2 * hidden;
    } else {
      seq = std::move(fwd);
      in_dim = hidden;
    }
  }

  const auto& wm = p[pi++];
  const auto& bm = p[pi++];
  const auto& wp = p[pi++];
  const auto& bp = p[pi++];
  RefOut o;
  o.batch = batch;
  o.t_out = t_len;
  o.mfcc.resize(static_cast<size_t>(batch) * t_len * c.mfcc_dim);
  o.logprobs.resize(static_cast<size_t>(batch) * t_len * c.n_classes);
  std::vector<double> logits(static_cast<size_t>(c.n_classes));
  for (int bb = 0; bb < batch; ++bb) {
    for (int t = 0; t < t_len; ++t) {
      const double* f = &seq[(static_cast<size_t>(t) * batch + bb) * in_dim];
      for (int mi = 0; mi < c.mfcc_dim; ++mi) {
        double s = bm[static_cast<size_t>(mi)];
        for (int d = 0; d < in_dim; ++d)
          s += f[d] * wm[static_cast<size_t>(d) * c.mfcc_dim + mi];
        o.mfcc[(static_cast<size_t>(bb) * t_len + t) * c.mfcc_dim + mi] = s;
      }
      double mx = -1e300;
      for (int k = 0; k < c.n_classes; ++k) {
        double s = bp[static_cast<size_t>(k)];
        for (int d = 0; d < in_dim; ++d)
          s += f[d] * wp[static_cast<size_t>(d) * c.n_classes + k];
        logits[static_cast<size_t>(k)] = s;
        mx = std::max(mx, s);
      }
      double denom = 0.0;
      for (int k = 0; k < c.n_classes; ++k) denom += std::exp(logits[static_cast<size_t>(k)] - mx);
      const double lse = mx + std::log(denom);
      for (int k = 0; k < c.n_classes; ++k)
        o.logprobs[(static_cast<size_t>(bb) * t_len + t) * c.n_classes + k] =
            logits[static_cast<size_t>(k)] - lse;
    }
  }
  return o;
}

testutil::Sampler sampler_for(const std::string& name) {
  if (name.ends_with(".gamma")) return testutil::uniform_sampler(0.5, 1.5);
  if (name.ends_with(".beta")) return testutil::uniform_sampler(-0.3, 0.3);
  if (name.ends_with(".prelu")) return testutil::uniform_sampler(0.1, 0.6);
  return testutil::uniform_sampler(-0.6, 0.6);
}

model::GruDirection make_direction(Rng& rng, int in_dim, int hidden) {
  auto fill = [&rng](Shape s) {
    Tensor t(std::move(s));
    for (int64_t i = 0; i < t.numel(); ++i)
      t.data()[i] = static_cast<float>(rng.uniform(-0.7, 0.7));
    return t;
  };
  return model::GruDirection{fill({in_dim, 3 * hidden}), fill({hidden, 3 * hidden}),
                             fill({3 * hidden}), fill({3 * hidden})};
}

}  // namespace

TEST_CASE("config: validation accepts the default and rejects broken settings") {
  model::ModelConfig c;
  CHECK_NOTHROW(c.validate());
  CHECK(c.downsample() == 8);
  CHECK(c.gru_out_dim() == 1024);

  model::ModelConfig bad = c;
  bad.n_blocks = 2;
  CHECK_THROWS_WITH_AS(bad.validate(), doctest::Contains("downsample"), std::invalid_argument);
  bad = c;
  bad.norm_groups = 7;
  CHECK_THROWS_WITH_AS(bad.validate(), doctest::Contains("divide"), std::invalid_argument);
  bad = c;
  bad.kernel = 1;
  CHECK_THROWS_WITH_AS(bad.validate(), doctest::Contains("stride"), std::invalid_argument);
  bad = c;
  bad.dropout = 1.0;
  CHECK_THROWS_WITH_AS(bad.validate(), doctest::Contains("dropout"), std::invalid_argument);
  bad = c;
  bad.n_classes = 1;
  CHECK_THROWS_WITH_AS(bad.validate(), doctest::Contains("n_classes"), std::invalid_argument);
}

TEST_CASE("config: text serialization round-trips and rejects bad keys") {
  model::ModelConfig c = tiny_config();
  c.dropout = 0.25;
  c.bidirectional = false;
  c.gru_layers = 1;
  const std::string text = c.to_text();
  const model::ModelConfig back = model::ModelConfig::from_text(text);
  CHECK(back.to_text() == text);
  CHECK(back.in_channels == c.in_channels);
  CHECK(back.conv_channels == c.conv_channels);
  CHECK(back.gru_hidden == c.gru_hidden);
  CHECK(back.bidirectional == c.bidirectional);
  CHECK(back.dropout == 0.25);  // exactly representable, exact round trip

  // Missing keys keep defaults.
  const model::ModelConfig sparse = model::ModelConfig::from_text("in_channels=127");
  CHECK(sparse.in_channels == 127);
  CHECK(sparse.conv_channels == 512);

  CHECK_THROWS_WITH_AS(model::ModelConfig::from_text("zfcc_dim=80"),
                       doctest::Contains("unknown config key"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(model::ModelConfig::from_text("kernel=two"),
                       doctest::Contains("non-integer"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(model::ModelConfig::from_text("kernel"),
                       doctest::Contains("key=value"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(model::ModelConfig::from_text("kernel=3 kernel=3"),
                       doctest::Contains("duplicate"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(model::ModelConfig::from_text("bidirectional=maybe"),
                       doctest::Contains("true/false"), std::invalid_argument);
}

TEST_CASE("parameter specs: names, shapes, and fan-ins for the full network") {
  const model::ModelConfig c;
  const auto specs = model::parameter_specs(c);
  REQUIRE(specs.size() == 35);  // 3 blocks x 5 + 2 layers x 2 dirs x 4 + 4 head records

  CHECK(specs[0].name == "conv0.weight");
  CHECK(specs[0].shape == Shape({512, 137, 3}));
  CHECK(specs[0].fan_in == 411);
  CHECK(specs[5].name == "conv1.weight");
  CHECK(specs[5].shape == Shape({512, 512, 3}));
  CHECK(specs[5].fan_in == 1536);

  auto find = [&specs](const std::string& name) -> const model::ParamSpec& {
    for (const auto& s : specs)
      if (s.name == name) return s;
    FAIL("missing parameter spec: ", name);
    return specs[0];
  };
  CHECK(find("gru0.fwd.w_ih").shape == Shape({512, 1536}));
  CHECK(find("gru0.bwd.w_hh").shape == Shape({512, 1536}));
  CHECK(find("gru1.fwd.w_ih").shape == Shape({1024, 1536}));  // fed by both directions
  CHECK(find("gru1.fwd.w_ih").fan_in == 1024);
  CHECK(find("gru0.fwd.b_ih").shape == Shape({1536}));
  CHECK(find("head_mfcc.weight").shape == Shape({1024, 80}));
  CHECK(find("head_phoneme.weight").shape == Shape({1024, 40}));
  CHECK(find("head_phoneme.bias").fan_in == 1024);

  // Unidirectional variant: no .bwd records and layer 1 reads H, not 2H.
  model::ModelConfig uni = tiny_config();
  uni.bidirectional = false;
  const auto uspecs = model::parameter_specs(uni);
  CHECK(uspecs.size() == 15 + 8 + 4);
  for (const auto& s : uspecs) CHECK(s.name.find(".bwd.") == std::string::npos);
  for (const auto& s : uspecs)
    if (s.name == "gru1.fwd.w_ih") CHECK(s.shape == Shape({4, 12}));
}

TEST_CASE("parameter registry: ordered lookup, duplicates, totals") {
  model::Parameters ps;
  ps.add("a", Tensor(Shape{2, 3}, 1.0f));
  ps.add("b", Tensor(Shape{4}, 2.0f));
  CHECK(ps.size() == 2);
  CHECK(ps.total_elements() == 10);
  CHECK(ps.index_of("a") == 0);
  CHECK(ps.index_of("missing") == -1);
  CHECK(ps.at("b").dim(0) == 4);
  CHECK_THROWS_WITH_AS(ps.at("missing"), doctest::Contains("missing"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(ps.add("a", Tensor(Shape{1}, 0.f)), doctest::Contains("duplicate"),
                       std::invalid_argument);
}

TEST_CASE("init: deterministic per seed, seed-sensitive, and bounded by fan-in") {
  model::ModelConfig c;
  c.in_channels = 50;  // conv0 fan-in = 50 * kernel 2 = 100 -> bound 0.1
  c.kernel = 2;
  c.conv_channels = 8;
  c.norm_groups = 4;
  c.gru_hidden = 3;
  c.gru_layers = 1;
  c.mfcc_dim = 4;
  c.n_classes = 4;

  const model::Model m1 = model::Model::init(c, 42);
  const model::Model m2 = model::Model::init(c, 42);
  const model::Model m3 = model::Model::init(c, 43);
  const auto specs = model::parameter_specs(c);
  REQUIRE(m1.params().size() == specs.size());

  bool any_diff = false;
  for (size_t i = 0; i < specs.size(); ++i) {
    CHECK(bytes_equal(m1.params().values[i], m2.params().values[i]));
    if (!bytes_equal(m1.params().values[i], m3.params().values[i])) any_diff = true;

    const Tensor& t = m1.params().values[i];
    if (specs[i].fan_in > 0) {
      const double bound = std::sqrt(1.0 / specs[i].fan_in);
      double mx = 0.0;
      for (int64_t j = 0; j < t.numel(); ++j)
        mx = std::max(mx, std::abs(static_cast<double>(t.data()[j])));
      CHECK(mx <= bound + 1e-12);
      if (t.numel() >= 50) CHECK(mx >= 0.5 * bound);  // draws actually spread out
    } else {
      for (int64_t j = 0; j < t.numel(); ++j) CHECK(t.data()[j] == specs[i].init_const);
    }
  }
  CHECK(any_diff);

  CHECK(m1.params().at("conv0.prelu").item() == 0.25f);
  CHECK(m1.params().at("conv0.gamma").data()[0] == 1.0f);
  CHECK(m1.params().at("conv0.beta").data()[0] == 0.0f);
}

TEST_CASE("forward: full-width shape contract and row-normalized phoneme output") {
  const model::ModelConfig c;  // 137 channels, conv 512, hidden 512, heads 80/40
  const model::Model m = model::Model::init(c, 1);
  const Tensor x = random_input(2, 137, 2048, 7, 0.5);
  const model::ModelOutput out = m.forward(x);

  CHECK(out.conv_shape == Shape({2, 512, 256}));
  CHECK(out.gru_shape == Shape({2, 256, 1024}));
  CHECK(out.mfcc.shape() == Shape({2, 256, 80}));
  CHECK(out.phoneme_logits.shape() == Shape({2, 256, 40}));
  CHECK(out.phoneme_logprobs.shape() == Shape({2, 256, 40}));

  // exp(logprobs) rows are probability distributions.
  const float* lp = out.phoneme_logprobs.data();
  double worst = 0.0;
  for (int row = 0; row < 2 * 256; ++row) {
    double s = 0.0;
    for (int k = 0; k < 40; ++k) s += std::exp(static_cast<double>(lp[row * 40 + k]));
    worst = std::max(worst, std::abs(s - 1.0));
  }
  CHECK(worst < 1e-5);

  // EEG-only input width and the shortest legal sequence.
  model::ModelConfig eeg = c;
  eeg.in_channels = 127;
  const model::Model me = model::Model::init(eeg, 2);
  const model::ModelOutput oe = me.forward(random_input(1, 127, 16, 9));
  CHECK(oe.mfcc.shape() == Shape({1, 2, 80}));
  CHECK(oe.phoneme_logprobs.shape() == Shape({1, 2, 40}));
}

TEST_CASE("forward: output length is input length / 8 across lengths") {
  const model::ModelConfig c = tiny_config();
  const model::Model m = model::Model::init(c, 5);
  for (int len : {8, 16, 64}) {
    const model::ModelOutput out = m.forward(random_input(1, c.in_channels, len, 11));
    CHECK(out.mfcc.shape() == Shape({1, len / 8, c.mfcc_dim}));
  }
}

TEST_CASE("forward: rejects wrong rank, channel count, and length") {
  const model::ModelConfig c = tiny_config();
  const model::Model m = model::Model::init(c, 5);
  CHECK_THROWS_WITH_AS(m.forward(Tensor(Shape{3, 16}, 0.f)),
                       doctest::Contains("(batch, channels, length)"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(m.forward(random_input(1, 5, 16, 1)),
                       doctest::Contains("the model expects 3"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(m.forward(random_input(1, 3, 12, 1)),
                       doctest::Contains("not divisible by 8"), std::invalid_argument);
}

TEST_CASE("forward: eval passes are identical; dropout is gated by the train flag and seed") {
  model::ModelConfig c = tiny_config();
  c.dropout = 0.5;
  const model::Model m = model::Model::init(c, 21);
  const Tensor x = random_input(1, c.in_channels, 32, 3);

  const model::ModelOutput a = m.forward(x, false, 0);
  const model::ModelOutput b = m.forward(x, false, 0);
  CHECK(bytes_equal(a.mfcc, b.mfcc));
  CHECK(bytes_equal(a.phoneme_logprobs, b.phoneme_logprobs));

  // The dropout seed is irrelevant outside training.
  const model::ModelOutput b2 = m.forward(x, false, 99);
  CHECK(bytes_equal(a.mfcc, b2.mfcc));

  // Training: same seed reproduces, different seeds differ.
  const model::ModelOutput t1 = m.forward(x, true, 7);
  const model::ModelOutput t2 = m.forward(x, true, 7);
  const model::ModelOutput t3 = m.forward(x, true, 8);
  CHECK(bytes_equal(t1.mfcc, t2.mfcc));
  CHECK_FALSE(bytes_equal(t1.mfcc, t3.mfcc));
  CHECK_FALSE(bytes_equal(t1.mfcc, a.mfcc));

  // With a single recurrent layer there is no dropout site at all.
  model::ModelConfig c1 = tiny_config();
  c1.dropout = 0.5;
  c1.gru_layers = 1;
  const model::Model m1 = model::Model::init(c1, 21);
  const Tensor x1 = random_input(1, c1.in_channels, 32, 3);
  CHECK(bytes_equal(m1.forward(x1, true, 7).mfcc, m1.forward(x1, false, 0).mfcc));
}

TEST_CASE("forward matches a double-precision reference network") {
  struct Case {
    model::ModelConfig cfg;
    int batch;
    int len;
  };
  std::vector<Case> cases;
  cases.push_back({tiny_config(), 2, 24});
  model::ModelConfig uni;
  uni.in_channels = 2;
  uni.conv_channels = 6;
  uni.norm_groups = 2;
  uni.gru_hidden = 3;
  uni.gru_layers = 1;
  uni.bidirectional = false;
  uni.mfcc_dim = 4;
  uni.n_classes = 4;
  cases.push_back({uni, 1, 16});

  for (const Case& tc : cases) {
    CAPTURE(tc.cfg.to_text());
    const model::Model m = model::Model::init(tc.cfg, 77);
    const Tensor x = random_input(tc.batch, tc.cfg.in_channels, tc.len, 13);

    std::vector<std::vector<double>> pd;
    for (const Tensor& t : m.params().values) pd.push_back(to_doubles(t));
    const RefOut ref = ref_forward(tc.cfg, pd, to_doubles(x), tc.batch, tc.len);
    const model::ModelOutput out = m.forward(x);

    REQUIRE(out.mfcc.numel() == static_cast<int64_t>(ref.mfcc.size()));
    REQUIRE(out.phoneme_logprobs.numel() == static_cast<int64_t>(ref.logprobs.size()));
    double worst = 0.0;
    for (size_t i = 0; i < ref.mfcc.size(); ++i)
      worst = std::max(worst, std::abs(out.mfcc.data()[i] - ref.mfcc[i]));
    for (size_t i = 0; i < ref.logprobs.size(); ++i)
      worst = std::max(worst, std::abs(out.phoneme_logprobs.data()[i] - ref.logprobs[i]));
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("recurrent scan: reversing time with swapped directions mirrors the output") {
  Rng rng(31);
  const int t_len = 5, batch = 2, in_dim = 4, hidden = 3;
  const model::GruDirection f = make_direction(rng, in_dim, hidden);
  const model::GruDirection b = make_direction(rng, in_dim, hidden);
  Tensor seq(Shape{t_len, batch, in_dim});
  for (int64_t i = 0; i < seq.numel(); ++i)
    seq.data()[i] = static_cast<float>(rng.uniform(-1.0, 1.0));

  const Tensor y = model::bigru_layer(seq, f, b);
  const Tensor z = ad::flip(model::bigru_layer(ad::flip(seq, 0), b, f), 0);
  REQUIRE(y.shape() == Shape({t_len, batch, 2 * hidden}));
  for (int t = 0; t < t_len; ++t) {
    for (int bb = 0; bb < batch; ++bb) {
      const float* yr = y.data() + (t * batch + bb) * 2 * hidden;
      const float* zr = z.data() + (t * batch + bb) * 2 * hidden;
      for (int j = 0; j < hidden; ++j) {
        CHECK(yr[j] == zr[hidden + j]);  // forward half == mirrored reverse half
        CHECK(yr[hidden + j] == zr[j]);
      }
    }
  }
}

TEST_CASE("forward: every output step can see both ends of the input") {
  const model::ModelConfig c = tiny_config();
  const model::Model m = model::Model::init(c, 17);
  Tensor x = random_input(1, c.in_channels, 32, 23);
  const model::ModelOutput base = m.forward(x);
  const int t_out = base.mfcc.dim(1);

  auto bumped = [&](int sample) {
    Tensor y(x.shape(), std::vector<float>(x.data(), x.data() + x.numel()));
    for (int ch = 0; ch < c.in_channels; ++ch) y.data()[ch * 32 + sample] += 1.0f;
    return m.forward(y);
  };
  auto frame_diff = [&](const model::ModelOutput& o, int frame) {
    double d = 0.0;
    for (int j = 0; j < c.mfcc_dim; ++j) {
      const int64_t i = static_cast<int64_t>(frame) * c.mfcc_dim + j;
      d = std::max(d, std::abs(static_cast<double>(o.mfcc.data()[i]) - base.mfcc.data()[i]));
    }
    return d;
  };

  // Perturbing the last input sample must reach the first output frame, and
  // vice versa (recurrence carries information across the whole sequence).
  CHECK(frame_diff(bumped(31), 0) > 0.0);
  CHECK(frame_diff(bumped(0), t_out - 1) > 0.0);
}

TEST_CASE("backward: gradient reaches every parameter") {
  const model::ModelConfig c = tiny_config();  // 8 channels / 4 groups keeps GN from
                                               // cancelling the conv bias exactly
  const model::Model m = model::Model::init(c, 3);
  ad::Tape tape;
  std::vector<Tensor> bound;
  const model::ModelOutput out =
      m.forward_tracked(tape, bound, random_input(2, c.in_channels, 16, 29), false, 0);
  const Tensor root = ad::add(ad::sum(out.mfcc), ad::sum(out.phoneme_logprobs));
  tape.backward(root);

  REQUIRE(bound.size() == m.params().size());
  for (size_t i = 0; i < bound.size(); ++i) {
    const Tensor g = tape.grad(bound[i]);
    double norm = 0.0;
    for (int64_t j = 0; j < g.numel(); ++j)
      norm += static_cast<double>(g.data()[j]) * g.data()[j];
    CAPTURE(m.params().names[i]);
    CHECK(norm > 0.0);
  }
}

TEST_CASE("backward: gradients match finite differences on the double reference") {
  Rng rng(2024);

  auto run_case = [&rng](const model::ModelConfig& cfg, int batch, int len) {
    const auto specs = model::parameter_specs(cfg);
    std::vector<Shape> shapes;
    std::vector<testutil::Sampler> samplers;
    for (const auto& s : specs) {
      shapes.push_back(s.shape);
      samplers.push_back(sampler_for(s.name));
    }
    shapes.push_back({batch, cfg.in_channels, len});
    samplers.push_back(testutil::uniform_sampler(-1.0, 1.0));

    auto op = [&cfg](const std::vector<Tensor>& in) {
      const std::vector<Tensor> prm(in.begin(), in.end() - 1);
      const model::ModelOutput out = model::forward_with(cfg, prm, in.back(), false, 0);
      return ad::add(ad::sum(out.mfcc), ad::sum(out.phoneme_logprobs));
    };
    auto ref = [&cfg, batch, len](const std::vector<std::vector<double>>& in) {
      const std::vector<std::vector<double>> prm(in.begin(), in.end() - 1);
      const RefOut o = ref_forward(cfg, prm, in.back(), batch, len);
      double s = 0.0;
      for (double v : o.mfcc) s += v;
      for (double v : o.logprobs) s += v;
      return s;
    };
    return testutil::check_gradient_vs_ref(op, ref, shapes, samplers, rng);
  };

  const model::ModelConfig a = tiny_config();
  CHECK(run_case(a, 2, 24) < 1e-3);
  CHECK(run_case(a, 1, 16) < 1e-3);

  model::ModelConfig uni;
  uni.in_channels = 2;
  uni.conv_channels = 6;
  uni.norm_groups = 2;
  uni.gru_hidden = 3;
  uni.gru_layers = 1;
  uni.bidirectional = false;
  uni.mfcc_dim = 4;
  uni.n_classes = 4;
  CHECK(run_case(uni, 1, 16) < 1e-3);
}

TEST_CASE("model construction validates the parameter set") {
  const model::ModelConfig c = tiny_config();
  const model::Model m = model::Model::init(c, 3);

  model::Parameters swapped = m.params();
  std::swap(swapped.names[0], swapped.names[1]);
  std::swap(swapped.values[0], swapped.values[1]);
  CHECK_THROWS_WITH_AS(model::Model(c, swapped), doctest::Contains("expected"),
                       std::invalid_argument);

  model::Parameters misshapen = m.params();
  misshapen.values[0] = Tensor(Shape{1, 2, 3}, 0.f);
  CHECK_THROWS_WITH_AS(model::Model(c, misshapen), doctest::Contains("shape"),
                       std::invalid_argument);

  model::Parameters truncated = m.params();
  truncated.names.pop_back();
  truncated.values.pop_back();
  CHECK_THROWS_WITH_AS(model::Model(c, truncated), doctest::Contains("records"),
                       std::invalid_argument);
}

TEST_CASE("checkpoints: round trip exactly, rewrite stably, reject damage") {
  model::ModelConfig c = tiny_config();
  c.dropout = 0.125;
  const model::Model m = model::Model::init(c, 99);
  const fs::path dir = fs::temp_directory_path();
  const fs::path p1 = dir / "net_ckpt_roundtrip.bin";
  const fs::path p2 = dir / "net_ckpt_rewrite.bin";

  model::save_checkpoint(p1.string(), m);
  const model::Model back = model::load_checkpoint(p1.string());
  CHECK(back.config().to_text() == c.to_text());
  REQUIRE(back.params().size() == m.params().size());
  for (size_t i = 0; i < m.params().size(); ++i) {
    CHECK(back.params().names[i] == m.params().names[i]);
    CHECK(bytes_equal(back.params().values[i], m.params().values[i]));
  }

  model::save_checkpoint(p2.string(), back);
  CHECK(slurp(p1) == slurp(p2));

  const std::string good = slurp(p1);

  std::string bad = good;
  bad.replace(0, 7, "NOTCKPT");
  spew(p1, bad);
  CHECK_THROWS_WITH_AS(model::load_checkpoint(p1.string()), doctest::Contains("magic"),
                       std::runtime_error);

  bad = good;
  bad.replace(good.find(" 1 "), 3, " 9 ");
  spew(p1, bad);
  CHECK_THROWS_WITH_AS(model::load_checkpoint(p1.string()), doctest::Contains("version"),
                       std::runtime_error);

  bad = good;
  bad.resize(bad.size() - 5);
  spew(p1, bad);
  CHECK_THROWS_WITH_AS(model::load_checkpoint(p1.string()), doctest::Contains("truncated"),
                       std::runtime_error);

  bad = good + "x";
  spew(p1, bad);
  CHECK_THROWS_WITH_AS(model::load_checkpoint(p1.string()), doctest::Contains("trailing"),
                       std::runtime_error);

  bad = good;
  bad.replace(good.find("mfcc_dim"), 8, "zfcc_dim");
  spew(p1, bad);
  CHECK_THROWS_WITH_AS(model::load_checkpoint(p1.string()),
                       doctest::Contains("unknown config key"), std::invalid_argument);

  fs::remove(p1);
  fs::remove(p2);
}
