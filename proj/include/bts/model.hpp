#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "bts/tensor.hpp"

namespace bts::model {

// Epsilon shared by weight standardization and group normalization.
inline constexpr double kNormEps = 1e-5;

// Network hyperparameters. The defaults are the full decoding network:
// 137 input channels (127 EEG + 10 EMG), three stride-2 conv blocks into a
// 2-layer bidirectional GRU, and linear heads for 80-dim MFCC frames and 40
// phoneme classes. Tests shrink the widths but keep the block structure.
struct ModelConfig {
  int in_channels = 137;
  int conv_channels = 512;
  int n_blocks = 3;
  int stride_per_block = 2;
  int kernel = 3;
  int norm_groups = 16;
  int gru_hidden = 512;
  int gru_layers = 2;
  bool bidirectional = true;
  double dropout = 0.1;  // applied between recurrent layers while training
  int mfcc_dim = 80;
  int n_classes = 40;

  // Time downsampling of the conv stack (stride_per_block ^ n_blocks). The
  // rest of the pipeline pairs l input samples with l/8 feature frames, so
  // validate() pins this to 8.
  int downsample() const;
  // Feature width leaving the recurrent stack (2x hidden when bidirectional).
  int gru_out_dim() const { return (bidirectional ? 2 : 1) * gru_hidden; }

  void validate() const;

  // Single-line "key=value key=value ..." form used in logs and checkpoints.
  std::string to_text() const;
  // Parses to_text() output or a user-written variant. Unknown, duplicate, or
  // malformed keys are rejected; missing keys keep their defaults.
  static ModelConfig from_text(const std::string& text);
};

// Declarative description of one parameter tensor: registration order fixes
// the RNG draw order at init time, the record order in checkpoints, and the
// gradient order seen by the optimizer.
struct ParamSpec {
  std::string name;
  ad::Shape shape;
  int fan_in = 0;          // > 0: init uniform in +-sqrt(1/fan_in)
  float init_const = 0.f;  // used when fan_in == 0 (gamma, beta, prelu slope)
};

// Parameter layout for a configuration, in registration order:
//   conv{b}.{weight,bias,gamma,beta,prelu} for each block,
//   gru{l}.{fwd,bwd}.{w_ih,w_hh,b_ih,b_hh} for each layer (bwd only when
//   bidirectional), then head_mfcc.{weight,bias}, head_phoneme.{weight,bias}.
// Linear/GRU weights are stored input-major ((in, out) / (in, 3*hidden)) so
// activations right-multiply them without transposition; GRU gate columns are
// ordered [reset | update | candidate].
std::vector<ParamSpec> parameter_specs(const ModelConfig& config);

// Ordered name -> tensor registry. Tensors share their buffers, so handing
// values to an optimizer mutates the registered parameters in place.
struct Parameters {
  std::vector<std::string> names;
  std::vector<ad::Tensor> values;

  size_t size() const { return names.size(); }
  int64_t total_elements() const;
  // Index of `name`, or -1 when absent.
  int index_of(const std::string& name) const;
  ad::Tensor& at(const std::string& name);
  const ad::Tensor& at(const std::string& name) const;
  void add(const std::string& name, ad::Tensor value);
};

struct ModelOutput {
  ad::Tensor mfcc;              // (B, T, mfcc_dim)
  ad::Tensor phoneme_logits;    // (B, T, n_classes)
  ad::Tensor phoneme_logprobs;  // log-softmax of the logits, same shape
  ad::Shape conv_shape;         // (B, conv_channels, T) after the conv stack
  ad::Shape gru_shape;          // (B, T, gru_out_dim) after the recurrent stack
};

// Weights of one recurrent scan direction; see parameter_specs for layouts.
struct GruDirection {
  ad::Tensor w_ih;  // (in, 3H)
  ad::Tensor w_hh;  // (H, 3H)
  ad::Tensor b_ih;  // (3H)
  ad::Tensor b_hh;  // (3H)
};

// One GRU scan over a (T, B, in) sequence -> (T, B, H), output rows aligned
// to input time order; reverse=true scans from the last frame backwards.
// Update rule per step (gates r, z, candidate n, zero initial state):
//   r = sigmoid(x W_ir + b_ir + h W_hr + b_hr)
//   z = sigmoid(x W_iz + b_iz + h W_hz + b_hz)
//   n = tanh(x W_in + b_in + r * (h W_hn + b_hn))
//   h' = n + z * (h - n)
ad::Tensor gru_scan(const ad::Tensor& seq, const GruDirection& dir, bool reverse);

// Bidirectional layer: [forward scan | reverse scan] -> (T, B, 2H).
ad::Tensor bigru_layer(const ad::Tensor& seq, const GruDirection& fwd, const GruDirection& bwd);

// "Same"-style conv padding {left, right} that maps length L to L/stride:
// total padding kernel - stride, split with the extra sample on the left.
std::pair<int, int> conv_padding(int kernel, int stride);

// Runs the network with an explicit parameter list (parameter_specs order).
// Gradients flow to whatever tensors in `params` (and `x`) are tracked.
ModelOutput forward_with(const ModelConfig& config, const std::vector<ad::Tensor>& params,
                         const ad::Tensor& x, bool train, uint64_t dropout_seed);

class Model {
 public:
  // Validates that `params` matches parameter_specs(config) name-for-name.
  Model(ModelConfig config, Parameters params);

  // Fresh parameters: uniform +-sqrt(1/fan_in) draws from one deterministic
  // RNG stream in registration order; gamma=1, beta=0, PReLU slope=0.25.
  static Model init(const ModelConfig& config, uint64_t seed);

  const ModelConfig& config() const { return config_; }
  Parameters& params() { return params_; }
  const Parameters& params() const { return params_; }

  // Inference pass: parameters enter as constants, nothing is recorded.
  ModelOutput forward(const ad::Tensor& x, bool train = false, uint64_t dropout_seed = 0) const;

  // Training pass: registers every parameter on `tape` and returns the
  // tracked handles through `bound` (registration order), so the caller can
  // fetch per-parameter gradients after backward().
  ModelOutput forward_tracked(ad::Tape& tape, std::vector<ad::Tensor>& bound, const ad::Tensor& x,
                              bool train, uint64_t dropout_seed) const;

 private:
  ModelConfig config_;
  Parameters params_;
};

// Checkpoint file: text header "BTSCKPT 1 <n_records>", the config line, then
// per record a "name ndim d0 d1 ..." line followed by the tensor payload as
// little-endian float32. Loading validates the records against the config.
void save_checkpoint(const std::string& path, const Model& model);
Model load_checkpoint(const std::string& path);

}  // namespace bts::model
