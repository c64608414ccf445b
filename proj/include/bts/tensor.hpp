#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace bts::ad {

using Shape = std::vector<int>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

class Tape;

// Dense row-major float32 tensor. Copying a Tensor shares the underlying
// buffer; tensors are treated as immutable once an op has produced them.
// A tensor is "tracked" when a Tape recorded it (leaf via Tape::watch or op
// output); untracked tensors flow through ops as constants.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, std::vector<float> values);
  static Tensor scalar(float v) { return Tensor({1}, std::vector<float>{v}); }

  const Shape& shape() const { return shape_; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  // Dimension i; negative indices count from the end.
  int dim(int i) const;
  int64_t numel() const;
  bool defined() const { return static_cast<bool>(data_); }

  float* data() { return data_->data(); }
  const float* data() const { return data_->data(); }
  const std::shared_ptr<std::vector<float>>& storage() const { return data_; }

  // Value of a single-element tensor.
  float item() const;

  bool tracked() const { return node_ >= 0; }
  int node() const { return node_; }
  Tape* tape() const { return tape_; }

 private:
  Shape shape_;
  std::shared_ptr<std::vector<float>> data_;
  Tape* tape_ = nullptr;
  int node_ = -1;

  friend class Tape;
};

// Reverse-mode gradient tape. Ops append nodes during the forward pass; each
// node stores its parents and a closure that folds the node's output gradient
// into the parents' gradient buffers. backward() seeds a scalar root with 1
// and walks the nodes in reverse creation order.
class Tape {
 public:
  // dy: gradient w.r.t. the node output (length = output numel).
  // dparents: per input, a buffer of the input's numel to accumulate into,
  // or nullptr when that input is untracked.
  using BackwardFn = std::function<void(const float* dy, const std::vector<float*>& dparents)>;

  // Registers `value` as a differentiable leaf; returns the tracked handle.
  Tensor watch(const Tensor& value);

  // Records an op node. `inputs` may mix tracked and untracked tensors;
  // untracked inputs receive a nullptr gradient slot in the backward call.
  Tensor record(Shape out_shape, std::vector<float> out_data,
                const std::vector<const Tensor*>& inputs, BackwardFn fn);
  // Same, but the output aliases an existing buffer (used by reshape).
  Tensor record_shared(Shape out_shape, std::shared_ptr<std::vector<float>> out_data,
                       const std::vector<const Tensor*>& inputs, BackwardFn fn);

  // Runs reverse accumulation from a scalar (numel == 1) tracked tensor.
  void backward(const Tensor& root);

  // Gradient of a tracked tensor after backward(); all-zero if the tensor
  // did not influence the root.
  Tensor grad(const Tensor& t) const;

  size_t node_count() const { return nodes_.size(); }

  // Drops all nodes and gradients (the tape can be reused afterwards).
  void clear();

 private:
  struct Node {
    std::vector<int> parents;          // node ids; -1 marks untracked inputs
    std::vector<int64_t> parent_numel;
    BackwardFn fn;
    int64_t numel = 0;
  };

  Tensor attach(Shape out_shape, std::shared_ptr<std::vector<float>> out_data,
                const std::vector<const Tensor*>& inputs, BackwardFn fn);

  std::vector<Node> nodes_;
  std::vector<std::vector<float>> grads_;
};

}  // namespace bts::ad
