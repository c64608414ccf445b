#include "bts/tensor.hpp"

#include <sstream>

#include "bts/common.hpp"

namespace bts::ad {

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) { return seq_str(s); }

Tensor::Tensor(Shape shape, float fill) : shape_(std::move(shape)) {
  for (int d : shape_) require(d > 0, "tensor dims must be positive, got " + shape_str(shape_));
  data_ = std::make_shared<std::vector<float>>(static_cast<size_t>(shape_numel(shape_)), fill);
}

Tensor::Tensor(Shape shape, std::vector<float> values) : shape_(std::move(shape)) {
  for (int d : shape_) require(d > 0, "tensor dims must be positive, got " + shape_str(shape_));
  require(static_cast<int64_t>(values.size()) == shape_numel(shape_),
          "tensor value count " + std::to_string(values.size()) + " does not match shape " +
              shape_str(shape_));
  data_ = std::make_shared<std::vector<float>>(std::move(values));
}

int Tensor::dim(int i) const {
  int n = ndim();
  if (i < 0) i += n;
  require(i >= 0 && i < n, "dim index out of range for shape " + shape_str(shape_));
  return shape_[static_cast<size_t>(i)];
}

int64_t Tensor::numel() const { return data_ ? static_cast<int64_t>(data_->size()) : 0; }

float Tensor::item() const {
  require(defined() && numel() == 1,
          "item() requires a single-element tensor, got shape " + shape_str(shape_));
  return (*data_)[0];
}

Tensor Tape::watch(const Tensor& value) {
  require(value.defined(), "cannot watch an undefined tensor");
  require(!value.tracked(), "tensor is already tracked by a tape");
  return attach(value.shape_, value.data_, {}, nullptr);
}

Tensor Tape::record(Shape out_shape, std::vector<float> out_data,
                    const std::vector<const Tensor*>& inputs, BackwardFn fn) {
  auto buf = std::make_shared<std::vector<float>>(std::move(out_data));
  return attach(std::move(out_shape), std::move(buf), inputs, std::move(fn));
}

Tensor Tape::record_shared(Shape out_shape, std::shared_ptr<std::vector<float>> out_data,
                           const std::vector<const Tensor*>& inputs, BackwardFn fn) {
  return attach(std::move(out_shape), std::move(out_data), inputs, std::move(fn));
}

Tensor Tape::attach(Shape out_shape, std::shared_ptr<std::vector<float>> out_data,
                    const std::vector<const Tensor*>& inputs, BackwardFn fn) {
  require(static_cast<int64_t>(out_data->size()) == shape_numel(out_shape),
          "op output buffer size does not match shape " + shape_str(out_shape));
  Node node;
  node.numel = static_cast<int64_t>(out_data->size());
  node.fn = std::move(fn);
  for (const Tensor* in : inputs) {
    require(in != nullptr && in->defined(), "op input tensor is undefined");
    if (in->tracked()) {
      require(in->tape() == this, "op inputs belong to a different tape");
      node.parents.push_back(in->node());
    } else {
      node.parents.push_back(-1);
    }
    node.parent_numel.push_back(in->numel());
  }
  Tensor out;
  out.shape_ = std::move(out_shape);
  out.data_ = std::move(out_data);
  out.tape_ = this;
  out.node_ = static_cast<int>(nodes_.size());
  nodes_.push_back(std::move(node));
  return out;
}

void Tape::backward(const Tensor& root) {
  require(root.tracked() && root.tape() == this, "backward root must be tracked by this tape");
  require(root.numel() == 1, "backward root must be a scalar, got shape " + shape_str(root.shape()));
  grads_.assign(nodes_.size(), {});
  grads_[static_cast<size_t>(root.node())] = {1.0f};
  std::vector<float*> dparents;
  for (int i = root.node(); i >= 0; --i) {
    Node& node = nodes_[static_cast<size_t>(i)];
    auto& gy = grads_[static_cast<size_t>(i)];
    if (gy.empty() || !node.fn) continue;  // never reached from root, or a leaf
    dparents.clear();
    for (size_t p = 0; p < node.parents.size(); ++p) {
      int pid = node.parents[p];
      if (pid < 0) {
        dparents.push_back(nullptr);
        continue;
      }
      auto& gp = grads_[static_cast<size_t>(pid)];
      if (gp.empty()) gp.assign(static_cast<size_t>(node.parent_numel[p]), 0.0f);
      dparents.push_back(gp.data());
    }
    node.fn(gy.data(), dparents);
    if (i != root.node()) gy = {};  // free as we go; root kept for inspection
  }
}

Tensor Tape::grad(const Tensor& t) const {
  require(t.tracked() && t.tape() == this, "grad() requires a tensor tracked by this tape");
  const auto idx = static_cast<size_t>(t.node());
  if (idx < grads_.size() && !grads_[idx].empty()) {
    return Tensor(t.shape(), grads_[idx]);
  }
  return Tensor(t.shape(), 0.0f);
}

void Tape::clear() {
  nodes_.clear();
  grads_.clear();
}

}  // namespace bts::ad
