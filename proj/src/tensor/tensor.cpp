#include "moxe/tensor.hpp"

#include <algorithm>
#include <sstream>

#include "moxe/errors.hpp"

namespace moxe {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor() : shape_{0}, data_(std::make_shared<std::vector<double>>()) {}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), data_(std::make_shared<std::vector<double>>(std::move(values))) {
  if (shape_numel(shape_) != data_->size()) {
    throw DimensionError("tensor shape " + shape_to_string(shape_) + " does not match " +
                         std::to_string(data_->size()) + " values");
  }
}

Tensor::Tensor(Shape shape, std::shared_ptr<std::vector<double>> storage)
    : shape_(std::move(shape)), data_(std::move(storage)) {
  if (!data_ || shape_numel(shape_) != data_->size()) {
    throw DimensionError("tensor shape " + shape_to_string(shape_) + " does not match its storage");
  }
}

Tensor Tensor::zeros(Shape shape) { return filled(std::move(shape), 0.0); }

Tensor Tensor::filled(Shape shape, double value) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

Tensor Tensor::vector(std::vector<double> values) {
  const auto n = values.size();
  return Tensor({n}, std::move(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
  return Tensor({rows, cols}, std::move(values));
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_to_string(shape_));
  }
  return shape_[axis];
}

std::span<const double> Tensor::values() const noexcept { return {data_->data(), data_->size()}; }

std::span<double> Tensor::mutable_values() {
  if (tracked()) throw ContractError("cannot mutate a tape-tracked tensor");
  return {data_->data(), data_->size()};
}

double Tensor::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_to_string(shape_));
  return (*data_)[0];
}

double Tensor::at(std::size_t r, std::size_t c) const {
  if (rank() != 2) throw DimensionError("at(r, c) needs a rank-2 tensor");
  return (*data_)[r * shape_[1] + c];
}

std::span<const double> Tensor::grad() const {
  if (!tape_) throw ContractError("grad() on an untracked tensor");
  return tape_->grad(*this);
}

Tensor Tensor::detach() const {
  Tensor t;
  t.shape_ = shape_;
  t.data_ = data_;
  return t;
}

Tensor Tensor::clone() const { return Tensor(shape_, *data_); }

// ---- Tape -------------------------------------------------------------------

Tensor Tape::watch(const Tensor& t) {
  Node node;
  node.value = t.data_;
  nodes_.push_back(std::move(node));
  Tensor out = t.detach();
  out.tape_ = this;
  out.node_ = nodes_.size() - 1;
  return out;
}

Tensor Tape::record(Shape shape, std::shared_ptr<std::vector<double>> values,
                    std::span<const Tensor* const> inputs, BackwardFn backward) {
  Tensor out(std::move(shape), std::move(values));
  Node node;
  node.value = out.data_;
  node.inputs.reserve(inputs.size());
  for (const Tensor* in : inputs) {
    if (in->tape_ == nullptr) {
      node.inputs.push_back(kNoNode);
    } else if (in->tape_ != this) {
      throw ContractError("op mixes tensors from different tapes");
    } else {
      node.inputs.push_back(in->node_);
    }
  }
  node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  out.tape_ = this;
  out.node_ = nodes_.size() - 1;
  return out;
}

void Tape::backward(const Tensor& root) {
  if (root.tape_ != this) throw ContractError("backward root is not tracked on this tape");
  if (root.numel() != 1) throw ContractError("backward root must be a scalar, got " + shape_to_string(root.shape()));

  // Fresh buffers for this pass; added to the persistent grads at the end so
  // that repeated passes accumulate without re-propagating old gradients.
  std::vector<std::vector<double>> pass(root.node_ + 1);
  pass[root.node_].assign(1, 1.0);
  std::vector<std::span<double>> slots;
  for (std::size_t id = root.node_ + 1; id-- > 0;) {
    Node& node = nodes_[id];
    if (pass[id].empty() || !node.backward) continue;
    slots.assign(node.inputs.size(), std::span<double>{});
    for (std::size_t j = 0; j < node.inputs.size(); ++j) {
      const auto in = node.inputs[j];
      if (in == kNoNode) continue;
      if (pass[in].empty()) pass[in].assign(nodes_[in].value->size(), 0.0);
      slots[j] = pass[in];
    }
    node.backward(pass[id], slots);
  }
  for (std::size_t id = 0; id < pass.size(); ++id) {
    if (pass[id].empty()) continue;
    auto& g = nodes_[id].grad;
    if (g.empty()) {
      g = std::move(pass[id]);
    } else {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += pass[id][i];
    }
  }
}

std::span<const double> Tape::grad(const Tensor& t) const {
  if (t.tape_ != this) throw ContractError("tensor is not tracked on this tape");
  return nodes_[t.node_].grad;
}

void Tape::zero_grad() {
  for (auto& n : nodes_) n.grad.clear();
}

}  // namespace moxe
