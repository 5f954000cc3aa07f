#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace moxe {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

class Tape;

// Dense row-major array of doubles. The value buffer is shared between
// copies and never written through a tracked handle, so untracked tensors can
// be read from several threads at once. A tensor produced by an op with at
// least one tracked input is itself tracked on the same tape.
class Tensor {
 public:
  Tensor();
  Tensor(Shape shape, std::vector<double> values);
  Tensor(Shape shape, std::shared_ptr<std::vector<double>> storage);

  static Tensor zeros(Shape shape);
  static Tensor filled(Shape shape, double value);
  static Tensor scalar(double value);
  static Tensor vector(std::vector<double> values);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const noexcept { return data_ ? data_->size() : 0; }

  std::span<const double> values() const noexcept;
  // Mutable access for parameter updates; refused on tracked tensors.
  std::span<double> mutable_values();
  double item() const;
  double operator[](std::size_t i) const { return (*data_)[i]; }
  double at(std::size_t row, std::size_t col) const;

  bool tracked() const noexcept { return tape_ != nullptr; }
  Tape* tape() const noexcept { return tape_; }
  std::size_t node_id() const noexcept { return node_; }
  // Accumulated gradient of the last backward pass; empty if never reached.
  std::span<const double> grad() const;

  // Untracked handle on the same values.
  Tensor detach() const;
  // Untracked deep copy.
  Tensor clone() const;

  const std::shared_ptr<std::vector<double>>& storage() const noexcept { return data_; }

 private:
  friend class Tape;
  Shape shape_;
  std::shared_ptr<std::vector<double>> data_;
  Tape* tape_ = nullptr;
  std::size_t node_ = 0;
};

// Accumulates gradients of the op output into the gradient buffers of its
// inputs. Entries of `input_grads` are empty for untracked inputs.
using BackwardFn =
    std::function<void(std::span<const double> output_grad, std::span<const std::span<double>> input_grads)>;

// Records ops in execution order; backward walks them in reverse. Tensors
// refer back to the tape, so it must outlive every tensor recorded on it.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Registers a leaf that shares `t`'s values.
  Tensor watch(const Tensor& t);

  Tensor record(Shape shape, std::shared_ptr<std::vector<double>> values, std::span<const Tensor* const> inputs,
                BackwardFn backward);

  // Seeds d(root)/d(root) = 1 and propagates. Repeated calls accumulate.
  void backward(const Tensor& root);

  std::span<const double> grad(const Tensor& t) const;
  void zero_grad();
  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    std::shared_ptr<std::vector<double>> value;
    std::vector<double> grad;
    std::vector<std::size_t> inputs;  // node ids; kNoNode for untracked inputs
    BackwardFn backward;
  };
  static constexpr std::size_t kNoNode = static_cast<std::size_t>(-1);
  std::vector<Node> nodes_;
};

// ---- ops --------------------------------------------------------------------
//
// Binary elementwise ops accept equal shapes, a one-element operand, or an
// operand whose shape equals the trailing dimensions of the other. Anything
// else is a DimensionError.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor maximum(const Tensor& a, const Tensor& b);

Tensor add_scalar(const Tensor& a, double c);
Tensor scale(const Tensor& a, double c);
Tensor neg(const Tensor& a);
Tensor max_scalar(const Tensor& a, double c);

Tensor sigmoid(const Tensor& a);
Tensor log_sigmoid(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);  // DomainError on non-positive input
Tensor square(const Tensor& a);
Tensor abs(const Tensor& a);
// x·log(a·x) with the convention 0·log 0 = 0.
Tensor xlogax(const Tensor& x, double a);

Tensor matmul(const Tensor& a, const Tensor& b);  // [m×k]·[k×n]
Tensor matvec(const Tensor& a, const Tensor& x);  // [m×n]·[n] -> [m]
Tensor dot(const Tensor& a, const Tensor& b);     // 1-D, scalar result

Tensor sum(const Tensor& t);
Tensor mean(const Tensor& t);
Tensor sum(const Tensor& t, std::size_t axis);  // rank-2 only
Tensor mean(const Tensor& t, std::size_t axis);

// Max-shifted softmax along `axis` (rank 1 or 2).
Tensor softmax(const Tensor& z, std::size_t axis);
// Row-wise log Σ exp for a rank-2 tensor -> [rows].
Tensor logsumexp_rows(const Tensor& z);
// Mean negative log-likelihood of `targets` under row-wise softmax(logits).
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets);
// x / sqrt(mean(x²) + eps) · gain, row-wise for [rows×d] or on a single [d].
Tensor rms_norm(const Tensor& x, const Tensor& gain, double eps = 1e-6);

Tensor reshape(const Tensor& t, Shape shape);
Tensor slice(const Tensor& t, std::size_t start, std::size_t length);  // 1-D
Tensor row(const Tensor& t, std::size_t index);                       // [rows×d] -> [d]
Tensor stack_rows(std::span<const Tensor> rows);                      // [d]... -> [n×d]
Tensor concat_rows(std::span<const Tensor> blocks);                   // [n_i×d]... -> [Σn_i×d]
Tensor gather_rows(const Tensor& t, std::span<const std::size_t> indices);

// Rows `rows[j]` scaled by weights(tokens[j], column) and written to row
// tokens[j] of a zero [num_rows×d] matrix. Tokens must be distinct.
Tensor scatter_rows_weighted(const Tensor& rows, const Tensor& weights, std::size_t column,
                             std::span<const std::size_t> tokens, std::size_t num_rows);

// Block-diagonal recurrent product: weights [blocks×b×b], x [heads·b], with
// block index g·heads + h reading head h of x. Result [blocks·b].
Tensor block_diag_matvec(const Tensor& weights, const Tensor& x, std::size_t heads);

// f·C + i·v·kᵀ for square C and scalar f, i.
Tensor rank1_update(const Tensor& c, const Tensor& f, const Tensor& i, const Tensor& v, const Tensor& k);

// Keeps probs[r, c] where mask[r·cols + c] != 0 and zeroes the rest;
// optionally divides each row by its kept mass.
Tensor masked_weights(const Tensor& probs, std::span<const unsigned char> mask, bool renormalize);

// Values must be finite; throws NumericError mentioning `what`.
void check_finite(const Tensor& t, const std::string& what);

}  // namespace moxe
