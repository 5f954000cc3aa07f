#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <limits>
#include <numeric>

#include "moxe/errors.hpp"
#include "moxe/kernels.hpp"
#include "moxe/tensor.hpp"

namespace moxe {

namespace {

using Storage = std::shared_ptr<std::vector<double>>;

Storage make_storage(std::size_t n, double fill = 0.0) { return std::make_shared<std::vector<double>>(n, fill); }

Tape* common_tape(std::span<const Tensor* const> inputs) {
  Tape* tape = nullptr;
  for (const Tensor* t : inputs) {
    if (!t->tracked()) continue;
    if (tape && tape != t->tape()) throw ContractError("op mixes tensors from different tapes");
    tape = t->tape();
  }
  return tape;
}

// Builds the result; the backward closure is only constructed when some
// input is tracked, so untracked evaluation pays nothing for it.
template <class MakeBackward>
Tensor emit(Shape shape, Storage values, std::span<const Tensor* const> inputs, MakeBackward&& make_backward) {
  Tape* tape = common_tape(inputs);
  if (!tape) return Tensor(std::move(shape), std::move(values));
  return tape->record(std::move(shape), std::move(values), inputs, make_backward());
}

template <class MakeBackward>
Tensor emit(Shape shape, Storage values, std::initializer_list<const Tensor*> inputs, MakeBackward&& make_backward) {
  return emit(std::move(shape), std::move(values), std::span<const Tensor* const>(inputs.begin(), inputs.size()),
              std::forward<MakeBackward>(make_backward));
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_to_string(t.shape()));
  }
}

// Output shape for a binary op; operand values repeat with period numel.
Shape broadcast_shape(const Tensor& a, const Tensor& b, const char* op) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa == sb) return sa;
  if (b.numel() == 1) return sa;
  if (a.numel() == 1) return sb;
  auto trailing = [](const Shape& big, const Shape& small) {
    return small.size() < big.size() && std::equal(small.begin(), small.end(), big.end() - small.size());
  };
  if (trailing(sa, sb)) return sa;
  if (trailing(sb, sa)) return sb;
  throw DimensionError(std::string(op) + ": cannot broadcast " + shape_to_string(sa) + " with " +
                       shape_to_string(sb));
}

// f(x, y); da(x, y, out) = ∂out/∂x; db(x, y, out) = ∂out/∂y.
template <class F, class DA, class DB>
Tensor binary(const Tensor& a, const Tensor& b, const char* op, F f, DA da, DB db) {
  Shape shape = broadcast_shape(a, b, op);
  const std::size_t n = shape_numel(shape);
  const std::size_t na = a.numel();
  const std::size_t nb = b.numel();
  auto out = make_storage(n);
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t i = 0; i < n; ++i) (*out)[i] = f(av[i % na], bv[i % nb]);
  return emit(std::move(shape), out, {&a, &b}, [=, as = a.storage(), bs = b.storage(), os = out.get()] {
    return [=](std::span<const double> g, std::span<const std::span<double>> in) {
      const auto& x = *as;
      const auto& y = *bs;
      if (!in[0].empty()) {
        for (std::size_t i = 0; i < n; ++i) in[0][i % na] += g[i] * da(x[i % na], y[i % nb], (*os)[i]);
      }
      if (!in[1].empty()) {
        for (std::size_t i = 0; i < n; ++i) in[1][i % nb] += g[i] * db(x[i % na], y[i % nb], (*os)[i]);
      }
    };
  });
}

// f(x); d(x, y) = dy/dx given the output y.
template <class F, class D>
Tensor unary(const Tensor& a, F f, D d) {
  const std::size_t n = a.numel();
  auto out = make_storage(n);
  const auto av = a.values();
  for (std::size_t i = 0; i < n; ++i) (*out)[i] = f(av[i]);
  return emit(a.shape(), out, {&a}, [=, as = a.storage(), os = out.get()] {
    return [=](std::span<const double> g, std::span<const std::span<double>> in) {
      for (std::size_t i = 0; i < n; ++i) in[0][i] += g[i] * d((*as)[i], (*os)[i]);
    };
  });
}

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

// ---- elementwise -------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y, double) { return y; },
      [](double x, double, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  for (double y : b.values()) {
    if (y == 0.0) throw DomainError("div: division by zero");
  }
  return binary(
      a, b, "div", [](double x, double y) { return x / y; }, [](double, double y, double) { return 1.0 / y; },
      [](double x, double y, double) { return -x / (y * y); });
}

// Ties send the gradient to the first operand.
Tensor maximum(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "maximum", [](double x, double y) { return x >= y ? x : y; },
      [](double x, double y, double) { return x >= y ? 1.0 : 0.0; },
      [](double x, double y, double) { return x >= y ? 0.0 : 1.0; });
}

Tensor add_scalar(const Tensor& a, double c) {
  return unary(a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Tensor scale(const Tensor& a, double c) {
  return unary(a, [c](double x) { return x * c; }, [c](double, double) { return c; });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor max_scalar(const Tensor& a, double c) {
  return unary(a, [c](double x) { return x >= c ? x : c; }, [c](double x, double) { return x >= c ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& a) {
  return unary(a, stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

Tensor log_sigmoid(const Tensor& a) {
  return unary(
      a, [](double x) { return x >= 0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x)); },
      [](double x, double) { return 1.0 - stable_sigmoid(x); });
}

Tensor tanh(const Tensor& a) {
  return unary(a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor exp(const Tensor& a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  for (double x : a.values()) {
    if (!(x > 0.0)) throw DomainError("log: non-positive input " + std::to_string(x));
  }
  return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor square(const Tensor& a) {
  return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor abs(const Tensor& a) {
  return unary(
      a, [](double x) { return std::fabs(x); }, [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

Tensor xlogax(const Tensor& x, double a) {
  if (!(a > 0.0)) throw DomainError("xlogax: scale must be positive");
  for (double v : x.values()) {
    if (v < 0.0) throw DomainError("xlogax: negative input " + std::to_string(v));
  }
  // The derivative diverges at 0; the point is only reached by underflow and
  // contributes no gradient there.
  return unary(
      x, [a](double v) { return v == 0.0 ? 0.0 : v * std::log(a * v); },
      [a](double v, double) { return v == 0.0 ? 0.0 : std::log(a * v) + 1.0; });
}

// ---- linear algebra ----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions differ: " + shape_to_string(a.shape()) + " x " +
                         shape_to_string(b.shape()));
  }
  auto out = make_storage(m * n);
  kernels::matmul_acc(a.values(), b.values(), *out, m, k, n);
  return emit({m, n}, out, {&a, &b}, [=, as = a.storage(), bs = b.storage()] {
    return [=](std::span<const double> g, std::span<const std::span<double>> in) {
      if (!in[0].empty()) kernels::matmul_nt_acc(g, *bs, in[0], m, n, k);
      if (!in[1].empty()) kernels::matmul_tn_acc(*as, g, in[1], m, k, n);
    };
  });
}

Tensor matvec(const Tensor& a, const Tensor& x) {
  require_rank(a, 2, "matvec");
  require_rank(x, 1, "matvec");
  const std::size_t m = a.dim(0), n = a.dim(1);
  if (x.dim(0) != n) {
    throw DimensionError("matvec: " + shape_to_string(a.shape()) + " x " + shape_to_string(x.shape()));
  }
  auto out = make_storage(m);
  const auto av = a.values();
  const auto xv = x.values();
  for (std::size_t i = 0; i < m; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < n; ++j) acc += av[i * n + j] * xv[j];
    (*out)[i] = acc;
  }
  return emit({m}, out, {&a, &x}, [=, as = a.storage(), xs = x.storage()] {
    return [=](std::span<const double> g, std::span<const std::span<double>> in) {
      if (!in[0].empty()) {
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) in[0][i * n + j] += g[i] * (*xs)[j];
      }
      if (!in[1].empty()) {
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) in[1][j] += g[i] * (*as)[i * n + j];
      }
    };
  });
}

Tensor dot(const Tensor& a, const Tensor& b) {
  require_rank(a, 1, "dot");
  if (a.shape() != b.shape()) {
    throw DimensionError("dot: " + shape_to_string(a.shape()) + " vs " + shape_to_string(b.shape()));
  }
  return sum(mul(a, b));
}

// ---- reductions ----------------------------------------------------------------

Tensor sum(const Tensor& t) {
  const std::size_t n = t.numel();
  const auto v = t.values();
  auto out = make_storage(1, std::accumulate(v.begin(), v.end(), 0.0));
  return emit({1}, out, {&t}, [=] {
    return [=](std::span<const double> g, std::span<const std::span<double>> in) {
      for (std::size_t i = 0; i < n; ++i) in[0][i] += g[0];
    };
  });
}

Tensor mean(const Tensor& t) {
  if (t.numel() == 0) throw DimensionError("mean of an empty tensor");
  return scale(sum(t), 1.0 / static_cast<double>(t.numel()));
}

Tensor sum(const Tensor& t, std::size_t axis) {
  if (t.rank() == 1 && axis == 0) return sum(t);
  if (t.rank() != 2 || axis > 1) {
    throw DimensionError("sum: invalid axis " + std::to_string(axis) + " for " + shape_to_string(t.shape()));
  }
  const std::size_t rows = t.dim(0), cols = t.dim(1);
  const std::size_t n_out = axis == 0 ? cols : rows;
  auto out = make_storage(n_out);
  const auto v = t.values();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) (*out)[axis == 0 ? c : r] += v[r * cols + c];
  return emit({n_out}, out, {&t}, [=] {
    return [=](std::span<const double> g, std::span<const std::span<double>> in) {
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) in[0][r * cols + c] += g[axis == 0 ? c : r];
    };
  });
}

Tensor mean(const Tensor& t, std::size_t axis) {
  const std::size_t count = t.rank() == 1 ? t.numel() : (axis <= 1 && t.rank() == 2 ? t.dim(axis) : 1);
  Tensor s = sum(t, axis);
  if (count == 0) throw DimensionError("mean over an empty axis");
  return scale(s, 1.0 / static_cast<double>(count));
}

// ---- softmax family --------------------------------------------------------------

Tensor softmax(const Tensor& z, std::size_t axis) {
  std::size_t groups = 0, length = 0, group_stride = 0, stride = 0;
  if (z.rank() == 1 && axis == 0) {
    groups = 1, length = z.numel(), group_stride = 0, stride = 1;
  } else if (z.rank() == 2 && axis == 1) {
    groups = z.dim(0), length = z.dim(1), group_stride = z.dim(1), stride = 1;
  } else if (z.rank() == 2 && axis == 0) {
    groups = z.dim(1), length = z.dim(0), group_stride = 1, stride = z.dim(1);
  } else {
    throw DimensionError("softmax: invalid axis " + std::to_string(axis) + " for " + shape_to_string(z.shape()));
  }
  const std::size_t n = z.numel();
  auto out = make_storage(n);
  const auto zv = z.values();
  for (std::size_t gi = 0; gi < groups; ++gi) {
    const std::size_t base = gi * group_stride;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < length; ++j) mx = std::max(mx, zv[base + j * stride]);
    double total = 0.0;
    for (std::size_t j = 0; j < length; ++j) {
      const double e = std::exp(zv[base + j * stride] - mx);
      (*out)[base + j * stride] = e;
      total += e;
    }
    for (std::size_t j = 0; j < length; ++j) (*out)[base + j * stride] /= total;
  }
  return emit(z.shape(), out, {&z}, [=, os = out.get()] {
    return [=](std::span<const double> g, std::span<const std::span<double>> in) {
      const auto& y = *os;
      for (std::size_t gi = 0; gi < groups; ++gi) {
        const std::size_t base = gi * group_stride;
        double inner = 0.0;
        for (std::size_t j = 0; j < length; ++j) inner += g[base + j * stride] * y[base + j * stride];
        for (std::size_t j = 0; j < length; ++j) {
          const std::size_t idx = base + j * stride;
          in[0][idx] += y[idx] * (g[idx] - inner);
        }
      }
    };
  });
}

Tensor logsumexp_rows(const Tensor& z) {
  require_rank(z, 2, "logsumexp_rows");
  const std::size_t rows = z.dim(0), cols = z.dim(1);
  auto out = make_storage(rows);
  const auto zv = z.values();
  for (std::size_t r = 0; r < rows; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < cols; ++c) mx = std::max(mx, zv[r * cols + c]);
    double total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) total += std::exp(zv[r * cols + c] - mx);
    (*out)[r] = mx + std::log(total);
  }
  return emit({rows}, out, {&z}, [=, zs = z.storage(), os = out.get()] {
    return [=](std::span<const double> g, std::span<const std::span<double>> in) {
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c)
          in[0][r * cols + c] += g[r] * std::exp((*zs)[r * cols + c] - (*os)[r]);
    };
  });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets) {
  require_rank(logits, 2, "cross_entropy");
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  if (targets.size() != rows) throw DimensionError("cross_entropy: one target per row required");
  if (rows == 0) throw DimensionError("cross_entropy: no rows");
  std::vector<int> tg(targets.begin(), targets.end());
  for (int t : tg) {
    if (t < 0 || static_cast<std::size_t>(t) >= cols) throw InputError("cross_entropy: target id out of range");
  }
  const auto zv = logits.values();
  auto lse = std::make_shared<std::vector<double>>(rows);
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < cols; ++c) mx = std::max(mx, zv[r * cols + c]);
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += std::exp(zv[r * cols + c] - mx);
    (*lse)[r] = mx + std::log(s);
    total += (*lse)[r] - zv[r * cols + static_cast<std::size_t>(tg[r])];
  }
  auto out = make_storage(1, total / static_cast<double>(rows));
  return emit({1}, out, {&logits}, [=, zs = logits.storage()] {
    return [=](std::span<const double> g, std::span<const std::span<double>> in) {
      const double w = g[0] / static_cast<double>(rows);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) in[0][r * cols + c] += w * std::exp((*zs)[r * cols + c] - (*lse)[r]);
        in[0][r * cols + static_cast<std::size_t>(tg[r])] -= w;
      }
    };
  });
}

Tensor rms_norm(const Tensor& x, const Tensor& gain, double eps) {
  require_rank(gain, 1, "rms_norm");
  const std::size_t d = gain.dim(0);
  if (x.rank() == 0 || x.shape().back() != d) {
    throw DimensionError("rms_norm: " + shape_to_string(x.shape()) + " vs gain " + shape_to_string(gain.shape()));
  }
  const std::size_t rows = x.numel() / d;
  const auto xv = x.values();
  const auto gv = gain.values();
  auto inv = std::make_shared<std::vector<double>>(rows);
  auto out = make_storage(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    double ss = 0.0;
    for (std::size_t j = 0; j < d; ++j) ss += xv[r * d + j] * xv[r * d + j];
    const double s = 1.0 / std::sqrt(ss / static_cast<double>(d) + eps);
    (*inv)[r] = s;
    for (std::size_t j = 0; j < d; ++j) (*out)[r * d + j] = xv[r * d + j] * s * gv[j];
  }
  return emit(x.shape(), out, {&x, &gain}, [=, xs = x.storage(), gs = gain.storage()] {
    return [=](std::span<const double> g, std::span<const std::span<double>> in) {
      for (std::size_t r = 0; r < rows; ++r) {
        const double s = (*inv)[r];
        double proj = 0.0;  // Σ (g·gain)_j · x̂_j
        for (std::size_t j = 0; j < d; ++j) {
          const double xh = (*xs)[r * d + j] * s;
          if (!in[1].empty()) in[1][j] += g[r * d + j] * xh;
          proj += g[r * d + j] * (*gs)[j] * xh;
        }
        if (in[0].empty()) continue;
        proj /= static_cast<double>(d);
        for (std::size_t j = 0; j < d; ++j) {
          const double xh = (*xs)[r * d + j] * s;
          in[0][r * d + j] += s * (g[r * d + j] * (*gs)[j] - xh * proj);
        }
      }
    };
  });
}

// ---- shape manipulation -------------------------------------------------------

Tensor reshape(const Tensor& t, Shape shape) {
  if (shape_numel(shape) != t.numel()) {
    throw DimensionError("reshape: " + shape_to_string(t.shape()) + " to " + shape_to_string(shape));
  }
  const std::size_t n = t.numel();
  return emit(std::move(shape), t.storage(), {&t}, [=] {
    return [=](std::span<const double> g, std::span<const std::span<double>> in) {
      for (std::size_t i = 0; i < n; ++i) in[0][i] += g[i];
    };
  });
}

Tensor slice(const Tensor& t, std::size_t start, std::size_t length) {
  require_rank(t, 1, "slice");
  if (start + length > t.numel()) throw DimensionError("slice: range exceeds " + shape_to_string(t.shape()));
  const auto v = t.values();
  auto out = std::make_shared<std::vector<double>>(v.begin() + start, v.begin() + start + length);
  return emit({length}, out, {&t}, [=] {
    return [=](std::span<const double> g, std::span<const std::span<double>> in) {
      for (std::size_t i = 0; i < length; ++i) in[0][start + i] += g[i];
    };
  });
}

Tensor row(const Tensor& t, std::size_t index) {
  require_rank(t, 2, "row");
  const std::size_t d = t.dim(1);
  if (index >= t.dim(0)) throw DimensionError("row: index out of range");
  const auto v = t.values();
  auto out = std::make_shared<std::vector<double>>(v.begin() + index * d, v.begin() + (index + 1) * d);
  return emit({d}, out, {&t}, [=] {
    return [=](std::span<const double> g, std::span<const std::span<double>> in) {
      for (std::size_t j = 0; j < d; ++j) in[0][index * d + j] += g[j];
    };
  });
}

Tensor stack_rows(std::span<const Tensor> rows) {
  if (rows.empty()) throw DimensionError("stack_rows: no rows");
  const std::size_t d = rows[0].numel();
  std::vector<const Tensor*> inputs;
  auto out = make_storage(rows.size() * d);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].rank() != 1 || rows[r].numel() != d) throw DimensionError("stack_rows: ragged rows");
    std::copy(rows[r].values().begin(), rows[r].values().end(), out->begin() + r * d);
    inputs.push_back(&rows[r]);
  }
  return emit({rows.size(), d}, out, std::span<const Tensor* const>(inputs), [=] {
    return [=](std::span<const double> g, std::span<const std::span<double>> in) {
      for (std::size_t r = 0; r < in.size(); ++r) {
        if (in[r].empty()) continue;
        for (std::size_t j = 0; j < d; ++j) in[r][j] += g[r * d + j];
      }
    };
  });
}

Tensor concat_rows(std::span<const Tensor> blocks) {
  if (blocks.empty()) throw DimensionError("concat_rows: no blocks");
  require_rank(blocks[0], 2, "concat_rows");
  const std::size_t d = blocks[0].dim(1);
  std::vector<const Tensor*> inputs;
  std::vector<std::size_t> offsets;
  std::size_t total_rows = 0;
  for (const auto& b : blocks) {
    if (b.rank() != 2 || b.dim(1) != d) throw DimensionError("concat_rows: column mismatch");
    offsets.push_back(total_rows * d);
    total_rows += b.dim(0);
    inputs.push_back(&b);
  }
  auto out = make_storage(total_rows * d);
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    std::copy(blocks[i].values().begin(), blocks[i].values().end(), out->begin() + offsets[i]);
  }
  return emit({total_rows, d}, out, std::span<const Tensor* const>(inputs), [=] {
    return [=](std::span<const double> g, std::span<const std::span<double>> in) {
      for (std::size_t i = 0; i < in.size(); ++i) {
        for (std::size_t j = 0; j < in[i].size(); ++j) in[i][j] += g[offsets[i] + j];
      }
    };
  });
}

Tensor gather_rows(const Tensor& t, std::span<const std::size_t> indices) {
  require_rank(t, 2, "gather_rows");
  const std::size_t rows = t.dim(0), d = t.dim(1);
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  auto out = make_storage(idx.size() * d);
  const auto v = t.values();
  for (std::size_t j = 0; j < idx.size(); ++j) {
    if (idx[j] >= rows) throw DimensionError("gather_rows: index out of range");
    std::copy(v.begin() + idx[j] * d, v.begin() + (idx[j] + 1) * d, out->begin() + j * d);
  }
  return emit({idx.size(), d}, out, {&t}, [=] {
    return [=](std::span<const double> g, std::span<const std::span<double>> in) {
      for (std::size_t j = 0; j < idx.size(); ++j)
        for (std::size_t c = 0; c < d; ++c) in[0][idx[j] * d + c] += g[j * d + c];
    };
  });
}

Tensor scatter_rows_weighted(const Tensor& rows, const Tensor& weights, std::size_t column,
                             std::span<const std::size_t> tokens, std::size_t num_rows) {
  require_rank(rows, 2, "scatter_rows_weighted");
  require_rank(weights, 2, "scatter_rows_weighted");
  const std::size_t n = rows.dim(0), d = rows.dim(1), wcols = weights.dim(1);
  if (tokens.size() != n) throw DimensionError("scatter_rows_weighted: one token per row required");
  if (weights.dim(0) != num_rows || column >= wcols) throw DimensionError("scatter_rows_weighted: weight shape");
  std::vector<std::size_t> tok(tokens.begin(), tokens.end());
  auto out = make_storage(num_rows * d);
  const auto rv = rows.values();
  const auto wv = weights.values();
  for (std::size_t j = 0; j < n; ++j) {
    if (tok[j] >= num_rows) throw DimensionError("scatter_rows_weighted: token out of range");
    const double w = wv[tok[j] * wcols + column];
    for (std::size_t c = 0; c < d; ++c) (*out)[tok[j] * d + c] = w * rv[j * d + c];
  }
  return emit({num_rows, d}, out, {&rows, &weights}, [=, rs = rows.storage(), ws = weights.storage()] {
    return [=](std::span<const double> g, std::span<const std::span<double>> in) {
      for (std::size_t j = 0; j < n; ++j) {
        const std::size_t widx = tok[j] * wcols + column;
        double acc = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
          const double gj = g[tok[j] * d + c];
          if (!in[0].empty()) in[0][j * d + c] += (*ws)[widx] * gj;
          acc += (*rs)[j * d + c] * gj;
        }
        if (!in[1].empty()) in[1][widx] += acc;
      }
    };
  });
}

Tensor block_diag_matvec(const Tensor& weights, const Tensor& x, std::size_t heads) {
  require_rank(weights, 3, "block_diag_matvec");
  require_rank(x, 1, "block_diag_matvec");
  const std::size_t blocks = weights.dim(0), b = weights.dim(1);
  if (weights.dim(2) != b || heads == 0 || blocks % heads != 0 || x.dim(0) != heads * b) {
    throw DimensionError("block_diag_matvec: " + shape_to_string(weights.shape()) + " with x " +
                         shape_to_string(x.shape()) + " and " + std::to_string(heads) + " heads");
  }
  auto out = make_storage(blocks * b);
  const auto wv = weights.values();
  const auto xv = x.values();
  for (std::size_t blk = 0; blk < blocks; ++blk) {
    const std::size_t h = blk % heads;
    for (std::size_t r = 0; r < b; ++r) {
      double acc = 0.0;
      for (std::size_t c = 0; c < b; ++c) acc += wv[(blk * b + r) * b + c] * xv[h * b + c];
      (*out)[blk * b + r] = acc;
    }
  }
  return emit({blocks * b}, out, {&weights, &x}, [=, ws = weights.storage(), xs = x.storage()] {
    return [=](std::span<const double> g, std::span<const std::span<double>> in) {
      for (std::size_t blk = 0; blk < blocks; ++blk) {
        const std::size_t h = blk % heads;
        for (std::size_t r = 0; r < b; ++r) {
          const double gr = g[blk * b + r];
          for (std::size_t c = 0; c < b; ++c) {
            if (!in[0].empty()) in[0][(blk * b + r) * b + c] += gr * (*xs)[h * b + c];
            if (!in[1].empty()) in[1][h * b + c] += gr * (*ws)[(blk * b + r) * b + c];
          }
        }
      }
    };
  });
}

Tensor rank1_update(const Tensor& c, const Tensor& f, const Tensor& i, const Tensor& v, const Tensor& k) {
  require_rank(c, 2, "rank1_update");
  const std::size_t d = c.dim(0);
  if (c.dim(1) != d || f.numel() != 1 || i.numel() != 1 || v.numel() != d || k.numel() != d) {
    throw DimensionError("rank1_update: inconsistent shapes");
  }
  const double fv = f.item(), iv = i.item();
  const auto cv = c.values();
  const auto vv = v.values();
  const auto kv = k.values();
  auto out = make_storage(d * d);
  for (std::size_t r = 0; r < d; ++r)
    for (std::size_t s = 0; s < d; ++s) (*out)[r * d + s] = fv * cv[r * d + s] + iv * vv[r] * kv[s];
  return emit({d, d}, out,
              {&c, &f, &i, &v, &k}, [=, cs = c.storage(), vs = v.storage(), ks = k.storage()] {
                return [=](std::span<const double> g, std::span<const std::span<double>> in) {
                  double df = 0.0, di = 0.0;
                  for (std::size_t r = 0; r < d; ++r) {
                    double gk = 0.0;  // (G k)_r
                    for (std::size_t s = 0; s < d; ++s) {
                      const double gv = g[r * d + s];
                      if (!in[0].empty()) in[0][r * d + s] += fv * gv;
                      df += gv * (*cs)[r * d + s];
                      gk += gv * (*ks)[s];
                      if (!in[4].empty()) in[4][s] += iv * gv * (*vs)[r];
                    }
                    di += (*vs)[r] * gk;
                    if (!in[3].empty()) in[3][r] += iv * gk;
                  }
                  if (!in[1].empty()) in[1][0] += df;
                  if (!in[2].empty()) in[2][0] += di;
                };
              });
}

Tensor masked_weights(const Tensor& probs, std::span<const unsigned char> mask, bool renormalize) {
  require_rank(probs, 2, "masked_weights");
  const std::size_t rows = probs.dim(0), cols = probs.dim(1);
  if (mask.size() != rows * cols) throw DimensionError("masked_weights: mask size");
  std::vector<unsigned char> m(mask.begin(), mask.end());
  const auto pv = probs.values();
  auto out = make_storage(rows * cols);
  auto kept = std::make_shared<std::vector<double>>(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      if (m[r * cols + c]) (*kept)[r] += pv[r * cols + c];
    }
    const double denom = renormalize ? (*kept)[r] : 1.0;
    if (renormalize && !(denom > 0.0)) throw NumericError("masked_weights: zero kept mass in row");
    for (std::size_t c = 0; c < cols; ++c) {
      if (m[r * cols + c]) (*out)[r * cols + c] = pv[r * cols + c] / denom;
    }
  }
  return emit(probs.shape(), out, {&probs}, [=, os = out.get()] {
    return [=](std::span<const double> g, std::span<const std::span<double>> in) {
      for (std::size_t r = 0; r < rows; ++r) {
        if (!renormalize) {
          for (std::size_t c = 0; c < cols; ++c)
            if (m[r * cols + c]) in[0][r * cols + c] += g[r * cols + c];
          continue;
        }
        // w_c = p_c / s  =>  dp_c = (g_c - Σ_j g_j w_j) / s on kept entries.
        const double s = (*kept)[r];
        double inner = 0.0;
        for (std::size_t c = 0; c < cols; ++c)
          if (m[r * cols + c]) inner += g[r * cols + c] * (*os)[r * cols + c];
        for (std::size_t c = 0; c < cols; ++c)
          if (m[r * cols + c]) in[0][r * cols + c] += (g[r * cols + c] - inner) / s;
      }
    };
  });
}

void check_finite(const Tensor& t, const std::string& what) {
  for (double v : t.values()) {
    if (!std::isfinite(v)) throw NumericError("non-finite value in " + what);
  }
}

}  // namespace moxe
