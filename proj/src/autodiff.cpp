#include "pfeed/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <type_traits>
#include <unordered_set>

#include "pfeed/errors.hpp"

namespace pfeed::ad {

namespace {

thread_local bool g_recording = true;

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <typename T>
using BackwardFn = std::function<void(Node<T>&)>;

// Builds the output node; the graph edge is only kept when some input needs a gradient.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> value, std::initializer_list<const Tensor<T>*> inputs,
                      BackwardFn<T> backward) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  bool needs = false;
  if (g_recording) {
    for (const auto* in : inputs) needs = needs || in->requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    for (const auto* in : inputs) node->inputs.push_back(in->node_ptr());
    node->backward = std::move(backward);
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> make_result_n(Shape shape, std::vector<T> value, std::span<const Tensor<T>> inputs, BackwardFn<T> backward) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  bool needs = false;
  if (g_recording) {
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    for (const auto& in : inputs) node->inputs.push_back(in.node_ptr());
    node->backward = std::move(backward);
  }
  return Tensor<T>(std::move(node));
}

void require(bool ok, const std::string& what) {
  if (!ok) throw DimensionError(what);
}

template <typename T>
void require_2d(const Tensor<T>& t, const char* op) {
  if (t.dim() != 2) throw DimensionError(std::string(op) + ": expected a 2-D tensor, got " + shape_str(t.shape()));
}

// Result shape of a binary elementwise op under scalar-with-tensor broadcasting.
template <typename T>
Shape binary_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() == b.shape()) return a.shape();
  if (b.numel() == 1) return a.shape();
  if (a.numel() == 1) return b.shape();
  throw DimensionError(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) + " and " +
                       shape_str(b.shape()));
}

// Accumulates per-element gradient contributions into an operand that may be broadcast.
template <typename T, typename F>
void accumulate_operand(Node<T>& operand, std::size_t n, F&& contribution) {
  if (!operand.requires_grad) return;
  auto& g = operand.grad_buffer();
  if (operand.value.size() == 1 && n != 1) {
    T total = 0;
    for (std::size_t i = 0; i < n; ++i) total += contribution(i);
    g[0] += total;
  } else {
    for (std::size_t i = 0; i < n; ++i) g[i] += contribution(i);
  }
}

template <typename T, typename F>
Tensor<T> unary(const Tensor<T>& a, F&& f, std::type_identity_t<BackwardFn<T>> backward) {
  std::vector<T> out(a.numel());
  auto in = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
  return make_result<T>(a.shape(), std::move(out), {&a}, std::move(backward));
}

struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
  Shape reduced;
};

template <typename T>
AxisSplit split_axis(const Tensor<T>& a, std::size_t axis) {
  if (axis >= a.dim()) {
    throw DimensionError("reduction axis " + std::to_string(axis) + " invalid for shape " + shape_str(a.shape()));
  }
  AxisSplit s;
  for (std::size_t d = 0; d < a.dim(); ++d) {
    if (d < axis) s.outer *= a.shape()[d];
    if (d > axis) s.inner *= a.shape()[d];
    if (d != axis) s.reduced.push_back(a.shape()[d]);
  }
  s.extent = a.shape()[axis];
  return s;
}

}  // namespace

std::size_t numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

NoGradGuard::NoGradGuard() : previous_(g_recording) { g_recording = false; }
NoGradGuard::~NoGradGuard() { g_recording = previous_; }
bool grad_recording_enabled() { return g_recording; }

template <typename T>
std::vector<T>& Node<T>::grad_buffer() {
  if (grad.size() != value.size()) grad.assign(value.size(), T(0));
  return grad;
}

// ---------------------------------------------------------------------------
// Tensor

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  std::vector<T> values(numel_of(shape), value);
  return from(std::move(shape), std::move(values), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> values, bool requires_grad) {
  for (auto d : shape) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
  }
  if (numel_of(shape) != values.size()) {
    throw DimensionError("shape " + shape_str(shape) + " does not match " + std::to_string(values.size()) +
                         " values");
  }
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return from({1}, {value}, requires_grad);
}

template <typename T>
std::size_t Tensor<T>::rows() const {
  require_2d(*this, "rows");
  return shape()[0];
}

template <typename T>
std::size_t Tensor<T>::cols() const {
  require_2d(*this, "cols");
  return shape()[1];
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

template <typename T>
std::span<const T> Tensor<T>::grad() const {
  return node_->grad_buffer();
}

template <typename T>
void Tensor<T>::zero_grad() {
  std::fill(node_->grad.begin(), node_->grad.end(), T(0));
}

template <typename T>
void Tensor<T>::backward() const {
  if (numel() != 1) throw ContractError("backward() needs a scalar loss, got shape " + shape_str(shape()));
  if (!requires_grad()) throw ContractError("backward() on a tensor that depends on no gradient-requiring input");

  // Iterative post-order DFS gives a topological order (inputs before outputs).
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<T>* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  // Interior gradients are recomputed on every call; leaves accumulate.
  for (auto* n : order) {
    if (!n->is_leaf()) n->grad.assign(n->value.size(), T(0));
  }
  node_->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if (!(*it)->is_leaf()) (*it)->backward(**it);
  }
}

// ---------------------------------------------------------------------------
// Linear algebra

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  require(b.shape()[0] == k, "matmul: inner dimensions differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  std::vector<T> out(m * n);
  MatMap<T>(out.data(), m, n).noalias() = ConstMatMap<T>(a.data().data(), m, k) * ConstMatMap<T>(b.data().data(), k, n);
  return make_result<T>({m, n}, std::move(out), {&a, &b}, [m, k, n](Node<T>& self) {
    auto& A = *self.inputs[0];
    auto& B = *self.inputs[1];
    ConstMatMap<T> dC(self.grad.data(), m, n);
    if (A.requires_grad) {
      MatMap<T>(A.grad_buffer().data(), m, k).noalias() += dC * ConstMatMap<T>(B.value.data(), k, n).transpose();
    }
    if (B.requires_grad) {
      MatMap<T>(B.grad_buffer().data(), k, n).noalias() += ConstMatMap<T>(A.value.data(), m, k).transpose() * dC;
    }
  });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  require_2d(a, "transpose");
  const std::size_t r = a.shape()[0], c = a.shape()[1];
  std::vector<T> out(r * c);
  MatMap<T>(out.data(), c, r) = ConstMatMap<T>(a.data().data(), r, c).transpose();
  return make_result<T>({c, r}, std::move(out), {&a}, [r, c](Node<T>& self) {
    auto& A = *self.inputs[0];
    MatMap<T>(A.grad_buffer().data(), r, c) += ConstMatMap<T>(self.grad.data(), c, r).transpose();
  });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel_of(shape) != a.numel()) {
    throw DimensionError("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  std::vector<T> out(a.data().begin(), a.data().end());
  return make_result<T>(std::move(shape), std::move(out), {&a}, [](Node<T>& self) {
    auto& A = *self.inputs[0];
    auto& g = A.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Elementwise

namespace {

// Operand value at output position i, honouring scalar broadcast.
template <typename T>
inline T at_b(const std::vector<T>& v, std::size_t i) {
  return v.size() == 1 ? v[0] : v[i];
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  Shape shape = binary_shape(a, b, "add");
  const std::size_t n = numel_of(shape);
  std::vector<T> out(n);
  const auto& av = a.node()->value;
  const auto& bv = b.node()->value;
  for (std::size_t i = 0; i < n; ++i) out[i] = at_b(av, i) + at_b(bv, i);
  return make_result<T>(std::move(shape), std::move(out), {&a, &b}, [n](Node<T>& self) {
    const auto& g = self.grad;
    accumulate_operand(*self.inputs[0], n, [&](std::size_t i) { return g[i]; });
    accumulate_operand(*self.inputs[1], n, [&](std::size_t i) { return g[i]; });
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  Shape shape = binary_shape(a, b, "sub");
  const std::size_t n = numel_of(shape);
  std::vector<T> out(n);
  const auto& av = a.node()->value;
  const auto& bv = b.node()->value;
  for (std::size_t i = 0; i < n; ++i) out[i] = at_b(av, i) - at_b(bv, i);
  return make_result<T>(std::move(shape), std::move(out), {&a, &b}, [n](Node<T>& self) {
    const auto& g = self.grad;
    accumulate_operand(*self.inputs[0], n, [&](std::size_t i) { return g[i]; });
    accumulate_operand(*self.inputs[1], n, [&](std::size_t i) { return -g[i]; });
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  Shape shape = binary_shape(a, b, "mul");
  const std::size_t n = numel_of(shape);
  std::vector<T> out(n);
  const auto& av = a.node()->value;
  const auto& bv = b.node()->value;
  for (std::size_t i = 0; i < n; ++i) out[i] = at_b(av, i) * at_b(bv, i);
  return make_result<T>(std::move(shape), std::move(out), {&a, &b}, [n](Node<T>& self) {
    const auto& g = self.grad;
    const auto& av = self.inputs[0]->value;
    const auto& bv = self.inputs[1]->value;
    accumulate_operand(*self.inputs[0], n, [&](std::size_t i) { return g[i] * at_b(bv, i); });
    accumulate_operand(*self.inputs[1], n, [&](std::size_t i) { return g[i] * at_b(av, i); });
  });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  Shape shape = binary_shape(a, b, "div");
  for (T v : b.data()) {
    if (v == T(0)) throw DomainError("div: division by zero");
  }
  const std::size_t n = numel_of(shape);
  std::vector<T> out(n);
  const auto& av = a.node()->value;
  const auto& bv = b.node()->value;
  for (std::size_t i = 0; i < n; ++i) out[i] = at_b(av, i) / at_b(bv, i);
  return make_result<T>(std::move(shape), std::move(out), {&a, &b}, [n](Node<T>& self) {
    const auto& g = self.grad;
    const auto& av = self.inputs[0]->value;
    const auto& bv = self.inputs[1]->value;
    accumulate_operand(*self.inputs[0], n, [&](std::size_t i) { return g[i] / at_b(bv, i); });
    accumulate_operand(*self.inputs[1], n, [&](std::size_t i) {
      const T d = at_b(bv, i);
      return -g[i] * at_b(av, i) / (d * d);
    });
  });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  auto out = unary(a, [](T x) { return std::exp(x); }, [](Node<T>& self) {
    auto& A = *self.inputs[0];
    auto& g = A.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * self.value[i];
  });
  return out;
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
  for (T v : a.data()) {
    if (!(v > T(0))) throw DomainError("log: argument must be positive");
  }
  return unary(a, [](T x) { return std::log(x); }, [](Node<T>& self) {
    auto& A = *self.inputs[0];
    auto& g = A.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / A.value[i];
  });
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& a) {
  return unary(a, [](T x) { return std::tanh(x); }, [](Node<T>& self) {
    auto& A = *self.inputs[0];
    auto& g = A.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * (T(1) - self.value[i] * self.value[i]);
  });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  return unary(a, [](T x) { return x > T(0) ? x : T(0); }, [](Node<T>& self) {
    auto& A = *self.inputs[0];
    auto& g = A.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (A.value[i] > T(0)) g[i] += self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  return unary(a, [factor](T x) { return x * factor; }, [factor](Node<T>& self) {
    auto& A = *self.inputs[0];
    auto& g = A.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
  });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  constexpr T kC = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T kA = T(0.044715);
  return unary(
      a, [](T x) { return T(0.5) * x * (T(1) + std::tanh(kC * (x + kA * x * x * x))); },
      [](Node<T>& self) {
        auto& A = *self.inputs[0];
        auto& g = A.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
          const T x = A.value[i];
          const T t = std::tanh(kC * (x + kA * x * x * x));
          const T dt = (T(1) - t * t) * kC * (T(1) + T(3) * kA * x * x);
          g[i] += self.grad[i] * (T(0.5) * (T(1) + t) + T(0.5) * x * dt);
        }
      });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T total = 0;
  for (T v : a.data()) total += v;
  return make_result<T>({1}, {total}, {&a}, [](Node<T>& self) {
    auto& A = *self.inputs[0];
    auto& g = A.grad_buffer();
    for (auto& v : g) v += self.grad[0];
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a, std::size_t axis) {
  const AxisSplit s = split_axis(a, axis);
  std::vector<T> out(s.outer * s.inner, T(0));
  const auto in = a.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t e = 0; e < s.extent; ++e)
      for (std::size_t i = 0; i < s.inner; ++i) out[o * s.inner + i] += in[(o * s.extent + e) * s.inner + i];
  Shape shape = s.reduced.empty() ? Shape{1} : s.reduced;
  return make_result<T>(std::move(shape), std::move(out), {&a}, [s](Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t e = 0; e < s.extent; ++e)
        for (std::size_t i = 0; i < s.inner; ++i) g[(o * s.extent + e) * s.inner + i] += self.grad[o * s.inner + i];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a, std::size_t axis) {
  const std::size_t extent = split_axis(a, axis).extent;
  return scale(sum(a, axis), T(1) / static_cast<T>(extent));
}

template <typename T>
Tensor<T> max(const Tensor<T>& a) {
  const auto in = a.data();
  const std::size_t arg = static_cast<std::size_t>(std::max_element(in.begin(), in.end()) - in.begin());
  return make_result<T>({1}, {in[arg]}, {&a}, [arg](Node<T>& self) {
    self.inputs[0]->grad_buffer()[arg] += self.grad[0];
  });
}

template <typename T>
Tensor<T> max(const Tensor<T>& a, std::size_t axis) {
  const AxisSplit s = split_axis(a, axis);
  std::vector<T> out(s.outer * s.inner);
  std::vector<std::size_t> argmax(out.size());
  const auto in = a.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      std::size_t best = o * s.extent * s.inner + i;
      for (std::size_t e = 1; e < s.extent; ++e) {
        const std::size_t idx = (o * s.extent + e) * s.inner + i;
        if (in[idx] > in[best]) best = idx;
      }
      out[o * s.inner + i] = in[best];
      argmax[o * s.inner + i] = best;
    }
  }
  Shape shape = s.reduced.empty() ? Shape{1} : s.reduced;
  return make_result<T>(std::move(shape), std::move(out), {&a}, [argmax = std::move(argmax)](Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t j = 0; j < argmax.size(); ++j) g[argmax[j]] += self.grad[j];
  });
}

// ---------------------------------------------------------------------------
// Softmax cross entropy

template <typename T>
Tensor<T> softmax_cross_entropy_rows(const Tensor<T>& logits, std::span<const std::size_t> positives) {
  require_2d(logits, "softmax_cross_entropy_rows");
  const std::size_t r = logits.shape()[0], c = logits.shape()[1];
  if (positives.size() != r) throw DimensionError("softmax_cross_entropy_rows: one positive index per row required");
  for (auto p : positives) {
    if (p >= c) throw ContractError("softmax_cross_entropy_rows: positive index out of range");
  }
  const auto in = logits.data();
  std::vector<T> probs(r * c);
  T total = 0;
  for (std::size_t i = 0; i < r; ++i) {
    const T* row = in.data() + i * c;
    const T m = *std::max_element(row, row + c);
    T z = 0;
    for (std::size_t j = 0; j < c; ++j) {
      probs[i * c + j] = std::exp(row[j] - m);
      z += probs[i * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] /= z;
    total += (std::log(z) + m) - row[positives[i]];
  }
  std::vector<std::size_t> pos(positives.begin(), positives.end());
  return make_result<T>({1}, {total / static_cast<T>(r)}, {&logits},
                        [r, c, probs = std::move(probs), pos = std::move(pos)](Node<T>& self) {
                          auto& g = self.inputs[0]->grad_buffer();
                          const T w = self.grad[0] / static_cast<T>(r);
                          for (std::size_t i = 0; i < r; ++i) {
                            for (std::size_t j = 0; j < c; ++j) g[i * c + j] += w * probs[i * c + j];
                            g[i * c + pos[i]] -= w;
                          }
                        });
}

template <typename T>
Tensor<T> softmax_cross_entropy_row(const Tensor<T>& logits, std::size_t positive) {
  if (logits.dim() != 1) throw DimensionError("softmax_cross_entropy_row: expected 1-D logits");
  const std::size_t pos[1] = {positive};
  return softmax_cross_entropy_rows(reshape(logits, {1, logits.numel()}), std::span<const std::size_t>(pos));
}

// ---------------------------------------------------------------------------
// Row-structured ops

template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  require_2d(x, "add_bias");
  const std::size_t r = x.shape()[0], c = x.shape()[1];
  require(bias.numel() == c, "add_bias: bias of " + shape_str(bias.shape()) + " for rows of width " + std::to_string(c));
  std::vector<T> out(x.data().begin(), x.data().end());
  const auto b = bias.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] += b[j];
  return make_result<T>(x.shape(), std::move(out), {&x, &bias}, [r, c](Node<T>& self) {
    auto& X = *self.inputs[0];
    auto& B = *self.inputs[1];
    if (X.requires_grad) {
      auto& g = X.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (B.requires_grad) {
      auto& g = B.grad_buffer();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) g[j] += self.grad[i * c + j];
    }
  });
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& table, std::span<const std::size_t> indices) {
  require_2d(table, "gather_rows");
  if (indices.empty()) throw DimensionError("gather_rows: no indices");
  const std::size_t n = table.shape()[0], c = table.shape()[1];
  std::vector<T> out(indices.size() * c);
  const auto in = table.data();
  for (std::size_t k = 0; k < indices.size(); ++k) {
    if (indices[k] >= n) throw DimensionError("gather_rows: row index out of range");
    std::copy_n(in.data() + indices[k] * c, c, out.data() + k * c);
  }
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  return make_result<T>({indices.size(), c}, std::move(out), {&table}, [c, idx = std::move(idx)](Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t k = 0; k < idx.size(); ++k) {
      T* dst = g.data() + idx[k] * c;
      const T* src = self.grad.data() + k * c;
      for (std::size_t j = 0; j < c; ++j) dst[j] += src[j];
    }
  });
}

template <typename T>
Tensor<T> concat_rows(std::span<const Tensor<T>> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: nothing to concatenate");
  const std::size_t c = parts[0].cols();
  std::size_t r = 0;
  for (const auto& p : parts) {
    require(p.cols() == c, "concat_rows: column counts differ");
    r += p.rows();
  }
  std::vector<T> out;
  out.reserve(r * c);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  return make_result_n<T>({r, c}, std::move(out), parts, [](Node<T>& self) {
    std::size_t offset = 0;
    for (auto& in : self.inputs) {
      const std::size_t n = in->value.size();
      if (in->requires_grad) {
        auto& g = in->grad_buffer();
        for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[offset + i];
      }
      offset += n;
    }
  });
}

template <typename T>
Tensor<T> concat_cols(std::span<const Tensor<T>> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: nothing to concatenate");
  const std::size_t r = parts[0].rows();
  std::size_t c = 0;
  for (const auto& p : parts) {
    require(p.rows() == r, "concat_cols: row counts differ");
    c += p.cols();
  }
  std::vector<T> out(r * c);
  std::size_t col = 0;
  for (const auto& p : parts) {
    const std::size_t pc = p.cols();
    for (std::size_t i = 0; i < r; ++i) std::copy_n(p.data().data() + i * pc, pc, out.data() + i * c + col);
    col += pc;
  }
  return make_result_n<T>({r, c}, std::move(out), parts, [r, c](Node<T>& self) {
    std::size_t col = 0;
    for (auto& in : self.inputs) {
      const std::size_t pc = in->shape[1];
      if (in->requires_grad) {
        auto& g = in->grad_buffer();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < pc; ++j) g[i * pc + j] += self.grad[i * c + col + j];
      }
      col += pc;
    }
  });
}

template <typename T>
Tensor<T> rowwise_dot(const Tensor<T>& a, const Tensor<T>& b) {
  require_2d(a, "rowwise_dot");
  require(a.shape() == b.shape(), "rowwise_dot: shapes differ");
  const std::size_t r = a.shape()[0], c = a.shape()[1];
  std::vector<T> out(r, T(0));
  const auto av = a.data();
  const auto bv = b.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i] += av[i * c + j] * bv[i * c + j];
  return make_result<T>({r, 1}, std::move(out), {&a, &b}, [r, c](Node<T>& self) {
    auto& A = *self.inputs[0];
    auto& B = *self.inputs[1];
    if (A.requires_grad) {
      auto& g = A.grad_buffer();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[i] * B.value[i * c + j];
    }
    if (B.requires_grad) {
      auto& g = B.grad_buffer();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[i] * A.value[i * c + j];
    }
  });
}

template <typename T>
Tensor<T> l2_normalize_rows(const Tensor<T>& x) {
  require_2d(x, "l2_normalize_rows");
  const std::size_t r = x.shape()[0], c = x.shape()[1];
  std::vector<T> out(r * c);
  std::vector<T> norms(r);
  const auto in = x.data();
  for (std::size_t i = 0; i < r; ++i) {
    T ss = 0;
    for (std::size_t j = 0; j < c; ++j) ss += in[i * c + j] * in[i * c + j];
    norms[i] = std::max(std::sqrt(ss), T(1e-12));
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = in[i * c + j] / norms[i];
  }
  return make_result<T>(x.shape(), std::move(out), {&x}, [r, c, norms = std::move(norms)](Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < r; ++i) {
      const T* y = self.value.data() + i * c;
      const T* dy = self.grad.data() + i * c;
      T proj = 0;
      for (std::size_t j = 0; j < c; ++j) proj += y[j] * dy[j];
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += (dy[j] - y[j] * proj) / norms[i];
    }
  });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
  require_2d(x, "layer_norm");
  const std::size_t r = x.shape()[0], c = x.shape()[1];
  require(gain.numel() == c && bias.numel() == c, "layer_norm: gain/bias width mismatch");
  std::vector<T> out(r * c), xhat(r * c), inv_std(r);
  const auto in = x.data();
  const auto gv = gain.data();
  const auto bv = bias.data();
  for (std::size_t i = 0; i < r; ++i) {
    const T* row = in.data() + i * c;
    T mu = 0;
    for (std::size_t j = 0; j < c; ++j) mu += row[j];
    mu /= static_cast<T>(c);
    T var = 0;
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(c);
    inv_std[i] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      xhat[i * c + j] = (row[j] - mu) * inv_std[i];
      out[i * c + j] = xhat[i * c + j] * gv[j] + bv[j];
    }
  }
  return make_result<T>(x.shape(), std::move(out), {&x, &gain, &bias},
                        [r, c, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
                          auto& X = *self.inputs[0];
                          auto& G = *self.inputs[1];
                          auto& B = *self.inputs[2];
                          const auto& dy = self.grad;
                          if (G.requires_grad) {
                            auto& g = G.grad_buffer();
                            for (std::size_t i = 0; i < r; ++i)
                              for (std::size_t j = 0; j < c; ++j) g[j] += dy[i * c + j] * xhat[i * c + j];
                          }
                          if (B.requires_grad) {
                            auto& g = B.grad_buffer();
                            for (std::size_t i = 0; i < r; ++i)
                              for (std::size_t j = 0; j < c; ++j) g[j] += dy[i * c + j];
                          }
                          if (X.requires_grad) {
                            auto& g = X.grad_buffer();
                            const T n = static_cast<T>(c);
                            for (std::size_t i = 0; i < r; ++i) {
                              T s1 = 0, s2 = 0;
                              for (std::size_t j = 0; j < c; ++j) {
                                const T d = dy[i * c + j] * G.value[j];
                                s1 += d;
                                s2 += d * xhat[i * c + j];
                              }
                              for (std::size_t j = 0; j < c; ++j) {
                                const T d = dy[i * c + j] * G.value[j];
                                g[i * c + j] += inv_std[i] / n * (n * d - s1 - xhat[i * c + j] * s2);
                              }
                            }
                          }
                        });
}

template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& qkv, std::span<const Segment> segments, std::size_t heads) {
  require_2d(qkv, "multi_head_attention");
  const std::size_t rows = qkv.shape()[0], w3 = qkv.shape()[1];
  require(w3 % 3 == 0, "multi_head_attention: width must be 3*d");
  const std::size_t d = w3 / 3;
  require(heads >= 1 && d % heads == 0, "multi_head_attention: d not divisible by heads");
  const std::size_t dh = d / heads;
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
  std::size_t covered = 0;
  std::size_t prob_size = 0;
  for (const auto& s : segments) {
    require(s.offset + s.length <= rows && s.length > 0, "multi_head_attention: segment out of range");
    covered += s.length;
    prob_size += heads * s.length * s.length;
  }
  require(covered == rows, "multi_head_attention: segments must cover all rows");

  const T* in = qkv.data().data();
  std::vector<T> out(rows * d, T(0));
  std::vector<T> probs(prob_size);
  std::vector<T> scores;
  std::size_t pbase = 0;
  for (const auto& s : segments) {
    const std::size_t L = s.length;
    for (std::size_t h = 0; h < heads; ++h) {
      T* P = probs.data() + pbase;
      for (std::size_t i = 0; i < L; ++i) {
        const T* q = in + (s.offset + i) * w3 + h * dh;
        T m = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < L; ++j) {
          const T* k = in + (s.offset + j) * w3 + d + h * dh;
          T dot = 0;
          for (std::size_t e = 0; e < dh; ++e) dot += q[e] * k[e];
          P[i * L + j] = dot * inv_sqrt;
          m = std::max(m, P[i * L + j]);
        }
        T z = 0;
        for (std::size_t j = 0; j < L; ++j) {
          P[i * L + j] = std::exp(P[i * L + j] - m);
          z += P[i * L + j];
        }
        T* o = out.data() + (s.offset + i) * d + h * dh;
        for (std::size_t j = 0; j < L; ++j) {
          P[i * L + j] /= z;
          const T* v = in + (s.offset + j) * w3 + 2 * d + h * dh;
          for (std::size_t e = 0; e < dh; ++e) o[e] += P[i * L + j] * v[e];
        }
      }
      pbase += L * L;
    }
  }

  std::vector<Segment> segs(segments.begin(), segments.end());
  return make_result<T>(
      {rows, d}, std::move(out), {&qkv},
      [segs = std::move(segs), probs = std::move(probs), heads, d, dh, w3, inv_sqrt](Node<T>& self) {
        auto& X = *self.inputs[0];
        auto& g = X.grad_buffer();
        const T* in = X.value.data();
        const T* dout = self.grad.data();
        std::vector<T> dP;
        std::size_t pbase = 0;
        for (const auto& s : segs) {
          const std::size_t L = s.length;
          dP.assign(L * L, T(0));
          for (std::size_t h = 0; h < heads; ++h) {
            const T* P = probs.data() + pbase;
            // dV and dP
            for (std::size_t i = 0; i < L; ++i) {
              const T* dO = dout + (s.offset + i) * d + h * dh;
              for (std::size_t j = 0; j < L; ++j) {
                const T* v = in + (s.offset + j) * w3 + 2 * d + h * dh;
                T* dv = g.data() + (s.offset + j) * w3 + 2 * d + h * dh;
                T acc = 0;
                for (std::size_t e = 0; e < dh; ++e) {
                  dv[e] += P[i * L + j] * dO[e];
                  acc += dO[e] * v[e];
                }
                dP[i * L + j] = acc;
              }
            }
            // softmax backward, then dQ and dK
            for (std::size_t i = 0; i < L; ++i) {
              T rowdot = 0;
              for (std::size_t j = 0; j < L; ++j) rowdot += dP[i * L + j] * P[i * L + j];
              const T* q = in + (s.offset + i) * w3 + h * dh;
              T* dq = g.data() + (s.offset + i) * w3 + h * dh;
              for (std::size_t j = 0; j < L; ++j) {
                const T ds = P[i * L + j] * (dP[i * L + j] - rowdot) * inv_sqrt;
                const T* k = in + (s.offset + j) * w3 + d + h * dh;
                T* dk = g.data() + (s.offset + j) * w3 + d + h * dh;
                for (std::size_t e = 0; e < dh; ++e) {
                  dq[e] += ds * k[e];
                  dk[e] += ds * q[e];
                }
              }
            }
            pbase += L * L;
          }
        }
      });
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, T rate, std::mt19937_64& rng) {
  if (rate < T(0) || rate >= T(1)) throw ContractError("dropout rate must lie in [0, 1)");
  if (rate == T(0)) return x;
  std::bernoulli_distribution keep(1.0 - static_cast<double>(rate));
  const T s = T(1) / (T(1) - rate);
  std::vector<T> mask(x.numel());
  for (auto& m : mask) m = keep(rng) ? s : T(0);
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * mask[i];
  return make_result<T>(x.shape(), std::move(out), {&x}, [mask = std::move(mask)](Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * mask[i];
  });
}

// ---------------------------------------------------------------------------

double gradient_check(const std::function<Tensor<double>()>& fn, std::span<Tensor<double>> params, double eps) {
  for (auto& p : params) p.zero_grad();
  fn().backward();
  double worst = 0;
  for (auto& p : params) {
    std::vector<double> analytic(p.grad().begin(), p.grad().end());
    auto values = p.mutable_data();
    double diff2 = 0, a2 = 0, n2 = 0;
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      double plus = 0, minus = 0;
      {
        NoGradGuard guard;
        values[i] = saved + eps;
        plus = fn().item();
        values[i] = saved - eps;
        minus = fn().item();
      }
      values[i] = saved;
      const double numeric = (plus - minus) / (2 * eps);
      diff2 += (analytic[i] - numeric) * (analytic[i] - numeric);
      a2 += analytic[i] * analytic[i];
      n2 += numeric * numeric;
    }
    const double denom = std::sqrt(a2) + std::sqrt(n2);
    if (denom > 1e-12) worst = std::max(worst, std::sqrt(diff2) / denom);
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Explicit instantiations

#define PFEED_INSTANTIATE(T)                                                                        \
  template struct Node<T>;                                                                          \
  template class Tensor<T>;                                                                         \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> transpose(const Tensor<T>&);                                                   \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                              \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                       \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                       \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                       \
  template Tensor<T> div(const Tensor<T>&, const Tensor<T>&);                                       \
  template Tensor<T> exp(const Tensor<T>&);                                                         \
  template Tensor<T> log(const Tensor<T>&);                                                         \
  template Tensor<T> tanh(const Tensor<T>&);                                                        \
  template Tensor<T> relu(const Tensor<T>&);                                                        \
  template Tensor<T> scale(const Tensor<T>&, T);                                                    \
  template Tensor<T> gelu(const Tensor<T>&);                                                        \
  template Tensor<T> sum(const Tensor<T>&);                                                         \
  template Tensor<T> sum(const Tensor<T>&, std::size_t);                                            \
  template Tensor<T> mean(const Tensor<T>&);                                                        \
  template Tensor<T> mean(const Tensor<T>&, std::size_t);                                           \
  template Tensor<T> max(const Tensor<T>&);                                                         \
  template Tensor<T> max(const Tensor<T>&, std::size_t);                                            \
  template Tensor<T> softmax_cross_entropy_row(const Tensor<T>&, std::size_t);                      \
  template Tensor<T> softmax_cross_entropy_rows(const Tensor<T>&, std::span<const std::size_t>);    \
  template Tensor<T> add_bias(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> gather_rows(const Tensor<T>&, std::span<const std::size_t>);                   \
  template Tensor<T> concat_rows(std::span<const Tensor<T>>);                                       \
  template Tensor<T> concat_cols(std::span<const Tensor<T>>);                                       \
  template Tensor<T> rowwise_dot(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> l2_normalize_rows(const Tensor<T>&);                                           \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);           \
  template Tensor<T> multi_head_attention(const Tensor<T>&, std::span<const Segment>, std::size_t); \
  template Tensor<T> dropout(const Tensor<T>&, T, std::mt19937_64&);

PFEED_INSTANTIATE(float)
PFEED_INSTANTIATE(double)

#undef PFEED_INSTANTIATE

}  // namespace pfeed::ad
