#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major tensors.
//
// A Tensor is a cheap handle to a graph node. Every op records its inputs and a
// backward rule when at least one input requires a gradient and recording is
// enabled (see NoGradGuard). Gradients accumulate with += until zero_grad().

#include <cstddef>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace pfeed::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  bool is_leaf() const { return !backward; }
  std::vector<T>& grad_buffer();
};

/// Disables graph recording on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_recording_enabled();

template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const T> data() const { return node_->value; }
  std::span<T> mutable_data() { return node_->value; }
  T item() const;
  T at(std::size_t i) const { return node_->value.at(i); }

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  /// Gradient buffer; zeros if no gradient has been accumulated yet.
  std::span<const T> grad() const;
  std::span<T> mutable_grad() { return node_->grad_buffer(); }
  void zero_grad();

  /// Reverse pass from a scalar. Leaf gradients accumulate across calls.
  void backward() const;

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

// Linear algebra.
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> transpose(const Tensor<T>& a);
template <typename T> Tensor<T> reshape(const Tensor<T>& a, Shape shape);

// Elementwise. Binary ops take equal shapes, or one operand with a single element.
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> exp(const Tensor<T>& a);
template <typename T> Tensor<T> log(const Tensor<T>& a);
template <typename T> Tensor<T> tanh(const Tensor<T>& a);
template <typename T> Tensor<T> relu(const Tensor<T>& a);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T factor);
/// tanh approximation of GELU.
template <typename T> Tensor<T> gelu(const Tensor<T>& a);

// Reductions. `axis` removes that dimension from the result.
template <typename T> Tensor<T> sum(const Tensor<T>& a);
template <typename T> Tensor<T> sum(const Tensor<T>& a, std::size_t axis);
template <typename T> Tensor<T> mean(const Tensor<T>& a);
template <typename T> Tensor<T> mean(const Tensor<T>& a, std::size_t axis);
template <typename T> Tensor<T> max(const Tensor<T>& a);
template <typename T> Tensor<T> max(const Tensor<T>& a, std::size_t axis);

/// -log softmax(logits)[positive] for a 1-D logits tensor; max-subtracted.
template <typename T>
Tensor<T> softmax_cross_entropy_row(const Tensor<T>& logits, std::size_t positive);
/// Mean over rows of the row-wise cross entropy of a [rows x cols] matrix.
template <typename T>
Tensor<T> softmax_cross_entropy_rows(const Tensor<T>& logits, std::span<const std::size_t> positives);

// Row-structured ops used by the encoder and the losses.
/// x[r x c] + bias[c] added to every row.
template <typename T> Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias);
/// Rows of `table` picked by `indices` (repeats allowed; gradients scatter-add).
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& table, std::span<const std::size_t> indices);
template <typename T> Tensor<T> concat_rows(std::span<const Tensor<T>> parts);
template <typename T> Tensor<T> concat_cols(std::span<const Tensor<T>> parts);
/// [r x 1] of per-row inner products of two [r x c] matrices.
template <typename T> Tensor<T> rowwise_dot(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> l2_normalize_rows(const Tensor<T>& x);
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps = T(1e-5));

/// Contiguous run of rows belonging to one sequence in a packed batch.
struct Segment {
  std::size_t offset;
  std::size_t length;
};

/// Multi-head self-attention over packed sequences. `qkv` is [rows x 3d] with
/// the query, key and value blocks side by side; attention never crosses a
/// segment boundary. Returns [rows x d].
template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& qkv, std::span<const Segment> segments, std::size_t heads);

/// Inverted dropout; identity when rate == 0.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, T rate, std::mt19937_64& rng);

/// Gradient accumulated into each leaf is compared against central
/// differences of `fn`; returns the largest per-tensor relative error
/// ||analytic - numeric|| / (||analytic|| + ||numeric||).
double gradient_check(const std::function<Tensor<double>()>& fn, std::span<Tensor<double>> params,
                      double eps = 1e-5);

}  // namespace pfeed::ad
