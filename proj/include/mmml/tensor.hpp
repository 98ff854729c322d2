#pragma once

// Dense f64 tensors with a dynamic reverse-mode differentiation graph.
//
// A Tensor is a cheap handle onto a shared node. Copying a Tensor aliases the
// same storage; use clone() for an independent copy. Operations on inputs that
// require gradients record a backward rule on the result, and backward() on a
// scalar result replays those rules in strict reverse creation order.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace mmml {

using Shape = std::vector<std::size_t>;

/// Binary time-step mask: 1 marks a real step, 0 a padded one.
using Mask = std::vector<std::uint8_t>;

std::string shape_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first written
  bool requires_grad = false;
  std::uint64_t id = 0;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad, accumulates into parents' grads.
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  /// Row-major literal; every row must have the same length.
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows,
                       bool requires_grad = false);
  static Tensor vector(std::initializer_list<double> values, bool requires_grad = false);
  static Tensor identity(std::size_t n, bool requires_grad = false);

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  /// Direct write access. Writing into a tensor that already feeds a graph
  /// invalidates that graph's saved values.
  std::span<double> mutable_data();
  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool has_grad() const;
  /// Gradient; all zeros if none has been accumulated yet.
  std::vector<double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  /// Independent leaf copy of the values (no graph, requires_grad false).
  Tensor clone() const;
  /// Leaf sharing no graph history; values are copied.
  Tensor detach() const { return clone(); }

  bool is_leaf() const;
  std::uint64_t creation_id() const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

// ---- operations -------------------------------------------------------------

/// Matrix product over the last two axes; leading batch extents must match or
/// one side must have none / all ones.
Tensor matmul(const Tensor& a, const Tensor& b);
/// Swap the last two axes.
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
/// a[..., n] + row[n], broadcast over every leading index.
Tensor add_rowvec(const Tensor& a, const Tensor& row);
Tensor square(const Tensor& a);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

Tensor relu(const Tensor& x);
Tensor softmax_lastdim(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

Tensor concat(const std::vector<Tensor>& tensors, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length);
/// Pieces of the given lengths along `axis`; lengths must sum to the extent.
std::vector<Tensor> split(const Tensor& x, std::size_t axis, const std::vector<std::size_t>& lengths);

/// Mean over the rows of x[L, d] whose mask entry is 1.
Tensor masked_mean_pool(const Tensor& x, const Mask& mask);

/// Accumulates d(root)/d(leaf) into every reachable leaf that requires grad.
/// Repeated calls accumulate; intermediate gradients are recomputed per call.
void backward(const Tensor& root);

/// While alive, operations on this thread record no differentiation graph.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// ---- fault injection --------------------------------------------------------

namespace testing {
/// Scales the backward rule of the named operation by 1.5 so that gradient
/// checks can be shown to detect a broken rule. Pass "" to disable.
void set_corrupted_backward(const std::string& op_name);
const std::string& corrupted_backward();
}  // namespace testing

}  // namespace mmml
