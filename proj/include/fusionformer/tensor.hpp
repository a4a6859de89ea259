#pragma once

// Dense row-major tensors with reverse-mode differentiation.
//
// A Tensor is a cheap handle onto a graph node. Values are immutable once an
// op has produced them; the only in-place mutation is gradient accumulation
// during backward() and explicit parameter updates through mutable_data().
// Binary ops broadcast only over leading dimensions: one operand's shape must
// be a suffix of the other's.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace ff {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // sized iff requires_grad (lazily for interior nodes)
  bool requires_grad = false;
  bool is_leaf = true;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into the parents' grads.
  std::function<void(Node&)> backward;

  std::span<double> ensure_grad();
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  // Direct write access; intended for leaves (parameter updates, finite
  // differences). Writing into an interior node invalidates its graph.
  std::span<double> mutable_data();

  bool requires_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  // Copy of the values with no graph history.
  Tensor detach(bool requires_grad = false) const;

  // Accumulates d(this)/d(leaf) into every reachable requires_grad leaf.
  // `this` must hold exactly one element.
  void backward() const;

  const char* op_name() const;
  const detail::Node* node() const { return node_.get(); }

 private:
  friend Tensor make_result(Shape shape, std::vector<double> data, const char* op,
                            std::vector<Tensor> parents,
                            std::function<void(detail::Node&)> backward);
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}
  std::shared_ptr<detail::Node> node_;
};

// Builds an op output. The backward closure is dropped when no parent needs
// gradients (or grad mode is off), so inference keeps no graph.
Tensor make_result(Shape shape, std::vector<double> data, const char* op,
                   std::vector<Tensor> parents, std::function<void(detail::Node&)> backward);

// Thread-local switch; graph recording is on by default.
bool grad_enabled();
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

namespace debug {
// Scales the upstream gradient of every node produced by `op` by `factor`
// before it propagates. Empty name disables. Used to verify that gradient
// checks catch a broken backward rule.
void inject_gradient_fault(std::string op, double factor = 1.5);
void clear_gradient_fault();
}  // namespace debug

// ---- ops ------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double s);
Tensor gelu(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor sum(const Tensor& x);   // scalar
Tensor mean(const Tensor& x);  // scalar
// Euclidean norm over the last axis: (..., C) -> (...). Gradient at a zero
// vector is taken as zero.
Tensor l2_norm_lastaxis(const Tensor& x);

// (..., m, k) x (..., k, n) -> (..., m, n). `b` may also be a plain k x n
// matrix shared across a's leading dims.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor softmax(const Tensor& x, std::size_t axis);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

Tensor permute(const Tensor& x, const std::vector<std::size_t>& order);
Tensor reshape(const Tensor& x, Shape shape);
Tensor concat(const std::vector<Tensor>& xs, std::size_t axis);
std::vector<Tensor> split(const Tensor& x, std::size_t axis, const std::vector<std::size_t>& sizes);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length);

// x: F_in x M, weight: F_out x F_in, bias: F_out -> F_out x M. A learned
// linear map over the frame axis applied identically to every column.
Tensor framewise_conv1d(const Tensor& x, const Tensor& weight, const Tensor& bias);

}  // namespace ff
