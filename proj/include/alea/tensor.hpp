#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "alea/error.hpp"

namespace alea {

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using RowVectorX = Eigen::Matrix<Scalar, 1, Eigen::Dynamic, Eigen::RowMajor>;

using Matrixf = MatrixX<float>;
using Matrixd = MatrixX<double>;
using Index = Eigen::Index;

namespace detail {
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Dense 2-D tensor with reverse-mode autodiff. Everything the model needs
// fits in rows x cols; scalars are 1x1, vectors are 1xn.
//
// Copies share the underlying node (handle semantics), matching how
// parameters are referenced from both the model and the optimizer.
template <typename Scalar>
class Tensor {
 public:
  using Matrix = MatrixX<Scalar>;

  struct Node {
    Matrix value;
    Matrix grad;  // empty until something is accumulated
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward_fn;

    bool is_leaf() const { return !backward_fn; }

    Matrix& grad_buffer() {
      if (grad.size() == 0) grad = Matrix::Zero(value.rows(), value.cols());
      return grad;
    }
    template <typename Derived>
    void accumulate(const Eigen::MatrixBase<Derived>& g) {
      grad_buffer() += g;
    }
  };

  Tensor() : node_(std::make_shared<Node>()) {}
  explicit Tensor(Matrix value, bool requires_grad = false) : node_(std::make_shared<Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  static Tensor scalar(Scalar v) {
    Matrix m(1, 1);
    m(0, 0) = v;
    return Tensor(std::move(m));
  }

  // Result of an op. Inputs are only linked when some input needs a grad and
  // grad mode is on, so no-grad forwards do not retain the graph.
  static Tensor make_result(Matrix value, std::vector<Tensor> inputs,
                            std::function<void(Node&)> backward_fn) {
    Tensor out(std::move(value));
    if (!grad_enabled()) return out;
    bool needs = false;
    for (const auto& in : inputs) needs = needs || in.requires_grad();
    if (!needs) return out;
    out.node_->requires_grad = true;
    out.node_->inputs.reserve(inputs.size());
    for (auto& in : inputs) out.node_->inputs.push_back(in.node_);
    out.node_->backward_fn = std::move(backward_fn);
    return out;
  }

  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  Index size() const { return node_->value.size(); }

  const Matrix& value() const { return node_->value; }
  Matrix& mutable_value() { return node_->value; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) {
    require(node_->is_leaf(), ErrorKind::kContract, "requires_grad can only be set on leaf tensors");
    node_->requires_grad = flag;
  }

  bool has_grad() const { return node_->grad.size() != 0; }
  const Matrix& grad() const {
    require(has_grad(), ErrorKind::kContract, "tensor has no gradient");
    return node_->grad;
  }
  void zero_grad() {
    if (has_grad()) node_->grad.setZero();
  }
  void clear_grad() { node_->grad.resize(0, 0); }

  Scalar item() const {
    require(size() == 1, ErrorKind::kContract, "item() needs a 1x1 tensor");
    return node_->value(0, 0);
  }

  // Detached deep copy: same value, no graph, no grad.
  Tensor clone(bool requires_grad = false) const { return Tensor(node_->value, requires_grad); }

  bool same_node(const Tensor& other) const { return node_ == other.node_; }
  const std::shared_ptr<Node>& node() const { return node_; }

  void backward() const;

 private:
  std::shared_ptr<Node> node_;
};

template <typename Scalar>
void Tensor<Scalar>::backward() const {
  require(rows() == 1 && cols() == 1, ErrorKind::kContract, "backward() needs a scalar root");
  if (!requires_grad()) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  // Interior grads are rebuilt on every pass; leaves keep accumulating.
  for (Node* n : order) {
    if (!n->is_leaf()) n->grad = Matrix::Zero(n->value.rows(), n->value.cols());
  }
  node_->accumulate(Matrix::Ones(1, 1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if (!(*it)->is_leaf()) (*it)->backward_fn(**it);
  }
}

using Tensorf = Tensor<float>;
using Tensord = Tensor<double>;

}  // namespace alea
