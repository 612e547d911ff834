#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace sanlab {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

inline auto numel(const Shape& shape) -> Index
{
  Index n = 1;
  for (auto d : shape)
    n *= d;
  return n;
}

inline auto to_string(const Shape& shape) -> std::string
{
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i)
    os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

//! Raised when operand geometry does not satisfy an operation's contract.
//! Carries the operation name and the offending shapes.
class ShapeError : public std::invalid_argument
{
public:
  ShapeError(std::string op, const std::string& detail, Shape lhs,
             Shape rhs = {})
    : std::invalid_argument(op + ": " + detail + " (got " + to_string(lhs) +
                            (rhs.empty() ? "" : " vs " + to_string(rhs)) +
                            ")")
    , op_(std::move(op))
    , lhs_(std::move(lhs))
    , rhs_(std::move(rhs))
  {
  }

  auto op() const -> const std::string& { return op_; }
  auto lhs() const -> const Shape& { return lhs_; }
  auto rhs() const -> const Shape& { return rhs_; }

private:
  std::string op_;
  Shape lhs_;
  Shape rhs_;
};

//! Raised for out-of-domain arguments (labels, indices, degenerate boxes).
class ValueError : public std::invalid_argument
{
public:
  ValueError(std::string op, const std::string& detail)
    : std::invalid_argument(op + ": " + detail)
    , op_(std::move(op))
  {
  }

  auto op() const -> const std::string& { return op_; }

private:
  std::string op_;
};

namespace detail {
  inline auto grad_mode() -> bool&
  {
    thread_local bool enabled = true;
    return enabled;
  }
}  // namespace detail

inline auto grad_enabled() -> bool { return detail::grad_mode(); }

//! Disables graph recording on the current thread for its lifetime.
class NoGradGuard
{
public:
  NoGradGuard()
    : previous_(detail::grad_mode())
  {
    detail::grad_mode() = false;
  }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  auto operator=(const NoGradGuard&) -> NoGradGuard& = delete;

private:
  bool previous_;
};

//! Dense row-major tensor with reverse-mode gradient support.
//!
//! A Tensor is a handle: copies share the same storage and graph node, the
//! way framework tensors do. Use clone() for an independent deep copy.
//! Results of differentiable operations remember their inputs and a
//! backward closure; backward() on a single-element tensor walks the graph
//! in reverse topological order and accumulates into every reachable node
//! that requires a gradient.
template <typename Scalar_>
class Tensor
{
public:
  using Scalar = Scalar_;
  using Buffer = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

  struct Node
  {
    Shape shape;
    Buffer data;
    Buffer grad;
    bool requires_grad = false;
    bool is_leaf = true;
    std::vector<std::shared_ptr<Node>> parents;
    // Reads this node's grad and accumulates into the parents.
    std::function<void(const Buffer&)> backward;

    auto accumulate(const Buffer& g) -> void
    {
      if (grad.size() == 0)
        grad = g;
      else
        grad += g;
    }

    auto grad_buffer() -> Buffer&
    {
      if (grad.size() == 0)
        grad = Buffer::Zero(data.size());
      return grad;
    }
  };

  using NodePtr = std::shared_ptr<Node>;
  using BackwardFn = std::function<void(const Buffer&)>;

  Tensor() = default;

  Tensor(Shape shape, Buffer data, bool requires_grad = false)
    : node_(std::make_shared<Node>())
  {
    if (sanlab::numel(shape) != data.size())
      throw ShapeError("Tensor", "element count " +
                                     std::to_string(data.size()) +
                                     " does not match shape",
                       shape);
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static auto zeros(Shape shape, bool requires_grad = false) -> Tensor
  {
    const auto n = sanlab::numel(shape);
    return Tensor(std::move(shape), Buffer::Zero(n), requires_grad);
  }

  static auto full(Shape shape, Scalar value) -> Tensor
  {
    const auto n = sanlab::numel(shape);
    return Tensor(std::move(shape), Buffer::Constant(n, value));
  }

  static auto from_values(Shape shape, std::initializer_list<Scalar> values,
                          bool requires_grad = false) -> Tensor
  {
    Buffer data(static_cast<Index>(values.size()));
    std::copy(values.begin(), values.end(), data.data());
    return Tensor(std::move(shape), std::move(data), requires_grad);
  }

  static auto scalar(Scalar value) -> Tensor
  {
    return Tensor(Shape{}, Buffer::Constant(1, value));
  }

  //! Builds the result of a differentiable operation. The graph edge is only
  //! recorded when grad mode is on and some input requires a gradient.
  static auto make_result(Shape shape, Buffer data,
                          const std::vector<Tensor>& inputs,
                          BackwardFn backward) -> Tensor
  {
    Tensor out(std::move(shape), std::move(data));
    if (!grad_enabled())
      return out;
    const bool any = std::any_of(inputs.begin(), inputs.end(),
                                 [](const Tensor& t) {
                                   return t.requires_grad();
                                 });
    if (!any)
      return out;
    out.node_->requires_grad = true;
    out.node_->is_leaf = false;
    for (const auto& in : inputs)
      if (in.requires_grad())
        out.node_->parents.push_back(in.node_);
    out.node_->backward = std::move(backward);
    return out;
  }

  auto defined() const -> bool { return node_ != nullptr; }

  auto shape() const -> const Shape& { return node_->shape; }
  auto dim(std::size_t i) const -> Index { return node_->shape.at(i); }
  auto rank() const -> std::size_t { return node_->shape.size(); }
  auto numel() const -> Index { return node_->data.size(); }

  auto data() const -> const Buffer& { return node_->data; }
  //! Mutable access to values. Only meaningful on leaves; mutating a tensor
  //! that is already part of a recorded graph invalidates its gradients.
  auto data() -> Buffer& { return node_->data; }

  auto item() const -> Scalar
  {
    if (numel() != 1)
      throw ShapeError("item", "tensor is not single-element", shape());
    return node_->data[0];
  }

  auto requires_grad() const -> bool { return node_ && node_->requires_grad; }
  auto set_requires_grad(bool flag) -> Tensor&
  {
    if (!node_->is_leaf)
      throw ValueError("set_requires_grad",
                       "only leaf tensors can change requires_grad");
    node_->requires_grad = flag;
    return *this;
  }
  auto is_leaf() const -> bool { return node_->is_leaf; }

  auto has_grad() const -> bool { return node_->grad.size() != 0; }
  auto grad() const -> const Buffer& { return node_->grad; }
  auto grad() -> Buffer& { return node_->grad; }
  //! Fills the gradient with zeros (allocating it if needed).
  auto zero_grad() -> void { node_->grad = Buffer::Zero(node_->data.size()); }
  auto clear_grad() -> void { node_->grad.resize(0); }

  auto same_node(const Tensor& other) const -> bool
  {
    return node_ == other.node_;
  }

  auto clone() const -> Tensor
  {
    return Tensor(node_->shape, node_->data, false);
  }

  template <typename Other>
  auto cast() const -> Tensor<Other>
  {
    return Tensor<Other>(node_->shape, node_->data.template cast<Other>());
  }

  //! Reverse-mode sweep from a single-element tensor. Leaf gradients
  //! accumulate across calls; interior gradients are recomputed each time.
  auto backward() -> void
  {
    if (numel() != 1)
      throw ShapeError("backward", "root must be single-element", shape());
    if (!node_->requires_grad)
      throw ValueError("backward", "root does not require grad");

    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    visited.insert(node_.get());
    while (!stack.empty())
    {
      auto& [node, next] = stack.back();
      if (next < node->parents.size())
      {
        Node* parent = node->parents[next++].get();
        if (visited.insert(parent).second)
          stack.emplace_back(parent, 0);
      }
      else
      {
        order.push_back(node);
        stack.pop_back();
      }
    }

    for (Node* node : order)
    {
      if (!node->is_leaf)
        node->grad = Buffer::Zero(node->data.size());
      else
        node->grad_buffer();
    }
    node_->grad[0] += Scalar(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it)
      if ((*it)->backward)
        (*it)->backward((*it)->grad);
  }

  // Extension hook for operations defined outside this header.
  auto node() const -> const NodePtr& { return node_; }

private:
  NodePtr node_;
};

using Tensorf = Tensor<float>;
using Tensord = Tensor<double>;

}  // namespace sanlab
