#pragma once

#include <sanlab/tensor.hpp>

#include <span>
#include <string>

namespace sanlab {

//! A named trainable tensor plus its momentum buffer.
template <typename S>
struct Parameter
{
  Parameter() = default;
  Parameter(std::string name_, Tensor<S> tensor_)
    : name(std::move(name_))
    , tensor(std::move(tensor_))
    , momentum(Tensor<S>::Buffer::Zero(tensor.numel()))
  {
    tensor.set_requires_grad(true);
  }

  std::string name;
  Tensor<S> tensor;
  typename Tensor<S>::Buffer momentum;
};

//! SGD with heavy-ball momentum and L2 weight decay:
//!   buf <- momentum * buf + grad + weight_decay * w
//!   w   <- w - lr * buf
//! Gradients are reset to zero afterwards.
template <typename S>
auto sgd_step(std::span<Parameter<S>* const> params, S lr, S momentum,
              S weight_decay) -> void
{
  for (auto* p : params)
    if (!p->tensor.has_grad())
      throw ValueError("sgd_step", "parameter '" + p->name + "' has no grad");
  for (auto* p : params)
  {
    auto& w = p->tensor.data();
    p->momentum = momentum * p->momentum + p->tensor.grad() + weight_decay * w;
    w -= lr * p->momentum;
    p->tensor.zero_grad();
  }
}

}  // namespace sanlab
