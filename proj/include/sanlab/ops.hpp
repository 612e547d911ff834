#pragma once

#include <sanlab/tensor.hpp>

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

// Differentiable primitives. Every function takes tensors by value (they are
// handles) and returns a new tensor whose backward closure routes gradients to
// the inputs that require them.

namespace sanlab {

//! How conv2d fills samples outside the input: zeros, or the nearest edge
//! value.
enum class Padding
{
  zeros,
  replicate
};

namespace detail {

  template <typename S>
  using RowMatrix =
      Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

  inline auto require_rank(const char* op, const Shape& s, std::size_t r)
      -> void
  {
    if (s.size() != r)
      throw ShapeError(op, "expected rank " + std::to_string(r), s);
  }

  inline auto require_same(const char* op, const Shape& a, const Shape& b)
      -> void
  {
    if (a != b)
      throw ShapeError(op, "operand shapes differ", a, b);
  }

  // Unrolls one image (C x H x W) into a (C*kh*kw) x (Ho*Wo) row-major matrix.
  template <typename S>
  auto im2col(const S* img, Index C, Index H, Index W, Index kh, Index kw,
              Index stride, Index pad, Index Ho, Index Wo, Padding mode,
              S* col) -> void
  {
    const Index cols = Ho * Wo;
    for (Index c = 0; c < C; ++c)
      for (Index ki = 0; ki < kh; ++ki)
        for (Index kj = 0; kj < kw; ++kj)
        {
          S* row = col + ((c * kh + ki) * kw + kj) * cols;
          for (Index oy = 0; oy < Ho; ++oy)
          {
            Index iy = oy * stride - pad + ki;
            for (Index ox = 0; ox < Wo; ++ox)
            {
              Index ix = ox * stride - pad + kj;
              if (mode == Padding::replicate)
                row[oy * Wo + ox] = img[(c * H + std::clamp<Index>(iy, 0, H - 1)) * W +
                                        std::clamp<Index>(ix, 0, W - 1)];
              else
                row[oy * Wo + ox] = (iy >= 0 && iy < H && ix >= 0 && ix < W)
                                        ? img[(c * H + iy) * W + ix]
                                        : S(0);
            }
          }
        }
  }

  template <typename S>
  auto col2im(const S* col, Index C, Index H, Index W, Index kh, Index kw,
              Index stride, Index pad, Index Ho, Index Wo, Padding mode,
              S* img) -> void
  {
    const Index cols = Ho * Wo;
    for (Index c = 0; c < C; ++c)
      for (Index ki = 0; ki < kh; ++ki)
        for (Index kj = 0; kj < kw; ++kj)
        {
          const S* row = col + ((c * kh + ki) * kw + kj) * cols;
          for (Index oy = 0; oy < Ho; ++oy)
          {
            Index iy = oy * stride - pad + ki;
            if (mode == Padding::replicate)
              iy = std::clamp<Index>(iy, 0, H - 1);
            else if (iy < 0 || iy >= H)
              continue;
            for (Index ox = 0; ox < Wo; ++ox)
            {
              Index ix = ox * stride - pad + kj;
              if (mode == Padding::replicate)
                img[(c * H + iy) * W + std::clamp<Index>(ix, 0, W - 1)] +=
                    row[oy * Wo + ox];
              else if (ix >= 0 && ix < W)
                img[(c * H + iy) * W + ix] += row[oy * Wo + ox];
            }
          }
        }
  }

}  // namespace detail

//! 2-D cross-correlation over an N x C x H x W batch with K x C x kh x kw
//! kernels and a length-K bias. Output is N x K x Ho x Wo with
//! Ho = (H + 2 pad - kh) / stride + 1.
template <typename S>
auto conv2d(Tensor<S> x, Tensor<S> w, Tensor<S> b, Index stride, Index pad,
            Padding padding = Padding::zeros) -> Tensor<S>
{
  using Mat = detail::RowMatrix<S>;
  detail::require_rank("conv2d", x.shape(), 4);
  detail::require_rank("conv2d", w.shape(), 4);
  const Index N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const Index K = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(1) != C)
    throw ShapeError("conv2d", "input channels (dim 1) disagree", x.shape(),
                     w.shape());
  if (b.rank() != 1 || b.dim(0) != K)
    throw ShapeError("conv2d", "bias length must equal output channels",
                     b.shape(), w.shape());
  if (kh < 1 || kw < 1 || stride < 1 || pad < 0)
    throw ShapeError("conv2d", "invalid kernel/stride/pad", w.shape());
  if (H + 2 * pad < kh || W + 2 * pad < kw)
    throw ShapeError("conv2d", "kernel larger than padded input", x.shape(),
                     w.shape());

  const Index Ho = (H + 2 * pad - kh) / stride + 1;
  const Index Wo = (W + 2 * pad - kw) / stride + 1;
  const Index rows = C * kh * kw;
  const Index cols = Ho * Wo;
  const bool pointwise = kh == 1 && kw == 1 && stride == 1 && pad == 0;

  // Unrolled inputs are kept for the weight gradient.
  std::vector<Mat> unrolled(pointwise ? 0 : static_cast<std::size_t>(N));
  typename Tensor<S>::Buffer out(N * K * cols);
  Eigen::Map<const Mat> wm(w.data().data(), K, rows);
  for (Index n = 0; n < N; ++n)
  {
    Eigen::Map<Mat> on(out.data() + n * K * cols, K, cols);
    if (pointwise)
    {
      Eigen::Map<const Mat> xn(x.data().data() + n * C * H * W, C, cols);
      on.noalias() = wm * xn;
    }
    else
    {
      auto& col = unrolled[static_cast<std::size_t>(n)];
      col.resize(rows, cols);
      detail::im2col(x.data().data() + n * C * H * W, C, H, W, kh, kw,
                     stride, pad, Ho, Wo, padding, col.data());
      on.noalias() = wm * col;
    }
    on.colwise() += b.data().matrix();
  }

  auto xn = x.node(), wn = w.node(), bn = b.node();
  auto backward = [=, unrolled = std::move(unrolled)](
                      const typename Tensor<S>::Buffer& g) {
    Eigen::Map<const Mat> wmat(wn->data.data(), K, rows);
    for (Index n = 0; n < N; ++n)
    {
      Eigen::Map<const Mat> gn(g.data() + n * K * cols, K, cols);
      if (wn->requires_grad)
      {
        Eigen::Map<Mat> gw(wn->grad.data(), K, rows);
        if (pointwise)
        {
          Eigen::Map<const Mat> xin(xn->data.data() + n * C * H * W, C,
                                    cols);
          gw.noalias() += gn * xin.transpose();
        }
        else
          gw.noalias() +=
              gn * unrolled[static_cast<std::size_t>(n)].transpose();
      }
      if (bn->requires_grad)
        bn->grad.matrix() += gn.rowwise().sum();
      if (xn->requires_grad)
      {
        if (pointwise)
        {
          Eigen::Map<Mat> gx(xn->grad.data() + n * C * H * W, C, cols);
          gx.noalias() += wmat.transpose() * gn;
        }
        else
        {
          Mat gcol = wmat.transpose() * gn;
          detail::col2im(gcol.data(), C, H, W, kh, kw, stride, pad, Ho, Wo,
                         padding, xn->grad.data() + n * C * H * W);
        }
      }
    }
  };
  return Tensor<S>::make_result({N, K, Ho, Wo}, std::move(out), {x, w, b},
                                std::move(backward));
}

//! Elementwise max(0, x). The subgradient at exactly zero is zero.
template <typename S>
auto relu(Tensor<S> x) -> Tensor<S>
{
  typename Tensor<S>::Buffer out = x.data().max(S(0));
  auto xn = x.node();
  return Tensor<S>::make_result(x.shape(), std::move(out), {x},
                                [xn](const typename Tensor<S>::Buffer& g) {
                                  xn->grad += (xn->data > S(0)).select(g, S(0));
                                });
}

//! Spatial mean per channel: N x C x H x W -> N x C x 1 x 1.
template <typename S>
auto global_avg_pool(Tensor<S> x) -> Tensor<S>
{
  detail::require_rank("global_avg_pool", x.shape(), 4);
  const Index NC = x.dim(0) * x.dim(1), HW = x.dim(2) * x.dim(3);
  if (HW < 1)
    throw ShapeError("global_avg_pool", "empty spatial plane", x.shape());
  using Mat = detail::RowMatrix<S>;
  Eigen::Map<const Mat> xm(x.data().data(), NC, HW);
  typename Tensor<S>::Buffer out = (xm.rowwise().sum() / S(HW)).array();
  auto xn = x.node();
  return Tensor<S>::make_result(
      {x.dim(0), x.dim(1), 1, 1}, std::move(out), {x},
      [xn, NC, HW](const typename Tensor<S>::Buffer& g) {
        Eigen::Map<Mat> gx(xn->grad.data(), NC, HW);
        gx.colwise() += (g / S(HW)).matrix();
      });
}

template <typename S>
auto elementwise_add(Tensor<S> a, Tensor<S> b) -> Tensor<S>
{
  detail::require_same("elementwise_add", a.shape(), b.shape());
  auto an = a.node(), bn = b.node();
  return Tensor<S>::make_result(
      a.shape(), a.data() + b.data(), {a, b},
      [an, bn](const typename Tensor<S>::Buffer& g) {
        if (an->requires_grad)
          an->grad += g;
        if (bn->requires_grad)
          bn->grad += g;
      });
}

template <typename S>
auto elementwise_sub(Tensor<S> a, Tensor<S> b) -> Tensor<S>
{
  detail::require_same("elementwise_sub", a.shape(), b.shape());
  auto an = a.node(), bn = b.node();
  return Tensor<S>::make_result(
      a.shape(), a.data() - b.data(), {a, b},
      [an, bn](const typename Tensor<S>::Buffer& g) {
        if (an->requires_grad)
          an->grad += g;
        if (bn->requires_grad)
          bn->grad -= g;
      });
}

//! Multiplies by a compile-time-free constant.
template <typename S>
auto scale(Tensor<S> x, S factor) -> Tensor<S>
{
  auto xn = x.node();
  return Tensor<S>::make_result(x.shape(), x.data() * factor, {x},
                                [xn, factor](const typename Tensor<S>::Buffer& g) {
                                  xn->grad += g * factor;
                                });
}

//! Multiplies every element by a single-element tensor (differentiable in
//! both arguments).
template <typename S>
auto scale_by(Tensor<S> x, Tensor<S> factor) -> Tensor<S>
{
  if (factor.numel() != 1)
    throw ShapeError("scale_by", "factor must be single-element",
                     factor.shape());
  auto xn = x.node(), fn = factor.node();
  return Tensor<S>::make_result(
      x.shape(), x.data() * factor.data()[0], {x, factor},
      [xn, fn](const typename Tensor<S>::Buffer& g) {
        if (xn->requires_grad)
          xn->grad += g * fn->data[0];
        if (fn->requires_grad)
          fn->grad[0] += (g * xn->data).sum();
      });
}

//! Sum of all elements, as a rank-0 tensor.
template <typename S>
auto sum(Tensor<S> x) -> Tensor<S>
{
  typename Tensor<S>::Buffer out = Tensor<S>::Buffer::Constant(1, x.data().sum());
  auto xn = x.node();
  return Tensor<S>::make_result(Shape{}, std::move(out), {x},
                                [xn](const typename Tensor<S>::Buffer& g) {
                                  xn->grad += g[0];
                                });
}

template <typename S>
auto reshape(Tensor<S> x, Shape shape) -> Tensor<S>
{
  if (numel(shape) != x.numel())
    throw ShapeError("reshape", "element count differs", x.shape(), shape);
  auto xn = x.node();
  return Tensor<S>::make_result(std::move(shape), x.data(), {x},
                                [xn](const typename Tensor<S>::Buffer& g) {
                                  xn->grad += g;
                                });
}

//! Value copy that is cut off from the graph: nothing upstream of the input
//! receives gradient through the result.
template <typename S>
auto detach(const Tensor<S>& x) -> Tensor<S>
{
  return Tensor<S>(x.shape(), x.data(), false);
}

//! Stacks tensors along dimension 0. All trailing dimensions must agree.
template <typename S>
auto concat(const std::vector<Tensor<S>>& parts) -> Tensor<S>
{
  if (parts.empty())
    throw ValueError("concat", "no operands");
  Shape shape = parts.front().shape();
  if (shape.empty())
    throw ShapeError("concat", "operands must have rank >= 1", shape);
  Index total = 0;
  for (const auto& p : parts)
  {
    if (p.rank() != shape.size() ||
        !std::equal(shape.begin() + 1, shape.end(), p.shape().begin() + 1))
      throw ShapeError("concat", "trailing dimensions differ", shape,
                       p.shape());
    total += p.numel();
  }
  typename Tensor<S>::Buffer out(total);
  std::vector<typename Tensor<S>::NodePtr> nodes;
  std::vector<Index> offsets;
  Index at = 0, rows = 0;
  for (const auto& p : parts)
  {
    out.segment(at, p.numel()) = p.data();
    nodes.push_back(p.node());
    offsets.push_back(at);
    at += p.numel();
    rows += p.dim(0);
  }
  shape[0] = rows;
  return Tensor<S>::make_result(
      std::move(shape), std::move(out), parts,
      [nodes, offsets](const typename Tensor<S>::Buffer& g) {
        for (std::size_t i = 0; i < nodes.size(); ++i)
          if (nodes[i]->requires_grad)
            nodes[i]->grad += g.segment(offsets[i], nodes[i]->data.size());
      });
}

//! Gathers slices along dimension 0 (repeats allowed; gradients add up).
template <typename S>
auto select_batch(Tensor<S> x, std::span<const Index> indices) -> Tensor<S>
{
  if (x.rank() < 1)
    throw ShapeError("select_batch", "operand must have rank >= 1",
                     x.shape());
  const Index stride = x.dim(0) == 0 ? 0 : x.numel() / x.dim(0);
  std::vector<Index> idx(indices.begin(), indices.end());
  for (auto i : idx)
    if (i < 0 || i >= x.dim(0))
      throw ValueError("select_batch", "index " + std::to_string(i) +
                                           " out of range for dim 0 = " +
                                           std::to_string(x.dim(0)));
  typename Tensor<S>::Buffer out(static_cast<Index>(idx.size()) * stride);
  for (std::size_t k = 0; k < idx.size(); ++k)
    out.segment(static_cast<Index>(k) * stride, stride) =
        x.data().segment(idx[k] * stride, stride);
  Shape shape = x.shape();
  shape[0] = static_cast<Index>(idx.size());
  auto xn = x.node();
  return Tensor<S>::make_result(
      std::move(shape), std::move(out), {x},
      [xn, idx, stride](const typename Tensor<S>::Buffer& g) {
        for (std::size_t k = 0; k < idx.size(); ++k)
          xn->grad.segment(idx[k] * stride, stride) +=
              g.segment(static_cast<Index>(k) * stride, stride);
      });
}

//! Picks flat elements into a rank-1 tensor.
template <typename S>
auto gather(Tensor<S> x, std::span<const Index> flat) -> Tensor<S>
{
  std::vector<Index> idx(flat.begin(), flat.end());
  typename Tensor<S>::Buffer out(static_cast<Index>(idx.size()));
  for (std::size_t k = 0; k < idx.size(); ++k)
  {
    if (idx[k] < 0 || idx[k] >= x.numel())
      throw ValueError("gather", "flat index " + std::to_string(idx[k]) +
                                     " out of range");
    out[static_cast<Index>(k)] = x.data()[idx[k]];
  }
  auto xn = x.node();
  return Tensor<S>::make_result(
      {static_cast<Index>(idx.size())}, std::move(out), {x},
      [xn, idx](const typename Tensor<S>::Buffer& g) {
        for (std::size_t k = 0; k < idx.size(); ++k)
          xn->grad[idx[k]] += g[static_cast<Index>(k)];
      });
}

//! Bilinear interpolation with half-pixel centres (align_corners = false).
//! Source coordinates below zero clamp to the first row/column. Forward-only:
//! the result never records a graph edge.
template <typename S>
auto bilinear_resize(const Tensor<S>& x, Index out_h, Index out_w)
    -> Tensor<S>
{
  detail::require_rank("bilinear_resize", x.shape(), 4);
  const Index N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H < 1 || W < 1 || out_h < 1 || out_w < 1)
    throw ShapeError("bilinear_resize", "sizes must be positive", x.shape(),
                     Shape{out_h, out_w});

  struct Tap
  {
    Index lo, hi;
    S frac;
  };
  auto taps = [](Index in, Index out) {
    std::vector<Tap> t(static_cast<std::size_t>(out));
    const double ratio = static_cast<double>(in) / static_cast<double>(out);
    for (Index i = 0; i < out; ++i)
    {
      double src = (static_cast<double>(i) + 0.5) * ratio - 0.5;
      src = std::max(src, 0.0);
      Index lo = std::min(static_cast<Index>(std::floor(src)), in - 1);
      Index hi = std::min(lo + 1, in - 1);
      t[static_cast<std::size_t>(i)] = {lo, hi, static_cast<S>(src - lo)};
    }
    return t;
  };
  const auto ty = taps(H, out_h);
  const auto tx = taps(W, out_w);

  typename Tensor<S>::Buffer out(N * C * out_h * out_w);
  const S* src = x.data().data();
  for (Index p = 0; p < N * C; ++p)
  {
    const S* plane = src + p * H * W;
    S* dst = out.data() + p * out_h * out_w;
    for (Index i = 0; i < out_h; ++i)
    {
      const auto& a = ty[static_cast<std::size_t>(i)];
      for (Index j = 0; j < out_w; ++j)
      {
        const auto& c = tx[static_cast<std::size_t>(j)];
        const S top = plane[a.lo * W + c.lo] * (S(1) - c.frac) +
                      plane[a.lo * W + c.hi] * c.frac;
        const S bottom = plane[a.hi * W + c.lo] * (S(1) - c.frac) +
                         plane[a.hi * W + c.hi] * c.frac;
        dst[i * out_w + j] = top * (S(1) - a.frac) + bottom * a.frac;
      }
    }
  }
  return Tensor<S>({N, C, out_h, out_w}, std::move(out), false);
}

//! Mean over rows of -log softmax(logits)_label. `logits` is N x M (trailing
//! dimensions beyond the first are flattened into M).
template <typename S>
auto softmax_cross_entropy(Tensor<S> logits, std::span<const int> labels)
    -> Tensor<S>
{
  if (logits.rank() < 1)
    throw ShapeError("softmax_cross_entropy", "logits need a batch dimension",
                     logits.shape());
  const Index N = logits.dim(0);
  if (static_cast<Index>(labels.size()) != N || N == 0)
    throw ShapeError("softmax_cross_entropy",
                     "label count must equal batch size (and be > 0)",
                     logits.shape(),
                     Shape{static_cast<Index>(labels.size())});
  const Index M = logits.numel() / N;
  std::vector<int> lab(labels.begin(), labels.end());
  for (int u : lab)
    if (u < 0 || u >= M)
      throw ValueError("softmax_cross_entropy",
                       "label " + std::to_string(u) + " outside [0, " +
                           std::to_string(M - 1) + "]");

  using Mat = detail::RowMatrix<S>;
  Eigen::Map<const Mat> z(logits.data().data(), N, M);
  Mat prob(N, M);
  S loss = 0;
  for (Index n = 0; n < N; ++n)
  {
    const S peak = z.row(n).maxCoeff();
    prob.row(n) = (z.row(n).array() - peak).exp().matrix();
    const S norm = prob.row(n).sum();
    prob.row(n) /= norm;
    loss += -(z(n, lab[static_cast<std::size_t>(n)]) - peak - std::log(norm));
  }
  loss /= S(N);

  auto ln = logits.node();
  return Tensor<S>::make_result(
      Shape{}, Tensor<S>::Buffer::Constant(1, loss), {logits},
      [ln, prob = std::move(prob), lab, N, M](
          const typename Tensor<S>::Buffer& g) {
        Eigen::Map<Mat> gz(ln->grad.data(), N, M);
        Mat d = prob;
        for (Index n = 0; n < N; ++n)
          d(n, lab[static_cast<std::size_t>(n)]) -= S(1);
        gz += d * (g[0] / S(N));
      });
}

//! Elementwise robust L1: 0.5 x^2 when |x| < 1, |x| - 0.5 otherwise.
template <typename S>
auto smooth_l1(Tensor<S> x) -> Tensor<S>
{
  const auto& v = x.data();
  typename Tensor<S>::Buffer out =
      (v.abs() < S(1)).select(S(0.5) * v.square(), v.abs() - S(0.5));
  auto xn = x.node();
  return Tensor<S>::make_result(x.shape(), std::move(out), {x},
                                [xn](const typename Tensor<S>::Buffer& g) {
                                  xn->grad +=
                                      g * xn->data.max(S(-1)).min(S(1));
                                });
}

}  // namespace sanlab
