#pragma once
// Independent reference implementations used by the unit and acceptance
// tests. Nothing here calls the library code it is checking.

#include <sanlab/analysis.hpp>
#include <sanlab/ops.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <set>
#include <vector>

namespace oracle {

using sanlab::Index;
using sanlab::Tensord;

//! Norm-wise relative error between an analytic gradient and central finite
//! differences, worst over all inputs.
inline auto gradient_error(
    const std::function<Tensord(std::vector<Tensord>&)>& f,
    std::vector<Tensord> inputs, double h = 1e-3) -> double
{
  for (auto& t : inputs)
  {
    t.set_requires_grad(true);
    t.clear_grad();
  }
  auto loss = f(inputs);
  loss.backward();
  double worst = 0;
  for (auto& t : inputs)
  {
    const auto analytic = t.grad();
    Eigen::ArrayXd numeric(t.numel());
    sanlab::NoGradGuard no_grad;
    for (Index i = 0; i < t.numel(); ++i)
    {
      const double keep = t.data()[i];
      t.data()[i] = keep + h;
      const double up = f(inputs).item();
      t.data()[i] = keep - h;
      const double down = f(inputs).item();
      t.data()[i] = keep;
      numeric[i] = (up - down) / (2 * h);
    }
    const double scale = std::max({analytic.matrix().norm(),
                                   numeric.matrix().norm(), 1e-8});
    worst = std::max(worst, (analytic - numeric).matrix().norm() / scale);
  }
  return worst;
}

//! Cells of a pooled bin: every cell whose unit interval overlaps the bin's
//! fractional span [lo, hi) by a positive amount.
template <typename S>
auto roi_pool(const sanlab::Tensor<S>& feat, const sanlab::RoI& roi, Index out,
              sanlab::PoolMode mode, Index stride) -> std::vector<S>
{
  const Index C = feat.dim(1), h = feat.dim(2), w = feat.dim(3);
  auto to_cells = [&](double lo, double hi, Index extent) {
    Index b = 0;
    while (b < extent && (b + 1) * stride <= lo)
      ++b;
    Index e = extent;
    while (e > 0 && (e - 1) * stride >= hi)
      --e;
    return std::pair{b, e};
  };
  const auto [x0, x1] = to_cells(roi.x1, roi.x2, w);
  const auto [y0, y1] = to_cells(roi.y1, roi.y2, h);
  const double rw = static_cast<double>(x1 - x0);
  const double rh = static_cast<double>(y1 - y0);
  std::vector<S> result;
  for (Index c = 0; c < C; ++c)
    for (Index by = 0; by < out; ++by)
      for (Index bx = 0; bx < out; ++bx)
      {
        const double ylo = y0 + by * rh / out, yhi = y0 + (by + 1) * rh / out;
        const double xlo = x0 + bx * rw / out, xhi = x0 + (bx + 1) * rw / out;
        S acc = 0;
        S best = 0;
        bool first = true;
        int n = 0;
        for (Index y = 0; y < h; ++y)
          for (Index x = 0; x < w; ++x)
          {
            const bool in = y + 1 > ylo && y < yhi && x + 1 > xlo && x < xhi &&
                            y >= y0 && y < y1 && x >= x0 && x < x1;
            if (!in)
              continue;
            const S v = feat.data()[(c * h + y) * w + x];
            acc += v;
            if (first || v > best)
              best = v;
            first = false;
            ++n;
          }
        result.push_back(mode == sanlab::PoolMode::average ? acc / static_cast<S>(n)
                                                           : best);
      }
  return result;
}

//! Bilinear sample with the align-corners-false convention, computed
//! per output pixel straight from the formula.
inline auto bilinear(const std::vector<std::vector<double>>& img, Index out_h,
                     Index out_w) -> std::vector<std::vector<double>>
{
  const auto H = static_cast<Index>(img.size());
  const auto W = static_cast<Index>(img[0].size());
  std::vector<std::vector<double>> out(static_cast<std::size_t>(out_h),
                                       std::vector<double>(static_cast<std::size_t>(out_w)));
  for (Index i = 0; i < out_h; ++i)
    for (Index j = 0; j < out_w; ++j)
    {
      double sy = std::max(0.0, (i + 0.5) * H / out_h - 0.5);
      double sx = std::max(0.0, (j + 0.5) * W / out_w - 0.5);
      const auto y0 = std::min<Index>(static_cast<Index>(sy), H - 1);
      const auto x0 = std::min<Index>(static_cast<Index>(sx), W - 1);
      const auto y1 = std::min<Index>(y0 + 1, H - 1);
      const auto x1 = std::min<Index>(x0 + 1, W - 1);
      const double fy = sy - y0, fx = sx - x0;
      auto at = [&](Index y, Index x) {
        return img[static_cast<std::size_t>(y)][static_cast<std::size_t>(x)];
      };
      out[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] =
          (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x1)) +
          fy * ((1 - fx) * at(y1, x0) + fx * at(y1, x1));
    }
  return out;
}

//! Ordered union of per-scale top-k channels, by full sort.
inline auto cam_channels(const std::vector<Eigen::VectorXd>& vectors, int k)
    -> std::vector<Index>
{
  std::vector<Index> ids;
  for (const auto& v : vectors)
  {
    std::vector<std::pair<double, Index>> ranked;
    for (Index c = 0; c < v.size(); ++c)
      ranked.emplace_back(-v[c], c);  // ascending: largest value, lower index
    std::sort(ranked.begin(), ranked.end());
    for (int i = 0; i < k && i < static_cast<int>(ranked.size()); ++i)
      if (std::find(ids.begin(), ids.end(), ranked[static_cast<std::size_t>(i)].second) == ids.end())
        ids.push_back(ranked[static_cast<std::size_t>(i)].second);
  }
  return ids;
}

inline auto jaccard(const std::set<Index>& a, const std::set<Index>& b) -> double
{
  int inter = 0;
  for (auto x : a)
    inter += static_cast<int>(b.count(x));
  return static_cast<double>(inter) /
         static_cast<double>(a.size() + b.size() - static_cast<std::size_t>(inter));
}

inline auto rmse(const std::vector<double>& a, const std::vector<double>& b)
    -> double
{
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s / static_cast<double>(a.size()));
}

//! Partition by scanning the intervals (0, b0], (b0, b1], ..., (b_last, inf).
inline auto partition(double area, const std::vector<double>& bounds) -> int
{
  double lo = 0;
  for (std::size_t i = 0; i < bounds.size(); ++i)
  {
    if (area > lo && area <= bounds[i])
      return static_cast<int>(i);
    lo = bounds[i];
  }
  return static_cast<int>(bounds.size());
}

//! All-points AP from an explicit list of (recall, precision) points: for
//! each distinct recall level take the best precision at that recall or
//! beyond and sum the rectangles.
inline auto ap_from_pr(const std::vector<std::pair<double, double>>& pr)
    -> double
{
  double area = 0, prev = 0;
  for (std::size_t i = 0; i < pr.size(); ++i)
  {
    if (pr[i].first <= prev)
      continue;
    double best = 0;
    for (std::size_t j = i; j < pr.size(); ++j)
      best = std::max(best, pr[j].second);
    area += (pr[i].first - prev) * best;
    prev = pr[i].first;
  }
  return area;
}

}  // namespace oracle
