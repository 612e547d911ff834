#pragma once

#include <sanlab/model.hpp>
#include <sanlab/synth.hpp>

#include <Eigen/Dense>

#include <cmath>
#include <filesystem>
#include <span>
#include <vector>

namespace sanlab {

//! Dominant channels across a scale sweep. Row r of `values` belongs to
//! channel_ids[r], column j to scales[j].
struct CamMatrix
{
  std::vector<int> scales;
  std::vector<Index> channel_ids;
  Eigen::MatrixXd values;
  int k = 0;  // top-k used to build channel_ids
};

//! Indices of the k largest entries, largest first; ties go to the lower
//! index.
auto top_k(const Eigen::VectorXd& v, int k) -> std::vector<Index>;

auto compute_cam(std::span<const int> scales,
                 std::span<const Eigen::VectorXd> vectors, int k = 10)
    -> CamMatrix;

template <typename S>
auto compute_cam(const ScaleSweep<S>& sweep, int k = 10) -> CamMatrix
{
  std::vector<Eigen::VectorXd> v;
  for (const auto& x : sweep.vectors)
    v.emplace_back(x.template cast<double>());
  return compute_cam(sweep.scales, v, k);
}

//! Mean pairwise Jaccard similarity of the per-scale top-k channel sets.
//! Needs at least two scales and k <= cam.k.
auto cam_stability(const CamMatrix& cam, int k) -> double;

auto write_cam_csv(const std::filesystem::path& path, const CamMatrix& cam)
    -> void;

//! Grey-level heatmap, one `cell` x `cell` block per matrix entry, min-max
//! normalised over the whole matrix (after optional per-column max scaling).
auto write_cam_pgm(const std::filesystem::path& path, const CamMatrix& cam,
                   bool per_column_max = false, int cell = 12) -> void;

namespace detail {
  template <typename S>
  auto check_pooled_vector(const Tensor<S>& z, const char* op) -> void
  {
    if (z.rank() != 4 || z.dim(0) != 1 || z.dim(2) != 1 || z.dim(3) != 1)
      throw ShapeError(op, "expected a 1 x C x 1 x 1 feature", z.shape(),
                       Shape{1, -1, 1, 1});
  }
}  // namespace detail

//! Root mean squared difference over channels of two pooled features.
template <typename S>
auto rmse_without_san(const Tensor<S>& z_s, const Tensor<S>& z_s0) -> double
{
  detail::check_pooled_vector(z_s, "rmse_without_san");
  detail::check_pooled_vector(z_s0, "rmse_without_san");
  if (z_s.dim(1) != z_s0.dim(1))
    throw ShapeError("rmse_without_san", "channel counts differ", z_s.shape(),
                     z_s0.shape());
  const Index C = z_s.dim(1);
  double acc = 0;
  for (Index c = 0; c < C; ++c)
  {
    const double d = static_cast<double>(z_s.data()[c]) -
                     static_cast<double>(z_s0.data()[c]);
    acc += d * d;
  }
  return std::sqrt(acc / static_cast<double>(C));
}

//! Same, after passing z_s through sub-network `partition` of the SAN.
template <typename S>
auto rmse_with_san(const Tensor<S>& z_s, const Tensor<S>& z_s0,
                   const SanModule<S>& m, int partition) -> double
{
  detail::check_pooled_vector(z_s, "rmse_with_san");
  NoGradGuard no_grad;
  return rmse_without_san(san_forward(z_s, partition, m), z_s0);
}

struct RmseRow
{
  int sample_id = 0;
  int class_id = 0;
  int scale = 0;
  double rmse_without = 0;
  double rmse_with = 0;
};

inline constexpr char kRmseHeader[] =
    "sample_id,class_id,scale,rmse_without,rmse_with";

//! Re-renders every annotation of `held_out` alone at each side length in
//! `scales` (same background and colour across scales) and compares the
//! pooled RoI feature against the scale-normalised patch feature, before and
//! after the SAN. Models without a SAN report rmse_with == rmse_without.
auto rmse_report(const DetectorModel& model, const Dataset& held_out,
                 const DatasetConfig& render, std::span<const int> scales)
    -> std::vector<RmseRow>;

struct RmseClassSummary
{
  int class_id = 0;
  std::size_t count = 0;
  double mean_without = 0;
  double std_without = 0;
  double mean_with = 0;
  double std_with = 0;
};

struct RmseSummary
{
  std::vector<RmseClassSummary> per_class;  // classes with at least one row
  double mean_without = 0;
  double mean_with = 0;
  //! Fraction of summarised classes whose mean drops with the SAN.
  auto fraction_improved() const -> double;
  //! 1 - mean_with / mean_without.
  auto relative_reduction() const -> double;
};

auto summarize_rmse(std::span<const RmseRow> rows, int num_classes)
    -> RmseSummary;

auto write_rmse_csv(const std::filesystem::path& path,
                    std::span<const RmseRow> rows) -> void;
auto write_rmse_summary_csv(const std::filesystem::path& path,
                            const RmseSummary& summary) -> void;

struct ApResult
{
  std::vector<double> per_class;  // index k-1 for class k; 0 if absent
  std::vector<bool> present;      // class has at least one ground truth
  double map = 0;                 // mean over present classes
};

//! VOC-style average precision with all-points interpolation. Detections are
//! matched greedily from the highest score (ties: lower index first) to the
//! best-overlapping ground truth of the same image and class; a ground truth
//! counts once, later hits on it are false positives.
auto evaluate_ap(std::span<const Detection> detections,
                 std::span<const Annotation> gts, int num_classes,
                 double iou_threshold = 0.5) -> ApResult;

//! Area under the all-points interpolated precision-recall curve for one
//! class, given hit flags in ranked order.
auto average_precision(const std::vector<bool>& ranked_hits, std::size_t n_gt)
    -> double;

//! Runs `detect` over every image of `data` with `proposals_per_gt` jittered
//! proposals per ground truth and `negatives` random boxes (seeded), then
//! scores the result.
auto evaluate_model(const DetectorModel& model, const Dataset& data,
                    std::uint64_t seed, int proposals_per_gt = 8,
                    int negatives = 16) -> ApResult;

}  // namespace sanlab
