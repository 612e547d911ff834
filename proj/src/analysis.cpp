#include <sanlab/analysis.hpp>

#include <algorithm>
#include <fstream>
#include <map>
#include <numeric>
#include <set>

namespace sanlab {

auto top_k(const Eigen::VectorXd& v, int k) -> std::vector<Index>
{
  std::vector<Index> idx(static_cast<std::size_t>(v.size()));
  std::iota(idx.begin(), idx.end(), Index{0});
  const auto n = std::min<std::size_t>(static_cast<std::size_t>(std::max(k, 0)),
                                       idx.size());
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n),
                    idx.end(), [&](Index a, Index b) {
                      return v[a] > v[b] || (v[a] == v[b] && a < b);
                    });
  idx.resize(n);
  return idx;
}

auto compute_cam(std::span<const int> scales,
                 std::span<const Eigen::VectorXd> vectors, int k) -> CamMatrix
{
  if (vectors.empty())
    throw ValueError("compute_cam", "no channel vectors given");
  if (scales.size() != vectors.size())
    throw ValueError("compute_cam", "one scale per vector required");
  if (k < 1)
    throw ValueError("compute_cam", "k must be >= 1");
  const auto C = vectors.front().size();
  for (const auto& v : vectors)
    if (v.size() != C)
      throw ShapeError("compute_cam", "channel vectors differ in length",
                       Shape{C}, Shape{v.size()});

  CamMatrix cam;
  cam.k = k;
  cam.scales.assign(scales.begin(), scales.end());
  std::vector<bool> seen(static_cast<std::size_t>(C), false);
  for (const auto& v : vectors)
    for (auto c : top_k(v, k))
      if (!seen[static_cast<std::size_t>(c)])
      {
        seen[static_cast<std::size_t>(c)] = true;
        cam.channel_ids.push_back(c);
      }
  const auto R = static_cast<Index>(cam.channel_ids.size());
  const auto S = static_cast<Index>(vectors.size());
  cam.values.resize(R, S);
  for (Index j = 0; j < S; ++j)
    for (Index r = 0; r < R; ++r)
      cam.values(r, j) = vectors[static_cast<std::size_t>(j)][cam.channel_ids[static_cast<std::size_t>(r)]];
  return cam;
}

auto cam_stability(const CamMatrix& cam, int k) -> double
{
  const auto S = cam.values.cols();
  if (S < 2)
    throw ValueError("cam_stability", "need at least two scales");
  if (k < 1 || k > cam.k)
    throw ValueError("cam_stability", "k must be in [1, " +
                                          std::to_string(cam.k) + "]");
  // The rows hold every channel that was in some column's top cam.k, so the
  // top-k of a column can be read off the matrix. Ties go to the lower
  // channel id, as in the original vectors.
  std::vector<std::set<Index>> sets;
  for (Index j = 0; j < S; ++j)
  {
    std::vector<std::size_t> rows(cam.channel_ids.size());
    std::iota(rows.begin(), rows.end(), std::size_t{0});
    std::stable_sort(rows.begin(), rows.end(), [&](auto a, auto b) {
      const double va = cam.values(static_cast<Index>(a), j);
      const double vb = cam.values(static_cast<Index>(b), j);
      return va > vb || (va == vb && cam.channel_ids[a] < cam.channel_ids[b]);
    });
    std::set<Index> s;
    for (std::size_t r = 0; r < rows.size() && s.size() < static_cast<std::size_t>(k); ++r)
      s.insert(cam.channel_ids[rows[r]]);
    sets.push_back(std::move(s));
  }
  double total = 0;
  int pairs = 0;
  for (std::size_t a = 0; a < sets.size(); ++a)
    for (std::size_t b = a + 1; b < sets.size(); ++b)
    {
      std::vector<Index> inter;
      std::set_intersection(sets[a].begin(), sets[a].end(), sets[b].begin(),
                            sets[b].end(), std::back_inserter(inter));
      const double uni = static_cast<double>(sets[a].size() + sets[b].size() -
                                             inter.size());
      total += uni > 0 ? static_cast<double>(inter.size()) / uni : 1.0;
      ++pairs;
    }
  return total / pairs;
}

auto write_cam_csv(const std::filesystem::path& path, const CamMatrix& cam)
    -> void
{
  std::ofstream os(path);
  if (!os)
    throw std::runtime_error("cannot write " + path.string());
  os.precision(9);
  os << "channel";
  for (int s : cam.scales)
    os << ",s" << s;
  os << '\n';
  for (Index r = 0; r < cam.values.rows(); ++r)
  {
    os << cam.channel_ids[static_cast<std::size_t>(r)];
    for (Index j = 0; j < cam.values.cols(); ++j)
      os << ',' << cam.values(r, j);
    os << '\n';
  }
}

auto write_cam_pgm(const std::filesystem::path& path, const CamMatrix& cam,
                   bool per_column_max, int cell) -> void
{
  if (cell < 1)
    throw ValueError("write_cam_pgm", "cell size must be >= 1");
  Eigen::MatrixXd v = cam.values;
  if (per_column_max)
    for (Index j = 0; j < v.cols(); ++j)
    {
      const double m = v.col(j).maxCoeff();
      if (m > 0)
        v.col(j) /= m;
    }
  const double lo = v.size() ? v.minCoeff() : 0.0;
  const double hi = v.size() ? v.maxCoeff() : 0.0;
  const auto W = v.cols() * cell, H = v.rows() * cell;
  std::ofstream os(path, std::ios::binary);
  if (!os)
    throw std::runtime_error("cannot write " + path.string());
  os << "P5\n" << W << ' ' << H << "\n255\n";
  for (Index y = 0; y < H; ++y)
    for (Index x = 0; x < W; ++x)
    {
      const double t = hi > lo ? (v(y / cell, x / cell) - lo) / (hi - lo) : 1.0;
      os.put(static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * t))));
    }
}

auto rmse_report(const DetectorModel& model, const Dataset& held_out,
                 const DatasetConfig& render, std::span<const int> scales)
    -> std::vector<RmseRow>
{
  NoGradGuard no_grad;
  std::vector<RmseRow> rows;
  const Index ref = model.config.scheme.ref_scale;
  for (const auto& sample : held_out.samples)
    for (std::size_t j = 0; j < sample.annotations.size(); ++j)
    {
      const auto& ann = sample.annotations[j];
      const auto seed =
          Rng::derive(render.seed, "rmse",
                      static_cast<std::uint64_t>(sample.image.id) * 64 + j)
              .next_u64();
      for (int s : scales)
      {
        const auto one = render_single_object(render, ann.class_id, s, seed,
                                              sample.image.id);
        const auto& box = one.annotations.front().box;
        const auto fmap = backbone_forward(one.image, model.backbone);
        const auto z_s = global_avg_pool(roi_pool(
            fmap, box, model.config.pool_size, model.config.san_pool,
            model.stride()));
        const auto z_s0 =
            extract_reference_feature(one.image, box, ref, model.backbone);
        RmseRow row{sample.image.id, ann.class_id, s, rmse_without_san(z_s, z_s0),
                    0.0};
        row.rmse_with =
            model.san ? rmse_with_san(z_s, z_s0, *model.san,
                                      partition_index(box, model.config.scheme))
                      : row.rmse_without;
        rows.push_back(row);
      }
    }
  return rows;
}

auto RmseSummary::fraction_improved() const -> double
{
  if (per_class.empty())
    return 0.0;
  const auto n = std::count_if(per_class.begin(), per_class.end(),
                               [](const auto& c) { return c.mean_with < c.mean_without; });
  return static_cast<double>(n) / static_cast<double>(per_class.size());
}

auto RmseSummary::relative_reduction() const -> double
{
  return mean_without > 0 ? 1.0 - mean_with / mean_without : 0.0;
}

auto summarize_rmse(std::span<const RmseRow> rows, int num_classes)
    -> RmseSummary
{
  RmseSummary out;
  auto mean_std = [](const std::vector<double>& v) {
    double m = 0;
    for (double x : v)
      m += x;
    m /= static_cast<double>(v.size());
    double var = 0;
    for (double x : v)
      var += (x - m) * (x - m);
    return std::pair{m, std::sqrt(var / static_cast<double>(v.size()))};
  };
  for (int k = 1; k <= num_classes; ++k)
  {
    std::vector<double> without, with;
    for (const auto& r : rows)
      if (r.class_id == k)
      {
        without.push_back(r.rmse_without);
        with.push_back(r.rmse_with);
      }
    if (without.empty())
      continue;
    RmseClassSummary c;
    c.class_id = k;
    c.count = without.size();
    std::tie(c.mean_without, c.std_without) = mean_std(without);
    std::tie(c.mean_with, c.std_with) = mean_std(with);
    out.per_class.push_back(c);
  }
  if (!rows.empty())
  {
    for (const auto& r : rows)
    {
      out.mean_without += r.rmse_without;
      out.mean_with += r.rmse_with;
    }
    out.mean_without /= static_cast<double>(rows.size());
    out.mean_with /= static_cast<double>(rows.size());
  }
  return out;
}

auto write_rmse_csv(const std::filesystem::path& path,
                    std::span<const RmseRow> rows) -> void
{
  std::ofstream os(path);
  if (!os)
    throw std::runtime_error("cannot write " + path.string());
  os.precision(9);
  os << kRmseHeader << '\n';
  for (const auto& r : rows)
    os << r.sample_id << ',' << r.class_id << ',' << r.scale << ','
       << r.rmse_without << ',' << r.rmse_with << '\n';
}

auto write_rmse_summary_csv(const std::filesystem::path& path,
                            const RmseSummary& summary) -> void
{
  std::ofstream os(path);
  if (!os)
    throw std::runtime_error("cannot write " + path.string());
  os.precision(9);
  os << "class_id,count,mean_without,std_without,mean_with,std_with\n";
  for (const auto& c : summary.per_class)
    os << c.class_id << ',' << c.count << ',' << c.mean_without << ','
       << c.std_without << ',' << c.mean_with << ',' << c.std_with << '\n';
}

auto average_precision(const std::vector<bool>& ranked_hits, std::size_t n_gt)
    -> double
{
  if (n_gt == 0 || ranked_hits.empty())
    return 0.0;
  const auto n = ranked_hits.size();
  std::vector<double> prec(n), rec(n);
  double tp = 0;
  for (std::size_t i = 0; i < n; ++i)
  {
    tp += ranked_hits[i] ? 1.0 : 0.0;
    prec[i] = tp / static_cast<double>(i + 1);
    rec[i] = tp / static_cast<double>(n_gt);
  }
  // Precision envelope from the right, then sum rectangles at recall steps.
  for (std::size_t i = n - 1; i-- > 0;)
    prec[i] = std::max(prec[i], prec[i + 1]);
  double ap = 0, last_rec = 0;
  for (std::size_t i = 0; i < n; ++i)
    if (rec[i] > last_rec)
    {
      ap += (rec[i] - last_rec) * prec[i];
      last_rec = rec[i];
    }
  return ap;
}

auto evaluate_ap(std::span<const Detection> detections,
                 std::span<const Annotation> gts, int num_classes,
                 double iou_threshold) -> ApResult
{
  ApResult out;
  out.per_class.assign(static_cast<std::size_t>(num_classes), 0.0);
  out.present.assign(static_cast<std::size_t>(num_classes), false);
  int n_present = 0;
  double sum = 0;
  for (int k = 1; k <= num_classes; ++k)
  {
    std::vector<std::size_t> gt_idx;
    for (std::size_t g = 0; g < gts.size(); ++g)
      if (gts[g].class_id == k)
        gt_idx.push_back(g);
    std::vector<std::size_t> order;
    for (std::size_t d = 0; d < detections.size(); ++d)
      if (detections[d].class_id == k)
        order.push_back(d);
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) {
      return detections[a].score > detections[b].score;
    });
    std::vector<bool> used(gt_idx.size(), false);
    std::vector<bool> hits;
    for (auto d : order)
    {
      const auto& box = detections[d].box;
      double best = -1;
      std::size_t best_g = 0;
      for (std::size_t g = 0; g < gt_idx.size(); ++g)
      {
        const auto& gt = gts[gt_idx[g]].box;
        if (gt.image_id != box.image_id)
          continue;
        const double o = iou(box, gt);
        if (o > best)
        {
          best = o;
          best_g = g;
        }
      }
      const bool hit = best >= iou_threshold && !used[best_g];
      if (hit)
        used[best_g] = true;
      hits.push_back(hit);
    }
    const double ap = average_precision(hits, gt_idx.size());
    out.per_class[static_cast<std::size_t>(k - 1)] = ap;
    if (!gt_idx.empty())
    {
      out.present[static_cast<std::size_t>(k - 1)] = true;
      sum += ap;
      ++n_present;
    }
  }
  out.map = n_present ? sum / n_present : 0.0;
  return out;
}

auto evaluate_model(const DetectorModel& model, const Dataset& data,
                    std::uint64_t seed, int proposals_per_gt, int negatives)
    -> ApResult
{
  std::vector<Detection> dets;
  std::vector<Annotation> gts;
  for (const auto& s : data.samples)
  {
    auto rng = Rng::derive(seed, "eval.proposals",
                           static_cast<std::uint64_t>(s.image.id));
    const auto props = make_proposals(
        s.annotations, proposals_per_gt, negatives, rng,
        static_cast<int>(s.image.width()), static_cast<int>(s.image.height()),
        s.image.id);
    for (auto& d : detect(model, s.image, props))
      dets.push_back(d);
    gts.insert(gts.end(), s.annotations.begin(), s.annotations.end());
  }
  return evaluate_ap(dets, gts, model.config.num_classes);
}

}  // namespace sanlab
