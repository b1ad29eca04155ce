#include "voxsteer/evalbench.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "voxsteer/threading.hpp"

namespace voxsteer {

namespace {

// Exact nearest-neighbor queries on a uniform grid with ring search.
class PointGrid {
 public:
  explicit PointGrid(const PointCloud& cloud) : pts_(cloud.pts) {
    lo_ = {1e30, 1e30, 1e30};
    hi_ = {-1e30, -1e30, -1e30};
    for (const auto& p : pts_)
      for (int a = 0; a < 3; ++a) {
        lo_[size_t(a)] = std::min(lo_[size_t(a)], p[size_t(a)]);
        hi_[size_t(a)] = std::max(hi_[size_t(a)], p[size_t(a)]);
      }
    double span = 1e-9;
    for (int a = 0; a < 3; ++a) span = std::max(span, hi_[size_t(a)] - lo_[size_t(a)]);
    res_ = std::max<int64_t>(1, int64_t(std::cbrt(double(pts_.size()) / 2.0)));
    res_ = std::min<int64_t>(res_, 32);
    cell_ = span / double(res_) + 1e-12;
    cells_.assign(size_t(res_ * res_ * res_), {});
    for (size_t i = 0; i < pts_.size(); ++i) cells_[size_t(cell_of(pts_[i]))].push_back(i);
  }

  // index of the nearest stored point plus the distance
  std::pair<size_t, double> nearest(const std::array<double, 3>& q) const {
    int64_t cx = coord(q[0], 0), cy = coord(q[1], 1), cz = coord(q[2], 2);
    size_t best = 0;
    double best_d2 = 1e300;
    for (int64_t ring = 0;; ++ring) {
      bool any_cell = false;
      for (int64_t dz = -ring; dz <= ring; ++dz)
        for (int64_t dy = -ring; dy <= ring; ++dy)
          for (int64_t dx = -ring; dx <= ring; ++dx) {
            if (std::max({std::abs(dx), std::abs(dy), std::abs(dz)}) != ring) continue;
            int64_t x = cx + dx, y = cy + dy, z = cz + dz;
            if (x < 0 || y < 0 || z < 0 || x >= res_ || y >= res_ || z >= res_) continue;
            any_cell = true;
            for (size_t i : cells_[size_t((z * res_ + y) * res_ + x)]) {
              double d2 = dist2(pts_[i], q);
              if (d2 < best_d2) {
                best_d2 = d2;
                best = i;
              }
            }
          }
      // Any point in a farther ring is at least (ring) * cell away; once the
      // best distance is within that bound the search is complete.
      if (best_d2 < 1e299) {
        double safe = double(ring) * cell_;
        if (std::sqrt(best_d2) <= safe) break;
      }
      if (!any_cell && ring > res_) break;  // exhausted the grid
    }
    return {best, std::sqrt(best_d2)};
  }

 private:
  int64_t coord(double v, int axis) const {
    int64_t c = int64_t((v - lo_[size_t(axis)]) / cell_);
    return std::clamp<int64_t>(c, 0, res_ - 1);
  }
  int64_t cell_of(const std::array<double, 3>& p) const {
    return (coord(p[2], 2) * res_ + coord(p[1], 1)) * res_ + coord(p[0], 0);
  }
  static double dist2(const std::array<double, 3>& a, const std::array<double, 3>& b) {
    double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
    return dx * dx + dy * dy + dz * dz;
  }

  std::vector<std::array<double, 3>> pts_;
  std::array<double, 3> lo_, hi_;
  int64_t res_ = 1;
  double cell_ = 1;
  std::vector<std::vector<size_t>> cells_;
};

double directed_mean(const PointCloud& from, const PointGrid& to_grid) {
  double sum = 0;
  for (const auto& p : from.pts) sum += to_grid.nearest(p).second;
  return sum / double(from.pts.size());
}

}  // namespace

double chamfer(const PointCloud& a, const PointCloud& b) {
  if (a.pts.empty() || b.pts.empty()) throw ContractError("chamfer: empty point cloud");
  PointGrid ga(a), gb(b);
  return 0.5 * (directed_mean(a, gb) + directed_mean(b, ga));
}

double f1_score(const PointCloud& pred, const PointCloud& gt, double tau) {
  if (pred.pts.empty() || gt.pts.empty()) throw ContractError("f1: empty point cloud");
  if (!(tau > 0)) throw ContractError("f1: tau must be > 0");
  PointGrid ggt(gt), gpred(pred);
  int64_t hit_p = 0, hit_r = 0;
  for (const auto& p : pred.pts)
    if (ggt.nearest(p).second <= tau) ++hit_p;
  for (const auto& p : gt.pts)
    if (gpred.nearest(p).second <= tau) ++hit_r;
  double precision = double(hit_p) / double(pred.pts.size());
  double recall = double(hit_r) / double(gt.pts.size());
  if (precision + recall == 0.0) return 0.0;
  return 2.0 * precision * recall / (precision + recall);
}

double voxel_iou(const VoxelAsset& a, const VoxelAsset& b) {
  if (a.g != b.g) throw ContractError("voxel_iou: grids differ");
  int64_t inter = 0, uni = 0;
  for (size_t i = 0; i < a.occ.size(); ++i) {
    bool oa = a.occ[i] != 0, ob = b.occ[i] != 0;
    inter += (oa && ob) ? 1 : 0;
    uni += (oa || ob) ? 1 : 0;
  }
  return uni == 0 ? 1.0 : double(inter) / double(uni);
}

double view_distance(const VoxelAsset& a, const VoxelAsset& b, int view_size) {
  if (a.g != b.g) throw ContractError("view_distance: grids differ");
  double total = 0;
  for (int vi = 0; vi < kViewCount; ++vi) {
    ViewImage ia = render_ortho(a, ViewDir(vi), view_size);
    ViewImage ib = render_ortho(b, ViewDir(vi), view_size);
    double sum = 0;
    for (size_t i = 0; i < ia.rgb.size(); ++i) {
      double d = double(ia.rgb[i]) - double(ib.rgb[i]);
      sum += d * d;
    }
    total += sum / double(ia.rgb.size());
  }
  return total / double(kViewCount);
}

// ---------------------------------------------------------------------------
// ICP
// ---------------------------------------------------------------------------

namespace {

struct Similarity {
  double scale = 1.0;
  Eigen::Matrix3d rot = Eigen::Matrix3d::Identity();
  Eigen::Vector3d trans = Eigen::Vector3d::Zero();

  Eigen::Vector3d apply(const Eigen::Vector3d& p) const { return scale * (rot * p) + trans; }
};

// Closed-form least-squares similarity (Umeyama) for paired points.
Similarity fit_similarity(const std::vector<Eigen::Vector3d>& src,
                          const std::vector<Eigen::Vector3d>& dst, bool with_scale) {
  size_t n = src.size();
  Eigen::Vector3d mu_s = Eigen::Vector3d::Zero(), mu_d = Eigen::Vector3d::Zero();
  for (size_t i = 0; i < n; ++i) {
    mu_s += src[i];
    mu_d += dst[i];
  }
  mu_s /= double(n);
  mu_d /= double(n);
  Eigen::Matrix3d sigma = Eigen::Matrix3d::Zero();
  double var_s = 0;
  for (size_t i = 0; i < n; ++i) {
    Eigen::Vector3d s = src[i] - mu_s, d = dst[i] - mu_d;
    sigma += d * s.transpose();
    var_s += s.squaredNorm();
  }
  sigma /= double(n);
  var_s /= double(n);
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(sigma, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Matrix3d u = svd.matrixU(), v = svd.matrixV();
  Eigen::Vector3d d_sv = svd.singularValues();
  Eigen::Vector3d s_fix = Eigen::Vector3d::Ones();
  if ((u * v.transpose()).determinant() < 0) s_fix(2) = -1;
  Similarity out;
  out.rot = u * s_fix.asDiagonal() * v.transpose();
  out.scale = with_scale ? (d_sv.dot(s_fix)) / var_s : 1.0;
  out.trans = mu_d - out.scale * (out.rot * mu_s);
  return out;
}

}  // namespace

IcpResult icp_align(const PointCloud& src, const PointCloud& dst, const IcpOptions& opts) {
  if (src.pts.size() < 4 || dst.pts.size() < 4)
    throw ContractError("icp: needs at least 4 points per cloud");
  std::vector<Eigen::Vector3d> s(src.pts.size()), d(dst.pts.size());
  for (size_t i = 0; i < s.size(); ++i) s[i] = Eigen::Vector3d(src.pts[i][0], src.pts[i][1], src.pts[i][2]);
  for (size_t i = 0; i < d.size(); ++i) d[i] = Eigen::Vector3d(dst.pts[i][0], dst.pts[i][1], dst.pts[i][2]);

  auto moments = [](const std::vector<Eigen::Vector3d>& pts) {
    Eigen::Vector3d mu = Eigen::Vector3d::Zero();
    for (const auto& p : pts) mu += p;
    mu /= double(pts.size());
    Eigen::Matrix3d scatter = Eigen::Matrix3d::Zero();
    double var = 0;
    for (const auto& p : pts) {
      scatter += (p - mu) * (p - mu).transpose();
      var += (p - mu).squaredNorm();
    }
    scatter /= double(pts.size());
    var /= double(pts.size());
    return std::tuple<Eigen::Vector3d, Eigen::Matrix3d, double>(mu, scatter, var);
  };

  auto [mu_s, scatter_s, var_s] = moments(s);
  auto [mu_d, scatter_d, var_d] = moments(d);
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig_s(scatter_s);
  if (eig_s.eigenvalues()(0) < 1e-12 * std::max(1.0, eig_s.eigenvalues()(2)))
    throw ContractError("icp: degenerate (rank-deficient) source points");
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig_d(scatter_d);

  // Principal-axes initialization: without a pose prior, plain iteration from
  // identity stalls in local minima for large rotations. Try the four
  // det-positive axis sign assignments and keep the best one-NN residual.
  Similarity current;
  {
    double scale0 = opts.with_scale ? std::sqrt(var_d / std::max(var_s, 1e-30)) : 1.0;
    double best_err = std::numeric_limits<double>::max();
    for (int flip = 0; flip < 4; ++flip) {
      Eigen::Matrix3d es = eig_s.eigenvectors();
      Eigen::Matrix3d ed = eig_d.eigenvectors();
      Eigen::Vector3d signs(flip & 1 ? -1 : 1, flip & 2 ? -1 : 1, 1);
      Eigen::Matrix3d rot = ed * signs.asDiagonal() * es.transpose();
      if (rot.determinant() < 0) {
        signs(2) = -1;
        rot = ed * signs.asDiagonal() * es.transpose();
      }
      Similarity cand;
      cand.rot = rot;
      cand.scale = scale0;
      cand.trans = mu_d - scale0 * (rot * mu_s);
      double err = 0;
      for (const auto& p : s) {
        Eigen::Vector3d q = cand.apply(p);
        double best = std::numeric_limits<double>::max();
        for (const auto& t : d) best = std::min(best, (q - t).squaredNorm());
        err += best;
      }
      if (err < best_err) {
        best_err = err;
        current = cand;
      }
    }
  }

  IcpResult result;
  double prev = -1;
  for (int iter = 0; iter < opts.max_iterations; ++iter) {
    // correspondences under the current transform (exhaustive: desk scale)
    std::vector<Eigen::Vector3d> matched(s.size());
    std::vector<Eigen::Vector3d> moved(s.size());
    for (size_t i = 0; i < s.size(); ++i) moved[i] = current.apply(s[i]);
    for (size_t i = 0; i < s.size(); ++i) {
      double best = 1e300;
      size_t arg = 0;
      for (size_t j = 0; j < d.size(); ++j) {
        double dd = (moved[i] - d[j]).squaredNorm();
        if (dd < best) {
          best = dd;
          arg = j;
        }
      }
      matched[i] = d[arg];
    }
    current = fit_similarity(s, matched, opts.with_scale);
    double err = 0;
    for (size_t i = 0; i < s.size(); ++i) err += (current.apply(s[i]) - matched[i]).squaredNorm();
    double rms = std::sqrt(err / double(s.size()));
    result.residuals.push_back(rms);
    if (prev >= 0 && std::abs(prev - rms) < opts.tolerance) break;
    prev = rms;
  }

  result.scale = current.scale;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) result.rotation[size_t(r)][size_t(c)] = current.rot(r, c);
  for (int r = 0; r < 3; ++r) result.translation[size_t(r)] = current.trans(r);
  result.aligned.pts.resize(src.pts.size());
  for (size_t i = 0; i < s.size(); ++i) {
    Eigen::Vector3d p = current.apply(s[i]);
    result.aligned.pts[i] = {p(0), p(1), p(2)};
  }
  return result;
}

// ---------------------------------------------------------------------------
// No-edit detection
// ---------------------------------------------------------------------------

namespace {

int nearest_palette(const float* rgb, int64_t stride, int64_t v) {
  const auto& pal = palette();
  int best = 0;
  double best_d = 1e300;
  for (int c = 0; c < kPaletteSize; ++c) {
    double d = 0;
    for (int ch = 0; ch < 3; ++ch) {
      double diff = double(rgb[ch * stride + v]) - double(pal[size_t(c)][size_t(ch)]);
      d += diff * diff;
    }
    if (d < best_d) {
      best_d = d;
      best = c;
    }
  }
  return best;
}

int64_t voxel_difference(const VoxelAsset& a, const VoxelAsset& b, EditCategory category) {
  if (a.g != b.g) throw ContractError("voxel difference: grids differ");
  int64_t n = a.voxels();
  int64_t count = 0;
  if (category == EditCategory::Texture) {
    for (int64_t v = 0; v < n; ++v) {
      bool oa = a.occ[size_t(v)] != 0, ob = b.occ[size_t(v)] != 0;
      if (oa != ob) {
        ++count;
      } else if (oa && ob) {
        if (nearest_palette(a.color.data(), n, v) != nearest_palette(b.color.data(), n, v))
          ++count;
      }
    }
  } else {
    for (int64_t v = 0; v < n; ++v)
      if ((a.occ[size_t(v)] != 0) != (b.occ[size_t(v)] != 0)) ++count;
  }
  return count;
}

}  // namespace

NoEditResult no_edit_rate(const std::vector<const VoxelAsset*>& predictions,
                          const std::vector<const VoxelAsset*>& sources,
                          const std::vector<const VoxelAsset*>& gts,
                          const std::vector<EditCategory>& categories, double threshold) {
  size_t n = predictions.size();
  if (sources.size() != n || gts.size() != n || categories.size() != n)
    throw ContractError("no_edit_rate: list lengths differ");
  NoEditResult out;
  out.flags.assign(n, 0);
  int64_t counted = 0, no_edits = 0;
  for (size_t i = 0; i < n; ++i) {
    int64_t denom = voxel_difference(*gts[i], *sources[i], categories[i]);
    if (denom == 0) {
      out.flags[i] = -1;
      ++out.excluded;
      continue;
    }
    int64_t num = voxel_difference(*predictions[i], *sources[i], categories[i]);
    bool no_edit = double(num) < threshold * double(denom);
    out.flags[i] = no_edit ? 1 : 0;
    ++counted;
    if (no_edit) ++no_edits;
  }
  out.rate = counted == 0 ? 0.0 : double(no_edits) / double(counted);
  return out;
}

// ---------------------------------------------------------------------------
// Benchmark protocol
// ---------------------------------------------------------------------------

MetricRow evaluate_prediction(const VoxelAsset& pred, const StoredRecord& rec, int64_t id,
                              const std::string& split, const BenchConfig& cfg) {
  MetricRow row;
  row.id = id;
  row.category = category_name(rec.instr.category);
  row.split = split;

  // one sampling seed for both clouds so identical assets give distance zero
  uint64_t point_seed = Rng(cfg.seed).fork("points").fork(uint64_t(id)).next_u64();
  PointCloud pred_pts = sample_surface_points(pred, cfg.points, point_seed);
  PointCloud gt_pts = sample_surface_points(rec.edited, cfg.points, point_seed);
  if (cfg.icp) {
    IcpOptions opts;
    opts.with_scale = cfg.icp_with_scale;
    pred_pts = icp_align(pred_pts, gt_pts, opts).aligned;
  }
  row.chamfer = chamfer(pred_pts, gt_pts);
  row.f1 = f1_score(pred_pts, gt_pts, cfg.f1_tau);
  row.iou = voxel_iou(pred, rec.edited);
  row.view_distance = view_distance(pred, rec.edited, rec.cond.w);

  NoEditResult ne = no_edit_rate({&pred}, {&rec.source}, {&rec.edited}, {rec.instr.category},
                                 cfg.no_edit_threshold);
  row.no_edit = ne.flags[0] == 1;
  row.no_edit_excluded = ne.flags[0] == -1;
  return row;
}

namespace {

void aggregate_rows(MetricReport& report) {
  auto add_group = [&](const std::string& category, const std::string& split) {
    MetricAggregate agg;
    agg.category = category;
    agg.split = split;
    int64_t ok = 0, no_edit_counted = 0, no_edits = 0;
    for (const auto& row : report.rows) {
      bool cat_ok = category == "all" || row.category == category;
      bool split_ok = split == "all" || row.split == split;
      if (!cat_ok || !split_ok) continue;
      ++agg.count;
      if (row.failed) {
        ++agg.failures;
        continue;
      }
      ++ok;
      agg.chamfer += row.chamfer;
      agg.f1 += row.f1;
      agg.iou += row.iou;
      agg.view_distance += row.view_distance;
      if (!row.no_edit_excluded) {
        ++no_edit_counted;
        if (row.no_edit) ++no_edits;
      } else {
        ++agg.no_edit_excluded;
      }
    }
    if (agg.count == 0) return;
    if (ok > 0) {
      agg.chamfer /= double(ok);
      agg.f1 /= double(ok);
      agg.iou /= double(ok);
      agg.view_distance /= double(ok);
    }
    agg.no_edit_rate = no_edit_counted ? double(no_edits) / double(no_edit_counted) : 0.0;
    report.aggregates.push_back(agg);
  };

  std::vector<std::string> categories{"all"}, splits{"all"};
  for (const auto& row : report.rows) {
    if (std::find(categories.begin(), categories.end(), row.category) == categories.end())
      categories.push_back(row.category);
    if (std::find(splits.begin(), splits.end(), row.split) == splits.end())
      splits.push_back(row.split);
  }
  for (const auto& c : categories)
    for (const auto& s : splits) add_group(c, s);
}

}  // namespace

void verify_report_aggregates(const MetricReport& report) {
  MetricReport check;
  check.rows = report.rows;
  aggregate_rows(check);
  if (check.aggregates.size() != report.aggregates.size())
    throw ContractError("report: aggregate group count mismatch");
  for (size_t i = 0; i < check.aggregates.size(); ++i) {
    const auto& a = report.aggregates[i];
    const auto& b = check.aggregates[i];
    bool same = a.category == b.category && a.split == b.split && a.count == b.count &&
                a.failures == b.failures && a.chamfer == b.chamfer && a.f1 == b.f1 &&
                a.iou == b.iou && a.view_distance == b.view_distance &&
                a.no_edit_rate == b.no_edit_rate && a.no_edit_excluded == b.no_edit_excluded;
    if (!same) throw ContractError("report: aggregates do not match recomputation from rows");
  }
}

MetricReport run_benchmark(const EditModels& models, const std::vector<EvalDataset>& datasets,
                           const BenchConfig& cfg) {
  struct Job {
    const StoredRecord* rec;
    std::string split;
    int64_t id;
  };
  std::vector<Job> jobs;
  for (const auto& ds : datasets) {
    if (!ds.data) throw ContractError("run_benchmark: null dataset");
    if (!cfg.split_filter.empty() && ds.split != cfg.split_filter) continue;
    for (const auto& rec : ds.data->records)
      jobs.push_back({&rec, ds.split, int64_t(jobs.size())});
  }

  MetricReport report;
  report.rows.resize(jobs.size());
  report.points = cfg.points;
  report.f1_tau = cfg.f1_tau;
  report.icp = cfg.icp;
  report.seed = cfg.seed;
  report.sampler_steps = cfg.sampler.steps;
  report.cfg_scale = cfg.sampler.cfg_scale;

  parallel_for(int64_t(jobs.size()), cfg.threads, [&](int64_t i) {
    const Job& job = jobs[size_t(i)];
    SamplerConfig sampler = cfg.sampler;
    sampler.seed = Rng(cfg.seed).fork("edit").fork(uint64_t(job.id)).next_u64();
    MetricRow row;
    try {
      VoxelAsset pred = edit_asset(job.rec->cond, job.rec->instr, models, sampler);
      row = evaluate_prediction(pred, *job.rec, job.id, job.split, cfg);
    } catch (const DegenerateOutputError&) {
      row.id = job.id;
      row.category = category_name(job.rec->instr.category);
      row.split = job.split;
      row.failed = true;
    }
    report.rows[size_t(i)] = row;
  });

  aggregate_rows(report);
  verify_report_aggregates(report);
  return report;
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

namespace {

nlohmann::json row_json(const MetricRow& r) {
  return {{"id", r.id},
          {"category", r.category},
          {"split", r.split},
          {"chamfer", r.chamfer},
          {"f1", r.f1},
          {"iou", r.iou},
          {"view_distance", r.view_distance},
          {"no_edit", r.no_edit},
          {"no_edit_excluded", r.no_edit_excluded},
          {"failed", r.failed}};
}

MetricRow row_from_json(const nlohmann::json& j) {
  MetricRow r;
  r.id = j.at("id").get<int64_t>();
  r.category = j.at("category").get<std::string>();
  r.split = j.at("split").get<std::string>();
  r.chamfer = j.at("chamfer").get<double>();
  r.f1 = j.at("f1").get<double>();
  r.iou = j.at("iou").get<double>();
  r.view_distance = j.at("view_distance").get<double>();
  r.no_edit = j.at("no_edit").get<bool>();
  r.no_edit_excluded = j.at("no_edit_excluded").get<bool>();
  r.failed = j.at("failed").get<bool>();
  return r;
}

}  // namespace

std::string MetricReport::to_json() const {
  nlohmann::json j;
  j["config"] = {{"points", points},       {"f1_tau", f1_tau},
                 {"icp", icp},             {"seed", seed},
                 {"sampler_steps", sampler_steps}, {"cfg_scale", cfg_scale}};
  j["rows"] = nlohmann::json::array();
  for (const auto& r : rows) j["rows"].push_back(row_json(r));
  j["aggregates"] = nlohmann::json::array();
  for (const auto& a : aggregates)
    j["aggregates"].push_back({{"category", a.category},
                               {"split", a.split},
                               {"count", a.count},
                               {"failures", a.failures},
                               {"chamfer", a.chamfer},
                               {"f1", a.f1},
                               {"iou", a.iou},
                               {"view_distance", a.view_distance},
                               {"no_edit_rate", a.no_edit_rate},
                               {"no_edit_excluded", a.no_edit_excluded}});
  return j.dump(2);
}

MetricReport MetricReport::from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  MetricReport r;
  r.points = j.at("config").at("points").get<int>();
  r.f1_tau = j.at("config").at("f1_tau").get<double>();
  r.icp = j.at("config").at("icp").get<bool>();
  r.seed = j.at("config").at("seed").get<uint64_t>();
  r.sampler_steps = j.at("config").at("sampler_steps").get<int>();
  r.cfg_scale = j.at("config").at("cfg_scale").get<double>();
  for (const auto& jr : j.at("rows")) r.rows.push_back(row_from_json(jr));
  for (const auto& ja : j.at("aggregates")) {
    MetricAggregate a;
    a.category = ja.at("category").get<std::string>();
    a.split = ja.at("split").get<std::string>();
    a.count = ja.at("count").get<int64_t>();
    a.failures = ja.at("failures").get<int64_t>();
    a.chamfer = ja.at("chamfer").get<double>();
    a.f1 = ja.at("f1").get<double>();
    a.iou = ja.at("iou").get<double>();
    a.view_distance = ja.at("view_distance").get<double>();
    a.no_edit_rate = ja.at("no_edit_rate").get<double>();
    a.no_edit_excluded = ja.at("no_edit_excluded").get<int64_t>();
    r.aggregates.push_back(a);
  }
  return r;
}

void MetricReport::save(const std::string& json_path, const std::string& csv_path) const {
  {
    std::ofstream os(json_path, std::ios::trunc);
    if (!os) throw IoError("report '" + json_path + "': cannot open for writing");
    os << to_json() << "\n";
    if (!os) throw IoError("report '" + json_path + "': write failed");
  }
  std::ofstream os(csv_path, std::ios::trunc);
  if (!os) throw IoError("report '" + csv_path + "': cannot open for writing");
  os << "id,category,split,chamfer,f1,iou,view_distance,no_edit,no_edit_excluded,failed\n";
  for (const auto& r : rows) {
    char line[256];
    std::snprintf(line, sizeof line, "%lld,%s,%s,%.9g,%.9g,%.9g,%.9g,%d,%d,%d\n", (long long)r.id,
                  r.category.c_str(), r.split.c_str(), r.chamfer, r.f1, r.iou, r.view_distance,
                  int(r.no_edit), int(r.no_edit_excluded), int(r.failed));
    os << line;
  }
  if (!os) throw IoError("report '" + csv_path + "': write failed");
}

void write_scaling_csv(const std::vector<std::pair<int64_t, MetricReport>>& points,
                       const std::string& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("scaling csv '" + path + "': cannot open for writing");
  os << "train_size,chamfer,f1,iou,view_distance,no_edit_rate\n";
  for (const auto& [size, report] : points) {
    const MetricAggregate* all = nullptr;
    for (const auto& a : report.aggregates)
      if (a.category == "all" && a.split == "all") all = &a;
    if (!all) throw ContractError("scaling csv: report lacks the overall aggregate");
    char line[256];
    std::snprintf(line, sizeof line, "%lld,%.9g,%.9g,%.9g,%.9g,%.9g\n", (long long)size,
                  all->chamfer, all->f1, all->iou, all->view_distance, all->no_edit_rate);
    os << line;
  }
  if (!os) throw IoError("scaling csv '" + path + "': write failed");
}

}  // namespace voxsteer
