#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "voxsteer/dataengine.hpp"
#include "voxsteer/sampler.hpp"
#include "voxsteer/voxelworld.hpp"

namespace voxsteer {

// Symmetric chamfer distance: the two directed mean nearest-neighbor
// (Euclidean, non-squared) distances averaged. Exact; grid-accelerated.
double chamfer(const PointCloud& a, const PointCloud& b);

// F1@tau: precision = fraction of pred points within tau of gt, recall
// symmetric, 0 when both vanish.
double f1_score(const PointCloud& pred, const PointCloud& gt, double tau);

double voxel_iou(const VoxelAsset& a, const VoxelAsset& b);

// Mean over the six canonical views of per-pixel RGB MSE (the LPIPS slot in
// the protocol).
double view_distance(const VoxelAsset& a, const VoxelAsset& b, int view_size);

struct IcpOptions {
  bool with_scale = true;
  int max_iterations = 50;
  double tolerance = 1e-6;
};

struct IcpResult {
  double scale = 1.0;
  std::array<std::array<double, 3>, 3> rotation{{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}};
  std::array<double, 3> translation{0, 0, 0};
  PointCloud aligned;
  std::vector<double> residuals;  // RMS correspondence error per iteration
};

// Iterative closest point with a closed-form similarity fit per iteration
// (rotation, translation, optional uniform scale). Residuals are monotone
// non-increasing.
IcpResult icp_align(const PointCloud& src, const PointCloud& dst, const IcpOptions& opts = {});

struct NoEditResult {
  double rate = 0.0;
  std::vector<int8_t> flags;  // 1 no-edit, 0 edited, -1 excluded (gt == source)
  int64_t excluded = 0;
};

// An example counts as a "no edit" failure iff the pred-source difference is
// below `threshold` times the gt-source difference (occupancy symmetric
// difference for geometry edits, changed-color voxel count for texture).
NoEditResult no_edit_rate(const std::vector<const VoxelAsset*>& predictions,
                          const std::vector<const VoxelAsset*>& sources,
                          const std::vector<const VoxelAsset*>& gts,
                          const std::vector<EditCategory>& categories, double threshold = 0.1);

// ---------------------------------------------------------------------------
// Benchmark protocol
// ---------------------------------------------------------------------------

struct BenchConfig {
  SamplerConfig sampler;
  int points = 2000;
  double f1_tau = 0.05;
  bool icp = false;
  bool icp_with_scale = true;
  double no_edit_threshold = 0.1;
  int threads = 0;
  uint64_t seed = 1;
  std::string split_filter;  // empty: everything
};

struct MetricRow {
  int64_t id = 0;
  std::string category;
  std::string split;
  double chamfer = 0, f1 = 0, iou = 0, view_distance = 0;
  bool no_edit = false;
  bool no_edit_excluded = false;
  bool failed = false;  // degenerate sampler output
};

struct MetricAggregate {
  std::string category;  // "all" rolls everything up
  std::string split;
  int64_t count = 0;
  int64_t failures = 0;
  double chamfer = 0, f1 = 0, iou = 0, view_distance = 0;
  double no_edit_rate = 0;
  int64_t no_edit_excluded = 0;
};

struct MetricReport {
  std::vector<MetricRow> rows;
  std::vector<MetricAggregate> aggregates;
  // config echo
  int points = 0;
  double f1_tau = 0;
  bool icp = false;
  uint64_t seed = 0;
  int sampler_steps = 0;
  double cfg_scale = 0;

  std::string to_json() const;
  static MetricReport from_json(const std::string& text);
  void save(const std::string& json_path, const std::string& csv_path) const;
};

// Aggregates recomputed from rows must equal the stored aggregates exactly.
void verify_report_aggregates(const MetricReport& report);

struct EvalDataset {
  const Dataset* data = nullptr;
  std::string split;
};

// Per-record evaluation against the ground-truth edit (exposed so oracle
// predictions can be scored directly in tests).
MetricRow evaluate_prediction(const VoxelAsset& pred, const StoredRecord& rec, int64_t id,
                              const std::string& split, const BenchConfig& cfg);

// Full protocol: run edit_asset per record, optionally ICP-align, compute all
// metrics, aggregate per category x split. Deterministic given seeds and
// independent of thread count.
MetricReport run_benchmark(const EditModels& models, const std::vector<EvalDataset>& datasets,
                           const BenchConfig& cfg);

// Scaling-curve emission: (train size, report) pairs -> CSV rows.
void write_scaling_csv(const std::vector<std::pair<int64_t, MetricReport>>& points,
                       const std::string& path);

}  // namespace voxsteer
