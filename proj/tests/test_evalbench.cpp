#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "voxsteer/evalbench.hpp"
#include "voxsteer/rng.hpp"

using namespace voxsteer;

namespace {

PointCloud random_cloud(int n, uint64_t seed, double scale = 1.0, double shift = 0.0) {
  Rng rng(seed);
  PointCloud c;
  for (int i = 0; i < n; ++i)
    c.pts.push_back({rng.uniform(-0.5, 0.5) * scale + shift, rng.uniform(-0.5, 0.5) * scale + shift,
                     rng.uniform(-0.5, 0.5) * scale + shift});
  return c;
}

// O(N^2) brute-force oracle, independent of the grid-accelerated path.
double chamfer_oracle(const PointCloud& a, const PointCloud& b) {
  auto directed = [](const PointCloud& from, const PointCloud& to) {
    double sum = 0;
    for (const auto& p : from.pts) {
      double best = 1e300;
      for (const auto& q : to.pts) {
        double dx = p[0] - q[0], dy = p[1] - q[1], dz = p[2] - q[2];
        best = std::min(best, dx * dx + dy * dy + dz * dz);
      }
      sum += std::sqrt(best);
    }
    return sum / double(from.pts.size());
  };
  return 0.5 * (directed(a, b) + directed(b, a));
}

double f1_oracle(const PointCloud& pred, const PointCloud& gt, double tau) {
  auto hits = [&](const PointCloud& from, const PointCloud& to) {
    int n = 0;
    for (const auto& p : from.pts) {
      double best = 1e300;
      for (const auto& q : to.pts) {
        double dx = p[0] - q[0], dy = p[1] - q[1], dz = p[2] - q[2];
        best = std::min(best, dx * dx + dy * dy + dz * dz);
      }
      if (std::sqrt(best) <= tau) ++n;
    }
    return double(n) / double(from.pts.size());
  };
  double p = hits(pred, gt), r = hits(gt, pred);
  return p + r == 0 ? 0.0 : 2 * p * r / (p + r);
}

std::string temp_path(const char* stem) {
  auto dir = std::filesystem::temp_directory_path() / "voxsteer_tests";
  std::filesystem::create_directories(dir);
  return (dir / stem).string();
}

}  // namespace

TEST_CASE("chamfer: identity, two points, brute-force agreement") {
  auto a = random_cloud(50, 1);
  CHECK(chamfer(a, a) == 0.0);

  PointCloud p, q;
  p.pts = {{0, 0, 0}};
  q.pts = {{1, 0, 0}};
  CHECK(chamfer(p, q) == doctest::Approx(1.0).epsilon(1e-12));

  for (uint64_t s = 0; s < 100; ++s) {
    auto x = random_cloud(50, 1000 + s);
    auto y = random_cloud(50, 2000 + s, s % 3 ? 1.0 : 0.3, s % 2 ? 0.2 : 0.0);
    double impl = chamfer(x, y);
    double oracle = chamfer_oracle(x, y);
    CHECK(std::abs(impl - oracle) < 1e-9);
    CHECK(std::abs(chamfer(y, x) - impl) < 1e-12);  // symmetry
  }
}

TEST_CASE("chamfer scales linearly under uniform scaling of both clouds") {
  auto a = random_cloud(40, 7);
  auto b = random_cloud(40, 8);
  double base = chamfer(a, b);
  auto scale_cloud = [](PointCloud c, double s) {
    for (auto& p : c.pts)
      for (auto& v : p) v *= s;
    return c;
  };
  double scaled = chamfer(scale_cloud(a, 2.5), scale_cloud(b, 2.5));
  CHECK(scaled == doctest::Approx(2.5 * base).epsilon(1e-9));
}

TEST_CASE("chamfer rejects empty clouds") {
  PointCloud empty, one;
  one.pts = {{0, 0, 0}};
  CHECK_THROWS_AS(chamfer(empty, one), ContractError);
}

TEST_CASE("f1: identity, separation, constructed half-overlap fixture") {
  auto x = random_cloud(64, 11);
  for (double tau : {0.01, 0.05, 1.0}) CHECK(f1_score(x, x, tau) == 1.0);

  auto near = random_cloud(32, 12, 0.05, 0.0);
  auto far = random_cloud(32, 13, 0.05, 10.0);
  CHECK(f1_score(near, far, 0.05) == 0.0);

  // P = 0.5 (two of four pred points hit), R = 1.0 -> F1 = 2/3
  PointCloud gt, pred;
  gt.pts = {{0, 0, 0}, {1, 0, 0}};
  pred.pts = {{0, 0.01, 0}, {1, -0.02, 0}, {0.5, 0, 0}, {0.5, 0.2, 0}};
  CHECK(f1_score(pred, gt, 0.05) == doctest::Approx(2.0 / 3.0).epsilon(1e-12));

  for (uint64_t s = 0; s < 20; ++s) {
    auto p = random_cloud(40, 300 + s);
    auto q = random_cloud(40, 400 + s, 1.0, 0.02);
    CHECK(f1_score(p, q, 0.05) == doctest::Approx(f1_oracle(p, q, 0.05)).epsilon(1e-12));
  }
}

TEST_CASE("f1 is invariant under a rigid transform of both clouds") {
  auto p = random_cloud(48, 21);
  auto q = random_cloud(48, 22);
  double base = f1_score(p, q, 0.05);
  double c = std::cos(0.7), s = std::sin(0.7);
  auto rotate = [&](PointCloud in) {
    for (auto& pt : in.pts) {
      double x = c * pt[0] - s * pt[1] + 0.3;
      double y = s * pt[0] + c * pt[1] - 0.1;
      pt[0] = x;
      pt[1] = y;
      pt[2] += 0.25;
    }
    return in;
  };
  CHECK(f1_score(rotate(p), rotate(q), 0.05) == doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("view distance: zero on identical assets, analytic on a recolor") {
  auto asset = build_asset(make_scene(31), 16);
  CHECK(view_distance(asset, asset, 32) == 0.0);

  // single voxel recolored: every view shows one (W/G)^2 block of changed color
  VoxelAsset a, b;
  a.g = b.g = 4;
  a.occ.assign(64, 0);
  b.occ.assign(64, 0);
  a.color.assign(192, 0.0f);
  b.color.assign(192, 0.0f);
  int64_t v = (2 * 4 + 1) * 4 + 1;
  a.occ[size_t(v)] = b.occ[size_t(v)] = 1;
  const auto& pal = palette();
  for (int c2 = 0; c2 < 3; ++c2) {
    a.color[size_t(c2 * 64 + v)] = pal[0][size_t(c2)];
    b.color[size_t(c2 * 64 + v)] = pal[2][size_t(c2)];
  }
  int w = 8;
  double delta2 = 0;
  for (int c2 = 0; c2 < 3; ++c2) {
    double d = double(pal[0][size_t(c2)]) - double(pal[2][size_t(c2)]);
    delta2 += d * d;
  }
  int block = w / 4;
  double per_view = double(block * block) * delta2 / double(3 * w * w);
  double got = view_distance(a, b, w);
  CHECK(got == doctest::Approx(per_view).epsilon(1e-6));
  CHECK(got > 0.0);
  CHECK(view_distance(b, a, w) == got);  // symmetry
}

TEST_CASE("icp: identity on equal clouds") {
  auto cloud = random_cloud(60, 41);
  auto result = icp_align(cloud, cloud);
  CHECK(result.residuals.back() < 1e-12);
  CHECK(result.scale == doctest::Approx(1.0).epsilon(1e-9));
  for (int r = 0; r < 3; ++r) {
    CHECK(std::abs(result.translation[size_t(r)]) < 1e-9);
    for (int c = 0; c < 3; ++c)
      CHECK(result.rotation[size_t(r)][size_t(c)] ==
            doctest::Approx(r == c ? 1.0 : 0.0).epsilon(1e-9));
  }
}

TEST_CASE("icp recovers a synthetic similarity transform") {
  auto src = random_cloud(120, 51);
  double ang = 30.0 * M_PI / 180.0;
  double cs = std::cos(ang), sn = std::sin(ang);
  double scale = 1.2;
  PointCloud dst;
  for (const auto& p : src.pts) {
    double x = cs * p[0] - sn * p[1], y = sn * p[0] + cs * p[1];
    dst.pts.push_back({scale * x + 0.1, scale * y, scale * p[2]});
  }
  auto result = icp_align(src, dst);
  CHECK(result.scale == doctest::Approx(1.2).epsilon(1e-3));
  CHECK(result.translation[0] == doctest::Approx(0.1).epsilon(1e-3));
  CHECK(std::abs(result.translation[1]) < 1e-3);
  CHECK(std::abs(result.translation[2]) < 1e-3);
  CHECK(result.rotation[0][0] == doctest::Approx(cs).epsilon(1e-3));
  CHECK(result.rotation[0][1] == doctest::Approx(-sn).epsilon(1e-3));
  CHECK(result.rotation[1][0] == doctest::Approx(sn).epsilon(1e-3));
  CHECK(result.rotation[1][1] == doctest::Approx(cs).epsilon(1e-3));
  CHECK(result.residuals.back() < 1e-9);

  // residuals are monotone non-increasing
  for (size_t i = 1; i < result.residuals.size(); ++i)
    CHECK(result.residuals[i] <= result.residuals[i - 1] + 1e-12);
}

TEST_CASE("icp residuals stay monotone on mismatched clouds") {
  auto src = random_cloud(80, 61);
  auto dst = random_cloud(90, 62, 1.1, 0.15);
  auto result = icp_align(src, dst);
  for (size_t i = 1; i < result.residuals.size(); ++i)
    CHECK(result.residuals[i] <= result.residuals[i - 1] + 1e-12);
}

TEST_CASE("icp rejects degenerate configurations") {
  PointCloud line;
  for (int i = 0; i < 10; ++i) line.pts.push_back({0.1 * i, 0.2 * i, 0.3 * i});
  auto dst = random_cloud(10, 71);
  CHECK_THROWS_AS(icp_align(line, dst), ContractError);
  PointCloud tiny;
  tiny.pts = {{0, 0, 0}, {1, 0, 0}, {0, 1, 0}};
  CHECK_THROWS_AS(icp_align(tiny, dst), ContractError);
}

TEST_CASE("icp alignment repairs a misposed prediction's chamfer") {
  auto gt = random_cloud(100, 81);
  PointCloud misposed;
  double cs = std::cos(0.4), sn = std::sin(0.4);
  for (const auto& p : gt.pts)
    misposed.pts.push_back({1.15 * (cs * p[0] - sn * p[1]) + 0.2, 1.15 * (sn * p[0] + cs * p[1]),
                            1.15 * p[2] - 0.05});
  double before = chamfer(misposed, gt);
  auto aligned = icp_align(misposed, gt).aligned;
  double after = chamfer(aligned, gt);
  CHECK(before > 0.05);
  CHECK(after < 1e-6);

  // a well-posed prediction is left essentially unchanged
  auto well_posed = random_cloud(100, 82);
  double direct = chamfer(well_posed, well_posed);
  auto realigned = icp_align(well_posed, well_posed).aligned;
  CHECK(std::abs(chamfer(realigned, well_posed) - direct) < 1e-9);
}

TEST_CASE("no-edit detector: endpoints and labeled threshold sweep") {
  auto scene = make_scene(91);
  EditInstruction instr;
  instr.category = EditCategory::Texture;
  instr.target_slot = 0;
  instr.new_color = (scene.parts[0].color_id + 2) % kPaletteSize;
  auto source = build_asset(scene, 16);
  auto gt = build_asset(apply_edit(scene, instr), 16);

  auto r1 = no_edit_rate({&source}, {&source}, {&gt}, {instr.category});
  CHECK(r1.rate == 1.0);  // prediction == source counts
  auto r2 = no_edit_rate({&gt}, {&source}, {&gt}, {instr.category});
  CHECK(r2.rate == 0.0);  // prediction == gt does not

  // gt identical to source: excluded with a warning flag
  auto r3 = no_edit_rate({&gt}, {&source}, {&source}, {instr.category});
  CHECK(r3.excluded == 1);
  CHECK(r3.flags[0] == -1);

  // labeled mixture: k no-edit predictions out of 6
  std::vector<const VoxelAsset*> preds, sources, gts;
  std::vector<EditCategory> cats;
  std::vector<VoxelAsset> storage;
  storage.reserve(12);
  int expected_no_edit = 0;
  for (int i = 0; i < 6; ++i) {
    auto s = make_scene(uint64_t(200 + i));
    EditInstruction e;
    e.category = EditCategory::Texture;
    e.target_slot = 0;
    e.new_color = (s.parts[0].color_id + 1) % kPaletteSize;
    storage.push_back(build_asset(s, 16));
    storage.push_back(build_asset(apply_edit(s, e), 16));
  }
  for (int i = 0; i < 6; ++i) {
    const VoxelAsset& src = storage[size_t(2 * i)];
    const VoxelAsset& edited = storage[size_t(2 * i + 1)];
    sources.push_back(&src);
    gts.push_back(&edited);
    if (i % 2 == 0) {
      preds.push_back(&src);  // a "no edit" failure
      ++expected_no_edit;
    } else {
      preds.push_back(&edited);
    }
    cats.push_back(EditCategory::Texture);
  }
  auto mixed = no_edit_rate(preds, sources, gts, cats);
  CHECK(mixed.rate == doctest::Approx(double(expected_no_edit) / 6.0));
}

TEST_CASE("evaluate_prediction: ground truth scores perfectly, source flags no-edit") {
  DataConfig dcfg;
  dcfg.pairs = 6;
  dcfg.grid = 16;
  dcfg.view = 32;
  dcfg.seed = 3;
  dcfg.weights = {0.0, 0.0, 1.0};
  dcfg.scene.min_parts = 2;
  dcfg.scene.max_parts = 3;
  auto path = temp_path("evalbench_ds.s3dp");
  generate_dataset(dcfg, path);
  auto ds = load_dataset(path);

  BenchConfig cfg;
  cfg.points = 400;
  for (size_t i = 0; i < ds.records.size(); ++i) {
    auto row = evaluate_prediction(ds.records[i].edited, ds.records[i], int64_t(i), "train", cfg);
    CHECK(row.chamfer == 0.0);
    CHECK(row.f1 == 1.0);
    CHECK(row.iou == 1.0);
    CHECK(row.view_distance == 0.0);
    CHECK_FALSE(row.no_edit);

    auto src_row =
        evaluate_prediction(ds.records[i].source, ds.records[i], int64_t(i), "train", cfg);
    CHECK(src_row.no_edit);
  }
}

TEST_CASE("run_benchmark: deterministic, thread-invariant, aggregates verified") {
  DataConfig dcfg;
  dcfg.pairs = 8;
  dcfg.grid = 8;
  dcfg.view = 16;
  dcfg.seed = 4;
  dcfg.weights = {1.0, 1.0, 1.0};
  dcfg.scene.min_parts = 2;
  dcfg.scene.max_parts = 3;
  auto path = temp_path("evalbench_bench.s3dp");
  generate_dataset(dcfg, path);
  auto ds = load_dataset(path);

  ModelConfig gcfg;
  gcfg.grid = 8;
  gcfg.patch = 2;
  gcfg.width = 32;
  gcfg.heads = 4;
  gcfg.blocks = 2;
  gcfg.image_size = 16;
  gcfg.image_patch = 4;
  gcfg.stage = Stage::Geometry;
  ModelConfig tcfg = gcfg;
  tcfg.stage = Stage::Texture;

  auto geo = FlowModelF::init_base(gcfg, 5);
  Rng(6).fill_normal(geo.params.get("base.head.w").ptr(),
                     size_t(geo.params.get("base.head.w").size()));
  geo.init_control(7);
  auto tex = FlowModelF::init_base(tcfg, 8);
  Rng(9).fill_normal(tex.params.get("base.head.w").ptr(),
                     size_t(tex.params.get("base.head.w").size()));
  tex.init_control(10);
  geo.params.set_trainable(ParamSet::Base, false);
  geo.params.set_trainable(ParamSet::Control, false);
  tex.params.set_trainable(ParamSet::Base, false);
  tex.params.set_trainable(ParamSet::Control, false);
  EditModels models{&geo, &tex};

  BenchConfig cfg;
  cfg.points = 200;
  cfg.sampler.steps = 4;
  cfg.seed = 99;
  std::vector<EvalDataset> sets{{&ds, "unseen-asset"}};

  auto r1 = run_benchmark(models, sets, cfg);
  verify_report_aggregates(r1);
  auto r2 = run_benchmark(models, sets, cfg);
  CHECK(r1.to_json() == r2.to_json());

  BenchConfig threaded = cfg;
  threaded.threads = 3;
  auto r3 = run_benchmark(models, sets, threaded);
  CHECK(r1.to_json() == r3.to_json());

  // split filter leaves nothing when no dataset matches
  BenchConfig filtered = cfg;
  filtered.split_filter = "seen-unseen-edit";
  auto r4 = run_benchmark(models, sets, filtered);
  CHECK(r4.rows.empty());

  // report round-trip and the "all" aggregate
  auto back = MetricReport::from_json(r1.to_json());
  CHECK(back.to_json() == r1.to_json());
  bool has_all = false;
  for (const auto& a : r1.aggregates)
    if (a.category == "all" && a.split == "all") {
      has_all = true;
      CHECK(a.count == int64_t(r1.rows.size()));
    }
  CHECK(has_all);

  auto json_path = temp_path("report.json");
  auto csv_path = temp_path("report.csv");
  r1.save(json_path, csv_path);
  std::ifstream is(csv_path);
  std::string header;
  std::getline(is, header);
  CHECK(header == "id,category,split,chamfer,f1,iou,view_distance,no_edit,no_edit_excluded,failed");

  // scaling CSV emission
  write_scaling_csv({{500, r1}, {1000, r1}}, temp_path("scaling.csv"));
  std::ifstream sc(temp_path("scaling.csv"));
  std::getline(sc, header);
  CHECK(header == "train_size,chamfer,f1,iou,view_distance,no_edit_rate");
}
