#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "voxsteer/config.hpp"
#include "voxsteer/dataengine.hpp"
#include "voxsteer/evalbench.hpp"
#include "voxsteer/sampler.hpp"
#include "voxsteer/trainer.hpp"

namespace vx = voxsteer;

namespace {

struct CliState {
  std::string config_file;
  std::vector<std::string> sets;
  std::vector<std::pair<std::string, std::string>> overrides;
};

// Registers the shared flags and returns a binder that maps a CLI flag onto a
// registered config key when the user passes it.
void add_common(CLI::App* cmd, CliState& state) {
  cmd->add_option("--config", state.config_file,
                  "config file (flat key=value, # comments); defaults to $VOXSTEER_CONFIG");
  cmd->add_option_function<std::vector<std::string>>(
      "--set",
      [&state](const std::vector<std::string>& kvs) {
        for (const auto& kv : kvs) state.sets.push_back(kv);
      },
      "extra key=value override (repeatable)");
}

void bind_key(CLI::App* cmd, CliState& state, const std::string& flag, const std::string& key,
          const std::string& help) {
  cmd->add_option_function<std::string>(
      flag, [&state, key](const std::string& v) { state.overrides.emplace_back(key, v); }, help);
}

void bind_flag(CLI::App* cmd, CliState& state, const std::string& flag, const std::string& key,
               const std::string& help) {
  cmd->add_flag_callback(
      flag, [&state, key] { state.overrides.emplace_back(key, "1"); }, help);
}

vx::RunConfig resolve(CliState& state) {
  for (const auto& kv : state.sets) state.overrides.push_back(vx::parse_kv(kv));
  return vx::RunConfig::load(state.config_file, state.overrides);
}

vx::ModelConfig model_config(const vx::RunConfig& cfg, vx::Stage stage) {
  vx::ModelConfig m;
  m.grid = int(cfg.get_int("model.grid"));
  m.patch = int(cfg.get_int("model.patch"));
  m.width = int(cfg.get_int("model.width"));
  m.heads = int(cfg.get_int("model.heads"));
  m.blocks = int(cfg.get_int("model.blocks"));
  m.image_size = int(cfg.get_int("model.image_size"));
  m.image_patch = int(cfg.get_int("model.image_patch"));
  m.stage = stage;
  m.validate();
  return m;
}

vx::SamplerConfig sampler_config(const vx::RunConfig& cfg) {
  vx::SamplerConfig s;
  s.steps = int(cfg.get_int("sample.steps"));
  s.cfg_scale = cfg.get_double("sample.cfg_scale");
  s.steer_geometry = cfg.get_bool("sample.steer_geometry");
  s.steer_texture = cfg.get_bool("sample.steer_texture");
  s.steer_all = cfg.get_bool("sample.steer_all");
  s.cfg_geometry = cfg.get_bool("sample.cfg_geometry");
  s.cfg_texture = cfg.get_bool("sample.cfg_texture");
  s.seed = uint64_t(cfg.get_int("seed"));
  return s;
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

int cmd_gen_data(const vx::RunConfig& cfg) {
  vx::DataConfig d;
  d.pairs = int(cfg.get_int("data.pairs"));
  d.q = cfg.get_double("data.q");
  d.tau = cfg.get_double("data.tau");
  d.weights.addition = cfg.get_double("data.w_addition");
  d.weights.removal = cfg.get_double("data.w_removal");
  d.weights.texture = cfg.get_double("data.w_texture");
  d.grid = int(cfg.get_int("data.grid"));
  d.view = int(cfg.get_int("data.view"));
  d.instructions_per_scene = int(cfg.get_int("data.instructions_per_scene"));
  d.split = vx::split_from_name(cfg.get("data.split"));
  d.scene.min_parts = int(cfg.get_int("data.min_parts"));
  d.scene.max_parts = int(cfg.get_int("data.max_parts"));
  d.randomize_condition_view = cfg.get_bool("data.randomize_view");
  d.seed = uint64_t(cfg.get_int("seed"));
  d.threads = int(cfg.get_int("threads"));

  std::string out_dir = cfg.get("out");
  std::filesystem::create_directories(out_dir);
  std::string path = cfg.get("data.path");
  if (path.find('/') == std::string::npos) path = out_dir + "/" + path;

  vx::DatasetManifest man = vx::generate_dataset(d, path);
  std::printf("dataset: %s\n", path.c_str());
  std::printf("attempted %lld, stored %lld\n", (long long)man.attempted, (long long)man.stored);
  std::printf("stage-1 keep rate %.4f, overall keep rate %.4f\n", man.stage1_keep_rate(),
              man.overall_keep_rate());
  std::printf("histogram: addition %lld, removal %lld, texture %lld\n",
              (long long)man.histogram_addition, (long long)man.histogram_removal,
              (long long)man.histogram_texture);
  return vx::kExitOk;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

int cmd_train(const vx::RunConfig& cfg) {
  vx::TrainConfig t;
  t.phase = vx::phase_from_name(cfg.get("train.phase"));
  t.stage = vx::stage_from_name(cfg.get("train.stage"));
  t.lr = cfg.get_double("train.lr");
  t.batch = int(cfg.get_int("train.batch"));
  t.accum = int(cfg.get_int("train.accum"));
  t.clip = cfg.get_double("train.clip");
  t.ts_mean = cfg.get_double("train.ts_mean");
  t.ts_std = cfg.get_double("train.ts_std");
  t.p_uncond = cfg.get_double("train.p_uncond");
  t.beta = cfg.get_double("train.beta");
  t.alpha = cfg.get_double("train.alpha");
  t.steps = int(cfg.get_int("train.steps"));
  t.seed = uint64_t(cfg.get_int("seed"));
  t.val_every = int(cfg.get_int("train.val_every"));
  t.ckpt_every = int(cfg.get_int("train.ckpt_every"));
  t.deterministic = cfg.get_bool("deterministic");
  t.allow_geometry_dpo = cfg.get_bool("train.allow_geometry_dpo");
  t.threads = int(cfg.get_int("threads"));

  vx::ModelConfig m = model_config(cfg, t.stage);
  vx::TrainPaths paths;
  paths.dataset = cfg.get("train.dataset");
  if (paths.dataset.empty()) throw vx::BadArgsError("train: --dataset is required");
  paths.init_checkpoint = cfg.get("train.init_checkpoint");
  paths.out_dir = cfg.get("out");
  paths.run_name = cfg.get("train.run_name");

  vx::TrainResult r = vx::train_loop(t, m, paths);
  std::printf("checkpoint: %s\n", r.checkpoint.c_str());
  std::printf("steps %lld, first loss %.6g, final loss %.6g, val loss %.6g\n",
              (long long)r.steps_done, r.first_loss, r.final_loss, r.final_val_loss);
  return vx::kExitOk;
}

// ---------------------------------------------------------------------------
// edit
// ---------------------------------------------------------------------------

int cmd_edit(const vx::RunConfig& cfg) {
  std::string geo_path = cfg.get("edit.geometry_checkpoint");
  std::string tex_path = cfg.get("edit.texture_checkpoint");
  if (geo_path.empty() || tex_path.empty())
    throw vx::MissingPrerequisiteError("edit: geometry and texture checkpoints are required");
  vx::FlowModelF geo = vx::load_flow_model(geo_path, model_config(cfg, vx::Stage::Geometry));
  vx::FlowModelF tex = vx::load_flow_model(tex_path, model_config(cfg, vx::Stage::Texture));
  vx::EditModels models{&geo, &tex};

  vx::ViewImage cond;
  vx::EditInstruction instr;
  std::string data_path = cfg.get("edit.data");
  if (!data_path.empty()) {
    vx::Dataset ds = vx::load_dataset(data_path);
    int64_t index = cfg.get_int("edit.index");
    if (index < 0 || size_t(index) >= ds.records.size())
      throw vx::BadArgsError("edit: record index out of range");
    cond = ds.records[size_t(index)].cond;
    instr = ds.records[size_t(index)].instr;
  } else if (!cfg.get("edit.scene_seed").empty()) {
    vx::SceneParams sp;
    sp.grid = int(cfg.get_int("data.grid"));
    sp.min_parts = int(cfg.get_int("data.min_parts"));
    sp.max_parts = int(cfg.get_int("data.max_parts"));
    uint64_t scene_seed = uint64_t(std::stoull(cfg.get("edit.scene_seed")));
    vx::SceneGraph scene = vx::make_scene(scene_seed, sp);
    vx::VoxelAsset source = vx::build_asset(scene, sp.grid);
    cond = vx::render_ortho(source, vx::ViewDir::Front, int(cfg.get_int("data.view")));
    std::string category = cfg.get("edit.category");
    if (category == "null") {
      instr = vx::EditInstruction::null_instruction();
    } else if (category == "texture") {
      instr.category = vx::EditCategory::Texture;
      instr.target_slot = int(cfg.get_int("edit.slot"));
      instr.new_color = int(cfg.get_int("edit.color"));
    } else if (category == "removal") {
      instr.category = vx::EditCategory::Removal;
      instr.target_slot = int(cfg.get_int("edit.slot"));
    } else if (category == "addition") {
      instr.category = vx::EditCategory::Addition;
      instr.target_slot = int(scene.parts.size());
      instr.payload = vx::addition_primitive(vx::PrimKind(cfg.get_int("edit.kind")),
                                             int(cfg.get_int("edit.color")),
                                             int(cfg.get_int("edit.template")), instr.target_slot);
    } else {
      throw vx::BadArgsError("edit: unknown category '" + category + "'");
    }
  } else {
    throw vx::BadArgsError("edit: provide --data/--index or --scene-seed");
  }

  vx::SamplerConfig sampler = sampler_config(cfg);
  bool deterministic = cfg.get_bool("deterministic");
  vx::StageTimings timings;
  vx::VoxelAsset asset = vx::edit_asset(cond, instr, models, sampler, &timings);

  std::string out_dir = cfg.get("out");
  std::filesystem::create_directories(out_dir);
  vx::write_asset_debug(asset, out_dir + "/edit_asset.vxdb");
  for (int vi = 0; vi < vx::kViewCount; ++vi) {
    vx::ViewDir view = vx::ViewDir(vi);
    vx::write_ppm(vx::render_ortho(asset, view, cond.w),
                  out_dir + "/edit_" + vx::view_name(view) + ".ppm");
  }
  nlohmann::json meta;
  meta["seed"] = sampler.seed;
  meta["config_hash"] = cfg.hash();
  meta["instruction"] = vx::category_name(instr.category);
  meta["steps"] = sampler.steps;
  meta["cfg_scale"] = sampler.cfg_scale;
  meta["geometry_ms"] = deterministic ? 0.0 : timings.geometry_ms;
  meta["texture_ms"] = deterministic ? 0.0 : timings.texture_ms;
  meta["occupied_voxels"] = asset.occupied_count();
  {
    std::ofstream os(out_dir + "/edit_meta.json", std::ios::trunc);
    os << meta.dump(2) << "\n";
  }
  std::printf("asset: %s (%lld voxels)\n", (out_dir + "/edit_asset.vxdb").c_str(),
              (long long)asset.occupied_count());
  return vx::kExitOk;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

int cmd_eval(const vx::RunConfig& cfg, const std::vector<std::string>& data_paths,
             const std::vector<std::string>& plot_points, bool plot_data) {
  std::string out_dir = cfg.get("out");
  std::filesystem::create_directories(out_dir);

  if (plot_data) {
    std::vector<std::pair<int64_t, vx::MetricReport>> points;
    for (const auto& spec : plot_points) {
      auto [size_text, path] = vx::parse_kv(spec);
      std::ifstream is(path);
      if (!is) throw vx::IoError("plot-data: cannot open report '" + path + "'");
      std::string text((std::istreambuf_iterator<char>(is)), {});
      points.emplace_back(std::stoll(size_text), vx::MetricReport::from_json(text));
    }
    if (points.empty()) throw vx::BadArgsError("plot-data: no --point entries given");
    std::string path = out_dir + "/scaling.csv";
    vx::write_scaling_csv(points, path);
    std::printf("scaling curve: %s\n", path.c_str());
    return vx::kExitOk;
  }

  if (data_paths.empty()) throw vx::BadArgsError("eval: at least one --data is required");
  std::string geo_path = cfg.get("eval.geometry_checkpoint");
  std::string tex_path = cfg.get("eval.texture_checkpoint");
  if (geo_path.empty() || tex_path.empty())
    throw vx::MissingPrerequisiteError("eval: geometry and texture checkpoints are required");
  vx::FlowModelF geo = vx::load_flow_model(geo_path, model_config(cfg, vx::Stage::Geometry));
  vx::FlowModelF tex = vx::load_flow_model(tex_path, model_config(cfg, vx::Stage::Texture));
  vx::EditModels models{&geo, &tex};

  std::vector<vx::Dataset> storage;
  storage.reserve(data_paths.size());
  std::vector<vx::EvalDataset> sets;
  for (const auto& path : data_paths) {
    storage.push_back(vx::load_dataset(path));
    vx::DatasetManifest man = vx::DatasetManifest::load(path + ".manifest.json");
    sets.push_back({&storage.back(), man.split});
  }

  vx::BenchConfig bench;
  bench.sampler = sampler_config(cfg);
  bench.points = int(cfg.get_int("eval.points"));
  bench.f1_tau = cfg.get_double("eval.f1_tau");
  bench.icp = cfg.get_bool("eval.icp");
  bench.icp_with_scale = cfg.get_bool("eval.icp_scale");
  bench.no_edit_threshold = cfg.get_double("eval.no_edit_threshold");
  bench.threads = int(cfg.get_int("threads"));
  bench.seed = uint64_t(cfg.get_int("seed"));
  bench.split_filter = cfg.get("eval.splits");

  vx::MetricReport report = vx::run_benchmark(models, sets, bench);
  report.save(out_dir + "/report.json", out_dir + "/report.csv");
  std::printf("report: %s\n", (out_dir + "/report.json").c_str());
  for (const auto& a : report.aggregates)
    std::printf("%-10s %-18s n=%lld chamfer %.5f f1 %.4f iou %.4f viewdist %.6f no-edit %.3f\n",
                a.category.c_str(), a.split.c_str(), (long long)a.count, a.chamfer, a.f1, a.iou,
                a.view_distance, a.no_edit_rate);
  return vx::kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"voxsteer: text-steered feedforward editing of voxel assets"};
  app.require_subcommand(1);
  app.footer(vx::RunConfig::help_text() +
             "\nExit codes: 0 ok, 2 bad arguments, 3 missing prerequisite, 4 numeric fault, "
             "5 degenerate output, 6 io error\n");

  CliState gen_state, train_state, edit_state, eval_state;

  CLI::App* gen = app.add_subcommand("gen-data", "synthesize an edit-pair dataset");
  add_common(gen, gen_state);
  bind_key(gen, gen_state, "--pairs", "data.pairs", "edit pairs to attempt");
  bind_key(gen, gen_state, "--q", "data.q", "corruption probability");
  bind_key(gen, gen_state, "--tau", "data.tau", "consistency threshold");
  bind_key(gen, gen_state, "--split", "data.split", "train | seen-unseen-edit | unseen-asset");
  bind_key(gen, gen_state, "--grid", "data.grid", "voxel grid size");
  bind_key(gen, gen_state, "--view", "data.view", "view image size");
  bind_key(gen, gen_state, "--ips", "data.instructions_per_scene", "proposals per scene");
  bind_key(gen, gen_state, "--w-addition", "data.w_addition", "addition weight");
  bind_key(gen, gen_state, "--w-removal", "data.w_removal", "removal weight");
  bind_key(gen, gen_state, "--w-texture", "data.w_texture", "texture weight");
  bind_key(gen, gen_state, "--min-parts", "data.min_parts", "min scene parts");
  bind_key(gen, gen_state, "--max-parts", "data.max_parts", "max scene parts");
  bind_key(gen, gen_state, "--data", "data.path", "output dataset path");
  bind_key(gen, gen_state, "--seed", "seed", "global seed");
  bind_key(gen, gen_state, "--threads", "threads", "worker threads");
  bind_key(gen, gen_state, "--out", "out", "output directory");

  CLI::App* train = app.add_subcommand("train", "run a training phase");
  add_common(train, train_state);
  bind_key(train, train_state, "--phase", "train.phase", "base-pretrain | sft | dpo");
  bind_key(train, train_state, "--stage", "train.stage", "geometry | texture");
  bind_key(train, train_state, "--steps", "train.steps", "optimizer steps");
  bind_key(train, train_state, "--batch", "train.batch", "micro-batch size");
  bind_key(train, train_state, "--accum", "train.accum", "gradient accumulation");
  bind_key(train, train_state, "--lr", "train.lr", "learning rate");
  bind_key(train, train_state, "--clip", "train.clip", "gradient clip norm");
  bind_key(train, train_state, "--p-uncond", "train.p_uncond", "CFG dropout probability");
  bind_key(train, train_state, "--beta", "train.beta", "DPO beta");
  bind_key(train, train_state, "--alpha", "train.alpha", "DPO supervised weight");
  bind_key(train, train_state, "--dataset", "train.dataset", "training dataset");
  bind_key(train, train_state, "--init", "train.init_checkpoint", "prerequisite checkpoint");
  bind_key(train, train_state, "--run-name", "train.run_name", "run name prefix");
  bind_key(train, train_state, "--val-every", "train.val_every", "validation cadence");
  bind_key(train, train_state, "--ckpt-every", "train.ckpt_every", "checkpoint cadence");
  bind_flag(train, train_state, "--allow-geometry-dpo", "train.allow_geometry_dpo",
            "override the geometry-DPO refusal");
  bind_flag(train, train_state, "--deterministic", "deterministic", "byte-reproducible mode");
  bind_key(train, train_state, "--seed", "seed", "global seed");
  bind_key(train, train_state, "--threads", "threads", "worker threads");
  bind_key(train, train_state, "--out", "out", "output directory");
  for (const char* flag : {"--grid", "--patch", "--width", "--heads", "--blocks", "--image-size",
                           "--image-patch"}) {
    std::string key = std::string("model.") + (flag + 2);
    for (auto& c : key) c = c == '-' ? '_' : c;
    bind_key(train, train_state, flag, key, "model config");
  }

  CLI::App* edit = app.add_subcommand("edit", "apply one edit end to end");
  add_common(edit, edit_state);
  bind_key(edit, edit_state, "--geometry", "edit.geometry_checkpoint", "geometry checkpoint");
  bind_key(edit, edit_state, "--texture", "edit.texture_checkpoint", "texture checkpoint");
  bind_key(edit, edit_state, "--data", "edit.data", "dataset with the source record");
  bind_key(edit, edit_state, "--index", "edit.index", "record index");
  bind_key(edit, edit_state, "--scene-seed", "edit.scene_seed", "dataset-free scene seed");
  bind_key(edit, edit_state, "--category", "edit.category", "edit category");
  bind_key(edit, edit_state, "--slot", "edit.slot", "target slot");
  bind_key(edit, edit_state, "--color", "edit.color", "new color id");
  bind_key(edit, edit_state, "--kind", "edit.kind", "addition primitive kind");
  bind_key(edit, edit_state, "--template", "edit.template", "addition template id");
  bind_key(edit, edit_state, "--steps", "sample.steps", "Euler steps");
  bind_key(edit, edit_state, "--cfg-scale", "sample.cfg_scale", "CFG scale");
  bind_flag(edit, edit_state, "--deterministic", "deterministic", "byte-reproducible mode");
  bind_key(edit, edit_state, "--seed", "seed", "global seed");
  bind_key(edit, edit_state, "--out", "out", "output directory");
  for (const char* flag : {"--grid", "--patch", "--width", "--heads", "--blocks", "--image-size",
                           "--image-patch"}) {
    std::string key = std::string("model.") + (flag + 2);
    for (auto& c : key) c = c == '-' ? '_' : c;
    bind_key(edit, edit_state, flag, key, "model config");
  }
  bind_key(edit, edit_state, "--data-grid", "data.grid", "scene grid for dataset-free mode");
  bind_key(edit, edit_state, "--data-view", "data.view", "view size for dataset-free mode");

  CLI::App* eval = app.add_subcommand("eval", "run the benchmark protocol");
  add_common(eval, eval_state);
  std::vector<std::string> eval_data, plot_points;
  bool plot_data = false;
  eval->add_option("--data", eval_data, "evaluation dataset (repeatable)");
  eval->add_flag("--plot-data", plot_data, "emit scaling-curve CSV from saved reports");
  eval->add_option("--point", plot_points, "SIZE=report.json entries for --plot-data");
  bind_key(eval, eval_state, "--geometry", "eval.geometry_checkpoint", "geometry checkpoint");
  bind_key(eval, eval_state, "--texture", "eval.texture_checkpoint", "texture checkpoint");
  bind_key(eval, eval_state, "--points", "eval.points", "surface points per cloud");
  bind_key(eval, eval_state, "--f1-tau", "eval.f1_tau", "F1 threshold");
  bind_key(eval, eval_state, "--icp", "eval.icp", "on/off: ICP-align predictions");
  bind_key(eval, eval_state, "--splits", "eval.splits", "restrict to one split");
  bind_key(eval, eval_state, "--steps", "sample.steps", "Euler steps");
  bind_key(eval, eval_state, "--cfg-scale", "sample.cfg_scale", "CFG scale");
  bind_flag(eval, eval_state, "--deterministic", "deterministic", "byte-reproducible mode");
  bind_key(eval, eval_state, "--seed", "seed", "global seed");
  bind_key(eval, eval_state, "--threads", "threads", "worker threads");
  bind_key(eval, eval_state, "--out", "out", "output directory");
  for (const char* flag : {"--grid", "--patch", "--width", "--heads", "--blocks", "--image-size",
                           "--image-patch"}) {
    std::string key = std::string("model.") + (flag + 2);
    for (auto& c : key) c = c == '-' ? '_' : c;
    bind_key(eval, eval_state, flag, key, "model config");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return vx::kExitBadArgs;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(resolve(gen_state));
    if (train->parsed()) return cmd_train(resolve(train_state));
    if (edit->parsed()) return cmd_edit(resolve(edit_state));
    if (eval->parsed()) return cmd_eval(resolve(eval_state), eval_data, plot_points, plot_data);
  } catch (const vx::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return e.exit_code();
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return vx::kExitFailure;
  }
  return vx::kExitFailure;
}
