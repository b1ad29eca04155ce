#include "voxsteer/config.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "voxsteer/rng.hpp"

namespace voxsteer {

const std::vector<KeySpec>& config_registry() {
  static const std::vector<KeySpec> kKeys = {
      // global
      {"seed", "1", "global seed; all randomness forks from it by named sub-stream"},
      {"threads", "0", "worker threads (0 = hardware concurrency)"},
      {"deterministic", "0", "zero wall-clock fields so artifacts are byte-reproducible"},
      {"out", ".", "output directory"},
      // data engine
      {"data.pairs", "1000", "edit pairs to attempt"},
      {"data.q", "0", "corruption probability in [0,1]"},
      {"data.tau", "0.01", "consistency filter threshold in (0,1]"},
      {"data.w_addition", "1", "addition proposal weight"},
      {"data.w_removal", "1", "removal proposal weight"},
      {"data.w_texture", "1", "texture proposal weight"},
      {"data.grid", "16", "voxel grid size G"},
      {"data.view", "32", "view image size W (multiple of G)"},
      {"data.instructions_per_scene", "4", "edit proposals consumed per scene"},
      {"data.split", "train", "train | seen-unseen-edit | unseen-asset"},
      {"data.min_parts", "1", "minimum scene parts"},
      {"data.max_parts", "4", "maximum scene parts"},
      {"data.randomize_view", "0", "condition on a random view instead of the front view"},
      {"data.path", "dataset.s3dp", "dataset file to write"},
      // model
      {"model.grid", "16", "model voxel grid (must match the dataset)"},
      {"model.patch", "2", "voxel patch size p"},
      {"model.width", "64", "transformer width d"},
      {"model.heads", "4", "attention heads"},
      {"model.blocks", "4", "transformer blocks L"},
      {"model.image_size", "32", "condition image size (must match the dataset)"},
      {"model.image_patch", "4", "condition image patch size"},
      // trainer
      {"train.phase", "base-pretrain", "base-pretrain | sft | dpo"},
      {"train.stage", "geometry", "geometry | texture"},
      {"train.lr", "0", "learning rate (0 = per-phase default)"},
      {"train.batch", "8", "micro-batch size"},
      {"train.accum", "1", "gradient accumulation steps"},
      {"train.clip", "1", "global gradient-norm clip"},
      {"train.ts_mean", "1", "LogitNormal timestep mean"},
      {"train.ts_std", "0", "LogitNormal timestep std (0 = per-stage default)"},
      {"train.p_uncond", "-1", "CFG instruction dropout (-1 = per-phase default)"},
      {"train.beta", "0.2", "DPO beta"},
      {"train.alpha", "1", "DPO supervised-loss weight"},
      {"train.steps", "500", "optimizer steps"},
      {"train.val_every", "200", "validation cadence in steps (0 = off)"},
      {"train.ckpt_every", "0", "periodic checkpoint cadence (0 = final only)"},
      {"train.allow_geometry_dpo", "0", "override the geometry-DPO refusal"},
      {"train.dataset", "", "training dataset path"},
      {"train.init_checkpoint", "", "prerequisite checkpoint (sft: base, dpo: sft)"},
      {"train.run_name", "run", "prefix for checkpoints and metrics"},
      // sampler
      {"sample.steps", "25", "Euler steps per flow stage"},
      {"sample.cfg_scale", "3", "classifier-free guidance scale s"},
      {"sample.steer_geometry", "1", "steer stage 1 for addition/removal edits"},
      {"sample.steer_texture", "1", "steer stage 2 for texture edits"},
      {"sample.steer_all", "0", "steer both stages for any edit (experimentation)"},
      {"sample.cfg_geometry", "0", "apply CFG on the geometry stage"},
      {"sample.cfg_texture", "1", "apply CFG on the texture stage"},
      // edit command
      {"edit.geometry_checkpoint", "", "geometry-stage checkpoint"},
      {"edit.texture_checkpoint", "", "texture-stage checkpoint"},
      {"edit.data", "", "dataset supplying the condition image and instruction"},
      {"edit.index", "0", "record index into edit.data"},
      {"edit.scene_seed", "", "dataset-free mode: synthesize this scene instead"},
      {"edit.category", "texture", "dataset-free mode: addition | removal | texture"},
      {"edit.slot", "0", "dataset-free mode: target part slot"},
      {"edit.color", "0", "dataset-free mode: new color id"},
      {"edit.kind", "0", "dataset-free mode: addition primitive kind (0 box, 1 sphere, 2 cylinder)"},
      {"edit.template", "0", "dataset-free mode: addition catalog template id"},
      // eval command
      {"eval.points", "2000", "surface points per cloud"},
      {"eval.f1_tau", "0.05", "F1 hit threshold"},
      {"eval.icp", "0", "ICP-align predictions before geometry metrics"},
      {"eval.icp_scale", "1", "ICP similarity includes uniform scale"},
      {"eval.no_edit_threshold", "0.1", "relative voxel-difference threshold for no-edit"},
      {"eval.geometry_checkpoint", "", "geometry-stage checkpoint"},
      {"eval.texture_checkpoint", "", "texture-stage checkpoint"},
      {"eval.splits", "", "restrict rows to one split (empty = all)"},
  };
  return kKeys;
}

namespace {

const KeySpec* find_key(const std::string& name) {
  for (const auto& k : config_registry())
    if (name == k.name) return &k;
  return nullptr;
}

}  // namespace

std::pair<std::string, std::string> parse_kv(const std::string& line) {
  auto eq = line.find('=');
  if (eq == std::string::npos || eq == 0)
    throw BadArgsError("expected key=value, got '" + line + "'");
  std::string key = line.substr(0, eq);
  std::string value = line.substr(eq + 1);
  auto trim = [](std::string& s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.erase(s.begin());
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.pop_back();
  };
  trim(key);
  trim(value);
  return {key, value};
}

RunConfig RunConfig::load(const std::string& file,
                          const std::vector<std::pair<std::string, std::string>>& overrides) {
  RunConfig cfg;
  std::string path = file;
  if (path.empty()) {
    if (const char* env = std::getenv("VOXSTEER_CONFIG")) path = env;
  }
  if (!path.empty()) {
    std::ifstream is(path);
    if (!is) throw IoError("config file '" + path + "' cannot be opened");
    std::string line;
    while (std::getline(is, line)) {
      auto hash = line.find('#');
      if (hash != std::string::npos) line = line.substr(0, hash);
      bool blank = true;
      for (char c : line)
        if (c != ' ' && c != '\t' && c != '\r') blank = false;
      if (blank) continue;
      auto [key, value] = parse_kv(line);
      if (!find_key(key)) throw BadArgsError("config file: unknown key '" + key + "'");
      cfg.values_[key] = value;
    }
  }
  for (const auto& [key, value] : overrides) {
    if (!find_key(key)) throw BadArgsError("unknown config key '" + key + "'");
    cfg.values_[key] = value;
  }
  return cfg;
}

std::string RunConfig::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it != values_.end()) return it->second;
  const KeySpec* spec = find_key(key);
  if (!spec) throw ContractError("read of unregistered config key '" + key + "'");
  return spec->def;
}

int64_t RunConfig::get_int(const std::string& key) const {
  std::string v = get(key);
  try {
    size_t pos = 0;
    int64_t out = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw BadArgsError("config key '" + key + "' expects an integer, got '" + v + "'");
  }
}

double RunConfig::get_double(const std::string& key) const {
  std::string v = get(key);
  try {
    size_t pos = 0;
    double out = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw BadArgsError("config key '" + key + "' expects a number, got '" + v + "'");
  }
}

bool RunConfig::get_bool(const std::string& key) const {
  std::string v = get(key);
  if (v == "1" || v == "true" || v == "on" || v == "yes") return true;
  if (v == "0" || v == "false" || v == "off" || v == "no") return false;
  throw BadArgsError("config key '" + key + "' expects a boolean, got '" + v + "'");
}

void RunConfig::set(const std::string& key, const std::string& value) {
  if (!find_key(key)) throw ContractError("set of unregistered config key '" + key + "'");
  values_[key] = value;
}

std::string RunConfig::dump() const {
  std::ostringstream os;
  for (const auto& k : config_registry()) os << k.name << "=" << get(k.name) << "\n";
  return os.str();
}

uint64_t RunConfig::hash() const {
  // identifies the producing configuration; output location is not part of it
  std::ostringstream os;
  for (const auto& k : config_registry())
    if (std::string(k.name) != "out") os << k.name << "=" << get(k.name) << "\n";
  return detail::fnv1a64(os.str());
}

std::string RunConfig::help_text() {
  std::ostringstream os;
  os << "Configuration keys (key=value in a config file, VOXSTEER_CONFIG env var, or --set):\n";
  for (const auto& k : config_registry()) {
    os << "  " << k.name;
    for (size_t i = std::string(k.name).size(); i < 28; ++i) os << ' ';
    os << k.help << " [default: " << (k.def[0] ? k.def : "<empty>") << "]\n";
  }
  return os.str();
}

}  // namespace voxsteer
