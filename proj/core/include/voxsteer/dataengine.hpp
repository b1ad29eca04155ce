#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "voxsteer/voxelworld.hpp"

namespace voxsteer {

enum class Split : uint8_t { Train = 0, SeenUnseenEdit = 1, UnseenAsset = 2 };
const char* split_name(Split s);
Split split_from_name(const std::string& name);

struct CategoryWeights {
  double addition = 1.0;
  double removal = 1.0;
  double texture = 1.0;
};

struct FilterVerdicts {
  bool correctness = false;
  bool consistency = false;
  float consistency_score = 0.0f;
};

// One training example. The scene graph is reconstructible from the seed and
// is kept in memory for filtering; the serialized form stores assets only.
struct EditPairRecord {
  uint64_t scene_seed = 0;
  SceneGraph scene;
  EditInstruction instr;
  InstrTokens tokens{};
  VoxelAsset source;
  VoxelAsset edited;
  ViewImage cond;
  bool corrupted = false;  // hidden oracle label
  FilterVerdicts verdicts;
};

struct ProposeResult {
  std::vector<EditInstruction> instructions;
  bool exhausted = false;  // fewer than requested were available
};

// Up to k distinct, effect-bearing instructions for the scene, drawn across
// categories by weight. Deterministic in seed.
ProposeResult propose_instructions(const SceneGraph& scene, int k, uint64_t seed,
                                   const CategoryWeights& weights = {}, int grid = 16);

// With probability q replaces the edited asset with a corrupted variant
// (wrong-target edit, overshoot recolor, or occupancy jitter) and sets the
// hidden flag. Never touches the instruction or its tokens.
EditPairRecord corrupt(EditPairRecord record, double q, uint64_t seed);

// Exactly ceil(0.02 * G^3); exposed for tests.
int64_t jitter_flip_count(int grid);

struct SlotDiff {
  int slot = -1;  // -1 collects changes not inside any source/edited part
  int64_t occ_delta = 0;
  int64_t color_delta = 0;
};

struct DiffReport {
  std::vector<SlotDiff> slots;        // observed differences source -> edited
  std::vector<SlotDiff> unexpected;   // observed minus expected effect
  bool matches_expected = false;
  std::string text() const;
};

// Stage 1: exact programmatic differ. Passes iff the source->edited difference
// is precisely the instruction's expected effect.
std::pair<bool, DiffReport> filter_correctness(const EditPairRecord& record);

// Stage 2: multi-view consistency proxy. Mean over the six views of per-pixel
// RGB MSE between the edited asset and the oracle edit, restricted to pixels
// outside the target part's footprint; passes iff score <= tau.
std::pair<bool, float> filter_consistency(const EditPairRecord& record, double tau);

struct DataConfig {
  int pairs = 1000;  // attempted records
  double q = 0.0;
  double tau = 0.01;
  CategoryWeights weights;
  int grid = 16;
  int view = 32;
  int instructions_per_scene = 4;
  Split split = Split::Train;
  SceneParams scene;
  uint64_t seed = 1;
  int threads = 1;
  bool randomize_condition_view = false;  // default: front view conditions
};

struct DatasetManifest {
  uint32_t format_version = 1;
  std::string split = "train";
  int grid = 16;
  int view = 32;
  uint64_t seed = 0;
  double q = 0.0;
  double tau = 0.0;
  int instructions_per_scene = 0;
  int scene_min_parts = 0, scene_max_parts = 0;
  int64_t attempted = 0;
  int64_t stage1_passed = 0;  // correctness
  int64_t stage2_passed = 0;  // correctness + consistency (stored)
  int64_t stored = 0;
  int64_t corrupted_attempted = 0;
  int64_t corrupted_stored = 0;  // filter false accepts
  int64_t clean_attempted = 0;
  int64_t clean_rejected = 0;  // filter false rejects
  int64_t histogram_addition = 0, histogram_removal = 0, histogram_texture = 0;

  double stage1_keep_rate() const { return attempted ? double(stage1_passed) / double(attempted) : 0; }
  double overall_keep_rate() const { return attempted ? double(stored) / double(attempted) : 0; }

  std::string to_json() const;
  static DatasetManifest from_json(const std::string& text);
  void save(const std::string& path) const;
  static DatasetManifest load(const std::string& path);
  void validate() const;
};

// Serialized record as read back from an "S3DP" file.
struct StoredRecord {
  uint64_t scene_seed = 0;
  InstrTokens tokens{};
  EditInstruction instr;
  VoxelAsset source;
  VoxelAsset edited;
  ViewImage cond;
  uint8_t flags = 0;

  bool corrupted() const { return flags & 1; }
};

struct Dataset {
  int grid = 16;
  int view = 32;
  std::vector<StoredRecord> records;
};

inline const char* manifest_path_for(std::string& buf, const std::string& dataset_path) {
  buf = dataset_path + ".manifest.json";
  return buf.c_str();
}

// Streams scenes -> proposals -> oracle edits -> corruption -> filters and
// writes passing records plus the manifest sidecar. Deterministic in
// (config, seed) regardless of thread count.
DatasetManifest generate_dataset(const DataConfig& config, const std::string& path);

Dataset load_dataset(const std::string& path);

// Scene-universe addressing: seen and unseen scene pools are disjoint id
// ranges, and the per-scene edit stream is fixed, so "seen assets, unseen
// edits" is reproducible by construction.
uint64_t scene_seed_for(Split split, int64_t scene_index);
inline constexpr int kEvalEditOffset = 16;  // eval-seen edits start here

}  // namespace voxsteer
