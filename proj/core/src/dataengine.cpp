#include "voxsteer/dataengine.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "voxsteer/threading.hpp"

namespace voxsteer {

const char* split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::SeenUnseenEdit: return "seen-unseen-edit";
    case Split::UnseenAsset: return "unseen-asset";
  }
  return "?";
}

Split split_from_name(const std::string& name) {
  if (name == "train") return Split::Train;
  if (name == "seen-unseen-edit") return Split::SeenUnseenEdit;
  if (name == "unseen-asset") return Split::UnseenAsset;
  throw BadArgsError("unknown split '" + name + "'");
}

uint64_t scene_seed_for(Split split, int64_t scene_index) {
  // Seen pool is shared between train and seen-unseen-edit; the unseen pool
  // lives in a disjoint id range. Seeds do not depend on the dataset seed.
  uint64_t base = split == Split::UnseenAsset ? (1ull << 20) : 0;
  return Rng(0xA55E7u).fork("scene-universe").fork(base + uint64_t(scene_index)).next_u64();
}

// ---------------------------------------------------------------------------
// Proposals
// ---------------------------------------------------------------------------

namespace {

bool assets_equal(const VoxelAsset& a, const VoxelAsset& b) {
  return a.occ == b.occ && a.color == b.color;
}

// A proposal is usable only if its oracle edit changes the asset and leaves a
// non-empty scene.
bool effect_nonempty(const SceneGraph& scene, const EditInstruction& instr, int grid,
                     const VoxelAsset& source) {
  SceneGraph edited = apply_edit(scene, instr);
  if (edited.parts.empty()) return false;
  try {
    VoxelAsset out = build_asset(edited, grid);
    return !assets_equal(out, source);
  } catch (const DegenerateOutputError&) {
    return false;
  }
}

}  // namespace

ProposeResult propose_instructions(const SceneGraph& scene, int k, uint64_t seed,
                                   const CategoryWeights& weights, int grid) {
  if (k < 1) throw ContractError("propose_instructions: k must be >= 1");
  VoxelAsset source = build_asset(scene, grid);
  Rng rng = Rng(seed).fork("propose");
  ProposeResult out;
  std::set<InstrTokens> seen;

  int parts = int(scene.parts.size());
  bool can_add = parts < 6;
  bool can_remove = parts > 1;
  double wa = can_add ? std::max(0.0, weights.addition) : 0.0;
  double wr = can_remove ? std::max(0.0, weights.removal) : 0.0;
  double wt = std::max(0.0, weights.texture);
  double total = wa + wr + wt;

  int attempts = 0, max_attempts = 60 * k + 200;
  while (int(out.instructions.size()) < k && attempts++ < max_attempts && total > 0) {
    double u = rng.uniform() * total;
    EditInstruction instr;
    if (u < wa) {
      instr.category = EditCategory::Addition;
      instr.target_slot = parts;  // next free slot under the generator convention
      instr.payload = addition_primitive(PrimKind(rng.uniform_int(0, 2)),
                                         int(rng.uniform_int(0, kPaletteSize - 1)),
                                         int(rng.uniform_int(0, addition_template_count() - 1)),
                                         instr.target_slot);
    } else if (u < wa + wr) {
      instr.category = EditCategory::Removal;
      instr.target_slot = int(rng.uniform_int(0, parts - 1));
    } else {
      instr.category = EditCategory::Texture;
      instr.target_slot = int(rng.uniform_int(0, parts - 1));
      int old_color = scene.find_slot(instr.target_slot)->color_id;
      int delta = int(rng.uniform_int(1, kPaletteSize - 1));
      instr.new_color = (old_color + delta) % kPaletteSize;
    }
    InstrTokens tokens = encode_instruction(instr);
    if (seen.count(tokens)) continue;
    if (!effect_nonempty(scene, instr, grid, source)) continue;
    seen.insert(tokens);
    out.instructions.push_back(instr);
  }
  out.exhausted = int(out.instructions.size()) < k;
  return out;
}

// ---------------------------------------------------------------------------
// Corruption
// ---------------------------------------------------------------------------

int64_t jitter_flip_count(int grid) {
  int64_t n = int64_t(grid) * grid * grid;
  return (n * 2 + 99) / 100;  // ceil(0.02 * G^3)
}

namespace {

void apply_jitter(VoxelAsset& asset, Rng& rng) {
  int64_t n = asset.voxels();
  int64_t flips = jitter_flip_count(asset.g);
  // partial Fisher-Yates for distinct voxel indices
  std::vector<int64_t> idx(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) idx[size_t(i)] = i;
  const auto& pal = palette();
  for (int64_t i = 0; i < flips; ++i) {
    int64_t j = i + int64_t(rng.next_u64() % uint64_t(n - i));
    std::swap(idx[size_t(i)], idx[size_t(j)]);
    int64_t v = idx[size_t(i)];
    if (asset.occ[size_t(v)]) {
      asset.occ[size_t(v)] = 0;
      for (int c = 0; c < 3; ++c) asset.color[size_t(c * n + v)] = 0.0f;
    } else {
      asset.occ[size_t(v)] = 1;
      int color = int(rng.uniform_int(0, kPaletteSize - 1));
      for (int c = 0; c < 3; ++c) asset.color[size_t(c * n + v)] = pal[color][size_t(c)];
    }
  }
}

// Same-category edit aimed at the wrong target. Returns false when the scene
// offers no alternative target.
bool wrong_target_edit(const EditPairRecord& rec, Rng& rng, VoxelAsset& out) {
  const SceneGraph& scene = rec.scene;
  EditInstruction alt = rec.instr;
  switch (rec.instr.category) {
    case EditCategory::Removal:
    case EditCategory::Texture: {
      int parts = int(scene.parts.size());
      if (parts < 2) return false;
      int other = int(rng.uniform_int(0, parts - 2));
      if (other >= rec.instr.target_slot) ++other;
      alt.target_slot = other;
      break;
    }
    case EditCategory::Addition: {
      int t = int(rng.uniform_int(0, addition_template_count() - 2));
      auto code = addition_code(rec.instr.payload);
      int orig = code ? code->second - 1 : 0;
      if (t >= orig) ++t;
      alt.payload = addition_primitive(rec.instr.payload.kind, rec.instr.payload.color_id, t,
                                       rec.instr.target_slot);
      break;
    }
    default:
      return false;
  }
  try {
    SceneGraph edited = apply_edit(scene, alt);
    if (edited.parts.empty()) return false;
    out = build_asset(edited, rec.source.g);
    return true;
  } catch (const Error&) {
    return false;
  }
}

// Correct edit plus a recolor of a non-target part.
bool overshoot_edit(const EditPairRecord& rec, Rng& rng, VoxelAsset& out) {
  SceneGraph edited = apply_edit(rec.scene, rec.instr);
  std::vector<int> others;
  for (const auto& p : edited.parts)
    if (int(p.slot) != rec.instr.target_slot) others.push_back(int(p.slot));
  if (others.empty()) return false;
  int victim = others[size_t(rng.next_u64() % others.size())];
  for (auto& p : edited.parts)
    if (int(p.slot) == victim) {
      int delta = int(rng.uniform_int(1, kPaletteSize - 1));
      p.color_id = uint8_t((p.color_id + delta) % kPaletteSize);
    }
  try {
    out = build_asset(edited, rec.source.g);
    return true;
  } catch (const Error&) {
    return false;
  }
}

}  // namespace

EditPairRecord corrupt(EditPairRecord record, double q, uint64_t seed) {
  if (q < 0.0 || q > 1.0) throw ContractError("corrupt: q must be in [0,1]");
  Rng rng = Rng(seed).fork("corrupt");
  if (rng.uniform() >= q) return record;
  int kind = int(rng.uniform_int(0, 2));  // 0 wrong-target, 1 overshoot, 2 jitter
  VoxelAsset bad;
  bool applied = false;
  if (kind == 0) applied = wrong_target_edit(record, rng, bad);
  if (kind == 1 && !applied) applied = overshoot_edit(record, rng, bad);
  if (applied) {
    record.edited = std::move(bad);
  } else {
    apply_jitter(record.edited, rng);  // always possible
  }
  record.corrupted = true;
  return record;
}

// ---------------------------------------------------------------------------
// Filters
// ---------------------------------------------------------------------------

namespace {

VoxelAsset oracle_edited(const EditPairRecord& rec) {
  return build_asset(apply_edit(rec.scene, rec.instr), rec.source.g);
}

// Voxels of the instruction's target region in the relevant scene.
std::vector<uint8_t> target_region(const EditPairRecord& rec) {
  if (rec.instr.category == EditCategory::Addition) {
    SceneGraph edited = apply_edit(rec.scene, rec.instr);
    return part_voxels(edited, rec.instr.target_slot, rec.source.g);
  }
  return part_voxels(rec.scene, rec.instr.target_slot, rec.source.g);
}

}  // namespace

std::string DiffReport::text() const {
  std::ostringstream os;
  os << (matches_expected ? "match" : "mismatch");
  for (const auto& s : slots) {
    os << "; slot " << s.slot << ": occ " << s.occ_delta << ", color " << s.color_delta;
  }
  if (!unexpected.empty()) {
    os << " | unexpected:";
    for (const auto& s : unexpected)
      os << " slot " << s.slot << " (occ " << s.occ_delta << ", color " << s.color_delta << ")";
  }
  return os.str();
}

std::pair<bool, DiffReport> filter_correctness(const EditPairRecord& record) {
  const VoxelAsset& src = record.source;
  const VoxelAsset& got = record.edited;
  VoxelAsset expect = oracle_edited(record);
  int g = src.g;
  int64_t n = src.voxels();

  // slot attribution masks over source plus (for additions) the new part
  SceneGraph attribution = record.scene;
  if (record.instr.category == EditCategory::Addition)
    attribution = apply_edit(record.scene, record.instr);
  std::vector<std::pair<int, std::vector<uint8_t>>> masks;
  for (const auto& p : attribution.parts)
    masks.emplace_back(int(p.slot), part_voxels(attribution, p.slot, g));

  auto changed = [&](const VoxelAsset& a, const VoxelAsset& b, int64_t v, bool& occ, bool& col) {
    occ = a.occ[size_t(v)] != b.occ[size_t(v)];
    col = false;
    for (int c = 0; c < 3 && !col; ++c)
      if (a.color[size_t(c * n + v)] != b.color[size_t(c * n + v)]) col = true;
  };

  DiffReport report;
  std::vector<SlotDiff> observed(masks.size() + 1), extra(masks.size() + 1);
  for (size_t m = 0; m < masks.size(); ++m) {
    observed[m].slot = masks[m].first;
    extra[m].slot = masks[m].first;
  }
  observed.back().slot = -1;
  extra.back().slot = -1;

  bool exact = true;
  for (int64_t v = 0; v < n; ++v) {
    bool occ_obs, col_obs, occ_exp, col_exp;
    changed(src, got, v, occ_obs, col_obs);
    changed(got, expect, v, occ_exp, col_exp);  // any deviation from the oracle
    bool deviates = occ_exp || col_exp;
    if (deviates) exact = false;
    if (!occ_obs && !col_obs && !deviates) continue;
    size_t bucket = masks.size();
    for (size_t m = 0; m < masks.size(); ++m)
      if (masks[m].second[size_t(v)]) {
        bucket = m;
        break;
      }
    if (occ_obs) observed[bucket].occ_delta++;
    if (col_obs) observed[bucket].color_delta++;
    if (occ_exp) extra[bucket].occ_delta++;
    if (col_exp) extra[bucket].color_delta++;
  }
  for (const auto& s : observed)
    if (s.occ_delta || s.color_delta) report.slots.push_back(s);
  for (const auto& s : extra)
    if (s.occ_delta || s.color_delta) report.unexpected.push_back(s);
  report.matches_expected = exact;
  return {exact, report};
}

std::pair<bool, float> filter_consistency(const EditPairRecord& record, double tau) {
  if (!(tau > 0.0 && tau <= 1.0)) throw ContractError("filter_consistency: tau must be in (0,1]");
  VoxelAsset expect = oracle_edited(record);
  std::vector<uint8_t> region = target_region(record);
  int w = record.cond.w;
  int g = record.source.g;
  double total = 0;
  for (int vi = 0; vi < kViewCount; ++vi) {
    ViewDir view = ViewDir(vi);
    ViewImage a = render_ortho(record.edited, view, w);
    ViewImage b = render_ortho(expect, view, w);
    std::vector<uint8_t> mask = footprint_mask(region, g, view, w);
    int64_t wh = int64_t(w) * w;
    double sum = 0;
    int64_t count = 0;
    for (int64_t p = 0; p < wh; ++p) {
      if (mask[size_t(p)]) continue;
      ++count;
      for (int c = 0; c < 3; ++c) {
        double d = double(a.rgb[size_t(c * wh + p)]) - double(b.rgb[size_t(c * wh + p)]);
        sum += d * d;
      }
    }
    total += count ? sum / double(3 * count) : 0.0;
  }
  float score = float(total / kViewCount);
  return {score <= tau, score};
}

// ---------------------------------------------------------------------------
// Dataset generation and IO
// ---------------------------------------------------------------------------

namespace {

constexpr char kDatasetMagic[4] = {'S', '3', 'D', 'P'};
constexpr uint32_t kDatasetVersion = 1;

static_assert(std::endian::native == std::endian::little, "dataset format assumes little-endian");

template <class T>
void put(std::ofstream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <class T>
T take(std::ifstream& is, const std::string& path) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw IoError("dataset '" + path + "': truncated");
  return v;
}

void pack_occupancy(const std::vector<uint8_t>& occ, std::vector<uint8_t>& bytes) {
  bytes.assign((occ.size() + 7) / 8, 0);
  for (size_t i = 0; i < occ.size(); ++i)
    if (occ[i]) bytes[i >> 3] |= uint8_t(1u << (i & 7));
}

void unpack_occupancy(const std::vector<uint8_t>& bytes, size_t n, std::vector<uint8_t>& occ) {
  occ.assign(n, 0);
  for (size_t i = 0; i < n; ++i) occ[i] = (bytes[i >> 3] >> (i & 7)) & 1;
}

void write_instruction(std::ofstream& os, const EditInstruction& instr) {
  put<uint8_t>(os, uint8_t(instr.category));
  put<uint8_t>(os, uint8_t(instr.target_slot));
  put<uint8_t>(os, uint8_t(instr.new_color));
  put<uint8_t>(os, uint8_t(instr.payload.kind));
  put<uint8_t>(os, instr.payload.color_id);
  put<uint8_t>(os, instr.payload.slot);
  for (float v : instr.payload.center) put<float>(os, v);
  for (float v : instr.payload.half) put<float>(os, v);
}

EditInstruction read_instruction(std::ifstream& is, const std::string& path) {
  EditInstruction instr;
  instr.category = EditCategory(take<uint8_t>(is, path));
  instr.target_slot = take<uint8_t>(is, path);
  instr.new_color = take<uint8_t>(is, path);
  instr.payload.kind = PrimKind(take<uint8_t>(is, path));
  instr.payload.color_id = take<uint8_t>(is, path);
  instr.payload.slot = take<uint8_t>(is, path);
  for (auto& v : instr.payload.center) v = take<float>(is, path);
  for (auto& v : instr.payload.half) v = take<float>(is, path);
  return instr;
}

void write_asset(std::ofstream& os, const VoxelAsset& a) {
  std::vector<uint8_t> bits;
  pack_occupancy(a.occ, bits);
  os.write(reinterpret_cast<const char*>(bits.data()), std::streamsize(bits.size()));
  os.write(reinterpret_cast<const char*>(a.color.data()), std::streamsize(a.color.size() * 4));
}

VoxelAsset read_asset(std::ifstream& is, int g, const std::string& path) {
  VoxelAsset a;
  a.g = g;
  size_t n = size_t(a.voxels());
  std::vector<uint8_t> bits((n + 7) / 8);
  is.read(reinterpret_cast<char*>(bits.data()), std::streamsize(bits.size()));
  if (!is) throw IoError("dataset '" + path + "': truncated occupancy");
  unpack_occupancy(bits, n, a.occ);
  a.color.resize(3 * n);
  is.read(reinterpret_cast<char*>(a.color.data()), std::streamsize(a.color.size() * 4));
  if (!is) throw IoError("dataset '" + path + "': truncated colors");
  return a;
}

}  // namespace

std::string DatasetManifest::to_json() const {
  nlohmann::json j;
  j["format_version"] = format_version;
  j["split"] = split;
  j["grid"] = grid;
  j["view"] = view;
  j["seed"] = seed;
  j["q"] = q;
  j["tau"] = tau;
  j["instructions_per_scene"] = instructions_per_scene;
  j["scene_min_parts"] = scene_min_parts;
  j["scene_max_parts"] = scene_max_parts;
  j["attempted"] = attempted;
  j["stage1_passed"] = stage1_passed;
  j["stage2_passed"] = stage2_passed;
  j["stored"] = stored;
  j["corrupted_attempted"] = corrupted_attempted;
  j["corrupted_stored"] = corrupted_stored;
  j["clean_attempted"] = clean_attempted;
  j["clean_rejected"] = clean_rejected;
  j["histogram"] = {{"addition", histogram_addition},
                    {"removal", histogram_removal},
                    {"texture", histogram_texture}};
  j["stage1_keep_rate"] = stage1_keep_rate();
  j["overall_keep_rate"] = overall_keep_rate();
  return j.dump(2);
}

DatasetManifest DatasetManifest::from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  DatasetManifest m;
  m.format_version = j.at("format_version").get<uint32_t>();
  m.split = j.at("split").get<std::string>();
  m.grid = j.at("grid").get<int>();
  m.view = j.at("view").get<int>();
  m.seed = j.at("seed").get<uint64_t>();
  m.q = j.at("q").get<double>();
  m.tau = j.at("tau").get<double>();
  m.instructions_per_scene = j.at("instructions_per_scene").get<int>();
  m.scene_min_parts = j.at("scene_min_parts").get<int>();
  m.scene_max_parts = j.at("scene_max_parts").get<int>();
  m.attempted = j.at("attempted").get<int64_t>();
  m.stage1_passed = j.at("stage1_passed").get<int64_t>();
  m.stage2_passed = j.at("stage2_passed").get<int64_t>();
  m.stored = j.at("stored").get<int64_t>();
  m.corrupted_attempted = j.at("corrupted_attempted").get<int64_t>();
  m.corrupted_stored = j.at("corrupted_stored").get<int64_t>();
  m.clean_attempted = j.at("clean_attempted").get<int64_t>();
  m.clean_rejected = j.at("clean_rejected").get<int64_t>();
  m.histogram_addition = j.at("histogram").at("addition").get<int64_t>();
  m.histogram_removal = j.at("histogram").at("removal").get<int64_t>();
  m.histogram_texture = j.at("histogram").at("texture").get<int64_t>();
  return m;
}

void DatasetManifest::save(const std::string& path) const {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("manifest '" + path + "': cannot open for writing");
  os << to_json() << "\n";
  if (!os) throw IoError("manifest '" + path + "': write failed");
}

DatasetManifest DatasetManifest::load(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw MissingPrerequisiteError("manifest '" + path + "' does not exist");
  std::string text((std::istreambuf_iterator<char>(is)), {});
  DatasetManifest m = from_json(text);
  m.validate();
  return m;
}

void DatasetManifest::validate() const {
  if (histogram_addition + histogram_removal + histogram_texture != stored)
    throw ContractError("manifest: category histogram does not sum to record count");
  if (stored != stage2_passed) throw ContractError("manifest: stored != stage2_passed");
  auto rate_ok = [](double r) { return r >= 0.0 && r <= 1.0; };
  if (!rate_ok(stage1_keep_rate()) || !rate_ok(overall_keep_rate()))
    throw ContractError("manifest: keep rate outside [0,1]");
  if (corrupted_attempted + clean_attempted != attempted)
    throw ContractError("manifest: corruption counts do not sum to attempted");
}

DatasetManifest generate_dataset(const DataConfig& config, const std::string& path) {
  if (config.pairs < 1) throw BadArgsError("gen-data: pairs must be >= 1");
  if (config.q < 0 || config.q > 1) throw BadArgsError("gen-data: q must be in [0,1]");
  if (!(config.tau > 0 && config.tau <= 1)) throw BadArgsError("gen-data: tau must be in (0,1]");
  if (config.instructions_per_scene < 1 ||
      config.instructions_per_scene > kEvalEditOffset)
    throw BadArgsError("gen-data: instructions_per_scene must be in [1," +
                       std::to_string(kEvalEditOffset) + "]");

  SceneParams scene_params = config.scene;
  scene_params.grid = config.grid;

  DatasetManifest man;
  man.split = split_name(config.split);
  man.grid = config.grid;
  man.view = config.view;
  man.seed = config.seed;
  man.q = config.q;
  man.tau = config.tau;
  man.instructions_per_scene = config.instructions_per_scene;
  man.scene_min_parts = scene_params.min_parts;
  man.scene_max_parts = scene_params.max_parts;

  std::string tmp = path + ".tmp";
  std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("dataset '" + path + "': cannot open for writing");

  struct Slot {
    bool present = false;
    bool stored = false;
    bool corrupted = false;
    bool stage1 = false, stage2 = false;
    EditCategory category = EditCategory::Null;
    EditPairRecord record;
  };

  try {
    os.write(kDatasetMagic, 4);
    put<uint32_t>(os, kDatasetVersion);
    put<uint32_t>(os, uint32_t(config.grid));
    put<uint32_t>(os, uint32_t(config.view));
    std::streampos count_pos = os.tellp();
    put<uint64_t>(os, 0);  // patched after streaming

    int ips = config.instructions_per_scene;
    int edit_base = config.split == Split::SeenUnseenEdit ? kEvalEditOffset : 0;
    int64_t chunk = 256;
    uint64_t stored = 0;

    for (int64_t begin = 0; begin < config.pairs; begin += chunk) {
      int64_t end = std::min<int64_t>(begin + chunk, config.pairs);
      std::vector<Slot> slots(size_t(end - begin));
      parallel_for(end - begin, config.threads, [&](int64_t k) {
        int64_t i = begin + k;
        int64_t scene_index = i / ips;
        int edit_index = edit_base + int(i % ips);
        uint64_t scene_seed = scene_seed_for(config.split, scene_index);
        SceneGraph scene = make_scene(scene_seed, scene_params);
        try {
          build_asset(scene, config.grid);
        } catch (const DegenerateOutputError&) {
          return;  // unusable scene; skip its records
        }

        // fixed per-scene edit stream; dataset seed drives corruption only
        ProposeResult proposals = propose_instructions(
            scene, edit_base + ips, Rng(scene_seed).fork("edit-universe").next_u64(),
            config.weights, config.grid);
        if (edit_index >= int(proposals.instructions.size())) return;  // scene exhausted

        Slot& slot = slots[size_t(k)];
        EditPairRecord rec;
        rec.scene_seed = scene_seed;
        rec.scene = scene;
        rec.instr = proposals.instructions[size_t(edit_index)];
        rec.tokens = encode_instruction(rec.instr);
        rec.source = build_asset(scene, config.grid);
        rec.edited = build_asset(apply_edit(scene, rec.instr), config.grid);
        ViewDir cond_view = ViewDir::Front;
        if (config.randomize_condition_view) {
          Rng vr = Rng(config.seed).fork("cond-view").fork(uint64_t(i));
          cond_view = ViewDir(vr.uniform_int(0, kViewCount - 1));
        }
        rec.cond = render_ortho(rec.source, cond_view, config.view);
        rec = corrupt(std::move(rec), config.q, Rng(config.seed).fork("corrupt").fork(uint64_t(i)).next_u64());

        auto [ok1, diff] = filter_correctness(rec);
        rec.verdicts.correctness = ok1;
        bool ok2 = false;
        if (ok1) {
          auto [pass, score] = filter_consistency(rec, config.tau);
          rec.verdicts.consistency = pass;
          rec.verdicts.consistency_score = score;
          ok2 = pass;
        }
        slot.present = true;
        slot.corrupted = rec.corrupted;
        slot.stage1 = ok1;
        slot.stage2 = ok1 && ok2;
        slot.stored = slot.stage2;
        slot.category = rec.instr.category;
        if (slot.stored) slot.record = std::move(rec);
      });

      for (auto& slot : slots) {
        if (!slot.present) continue;
        ++man.attempted;
        if (slot.corrupted) ++man.corrupted_attempted;
        else ++man.clean_attempted;
        if (slot.stage1) ++man.stage1_passed;
        if (slot.stage2) ++man.stage2_passed;
        if (!slot.stored) {
          if (!slot.corrupted) ++man.clean_rejected;
          continue;
        }
        if (slot.corrupted) ++man.corrupted_stored;
        switch (slot.category) {
          case EditCategory::Addition: ++man.histogram_addition; break;
          case EditCategory::Removal: ++man.histogram_removal; break;
          case EditCategory::Texture: ++man.histogram_texture; break;
          default: break;
        }
        const EditPairRecord& r = slot.record;
        put<uint64_t>(os, r.scene_seed);
        for (uint16_t t : r.tokens) put<uint16_t>(os, t);
        write_instruction(os, r.instr);
        write_asset(os, r.source);
        write_asset(os, r.edited);
        os.write(reinterpret_cast<const char*>(r.cond.rgb.data()),
                 std::streamsize(r.cond.rgb.size() * 4));
        uint8_t flags = uint8_t((r.corrupted ? 1 : 0) | (r.verdicts.correctness ? 2 : 0) |
                                (r.verdicts.consistency ? 4 : 0));
        put<uint8_t>(os, flags);
        ++stored;
      }
      if (!os) throw IoError("dataset '" + path + "': write failed");
    }

    man.stored = int64_t(stored);
    if (stored == 0) throw DegenerateOutputError("gen-data produced zero passing records");
    os.seekp(count_pos);
    put<uint64_t>(os, stored);
    os.flush();
    if (!os) throw IoError("dataset '" + path + "': write failed");
  } catch (...) {
    os.close();
    std::filesystem::remove(tmp);
    throw;
  }
  os.close();

  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    throw IoError("dataset '" + path + "': rename failed: " + ec.message());
  }
  man.validate();
  man.save(path + ".manifest.json");
  return man;
}

Dataset load_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw MissingPrerequisiteError("dataset '" + path + "' does not exist");
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kDatasetMagic, 4) != 0)
    throw IoError("dataset '" + path + "': bad magic");
  uint32_t version = take<uint32_t>(is, path);
  if (version != kDatasetVersion)
    throw IoError("dataset '" + path + "': unsupported version " + std::to_string(version));
  Dataset d;
  d.grid = int(take<uint32_t>(is, path));
  d.view = int(take<uint32_t>(is, path));
  uint64_t count = take<uint64_t>(is, path);
  int64_t n = int64_t(d.grid) * d.grid * d.grid;
  d.records.reserve(count);
  for (uint64_t i = 0; i < count; ++i) {
    StoredRecord r;
    r.scene_seed = take<uint64_t>(is, path);
    for (auto& t : r.tokens) t = take<uint16_t>(is, path);
    r.instr = read_instruction(is, path);
    r.source = read_asset(is, d.grid, path);
    r.edited = read_asset(is, d.grid, path);
    r.cond.w = d.view;
    r.cond.view = ViewDir::Front;
    r.cond.rgb.resize(size_t(3) * d.view * d.view);
    is.read(reinterpret_cast<char*>(r.cond.rgb.data()), std::streamsize(r.cond.rgb.size() * 4));
    if (!is) throw IoError("dataset '" + path + "': truncated condition image");
    r.flags = take<uint8_t>(is, path);

    // record invariants: binary occupancy is structural; colors must vanish
    // off-occupancy and tokens must match the structured instruction
    for (int64_t v = 0; v < n; ++v)
      if (!r.source.occ[size_t(v)] || !r.edited.occ[size_t(v)]) {
        for (int c = 0; c < 3; ++c) {
          if (!r.source.occ[size_t(v)] && r.source.color[size_t(c * n + v)] != 0.0f)
            throw IoError("dataset '" + path + "': record " + std::to_string(i) +
                          " has color on unoccupied source voxel");
          if (!r.edited.occ[size_t(v)] && r.edited.color[size_t(c * n + v)] != 0.0f)
            throw IoError("dataset '" + path + "': record " + std::to_string(i) +
                          " has color on unoccupied edited voxel");
        }
      }
    if (encode_instruction(r.instr) != r.tokens)
      throw IoError("dataset '" + path + "': record " + std::to_string(i) +
                    " token/instruction mismatch");
    d.records.push_back(std::move(r));
  }
  return d;
}

}  // namespace voxsteer
