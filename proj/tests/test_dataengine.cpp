#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <set>

#include "voxsteer/dataengine.hpp"

using namespace voxsteer;

namespace {

std::string temp_path(const char* stem) {
  auto dir = std::filesystem::temp_directory_path() / "voxsteer_tests";
  std::filesystem::create_directories(dir);
  return (dir / stem).string();
}

std::string read_bytes(const std::string& p) {
  std::ifstream is(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(is), {});
}

EditPairRecord make_record(uint64_t scene_seed, EditCategory category, int grid = 16) {
  SceneParams params;
  params.min_parts = 3;
  params.max_parts = 4;
  EditPairRecord rec;
  rec.scene_seed = scene_seed;
  rec.scene = make_scene(scene_seed, params);
  auto proposals = propose_instructions(rec.scene, 8, scene_seed ^ 0xabc, {}, grid);
  bool found = false;
  for (const auto& instr : proposals.instructions)
    if (instr.category == category) {
      rec.instr = instr;
      found = true;
      break;
    }
  REQUIRE(found);
  rec.tokens = encode_instruction(rec.instr);
  rec.source = build_asset(rec.scene, grid);
  rec.edited = build_asset(apply_edit(rec.scene, rec.instr), grid);
  rec.cond = render_ortho(rec.source, ViewDir::Front, 2 * grid);
  return rec;
}

}  // namespace

TEST_CASE("twenty distinct proposals on a four-part scene") {
  SceneParams params;
  params.min_parts = 4;
  params.max_parts = 4;
  auto scene = make_scene(2001, params);
  REQUIRE(scene.parts.size() == 4);
  auto result = propose_instructions(scene, 20, 7, {}, 16);
  CHECK(result.instructions.size() == 20);
  CHECK_FALSE(result.exhausted);
  std::set<InstrTokens> tokens;
  for (const auto& instr : result.instructions) tokens.insert(encode_instruction(instr));
  CHECK(tokens.size() == 20);
}

TEST_CASE("single-part scene with removal-only weights yields at most one proposal") {
  SceneParams params;
  params.min_parts = 1;
  params.max_parts = 1;
  auto scene = make_scene(55, params);
  REQUIRE(scene.parts.size() == 1);
  CategoryWeights w{0.0, 1.0, 0.0};
  auto result = propose_instructions(scene, 5, 3, w, 16);
  CHECK(result.instructions.size() <= 1);
  CHECK(result.exhausted);
}

TEST_CASE("proposals are deterministic in the seed") {
  auto scene = make_scene(42);
  auto a = propose_instructions(scene, 10, 9, {}, 16);
  auto b = propose_instructions(scene, 10, 9, {}, 16);
  CHECK(a.instructions == b.instructions);
  // requesting fewer yields a prefix of the same stream
  auto c = propose_instructions(scene, 4, 9, {}, 16);
  REQUIRE(c.instructions.size() <= a.instructions.size());
  for (size_t i = 0; i < c.instructions.size(); ++i)
    CHECK(c.instructions[i] == a.instructions[i]);
}

TEST_CASE("q=0 leaves the record unchanged") {
  auto rec = make_record(10, EditCategory::Texture);
  auto out = corrupt(rec, 0.0, 99);
  CHECK_FALSE(out.corrupted);
  CHECK(out.edited == rec.edited);
}

TEST_CASE("jitter flips exactly ceil(2%) of voxels") {
  CHECK(jitter_flip_count(16) == 82);
  // single-part texture record: wrong-target and overshoot are unavailable, so
  // every corruption kind falls back to jitter
  SceneParams params;
  params.min_parts = 1;
  params.max_parts = 1;
  EditPairRecord rec;
  rec.scene_seed = 77;
  rec.scene = make_scene(77, params);
  rec.instr.category = EditCategory::Texture;
  rec.instr.target_slot = 0;
  rec.instr.new_color = (rec.scene.parts[0].color_id + 2) % kPaletteSize;
  rec.tokens = encode_instruction(rec.instr);
  rec.source = build_asset(rec.scene, 16);
  rec.edited = build_asset(apply_edit(rec.scene, rec.instr), 16);
  rec.cond = render_ortho(rec.source, ViewDir::Front, 32);

  auto out = corrupt(rec, 1.0, 5);
  CHECK(out.corrupted);
  int64_t flipped = 0;
  for (size_t v = 0; v < out.edited.occ.size(); ++v)
    if (out.edited.occ[v] != rec.edited.occ[v]) ++flipped;
  CHECK(flipped == 82);
}

TEST_CASE("corruption never alters the instruction tokens") {
  for (uint64_t s = 0; s < 12; ++s) {
    auto rec = make_record(100 + s, EditCategory(1 + s % 3));
    auto out = corrupt(rec, 1.0, s);
    CHECK(out.corrupted);
    CHECK(out.tokens == rec.tokens);
    CHECK(out.instr == rec.instr);
  }
}

TEST_CASE("uncorrupted records pass the correctness filter") {
  for (uint64_t s = 0; s < 6; ++s) {
    auto rec = make_record(200 + s, EditCategory(1 + s % 3));
    auto [pass, report] = filter_correctness(rec);
    CHECK(pass);
    CHECK(report.matches_expected);
  }
}

TEST_CASE("wrong-target corruption fails and the report names the unexpected slot") {
  // search for a seed where the corruption takes the wrong-target branch
  for (uint64_t s = 0; s < 64; ++s) {
    auto rec = make_record(300, EditCategory::Texture);
    auto out = corrupt(rec, 1.0, s);
    REQUIRE(out.corrupted);
    bool occ_same = out.edited.occ == rec.edited.occ;
    if (!occ_same) continue;  // jitter branch; we want a recolor of a wrong part
    auto [pass, report] = filter_correctness(out);
    CHECK_FALSE(pass);
    bool names_other_slot = false;
    for (const auto& sd : report.unexpected)
      if (sd.slot >= 0 && sd.slot != rec.instr.target_slot) names_other_slot = true;
    CHECK(names_other_slot);
    return;
  }
  FAIL("no wrong-target corruption found in seed range");
}

TEST_CASE("texture edits that change occupancy anywhere fail correctness") {
  auto rec = make_record(400, EditCategory::Texture);
  // flip one voxel of the edited asset
  for (size_t v = 0; v < rec.edited.occ.size(); ++v)
    if (rec.edited.occ[v]) {
      rec.edited.occ[v] = 0;
      for (int c = 0; c < 3; ++c)
        rec.edited.color[size_t(c) * rec.edited.occ.size() + v] = 0.0f;
      break;
    }
  auto [pass, report] = filter_correctness(rec);
  CHECK_FALSE(pass);
}

TEST_CASE("consistency filter: oracle pairs score zero, jitter scores positive") {
  auto rec = make_record(500, EditCategory::Removal);
  auto [pass, score] = filter_consistency(rec, 0.01);
  CHECK(pass);
  CHECK(score == 0.0f);

  SceneParams params;
  params.min_parts = 1;
  params.max_parts = 1;
  EditPairRecord single;
  single.scene_seed = 501;
  single.scene = make_scene(501, params);
  single.instr.category = EditCategory::Texture;
  single.instr.target_slot = 0;
  single.instr.new_color = (single.scene.parts[0].color_id + 1) % kPaletteSize;
  single.tokens = encode_instruction(single.instr);
  single.source = build_asset(single.scene, 16);
  single.edited = build_asset(apply_edit(single.scene, single.instr), 16);
  single.cond = render_ortho(single.source, ViewDir::Front, 32);
  auto bad = corrupt(single, 1.0, 3);  // jitter
  auto [pass2, score2] = filter_consistency(bad, 0.0001);
  CHECK(score2 > 0.0f);
  CHECK_FALSE(pass2);
  // tau = 1 bounds normalized MSE, so everything passes
  auto [pass3, score3] = filter_consistency(bad, 1.0);
  CHECK(pass3);
}

TEST_CASE("generate: q=0 keeps everything and files are byte-identical") {
  DataConfig cfg;
  cfg.pairs = 60;
  cfg.q = 0.0;
  cfg.seed = 11;
  cfg.scene.min_parts = 2;
  cfg.scene.max_parts = 4;
  auto p1 = temp_path("d1.s3dp");
  auto p2 = temp_path("d2.s3dp");
  auto m1 = generate_dataset(cfg, p1);
  auto m2 = generate_dataset(cfg, p2);
  CHECK(m1.attempted == 60);
  CHECK(m1.stored == m1.attempted);
  CHECK(m1.stage1_keep_rate() == 1.0);
  CHECK(m1.overall_keep_rate() == 1.0);
  CHECK(read_bytes(p1) == read_bytes(p2));
  CHECK(read_bytes(p1 + ".manifest.json") == read_bytes(p2 + ".manifest.json"));

  // thread count must not change the bytes
  DataConfig threaded = cfg;
  threaded.threads = 3;
  auto p3 = temp_path("d3.s3dp");
  generate_dataset(threaded, p3);
  CHECK(read_bytes(p1) == read_bytes(p3));
}

TEST_CASE("generate: manifest accounting and load-time invariants hold") {
  DataConfig cfg;
  cfg.pairs = 120;
  cfg.q = 0.5;
  cfg.seed = 21;
  cfg.scene.min_parts = 2;
  cfg.scene.max_parts = 4;
  auto path = temp_path("d4.s3dp");
  auto man = generate_dataset(cfg, path);
  man.validate();
  CHECK(man.attempted <= 120);
  CHECK(man.stored < man.attempted);  // corruption present, filters reject
  CHECK(man.histogram_addition + man.histogram_removal + man.histogram_texture == man.stored);
  CHECK(man.corrupted_attempted + man.clean_attempted == man.attempted);

  auto loaded_man = DatasetManifest::load(path + ".manifest.json");
  CHECK(loaded_man.stored == man.stored);

  auto ds = load_dataset(path);
  CHECK(int64_t(ds.records.size()) == man.stored);
  CHECK(ds.grid == 16);
  // clean stored records equal the oracle edit exactly
  SceneParams params;
  params.grid = ds.grid;
  params.min_parts = cfg.scene.min_parts;
  params.max_parts = cfg.scene.max_parts;
  int checked = 0;
  for (const auto& r : ds.records) {
    if (r.corrupted()) continue;
    SceneGraph scene = make_scene(r.scene_seed, params);
    auto oracle = build_asset(apply_edit(scene, r.instr), ds.grid);
    CHECK(r.edited == oracle);
    if (++checked >= 10) break;
  }
  CHECK(checked > 0);
}

TEST_CASE("filter soundness on a mixed batch") {
  // with exact filters, acceptance equals non-corruption up to rare coincidences
  DataConfig cfg;
  cfg.pairs = 200;
  cfg.q = 0.5;
  cfg.seed = 31;
  cfg.scene.min_parts = 2;
  cfg.scene.max_parts = 4;
  auto path = temp_path("d5.s3dp");
  auto man = generate_dataset(cfg, path);
  CHECK(man.clean_rejected == 0);
  CHECK(double(man.corrupted_stored) <= 0.02 * double(man.corrupted_attempted) + 1);
}

TEST_CASE("train and eval-seen splits share scenes but not edits") {
  CHECK(scene_seed_for(Split::Train, 3) == scene_seed_for(Split::SeenUnseenEdit, 3));
  CHECK(scene_seed_for(Split::Train, 3) != scene_seed_for(Split::UnseenAsset, 3));

  DataConfig train_cfg;
  train_cfg.pairs = 40;
  train_cfg.seed = 1;
  train_cfg.scene.min_parts = 3;
  train_cfg.scene.max_parts = 4;
  train_cfg.split = Split::Train;
  auto train_path = temp_path("train.s3dp");
  generate_dataset(train_cfg, train_path);

  DataConfig eval_cfg = train_cfg;
  eval_cfg.split = Split::SeenUnseenEdit;
  eval_cfg.seed = 2;
  auto eval_path = temp_path("evalseen.s3dp");
  generate_dataset(eval_cfg, eval_path);

  auto train_ds = load_dataset(train_path);
  auto eval_ds = load_dataset(eval_path);
  std::set<std::pair<uint64_t, InstrTokens>> train_keys;
  std::set<uint64_t> train_scenes;
  for (const auto& r : train_ds.records) {
    train_keys.insert({r.scene_seed, r.tokens});
    train_scenes.insert(r.scene_seed);
  }
  int shared_scenes = 0;
  for (const auto& r : eval_ds.records) {
    CHECK(train_keys.count({r.scene_seed, r.tokens}) == 0);
    if (train_scenes.count(r.scene_seed)) ++shared_scenes;
  }
  CHECK(shared_scenes > 0);
}

TEST_CASE("bad generation arguments are rejected") {
  DataConfig cfg;
  cfg.pairs = 0;
  CHECK_THROWS_AS(generate_dataset(cfg, temp_path("bad.s3dp")), BadArgsError);
  cfg.pairs = 1;
  cfg.q = 1.5;
  CHECK_THROWS_AS(generate_dataset(cfg, temp_path("bad.s3dp")), BadArgsError);
  cfg.q = 0;
  cfg.tau = 0;
  CHECK_THROWS_AS(generate_dataset(cfg, temp_path("bad.s3dp")), BadArgsError);
}
