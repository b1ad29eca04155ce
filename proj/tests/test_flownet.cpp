#include "doctest.h"

#include <cmath>

#include "voxsteer/flownet.hpp"
#include "voxsteer/rng.hpp"

using namespace voxsteer;

namespace {

ModelConfig small_config(Stage stage = Stage::Geometry) {
  ModelConfig cfg;
  cfg.grid = 8;
  cfg.patch = 2;
  cfg.width = 32;
  cfg.heads = 4;
  cfg.blocks = 2;
  cfg.image_size = 16;
  cfg.image_patch = 4;
  cfg.stage = stage;
  return cfg;
}

TensorF random_tensor(Shape shape, uint64_t seed) {
  TensorF t = TensorF::zeros(std::move(shape));
  Rng(seed).fill_normal(t.ptr(), size_t(t.size()));
  return t;
}

// the head is zero-initialized, so tests that need a non-zero output bump it
template <class R>
void randomize_head(FlowModel<R>& m, uint64_t seed) {
  auto& w = m.params.get("base.head.w");
  Rng(seed).fill_normal(w.ptr(), size_t(w.size()));
}

std::vector<InstrTokens> instructions_for(int batch, uint16_t salt) {
  std::vector<InstrTokens> out;
  for (int i = 0; i < batch; ++i)
    out.push_back(InstrTokens{3, uint16_t(1 + (i + salt) % 6), uint16_t(1 + (i + salt) % 8), 0});
  return out;
}

}  // namespace

TEST_CASE("same seed gives identical parameters") {
  auto cfg = small_config();
  auto m1 = FlowModelF::init_base(cfg, 7);
  auto m2 = FlowModelF::init_base(cfg, 7);
  CHECK(m1.params.checksum() == m2.params.checksum());
  auto m3 = FlowModelF::init_base(cfg, 8);
  CHECK(m1.params.checksum() != m3.params.checksum());

  m1.init_control(9);
  m2.init_control(9);
  CHECK(m1.params.checksum() == m2.params.checksum());
}

TEST_CASE("velocity output has the latent shape") {
  for (Stage stage : {Stage::Geometry, Stage::Texture}) {
    auto cfg = small_config(stage);
    auto m = FlowModelF::init_base(cfg, 3);
    randomize_head(m, 33);
    int64_t b = 2;
    auto x = random_tensor({b, cfg.tokens(), cfg.latent_channels()}, 1);
    auto cond = random_tensor({b, cfg.cond_tokens(), cfg.cond_channels()}, 2);
    auto occ = random_tensor({b, cfg.tokens(), cfg.patch_volume()}, 3);
    Graph<float> g;
    auto v = m.velocity_base(g, x, {0.3, 0.9}, cond, stage == Stage::Texture ? &occ : nullptr);
    CHECK(v.shape == x.shape);
    for (float val : *v.data) CHECK(std::isfinite(val));
  }
}

TEST_CASE("parameter count matches the closed-form expression") {
  for (Stage stage : {Stage::Geometry, Stage::Texture}) {
    auto cfg = small_config(stage);
    auto m = FlowModelF::init_base(cfg, 1);
    CHECK(m.param_count() == expected_base_param_count(cfg));
    m.init_control(2);
    CHECK(m.param_count() == expected_base_param_count(cfg) + expected_control_param_count(cfg));
  }
}

TEST_CASE("control init: zero projections, copied blocks, frozen base") {
  auto cfg = small_config(Stage::Texture);
  auto m = FlowModelF::init_base(cfg, 5);
  auto base_checksum = m.params.checksum(ParamSet::Base);
  m.init_control(6);

  for (int i = 0; i < cfg.blocks; ++i) {
    std::string p = "ctrl.blk" + std::to_string(i) + ".proj";
    for (float v : *m.params.get(p + ".w").data) CHECK(v == 0.0f);
    for (float v : *m.params.get(p + ".b").data) CHECK(v == 0.0f);
    for (const char* part : {".sa.q.w", ".sa.o.b", ".ca.k.w", ".mlp.fc1.w", ".ada.sa_gate.w"}) {
      auto src = "base.blk" + std::to_string(i) + part;
      auto dst = "ctrl.blk" + std::to_string(i) + part;
      CHECK(*m.params.get(src).data == *m.params.get(dst).data);
    }
  }
  CHECK(m.params.checksum(ParamSet::Base) == base_checksum);
  for (const auto& name : m.params.names(ParamSet::Base)) CHECK_FALSE(m.params.trainable(name));
  for (const auto& name : m.params.names(ParamSet::Control)) CHECK(m.params.trainable(name));
}

TEST_CASE("zero-init steering equivalence holds elementwise") {
  for (Stage stage : {Stage::Geometry, Stage::Texture}) {
    auto cfg = small_config(stage);
    auto m = FlowModelF::init_base(cfg, 11);
    randomize_head(m, 12);
    m.init_control(13);
    for (uint64_t trial = 0; trial < 5; ++trial) {
      int64_t b = 2;
      auto x = random_tensor({b, cfg.tokens(), cfg.latent_channels()}, 100 + trial);
      auto cond = random_tensor({b, cfg.cond_tokens(), cfg.cond_channels()}, 200 + trial);
      auto occ = random_tensor({b, cfg.tokens(), cfg.patch_volume()}, 300 + trial);
      const TensorF* occ_ptr = stage == Stage::Texture ? &occ : nullptr;
      std::vector<double> t{0.25, 0.75};
      Graph<float> g1, g2;
      auto vb = m.velocity_base(g1, x, t, cond, occ_ptr);
      auto vs = m.velocity_steered(g2, x, t, cond, instructions_for(int(b), uint16_t(trial)), occ_ptr);
      REQUIRE(vb.shape == vs.shape);
      for (int64_t i = 0; i < vb.size(); ++i) CHECK((*vb.data)[size_t(i)] == (*vs.data)[size_t(i)]);
    }
  }
}

TEST_CASE("steering responds once a control parameter moves") {
  auto cfg = small_config(Stage::Texture);
  auto m = FlowModelF::init_base(cfg, 21);
  randomize_head(m, 22);
  m.init_control(23);
  (*m.params.get("ctrl.blk0.proj.w").data)[5] = 0.37f;

  int64_t b = 1;
  auto x = random_tensor({b, cfg.tokens(), cfg.latent_channels()}, 31);
  auto cond = random_tensor({b, cfg.cond_tokens(), cfg.cond_channels()}, 32);
  auto occ = random_tensor({b, cfg.tokens(), cfg.patch_volume()}, 33);
  Graph<float> g1, g2;
  auto vb = m.velocity_base(g1, x, {0.5}, cond, &occ);
  auto vs = m.velocity_steered(g2, x, {0.5}, cond, instructions_for(1, 0), &occ);
  bool any_diff = false;
  for (int64_t i = 0; i < vb.size(); ++i)
    if ((*vb.data)[size_t(i)] != (*vs.data)[size_t(i)]) any_diff = true;
  CHECK(any_diff);
}

TEST_CASE("changing the condition image changes the output") {
  auto cfg = small_config();
  auto m = FlowModelF::init_base(cfg, 41);
  randomize_head(m, 42);
  int64_t b = 1;
  auto x = random_tensor({b, cfg.tokens(), cfg.latent_channels()}, 43);
  auto cond1 = random_tensor({b, cfg.cond_tokens(), cfg.cond_channels()}, 44);
  auto cond2 = random_tensor({b, cfg.cond_tokens(), cfg.cond_channels()}, 45);
  Graph<float> g1, g2;
  auto v1 = m.velocity_base(g1, x, {0.5}, cond1);
  auto v2 = m.velocity_base(g2, x, {0.5}, cond2);
  bool any_diff = false;
  for (int64_t i = 0; i < v1.size(); ++i)
    if ((*v1.data)[size_t(i)] != (*v2.data)[size_t(i)]) any_diff = true;
  CHECK(any_diff);
}

TEST_CASE("timestep outside [0,1] is a contract error") {
  auto cfg = small_config();
  auto m = FlowModelF::init_base(cfg, 51);
  auto x = random_tensor({1, cfg.tokens(), cfg.latent_channels()}, 52);
  auto cond = random_tensor({1, cfg.cond_tokens(), cfg.cond_channels()}, 53);
  Graph<float> g;
  CHECK_THROWS_AS(m.velocity_base(g, x, {1.5}, cond), ContractError);
  CHECK_THROWS_AS(m.velocity_base(g, x, {-0.1}, cond), ContractError);
}

TEST_CASE("texture stage requires occupancy tokens") {
  auto cfg = small_config(Stage::Texture);
  auto m = FlowModelF::init_base(cfg, 61);
  auto x = random_tensor({1, cfg.tokens(), cfg.latent_channels()}, 62);
  auto cond = random_tensor({1, cfg.cond_tokens(), cfg.cond_channels()}, 63);
  Graph<float> g;
  CHECK_THROWS_AS(m.velocity_base(g, x, {0.5}, cond), ContractError);
}

TEST_CASE("patchify/unpatchify round-trips arbitrary grids") {
  Rng rng(71);
  for (auto [g, p, c] : {std::tuple{8, 2, 1}, std::tuple{8, 4, 3}, std::tuple{6, 3, 5},
                         std::tuple{16, 2, 4}}) {
    std::vector<float> grid(size_t(c) * g * g * g);
    for (auto& v : grid) v = float(rng.normal());
    auto tokens = patchify(grid, c, g, p);
    CHECK(unpatchify(tokens, c, g, p) == grid);
  }
}

TEST_CASE("geometry latent encodes occupancy with an exact sign round-trip") {
  auto scene = make_scene(81);
  auto asset = build_asset(scene, 16);
  auto latent = geometry_latent(asset.occ, 16, 2);
  CHECK(latent_occupancy(latent, 16, 2) == asset.occ);
}

TEST_CASE("texture latent decodes to clamped colors on occupied voxels") {
  auto scene = make_scene(91);
  auto asset = build_asset(scene, 8);
  auto latent = texture_latent(asset, 2);
  auto colors = latent_colors(latent, asset.occ, 8, 2);
  int64_t n = asset.voxels();
  for (int64_t v = 0; v < n; ++v)
    for (int c = 0; c < 3; ++c) {
      float got = colors[size_t(c * n + v)];
      float want = asset.color[size_t(c * n + v)];
      if (asset.occ[size_t(v)])
        CHECK(got == doctest::Approx(want).epsilon(1e-6));
      else
        CHECK(got == 0.0f);
    }
}

TEST_CASE("model config serialization round-trips and hashes stably") {
  auto cfg = small_config(Stage::Texture);
  auto back = ModelConfig::from_kv(cfg.to_kv());
  CHECK(back.to_kv() == cfg.to_kv());
  CHECK(back.hash() == cfg.hash());
  CHECK(ModelConfig().hash() != cfg.hash());
}
