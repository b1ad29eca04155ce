#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "voxsteer/param_store.hpp"
#include "voxsteer/tensor.hpp"
#include "voxsteer/voxelworld.hpp"

namespace voxsteer {

enum class Stage : uint8_t { Geometry = 0, Texture = 1 };
const char* stage_name(Stage s);
Stage stage_from_name(const std::string& name);

struct ModelConfig {
  int grid = 16;
  int patch = 2;
  int width = 64;
  int heads = 4;
  int blocks = 4;
  int image_size = 32;
  int image_patch = 4;
  int instr_vocab = kInstrVocab;
  int instr_len = 4;
  Stage stage = Stage::Geometry;
  // Feed each voxel token the front-view image crop above its (x,z) column at
  // the input stem, in addition to block-level cross-attention.
  bool cond_stem = true;

  int tokens_per_side() const { return grid / patch; }
  int64_t tokens() const {
    int64_t s = tokens_per_side();
    return s * s * s;
  }
  int patch_volume() const { return patch * patch * patch; }
  // Channels of the latent the velocity lives in (and the model's output).
  int latent_channels() const { return stage == Stage::Geometry ? patch_volume() : 3 * patch_volume(); }
  // Side length in pixels of the image crop aligned with one token column.
  int stem_patch() const { return image_size * patch / grid; }
  int stem_channels() const { return cond_stem ? 3 * stem_patch() * stem_patch() : 0; }
  // Texture stage also ingests the occupancy mask as an extra token channel set.
  int input_channels() const {
    int base = stage == Stage::Geometry ? patch_volume() : 4 * patch_volume();
    return base + stem_channels();
  }
  int64_t cond_tokens() const {
    int64_t s = image_size / image_patch;
    return s * s;
  }
  int cond_channels() const { return 3 * image_patch * image_patch; }
  int head_dim() const { return width / heads; }

  void validate() const;
  uint64_t hash() const;
  std::string to_kv() const;
  static ModelConfig from_kv(const std::string& text);
};

// Latent <-> grid transcoding. Geometry occupancy is carried as {-1,+1} with a
// sign decision boundary at zero; texture colors are carried as [-1,1] on
// occupied voxels and 0 elsewhere.
std::vector<float> patchify(const std::vector<float>& grid_channels, int channels, int g, int p);
std::vector<float> unpatchify(const std::vector<float>& tokens, int channels, int g, int p);
std::vector<float> geometry_latent(const std::vector<uint8_t>& occ, int g, int p);
std::vector<float> occupancy_tokens(const std::vector<uint8_t>& occ, int g, int p);
std::vector<float> texture_latent(const VoxelAsset& asset, int p);
std::vector<uint8_t> latent_occupancy(const std::vector<float>& tokens, int g, int p);
std::vector<float> latent_colors(const std::vector<float>& tokens, const std::vector<uint8_t>& occ,
                                 int g, int p);
// Raw image patch tokens (cond_tokens x cond_channels).
std::vector<float> image_tokens(const ViewImage& img, int image_patch);

template <class R>
struct FlowModel {
  ModelConfig cfg;
  ParameterStore<R> params;
  bool has_control = false;

  // Base velocity model: self-attention over voxel tokens, cross-attention
  // over condition-image tokens, feed-forward, timestep injected through
  // adaptive scale/shift/gate modulation.
  static FlowModel init_base(const ModelConfig& cfg, uint64_t seed);

  // Per-block trainable copy with an extra cross-attention over instruction
  // tokens and a zero-initialized output projection. Freezes the base set.
  void init_control(uint64_t seed);

  int64_t param_count() const { return params.element_count(); }

  // x: (B, T, latent_channels). occ: (B, T, patch_volume) occupancy tokens,
  // required for the texture stage. cond: (B, cond_tokens, cond_channels).
  // instr == nullptr runs the plain base model; otherwise the control branch
  // steers it (NULL token sequences are valid instructions).
  Tensor<R> velocity(Graph<R>& g, const Tensor<R>& x, const std::vector<double>& t,
                     const Tensor<R>& cond, const Tensor<R>* occ,
                     const std::vector<InstrTokens>* instr) const;

  Tensor<R> velocity_base(Graph<R>& g, const Tensor<R>& x, const std::vector<double>& t,
                          const Tensor<R>& cond, const Tensor<R>* occ = nullptr) const {
    return velocity(g, x, t, cond, occ, nullptr);
  }
  Tensor<R> velocity_steered(Graph<R>& g, const Tensor<R>& x, const std::vector<double>& t,
                             const Tensor<R>& cond, const std::vector<InstrTokens>& instr,
                             const Tensor<R>* occ = nullptr) const {
    return velocity(g, x, t, cond, occ, &instr);
  }
};

using FlowModelF = FlowModel<float>;
using FlowModelD = FlowModel<double>;

// Closed-form parameter counts derived from the config (used by tests and
// checkpoint sanity checks).
int64_t expected_base_param_count(const ModelConfig& cfg);
int64_t expected_control_param_count(const ModelConfig& cfg);

}  // namespace voxsteer
