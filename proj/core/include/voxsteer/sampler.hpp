#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "voxsteer/flownet.hpp"
#include "voxsteer/rng.hpp"

namespace voxsteer {

struct SamplerConfig {
  int steps = 25;
  double cfg_scale = 3.0;
  bool steer_geometry = true;  // steer stage 1 for addition/removal instructions
  bool steer_texture = true;   // steer stage 2 for texture instructions
  bool steer_all = false;      // experimentation override: steer both stages for any edit
  bool cfg_geometry = false;   // CFG on the geometry stage (off by default)
  bool cfg_texture = true;
  uint64_t seed = 0;
};

template <class R>
using VelocityField = std::function<std::vector<R>(const std::vector<R>& x, double t)>;

// Euler integration of the rectified flow from x(1) = eps down to t = 0 on a
// uniform grid. The state is carried as x = eps - (1 - t) * mean(v seen so
// far), algebraically identical to x <- x - dt * v(x, t) but exact for
// constant fields in floating point.
template <class R>
std::vector<R> euler_sample(const VelocityField<R>& velocity, int64_t numel, int steps, Rng& rng);

// Same integrator from a caller-provided noise state (for reproducible tests).
template <class R>
std::vector<R> euler_sample_from(const VelocityField<R>& velocity, std::vector<R> eps, int steps);

// v_uncond + s * (v_cond - v_uncond); the s = 0 and s = 1 identities hold to
// exact floating-point equality.
template <class R>
std::vector<R> cfg_velocity(const std::vector<R>& v_uncond, const std::vector<R>& v_cond, double s);

struct DecodedGeometry {
  std::vector<uint8_t> occ;
  bool empty = false;
};

DecodedGeometry decode_geometry(const std::vector<float>& latent_tokens, int g, int p);

// Loads a checkpoint into an inference-only (frozen) model; the control branch
// is instantiated iff the checkpoint carries ctrl.* tensors.
FlowModelF load_flow_model(const std::string& path, const ModelConfig& cfg);

struct EditModels {
  const FlowModelF* geometry = nullptr;
  const FlowModelF* texture = nullptr;
};

struct StageTimings {
  double geometry_ms = 0.0;
  double texture_ms = 0.0;
};

// Full inference path: stage 1 samples occupancy (steered only for geometry
// edits), stage 2 samples colors conditioned on that occupancy (steered only
// for texture edits), with the plain base model as the CFG unconditional
// branch. Throws DegenerateOutputError when stage 1 produces no voxels.
VoxelAsset edit_asset(const ViewImage& cond, const EditInstruction& instr, const EditModels& models,
                      const SamplerConfig& cfg, StageTimings* timings = nullptr);

}  // namespace voxsteer
