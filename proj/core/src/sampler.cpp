#include "voxsteer/sampler.hpp"

#include <chrono>
#include <cmath>

#include "voxsteer/checkpoint.hpp"

namespace voxsteer {

template <class R>
std::vector<R> euler_sample_from(const VelocityField<R>& velocity, std::vector<R> eps, int steps) {
  if (steps < 1) throw ContractError("euler_sample: steps must be >= 1");
  int64_t n = int64_t(eps.size());
  std::vector<R> x = eps;
  std::vector<R> mean(eps.size(), R(0));
  for (int k = steps; k >= 1; --k) {
    double t_k = double(k) / double(steps);
    std::vector<R> v = velocity(x, t_k);
    if (int64_t(v.size()) != n)
      throw ContractError("euler_sample: velocity changed the state size");
    for (R val : v)
      if (!std::isfinite(double(val)))
        throw NumericFault("euler_sample: non-finite velocity at step " + std::to_string(k));
    R taken = R(steps - k + 1);
    double t_next = double(k - 1) / double(steps);
    R scale = R(1.0 - t_next);
    for (int64_t i = 0; i < n; ++i) {
      mean[size_t(i)] += (v[size_t(i)] - mean[size_t(i)]) / taken;
      x[size_t(i)] = eps[size_t(i)] - scale * mean[size_t(i)];
    }
    for (R val : x)
      if (!std::isfinite(double(val)))
        throw NumericFault("euler_sample: non-finite state at step " + std::to_string(k));
  }
  return x;
}

template <class R>
std::vector<R> euler_sample(const VelocityField<R>& velocity, int64_t numel, int steps, Rng& rng) {
  std::vector<R> eps(static_cast<size_t>(numel));
  rng.fill_normal(eps.data(), eps.size());
  return euler_sample_from(velocity, std::move(eps), steps);
}

template std::vector<float> euler_sample_from(const VelocityField<float>&, std::vector<float>, int);
template std::vector<double> euler_sample_from(const VelocityField<double>&, std::vector<double>, int);
template std::vector<float> euler_sample(const VelocityField<float>&, int64_t, int, Rng&);
template std::vector<double> euler_sample(const VelocityField<double>&, int64_t, int, Rng&);

template <class R>
std::vector<R> cfg_velocity(const std::vector<R>& v_uncond, const std::vector<R>& v_cond, double s) {
  if (v_uncond.size() != v_cond.size())
    throw ContractError("cfg_velocity: operand sizes differ (" + std::to_string(v_uncond.size()) +
                        " vs " + std::to_string(v_cond.size()) + ")");
  if (s < 0.0) throw ContractError("cfg_velocity: scale must be >= 0");
  if (s == 0.0) return v_uncond;
  if (s == 1.0) return v_cond;
  std::vector<R> out(v_uncond.size());
  R sr = R(s);
  for (size_t i = 0; i < out.size(); ++i)
    out[i] = v_uncond[i] + sr * (v_cond[i] - v_uncond[i]);
  return out;
}

template std::vector<float> cfg_velocity(const std::vector<float>&, const std::vector<float>&, double);
template std::vector<double> cfg_velocity(const std::vector<double>&, const std::vector<double>&, double);

DecodedGeometry decode_geometry(const std::vector<float>& latent_tokens, int g, int p) {
  DecodedGeometry out;
  out.occ = latent_occupancy(latent_tokens, g, p);
  out.empty = true;
  for (uint8_t v : out.occ)
    if (v) {
      out.empty = false;
      break;
    }
  return out;
}

FlowModelF load_flow_model(const std::string& path, const ModelConfig& cfg) {
  CheckpointData ckpt = load_checkpoint(path);
  if (ckpt.config_hash != cfg.hash())
    throw MissingPrerequisiteError("checkpoint '" + path + "' was trained with a different config");
  bool with_control = false;
  for (const auto& [name, t] : ckpt.tensors)
    if (name.rfind("ctrl.", 0) == 0) {
      with_control = true;
      break;
    }
  FlowModelF model = FlowModelF::init_base(cfg, 0);
  if (with_control) model.init_control(0);
  auto extra = load_into_store(ckpt, model.params);
  (void)extra;
  model.params.set_trainable(ParamSet::Base, false);
  model.params.set_trainable(ParamSet::Control, false);
  return model;
}

namespace {

// One batched velocity evaluation (batch of one) as a plain vector function.
std::vector<float> eval_velocity(const FlowModelF& model, const std::vector<float>& x, double t,
                                 const TensorF& cond, const TensorF* occ,
                                 const InstrTokens* instr) {
  Graph<float> g;
  TensorF xt = TensorF::from({1, model.cfg.tokens(), model.cfg.latent_channels()},
                             std::vector<float>(x));
  TensorF v;
  if (instr) {
    std::vector<InstrTokens> batch{*instr};
    v = model.velocity_steered(g, xt, {t}, cond, batch, occ);
  } else {
    v = model.velocity_base(g, xt, {t}, cond, occ);
  }
  return *v.data;
}

}  // namespace

VoxelAsset edit_asset(const ViewImage& cond, const EditInstruction& instr, const EditModels& models,
                      const SamplerConfig& cfg, StageTimings* timings) {
  if (!models.geometry || !models.texture)
    throw MissingPrerequisiteError("edit_asset: geometry and texture checkpoints are required");
  const FlowModelF& geo = *models.geometry;
  const FlowModelF& tex = *models.texture;
  if (geo.cfg.stage != Stage::Geometry || tex.cfg.stage != Stage::Texture)
    throw ContractError("edit_asset: model stages are mislabeled");
  if (geo.cfg.grid != tex.cfg.grid) throw ContractError("edit_asset: model grids differ");
  if (cfg.steps < 1) throw ContractError("edit_asset: steps must be >= 1");

  int g = geo.cfg.grid;
  bool is_geometry_edit =
      instr.category == EditCategory::Addition || instr.category == EditCategory::Removal;
  bool is_texture_edit = instr.category == EditCategory::Texture;

  bool steer_stage1 = geo.has_control && cfg.steer_geometry &&
                      (is_geometry_edit || (cfg.steer_all && instr.category != EditCategory::Null));
  bool steer_stage2 = tex.has_control && cfg.steer_texture &&
                      (is_texture_edit || (cfg.steer_all && instr.category != EditCategory::Null));

  InstrTokens tokens = encode_instruction(instr);

  TensorF cond_geo = TensorF::from({1, geo.cfg.cond_tokens(), int64_t(geo.cfg.cond_channels())},
                                   image_tokens(cond, geo.cfg.image_patch));
  TensorF cond_tex = TensorF::from({1, tex.cfg.cond_tokens(), int64_t(tex.cfg.cond_channels())},
                                   image_tokens(cond, tex.cfg.image_patch));

  // --- stage 1: geometry ----------------------------------------------------
  auto t0 = std::chrono::steady_clock::now();
  VelocityField<float> field_geo = [&](const std::vector<float>& x, double t) {
    if (!steer_stage1) return eval_velocity(geo, x, t, cond_geo, nullptr, nullptr);
    if (cfg.cfg_geometry && cfg.cfg_scale != 1.0) {
      auto vc = eval_velocity(geo, x, t, cond_geo, nullptr, &tokens);
      auto vu = eval_velocity(geo, x, t, cond_geo, nullptr, nullptr);
      return cfg_velocity(vu, vc, cfg.cfg_scale);
    }
    return eval_velocity(geo, x, t, cond_geo, nullptr, &tokens);
  };
  Rng rng_geo = Rng(cfg.seed).fork("sample").fork("geometry");
  std::vector<float> geo_latent =
      euler_sample(field_geo, geo.cfg.tokens() * geo.cfg.latent_channels(), cfg.steps, rng_geo);
  DecodedGeometry decoded = decode_geometry(geo_latent, g, geo.cfg.patch);
  auto t1 = std::chrono::steady_clock::now();
  if (timings) timings->geometry_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
  if (decoded.empty)
    throw DegenerateOutputError("edit_asset: generated geometry is empty");

  // --- stage 2: texture -------------------------------------------------------
  TensorF occ_tokens_t = TensorF::from({1, tex.cfg.tokens(), int64_t(tex.cfg.patch_volume())},
                                       occupancy_tokens(decoded.occ, g, tex.cfg.patch));
  VelocityField<float> field_tex = [&](const std::vector<float>& x, double t) {
    if (!steer_stage2) return eval_velocity(tex, x, t, cond_tex, &occ_tokens_t, nullptr);
    if (cfg.cfg_texture && cfg.cfg_scale != 1.0) {
      auto vc = eval_velocity(tex, x, t, cond_tex, &occ_tokens_t, &tokens);
      auto vu = eval_velocity(tex, x, t, cond_tex, &occ_tokens_t, nullptr);
      return cfg_velocity(vu, vc, cfg.cfg_scale);
    }
    return eval_velocity(tex, x, t, cond_tex, &occ_tokens_t, &tokens);
  };
  Rng rng_tex = Rng(cfg.seed).fork("sample").fork("texture");
  std::vector<float> tex_latent =
      euler_sample(field_tex, tex.cfg.tokens() * tex.cfg.latent_channels(), cfg.steps, rng_tex);
  auto t2 = std::chrono::steady_clock::now();
  if (timings) timings->texture_ms = std::chrono::duration<double, std::milli>(t2 - t1).count();

  VoxelAsset out;
  out.g = g;
  out.occ = decoded.occ;
  out.color = latent_colors(tex_latent, decoded.occ, g, tex.cfg.patch);
  return out;
}

}  // namespace voxsteer
