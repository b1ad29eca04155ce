#include "voxsteer/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "voxsteer/checkpoint.hpp"

namespace voxsteer {

const char* phase_name(Phase p) {
  switch (p) {
    case Phase::BasePretrain: return "base-pretrain";
    case Phase::Sft: return "sft";
    case Phase::Dpo: return "dpo";
  }
  return "?";
}

Phase phase_from_name(const std::string& name) {
  if (name == "base-pretrain") return Phase::BasePretrain;
  if (name == "sft") return Phase::Sft;
  if (name == "dpo") return Phase::Dpo;
  throw BadArgsError("unknown phase '" + name + "'");
}

void TrainConfig::finalize() {
  if (lr <= 0.0) {
    switch (phase) {
      case Phase::BasePretrain: lr = 1e-3; break;  // scratch training needs more than the
      case Phase::Sft: lr = stage == Stage::Geometry ? 2e-5 : 5e-5; break;  // finetune rates
      case Phase::Dpo: lr = 1e-6; break;
    }
  }
  if (ts_std <= 0.0) ts_std = (stage == Stage::Geometry && phase != Phase::Dpo) ? 1.8 : 1.0;
  if (p_uncond < 0.0) p_uncond = (phase == Phase::Sft && stage == Stage::Texture) ? 0.2 : 0.0;
  if (p_uncond >= 1.0) throw BadArgsError("p_uncond must be in [0,1)");
  if (batch < 1 || accum < 1 || steps < 1) throw BadArgsError("batch/accum/steps must be >= 1");
  if (phase == Phase::Dpo && beta <= 0.0) throw BadArgsError("dpo requires beta > 0");
}

std::string TrainConfig::to_kv() const {
  std::ostringstream os;
  os << "phase=" << phase_name(phase) << "\nstage=" << stage_name(stage) << "\nlr=" << lr
     << "\nbatch=" << batch << "\naccum=" << accum << "\nclip=" << clip << "\nts_mean=" << ts_mean
     << "\nts_std=" << ts_std << "\np_uncond=" << p_uncond << "\nbeta=" << beta
     << "\nalpha=" << alpha << "\nsteps=" << steps << "\nseed=" << seed << "\n";
  return os.str();
}

double sample_timestep(double mean, double std_dev, Rng& rng) {
  if (std_dev <= 0.0) throw ContractError("sample_timestep: std must be > 0");
  double z = mean + std_dev * rng.normal();
  return 1.0 / (1.0 + std::exp(-z));
}

template <class R>
std::vector<R> noise_latent(const std::vector<R>& x0, const std::vector<R>& eps, double t) {
  if (x0.size() != eps.size()) throw ContractError("noise_latent: shape mismatch");
  if (!(t >= 0.0 && t <= 1.0)) throw ContractError("noise_latent: t outside [0,1]");
  if (t == 0.0) return x0;
  if (t == 1.0) return eps;
  std::vector<R> out(x0.size());
  R a = R(1.0 - t), b = R(t);
  for (size_t i = 0; i < x0.size(); ++i) out[i] = a * x0[i] + b * eps[i];
  return out;
}

template std::vector<float> noise_latent(const std::vector<float>&, const std::vector<float>&, double);
template std::vector<double> noise_latent(const std::vector<double>&, const std::vector<double>&, double);

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

template <class R>
Tensor<R> sft_loss(Graph<R>& g, const FlowModel<R>& model, const SftBatch<R>& batch) {
  const Tensor<R>* occ = model.cfg.stage == Stage::Texture ? &batch.occ : nullptr;
  Tensor<R> v = batch.steered
                    ? model.velocity_steered(g, batch.x_t, batch.t, batch.cond, batch.instr, occ)
                    : model.velocity_base(g, batch.x_t, batch.t, batch.cond, occ);
  Tensor<R> sq = g.square(g.sub(v, batch.target));
  if (model.cfg.stage == Stage::Texture) return g.reduce_mean(g.masked_select(sq, batch.mask));
  return g.reduce_mean(sq);
}

template Tensor<float> sft_loss(Graph<float>&, const FlowModel<float>&, const SftBatch<float>&);
template Tensor<double> sft_loss(Graph<double>&, const FlowModel<double>&, const SftBatch<double>&);

namespace {

// Constant (non-grad) tensor holding x(t) for each pair.
template <class R>
Tensor<R> noised_batch(const Tensor<R>& x, const Tensor<R>& eps, const std::vector<double>& t) {
  Tensor<R> out = Tensor<R>::zeros(x.shape);
  int64_t b = x.shape[0];
  int64_t stride = x.size() / b;
  for (int64_t i = 0; i < b; ++i) {
    R a = R(1.0 - t[size_t(i)]), bb = R(t[size_t(i)]);
    const R* xp = x.ptr() + i * stride;
    const R* ep = eps.ptr() + i * stride;
    R* op = out.ptr() + i * stride;
    if (t[size_t(i)] == 0.0)
      std::copy(xp, xp + stride, op);
    else if (t[size_t(i)] == 1.0)
      std::copy(ep, ep + stride, op);
    else
      for (int64_t j = 0; j < stride; ++j) op[j] = a * xp[j] + bb * ep[j];
  }
  return out;
}

// Mask selecting pair `row` only (elementwise AND with the example mask).
template <class R>
Tensor<R> row_mask(const Tensor<R>& mask, int64_t row) {
  Tensor<R> out = Tensor<R>::zeros(mask.shape);
  int64_t b = mask.shape[0];
  int64_t stride = mask.size() / b;
  std::copy(mask.ptr() + row * stride, mask.ptr() + (row + 1) * stride, out.ptr() + row * stride);
  return out;
}

}  // namespace

template <class R>
DpoOut<R> dpo_loss(Graph<R>& g, const FlowModel<R>& policy, const FlowModel<R>& reference,
                   const DpoPairBatch<R>& batch, double beta, double alpha) {
  if (!reference.has_control || !policy.has_control)
    throw ContractError("dpo_loss: both policy and reference need a control branch");
  for (const auto& name : reference.params.names())
    if (reference.params.trainable(name))
      throw ContractError("dpo_loss: reference model must be frozen");
  int64_t b = batch.x_pos.shape[0];
  bool texture = policy.cfg.stage == Stage::Texture;

  Tensor<R> xt_pos = noised_batch(batch.x_pos, batch.eps, batch.t);
  Tensor<R> xt_neg = noised_batch(batch.x_neg, batch.eps, batch.t);
  Tensor<R> tgt_pos = g.sub(batch.eps, batch.x_pos);
  Tensor<R> tgt_neg = g.sub(batch.eps, batch.x_neg);

  const Tensor<R>* occ_pos = texture ? &batch.occ_pos : nullptr;
  const Tensor<R>* occ_neg = texture ? &batch.occ_neg : nullptr;

  Tensor<R> sq_pos = g.square(
      g.sub(policy.velocity_steered(g, xt_pos, batch.t, batch.cond, batch.instr, occ_pos), tgt_pos));
  Tensor<R> sq_neg = g.square(
      g.sub(policy.velocity_steered(g, xt_neg, batch.t, batch.cond, batch.instr, occ_neg), tgt_neg));
  Tensor<R> sq_ref_pos = g.square(g.sub(
      reference.velocity_steered(g, xt_pos, batch.t, batch.cond, batch.instr, occ_pos), tgt_pos));
  Tensor<R> sq_ref_neg = g.square(g.sub(
      reference.velocity_steered(g, xt_neg, batch.t, batch.cond, batch.instr, occ_neg), tgt_neg));

  Tensor<R> ones = Tensor<R>::full(batch.x_pos.shape, R(1));
  const Tensor<R>& mask_pos = texture ? batch.mask_pos : ones;
  const Tensor<R>& mask_neg = texture ? batch.mask_neg : ones;

  DpoOut<R> out;
  Tensor<R> total;
  for (int64_t p = 0; p < b; ++p) {
    Tensor<R> e_pos = g.reduce_mean(g.masked_select(sq_pos, row_mask(mask_pos, p)));
    Tensor<R> e_neg = g.reduce_mean(g.masked_select(sq_neg, row_mask(mask_neg, p)));
    R er_pos = g.reduce_mean(g.masked_select(sq_ref_pos, row_mask(mask_pos, p))).scalar();
    R er_neg = g.reduce_mean(g.masked_select(sq_ref_neg, row_mask(mask_neg, p))).scalar();

    Tensor<R> margin = g.sub(g.sub(e_pos, e_neg), Tensor<R>::scalar_tensor(R(er_pos - er_neg)));
    Tensor<R> pre = g.mul_scalar(margin, R(-beta / 2.0));
    Tensor<R> pair_loss = g.mul_scalar(g.log_sigmoid(pre), R(-1));
    Tensor<R> with_reg = g.add(pair_loss, g.mul_scalar(e_pos, R(alpha)));
    total = p == 0 ? with_reg : g.add(total, with_reg);

    DpoTerms terms;
    terms.e_pos = double(e_pos.scalar());
    terms.e_neg = double(e_neg.scalar());
    terms.e_ref_pos = double(er_pos);
    terms.e_ref_neg = double(er_neg);
    terms.pre_sigmoid = double(pre.scalar());
    out.pairs.push_back(terms);
  }
  out.loss = g.mul_scalar(total, R(1.0 / double(b)));
  return out;
}

template DpoOut<float> dpo_loss(Graph<float>&, const FlowModel<float>&, const FlowModel<float>&,
                                const DpoPairBatch<float>&, double, double);
template DpoOut<double> dpo_loss(Graph<double>&, const FlowModel<double>&, const FlowModel<double>&,
                                 const DpoPairBatch<double>&, double, double);

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

double clip_gradients(GradMap<float>& grads, double max_norm) {
  if (max_norm <= 0.0) throw ContractError("clip_gradients: max_norm must be > 0");
  double sq = 0.0;
  for (const auto& [name, g] : grads)
    for (float v : *g.data) sq += double(v) * double(v);
  double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    float scale = float(max_norm / norm);
    for (auto& [name, g] : grads)
      for (float& v : *g.data) v *= scale;
  }
  return norm;
}

void AdamW::step(ParameterStore<float>& store, const GradMap<float>& grads) {
  ++step_count;
  double bc1 = 1.0 - std::pow(beta1, double(step_count));
  double bc2 = 1.0 - std::pow(beta2, double(step_count));
  for (const auto& [name, g] : grads) {
    TensorF& p = store.get(name);
    if (!p.requires_grad) continue;
    auto& mv = m[name];
    auto& vv = v[name];
    if (mv.empty()) mv.assign(size_t(p.size()), 0.0f);
    if (vv.empty()) vv.assign(size_t(p.size()), 0.0f);
    float* pw = p.ptr();
    const float* gw = g.ptr();
    for (int64_t i = 0; i < p.size(); ++i) {
      double gi = double(gw[i]);
      double mi = beta1 * double(mv[size_t(i)]) + (1.0 - beta1) * gi;
      double vi = beta2 * double(vv[size_t(i)]) + (1.0 - beta2) * gi * gi;
      mv[size_t(i)] = float(mi);
      vv[size_t(i)] = float(vi);
      double update = (mi / bc1) / (std::sqrt(vi / bc2) + eps) + weight_decay * double(pw[i]);
      pw[i] = float(double(pw[i]) - lr * update);
    }
  }
}

std::map<std::string, TensorF> AdamW::state_tensors() const {
  std::map<std::string, TensorF> out;
  for (const auto& [name, data] : m)
    out.emplace("opt.m." + name, TensorF::from({int64_t(data.size())}, data));
  for (const auto& [name, data] : v)
    out.emplace("opt.v." + name, TensorF::from({int64_t(data.size())}, data));
  out.emplace("opt.step", TensorF::scalar_tensor(float(step_count)));
  return out;
}

void AdamW::load_state(const std::map<std::string, TensorF>& extra,
                       const ParameterStore<float>& store) {
  m.clear();
  v.clear();
  step_count = 0;
  auto it = extra.find("opt.step");
  if (it != extra.end()) step_count = int64_t(std::llround(double(it->second.scalar())));
  for (const auto& [key, t] : extra) {
    if (key.rfind("opt.m.", 0) == 0) {
      std::string name = key.substr(6);
      if (store.has(name)) m[name] = *t.data;
    } else if (key.rfind("opt.v.", 0) == 0) {
      std::string name = key.substr(6);
      if (store.has(name)) v[name] = *t.data;
    }
  }
}

// ---------------------------------------------------------------------------
// Batch assembly
// ---------------------------------------------------------------------------

std::vector<size_t> batch_indices(size_t pool, int count, uint64_t seed, int64_t step, int micro) {
  if (pool == 0) throw ContractError("batch_indices: empty pool");
  Rng rng = Rng(seed).fork("batch").fork(uint64_t(step)).fork(uint64_t(micro));
  std::vector<size_t> out(static_cast<size_t>(count));
  for (auto& i : out) i = size_t(rng.next_u64() % pool);
  return out;
}

bool is_validation_record(uint64_t scene_seed) {
  uint64_t s = scene_seed;
  return detail::splitmix64(s) % 20 == 0;
}

namespace {

struct ExampleTensors {
  std::vector<float> x0, occ, mask, cond;
};

ExampleTensors example_tensors(const StoredRecord& rec, Phase phase, Stage stage,
                               const ModelConfig& mcfg) {
  ExampleTensors out;
  const VoxelAsset& asset = phase == Phase::BasePretrain ? rec.source : rec.edited;
  int g = asset.g, p = mcfg.patch;
  if (stage == Stage::Geometry) {
    out.x0 = geometry_latent(asset.occ, g, p);
  } else {
    out.x0 = texture_latent(asset, p);
    out.occ = occupancy_tokens(asset.occ, g, p);
    int64_t vol = asset.voxels();
    std::vector<float> mask_grid(size_t(3 * vol), 0.0f);
    for (int64_t v = 0; v < vol; ++v)
      if (asset.occ[size_t(v)])
        for (int c = 0; c < 3; ++c) mask_grid[size_t(c * vol + v)] = 1.0f;
    out.mask = patchify(mask_grid, 3, g, p);
  }
  out.cond = image_tokens(rec.cond, mcfg.image_patch);
  return out;
}

template <class F>
TensorF stack_rows(int64_t b, Shape row_shape, F fill) {
  Shape shape = row_shape;
  shape.insert(shape.begin(), b);
  TensorF out = TensorF::zeros(shape);
  int64_t stride = out.size() / b;
  for (int64_t i = 0; i < b; ++i) fill(i, out.ptr() + i * stride);
  return out;
}

}  // namespace

SftBatch<float> make_sft_batch(const Dataset& data, const std::vector<size_t>& pool,
                               const std::vector<size_t>& indices, const TrainConfig& cfg,
                               const ModelConfig& mcfg, int64_t step, int micro) {
  int64_t b = int64_t(indices.size());
  int64_t tokens = mcfg.tokens();
  int64_t latent_c = mcfg.latent_channels();
  SftBatch<float> batch;
  batch.steered = cfg.phase == Phase::Sft;
  batch.t.resize(size_t(b));
  batch.instr.assign(size_t(b), kNullTokens);

  // p_uncond applies to texture SFT only; the geometry model trains without CFG
  double p_uncond =
      (cfg.phase == Phase::Sft && cfg.stage == Stage::Texture) ? cfg.p_uncond : 0.0;

  std::vector<ExampleTensors> ex(static_cast<size_t>(b));
  std::vector<std::vector<float>> eps(static_cast<size_t>(b)), xt(static_cast<size_t>(b));
  for (int64_t i = 0; i < b; ++i) {
    const StoredRecord& rec = data.records[pool[indices[size_t(i)]]];
    ex[size_t(i)] = example_tensors(rec, cfg.phase, cfg.stage, mcfg);
    Rng rng = Rng(cfg.seed).fork("noise").fork(uint64_t(step)).fork(uint64_t(micro)).fork(uint64_t(i));
    batch.t[size_t(i)] = sample_timestep(cfg.ts_mean, cfg.ts_std, rng);
    eps[size_t(i)].resize(ex[size_t(i)].x0.size());
    rng.fill_normal(eps[size_t(i)].data(), eps[size_t(i)].size());
    xt[size_t(i)] = noise_latent(ex[size_t(i)].x0, eps[size_t(i)], batch.t[size_t(i)]);
    if (batch.steered) {
      batch.instr[size_t(i)] = rec.tokens;
      if (p_uncond > 0.0 && rng.uniform() < p_uncond) batch.instr[size_t(i)] = kNullTokens;
    }
  }

  batch.x_t = stack_rows(b, {tokens, latent_c}, [&](int64_t i, float* dst) {
    std::copy(xt[size_t(i)].begin(), xt[size_t(i)].end(), dst);
  });
  batch.target = stack_rows(b, {tokens, latent_c}, [&](int64_t i, float* dst) {
    for (size_t j = 0; j < eps[size_t(i)].size(); ++j)
      dst[j] = eps[size_t(i)][j] - ex[size_t(i)].x0[j];
  });
  batch.cond = stack_rows(b, {mcfg.cond_tokens(), int64_t(mcfg.cond_channels())},
                          [&](int64_t i, float* dst) {
                            std::copy(ex[size_t(i)].cond.begin(), ex[size_t(i)].cond.end(), dst);
                          });
  if (cfg.stage == Stage::Texture) {
    batch.occ = stack_rows(b, {tokens, int64_t(mcfg.patch_volume())}, [&](int64_t i, float* dst) {
      std::copy(ex[size_t(i)].occ.begin(), ex[size_t(i)].occ.end(), dst);
    });
    batch.mask = stack_rows(b, {tokens, latent_c}, [&](int64_t i, float* dst) {
      std::copy(ex[size_t(i)].mask.begin(), ex[size_t(i)].mask.end(), dst);
    });
  }
  return batch;
}

DpoPairBatch<float> make_dpo_batch(const Dataset& data, const std::vector<size_t>& pool,
                                   const std::vector<size_t>& indices, const TrainConfig& cfg,
                                   const ModelConfig& mcfg, int64_t step, int micro) {
  int64_t b = int64_t(indices.size());
  int64_t tokens = mcfg.tokens();
  int64_t latent_c = mcfg.latent_channels();
  DpoPairBatch<float> batch;
  batch.t.resize(size_t(b));
  batch.instr.resize(size_t(b));

  std::vector<ExampleTensors> pos(static_cast<size_t>(b)), neg(static_cast<size_t>(b));
  std::vector<std::vector<float>> eps(static_cast<size_t>(b));
  for (int64_t i = 0; i < b; ++i) {
    const StoredRecord& rec = data.records[pool[indices[size_t(i)]]];
    pos[size_t(i)] = example_tensors(rec, Phase::Sft, cfg.stage, mcfg);           // edited asset
    neg[size_t(i)] = example_tensors(rec, Phase::BasePretrain, cfg.stage, mcfg);  // source asset
    if (pos[size_t(i)].x0 == neg[size_t(i)].x0)
      throw ContractError("dpo pair: positive and negative latents are identical");
    Rng rng = Rng(cfg.seed).fork("noise").fork(uint64_t(step)).fork(uint64_t(micro)).fork(uint64_t(i));
    batch.t[size_t(i)] = sample_timestep(cfg.ts_mean, cfg.ts_std, rng);
    eps[size_t(i)].resize(pos[size_t(i)].x0.size());
    rng.fill_normal(eps[size_t(i)].data(), eps[size_t(i)].size());
    batch.instr[size_t(i)] = rec.tokens;
  }

  auto stack = [&](auto getter) {
    return stack_rows(b, {tokens, latent_c},
                      [&](int64_t i, float* dst) { auto& v = getter(i); std::copy(v.begin(), v.end(), dst); });
  };
  batch.x_pos = stack([&](int64_t i) -> std::vector<float>& { return pos[size_t(i)].x0; });
  batch.x_neg = stack([&](int64_t i) -> std::vector<float>& { return neg[size_t(i)].x0; });
  batch.eps = stack([&](int64_t i) -> std::vector<float>& { return eps[size_t(i)]; });
  batch.cond = stack_rows(b, {mcfg.cond_tokens(), int64_t(mcfg.cond_channels())},
                          [&](int64_t i, float* dst) {
                            std::copy(pos[size_t(i)].cond.begin(), pos[size_t(i)].cond.end(), dst);
                          });
  if (cfg.stage == Stage::Texture) {
    auto stack_pv = [&](auto getter) {
      return stack_rows(b, {tokens, int64_t(mcfg.patch_volume())},
                        [&](int64_t i, float* dst) { auto& v = getter(i); std::copy(v.begin(), v.end(), dst); });
    };
    batch.occ_pos = stack_pv([&](int64_t i) -> std::vector<float>& { return pos[size_t(i)].occ; });
    batch.occ_neg = stack_pv([&](int64_t i) -> std::vector<float>& { return neg[size_t(i)].occ; });
    batch.mask_pos = stack([&](int64_t i) -> std::vector<float>& { return pos[size_t(i)].mask; });
    batch.mask_neg = stack([&](int64_t i) -> std::vector<float>& { return neg[size_t(i)].mask; });
  }
  return batch;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

namespace {

void accumulate_grads(GradMap<float>& into, const GradMap<float>& add) {
  for (const auto& [name, g] : add) {
    auto it = into.find(name);
    if (it == into.end()) {
      into.emplace(name, g.detached_copy());
    } else {
      float* dst = it->second.ptr();
      const float* src = g.ptr();
      for (int64_t i = 0; i < g.size(); ++i) dst[i] += src[i];
    }
  }
}

constexpr float kPhaseCode[3] = {0.0f, 1.0f, 2.0f};

std::string checkpoint_name(const TrainPaths& paths, const TrainConfig& cfg,
                            const std::string& tag) {
  return paths.out_dir + "/" + paths.run_name + "_" + phase_name(cfg.phase) + "_" +
         stage_name(cfg.stage) + "_" + tag + ".vsck";
}

}  // namespace

TrainResult train_loop(TrainConfig cfg, const ModelConfig& mcfg, const TrainPaths& paths) {
  cfg.finalize();
  mcfg.validate();
  if (mcfg.stage != cfg.stage)
    throw ContractError("train: model config stage does not match train stage");
  if (cfg.phase == Phase::Dpo && cfg.stage == Stage::Geometry && !cfg.allow_geometry_dpo)
    throw BadArgsError(
        "train: DPO on the geometry stage is disabled by default (texture edits are the DPO "
        "target); pass the override flag to force it");

  std::filesystem::create_directories(paths.out_dir);
  Dataset data = load_dataset(paths.dataset);
  if (data.grid != mcfg.grid)
    throw ContractError("train: dataset grid " + std::to_string(data.grid) +
                        " does not match model grid " + std::to_string(mcfg.grid));
  if (data.view != mcfg.image_size)
    throw ContractError("train: dataset view size does not match model image size");

  std::vector<size_t> train_pool, val_pool;
  for (size_t i = 0; i < data.records.size(); ++i) {
    if (is_validation_record(data.records[i].scene_seed)) val_pool.push_back(i);
    else train_pool.push_back(i);
  }
  if (train_pool.empty()) train_pool = val_pool;
  if (train_pool.empty()) throw MissingPrerequisiteError("train: dataset has no records");

  // --- model construction per phase -------------------------------------
  uint64_t init_seed = Rng(cfg.seed).fork("init").next_u64();
  FlowModelF model = FlowModelF::init_base(mcfg, init_seed);
  FlowModelF reference;  // dpo only
  AdamW opt;
  opt.lr = cfg.lr;
  int64_t start_step = 0;

  auto has_control_tensors = [](const CheckpointData& c) {
    for (const auto& [name, t] : c.tensors)
      if (name.rfind("ctrl.", 0) == 0) return true;
    return false;
  };

  if (cfg.phase == Phase::BasePretrain) {
    if (!paths.init_checkpoint.empty()) {
      CheckpointData ckpt = load_checkpoint(paths.init_checkpoint);
      if (ckpt.config_hash != mcfg.hash())
        throw MissingPrerequisiteError("train: checkpoint config hash mismatch");
      auto extra = load_into_store(ckpt, model.params);
      auto it = extra.find("meta.phase");
      if (it != extra.end() && it->second.scalar() == kPhaseCode[0]) {
        opt.load_state(extra, model.params);
        auto st = extra.find("meta.step");
        if (st != extra.end()) start_step = int64_t(std::llround(double(st->second.scalar())));
      }
    }
    model.params.set_trainable(ParamSet::Base, true);
  } else {
    if (paths.init_checkpoint.empty())
      throw MissingPrerequisiteError(std::string("train: phase '") + phase_name(cfg.phase) +
                                     "' requires an init checkpoint (missing prerequisite: " +
                                     (cfg.phase == Phase::Sft ? "base-pretrain" : "sft") +
                                     " checkpoint)");
    CheckpointData ckpt = load_checkpoint(paths.init_checkpoint);
    if (ckpt.config_hash != mcfg.hash())
      throw MissingPrerequisiteError("train: checkpoint config hash mismatch");
    bool ckpt_has_control = has_control_tensors(ckpt);
    if (cfg.phase == Phase::Dpo && !ckpt_has_control)
      throw MissingPrerequisiteError(
          "train: dpo requires the sft checkpoint (missing prerequisite: sft checkpoint with a "
          "control branch)");
    uint64_t ctrl_seed = Rng(cfg.seed).fork("init-control").next_u64();
    std::map<std::string, TensorF> extra;
    if (ckpt_has_control) {
      model.init_control(ctrl_seed);
      extra = load_into_store(ckpt, model.params);
    } else {
      // base checkpoint: load base weights first so init_control copies the
      // pretrained blocks into the control branch
      extra = load_into_store(ckpt, model.params);
      model.init_control(ctrl_seed);
    }
    auto it = extra.find("meta.phase");
    if (it != extra.end() && it->second.scalar() == kPhaseCode[int(cfg.phase)]) {
      opt.load_state(extra, model.params);
      auto st = extra.find("meta.step");
      if (st != extra.end()) start_step = int64_t(std::llround(double(st->second.scalar())));
    }
    model.params.set_trainable(ParamSet::Base, false);
    model.params.set_trainable(ParamSet::Control, true);

    if (cfg.phase == Phase::Dpo) {
      reference = FlowModelF::init_base(mcfg, init_seed);
      reference.init_control(Rng(cfg.seed).fork("init-control").next_u64());
      auto unused = load_into_store(ckpt, reference.params);
      (void)unused;
      reference.params.set_trainable(ParamSet::Base, false);
      reference.params.set_trainable(ParamSet::Control, false);
    }
  }

  // --- metrics stream -----------------------------------------------------
  std::string metrics_path = paths.out_dir + "/" + paths.run_name + "_metrics.csv";
  bool fresh_metrics = start_step == 0;
  std::ofstream metrics(metrics_path, fresh_metrics ? std::ios::trunc : std::ios::app);
  if (!metrics) throw IoError("train: cannot open metrics file " + metrics_path);
  if (fresh_metrics) metrics << "step,phase,stage,loss,grad_norm,lr,wall_ms\n";

  auto validation_loss = [&]() -> double {
    if (val_pool.empty()) return 0.0;
    size_t count = std::min<size_t>(val_pool.size(), 64);
    double total = 0.0;
    TrainConfig vcfg = cfg;
    vcfg.p_uncond = 0.0;
    for (size_t i = 0; i < count; ++i) {
      Graph<float> g;
      std::vector<size_t> one{i};
      // fixed noise per validation record, independent of the training step
      if (cfg.phase == Phase::Dpo) {
        auto batch = make_dpo_batch(data, val_pool, one, vcfg, mcfg, /*step=*/-1, int(i));
        total += double(dpo_loss(g, model, reference, batch, cfg.beta, cfg.alpha).loss.scalar());
      } else {
        auto batch = make_sft_batch(data, val_pool, one, vcfg, mcfg, /*step=*/-1, int(i));
        total += double(sft_loss(g, model, batch).scalar());
      }
    }
    return total / double(count);
  };

  TrainResult result;
  double last_val = 0.0;
  for (int64_t step = start_step; step < cfg.steps; ++step) {
    auto t0 = std::chrono::steady_clock::now();
    GradMap<float> grads;
    double loss_sum = 0.0;
    for (int micro = 0; micro < cfg.accum; ++micro) {
      auto idx = batch_indices(train_pool.size(), cfg.batch, cfg.seed, step, micro);
      Graph<float> g;
      Tensor<float> loss;
      if (cfg.phase == Phase::Dpo) {
        auto batch = make_dpo_batch(data, train_pool, idx, cfg, mcfg, step, micro);
        loss = dpo_loss(g, model, reference, batch, cfg.beta, cfg.alpha).loss;
      } else {
        auto batch = make_sft_batch(data, train_pool, idx, cfg, mcfg, step, micro);
        loss = sft_loss(g, model, batch);
      }
      double lv = double(loss.scalar());
      if (!std::isfinite(lv))
        throw NumericFault("train: non-finite loss at step " + std::to_string(step) + " micro " +
                           std::to_string(micro) + " (seed " + std::to_string(cfg.seed) + ")");
      loss_sum += lv;
      accumulate_grads(grads, backward(g, loss, model.params));
    }
    if (cfg.accum > 1) {
      float inv = 1.0f / float(cfg.accum);
      for (auto& [name, g2] : grads)
        for (float& v : *g2.data) v *= inv;
    }
    double grad_norm = clip_gradients(grads, cfg.clip);
    opt.step(model.params, grads);

    double loss_avg = loss_sum / cfg.accum;
    if (step == start_step) result.first_loss = loss_avg;
    result.final_loss = loss_avg;

    auto t1 = std::chrono::steady_clock::now();
    double wall_ms = cfg.deterministic
                         ? 0.0
                         : std::chrono::duration<double, std::milli>(t1 - t0).count();
    char line[256];
    std::snprintf(line, sizeof line, "%lld,%s,%s,%.9g,%.9g,%.9g,%.3f\n",
                  (long long)step, phase_name(cfg.phase), stage_name(cfg.stage), loss_avg,
                  grad_norm, cfg.lr, wall_ms);
    metrics << line;

    if (cfg.val_every > 0 && (step + 1) % cfg.val_every == 0) last_val = validation_loss();
    if (cfg.ckpt_every > 0 && (step + 1) % cfg.ckpt_every == 0 && step + 1 < cfg.steps) {
      auto tensors = store_tensors(model.params);
      for (auto& [k, t] : opt.state_tensors()) tensors.emplace(k, t);
      tensors.emplace("meta.step", TensorF::scalar_tensor(float(step + 1)));
      tensors.emplace("meta.phase", TensorF::scalar_tensor(kPhaseCode[int(cfg.phase)]));
      save_checkpoint(tensors, checkpoint_name(paths, cfg, "step" + std::to_string(step + 1)),
                      mcfg.hash(), cfg.seed);
    }
  }
  metrics.flush();

  result.steps_done = cfg.steps - start_step;
  result.final_val_loss = cfg.val_every > 0 ? (last_val != 0.0 ? last_val : validation_loss())
                                            : validation_loss();

  auto tensors = store_tensors(model.params);
  for (auto& [k, t] : opt.state_tensors()) tensors.emplace(k, t);
  tensors.emplace("meta.step", TensorF::scalar_tensor(float(cfg.steps)));
  tensors.emplace("meta.phase", TensorF::scalar_tensor(kPhaseCode[int(cfg.phase)]));
  std::string final_path = checkpoint_name(paths, cfg, "final");
  save_checkpoint(tensors, final_path, mcfg.hash(), cfg.seed);
  {
    std::ofstream cfgfile(final_path + ".config", std::ios::trunc);
    cfgfile << mcfg.to_kv() << cfg.to_kv();
  }
  result.checkpoint = final_path;
  return result;
}

}  // namespace voxsteer
