#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "voxsteer/dataengine.hpp"
#include "voxsteer/flownet.hpp"
#include "voxsteer/param_store.hpp"
#include "voxsteer/rng.hpp"

namespace voxsteer {

enum class Phase : uint8_t { BasePretrain = 0, Sft = 1, Dpo = 2 };
const char* phase_name(Phase p);
Phase phase_from_name(const std::string& name);

struct TrainConfig {
  Phase phase = Phase::BasePretrain;
  Stage stage = Stage::Geometry;
  double lr = 0.0;        // 0 -> per-phase default
  int batch = 8;
  int accum = 1;
  double clip = 1.0;
  double ts_mean = 1.0;   // LogitNormal timestep mean
  double ts_std = 0.0;    // 0 -> per-stage default (geometry 1.8, texture 1.0)
  double p_uncond = -1.0; // -1 -> default (0.2 for texture SFT, else 0)
  double beta = 0.2;      // DPO
  double alpha = 1.0;     // DPO supervised-regularizer weight
  int steps = 500;
  uint64_t seed = 1;
  int val_every = 200;
  int ckpt_every = 0;     // 0: final checkpoint only
  bool deterministic = false;
  bool allow_geometry_dpo = false;
  int threads = 0;

  // Fills lr/ts_std/p_uncond defaults for the (phase, stage) pair.
  void finalize();
  std::string to_kv() const;
};

// t = sigmoid(z), z ~ Normal(mean, std^2); always in the open interval (0,1).
double sample_timestep(double mean, double std_dev, Rng& rng);

// x(t) = (1-t) x0 + t eps with exact endpoint identities.
template <class R>
std::vector<R> noise_latent(const std::vector<R>& x0, const std::vector<R>& eps, double t);

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

template <class R>
struct SftBatch {
  Tensor<R> x_t;     // (B, T, C)
  Tensor<R> target;  // eps - x0
  Tensor<R> cond;    // (B, Tc, Cc)
  Tensor<R> occ;     // (B, T, pv), texture stage
  Tensor<R> mask;    // (B, T, C) loss mask, texture stage
  std::vector<double> t;
  std::vector<InstrTokens> instr;
  bool steered = false;
};

template <class R>
Tensor<R> sft_loss(Graph<R>& g, const FlowModel<R>& model, const SftBatch<R>& batch);

template <class R>
struct DpoPairBatch {
  Tensor<R> x_pos, x_neg;  // clean latents (B, T, C)
  Tensor<R> eps;           // shared noise draw per pair
  Tensor<R> occ_pos, occ_neg;
  Tensor<R> mask_pos, mask_neg;
  Tensor<R> cond;
  std::vector<double> t;   // shared timestep per pair
  std::vector<InstrTokens> instr;
};

struct DpoTerms {
  double pre_sigmoid = 0.0;  // the value fed to sigmoid (beta applied)
  double e_pos = 0.0, e_neg = 0.0;
  double e_ref_pos = 0.0, e_ref_neg = 0.0;
};

template <class R>
struct DpoOut {
  Tensor<R> loss;
  std::vector<DpoTerms> pairs;
};

// -log sigmoid(-(beta/2) [(e+ - e-) - (e+_ref - e-_ref)]) + alpha * e+ with
// e the per-example mean squared velocity error; one shared (t, eps) draw per
// pair across all four evaluations. Gradients flow only through the policy.
template <class R>
DpoOut<R> dpo_loss(Graph<R>& g, const FlowModel<R>& policy, const FlowModel<R>& reference,
                   const DpoPairBatch<R>& batch, double beta, double alpha);

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

// Scales gradients so the global L2 norm is at most max_norm; returns the
// pre-clip norm.
double clip_gradients(GradMap<float>& grads, double max_norm);

struct AdamW {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  int64_t step_count = 0;
  std::map<std::string, std::vector<float>> m, v;

  void step(ParameterStore<float>& store, const GradMap<float>& grads);
  std::map<std::string, TensorF> state_tensors() const;
  void load_state(const std::map<std::string, TensorF>& extra, const ParameterStore<float>& store);
};

// ---------------------------------------------------------------------------
// Batch assembly from datasets
// ---------------------------------------------------------------------------

// Deterministic batch example selection for a given optimizer step.
std::vector<size_t> batch_indices(size_t pool, int count, uint64_t seed, int64_t step, int micro);

SftBatch<float> make_sft_batch(const Dataset& data, const std::vector<size_t>& pool,
                               const std::vector<size_t>& indices, const TrainConfig& cfg,
                               const ModelConfig& mcfg, int64_t step, int micro);

DpoPairBatch<float> make_dpo_batch(const Dataset& data, const std::vector<size_t>& pool,
                                   const std::vector<size_t>& indices, const TrainConfig& cfg,
                                   const ModelConfig& mcfg, int64_t step, int micro);

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TrainPaths {
  std::string dataset;
  std::string init_checkpoint;  // prerequisite (sft: base ckpt, dpo: sft ckpt)
  std::string out_dir;
  std::string run_name = "run";
};

struct TrainResult {
  std::string checkpoint;
  int64_t steps_done = 0;
  double first_loss = 0.0;
  double final_loss = 0.0;
  double final_val_loss = 0.0;
};

// Runs the configured phase: fresh base init for base-pretrain, control-branch
// SFT from a base checkpoint, DPO from an SFT checkpoint with a frozen
// reference copy. Emits metrics CSV rows (step, phase, stage, loss, grad_norm,
// lr, wall_ms) and VSCK checkpoints; resumes when given its own checkpoint.
TrainResult train_loop(TrainConfig cfg, const ModelConfig& mcfg, const TrainPaths& paths);

// Validation membership: ~5% of records by scene-seed hash.
bool is_validation_record(uint64_t scene_seed);

}  // namespace voxsteer
