#include "voxsteer/flownet.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

#include "voxsteer/rng.hpp"

namespace voxsteer {

const char* stage_name(Stage s) { return s == Stage::Geometry ? "geometry" : "texture"; }

Stage stage_from_name(const std::string& name) {
  if (name == "geometry") return Stage::Geometry;
  if (name == "texture") return Stage::Texture;
  throw BadArgsError("unknown stage '" + name + "'");
}

void ModelConfig::validate() const {
  if (grid < 2 || patch < 1 || grid % patch != 0)
    throw ContractError("model config: patch must divide grid");
  if (width < 1 || heads < 1 || width % heads != 0)
    throw ContractError("model config: width must be divisible by heads");
  if (blocks < 1) throw ContractError("model config: blocks must be >= 1");
  if (image_size < 1 || image_patch < 1 || image_size % image_patch != 0)
    throw ContractError("model config: image_patch must divide image_size");
  if (instr_vocab < 1 || instr_vocab > 65536 || instr_len < 1)
    throw ContractError("model config: bad instruction vocabulary");
}

std::string ModelConfig::to_kv() const {
  std::ostringstream os;
  os << "grid=" << grid << "\npatch=" << patch << "\nwidth=" << width << "\nheads=" << heads
     << "\nblocks=" << blocks << "\nimage_size=" << image_size << "\nimage_patch=" << image_patch
     << "\ninstr_vocab=" << instr_vocab << "\ninstr_len=" << instr_len
     << "\nstage=" << stage_name(stage) << "\ncond_stem=" << (cond_stem ? 1 : 0) << "\n";
  return os.str();
}

ModelConfig ModelConfig::from_kv(const std::string& text) {
  ModelConfig cfg;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    auto eq = line.find('=');
    if (eq == std::string::npos) throw BadArgsError("model config: bad line '" + line + "'");
    std::string key = line.substr(0, eq), value = line.substr(eq + 1);
    if (key == "grid") cfg.grid = std::stoi(value);
    else if (key == "patch") cfg.patch = std::stoi(value);
    else if (key == "width") cfg.width = std::stoi(value);
    else if (key == "heads") cfg.heads = std::stoi(value);
    else if (key == "blocks") cfg.blocks = std::stoi(value);
    else if (key == "image_size") cfg.image_size = std::stoi(value);
    else if (key == "image_patch") cfg.image_patch = std::stoi(value);
    else if (key == "instr_vocab") cfg.instr_vocab = std::stoi(value);
    else if (key == "instr_len") cfg.instr_len = std::stoi(value);
    else if (key == "stage") cfg.stage = stage_from_name(value);
    else if (key == "cond_stem") cfg.cond_stem = std::stoi(value) != 0;
    else throw BadArgsError("model config: unknown key '" + key + "'");
  }
  cfg.validate();
  return cfg;
}

uint64_t ModelConfig::hash() const { return detail::fnv1a64(to_kv()); }

// ---------------------------------------------------------------------------
// Latent transcoding
// ---------------------------------------------------------------------------

std::vector<float> patchify(const std::vector<float>& grid_channels, int channels, int g, int p) {
  int s = g / p;
  int64_t vol = int64_t(g) * g * g;
  if (int64_t(grid_channels.size()) != channels * vol)
    throw ContractError("patchify: data size does not match channels x grid");
  int64_t tokens = int64_t(s) * s * s;
  int pv = p * p * p;
  std::vector<float> out(size_t(tokens * channels * pv));
  for (int zb = 0; zb < s; ++zb)
    for (int yb = 0; yb < s; ++yb)
      for (int xb = 0; xb < s; ++xb) {
        int64_t tok = (int64_t(zb) * s + yb) * s + xb;
        for (int c = 0; c < channels; ++c)
          for (int dz = 0; dz < p; ++dz)
            for (int dy = 0; dy < p; ++dy)
              for (int dx = 0; dx < p; ++dx) {
                int64_t v = (int64_t(zb * p + dz) * g + (yb * p + dy)) * g + (xb * p + dx);
                int64_t ch = ((int64_t(c) * p + dz) * p + dy) * p + dx;
                out[size_t(tok * channels * pv + ch)] = grid_channels[size_t(c * vol + v)];
              }
      }
  return out;
}

std::vector<float> unpatchify(const std::vector<float>& tokens, int channels, int g, int p) {
  int s = g / p;
  int64_t vol = int64_t(g) * g * g;
  int pv = p * p * p;
  int64_t ntok = int64_t(s) * s * s;
  if (int64_t(tokens.size()) != ntok * channels * pv)
    throw ContractError("unpatchify: data size does not match token layout");
  std::vector<float> out(size_t(channels * vol));
  for (int zb = 0; zb < s; ++zb)
    for (int yb = 0; yb < s; ++yb)
      for (int xb = 0; xb < s; ++xb) {
        int64_t tok = (int64_t(zb) * s + yb) * s + xb;
        for (int c = 0; c < channels; ++c)
          for (int dz = 0; dz < p; ++dz)
            for (int dy = 0; dy < p; ++dy)
              for (int dx = 0; dx < p; ++dx) {
                int64_t v = (int64_t(zb * p + dz) * g + (yb * p + dy)) * g + (xb * p + dx);
                int64_t ch = ((int64_t(c) * p + dz) * p + dy) * p + dx;
                out[size_t(c * vol + v)] = tokens[size_t(tok * channels * pv + ch)];
              }
      }
  return out;
}

std::vector<float> geometry_latent(const std::vector<uint8_t>& occ, int g, int p) {
  std::vector<float> grid(occ.size());
  for (size_t i = 0; i < occ.size(); ++i) grid[i] = occ[i] ? 1.0f : -1.0f;
  return patchify(grid, 1, g, p);
}

std::vector<float> occupancy_tokens(const std::vector<uint8_t>& occ, int g, int p) {
  return geometry_latent(occ, g, p);
}

std::vector<float> texture_latent(const VoxelAsset& asset, int p) {
  int64_t vol = asset.voxels();
  std::vector<float> grid(size_t(3 * vol), 0.0f);
  for (int64_t v = 0; v < vol; ++v) {
    if (!asset.occ[size_t(v)]) continue;
    for (int c = 0; c < 3; ++c)
      grid[size_t(c * vol + v)] = 2.0f * asset.color[size_t(c * vol + v)] - 1.0f;
  }
  return patchify(grid, 3, asset.g, p);
}

std::vector<uint8_t> latent_occupancy(const std::vector<float>& tokens, int g, int p) {
  auto grid = unpatchify(tokens, 1, g, p);
  std::vector<uint8_t> occ(grid.size());
  for (size_t i = 0; i < grid.size(); ++i) occ[i] = grid[i] > 0.0f ? 1 : 0;
  return occ;
}

std::vector<float> latent_colors(const std::vector<float>& tokens, const std::vector<uint8_t>& occ,
                                 int g, int p) {
  auto grid = unpatchify(tokens, 3, g, p);
  int64_t vol = int64_t(g) * g * g;
  std::vector<float> colors(size_t(3 * vol), 0.0f);
  for (int64_t v = 0; v < vol; ++v) {
    if (!occ[size_t(v)]) continue;
    for (int c = 0; c < 3; ++c) {
      float x = 0.5f * (grid[size_t(c * vol + v)] + 1.0f);
      colors[size_t(c * vol + v)] = std::clamp(x, 0.0f, 1.0f);
    }
  }
  return colors;
}

std::vector<float> image_tokens(const ViewImage& img, int image_patch) {
  int w = img.w, ip = image_patch;
  if (w % ip != 0) throw ContractError("image_tokens: patch must divide image size");
  int s = w / ip;
  int64_t wh = int64_t(w) * w;
  std::vector<float> out(size_t(int64_t(s) * s * 3 * ip * ip));
  for (int rb = 0; rb < s; ++rb)
    for (int cb = 0; cb < s; ++cb) {
      int64_t tok = int64_t(rb) * s + cb;
      for (int c = 0; c < 3; ++c)
        for (int dr = 0; dr < ip; ++dr)
          for (int dc = 0; dc < ip; ++dc) {
            int64_t pix = int64_t(rb * ip + dr) * w + (cb * ip + dc);
            int64_t ch = (int64_t(c) * ip + dr) * ip + dc;
            out[size_t((tok * 3 * ip * ip) + ch)] = img.rgb[size_t(c * wh + pix)];
          }
    }
  return out;
}

// ---------------------------------------------------------------------------
// Parameter layout
// ---------------------------------------------------------------------------

namespace {

struct LinearName {
  std::string w, b;
};

LinearName lin(const std::string& prefix) { return {prefix + ".w", prefix + ".b"}; }

const char* kAdaNames[6] = {"sa_shift", "sa_scale", "sa_gate", "mlp_shift", "mlp_scale", "mlp_gate"};
const char* kAttnNames[4] = {"q", "k", "v", "o"};

template <class R>
void init_linear(ParameterStore<R>& store, const std::string& prefix, int64_t in, int64_t out,
                 ParamSet set, Rng root, double std_dev) {
  Tensor<R>& w = store.create(prefix + ".w", {in, out}, set);
  if (std_dev > 0) {
    Rng r = root.fork(prefix + ".w");
    for (int64_t i = 0; i < w.size(); ++i) (*w.data)[size_t(i)] = R(r.normal() * std_dev);
  }
  store.create(prefix + ".b", {out}, set);
}

template <class R>
void init_table(ParameterStore<R>& store, const std::string& name, Shape shape, ParamSet set,
                Rng root, double std_dev) {
  Tensor<R>& t = store.create(name, std::move(shape), set);
  if (std_dev > 0) {
    Rng r = root.fork(name);
    for (int64_t i = 0; i < t.size(); ++i) (*t.data)[size_t(i)] = R(r.normal() * std_dev);
  }
}

template <class R>
void init_block(ParameterStore<R>& store, const std::string& prefix, int d, ParamSet set, Rng root,
                bool with_instr_attn) {
  double attn_std = std::sqrt(2.0 / double(d + d));
  double mlp_std1 = std::sqrt(2.0 / double(d + 4 * d));
  for (const char* a : kAdaNames) init_linear(store, prefix + ".ada." + a, d, d, set, root, 0.0);
  for (const char* a : kAttnNames)
    init_linear(store, prefix + ".sa." + std::string(a), d, d, set, root, attn_std);
  for (const char* a : kAttnNames)
    init_linear(store, prefix + ".ca." + std::string(a), d, d, set, root, attn_std);
  if (with_instr_attn)
    for (const char* a : kAttnNames)
      init_linear(store, prefix + ".ia." + std::string(a), d, d, set, root, attn_std);
  init_linear(store, prefix + ".mlp.fc1", d, 4 * d, set, root, mlp_std1);
  init_linear(store, prefix + ".mlp.fc2", 4 * d, d, set, root, mlp_std1);
}

std::string blk(const std::string& stream, int i) {
  return stream + ".blk" + std::to_string(i);
}

}  // namespace

int64_t expected_base_param_count(const ModelConfig& cfg) {
  int64_t d = cfg.width;
  int64_t per_linear_dd = d * d + d;
  int64_t block = 6 * per_linear_dd                       // ada
                  + 8 * per_linear_dd                     // sa + ca
                  + (d * 4 * d + 4 * d) + (4 * d * d + d);  // mlp
  int64_t embed = cfg.input_channels() * d + d;
  int64_t pos = cfg.tokens() * d;
  int64_t cond = cfg.cond_channels() * d + d + cfg.cond_tokens() * d;
  int64_t time = 2 * per_linear_dd;
  int64_t head = d * cfg.latent_channels() + cfg.latent_channels();
  return embed + pos + cond + time + cfg.blocks * block + head;
}

int64_t expected_control_param_count(const ModelConfig& cfg) {
  int64_t d = cfg.width;
  int64_t per_linear_dd = d * d + d;
  int64_t block = 6 * per_linear_dd + 8 * per_linear_dd + (d * 4 * d + 4 * d) + (4 * d * d + d)
                  + 4 * per_linear_dd   // instruction cross-attention
                  + per_linear_dd;      // zero-initialized output projection
  int64_t instr = int64_t(cfg.instr_vocab) * d + int64_t(cfg.instr_len) * d;
  return cfg.blocks * block + instr;
}

template <class R>
FlowModel<R> FlowModel<R>::init_base(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  FlowModel<R> m;
  m.cfg = cfg;
  Rng root = Rng(seed).fork("init-base");
  int d = cfg.width;
  init_linear(m.params, "base.embed", cfg.input_channels(), d, ParamSet::Base, root,
              std::sqrt(2.0 / double(cfg.input_channels() + d)));
  init_table(m.params, "base.pos", {cfg.tokens(), d}, ParamSet::Base, root, 0.02);
  init_linear(m.params, "base.cond.embed", cfg.cond_channels(), d, ParamSet::Base, root,
              std::sqrt(2.0 / double(cfg.cond_channels() + d)));
  init_table(m.params, "base.cond.pos", {cfg.cond_tokens(), d}, ParamSet::Base, root, 0.02);
  init_linear(m.params, "base.time.fc1", d, d, ParamSet::Base, root, std::sqrt(2.0 / double(2 * d)));
  init_linear(m.params, "base.time.fc2", d, d, ParamSet::Base, root, std::sqrt(2.0 / double(2 * d)));
  for (int i = 0; i < cfg.blocks; ++i)
    init_block(m.params, blk("base", i), d, ParamSet::Base, root, false);
  init_linear(m.params, "base.head", d, cfg.latent_channels(), ParamSet::Base, root, 0.0);
  return m;
}

template <class R>
void FlowModel<R>::init_control(uint64_t seed) {
  if (has_control) throw ContractError("control branch already initialized");
  Rng root = Rng(seed).fork("init-control");
  int d = cfg.width;
  for (int i = 0; i < cfg.blocks; ++i) {
    init_block(params, blk("ctrl", i), d, ParamSet::Control, root, true);
    // copy the base block weights; instruction attention stays random and the
    // projection stays zero
    for (const char* a : kAdaNames) {
      for (const char* suffix : {".w", ".b"}) {
        auto src = blk("base", i) + ".ada." + a + suffix;
        auto dst = blk("ctrl", i) + ".ada." + a + suffix;
        *params.get(dst).data = *params.get(src).data;
      }
    }
    for (const char* group : {"sa", "ca"})
      for (const char* a : kAttnNames)
        for (const char* suffix : {".w", ".b"}) {
          auto src = blk("base", i) + "." + group + "." + a + suffix;
          auto dst = blk("ctrl", i) + "." + group + "." + a + suffix;
          *params.get(dst).data = *params.get(src).data;
        }
    for (const char* part : {"mlp.fc1", "mlp.fc2"})
      for (const char* suffix : {".w", ".b"}) {
        auto src = blk("base", i) + "." + part + suffix;
        auto dst = blk("ctrl", i) + "." + part + suffix;
        *params.get(dst).data = *params.get(src).data;
      }
    init_linear(params, blk("ctrl", i) + ".proj", d, d, ParamSet::Control, root, 0.0);
  }
  init_table(params, "ctrl.instr.emb", {cfg.instr_vocab, d}, ParamSet::Control, root, 0.02);
  init_table(params, "ctrl.instr.pos", {cfg.instr_len, d}, ParamSet::Control, root, 0.02);
  params.set_trainable(ParamSet::Base, false);
  params.set_trainable(ParamSet::Control, true);
  has_control = true;
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

namespace {

template <class R>
Tensor<R> sinusoidal_features(const std::vector<double>& t, int d) {
  int64_t b = int64_t(t.size());
  int half = d / 2;
  Tensor<R> out = Tensor<R>::zeros({b, d});
  for (int64_t i = 0; i < b; ++i) {
    double tv = t[size_t(i)] * 1000.0;
    for (int k = 0; k < half; ++k) {
      double freq = std::exp(-std::log(10000.0) * double(k) / double(half));
      (*out.data)[size_t(i * d + k)] = R(std::sin(tv * freq));
      (*out.data)[size_t(i * d + half + k)] = R(std::cos(tv * freq));
    }
    if (d % 2) (*out.data)[size_t(i * d + d - 1)] = R(1);
  }
  return out;
}

// Aligned stem features: for each voxel token column (xb, zb), the front-view
// pixel crop covering it, shared across the depth (yb) axis. Rebuilt from the
// condition tokens; constant with respect to the tape.
template <class R>
Tensor<R> stem_features(const Tensor<R>& cond, const ModelConfig& cfg) {
  int w = cfg.image_size, ip = cfg.image_patch;
  int it_side = w / ip;
  int s = cfg.tokens_per_side();
  int ap = cfg.stem_patch();
  int64_t batch = cond.shape[0];
  int64_t wh = int64_t(w) * w;
  int64_t a_ch = cfg.stem_channels();
  Tensor<R> out = Tensor<R>::zeros({batch, cfg.tokens(), a_ch});
  std::vector<R> pixels(size_t(3 * wh));
  for (int64_t b = 0; b < batch; ++b) {
    const R* ct = cond.ptr() + b * cfg.cond_tokens() * cfg.cond_channels();
    for (int rb = 0; rb < it_side; ++rb)
      for (int cb = 0; cb < it_side; ++cb) {
        const R* tok = ct + (int64_t(rb) * it_side + cb) * cfg.cond_channels();
        for (int c = 0; c < 3; ++c)
          for (int dr = 0; dr < ip; ++dr)
            for (int dc = 0; dc < ip; ++dc)
              pixels[size_t(c * wh + int64_t(rb * ip + dr) * w + (cb * ip + dc))] =
                  tok[(int64_t(c) * ip + dr) * ip + dc];
      }
    // repatch at the aligned crop size; image row blocks run top-down = z descending
    for (int zb = 0; zb < s; ++zb)
      for (int yb = 0; yb < s; ++yb)
        for (int xb = 0; xb < s; ++xb) {
          int64_t tok = (int64_t(zb) * s + yb) * s + xb;
          R* dst = out.ptr() + (b * cfg.tokens() + tok) * a_ch;
          int rb = s - 1 - zb;
          for (int c = 0; c < 3; ++c)
            for (int dr = 0; dr < ap; ++dr)
              for (int dc = 0; dc < ap; ++dc)
                dst[(int64_t(c) * ap + dr) * ap + dc] =
                    pixels[size_t(c * wh + int64_t(rb * ap + dr) * w + (xb * ap + dc))];
        }
  }
  return out;
}

template <class R>
struct ForwardCtx {
  Graph<R>* g;
  const ParameterStore<R>* params;
  int64_t batch;
  int heads;
  int head_dim;

  const Tensor<R>& p(const std::string& name) const { return params->get(name); }

  Tensor<R> linear(const Tensor<R>& x, const std::string& prefix) const {
    return g->add(g->matmul(x, p(prefix + ".w")), p(prefix + ".b"));
  }

  // (B, Tq, d) attending to (B, Tk, d)
  Tensor<R> attention(const Tensor<R>& q_in, const Tensor<R>& kv_in,
                      const std::string& prefix) const {
    int64_t tq = q_in.shape[1], tk = kv_in.shape[1];
    int64_t h = heads, dh = head_dim;
    auto split = [&](const Tensor<R>& x, int64_t tt) {
      return g->permute(g->reshape(x, {batch, tt, h, dh}), {0, 2, 1, 3});
    };
    Tensor<R> q = split(linear(q_in, prefix + ".q"), tq);
    Tensor<R> k = split(linear(kv_in, prefix + ".k"), tk);
    Tensor<R> v = split(linear(kv_in, prefix + ".v"), tk);
    Tensor<R> scores = g->mul_scalar(g->matmul(q, g->permute(k, {0, 1, 3, 2})),
                                     R(1.0 / std::sqrt(double(dh))));
    Tensor<R> attn = g->softmax(scores);
    Tensor<R> mixed = g->matmul(attn, v);  // (B,h,Tq,dh)
    Tensor<R> merged = g->reshape(g->permute(mixed, {0, 2, 1, 3}), {batch, tq, h * dh});
    return linear(merged, prefix + ".o");
  }

  Tensor<R> modulate(const Tensor<R>& x, const Tensor<R>& shift, const Tensor<R>& scale) const {
    Tensor<R> one = Tensor<R>::scalar_tensor(R(1));
    return g->add(g->mul(x, g->add(scale, one)), shift);
  }

  // DiT-style block; instr == nullptr gives the base block, otherwise the
  // control block with its extra instruction cross-attention.
  Tensor<R> block(const Tensor<R>& x_in, const Tensor<R>& cond, const Tensor<R>* instr,
                  const Tensor<R>& t_emb, const std::string& prefix) const {
    auto ada = [&](const char* name) {
      Tensor<R> a = linear(t_emb, prefix + ".ada." + name);  // (B, d)
      return g->reshape(a, {batch, 1, a.shape[1]});
    };
    Tensor<R> x = x_in;
    Tensor<R> u = modulate(g->layer_norm(x), ada("sa_shift"), ada("sa_scale"));
    x = g->add(x, g->mul(ada("sa_gate"), attention(u, u, prefix + ".sa")));
    x = g->add(x, attention(g->layer_norm(x), cond, prefix + ".ca"));
    if (instr) x = g->add(x, attention(g->layer_norm(x), *instr, prefix + ".ia"));
    Tensor<R> m = modulate(g->layer_norm(x), ada("mlp_shift"), ada("mlp_scale"));
    Tensor<R> mlp = linear(g->gelu(linear(m, prefix + ".mlp.fc1")), prefix + ".mlp.fc2");
    return g->add(x, g->mul(ada("mlp_gate"), mlp));
  }
};

}  // namespace

template <class R>
Tensor<R> FlowModel<R>::velocity(Graph<R>& g, const Tensor<R>& x, const std::vector<double>& t,
                                 const Tensor<R>& cond, const Tensor<R>* occ,
                                 const std::vector<InstrTokens>* instr) const {
  if (x.shape.size() != 3 || x.shape[1] != cfg.tokens() || x.shape[2] != cfg.latent_channels())
    throw ContractError("velocity: latent shape " + shape_str(x.shape) + " does not match config");
  int64_t batch = x.shape[0];
  for (double tv : t)
    if (!(tv >= 0.0 && tv <= 1.0))
      throw ContractError("velocity: timestep " + std::to_string(tv) + " outside [0,1]");
  if (int64_t(t.size()) != batch) throw ContractError("velocity: timestep count != batch");
  if (cond.shape.size() != 3 || cond.shape[0] != batch || cond.shape[1] != cfg.cond_tokens() ||
      cond.shape[2] != cfg.cond_channels())
    throw ContractError("velocity: condition shape " + shape_str(cond.shape) +
                        " does not match config");
  if (instr && !has_control)
    throw ContractError("velocity: control branch is not initialized");
  if (instr && int64_t(instr->size()) != batch)
    throw ContractError("velocity: instruction count != batch");

  Tensor<R> x_full = x;
  if (cfg.stage == Stage::Texture) {
    if (!occ) throw ContractError("velocity: texture stage requires occupancy tokens");
    if (occ->shape != Shape{batch, cfg.tokens(), int64_t(cfg.patch_volume())})
      throw ContractError("velocity: occupancy token shape mismatch");
    x_full = g.concat({x, *occ}, 2);
  }
  if (cfg.cond_stem) x_full = g.concat({x_full, stem_features(cond, cfg)}, 2);

  ForwardCtx<R> ctx{&g, &params, batch, cfg.heads, cfg.head_dim()};

  Tensor<R> h = g.add(ctx.linear(x_full, "base.embed"), params.get("base.pos"));
  Tensor<R> cond_e = g.add(ctx.linear(cond, "base.cond.embed"), params.get("base.cond.pos"));
  Tensor<R> t_emb = ctx.linear(
      g.gelu(ctx.linear(sinusoidal_features<R>(t, cfg.width), "base.time.fc1")), "base.time.fc2");

  Tensor<R> instr_e;
  if (instr) {
    std::vector<int64_t> ids;
    ids.reserve(size_t(batch) * size_t(cfg.instr_len));
    for (const auto& tokens : *instr)
      for (uint16_t tok : tokens) {
        if (int(tok) >= cfg.instr_vocab)
          throw ContractError("velocity: instruction token outside vocabulary");
        ids.push_back(int64_t(tok));
      }
    Tensor<R> emb = g.embedding_lookup(params.get("ctrl.instr.emb"), ids);
    instr_e = g.add(g.reshape(emb, {batch, cfg.instr_len, cfg.width}),
                    params.get("ctrl.instr.pos"));
  }

  Tensor<R> hb = h;
  Tensor<R> hc = h;  // control stream starts from the same embedded input
  for (int i = 0; i < cfg.blocks; ++i) {
    hb = ctx.block(hb, cond_e, nullptr, t_emb, blk("base", i));
    if (instr) {
      hc = ctx.block(hc, cond_e, &instr_e, t_emb, blk("ctrl", i));
      Tensor<R> tap = ctx.linear(hc, blk("ctrl", i) + ".proj");
      hb = g.add(hb, tap);
    }
  }
  return ctx.linear(g.layer_norm(hb), "base.head");
}

template struct FlowModel<float>;
template struct FlowModel<double>;

}  // namespace voxsteer
