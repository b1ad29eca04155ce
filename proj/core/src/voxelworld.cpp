#include "voxsteer/voxelworld.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

namespace voxsteer {

const std::array<std::array<float, 3>, kPaletteSize>& palette() {
  static const std::array<std::array<float, 3>, kPaletteSize> kColors{{
      {0.90f, 0.15f, 0.15f},  // 0 red
      {0.15f, 0.75f, 0.20f},  // 1 green
      {0.20f, 0.35f, 0.95f},  // 2 blue
      {0.95f, 0.85f, 0.15f},  // 3 yellow
      {0.85f, 0.25f, 0.85f},  // 4 magenta
      {0.20f, 0.85f, 0.90f},  // 5 cyan
      {0.95f, 0.55f, 0.15f},  // 6 orange
      {0.45f, 0.45f, 0.50f},  // 7 gray
  }};
  return kColors;
}

const char* view_name(ViewDir v) {
  switch (v) {
    case ViewDir::Front: return "front";
    case ViewDir::Back: return "back";
    case ViewDir::Left: return "left";
    case ViewDir::Right: return "right";
    case ViewDir::Up: return "up";
    case ViewDir::Down: return "down";
  }
  return "?";
}

const char* category_name(EditCategory c) {
  switch (c) {
    case EditCategory::Null: return "null";
    case EditCategory::Addition: return "addition";
    case EditCategory::Removal: return "removal";
    case EditCategory::Texture: return "texture";
  }
  return "?";
}

bool Primitive::contains(float x, float y, float z) const {
  float dx = x - center[0], dy = y - center[1], dz = z - center[2];
  switch (kind) {
    case PrimKind::Box:
      return std::abs(dx) <= half[0] && std::abs(dy) <= half[1] && std::abs(dz) <= half[2];
    case PrimKind::Sphere:
      return dx * dx + dy * dy + dz * dz <= half[0] * half[0];
    case PrimKind::Cylinder:
      return dx * dx + dy * dy <= half[0] * half[0] && std::abs(dz) <= half[2];
  }
  return false;
}

const Primitive* SceneGraph::find_slot(int slot) const {
  for (const auto& p : parts)
    if (int(p.slot) == slot) return &p;
  return nullptr;
}

int64_t VoxelAsset::occupied_count() const {
  int64_t n = 0;
  for (uint8_t o : occ) n += o;
  return n;
}

namespace {

inline float cell_center(int i, int g) { return (float(i) + 0.5f) / float(g) - 0.5f; }

void validate_scene(const SceneGraph& scene) {
  if (scene.parts.empty() || scene.parts.size() > 6)
    throw ContractError("scene must have 1-6 primitives, has " +
                        std::to_string(scene.parts.size()));
  for (size_t i = 0; i < scene.parts.size(); ++i)
    for (size_t j = i + 1; j < scene.parts.size(); ++j)
      if (scene.parts[i].slot == scene.parts[j].slot)
        throw ContractError("scene has duplicate part slot " +
                            std::to_string(int(scene.parts[i].slot)));
}

}  // namespace

VoxelAsset build_asset(const SceneGraph& scene, int g) {
  validate_scene(scene);
  if (g < 2) throw ContractError("grid size must be >= 2");
  VoxelAsset a;
  a.g = g;
  int64_t n = a.voxels();
  a.occ.assign(size_t(n), 0);
  a.color.assign(size_t(3 * n), 0.0f);
  const auto& pal = palette();
  for (int iz = 0; iz < g; ++iz)
    for (int iy = 0; iy < g; ++iy)
      for (int ix = 0; ix < g; ++ix) {
        float x = cell_center(ix, g), y = cell_center(iy, g), z = cell_center(iz, g);
        int64_t v = (int64_t(iz) * g + iy) * g + ix;
        for (const auto& p : scene.parts) {  // later parts overwrite earlier
          if (!p.contains(x, y, z)) continue;
          a.occ[size_t(v)] = 1;
          for (int c = 0; c < 3; ++c) a.color[size_t(c * n + v)] = pal[p.color_id][size_t(c)];
        }
      }
  if (a.occupied_count() == 0)
    throw DegenerateOutputError("degenerate scene: no voxel is occupied");
  return a;
}

std::vector<uint8_t> part_voxels(const SceneGraph& scene, int slot, int g) {
  const Primitive* p = scene.find_slot(slot);
  if (!p) throw ContractError("part slot " + std::to_string(slot) + " not present in scene");
  int64_t n = int64_t(g) * g * g;
  std::vector<uint8_t> out(size_t(n), 0);
  for (int iz = 0; iz < g; ++iz)
    for (int iy = 0; iy < g; ++iy)
      for (int ix = 0; ix < g; ++ix)
        if (p->contains(cell_center(ix, g), cell_center(iy, g), cell_center(iz, g)))
          out[size_t((int64_t(iz) * g + iy) * g + ix)] = 1;
  return out;
}

SceneGraph apply_edit(const SceneGraph& scene, const EditInstruction& instr) {
  validate_scene(scene);
  SceneGraph out = scene;
  switch (instr.category) {
    case EditCategory::Removal: {
      auto it = std::find_if(out.parts.begin(), out.parts.end(),
                             [&](const Primitive& p) { return int(p.slot) == instr.target_slot; });
      if (it == out.parts.end())
        throw ContractError("removal: slot " + std::to_string(instr.target_slot) +
                            " not present in scene");
      out.parts.erase(it);
      return out;
    }
    case EditCategory::Texture: {
      auto it = std::find_if(out.parts.begin(), out.parts.end(),
                             [&](const Primitive& p) { return int(p.slot) == instr.target_slot; });
      if (it == out.parts.end())
        throw ContractError("texture: slot " + std::to_string(instr.target_slot) +
                            " not present in scene");
      if (instr.new_color < 0 || instr.new_color >= kPaletteSize)
        throw ContractError("texture: color id " + std::to_string(instr.new_color) +
                            " outside palette");
      it->color_id = uint8_t(instr.new_color);
      return out;
    }
    case EditCategory::Addition: {
      if (scene.has_slot(instr.target_slot))
        throw ContractError("addition: slot " + std::to_string(instr.target_slot) +
                            " already occupied");
      Primitive p = instr.payload;
      p.slot = uint8_t(instr.target_slot);
      out.parts.push_back(p);
      return out;
    }
    case EditCategory::Null:
      return out;
  }
  throw ContractError("apply_edit: invalid category");
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

namespace {

// Per-view basis: image u axis (columns), v axis (rows), and march axis. Each
// entry is (world axis, sign); rows run top to bottom.
struct ViewBasis {
  int u_axis, u_sign;
  int v_axis, v_sign;
  int m_axis, m_sign;  // march direction: +1 marches ascending indices
};

ViewBasis view_basis(ViewDir view) {
  switch (view) {
    case ViewDir::Front: return {0, +1, 2, -1, 1, +1};  // u=+x, v=-z, march +y
    case ViewDir::Back: return {0, -1, 2, -1, 1, -1};
    case ViewDir::Left: return {1, -1, 2, -1, 0, +1};   // camera on -x
    case ViewDir::Right: return {1, +1, 2, -1, 0, -1};
    case ViewDir::Up: return {0, +1, 1, +1, 2, -1};     // camera above, v=+y rows
    case ViewDir::Down: return {0, -1, 1, +1, 2, +1};
  }
  throw ContractError("render: invalid view");
}

inline int axis_index(int coord, int sign, int g) { return sign > 0 ? coord : g - 1 - coord; }

}  // namespace

ViewImage render_ortho(const VoxelAsset& asset, ViewDir view, int w) {
  int g = asset.g;
  if (w < g || w % g != 0)
    throw ContractError("render: view size " + std::to_string(w) +
                        " must be a positive multiple of grid " + std::to_string(g));
  ViewImage img;
  img.w = w;
  img.view = view;
  img.rgb.assign(size_t(3) * w * w, 1.0f);  // white background
  ViewBasis vb = view_basis(view);
  int block = w / g;
  int64_t n = asset.voxels();
  for (int bv = 0; bv < g; ++bv) {
    for (int bu = 0; bu < g; ++bu) {
      // march along m_axis, nearest voxel first
      int64_t hit = -1;
      for (int m = 0; m < g && hit < 0; ++m) {
        int idx[3];
        idx[vb.u_axis] = axis_index(bu, vb.u_sign, g);
        idx[vb.v_axis] = axis_index(bv, vb.v_sign, g);
        idx[vb.m_axis] = vb.m_sign > 0 ? m : g - 1 - m;
        int64_t v = (int64_t(idx[2]) * g + idx[1]) * g + idx[0];
        if (asset.occ[size_t(v)]) hit = v;
      }
      if (hit < 0) continue;
      for (int c = 0; c < 3; ++c) {
        float col = asset.color[size_t(c * n + hit)];
        for (int dr = 0; dr < block; ++dr) {
          float* row = img.rgb.data() + size_t(c) * w * w + size_t(bv * block + dr) * w;
          for (int dc = 0; dc < block; ++dc) row[bu * block + dc] = col;
        }
      }
    }
  }
  return img;
}

std::vector<uint8_t> footprint_mask(const std::vector<uint8_t>& voxel_set, int g, ViewDir view,
                                    int w) {
  if (int64_t(voxel_set.size()) != int64_t(g) * g * g)
    throw ContractError("footprint: voxel set size does not match grid");
  if (w < g || w % g != 0) throw ContractError("footprint: bad view size");
  std::vector<uint8_t> mask(size_t(w) * w, 0);
  ViewBasis vb = view_basis(view);
  int block = w / g;
  for (int bv = 0; bv < g; ++bv)
    for (int bu = 0; bu < g; ++bu) {
      bool any = false;
      for (int m = 0; m < g && !any; ++m) {
        int idx[3];
        idx[vb.u_axis] = axis_index(bu, vb.u_sign, g);
        idx[vb.v_axis] = axis_index(bv, vb.v_sign, g);
        idx[vb.m_axis] = m;
        if (voxel_set[size_t((int64_t(idx[2]) * g + idx[1]) * g + idx[0])]) any = true;
      }
      if (!any) continue;
      for (int dr = 0; dr < block; ++dr)
        for (int dc = 0; dc < block; ++dc)
          mask[size_t(bv * block + dr) * w + size_t(bu * block + dc)] = 1;
    }
  return mask;
}

// ---------------------------------------------------------------------------
// Surface sampling
// ---------------------------------------------------------------------------

PointCloud sample_surface_points(const VoxelAsset& asset, int n, uint64_t seed) {
  if (asset.occupied_count() == 0)
    throw ContractError("sample_surface_points: asset is empty");
  if (n < 1) throw ContractError("sample_surface_points: n must be >= 1");
  int g = asset.g;
  auto occupied = [&](int x, int y, int z) {
    if (x < 0 || y < 0 || z < 0 || x >= g || y >= g || z >= g) return false;
    return asset.occ[size_t((int64_t(z) * g + y) * g + x)] != 0;
  };
  struct Face {
    int x, y, z, dir;  // dir 0..5: -x,+x,-y,+y,-z,+z
  };
  static const int kOff[6][3] = {{-1, 0, 0}, {1, 0, 0}, {0, -1, 0},
                                 {0, 1, 0},  {0, 0, -1}, {0, 0, 1}};
  std::vector<Face> faces;
  for (int z = 0; z < g; ++z)
    for (int y = 0; y < g; ++y)
      for (int x = 0; x < g; ++x) {
        if (!occupied(x, y, z)) continue;
        for (int d = 0; d < 6; ++d)
          if (!occupied(x + kOff[d][0], y + kOff[d][1], z + kOff[d][2]))
            faces.push_back({x, y, z, d});
      }
  PointCloud cloud;
  cloud.pts.reserve(size_t(n));
  Rng rng = Rng(seed).fork("surface");
  double cell = 1.0 / g;
  for (int i = 0; i < n; ++i) {
    const Face& f = faces[size_t(rng.next_u64() % faces.size())];
    double u = rng.uniform(), v = rng.uniform();
    double lo[3] = {f.x * cell - 0.5, f.y * cell - 0.5, f.z * cell - 0.5};
    double p[3];
    int axis = f.dir / 2;
    int side = f.dir % 2;  // 0: low face, 1: high face
    p[axis] = lo[axis] + (side ? cell : 0.0);
    int a1 = (axis + 1) % 3, a2 = (axis + 2) % 3;
    p[a1] = lo[a1] + u * cell;
    p[a2] = lo[a2] + v * cell;
    cloud.pts.push_back({p[0], p[1], p[2]});
  }
  return cloud;
}

// ---------------------------------------------------------------------------
// Instruction encoding
// ---------------------------------------------------------------------------

namespace {

constexpr int kMaxSlots = 7;  // token budget: slot tokens 1..7

struct SizeSpec {
  float a, b;  // kind-dependent dimensions
};

// Template table: 4 x-positions x 3 z-positions x 2 sizes. The y (depth)
// extent follows the same silhouette rules as generated scenes.
constexpr int kTemplateX = 4, kTemplateZ = 3, kTemplateS = 2;
constexpr float kTemplateXs[kTemplateX] = {-0.33f, -0.11f, 0.11f, 0.33f};
constexpr float kTemplateZs[kTemplateZ] = {-0.28f, 0.0f, 0.28f};

SizeSpec template_size(PrimKind kind, int size_class) {
  switch (kind) {
    case PrimKind::Box:
      return size_class == 0 ? SizeSpec{0.09f, 0.08f} : SizeSpec{0.13f, 0.11f};  // hx, hz
    case PrimKind::Sphere:
      return size_class == 0 ? SizeSpec{0.08f, 0} : SizeSpec{0.12f, 0};  // r
    case PrimKind::Cylinder:
      return size_class == 0 ? SizeSpec{0.06f, 0.11f} : SizeSpec{0.08f, 0.15f};  // r, hl
  }
  throw ContractError("bad primitive kind");
}

}  // namespace

int addition_template_count() { return kTemplateX * kTemplateZ * kTemplateS; }

Primitive addition_primitive(PrimKind kind, int color_id, int template_id, int slot) {
  if (color_id < 0 || color_id >= kPaletteSize)
    throw ContractError("addition payload: color id outside palette");
  if (template_id < 0 || template_id >= addition_template_count())
    throw ContractError("addition payload: template id outside catalog");
  int s = template_id % kTemplateS;
  int zi = (template_id / kTemplateS) % kTemplateZ;
  int xi = template_id / (kTemplateS * kTemplateZ);
  SizeSpec sz = template_size(kind, s);
  Primitive p;
  p.kind = kind;
  p.color_id = uint8_t(color_id);
  p.slot = uint8_t(slot);
  p.center = {kTemplateXs[xi], 0.0f, kTemplateZs[zi]};
  switch (kind) {
    case PrimKind::Box:
      p.half = {sz.a, std::min(sz.a, sz.b), sz.b};
      break;
    case PrimKind::Sphere:
      p.half = {sz.a, sz.a, sz.a};
      break;
    case PrimKind::Cylinder:
      p.half = {sz.a, sz.a, sz.b};
      break;
  }
  return p;
}

std::optional<std::pair<int, int>> addition_code(const Primitive& payload) {
  for (int t = 0; t < addition_template_count(); ++t) {
    Primitive ref = addition_primitive(payload.kind, payload.color_id, t, payload.slot);
    if (ref.center == payload.center && ref.half == payload.half) {
      int attr_a = 1 + int(payload.kind) * kPaletteSize + payload.color_id;
      int attr_b = 1 + t;
      return std::make_pair(attr_a, attr_b);
    }
  }
  return std::nullopt;
}

InstrTokens encode_instruction(const EditInstruction& instr) {
  if (instr.category == EditCategory::Null) return kNullTokens;
  if (instr.target_slot < 0 || instr.target_slot >= kMaxSlots)
    throw ContractError("encode: slot " + std::to_string(instr.target_slot) +
                        " outside token range");
  InstrTokens t{};
  t[0] = uint16_t(instr.category);
  t[1] = uint16_t(instr.target_slot + 1);
  switch (instr.category) {
    case EditCategory::Removal:
      break;
    case EditCategory::Texture:
      if (instr.new_color < 0 || instr.new_color >= kPaletteSize)
        throw ContractError("encode: color id outside palette");
      t[2] = uint16_t(instr.new_color + 1);
      break;
    case EditCategory::Addition: {
      auto code = addition_code(instr.payload);
      if (!code)
        throw ContractError("encode: addition payload is not in the catalog vocabulary");
      t[2] = uint16_t(code->first);
      t[3] = uint16_t(code->second);
      break;
    }
    default:
      throw ContractError("encode: invalid category");
  }
  for (uint16_t v : t)
    if (v >= kInstrVocab) throw ContractError("encode: token value exceeds vocabulary");
  return t;
}

EditInstruction decode_instruction(const InstrTokens& t) {
  EditInstruction instr;
  if (t == kNullTokens) return instr;
  if (t[0] < 1 || t[0] > 3) throw ContractError("decode: bad category token");
  instr.category = EditCategory(t[0]);
  if (t[1] < 1 || t[1] > kMaxSlots) throw ContractError("decode: bad slot token");
  instr.target_slot = int(t[1]) - 1;
  switch (instr.category) {
    case EditCategory::Removal:
      if (t[2] != 0 || t[3] != 0) throw ContractError("decode: removal carries attributes");
      break;
    case EditCategory::Texture:
      if (t[2] < 1 || t[2] > kPaletteSize || t[3] != 0)
        throw ContractError("decode: bad texture attributes");
      instr.new_color = int(t[2]) - 1;
      break;
    case EditCategory::Addition: {
      int a = int(t[2]) - 1, b = int(t[3]) - 1;
      if (a < 0 || a >= 3 * kPaletteSize || b < 0 || b >= addition_template_count())
        throw ContractError("decode: bad addition attributes");
      instr.payload =
          addition_primitive(PrimKind(a / kPaletteSize), a % kPaletteSize, b, instr.target_slot);
      break;
    }
    default:
      break;
  }
  return instr;
}

// ---------------------------------------------------------------------------
// Scene generation
// ---------------------------------------------------------------------------

namespace {

// Silhouette classes from the front view are kept disjoint so geometry is
// recoverable from the condition image: boxes are never taller than 1.4x
// their width, cylinders always at least 1.7x.
Primitive sample_primitive(Rng& r, float cx) {
  Primitive p;
  int k = int(r.uniform_int(0, 2));
  p.kind = PrimKind(k);
  p.color_id = uint8_t(r.uniform_int(0, kPaletteSize - 1));
  float cz = float(r.uniform(-0.22, 0.22));
  switch (p.kind) {
    case PrimKind::Box: {
      float hx = float(r.uniform(0.07, 0.13));
      float hz = float(r.uniform(0.07, std::min(1.35 * hx, 0.13)));
      p.half = {hx, std::min(hx, hz), hz};
      break;
    }
    case PrimKind::Sphere: {
      float rad = float(r.uniform(0.07, 0.14));
      p.half = {rad, rad, rad};
      break;
    }
    case PrimKind::Cylinder: {
      float rad = float(r.uniform(0.055, 0.095));
      float hl = float(r.uniform(1.7 * rad, 2.6 * rad));
      p.half = {rad, rad, hl};
      break;
    }
  }
  // depth-centered; clamp so the primitive stays inside the cube
  float hz = p.kind == PrimKind::Sphere ? p.half[0] : p.half[2];
  cz = std::clamp(cz, -0.5f + hz + 0.02f, 0.5f - hz - 0.02f);
  float hx = p.half[0];
  cx = std::clamp(cx, -0.5f + hx + 0.02f, 0.5f - hx - 0.02f);
  p.center = {cx, 0.0f, cz};
  return p;
}

// Fraction of the part's front footprint where the part itself is the first
// hit in the composite scene.
float visible_fraction(const SceneGraph& scene, int slot, int g) {
  auto solo = part_voxels(scene, slot, g);
  VoxelAsset composite = build_asset(scene, g);
  int total = 0, visible = 0;
  for (int iz = 0; iz < g; ++iz)
    for (int ix = 0; ix < g; ++ix) {
      bool in_footprint = false, first_hit_is_part = false;
      for (int iy = 0; iy < g; ++iy) {
        int64_t v = (int64_t(iz) * g + iy) * g + ix;
        if (solo[size_t(v)]) in_footprint = true;
        if (composite.occ[size_t(v)]) {
          // first occupied voxel along the front ray
          first_hit_is_part = solo[size_t(v)] != 0;
          break;
        }
      }
      if (in_footprint) {
        ++total;
        if (first_hit_is_part) ++visible;
      }
    }
  if (total == 0) return 0.0f;
  return float(visible) / float(total);
}

bool scene_acceptable(const SceneGraph& scene, const SceneParams& params) {
  for (const auto& part : scene.parts) {
    auto solo = part_voxels(scene, part.slot, params.grid);
    int64_t count = 0;
    for (uint8_t v : solo) count += v;
    if (count < params.min_part_voxels) return false;
    if (visible_fraction(scene, part.slot, params.grid) < params.min_visible_fraction)
      return false;
  }
  return true;
}

SceneGraph sample_scene_once(Rng r, uint64_t seed, const SceneParams& params) {
  SceneGraph scene;
  scene.seed = seed;
  int n = int(r.uniform_int(params.min_parts, params.max_parts));
  for (int i = 0; i < n; ++i) {
    // evenly spaced x centers with jitter; slots follow left-to-right order
    float span = 0.66f;
    float base = n == 1 ? 0.0f : -span / 2 + span * float(i) / float(n - 1);
    float cx = base + float(r.uniform(-0.045, 0.045));
    Primitive p = sample_primitive(r, cx);
    p.slot = uint8_t(i);
    scene.parts.push_back(p);
  }
  std::sort(scene.parts.begin(), scene.parts.end(),
            [](const Primitive& a, const Primitive& b) { return a.center[0] < b.center[0]; });
  for (size_t i = 0; i < scene.parts.size(); ++i) scene.parts[i].slot = uint8_t(i);
  return scene;
}

}  // namespace

SceneGraph make_scene(uint64_t seed, const SceneParams& params) {
  Rng root = Rng(seed).fork("scene");
  SceneGraph last;
  for (int attempt = 0; attempt < params.max_attempts; ++attempt) {
    SceneGraph scene = sample_scene_once(root.fork(uint64_t(attempt)), seed, params);
    last = scene;
    try {
      if (scene_acceptable(scene, params)) return scene;
    } catch (const DegenerateOutputError&) {
      continue;
    }
  }
  return last;  // deterministic fallback; callers check degeneracy via build
}

// ---------------------------------------------------------------------------
// Export formats
// ---------------------------------------------------------------------------

void write_ppm(const ViewImage& img, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("ppm '" + path + "': cannot open for writing");
  os << "P6\n" << img.w << " " << img.w << "\n255\n";
  int64_t wh = int64_t(img.w) * img.w;
  for (int64_t i = 0; i < wh; ++i)
    for (int c = 0; c < 3; ++c) {
      float v = std::clamp(img.rgb[size_t(c * wh + i)], 0.0f, 1.0f);
      os.put(char(int(std::lround(v * 255.0f))));
    }
  if (!os) throw IoError("ppm '" + path + "': write failed");
}

static_assert(std::endian::native == std::endian::little, "debug format assumes little-endian");

void write_asset_debug(const VoxelAsset& asset, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("asset '" + path + "': cannot open for writing");
  os.write("VXDB", 4);
  uint32_t version = 1, g = uint32_t(asset.g);
  os.write(reinterpret_cast<const char*>(&version), 4);
  os.write(reinterpret_cast<const char*>(&g), 4);
  // run-length pairs over the occupancy byte stream
  std::vector<std::pair<uint8_t, uint32_t>> runs;
  for (uint8_t v : asset.occ) {
    if (!runs.empty() && runs.back().first == v && runs.back().second < 0xffffffffu)
      ++runs.back().second;
    else
      runs.push_back({v, 1});
  }
  uint32_t nruns = uint32_t(runs.size());
  os.write(reinterpret_cast<const char*>(&nruns), 4);
  for (auto [v, len] : runs) {
    os.put(char(v));
    os.write(reinterpret_cast<const char*>(&len), 4);
  }
  os.write(reinterpret_cast<const char*>(asset.color.data()),
           std::streamsize(asset.color.size() * 4));
  if (!os) throw IoError("asset '" + path + "': write failed");
}

VoxelAsset read_asset_debug(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("asset '" + path + "': cannot open");
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "VXDB", 4) != 0) throw IoError("asset '" + path + "': bad magic");
  uint32_t version = 0, g = 0, nruns = 0;
  is.read(reinterpret_cast<char*>(&version), 4);
  is.read(reinterpret_cast<char*>(&g), 4);
  if (!is || version != 1) throw IoError("asset '" + path + "': unsupported version");
  VoxelAsset a;
  a.g = int(g);
  is.read(reinterpret_cast<char*>(&nruns), 4);
  a.occ.reserve(size_t(a.voxels()));
  for (uint32_t i = 0; i < nruns; ++i) {
    char v;
    uint32_t len = 0;
    is.get(v);
    is.read(reinterpret_cast<char*>(&len), 4);
    if (!is) throw IoError("asset '" + path + "': truncated runs");
    a.occ.insert(a.occ.end(), len, uint8_t(v));
  }
  if (int64_t(a.occ.size()) != a.voxels()) throw IoError("asset '" + path + "': bad occupancy");
  a.color.resize(size_t(3 * a.voxels()));
  is.read(reinterpret_cast<char*>(a.color.data()), std::streamsize(a.color.size() * 4));
  if (!is) throw IoError("asset '" + path + "': truncated colors");
  return a;
}

}  // namespace voxsteer
