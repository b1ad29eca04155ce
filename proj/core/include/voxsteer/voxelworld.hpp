#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "voxsteer/errors.hpp"
#include "voxsteer/rng.hpp"

namespace voxsteer {

// World frame: unit cube [-0.5, 0.5]^3, x to the right, y into the screen
// (depth from the front view), z up. Voxel (ix,iy,iz) owns the cell
// [i/G-0.5, (i+1)/G-0.5) per axis and is indexed v = (iz*G + iy)*G + ix.

inline constexpr int kPaletteSize = 8;
const std::array<std::array<float, 3>, kPaletteSize>& palette();

enum class PrimKind : uint8_t { Box = 0, Sphere = 1, Cylinder = 2 };

// Cylinders have their axis along z. `half` meaning per kind:
//   Box: (hx, hy, hz) half extents.
//   Sphere: half[0] is the radius.
//   Cylinder: half[0] radius in the x/y plane, half[2] half length along z.
struct Primitive {
  PrimKind kind = PrimKind::Box;
  std::array<float, 3> center{0, 0, 0};
  std::array<float, 3> half{0, 0, 0};
  uint8_t color_id = 0;
  uint8_t slot = 0;

  bool contains(float x, float y, float z) const;
  bool operator==(const Primitive&) const = default;
};

struct SceneGraph {
  std::vector<Primitive> parts;  // later parts overwrite earlier on overlap
  uint64_t seed = 0;

  const Primitive* find_slot(int slot) const;
  bool has_slot(int slot) const { return find_slot(slot) != nullptr; }
};

struct VoxelAsset {
  int g = 0;
  std::vector<uint8_t> occ;  // G^3, values 0/1
  std::vector<float> color;  // 3*G^3 planar: channel c at [c*G^3 + v]

  int64_t voxels() const { return int64_t(g) * g * g; }
  int64_t occupied_count() const;
  bool operator==(const VoxelAsset&) const = default;
};

enum class ViewDir : uint8_t { Front = 0, Back, Left, Right, Up, Down };
inline constexpr int kViewCount = 6;
const char* view_name(ViewDir v);

struct ViewImage {
  int w = 0;
  ViewDir view = ViewDir::Front;
  std::vector<float> rgb;  // 3*W^2 planar: channel c at [c*W^2 + row*W + col]
};

struct PointCloud {
  std::vector<std::array<double, 3>> pts;
  size_t size() const { return pts.size(); }
};

enum class EditCategory : uint8_t { Null = 0, Addition = 1, Removal = 2, Texture = 3 };
const char* category_name(EditCategory c);

struct EditInstruction {
  EditCategory category = EditCategory::Null;
  int target_slot = 0;
  int new_color = 0;   // texture payload
  Primitive payload;   // addition payload (catalog-constrained for encoding)

  bool operator==(const EditInstruction&) const = default;
  static EditInstruction null_instruction() { return {}; }
};

using InstrTokens = std::array<uint16_t, 4>;
inline constexpr InstrTokens kNullTokens{0, 0, 0, 0};
inline constexpr int kInstrVocab = 64;

// ---------------------------------------------------------------------------
// Core operations
// ---------------------------------------------------------------------------

// Voxelizes a scene: a voxel is occupied iff its center lies inside any
// primitive; the last-listed covering primitive supplies the color.
VoxelAsset build_asset(const SceneGraph& scene, int g);

// Occupancy of a single part voxelized in isolation.
std::vector<uint8_t> part_voxels(const SceneGraph& scene, int slot, int g);

SceneGraph apply_edit(const SceneGraph& scene, const EditInstruction& instr);

ViewImage render_ortho(const VoxelAsset& asset, ViewDir view, int w);

// Orthographic footprint of a voxel set (no occlusion): pixel is 1 iff some
// set voxel projects onto it.
std::vector<uint8_t> footprint_mask(const std::vector<uint8_t>& voxel_set, int g, ViewDir view,
                                    int w);

PointCloud sample_surface_points(const VoxelAsset& asset, int n, uint64_t seed);

InstrTokens encode_instruction(const EditInstruction& instr);
EditInstruction decode_instruction(const InstrTokens& tokens);

// ---------------------------------------------------------------------------
// Addition catalog: the finite placement/size vocabulary addition payloads
// are drawn from, so instructions stay tokenizable.
// ---------------------------------------------------------------------------

int addition_template_count();  // templates per (kind,color) pair
Primitive addition_primitive(PrimKind kind, int color_id, int template_id, int slot);
// Token attribute pair (attr_a, attr_b) for a catalog payload, if it is one.
std::optional<std::pair<int, int>> addition_code(const Primitive& payload);

// ---------------------------------------------------------------------------
// Procedural scene generator
// ---------------------------------------------------------------------------

struct SceneParams {
  int grid = 16;          // grid used for visibility/degeneracy checks
  int min_parts = 1;
  int max_parts = 4;
  // Parts are kept depth-centered and mostly visible from the front view so
  // that a single condition view determines geometry; see README.
  float min_visible_fraction = 0.55f;
  int min_part_voxels = 4;
  int max_attempts = 64;
};

// Deterministic function of (seed, params). Part slots are assigned in
// left-to-right (x) order.
SceneGraph make_scene(uint64_t seed, const SceneParams& params = {});

// ---------------------------------------------------------------------------
// Debug export formats
// ---------------------------------------------------------------------------

void write_ppm(const ViewImage& img, const std::string& path);

// "VXDB": u32 version, u32 G, RLE-coded occupancy bytes, 3*G^3 f32 colors.
void write_asset_debug(const VoxelAsset& asset, const std::string& path);
VoxelAsset read_asset_debug(const std::string& path);

}  // namespace voxsteer
