#include "voxsteer/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "voxsteer/errors.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint writer assumes a little-endian host");

namespace voxsteer {

namespace {

constexpr char kMagic[4] = {'V', 'S', 'C', 'K'};

template <class T>
void put(std::ofstream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T take(std::ifstream& is, const std::string& path) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw IoError("checkpoint '" + path + "': truncated file");
  return v;
}

}  // namespace

void save_checkpoint(const std::map<std::string, TensorF>& tensors, const std::string& path,
                     uint64_t config_hash, uint64_t rng_seed) {
  std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("checkpoint '" + path + "': cannot open for writing");
    os.write(kMagic, 4);
    put<uint32_t>(os, kCheckpointVersion);
    put<uint64_t>(os, tensors.size());
    for (const auto& [name, t] : tensors) {
      put<uint32_t>(os, uint32_t(name.size()));
      os.write(name.data(), std::streamsize(name.size()));
      put<uint32_t>(os, uint32_t(t.shape.size()));
      for (int64_t e : t.shape) put<uint64_t>(os, uint64_t(e));
      os.write(reinterpret_cast<const char*>(t.ptr()), std::streamsize(t.size() * 4));
    }
    put<uint64_t>(os, config_hash);
    put<uint64_t>(os, rng_seed);
    if (!os) {
      os.close();
      std::filesystem::remove(tmp);
      throw IoError("checkpoint '" + path + "': write failed");
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    throw IoError("checkpoint '" + path + "': rename failed: " + ec.message());
  }
}

CheckpointData load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw MissingPrerequisiteError("checkpoint '" + path + "' does not exist");
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw IoError("checkpoint '" + path + "': bad magic");
  uint32_t version = take<uint32_t>(is, path);
  if (version != kCheckpointVersion)
    throw IoError("checkpoint '" + path + "': unsupported version " + std::to_string(version));
  uint64_t count = take<uint64_t>(is, path);
  CheckpointData out;
  for (uint64_t i = 0; i < count; ++i) {
    uint32_t name_len = take<uint32_t>(is, path);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    if (!is) throw IoError("checkpoint '" + path + "': truncated name");
    uint32_t rank = take<uint32_t>(is, path);
    Shape shape(rank);
    for (uint32_t d = 0; d < rank; ++d) shape[d] = int64_t(take<uint64_t>(is, path));
    int64_t n = shape_numel(shape);
    std::vector<float> vals(static_cast<size_t>(n));
    is.read(reinterpret_cast<char*>(vals.data()), std::streamsize(n * 4));
    if (!is) throw IoError("checkpoint '" + path + "': truncated tensor '" + name + "'");
    out.tensors.emplace(name, TensorF::from(std::move(shape), std::move(vals)));
  }
  out.config_hash = take<uint64_t>(is, path);
  out.rng_seed = take<uint64_t>(is, path);
  return out;
}

std::map<std::string, TensorF> store_tensors(const ParameterStore<float>& store) {
  std::map<std::string, TensorF> out;
  for (const auto& name : store.names()) out.emplace(name, store.get(name).detached_copy());
  return out;
}

std::map<std::string, TensorF> load_into_store(const CheckpointData& ckpt,
                                               ParameterStore<float>& store) {
  std::map<std::string, TensorF> extra;
  for (const auto& [name, t] : ckpt.tensors) {
    if (store.has(name)) {
      TensorF& p = store.get(name);
      if (p.shape != t.shape)
        throw IoError("checkpoint tensor '" + name + "' has shape " + shape_str(t.shape) +
                      ", store expects " + shape_str(p.shape));
      *p.data = *t.data;
    } else {
      extra.emplace(name, t);
    }
  }
  for (const auto& name : store.names())
    if (!ckpt.tensors.count(name))
      throw IoError("checkpoint is missing parameter '" + name + "'");
  return extra;
}

}  // namespace voxsteer
