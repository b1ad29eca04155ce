#include "doctest.h"

#include <cstring>
#include <filesystem>
#include <fstream>

#include "voxsteer/checkpoint.hpp"
#include "voxsteer/rng.hpp"

using namespace voxsteer;

namespace {

std::string temp_path(const char* stem) {
  auto dir = std::filesystem::temp_directory_path() / "voxsteer_tests";
  std::filesystem::create_directories(dir);
  return (dir / stem).string();
}

}  // namespace

TEST_CASE("checkpoint round-trip is bit-exact") {
  ParameterStore<float> store;
  Rng rng(11);
  for (const char* name : {"base.w", "base.b", "ctrl.proj"}) {
    auto& t = store.create(name, {3, 5}, ParamSet::Base);
    rng.fork(name).fill_normal(t.ptr(), size_t(t.size()));
  }
  std::string path = temp_path("roundtrip.vsck");
  save_checkpoint(store_tensors(store), path, 0xDEADBEEFull, 42);

  auto ckpt = load_checkpoint(path);
  CHECK(ckpt.config_hash == 0xDEADBEEFull);
  CHECK(ckpt.rng_seed == 42);
  CHECK(ckpt.tensors.size() == 3);
  for (const auto& name : store.names()) {
    const auto& orig = store.get(name);
    const auto& back = ckpt.tensors.at(name);
    CHECK(back.shape == orig.shape);
    CHECK(std::memcmp(back.ptr(), orig.ptr(), size_t(orig.size()) * 4) == 0);
  }

  // writing the loaded data again produces identical bytes
  std::string path2 = temp_path("roundtrip2.vsck");
  save_checkpoint(ckpt.tensors, path2, ckpt.config_hash, ckpt.rng_seed);
  auto read_all = [](const std::string& p) {
    std::ifstream is(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(is), {});
  };
  CHECK(read_all(path) == read_all(path2));
}

TEST_CASE("loading into a store validates names and shapes") {
  ParameterStore<float> store;
  store.create("w", {2, 2}, ParamSet::Base);
  std::string path = temp_path("partial.vsck");

  std::map<std::string, TensorF> tensors;
  tensors.emplace("w", TensorF::from({2, 2}, {1, 2, 3, 4}));
  tensors.emplace("opt.m.w", TensorF::from({2, 2}, {0, 0, 0, 0}));
  save_checkpoint(tensors, path, 1, 2);

  auto extra = load_into_store(load_checkpoint(path), store);
  CHECK(extra.size() == 1);
  CHECK(extra.count("opt.m.w") == 1);
  CHECK((*store.get("w").data)[3] == 4.0f);

  ParameterStore<float> wrong;
  wrong.create("w", {4}, ParamSet::Base);
  CHECK_THROWS_AS(load_into_store(load_checkpoint(path), wrong), IoError);

  ParameterStore<float> missing;
  missing.create("w", {2, 2}, ParamSet::Base);
  missing.create("v", {2}, ParamSet::Base);
  CHECK_THROWS_AS(load_into_store(load_checkpoint(path), missing), IoError);
}

TEST_CASE("missing checkpoint raises a prerequisite error") {
  CHECK_THROWS_AS(load_checkpoint(temp_path("nope.vsck")), MissingPrerequisiteError);
}
