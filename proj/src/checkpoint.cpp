#include "labelreg/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <vector>

namespace labelreg {

namespace {

constexpr char kMagic[8] = {'L', 'S', 'R', 'G', '0', '0', '0', '1'};

void put_u32(std::ofstream& f, std::uint32_t v) {
  f.write(reinterpret_cast<const char*>(&v), 4);
}

std::uint32_t get_u32(std::ifstream& f, const std::string& path) {
  std::uint32_t v = 0;
  f.read(reinterpret_cast<char*>(&v), 4);
  if (f.gcount() != 4) throw DataError(path + ": truncated checkpoint");
  return v;
}

}  // namespace

void save_checkpoint(const ParamStore<float>& params, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("save_checkpoint: cannot write " + path);
  f.write(kMagic, 8);
  put_u32(f, std::uint32_t(params.names().size()));
  for (const auto& name : params.names()) {
    const auto& p = params.at(name);
    put_u32(f, std::uint32_t(name.size()));
    f.write(name.data(), std::streamsize(name.size()));
    put_u32(f, 4);
    put_u32(f, std::uint32_t(p.shape.n));
    put_u32(f, std::uint32_t(p.shape.c));
    put_u32(f, std::uint32_t(p.shape.h));
    put_u32(f, std::uint32_t(p.shape.w));
    f.write(reinterpret_cast<const char*>(p.value.data()),
            std::streamsize(p.value.size() * sizeof(float)));
  }
  if (!f) throw DataError("save_checkpoint: short write to " + path);
}

ParamStore<float> load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("load_checkpoint: cannot open " + path);
  char magic[8];
  f.read(magic, 8);
  if (f.gcount() != 8 || std::memcmp(magic, kMagic, 8) != 0)
    throw DataError(path + ": not a checkpoint (bad magic)");
  const std::uint32_t count = get_u32(f, path);
  ParamStore<float> store;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = get_u32(f, path);
    std::string name(name_len, '\0');
    f.read(name.data(), name_len);
    if (std::size_t(f.gcount()) != name_len) throw DataError(path + ": truncated checkpoint");
    const std::uint32_t ndim = get_u32(f, path);
    if (ndim < 1 || ndim > 4) throw DataError(path + ": bad array rank for " + name);
    int dims[4] = {1, 1, 1, 1};
    for (std::uint32_t d = 0; d < ndim; ++d) dims[4 - ndim + d] = int(get_u32(f, path));
    TensorShape shape{dims[0], dims[1], dims[2], dims[3]};
    VecX<float> value(shape.numel());
    f.read(reinterpret_cast<char*>(value.data()),
           std::streamsize(value.size() * sizeof(float)));
    if (std::size_t(f.gcount()) != std::size_t(value.size()) * sizeof(float))
      throw DataError(path + ": truncated checkpoint");
    if (store.has(name)) throw DataError(path + ": duplicate parameter name " + name);
    store.add(name, shape, std::move(value));
  }
  return store;
}

void load_params_into(ParamStore<float>& dst, const std::string& path) {
  ParamStore<float> loaded = load_checkpoint(path);
  for (const auto& name : loaded.names()) {
    if (!dst.has(name))
      throw DataError(path + ": checkpoint parameter " + name + " unknown to this model");
    auto& p = dst.at(name);
    const auto& l = loaded.at(name);
    if (!(p.shape == l.shape))
      throw DataError(path + ": shape mismatch for " + name + ": model expects " + p.shape.str() +
                      ", file has " + l.shape.str());
    p.value = l.value;
  }
  for (const auto& name : dst.names())
    if (!loaded.has(name))
      throw DataError(path + ": checkpoint is missing parameter " + name);
}

}  // namespace labelreg
