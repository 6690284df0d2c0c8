#include "texbridge/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "json.hpp"

#include "texbridge/errors.hpp"

using nlohmann::json;

namespace texbridge {

static_assert(std::endian::native == std::endian::little,
              "checkpoint i/o assumes a little-endian host");

namespace {
constexpr char kMagic[4] = {'T', 'X', 'B', 'C'};
}

const TensorF& Checkpoint::array(const std::string& name) const {
  for (const auto& [n, t] : arrays)
    if (n == name) return t;
  throw MissingArtifactError("checkpoint array not found: " + name);
}

bool Checkpoint::has(const std::string& name) const {
  for (const auto& [n, t] : arrays)
    if (n == name) return true;
  return false;
}

void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  json header;
  header["format_version"] = 1;
  header["step"] = ck.step;
  header["config_hash"] = ck.config_hash;
  header["extra"] = json::parse(ck.extra_json);
  json arrays = json::array();
  for (const auto& [name, t] : ck.arrays)
    arrays.push_back({{"name", name}, {"shape", t.shape()}, {"dtype", "f32"}});
  header["arrays"] = arrays;
  std::string hdr = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
  out.write(kMagic, 4);
  uint32_t len = static_cast<uint32_t>(hdr.size());
  out.write(reinterpret_cast<const char*>(&len), 4);
  out.write(hdr.data(), static_cast<std::streamsize>(hdr.size()));
  for (const auto& [name, t] : ck.arrays)
    out.write(reinterpret_cast<const char*>(t.data()),
              static_cast<std::streamsize>(sizeof(float) * static_cast<size_t>(t.size())));
  if (!out) throw std::runtime_error("short write on checkpoint: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifactError("checkpoint not found: " + path);
  char magic[4];
  uint32_t len = 0;
  in.read(magic, 4);
  in.read(reinterpret_cast<char*>(&len), 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("not a checkpoint file: " + path);
  std::string hdr(len, '\0');
  in.read(hdr.data(), len);
  if (!in) throw std::runtime_error("truncated checkpoint header: " + path);
  json header = json::parse(hdr);
  if (header.at("format_version").get<int>() != 1)
    throw std::runtime_error("unsupported checkpoint version in " + path);

  Checkpoint ck;
  ck.step = header.at("step");
  ck.config_hash = header.at("config_hash");
  ck.extra_json = header.at("extra").dump();
  for (const auto& a : header.at("arrays")) {
    if (a.at("dtype") != "f32") throw std::runtime_error("unsupported dtype in " + path);
    Shape shape = a.at("shape").get<Shape>();
    TensorF t(shape);
    in.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(sizeof(float) * static_cast<size_t>(t.size())));
    if (!in) throw std::runtime_error("truncated checkpoint data: " + path);
    ck.arrays.emplace_back(a.at("name").get<std::string>(), std::move(t));
  }
  return ck;
}

}  // namespace texbridge
