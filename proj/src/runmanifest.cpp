#include "texbridge/runmanifest.hpp"

#include <filesystem>
#include <fstream>

#include "json.hpp"

#include "texbridge/errors.hpp"
#include "texbridge/hashing.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace texbridge {

const StageRecord* RunManifest::find_stage(const std::string& name) const {
  for (const auto& s : stages)
    if (s.name == name) return &s;
  return nullptr;
}

void RunManifest::upsert_stage(StageRecord rec) {
  for (auto& s : stages)
    if (s.name == rec.name) {
      s = std::move(rec);
      return;
    }
  stages.push_back(std::move(rec));
}

void save_run_manifest(const RunManifest& m, const std::string& path) {
  json j;
  j["schema"] = 1;
  j["source_rev"] = m.source_rev;
  j["master_seed"] = m.master_seed;
  j["config_echo"] = m.config_echo;
  json stages = json::array();
  for (const auto& s : m.stages) {
    json outs = json::array();
    for (const auto& f : s.outputs) outs.push_back({{"path", f.path}, {"sha256", f.sha256}});
    stages.push_back({{"name", s.name},
                      {"config_hash", s.config_hash},
                      {"seed", s.seed},
                      {"wall_seconds", s.wall_seconds},
                      {"outputs", outs}});
  }
  j["stages"] = stages;
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write run manifest: " + path);
  out << j.dump(1) << "\n";
}

RunManifest load_run_manifest(const std::string& path, bool verify_files) {
  std::ifstream in(path);
  if (!in) throw MissingArtifactError("run manifest not found: " + path);
  json j;
  in >> j;
  RunManifest m;
  m.source_rev = j.at("source_rev");
  m.master_seed = j.at("master_seed");
  m.config_echo = j.at("config_echo");
  for (const auto& sj : j.at("stages")) {
    StageRecord s;
    s.name = sj.at("name");
    s.config_hash = sj.at("config_hash");
    s.seed = sj.at("seed");
    s.wall_seconds = sj.at("wall_seconds");
    for (const auto& fj : sj.at("outputs")) s.outputs.push_back({fj.at("path"), fj.at("sha256")});
    m.stages.push_back(std::move(s));
  }
  if (verify_files) {
    fs::path root = fs::path(path).parent_path();
    for (const auto& s : m.stages)
      for (const auto& f : s.outputs) {
        fs::path p = fs::path(f.path).is_absolute() ? fs::path(f.path) : root / f.path;
        if (!fs::exists(p))
          throw MissingArtifactError("stage '" + s.name + "' output missing: " + p.string());
        std::string h = sha256_file(p.string());
        if (h != f.sha256)
          throw MissingArtifactError("stage '" + s.name + "' output hash mismatch: " + p.string());
      }
  }
  return m;
}

}  // namespace texbridge
