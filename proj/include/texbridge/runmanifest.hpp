#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace texbridge {

// Ledger of a run directory: which stages ran, with which resolved config, and
// which artifacts they produced. Paths are relative to the manifest's
// directory so runs stay relocatable.
struct FileRef {
  std::string path;
  std::string sha256;
};

struct StageRecord {
  std::string name;
  std::string config_hash;  // Config::resolved_hash of the stage's consumed keys
  uint64_t seed = 0;
  double wall_seconds = 0;
  std::vector<FileRef> outputs;
};

struct RunManifest {
  std::string source_rev = "unknown";
  uint64_t master_seed = 0;
  std::string config_echo;  // full resolved key/value snapshot
  std::vector<StageRecord> stages;

  const StageRecord* find_stage(const std::string& name) const;
  void upsert_stage(StageRecord rec);  // replace same-name record or append
};

void save_run_manifest(const RunManifest& m, const std::string& path);

// verify_files: every referenced output must exist and match its hash
// (MissingArtifactError otherwise)
RunManifest load_run_manifest(const std::string& path, bool verify_files = true);

}  // namespace texbridge
