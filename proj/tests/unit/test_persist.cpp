#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "texbridge/checkpoint.hpp"
#include "texbridge/config.hpp"
#include "texbridge/errors.hpp"
#include "texbridge/hashing.hpp"
#include "texbridge/rng.hpp"
#include "texbridge/runmanifest.hpp"

using namespace texbridge;
namespace fs = std::filesystem;

namespace {
fs::path temp_dir(const std::string& tag) {
  fs::path p = fs::temp_directory_path() / ("texbridge_test_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}
}  // namespace

TEST_CASE("sha256 matches the published test vectors") {
  CHECK(sha256_hex(std::string("abc")) ==
        "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  CHECK(sha256_hex(std::string("")) ==
        "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  fs::path dir = temp_dir("sha");
  std::ofstream(dir / "f.txt", std::ios::binary) << "abc";
  CHECK(sha256_file((dir / "f.txt").string()) == sha256_hex(std::string("abc")));
  CHECK_THROWS_AS(sha256_file((dir / "nope").string()), MissingArtifactError);
  fs::remove_all(dir);
}

TEST_CASE("checkpoint roundtrip is bitwise") {
  fs::path dir = temp_dir("ckpt");
  Rng rng(5);
  Checkpoint ck;
  ck.step = 1234;
  ck.config_hash = "deadbeef";
  ck.extra_json = R"({"kappa":2.0,"alphas":[0.1,0.2]})";
  ck.arrays.emplace_back("gen.w", rng.normal_tensor<float>({3, 4, 5}));
  ck.arrays.emplace_back("gen.b", rng.normal_tensor<float>({7}));
  save_checkpoint(ck, (dir / "a.ckpt").string());

  Checkpoint back = load_checkpoint((dir / "a.ckpt").string());
  CHECK(back.step == 1234);
  CHECK(back.config_hash == "deadbeef");
  CHECK(back.arrays.size() == 2);
  CHECK(back.arrays[0].first == "gen.w");  // order preserved
  CHECK(back.array("gen.b").shape() == Shape{7});
  for (int64_t i = 0; i < ck.arrays[0].second.size(); ++i)
    CHECK(back.array("gen.w").data()[i] == ck.arrays[0].second.data()[i]);
  CHECK(back.has("gen.w"));
  CHECK_FALSE(back.has("gen.q"));
  CHECK_THROWS_AS(back.array("gen.q"), MissingArtifactError);

  // extra survives as semantically equal json
  CHECK(back.extra_json.find("\"kappa\"") != std::string::npos);

  // identical save is byte-identical (manifest hashing depends on this)
  save_checkpoint(ck, (dir / "b.ckpt").string());
  CHECK(sha256_file((dir / "a.ckpt").string()) == sha256_file((dir / "b.ckpt").string()));

  CHECK_THROWS_AS(load_checkpoint((dir / "missing.ckpt").string()), MissingArtifactError);
  fs::remove_all(dir);
}

TEST_CASE("config: sections, comments, types, overrides, defaults echo") {
  Config cfg = Config::from_string(
      "# run config\n"
      "seed = 42\n"
      "name = \"demo run\"\n"
      "[finetune]\n"
      "steps = 200   # inline comment\n"
      "lr = 2e-3\n"
      "use_r1 = true\n",
      "test.toml");

  CHECK(cfg.get_int("seed", 1) == 42);
  CHECK(cfg.get_string("name", "x") == "demo run");
  CHECK(cfg.get_int("finetune.steps", 100) == 200);
  CHECK(cfg.get_double("finetune.lr", 1e-3) == doctest::Approx(2e-3));
  CHECK(cfg.get_bool("finetune.use_r1", false));
  CHECK(cfg.get_int("finetune.freeze_upto", 8) == 8);  // default kicks in

  cfg.apply_override("finetune.steps=500");
  CHECK(cfg.get_int("finetune.steps", 100) == 500);

  std::string echo = cfg.resolved_echo();
  CHECK(echo.find("finetune.freeze_upto = 8") != std::string::npos);
  CHECK(echo.find("finetune.steps = 500") != std::string::npos);
  CHECK(echo.find("name = \"demo run\"") != std::string::npos);
  CHECK(cfg.resolved_hash().size() == 64);

  cfg.require_consumed();  // everything touched
}

TEST_CASE("config rejects malformed input and unknown keys") {
  CHECK_THROWS_AS(Config::from_string("steps 12\n"), ConfigError);
  CHECK_THROWS_AS(Config::from_string("[unclosed\nsteps = 1\n"), ConfigError);
  CHECK_THROWS_AS(Config::from_string("a = 1\na = 2\n"), ConfigError);
  CHECK_THROWS_AS(Config::from_string("a = \"open\n"), ConfigError);

  Config cfg = Config::from_string("a = 1\ntypo_key = 2\n");
  CHECK(cfg.get_int("a", 0) == 1);
  CHECK_THROWS_AS(cfg.require_consumed(), ConfigError);

  Config bad = Config::from_string("x = notanumber\n");
  CHECK_THROWS_AS(bad.get_int("x", 0), ConfigError);
  Config bad2 = Config::from_string("x = 1.5\n");
  CHECK_THROWS_AS(bad2.get_int("x", 0), ConfigError);
  Config bad3 = Config::from_string("x = yes\n");
  CHECK_THROWS_AS(bad3.get_bool("x", false), ConfigError);
  CHECK_THROWS_AS(bad3.apply_override("justkey"), ConfigError);
}

TEST_CASE("run manifest roundtrip and file verification") {
  fs::path dir = temp_dir("manifest");
  std::ofstream(dir / "stage_out.bin", std::ios::binary) << "payload";

  RunManifest m;
  m.source_rev = "rev1";
  m.master_seed = 99;
  m.config_echo = "a = 1\n";
  StageRecord s;
  s.name = "pretrain";
  s.config_hash = "h1";
  s.seed = 7;
  s.wall_seconds = 1.5;
  s.outputs.push_back({"stage_out.bin", sha256_file((dir / "stage_out.bin").string())});
  m.upsert_stage(s);
  save_run_manifest(m, (dir / "run.json").string());

  RunManifest back = load_run_manifest((dir / "run.json").string());
  CHECK(back.master_seed == 99);
  REQUIRE(back.find_stage("pretrain") != nullptr);
  CHECK(back.find_stage("pretrain")->outputs.size() == 1);
  CHECK(back.find_stage("missing") == nullptr);

  // upsert replaces in place
  s.config_hash = "h2";
  back.upsert_stage(s);
  CHECK(back.stages.size() == 1);
  CHECK(back.find_stage("pretrain")->config_hash == "h2");

  // tampering with an output is caught at load
  std::ofstream(dir / "stage_out.bin", std::ios::binary) << "tampered";
  CHECK_THROWS_AS(load_run_manifest((dir / "run.json").string()), MissingArtifactError);
  RunManifest lax = load_run_manifest((dir / "run.json").string(), false);
  CHECK(lax.stages.size() == 1);

  fs::remove(dir / "stage_out.bin");
  CHECK_THROWS_AS(load_run_manifest((dir / "run.json").string()), MissingArtifactError);
  fs::remove_all(dir);
}
