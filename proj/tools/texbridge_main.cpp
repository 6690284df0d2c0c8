#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "texbridge/config.hpp"
#include "texbridge/errors.hpp"
#include "texbridge/pipeline.hpp"

using namespace texbridge;

int main(int argc, char** argv) {
  CLI::App app{"texbridge: studio-texture translation pipeline"};
  app.require_subcommand(1);

  std::string config_path, out_dir = "run", data_dir;
  int64_t seed = -1;
  std::vector<std::string> overrides;
  bool quiet = false;

  const std::vector<std::string> commands = {
      "gen_data", "pretrain_phone",  "invert",   "finetune_studio", "train_diffusion",
      "infer",    "fit_colorxform", "evaluate", "ablate",          "run_all"};
  for (const std::string& name : commands) {
    CLI::App* sub = app.add_subcommand(name);
    sub->add_option("--config", config_path, "TOML-style key=value config file");
    sub->add_option("--seed", seed, "master seed (overrides config)");
    sub->add_option("--out", out_dir, "run directory")->capture_default_str();
    sub->add_option("--override", overrides, "extra key=value pairs, repeatable");
    sub->add_flag("--quiet", quiet, "suppress progress lines");
  }

  CLI11_PARSE(app, argc, argv);
  std::string command = app.get_subcommands().front()->get_name();

  RunContext rc;
  try {
    rc.cfg = config_path.empty() ? Config() : Config::from_file(config_path);
    for (const std::string& ov : overrides) rc.cfg.apply_override(ov);
    rc.run_dir = out_dir;
    rc.master_seed = seed >= 0 ? uint64_t(seed)
                               : uint64_t(rc.cfg.get_int("run.master_seed", 1234));
    const char* env_data = std::getenv("TEXBRIDGE_DATA_DIR");
    rc.data_dir = rc.cfg.get_string("run.data_dir",
                                    env_data ? std::string(env_data) : out_dir + "/data");
    rc.quiet = quiet;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return ConfigError::exit_code;
  } catch (const std::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return ConfigError::exit_code;
  }

  return run_command_exit_code(command, rc);
}
