#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "texbridge/checkpoint.hpp"
#include "texbridge/config.hpp"
#include "texbridge/metrics.hpp"
#include "texbridge/nets.hpp"
#include "texbridge/runmanifest.hpp"
#include "texbridge/synthtex.hpp"
#include "texbridge/tensor.hpp"

namespace texbridge {

// ---------------------------------------------------------------------------
// run directory plumbing
// ---------------------------------------------------------------------------

struct RunContext {
  std::string run_dir;
  std::string data_dir;
  Config cfg;
  uint64_t master_seed = 0;
  bool quiet = false;  // suppress progress lines (tests)

  std::string manifest_path() const { return run_dir + "/run_manifest.json"; }
  std::string data_manifest_path() const { return data_dir + "/manifest.json"; }
  std::string pretrain_ckpt() const { return run_dir + "/pretrain.ckpt"; }
  std::string inverted_ckpt() const { return run_dir + "/inverted.ckpt"; }
  std::string finetune_ckpt() const { return run_dir + "/finetune.ckpt"; }
  std::string diffusion_ckpt() const { return run_dir + "/diffusion.ckpt"; }
  std::string colorxform_ckpt() const { return run_dir + "/colorxform.ckpt"; }
  std::string outputs_dir() const { return run_dir + "/outputs"; }
  std::string figures_dir() const { return run_dir + "/figures"; }
  std::string reports_dir() const { return run_dir + "/reports"; }
  std::string logs_dir() const { return run_dir + "/logs"; }
};

// derived, not configured: which ids count as "touched by training"
DatasetSplit split_from_manifest(const DatasetManifest& m);

// ---------------------------------------------------------------------------
// phone-domain pretraining building blocks (exposed for tests)
// ---------------------------------------------------------------------------

// latent-table reconstruction pretraining: per-image style codes and the
// synthesis stack are optimized jointly to reproduce the phone dataset on its
// visible pixels; codes move by plain sgd, network params by adam
struct GloConfig {
  int steps = 400;
  int batch = 8;
  double lr = 2e-3;
  double code_lr = 0.3;
  double percp_weight = 1.0;
  uint64_t seed = 0;
};

// codes: (N, L, d_w), initialized from the mapped prior by the caller or zeroed
std::vector<double> glo_pretrain(Generator<float>& g, const std::vector<TextureSample>& data,
                                 TensorF& codes, const GloConfig& cfg);

// pulls the mapping network's output distribution onto the trained code cloud
// (first and second moments) so z-space sampling lands in-distribution
struct MappingFitConfig {
  int steps = 200;
  int batch = 64;
  double lr = 1e-2;
  uint64_t seed = 0;
};

double fit_mapping_to_codes(Generator<float>& g, const TensorF& codes,
                            const MappingFitConfig& cfg);

// supervised identity classification on fresh lighting draws; returns held-out
// accuracy (the embedder's quality gate)
struct EmbedTrainConfig {
  int steps = 300;
  int batch = 16;
  double lr = 2e-3;
  int n_ids = 24;
  int views = 6;          // training renders per id
  int holdout_views = 2;  // fresh renders per id for the gate
  int resolution = 32;
  uint64_t seed = 0;
};

double train_embedder(IdentityEmbedder<float>& emb, const DatasetManifest& man,
                      const EmbedTrainConfig& cfg);

// ---------------------------------------------------------------------------
// checkpoint helpers shared by stages and tests
// ---------------------------------------------------------------------------

void store_params(Checkpoint& ck, const ParamStore<float>& ps, const std::string& prefix);
void load_params(const Checkpoint& ck, ParamStore<float>& ps, const std::string& prefix);

// rebuilds nets from a pretrain checkpoint's recorded dimensions
GeneratorConfig generator_config_from_checkpoint(const Checkpoint& ck);

// ---------------------------------------------------------------------------
// pipeline stages; each validates upstream artifacts, is idempotent for an
// unchanged config+seed+inputs, and records itself in the run manifest
// ---------------------------------------------------------------------------

void cmd_gen_data(RunContext& rc);
void cmd_pretrain_phone(RunContext& rc);
void cmd_invert(RunContext& rc);
void cmd_finetune_studio(RunContext& rc);
void cmd_train_diffusion(RunContext& rc);
void cmd_infer(RunContext& rc);
void cmd_fit_colorxform(RunContext& rc);
void cmd_evaluate(RunContext& rc);
void cmd_ablate(RunContext& rc);

// "gen_data" ... "evaluate", "ablate", or "run_all"; ConfigError on unknown
void run_command(const std::string& name, RunContext& rc);

// maps typed errors to the documented process exit codes; used by the CLI
int run_command_exit_code(const std::string& name, RunContext& rc);

}  // namespace texbridge
