#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "texbridge/nets.hpp"
#include "texbridge/tensor.hpp"

namespace texbridge {

// ---------------------------------------------------------------------------
// scalar metrics
// ---------------------------------------------------------------------------

// 10*log10(1/MSE) for data range 1.0, capped at 99 dB once MSE < 1e-10
double psnr(const TensorF& a, const TensorF& b);

// mean windowed SSIM, 8x8 windows slid with stride 8 (last window snapped to
// the border), stabilizers C1=(0.01)^2 C2=(0.03)^2 on data range 1.0
double ssim(const TensorF& a, const TensorF& b);

// squared L2 between unit embeddings, identical to the training-time anchor;
// both images must share one resolution
double faceid_distance(const TensorF& a, const TensorF& b,
                       const IdentityEmbedder<float>& emb);

// perceptual distance in the fixed feature bank (reported as an LPIPS proxy)
double percp_distance(const TensorF& a, const TensorF& b,
                      const FeatureExtractor<float>& fx);

// structure+texture similarity variant of the same feature bank, reported for
// completeness only: 1 - mean of per-channel luminance*structure terms
double dists_proxy(const TensorF& a, const TensorF& b,
                   const FeatureExtractor<float>& fx);

// Kernel distance between two image sets on pooled fixed-bank features,
// polynomial kernel (x.y/d + 1)^3, unbiased MMD^2. Equal-sized sets use the
// paired U-statistic (exactly zero when the sets hold identical samples);
// unequal sizes fall back to the general unbiased form. Needs >= 2 per side.
double kid(const std::vector<TensorF>& set_a, const std::vector<TensorF>& set_b,
           const FeatureExtractor<float>& fx);

// ---------------------------------------------------------------------------
// evaluation drivers
// ---------------------------------------------------------------------------

// who trained on what; evaluation refuses ids that any training stage touched
struct DatasetSplit {
  std::vector<uint64_t> train_ids;
  std::vector<uint64_t> holdout_paired_ids;
  std::vector<uint64_t> holdout_unpaired_ids;
};

std::string split_to_json(const DatasetSplit& s);
DatasetSplit split_from_json(const std::string& text);

// ConfigError when an evaluated id appears in the training split or is not a
// member of the expected holdout list
void assert_holdout_clean(const std::vector<uint64_t>& eval_ids,
                          const std::vector<uint64_t>& expected_holdout,
                          const DatasetSplit& split);

using IdImage = std::pair<uint64_t, TensorF>;

struct PairedRow {
  uint64_t id = 0;
  double psnr = 0, ssim = 0, percp = 0, dists = 0;
};

struct PairedEvalReport {
  std::string method = "method";
  std::vector<PairedRow> rows;  // sorted by id
  double mean_psnr = 0, mean_ssim = 0, mean_percp = 0, mean_dists = 0;
};

struct UnpairedRow {
  uint64_t id = 0;
  double faceid = 0;
};

struct UnpairedEvalReport {
  std::string method = "method";
  std::vector<UnpairedRow> rows;  // sorted by id
  double mean_faceid = 0;
  double kid_vs_studio = 0;
};

// outputs and ground truth are (id, image) pairs; every output id must have a
// ground-truth partner and be a clean paired holdout
PairedEvalReport evaluate_paired(const std::vector<IdImage>& outputs,
                                 const std::vector<IdImage>& gt_studio,
                                 const DatasetSplit& split,
                                 const FeatureExtractor<float>& fx);

// per-id identity drift of each output against its phone input, plus a set
// distance to studio-domain references
UnpairedEvalReport evaluate_unpaired(const std::vector<IdImage>& outputs,
                                     const std::vector<IdImage>& phone_inputs,
                                     const std::vector<TensorF>& studio_set,
                                     const DatasetSplit& split,
                                     const IdentityEmbedder<float>& emb,
                                     const FeatureExtractor<float>& fx);

// ---------------------------------------------------------------------------
// report rendering (all deterministic; every footer carries the feature-space
// caveat so absolute values are never read as published-network numbers)
// ---------------------------------------------------------------------------

std::string paired_report_csv(const PairedEvalReport& r);
std::string paired_report_json(const PairedEvalReport& r);
std::string paired_report_markdown(const PairedEvalReport& r);

std::string unpaired_report_csv(const UnpairedEvalReport& r);
std::string unpaired_report_json(const UnpairedEvalReport& r);
std::string unpaired_report_markdown(const UnpairedEvalReport& r);

}  // namespace texbridge
