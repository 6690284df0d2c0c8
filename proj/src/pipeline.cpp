#include "texbridge/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "json.hpp"
#include "texbridge/autodiff.hpp"
#include "texbridge/checkpoint.hpp"
#include "texbridge/colorxform.hpp"
#include "texbridge/errors.hpp"
#include "texbridge/finetune.hpp"
#include "texbridge/hashing.hpp"
#include "texbridge/imageio.hpp"
#include "texbridge/inversion.hpp"
#include "texbridge/resshift.hpp"

namespace fs = std::filesystem;

namespace texbridge {

// ---------------------------------------------------------------------------
// small shared helpers
// ---------------------------------------------------------------------------

namespace {

uint64_t stage_seed(const RunContext& rc, const std::string& stage) {
  return Rng(rc.master_seed).derive("stage_" + stage).next_u64();
}

void ensure_dirs(const RunContext& rc) {
  for (const std::string& d : {rc.run_dir, rc.data_dir, rc.outputs_dir(), rc.figures_dir(),
                               rc.reports_dir(), rc.logs_dir()})
    fs::create_directories(d);
}

RunManifest load_or_new_manifest(const RunContext& rc) {
  if (fs::exists(rc.manifest_path())) return load_run_manifest(rc.manifest_path(), false);
  RunManifest m;
  m.master_seed = rc.master_seed;
  return m;
}

std::string abspath(const std::string& p) { return fs::absolute(p).string(); }

// stage identity: its config slice, its seed, and the content of its inputs
std::string stage_hash(const RunContext& rc, const std::vector<std::string>& sections,
                       uint64_t seed, const std::vector<std::string>& input_files) {
  std::string acc = rc.cfg.resolved_echo(sections);
  acc += "seed=" + std::to_string(seed) + "\n";
  for (const auto& f : input_files) acc += "in " + f + " " + sha256_file(f) + "\n";
  return sha256_hex(acc);
}

bool outputs_intact(const RunContext& rc, const StageRecord& rec) {
  for (const auto& f : rec.outputs) {
    fs::path p = fs::path(f.path).is_absolute() ? fs::path(f.path) : fs::path(rc.run_dir) / f.path;
    if (!fs::exists(p)) return false;
    if (sha256_file(p.string()) != f.sha256) return false;
  }
  return true;
}

bool stage_uptodate(const RunContext& rc, const RunManifest& man, const std::string& name,
                    const std::string& hash) {
  const StageRecord* rec = man.find_stage(name);
  if (!rec || rec->config_hash != hash) return false;
  return outputs_intact(rc, *rec);
}

void record_stage(RunContext& rc, RunManifest& man, const std::string& name,
                  const std::string& hash, uint64_t seed, double wall,
                  const std::vector<std::string>& outputs) {
  StageRecord rec;
  rec.name = name;
  rec.config_hash = hash;
  rec.seed = seed;
  rec.wall_seconds = wall;
  for (const auto& o : outputs) {
    std::string full = fs::path(o).is_absolute() ? o : (fs::path(rc.run_dir) / o).string();
    rec.outputs.push_back({o, sha256_file(full)});
  }
  man.upsert_stage(std::move(rec));
  man.config_echo = rc.cfg.resolved_echo();
  man.master_seed = rc.master_seed;
  save_run_manifest(man, rc.manifest_path());
}

void note(const RunContext& rc, const std::string& msg) {
  if (!rc.quiet) std::cout << msg << "\n";
}

void write_text(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << content;
}

void require_file(const std::string& path, const std::string& stage_hint) {
  if (!fs::exists(path))
    throw MissingArtifactError("missing artifact " + path + "; produce it with " + stage_hint);
}

DatasetManifest load_data_manifest(const RunContext& rc) {
  require_file(rc.data_manifest_path(), "cmd_gen_data");
  return load_manifest(rc.data_manifest_path());
}

TextureSample load_phone_sample(const DatasetManifest& man, const std::string& dir, int64_t id,
                                int res, bool hr) {
  TextureSample s;
  s.identity_id = id;
  s.condition = man.record(id).wild;
  s.image = hr ? read_ppm16(phone_hr_path(dir, id)) : read_ppm16(phone_lr_path(dir, id));
  int64_t h = 0, w = 0;
  s.mask = read_pbm(phone_mask_path(dir, id, res), &h, &w);
  s.resolution = res;
  return s;
}

// (1,3,R,R) -> (3,R,R) convenience for generator outputs
TensorF squeeze_img(const TensorF& t) { return t.reshaped({t.dim(1), t.dim(2), t.dim(3)}); }

TensorF batch_img(const TensorF& img) {
  TensorF t = img;
  return t.reshaped({1, img.dim(0), img.dim(1), img.dim(2)});
}

// side-by-side figure panel with a thin white separator
TensorF hstack_images(const std::vector<TensorF>& imgs, int gap = 2) {
  int64_t H = imgs[0].dim(1);
  int64_t W = 0;
  for (const auto& im : imgs) W += im.dim(2);
  W += gap * (int64_t(imgs.size()) - 1);
  TensorF out = TensorF::full({3, H, W}, 1.0f);
  int64_t x0 = 0;
  for (const auto& im : imgs) {
    for (int64_t c = 0; c < 3; ++c)
      for (int64_t y = 0; y < H; ++y)
        for (int64_t x = 0; x < im.dim(2); ++x) out.at(c, y, x0 + x) = im.at(c, y, x);
    x0 += im.dim(2) + gap;
  }
  return out;
}

std::vector<ad::Value<float>> trainable_values(ParamStore<float>& ps) {
  std::vector<ad::Value<float>> out;
  for (const auto& p : ps.items())
    if (p.trainable) out.push_back(p.value);
  return out;
}

std::vector<ad::Value<float>> params_with_prefix(ParamStore<float>& ps, const std::string& pre) {
  std::vector<ad::Value<float>> out;
  for (const auto& p : ps.items())
    if (p.trainable && p.name.rfind(pre, 0) == 0) out.push_back(p.value);
  return out;
}

}  // namespace

DatasetSplit split_from_manifest(const DatasetManifest& m) {
  DatasetSplit s;
  s.train_ids.assign(m.phone_ids.begin(), m.phone_ids.end());
  for (int64_t id : m.studio_ids)
    if (std::find(s.train_ids.begin(), s.train_ids.end(), uint64_t(id)) == s.train_ids.end())
      s.train_ids.push_back(uint64_t(id));
  s.holdout_paired_ids.assign(m.holdout_paired_ids.begin(), m.holdout_paired_ids.end());
  s.holdout_unpaired_ids.assign(m.holdout_unpaired_ids.begin(), m.holdout_unpaired_ids.end());
  return s;
}

// ---------------------------------------------------------------------------
// checkpoint param (de)serialization
// ---------------------------------------------------------------------------

void store_params(Checkpoint& ck, const ParamStore<float>& ps, const std::string& prefix) {
  for (const auto& [name, t] : ps.state_dict()) ck.arrays.emplace_back(prefix + name, t);
}

void load_params(const Checkpoint& ck, ParamStore<float>& ps, const std::string& prefix) {
  std::vector<std::pair<std::string, TensorF>> dict;
  for (const auto& [name, t] : ck.arrays)
    if (name.rfind(prefix, 0) == 0) dict.emplace_back(name.substr(prefix.size()), t);
  if (dict.empty())
    throw MissingArtifactError("checkpoint holds no arrays under prefix '" + prefix + "'");
  ps.load_state(dict);
}

GeneratorConfig generator_config_from_checkpoint(const Checkpoint& ck) {
  nlohmann::json j = nlohmann::json::parse(ck.extra_json, nullptr, false);
  if (j.is_discarded() || !j.contains("resolution"))
    throw MissingArtifactError("checkpoint metadata lacks generator dimensions");
  GeneratorConfig g;
  g.resolution = j.at("resolution").get<int>();
  g.d_z = j.value("d_z", 64);
  g.d_w = j.value("d_w", 64);
  return g;
}

// ---------------------------------------------------------------------------
// phone pretraining blocks
// ---------------------------------------------------------------------------

std::vector<double> glo_pretrain(Generator<float>& g, const std::vector<TextureSample>& data,
                                 TensorF& codes, const GloConfig& cfg) {
  using namespace ad;
  if (data.empty()) throw std::invalid_argument("glo_pretrain: empty dataset");
  const int64_t N = int64_t(data.size());
  const int64_t L = g.n_layers(), D = g.cfg.d_w;
  const int64_t R = data[0].resolution;
  if (codes.shape() != Shape{N, L, D})
    throw std::invalid_argument("glo_pretrain: codes must be (N, layers, d_w)");

  FeatureExtractor<float> fx;
  std::vector<ad::Value<float>> train = trainable_values(g.params);
  Adam<float> opt(cfg.lr);
  opt.beta1 = 0.9;  // reconstruction objective wants momentum, unlike the gan
  std::vector<double> curve;
  const int64_t B = std::min<int64_t>(cfg.batch, N);

  for (int s = 0; s < cfg.steps; ++s) {
    Rng rng = Rng(cfg.seed).derive("glo").derive(uint64_t(s));
    std::vector<int64_t> idx(static_cast<size_t>(B));
    for (auto& i : idx) i = int64_t(rng.uniform_int(N));

    TensorF code_b({B, L, D});
    TensorF tgt({B, 3, R, R}), msk({B, 1, R, R});
    double n_vis = 0;
    for (int64_t b = 0; b < B; ++b) {
      const TextureSample& smp = data[size_t(idx[size_t(b)])];
      std::copy_n(codes.data() + idx[size_t(b)] * L * D, L * D, code_b.data() + b * L * D);
      for (int64_t i = 0; i < R * R; ++i) {
        float mv = smp.mask[size_t(i)] ? 1.f : 0.f;
        msk.data()[b * R * R + i] = mv;
        n_vis += 3.0 * mv;
        for (int64_t c = 0; c < 3; ++c)
          tgt.data()[((b * 3 + c) * R + i / R) * R + i % R] =
              smp.image.data()[c * R * R + i] * mv;
      }
    }

    Value<float> w_leaf = leaf<float>(code_b);
    Value<float> img = g.synthesize_wplus(w_leaf);
    Value<float> masked = mul(img, constant<float>(msk));
    Value<float> tgt_c = constant<float>(tgt);
    Value<float> l2 = scale(sum_all(square(sub(masked, tgt_c))), float(1.0 / n_vis));
    Value<float> loss = add(l2, scale(fx.distance(masked, tgt_c), float(cfg.percp_weight)));

    double v = double(loss->data.item());
    if (!std::isfinite(v))
      throw NumericalError("phone pretraining loss non-finite at step " + std::to_string(s));
    curve.push_back(v);

    std::vector<Value<float>> wrt = train;
    wrt.push_back(w_leaf);
    std::vector<Value<float>> grads = gradients(loss, wrt, false);
    std::vector<Value<float>> pgrads(grads.begin(), grads.end() - 1);
    opt.step(train, pgrads);

    const TensorF& cg = grads.back()->data;
    for (int64_t b = 0; b < B; ++b)
      for (int64_t k = 0; k < L * D; ++k)
        codes.data()[idx[size_t(b)] * L * D + k] -= float(cfg.code_lr) * cg.data()[b * L * D + k];
  }
  return curve;
}

double fit_mapping_to_codes(Generator<float>& g, const TensorF& codes,
                            const MappingFitConfig& cfg) {
  using namespace ad;
  const int64_t D = g.cfg.d_w;
  const int64_t rows = codes.size() / D;
  TensorF mu({1, D}), m2({1, D});
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t d = 0; d < D; ++d) {
      double v = codes.data()[r * D + d];
      mu.data()[d] += float(v / double(rows));
      m2.data()[d] += float(v * v / double(rows));
    }

  std::vector<Value<float>> train = params_with_prefix(g.params, "mapping.");
  if (train.empty()) throw std::invalid_argument("generator has no mapping parameters");
  Adam<float> opt(cfg.lr);
  opt.beta1 = 0.9;
  double last = 0;
  for (int s = 0; s < cfg.steps; ++s) {
    Rng rng = Rng(cfg.seed).derive("mapfit").derive(uint64_t(s));
    Tensor<float> z = rng.normal_tensor<float>({cfg.batch, g.cfg.d_z});
    Value<float> w = g.map_z(constant<float>(z));  // (B, d_w)
    float inv_b = 1.0f / float(cfg.batch);
    Value<float> mean_w = scale(sum_axes(w, {0}), inv_b);
    Value<float> mom2_w = scale(sum_axes(square(w), {0}), inv_b);
    Value<float> loss = add(mean_all(square(sub(mean_w, constant<float>(TensorF(mu))))),
                            mean_all(square(sub(mom2_w, constant<float>(TensorF(m2))))));
    last = double(loss->data.item());
    if (!std::isfinite(last))
      throw NumericalError("mapping fit loss non-finite at step " + std::to_string(s));
    opt.step(train, gradients(loss, train, false));
  }
  return last;
}

namespace {

// numerically safe cross-entropy: identical value/gradient to the unshifted
// form for any constant per-row shift
ad::Value<float> softmax_ce(const ad::Value<float>& logits, const std::vector<int>& labels) {
  using namespace ad;
  const int64_t B = logits->data.dim(0), C = logits->data.dim(1);
  TensorF maxes({B, 1});
  for (int64_t b = 0; b < B; ++b) {
    float m = logits->data.at(b, int64_t(0));
    for (int64_t c = 1; c < C; ++c) m = std::max(m, logits->data.at(b, c));
    maxes.at(b, int64_t(0)) = m;
  }
  TensorF onehot({B, C});
  for (int64_t b = 0; b < B; ++b) onehot.at(b, int64_t(labels[size_t(b)])) = 1.0f;
  Value<float> shifted = sub(logits, broadcast_to(constant<float>(maxes), {B, C}));
  Value<float> denom = log(sum_axes(exp(shifted), {1}));                  // (B,1)
  Value<float> zy = sum_axes(mul(shifted, constant<float>(onehot)), {1});  // (B,1)
  return mean_all(sub(denom, zy));
}

int argmax_row(const TensorF& t, int64_t b) {
  int best = 0;
  for (int64_t c = 1; c < t.dim(1); ++c)
    if (t.at(b, c) > t.at(b, best)) best = int(c);
  return best;
}

}  // namespace

double train_embedder(IdentityEmbedder<float>& emb, const DatasetManifest& man,
                      const EmbedTrainConfig& cfg) {
  using namespace ad;
  const int n_ids = std::min<int>(cfg.n_ids, int(man.phone_ids.size()));
  if (n_ids < 2) throw std::invalid_argument("embedder training needs at least 2 identities");
  const int R = cfg.resolution;

  // fresh lighting draws; the last holdout_views per id never reach training
  std::vector<TensorF> train_x, hold_x;
  std::vector<int> train_y, hold_y;
  for (int c = 0; c < n_ids; ++c) {
    int64_t id = man.phone_ids[size_t(c)];
    IdentityParams ip = make_identity(man.record(id).seed);
    for (int v = 0; v < cfg.views + cfg.holdout_views; ++v) {
      Rng vr = Rng(cfg.seed).derive("embed_view").derive(uint64_t(id)).derive(uint64_t(v));
      LightingCondition cond = LightingCondition::sample_wild(vr);
      TensorF img = render_texture(ip, cond, R).image;
      if (v < cfg.views) {
        train_x.push_back(img);
        train_y.push_back(c);
      } else {
        hold_x.push_back(img);
        hold_y.push_back(c);
      }
    }
  }

  std::vector<Value<float>> train = trainable_values(emb.params);
  Adam<float> opt(cfg.lr);
  opt.beta1 = 0.9;
  const int64_t N = int64_t(train_x.size());
  const int64_t B = std::min<int64_t>(cfg.batch, N);
  for (int s = 0; s < cfg.steps; ++s) {
    Rng rng = Rng(cfg.seed).derive("embed_train").derive(uint64_t(s));
    TensorF batch({B, 3, R, R});
    std::vector<int> labels(static_cast<size_t>(B));
    for (int64_t b = 0; b < B; ++b) {
      int64_t i = int64_t(rng.uniform_int(N));
      std::copy_n(train_x[size_t(i)].data(), 3 * R * R, batch.data() + b * 3 * R * R);
      labels[size_t(b)] = train_y[size_t(i)];
    }
    Value<float> loss = softmax_ce(emb.logits(constant<float>(batch)), labels);
    double v = double(loss->data.item());
    if (!std::isfinite(v))
      throw NumericalError("embedder training loss non-finite at step " + std::to_string(s));
    opt.step(train, gradients(loss, train, false));
  }

  ad::NoGradGuard ng;
  int hits = 0;
  for (size_t i = 0; i < hold_x.size(); ++i) {
    TensorF one = batch_img(hold_x[i]);
    TensorF lg = emb.logits(constant<float>(one))->data;
    if (argmax_row(lg, 0) == hold_y[i]) ++hits;
  }
  return hold_x.empty() ? 0.0 : double(hits) / double(hold_x.size());
}

// ---------------------------------------------------------------------------
// stages
// ---------------------------------------------------------------------------

void cmd_gen_data(RunContext& rc) {
  ensure_dirs(rc);
  RunManifest man = load_or_new_manifest(rc);

  DatasetConfig dc;
  dc.n_phone = int(rc.cfg.get_int("data.n_phone", 600));
  dc.n_studio = int(rc.cfg.get_int("data.n_studio", 40));
  dc.n_paired = int(rc.cfg.get_int("data.n_paired", 12));
  dc.n_holdout_paired = int(rc.cfg.get_int("data.n_holdout_paired", 4));
  dc.n_holdout_unpaired = int(rc.cfg.get_int("data.n_holdout_unpaired", 20));
  dc.resolution_lr = int(rc.cfg.get_int("data.resolution_lr", 64));
  dc.resolution_hr = int(rc.cfg.get_int("data.resolution_hr", 128));
  dc.master_seed = uint64_t(rc.cfg.get_int("data.master_seed", 1234));
  dc.threads = int(rc.cfg.get_int("data.threads", 0));
  rc.cfg.require_consumed_in("data");

  std::string hash = stage_hash(rc, {"data"}, dc.master_seed, {});
  if (stage_uptodate(rc, man, "gen_data", hash)) {
    note(rc, "gen_data: up to date");
    return;
  }

  auto t0 = std::chrono::steady_clock::now();
  DatasetManifest dm = build_dataset(dc, rc.data_dir);
  double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  note(rc, "gen_data: " + std::to_string(dm.phone_ids.size()) + " phone ids, " +
               std::to_string(dm.studio_ids.size()) + " studio ids -> " + rc.data_dir);
  record_stage(rc, man, "gen_data", hash, dc.master_seed, wall,
               {abspath(rc.data_manifest_path())});
}

void cmd_pretrain_phone(RunContext& rc) {
  ensure_dirs(rc);
  RunManifest man = load_or_new_manifest(rc);
  DatasetManifest dm = load_data_manifest(rc);

  GeneratorConfig gc;
  gc.resolution = dm.config.resolution_lr;
  gc.d_z = int(rc.cfg.get_int("net.d_z", 64));
  gc.d_w = int(rc.cfg.get_int("net.d_w", 64));

  GloConfig glo;
  glo.steps = int(rc.cfg.get_int("pretrain.steps", 400));
  glo.batch = int(rc.cfg.get_int("pretrain.batch", 8));
  glo.lr = rc.cfg.get_double("pretrain.lr", 2e-3);
  glo.code_lr = rc.cfg.get_double("pretrain.code_lr", 0.3);
  glo.percp_weight = rc.cfg.get_double("pretrain.percp_weight", 1.0);

  MappingFitConfig mapf;
  mapf.steps = int(rc.cfg.get_int("pretrain.mapping_steps", 200));
  mapf.batch = int(rc.cfg.get_int("pretrain.mapping_batch", 64));
  mapf.lr = rc.cfg.get_double("pretrain.mapping_lr", 1e-2);

  EmbedTrainConfig ec;
  ec.steps = int(rc.cfg.get_int("pretrain.embed_steps", 300));
  ec.batch = int(rc.cfg.get_int("pretrain.embed_batch", 16));
  ec.lr = rc.cfg.get_double("pretrain.embed_lr", 2e-3);
  ec.n_ids = int(rc.cfg.get_int("pretrain.embed_ids", 24));
  ec.views = int(rc.cfg.get_int("pretrain.embed_views", 6));
  ec.holdout_views = int(rc.cfg.get_int("pretrain.embed_holdout_views", 2));
  double min_acc = rc.cfg.get_double("pretrain.embed_min_acc", 0.9);
  uint64_t seed = uint64_t(rc.cfg.get_int("pretrain.seed", int64_t(stage_seed(rc, "pretrain"))));
  rc.cfg.require_consumed_in("pretrain");
  rc.cfg.require_consumed_in("net");

  std::string hash =
      stage_hash(rc, {"pretrain", "net"}, seed, {rc.data_manifest_path()});
  if (stage_uptodate(rc, man, "pretrain_phone", hash)) {
    note(rc, "pretrain_phone: up to date");
    return;
  }
  auto t0 = std::chrono::steady_clock::now();

  std::vector<TextureSample> phone;
  for (int64_t id : dm.phone_ids)
    phone.push_back(load_phone_sample(dm, rc.data_dir, id, dm.config.resolution_lr, false));

  Generator<float> g(gc, Rng(seed).derive("g_phone").next_u64());
  const int64_t N = int64_t(phone.size()), L = g.n_layers(), D = g.cfg.d_w;

  // codes start at the mapped prior so synthesis statistics match sampling
  TensorF codes({N, L, D});
  {
    ad::NoGradGuard ng;
    Rng zr = Rng(seed).derive("glo_init_z");
    int64_t done = 0;
    while (done < N) {
      int64_t b = std::min<int64_t>(64, N - done);
      TensorF z = zr.normal_tensor<float>({b, gc.d_z});
      TensorF w = g.map_z(ad::constant<float>(z))->data;
      for (int64_t i = 0; i < b; ++i)
        for (int64_t l = 0; l < L; ++l)
          std::copy_n(w.data() + i * D, D, codes.data() + ((done + i) * L + l) * D);
      done += b;
    }
  }

  glo.seed = Rng(seed).derive("glo_train").next_u64();
  std::vector<double> curve = glo_pretrain(g, phone, codes, glo);
  note(rc, "pretrain_phone: reconstruction loss " + std::to_string(curve.front()) + " -> " +
               std::to_string(curve.back()) + " over " + std::to_string(curve.size()) + " steps");

  mapf.seed = Rng(seed).derive("map_fit").next_u64();
  double map_loss = fit_mapping_to_codes(g, codes, mapf);

  ec.seed = Rng(seed).derive("embed").next_u64();
  IdentityEmbedder<float> emb(std::min<int>(ec.n_ids, int(dm.phone_ids.size())),
                              Rng(seed).derive("emb_init").next_u64());
  double acc = train_embedder(emb, dm, ec);
  note(rc, "pretrain_phone: embedder held-out accuracy " + std::to_string(acc));
  if (acc < min_acc)
    throw NumericalError("embedder gate failed: held-out accuracy " + std::to_string(acc) +
                         " < required " + std::to_string(min_acc));

  std::ostringstream log;
  log << "step,glo_loss\n";
  for (size_t i = 0; i < curve.size(); ++i) log << i << "," << curve[i] << "\n";
  write_text(rc.logs_dir() + "/pretrain_log.csv", log.str());

  Checkpoint ck;
  ck.step = glo.steps;
  ck.config_hash = hash;
  nlohmann::json extra = {{"resolution", gc.resolution},
                          {"d_z", gc.d_z},
                          {"d_w", gc.d_w},
                          {"n_embed_classes", std::min<int>(ec.n_ids, int(dm.phone_ids.size()))},
                          {"embed_acc", acc},
                          {"glo_final", curve.back()},
                          {"mapping_final", map_loss}};
  ck.extra_json = extra.dump();
  store_params(ck, g.params, "g/");
  store_params(ck, emb.params, "emb/");
  save_checkpoint(ck, rc.pretrain_ckpt());

  double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  record_stage(rc, man, "pretrain_phone", hash, seed, wall,
               {"pretrain.ckpt", "logs/pretrain_log.csv"});
}

namespace {

// generator + embedder as persisted by cmd_pretrain_phone
struct PretrainedNets {
  GeneratorConfig gc;
  Generator<float> g;
  IdentityEmbedder<float> emb;
};

PretrainedNets load_pretrained(const RunContext& rc) {
  require_file(rc.pretrain_ckpt(), "cmd_pretrain_phone");
  Checkpoint ck = load_checkpoint(rc.pretrain_ckpt());
  GeneratorConfig gc = generator_config_from_checkpoint(ck);
  nlohmann::json j = nlohmann::json::parse(ck.extra_json);
  PretrainedNets out{gc, Generator<float>(gc, 0),
                     IdentityEmbedder<float>(j.value("n_embed_classes", 2), 0)};
  load_params(ck, out.g.params, "g/");
  load_params(ck, out.emb.params, "emb/");
  return out;
}

}  // namespace

void cmd_invert(RunContext& rc) {
  ensure_dirs(rc);
  RunManifest man = load_or_new_manifest(rc);
  DatasetManifest dm = load_data_manifest(rc);

  InvertSetOptions opts;
  opts.inversion.iterations = int(rc.cfg.get_int("invert.iterations", 300));
  opts.inversion.step = rc.cfg.get_double("invert.step", 0.05);
  opts.inversion.momentum = rc.cfg.get_double("invert.momentum", 0.9);
  opts.inversion.l2_weight = rc.cfg.get_double("invert.l2_weight", 1.0);
  opts.inversion.percp_weight = rc.cfg.get_double("invert.percp_weight", 1.0);
  opts.inversion.mean_w_samples = int(rc.cfg.get_int("invert.mean_w_samples", 1024));
  opts.inversion.seed = uint64_t(rc.cfg.get_int("invert.seed", int64_t(stage_seed(rc, "invert"))));
  opts.threads = int(rc.cfg.get_int("invert.threads", 0));
  opts.max_failure_rate = rc.cfg.get_double("invert.max_failure_rate", 0.01);
  double min_median = rc.cfg.get_double("invert.min_median_psnr", 28.0);
  rc.cfg.require_consumed_in("invert");

  require_file(rc.pretrain_ckpt(), "cmd_pretrain_phone");
  std::string hash = stage_hash(rc, {"invert"}, opts.inversion.seed,
                                {rc.data_manifest_path(), rc.pretrain_ckpt()});
  if (stage_uptodate(rc, man, "invert", hash)) {
    note(rc, "invert: up to date");
    return;
  }
  auto t0 = std::chrono::steady_clock::now();

  PretrainedNets nets = load_pretrained(rc);
  FeatureExtractor<float> fx;
  InvertedSet set = build_inverted_set(dm, rc.data_dir, nets.g, fx, opts,
                                       sha256_file(rc.data_manifest_path()));

  std::vector<double> psnrs;
  for (const auto& e : set.entries) psnrs.push_back(e.masked_psnr);
  std::sort(psnrs.begin(), psnrs.end());
  double median = psnrs.empty() ? 0 : psnrs[psnrs.size() / 2];
  note(rc, "invert: " + std::to_string(set.entries.size()) + " identities, median masked psnr " +
               std::to_string(median) + " dB");
  if (median < min_median)
    throw NumericalError("inversion quality gate failed: median masked psnr " +
                         std::to_string(median) + " dB < " + std::to_string(min_median) +
                         " dB; downstream stages blocked");

  Checkpoint ck = inverted_set_to_checkpoint(set);
  ck.step = opts.inversion.iterations;
  ck.config_hash = hash;
  save_checkpoint(ck, rc.inverted_ckpt());

  double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  record_stage(rc, man, "invert", hash, opts.inversion.seed, wall, {"inverted.ckpt"});
}

namespace {

FinetuneConfig finetune_config_from(Config& cfg, uint64_t default_seed) {
  FinetuneConfig fc;
  fc.lambda1 = cfg.get_double("finetune.lambda1", 0.5);
  fc.lambda2 = cfg.get_double("finetune.lambda2", 10.0);
  fc.gamma_r1 = cfg.get_double("finetune.gamma_r1", 10.0);
  fc.freeze_upto = int(cfg.get_int("finetune.freeze_upto", 8));
  std::string src = cfg.get_string("finetune.latent_source", "wplus");
  if (src == "wplus")
    fc.latent_source = FinetuneConfig::LatentSource::WPlusSet;
  else if (src == "z")
    fc.latent_source = FinetuneConfig::LatentSource::ZSpace;
  else
    throw ConfigError("finetune.latent_source must be 'wplus' or 'z', got '" + src + "'");
  fc.steps = int(cfg.get_int("finetune.steps", 200));
  fc.batch = int(cfg.get_int("finetune.batch", 4));
  fc.lr_g = cfg.get_double("finetune.lr_g", 1e-3);
  fc.lr_d = cfg.get_double("finetune.lr_d", 1e-3);
  fc.seed = uint64_t(cfg.get_int("finetune.seed", int64_t(default_seed)));
  return fc;
}

// studio reals + paired supervision + the latent pool, straight from disk
FinetuneData<float> finetune_data_from(const DatasetManifest& dm, const std::string& data_dir,
                                       const InvertedSet& inv, int n_paired_use) {
  FinetuneData<float> data;
  const int64_t R = dm.config.resolution_lr;
  const int64_t ns = int64_t(dm.studio_ids.size());
  data.studio_images = TensorF({ns, 3, R, R});
  for (int64_t i = 0; i < ns; ++i) {
    TensorF img = read_ppm16(studio_lr_path(data_dir, dm.studio_ids[size_t(i)]));
    std::copy_n(img.data(), 3 * R * R, data.studio_images.data() + i * 3 * R * R);
    data.studio_ids.push_back(dm.studio_ids[size_t(i)]);
  }

  const int64_t M = int64_t(inv.entries.size());
  if (M == 0) throw MissingArtifactError("inverted set is empty");
  const int64_t L = inv.entries[0].w_plus.dim(0), D = inv.entries[0].w_plus.dim(1);
  data.inverted_w = TensorF({M, L, D});
  for (int64_t i = 0; i < M; ++i) {
    std::copy_n(inv.entries[size_t(i)].w_plus.data(), L * D, data.inverted_w.data() + i * L * D);
    data.inverted_ids.push_back(inv.entries[size_t(i)].identity_id);
  }

  int64_t K = std::min<int64_t>(n_paired_use, int64_t(dm.paired_ids.size()));
  if (K > 0) {
    data.paired_w = TensorF({K, L, D});
    data.paired_gt = TensorF({K, 3, R, R});
    for (int64_t k = 0; k < K; ++k) {
      int64_t id = dm.paired_ids[size_t(k)];
      const InvertedEntry& e = inv.at(id);
      std::copy_n(e.w_plus.data(), L * D, data.paired_w.data() + k * L * D);
      TensorF gt = read_ppm16(studio_lr_path(data_dir, id));
      std::copy_n(gt.data(), 3 * R * R, data.paired_gt.data() + k * 3 * R * R);
      data.paired_ids.push_back(id);
    }
  }
  return data;
}

}  // namespace

void cmd_finetune_studio(RunContext& rc) {
  ensure_dirs(rc);
  RunManifest man = load_or_new_manifest(rc);
  DatasetManifest dm = load_data_manifest(rc);

  FinetuneConfig fc = finetune_config_from(rc.cfg, stage_seed(rc, "finetune"));
  int n_paired_use = int(rc.cfg.get_int("finetune.n_paired", int64_t(dm.paired_ids.size())));
  rc.cfg.require_consumed_in("finetune");

  require_file(rc.inverted_ckpt(), "cmd_invert");
  std::string hash = stage_hash(rc, {"finetune"}, fc.seed,
                                {rc.data_manifest_path(), rc.pretrain_ckpt(), rc.inverted_ckpt()});
  if (stage_uptodate(rc, man, "finetune_studio", hash)) {
    note(rc, "finetune_studio: up to date");
    return;
  }
  auto t0 = std::chrono::steady_clock::now();

  PretrainedNets nets = load_pretrained(rc);
  InvertedSet inv = inverted_set_from_checkpoint(load_checkpoint(rc.inverted_ckpt()));

  Generator<float> g_studio(nets.gc, Rng(fc.seed).derive("g_studio").next_u64());
  g_studio.params.load_state(nets.g.params.state_dict());
  Discriminator<float> disc(nets.gc, Rng(fc.seed).derive("disc").next_u64());

  FinetuneData<float> data = finetune_data_from(dm, rc.data_dir, inv, n_paired_use);
  FinetuneState<float> st(fc, nets.g, std::move(g_studio), std::move(disc), nets.emb,
                          std::move(data));

  std::ostringstream log;
  log << loss_csv_header() << "\n";
  for (int s = 0; s < fc.steps; ++s) {
    LossBreakdown b = finetune_step(st);
    log << loss_csv_row(st.step - 1, b) << "\n";
  }
  if (fc.latent_source == FinetuneConfig::LatentSource::WPlusSet) assert_latents_member(st, inv);
  write_text(rc.logs_dir() + "/finetune_log.csv", log.str());
  note(rc, "finetune_studio: " + std::to_string(fc.steps) + " steps, final total " +
               std::to_string(st.log.empty() ? 0.0 : st.log.back().total));

  Checkpoint ck;
  ck.step = fc.steps;
  ck.config_hash = hash;
  nlohmann::json extra = {{"resolution", nets.gc.resolution},
                          {"d_z", nets.gc.d_z},
                          {"d_w", nets.gc.d_w},
                          {"freeze_upto", fc.freeze_upto},
                          {"latent_source", fc.latent_source == FinetuneConfig::LatentSource::WPlusSet
                                                ? "wplus"
                                                : "z"},
                          {"final_total", st.log.empty() ? 0.0 : st.log.back().total},
                          {"used_latents", st.used_latent_ids.size()}};
  ck.extra_json = extra.dump();
  store_params(ck, st.g_studio.params, "g/");
  store_params(ck, st.disc.params, "d/");
  save_checkpoint(ck, rc.finetune_ckpt());

  double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  record_stage(rc, man, "finetune_studio", hash, fc.seed, wall,
               {"finetune.ckpt", "logs/finetune_log.csv"});
}

namespace {

struct DiffusionSettings {
  DiffusionSchedule sched;
  DiffusionTrainConfig train;
  DenoiserConfig dcfg;
};

DiffusionSettings diffusion_settings_from(Config& cfg, uint64_t default_seed) {
  DiffusionSettings s;
  int T = int(cfg.get_int("diffusion.T", 15));
  double kappa = cfg.get_double("diffusion.kappa", 2.0);
  double eta1 = cfg.get_double("diffusion.eta1", 0.0016);
  double etaT = cfg.get_double("diffusion.etaT", 0.999);
  s.sched = make_schedule(T, kappa, eta1, etaT);
  s.train.steps = int(cfg.get_int("diffusion.steps", 600));
  s.train.batch = int(cfg.get_int("diffusion.batch", 8));
  s.train.crop = int(cfg.get_int("diffusion.crop", 32));
  s.train.lr = cfg.get_double("diffusion.lr", 2e-3);
  s.train.lr_final_frac = cfg.get_double("diffusion.lr_final_frac", 0.05);
  s.train.mode = cond_mode_from_name(
      cfg.get_string("diffusion.cond_mode", "train_and_infer_cond"));
  std::string gop = cfg.get_string("diffusion.grad_op", "sobel_mag");
  if (gop == "sobel_mag")
    s.train.grad_op = GradOp::sobel_mag;
  else if (gop == "central_diff_mag")
    s.train.grad_op = GradOp::central_diff_mag;
  else
    throw ConfigError("diffusion.grad_op must be sobel_mag or central_diff_mag, got '" + gop +
                      "'");
  s.train.cond_scale = cfg.get_double("diffusion.cond_scale", 0.5);
  s.train.seed = uint64_t(cfg.get_int("diffusion.seed", int64_t(default_seed)));
  s.dcfg.c0 = int(cfg.get_int("denoiser.c0", 24));
  s.dcfg.c1 = int(cfg.get_int("denoiser.c1", 32));
  s.dcfg.temb_dim = int(cfg.get_int("denoiser.temb_dim", 32));
  return s;
}

std::vector<DiffusionExample<float>> diffusion_examples_from(const DatasetManifest& dm,
                                                             const std::string& data_dir) {
  std::vector<DiffusionExample<float>> out;
  const int hr = dm.config.resolution_hr;
  for (int64_t id : dm.paired_ids) {
    DiffusionExample<float> ex;
    ex.hr = read_ppm16(studio_hr_path(data_dir, id));
    ex.lr_on_hr_grid = upsample_image(read_ppm16(studio_lr_path(data_dir, id)), hr, hr);
    ex.phone_hr = read_ppm16(phone_hr_path(data_dir, id));
    out.push_back(std::move(ex));
  }
  return out;
}

}  // namespace

void cmd_train_diffusion(RunContext& rc) {
  ensure_dirs(rc);
  RunManifest man = load_or_new_manifest(rc);
  DatasetManifest dm = load_data_manifest(rc);

  DiffusionSettings set = diffusion_settings_from(rc.cfg, stage_seed(rc, "diffusion"));
  rc.cfg.require_consumed_in("diffusion");
  rc.cfg.require_consumed_in("denoiser");

  std::string hash =
      stage_hash(rc, {"diffusion", "denoiser"}, set.train.seed, {rc.data_manifest_path()});
  if (stage_uptodate(rc, man, "train_diffusion", hash)) {
    note(rc, "train_diffusion: up to date");
    return;
  }
  auto t0 = std::chrono::steady_clock::now();

  std::vector<DiffusionExample<float>> data = diffusion_examples_from(dm, rc.data_dir);
  if (data.empty())
    throw MissingArtifactError("no paired identities available for diffusion training");

  Denoiser<float> net(set.dcfg, Rng(set.train.seed).derive("denoiser_init").next_u64());
  std::vector<double> curve = train_denoiser(net, data, set.sched, set.train);
  note(rc, "train_diffusion: loss " + std::to_string(curve.front()) + " -> " +
               std::to_string(curve.back()) + " over " + std::to_string(curve.size()) + " steps");

  std::ostringstream log;
  log << "step,mse\n";
  for (size_t i = 0; i < curve.size(); ++i) log << i << "," << curve[i] << "\n";
  write_text(rc.logs_dir() + "/diffusion_log.csv", log.str());

  Checkpoint ck;
  ck.step = set.train.steps;
  ck.config_hash = hash;
  nlohmann::json extra = {{"schedule", nlohmann::json::parse(schedule_to_json(set.sched))},
                          {"cond_mode", cond_mode_name(set.train.mode)},
                          {"grad_op", set.train.grad_op == GradOp::sobel_mag
                                          ? "sobel_mag"
                                          : "central_diff_mag"},
                          {"cond_scale", set.train.cond_scale},
                          {"resolution_hr", dm.config.resolution_hr},
                          {"c0", set.dcfg.c0},
                          {"c1", set.dcfg.c1},
                          {"temb_dim", set.dcfg.temb_dim}};
  ck.extra_json = extra.dump();
  store_params(ck, net.params, "f/");
  save_checkpoint(ck, rc.diffusion_ckpt());

  double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  record_stage(rc, man, "train_diffusion", hash, set.train.seed, wall,
               {"diffusion.ckpt", "logs/diffusion_log.csv"});
}

namespace {

struct DiffusionNets {
  Denoiser<float> net;
  DiffusionSchedule sched;
  SampleOptions<float> opts;
};

DiffusionNets load_diffusion(const RunContext& rc) {
  require_file(rc.diffusion_ckpt(), "cmd_train_diffusion");
  Checkpoint ck = load_checkpoint(rc.diffusion_ckpt());
  nlohmann::json j = nlohmann::json::parse(ck.extra_json);
  DenoiserConfig dc;
  dc.c0 = j.value("c0", 24);
  dc.c1 = j.value("c1", 32);
  dc.temb_dim = j.value("temb_dim", 32);
  DiffusionNets out{Denoiser<float>(dc, 0), schedule_from_json(j.at("schedule").dump()),
                    SampleOptions<float>{}};
  load_params(ck, out.net.params, "f/");
  out.opts.mode = cond_mode_from_name(j.value("cond_mode", "train_and_infer_cond"));
  out.opts.grad_op =
      j.value("grad_op", "sobel_mag") == std::string("sobel_mag") ? GradOp::sobel_mag
                                                                  : GradOp::central_diff_mag;
  out.opts.cond_scale = j.value("cond_scale", 0.5);
  return out;
}

std::string infer_output_path(const RunContext& rc, int64_t id) {
  return rc.outputs_dir() + "/infer_" + std::to_string(id) + ".ppm";
}

}  // namespace

void cmd_infer(RunContext& rc) {
  ensure_dirs(rc);
  RunManifest man = load_or_new_manifest(rc);
  DatasetManifest dm = load_data_manifest(rc);

  int invert_iters = int(rc.cfg.get_int("infer.invert_iterations", 300));
  double invert_step = rc.cfg.get_double("infer.invert_step", 0.05);
  int mean_w_samples = int(rc.cfg.get_int("infer.mean_w_samples", 1024));
  uint64_t seed = uint64_t(rc.cfg.get_int("infer.seed", int64_t(stage_seed(rc, "infer"))));
  std::string which = rc.cfg.get_string("infer.ids", "all_holdout");
  rc.cfg.require_consumed_in("infer");

  require_file(rc.pretrain_ckpt(), "cmd_pretrain_phone");
  require_file(rc.finetune_ckpt(), "cmd_finetune_studio");
  require_file(rc.diffusion_ckpt(), "cmd_train_diffusion");

  std::string hash = stage_hash(
      rc, {"infer"}, seed,
      {rc.data_manifest_path(), rc.pretrain_ckpt(), rc.finetune_ckpt(), rc.diffusion_ckpt()});
  if (stage_uptodate(rc, man, "infer", hash)) {
    note(rc, "infer: up to date");
    return;
  }
  auto t0 = std::chrono::steady_clock::now();

  PretrainedNets nets = load_pretrained(rc);
  Checkpoint fck = load_checkpoint(rc.finetune_ckpt());
  Generator<float> g_studio(generator_config_from_checkpoint(fck), 0);
  load_params(fck, g_studio.params, "g/");
  DiffusionNets diff = load_diffusion(rc);
  FeatureExtractor<float> fx;

  std::vector<int64_t> ids;
  if (which == "holdout_paired" || which == "all_holdout")
    ids.insert(ids.end(), dm.holdout_paired_ids.begin(), dm.holdout_paired_ids.end());
  if (which == "holdout_unpaired" || which == "all_holdout")
    ids.insert(ids.end(), dm.holdout_unpaired_ids.begin(), dm.holdout_unpaired_ids.end());
  if (ids.empty())
    throw ConfigError("infer.ids must be holdout_paired, holdout_unpaired or all_holdout");

  const int lr_res = dm.config.resolution_lr, hr_res = dm.config.resolution_hr;
  std::vector<std::string> outputs;
  for (int64_t id : ids) {
    TextureSample phone_lr = load_phone_sample(dm, rc.data_dir, id, lr_res, false);
    TensorF phone_hr = read_ppm16(phone_hr_path(rc.data_dir, id));

    InversionOptions iopts;
    iopts.iterations = invert_iters;
    iopts.step = invert_step;
    iopts.mean_w_samples = mean_w_samples;
    iopts.seed = Rng(seed).derive("infer_invert").derive(uint64_t(id)).next_u64();
    InversionResult inv = invert_wplus(phone_lr, nets.g, fx, iopts);

    TensorF lr_out;
    {
      ad::NoGradGuard ng;
      TensorF w = inv.w_plus;
      lr_out = squeeze_img(
          g_studio.synthesize_wplus(ad::constant<float>(w.reshaped({1, g_studio.n_layers(),
                                                                    g_studio.cfg.d_w})))
              ->data);
    }
    TensorF lr_up = upsample_image(lr_out, hr_res, hr_res);

    SampleOptions<float> sopts = diff.opts;
    sopts.seed = Rng(seed).derive("infer_sample").derive(uint64_t(id)).next_u64();
    TensorF final = sample(lr_up, phone_hr, diff.net, diff.sched, sopts);

    std::string out_path = infer_output_path(rc, id);
    write_ppm16(out_path, final);
    outputs.push_back("outputs/infer_" + std::to_string(id) + ".ppm");

    // qualitative panel: input | translated LR | super-resolved | ground truth
    IdentityParams ip = make_identity(dm.record(id).seed);
    ip.identity_id = id;
    TensorF gt = render_texture(ip, LightingCondition::studio(), hr_res).image;
    TensorF panel = hstack_images({phone_hr, lr_up, final, gt});
    std::string fig = rc.figures_dir() + "/infer_" + std::to_string(id) + ".png";
    write_png8(fig, panel);
    outputs.push_back("figures/infer_" + std::to_string(id) + ".png");
    note(rc, "infer: id " + std::to_string(id) + " done (inversion loss " +
                 std::to_string(inv.final_loss) + ")");
  }

  double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  record_stage(rc, man, "infer", hash, seed, wall, outputs);
}

void cmd_fit_colorxform(RunContext& rc) {
  ensure_dirs(rc);
  RunManifest man = load_or_new_manifest(rc);
  DatasetManifest dm = load_data_manifest(rc);

  ColorFitOptions fo;
  fo.k = int(rc.cfg.get_int("colorxform.k", 32));
  fo.ridge = rc.cfg.get_double("colorxform.ridge", 1e-6);
  std::string solver = rc.cfg.get_string("colorxform.solver", "auto");
  if (solver == "auto")
    fo.solver = ColorFitOptions::Solver::auto_pick;
  else if (solver == "normal_eq")
    fo.solver = ColorFitOptions::Solver::normal_eq;
  else if (solver == "conj_grad")
    fo.solver = ColorFitOptions::Solver::conj_grad;
  else
    throw ConfigError("colorxform.solver must be auto, normal_eq or conj_grad");
  fo.max_iters = int(rc.cfg.get_int("colorxform.max_iters", 20000));
  uint64_t expr_seed =
      uint64_t(rc.cfg.get_int("colorxform.expr_seed", int64_t(stage_seed(rc, "colorxform"))));
  rc.cfg.require_consumed_in("colorxform");

  // needs the inference outputs for every paired holdout id
  std::vector<std::string> inputs = {rc.data_manifest_path()};
  for (int64_t id : dm.holdout_paired_ids) {
    require_file(infer_output_path(rc, id), "cmd_infer");
    inputs.push_back(infer_output_path(rc, id));
  }
  std::string hash = stage_hash(rc, {"colorxform"}, expr_seed, inputs);
  if (stage_uptodate(rc, man, "fit_colorxform", hash)) {
    note(rc, "fit_colorxform: up to date");
    return;
  }
  auto t0 = std::chrono::steady_clock::now();

  const int hr = dm.config.resolution_hr;
  FeatureExtractor<float> fx;
  Checkpoint ck;
  ck.config_hash = hash;
  std::ostringstream diag;
  diag << "id,residual_sse,grad_norm,percp_untransformed,percp_transformed\n";
  nlohmann::json extra = nlohmann::json::array();
  for (int64_t id : dm.holdout_paired_ids) {
    TensorF target = read_ppm16(infer_output_path(rc, id));  // studio-like output
    TensorF phone = read_ppm16(phone_hr_path(rc.data_dir, id));
    ColorTransform xf = fit_gain_bias(target, phone, fo);

    // re-animation probe: map an unseen expression capture and score it
    // against the true studio rendering of the same expression
    IdentityParams ip = make_identity(dm.record(id).seed);
    uint64_t es = Rng(expr_seed).derive(uint64_t(id)).next_u64();
    TensorF phone_expr = render_expression(ip, dm.record(id).wild, hr, es).image;
    TensorF studio_expr = render_expression(ip, LightingCondition::studio(), hr, es).image;
    TensorF mapped = apply_transform(xf, phone_expr);
    double before = percp_distance(phone_expr, studio_expr, fx);
    double after = percp_distance(mapped, studio_expr, fx);

    color_transform_to_checkpoint(xf, ck, "color/" + std::to_string(id));
    diag << id << "," << xf.residual_sse << "," << xf.grad_norm << "," << before << "," << after
         << "\n";
    extra.push_back({{"id", id}, {"percp_before", before}, {"percp_after", after}});
    note(rc, "fit_colorxform: id " + std::to_string(id) + " percp " + std::to_string(before) +
                 " -> " + std::to_string(after));
  }
  ck.extra_json = nlohmann::json{{"per_id", extra}, {"k", fo.k}, {"ridge", fo.ridge}}.dump();
  save_checkpoint(ck, rc.colorxform_ckpt());
  write_text(rc.reports_dir() + "/colorxform.csv", diag.str());

  double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  record_stage(rc, man, "fit_colorxform", hash, expr_seed, wall,
               {"colorxform.ckpt", "reports/colorxform.csv"});
}

void cmd_evaluate(RunContext& rc) {
  ensure_dirs(rc);
  RunManifest man = load_or_new_manifest(rc);
  DatasetManifest dm = load_data_manifest(rc);

  std::string method = rc.cfg.get_string("evaluate.method_name", "texbridge");
  rc.cfg.require_consumed_in("evaluate");

  std::vector<std::string> inputs = {rc.data_manifest_path()};
  for (int64_t id : dm.holdout_paired_ids) {
    require_file(infer_output_path(rc, id), "cmd_infer");
    inputs.push_back(infer_output_path(rc, id));
  }
  for (int64_t id : dm.holdout_unpaired_ids) {
    require_file(infer_output_path(rc, id), "cmd_infer");
    inputs.push_back(infer_output_path(rc, id));
  }
  require_file(rc.pretrain_ckpt(), "cmd_pretrain_phone");
  inputs.push_back(rc.pretrain_ckpt());
  std::string hash = stage_hash(rc, {"evaluate"}, 0, inputs);
  if (stage_uptodate(rc, man, "evaluate", hash)) {
    note(rc, "evaluate: up to date");
    return;
  }
  auto t0 = std::chrono::steady_clock::now();

  DatasetSplit split = split_from_manifest(dm);
  FeatureExtractor<float> fx;
  PretrainedNets nets = load_pretrained(rc);

  std::vector<IdImage> paired_out, paired_gt;
  for (int64_t id : dm.holdout_paired_ids) {
    paired_out.push_back({uint64_t(id), read_ppm16(infer_output_path(rc, id))});
    paired_gt.push_back({uint64_t(id), read_ppm16(studio_hr_path(rc.data_dir, id))});
  }
  PairedEvalReport paired = evaluate_paired(paired_out, paired_gt, split, fx);
  paired.method = method;

  std::vector<IdImage> unpaired_out, unpaired_phone;
  for (int64_t id : dm.holdout_unpaired_ids) {
    unpaired_out.push_back({uint64_t(id), read_ppm16(infer_output_path(rc, id))});
    unpaired_phone.push_back({uint64_t(id), read_ppm16(phone_hr_path(rc.data_dir, id))});
  }
  std::vector<TensorF> studio_set;
  for (int64_t id : dm.studio_ids) studio_set.push_back(read_ppm16(studio_hr_path(rc.data_dir, id)));
  UnpairedEvalReport unpaired =
      evaluate_unpaired(unpaired_out, unpaired_phone, studio_set, split, nets.emb, fx);
  unpaired.method = method;

  write_text(rc.reports_dir() + "/paired.csv", paired_report_csv(paired));
  write_text(rc.reports_dir() + "/paired.json", paired_report_json(paired));
  write_text(rc.reports_dir() + "/paired.md", paired_report_markdown(paired));
  write_text(rc.reports_dir() + "/unpaired.csv", unpaired_report_csv(unpaired));
  write_text(rc.reports_dir() + "/unpaired.json", unpaired_report_json(unpaired));
  write_text(rc.reports_dir() + "/unpaired.md", unpaired_report_markdown(unpaired));
  note(rc, "evaluate: paired psnr " + std::to_string(paired.mean_psnr) + " dB, ssim " +
               std::to_string(paired.mean_ssim) + "; unpaired faceid " +
               std::to_string(unpaired.mean_faceid) + ", kid " +
               std::to_string(unpaired.kid_vs_studio));

  double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  record_stage(rc, man, "evaluate", hash, 0, wall,
               {"reports/paired.csv", "reports/paired.json", "reports/paired.md",
                "reports/unpaired.csv", "reports/unpaired.json", "reports/unpaired.md"});
}

// ---------------------------------------------------------------------------
// command dispatch
// ---------------------------------------------------------------------------

void run_command(const std::string& name, RunContext& rc) {
  if (name == "gen_data")
    cmd_gen_data(rc);
  else if (name == "pretrain_phone")
    cmd_pretrain_phone(rc);
  else if (name == "invert")
    cmd_invert(rc);
  else if (name == "finetune_studio")
    cmd_finetune_studio(rc);
  else if (name == "train_diffusion")
    cmd_train_diffusion(rc);
  else if (name == "infer")
    cmd_infer(rc);
  else if (name == "fit_colorxform")
    cmd_fit_colorxform(rc);
  else if (name == "evaluate")
    cmd_evaluate(rc);
  else if (name == "ablate")
    cmd_ablate(rc);
  else if (name == "run_all") {
    for (const char* s : {"gen_data", "pretrain_phone", "invert", "finetune_studio",
                          "train_diffusion", "infer", "fit_colorxform", "evaluate"})
      run_command(s, rc);
  } else {
    throw ConfigError("unknown command '" + name + "'");
  }
}

int run_command_exit_code(const std::string& name, RunContext& rc) {
  try {
    run_command(name, rc);
    return kExitOk;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return ConfigError::exit_code;
  } catch (const MissingArtifactError& e) {
    std::cerr << "missing artifact: " << e.what() << "\n";
    return MissingArtifactError::exit_code;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return NumericalError::exit_code;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return ConfigError::exit_code;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return NumericalError::exit_code;
  }
}

}  // namespace texbridge
