#include "texbridge/resshift.hpp"

#include <nlohmann/json.hpp>

namespace texbridge {

DiffusionSchedule make_schedule(int T, double kappa, double eta1, double etaT) {
  if (T < 2) throw std::invalid_argument("schedule needs T >= 2");
  if (kappa < 0) throw std::invalid_argument("kappa must be non-negative");
  if (!(eta1 > 0) || !(etaT > eta1) || !(etaT <= 1))
    throw std::invalid_argument("schedule requires 0 < eta1 < etaT <= 1");

  DiffusionSchedule s;
  s.T = T;
  s.kappa = kappa;
  s.eta.assign(static_cast<size_t>(T) + 1, 0.0);
  s.alpha.assign(static_cast<size_t>(T) + 1, 0.0);

  const double sq1 = std::sqrt(eta1), sqT = std::sqrt(etaT);
  const double r = std::pow(sqT / sq1, 1.0 / (T - 1));
  for (int t = 1; t <= T; ++t) {
    double target;
    if (t == 1)
      target = eta1;
    else if (t == T)
      target = etaT;
    else {
      double root = sq1 * std::pow(r, t - 1);
      target = root * root;
    }
    // accumulate so that eta[t] is bitwise the left-fold sum of alpha[1..t]
    s.alpha[static_cast<size_t>(t)] = target - s.eta[static_cast<size_t>(t - 1)];
    s.eta[static_cast<size_t>(t)] =
        s.eta[static_cast<size_t>(t - 1)] + s.alpha[static_cast<size_t>(t)];
    if (!(s.alpha[static_cast<size_t>(t)] > 0))
      throw std::invalid_argument("schedule produced a non-increasing eta at t=" +
                                  std::to_string(t));
  }
  return s;
}

std::string schedule_to_json(const DiffusionSchedule& sched) {
  nlohmann::json j;
  j["T"] = sched.T;
  j["kappa"] = sched.kappa;
  j["eta"] = sched.eta;
  j["alpha"] = sched.alpha;
  return j.dump();
}

DiffusionSchedule schedule_from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  DiffusionSchedule s;
  s.T = j.at("T").get<int>();
  s.kappa = j.at("kappa").get<double>();
  s.eta = j.at("eta").get<std::vector<double>>();
  s.alpha = j.at("alpha").get<std::vector<double>>();
  if (static_cast<int>(s.eta.size()) != s.T + 1 || s.alpha.size() != s.eta.size() ||
      s.eta.empty() || s.eta[0] != 0)
    throw MissingArtifactError("malformed diffusion schedule in checkpoint");
  return s;
}

CondMode cond_mode_from_name(const std::string& name) {
  if (name == "vanilla") return CondMode::vanilla;
  if (name == "infer_only_cond") return CondMode::infer_only_cond;
  if (name == "train_and_infer_cond") return CondMode::train_and_infer_cond;
  throw ConfigError("unknown conditioning mode: " + name +
                    " (want vanilla|infer_only_cond|train_and_infer_cond)");
}

}  // namespace texbridge
