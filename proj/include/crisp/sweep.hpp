#pragma once

#include "crisp/common.hpp"
#include "crisp/corpus.hpp"
#include "crisp/eval.hpp"
#include "crisp/sae.hpp"
#include "crisp/selection.hpp"
#include "crisp/unlearn.hpp"

#include <nlohmann/json.hpp>

#include <map>
#include <string>
#include <vector>

namespace crisp {

struct SweepSpace {
  // CRISP ranges
  std::vector<int> k{5, 10, 20, 30, 50};
  std::vector<double> lambda{10, 20, 30, 40, 50};
  std::vector<int> rank{4, 8, 16};
  double lr_lo = 1e-5, lr_hi = 1e-4;
  long steps = 500;
  int batch = 8;
  double beta = 0.99, gamma = 0.01, tau = 3.0, eps = 1e-8;
  // RMU ranges
  std::vector<double> rmu_steer{2, 5, 10, 20, 30, 50, 100};
  std::vector<double> rmu_alpha{5, 30, 50, 100, 1000};
  double rmu_lr_lo = 1e-4, rmu_lr_hi = 1e-3;
  long rmu_steps = 300;

  nlohmann::json to_json() const;
  static SweepSpace from_json(const nlohmann::json& j);
};

struct SweepPoint {
  std::string method;  // "crisp" | "rmu"
  std::string digest;  // hex hash of the sampled config
  nlohmann::json config;
  double u = 0, r = 0, m = 0, f = 0, c = 0, overall = 0;
  uint64_t seed = 0;
  double wall_time_s = 0;
  bool failed = false;
  std::string error;
};

struct SweepContext {
  const LmParams* lm = nullptr;
  const std::map<int, SaeParams>* saes = nullptr;
  const std::vector<FeatureStats>* stats = nullptr;  // one per sae layer
  const Corpora* corpora = nullptr;
  EvalInputs eval_inputs;
  std::vector<int> sae_layers{2, 3};
  std::vector<int> opt_layers{0, 1};
  EvalReport orig_report;
};

std::vector<SweepPoint> run_sweep(const SweepContext& ctx, const SweepSpace& space,
                                  const std::string& method, int n, uint64_t seed, int jobs);

// Per-bucket best-retain envelope over unlearn-accuracy buckets
// [0,w), [w,2w), ...; ties resolved by lower U then lower digest. Output is
// ordered by ascending U. Failed points are excluded.
std::vector<SweepPoint> pareto_envelope(const std::vector<SweepPoint>& points,
                                        double bucket_width);

void write_sweep_json(const std::string& path, const std::vector<SweepPoint>& points,
                      uint64_t seed, uint64_t config_hash);
std::vector<SweepPoint> read_sweep_json(const std::string& path);

void write_frontier_csv(const std::string& path, const std::vector<SweepPoint>& frontier,
                        double bucket_width);

// Scatter of all points with per-method envelopes and the ideal star
// (U = chance level, R = original retain accuracy).
void write_frontier_svg(const std::string& path, const std::vector<SweepPoint>& points,
                        double bucket_width, double ideal_u, double ideal_r);

}  // namespace crisp
