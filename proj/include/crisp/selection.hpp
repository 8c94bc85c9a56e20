#pragma once

#include "crisp/common.hpp"
#include "crisp/sae.hpp"

#include <map>
#include <string>
#include <vector>

namespace crisp {

enum class StatsSide { target, retain };

// Per-layer activation-count and activation-mass statistics for every SAE
// feature over the target and retain corpora.
struct FeatureStats {
  int layer = 0;
  long tokens_seen_target = 0;
  long tokens_seen_retain = 0;
  std::vector<long> count_target, count_retain;
  std::vector<double> mass_target, mass_retain;

  explicit FeatureStats(int layer = 0, int n_features = 0)
      : layer(layer),
        count_target(size_t(n_features), 0),
        count_retain(size_t(n_features), 0),
        mass_target(size_t(n_features), 0.0),
        mass_retain(size_t(n_features), 0.0) {}

  int n_features() const { return int(count_target.size()); }
  void merge(const FeatureStats& other);
};

enum class FeatureClass { target, benign, shared, inactive };

struct SalientSet {
  std::map<int, std::vector<int>> layers;  // layer -> features, descending delta-phi
  int k = 0;
  double tau = 0.0;
  double eps = 1e-8;
};

struct ClassifyThresholds {
  double theta_hi = 0.05;
  double theta_lo = 0.01;
};

template <class S>
void accumulate_stats(const SaeParamsT<S>& sae, int acts_layer, const MatT<S>& h_rows,
                      StatsSide side, FeatureStats& stats) {
  if (acts_layer != sae.layer) throw InputError("activation layer does not match SAE layer");
  if (stats.n_features() == 0) stats = FeatureStats(sae.layer, sae.d_sae());
  if (stats.layer != sae.layer || stats.n_features() != sae.d_sae())
    throw InputError("stats shape does not match SAE");
  MatT<S> a = sae_encode(sae, h_rows);
  auto& count = side == StatsSide::target ? stats.count_target : stats.count_retain;
  auto& mass = side == StatsSide::target ? stats.mass_target : stats.mass_retain;
  for (Eigen::Index t = 0; t < a.rows(); ++t) {
    for (Eigen::Index i = 0; i < a.cols(); ++i) {
      const double v = double(a(t, i));
      if (v > 0.0) {
        count[size_t(i)] += 1;
        mass[size_t(i)] += v;
      }
    }
  }
  (side == StatsSide::target ? stats.tokens_seen_target : stats.tokens_seen_retain) += a.rows();
}

std::vector<long> count_diff(const FeatureStats& stats);
std::vector<double> activation_ratio(const FeatureStats& stats, double eps);

// Top-k by activation-count difference (ties to the lower feature index),
// then filter by the relative activation ratio threshold.
std::vector<int> select_salient(const FeatureStats& stats, int k, double tau, double eps);

std::vector<FeatureClass> classify_features(const FeatureStats& stats,
                                            const ClassifyThresholds& th = {});

const char* feature_class_name(FeatureClass c);

void export_scatter(const FeatureStats& stats, const std::vector<FeatureClass>& classes,
                    const std::string& csv_path, const std::string& svg_path);

// Stats file: CSV with layer,feature,count_target,count_retain,mass_target,
// mass_retain plus reporting-only normalized frequencies.
void write_stats_csv(const std::string& path, const std::vector<FeatureStats>& all,
                     const std::string& meta_comment);
std::vector<FeatureStats> read_stats_csv(const std::string& path);

void write_salient_json(const std::string& path, const SalientSet& s, uint64_t seed,
                        uint64_t config_hash);
SalientSet read_salient_json(const std::string& path);

}  // namespace crisp
