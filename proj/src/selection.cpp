#include "crisp/selection.hpp"

#include "crisp/svg.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace crisp {

void FeatureStats::merge(const FeatureStats& other) {
  if (other.n_features() == 0) return;
  if (n_features() == 0) {
    *this = other;
    return;
  }
  if (layer != other.layer || n_features() != other.n_features())
    throw InputError("cannot merge stats across layers or feature counts");
  tokens_seen_target += other.tokens_seen_target;
  tokens_seen_retain += other.tokens_seen_retain;
  for (size_t i = 0; i < count_target.size(); ++i) {
    count_target[i] += other.count_target[i];
    count_retain[i] += other.count_retain[i];
    mass_target[i] += other.mass_target[i];
    mass_retain[i] += other.mass_retain[i];
  }
}

std::vector<long> count_diff(const FeatureStats& stats) {
  std::vector<long> d(size_t(stats.n_features()));
  for (size_t i = 0; i < d.size(); ++i) d[i] = stats.count_target[i] - stats.count_retain[i];
  return d;
}

std::vector<double> activation_ratio(const FeatureStats& stats, double eps) {
  if (eps <= 0) throw ConfigError("eps must be positive");
  std::vector<double> rho(size_t(stats.n_features()));
  for (size_t i = 0; i < rho.size(); ++i) {
    if (stats.mass_target[i] == 0.0)
      rho[i] = 0.0;
    else
      rho[i] = stats.mass_target[i] / (stats.mass_retain[i] + eps);
  }
  return rho;
}

std::vector<int> select_salient(const FeatureStats& stats, int k, double tau, double eps) {
  if (k < 1) throw ConfigError("k must be >= 1");
  if (tau <= 0) throw ConfigError("tau must be positive");
  const auto delta = count_diff(stats);
  const auto rho = activation_ratio(stats, eps);
  std::vector<int> idx(size_t(stats.n_features()));
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
    if (delta[size_t(a)] != delta[size_t(b)]) return delta[size_t(a)] > delta[size_t(b)];
    return a < b;
  });
  if (int(idx.size()) > k) idx.resize(size_t(k));
  std::vector<int> out;
  for (int f : idx)
    if (rho[size_t(f)] >= tau) out.push_back(f);
  return out;
}

std::vector<FeatureClass> classify_features(const FeatureStats& stats,
                                            const ClassifyThresholds& th) {
  std::vector<FeatureClass> out(size_t(stats.n_features()), FeatureClass::inactive);
  for (size_t i = 0; i < out.size(); ++i) {
    const double ft = stats.tokens_seen_target > 0
                          ? double(stats.count_target[i]) / double(stats.tokens_seen_target)
                          : 0.0;
    const double fr = stats.tokens_seen_retain > 0
                          ? double(stats.count_retain[i]) / double(stats.tokens_seen_retain)
                          : 0.0;
    if (ft >= th.theta_hi && fr >= th.theta_hi)
      out[i] = FeatureClass::shared;
    else if (ft >= th.theta_hi && fr <= th.theta_lo)
      out[i] = FeatureClass::target;
    else if (fr >= th.theta_hi && ft <= th.theta_lo)
      out[i] = FeatureClass::benign;
  }
  return out;
}

const char* feature_class_name(FeatureClass c) {
  switch (c) {
    case FeatureClass::target: return "target";
    case FeatureClass::benign: return "benign";
    case FeatureClass::shared: return "shared";
    case FeatureClass::inactive: return "inactive";
  }
  return "inactive";
}

void export_scatter(const FeatureStats& stats, const std::vector<FeatureClass>& classes,
                    const std::string& csv_path, const std::string& svg_path) {
  if (int(classes.size()) != stats.n_features())
    throw InputError("classification size does not match stats");
  std::ofstream csv(csv_path, std::ios::trunc);
  if (!csv) throw IoError("cannot open for write: " + csv_path);
  csv << "feature,retain_freq,target_freq,log_ratio,group\n";

  SvgScatter plot;
  plot.x_label = "retain activation frequency";
  plot.y_label = "target activation frequency";
  for (int i = 0; i < stats.n_features(); ++i) {
    const double x = stats.tokens_seen_retain > 0
                         ? double(stats.count_retain[size_t(i)]) / double(stats.tokens_seen_retain)
                         : 0.0;
    const double y = stats.tokens_seen_target > 0
                         ? double(stats.count_target[size_t(i)]) / double(stats.tokens_seen_target)
                         : 0.0;
    const double ratio = std::log((stats.mass_target[size_t(i)] + 1e-12) /
                                  (stats.mass_retain[size_t(i)] + 1e-12));
    const char* group = feature_class_name(classes[size_t(i)]);
    char line[160];
    std::snprintf(line, sizeof(line), "%d,%.9g,%.9g,%.9g,%s", i, x, y, ratio, group);
    csv << line << '\n';
    if (x > 0 || y > 0) plot.add_point(x, y, group, ratio);
  }
  plot.diagonal = true;
  plot.write(svg_path);
}

void write_stats_csv(const std::string& path, const std::vector<FeatureStats>& all,
                     const std::string& meta_comment) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open for write: " + path);
  if (!meta_comment.empty()) os << "# " << meta_comment << "\n";
  for (const auto& s : all)
    os << "# layer " << s.layer << " tokens_target=" << s.tokens_seen_target
       << " tokens_retain=" << s.tokens_seen_retain << "\n";
  os << "layer,feature,count_target,count_retain,mass_target,mass_retain,freq_target,freq_retain\n";
  for (const auto& s : all) {
    for (int i = 0; i < s.n_features(); ++i) {
      const double ft =
          s.tokens_seen_target > 0 ? double(s.count_target[size_t(i)]) / double(s.tokens_seen_target) : 0.0;
      const double fr =
          s.tokens_seen_retain > 0 ? double(s.count_retain[size_t(i)]) / double(s.tokens_seen_retain) : 0.0;
      char line[200];
      std::snprintf(line, sizeof(line), "%d,%d,%ld,%ld,%.12g,%.12g,%.9g,%.9g", s.layer, i,
                    s.count_target[size_t(i)], s.count_retain[size_t(i)], s.mass_target[size_t(i)],
                    s.mass_retain[size_t(i)], ft, fr);
      os << line << '\n';
    }
  }
}

std::vector<FeatureStats> read_stats_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open: " + path);
  std::map<int, FeatureStats> by_layer;
  std::map<int, std::pair<long, long>> tokens;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      std::istringstream ls(line);
      std::string hash, word;
      int layer;
      if (ls >> hash >> word >> layer && word == "layer") {
        long tt = 0, tr = 0;
        std::string kv;
        while (ls >> kv) {
          if (kv.rfind("tokens_target=", 0) == 0) tt = std::stol(kv.substr(14));
          if (kv.rfind("tokens_retain=", 0) == 0) tr = std::stol(kv.substr(14));
        }
        tokens[layer] = {tt, tr};
      }
      continue;
    }
    if (line.rfind("layer,", 0) == 0) continue;
    std::istringstream ls(line);
    std::string field;
    std::vector<std::string> fields;
    while (std::getline(ls, field, ',')) fields.push_back(field);
    if (fields.size() < 6) throw IoError("malformed stats row: " + line);
    const int layer = std::stoi(fields[0]);
    const int feature = std::stoi(fields[1]);
    auto& s = by_layer.emplace(layer, FeatureStats(layer, 0)).first->second;
    if (feature >= s.n_features()) {
      s.count_target.resize(size_t(feature) + 1, 0);
      s.count_retain.resize(size_t(feature) + 1, 0);
      s.mass_target.resize(size_t(feature) + 1, 0.0);
      s.mass_retain.resize(size_t(feature) + 1, 0.0);
    }
    s.count_target[size_t(feature)] = std::stol(fields[2]);
    s.count_retain[size_t(feature)] = std::stol(fields[3]);
    s.mass_target[size_t(feature)] = std::stod(fields[4]);
    s.mass_retain[size_t(feature)] = std::stod(fields[5]);
  }
  std::vector<FeatureStats> out;
  for (auto& [layer, s] : by_layer) {
    auto it = tokens.find(layer);
    if (it != tokens.end()) {
      s.tokens_seen_target = it->second.first;
      s.tokens_seen_retain = it->second.second;
    }
    out.push_back(std::move(s));
  }
  return out;
}

void write_salient_json(const std::string& path, const SalientSet& s, uint64_t seed,
                        uint64_t config_hash) {
  nlohmann::json j;
  j["meta"] = {{"tool_version", kToolVersion}, {"seed", seed}, {"config_hash", config_hash}};
  j["k"] = s.k;
  j["tau"] = s.tau;
  j["eps"] = s.eps;
  auto layers = nlohmann::json::object();
  for (const auto& [layer, feats] : s.layers) layers[std::to_string(layer)] = feats;
  j["layers"] = layers;
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open for write: " + path);
  os << j.dump(2) << '\n';
}

SalientSet read_salient_json(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open: " + path);
  nlohmann::json j;
  is >> j;
  SalientSet s;
  s.k = j.at("k");
  s.tau = j.at("tau");
  s.eps = j.at("eps");
  for (auto& [key, val] : j.at("layers").items())
    s.layers[std::stoi(key)] = val.get<std::vector<int>>();
  return s;
}

}  // namespace crisp
