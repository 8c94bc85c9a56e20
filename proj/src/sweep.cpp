#include "crisp/sweep.hpp"

#include "crisp/checkpoint.hpp"
#include "crisp/rng.hpp"
#include "crisp/svg.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <thread>

namespace crisp {

nlohmann::json SweepSpace::to_json() const {
  return {{"k", k},
          {"lambda", lambda},
          {"rank", rank},
          {"lr_lo", lr_lo},
          {"lr_hi", lr_hi},
          {"steps", steps},
          {"batch", batch},
          {"beta", beta},
          {"gamma", gamma},
          {"tau", tau},
          {"eps", eps},
          {"rmu_steer", rmu_steer},
          {"rmu_alpha", rmu_alpha},
          {"rmu_lr_lo", rmu_lr_lo},
          {"rmu_lr_hi", rmu_lr_hi},
          {"rmu_steps", rmu_steps}};
}

SweepSpace SweepSpace::from_json(const nlohmann::json& j) {
  SweepSpace s;
  s.k = j.value("k", s.k);
  s.lambda = j.value("lambda", s.lambda);
  s.rank = j.value("rank", s.rank);
  s.lr_lo = j.value("lr_lo", s.lr_lo);
  s.lr_hi = j.value("lr_hi", s.lr_hi);
  s.steps = j.value("steps", s.steps);
  s.batch = j.value("batch", s.batch);
  s.beta = j.value("beta", s.beta);
  s.gamma = j.value("gamma", s.gamma);
  s.tau = j.value("tau", s.tau);
  s.eps = j.value("eps", s.eps);
  s.rmu_steer = j.value("rmu_steer", s.rmu_steer);
  s.rmu_alpha = j.value("rmu_alpha", s.rmu_alpha);
  s.rmu_lr_lo = j.value("rmu_lr_lo", s.rmu_lr_lo);
  s.rmu_lr_hi = j.value("rmu_lr_hi", s.rmu_lr_hi);
  s.rmu_steps = j.value("rmu_steps", s.rmu_steps);
  return s;
}

namespace {

template <class T>
T pick(Rng& rng, const std::vector<T>& options) {
  if (options.empty()) throw ConfigError("empty sweep option list");
  return options[size_t(rng.randint(0, int64_t(options.size()) - 1))];
}

std::string hex_digest(const std::string& s) {
  char buf[24];
  std::snprintf(buf, sizeof(buf), "%016llx", (unsigned long long)hash_bytes(s));
  return buf;
}

SweepPoint run_one(const SweepContext& ctx, const SweepSpace& space, const std::string& method,
                   uint64_t root_seed, int index) {
  SweepPoint pt;
  pt.method = method;
  pt.seed = derive_seed(root_seed, "sweep.run", uint64_t(index));
  Rng rng(root_seed, "sweep.sample", uint64_t(index));

  if (method == "crisp") {
    pt.config = {{"k", pick(rng, space.k)},
                 {"lambda", pick(rng, space.lambda)},
                 {"rank", pick(rng, space.rank)},
                 {"lr", rng.log_uniform(space.lr_lo, space.lr_hi)},
                 {"steps", space.steps},
                 {"batch", space.batch},
                 {"beta", space.beta},
                 {"gamma", space.gamma},
                 {"tau", space.tau}};
  } else if (method == "rmu") {
    pt.config = {{"steer", pick(rng, space.rmu_steer)},
                 {"alpha", pick(rng, space.rmu_alpha)},
                 {"lr", rng.log_uniform(space.rmu_lr_lo, space.rmu_lr_hi)},
                 {"steps", space.rmu_steps},
                 {"batch", space.batch}};
  } else {
    throw ConfigError("unknown sweep method: " + method);
  }
  pt.digest = hex_digest(method + "|" + pt.config.dump() + "|" + std::to_string(pt.seed));

  const auto t0 = std::chrono::steady_clock::now();
  try {
    EvalReport rep;
    if (method == "crisp") {
      UnlearnConfig cfg;
      cfg.sae_layers = ctx.sae_layers;
      cfg.opt_layers = ctx.opt_layers;
      cfg.weights = LossWeights(space.beta, space.gamma, pt.config.at("lambda").get<double>());
      cfg.lora_rank = pt.config.at("rank");
      cfg.learning_rate = pt.config.at("lr");
      cfg.steps = space.steps;
      cfg.batch_docs = space.batch;
      cfg.seed = pt.seed;
      const int k = pt.config.at("k");
      cfg.salient.k = k;
      cfg.salient.tau = space.tau;
      cfg.salient.eps = space.eps;
      for (const auto& st : *ctx.stats)
        cfg.salient.layers[st.layer] = select_salient(st, k, space.tau, space.eps);
      auto result = train_crisp<real>(*ctx.lm, *ctx.saes, cfg, *ctx.corpora);
      LmParams merged = merge_lora(*ctx.lm, result.adapter);
      rep = evaluate_model(merged, nullptr, ctx.eval_inputs);
    } else {
      RmuConfig cfg;
      cfg.steer_coeff = pt.config.at("steer");
      cfg.alpha_rmu = pt.config.at("alpha");
      cfg.learning_rate = pt.config.at("lr");
      cfg.steps = space.rmu_steps;
      cfg.batch_docs = space.batch;
      cfg.seed = pt.seed;
      LmParams edited = train_rmu<real>(*ctx.lm, cfg, *ctx.corpora);
      rep = evaluate_model(edited, nullptr, ctx.eval_inputs);
    }
    pt.u = rep.unlearn_acc;
    pt.r = rep.retain_acc;
    pt.m = rep.general_acc;
    pt.f = rep.fluency;
    pt.c = rep.concept_score;
    pt.overall = rep.overall;
  } catch (const std::exception& e) {
    pt.failed = true;
    pt.error = e.what();
  }
  pt.wall_time_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return pt;
}

}  // namespace

std::vector<SweepPoint> run_sweep(const SweepContext& ctx, const SweepSpace& space,
                                  const std::string& method, int n, uint64_t seed, int jobs) {
  if (n < 1) throw ConfigError("sweep needs at least one point");
  if (!ctx.lm || !ctx.corpora) throw ConfigError("incomplete sweep context");
  if (method == "crisp" && (!ctx.saes || !ctx.stats))
    throw ConfigError("crisp sweep needs SAEs and feature stats");
  jobs = std::max(1, jobs);

  std::vector<SweepPoint> points(static_cast<size_t>(n));
  std::atomic<int> next{0};
  auto worker = [&] {
    for (;;) {
      const int i = next.fetch_add(1);
      if (i >= n) return;
      points[size_t(i)] = run_one(ctx, space, method, seed, i);
    }
  };
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < jobs; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  // Deterministic output order regardless of thread schedule.
  std::sort(points.begin(), points.end(),
            [](const SweepPoint& a, const SweepPoint& b) { return a.digest < b.digest; });
  return points;
}

std::vector<SweepPoint> pareto_envelope(const std::vector<SweepPoint>& points,
                                        double bucket_width) {
  if (bucket_width <= 0) throw ConfigError("bucket width must be positive");
  std::map<long, const SweepPoint*> best;
  for (const auto& p : points) {
    if (p.failed) continue;
    const long bucket = long(std::floor(p.u / bucket_width));
    auto it = best.find(bucket);
    if (it == best.end()) {
      best[bucket] = &p;
      continue;
    }
    const SweepPoint& q = *it->second;
    if (p.r > q.r || (p.r == q.r && (p.u < q.u || (p.u == q.u && p.digest < q.digest))))
      it->second = &p;
  }
  std::vector<SweepPoint> out;
  for (const auto& [bucket, p] : best) out.push_back(*p);
  std::sort(out.begin(), out.end(), [](const SweepPoint& a, const SweepPoint& b) {
    if (a.u != b.u) return a.u < b.u;
    return a.digest < b.digest;
  });
  return out;
}

namespace {

nlohmann::json point_json(const SweepPoint& p) {
  return {{"method", p.method},   {"digest", p.digest},
          {"config", p.config},   {"u", p.u},
          {"r", p.r},             {"m", p.m},
          {"f", p.f},             {"c", p.c},
          {"overall", p.overall}, {"seed", p.seed},
          {"wall_time_s", p.wall_time_s},
          {"failed", p.failed},   {"error", p.error}};
}

SweepPoint point_from_json(const nlohmann::json& j) {
  SweepPoint p;
  p.method = j.at("method");
  p.digest = j.at("digest");
  p.config = j.at("config");
  p.u = j.at("u");
  p.r = j.at("r");
  p.m = j.at("m");
  p.f = j.at("f");
  p.c = j.at("c");
  p.overall = j.at("overall");
  p.seed = j.at("seed");
  p.wall_time_s = j.at("wall_time_s");
  p.failed = j.at("failed");
  p.error = j.at("error");
  return p;
}

}  // namespace

void write_sweep_json(const std::string& path, const std::vector<SweepPoint>& points,
                      uint64_t seed, uint64_t config_hash) {
  nlohmann::json j = {{"meta",
                       {{"tool_version", kToolVersion},
                        {"seed", seed},
                        {"config_hash", config_hash}}},
                      {"points", nlohmann::json::array()}};
  for (const auto& p : points) j["points"].push_back(point_json(p));
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open for write: " + path);
  os << j.dump(2) << '\n';
}

std::vector<SweepPoint> read_sweep_json(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open: " + path);
  nlohmann::json j;
  is >> j;
  std::vector<SweepPoint> points;
  for (const auto& pj : j.at("points")) points.push_back(point_from_json(pj));
  return points;
}

void write_frontier_csv(const std::string& path, const std::vector<SweepPoint>& frontier,
                        double bucket_width) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open for write: " + path);
  char buf[512];
  std::snprintf(buf, sizeof(buf), "# bucket_width=%.6f tool_version=%s\n", bucket_width,
                kToolVersion);
  os << buf << "method,bucket,u,r,m,f,c,overall,digest\n";
  for (const auto& p : frontier) {
    const long bucket = long(std::floor(p.u / bucket_width));
    std::snprintf(buf, sizeof(buf), "%s,%ld,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%s\n",
                  p.method.c_str(), bucket, p.u, p.r, p.m, p.f, p.c, p.overall,
                  p.digest.c_str());
    os << buf;
  }
}

void write_frontier_svg(const std::string& path, const std::vector<SweepPoint>& points,
                        double bucket_width, double ideal_u, double ideal_r) {
  SvgScatter plot;
  plot.title = "retain vs unlearn accuracy";
  plot.x_label = "unlearn accuracy (%)";
  plot.y_label = "retain accuracy (%)";

  std::vector<std::string> methods;
  for (const auto& p : points) {
    if (p.failed) continue;
    plot.add_point(p.u, p.r, p.method, p.overall / 25.0);
    if (std::find(methods.begin(), methods.end(), p.method) == methods.end())
      methods.push_back(p.method);
  }
  std::sort(methods.begin(), methods.end());
  for (const auto& m : methods) {
    std::vector<SweepPoint> mine;
    for (const auto& p : points)
      if (p.method == m) mine.push_back(p);
    auto env = pareto_envelope(mine, bucket_width);
    std::vector<std::pair<double, double>> pts;
    for (const auto& p : env) pts.emplace_back(p.u, p.r);
    plot.add_line(std::move(pts), m == "crisp" ? "#d62728" : "#1f77b4", m);
  }
  plot.add_marker(ideal_u, ideal_r, "#e6b800", "ideal");
  plot.write(path);
}

}  // namespace crisp
