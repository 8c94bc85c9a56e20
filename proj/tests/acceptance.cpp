// End-to-end acceptance harness. Prints one line per criterion and exits
// non-zero if any criterion fails. Criteria 4-7 share one full-scale
// pipeline run; criterion 6 additionally runs the hyperparameter sweep.
#include "crisp/pipeline.hpp"
#include "crisp/sweep.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

using namespace crisp;
namespace fs = std::filesystem;

namespace {

struct Criterion {
  int id;
  std::string desc;
  bool pass = false;
  std::string note;
};

// --------------------------------------------------------------------------
// 1: overall score reproduces the published table
// --------------------------------------------------------------------------

bool criterion1(std::string& note) {
  struct Row {
    double overall, u, r, m, f, c;
  };
  const Row table[] = {
      {56.60, 68.29, 76.81, 61.15, 1.24, 1.77}, {33.93, 41.44, 62.17, 55.31, 0.25, 1.24},
      {52.51, 34.54, 67.75, 59.50, 0.56, 1.58}, {60.10, 30.93, 74.13, 60.28, 0.77, 1.58},
      {54.37, 55.26, 55.27, 46.30, 1.07, 1.78}, {22.13, 27.80, 40.54, 35.80, 0.14, 1.20},
      {51.91, 27.79, 48.77, 42.77, 0.76, 1.63}, {56.70, 29.67, 54.45, 46.33, 0.92, 1.63},
      {61.32, 40.95, 54.00, 61.15, 1.27, 1.43}, {58.91, 30.78, 53.00, 58.56, 0.99, 1.40},
      {52.47, 33.70, 55.00, 61.15, 0.68, 1.23}, {61.74, 29.38, 53.00, 58.86, 1.14, 1.49},
      {52.57, 33.90, 39.00, 46.30, 1.05, 1.46}, {43.33, 28.87, 29.00, 38.71, 0.76, 1.36},
      {44.79, 28.67, 36.00, 44.79, 0.64, 1.23}, {49.02, 27.26, 38.00, 46.26, 0.81, 1.28},
  };
  double worst = 0.0;
  for (const auto& row : table) {
    const double got = overall_score(row.u, row.r, row.m, row.f, row.c);
    worst = std::max(worst, std::abs(got - row.overall));
  }
  note = "max |err| " + std::to_string(worst) + " over 16 rows";
  return worst <= 0.01;
}

// --------------------------------------------------------------------------
// 2: selection matches an independent brute-force reference
// --------------------------------------------------------------------------

std::vector<int> brute_force_salient(const FeatureStats& s, int k, double tau, double eps) {
  std::vector<std::pair<long, int>> order;
  for (int i = 0; i < s.n_features(); ++i)
    order.push_back({s.count_target[size_t(i)] - s.count_retain[size_t(i)], i});
  std::sort(order.begin(), order.end(), [](const auto& a, const auto& b) {
    return a.first != b.first ? a.first > b.first : a.second < b.second;
  });
  std::vector<int> out;
  for (int j = 0; j < int(order.size()) && j < k; ++j) {
    const int i = order[size_t(j)].second;
    const double mt = s.mass_target[size_t(i)];
    const double rho = mt == 0.0 ? 0.0 : mt / (s.mass_retain[size_t(i)] + eps);
    if (rho >= tau) out.push_back(i);
  }
  return out;
}

bool criterion2(std::string& note) {
  std::mt19937_64 gen(819202);
  const double taus[] = {0.5, 1.0, 3.0, 10.0};
  std::uniform_real_distribution<double> mass(0.0, 10.0);
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = 1 + int(gen() % 64);
    FeatureStats s(0, n);
    s.tokens_seen_target = s.tokens_seen_retain = 64;
    for (int i = 0; i < n; ++i) {
      s.count_target[size_t(i)] = long(gen() % 64);
      s.count_retain[size_t(i)] = long(gen() % 64);
      s.mass_target[size_t(i)] = s.count_target[size_t(i)] ? mass(gen) : 0.0;
      s.mass_retain[size_t(i)] = s.count_retain[size_t(i)] ? mass(gen) : 0.0;
    }
    const int k = 1 + int(gen() % 8);
    const double tau = taus[gen() % 4];
    if (select_salient(s, k, tau, 1e-8) != brute_force_salient(s, k, tau, 1e-8)) {
      note = "mismatch at trial " + std::to_string(trial);
      return false;
    }
  }
  note = "1000/1000 random tables, exact set equality";
  return true;
}

// --------------------------------------------------------------------------
// 3: gradients vs central finite differences in 64-bit
// --------------------------------------------------------------------------

struct FdStats {
  int checked = 0;
  double worst = 0.0;
};

template <class F>
double central_diff(F&& f, double& slot, double h = 1e-6) {
  const double saved = slot;
  slot = saved + h;
  const double up = f();
  slot = saved - h;
  const double down = f();
  slot = saved;
  return (up - down) / (2 * h);
}

bool criterion3(std::string& note) {
  std::mt19937_64 gen(5150);
  std::normal_distribution<double> nd;
  double worst_all = 0.0;
  int total = 0;

  // L_SAE w.r.t. SAE parameters
  {
    SaeConfig sc;
    sc.d_model = 6;
    sc.d_sae = 12;
    sc.l1_coeff = 5e-3;
    sc.seed = 17;
    auto sae = init_sae<double>(sc);
    MatT<double> batch(7, sc.d_model);
    for (Eigen::Index i = 0; i < batch.size(); ++i) batch.data()[i] = nd(gen);
    SaeParamsT<double> grads = sae;
    for (auto* g : grads.tensors()) g->setZero();
    sae_loss_grad(sae, batch, &grads);
    auto params = sae.tensors();
    auto gs = grads.tensors();
    FdStats st;
    for (size_t t = 0; t < params.size(); ++t) {
      for (int c = 0; c < 30; ++c) {
        const Eigen::Index i = Eigen::Index(gen() % uint64_t(params[t]->size()));
        const double fd =
            central_diff([&] { return sae_loss_grad<double>(sae, batch, nullptr); },
                         params[t]->data()[i]);
        const double an = gs[t]->data()[i];
        st.worst = std::max(st.worst,
                            std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-8}));
        ++st.checked;
      }
    }
    if (st.checked < 100 || st.worst >= 1e-3) {
      note = "L_SAE: worst rel err " + std::to_string(st.worst);
      return false;
    }
    worst_all = std::max(worst_all, st.worst);
    total += st.checked;
  }

  // unlearn / retain / coherence / total w.r.t. the adapter
  LmConfig cfg;
  cfg.vocab_size = 24;
  cfg.d_model = 8;
  cfg.n_layers = 3;
  cfg.n_heads = 2;
  cfg.d_ff = 16;
  cfg.context_len = 12;
  cfg.seed = 3;
  auto lm = init_lm<double>(cfg);
  std::map<int, SaeParamsT<double>> saes;
  {
    SaeConfig sc;
    sc.d_model = cfg.d_model;
    sc.d_sae = 20;
    sc.layer = 2;
    sc.seed = 31;
    saes[2] = init_sae<double>(sc);
    saes[2].b_enc.setConstant(0.05);
  }
  SalientSet sal;
  sal.layers[2] = {1, 4, 9};
  const std::vector<int> sae_layers{2};
  const std::vector<int> fl{cfg.n_layers - 1};
  LoraConfig lc;
  lc.rank = 3;
  lc.layers = {0, 1};
  lc.seed = 7;
  auto adapter = init_lora<double>(cfg, lc);
  std::normal_distribution<double> small(0.0, 0.05);
  for (auto* m : adapter.tensors())
    for (Eigen::Index i = 0; i < m->size(); ++i) m->data()[i] += small(gen);

  Tokens tgt{kBosToken, 2, 5, 3, 8};
  Tokens ret{kBosToken, 9, 12, 11};
  Tokens coh{kBosToken, 17, 19, 16, 20, 18};
  ActivationRecordT<double> ret_ref, coh_ref;
  lm_forward<double>(lm, nullptr, ret, sae_layers, &ret_ref, nullptr, false);
  lm_forward<double>(lm, nullptr, coh, fl, &coh_ref, nullptr, false);
  const double lambda = 20.0;

  // weights (a, b, g) pick out each component and then the combined loss
  const struct {
    const char* name;
    double a, b, g;
  } combos[] = {{"L_unlearn", 1, 0, 0},
                {"L_retain", 0, 1, 0},
                {"L_coherence", 0, 0, 1},
                {"L_total", 0.01, 0.99, 0.01}};

  for (const auto& combo : combos) {
    auto objective = [&] {
      ActivationRecordT<double> a, b, c;
      lm_forward<double>(lm, &adapter, tgt, sae_layers, &a, nullptr, false);
      lm_forward<double>(lm, &adapter, ret, sae_layers, &b, nullptr, false);
      lm_forward<double>(lm, &adapter, coh, fl, &c, nullptr, false);
      return combo.a * unlearn_loss<double>(saes, sal, {a}, lambda) +
             combo.b * residual_match_loss<double>({b}, {ret_ref}, sae_layers) +
             combo.g * residual_match_loss<double>({c}, {coh_ref}, fl);
    };
    LoraAdapterT<double> grads = zeros_like(adapter);
    {
      ActivationRecordT<double> rec;
      ForwardCacheT<double> cache;
      lm_forward<double>(lm, &adapter, tgt, sae_layers, &rec, &cache, false);
      std::vector<std::map<int, MatT<double>>> inj;
      unlearn_loss<double>(saes, sal, {rec}, lambda, &inj);
      detail::scale_injections(inj, combo.a);
      lm_backward<double>(lm, &adapter, cache, {}, inj[0], nullptr, &grads);
    }
    {
      ActivationRecordT<double> rec;
      ForwardCacheT<double> cache;
      lm_forward<double>(lm, &adapter, ret, sae_layers, &rec, &cache, false);
      std::vector<std::map<int, MatT<double>>> inj;
      residual_match_loss<double>({rec}, {ret_ref}, sae_layers, &inj);
      detail::scale_injections(inj, combo.b);
      lm_backward<double>(lm, &adapter, cache, {}, inj[0], nullptr, &grads);
    }
    {
      ActivationRecordT<double> rec;
      ForwardCacheT<double> cache;
      lm_forward<double>(lm, &adapter, coh, fl, &rec, &cache, false);
      std::vector<std::map<int, MatT<double>>> inj;
      residual_match_loss<double>({rec}, {coh_ref}, fl, &inj);
      detail::scale_injections(inj, combo.g);
      lm_backward<double>(lm, &adapter, cache, {}, inj[0], nullptr, &grads);
    }

    auto params = adapter.tensors();
    auto gs = grads.tensors();
    FdStats st;
    for (size_t t = 0; t < params.size(); ++t) {
      for (int c = 0; c < 13; ++c) {
        const Eigen::Index i = Eigen::Index(gen() % uint64_t(params[t]->size()));
        const double fd = central_diff(objective, params[t]->data()[i]);
        const double an = gs[t]->data()[i];
        st.worst = std::max(st.worst,
                            std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-6}));
        ++st.checked;
      }
    }
    if (st.checked < 100 || st.worst >= 1e-3) {
      note = std::string(combo.name) + ": worst rel err " + std::to_string(st.worst) + " over " +
             std::to_string(st.checked) + " coords";
      return false;
    }
    worst_all = std::max(worst_all, st.worst);
    total += st.checked;
  }
  note = std::to_string(total) + " coords, worst rel err " + std::to_string(worst_all);
  return true;
}

// --------------------------------------------------------------------------
// shared full-scale fixture for criteria 4-7
// --------------------------------------------------------------------------

struct Fixture {
  fs::path dir;
  RunConfig cfg;
  EvalReport orig, edited;
  bool ok = false;
  std::string error;
};

Fixture run_fixture() {
  Fixture fx;
  fx.dir = fs::temp_directory_path() / "crisp_acceptance";
  fx.cfg = parse_run_config("");  // library defaults
  try {
    run_pipeline(fx.cfg, fx.dir.string());
    fx.orig = read_report((fx.dir / "report_orig.json").string());
    fx.edited = read_report((fx.dir / "report_edited.json").string());
    fx.ok = true;
  } catch (const std::exception& e) {
    fx.error = e.what();
  }
  return fx;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

bool criterion4(const Fixture& fx, std::string& note) {
  if (!fx.ok) {
    note = "pipeline failed: " + fx.error;
    return false;
  }
  note = "pre U/R/M " + fmt(fx.orig.unlearn_acc) + "/" + fmt(fx.orig.retain_acc) + "/" +
         fmt(fx.orig.general_acc) + "; post U " + fmt(fx.edited.unlearn_acc) + ", R " +
         fmt(fx.edited.retain_acc) + ", M " + fmt(fx.edited.general_acc) + ", F " +
         fmt(fx.edited.fluency);
  return fx.orig.unlearn_acc >= 90.0 && fx.edited.unlearn_acc <= 40.0 &&
         fx.edited.retain_acc >= 0.85 * fx.orig.retain_acc &&
         fx.edited.general_acc >= 0.90 * fx.orig.general_acc && fx.edited.fluency >= 1.5;
}

// mean activation of the given features over all non-special tokens of docs
double mean_feature_activation(const LmParams& lm, const std::map<int, SaeParams>& saes,
                               const std::map<int, std::vector<int>>& feats,
                               const std::vector<TokenizedDoc>& docs) {
  double sum = 0.0;
  long count = 0;
  std::vector<int> layers;
  for (const auto& [l, f] : feats)
    if (!f.empty()) layers.push_back(l);
  for (const auto& doc : docs) {
    ActivationRecord rec;
    lm_forward<real>(lm, nullptr, doc.tokens, layers, &rec, nullptr, false);
    for (int l : layers) {
      MatT<real> a = sae_encode(saes.at(l), rec.layers.at(l));
      for (int f : feats.at(l)) {
        sum += double(a.col(f).sum());
        count += long(a.rows());
      }
    }
  }
  return count ? sum / double(count) : 0.0;
}

bool criterion5(const Fixture& fx, std::string& note) {
  if (!fx.ok) {
    note = "pipeline failed: " + fx.error;
    return false;
  }
  const LmParams lm = load_lm<real>((fx.dir / "lm.crlm").string());
  const LmParams merged = load_lm<real>((fx.dir / "merged.crlm").string());
  std::map<int, SaeParams> saes;
  for (int l : fx.cfg.sae_layers)
    saes[l] = load_sae<real>((fx.dir / ("sae_l" + std::to_string(l) + ".crsa")).string());
  const SalientSet sal = read_salient_json((fx.dir / "salient.json").string());
  const auto stats = read_stats_csv((fx.dir / "stats.csv").string());
  const auto target_heldout =
      read_docs((fx.dir / "corpus/target_heldout.txt").string(), CorpusTag::target);
  const auto retain_heldout =
      read_docs((fx.dir / "corpus/retain_heldout.txt").string(), CorpusTag::retain);

  std::map<int, std::vector<int>> salient_feats;
  for (const auto& [l, f] : sal.layers) salient_feats[l] = f;
  const double sal_before = mean_feature_activation(lm, saes, salient_feats, target_heldout);
  const double sal_after = mean_feature_activation(merged, saes, salient_feats, target_heldout);
  const double drop = sal_before > 0 ? 1.0 - sal_after / sal_before : 0.0;

  // top-10 benign features per layer by retain activation count
  std::map<int, std::vector<int>> benign_feats;
  for (const auto& st : stats) {
    auto cls = classify_features(st, fx.cfg.classify);
    std::vector<int> benign;
    for (int i = 0; i < st.n_features(); ++i)
      if (cls[size_t(i)] == FeatureClass::benign) benign.push_back(i);
    std::sort(benign.begin(), benign.end(), [&](int a, int b) {
      return st.count_retain[size_t(a)] != st.count_retain[size_t(b)]
                 ? st.count_retain[size_t(a)] > st.count_retain[size_t(b)]
                 : a < b;
    });
    if (benign.size() > 10) benign.resize(10);
    benign_feats[st.layer] = benign;
  }
  const double ben_before = mean_feature_activation(lm, saes, benign_feats, retain_heldout);
  const double ben_after = mean_feature_activation(merged, saes, benign_feats, retain_heldout);
  const double ben_change = ben_before > 0 ? std::abs(ben_after - ben_before) / ben_before : 0.0;

  note = "salient drop " + fmt(100 * drop) + "%, benign change " + fmt(100 * ben_change) + "%";
  return drop >= 0.80 && ben_change < 0.10;
}

// --------------------------------------------------------------------------
// 6: sweep + frontier
// --------------------------------------------------------------------------

std::vector<SweepPoint> brute_envelope(std::vector<SweepPoint> pts, double w) {
  pts.erase(std::remove_if(pts.begin(), pts.end(), [](const SweepPoint& p) { return p.failed; }),
            pts.end());
  std::map<long, SweepPoint> best;
  for (const auto& p : pts) {
    const long b = long(std::floor(p.u / w));
    auto it = best.find(b);
    if (it == best.end()) {
      best.emplace(b, p);
      continue;
    }
    SweepPoint& q = it->second;
    if (p.r > q.r || (p.r == q.r && (p.u < q.u || (p.u == q.u && p.digest < q.digest)))) q = p;
  }
  std::vector<SweepPoint> out;
  for (auto& [b, p] : best) out.push_back(p);
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.u < b.u; });
  return out;
}

bool criterion6(const Fixture& fx, std::string& note) {
  if (!fx.ok) {
    note = "pipeline failed: " + fx.error;
    return false;
  }
  const RunConfig& cfg = fx.cfg;
  const LmParams lm = load_lm<real>((fx.dir / "lm.crlm").string());
  std::map<int, SaeParams> saes;
  for (int l : cfg.sae_layers)
    saes[l] = load_sae<real>((fx.dir / ("sae_l" + std::to_string(l) + ".crsa")).string());
  const auto stats = read_stats_csv((fx.dir / "stats.csv").string());

  Corpora corp;
  const fs::path cd = fx.dir / "corpus";
  corp.target = read_docs((cd / "target.txt").string(), CorpusTag::target);
  corp.retain = read_docs((cd / "retain.txt").string(), CorpusTag::retain);
  corp.coherence = read_docs((cd / "coherence.txt").string(), CorpusTag::coherence);
  corp.retain_heldout = read_docs((cd / "retain_heldout.txt").string(), CorpusTag::retain);
  corp.probes_unlearn = read_probes((cd / "probes_unlearn.json").string());
  corp.probes_retain = read_probes((cd / "probes_retain.json").string());
  corp.probes_general = read_probes((cd / "probes_general.json").string());

  SweepContext ctx;
  ctx.lm = &lm;
  ctx.saes = &saes;
  ctx.stats = &stats;
  ctx.corpora = &corp;
  ctx.sae_layers = cfg.sae_layers;
  ctx.opt_layers = cfg.opt_layers;
  ctx.eval_inputs = make_eval_inputs(cfg, corp, lm);
  ctx.orig_report = fx.orig;

  const uint64_t sweep_seed = derive_seed(cfg.seed, "sweep");
  auto crisp_pts = run_sweep(ctx, cfg.sweep, "crisp", 24, derive_seed(sweep_seed, "crisp"), 4);
  auto rmu_pts = run_sweep(ctx, cfg.sweep, "rmu", 24, derive_seed(sweep_seed, "rmu"), 4);

  int rmu_failed = 0;
  for (const auto& p : rmu_pts) rmu_failed += p.failed;
  if (rmu_pts.size() != 24) {
    note = "rmu sweep incomplete";
    return false;
  }

  std::vector<SweepPoint> all = crisp_pts;
  all.insert(all.end(), rmu_pts.begin(), rmu_pts.end());
  write_sweep_json((fx.dir / "sweep.json").string(), all, cfg.seed, run_config_hash(cfg));
  auto env = pareto_envelope(crisp_pts, cfg.bucket_width);
  write_frontier_csv((fx.dir / "frontier.csv").string(), env, cfg.bucket_width);
  write_frontier_svg((fx.dir / "frontier.svg").string(), all, cfg.bucket_width, 25.0,
                     fx.orig.retain_acc);

  // exported frontier must match the brute-force bucket-max reference exactly
  auto ref = brute_envelope(crisp_pts, cfg.bucket_width);
  if (env.size() != ref.size()) {
    note = "frontier size mismatch";
    return false;
  }
  for (size_t i = 0; i < env.size(); ++i)
    if (env[i].digest != ref[i].digest || env[i].u != ref[i].u || env[i].r != ref[i].r) {
      note = "frontier mismatch at entry " + std::to_string(i);
      return false;
    }

  bool in_rect = false;
  double best_u = 1e9;
  for (const auto& p : crisp_pts) {
    if (!p.failed && p.u <= 40.0 && p.r >= 0.9 * fx.orig.retain_acc) in_rect = true;
    if (!p.failed) best_u = std::min(best_u, p.u);
  }
  note = "crisp best U " + fmt(best_u) + ", rmu failures " + std::to_string(rmu_failed) +
         "/24, frontier exact";
  return in_rect;
}

bool criterion7(const Fixture& fx, std::string& note) {
  if (!fx.ok) {
    note = "pipeline failed: " + fx.error;
    return false;
  }
  // copy only merged weights + corpus to a fresh dir: no adapter file at all
  const fs::path solo = fs::temp_directory_path() / "crisp_acceptance_merged";
  fs::remove_all(solo);
  fs::create_directories(solo);
  fs::copy(fx.dir / "merged.crlm", solo / "merged.crlm");

  const LmParams lm_orig = load_lm<real>((fx.dir / "lm.crlm").string());
  const LmParams merged = load_lm<real>((solo / "merged.crlm").string());
  Corpora corp;
  const fs::path cd = fx.dir / "corpus";
  corp.retain_heldout = read_docs((cd / "retain_heldout.txt").string(), CorpusTag::retain);
  corp.probes_unlearn = read_probes((cd / "probes_unlearn.json").string());
  corp.probes_retain = read_probes((cd / "probes_retain.json").string());
  corp.probes_general = read_probes((cd / "probes_general.json").string());

  EvalInputs in = make_eval_inputs(fx.cfg, corp, lm_orig);
  const EvalReport again = evaluate_model(merged, nullptr, in);
  const double drift = std::max(
      {std::abs(again.unlearn_acc - fx.edited.unlearn_acc),
       std::abs(again.retain_acc - fx.edited.retain_acc),
       std::abs(again.general_acc - fx.edited.general_acc),
       std::abs(again.fluency - fx.edited.fluency),
       std::abs(again.concept_score - fx.edited.concept_score)});
  note = "max metric drift " + std::to_string(drift);
  return drift <= 0.1;
}

// --------------------------------------------------------------------------
// 8: byte-identical reruns
// --------------------------------------------------------------------------

bool criterion8(std::string& note) {
  const char* ini =
      "[global]\nseed = 7\n[corpus]\nn_docs_per_corpus = 40\nn_heldout_docs = 8\ndoc_len = 64\n"
      "[lm]\ncontext_len = 64\ntrain_steps = 20\n[sae]\ntrain_steps = 50\n[select]\ntau = 0.5\n"
      "[unlearn]\nsteps = 2\n";
  RunConfig cfg = parse_run_config(ini);
  const fs::path a = fs::temp_directory_path() / "crisp_acceptance_det_a";
  const fs::path b = fs::temp_directory_path() / "crisp_acceptance_det_b";
  fs::remove_all(a);
  fs::remove_all(b);
  try {
    run_pipeline(cfg, a.string());
    run_pipeline(cfg, b.string());
  } catch (const std::exception& e) {
    note = std::string("pipeline failed: ") + e.what();
    return false;
  }
  auto slurp = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  };
  int compared = 0;
  for (const auto& entry : fs::recursive_directory_iterator(a)) {
    if (!entry.is_regular_file()) continue;
    const auto ext = entry.path().extension();
    if (ext != ".json" && ext != ".csv" && ext != ".jsonl") continue;
    if (entry.path().filename() == "MANIFEST.json") continue;  // carries wall times
    const auto rel = fs::relative(entry.path(), a);
    if (slurp(entry.path()) != slurp(b / rel)) {
      note = "differs: " + rel.string();
      return false;
    }
    ++compared;
  }
  note = std::to_string(compared) + " JSON/CSV files byte-identical";
  return compared > 0;
}

}  // namespace

int main() {
  std::vector<Criterion> out;
  auto run = [&](int id, const std::string& desc, auto&& fn) {
    Criterion c{id, desc};
    try {
      c.pass = fn(c.note);
    } catch (const std::exception& e) {
      c.pass = false;
      c.note = std::string("exception: ") + e.what();
    }
    std::cout << "criterion " << c.id << ": " << (c.pass ? "PASS" : "FAIL") << " — " << desc
              << " (" << c.note << ")" << std::endl;
    out.push_back(c);
  };

  run(1, "overall score reproduces published table", criterion1);
  run(2, "salient selection matches brute force", criterion2);
  run(3, "gradients match finite differences", criterion3);

  Fixture fx = run_fixture();
  run(4, "end-to-end unlearning hits target metrics",
      [&](std::string& n) { return criterion4(fx, n); });
  run(5, "suppression is selective", [&](std::string& n) { return criterion5(fx, n); });
  run(6, "sweep produces a valid trade-off envelope",
      [&](std::string& n) { return criterion6(fx, n); });
  run(7, "edit persists in merged weights", [&](std::string& n) { return criterion7(fx, n); });
  run(8, "reruns are byte-identical", criterion8);

  int failures = 0;
  for (const auto& c : out) failures += !c.pass;
  if (failures) std::cout << failures << " criteria failed" << std::endl;
  return failures ? 1 : 0;
}
