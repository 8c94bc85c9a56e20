#include "crisp/pipeline.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>

namespace fs = std::filesystem;
using namespace crisp;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitStage = 3;

int default_jobs() {
  if (const char* env = std::getenv("CRISP_JOBS")) {
    try {
      return std::max(1, std::stoi(env));
    } catch (const std::exception&) {
      return 1;
    }
  }
  return 1;
}

std::string join_path(const std::string& dir, const std::string& rel) {
  return (fs::path(dir) / rel).string();
}

// Stage commands share one shape: load config, ensure out dir, run the stage.
int run_stage(const std::string& name, void (*fn)(const RunConfig&, const std::string&),
              const std::string& config_path, const std::string& out_dir) {
  RunConfig cfg;
  try {
    cfg = load_run_config(config_path);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  }
  try {
    fs::create_directories(out_dir);
    fn(cfg, out_dir);
  } catch (const std::exception& e) {
    std::cerr << "[" << name << "] " << e.what() << '\n';
    return kExitStage;
  }
  return kExitOk;
}

int cmd_pipeline(const std::string& config_path, const std::string& out_dir, int jobs) {
  RunConfig cfg;
  try {
    cfg = load_run_config(config_path);
    cfg.jobs = jobs;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  }
  try {
    auto statuses = run_pipeline(cfg, out_dir);
    for (const auto& st : statuses)
      std::cout << st.name << ": " << (st.skipped ? "skipped" : "ran") << '\n';
  } catch (const PipelineError& e) {
    std::cerr << e.what() << '\n';
    return kExitStage;
  } catch (const std::exception& e) {
    std::cerr << e.what() << '\n';
    return kExitStage;
  }
  return kExitOk;
}

int cmd_rmu(const std::string& config_path, const std::string& out_dir) {
  RunConfig cfg;
  try {
    cfg = load_run_config(config_path);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  }
  try {
    LmParams lm = load_lm<real>(join_path(out_dir, "lm.crlm"));
    Corpora c;
    c.target = read_docs(join_path(out_dir, "corpus/target.txt"), CorpusTag::target);
    c.retain = read_docs(join_path(out_dir, "corpus/retain.txt"), CorpusTag::retain);
    c.retain_heldout =
        read_docs(join_path(out_dir, "corpus/retain_heldout.txt"), CorpusTag::retain);
    c.probes_unlearn = read_probes(join_path(out_dir, "corpus/probes_unlearn.json"));
    c.probes_retain = read_probes(join_path(out_dir, "corpus/probes_retain.json"));
    c.probes_general = read_probes(join_path(out_dir, "corpus/probes_general.json"));
    RmuConfig rc = cfg.rmu;
    rc.seed = derive_seed(cfg.seed, "rmu");
    LmParams edited = train_rmu<real>(lm, rc, c);
    save_lm(join_path(out_dir, "rmu.crlm"), edited);
    EvalInputs in = make_eval_inputs(cfg, c, lm);
    EvalReport rep = evaluate_model(edited, nullptr, in);
    write_report(join_path(out_dir, "report_rmu.json"), rep, cfg.seed, run_config_hash(cfg));
  } catch (const std::exception& e) {
    std::cerr << "[rmu] " << e.what() << '\n';
    return kExitStage;
  }
  return kExitOk;
}

int cmd_sweep(const std::string& config_path, const std::string& out_dir, int n, int jobs) {
  RunConfig cfg;
  try {
    cfg = load_run_config(config_path);
    if (n > 0) cfg.sweep_n = n;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  }
  try {
    LmParams lm = load_lm<real>(join_path(out_dir, "lm.crlm"));
    Corpora c;
    c.target = read_docs(join_path(out_dir, "corpus/target.txt"), CorpusTag::target);
    c.retain = read_docs(join_path(out_dir, "corpus/retain.txt"), CorpusTag::retain);
    c.coherence = read_docs(join_path(out_dir, "corpus/coherence.txt"), CorpusTag::coherence);
    c.retain_heldout =
        read_docs(join_path(out_dir, "corpus/retain_heldout.txt"), CorpusTag::retain);
    c.probes_unlearn = read_probes(join_path(out_dir, "corpus/probes_unlearn.json"));
    c.probes_retain = read_probes(join_path(out_dir, "corpus/probes_retain.json"));
    c.probes_general = read_probes(join_path(out_dir, "corpus/probes_general.json"));

    std::map<int, SaeParams> saes;
    for (int layer : cfg.sae_layers)
      saes[layer] = load_sae<real>(join_path(out_dir, "sae_l" + std::to_string(layer) + ".crsa"));
    std::vector<FeatureStats> stats = read_stats_csv(join_path(out_dir, "stats.csv"));

    SweepContext ctx;
    ctx.lm = &lm;
    ctx.saes = &saes;
    ctx.stats = &stats;
    ctx.corpora = &c;
    ctx.eval_inputs = make_eval_inputs(cfg, c, lm);
    ctx.sae_layers = cfg.sae_layers;
    ctx.opt_layers = cfg.opt_layers;
    ctx.orig_report = evaluate_model(lm, nullptr, ctx.eval_inputs);

    std::vector<SweepPoint> all;
    const uint64_t sweep_seed = derive_seed(cfg.seed, "sweep");
    for (const auto& method : cfg.sweep_methods) {
      auto pts = run_sweep(ctx, cfg.sweep, method, cfg.sweep_n,
                           derive_seed(sweep_seed, method), jobs);
      all.insert(all.end(), pts.begin(), pts.end());
    }
    write_sweep_json(join_path(out_dir, "sweep.json"), all, cfg.seed, run_config_hash(cfg));
    auto frontier = pareto_envelope(all, cfg.bucket_width);
    write_frontier_csv(join_path(out_dir, "frontier.csv"), frontier, cfg.bucket_width);
    write_frontier_svg(join_path(out_dir, "frontier.svg"), all, cfg.bucket_width, 25.0,
                       ctx.orig_report.retain_acc);
  } catch (const std::exception& e) {
    std::cerr << "[sweep] " << e.what() << '\n';
    return kExitStage;
  }
  return kExitOk;
}

int cmd_report(const std::string& out_dir) {
  try {
    EvalReport orig = read_report(join_path(out_dir, "report_orig.json"));
    EvalReport edited = read_report(join_path(out_dir, "report_edited.json"));
    std::cout << report_csv_header() << '\n'
              << report_csv_row("orig", orig) << '\n'
              << report_csv_row("edited", edited) << '\n';
  } catch (const std::exception& e) {
    std::cerr << "[report] " << e.what() << '\n';
    return kExitStage;
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CRISP desk-scale concept unlearning pipeline"};
  app.require_subcommand(1);

  std::string config_path, out_dir = "out";
  int jobs = default_jobs();
  int n = 0;

  struct Sub {
    const char* name;
    const char* desc;
    void (*fn)(const RunConfig&, const std::string&);
  };
  const std::vector<Sub> stage_subs = {
      {"gen-corpus", "generate synthetic corpora and probes", stage_gen_corpus},
      {"train-lm", "pretrain the tiny LM", stage_train_lm},
      {"dump-acts", "dump residual activations at the SAE layers", stage_dump_acts},
      {"train-sae", "train one SAE per configured layer", stage_train_sae},
      {"select", "compute feature stats and the salient set", stage_select},
      {"unlearn", "run CRISP fine-tuning and merge the adapter", stage_unlearn},
      {"eval", "evaluate original and edited models", stage_eval},
  };
  std::map<std::string, CLI::App*> subs;
  for (const auto& s : stage_subs) {
    CLI::App* sub = app.add_subcommand(s.name, s.desc);
    sub->add_option("--config", config_path, "run config file")->required();
    sub->add_option("--out", out_dir, "output directory");
    subs[s.name] = sub;
  }

  CLI::App* rmu = app.add_subcommand("rmu", "train and evaluate the RMU baseline");
  rmu->add_option("--config", config_path, "run config file")->required();
  rmu->add_option("--out", out_dir, "output directory");

  CLI::App* sweep = app.add_subcommand("sweep", "hyperparameter sweep with frontier export");
  sweep->add_option("--config", config_path, "run config file")->required();
  sweep->add_option("--out", out_dir, "output directory");
  sweep->add_option("--n", n, "points per method (overrides config)");
  sweep->add_option("--jobs", jobs, "parallel workers");

  CLI::App* report = app.add_subcommand("report", "print the summary table for a run directory");
  report->add_option("--out", out_dir, "output directory");

  CLI::App* pipeline = app.add_subcommand("pipeline", "run all stages with hash-based skipping");
  pipeline->add_option("--config", config_path, "run config file")->required();
  pipeline->add_option("--out", out_dir, "output directory");
  pipeline->add_option("--jobs", jobs, "parallel workers");

  CLI11_PARSE(app, argc, argv);

  for (const auto& s : stage_subs)
    if (subs[s.name]->parsed()) return run_stage(s.name, s.fn, config_path, out_dir);
  if (rmu->parsed()) return cmd_rmu(config_path, out_dir);
  if (sweep->parsed()) return cmd_sweep(config_path, out_dir, n, jobs);
  if (report->parsed()) return cmd_report(out_dir);
  if (pipeline->parsed()) return cmd_pipeline(config_path, out_dir, jobs);
  return kExitOk;
}
