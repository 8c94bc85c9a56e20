#pragma once

#include "crisp/common.hpp"
#include "crisp/corpus.hpp"
#include "crisp/eval.hpp"
#include "crisp/lm.hpp"
#include "crisp/sae.hpp"
#include "crisp/selection.hpp"
#include "crisp/sweep.hpp"
#include "crisp/unlearn.hpp"

#include <map>
#include <string>
#include <vector>

namespace crisp {

// ---------------------------------------------------------------------------
// Run configuration: flat key=value sections in one human-editable file.
// ---------------------------------------------------------------------------

struct RunConfig {
  uint64_t seed = 42;
  int jobs = 1;

  CorpusSpec corpus;

  LmConfig lm;
  LmTrainConfig lm_train;

  SaeConfig sae;
  SaeTrainConfig sae_train;
  std::vector<int> sae_layers{2, 3};

  int select_k = 20;
  double select_tau = 3.0;
  double select_eps = 1e-8;
  ClassifyThresholds classify;

  double lambda_mean = 30.0;
  double beta = 0.99;
  double gamma = 0.01;
  int lora_rank = 8;
  double lora_scale = 1.0;
  double unlearn_lr = 2e-3;
  long unlearn_steps = 500;
  int unlearn_batch = 8;
  std::vector<int> opt_layers{0, 1};

  RmuConfig rmu;

  int eval_gen_len = 20;

  SweepSpace sweep;
  int sweep_n = 24;
  std::vector<std::string> sweep_methods{"crisp", "rmu"};
  double bucket_width = 2.0;

  void validate() const;
};

// Parses "[section]" headers and "key = value" lines; '#' and ';' start
// comments. Unknown keys are a ConfigError (typo protection).
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::string& path);

// Canonical serialization; equal configs hash equal regardless of input
// formatting or key order.
std::string run_config_canonical(const RunConfig& c);
uint64_t run_config_hash(const RunConfig& c);

// ---------------------------------------------------------------------------
// Activation dump ("CRAD"): magic, u32 version, u32 n_layers, u32 layer ids,
// u32 d_model, u64 token count, then per token per layer one d_model row of
// little-endian f32. File size is exactly header + tokens*layers*d_model*4.
// ---------------------------------------------------------------------------

struct ActivationDump {
  std::vector<int> layers;
  int d_model = 0;
  long n_tokens = 0;
  std::map<int, Eigen::MatrixXf> acts;  // layer -> [n_tokens, d_model]
};

void write_activation_dump(const std::string& path, const std::vector<int>& layers, int d_model,
                           const std::vector<ActivationRecord>& records);
ActivationDump read_activation_dump(const std::string& path);

// ---------------------------------------------------------------------------
// Staged pipeline with content-hash skipping. Partial progress is recorded
// in <out>/MANIFEST.json; once any stage actually runs, every stage after it
// runs too.
// ---------------------------------------------------------------------------

inline const std::vector<std::string> kPipelineStages = {
    "gen-corpus", "train-lm", "dump-acts", "train-sae", "select", "unlearn", "eval"};

struct StageStatus {
  std::string name;
  bool skipped = false;
};

struct PipelineError : std::runtime_error {
  PipelineError(const std::string& stage, const std::string& msg)
      : std::runtime_error("[" + stage + "] " + msg), stage(stage) {}
  std::string stage;
};

// Runs the standard stage sequence; returns one status per stage.
std::vector<StageStatus> run_pipeline(const RunConfig& cfg, const std::string& out_dir);

// Individual stages, usable from the matching CLI subcommands. Each reads its
// inputs from out_dir and writes its outputs there.
void stage_gen_corpus(const RunConfig& cfg, const std::string& out_dir);
void stage_train_lm(const RunConfig& cfg, const std::string& out_dir);
void stage_dump_acts(const RunConfig& cfg, const std::string& out_dir);
void stage_train_sae(const RunConfig& cfg, const std::string& out_dir);
void stage_select(const RunConfig& cfg, const std::string& out_dir);
void stage_unlearn(const RunConfig& cfg, const std::string& out_dir);
void stage_eval(const RunConfig& cfg, const std::string& out_dir);

// Output files a stage is responsible for, relative to out_dir.
std::vector<std::string> stage_outputs(const RunConfig& cfg, const std::string& stage);

// Assembles evaluation inputs (probes, fluency docs, concept prompts) from a
// generated corpus directory; ppl_orig is computed against `lm`.
EvalInputs make_eval_inputs(const RunConfig& cfg, const Corpora& corpora, const LmParams& lm);

}  // namespace crisp
