#pragma once

#include "crisp/common.hpp"
#include "crisp/corpus.hpp"
#include "crisp/lm.hpp"

#include <nlohmann/json.hpp>

#include <optional>
#include <string>
#include <vector>

namespace crisp {

struct EvalReport {
  double unlearn_acc = 0.0;  // U, percent
  double retain_acc = 0.0;   // R, percent
  double general_acc = 0.0;  // M, percent
  double fluency = 0.0;      // F in [0,2]
  double concept_score = 0.0;  // C in [0,2]
  double overall = 0.0;
  nlohmann::json details = nlohmann::json::object();
};

// Length-normalized summed log-likelihood MCQ scoring; the answer must
// strictly outrank every distractor.
double probe_accuracy(const LmParams& lm, const LoraAdapter* adapter, const ProbeSet& probes);

// F = 2 * min(1, ppl_orig / ppl_edited)
double fluency_proxy(double ppl_orig, double ppl_edited);

// Greedy-generate gen_len tokens per prompt; C = 2 * fraction of generations
// containing at least one domain-vocabulary token.
double concept_proxy(const LmParams& lm, const LoraAdapter* adapter,
                     const std::vector<Tokens>& prompts, const TokenRange& domain_vocab,
                     int gen_len = 20);

// HM(100-U, R, M, 50F, 50C); zero (or negative) transformed component => 0.
double overall_score(double u, double r, double m, double f, double c);

enum class SelectionScoreMode { ratio, formula };

struct SelectionMetrics {
  double unlearn, retain, general;  // accuracies
};

// Geometric mean of unlearning score and the retention/general scores.
// ratio mode uses A_edit/A_orig for retention/general; formula mode uses the
// literal relative-change expression (which goes negative on any drop and is
// clamped to zero).
double selection_score(const SelectionMetrics& orig, const SelectionMetrics& edited,
                       SelectionScoreMode mode = SelectionScoreMode::ratio);

struct EvalInputs {
  const ProbeSet* probes_unlearn = nullptr;
  const ProbeSet* probes_retain = nullptr;
  const ProbeSet* probes_general = nullptr;
  const std::vector<TokenizedDoc>* fluency_docs = nullptr;
  std::vector<Tokens> concept_prompts;
  TokenRange concept_vocab;
  double ppl_orig = 0.0;  // precomputed original-model perplexity on fluency_docs
};

EvalReport evaluate_model(const LmParams& lm, const LoraAdapter* adapter, const EvalInputs& in);

nlohmann::json report_json(const EvalReport& r, uint64_t seed, uint64_t config_hash);
EvalReport report_from_json(const nlohmann::json& j);
void write_report(const std::string& path, const EvalReport& r, uint64_t seed,
                  uint64_t config_hash);
EvalReport read_report(const std::string& path);

// One CSV row per run, for sweep ingestion.
std::string report_csv_header();
std::string report_csv_row(const std::string& run_id, const EvalReport& r);

}  // namespace crisp
