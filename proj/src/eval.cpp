#include "crisp/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

namespace crisp {

namespace {

// Summed log-probability of continuation tokens given the prompt, divided by
// continuation length.
double continuation_logprob(const LmParams& lm, const LoraAdapter* adapter, const Tokens& prompt,
                            const Tokens& continuation) {
  Tokens seq = prompt;
  seq.insert(seq.end(), continuation.begin(), continuation.end());
  Mat logits = lm_forward<real>(lm, adapter, seq);
  double total = 0.0;
  for (size_t i = 0; i < continuation.size(); ++i) {
    const Eigen::Index pos = Eigen::Index(prompt.size() + i - 1);
    const real mx = logits.row(pos).maxCoeff();
    const double lse =
        std::log(double((logits.row(pos).array() - mx).exp().sum())) + double(mx);
    total += double(logits(pos, continuation[i])) - lse;
  }
  return total / double(continuation.size());
}

}  // namespace

double probe_accuracy(const LmParams& lm, const LoraAdapter* adapter, const ProbeSet& probes) {
  if (probes.items.empty()) throw ConfigError("empty probe set");
  probes.validate(lm.cfg.vocab_size);
  long correct = 0;
  for (const auto& item : probes.items) {
    const double answer_score = continuation_logprob(lm, adapter, item.prompt, {item.answer});
    bool wins = true;
    for (TokenId d : item.distractors) {
      if (continuation_logprob(lm, adapter, item.prompt, {d}) >= answer_score) {
        wins = false;
        break;
      }
    }
    if (wins) ++correct;
  }
  return 100.0 * double(correct) / double(probes.items.size());
}

double fluency_proxy(double ppl_orig, double ppl_edited) {
  if (ppl_orig <= 0 || ppl_edited <= 0) throw ConfigError("perplexities must be positive");
  return 2.0 * std::min(1.0, ppl_orig / ppl_edited);
}

double concept_proxy(const LmParams& lm, const LoraAdapter* adapter,
                     const std::vector<Tokens>& prompts, const TokenRange& domain_vocab,
                     int gen_len) {
  if (prompts.size() < 20) throw ConfigError("concept proxy needs at least 20 prompts");
  long hits = 0;
  for (const auto& prompt : prompts) {
    Tokens out = generate<real>(lm, adapter, prompt, gen_len);
    const bool on_domain = std::any_of(out.begin() + long(prompt.size()), out.end(),
                                       [&](TokenId t) { return domain_vocab.contains(t); });
    if (on_domain) ++hits;
  }
  return 2.0 * double(hits) / double(prompts.size());
}

double overall_score(double u, double r, double m, double f, double c) {
  const double comps[5] = {100.0 - u, r, m, f * 50.0, c * 50.0};
  double inv_sum = 0.0;
  for (double x : comps) {
    if (x <= 0.0) return 0.0;
    inv_sum += 1.0 / x;
  }
  return 5.0 / inv_sum;
}

double selection_score(const SelectionMetrics& orig, const SelectionMetrics& edited,
                       SelectionScoreMode mode) {
  if (orig.unlearn <= 0 || orig.retain <= 0 || orig.general <= 0)
    throw ConfigError("original accuracies must be positive");
  const double unlearning = 1.0 - (edited.unlearn - orig.unlearn) / orig.unlearn;
  double retention, general;
  if (mode == SelectionScoreMode::ratio) {
    retention = edited.retain / orig.retain;
    general = edited.general / orig.general;
  } else {
    retention = (edited.retain - orig.retain) / orig.retain;
    general = (edited.general - orig.general) / orig.general;
  }
  const double a = std::max(0.0, unlearning);
  const double b = std::max(0.0, retention);
  const double c = std::max(0.0, general);
  return std::cbrt(a * b * c);
}

EvalReport evaluate_model(const LmParams& lm, const LoraAdapter* adapter, const EvalInputs& in) {
  if (!in.probes_unlearn || !in.probes_retain || !in.probes_general || !in.fluency_docs)
    throw ConfigError("incomplete evaluation inputs");
  EvalReport r;
  r.unlearn_acc = probe_accuracy(lm, adapter, *in.probes_unlearn);
  r.retain_acc = probe_accuracy(lm, adapter, *in.probes_retain);
  r.general_acc = probe_accuracy(lm, adapter, *in.probes_general);
  const double ppl_edited = perplexity<real>(lm, adapter, *in.fluency_docs);
  r.fluency = fluency_proxy(in.ppl_orig, ppl_edited);
  r.concept_score = concept_proxy(lm, adapter, in.concept_prompts, in.concept_vocab);
  r.overall = overall_score(r.unlearn_acc, r.retain_acc, r.general_acc, r.fluency, r.concept_score);
  r.details = {{"ppl_orig", in.ppl_orig},
               {"ppl_edited", ppl_edited},
               {"n_probes_unlearn", in.probes_unlearn->items.size()},
               {"n_probes_retain", in.probes_retain->items.size()},
               {"n_probes_general", in.probes_general->items.size()},
               {"n_concept_prompts", in.concept_prompts.size()}};
  return r;
}

nlohmann::json report_json(const EvalReport& r, uint64_t seed, uint64_t config_hash) {
  return {{"meta",
           {{"tool_version", kToolVersion}, {"seed", seed}, {"config_hash", config_hash}}},
          {"u", r.unlearn_acc},
          {"r", r.retain_acc},
          {"m", r.general_acc},
          {"f", r.fluency},
          {"c", r.concept_score},
          {"overall", r.overall},
          {"details", r.details}};
}

EvalReport report_from_json(const nlohmann::json& j) {
  EvalReport r;
  r.unlearn_acc = j.at("u");
  r.retain_acc = j.at("r");
  r.general_acc = j.at("m");
  r.fluency = j.at("f");
  r.concept_score = j.at("c");
  r.overall = j.at("overall");
  if (j.contains("details")) r.details = j.at("details");
  return r;
}

void write_report(const std::string& path, const EvalReport& r, uint64_t seed,
                  uint64_t config_hash) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open for write: " + path);
  os << report_json(r, seed, config_hash).dump(2) << '\n';
}

EvalReport read_report(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open: " + path);
  nlohmann::json j;
  is >> j;
  return report_from_json(j);
}

std::string report_csv_header() { return "run,u,r,m,f,c,overall"; }

std::string report_csv_row(const std::string& run_id, const EvalReport& r) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%s,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f", run_id.c_str(),
                r.unlearn_acc, r.retain_acc, r.general_acc, r.fluency, r.concept_score, r.overall);
  return buf;
}

}  // namespace crisp
