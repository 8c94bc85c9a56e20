#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "crisp/eval.hpp"

#include <algorithm>
#include <random>

using namespace crisp;

namespace {

struct Row {
  const char* name;
  double overall, u, r, m, f, c;
};

// Published benchmark table used as the frozen oracle for the overall score.
const Row kTable[] = {
    {"bio-a-original", 56.60, 68.29, 76.81, 61.15, 1.24, 1.77},
    {"bio-a-elm", 33.93, 41.44, 62.17, 55.31, 0.25, 1.24},
    {"bio-a-rmu", 52.51, 34.54, 67.75, 59.50, 0.56, 1.58},
    {"bio-a-crisp", 60.10, 30.93, 74.13, 60.28, 0.77, 1.58},
    {"bio-b-original", 54.37, 55.26, 55.27, 46.30, 1.07, 1.78},
    {"bio-b-elm", 22.13, 27.80, 40.54, 35.80, 0.14, 1.20},
    {"bio-b-rmu", 51.91, 27.79, 48.77, 42.77, 0.76, 1.63},
    {"bio-b-crisp", 56.70, 29.67, 54.45, 46.33, 0.92, 1.63},
    {"cyber-a-original", 61.32, 40.95, 54.00, 61.15, 1.27, 1.43},
    {"cyber-a-elm", 58.91, 30.78, 53.00, 58.56, 0.99, 1.40},
    {"cyber-a-rmu", 52.47, 33.70, 55.00, 61.15, 0.68, 1.23},
    {"cyber-a-crisp", 61.74, 29.38, 53.00, 58.86, 1.14, 1.49},
    {"cyber-b-original", 52.57, 33.90, 39.00, 46.30, 1.05, 1.46},
    {"cyber-b-elm", 43.33, 28.87, 29.00, 38.71, 0.76, 1.36},
    {"cyber-b-rmu", 44.79, 28.67, 36.00, 44.79, 0.64, 1.23},
    {"cyber-b-crisp", 49.02, 27.26, 38.00, 46.26, 0.81, 1.28},
};

LmParams tiny_lm(uint64_t seed = 3) {
  LmConfig cfg;
  cfg.vocab_size = 32;
  cfg.d_model = 16;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.d_ff = 32;
  cfg.context_len = 16;
  cfg.seed = seed;
  return init_lm<real>(cfg);
}

ProbeSet tiny_probes(int n, uint64_t seed) {
  std::mt19937_64 gen(seed);
  ProbeSet ps;
  for (int i = 0; i < n; ++i) {
    ProbeItem item;
    item.prompt = {kBosToken, TokenId(1 + gen() % 30), TokenId(1 + gen() % 30)};
    std::vector<TokenId> opts{1, 2, 3, 4};
    for (auto& o : opts) o = TokenId(1 + (o * 7 + TokenId(gen() % 24)) % 30);
    std::sort(opts.begin(), opts.end());
    opts.erase(std::unique(opts.begin(), opts.end()), opts.end());
    while (opts.size() < 4) opts.push_back(TokenId(1 + (opts.back() + 1) % 30));
    std::sort(opts.begin(), opts.end());
    opts.erase(std::unique(opts.begin(), opts.end()), opts.end());
    if (opts.size() < 4) { --i; continue; }
    item.answer = opts[0];
    item.distractors = {opts[1], opts[2], opts[3]};
    ps.items.push_back(item);
  }
  return ps;
}

}  // namespace

TEST_CASE("overall score reproduces the published table") {
  for (const auto& row : kTable) {
    const double got = overall_score(row.u, row.r, row.m, row.f, row.c);
    INFO(row.name);
    CHECK(std::abs(got - row.overall) <= 0.01);
  }
}

TEST_CASE("overall score basics") {
  // All components equal: harmonic mean of equal terms is the term.
  CHECK(overall_score(50.0, 50.0, 50.0, 1.0, 1.0) == doctest::Approx(50.0));
  // Any zero (or worse) component collapses the score.
  CHECK(overall_score(100.0, 50.0, 50.0, 1.0, 1.0) == 0.0);
  CHECK(overall_score(120.0, 50.0, 50.0, 1.0, 1.0) == 0.0);
  CHECK(overall_score(50.0, 50.0, 50.0, 0.0, 1.0) == 0.0);
}

TEST_CASE("overall score monotonicity") {
  const double base = overall_score(40.0, 60.0, 55.0, 1.0, 1.2);
  CHECK(overall_score(35.0, 60.0, 55.0, 1.0, 1.2) > base);  // lower U is better
  CHECK(overall_score(40.0, 65.0, 55.0, 1.0, 1.2) > base);
  CHECK(overall_score(40.0, 60.0, 60.0, 1.0, 1.2) > base);
  CHECK(overall_score(40.0, 60.0, 55.0, 1.3, 1.2) > base);
  CHECK(overall_score(40.0, 60.0, 55.0, 1.0, 1.5) > base);
}

TEST_CASE("fluency proxy") {
  CHECK(fluency_proxy(10.0, 10.0) == doctest::Approx(2.0));
  CHECK(fluency_proxy(10.0, 5.0) == doctest::Approx(2.0));   // improvement capped
  CHECK(fluency_proxy(10.0, 20.0) == doctest::Approx(1.0));  // doubled ppl halves F
  CHECK(fluency_proxy(10.0, 40.0) == doctest::Approx(0.5));
  CHECK_THROWS_AS(fluency_proxy(0.0, 10.0), ConfigError);
  CHECK_THROWS_AS(fluency_proxy(10.0, -1.0), ConfigError);
}

TEST_CASE("selection score") {
  SelectionMetrics orig{60.0, 80.0, 50.0};
  SUBCASE("no change, ratio mode") {
    // unlearning term = 1, ratios = 1 -> score 1
    CHECK(selection_score(orig, orig, SelectionScoreMode::ratio) == doctest::Approx(1.0));
  }
  SUBCASE("perfect unlearning, preserved accuracy") {
    SelectionMetrics edited{0.0, 80.0, 50.0};
    // unlearning term = 2, ratios 1 -> cbrt(2)
    CHECK(selection_score(orig, edited, SelectionScoreMode::ratio) ==
          doctest::Approx(std::cbrt(2.0)));
  }
  SUBCASE("formula mode goes to zero on any drop") {
    SelectionMetrics edited{30.0, 79.0, 50.0};
    CHECK(selection_score(orig, edited, SelectionScoreMode::formula) == 0.0);
  }
  SUBCASE("unlearning regression clamps to zero") {
    SelectionMetrics edited{130.0, 80.0, 50.0};
    CHECK(selection_score(orig, edited, SelectionScoreMode::ratio) == 0.0);
  }
  CHECK_THROWS_AS(selection_score({0.0, 80.0, 50.0}, orig), ConfigError);
}

TEST_CASE("probe accuracy is invariant to item order") {
  LmParams lm = tiny_lm();
  ProbeSet ps = tiny_probes(17, 99);
  const double a = probe_accuracy(lm, nullptr, ps);
  std::mt19937_64 gen(5);
  std::shuffle(ps.items.begin(), ps.items.end(), gen);
  CHECK(probe_accuracy(lm, nullptr, ps) == doctest::Approx(a));
  CHECK(a >= 0.0);
  CHECK(a <= 100.0);
}

TEST_CASE("probe accuracy rejects bad input") {
  LmParams lm = tiny_lm();
  ProbeSet empty;
  CHECK_THROWS_AS(probe_accuracy(lm, nullptr, empty), ConfigError);
  ProbeSet dup;
  dup.items.push_back({{kBosToken, 1}, 2, {2, 3, 4}});
  CHECK_THROWS_AS(probe_accuracy(lm, nullptr, dup), ConfigError);
}

TEST_CASE("concept proxy needs enough prompts and stays in range") {
  LmParams lm = tiny_lm();
  std::vector<Tokens> prompts(5, Tokens{kBosToken, 1});
  CHECK_THROWS_AS(concept_proxy(lm, nullptr, prompts, {1, 8}), ConfigError);
  prompts.assign(20, Tokens{kBosToken, 1});
  const double c = concept_proxy(lm, nullptr, prompts, {1, 8}, 5);
  CHECK(c >= 0.0);
  CHECK(c <= 2.0);
  // Whole vocabulary counts as on-domain -> every generation hits.
  CHECK(concept_proxy(lm, nullptr, prompts, {0, 32}, 5) == doctest::Approx(2.0));
}

TEST_CASE("report json round trip") {
  EvalReport r;
  r.unlearn_acc = 31.25;
  r.retain_acc = 87.5;
  r.general_acc = 90.0;
  r.fluency = 1.75;
  r.concept_score = 0.4;
  r.overall = overall_score(r.unlearn_acc, r.retain_acc, r.general_acc, r.fluency, r.concept_score);
  EvalReport back = report_from_json(report_json(r, 42, 7));
  CHECK(back.unlearn_acc == doctest::Approx(r.unlearn_acc));
  CHECK(back.overall == doctest::Approx(r.overall));
  CHECK(report_csv_header() == "run,u,r,m,f,c,overall");
  CHECK(report_csv_row("x", r).substr(0, 2) == "x,");
}
