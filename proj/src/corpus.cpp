#include "crisp/corpus.hpp"

#include "crisp/rng.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <fstream>
#include <numeric>
#include <regex>
#include <set>
#include <sstream>

namespace crisp {

void CorpusSpec::validate() const {
  if (vocab_size <= 0) throw ConfigError("vocab_size must be positive");
  const TokenRange ranges[] = {target_vocab, retain_vocab, general_vocab, shared_vocab};
  for (const auto& r : ranges) {
    if (r.lo < 0 || r.hi > vocab_size || r.lo >= r.hi)
      throw ConfigError("vocab range outside [0, vocab_size)");
  }
  // target/retain/general must be pairwise disjoint
  const TokenRange concepts[] = {target_vocab, retain_vocab, general_vocab};
  for (int i = 0; i < 3; ++i)
    for (int j = i + 1; j < 3; ++j)
      if (concepts[i].lo < concepts[j].hi && concepts[j].lo < concepts[i].hi)
        throw ConfigError("concept vocab ranges overlap");
  if (n_docs_per_corpus <= 0 || doc_len <= 1 || n_facts_per_concept <= 0 || probe_repeat <= 0)
    throw ConfigError("corpus counts must be positive");
}

void ProbeSet::validate(int vocab_size) const {
  for (const auto& item : items) {
    std::set<TokenId> ids(item.distractors.begin(), item.distractors.end());
    ids.insert(item.answer);
    if (ids.size() != 4) throw ConfigError("probe answer/distractors not distinct");
    for (TokenId t : ids)
      if (t < 0 || t >= vocab_size) throw ConfigError("probe token out of range");
    if (item.prompt.empty()) throw ConfigError("empty probe prompt");
  }
}

std::string preprocess_document(const std::string& text, size_t max_chars) {
  if (max_chars == 0) throw ConfigError("max_chars must be positive");

  // Drop markdown header lines (first non-space char is '#'), including
  // their line terminator.
  std::string kept;
  kept.reserve(text.size());
  size_t pos = 0;
  while (pos < text.size()) {
    size_t eol = text.find('\n', pos);
    const size_t end = (eol == std::string::npos) ? text.size() : eol + 1;
    const std::string_view line(text.data() + pos, end - pos);
    size_t first = line.find_first_not_of(" \t");
    if (first == std::string_view::npos || line[first] != '#') kept.append(line);
    pos = end;
  }

  static const std::regex image_link(R"(!\[[^\]]*\]\([^)]*\))");
  static const std::regex citation(R"(\[[^\]]*\])");
  kept = std::regex_replace(kept, image_link, "");
  kept = std::regex_replace(kept, citation, "");

  std::string ascii;
  ascii.reserve(kept.size());
  for (unsigned char c : kept)
    if (c < 0x80) ascii.push_back(char(c));

  if (ascii.size() > max_chars) ascii.resize(max_chars);
  if (ascii.find_first_not_of(" \t\r\n") == std::string::npos)
    throw InputError("document rejected");
  return ascii;
}

namespace {

// Subjects are reused across several relations with distinct objects, so a
// probe cannot be answered from the subject token alone: the model has to
// combine subject and relation. A unique subject->object shortcut would be
// memorized so redundantly by the LM that no residual-stream edit at the SAE
// hooks could remove it.
std::vector<Fact> make_facts(Rng& rng, const TokenRange& domain, const TokenRange& shared,
                             int n_facts) {
  constexpr int kRelsPerSubject = 4;
  const int n_subjects = (n_facts + kRelsPerSubject - 1) / kRelsPerSubject;
  if (domain.size() < n_subjects) throw ConfigError("insufficient vocabulary");
  std::vector<TokenId> subjects(size_t(domain.size()));
  std::iota(subjects.begin(), subjects.end(), domain.lo);
  std::shuffle(subjects.begin(), subjects.end(), rng.engine());
  std::vector<Fact> facts;
  facts.reserve(size_t(n_facts));
  for (int i = 0; i < n_facts; ++i) {
    Fact f;
    f.subj = subjects[size_t(i / kRelsPerSubject)];
    // distinct relation and object per fact of the same subject
    std::set<TokenId> used_rel, used_obj;
    for (int j = (i / kRelsPerSubject) * kRelsPerSubject; j < i; ++j) {
      used_rel.insert(facts[size_t(j)].rel);
      used_obj.insert(facts[size_t(j)].obj);
    }
    do {
      f.rel = TokenId(rng.randint(shared.lo, shared.hi - 1));
    } while (used_rel.count(f.rel));
    do {
      f.obj = TokenId(rng.randint(domain.lo, domain.hi - 1));
    } while (used_obj.count(f.obj));
    facts.push_back(f);
  }
  return facts;
}

void append_fact(Tokens& t, const Fact& f) {
  t.push_back(f.subj);
  t.push_back(f.rel);
  t.push_back(f.obj);
}

TokenizedDoc gen_fact_doc(Rng& rng, const std::vector<Fact>& domain_facts,
                          const std::vector<Fact>& general_facts, const TokenRange& shared,
                          int doc_len, CorpusTag tag) {
  Tokens t{kBosToken};
  while (int(t.size()) < doc_len) {
    const double r = rng.uniform();
    if (r < 0.5 && int(t.size()) + 3 <= doc_len) {
      append_fact(t, domain_facts[size_t(rng.randint(0, int(domain_facts.size()) - 1))]);
    } else if (r < 0.7 && int(t.size()) + 3 <= doc_len) {
      append_fact(t, general_facts[size_t(rng.randint(0, int(general_facts.size()) - 1))]);
    } else {
      const int run = int(rng.randint(1, 3));
      for (int i = 0; i < run && int(t.size()) < doc_len; ++i)
        t.push_back(TokenId(rng.randint(shared.lo, shared.hi - 1)));
    }
  }
  return TokenizedDoc{std::move(t), tag};
}

TokenizedDoc gen_coherence_doc(Rng& rng, const std::vector<Fact>& target_facts,
                               const std::vector<Fact>& general_facts, const TokenRange& shared,
                               int doc_len) {
  // Target-adjacent: subject tokens appear without their fact completion.
  Tokens t{kBosToken};
  while (int(t.size()) < doc_len) {
    const double r = rng.uniform();
    if (r < 0.3) {
      t.push_back(target_facts[size_t(rng.randint(0, int(target_facts.size()) - 1))].subj);
    } else if (r < 0.6 && int(t.size()) + 3 <= doc_len) {
      append_fact(t, general_facts[size_t(rng.randint(0, int(general_facts.size()) - 1))]);
    } else {
      t.push_back(TokenId(rng.randint(shared.lo, shared.hi - 1)));
    }
  }
  return TokenizedDoc{std::move(t), CorpusTag::coherence};
}

ProbeSet make_probes(Rng& rng, const std::vector<Fact>& facts, const TokenRange& domain,
                     ProbeDomain pd, int repeat) {
  if (domain.size() < 4) throw ConfigError("insufficient vocabulary");
  ProbeSet ps;
  ps.domain = pd;
  for (const auto& f : facts) {
    for (int r = 0; r < repeat; ++r) {
      ProbeItem item;
      item.prompt = {kBosToken, f.subj, f.rel};
      item.answer = f.obj;
      std::set<TokenId> used{f.obj};
      // Sibling objects (same subject, different relation) make the sharpest
      // distractors: ranking them below the answer requires the model to
      // resolve the relation, not just recognize the subject.
      std::vector<TokenId> pool;
      for (const auto& g : facts)
        if (g.subj == f.subj && !used.count(g.obj)) pool.push_back(g.obj);
      // Then objects of other facts in the same domain: in-domain confusables
      // keep the 4-way choice hard even for a model that has lost the facts
      // but still recognizes the domain.
      for (const auto& g : facts)
        if (!used.count(g.obj) &&
            std::find(pool.begin(), pool.end(), g.obj) == pool.end())
          pool.push_back(g.obj);
      size_t si = 0;
      for (auto& d : item.distractors) {
        TokenId cand;
        if (si < pool.size()) {
          cand = pool[si++];
        } else {
          do {
            cand = TokenId(rng.randint(domain.lo, domain.hi - 1));
          } while (used.count(cand));
        }
        used.insert(cand);
        d = cand;
      }
      ps.items.push_back(std::move(item));
    }
  }
  return ps;
}

}  // namespace

Corpora gen_corpora(const CorpusSpec& spec) {
  spec.validate();
  Corpora c;
  Rng fact_rng(spec.seed, "corpus.facts");
  c.facts_target = make_facts(fact_rng, spec.target_vocab, spec.shared_vocab,
                              spec.n_facts_per_concept);
  c.facts_retain = make_facts(fact_rng, spec.retain_vocab, spec.shared_vocab,
                              spec.n_facts_per_concept);
  c.facts_general = make_facts(fact_rng, spec.general_vocab, spec.shared_vocab,
                               spec.n_facts_per_concept);

  auto gen_set = [&](const char* stream, const std::vector<Fact>& facts, CorpusTag tag, int n) {
    Rng rng(spec.seed, stream);
    std::vector<TokenizedDoc> docs;
    docs.reserve(size_t(n));
    for (int i = 0; i < n; ++i)
      docs.push_back(gen_fact_doc(rng, facts, c.facts_general, spec.shared_vocab, spec.doc_len,
                                  tag));
    return docs;
  };
  c.target = gen_set("corpus.target", c.facts_target, CorpusTag::target, spec.n_docs_per_corpus);
  c.retain = gen_set("corpus.retain", c.facts_retain, CorpusTag::retain, spec.n_docs_per_corpus);
  c.target_heldout = gen_set("corpus.target_heldout", c.facts_target, CorpusTag::target,
                             spec.n_heldout_docs);
  c.retain_heldout = gen_set("corpus.retain_heldout", c.facts_retain, CorpusTag::retain,
                             spec.n_heldout_docs);
  {
    Rng rng(spec.seed, "corpus.coherence");
    for (int i = 0; i < spec.n_docs_per_corpus; ++i)
      c.coherence.push_back(gen_coherence_doc(rng, c.facts_target, c.facts_general,
                                              spec.shared_vocab, spec.doc_len));
  }

  Rng probe_rng(spec.seed, "corpus.probes");
  c.probes_unlearn = make_probes(probe_rng, c.facts_target, spec.target_vocab,
                                 ProbeDomain::unlearn, spec.probe_repeat);
  c.probes_retain = make_probes(probe_rng, c.facts_retain, spec.retain_vocab,
                                ProbeDomain::retain, spec.probe_repeat);
  c.probes_general = make_probes(probe_rng, c.facts_general, spec.general_vocab,
                                 ProbeDomain::general, spec.probe_repeat);
  c.probes_unlearn.validate(spec.vocab_size);
  c.probes_retain.validate(spec.vocab_size);
  c.probes_general.validate(spec.vocab_size);
  return c;
}

const char* probe_domain_name(ProbeDomain d) {
  switch (d) {
    case ProbeDomain::unlearn: return "unlearn";
    case ProbeDomain::retain: return "retain";
    case ProbeDomain::general: return "general";
  }
  return "unlearn";
}

ProbeDomain probe_domain_from_name(const std::string& s) {
  if (s == "unlearn") return ProbeDomain::unlearn;
  if (s == "retain") return ProbeDomain::retain;
  if (s == "general") return ProbeDomain::general;
  throw ConfigError("unknown probe domain: " + s);
}

void write_docs(const std::string& path, const std::vector<TokenizedDoc>& docs,
                const std::string& meta_comment) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open for write: " + path);
  if (!meta_comment.empty()) os << "# " << meta_comment << "\n";
  for (const auto& d : docs) {
    for (size_t i = 0; i < d.tokens.size(); ++i) {
      if (i) os << ' ';
      os << d.tokens[i];
    }
    os << '\n';
  }
  if (!os) throw IoError("write failed: " + path);
}

std::vector<TokenizedDoc> read_docs(const std::string& path, CorpusTag tag) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open: " + path);
  std::vector<TokenizedDoc> docs;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    TokenizedDoc d;
    d.tag = tag;
    std::istringstream ls(line);
    TokenId t;
    while (ls >> t) d.tokens.push_back(t);
    if (!d.tokens.empty()) docs.push_back(std::move(d));
  }
  return docs;
}

void write_probes(const std::string& path, const ProbeSet& probes, uint64_t seed,
                  uint64_t config_hash) {
  nlohmann::json j;
  j["meta"] = {{"tool_version", kToolVersion}, {"seed", seed}, {"config_hash", config_hash}};
  j["domain"] = probe_domain_name(probes.domain);
  auto items = nlohmann::json::array();
  for (const auto& item : probes.items) {
    items.push_back({{"prompt", item.prompt},
                     {"answer", item.answer},
                     {"distractors", item.distractors}});
  }
  j["items"] = items;
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open for write: " + path);
  os << j.dump(2) << '\n';
}

ProbeSet read_probes(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open: " + path);
  nlohmann::json j;
  is >> j;
  ProbeSet ps;
  ps.domain = probe_domain_from_name(j.at("domain"));
  for (const auto& item : j.at("items")) {
    ProbeItem p;
    p.prompt = item.at("prompt").get<Tokens>();
    p.answer = item.at("answer").get<TokenId>();
    const auto d = item.at("distractors");
    for (size_t i = 0; i < 3; ++i) p.distractors[i] = d.at(i).get<TokenId>();
    ps.items.push_back(std::move(p));
  }
  return ps;
}

void write_facts(const std::string& path, const Corpora& c, uint64_t seed, uint64_t config_hash) {
  auto dump = [](const std::vector<Fact>& facts) {
    auto arr = nlohmann::json::array();
    for (const auto& f : facts) arr.push_back({{"subj", f.subj}, {"rel", f.rel}, {"obj", f.obj}});
    return arr;
  };
  nlohmann::json j;
  j["meta"] = {{"tool_version", kToolVersion}, {"seed", seed}, {"config_hash", config_hash}};
  j["target"] = dump(c.facts_target);
  j["retain"] = dump(c.facts_retain);
  j["general"] = dump(c.facts_general);
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open for write: " + path);
  os << j.dump(2) << '\n';
}

}  // namespace crisp
