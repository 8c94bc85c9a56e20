#pragma once

#include "crisp/common.hpp"

#include <array>
#include <string>
#include <vector>

namespace crisp {

struct TokenRange {
  TokenId lo = 0;
  TokenId hi = 0;  // exclusive
  int size() const { return int(hi - lo); }
  bool contains(TokenId t) const { return t >= lo && t < hi; }
};

// Synthetic stand-in for the target/retain document collections: three
// disjoint concept vocabularies plus a shared filler range, with planted
// "SUBJ REL OBJ" facts per concept.
struct CorpusSpec {
  int vocab_size = 512;
  TokenRange target_vocab{1, 65};
  TokenRange retain_vocab{65, 129};
  TokenRange general_vocab{129, 193};
  TokenRange shared_vocab{193, 321};
  int n_docs_per_corpus = 200;
  int n_heldout_docs = 32;
  int doc_len = 128;
  int n_facts_per_concept = 24;
  int probe_repeat = 4;
  uint64_t seed = 0;

  void validate() const;
};

enum class CorpusTag { target, retain, coherence, probe };

struct TokenizedDoc {
  Tokens tokens;
  CorpusTag tag = CorpusTag::target;
};

struct Fact {
  TokenId subj, rel, obj;
};

enum class ProbeDomain { unlearn, retain, general };

struct ProbeItem {
  Tokens prompt;
  TokenId answer;
  std::array<TokenId, 3> distractors;
};

struct ProbeSet {
  ProbeDomain domain = ProbeDomain::unlearn;
  std::vector<ProbeItem> items;
  void validate(int vocab_size) const;
};

struct Corpora {
  std::vector<TokenizedDoc> target, retain, coherence;
  std::vector<TokenizedDoc> target_heldout, retain_heldout;
  ProbeSet probes_unlearn, probes_retain, probes_general;
  std::vector<Fact> facts_target, facts_retain, facts_general;
};

// Strips markdown headers, citation brackets, image links and non-ASCII
// bytes, then right-truncates to max_chars. Throws InputError("document
// rejected") when nothing survives cleaning.
std::string preprocess_document(const std::string& text, size_t max_chars);

Corpora gen_corpora(const CorpusSpec& spec);

const char* probe_domain_name(ProbeDomain d);
ProbeDomain probe_domain_from_name(const std::string& s);

// One document per line; lines starting with '#' carry run metadata.
void write_docs(const std::string& path, const std::vector<TokenizedDoc>& docs,
                const std::string& meta_comment);
std::vector<TokenizedDoc> read_docs(const std::string& path, CorpusTag tag);

void write_probes(const std::string& path, const ProbeSet& probes, uint64_t seed,
                  uint64_t config_hash);
ProbeSet read_probes(const std::string& path);

void write_facts(const std::string& path, const Corpora& c, uint64_t seed, uint64_t config_hash);

}  // namespace crisp
