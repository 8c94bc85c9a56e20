#include "crisp/pipeline.hpp"

#include "crisp/checkpoint.hpp"
#include "crisp/rng.hpp"

#include <algorithm>
#include <bit>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace fs = std::filesystem;

namespace crisp {

// ---------------------------------------------------------------------------
// Config parsing
// ---------------------------------------------------------------------------

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::vector<int> parse_ints(const std::string& s) {
  std::vector<int> out;
  for (const auto& t : split_csv(s)) out.push_back(std::stoi(t));
  return out;
}

std::vector<double> parse_doubles(const std::string& s) {
  std::vector<double> out;
  for (const auto& t : split_csv(s)) out.push_back(std::stod(t));
  return out;
}

bool parse_bool(const std::string& s) {
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw ConfigError("bad boolean value: " + s);
}

std::string join_ints(const std::vector<int>& v) {
  std::string out;
  for (size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

std::string join_doubles(const std::vector<double>& v) {
  char buf[64];
  std::string out;
  for (size_t i = 0; i < v.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%.17g", v[i]);
    out += (i ? "," : "") + std::string(buf);
  }
  return out;
}

std::string join_strings(const std::vector<std::string>& v) {
  std::string out;
  for (size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + v[i];
  return out;
}

}  // namespace

void RunConfig::validate() const {
  corpus.validate();
  lm.validate();
  sae.validate();
  if (lm.vocab_size != corpus.vocab_size)
    throw ConfigError("lm vocab_size must match corpus vocab_size");
  if (lm.context_len < corpus.doc_len) throw ConfigError("context_len shorter than doc_len");
  if (sae.d_model != lm.d_model) throw ConfigError("sae d_model must match lm d_model");
  if (sae_layers.empty()) throw ConfigError("need at least one sae layer");
  for (int l : sae_layers)
    if (l < 0 || l >= lm.n_layers) throw ConfigError("sae layer out of range");
  if (select_k < 1) throw ConfigError("select k must be >= 1");
  if (select_tau < 0 || select_eps <= 0) throw ConfigError("bad selection thresholds");
  if (bucket_width <= 0) throw ConfigError("bucket width must be positive");
  if (sweep_n < 1) throw ConfigError("sweep n must be >= 1");
  for (const auto& m : sweep_methods)
    if (m != "crisp" && m != "rmu") throw ConfigError("unknown sweep method: " + m);
  // Exercise the LossWeights invariants early.
  (void)LossWeights(beta, gamma, lambda_mean);
}

RunConfig parse_run_config(const std::string& text) {
  RunConfig c;
  std::string section = "global";
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const size_t hash = line.find_first_of("#;");
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("malformed section at line " + std::to_string(lineno));
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("expected key=value at line " + std::to_string(lineno));
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    const std::string qual = section + "." + key;

    if (qual == "global.seed") c.seed = std::stoull(val);
    else if (qual == "global.jobs") c.jobs = std::stoi(val);
    else if (qual == "corpus.vocab_size") c.corpus.vocab_size = std::stoi(val);
    else if (qual == "corpus.n_docs_per_corpus") c.corpus.n_docs_per_corpus = std::stoi(val);
    else if (qual == "corpus.n_heldout_docs") c.corpus.n_heldout_docs = std::stoi(val);
    else if (qual == "corpus.doc_len") c.corpus.doc_len = std::stoi(val);
    else if (qual == "corpus.n_facts_per_concept") c.corpus.n_facts_per_concept = std::stoi(val);
    else if (qual == "corpus.probe_repeat") c.corpus.probe_repeat = std::stoi(val);
    else if (qual == "lm.d_model") c.lm.d_model = std::stoi(val);
    else if (qual == "lm.n_layers") c.lm.n_layers = std::stoi(val);
    else if (qual == "lm.n_heads") c.lm.n_heads = std::stoi(val);
    else if (qual == "lm.d_ff") c.lm.d_ff = std::stoi(val);
    else if (qual == "lm.context_len") c.lm.context_len = std::stoi(val);
    else if (qual == "lm.tied_unembed") c.lm.tied_unembed = parse_bool(val);
    else if (qual == "lm.train_steps") c.lm_train.steps = std::stol(val);
    else if (qual == "lm.train_batch") c.lm_train.batch_docs = std::stoi(val);
    else if (qual == "lm.train_lr") c.lm_train.lr = std::stod(val);
    else if (qual == "sae.d_sae") c.sae.d_sae = std::stoi(val);
    else if (qual == "sae.activation")
      c.sae.activation = val == "topk" ? SaeActivation::topk : SaeActivation::relu;
    else if (qual == "sae.k_act") c.sae.k_act = std::stoi(val);
    else if (qual == "sae.l1_coeff") c.sae.l1_coeff = std::stod(val);
    else if (qual == "sae.pin_enc_bias") c.sae.pin_enc_bias = parse_bool(val);
    else if (qual == "sae.layers") c.sae_layers = parse_ints(val);
    else if (qual == "sae.train_steps") c.sae_train.steps = std::stol(val);
    else if (qual == "sae.train_batch") c.sae_train.batch = std::stoi(val);
    else if (qual == "sae.train_lr") c.sae_train.lr = std::stod(val);
    else if (qual == "sae.target_loss") c.sae_train.target_loss = std::stod(val);
    else if (qual == "select.k") c.select_k = std::stoi(val);
    else if (qual == "select.tau") c.select_tau = std::stod(val);
    else if (qual == "select.eps") c.select_eps = std::stod(val);
    else if (qual == "select.theta_hi") c.classify.theta_hi = std::stod(val);
    else if (qual == "select.theta_lo") c.classify.theta_lo = std::stod(val);
    else if (qual == "unlearn.lambda") c.lambda_mean = std::stod(val);
    else if (qual == "unlearn.beta") c.beta = std::stod(val);
    else if (qual == "unlearn.gamma") c.gamma = std::stod(val);
    else if (qual == "unlearn.rank") c.lora_rank = std::stoi(val);
    else if (qual == "unlearn.scale") c.lora_scale = std::stod(val);
    else if (qual == "unlearn.lr") c.unlearn_lr = std::stod(val);
    else if (qual == "unlearn.steps") c.unlearn_steps = std::stol(val);
    else if (qual == "unlearn.batch") c.unlearn_batch = std::stoi(val);
    else if (qual == "unlearn.opt_layers") c.opt_layers = parse_ints(val);
    else if (qual == "rmu.steer") c.rmu.steer_coeff = std::stod(val);
    else if (qual == "rmu.alpha") c.rmu.alpha_rmu = std::stod(val);
    else if (qual == "rmu.act_layers") c.rmu.act_layers = parse_ints(val);
    else if (qual == "rmu.train_layers") c.rmu.train_layers = parse_ints(val);
    else if (qual == "rmu.lr") c.rmu.learning_rate = std::stod(val);
    else if (qual == "rmu.steps") c.rmu.steps = std::stol(val);
    else if (qual == "rmu.batch") c.rmu.batch_docs = std::stoi(val);
    else if (qual == "eval.gen_len") c.eval_gen_len = std::stoi(val);
    else if (qual == "sweep.n") c.sweep_n = std::stoi(val);
    else if (qual == "sweep.methods") c.sweep_methods = split_csv(val);
    else if (qual == "sweep.bucket_width") c.bucket_width = std::stod(val);
    else if (qual == "sweep.k") c.sweep.k = parse_ints(val);
    else if (qual == "sweep.lambda") c.sweep.lambda = parse_doubles(val);
    else if (qual == "sweep.rank") c.sweep.rank = parse_ints(val);
    else if (qual == "sweep.lr_lo") c.sweep.lr_lo = std::stod(val);
    else if (qual == "sweep.lr_hi") c.sweep.lr_hi = std::stod(val);
    else if (qual == "sweep.steps") c.sweep.steps = std::stol(val);
    else if (qual == "sweep.batch") c.sweep.batch = std::stoi(val);
    else if (qual == "sweep.rmu_steer") c.sweep.rmu_steer = parse_doubles(val);
    else if (qual == "sweep.rmu_alpha") c.sweep.rmu_alpha = parse_doubles(val);
    else if (qual == "sweep.rmu_lr_lo") c.sweep.rmu_lr_lo = std::stod(val);
    else if (qual == "sweep.rmu_lr_hi") c.sweep.rmu_lr_hi = std::stod(val);
    else if (qual == "sweep.rmu_steps") c.sweep.rmu_steps = std::stol(val);
    else throw ConfigError("unknown config key: " + qual);
  }
  c.lm.vocab_size = c.corpus.vocab_size;
  c.sae.d_model = c.lm.d_model;
  c.sweep.beta = c.beta;
  c.sweep.gamma = c.gamma;
  c.sweep.tau = c.select_tau;
  c.sweep.eps = c.select_eps;
  c.validate();
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config: " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_run_config(ss.str());
}

std::string run_config_canonical(const RunConfig& c) {
  char buf[128];
  std::ostringstream os;
  auto kv = [&](const char* k, const std::string& v) { os << k << "=" << v << "\n"; };
  auto kvd = [&](const char* k, double v) {
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    kv(k, buf);
  };
  kv("global.seed", std::to_string(c.seed));
  kv("corpus.vocab_size", std::to_string(c.corpus.vocab_size));
  kv("corpus.n_docs_per_corpus", std::to_string(c.corpus.n_docs_per_corpus));
  kv("corpus.n_heldout_docs", std::to_string(c.corpus.n_heldout_docs));
  kv("corpus.doc_len", std::to_string(c.corpus.doc_len));
  kv("corpus.n_facts_per_concept", std::to_string(c.corpus.n_facts_per_concept));
  kv("corpus.probe_repeat", std::to_string(c.corpus.probe_repeat));
  kv("lm.d_model", std::to_string(c.lm.d_model));
  kv("lm.n_layers", std::to_string(c.lm.n_layers));
  kv("lm.n_heads", std::to_string(c.lm.n_heads));
  kv("lm.d_ff", std::to_string(c.lm.d_ff));
  kv("lm.context_len", std::to_string(c.lm.context_len));
  kv("lm.tied_unembed", c.lm.tied_unembed ? "true" : "false");
  kv("lm.train_steps", std::to_string(c.lm_train.steps));
  kv("lm.train_batch", std::to_string(c.lm_train.batch_docs));
  kvd("lm.train_lr", c.lm_train.lr);
  kv("sae.d_sae", std::to_string(c.sae.d_sae));
  kv("sae.activation", sae_activation_name(c.sae.activation));
  kv("sae.k_act", std::to_string(c.sae.k_act));
  kvd("sae.l1_coeff", c.sae.l1_coeff);
  kv("sae.pin_enc_bias", c.sae.pin_enc_bias ? "true" : "false");
  kv("sae.layers", join_ints(c.sae_layers));
  kv("sae.train_steps", std::to_string(c.sae_train.steps));
  kv("sae.train_batch", std::to_string(c.sae_train.batch));
  kvd("sae.train_lr", c.sae_train.lr);
  kvd("sae.target_loss", c.sae_train.target_loss);
  kv("select.k", std::to_string(c.select_k));
  kvd("select.tau", c.select_tau);
  kvd("select.eps", c.select_eps);
  kvd("select.theta_hi", c.classify.theta_hi);
  kvd("select.theta_lo", c.classify.theta_lo);
  kvd("unlearn.lambda", c.lambda_mean);
  kvd("unlearn.beta", c.beta);
  kvd("unlearn.gamma", c.gamma);
  kv("unlearn.rank", std::to_string(c.lora_rank));
  kvd("unlearn.scale", c.lora_scale);
  kvd("unlearn.lr", c.unlearn_lr);
  kv("unlearn.steps", std::to_string(c.unlearn_steps));
  kv("unlearn.batch", std::to_string(c.unlearn_batch));
  kv("unlearn.opt_layers", join_ints(c.opt_layers));
  kvd("rmu.steer", c.rmu.steer_coeff);
  kvd("rmu.alpha", c.rmu.alpha_rmu);
  kv("rmu.act_layers", join_ints(c.rmu.act_layers));
  kv("rmu.train_layers", join_ints(c.rmu.train_layers));
  kvd("rmu.lr", c.rmu.learning_rate);
  kv("rmu.steps", std::to_string(c.rmu.steps));
  kv("rmu.batch", std::to_string(c.rmu.batch_docs));
  kv("eval.gen_len", std::to_string(c.eval_gen_len));
  kv("sweep.n", std::to_string(c.sweep_n));
  kv("sweep.methods", join_strings(c.sweep_methods));
  kvd("sweep.bucket_width", c.bucket_width);
  kv("sweep.k", join_ints(c.sweep.k));
  kv("sweep.lambda", join_doubles(c.sweep.lambda));
  kv("sweep.rank", join_ints(c.sweep.rank));
  kvd("sweep.lr_lo", c.sweep.lr_lo);
  kvd("sweep.lr_hi", c.sweep.lr_hi);
  kv("sweep.steps", std::to_string(c.sweep.steps));
  kv("sweep.batch", std::to_string(c.sweep.batch));
  kv("sweep.rmu_steer", join_doubles(c.sweep.rmu_steer));
  kv("sweep.rmu_alpha", join_doubles(c.sweep.rmu_alpha));
  kvd("sweep.rmu_lr_lo", c.sweep.rmu_lr_lo);
  kvd("sweep.rmu_lr_hi", c.sweep.rmu_lr_hi);
  kv("sweep.rmu_steps", std::to_string(c.sweep.rmu_steps));
  return os.str();
}

uint64_t run_config_hash(const RunConfig& c) { return hash_bytes(run_config_canonical(c)); }

// ---------------------------------------------------------------------------
// Activation dump
// ---------------------------------------------------------------------------

namespace {

constexpr uint32_t kDumpVersion = 1;

template <class T>
void write_pod(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

template <class T>
T read_pod(std::istream& is) {
  T v;
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!is) throw IoError("truncated activation dump");
  return v;
}

}  // namespace

void write_activation_dump(const std::string& path, const std::vector<int>& layers, int d_model,
                           const std::vector<ActivationRecord>& records) {
  static_assert(std::endian::native == std::endian::little, "little-endian host required");
  if (layers.empty() || d_model < 1) throw ConfigError("bad dump shape");
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open for write: " + path);
  os.write("CRAD", 4);
  write_pod(os, kDumpVersion);
  write_pod(os, uint32_t(layers.size()));
  for (int l : layers) write_pod(os, uint32_t(l));
  write_pod(os, uint32_t(d_model));
  uint64_t n_tokens = 0;
  for (const auto& rec : records) n_tokens += rec.positions.size();
  write_pod(os, n_tokens);
  std::vector<float> row(static_cast<size_t>(d_model));
  for (const auto& rec : records) {
    for (size_t t = 0; t < rec.positions.size(); ++t) {
      for (int l : layers) {
        auto it = rec.layers.find(l);
        if (it == rec.layers.end()) throw InputError("record missing dump layer");
        if (it->second.cols() != d_model) throw InputError("record width mismatch");
        for (int j = 0; j < d_model; ++j) row[size_t(j)] = float(it->second(Eigen::Index(t), j));
        os.write(reinterpret_cast<const char*>(row.data()), std::streamsize(row.size() * 4));
      }
    }
  }
  if (!os) throw IoError("write failed: " + path);
}

ActivationDump read_activation_dump(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "CRAD", 4) != 0) throw IoError("bad dump magic: " + path);
  if (read_pod<uint32_t>(is) != kDumpVersion) throw IoError("unsupported dump version");
  ActivationDump d;
  const uint32_t n_layers = read_pod<uint32_t>(is);
  for (uint32_t i = 0; i < n_layers; ++i) d.layers.push_back(int(read_pod<uint32_t>(is)));
  d.d_model = int(read_pod<uint32_t>(is));
  d.n_tokens = long(read_pod<uint64_t>(is));
  for (int l : d.layers) d.acts[l] = Eigen::MatrixXf(d.n_tokens, d.d_model);
  std::vector<float> row(static_cast<size_t>(d.d_model));
  for (long t = 0; t < d.n_tokens; ++t) {
    for (int l : d.layers) {
      is.read(reinterpret_cast<char*>(row.data()), std::streamsize(row.size() * 4));
      if (!is) throw IoError("truncated activation dump");
      for (int j = 0; j < d.d_model; ++j) d.acts[l](t, j) = row[size_t(j)];
    }
  }
  return d;
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

namespace {

std::string join_path(const std::string& dir, const std::string& rel) {
  return (fs::path(dir) / rel).string();
}

std::string meta_comment(const RunConfig& cfg) {
  char buf[160];
  std::snprintf(buf, sizeof(buf), "tool_version=%s seed=%llu config_hash=%016llx", kToolVersion,
                (unsigned long long)cfg.seed, (unsigned long long)run_config_hash(cfg));
  return buf;
}

Corpora load_corpora(const RunConfig& cfg, const std::string& out_dir) {
  (void)cfg;
  Corpora c;
  c.target = read_docs(join_path(out_dir, "corpus/target.txt"), CorpusTag::target);
  c.retain = read_docs(join_path(out_dir, "corpus/retain.txt"), CorpusTag::retain);
  c.coherence = read_docs(join_path(out_dir, "corpus/coherence.txt"), CorpusTag::coherence);
  c.target_heldout =
      read_docs(join_path(out_dir, "corpus/target_heldout.txt"), CorpusTag::target);
  c.retain_heldout =
      read_docs(join_path(out_dir, "corpus/retain_heldout.txt"), CorpusTag::retain);
  c.probes_unlearn = read_probes(join_path(out_dir, "corpus/probes_unlearn.json"));
  c.probes_retain = read_probes(join_path(out_dir, "corpus/probes_retain.json"));
  c.probes_general = read_probes(join_path(out_dir, "corpus/probes_general.json"));
  return c;
}

}  // namespace

EvalInputs make_eval_inputs(const RunConfig& cfg, const Corpora& corpora, const LmParams& lm) {
  EvalInputs in;
  in.probes_unlearn = &corpora.probes_unlearn;
  in.probes_retain = &corpora.probes_retain;
  in.probes_general = &corpora.probes_general;
  in.fluency_docs = &corpora.retain_heldout;
  for (const auto& item : corpora.probes_unlearn.items) in.concept_prompts.push_back(item.prompt);
  in.concept_vocab = cfg.corpus.target_vocab;
  in.ppl_orig = perplexity<real>(lm, nullptr, corpora.retain_heldout);
  return in;
}

void stage_gen_corpus(const RunConfig& cfg, const std::string& out_dir) {
  fs::create_directories(join_path(out_dir, "corpus"));
  CorpusSpec spec = cfg.corpus;
  spec.seed = derive_seed(cfg.seed, "corpus");
  Corpora c = gen_corpora(spec);
  const std::string meta = meta_comment(cfg);
  const uint64_t h = run_config_hash(cfg);
  write_docs(join_path(out_dir, "corpus/target.txt"), c.target, meta);
  write_docs(join_path(out_dir, "corpus/retain.txt"), c.retain, meta);
  write_docs(join_path(out_dir, "corpus/coherence.txt"), c.coherence, meta);
  write_docs(join_path(out_dir, "corpus/target_heldout.txt"), c.target_heldout, meta);
  write_docs(join_path(out_dir, "corpus/retain_heldout.txt"), c.retain_heldout, meta);
  write_probes(join_path(out_dir, "corpus/probes_unlearn.json"), c.probes_unlearn, cfg.seed, h);
  write_probes(join_path(out_dir, "corpus/probes_retain.json"), c.probes_retain, cfg.seed, h);
  write_probes(join_path(out_dir, "corpus/probes_general.json"), c.probes_general, cfg.seed, h);
  write_facts(join_path(out_dir, "corpus/facts.json"), c, cfg.seed, h);
}

void stage_train_lm(const RunConfig& cfg, const std::string& out_dir) {
  Corpora c = load_corpora(cfg, out_dir);
  std::vector<TokenizedDoc> docs = c.target;
  docs.insert(docs.end(), c.retain.begin(), c.retain.end());
  docs.insert(docs.end(), c.coherence.begin(), c.coherence.end());

  LmConfig lmc = cfg.lm;
  lmc.seed = derive_seed(cfg.seed, "lm.init");
  LmParams lm = init_lm<real>(lmc);
  LmTrainConfig tc = cfg.lm_train;
  tc.seed = derive_seed(cfg.seed, "lm.train");
  auto losses = train_lm<real>(lm, docs, tc);
  save_lm(join_path(out_dir, "lm.crlm"), lm);

  nlohmann::json rep = {{"meta",
                         {{"tool_version", kToolVersion},
                          {"seed", cfg.seed},
                          {"config_hash", run_config_hash(cfg)}}},
                        {"steps", tc.steps},
                        {"final_loss", losses.empty() ? 0.0 : losses.back()}};
  std::ofstream os(join_path(out_dir, "lm_report.json"), std::ios::trunc);
  if (!os) throw IoError("cannot write lm_report.json");
  os << rep.dump(2) << '\n';
}

void stage_dump_acts(const RunConfig& cfg, const std::string& out_dir) {
  LmParams lm = load_lm<real>(join_path(out_dir, "lm.crlm"));
  Corpora c = load_corpora(cfg, out_dir);
  auto dump = [&](const std::vector<TokenizedDoc>& docs, const std::string& rel) {
    std::vector<ActivationRecord> recs(docs.size());
    for (size_t i = 0; i < docs.size(); ++i)
      lm_forward<real>(lm, nullptr, docs[i].tokens, cfg.sae_layers, &recs[i], nullptr, false);
    write_activation_dump(join_path(out_dir, rel), cfg.sae_layers, cfg.lm.d_model, recs);
  };
  dump(c.target, "acts_target.crad");
  dump(c.retain, "acts_retain.crad");
}

void stage_train_sae(const RunConfig& cfg, const std::string& out_dir) {
  ActivationDump tgt = read_activation_dump(join_path(out_dir, "acts_target.crad"));
  ActivationDump ret = read_activation_dump(join_path(out_dir, "acts_retain.crad"));
  nlohmann::json reports = nlohmann::json::object();
  for (int layer : cfg.sae_layers) {
    Mat acts(tgt.n_tokens + ret.n_tokens, cfg.lm.d_model);
    acts.topRows(tgt.n_tokens) = tgt.acts.at(layer).cast<real>();
    acts.bottomRows(ret.n_tokens) = ret.acts.at(layer).cast<real>();
    SaeConfig sc = cfg.sae;
    sc.layer = layer;
    sc.seed = derive_seed(cfg.seed, "sae.init");
    SaeParams sae = init_sae<real>(sc);
    SaeTrainConfig tc = cfg.sae_train;
    tc.seed = derive_seed(cfg.seed, "sae.train");
    SaeTrainReport rep = train_sae(sae, acts, tc);
    save_sae(join_path(out_dir, "sae_l" + std::to_string(layer) + ".crsa"), sae);
    reports[std::to_string(layer)] = {{"steps_run", rep.steps_run},
                                      {"holdout_loss", rep.holdout_loss},
                                      {"explained_variance", rep.explained_variance},
                                      {"mean_l0", rep.mean_l0},
                                      {"resampled_features", rep.resampled_features}};
  }
  nlohmann::json out = {{"meta",
                         {{"tool_version", kToolVersion},
                          {"seed", cfg.seed},
                          {"config_hash", run_config_hash(cfg)}}},
                        {"layers", reports}};
  std::ofstream os(join_path(out_dir, "sae_report.json"), std::ios::trunc);
  if (!os) throw IoError("cannot write sae_report.json");
  os << out.dump(2) << '\n';
}

void stage_select(const RunConfig& cfg, const std::string& out_dir) {
  ActivationDump tgt = read_activation_dump(join_path(out_dir, "acts_target.crad"));
  ActivationDump ret = read_activation_dump(join_path(out_dir, "acts_retain.crad"));
  std::vector<FeatureStats> all;
  SalientSet salient;
  salient.k = cfg.select_k;
  salient.tau = cfg.select_tau;
  salient.eps = cfg.select_eps;
  for (int layer : cfg.sae_layers) {
    SaeParams sae = load_sae<real>(join_path(out_dir, "sae_l" + std::to_string(layer) + ".crsa"));
    FeatureStats st(layer, sae.d_sae());
    accumulate_stats<real>(sae, layer, tgt.acts.at(layer).cast<real>(), StatsSide::target, st);
    accumulate_stats<real>(sae, layer, ret.acts.at(layer).cast<real>(), StatsSide::retain, st);
    salient.layers[layer] = select_salient(st, cfg.select_k, cfg.select_tau, cfg.select_eps);
    auto classes = classify_features(st, cfg.classify);
    export_scatter(st, classes, join_path(out_dir, "scatter_l" + std::to_string(layer) + ".csv"),
                   join_path(out_dir, "scatter_l" + std::to_string(layer) + ".svg"));
    all.push_back(std::move(st));
  }
  write_stats_csv(join_path(out_dir, "stats.csv"), all, meta_comment(cfg));
  write_salient_json(join_path(out_dir, "salient.json"), salient, cfg.seed, run_config_hash(cfg));
}

void stage_unlearn(const RunConfig& cfg, const std::string& out_dir) {
  LmParams lm = load_lm<real>(join_path(out_dir, "lm.crlm"));
  Corpora c = load_corpora(cfg, out_dir);
  std::map<int, SaeParams> saes;
  for (int layer : cfg.sae_layers)
    saes[layer] = load_sae<real>(join_path(out_dir, "sae_l" + std::to_string(layer) + ".crsa"));

  UnlearnConfig uc;
  uc.sae_layers = cfg.sae_layers;
  uc.opt_layers = cfg.opt_layers;
  uc.salient = read_salient_json(join_path(out_dir, "salient.json"));
  uc.weights = LossWeights(cfg.beta, cfg.gamma, cfg.lambda_mean);
  uc.lora_rank = cfg.lora_rank;
  uc.lora_scale = cfg.lora_scale;
  uc.learning_rate = cfg.unlearn_lr;
  uc.steps = cfg.unlearn_steps;
  uc.batch_docs = cfg.unlearn_batch;
  uc.seed = derive_seed(cfg.seed, "unlearn");

  CrispRunResult result = train_crisp<real>(lm, saes, uc, c);
  save_adapter(join_path(out_dir, "adapter.crla"), result.adapter);
  LmParams merged = merge_lora(lm, result.adapter);
  save_lm(join_path(out_dir, "merged.crlm"), merged);

  std::ofstream os(join_path(out_dir, "runlog.jsonl"), std::ios::trunc);
  if (!os) throw IoError("cannot write runlog.jsonl");
  for (const auto& s : result.log) {
    nlohmann::json line = {{"step", s.step},
                           {"l_unlearn", s.l_unlearn},
                           {"l_retain", s.l_retain},
                           {"l_coherence", s.l_coherence},
                           {"total", s.total}};
    os << line.dump() << '\n';
  }
}

void stage_eval(const RunConfig& cfg, const std::string& out_dir) {
  LmParams lm = load_lm<real>(join_path(out_dir, "lm.crlm"));
  LmParams merged = load_lm<real>(join_path(out_dir, "merged.crlm"));
  Corpora c = load_corpora(cfg, out_dir);
  EvalInputs in = make_eval_inputs(cfg, c, lm);
  const uint64_t h = run_config_hash(cfg);

  EvalReport orig = evaluate_model(lm, nullptr, in);
  EvalReport edited = evaluate_model(merged, nullptr, in);
  write_report(join_path(out_dir, "report_orig.json"), orig, cfg.seed, h);
  write_report(join_path(out_dir, "report_edited.json"), edited, cfg.seed, h);

  std::ofstream os(join_path(out_dir, "summary.csv"), std::ios::trunc);
  if (!os) throw IoError("cannot write summary.csv");
  os << "# " << meta_comment(cfg) << '\n'
     << report_csv_header() << '\n'
     << report_csv_row("orig", orig) << '\n'
     << report_csv_row("edited", edited) << '\n';
}

std::vector<std::string> stage_outputs(const RunConfig& cfg, const std::string& stage) {
  if (stage == "gen-corpus")
    return {"corpus/target.txt",         "corpus/retain.txt",
            "corpus/coherence.txt",      "corpus/target_heldout.txt",
            "corpus/retain_heldout.txt", "corpus/probes_unlearn.json",
            "corpus/probes_retain.json", "corpus/probes_general.json",
            "corpus/facts.json"};
  if (stage == "train-lm") return {"lm.crlm", "lm_report.json"};
  if (stage == "dump-acts") return {"acts_target.crad", "acts_retain.crad"};
  if (stage == "train-sae") {
    std::vector<std::string> out;
    for (int l : cfg.sae_layers) out.push_back("sae_l" + std::to_string(l) + ".crsa");
    out.push_back("sae_report.json");
    return out;
  }
  if (stage == "select") {
    std::vector<std::string> out = {"stats.csv", "salient.json"};
    for (int l : cfg.sae_layers) {
      out.push_back("scatter_l" + std::to_string(l) + ".csv");
      out.push_back("scatter_l" + std::to_string(l) + ".svg");
    }
    return out;
  }
  if (stage == "unlearn") return {"adapter.crla", "merged.crlm", "runlog.jsonl"};
  if (stage == "eval") return {"report_orig.json", "report_edited.json", "summary.csv"};
  throw ConfigError("unknown stage: " + stage);
}

// ---------------------------------------------------------------------------
// Orchestration
// ---------------------------------------------------------------------------

namespace {

using StageFn = void (*)(const RunConfig&, const std::string&);

StageFn stage_fn(const std::string& name) {
  if (name == "gen-corpus") return stage_gen_corpus;
  if (name == "train-lm") return stage_train_lm;
  if (name == "dump-acts") return stage_dump_acts;
  if (name == "train-sae") return stage_train_sae;
  if (name == "select") return stage_select;
  if (name == "unlearn") return stage_unlearn;
  if (name == "eval") return stage_eval;
  throw ConfigError("unknown stage: " + name);
}

std::string hash_hex(uint64_t h) {
  char buf[24];
  std::snprintf(buf, sizeof(buf), "%016llx", (unsigned long long)h);
  return buf;
}

nlohmann::json load_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) return {{"stages", nlohmann::json::object()}};
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception&) {
    return {{"stages", nlohmann::json::object()}};
  }
  if (!j.contains("stages")) j["stages"] = nlohmann::json::object();
  return j;
}

void save_manifest(const std::string& path, const nlohmann::json& j) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write manifest: " + path);
  os << j.dump(2) << '\n';
}

bool stage_is_current(const nlohmann::json& manifest, const RunConfig& cfg,
                      const std::string& out_dir, const std::string& stage,
                      const std::string& cfg_hash) {
  const auto& stages = manifest.at("stages");
  if (!stages.contains(stage)) return false;
  const auto& entry = stages.at(stage);
  if (!entry.value("complete", false)) return false;
  if (entry.value("config_hash", std::string()) != cfg_hash) return false;
  if (!entry.contains("outputs")) return false;
  for (const auto& [rel, want] : entry.at("outputs").items()) {
    const std::string full = join_path(out_dir, rel);
    if (!fs::exists(full)) return false;
    if (hash_hex(hash_file(full)) != want.get<std::string>()) return false;
  }
  // Outputs must match the current contract too (e.g. layer list changes).
  for (const auto& rel : stage_outputs(cfg, stage))
    if (!entry.at("outputs").contains(rel)) return false;
  return true;
}

}  // namespace

std::vector<StageStatus> run_pipeline(const RunConfig& cfg, const std::string& out_dir) {
  cfg.validate();
  fs::create_directories(out_dir);
  const std::string manifest_path = join_path(out_dir, "MANIFEST.json");
  nlohmann::json manifest = load_manifest(manifest_path);
  manifest["meta"] = {{"tool_version", kToolVersion},
                      {"seed", cfg.seed},
                      {"config_hash", hash_hex(run_config_hash(cfg))}};
  const std::string cfg_hash = hash_hex(run_config_hash(cfg));

  std::vector<StageStatus> statuses;
  bool dirty = false;
  for (const auto& stage : kPipelineStages) {
    StageStatus st{stage, false};
    if (!dirty && stage_is_current(manifest, cfg, out_dir, stage, cfg_hash)) {
      st.skipped = true;
      statuses.push_back(st);
      continue;
    }
    dirty = true;
    manifest["stages"][stage] = {{"complete", false}, {"config_hash", cfg_hash}};
    save_manifest(manifest_path, manifest);
    try {
      stage_fn(stage)(cfg, out_dir);
    } catch (const std::exception& e) {
      save_manifest(manifest_path, manifest);
      throw PipelineError(stage, e.what());
    }
    nlohmann::json outputs = nlohmann::json::object();
    for (const auto& rel : stage_outputs(cfg, stage))
      outputs[rel] = hash_hex(hash_file(join_path(out_dir, rel)));
    manifest["stages"][stage] = {
        {"complete", true}, {"config_hash", cfg_hash}, {"outputs", outputs}};
    save_manifest(manifest_path, manifest);
    statuses.push_back(st);
  }
  return statuses;
}

}  // namespace crisp
