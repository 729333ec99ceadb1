#include "tars/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "engine.hpp"
#include "parallel.hpp"
#include "tars/errors.hpp"

namespace tars {

const char* to_string(Direction d) { return d == Direction::kCausal ? "causal" : "reverse"; }

namespace {

std::vector<std::pair<TokenId, double>> top_k_tokens(const Vector& probs, std::size_t k) {
  std::vector<TokenId> ids(probs.dim());
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<TokenId>(i);
  k = std::min(k, ids.size());
  std::partial_sort(ids.begin(), ids.begin() + static_cast<long>(k), ids.end(),
                    [&](TokenId a, TokenId b) {
                      const auto pa = probs[static_cast<std::size_t>(a)];
                      const auto pb = probs[static_cast<std::size_t>(b)];
                      return pa != pb ? pa > pb : a < b;
                    });
  std::vector<std::pair<TokenId, double>> out;
  for (std::size_t i = 0; i < k; ++i) out.emplace_back(ids[i], probs[static_cast<std::size_t>(ids[i])]);
  return out;
}

int completion_budget(const ModelWeights& w, std::size_t prompt_len, int wanted) {
  const int room = w.config.max_seq_len - static_cast<int>(prompt_len);
  return std::max(0, std::min(wanted, room));
}

std::vector<TokenId> generated_part(const std::vector<TokenId>& full, std::size_t prompt_len) {
  return {full.begin() + static_cast<long>(prompt_len), full.end()};
}

}  // namespace

double causal_probability(const ModelWeights& w, const CorpusSpec& spec, const Vocab& vocab,
                          const std::string& concept_id, const std::string& language) {
  const auto prompt = description_prompt(spec, vocab, concept_id, language);
  const TokenId target = vocab.require(spec.concept_spec(concept_id).in(language).target);
  return lm_head_probe(w, forward(w, prompt).final_hidden)[static_cast<std::size_t>(target)];
}

ProbeResult causal_probe(const ModelWeights& w, const CorpusSpec& spec, const Vocab& vocab,
                         const std::string& concept_id, const std::string& language,
                         const ProbeOptions& options) {
  const auto prompt = description_prompt(spec, vocab, concept_id, language);
  const TokenId target = vocab.require(spec.concept_spec(concept_id).in(language).target);
  const Vector probs = lm_head_probe(w, forward(w, prompt).final_hidden);

  ProbeResult r;
  r.concept_id = concept_id;
  r.language = language;
  r.direction = Direction::kCausal;
  r.p_target = probs[static_cast<std::size_t>(target)];
  r.top5 = top_k_tokens(probs, 5);
  const int n = completion_budget(w, prompt.size(), options.completion_length);
  const Rng root(options.seed);
  for (int i = 0; i < options.n_samples; ++i) {
    Rng rng = root.fork(static_cast<std::uint64_t>(i));
    r.completions.push_back(generated_part(sample_generate(w, prompt, n, rng), prompt.size()));
  }
  return r;
}

ProbeResult reverse_probe(const ModelWeights& w, const CorpusSpec& spec, const Vocab& vocab,
                          const std::string& concept_id, const std::string& language,
                          const ProbeOptions& options) {
  if (options.n_samples < 1) throw InputError("reverse_probe: n_samples must be >= 1");
  const auto prompt = reverse_prompt(spec, vocab, concept_id, language);
  const auto& cl = spec.concept_spec(concept_id).in(language);
  std::set<TokenId> attrs;
  for (const auto& a : cl.attributes) attrs.insert(vocab.require(a));

  const Vector probs = lm_head_probe(w, forward(w, prompt).final_hidden);
  ProbeResult r;
  r.concept_id = concept_id;
  r.language = language;
  r.direction = Direction::kReverse;
  for (TokenId a : attrs) r.p_target += probs[static_cast<std::size_t>(a)];
  r.top5 = top_k_tokens(probs, 5);

  const int n = completion_budget(w, prompt.size(), options.completion_length);
  r.completions.push_back(generated_part(greedy_generate(w, prompt, n), prompt.size()));
  const Rng root(options.seed);
  for (int i = 1; i < options.n_samples; ++i) {
    Rng rng = root.fork(static_cast<std::uint64_t>(i));
    r.completions.push_back(generated_part(sample_generate(w, prompt, n, rng), prompt.size()));
  }
  std::set<TokenId> hit;
  for (const auto& c : r.completions) {
    for (TokenId t : c) {
      if (attrs.contains(t)) hit.insert(t);
    }
  }
  r.attribute_hit_rate = static_cast<double>(hit.size()) / static_cast<double>(attrs.size());
  return r;
}

double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw InputError("percentile of an empty set");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + (values[hi] - values[lo]) * frac;
}

namespace {

// Per-position KL between two row-wise logit matrices, in f64.
double row_kl(const float* a, const float* b, std::size_t V) {
  double ma = a[0], mb = b[0];
  for (std::size_t j = 1; j < V; ++j) {
    ma = std::max<double>(ma, a[j]);
    mb = std::max<double>(mb, b[j]);
  }
  double sa = 0, sb = 0;
  for (std::size_t j = 0; j < V; ++j) {
    sa += std::exp(a[j] - ma);
    sb += std::exp(b[j] - mb);
  }
  const double la = ma + std::log(sa), lb = mb + std::log(sb);
  double kl = 0;
  for (std::size_t j = 0; j < V; ++j) {
    const double lpa = a[j] - la;
    kl += std::exp(lpa) * (lpa - (b[j] - lb));
  }
  // Negative values can only come from rounding when the rows agree.
  return std::max(kl, 0.0);
}

}  // namespace

KlSummary kl_divergence(const ModelWeights& base, const ModelWeights& edited,
                        const std::vector<CorpusDoc>& docs, const std::string& label,
                        int threads) {
  if (!(base.config == edited.config)) {
    throw UsageError("kl_divergence: base and edited models have different configs");
  }
  if (docs.empty()) throw InputError("kl_divergence: corpus '" + label + "' is empty");
  for (const auto& d : docs) validate_tokens(base.config, d.tokens);

  const auto pa = engine::from_weights<float>(base);
  const auto pb = engine::from_weights<float>(edited);
  const auto V = static_cast<std::size_t>(base.config.vocab_size);
  std::vector<std::vector<double>> per_doc(docs.size());
  const auto workers = static_cast<std::size_t>(std::max(1, threads));
  std::vector<engine::Cache<float>> ca(workers), cb(workers);
  detail::parallel_for(docs.size(), threads, [&](std::size_t i) {
    const auto& t = docs[i].tokens;
    const std::size_t slot = i % std::min(workers, docs.size());
    engine::forward(pa, t, ca[slot], true);
    engine::forward(pb, t, cb[slot], true);
    for (std::size_t pos = 1; pos < t.size(); ++pos) {
      if (t[pos] == kPad || t[pos] == kBos) continue;
      per_doc[i].push_back(row_kl(ca[slot].logits.data() + pos * V,
                                  cb[slot].logits.data() + pos * V, V));
    }
  });

  KlSummary s;
  s.label = label;
  for (std::size_t i = 0; i < docs.size(); ++i) {
    std::size_t pos = 1;
    for (double v : per_doc[i]) {
      while (docs[i].tokens[pos] == kPad || docs[i].tokens[pos] == kBos) ++pos;
      s.values.push_back(v);
      s.doc_index.push_back(i);
      s.position.push_back(pos++);
    }
  }
  if (s.values.empty()) throw InputError("kl_divergence: no scorable positions in '" + label + "'");
  s.median = percentile(s.values, 0.5);
  s.p05 = percentile(s.values, 0.05);
  s.p95 = percentile(s.values, 0.95);
  return s;
}

void write_kl_csv(std::span<const KlSummary> summaries, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path.string());
  out << "corpus,doc,position,kl\n";
  char buf[64];
  for (const auto& s : summaries) {
    for (std::size_t i = 0; i < s.values.size(); ++i) {
      std::snprintf(buf, sizeof(buf), "%.9g", s.values[i]);
      out << s.label << ',' << s.doc_index[i] << ',' << s.position[i] << ',' << buf << '\n';
    }
  }
}

std::string format_kl_table(std::span<const KlSummary> summaries) {
  std::size_t width = 6;
  for (const auto& s : summaries) width = std::max(width, s.label.size());
  std::ostringstream out;
  char line[256];
  std::snprintf(line, sizeof(line), "%-*s  %s\n", static_cast<int>(width), "corpus",
                "KL(base||edited) median [5th, 95th]");
  out << line;
  for (const auto& s : summaries) {
    std::snprintf(line, sizeof(line), "%-*s  %.4g [%.4g, %.4g]\n", static_cast<int>(width),
                  s.label.c_str(), s.median, s.p05, s.p95);
    out << line;
  }
  return out.str();
}

TargetingSpec make_targeting_spec(const CorpusSpec& spec, const Vocab& vocab,
                                  const std::string& concept_id, const std::string& language,
                                  TargetingSpec knobs) {
  knobs.prompt = description_prompt(spec, vocab, concept_id, language);
  knobs.concept_token = vocab.require(spec.concept_spec(concept_id).in(language).target);
  return knobs;
}

ModularCurve modular_curve(const ModelWeights& base, const CorpusSpec& spec, const Vocab& vocab,
                           const std::vector<ConceptPlan>& plan, int threads) {
  if (plan.empty()) throw ConfigError("modular_curve: empty concept pipeline");
  ModularCurve curve;
  curve.language = plan.front().language;
  for (const auto& step : plan) curve.concepts.push_back(step.concept_id);
  curve.p.assign(plan.size(), {});
  auto probe_all = [&](const ModelWeights& w) {
    for (std::size_t i = 0; i < plan.size(); ++i) {
      curve.p[i].push_back(causal_probability(w, spec, vocab, plan[i].concept_id, plan[i].language));
    }
  };

  ModelWeights w = base;
  probe_all(w);
  std::vector<EditRecord> history;
  for (const auto& step : plan) {
    TargetingSpec ts = make_targeting_spec(spec, vocab, step.concept_id, step.language,
                                           step.targeting);
    ts.threads = threads;
    StageResult stage{step.concept_id, build_targeting_vector(w, ts), {}};
    const ScanResult sr = scan(w, stage.target.v_target, threads);
    const auto hits = select_candidates(sr, step.selector.theta, step.selector.top_k);
    stage.record = apply_edits(w, hits, stage.target.v_target, step.amplitude, step.concept_id,
                               step.selector.theta, step.selector.top_k, history);
    history.push_back(stage.record);
    curve.stages.push_back(std::move(stage));
    probe_all(w);
  }
  curve.final_weights = std::move(w);
  return curve;
}

SensitivitySweep sensitivity_sweep(const ModelWeights& base, const CorpusSpec& spec,
                                   const Vocab& vocab, const std::string& concept_id,
                                   const std::string& language, const TargetingVector& target,
                                   int max_k, double threshold, double amplitude) {
  SensitivitySweep s;
  s.concept_id = concept_id;
  s.language = language;
  s.p_base = causal_probability(base, spec, vocab, concept_id, language);
  const ScanResult sr = scan(base, target.v_target);
  for (int k = 1; k <= max_k; ++k) {
    ModelWeights w = base;
    const auto hits = select_candidates(sr, std::nullopt, k);
    apply_edits(w, hits, target.v_target, amplitude, concept_id, std::nullopt, k);
    const double p = causal_probability(w, spec, vocab, concept_id, language);
    s.p_by_k.push_back(p);
    if (!s.minimal_k && p <= threshold) s.minimal_k = k;
  }
  return s;
}

nlohmann::json to_json(const EvalOptions& o) {
  return {{"n_samples", o.probe.n_samples},
          {"completion_length", o.probe.completion_length},
          {"probe_seed", o.probe.seed},
          {"retain_docs_per_language", o.retain_docs_per_language},
          {"concept_docs_per_language", o.concept_docs_per_language},
          {"corpus_seed", o.corpus_seed}};
}

EvalOptions eval_options_from_json(const nlohmann::json& j) {
  EvalOptions o;
  try {
    o.probe.n_samples = j.value("n_samples", o.probe.n_samples);
    o.probe.completion_length = j.value("completion_length", o.probe.completion_length);
    o.probe.seed = j.value("probe_seed", o.probe.seed);
    o.retain_docs_per_language = j.value("retain_docs_per_language", o.retain_docs_per_language);
    o.concept_docs_per_language = j.value("concept_docs_per_language", o.concept_docs_per_language);
    o.corpus_seed = j.value("corpus_seed", o.corpus_seed);
    o.threads = j.value("threads", o.threads);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("eval options: ") + e.what());
  }
  if (o.probe.n_samples < 1 || o.probe.completion_length < 0 || o.retain_docs_per_language < 1 ||
      o.concept_docs_per_language < 1) {
    throw ConfigError("eval options: counts out of range");
  }
  return o;
}

EvalReport evaluate(const ModelWeights& base, const ModelWeights& edited, const CorpusSpec& spec,
                    const Vocab& vocab, const CorpusOptions& corpus_options,
                    const EvalOptions& options) {
  if (!(base.config == edited.config)) {
    throw UsageError("evaluate: base and edited checkpoints have different model configs");
  }
  EvalReport r;
  r.base_hash = hash_hex(checkpoint_hash(base));
  r.edited_hash = hash_hex(checkpoint_hash(edited));

  std::vector<std::string> langs = corpus_options.languages;
  if (langs.empty()) {
    for (const auto& l : spec.languages) langs.push_back(l.name);
  }
  for (const auto& c : spec.concepts) {
    for (const auto& lang : langs) {
      for (const auto* w : {&base, &edited}) {
        auto causal = causal_probe(*w, spec, vocab, c.concept_id, lang, options.probe);
        auto reverse = reverse_probe(*w, spec, vocab, c.concept_id, lang, options.probe);
        causal.model = reverse.model = (w == &base) ? "base" : "edited";
        r.probes.push_back(std::move(causal));
        r.probes.push_back(std::move(reverse));
      }
    }
  }

  const auto retain = retain_docs(spec, vocab, corpus_options, options.retain_docs_per_language,
                                  options.corpus_seed);
  r.kl.push_back(kl_divergence(base, edited, retain, "retain", options.threads));
  for (const auto& lang : langs) {
    std::vector<CorpusDoc> pooled;
    std::uint64_t salt = 1;
    for (const auto& c : spec.concepts) {
      auto docs = concept_docs(spec, vocab, corpus_options, c.concept_id, lang,
                               options.concept_docs_per_language, options.corpus_seed + salt++);
      r.kl.push_back(kl_divergence(base, edited, docs, c.concept_id + ":" + lang, options.threads));
      pooled.insert(pooled.end(), docs.begin(), docs.end());
    }
    r.kl.push_back(kl_divergence(base, edited, pooled, "descriptions:" + lang, options.threads));
  }
  return r;
}

nlohmann::json to_json(const ProbeResult& p, const Vocab& vocab) {
  nlohmann::json top = nlohmann::json::array();
  for (const auto& [id, prob] : p.top5) {
    top.push_back({{"token", vocab.word(id)}, {"id", id}, {"p", prob}});
  }
  nlohmann::json completions = nlohmann::json::array();
  for (const auto& c : p.completions) completions.push_back(vocab.decode(c));
  nlohmann::json j = {{"concept", p.concept_id}, {"language", p.language},
                      {"direction", to_string(p.direction)}, {"model", p.model},
                      {"p_target", p.p_target}, {"top5", top}, {"completions", completions}};
  if (p.attribute_hit_rate) j["attribute_hit_rate"] = *p.attribute_hit_rate;
  return j;
}

nlohmann::json to_json(const KlSummary& k) {
  return {{"corpus", k.label}, {"positions", k.values.size()}, {"median", k.median},
          {"p05", k.p05},      {"p95", k.p95}};
}

nlohmann::json to_json(const ModularCurve& c) {
  nlohmann::json stages = nlohmann::json::array();
  for (const auto& s : c.stages) {
    stages.push_back({{"concept", s.concept_id},
                      {"edits", s.record.edits.size()},
                      {"retained_candidates", s.target.retained},
                      {"p_v_target", s.target.p_target_after},
                      {"record", to_json(s.record)}});
  }
  return {{"concepts", c.concepts}, {"language", c.language}, {"p", c.p}, {"stages", stages}};
}

nlohmann::json to_json(const EvalReport& r, const Vocab& vocab) {
  nlohmann::json probes = nlohmann::json::array();
  for (const auto& p : r.probes) probes.push_back(to_json(p, vocab));
  nlohmann::json kl = nlohmann::json::array();
  for (const auto& k : r.kl) kl.push_back(to_json(k));
  nlohmann::json j = {{"base_hash", r.base_hash}, {"edited_hash", r.edited_hash},
                      {"probes", probes},         {"kl", kl},
                      {"edits", r.edits}};
  if (r.curve) j["modular_curve"] = to_json(*r.curve);
  return j;
}

}  // namespace tars
