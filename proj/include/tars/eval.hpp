#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "tars/corpus.hpp"
#include "tars/model.hpp"
#include "tars/surgery.hpp"
#include "tars/targeting.hpp"

namespace tars {

enum class Direction { kCausal, kReverse };
const char* to_string(Direction d);

struct ProbeResult {
  std::string concept_id;
  std::string language;
  Direction direction = Direction::kCausal;
  std::string model;  // "base" or "edited"
  // Causal: p(target token). Reverse: next-token mass on the concept's
  // attribute tokens.
  double p_target = 0.0;
  std::vector<std::pair<TokenId, double>> top5;
  std::vector<std::vector<TokenId>> completions;  // generated tokens only
  std::optional<double> attribute_hit_rate;       // reverse probes only
};

struct ProbeOptions {
  int n_samples = 3;
  int completion_length = 24;
  std::uint64_t seed = 0;
};

// Description + trigger; reports p(target), top-5 and n_samples seeded sampled
// completions.
ProbeResult causal_probe(const ModelWeights& w, const CorpusSpec& spec, const Vocab& vocab,
                         const std::string& concept_id, const std::string& language,
                         const ProbeOptions& options = {});

// Target + copula; one greedy completion plus n_samples - 1 seeded samples.
// attribute_hit_rate is the fraction of the concept's attribute tokens that
// appear anywhere in the completions.
ProbeResult reverse_probe(const ModelWeights& w, const CorpusSpec& spec, const Vocab& vocab,
                          const std::string& concept_id, const std::string& language,
                          const ProbeOptions& options = {});

// p(target | description) only; the cheap form used inside sweeps.
double causal_probability(const ModelWeights& w, const CorpusSpec& spec, const Vocab& vocab,
                          const std::string& concept_id, const std::string& language);

struct KlSummary {
  std::string label;
  std::vector<double> values;  // one per scored position
  std::vector<std::size_t> doc_index;
  std::vector<std::size_t> position;
  double median = 0.0;
  double p05 = 0.0;
  double p95 = 0.0;
};

// Linear interpolation between closest ranks on sorted data (q in [0, 1]).
double percentile(std::vector<double> values, double q);

// KL(base || edited) of the next-token distribution at every position i >= 1
// whose token is not PAD or BOS.
KlSummary kl_divergence(const ModelWeights& base, const ModelWeights& edited,
                        const std::vector<CorpusDoc>& docs, const std::string& label,
                        int threads = 1);

void write_kl_csv(std::span<const KlSummary> summaries, const std::filesystem::path& path);
// Plain-text table: corpus | median [5th, 95th].
std::string format_kl_table(std::span<const KlSummary> summaries);

// Edit selector: exactly one of theta / top_k.
struct Selector {
  std::optional<double> theta;
  std::optional<int> top_k;
};

struct ConceptPlan {
  std::string concept_id;
  std::string language;  // language whose description builds the targeting vector
  TargetingSpec targeting;  // prompt and token filled from the corpus spec
  Selector selector;
  double amplitude = 1.0;
};

TargetingSpec make_targeting_spec(const CorpusSpec& spec, const Vocab& vocab,
                                  const std::string& concept_id, const std::string& language,
                                  TargetingSpec knobs);

struct StageResult {
  std::string concept_id;
  TargetingVector target;
  EditRecord record;
};

struct ModularCurve {
  std::vector<std::string> concepts;  // probe rows, in pipeline order
  std::string language;
  // p[i][s]: causal probability of concept i after s stages (s = 0 is the base).
  std::vector<std::vector<double>> p;
  std::vector<StageResult> stages;
  ModelWeights final_weights;
};

// Runs steps 1-4 for each concept in order on the progressively edited model,
// probing every concept after each stage.
ModularCurve modular_curve(const ModelWeights& base, const CorpusSpec& spec, const Vocab& vocab,
                           const std::vector<ConceptPlan>& plan, int threads = 1);

// Causal p after editing the top k rows for k = 1..max_k, each from the
// unedited model. minimal_k is the first k reaching p <= threshold.
struct SensitivitySweep {
  std::string concept_id;
  std::string language;
  double p_base = 0.0;
  std::vector<double> p_by_k;  // index k - 1
  std::optional<int> minimal_k;
};

SensitivitySweep sensitivity_sweep(const ModelWeights& base, const CorpusSpec& spec,
                                   const Vocab& vocab, const std::string& concept_id,
                                   const std::string& language, const TargetingVector& target,
                                   int max_k, double threshold, double amplitude = 1.0);

struct EvalReport {
  std::string base_hash;
  std::string edited_hash;
  std::vector<ProbeResult> probes;
  std::vector<KlSummary> kl;
  nlohmann::json edits = nlohmann::json::array();  // per-concept edit summaries
  std::optional<ModularCurve> curve;
};

struct EvalOptions {
  ProbeOptions probe;
  int retain_docs_per_language = 40;
  int concept_docs_per_language = 20;
  std::uint64_t corpus_seed = 7919;
  int threads = 1;
};

nlohmann::json to_json(const EvalOptions& o);
EvalOptions eval_options_from_json(const nlohmann::json& j);

// Probes every concept and language in both directions on both models and
// measures KL on a held-out retain corpus and on each concept's descriptions.
EvalReport evaluate(const ModelWeights& base, const ModelWeights& edited, const CorpusSpec& spec,
                    const Vocab& vocab, const CorpusOptions& corpus_options,
                    const EvalOptions& options);

nlohmann::json to_json(const ProbeResult& p, const Vocab& vocab);
nlohmann::json to_json(const KlSummary& k);  // summary statistics only
nlohmann::json to_json(const ModularCurve& c);
nlohmann::json to_json(const EvalReport& r, const Vocab& vocab);

}  // namespace tars
