#pragma once

// Config loading and the end-to-end operations behind the command line tool.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tars/corpus.hpp"
#include "tars/eval.hpp"
#include "tars/model.hpp"
#include "tars/surgery.hpp"
#include "tars/targeting.hpp"
#include "tars/trainer.hpp"

namespace tars {

struct PipelineConfig {
  std::uint64_t seed = 0;
  std::uint64_t init_seed = 0;
  std::filesystem::path out_dir = "runs";
  int threads = 1;
  ModelConfig model;
  TrainConfig train;
  CorpusSpec corpus;
  CorpusOptions corpus_options;
  std::optional<std::filesystem::path> corpus_path;  // pre-generated JSONL corpus
  TargetingSpec targeting;  // defaults shared by every concept
  std::vector<ConceptPlan> concepts;
  EvalOptions eval;
  std::vector<std::filesystem::path> retain_paths;  // extra retain corpora (JSONL)
  nlohmann::json source;  // the merged JSON document, for echoing into reports

  Vocab vocab() const { return corpus.build_vocab(); }
  const ConceptPlan& plan(const std::string& concept_id) const;
};

// Applies TARS_<PATH> environment overrides to scalar leaves of `j`, where
// PATH is the upper-cased key path joined by '_' (TARS_SEED, TARS_TRAIN_STEPS).
// `env` defaults to the process environment.
void apply_env_overrides(nlohmann::json& j,
                         const std::function<std::optional<std::string>(const std::string&)>& env = {});

// Reads the config file, fills defaults for every scalar field and applies
// environment overrides. Throws ConfigError (exit code 2).
nlohmann::json load_config_json(const std::filesystem::path& path);
// Validates and builds the typed config. Input paths resolve against
// `base_dir`; out_dir stays relative to the working directory.
PipelineConfig load_pipeline_config(const std::filesystem::path& path);
PipelineConfig pipeline_config_from_json(nlohmann::json j, const std::filesystem::path& base_dir);

// Seeds for each stage derive from the global seed unless set explicitly.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

using Logger = std::function<void(const std::string&)>;

struct TrainOutcome {
  ModelWeights weights;
  TrainReport report;
  std::filesystem::path checkpoint;
  std::filesystem::path report_path;
};

std::vector<CorpusDoc> load_or_generate_corpus(const PipelineConfig& cfg, const Vocab& vocab);
TrainOutcome run_train(const PipelineConfig& cfg, const Logger& log = {});

struct TargetOutcome {
  TargetingVector target;
  std::filesystem::path path;
};
TargetOutcome run_target(const PipelineConfig& cfg, const ModelWeights& w,
                         const std::string& concept_id, std::optional<std::string> language,
                         const TargetingSpec* override_spec = nullptr);

struct ScanEditOutcome {
  ScanResult scan;
  EditRecord record;
  ModelWeights edited;
  std::filesystem::path checkpoint;
  std::filesystem::path record_path;
};
ScanEditOutcome run_scan_edit(const PipelineConfig& cfg, const ModelWeights& w,
                              const TargetingVector& target, const std::string& concept_id,
                              const Selector& selector, double amplitude,
                              std::span<const EditRecord> history = {});

struct EvalOutcome {
  EvalReport report;
  std::filesystem::path path;
  std::optional<std::filesystem::path> csv_path;
};
EvalOutcome run_eval(const PipelineConfig& cfg, const ModelWeights& base,
                     const ModelWeights& edited, bool write_csv,
                     const nlohmann::json& edits = nlohmann::json::array());

struct PipelineOutcome {
  TrainOutcome base;
  ModularCurve curve;
  EvalOutcome eval;
  std::filesystem::path state_path;
  int resumed_stages = 0;
};

// train -> (target -> scan -> edit) per concept -> eval. Completed stages are
// recorded with their checkpoint hashes in <out_dir>/pipeline_state.json; a
// rerun with resume=true skips every stage whose artifacts still verify.
PipelineOutcome run_pipeline(const PipelineConfig& cfg, bool resume, const Logger& log = {});

std::filesystem::path checkpoint_path(const PipelineConfig& cfg, std::uint64_t hash);

}  // namespace tars
