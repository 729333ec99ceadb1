#include "tars/pipeline.hpp"

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <sstream>

#include "tars/container.hpp"
#include "tars/errors.hpp"

namespace tars {

namespace fs = std::filesystem;

const ConceptPlan& PipelineConfig::plan(const std::string& concept_id) const {
  auto it = std::ranges::find(concepts, concept_id, &ConceptPlan::concept_id);
  if (it == concepts.end()) throw ConfigError("concept '" + concept_id + "' is not in the config");
  return *it;
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  return Rng(seed).fork(stream).next_u64();
}

namespace {

std::string env_name(const std::vector<std::string>& path) {
  std::string out = "TARS";
  for (const auto& p : path) {
    out += '_';
    for (char c : p) out += static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  }
  return out;
}

void override_leaves(nlohmann::json& j, std::vector<std::string>& path,
                     const std::function<std::optional<std::string>(const std::string&)>& env) {
  for (auto& [key, value] : j.items()) {
    path.push_back(key);
    if (value.is_object()) {
      override_leaves(value, path, env);
    } else if (value.is_primitive() && !value.is_null()) {
      const std::string name = env_name(path);
      if (auto text = env(name)) {
        try {
          if (value.is_string()) {
            value = *text;
          } else if (value.is_boolean()) {
            if (*text != "true" && *text != "false") throw std::invalid_argument(*text);
            value = (*text == "true");
          } else if (value.is_number_integer()) {
            std::size_t used = 0;
            const long long v = std::stoll(*text, &used);
            if (used != text->size()) throw std::invalid_argument(*text);
            if (value.is_number_unsigned() && v < 0) throw std::invalid_argument(*text);
            value = v;
          } else {
            std::size_t used = 0;
            const double v = std::stod(*text, &used);
            if (used != text->size()) throw std::invalid_argument(*text);
            value = v;
          }
        } catch (const std::exception&) {
          throw ConfigError(name + "='" + *text + "' does not match the type of " + key);
        }
      }
    }
    path.pop_back();
  }
}

// Every scalar knob with its default, so TARS_<FIELD> works for fields the
// config file leaves out. Seeds are derived, so they are not listed here.
nlohmann::json defaults() {
  auto train = to_json(TrainConfig{});
  train.erase("seed");
  train["threads"] = 1;
  auto options = to_json(CorpusOptions{});
  options.erase("seed");
  options.erase("languages");
  auto targeting = to_json(TargetingSpec{});
  for (const char* k : {"seed", "prompt", "concept_token", "sigma"}) targeting.erase(k);
  return {{"seed", 0},
          {"out_dir", "runs"},
          {"threads", 1},
          {"model", to_json(ModelConfig{})},
          {"train", train},
          {"corpus", {{"options", options}}},
          {"targeting", targeting},
          {"eval", to_json(EvalOptions{})}};
}

fs::path resolve(const fs::path& base, const fs::path& p) {
  return p.is_absolute() ? p : base / p;
}

}  // namespace

void apply_env_overrides(nlohmann::json& j,
                         const std::function<std::optional<std::string>(const std::string&)>& env) {
  auto lookup = env ? env : [](const std::string& name) -> std::optional<std::string> {
    if (const char* v = std::getenv(name.c_str())) return std::string(v);
    return std::nullopt;
  };
  std::vector<std::string> path;
  override_leaves(j, path, lookup);
}

nlohmann::json load_config_json(const fs::path& path) {
  if (!fs::exists(path)) throw ConfigError("config file not found: " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(container::read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  if (!j.is_object()) throw ConfigError(path.string() + ": top level must be an object");
  nlohmann::json merged = defaults();
  merged.merge_patch(j);
  apply_env_overrides(merged);
  return merged;
}

PipelineConfig pipeline_config_from_json(nlohmann::json j, const fs::path& base_dir) {
  PipelineConfig c;
  try {
    c.source = j;
    c.seed = j.value("seed", std::uint64_t{0});
    c.out_dir = j.value("out_dir", std::string("runs"));
    c.threads = j.value("threads", 1);
    if (c.threads < 1) throw ConfigError("threads must be >= 1");
    c.init_seed = j.value("init_seed", derive_seed(c.seed, 0));
    c.model = model_config_from_json(j.value("model", nlohmann::json::object()));

    auto corpus = j.value("corpus", nlohmann::json::object());
    if (corpus.contains("spec_path")) {
      const fs::path sp = resolve(base_dir, corpus.at("spec_path").get<std::string>());
      if (!fs::exists(sp)) throw ConfigError("corpus spec file not found: " + sp.string());
      c.corpus = corpus_spec_from_json(nlohmann::json::parse(container::read_file(sp)));
    } else if (corpus.contains("spec")) {
      c.corpus = corpus_spec_from_json(corpus.at("spec"));
    } else {
      throw ConfigError("corpus: either 'spec' or 'spec_path' is required");
    }
    auto options = corpus.value("options", nlohmann::json::object());
    if (!options.contains("seed")) options["seed"] = derive_seed(c.seed, 1);
    c.corpus_options = corpus_options_from_json(options);
    if (corpus.contains("path")) {
      c.corpus_path = resolve(base_dir, corpus.at("path").get<std::string>());
    }

    auto train = j.value("train", nlohmann::json::object());
    if (!train.contains("seed")) train["seed"] = derive_seed(c.seed, 2);
    train["threads"] = c.threads;
    c.train = train_config_from_json(train);

    auto targeting = j.value("targeting", nlohmann::json::object());
    if (!targeting.contains("seed")) targeting["seed"] = derive_seed(c.seed, 3);
    apply_targeting_json(targeting, c.targeting);
    c.targeting.threads = c.threads;

    const auto vocab = c.corpus.build_vocab();
    if (static_cast<int>(vocab.size()) > c.model.vocab_size) {
      throw ConfigError("corpus vocabulary has " + std::to_string(vocab.size()) +
                        " tokens but model.vocab_size is " + std::to_string(c.model.vocab_size));
    }
    const std::string default_lang = c.corpus.languages.front().name;
    for (const auto& cj : j.value("concepts", nlohmann::json::array())) {
      ConceptPlan p;
      p.concept_id = cj.at("id").get<std::string>();
      p.language = cj.value("language", default_lang);
      c.corpus.concept_spec(p.concept_id).in(p.language);
      p.targeting = c.targeting;
      if (cj.contains("targeting")) apply_targeting_json(cj.at("targeting"), p.targeting);
      p.targeting.threads = c.threads;
      p.targeting = make_targeting_spec(c.corpus, vocab, p.concept_id, p.language, p.targeting);
      if (cj.contains("theta")) p.selector.theta = cj.at("theta").get<double>();
      if (cj.contains("top_k")) p.selector.top_k = cj.at("top_k").get<int>();
      if (p.selector.theta.has_value() == p.selector.top_k.has_value()) {
        throw ConfigError("concept '" + p.concept_id + "': set exactly one of theta or top_k");
      }
      p.amplitude = cj.value("amplitude", 1.0);
      if (!(p.amplitude > 0)) throw ConfigError("concept '" + p.concept_id + "': amplitude must be > 0");
      c.concepts.push_back(std::move(p));
    }

    auto eval = j.value("eval", nlohmann::json::object());
    c.eval = eval_options_from_json(eval);
    c.eval.threads = c.threads;
    for (const auto& p : eval.value("retain_paths", std::vector<std::string>{})) {
      c.retain_paths.push_back(resolve(base_dir, p));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  if (c.corpus_path && !fs::exists(*c.corpus_path)) {
    throw ConfigError("corpus file not found: " + c.corpus_path->string());
  }
  for (const auto& p : c.retain_paths) {
    if (!fs::exists(p)) throw ConfigError("retain corpus file not found: " + p.string());
  }
  return c;
}

PipelineConfig load_pipeline_config(const fs::path& path) {
  return pipeline_config_from_json(load_config_json(path), path.parent_path());
}

fs::path checkpoint_path(const PipelineConfig& cfg, std::uint64_t hash) {
  return cfg.out_dir / "checkpoints" / ("model-" + hash_hex(hash) + ".tars");
}

namespace {

void say(const Logger& log, const std::string& msg) {
  if (log) log(msg);
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  container::write_file(path, j.dump(2) + "\n");
}

std::string fixed(double v, int digits = 4) {
  std::ostringstream s;
  s.setf(std::ios::fixed);
  s.precision(digits);
  s << v;
  return s.str();
}

}  // namespace

std::vector<CorpusDoc> load_or_generate_corpus(const PipelineConfig& cfg, const Vocab& vocab) {
  if (cfg.corpus_path) return read_jsonl(*cfg.corpus_path);
  return generate_corpus(cfg.corpus, vocab, cfg.corpus_options);
}

TrainOutcome run_train(const PipelineConfig& cfg, const Logger& log) {
  const Vocab vocab = cfg.vocab();
  const auto corpus = load_or_generate_corpus(cfg, vocab);
  say(log, "corpus: " + std::to_string(corpus.size()) + " documents, vocab " +
               std::to_string(vocab.size()) + " tokens");
  TrainOutcome out;
  const ModelWeights init = init_weights(cfg.model, cfg.init_seed);
  const int every = std::max(1, cfg.train.steps / 10);
  out.weights = train(init, corpus, cfg.train, &out.report, [&](int step, double loss) {
    if ((step + 1) % every == 0) {
      say(log, "step " + std::to_string(step + 1) + "/" + std::to_string(cfg.train.steps) +
                   " loss " + fixed(loss));
    }
  });
  probe_imprinting(out.weights, cfg.corpus, vocab, out.report);

  const auto hash = checkpoint_hash(out.weights);
  out.checkpoint = checkpoint_path(cfg, hash);
  save_checkpoint(out.weights, out.checkpoint);
  out.report_path = cfg.out_dir / "reports" / ("train-" + hash_hex(hash) + ".json");
  nlohmann::json report = to_json(out.report);
  report["checkpoint"] = out.checkpoint.filename().string();
  report["train_config"] = to_json(cfg.train);
  report["init_seed"] = cfg.init_seed;
  write_json(out.report_path, report);
  write_json(cfg.out_dir / "vocab.json", vocab.to_json());
  if (!cfg.corpus_path) write_jsonl(corpus, cfg.out_dir / "corpus.jsonl");
  return out;
}

TargetOutcome run_target(const PipelineConfig& cfg, const ModelWeights& w,
                         const std::string& concept_id, std::optional<std::string> language,
                         const TargetingSpec* override_spec) {
  const Vocab vocab = cfg.vocab();
  const auto& concept_spec = cfg.corpus.concept_spec(concept_id);
  std::string lang = language.value_or("");
  TargetingSpec knobs = cfg.targeting;
  auto it = std::ranges::find(cfg.concepts, concept_id, &ConceptPlan::concept_id);
  if (it != cfg.concepts.end()) {
    if (lang.empty()) lang = it->language;
    knobs = it->targeting;
  }
  if (lang.empty()) lang = cfg.corpus.languages.front().name;
  concept_spec.in(lang);
  if (override_spec) knobs = *override_spec;
  const TargetingSpec spec = make_targeting_spec(cfg.corpus, vocab, concept_id, lang, knobs);

  TargetOutcome out;
  out.target = build_targeting_vector(w, spec);
  const auto hash = checkpoint_hash(w);
  out.path = cfg.out_dir / "targets" / (concept_id + "-" + lang + "-" + hash_hex(hash) + ".tars");
  save_targeting_vector(out.target, out.path,
                        {{"concept_id", concept_id}, {"language", lang},
                         {"checkpoint_hash", hash_hex(hash)}});
  return out;
}

ScanEditOutcome run_scan_edit(const PipelineConfig& cfg, const ModelWeights& w,
                              const TargetingVector& target, const std::string& concept_id,
                              const Selector& selector, double amplitude,
                              std::span<const EditRecord> history) {
  ScanEditOutcome out;
  out.scan = scan(w, target.v_target, cfg.threads);
  const auto hits = select_candidates(out.scan, selector.theta, selector.top_k);
  out.edited = w;
  out.record = apply_edits(out.edited, hits, target.v_target, amplitude, concept_id,
                           selector.theta, selector.top_k, history);
  out.checkpoint = checkpoint_path(cfg, out.record.hash_after);
  save_checkpoint(out.edited, out.checkpoint);
  out.record_path = cfg.out_dir / "edits" /
                    (concept_id + "-" + hash_hex(out.record.hash_before) + "-" +
                     hash_hex(out.record.hash_after) + ".json");
  save_edit_record(out.record, out.record_path);
  return out;
}

EvalOutcome run_eval(const PipelineConfig& cfg, const ModelWeights& base,
                     const ModelWeights& edited, bool write_csv, const nlohmann::json& edits) {
  const Vocab vocab = cfg.vocab();
  EvalOutcome out;
  out.report = evaluate(base, edited, cfg.corpus, vocab, cfg.corpus_options, cfg.eval);
  for (const auto& p : cfg.retain_paths) {
    out.report.kl.push_back(
        kl_divergence(base, edited, read_jsonl(p), p.filename().string(), cfg.threads));
  }
  out.report.edits = edits;
  const std::string stem = "eval-" + out.report.base_hash + "-" + out.report.edited_hash;
  out.path = cfg.out_dir / "reports" / (stem + ".json");
  write_json(out.path, to_json(out.report, vocab));
  if (write_csv) {
    out.csv_path = cfg.out_dir / "reports" / (stem + ".kl.csv");
    write_kl_csv(out.report.kl, *out.csv_path);
  }
  return out;
}

namespace {

std::uint64_t config_digest(const PipelineConfig& cfg) {
  nlohmann::json j = cfg.source;
  for (const char* k : {"out_dir", "threads"}) j.erase(k);
  if (j.contains("train")) j["train"].erase("threads");
  return container::fnv1a64(j.dump());
}

struct StateStage {
  std::string concept_id;
  fs::path target;
  fs::path record;
  fs::path checkpoint;
  std::string hash;
};

}  // namespace

PipelineOutcome run_pipeline(const PipelineConfig& cfg, bool resume, const Logger& log) {
  if (cfg.concepts.empty()) throw ConfigError("pipeline: no concepts configured");
  const Vocab vocab = cfg.vocab();
  PipelineOutcome out;
  out.state_path = cfg.out_dir / "pipeline_state.json";
  const std::string digest = hash_hex(config_digest(cfg));

  nlohmann::json state;
  if (resume && fs::exists(out.state_path)) {
    state = nlohmann::json::parse(container::read_file(out.state_path));
    if (state.value("config_digest", "") != digest) {
      say(log, "resume: config changed since the recorded run; starting over");
      state = nlohmann::json();
    }
  }

  auto verified = [&](const fs::path& p, const std::string& hash) -> std::optional<ModelWeights> {
    if (!fs::exists(p)) return std::nullopt;
    try {
      ModelWeights w = load_checkpoint(p);
      if (hash_hex(checkpoint_hash(w)) == hash) return w;
    } catch (const Error&) {
    }
    return std::nullopt;
  };

  // Base model.
  std::optional<ModelWeights> base;
  if (state.contains("base")) {
    base = verified(cfg.out_dir / state["base"].value("checkpoint", ""),
                    state["base"].value("hash", ""));
    if (base) {
      say(log, "resume: base checkpoint " + state["base"].value("hash", "") + " verified");
      out.base.weights = *base;
      out.base.checkpoint = cfg.out_dir / state["base"].value("checkpoint", "");
      probe_imprinting(out.base.weights, cfg.corpus, vocab, out.base.report);
    }
  }
  if (!base) {
    say(log, "training base model");
    out.base = run_train(cfg, log);
    state = {{"config_digest", digest},
             {"base",
              {{"checkpoint", fs::relative(out.base.checkpoint, cfg.out_dir).string()},
               {"hash", hash_hex(checkpoint_hash(out.base.weights))}}},
             {"stages", nlohmann::json::array()}};
    write_json(out.state_path, state);
  }

  ModularCurve& curve = out.curve;
  curve.language = cfg.concepts.front().language;
  curve.p.assign(cfg.concepts.size(), {});
  for (const auto& c : cfg.concepts) curve.concepts.push_back(c.concept_id);
  auto probe_all = [&](const ModelWeights& w) {
    for (std::size_t i = 0; i < cfg.concepts.size(); ++i) {
      curve.p[i].push_back(causal_probability(w, cfg.corpus, vocab, cfg.concepts[i].concept_id,
                                              cfg.concepts[i].language));
    }
  };

  ModelWeights w = out.base.weights;
  probe_all(w);
  std::vector<EditRecord> history;
  nlohmann::json stages = nlohmann::json::array();
  const auto recorded = state.value("stages", nlohmann::json::array());
  bool resuming = true;
  for (std::size_t i = 0; i < cfg.concepts.size(); ++i) {
    const auto& plan = cfg.concepts[i];
    StageResult stage;
    stage.concept_id = plan.concept_id;
    if (resuming && i < recorded.size() && recorded[i].value("concept", "") == plan.concept_id) {
      const auto& rs = recorded[i];
      auto next = verified(cfg.out_dir / rs.value("checkpoint", ""), rs.value("hash", ""));
      try {
        if (next) {
          stage.target = load_targeting_vector(cfg.out_dir / rs.value("target", ""));
          stage.record = load_edit_record(cfg.out_dir / rs.value("record", ""));
          if (stage.record.hash_before != checkpoint_hash(w)) next.reset();
        }
      } catch (const Error&) {
        next.reset();
      }
      if (next) {
        say(log, "resume: stage " + std::to_string(i + 1) + " (" + plan.concept_id + ") verified");
        w = std::move(*next);
        ++out.resumed_stages;
        history.push_back(stage.record);
        stages.push_back(rs);
        curve.stages.push_back(std::move(stage));
        probe_all(w);
        continue;
      }
    }
    resuming = false;
    say(log, "stage " + std::to_string(i + 1) + ": removing '" + plan.concept_id + "'");
    auto t = run_target(cfg, w, plan.concept_id, plan.language);
    for (const auto& warn : t.target.warnings) say(log, "warning: " + warn);
    auto e = run_scan_edit(cfg, w, t.target, plan.concept_id, plan.selector, plan.amplitude,
                           history);
    for (const auto& warn : e.record.warnings) say(log, "warning: " + warn);
    say(log, "  " + std::to_string(e.record.edits.size()) + " rows edited, checkpoint " +
                 hash_hex(e.record.hash_after));
    w = std::move(e.edited);
    history.push_back(e.record);
    stage.target = std::move(t.target);
    stage.record = std::move(e.record);
    stages.push_back({{"concept", plan.concept_id},
                      {"target", fs::relative(t.path, cfg.out_dir).string()},
                      {"record", fs::relative(e.record_path, cfg.out_dir).string()},
                      {"checkpoint", fs::relative(e.checkpoint, cfg.out_dir).string()},
                      {"hash", hash_hex(stage.record.hash_after)}});
    state["stages"] = stages;
    write_json(out.state_path, state);
    curve.stages.push_back(std::move(stage));
    probe_all(w);
  }
  curve.final_weights = w;

  nlohmann::json edits = nlohmann::json::array();
  for (const auto& s : curve.stages) edits.push_back(to_json(s.record));
  out.eval = run_eval(cfg, out.base.weights, w, true, edits);
  out.eval.report.curve = curve;
  write_json(out.eval.path, to_json(out.eval.report, vocab));
  write_json(cfg.out_dir / "reports" /
                 ("modular-" + out.eval.report.base_hash + "-" + out.eval.report.edited_hash +
                  ".json"),
             to_json(curve));
  return out;
}

}  // namespace tars
