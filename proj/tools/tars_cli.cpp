// Command line front end: train, target, scan-edit, eval, pipeline, inspect.

#include <cstdio>
#include <iostream>
#include <optional>
#include <regex>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "tars/container.hpp"
#include "tars/errors.hpp"
#include "tars/pipeline.hpp"

namespace fs = std::filesystem;
using namespace tars;

namespace {

struct Globals {
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  std::optional<std::string> out_dir;
};

PipelineConfig load(const std::string& path, const Globals& g) {
  nlohmann::json j = load_config_json(path);
  if (g.seed) j["seed"] = *g.seed;
  if (g.threads) j["threads"] = *g.threads;
  if (g.out_dir) j["out_dir"] = *g.out_dir;
  return pipeline_config_from_json(std::move(j), fs::path(path).parent_path());
}

// Checkpoints written by this tool are named model-<hash>.tars; a file whose
// contents no longer hash to its name is rejected.
ModelWeights load_verified(const fs::path& path) {
  ModelWeights w = load_checkpoint(path);
  static const std::regex named("model-([0-9a-f]{16})\\.tars");
  std::smatch m;
  const std::string name = path.filename().string();
  if (std::regex_match(name, m, named) && m[1] != hash_hex(checkpoint_hash(w))) {
    throw IntegrityError(path.string() + ": contents hash to " + hash_hex(checkpoint_hash(w)));
  }
  return w;
}

void log_line(const std::string& msg) { std::cerr << msg << '\n'; }

void print_probabilities(const TrainReport& r) {
  for (const auto& [concept_id, langs] : r.causal_probability) {
    for (const auto& [lang, p] : langs) {
      std::printf("  p(%s | description, %s) = %.4f\n", concept_id.c_str(), lang.c_str(), p);
    }
  }
}

int inspect(const std::string& path) {
  if (fs::path(path).extension() == ".json") {
    std::cout << nlohmann::json::parse(container::read_file(path)).dump(2) << '\n';
    return 0;
  }
  nlohmann::json header = container::read_header(path);
  std::cout << header.dump(2) << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Targeted angular reversal: concept removal by weight-row replacement"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option_function<std::uint64_t>("--seed", [&](std::uint64_t v) { g.seed = v; },
                                         "Global seed (overrides the config)");
  app.add_option_function<int>("--threads", [&](int v) { g.threads = v; }, "Worker threads")
      ->check(CLI::PositiveNumber);
  app.add_option_function<std::string>("--out-dir", [&](const std::string& v) { g.out_dir = v; },
                                       "Artifact directory");

  std::string config = "configs/default.json";
  auto add_config = [&](CLI::App* sub) {
    sub->add_option("--config", config, "Pipeline config (JSON)")->capture_default_str();
  };

  auto* train_cmd = app.add_subcommand("train", "Generate the corpus and train the base model");
  add_config(train_cmd);

  auto* target_cmd = app.add_subcommand("target", "Build a refined targeting vector");
  add_config(target_cmd);
  std::string checkpoint, concept_id, language;
  std::optional<double> sigma, tau;
  std::optional<int> min_candidates, batch_size, max_batches;
  target_cmd->add_option("--checkpoint", checkpoint, "Model checkpoint")->required();
  target_cmd->add_option("--concept", concept_id, "Concept id")->required();
  target_cmd->add_option("--language", language, "Description language");
  target_cmd->add_option("--sigma", sigma, "Absolute noise scale");
  target_cmd->add_option("--tau", tau, "Candidate probability threshold");
  target_cmd->add_option("--min-candidates", min_candidates);
  target_cmd->add_option("--batch-size", batch_size);
  target_cmd->add_option("--max-batches", max_batches);

  auto* edit_cmd = app.add_subcommand("scan-edit", "Scan gate/up rows and replace the selected ones");
  add_config(edit_cmd);
  std::string target_file;
  std::optional<double> theta;
  std::optional<int> top_k;
  double amplitude = 1.0;
  std::vector<std::string> history_files;
  std::size_t show = 20;
  edit_cmd->add_option("--checkpoint", checkpoint, "Model checkpoint")->required();
  edit_cmd->add_option("--target", target_file, "Targeting-vector file")->required();
  auto* theta_opt = edit_cmd->add_option("--theta", theta, "Edit rows with cosine > theta");
  auto* topk_opt = edit_cmd->add_option("--top-k", top_k, "Edit the k highest-scoring rows");
  theta_opt->excludes(topk_opt);
  edit_cmd->add_option("--amplitude", amplitude, "Scale of the reversed vector")
      ->capture_default_str();
  edit_cmd->add_option("--history", history_files, "Earlier edit records (collision warnings)");
  edit_cmd->add_option("--show", show, "Scan rows to print")->capture_default_str();

  auto* eval_cmd = app.add_subcommand("eval", "Probe and compare a base and an edited model");
  add_config(eval_cmd);
  std::string base_file, edited_file;
  bool csv = false;
  eval_cmd->add_option("--base", base_file, "Base checkpoint")->required();
  eval_cmd->add_option("--edited", edited_file, "Edited checkpoint")->required();
  eval_cmd->add_flag("--csv", csv, "Also write per-position KL values as CSV");

  auto* pipe_cmd = app.add_subcommand("pipeline", "Train, then remove every configured concept in order");
  add_config(pipe_cmd);
  bool resume = false;
  pipe_cmd->add_flag("--resume", resume, "Skip stages whose recorded artifacts verify");

  auto* inspect_cmd = app.add_subcommand("inspect", "Print a container header or record");
  std::string inspect_file;
  inspect_cmd->add_option("file", inspect_file, "File to inspect")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : static_cast<int>(ExitCode::kInput);
  }

  try {
    if (*inspect_cmd) return inspect(inspect_file);

    const PipelineConfig cfg = load(config, g);

    if (*train_cmd) {
      const auto out = run_train(cfg, log_line);
      std::printf("checkpoint %s\nreport %s\n", out.checkpoint.c_str(), out.report_path.c_str());
      print_probabilities(out.report);
      return 0;
    }

    if (*target_cmd) {
      const ModelWeights w = load_verified(checkpoint);
      TargetingSpec knobs = cfg.targeting;
      auto it = std::ranges::find(cfg.concepts, concept_id, &ConceptPlan::concept_id);
      if (it != cfg.concepts.end()) knobs = it->targeting;
      if (sigma) knobs.sigma = *sigma;
      if (tau) knobs.tau = *tau;
      if (min_candidates) knobs.min_candidates = *min_candidates;
      if (batch_size) knobs.batch_size = *batch_size;
      if (max_batches) knobs.max_batches = *max_batches;
      const auto out = run_target(cfg, w, concept_id,
                                  language.empty() ? std::nullopt : std::optional(language), &knobs);
      for (const auto& warn : out.target.warnings) log_line("warning: " + warn);
      std::printf("target %s\n", out.path.c_str());
      std::printf("p(target | v_approx) %.4f  p(target | v_target) %.4f  retained %zu  batches %d\n",
                  out.target.p_target_before, out.target.p_target_after, out.target.retained,
                  out.target.batches_run);
      return 0;
    }

    if (*edit_cmd) {
      if (!theta && !top_k) throw UsageError("scan-edit: pass --theta or --top-k");
      const ModelWeights w = load_verified(checkpoint);
      const TargetingVector t = load_targeting_vector(target_file);
      const auto header = container::read_header(target_file);
      const std::string cid = header["__meta__"].value("concept_id", "concept");
      std::vector<EditRecord> history;
      for (const auto& h : history_files) history.push_back(load_edit_record(h));
      ScanResult sr = scan(w, t.v_target, cfg.threads);
      std::cout << format_scan_table(sr.hits, show);
      const auto out = run_scan_edit(cfg, w, t, cid, {theta, top_k}, amplitude, history);
      for (const auto& warn : out.record.warnings) log_line("warning: " + warn);
      std::printf("edited %zu rows\ncheckpoint %s\nrecord %s\n", out.record.edits.size(),
                  out.checkpoint.c_str(), out.record_path.c_str());
      return 0;
    }

    if (*eval_cmd) {
      const ModelWeights base = load_verified(base_file);
      const ModelWeights edited = load_verified(edited_file);
      const auto out = run_eval(cfg, base, edited, csv);
      for (const auto& p : out.report.probes) {
        std::printf("%-8s %-10s %-4s %-7s p=%.4f", p.model.c_str(), p.concept_id.c_str(),
                    p.language.c_str(), to_string(p.direction), p.p_target);
        if (p.attribute_hit_rate) std::printf("  hit_rate=%.2f", *p.attribute_hit_rate);
        std::printf("\n");
      }
      std::cout << format_kl_table(out.report.kl);
      std::printf("report %s\n", out.path.c_str());
      if (out.csv_path) std::printf("csv %s\n", out.csv_path->c_str());
      return 0;
    }

    if (*pipe_cmd) {
      const auto out = run_pipeline(cfg, resume, log_line);
      const auto& c = out.curve;
      std::printf("%-12s", "concept");
      for (std::size_t s = 0; s < c.p.front().size(); ++s) std::printf("  stage%-3zu", s);
      std::printf("\n");
      for (std::size_t i = 0; i < c.concepts.size(); ++i) {
        std::printf("%-12s", c.concepts[i].c_str());
        for (double p : c.p[i]) std::printf("  %-8.4f", p);
        std::printf("\n");
      }
      std::cout << format_kl_table(out.eval.report.kl);
      std::printf("report %s\n", out.eval.path.c_str());
      return 0;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(e.code());
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(ExitCode::kInput);
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(ExitCode::kInput);
  }
  return 0;
}
