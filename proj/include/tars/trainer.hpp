#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tars/corpus.hpp"
#include "tars/model.hpp"

namespace tars {

struct TrainConfig {
  double learning_rate = 3e-3;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double epsilon = 1e-8;
  int batch_size = 16;
  int steps = 1500;
  std::uint64_t seed = 0;
  double clip_norm = 1.0;
  // Soft targets (1 - s + s/V on the true token, s/V elsewhere). Zero is plain
  // cross-entropy.
  double label_smoothing = 0.0;
  int threads = 1;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);

struct TrainReport {
  std::vector<double> losses;  // mean per-token loss of each step's batch
  double seconds = 0.0;
  // concept -> language -> p(target | description prompt), filled by callers
  // that know the corpus spec (see probe_imprinting).
  std::map<std::string, std::map<std::string, double>> causal_probability;
};

nlohmann::json to_json(const TrainReport& r);

// Called after each step with (step, loss); used for progress logging.
using StepCallback = std::function<void(int, double)>;

// Adam with global-norm clipping on the mean next-token loss of a minibatch
// drawn uniformly with replacement. Per-document gradients are summed in
// document order, so results do not depend on `threads`.
ModelWeights train(const ModelWeights& init, const std::vector<CorpusDoc>& corpus,
                   const TrainConfig& cfg, TrainReport* report = nullptr,
                   const StepCallback& on_step = {});

// Mean per-token cross-entropy (no smoothing) of `doc`.
double document_loss(const ModelWeights& w, std::span<const TokenId> doc);

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t checked = 0;
  std::string worst_tensor;
  std::vector<std::string> roles;  // tensor names touched
};

// Central differences with step h in f64 on at least `samples` scalars, drawn
// from every tensor, against the analytic backward pass, also in f64.
GradCheckResult grad_check(const ModelWeights& w, std::span<const TokenId> doc,
                           std::size_t samples = 240, double h = 1e-3, std::uint64_t seed = 0);

void probe_imprinting(const ModelWeights& w, const CorpusSpec& spec, const Vocab& vocab,
                      TrainReport& report);

}  // namespace tars
