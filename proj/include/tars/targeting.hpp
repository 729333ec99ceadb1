#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tars/model.hpp"

namespace tars {

struct ApproxVector {
  Vector v_approx;  // post-final-norm hidden state at the last prompt token
  double p_max = 0.0;
  TokenId argmax = 0;
};

ApproxVector extract_approx_vector(const ModelWeights& w, std::span<const TokenId> prompt);

struct TargetingSpec {
  TokenId concept_token = 0;
  std::vector<TokenId> prompt;
  // Absolute noise scale. When unset, sigma = sigma_rms_ratio * RMS(v_approx).
  std::optional<double> sigma;
  double sigma_rms_ratio = 0.5;
  double tau = 0.95;
  int batch_size = 450;
  int max_batches = 10000;
  int min_candidates = 100;
  std::uint64_t seed = 0;
  int threads = 1;

  void validate(const ModelConfig& config) const;
};

nlohmann::json to_json(const TargetingSpec& s);
// Reads the numeric knobs only; the prompt and token come from the concept.
void apply_targeting_json(const nlohmann::json& j, TargetingSpec& s);

struct TargetingVector {
  Vector v_target;
  Vector v_approx;
  double sigma = 0.0;           // absolute sigma actually used
  double p_target_before = 0.0;  // p(t_C | v_approx)
  TokenId argmax_before = 0;
  double p_target_after = 0.0;  // p(t_C | v_target)
  std::size_t retained = 0;
  int batches_run = 0;
  double mean_candidate_probability = 0.0;
  double max_probability_seen = 0.0;
  std::vector<Vector> candidates;  // retained noisy vectors, in draw order
  std::vector<std::string> warnings;
  TargetingSpec spec;
};

// v_target may fall below tau by at most this much before refinement is
// declared failed; the mean of a high-probability set can dip under tau.
inline constexpr double kMeanProbabilitySlack = 0.05;

// Gaussian probing of the LM head around v_approx. Candidates are drawn in
// batches from one seeded stream and merged in (batch, index) order, so the
// result is independent of `threads`.
TargetingVector refine_target(const ModelWeights& w, const TargetingSpec& spec,
                              const Vector& v_approx);

// extract_approx_vector followed by refine_target on spec.prompt.
TargetingVector build_targeting_vector(const ModelWeights& w, const TargetingSpec& spec);

void save_targeting_vector(const TargetingVector& t, const std::filesystem::path& path,
                           const nlohmann::json& extra_meta = nlohmann::json::object());
TargetingVector load_targeting_vector(const std::filesystem::path& path);

}  // namespace tars
