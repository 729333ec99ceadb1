#include "tars/targeting.hpp"

#include <algorithm>
#include <sstream>

#include "parallel.hpp"
#include "tars/container.hpp"
#include "tars/errors.hpp"

namespace tars {

ApproxVector extract_approx_vector(const ModelWeights& w, std::span<const TokenId> prompt) {
  ApproxVector out;
  out.v_approx = forward(w, prompt).final_hidden;
  const Vector probs = lm_head_probe(w, out.v_approx);
  out.argmax = argmax_token(probs);
  out.p_max = probs[static_cast<std::size_t>(out.argmax)];
  return out;
}

void TargetingSpec::validate(const ModelConfig& config) const {
  if (concept_token < 0 || concept_token >= config.vocab_size) {
    throw ConfigError("targeting: concept token " + std::to_string(concept_token) +
                      " outside the vocabulary");
  }
  if (sigma && !(*sigma >= 0)) throw DomainError("targeting: sigma must be >= 0");
  if (!(sigma_rms_ratio >= 0)) throw DomainError("targeting: sigma_rms_ratio must be >= 0");
  if (!(tau > 0 && tau <= 1)) throw ConfigError("targeting: tau must be in (0, 1]");
  if (batch_size < 1 || max_batches < 1 || min_candidates < 1) {
    throw ConfigError("targeting: batch_size, max_batches and min_candidates must be >= 1");
  }
  if (threads < 1) throw ConfigError("targeting: threads must be >= 1");
}

nlohmann::json to_json(const TargetingSpec& s) {
  nlohmann::json j = {{"concept_token", s.concept_token},
                      {"prompt", s.prompt},
                      {"sigma_rms_ratio", s.sigma_rms_ratio},
                      {"tau", s.tau},
                      {"batch_size", s.batch_size},
                      {"max_batches", s.max_batches},
                      {"min_candidates", s.min_candidates},
                      {"seed", s.seed}};
  j["sigma"] = s.sigma ? nlohmann::json(*s.sigma) : nlohmann::json(nullptr);
  return j;
}

void apply_targeting_json(const nlohmann::json& j, TargetingSpec& s) {
  try {
    if (j.contains("sigma")) {
      s.sigma = j.at("sigma").is_null() ? std::nullopt : std::optional(j.at("sigma").get<double>());
    }
    s.sigma_rms_ratio = j.value("sigma_rms_ratio", s.sigma_rms_ratio);
    s.tau = j.value("tau", s.tau);
    s.batch_size = j.value("batch_size", s.batch_size);
    s.max_batches = j.value("max_batches", s.max_batches);
    s.min_candidates = j.value("min_candidates", s.min_candidates);
    s.seed = j.value("seed", s.seed);
    s.threads = j.value("threads", s.threads);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("targeting spec: ") + e.what());
  }
}

TargetingVector refine_target(const ModelWeights& w, const TargetingSpec& spec,
                              const Vector& v_approx) {
  spec.validate(w.config);
  const auto d = static_cast<std::size_t>(w.config.d_model);
  if (v_approx.dim() != d) throw DimensionError("refine_target: v_approx has wrong dimension");
  const auto token = static_cast<std::size_t>(spec.concept_token);

  TargetingVector out;
  out.spec = spec;
  out.v_approx = v_approx;
  out.sigma = spec.sigma ? *spec.sigma : spec.sigma_rms_ratio * rms(v_approx);
  {
    const Vector probs = lm_head_probe(w, v_approx);
    out.argmax_before = argmax_token(probs);
    out.p_target_before = probs[token];
  }
  if (out.argmax_before != spec.concept_token) {
    out.warnings.push_back("argmax of v_approx is token " + std::to_string(out.argmax_before) +
                           ", not the concept token");
  }
  if (out.p_target_before < spec.tau) {
    std::ostringstream msg;
    msg << "p(target | v_approx) = " << out.p_target_before << " is below tau = " << spec.tau;
    out.warnings.push_back(msg.str());
  }

  Rng rng(spec.seed);
  const auto batch = static_cast<std::size_t>(spec.batch_size);
  std::vector<Vector> noisy(batch);
  std::vector<double> prob(batch);
  std::vector<double> sum(d, 0.0);
  double prob_sum = 0.0;

  for (int b = 0; b < spec.max_batches; ++b) {
    // Draws are sequential so the stream does not depend on thread count.
    for (auto& v : noisy) {
      Vector eps = gaussian_sample(rng, d, out.sigma);
      for (std::size_t k = 0; k < d; ++k) eps[k] += v_approx[k];
      v = std::move(eps);
    }
    detail::parallel_for(batch, spec.threads, [&](std::size_t i) {
      prob[i] = lm_head_probe(w, noisy[i])[token];
    });
    for (std::size_t i = 0; i < batch; ++i) {
      out.max_probability_seen = std::max(out.max_probability_seen, prob[i]);
      if (prob[i] < spec.tau) continue;
      for (std::size_t k = 0; k < d; ++k) sum[k] += noisy[i][k];
      prob_sum += prob[i];
      out.candidates.push_back(noisy[i]);
    }
    out.batches_run = b + 1;
    if (out.candidates.size() >= static_cast<std::size_t>(spec.min_candidates)) break;
  }

  out.retained = out.candidates.size();
  if (out.retained == 0) {
    std::ostringstream msg;
    msg << "refinement retained no candidates after " << out.batches_run << " batches (max p seen "
        << out.max_probability_seen << "); lower sigma or tau";
    throw RefinementError(msg.str(), out.max_probability_seen);
  }
  if (out.retained < static_cast<std::size_t>(spec.min_candidates)) {
    out.warnings.push_back("only " + std::to_string(out.retained) + " of " +
                           std::to_string(spec.min_candidates) + " requested candidates retained");
  }

  std::vector<float> mean(d);
  for (std::size_t k = 0; k < d; ++k) {
    mean[k] = static_cast<float>(sum[k] / static_cast<double>(out.retained));
  }
  out.v_target = Vector(std::move(mean));
  out.mean_candidate_probability = prob_sum / static_cast<double>(out.retained);
  if (l2_norm(out.v_target) == 0.0) {
    throw RefinementError("refinement produced a zero targeting vector", out.max_probability_seen);
  }
  out.p_target_after = lm_head_probe(w, out.v_target)[token];
  if (out.p_target_after < spec.tau - kMeanProbabilitySlack) {
    std::ostringstream msg;
    msg << "p(target | v_target) = " << out.p_target_after << " is below tau - "
        << kMeanProbabilitySlack << "; lower sigma";
    throw RefinementError(msg.str(), out.max_probability_seen);
  }
  return out;
}

TargetingVector build_targeting_vector(const ModelWeights& w, const TargetingSpec& spec) {
  const ApproxVector approx = extract_approx_vector(w, spec.prompt);
  return refine_target(w, spec, approx.v_approx);
}

void save_targeting_vector(const TargetingVector& t, const std::filesystem::path& path,
                           const nlohmann::json& extra_meta) {
  container::Container c;
  c.meta = {{"kind", "targeting_vector"},
            {"spec", to_json(t.spec)},
            {"sigma", t.sigma},
            {"p_target_before", t.p_target_before},
            {"argmax_before", t.argmax_before},
            {"p_target_after", t.p_target_after},
            {"retained", t.retained},
            {"batches_run", t.batches_run},
            {"mean_candidate_probability", t.mean_candidate_probability},
            {"max_probability_seen", t.max_probability_seen},
            {"rng", std::string(Rng::kAlgorithm)},
            {"warnings", t.warnings}};
  for (const auto& [k, v] : extra_meta.items()) c.meta[k] = v;
  const auto d = t.v_target.dim();
  c.tensors.push_back({"v_target", {d}, t.v_target.values()});
  c.tensors.push_back({"v_approx", {d}, t.v_approx.values()});
  std::vector<float> cand;
  cand.reserve(t.candidates.size() * d);
  for (const auto& v : t.candidates) cand.insert(cand.end(), v.begin(), v.end());
  c.tensors.push_back({"candidates", {t.candidates.size(), d}, std::move(cand)});
  container::write_file(path, container::serialize(c));
}

TargetingVector load_targeting_vector(const std::filesystem::path& path) {
  const auto c = container::parse(container::read_file(path));
  if (c.meta.value("kind", "") != "targeting_vector") {
    throw InputError(path.string() + " is not a targeting-vector file");
  }
  TargetingVector t;
  try {
    const auto& m = c.meta;
    const auto& s = m.at("spec");
    t.spec.concept_token = s.at("concept_token").get<TokenId>();
    t.spec.prompt = s.at("prompt").get<std::vector<TokenId>>();
    apply_targeting_json(s, t.spec);
    t.sigma = m.at("sigma").get<double>();
    t.p_target_before = m.at("p_target_before").get<double>();
    t.argmax_before = m.at("argmax_before").get<TokenId>();
    t.p_target_after = m.at("p_target_after").get<double>();
    t.retained = m.at("retained").get<std::size_t>();
    t.batches_run = m.at("batches_run").get<int>();
    t.mean_candidate_probability = m.at("mean_candidate_probability").get<double>();
    t.max_probability_seen = m.at("max_probability_seen").get<double>();
    t.warnings = m.value("warnings", std::vector<std::string>{});
  } catch (const nlohmann::json::exception& e) {
    throw InputError(path.string() + ": bad targeting metadata: " + e.what());
  }
  t.v_target = Vector(c.get("v_target").data);
  t.v_approx = Vector(c.get("v_approx").data);
  const auto& cand = c.get("candidates");
  const auto d = t.v_target.dim();
  for (std::size_t i = 0; d > 0 && i < cand.data.size() / d; ++i) {
    t.candidates.emplace_back(std::vector<float>(cand.data.begin() + static_cast<long>(i * d),
                                                 cand.data.begin() + static_cast<long>((i + 1) * d)));
  }
  return t;
}

}  // namespace tars
