#include "tars/trainer.hpp"

#include <chrono>
#include <cmath>

#include "engine.hpp"
#include "parallel.hpp"
#include "tars/errors.hpp"

namespace tars {

void TrainConfig::validate() const {
  if (!(learning_rate > 0)) throw ConfigError("train: learning_rate must be > 0");
  if (!(beta1 > 0 && beta1 < 1) || !(beta2 > 0 && beta2 < 1)) {
    throw ConfigError("train: betas must be in (0, 1)");
  }
  if (!(epsilon > 0)) throw ConfigError("train: epsilon must be > 0");
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (steps < 0) throw ConfigError("train: steps must be >= 0");
  if (!(clip_norm > 0)) throw ConfigError("train: clip_norm must be > 0");
  if (label_smoothing < 0 || label_smoothing >= 1) {
    throw ConfigError("train: label_smoothing must be in [0, 1)");
  }
  if (threads < 1) throw ConfigError("train: threads must be >= 1");
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"learning_rate", c.learning_rate}, {"beta1", c.beta1},
          {"beta2", c.beta2},                 {"epsilon", c.epsilon},
          {"batch_size", c.batch_size},       {"steps", c.steps},
          {"seed", c.seed},                   {"clip_norm", c.clip_norm},
          {"label_smoothing", c.label_smoothing}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  try {
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.epsilon = j.value("epsilon", c.epsilon);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.steps = j.value("steps", c.steps);
    c.seed = j.value("seed", c.seed);
    c.clip_norm = j.value("clip_norm", c.clip_norm);
    c.label_smoothing = j.value("label_smoothing", c.label_smoothing);
    c.threads = j.value("threads", c.threads);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

nlohmann::json to_json(const TrainReport& r) {
  return {{"losses", r.losses},
          {"final_loss", r.losses.empty() ? 0.0 : r.losses.back()},
          {"seconds", r.seconds},
          {"causal_probability", r.causal_probability}};
}

namespace {

template <typename T>
std::vector<std::span<T>> flat(engine::Params<T>& p) {
  std::vector<std::span<T>> out;
  engine::visit(p, [&](const std::string&, T* data, std::size_t n) { out.emplace_back(data, n); });
  return out;
}

template <typename T>
void set_zero(engine::Params<T>& p) {
  for (auto s : flat(p)) std::fill(s.begin(), s.end(), T(0));
}

void check_docs(const ModelConfig& c, const std::vector<CorpusDoc>& corpus) {
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const auto& t = corpus[i].tokens;
    if (t.size() < 2) throw InputError("corpus doc " + std::to_string(i) + " has fewer than 2 tokens");
    validate_tokens(c, std::span<const TokenId>(t).first(t.size() - 1));
    validate_tokens(c, std::span<const TokenId>(t).subspan(1));
  }
}

}  // namespace

ModelWeights train(const ModelWeights& init, const std::vector<CorpusDoc>& corpus,
                   const TrainConfig& cfg, TrainReport* report, const StepCallback& on_step) {
  cfg.validate();
  ModelWeights out = init;
  if (cfg.steps == 0) return out;
  if (corpus.empty()) throw InputError("train: corpus is empty");
  check_docs(init.config, corpus);

  const auto start = std::chrono::steady_clock::now();
  auto params = engine::from_weights<float>(init);
  auto m = engine::zeros_like<float>(init.config);
  auto v = engine::zeros_like<float>(init.config);
  auto total = engine::zeros_like<float>(init.config);
  std::vector<engine::Params<float>> doc_grads(static_cast<std::size_t>(cfg.batch_size),
                                               engine::zeros_like<float>(init.config));
  std::vector<engine::Cache<float>> caches(static_cast<std::size_t>(cfg.threads));
  std::vector<double> doc_loss(static_cast<std::size_t>(cfg.batch_size));

  auto p_flat = flat(params);
  auto m_flat = flat(m);
  auto v_flat = flat(v);
  auto g_flat = flat(total);
  std::vector<std::vector<std::span<float>>> doc_flat;
  for (auto& g : doc_grads) doc_flat.push_back(flat(g));

  Rng rng(cfg.seed);
  std::vector<std::size_t> batch(static_cast<std::size_t>(cfg.batch_size));
  for (int step = 0; step < cfg.steps; ++step) {
    std::size_t n_tokens = 0;
    for (auto& b : batch) {
      b = static_cast<std::size_t>(rng.below(corpus.size()));
      n_tokens += corpus[b].tokens.size() - 1;
    }
    const float weight = 1.0f / static_cast<float>(n_tokens);

    const auto workers = std::min<std::size_t>(static_cast<std::size_t>(cfg.threads), batch.size());
    detail::parallel_for(batch.size(), cfg.threads, [&](std::size_t i) {
      set_zero(doc_grads[i]);
      doc_loss[i] = engine::document_loss(params, corpus[batch[i]].tokens, &doc_grads[i], weight,
                                          static_cast<float>(cfg.label_smoothing),
                                          caches[i % workers]);
    });

    double loss = 0.0;
    for (double l : doc_loss) loss += l;
    loss /= static_cast<double>(n_tokens);
    if (!std::isfinite(loss)) {
      throw TrainingError("training diverged: loss is not finite at step " + std::to_string(step),
                          step);
    }

    double sq = 0.0;
    for (std::size_t t = 0; t < g_flat.size(); ++t) {
      auto g = g_flat[t];
      std::fill(g.begin(), g.end(), 0.0f);
      for (const auto& d : doc_flat) {
        const auto src = d[t];
        for (std::size_t k = 0; k < g.size(); ++k) g[k] += src[k];
      }
      for (float x : g) sq += static_cast<double>(x) * x;
    }
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm)) {
      throw TrainingError("training diverged: gradient is not finite at step " +
                              std::to_string(step), step);
    }
    const double clip = norm > cfg.clip_norm ? cfg.clip_norm / norm : 1.0;

    const double b1 = cfg.beta1, b2 = cfg.beta2;
    const double c1 = 1.0 - std::pow(b1, step + 1);
    const double c2 = 1.0 - std::pow(b2, step + 1);
    const double lr = cfg.learning_rate;
    for (std::size_t t = 0; t < p_flat.size(); ++t) {
      auto p = p_flat[t];
      auto mm = m_flat[t];
      auto vv = v_flat[t];
      const auto g = g_flat[t];
      for (std::size_t k = 0; k < p.size(); ++k) {
        const double gk = g[k] * clip;
        mm[k] = static_cast<float>(b1 * mm[k] + (1 - b1) * gk);
        vv[k] = static_cast<float>(b2 * vv[k] + (1 - b2) * gk * gk);
        const double update = lr * (mm[k] / c1) / (std::sqrt(vv[k] / c2) + cfg.epsilon);
        p[k] = static_cast<float>(p[k] - update);
      }
    }
    if (report) report->losses.push_back(loss);
    if (on_step) on_step(step, loss);
  }

  engine::store(params, out);
  for (const auto& t : tensors(out)) {
    if (!all_finite(t.data)) {
      throw TrainingError("training produced non-finite weights in " + t.name, cfg.steps - 1);
    }
  }
  if (report) {
    report->seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  }
  return out;
}

double document_loss(const ModelWeights& w, std::span<const TokenId> doc) {
  if (doc.size() < 2) throw InputError("document_loss: need at least 2 tokens");
  validate_tokens(w.config, doc.first(doc.size() - 1));
  validate_tokens(w.config, doc.subspan(1));
  const auto p = engine::from_weights<double>(w);
  engine::Cache<double> cache;
  const double sum = engine::document_loss<double>(p, doc, nullptr, 1.0, 0.0, cache);
  return sum / static_cast<double>(doc.size() - 1);
}

GradCheckResult grad_check(const ModelWeights& w, std::span<const TokenId> doc,
                           std::size_t samples, double h, std::uint64_t seed) {
  if (doc.size() < 2) throw InputError("grad_check: need at least 2 tokens");
  validate_tokens(w.config, doc.first(doc.size() - 1));
  validate_tokens(w.config, doc.subspan(1));

  auto p = engine::from_weights<double>(w);
  auto grad = engine::zeros_like<double>(w.config);
  engine::Cache<double> cache;
  const double inv_n = 1.0 / static_cast<double>(doc.size() - 1);
  engine::document_loss<double>(p, doc, &grad, inv_n, 0.0, cache);
  auto loss_at = [&] { return engine::document_loss<double>(p, doc, nullptr, 1.0, 0.0, cache) * inv_n; };

  std::vector<std::string> names;
  engine::visit(p, [&](const std::string& name, double*, std::size_t) { names.push_back(name); });
  auto p_flat = flat(p);
  auto g_flat = flat(grad);
  const std::size_t per_tensor = (samples + names.size() - 1) / names.size();

  // Embedding rows only receive gradient for tokens and positions in the doc,
  // so sampling is restricted to those rows.
  const auto inputs = doc.first(doc.size() - 1);
  const auto d = static_cast<std::size_t>(w.config.d_model);

  GradCheckResult result;
  Rng rng(seed);
  for (std::size_t t = 0; t < names.size(); ++t) {
    auto values = p_flat[t];
    for (std::size_t s = 0; s < per_tensor; ++s) {
      std::size_t idx;
      if (names[t] == "embed.tokens") {
        idx = static_cast<std::size_t>(inputs[rng.below(inputs.size())]) * d + rng.below(d);
      } else if (names[t] == "embed.positions") {
        idx = rng.below(inputs.size()) * d + rng.below(d);
      } else {
        idx = rng.below(values.size());
      }
      const double saved = values[idx];
      values[idx] = saved + h;
      const double up = loss_at();
      values[idx] = saved - h;
      const double down = loss_at();
      values[idx] = saved;
      const double numeric = (up - down) / (2 * h);
      const double analytic = g_flat[t][idx];
      // Relative error with a small absolute floor: entries whose true
      // gradient is ~0 are compared on an absolute scale.
      const double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-6});
      const double err = std::abs(numeric - analytic) / denom;
      if (err >= result.max_relative_error) {
        result.max_relative_error = err;
        result.worst_tensor = names[t];
      }
      ++result.checked;
    }
    result.roles.push_back(names[t]);
  }
  return result;
}

void probe_imprinting(const ModelWeights& w, const CorpusSpec& spec, const Vocab& vocab,
                      TrainReport& report) {
  for (const auto& c : spec.concepts) {
    for (const auto& [lang, cl] : c.languages) {
      const auto prompt = description_prompt(spec, vocab, c.concept_id, lang);
      const auto probs = lm_head_probe(w, forward(w, prompt).final_hidden);
      report.causal_probability[c.concept_id][lang] = probs[static_cast<std::size_t>(vocab.require(cl.target))];
    }
  }
}

}  // namespace tars
