#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "tars/errors.hpp"
#include "tars/targeting.hpp"

using namespace tars;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.d_model = 16;
  c.n_layers = 1;
  c.n_heads = 2;
  c.d_ff = 24;
  c.vocab_size = 30;
  c.max_seq_len = 8;
  return c;
}

// Head row `token` is a scaled copy of `u`, so v = u predicts it sharply.
struct Fixture {
  ModelWeights w;
  Vector u;
  TokenId token = 7;
};

Fixture peaked(double gain) {
  Fixture f{init_weights(small_config(), 3), Vector(16), 7};
  Rng rng(8);
  for (std::size_t i = 0; i < 16; ++i) f.u[i] = static_cast<float>(rng.normal());
  for (std::size_t r = 0; r < f.w.head.rows(); ++r)
    for (std::size_t c = 0; c < 16; ++c) f.w.head(r, c) = static_cast<float>(0.1 * rng.normal());
  for (std::size_t c = 0; c < 16; ++c) f.w.head(7, c) = static_cast<float>(gain * f.u[c] / 16.0);
  return f;
}

TargetingSpec spec_for(const Fixture& f) {
  TargetingSpec s;
  s.concept_token = f.token;
  s.prompt = {2, 4};
  s.seed = 21;
  return s;
}

}  // namespace

TEST_CASE("extract_approx_vector: single-token prompt matches forward") {
  const ModelWeights w = init_weights(small_config(), 5);
  const std::vector<TokenId> bos{2};
  const auto a = extract_approx_vector(w, bos);
  CHECK(a.v_approx == forward(w, bos).final_hidden);
  const Vector p = lm_head_probe(w, a.v_approx);
  CHECK(a.argmax == argmax_token(p));
  CHECK(a.p_max == doctest::Approx(p[static_cast<std::size_t>(a.argmax)]));
  CHECK_THROWS_AS(extract_approx_vector(w, std::vector<TokenId>{99}), InputError);
}

TEST_CASE("sigma = 0 on a satisfied probe returns v_approx exactly") {
  const Fixture f = peaked(12.0);
  REQUIRE(lm_head_probe(f.w, f.u)[7] >= 0.95);
  TargetingSpec s = spec_for(f);
  s.sigma = 0.0;
  const auto t = refine_target(f.w, s, f.u);
  CHECK(t.v_target == f.u);
  CHECK(t.retained == 450);
  CHECK(t.batches_run == 1);
  CHECK(t.warnings.empty());
}

TEST_CASE("retention rule and mean match an independent replay") {
  const Fixture f = peaked(9.0);
  TargetingSpec s = spec_for(f);
  s.batch_size = 50;
  s.min_candidates = 120;
  const auto t = refine_target(f.w, s, f.u);
  CHECK(t.sigma == doctest::Approx(0.5 * rms(f.u)));

  // Replay the draws with the public sampler and apply Eqs. by hand.
  Rng rng(s.seed);
  std::vector<double> sum(16, 0.0);
  std::size_t kept = 0;
  int batches = 0;
  while (kept < 120) {
    ++batches;
    for (int i = 0; i < 50; ++i) {
      Vector v = gaussian_sample(rng, 16, t.sigma);
      for (std::size_t k = 0; k < 16; ++k) v[k] += f.u[k];
      if (lm_head_probe(f.w, v)[7] < s.tau) continue;
      ++kept;
      for (std::size_t k = 0; k < 16; ++k) sum[k] += v[k];
    }
  }
  CHECK(t.retained == kept);
  CHECK(t.batches_run == batches);
  for (std::size_t k = 0; k < 16; ++k) CHECK(std::abs(t.v_target[k] - sum[k] / kept) < 1e-6);
}

TEST_CASE("every retained candidate re-probes above tau") {
  const Fixture f = peaked(8.0);
  const auto t = refine_target(f.w, spec_for(f), f.u);
  CHECK(t.retained >= 100);
  CHECK(t.candidates.size() == t.retained);
  Rng pick(1);
  for (int i = 0; i < 100; ++i) {
    const auto& c = t.candidates[pick.below(t.candidates.size())];
    CHECK(lm_head_probe(f.w, c)[7] >= 0.95);
  }
  CHECK(t.p_target_after >= 0.95 - kMeanProbabilitySlack);
  CHECK(t.mean_candidate_probability >= 0.95);
}

TEST_CASE("refinement is deterministic, thread-independent and leaves weights alone") {
  const Fixture f = peaked(8.0);
  const auto before = checkpoint_hash(f.w);
  TargetingSpec s = spec_for(f);
  const auto a = refine_target(f.w, s, f.u);
  const auto b = refine_target(f.w, s, f.u);
  s.threads = 3;
  const auto c = refine_target(f.w, s, f.u);
  CHECK(a.v_target == b.v_target);
  CHECK(a.v_target == c.v_target);
  CHECK(a.retained == c.retained);
  CHECK(checkpoint_hash(f.w) == before);
  s.seed = 22;
  s.threads = 1;
  CHECK(!(refine_target(f.w, s, f.u).v_target == a.v_target));
}

TEST_CASE("low starting probability warns but can still refine") {
  const Fixture f = peaked(4.0);
  const double p0 = lm_head_probe(f.w, f.u)[7];
  REQUIRE(p0 < 0.95);
  TargetingSpec s = spec_for(f);
  s.sigma_rms_ratio = 1.0;
  s.max_batches = 2000;
  const auto t = refine_target(f.w, s, f.u);
  CHECK(t.p_target_before == doctest::Approx(p0));
  CHECK(!t.warnings.empty());
  CHECK(t.retained >= 100);
  CHECK(t.p_target_after > p0);
}

TEST_CASE("no candidates: refinement error with diagnostics") {
  const Fixture f = peaked(1.0);
  TargetingSpec s = spec_for(f);
  s.max_batches = 3;
  try {
    refine_target(f.w, s, f.u);
    FAIL("expected RefinementError");
  } catch (const RefinementError& e) {
    CHECK(e.code() == ExitCode::kRefinement);
    CHECK(e.max_probability() > 0.0);
    CHECK(e.max_probability() < 0.95);
    CHECK(std::string(e.what()).find("lower sigma or tau") != std::string::npos);
  }
}

TEST_CASE("a short candidate set is kept with a warning") {
  const Fixture f = peaked(4.0);
  TargetingSpec s = spec_for(f);
  s.sigma_rms_ratio = 1.0;
  s.max_batches = 1;
  s.batch_size = 100;
  const auto t = refine_target(f.w, s, f.u);
  REQUIRE(t.retained > 0);
  REQUIRE(t.retained < 100);
  CHECK(std::ranges::any_of(t.warnings, [](const std::string& m) {
    return m.find("requested candidates") != std::string::npos;
  }));
}

TEST_CASE("spec validation") {
  const Fixture f = peaked(8.0);
  TargetingSpec s = spec_for(f);
  s.tau = 0;
  CHECK_THROWS_AS(refine_target(f.w, s, f.u), ConfigError);
  s = spec_for(f);
  s.concept_token = 30;
  CHECK_THROWS_AS(refine_target(f.w, s, f.u), ConfigError);
  s = spec_for(f);
  s.sigma = -1.0;
  CHECK_THROWS_AS(refine_target(f.w, s, f.u), DomainError);
  s = spec_for(f);
  s.batch_size = 0;
  CHECK_THROWS_AS(refine_target(f.w, s, f.u), ConfigError);
  CHECK_THROWS_AS(refine_target(f.w, spec_for(f), Vector(5)), DimensionError);
}

TEST_CASE("targeting vector file round trip") {
  const Fixture f = peaked(8.0);
  const auto t = refine_target(f.w, spec_for(f), f.u);
  const auto path = std::filesystem::temp_directory_path() / "tars_test_target.tars";
  save_targeting_vector(t, path, {{"concept_id", "demo"}});
  const auto back = load_targeting_vector(path);
  CHECK(back.v_target == t.v_target);
  CHECK(back.v_approx == t.v_approx);
  CHECK(back.retained == t.retained);
  CHECK(back.sigma == t.sigma);
  CHECK(back.spec.tau == t.spec.tau);
  CHECK(back.spec.seed == t.spec.seed);
  CHECK(back.candidates.size() == t.candidates.size());
  std::filesystem::remove(path);
}

TEST_CASE("build_targeting_vector runs steps 1 and 2 on the prompt") {
  const Fixture f = peaked(8.0);
  TargetingSpec s = spec_for(f);
  s.concept_token = extract_approx_vector(f.w, s.prompt).argmax;
  s.tau = 0.01;
  const auto t = build_targeting_vector(f.w, s);
  CHECK(t.v_approx == forward(f.w, s.prompt).final_hidden);
}
