#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "fixtures.hpp"
#include "tars/errors.hpp"
#include "tars/eval.hpp"

using namespace tars;

namespace {

struct World {
  CorpusSpec spec = testing::tiny_spec();
  Vocab vocab = spec.build_vocab();
  ModelWeights w;

  explicit World(std::uint64_t seed) {
    ModelConfig c;
    c.d_model = 32;
    c.n_layers = 2;
    c.n_heads = 2;
    c.d_ff = 48;
    c.vocab_size = static_cast<int>(vocab.size());
    c.max_seq_len = 64;
    w = init_weights(c, seed);
    Rng rng(seed + 1);
    for (auto& t : tensors(w))
      for (float& x : t.data) x += static_cast<float>(0.3 * rng.normal());
  }
};

std::vector<CorpusDoc> some_docs(const World& world, int n) {
  CorpusOptions o;
  return retain_docs(world.spec, world.vocab, o, n, 5);
}

// Independent scalar KL of the next-token distributions after doc[0..pos],
// from the public forward pass in long double.
double kl_oracle(const ModelWeights& a, const ModelWeights& b, const std::vector<TokenId>& doc,
                 std::size_t pos) {
  const std::vector<TokenId> prefix(doc.begin(), doc.begin() + static_cast<long>(pos) + 1);
  const auto ta = forward(a, prefix);
  const auto tb = forward(b, prefix);
  const auto la = ta.logits.row(pos);
  const auto lb = tb.logits.row(pos);
  auto logsoft = [](std::span<const float> z) {
    long double m = *std::max_element(z.begin(), z.end());
    long double s = 0;
    for (float x : z) s += std::exp(static_cast<long double>(x) - m);
    std::vector<long double> out;
    for (float x : z) out.push_back(x - m - std::log(s));
    return out;
  };
  const auto pa = logsoft(la);
  const auto pb = logsoft(lb);
  long double kl = 0;
  for (std::size_t i = 0; i < pa.size(); ++i) kl += std::exp(pa[i]) * (pa[i] - pb[i]);
  return static_cast<double>(kl);
}

}  // namespace

TEST_CASE("percentile: linear interpolation between closest ranks") {
  CHECK(percentile({1, 2, 3, 4, 5}, 0.5) == 3.0);
  CHECK(percentile({5, 1, 4, 2, 3}, 0.5) == 3.0);
  CHECK(percentile({1, 2, 3, 4}, 0.5) == 2.5);
  CHECK(percentile({0, 10}, 0.05) == doctest::Approx(0.5));
  CHECK(percentile({0, 10}, 0.95) == doctest::Approx(9.5));
  CHECK(percentile({7}, 0.3) == 7.0);
  CHECK(percentile({1, 2, 3}, 0.0) == 1.0);
  CHECK(percentile({1, 2, 3}, 1.0) == 3.0);
  CHECK_THROWS(percentile({}, 0.5));
}

TEST_CASE("KL of a model against itself is zero everywhere") {
  const World world(1);
  const auto k = kl_divergence(world.w, world.w, some_docs(world, 6), "retain");
  REQUIRE(!k.values.empty());
  for (double v : k.values) CHECK(std::abs(v) <= 1e-9);
  CHECK(std::abs(k.median) <= 1e-9);
  CHECK(k.label == "retain");
}

TEST_CASE("KL matches an independent oracle and is non-negative") {
  const World a(1), b(2);
  const auto docs = some_docs(a, 3);
  const auto k = kl_divergence(a.w, b.w, docs, "x");
  REQUIRE(k.values.size() == k.doc_index.size());
  for (double v : k.values) CHECK(v >= 0.0);
  CHECK(k.p05 <= k.median);
  CHECK(k.median <= k.p95);
  for (std::size_t i = 0; i < k.values.size(); i += 7) {
    const auto& doc = docs[k.doc_index[i]].tokens;
    const double expect = kl_oracle(a.w, b.w, doc, k.position[i]);
    CHECK(std::abs(k.values[i] - expect) <= 1e-5 * std::max(1.0, expect));
  }
  // PAD and BOS positions are excluded.
  for (std::size_t i = 0; i < k.values.size(); ++i) {
    const TokenId t = docs[k.doc_index[i]].tokens[k.position[i]];
    CHECK(t != kPad);
    CHECK(t != kBos);
    CHECK(k.position[i] >= 1);
  }
}

TEST_CASE("KL is deterministic across thread counts; config mismatch is a usage error") {
  const World a(1), b(2);
  const auto docs = some_docs(a, 4);
  const auto k1 = kl_divergence(a.w, b.w, docs, "x", 1);
  const auto k3 = kl_divergence(a.w, b.w, docs, "x", 3);
  CHECK(k1.values == k3.values);
  CHECK(k1.median == k3.median);

  ModelConfig c = a.w.config;
  c.d_ff = 40;
  CHECK_THROWS_AS(kl_divergence(a.w, init_weights(c, 1), docs, "x"), UsageError);
  CHECK_THROWS_AS(kl_divergence(a.w, a.w, {}, "x"), InputError);
}

TEST_CASE("KL CSV and table output") {
  const World a(1), b(2);
  const std::vector<KlSummary> ks{kl_divergence(a.w, b.w, some_docs(a, 2), "retain")};
  const auto path = std::filesystem::temp_directory_path() / "tars_test_kl.csv";
  write_kl_csv(ks, path);
  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  CHECK(header.find("kl") != std::string::npos);
  std::size_t lines = 0;
  for (std::string line; std::getline(in, line);) ++lines;
  CHECK(lines == ks[0].values.size());
  std::filesystem::remove(path);
  CHECK(format_kl_table(ks).find("retain") != std::string::npos);
}

TEST_CASE("causal probe: probability, top-5 and seeded completions") {
  const World world(3);
  ProbeOptions o;
  o.seed = 4;
  const auto r = causal_probe(world.w, world.spec, world.vocab, "holmsby", "en", o);
  CHECK(r.direction == Direction::kCausal);
  CHECK(r.p_target >= 0.0);
  CHECK(r.p_target <= 1.0);
  REQUIRE(r.top5.size() == 5);
  for (std::size_t i = 1; i < 5; ++i) CHECK(r.top5[i - 1].second >= r.top5[i].second);
  CHECK(r.completions.size() == 3);

  // p_target agrees with the forward pass on the description prompt.
  const auto prompt = description_prompt(world.spec, world.vocab, "holmsby", "en");
  const auto trace = forward(world.w, prompt);
  const Vector p = softmax(trace.logits.row(prompt.size() - 1));
  const TokenId target = world.vocab.id(world.spec.concept_spec("holmsby").in("en").target);
  CHECK(r.p_target == doctest::Approx(p[static_cast<std::size_t>(target)]).epsilon(1e-6));
  CHECK(causal_probability(world.w, world.spec, world.vocab, "holmsby", "en") ==
        doctest::Approx(r.p_target).epsilon(1e-9));

  const auto again = causal_probe(world.w, world.spec, world.vocab, "holmsby", "en", o);
  CHECK(again.completions == r.completions);
  CHECK_THROWS_AS(causal_probe(world.w, world.spec, world.vocab, "nobody", "en", o), ConfigError);
}

TEST_CASE("reverse probe: greedy single sample is deterministic, hit rate in range") {
  const World world(5);
  ProbeOptions o;
  o.n_samples = 1;
  const auto a = reverse_probe(world.w, world.spec, world.vocab, "barkle", "xx", o);
  o.seed = 99;
  const auto b = reverse_probe(world.w, world.spec, world.vocab, "barkle", "xx", o);
  REQUIRE(a.completions.size() == 1);
  CHECK(a.completions == b.completions);
  REQUIRE(a.attribute_hit_rate);
  CHECK(*a.attribute_hit_rate >= 0.0);
  CHECK(*a.attribute_hit_rate <= 1.0);

  // Hit rate recomputed by hand from the completions.
  const auto& attrs = world.spec.concept_spec("barkle").in("xx").attributes;
  std::size_t hits = 0;
  for (const auto& word : attrs) {
    const TokenId id = world.vocab.id(word);
    for (const auto& c : a.completions)
      if (std::ranges::find(c, id) != c.end()) {
        ++hits;
        break;
      }
  }
  CHECK(*a.attribute_hit_rate == doctest::Approx(static_cast<double>(hits) / attrs.size()));
  o.n_samples = 0;
  CHECK_THROWS(reverse_probe(world.w, world.spec, world.vocab, "barkle", "xx", o));
}

TEST_CASE("probes are unaffected by building targets and scans") {
  const World world(6);
  const double before = causal_probability(world.w, world.spec, world.vocab, "barkle", "en");
  TargetingSpec knobs;
  knobs.tau = 1e-6;
  knobs.min_candidates = 10;
  knobs.batch_size = 10;
  const auto s = make_targeting_spec(world.spec, world.vocab, "barkle", "en", knobs);
  const auto t = build_targeting_vector(world.w, s);
  (void)scan(world.w, t.v_target);
  CHECK(causal_probability(world.w, world.spec, world.vocab, "barkle", "en") == before);
}

TEST_CASE("modular curve: stage 0 is the base and one stage matches a manual edit") {
  const World world(7);
  TargetingSpec knobs;
  knobs.tau = 1e-6;
  knobs.min_candidates = 10;
  knobs.batch_size = 10;
  knobs.seed = 3;
  std::vector<ConceptPlan> plan;
  for (const char* id : {"holmsby", "barkle"}) {
    ConceptPlan p;
    p.concept_id = id;
    p.language = "en";
    p.targeting = make_targeting_spec(world.spec, world.vocab, id, "en", knobs);
    p.selector.top_k = 2;
    plan.push_back(p);
  }
  const auto curve = modular_curve(world.w, world.spec, world.vocab, plan);
  REQUIRE(curve.p.size() == 2);
  REQUIRE(curve.p[0].size() == 3);
  CHECK(curve.p[0][0] == causal_probability(world.w, world.spec, world.vocab, "holmsby", "en"));
  CHECK(curve.p[1][0] == causal_probability(world.w, world.spec, world.vocab, "barkle", "en"));
  CHECK(curve.stages.size() == 2);

  // A single-concept pipeline is target + scan + edit + probe.
  const auto one = modular_curve(world.w, world.spec, world.vocab, {plan[0]});
  ModelWeights manual = world.w;
  const auto t = build_targeting_vector(world.w, plan[0].targeting);
  const auto hits = select_candidates(scan(world.w, t.v_target), std::nullopt, 2);
  apply_edits(manual, hits, t.v_target, 1.0, "holmsby", std::nullopt, 2);
  CHECK(one.final_weights == manual);
  CHECK(one.p[0][1] == causal_probability(manual, world.spec, world.vocab, "holmsby", "en"));
  CHECK(curve.stages[0].record.hash_after == checkpoint_hash(manual));
}

TEST_CASE("sensitivity sweep edits from the unedited model for each k") {
  const World world(8);
  TargetingSpec knobs;
  knobs.tau = 1e-6;
  knobs.min_candidates = 10;
  knobs.batch_size = 10;
  const auto t = build_targeting_vector(
      world.w, make_targeting_spec(world.spec, world.vocab, "holmsby", "en", knobs));
  const auto sweep = sensitivity_sweep(world.w, world.spec, world.vocab, "holmsby", "en", t, 3, 0.05);
  REQUIRE(sweep.p_by_k.size() == 3);
  const auto r = scan(world.w, t.v_target);
  for (int k = 1; k <= 3; ++k) {
    ModelWeights e = world.w;
    apply_edits(e, select_candidates(r, std::nullopt, k), t.v_target, 1.0, "x", std::nullopt, k);
    CHECK(sweep.p_by_k[k - 1] == causal_probability(e, world.spec, world.vocab, "holmsby", "en"));
  }
  if (sweep.minimal_k) {
    CHECK(sweep.p_by_k[*sweep.minimal_k - 1] <= 0.05);
    for (int k = 1; k < *sweep.minimal_k; ++k) CHECK(sweep.p_by_k[k - 1] > 0.05);
  } else {
    for (double p : sweep.p_by_k) CHECK(p > 0.05);
  }
  // Huge threshold: k = 1 already qualifies.
  CHECK(sensitivity_sweep(world.w, world.spec, world.vocab, "holmsby", "en", t, 1, 1.0).minimal_k == 1);
}

TEST_CASE("evaluate: hashes, probe coverage and KL labels") {
  const World world(9);
  ModelWeights edited = world.w;
  TargetingSpec knobs;
  knobs.tau = 1e-6;
  knobs.min_candidates = 10;
  knobs.batch_size = 10;
  const auto t = build_targeting_vector(
      world.w, make_targeting_spec(world.spec, world.vocab, "barkle", "en", knobs));
  apply_edits(edited, select_candidates(scan(world.w, t.v_target), std::nullopt, 3), t.v_target, 1.0,
              "barkle", std::nullopt, 3);
  EvalOptions o;
  o.retain_docs_per_language = 3;
  o.concept_docs_per_language = 2;
  o.probe.n_samples = 1;
  o.probe.completion_length = 6;
  const auto r = evaluate(world.w, edited, world.spec, world.vocab, CorpusOptions{}, o);
  CHECK(r.base_hash != r.edited_hash);
  // 2 concepts x 2 languages x 2 directions x 2 models
  CHECK(r.probes.size() == 16);
  CHECK(!r.kl.empty());
  for (const auto& k : r.kl) {
    for (double v : k.values) CHECK(v >= 0.0);
  }
  const auto j = to_json(r, world.vocab);
  CHECK(j.contains("probes"));
  CHECK(j.contains("kl"));

  const auto same = evaluate(world.w, world.w, world.spec, world.vocab, CorpusOptions{}, o);
  CHECK(same.base_hash == same.edited_hash);
  for (const auto& k : same.kl) CHECK(std::abs(k.median) <= 1e-9);
}
