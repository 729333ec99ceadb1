#include "tars/model.hpp"

#include <algorithm>
#include <cstdio>

#include <nlohmann/json.hpp>

#include "engine.hpp"
#include "tars/container.hpp"
#include "tars/errors.hpp"

namespace tars {

void ModelConfig::validate() const {
  auto positive = [](int v, const char* name) {
    if (v < 1) throw ConfigError(std::string("model config: ") + name + " must be >= 1");
  };
  positive(d_model, "d_model");
  positive(n_heads, "n_heads");
  positive(d_ff, "d_ff");
  positive(vocab_size, "vocab_size");
  positive(max_seq_len, "max_seq_len");
  if (n_layers < 0) throw ConfigError("model config: n_layers must be >= 0");
  if (d_model % n_heads != 0) {
    throw ConfigError("model config: n_heads must divide d_model");
  }
}

nlohmann::json to_json(const ModelConfig& c) {
  return {{"d_model", c.d_model},     {"n_layers", c.n_layers},
          {"n_heads", c.n_heads},     {"d_ff", c.d_ff},
          {"vocab_size", c.vocab_size}, {"max_seq_len", c.max_seq_len},
          {"lm_head_bias", c.lm_head_bias}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("model config must be a JSON object");
  ModelConfig c;
  try {
    c.d_model = j.value("d_model", c.d_model);
    c.n_layers = j.value("n_layers", c.n_layers);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.d_ff = j.value("d_ff", c.d_ff);
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
    c.lm_head_bias = j.value("lm_head_bias", c.lm_head_bias);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

const char* to_string(ProjectionKind kind) {
  return kind == ProjectionKind::kGate ? "gate" : "up";
}

ProjectionKind projection_kind_from_string(const std::string& name) {
  if (name == "gate") return ProjectionKind::kGate;
  if (name == "up") return ProjectionKind::kUp;
  throw InputError("unknown projection kind '" + name + "'");
}

namespace {

template <typename W, typename Ref, typename Mat, typename Vec>
std::vector<Ref> collect(W& w) {
  std::vector<Ref> out;
  auto mat = [&](std::string name, Mat& m) {
    out.push_back({std::move(name), {m.rows(), m.cols()}, m.mutable_view()});
  };
  auto vec = [&](std::string name, Vec& v) {
    out.push_back({std::move(name), {v.dim()}, v.mutable_view()});
  };
  mat("embed.tokens", w.token_embedding);
  mat("embed.positions", w.position_embedding);
  for (std::size_t i = 0; i < w.layers.size(); ++i) {
    auto& l = w.layers[i];
    const std::string pre = "layers." + std::to_string(i) + ".";
    vec(pre + "norm.attn", l.norm_attn);
    mat(pre + "attn.q", l.attn_q);
    mat(pre + "attn.k", l.attn_k);
    mat(pre + "attn.v", l.attn_v);
    mat(pre + "attn.o", l.attn_o);
    vec(pre + "norm.ffn", l.norm_ffn);
    mat(pre + "ffn.gate", l.ffn_gate);
    mat(pre + "ffn.up", l.ffn_up);
    mat(pre + "ffn.down", l.ffn_down);
  }
  vec("norm.final", w.norm_final);
  mat("head.weight", w.head);
  if (w.head_bias) vec("head.bias", *w.head_bias);
  return out;
}

ModelWeights allocate(const ModelConfig& c) {
  c.validate();
  const auto d = static_cast<std::size_t>(c.d_model);
  const auto ff = static_cast<std::size_t>(c.d_ff);
  ModelWeights w;
  w.config = c;
  w.token_embedding = Matrix(static_cast<std::size_t>(c.vocab_size), d);
  w.position_embedding = Matrix(static_cast<std::size_t>(c.max_seq_len), d);
  w.layers.resize(static_cast<std::size_t>(c.n_layers));
  for (auto& l : w.layers) {
    l.norm_attn = Vector(d, 1.0f);
    l.attn_q = Matrix(d, d);
    l.attn_k = Matrix(d, d);
    l.attn_v = Matrix(d, d);
    l.attn_o = Matrix(d, d);
    l.norm_ffn = Vector(d, 1.0f);
    l.ffn_gate = Matrix(ff, d);
    l.ffn_up = Matrix(ff, d);
    l.ffn_down = Matrix(d, ff);
  }
  w.norm_final = Vector(d, 1.0f);
  w.head = Matrix(static_cast<std::size_t>(c.vocab_size), d);
  if (c.lm_head_bias) w.head_bias = Vector(static_cast<std::size_t>(c.vocab_size), 0.0f);
  return w;
}

// Matrices are the 2-D tensors; norm scales and the bias keep their init.
bool is_matrix(const std::vector<std::size_t>& shape) { return shape.size() == 2; }

}  // namespace

std::vector<TensorRef> tensors(ModelWeights& w) {
  return collect<ModelWeights, TensorRef, Matrix, Vector>(w);
}

std::vector<ConstTensorRef> tensors(const ModelWeights& w) {
  auto refs = tensors(const_cast<ModelWeights&>(w));
  std::vector<ConstTensorRef> out;
  out.reserve(refs.size());
  for (auto& r : refs) out.push_back({std::move(r.name), std::move(r.shape), r.data});
  return out;
}

ModelWeights init_weights(const ModelConfig& config, std::uint64_t seed) {
  ModelWeights w = allocate(config);
  Rng rng(seed);
  for (auto& t : tensors(w)) {
    if (!is_matrix(t.shape)) continue;
    for (float& x : t.data) x = static_cast<float>(0.02 * rng.normal());
  }
  return w;
}

void validate_tokens(const ModelConfig& config, std::span<const TokenId> tokens) {
  if (tokens.empty()) throw InputError("token sequence is empty");
  if (tokens.size() > static_cast<std::size_t>(config.max_seq_len)) {
    throw InputError("sequence length " + std::to_string(tokens.size()) + " exceeds max_seq_len " +
                     std::to_string(config.max_seq_len));
  }
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || tokens[i] >= config.vocab_size) {
      throw InputError("token id " + std::to_string(tokens[i]) + " at position " +
                       std::to_string(i) + " is outside the vocabulary");
    }
  }
}

ForwardTrace forward(const ModelWeights& w, std::span<const TokenId> tokens) {
  validate_tokens(w.config, tokens);
  const auto p = engine::from_weights<float>(w);
  engine::Cache<float> cache;
  engine::forward(p, tokens, cache, /*wide_head=*/true);
  const auto n = tokens.size();
  const auto V = static_cast<std::size_t>(w.config.vocab_size);
  const auto d = static_cast<std::size_t>(w.config.d_model);
  ForwardTrace trace;
  trace.logits = Matrix(n, V, std::vector<float>(cache.logits.data(), cache.logits.data() + n * V));
  const float* last = cache.hidden.data() + (n - 1) * d;
  trace.final_hidden = Vector(std::vector<float>(last, last + d));
  return trace;
}

Vector gated_ffn(const LayerWeights& layer, std::span<const float> x) {
  if (x.size() != layer.ffn_gate.cols()) {
    throw DimensionError("gated_ffn: input dim " + std::to_string(x.size()) + " != d_model " +
                         std::to_string(layer.ffn_gate.cols()));
  }
  const Vector g = matvec(layer.ffn_gate, x);
  const Vector u = matvec(layer.ffn_up, x);
  std::vector<float> act(g.dim());
  for (std::size_t i = 0; i < act.size(); ++i) act[i] = engine::silu(g[i]) * u[i];
  return matvec(layer.ffn_down, act);
}

Vector lm_head_probe(const ModelWeights& w, std::span<const float> v) {
  if (v.size() != static_cast<std::size_t>(w.config.d_model)) {
    throw DimensionError("lm_head_probe: vector dim " + std::to_string(v.size()) +
                         " != d_model " + std::to_string(w.config.d_model));
  }
  Vector logits = matvec(w.head, v);
  if (w.head_bias) {
    for (std::size_t i = 0; i < logits.dim(); ++i) logits[i] += (*w.head_bias)[i];
  }
  return softmax(logits);
}

TokenId argmax_token(std::span<const float> probs) {
  if (probs.empty()) throw DimensionError("argmax of empty distribution");
  // max_element returns the first maximum, i.e. the lowest id on ties.
  return static_cast<TokenId>(std::max_element(probs.begin(), probs.end()) - probs.begin());
}

namespace {

template <typename Pick>
std::vector<TokenId> generate(const ModelWeights& w, std::span<const TokenId> prompt, int n,
                              Pick&& pick) {
  if (prompt.empty()) throw InputError("generation prompt is empty");
  if (n < 0) throw InputError("generation length must be >= 0");
  if (prompt.size() + static_cast<std::size_t>(n) > static_cast<std::size_t>(w.config.max_seq_len)) {
    throw InputError("prompt plus " + std::to_string(n) + " generated tokens exceeds max_seq_len");
  }
  validate_tokens(w.config, prompt);
  std::vector<TokenId> out(prompt.begin(), prompt.end());
  if (n == 0) return out;
  const auto p = engine::from_weights<float>(w);
  engine::Cache<float> cache;
  for (int i = 0; i < n; ++i) {
    engine::forward(p, out, cache, true);
    const auto V = static_cast<std::size_t>(w.config.vocab_size);
    const float* last = cache.logits.data() + (out.size() - 1) * V;
    out.push_back(pick(softmax(std::span<const float>(last, V))));
  }
  return out;
}

}  // namespace

std::vector<TokenId> greedy_generate(const ModelWeights& w, std::span<const TokenId> prompt,
                                     int n) {
  return generate(w, prompt, n, [](const Vector& probs) { return argmax_token(probs); });
}

std::vector<TokenId> sample_generate(const ModelWeights& w, std::span<const TokenId> prompt,
                                     int n, Rng& rng) {
  return generate(w, prompt, n, [&rng](const Vector& probs) {
    const double u = rng.uniform();
    double acc = 0.0;
    for (std::size_t i = 0; i < probs.dim(); ++i) {
      acc += probs[i];
      if (u < acc) return static_cast<TokenId>(i);
    }
    return static_cast<TokenId>(probs.dim() - 1);
  });
}

std::string serialize_checkpoint(const ModelWeights& w) {
  container::Container c;
  c.meta = {{"kind", "checkpoint"}, {"config", to_json(w.config)}};
  for (const auto& t : tensors(w)) {
    c.tensors.push_back({t.name, t.shape, std::vector<float>(t.data.begin(), t.data.end())});
  }
  return container::serialize(c);
}

ModelWeights deserialize_checkpoint(std::string_view bytes) {
  const container::Container c = container::parse(bytes);
  if (!c.meta.contains("config")) throw InputError("checkpoint: header has no model config");
  ModelWeights w = allocate(model_config_from_json(c.meta.at("config")));
  for (auto& t : tensors(w)) {
    const auto& src = c.get(t.name);
    if (src.shape != t.shape) throw InputError("checkpoint: tensor '" + t.name + "' has wrong shape");
    if (!all_finite(src.data)) {
      throw InputError("checkpoint: tensor '" + t.name + "' contains non-finite values");
    }
    std::ranges::copy(src.data, t.data.begin());
  }
  return w;
}

void save_checkpoint(const ModelWeights& w, const std::filesystem::path& path) {
  container::write_file(path, serialize_checkpoint(w));
}

ModelWeights load_checkpoint(const std::filesystem::path& path) {
  return deserialize_checkpoint(container::read_file(path));
}

std::uint64_t checkpoint_hash(const ModelWeights& w) {
  return container::fnv1a64(serialize_checkpoint(w));
}

std::string hash_hex(std::uint64_t hash) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(hash));
  return buf;
}

}  // namespace tars
