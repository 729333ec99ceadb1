#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "tars/numerics.hpp"

namespace tars {

using TokenId = std::int32_t;

struct ModelConfig {
  int d_model = 64;
  int n_layers = 4;
  int n_heads = 4;
  int d_ff = 224;
  int vocab_size = 512;
  int max_seq_len = 128;
  bool lm_head_bias = false;

  // Throws ConfigError. n_layers == 0 is accepted: embedding + head only.
  void validate() const;
  int head_dim() const { return d_model / n_heads; }
  // Gate and up rows across every layer: the full edit surface.
  std::int64_t scan_rows() const {
    return static_cast<std::int64_t>(n_layers) * 2 * d_ff;
  }

  bool operator==(const ModelConfig&) const = default;
};

nlohmann::json to_json(const ModelConfig& c);
// Missing fields keep their defaults; the result is validated.
ModelConfig model_config_from_json(const nlohmann::json& j);

enum class ProjectionKind { kGate = 0, kUp = 1 };

const char* to_string(ProjectionKind kind);
ProjectionKind projection_kind_from_string(const std::string& name);

struct LayerWeights {
  Vector norm_attn;
  Matrix attn_q;  // d_model x d_model, rows are output channels
  Matrix attn_k;
  Matrix attn_v;
  Matrix attn_o;
  Vector norm_ffn;
  Matrix ffn_gate;  // d_ff x d_model
  Matrix ffn_up;    // d_ff x d_model
  Matrix ffn_down;  // d_model x d_ff

  bool operator==(const LayerWeights&) const = default;

  const Matrix& projection(ProjectionKind kind) const {
    return kind == ProjectionKind::kGate ? ffn_gate : ffn_up;
  }
  Matrix& projection(ProjectionKind kind) {
    return kind == ProjectionKind::kGate ? ffn_gate : ffn_up;
  }
};

struct ModelWeights {
  ModelConfig config;
  Matrix token_embedding;     // vocab_size x d_model
  Matrix position_embedding;  // max_seq_len x d_model
  std::vector<LayerWeights> layers;
  Vector norm_final;
  Matrix head;  // vocab_size x d_model
  std::optional<Vector> head_bias;

  bool operator==(const ModelWeights&) const = default;
};

// Named view of one tensor inside ModelWeights, in canonical checkpoint order.
struct TensorRef {
  std::string name;
  std::vector<std::size_t> shape;
  std::span<float> data;
};
struct ConstTensorRef {
  std::string name;
  std::vector<std::size_t> shape;
  std::span<const float> data;
};

std::vector<TensorRef> tensors(ModelWeights& w);
std::vector<ConstTensorRef> tensors(const ModelWeights& w);

// Normal(0, 0.02) matrices, unit norm scales, zero bias.
ModelWeights init_weights(const ModelConfig& config, std::uint64_t seed);

struct ForwardTrace {
  Matrix logits;       // seq_len x vocab_size
  Vector final_hidden; // post-final-norm state at the last position (LM head input)
};

// Throws InputError for empty, over-long, or out-of-vocabulary input.
void validate_tokens(const ModelConfig& config, std::span<const TokenId> tokens);

ForwardTrace forward(const ModelWeights& w, std::span<const TokenId> tokens);

// down(silu(gate x) * up x) for one layer, independent of the rest of the model.
Vector gated_ffn(const LayerWeights& layer, std::span<const float> x);

// softmax(head v + bias) without running the transformer body.
Vector lm_head_probe(const ModelWeights& w, std::span<const float> v);

// Appends n argmax tokens (ties resolve to the lowest id).
std::vector<TokenId> greedy_generate(const ModelWeights& w, std::span<const TokenId> prompt,
                                     int n);
// Appends n tokens drawn from the next-token distribution.
std::vector<TokenId> sample_generate(const ModelWeights& w, std::span<const TokenId> prompt,
                                     int n, Rng& rng);

TokenId argmax_token(std::span<const float> probs);

// Checkpoint I/O in the TARS container format.
void save_checkpoint(const ModelWeights& w, const std::filesystem::path& path);
ModelWeights load_checkpoint(const std::filesystem::path& path);
std::string serialize_checkpoint(const ModelWeights& w);
ModelWeights deserialize_checkpoint(std::string_view bytes);
// FNV-1a over the serialized checkpoint bytes.
std::uint64_t checkpoint_hash(const ModelWeights& w);
std::string hash_hex(std::uint64_t hash);

}  // namespace tars
