#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "lmkit/errors.hpp"

namespace lmkit {

using Token = std::int32_t;
using TokenSequence = std::vector<Token>;

struct ModelConfig {
  std::size_t vocab_size = 64;
  std::size_t num_layers = 2;
  std::size_t hidden_size = 32;
  std::size_t num_heads = 4;
  std::size_t max_seq_len = 256;
  std::uint64_t seed = 0;

  void validate() const;  // throws ConfigError
};

// Attention key/value state for token positions [0, length). Sufficient to
// resume causal decoding after those positions; the state of a prefix is
// independent of any suffix, so truncation yields the prefix's exact state.
struct KVState {
  struct LayerKV {
    std::vector<float> keys;    // length * hidden_size
    std::vector<float> values;  // length * hidden_size
  };

  std::size_t length = 0;
  std::vector<LayerKV> layers;

  KVState truncated(std::size_t new_length) const;
  std::size_t byte_size() const;
};

// Logits for the last processed position plus the extended state.
struct StepOutput {
  std::vector<float> logits;
  KVState kv;
};

// Logits for every position of a from-scratch forward pass.
struct FullOutput {
  std::size_t positions = 0;
  std::size_t vocab_size = 0;
  std::vector<float> logits;  // positions * vocab_size, row-major
  KVState kv;

  std::span<const float> row(std::size_t position) const {
    return {logits.data() + position * vocab_size, vocab_size};
  }
};

// Autoregressive backend contract. Implementations must be immutable after
// construction and safe for concurrent read-only forward passes.
class ModelBackend {
 public:
  virtual ~ModelBackend() = default;

  virtual const ModelConfig& config() const = 0;

  // pre: 1 <= tokens.size() <= max_seq_len. Position t's logits depend only
  // on tokens [0..t].
  virtual FullOutput forward_full(const TokenSequence& tokens) const = 0;

  // pre: cached.length + new_tokens.size() <= max_seq_len, new_tokens
  // nonempty. The returned logits match forward_full on the concatenated
  // sequence's last position.
  virtual StepOutput forward_incremental(KVState cached,
                                         const TokenSequence& new_tokens) const = 0;
};

// Deterministic seeded decoder-only transformer: pre-norm blocks
// (self-attention + 2-layer MLP), learned positional embeddings, weights a
// pure function of config.seed. All math in 32-bit floats. forward_full and
// forward_incremental share one per-token code path, so a full pass and any
// split into incremental passes produce bitwise-identical logits.
std::unique_ptr<ModelBackend> build_toy_model(const ModelConfig& config);

}  // namespace lmkit
