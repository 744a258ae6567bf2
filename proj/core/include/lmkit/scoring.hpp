#pragma once

#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "lmkit/model.hpp"
#include "lmkit/prefix_cache.hpp"

namespace lmkit {

enum class DecodeStrategy { greedy, sample };

struct GenerationConfig {
  DecodeStrategy strategy = DecodeStrategy::greedy;
  float temperature = 1.0f;
  double top_p = 1.0;
  float repetition_penalty = 1.0f;
  std::size_t max_new_tokens = 16;
  std::optional<Token> stop_token;
  std::size_t num_samples = 1;
  std::uint64_t seed = 0;

  void validate() const;  // throws ConfigError
};

struct ScoredOption {
  std::size_t option_index = 0;
  double sum_logprob = 0.0;  // nats
  std::size_t token_count = 0;
  std::size_t byte_count = 0;
  double avg_ppl = 0.0;           // exp(-sum_logprob / token_count)
  double normalized_score = 0.0;  // sum_logprob / token_count
};

struct Prediction {
  std::string instance_id;
  int chosen_index = -1;  // option modes
  std::string generated;  // generation mode, after aggregation
  bool answered = true;   // false when no sample yielded an extractable answer
  std::vector<ScoredOption> options;
  std::vector<std::string> samples;
  std::size_t prompt_tokens = 0;
};

// Autoregressive decoding. Returns num_samples sequences of at most
// max_new_tokens tokens each; generation stops early at stop_token (not
// included in the output) or at the backend's max_seq_len. The prompt's
// forward pass goes through `cache` when non-null and is computed once for
// all samples. Sampling draws from a stream derived from (cfg.seed,
// stream_id, sample index), so results are independent of batch order and
// worker count.
std::vector<TokenSequence> generate(const ModelBackend& backend, PrefixTrie* cache,
                                    const TokenSequence& prompt,
                                    const GenerationConfig& cfg,
                                    std::string_view stream_id = {});

struct PerplexityResult {
  std::vector<ScoredOption> options;
  std::size_t chosen = 0;  // argmin avg_ppl, ties to lowest index
};

// Scores each candidate completion conditioned on the context:
// sum_logprob = sum over option tokens of log P(token | context + preceding
// option tokens). The context forward pass is shared across options via the
// cache. byte_counts, when given, must parallel `options`; otherwise byte
// counts default to token counts.
PerplexityResult score_perplexity(const ModelBackend& backend, PrefixTrie* cache,
                                  const TokenSequence& context,
                                  const std::vector<TokenSequence>& options,
                                  const std::vector<std::size_t>* byte_counts = nullptr);

enum class Normalization { per_token, per_byte };

// Chooses argmax of sum_logprob / token_count (or / byte_count), ties to the
// lowest index.
std::size_t score_normalized(const std::vector<ScoredOption>& scored,
                             Normalization mode);

// One forward pass to the prompt's last position, then argmax over the given
// single-token option letters; ties to the lowest index.
std::size_t score_option_letter(const ModelBackend& backend, PrefixTrie* cache,
                                const TokenSequence& prompt_with_options,
                                const std::vector<Token>& letter_tokens);

using AnswerExtractor = std::function<std::optional<std::string>(const std::string&)>;

// Default extractor: the last integer or decimal numeral in the text.
std::optional<std::string> extract_last_number(const std::string& text);

// Majority vote over extracted answers; ties broken by earliest first
// occurrence; unextractable samples are dropped. Returns nullopt when no
// sample yields an answer.
std::optional<std::string> aggregate_self_consistency(
    const std::vector<std::string>& samples,
    const AnswerExtractor& extract = extract_last_number);

// Trim, ASCII-casefold, collapse whitespace runs to single spaces.
std::string normalize_answer(std::string_view text);

enum class Metric { accuracy, exact_match };

double accuracy(const std::vector<int>& chosen, const std::vector<int>& references);
double exact_match(const std::vector<std::string>& generated,
                   const std::vector<std::string>& references);

struct Reference {
  int index = -1;
  std::string text;
};

double compute_metric(Metric metric, const std::vector<Prediction>& predictions,
                      const std::vector<Reference>& references);

}  // namespace lmkit
