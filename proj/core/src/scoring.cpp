#include "lmkit/scoring.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>

#include "lmkit/sampling.hpp"

namespace lmkit {

void GenerationConfig::validate() const {
  if (strategy == DecodeStrategy::sample && !(temperature > 0.0f))
    throw ConfigError("temperature must be positive when sampling");
  if (!(top_p > 0.0) || top_p > 1.0) throw ConfigError("top_p must be in (0, 1]");
  if (repetition_penalty < 1.0f)
    throw ConfigError("repetition_penalty must be >= 1");
  if (num_samples < 1) throw ConfigError("num_samples must be >= 1");
  if (num_samples > 1 && strategy != DecodeStrategy::sample)
    throw ConfigError("num_samples > 1 requires the sample strategy");
}

namespace {

// Prompt state plus last-position logits, through the cache when available.
Acquired acquire_prompt(const ModelBackend& backend, PrefixTrie* cache,
                        const TokenSequence& prompt) {
  if (cache != nullptr) return cache->acquire(backend, prompt);
  StepOutput step = backend.forward_incremental(KVState{}, prompt);
  Acquired a;
  a.kv = std::make_shared<KVState>(std::move(step.kv));
  a.last_logits = std::move(step.logits);
  a.computed_tokens = prompt.size();
  return a;
}

}  // namespace

std::vector<TokenSequence> generate(const ModelBackend& backend, PrefixTrie* cache,
                                    const TokenSequence& prompt,
                                    const GenerationConfig& cfg,
                                    std::string_view stream_id) {
  cfg.validate();
  if (prompt.empty()) throw LengthError("prompt must contain at least one token");
  const std::size_t max_len = backend.config().max_seq_len;
  if (prompt.size() + 1 > max_len)
    throw LengthError("prompt leaves no room to generate within max_seq_len");

  const Acquired base = acquire_prompt(backend, cache, prompt);

  std::vector<TokenSequence> samples(cfg.num_samples);
  for (std::size_t s = 0; s < cfg.num_samples; ++s) {
    SplitMix64 rng(derive_seed(cfg.seed, stream_id, s));
    TokenSequence history = prompt;
    TokenSequence out;
    KVState kv = *base.kv;  // private copy, extended in place
    std::vector<float> logits = base.last_logits;

    while (out.size() < cfg.max_new_tokens && history.size() < max_len) {
      apply_repetition_penalty(logits, history, cfg.repetition_penalty);
      Token next;
      if (cfg.strategy == DecodeStrategy::greedy) {
        next = greedy_argmax(logits);
      } else {
        for (float& l : logits) l /= cfg.temperature;
        std::vector<double> probs = softmax(logits);
        if (cfg.top_p < 1.0) probs = filter_top_p(std::move(probs), cfg.top_p);
        next = sample_from(probs, rng);
      }
      if (cfg.stop_token && next == *cfg.stop_token) break;
      out.push_back(next);
      history.push_back(next);
      if (history.size() >= max_len) break;
      StepOutput step = backend.forward_incremental(std::move(kv), {next});
      kv = std::move(step.kv);
      logits = std::move(step.logits);
    }
    samples[s] = std::move(out);
  }
  return samples;
}

PerplexityResult score_perplexity(const ModelBackend& backend, PrefixTrie* cache,
                                  const TokenSequence& context,
                                  const std::vector<TokenSequence>& options,
                                  const std::vector<std::size_t>* byte_counts) {
  if (options.empty()) throw ContractError("at least one option is required");
  for (const auto& opt : options)
    if (opt.empty()) throw ContractError("options must be non-empty");
  if (byte_counts != nullptr && byte_counts->size() != options.size())
    throw ContractError("byte_counts must parallel options");
  const std::size_t max_len = backend.config().max_seq_len;
  for (const auto& opt : options)
    if (context.size() + opt.size() > max_len)
      throw LengthError("context plus option exceeds max_seq_len");

  const Acquired base = acquire_prompt(backend, cache, context);

  PerplexityResult result;
  result.options.resize(options.size());
  for (std::size_t i = 0; i < options.size(); ++i) {
    const TokenSequence& opt = options[i];
    double sum_logprob = 0.0;
    KVState kv = *base.kv;
    std::vector<float> logits = base.last_logits;
    for (std::size_t t = 0; t < opt.size(); ++t) {
      sum_logprob += log_softmax_at(logits, opt[t]);
      if (t + 1 == opt.size()) break;
      StepOutput step = backend.forward_incremental(std::move(kv), {opt[t]});
      kv = std::move(step.kv);
      logits = std::move(step.logits);
    }

    ScoredOption& s = result.options[i];
    s.option_index = i;
    s.sum_logprob = sum_logprob;
    s.token_count = opt.size();
    s.byte_count = byte_counts != nullptr ? (*byte_counts)[i] : opt.size();
    s.avg_ppl = std::exp(-sum_logprob / static_cast<double>(s.token_count));
    s.normalized_score = sum_logprob / static_cast<double>(s.token_count);
  }

  result.chosen = 0;
  for (std::size_t i = 1; i < result.options.size(); ++i)
    if (result.options[i].avg_ppl < result.options[result.chosen].avg_ppl)
      result.chosen = i;
  return result;
}

std::size_t score_normalized(const std::vector<ScoredOption>& scored,
                             Normalization mode) {
  if (scored.empty()) throw ContractError("no scored options");
  auto value = [&](const ScoredOption& s) {
    if (mode == Normalization::per_token)
      return s.sum_logprob / static_cast<double>(s.token_count);
    if (s.byte_count == 0)
      throw ContractError("per-byte normalization requires byte counts");
    return s.sum_logprob / static_cast<double>(s.byte_count);
  };
  std::size_t best = 0;
  double best_value = value(scored[0]);
  for (std::size_t i = 1; i < scored.size(); ++i) {
    const double v = value(scored[i]);
    if (v > best_value) {
      best = i;
      best_value = v;
    }
  }
  return best;
}

std::size_t score_option_letter(const ModelBackend& backend, PrefixTrie* cache,
                                const TokenSequence& prompt_with_options,
                                const std::vector<Token>& letter_tokens) {
  if (letter_tokens.empty()) throw ContractError("no option letters given");
  for (std::size_t i = 0; i < letter_tokens.size(); ++i)
    for (std::size_t j = i + 1; j < letter_tokens.size(); ++j)
      if (letter_tokens[i] == letter_tokens[j])
        throw ContractError("duplicate option letter tokens");
  for (Token t : letter_tokens)
    if (t < 0 || static_cast<std::size_t>(t) >= backend.config().vocab_size)
      throw ContractError("letter token outside vocab");

  const Acquired base = acquire_prompt(backend, cache, prompt_with_options);
  std::size_t best = 0;
  for (std::size_t i = 1; i < letter_tokens.size(); ++i)
    if (base.last_logits[letter_tokens[i]] > base.last_logits[letter_tokens[best]])
      best = i;
  return best;
}

std::optional<std::string> extract_last_number(const std::string& text) {
  std::optional<std::string> found;
  std::size_t i = 0;
  while (i < text.size()) {
    const bool sign = (text[i] == '-' || text[i] == '+') && i + 1 < text.size() &&
                      std::isdigit(static_cast<unsigned char>(text[i + 1]));
    if (sign || std::isdigit(static_cast<unsigned char>(text[i]))) {
      const std::size_t start = i;
      if (sign) ++i;
      while (i < text.size() && std::isdigit(static_cast<unsigned char>(text[i]))) ++i;
      if (i + 1 < text.size() && text[i] == '.' &&
          std::isdigit(static_cast<unsigned char>(text[i + 1]))) {
        ++i;
        while (i < text.size() && std::isdigit(static_cast<unsigned char>(text[i]))) ++i;
      }
      found = text.substr(start, i - start);
    } else {
      ++i;
    }
  }
  return found;
}

std::optional<std::string> aggregate_self_consistency(
    const std::vector<std::string>& samples, const AnswerExtractor& extract) {
  std::vector<std::string> order;  // first-occurrence order
  std::map<std::string, std::size_t> votes;
  for (const auto& sample : samples) {
    auto answer = extract(sample);
    if (!answer) continue;
    auto [it, inserted] = votes.emplace(*answer, 0);
    if (inserted) order.push_back(*answer);
    ++it->second;
  }
  if (order.empty()) return std::nullopt;
  std::string best = order.front();
  for (const auto& candidate : order)
    if (votes[candidate] > votes[best]) best = candidate;
  return best;
}

std::string normalize_answer(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  bool in_space = true;  // swallows leading whitespace
  for (char c : text) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!in_space) out.push_back(' ');
      in_space = true;
    } else {
      out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
      in_space = false;
    }
  }
  while (!out.empty() && out.back() == ' ') out.pop_back();
  return out;
}

double accuracy(const std::vector<int>& chosen, const std::vector<int>& references) {
  if (chosen.size() != references.size() || chosen.empty())
    throw ContractError("prediction/reference lists must align and be nonempty");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < chosen.size(); ++i)
    if (chosen[i] == references[i]) ++correct;
  return static_cast<double>(correct) / static_cast<double>(chosen.size());
}

double exact_match(const std::vector<std::string>& generated,
                   const std::vector<std::string>& references) {
  if (generated.size() != references.size() || generated.empty())
    throw ContractError("prediction/reference lists must align and be nonempty");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < generated.size(); ++i)
    if (normalize_answer(generated[i]) == normalize_answer(references[i])) ++correct;
  return static_cast<double>(correct) / static_cast<double>(generated.size());
}

double compute_metric(Metric metric, const std::vector<Prediction>& predictions,
                      const std::vector<Reference>& references) {
  if (predictions.size() != references.size() || predictions.empty())
    throw ContractError("prediction/reference lists must align and be nonempty");
  if (metric == Metric::accuracy) {
    std::vector<int> chosen, refs;
    for (const auto& p : predictions) chosen.push_back(p.chosen_index);
    for (const auto& r : references) refs.push_back(r.index);
    return accuracy(chosen, refs);
  }
  std::vector<std::string> gen, refs;
  for (const auto& p : predictions) gen.push_back(p.answered ? p.generated : std::string());
  for (const auto& r : references) refs.push_back(r.text);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < gen.size(); ++i) {
    if (!predictions[i].answered) continue;  // no-answer counts as incorrect
    if (normalize_answer(gen[i]) == normalize_answer(refs[i])) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(gen.size());
}

}  // namespace lmkit
