#pragma once

#include <span>
#include <vector>

#include "lmkit/model.hpp"
#include "lmkit/rng.hpp"

namespace lmkit {

// Numerically stable softmax; the result sums to 1 within 1e-6.
std::vector<double> softmax(std::span<const float> logits);

// Log-probability of `token` under log-softmax of `logits`, in nats.
double log_softmax_at(std::span<const float> logits, Token token);

// Argmax with ties broken toward the lowest index.
Token greedy_argmax(std::span<const float> logits);

// Nucleus filter: keeps the smallest set of highest-probability tokens whose
// cumulative mass reaches p (boundary token included), renormalized; all
// other entries are zeroed. pre: probs sums to 1 within 1e-6, 0 < p <= 1.
std::vector<double> filter_top_p(std::vector<double> probs, double p);

// CTRL-style penalty: for every token present in history, a positive logit is
// divided by `penalty` and a negative logit multiplied by it. pre: penalty >= 1.
void apply_repetition_penalty(std::span<float> logits, const TokenSequence& history,
                              float penalty);

// One categorical draw from a (possibly filtered) probability vector.
Token sample_from(const std::vector<double>& probs, SplitMix64& rng);

}  // namespace lmkit
