#include "lmkit/sampling.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace lmkit {

std::vector<double> softmax(std::span<const float> logits) {
  std::vector<double> out(logits.size());
  if (logits.empty()) return out;
  const float max_logit = *std::max_element(logits.begin(), logits.end());
  double denom = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(static_cast<double>(logits[i]) - max_logit);
    denom += out[i];
  }
  for (double& v : out) v /= denom;
  return out;
}

double log_softmax_at(std::span<const float> logits, Token token) {
  const float max_logit = *std::max_element(logits.begin(), logits.end());
  double denom = 0.0;
  for (float l : logits) denom += std::exp(static_cast<double>(l) - max_logit);
  return static_cast<double>(logits[static_cast<std::size_t>(token)]) - max_logit -
         std::log(denom);
}

Token greedy_argmax(std::span<const float> logits) {
  if (logits.empty()) throw ContractError("argmax of empty logits");
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i)
    if (logits[i] > logits[best]) best = i;
  return static_cast<Token>(best);
}

std::vector<double> filter_top_p(std::vector<double> probs, double p) {
  if (!(p > 0.0) || p > 1.0) throw ContractError("top-p must be in (0, 1]");
  std::vector<std::size_t> order(probs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (probs[a] != probs[b]) return probs[a] > probs[b];
    return a < b;
  });

  double mass = 0.0;
  std::size_t kept = order.size();
  for (std::size_t i = 0; i < order.size(); ++i) {
    mass += probs[order[i]];
    if (mass >= p) {
      kept = i + 1;
      break;
    }
  }

  std::vector<double> out(probs.size(), 0.0);
  double kept_mass = 0.0;
  for (std::size_t i = 0; i < kept; ++i) kept_mass += probs[order[i]];
  for (std::size_t i = 0; i < kept; ++i)
    out[order[i]] = probs[order[i]] / kept_mass;
  return out;
}

void apply_repetition_penalty(std::span<float> logits, const TokenSequence& history,
                              float penalty) {
  if (penalty < 1.0f) throw ContractError("repetition penalty must be >= 1");
  if (penalty == 1.0f) return;
  std::vector<bool> seen(logits.size(), false);
  for (Token t : history)
    if (t >= 0 && static_cast<std::size_t>(t) < logits.size()) seen[t] = true;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (!seen[i]) continue;
    logits[i] = logits[i] > 0.0f ? logits[i] / penalty : logits[i] * penalty;
  }
}

Token sample_from(const std::vector<double>& probs, SplitMix64& rng) {
  if (probs.empty()) throw ContractError("cannot sample from empty distribution");
  const double u = rng.next_double();
  double cum = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    cum += probs[i];
    if (u < cum) return static_cast<Token>(i);
  }
  // Rounding left u above the final cumulative sum; take the last token with
  // nonzero mass.
  for (std::size_t i = probs.size(); i > 0; --i)
    if (probs[i - 1] > 0.0) return static_cast<Token>(i - 1);
  return static_cast<Token>(probs.size() - 1);
}

}  // namespace lmkit
