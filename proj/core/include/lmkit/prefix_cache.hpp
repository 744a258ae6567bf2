#pragma once

#include <atomic>
#include <cstdint>
#include <limits>
#include <memory>
#include <shared_mutex>
#include <vector>

#include "lmkit/model.hpp"

namespace lmkit {

// Token accounting for cached runs. tokens_computed + tokens_reused equals
// the total prompt tokens presented.
struct CacheStats {
  std::uint64_t tokens_computed = 0;
  std::uint64_t tokens_reused = 0;
  std::uint64_t hits = 0;
  std::uint64_t misses = 0;
  std::uint64_t evictions = 0;
};

CacheStats operator-(const CacheStats& a, const CacheStats& b);

// Cache capacity in tokens (platform independent, unlike bytes).
struct Budget {
  std::size_t max_cached_tokens = std::numeric_limits<std::size_t>::max();

  static Budget unlimited() { return Budget{}; }
  bool is_unlimited() const {
    return max_cached_tokens == std::numeric_limits<std::size_t>::max();
  }
};

struct LookupResult {
  std::size_t matched_len = 0;
  std::shared_ptr<const KVState> kv;  // null when matched_len == 0
};

// Result of materializing a full prompt through the cache.
struct Acquired {
  std::shared_ptr<const KVState> kv;  // state for the whole prompt
  std::vector<float> last_logits;     // logits at the prompt's final position
  std::size_t reused_tokens = 0;
  std::size_t computed_tokens = 0;
};

// Structural snapshot for inspection and tests. Children are ordered by the
// first token of their span.
struct ShapeNode {
  TokenSequence span;
  bool materialized = false;
  std::vector<ShapeNode> children;
};

struct RequestOutput {
  std::vector<float> last_logits;
  std::shared_ptr<const KVState> kv;
};

struct RunWithCacheOptions {
  std::size_t workers = 1;
};

struct RunWithCacheResult {
  std::vector<RequestOutput> outputs;  // indexed by original request order
  CacheStats stats;                    // this run only
};

// Path-compressed radix trie mapping token prefixes to stored attention
// key/value state. Each node's state covers the full prefix from the root
// through that node; splitting an edge truncates the child's stored state,
// which is exact because causal attention state for a prefix is independent
// of its suffix. Eviction is LRU over leaves, in whole-node units.
//
// Concurrency: lookups may run concurrently (shared lock, atomic last-use
// touches); insert/acquire/run take the write lock.
class PrefixTrie {
 public:
  explicit PrefixTrie(Budget budget = Budget::unlimited());
  ~PrefixTrie();
  PrefixTrie(const PrefixTrie&) = delete;
  PrefixTrie& operator=(const PrefixTrie&) = delete;

  // Longest cached prefix of seq ending at a node boundary or a split point.
  // A mid-edge match returns a truncated copy of the covering node's state.
  LookupResult lookup_longest_prefix(const TokenSequence& seq);

  // pre: kv.length == seq.size(). Afterwards a lookup of seq matches all of
  // it (until eviction). Idempotent for already-present sequences.
  void insert(const TokenSequence& seq, KVState kv);

  // Lookup + compute the missing suffix through `backend` + insert, updating
  // stats and enforcing the budget. The entry point scoring goes through.
  Acquired acquire(const ModelBackend& backend, const TokenSequence& prompt);

  // Schedules the prompts, materializes shared prefixes once, and returns
  // each request's final-position logits and state. Outputs and stats do not
  // depend on the worker count: with a bounded budget the run executes
  // sequentially (eviction timing is order-dependent), otherwise the prefix
  // skeleton is planned first and worker threads only fill planned nodes.
  RunWithCacheResult run(const ModelBackend& backend,
                         const std::vector<TokenSequence>& prompts,
                         RunWithCacheOptions options = {});

  CacheStats stats() const;
  void reset_stats();
  std::size_t cached_tokens() const;
  std::size_t node_count() const;
  Budget budget() const { return budget_; }
  ShapeNode shape() const;

 private:
  struct Node;
  struct DescendResult {
    Node* node;
    std::size_t matched;
  };

  DescendResult descend(const TokenSequence& seq, std::vector<Node*>* pending);
  Node* split_edge(Node* parent, Node* child, std::size_t split_off,
                   std::vector<Node*>* pending);
  Acquired acquire_unlocked(const ModelBackend& backend,
                            const TokenSequence& prompt);
  void evict_to_budget();
  std::uint64_t tick() const;

  Budget budget_;
  std::unique_ptr<Node> root_;
  std::size_t cached_tokens_ = 0;
  std::size_t node_count_ = 0;
  CacheStats stats_;
  mutable std::atomic<std::uint64_t> clock_{0};
  std::uint64_t next_node_id_ = 0;
  mutable std::shared_mutex mutex_;
};

// Requests reordered so shared prefixes are adjacent (lexicographic by token
// sequence, ties by original index). order[i] is the original index of the
// i-th scheduled request.
struct Schedule {
  std::vector<std::size_t> order;
};

Schedule schedule(const std::vector<TokenSequence>& requests);

RunWithCacheResult run_with_cache(const ModelBackend& backend, PrefixTrie& trie,
                                  const std::vector<TokenSequence>& prompts,
                                  RunWithCacheOptions options = {});

RunWithCacheResult run_with_cache(const ModelBackend& backend,
                                  const std::vector<TokenSequence>& prompts,
                                  Budget budget, RunWithCacheOptions options = {});

}  // namespace lmkit
