#include "lmkit/prefix_cache.hpp"

#include <algorithm>
#include <functional>
#include <map>
#include <mutex>
#include <numeric>
#include <string>
#include <thread>

namespace lmkit {

CacheStats operator-(const CacheStats& a, const CacheStats& b) {
  return CacheStats{a.tokens_computed - b.tokens_computed,
                    a.tokens_reused - b.tokens_reused, a.hits - b.hits,
                    a.misses - b.misses, a.evictions - b.evictions};
}

struct PrefixTrie::Node {
  enum class Origin { forward, truncate };

  TokenSequence span;  // edge label from parent
  Node* parent = nullptr;
  std::size_t prefix_len = 0;  // tokens from root through this node's end
  std::map<Token, std::unique_ptr<Node>> children;

  std::shared_ptr<const KVState> kv;  // covers [0, prefix_len); null = pending
  std::vector<float> last_logits;     // logits at prefix_len - 1, if known

  mutable std::atomic<std::uint64_t> last_use{0};
  std::uint64_t id = 0;

  // Deferred-materialization bookkeeping (batched runs only). The producing
  // computation is pinned at creation time and is unaffected by later edge
  // splits: a forward node recomputes origin_span on top of origin_src's
  // state, a truncate node cuts origin_src's state down to prefix_len.
  Origin origin = Origin::forward;
  Node* origin_src = nullptr;
  TokenSequence origin_span;
  bool tail_planned = false;  // a 1-token logits step is scheduled

  bool is_leaf() const { return children.empty(); }
  bool logits_available_or_planned() const {
    if (!last_logits.empty() || tail_planned) return true;
    return kv == nullptr && origin == Origin::forward;  // pending forward
  }
};

namespace {

std::size_t common_prefix(const TokenSequence& a, std::size_t a_off,
                          const TokenSequence& b) {
  const std::size_t n = std::min(a.size() - a_off, b.size());
  std::size_t i = 0;
  while (i < n && a[a_off + i] == b[i]) ++i;
  return i;
}

// Runs fn(0..n-1) on up to `workers` threads; any exception is rethrown on
// the caller thread after all workers join.
void parallel_for(std::size_t n, std::size_t workers,
                  const std::function<void(std::size_t)>& fn) {
  if (n == 0) return;
  const std::size_t w = std::min(workers, n);
  if (w <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::exception_ptr first_error;
  std::mutex error_mutex;
  std::vector<std::thread> threads;
  threads.reserve(w);
  for (std::size_t t = 0; t < w; ++t) {
    threads.emplace_back([&, t] {
      try {
        for (std::size_t i = t; i < n; i += w) fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!first_error) first_error = std::current_exception();
      }
    });
  }
  for (auto& th : threads) th.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace

PrefixTrie::PrefixTrie(Budget budget) : budget_(budget), root_(new Node) {
  root_->id = next_node_id_++;
}

PrefixTrie::~PrefixTrie() = default;

std::uint64_t PrefixTrie::tick() const {
  return clock_.fetch_add(1, std::memory_order_relaxed) + 1;
}

LookupResult PrefixTrie::lookup_longest_prefix(const TokenSequence& seq) {
  std::shared_lock lock(mutex_);
  const Node* node = root_.get();
  std::size_t off = 0;
  while (off < seq.size()) {
    auto it = node->children.find(seq[off]);
    if (it == node->children.end()) break;
    const Node* child = it->second.get();
    const std::size_t cmp = common_prefix(seq, off, child->span);
    child->last_use.store(tick(), std::memory_order_relaxed);
    if (cmp == child->span.size()) {
      node = child;
      off += cmp;
      continue;
    }
    // Match ends inside this edge: report the split point.
    off += cmp;
    LookupResult out;
    out.matched_len = off;
    if (child->kv)
      out.kv = std::make_shared<KVState>(child->kv->truncated(off));
    return out;
  }
  LookupResult out;
  out.matched_len = off;
  if (node != root_.get()) out.kv = node->kv;
  return out;
}

PrefixTrie::Node* PrefixTrie::split_edge(Node* parent, Node* child,
                                         std::size_t split_off,
                                         std::vector<Node*>* pending) {
  const Token child_key = child->span.front();
  std::unique_ptr<Node> child_ptr = std::move(parent->children.at(child_key));
  parent->children.erase(child_key);

  auto mid = std::make_unique<Node>();
  Node* mid_raw = mid.get();
  mid->span.assign(child->span.begin(), child->span.begin() + split_off);
  mid->parent = parent;
  mid->prefix_len = parent->prefix_len + split_off;
  mid->id = next_node_id_++;
  if (child->kv) {
    mid->kv = std::make_shared<KVState>(child->kv->truncated(mid->prefix_len));
  } else {
    mid->origin = Node::Origin::truncate;
    mid->origin_src = child;
    if (pending == nullptr)
      throw ContractError("split of an unmaterialized cache node outside a batch run");
    pending->push_back(mid_raw);
  }

  child_ptr->span.erase(child_ptr->span.begin(),
                        child_ptr->span.begin() + split_off);
  child_ptr->parent = mid_raw;
  mid->children.emplace(child_ptr->span.front(), std::move(child_ptr));
  parent->children.emplace(mid->span.front(), std::move(mid));
  ++node_count_;
  return mid_raw;
}

PrefixTrie::DescendResult PrefixTrie::descend(const TokenSequence& seq,
                                              std::vector<Node*>* pending) {
  Node* node = root_.get();
  std::size_t off = 0;
  while (off < seq.size()) {
    auto it = node->children.find(seq[off]);
    if (it == node->children.end()) break;
    Node* child = it->second.get();
    const std::size_t cmp = common_prefix(seq, off, child->span);
    child->last_use.store(tick(), std::memory_order_relaxed);
    if (cmp == child->span.size()) {
      node = child;
      off += cmp;
      continue;
    }
    Node* mid = split_edge(node, child, cmp, pending);
    mid->last_use.store(tick(), std::memory_order_relaxed);
    node = mid;
    off += cmp;
    break;
  }
  return {node, off};
}

void PrefixTrie::insert(const TokenSequence& seq, KVState kv) {
  if (seq.empty()) throw ContractError("cannot insert an empty sequence");
  if (kv.length != seq.size())
    throw ContractError("KVState length " + std::to_string(kv.length) +
                        " does not match sequence length " +
                        std::to_string(seq.size()));
  std::unique_lock lock(mutex_);
  const DescendResult d = descend(seq, nullptr);
  if (d.matched < seq.size()) {
    auto leaf = std::make_unique<Node>();
    leaf->span.assign(seq.begin() + d.matched, seq.end());
    leaf->parent = d.node;
    leaf->prefix_len = seq.size();
    leaf->id = next_node_id_++;
    leaf->kv = std::make_shared<KVState>(std::move(kv));
    leaf->last_use.store(tick(), std::memory_order_relaxed);
    cached_tokens_ += leaf->span.size();
    ++node_count_;
    d.node->children.emplace(leaf->span.front(), std::move(leaf));
  }
  evict_to_budget();
}

Acquired PrefixTrie::acquire(const ModelBackend& backend,
                             const TokenSequence& prompt) {
  std::unique_lock lock(mutex_);
  return acquire_unlocked(backend, prompt);
}

Acquired PrefixTrie::acquire_unlocked(const ModelBackend& backend,
                                      const TokenSequence& prompt) {
  if (prompt.empty()) throw LengthError("prompt must contain at least one token");
  if (prompt.size() > backend.config().max_seq_len)
    throw LengthError("prompt exceeds max_seq_len");

  const DescendResult d = descend(prompt, nullptr);
  Acquired out;
  stats_.hits += d.matched > 0 ? 1 : 0;
  stats_.misses += d.matched > 0 ? 0 : 1;

  if (d.matched == prompt.size()) {
    Node* node = d.node;
    if (node->last_logits.empty()) {
      // State is cached but the final position's logits are not (the node was
      // produced by an edge split); recompute just the last token.
      StepOutput step = backend.forward_incremental(
          node->kv->truncated(prompt.size() - 1), {prompt.back()});
      node->last_logits = std::move(step.logits);
      out.computed_tokens = 1;
      out.reused_tokens = prompt.size() - 1;
    } else {
      out.reused_tokens = prompt.size();
    }
    out.kv = node->kv;
    out.last_logits = node->last_logits;
  } else {
    TokenSequence rest(prompt.begin() + d.matched, prompt.end());
    KVState base;
    if (d.node != root_.get()) base = *d.node->kv;  // copy; extended in place
    StepOutput step = backend.forward_incremental(std::move(base), rest);

    auto leaf = std::make_unique<Node>();
    leaf->span = std::move(rest);
    leaf->parent = d.node;
    leaf->prefix_len = prompt.size();
    leaf->id = next_node_id_++;
    leaf->kv = std::make_shared<KVState>(std::move(step.kv));
    leaf->last_logits = std::move(step.logits);
    leaf->last_use.store(tick(), std::memory_order_relaxed);
    out.kv = leaf->kv;
    out.last_logits = leaf->last_logits;
    out.computed_tokens = leaf->span.size();
    out.reused_tokens = d.matched;
    cached_tokens_ += leaf->span.size();
    ++node_count_;
    d.node->children.emplace(leaf->span.front(), std::move(leaf));
  }

  stats_.tokens_computed += out.computed_tokens;
  stats_.tokens_reused += out.reused_tokens;
  evict_to_budget();
  return out;
}

void PrefixTrie::evict_to_budget() {
  while (cached_tokens_ > budget_.max_cached_tokens) {
    Node* victim = nullptr;
    std::function<void(Node*)> scan = [&](Node* n) {
      for (auto& [tok, child] : n->children) {
        if (child->is_leaf()) {
          if (victim == nullptr ||
              child->last_use.load(std::memory_order_relaxed) <
                  victim->last_use.load(std::memory_order_relaxed) ||
              (child->last_use.load(std::memory_order_relaxed) ==
                   victim->last_use.load(std::memory_order_relaxed) &&
               child->id < victim->id)) {
            victim = child.get();
          }
        } else {
          scan(child.get());
        }
      }
    };
    scan(root_.get());
    if (victim == nullptr) break;
    cached_tokens_ -= victim->span.size();
    --node_count_;
    ++stats_.evictions;
    victim->parent->children.erase(victim->span.front());
  }
}

CacheStats PrefixTrie::stats() const {
  std::shared_lock lock(mutex_);
  return stats_;
}

void PrefixTrie::reset_stats() {
  std::unique_lock lock(mutex_);
  stats_ = CacheStats{};
}

std::size_t PrefixTrie::cached_tokens() const {
  std::shared_lock lock(mutex_);
  return cached_tokens_;
}

std::size_t PrefixTrie::node_count() const {
  std::shared_lock lock(mutex_);
  return node_count_;
}

ShapeNode PrefixTrie::shape() const {
  std::shared_lock lock(mutex_);
  std::function<ShapeNode(const Node*)> build = [&](const Node* n) {
    ShapeNode s;
    s.span = n->span;
    s.materialized = n->kv != nullptr;
    for (const auto& [tok, child] : n->children) s.children.push_back(build(child.get()));
    return s;
  };
  ShapeNode s = build(root_.get());
  s.materialized = false;
  return s;
}

Schedule schedule(const std::vector<TokenSequence>& requests) {
  Schedule s;
  s.order.resize(requests.size());
  std::iota(s.order.begin(), s.order.end(), std::size_t{0});
  std::sort(s.order.begin(), s.order.end(), [&](std::size_t a, std::size_t b) {
    if (requests[a] != requests[b])
      return std::lexicographical_compare(requests[a].begin(), requests[a].end(),
                                          requests[b].begin(), requests[b].end());
    return a < b;
  });
  return s;
}

RunWithCacheResult PrefixTrie::run(const ModelBackend& backend,
                                   const std::vector<TokenSequence>& prompts,
                                   RunWithCacheOptions options) {
  for (const auto& p : prompts) {
    if (p.empty()) throw LengthError("prompt must contain at least one token");
    if (p.size() > backend.config().max_seq_len)
      throw LengthError("prompt exceeds max_seq_len");
    for (Token t : p)
      if (t < 0 || static_cast<std::size_t>(t) >= backend.config().vocab_size)
        throw ContractError("token id outside vocab");
  }

  std::unique_lock lock(mutex_);
  const CacheStats before = stats_;
  RunWithCacheResult result;
  result.outputs.resize(prompts.size());
  const Schedule sched = schedule(prompts);

  const bool parallel = options.workers > 1 && budget_.is_unlimited();
  if (!parallel) {
    for (std::size_t idx : sched.order) {
      Acquired a = acquire_unlocked(backend, prompts[idx]);
      result.outputs[idx] = RequestOutput{std::move(a.last_logits), std::move(a.kv)};
    }
    result.stats = stats_ - before;
    return result;
  }

  // Plan pass: walk every prompt through the trie creating unmaterialized
  // nodes, so stats and trie shape match the sequential path exactly.
  struct ReqPlan {
    std::size_t index;
    Node* terminal;
  };
  std::vector<Node*> pending;
  std::vector<Node*> tail_nodes;  // need a 1-token step for final logits
  std::vector<ReqPlan> plans;
  plans.reserve(prompts.size());

  for (std::size_t idx : sched.order) {
    const TokenSequence& prompt = prompts[idx];
    const DescendResult d = descend(prompt, &pending);
    stats_.hits += d.matched > 0 ? 1 : 0;
    stats_.misses += d.matched > 0 ? 0 : 1;
    Node* terminal = d.node;
    if (d.matched == prompt.size()) {
      if (!terminal->logits_available_or_planned()) {
        terminal->tail_planned = true;
        tail_nodes.push_back(terminal);
        stats_.tokens_computed += 1;
        stats_.tokens_reused += prompt.size() - 1;
      } else {
        stats_.tokens_reused += prompt.size();
      }
    } else {
      auto leaf = std::make_unique<Node>();
      leaf->span.assign(prompt.begin() + d.matched, prompt.end());
      leaf->parent = d.node;
      leaf->prefix_len = prompt.size();
      leaf->id = next_node_id_++;
      leaf->origin = Node::Origin::forward;
      leaf->origin_src = d.node;
      leaf->origin_span = leaf->span;
      leaf->last_use.store(tick(), std::memory_order_relaxed);
      terminal = leaf.get();
      pending.push_back(terminal);
      cached_tokens_ += leaf->span.size();
      ++node_count_;
      stats_.tokens_computed += leaf->span.size();
      stats_.tokens_reused += d.matched;
      d.node->children.emplace(leaf->span.front(), std::move(leaf));
    }
    plans.push_back(ReqPlan{idx, terminal});
  }

  // Materialize in dependency levels; creation order is a topological order.
  std::map<const Node*, std::size_t> level;
  std::vector<std::vector<Node*>> levels;
  for (Node* n : pending) {
    std::size_t lv = 0;
    if (auto it = level.find(n->origin_src); it != level.end()) lv = it->second + 1;
    level[n] = lv;
    if (levels.size() <= lv) levels.resize(lv + 1);
    levels[lv].push_back(n);
  }
  for (const auto& nodes : levels) {
    parallel_for(nodes.size(), options.workers, [&](std::size_t i) {
      Node* n = nodes[i];
      if (n->origin == Node::Origin::truncate) {
        n->kv = std::make_shared<KVState>(
            n->origin_src->kv->truncated(n->prefix_len));
      } else {
        KVState base;
        if (n->origin_src != root_.get()) base = *n->origin_src->kv;
        StepOutput step = backend.forward_incremental(std::move(base), n->origin_span);
        n->last_logits = std::move(step.logits);
        n->kv = std::make_shared<KVState>(std::move(step.kv));
      }
    });
  }

  parallel_for(tail_nodes.size(), options.workers, [&](std::size_t i) {
    Node* n = tail_nodes[i];
    StepOutput step = backend.forward_incremental(
        n->kv->truncated(n->prefix_len - 1), {n->span.back()});
    n->last_logits = std::move(step.logits);
    n->tail_planned = false;
  });

  for (const ReqPlan& plan : plans)
    result.outputs[plan.index] =
        RequestOutput{plan.terminal->last_logits, plan.terminal->kv};

  result.stats = stats_ - before;
  return result;
}

RunWithCacheResult run_with_cache(const ModelBackend& backend, PrefixTrie& trie,
                                  const std::vector<TokenSequence>& prompts,
                                  RunWithCacheOptions options) {
  return trie.run(backend, prompts, options);
}

RunWithCacheResult run_with_cache(const ModelBackend& backend,
                                  const std::vector<TokenSequence>& prompts,
                                  Budget budget, RunWithCacheOptions options) {
  PrefixTrie trie(budget);
  return trie.run(backend, prompts, options);
}

}  // namespace lmkit
