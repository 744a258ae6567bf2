#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "lmkit/dataset.hpp"
#include "lmkit/model.hpp"

namespace lmkit {

// One training block. Segments are contiguous, non-overlapping and cover
// [0, tokens.size()); padding is counted, never materialized as tokens.
struct PackedBlock {
  // Source id marking separator tokens in pre-training blocks.
  static constexpr std::size_t kSeparatorSource = static_cast<std::size_t>(-1);

  struct Segment {
    std::size_t begin = 0;
    std::size_t end = 0;     // exclusive
    std::size_t source = 0;  // index into the input corpus
  };

  TokenSequence tokens;
  std::vector<Segment> segments;
  std::size_t pad_count = 0;
};

// Joins all documents with `separator` between them and splits the result
// into consecutive max_len chunks. Every block except possibly the last is
// exactly max_len with zero padding; a final partial block is kept (with its
// pad_count set) unless keep_final_partial is false.
std::vector<PackedBlock> pack_pretrain(const std::vector<TokenSequence>& docs,
                                       std::size_t max_len, Token separator,
                                       bool keep_final_partial = true);

// First-fit-decreasing bin packing: conversations sorted by length
// descending (ties by index), each placed in the first block with room.
// Conversations are never split across blocks. Throws ContractError for a
// conversation longer than max_len, naming its index.
std::vector<PackedBlock> pack_instructions(
    const std::vector<TokenSequence>& conversations, std::size_t max_len);

struct MixtureEntry {
  std::string dataset_id;
  double weight = 0.0;  // nonnegative; normalized across entries
};

struct MixtureSpec {
  std::vector<MixtureEntry> entries;
  std::size_t total_samples = 0;
  std::uint64_t seed = 0;
  // When a dataset runs out: reshuffle and continue (true) or fail (false).
  bool allow_replacement = true;
};

// Named weight presets over the dataset ids "flan" and "alpaca".
const std::map<std::string, std::vector<MixtureEntry>>& mixture_presets();

// Draws total_samples examples; each draw picks a dataset with probability
// proportional to its weight, then takes the next example from that dataset's
// seeded shuffle. Deterministic given the spec.
std::vector<RawExample> sample_mixture(
    const MixtureSpec& spec,
    const std::map<std::string, std::vector<RawExample>>& datasets);

// On-disk forms (formats documented in the README).
void write_packed_jsonl(const std::string& path,
                        const std::vector<PackedBlock>& blocks);
std::vector<PackedBlock> read_packed_jsonl(const std::string& path);
void write_packed_binary(const std::string& tokens_path,
                         const std::string& index_path,
                         const std::vector<PackedBlock>& blocks,
                         std::size_t max_len);

// FNV-1a over the token stream; conservation fingerprint for run summaries.
std::uint64_t token_stream_hash(const std::vector<PackedBlock>& blocks);

}  // namespace lmkit
