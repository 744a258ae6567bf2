#include "lmkit/packing.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "lmkit/errors.hpp"
#include "lmkit/rng.hpp"

namespace lmkit {

using json = nlohmann::json;

std::vector<PackedBlock> pack_pretrain(const std::vector<TokenSequence>& docs,
                                       std::size_t max_len, Token separator,
                                       bool keep_final_partial) {
  if (max_len < 2) throw ContractError("max_len must be >= 2");

  std::vector<PackedBlock> blocks;
  PackedBlock current;

  auto flush = [&]() {
    if (current.tokens.empty()) return;
    blocks.push_back(std::move(current));
    current = PackedBlock{};
  };
  auto append_run = [&](const TokenSequence& tokens, std::size_t source) {
    std::size_t off = 0;
    while (off < tokens.size()) {
      const std::size_t room = max_len - current.tokens.size();
      const std::size_t take = std::min(room, tokens.size() - off);
      const std::size_t begin = current.tokens.size();
      current.tokens.insert(current.tokens.end(), tokens.begin() + off,
                            tokens.begin() + off + take);
      current.segments.push_back({begin, begin + take, source});
      off += take;
      if (current.tokens.size() == max_len) flush();
    }
  };

  for (std::size_t d = 0; d < docs.size(); ++d) {
    if (d > 0) append_run({separator}, PackedBlock::kSeparatorSource);
    append_run(docs[d], d);
  }
  if (!current.tokens.empty()) {
    if (keep_final_partial) {
      current.pad_count = max_len - current.tokens.size();
      blocks.push_back(std::move(current));
    }
    // else: drop the trailing partial block
  }
  return blocks;
}

std::vector<PackedBlock> pack_instructions(
    const std::vector<TokenSequence>& conversations, std::size_t max_len) {
  if (max_len < 1) throw ContractError("max_len must be >= 1");
  for (std::size_t i = 0; i < conversations.size(); ++i)
    if (conversations[i].size() > max_len)
      throw ContractError("conversation " + std::to_string(i) + " has " +
                          std::to_string(conversations[i].size()) +
                          " tokens, exceeding max_len " + std::to_string(max_len));

  std::vector<std::size_t> order(conversations.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (conversations[a].size() != conversations[b].size())
      return conversations[a].size() > conversations[b].size();
    return a < b;
  });

  std::vector<PackedBlock> blocks;
  for (std::size_t idx : order) {
    const TokenSequence& conv = conversations[idx];
    PackedBlock* target = nullptr;
    for (auto& block : blocks) {
      if (block.tokens.size() + conv.size() <= max_len) {
        target = &block;
        break;
      }
    }
    if (target == nullptr) {
      blocks.emplace_back();
      target = &blocks.back();
    }
    const std::size_t begin = target->tokens.size();
    target->tokens.insert(target->tokens.end(), conv.begin(), conv.end());
    target->segments.push_back({begin, begin + conv.size(), idx});
  }
  for (auto& block : blocks) block.pad_count = max_len - block.tokens.size();
  return blocks;
}

const std::map<std::string, std::vector<MixtureEntry>>& mixture_presets() {
  static const std::map<std::string, std::vector<MixtureEntry>> presets = {
      {"flan-100-alpaca-0", {{"flan", 100.0}, {"alpaca", 0.0}}},
      {"flan-50-alpaca-50", {{"flan", 50.0}, {"alpaca", 50.0}}},
      {"flan-0-alpaca-100", {{"flan", 0.0}, {"alpaca", 100.0}}},
  };
  return presets;
}

std::vector<RawExample> sample_mixture(
    const MixtureSpec& spec,
    const std::map<std::string, std::vector<RawExample>>& datasets) {
  double total_weight = 0.0;
  for (const auto& entry : spec.entries) {
    if (entry.weight < 0.0)
      throw ContractError("mixture weight for " + entry.dataset_id +
                          " must be nonnegative");
    if (datasets.find(entry.dataset_id) == datasets.end())
      throw ContractError("unknown dataset id in mixture: " + entry.dataset_id);
    total_weight += entry.weight;
  }
  if (!(total_weight > 0.0)) throw ContractError("mixture weights sum to zero");

  // Per-dataset queues in seeded shuffle order; replacement = new epoch.
  struct Queue {
    const std::vector<RawExample>* examples;
    std::vector<std::size_t> order;
    std::size_t next = 0;
    SplitMix64 rng;
  };
  std::vector<Queue> queues;
  for (const auto& entry : spec.entries) {
    Queue q{&datasets.at(entry.dataset_id),
            {},
            0,
            SplitMix64(derive_seed(spec.seed, entry.dataset_id))};
    q.order.resize(q.examples->size());
    std::iota(q.order.begin(), q.order.end(), std::size_t{0});
    q.rng.shuffle(q.order);
    queues.push_back(std::move(q));
  }

  SplitMix64 picker(derive_seed(spec.seed, "mixture-picker"));
  std::vector<RawExample> out;
  out.reserve(spec.total_samples);
  for (std::size_t draw = 0; draw < spec.total_samples; ++draw) {
    const double u = picker.next_double() * total_weight;
    double cum = 0.0;
    std::size_t pick = spec.entries.size() - 1;
    for (std::size_t i = 0; i < spec.entries.size(); ++i) {
      cum += spec.entries[i].weight;
      if (u < cum) {
        pick = i;
        break;
      }
    }
    Queue& q = queues[pick];
    if (q.examples->empty())
      throw ContractError("dataset " + spec.entries[pick].dataset_id + " is empty");
    if (q.next >= q.order.size()) {
      if (!spec.allow_replacement)
        throw ContractError("dataset " + spec.entries[pick].dataset_id +
                            " exhausted after " + std::to_string(draw) + " draws");
      q.rng.shuffle(q.order);
      q.next = 0;
    }
    out.push_back((*q.examples)[q.order[q.next++]]);
  }
  return out;
}

void write_packed_jsonl(const std::string& path,
                        const std::vector<PackedBlock>& blocks) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ContractError("cannot open output file: " + path);
  for (const auto& block : blocks) {
    json segs = json::array();
    for (const auto& s : block.segments) {
      const long long source = s.source == PackedBlock::kSeparatorSource
                                   ? -1
                                   : static_cast<long long>(s.source);
      segs.push_back({s.begin, s.end, source});
    }
    json line = {{"tokens", block.tokens},
                 {"segments", segs},
                 {"pad_count", block.pad_count}};
    out << line.dump() << "\n";
  }
}

std::vector<PackedBlock> read_packed_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ContractError("cannot open packed file: " + path);
  std::vector<PackedBlock> blocks;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const json obj = json::parse(line);
    PackedBlock block;
    block.tokens = obj.at("tokens").get<TokenSequence>();
    block.pad_count = obj.at("pad_count").get<std::size_t>();
    for (const auto& s : obj.at("segments")) {
      const long long source = s.at(2).get<long long>();
      block.segments.push_back(
          {s.at(0).get<std::size_t>(), s.at(1).get<std::size_t>(),
           source < 0 ? PackedBlock::kSeparatorSource
                      : static_cast<std::size_t>(source)});
    }
    blocks.push_back(std::move(block));
  }
  return blocks;
}

void write_packed_binary(const std::string& tokens_path,
                         const std::string& index_path,
                         const std::vector<PackedBlock>& blocks,
                         std::size_t max_len) {
  std::ofstream bin(tokens_path, std::ios::binary | std::ios::trunc);
  if (!bin) throw ContractError("cannot open output file: " + tokens_path);
  json index = {{"format", "lmkit-packed-v1"},
                {"token_width_bytes", 4},
                {"byte_order", "little"},
                {"max_len", max_len},
                {"blocks", json::array()}};
  std::size_t offset = 0;  // token offset into the stream
  for (const auto& block : blocks) {
    for (Token t : block.tokens) {
      const std::uint32_t v = static_cast<std::uint32_t>(t);
      const unsigned char bytes[4] = {
          static_cast<unsigned char>(v & 0xFF),
          static_cast<unsigned char>((v >> 8) & 0xFF),
          static_cast<unsigned char>((v >> 16) & 0xFF),
          static_cast<unsigned char>((v >> 24) & 0xFF)};
      bin.write(reinterpret_cast<const char*>(bytes), 4);
    }
    json segs = json::array();
    for (const auto& s : block.segments) {
      const long long source = s.source == PackedBlock::kSeparatorSource
                                   ? -1
                                   : static_cast<long long>(s.source);
      segs.push_back({s.begin, s.end, source});
    }
    index["blocks"].push_back({{"offset", offset},
                               {"tokens", block.tokens.size()},
                               {"pad_count", block.pad_count},
                               {"segments", segs}});
    offset += block.tokens.size();
  }
  std::ofstream idx(index_path, std::ios::binary | std::ios::trunc);
  if (!idx) throw ContractError("cannot open output file: " + index_path);
  idx << index.dump(2) << "\n";
}

std::uint64_t token_stream_hash(const std::vector<PackedBlock>& blocks) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  auto feed = [&](std::uint32_t v) {
    for (int shift = 0; shift < 32; shift += 8) {
      h ^= (v >> shift) & 0xFF;
      h *= 0x100000001B3ULL;
    }
  };
  for (const auto& block : blocks)
    for (Token t : block.tokens) feed(static_cast<std::uint32_t>(t));
  return h;
}

}  // namespace lmkit
