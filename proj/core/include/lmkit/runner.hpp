#pragma once

#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "lmkit/dataset.hpp"
#include "lmkit/model.hpp"
#include "lmkit/packing.hpp"
#include "lmkit/prefix_cache.hpp"
#include "lmkit/scoring.hpp"

namespace lmkit {

// Toy model sized for byte-tokenized evaluation runs (vocab >= 256).
ModelConfig default_eval_model();

enum class PplRanking { avg_ppl, normalized_per_token, normalized_per_byte };

PplRanking parse_ppl_ranking(std::string_view name);  // throws ConfigError
std::string_view to_string(PplRanking ranking);

struct RunConfig {
  std::string backend = "toy";
  ModelConfig model = default_eval_model();
  std::string dataset_path;
  DatasetSchema schema;
  std::size_t shots = 0;
  PromptTemplate prompt;
  GenerationConfig generation;
  bool use_cache = true;
  std::size_t cache_budget_tokens = std::numeric_limits<std::size_t>::max();
  PplRanking ppl_ranking = PplRanking::avg_ppl;
  std::optional<MixtureSpec> mixture;  // pack runs only
  std::string output_path;             // empty: do not write a report file
  std::uint64_t seed = 0;

  void validate() const;  // throws ConfigError
};

struct InstanceRecord {
  Prediction prediction;
  int ref_index = -1;
  std::string ref_text;
  bool correct = false;
};

struct RunReport {
  RunConfig config;
  std::vector<InstanceRecord> instances;  // original dataset order
  std::string metric_name;
  double metric_value = 0.0;
  CacheStats cache;
  std::size_t prefix_tokens = 0;      // warmed level-1 prefix length
  std::uint64_t generated_tokens = 0;  // decode steps, outside CacheStats
  double wall_ms = 0.0;
};

// Loads the dataset, formats instances against a shared few-shot prefix,
// schedules them through the prefix cache, scores per mode, and (when
// config.output_path is set) writes the JSON report. Reports are
// reproducible from (config, seed) except for the timing section.
RunReport run_eval(const RunConfig& config);

// Stable-field-order serialization; "timing" is the only nondeterministic
// section. Schema: docs/report.schema.json.
std::string report_to_json(const RunReport& report);

struct PackInput {
  std::string id;
  std::string path;  // JSONL: objects with "text" (string) or "tokens" (array)
};

struct PackConfig {
  enum class Type { pretrain, instructions };

  std::vector<PackInput> inputs;
  Type type = Type::instructions;
  std::size_t max_len = 1024;
  std::optional<Token> separator;  // required for pretrain packing
  bool keep_final_partial = true;
  bool skip_oversize = false;
  std::optional<MixtureSpec> mixture;  // ids refer to inputs
  std::string output_path;
  bool binary = false;  // also write token stream + sidecar index
  std::uint64_t seed = 0;

  void validate() const;
};

struct PackSummary {
  std::size_t blocks = 0;
  std::size_t total_tokens = 0;
  std::size_t pad_tokens = 0;
  double pad_fraction = 0.0;
  std::uint64_t token_hash = 0;
  std::size_t skipped_oversize = 0;
  std::string warning;  // e.g. empty corpus
};

// Packs the corpus and writes <output>.jsonl plus <output>.summary.json
// (and the binary pair when requested). Rerunning an identical config
// produces identical files.
PackSummary run_pack(const PackConfig& config);

std::string pack_summary_to_json(const PackSummary& summary);

}  // namespace lmkit
