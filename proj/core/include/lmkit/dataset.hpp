#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "lmkit/model.hpp"

namespace lmkit {

enum class ScoringMode { generation, ppl_options, letter_options };
enum class Split { train, eval };

ScoringMode parse_scoring_mode(std::string_view name);  // throws ConfigError
std::string_view to_string(ScoringMode mode);

struct RawExample {
  std::string id;
  Split split = Split::eval;
  std::map<std::string, std::string> fields;  // question, answer, ...
  std::vector<std::string> choices;           // option modes
  int answer_index = -1;                      // resolved for option modes
};

// Field mapping for one JSONL dataset. Each line is one object; the split
// field is optional and defaults to eval.
struct DatasetSchema {
  std::string id_field = "id";
  std::string split_field = "split";
  std::string question_field = "question";
  std::string choices_field = "choices";
  std::string answer_field = "answer";
  ScoringMode mode = ScoringMode::ppl_options;
};

struct LoadedDataset {
  std::vector<RawExample> eval_examples;
  std::vector<RawExample> example_pool;  // train split
};

// Validates every line; schema errors carry the 1-based line number and the
// offending field. Duplicate ids within a split and an empty eval split are
// errors.
LoadedDataset load_dataset(const std::string& path, const DatasetSchema& schema);

struct PromptTemplate {
  std::string instruction;
  std::string example_separator = "\n\n";
  std::vector<std::string> option_labels;  // defaults to A, B, C, ...

  const std::string& label(std::size_t index) const;
};

// Fixture tokenizer: token id == byte value. Removes any external tokenizer
// dependency; a model only needs vocab_size >= 256 to consume its output.
class ByteTokenizer {
 public:
  TokenSequence encode(std::string_view text) const;
  std::string decode(const TokenSequence& tokens) const;  // throws ContractError
  std::size_t vocab_size() const { return 256; }
};

struct EvalInstance {
  std::string id;
  TokenSequence fewshot_prefix;
  TokenSequence context;
  ScoringMode mode = ScoringMode::ppl_options;
  std::vector<TokenSequence> options;     // ppl_options
  std::vector<std::size_t> option_bytes;  // rendered byte length per option
  std::vector<Token> letter_tokens;       // letter_options
  int ref_index = -1;
  std::string ref_text;

  TokenSequence prompt() const;  // fewshot_prefix + context
};

// Deterministic sample of k distinct pool examples. pre: k <= pool size.
std::vector<RawExample> select_fewshot(const std::vector<RawExample>& pool,
                                       std::size_t k, std::uint64_t seed);

// Renders instances against a fixed few-shot prefix. The prefix string is
// assembled and tokenized once in the constructor, so every instance of a run
// shares it token-for-token — the precondition for level-1 prefix caching.
class InstanceFormatter {
 public:
  InstanceFormatter(PromptTemplate tmpl, DatasetSchema schema,
                    std::vector<RawExample> fewshot, ByteTokenizer tokenizer,
                    std::size_t max_seq_len = 0);

  EvalInstance format(const RawExample& example) const;

  const TokenSequence& fewshot_prefix_tokens() const { return prefix_tokens_; }
  const std::string& fewshot_prefix_text() const { return prefix_text_; }

 private:
  PromptTemplate tmpl_;
  DatasetSchema schema_;
  std::vector<RawExample> fewshot_;
  ByteTokenizer tokenizer_;
  std::size_t max_seq_len_;
  std::string prefix_text_;
  TokenSequence prefix_tokens_;
};

EvalInstance format_instance(const RawExample& example, const PromptTemplate& tmpl,
                             const DatasetSchema& schema,
                             const std::vector<RawExample>& fewshot,
                             const ByteTokenizer& tokenizer,
                             std::size_t max_seq_len = 0);

// Rendering helpers shared by the formatter and tests.
std::string render_example(const RawExample& example, const PromptTemplate& tmpl,
                           const DatasetSchema& schema, bool include_answer);
std::string render_fewshot_prefix(const PromptTemplate& tmpl,
                                  const DatasetSchema& schema,
                                  const std::vector<RawExample>& fewshot);

}  // namespace lmkit
