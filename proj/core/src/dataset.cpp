#include "lmkit/dataset.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "lmkit/errors.hpp"
#include "lmkit/rng.hpp"

namespace lmkit {

using json = nlohmann::json;

ScoringMode parse_scoring_mode(std::string_view name) {
  if (name == "generation") return ScoringMode::generation;
  if (name == "ppl_options") return ScoringMode::ppl_options;
  if (name == "letter_options") return ScoringMode::letter_options;
  throw ConfigError("unknown scoring mode: " + std::string(name));
}

std::string_view to_string(ScoringMode mode) {
  switch (mode) {
    case ScoringMode::generation: return "generation";
    case ScoringMode::ppl_options: return "ppl_options";
    case ScoringMode::letter_options: return "letter_options";
  }
  return "unknown";
}

namespace {

[[noreturn]] void schema_error(std::size_t line, const std::string& what) {
  throw SchemaError("line " + std::to_string(line) + ": " + what);
}

std::string require_string(const json& obj, const std::string& field,
                           std::size_t line) {
  auto it = obj.find(field);
  if (it == obj.end()) schema_error(line, "missing required field '" + field + "'");
  if (it->is_string()) return it->get<std::string>();
  if (it->is_number_integer())
    return std::to_string(it->get<long long>());
  schema_error(line, "field '" + field + "' must be a string");
}

}  // namespace

LoadedDataset load_dataset(const std::string& path, const DatasetSchema& schema) {
  std::ifstream in(path);
  if (!in) throw SchemaError("cannot open dataset file: " + path);

  const bool needs_choices = schema.mode != ScoringMode::generation;
  LoadedDataset out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;

    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::parse_error& e) {
      schema_error(line_no, std::string("invalid JSON: ") + e.what());
    }
    if (!obj.is_object()) schema_error(line_no, "record must be a JSON object");

    RawExample ex;
    ex.id = require_string(obj, schema.id_field, line_no);
    ex.fields["question"] = require_string(obj, schema.question_field, line_no);

    if (auto it = obj.find(schema.split_field); it != obj.end()) {
      const std::string split = it->get<std::string>();
      if (split == "train") ex.split = Split::train;
      else if (split == "eval") ex.split = Split::eval;
      else schema_error(line_no, "field '" + schema.split_field +
                                     "' must be 'train' or 'eval'");
    }

    if (needs_choices) {
      auto it = obj.find(schema.choices_field);
      if (it == obj.end())
        schema_error(line_no, "missing required field '" + schema.choices_field + "'");
      if (!it->is_array() || it->empty())
        schema_error(line_no, "field '" + schema.choices_field +
                                  "' must be a non-empty array");
      for (const auto& c : *it) {
        if (!c.is_string())
          schema_error(line_no, "choices must be strings");
        ex.choices.push_back(c.get<std::string>());
      }

      auto ans = obj.find(schema.answer_field);
      if (ans == obj.end())
        schema_error(line_no, "missing required field '" + schema.answer_field + "'");
      if (ans->is_number_integer()) {
        const long long idx = ans->get<long long>();
        if (idx < 0 || static_cast<std::size_t>(idx) >= ex.choices.size())
          schema_error(line_no, "answer index out of range");
        ex.answer_index = static_cast<int>(idx);
      } else if (ans->is_string()) {
        const std::string text = ans->get<std::string>();
        auto pos = std::find(ex.choices.begin(), ex.choices.end(), text);
        if (pos == ex.choices.end())
          schema_error(line_no, "answer string not found among choices");
        ex.answer_index = static_cast<int>(pos - ex.choices.begin());
      } else {
        schema_error(line_no, "field '" + schema.answer_field +
                                  "' must be an index or a choice string");
      }
      ex.fields["answer"] = ex.choices[static_cast<std::size_t>(ex.answer_index)];
    } else {
      ex.fields["answer"] = require_string(obj, schema.answer_field, line_no);
    }

    (ex.split == Split::train ? out.example_pool : out.eval_examples)
        .push_back(std::move(ex));
  }

  auto check_duplicates = [](const std::vector<RawExample>& examples,
                             const char* split_name) {
    std::set<std::string> seen, dup;
    for (const auto& ex : examples)
      if (!seen.insert(ex.id).second) dup.insert(ex.id);
    if (!dup.empty()) {
      std::ostringstream msg;
      msg << "duplicate ids in " << split_name << " split:";
      for (const auto& id : dup) msg << " " << id;
      throw SchemaError(msg.str());
    }
  };
  check_duplicates(out.eval_examples, "eval");
  check_duplicates(out.example_pool, "train");

  if (out.eval_examples.empty())
    throw ContractError("dataset has no eval examples: " + path);
  return out;
}

const std::string& PromptTemplate::label(std::size_t index) const {
  static const std::vector<std::string> defaults = [] {
    std::vector<std::string> v;
    for (char c = 'A'; c <= 'Z'; ++c) v.emplace_back(1, c);
    return v;
  }();
  const auto& labels = option_labels.empty() ? defaults : option_labels;
  if (index >= labels.size())
    throw ContractError("not enough option labels for option " +
                        std::to_string(index));
  return labels[index];
}

TokenSequence ByteTokenizer::encode(std::string_view text) const {
  TokenSequence out;
  out.reserve(text.size());
  for (unsigned char c : text) out.push_back(static_cast<Token>(c));
  return out;
}

std::string ByteTokenizer::decode(const TokenSequence& tokens) const {
  std::string out;
  out.reserve(tokens.size());
  for (Token t : tokens) {
    if (t < 0 || t >= 256)
      throw ContractError("token id " + std::to_string(t) + " is not a byte");
    out.push_back(static_cast<char>(static_cast<unsigned char>(t)));
  }
  return out;
}

TokenSequence EvalInstance::prompt() const {
  TokenSequence out = fewshot_prefix;
  out.insert(out.end(), context.begin(), context.end());
  return out;
}

std::vector<RawExample> select_fewshot(const std::vector<RawExample>& pool,
                                       std::size_t k, std::uint64_t seed) {
  if (k > pool.size())
    throw ContractError("requested " + std::to_string(k) +
                        " few-shot examples from a pool of " +
                        std::to_string(pool.size()));
  std::vector<std::size_t> order(pool.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  SplitMix64 rng(derive_seed(seed, "fewshot"));
  rng.shuffle(order);
  std::vector<RawExample> out;
  out.reserve(k);
  for (std::size_t i = 0; i < k; ++i) out.push_back(pool[order[i]]);
  return out;
}

std::string render_example(const RawExample& example, const PromptTemplate& tmpl,
                           const DatasetSchema& schema, bool include_answer) {
  std::ostringstream out;
  out << "Question: " << example.fields.at("question") << "\n";
  if (schema.mode == ScoringMode::letter_options) {
    for (std::size_t i = 0; i < example.choices.size(); ++i)
      out << tmpl.label(i) << ". " << example.choices[i] << "\n";
  }
  out << "Answer:";
  if (include_answer) {
    switch (schema.mode) {
      case ScoringMode::ppl_options:
        out << " " << example.choices.at(static_cast<std::size_t>(example.answer_index));
        break;
      case ScoringMode::letter_options:
        out << " " << tmpl.label(static_cast<std::size_t>(example.answer_index));
        break;
      case ScoringMode::generation:
        out << " " << example.fields.at("answer");
        break;
    }
  }
  return out.str();
}

std::string render_fewshot_prefix(const PromptTemplate& tmpl,
                                  const DatasetSchema& schema,
                                  const std::vector<RawExample>& fewshot) {
  std::string out;
  if (!tmpl.instruction.empty()) out += tmpl.instruction + tmpl.example_separator;
  for (const auto& ex : fewshot)
    out += render_example(ex, tmpl, schema, true) + tmpl.example_separator;
  return out;
}

InstanceFormatter::InstanceFormatter(PromptTemplate tmpl, DatasetSchema schema,
                                     std::vector<RawExample> fewshot,
                                     ByteTokenizer tokenizer, std::size_t max_seq_len)
    : tmpl_(std::move(tmpl)),
      schema_(std::move(schema)),
      fewshot_(std::move(fewshot)),
      tokenizer_(tokenizer),
      max_seq_len_(max_seq_len) {
  prefix_text_ = render_fewshot_prefix(tmpl_, schema_, fewshot_);
  prefix_tokens_ = tokenizer_.encode(prefix_text_);
}

EvalInstance InstanceFormatter::format(const RawExample& example) const {
  for (const auto& shot : fewshot_)
    if (shot.id == example.id)
      throw ContractError("instance " + example.id +
                          " appears among its own few-shot examples");

  EvalInstance inst;
  inst.id = example.id;
  inst.mode = schema_.mode;
  inst.fewshot_prefix = prefix_tokens_;
  inst.context = tokenizer_.encode(render_example(example, tmpl_, schema_, false));

  std::size_t longest_option = 0;
  switch (schema_.mode) {
    case ScoringMode::ppl_options:
      for (const auto& choice : example.choices) {
        const std::string text = " " + choice;
        inst.options.push_back(tokenizer_.encode(text));
        inst.option_bytes.push_back(text.size());
        longest_option = std::max(longest_option, inst.options.back().size());
      }
      inst.ref_index = example.answer_index;
      inst.ref_text = example.choices.at(static_cast<std::size_t>(example.answer_index));
      break;
    case ScoringMode::letter_options:
      for (std::size_t i = 0; i < example.choices.size(); ++i) {
        const TokenSequence toks = tokenizer_.encode(" " + tmpl_.label(i));
        // " A" tokenizes to {space, letter}; the letter byte is the option token.
        inst.letter_tokens.push_back(toks.back());
      }
      inst.ref_index = example.answer_index;
      inst.ref_text = tmpl_.label(static_cast<std::size_t>(example.answer_index));
      break;
    case ScoringMode::generation:
      inst.ref_text = example.fields.at("answer");
      break;
  }

  if (max_seq_len_ > 0) {
    const std::size_t need =
        inst.fewshot_prefix.size() + inst.context.size() + longest_option;
    if (need > max_seq_len_)
      throw LengthError("instance " + inst.id + " renders to " +
                        std::to_string(need) + " tokens, exceeding max_seq_len " +
                        std::to_string(max_seq_len_));
  }
  return inst;
}

EvalInstance format_instance(const RawExample& example, const PromptTemplate& tmpl,
                             const DatasetSchema& schema,
                             const std::vector<RawExample>& fewshot,
                             const ByteTokenizer& tokenizer, std::size_t max_seq_len) {
  InstanceFormatter formatter(tmpl, schema, fewshot, tokenizer, max_seq_len);
  return formatter.format(example);
}

}  // namespace lmkit
