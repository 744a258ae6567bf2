#include "lmkit/runner.hpp"

#include <chrono>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "lmkit/rng.hpp"
#include "lmkit/version.hpp"

namespace lmkit {

using ordered_json = nlohmann::ordered_json;

ModelConfig default_eval_model() {
  ModelConfig cfg;
  cfg.vocab_size = 320;  // byte tokenizer needs >= 256
  cfg.num_layers = 2;
  cfg.hidden_size = 32;
  cfg.num_heads = 4;
  cfg.max_seq_len = 2048;
  cfg.seed = 0;
  return cfg;
}

PplRanking parse_ppl_ranking(std::string_view name) {
  if (name == "avg_ppl") return PplRanking::avg_ppl;
  if (name == "per_token") return PplRanking::normalized_per_token;
  if (name == "per_byte") return PplRanking::normalized_per_byte;
  throw ConfigError("unknown ppl ranking: " + std::string(name));
}

std::string_view to_string(PplRanking ranking) {
  switch (ranking) {
    case PplRanking::avg_ppl: return "avg_ppl";
    case PplRanking::normalized_per_token: return "per_token";
    case PplRanking::normalized_per_byte: return "per_byte";
  }
  return "unknown";
}

void RunConfig::validate() const {
  if (backend != "toy")
    throw ConfigError("unknown backend '" + backend + "' (available: toy)");
  model.validate();
  if (model.vocab_size < 256)
    throw ConfigError("byte-tokenized runs need model vocab_size >= 256");
  if (dataset_path.empty()) throw ConfigError("dataset path is required");
  if (schema.mode == ScoringMode::generation) generation.validate();
}

namespace {

ordered_json config_json(const RunConfig& c) {
  ordered_json model = {{"vocab_size", c.model.vocab_size},
                        {"num_layers", c.model.num_layers},
                        {"hidden_size", c.model.hidden_size},
                        {"num_heads", c.model.num_heads},
                        {"max_seq_len", c.model.max_seq_len},
                        {"seed", c.model.seed}};
  ordered_json gen = {
      {"strategy", c.generation.strategy == DecodeStrategy::greedy ? "greedy" : "sample"},
      {"temperature", c.generation.temperature},
      {"top_p", c.generation.top_p},
      {"repetition_penalty", c.generation.repetition_penalty},
      {"max_new_tokens", c.generation.max_new_tokens},
      {"stop_token", c.generation.stop_token ? ordered_json(*c.generation.stop_token)
                                             : ordered_json(nullptr)},
      {"num_samples", c.generation.num_samples}};
  const long long budget =
      c.cache_budget_tokens == std::numeric_limits<std::size_t>::max()
          ? -1
          : static_cast<long long>(c.cache_budget_tokens);
  return ordered_json{{"backend", c.backend},
                      {"model", model},
                      {"dataset", c.dataset_path},
                      {"mode", std::string(to_string(c.schema.mode))},
                      {"shots", c.shots},
                      {"instruction", c.prompt.instruction},
                      {"ranking", std::string(to_string(c.ppl_ranking))},
                      {"use_cache", c.use_cache},
                      {"cache_budget_tokens", budget},
                      {"generation", gen},
                      {"seed", c.seed}};
}

ordered_json scored_json(const ScoredOption& s) {
  return ordered_json{{"index", s.option_index},
                      {"sum_logprob", s.sum_logprob},
                      {"token_count", s.token_count},
                      {"byte_count", s.byte_count},
                      {"avg_ppl", s.avg_ppl},
                      {"normalized_score", s.normalized_score}};
}

}  // namespace

RunReport run_eval(const RunConfig& config) {
  const auto t0 = std::chrono::steady_clock::now();
  config.validate();

  const LoadedDataset data = load_dataset(config.dataset_path, config.schema);
  if (config.shots > data.example_pool.size())
    throw ConfigError("--shots " + std::to_string(config.shots) +
                      " exceeds example pool size " +
                      std::to_string(data.example_pool.size()));

  const std::vector<RawExample> fewshot =
      select_fewshot(data.example_pool, config.shots, config.seed);
  const ByteTokenizer tokenizer;
  const InstanceFormatter formatter(config.prompt, config.schema, fewshot,
                                    tokenizer, config.model.max_seq_len);

  const auto backend = build_toy_model(config.model);

  std::optional<PrefixTrie> trie;
  if (config.use_cache)
    trie.emplace(Budget{config.cache_budget_tokens});
  PrefixTrie* cache = trie ? &*trie : nullptr;

  RunReport report;
  report.config = config;

  // Warm the shared few-shot prefix once (level 1).
  if (cache != nullptr && !formatter.fewshot_prefix_tokens().empty()) {
    cache->acquire(*backend, formatter.fewshot_prefix_tokens());
    report.prefix_tokens = formatter.fewshot_prefix_tokens().size();
  }

  std::vector<EvalInstance> instances;
  instances.reserve(data.eval_examples.size());
  for (const auto& ex : data.eval_examples) instances.push_back(formatter.format(ex));

  std::vector<TokenSequence> prompts;
  prompts.reserve(instances.size());
  for (const auto& inst : instances) prompts.push_back(inst.prompt());
  const Schedule sched = schedule(prompts);

  GenerationConfig gen = config.generation;
  gen.seed = derive_seed(config.seed, "generation");

  report.instances.resize(instances.size());
  for (std::size_t idx : sched.order) {
    const EvalInstance& inst = instances[idx];
    const TokenSequence prompt = prompts[idx];
    InstanceRecord record;
    record.ref_index = inst.ref_index;
    record.ref_text = inst.ref_text;
    Prediction& pred = record.prediction;
    pred.instance_id = inst.id;
    pred.prompt_tokens = prompt.size();

    switch (inst.mode) {
      case ScoringMode::ppl_options: {
        PerplexityResult res = score_perplexity(*backend, cache, prompt,
                                                inst.options, &inst.option_bytes);
        std::size_t chosen = res.chosen;
        if (config.ppl_ranking == PplRanking::normalized_per_token)
          chosen = score_normalized(res.options, Normalization::per_token);
        else if (config.ppl_ranking == PplRanking::normalized_per_byte)
          chosen = score_normalized(res.options, Normalization::per_byte);
        pred.chosen_index = static_cast<int>(chosen);
        pred.options = std::move(res.options);
        record.correct = pred.chosen_index == record.ref_index;
        break;
      }
      case ScoringMode::letter_options: {
        pred.chosen_index = static_cast<int>(
            score_option_letter(*backend, cache, prompt, inst.letter_tokens));
        record.correct = pred.chosen_index == record.ref_index;
        break;
      }
      case ScoringMode::generation: {
        const std::vector<TokenSequence> samples =
            generate(*backend, cache, prompt, gen, inst.id);
        for (const auto& s : samples) {
          report.generated_tokens += s.size();
          pred.samples.push_back(tokenizer.decode(s));
        }
        if (gen.num_samples > 1) {
          const auto answer = aggregate_self_consistency(pred.samples);
          pred.answered = answer.has_value();
          pred.generated = answer.value_or("");
        } else {
          pred.generated = pred.samples.front();
        }
        record.correct = pred.answered &&
                         normalize_answer(pred.generated) == normalize_answer(inst.ref_text);
        break;
      }
    }
    report.instances[idx] = std::move(record);
  }

  const bool generation_mode = config.schema.mode == ScoringMode::generation;
  report.metric_name = generation_mode ? "exact_match" : "accuracy";
  std::size_t correct = 0;
  for (const auto& rec : report.instances) correct += rec.correct ? 1 : 0;
  report.metric_value =
      static_cast<double>(correct) / static_cast<double>(report.instances.size());

  if (cache != nullptr) report.cache = cache->stats();
  report.wall_ms = std::chrono::duration<double, std::milli>(
                       std::chrono::steady_clock::now() - t0)
                       .count();

  if (!config.output_path.empty()) {
    std::ofstream out(config.output_path, std::ios::binary | std::ios::trunc);
    if (!out) throw ContractError("cannot write report: " + config.output_path);
    out << report_to_json(report);
  }
  return report;
}

std::string report_to_json(const RunReport& report) {
  ordered_json doc;
  doc["schema_version"] = kReportSchemaVersion;
  doc["version"] = std::string(kVersion);
  doc["config"] = config_json(report.config);

  ordered_json predictions = ordered_json::array();
  const bool generation_mode = report.config.schema.mode == ScoringMode::generation;
  for (const auto& rec : report.instances) {
    ordered_json p;
    p["id"] = rec.prediction.instance_id;
    if (generation_mode) {
      p["generated"] = rec.prediction.generated;
      p["answered"] = rec.prediction.answered;
      p["samples"] = rec.prediction.samples;
      p["reference_text"] = rec.ref_text;
    } else {
      p["chosen_index"] = rec.prediction.chosen_index;
      p["reference_index"] = rec.ref_index;
      if (!rec.prediction.options.empty()) {
        ordered_json options = ordered_json::array();
        for (const auto& s : rec.prediction.options) options.push_back(scored_json(s));
        p["options"] = options;
      }
    }
    p["correct"] = rec.correct;
    p["prompt_tokens"] = rec.prediction.prompt_tokens;
    predictions.push_back(std::move(p));
  }
  doc["predictions"] = predictions;
  doc["metrics"] = ordered_json{{report.metric_name, report.metric_value}};
  doc["cache"] = ordered_json{{"tokens_computed", report.cache.tokens_computed},
                              {"tokens_reused", report.cache.tokens_reused},
                              {"hits", report.cache.hits},
                              {"misses", report.cache.misses},
                              {"evictions", report.cache.evictions},
                              {"prefix_tokens", report.prefix_tokens}};
  doc["generated_tokens"] = report.generated_tokens;
  doc["timing"] = ordered_json{{"wall_ms", report.wall_ms}};
  return doc.dump(2) + "\n";
}

void PackConfig::validate() const {
  if (inputs.empty()) throw ConfigError("at least one --input is required");
  if (max_len < 2) throw ConfigError("--max-len must be >= 2");
  if (type == Type::pretrain && !separator)
    throw ConfigError("pre-training packing requires an explicit --separator token");
  if (output_path.empty()) throw ConfigError("output path is required");
  if (mixture) {
    for (const auto& entry : mixture->entries) {
      bool known = false;
      for (const auto& input : inputs) known = known || input.id == entry.dataset_id;
      if (!known)
        throw ConfigError("mixture references unknown input id: " + entry.dataset_id);
    }
  }
}

namespace {

// Pack corpora are JSONL records carrying either pre-tokenized ids or text
// for the byte tokenizer. Records are carried as RawExamples so the mixture
// sampler can operate on them.
std::vector<RawExample> load_pack_corpus(const std::string& id,
                                         const std::string& path) {
  std::ifstream in(path);
  if (!in) throw SchemaError("cannot open corpus file: " + path);
  std::vector<RawExample> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    ordered_json obj;
    try {
      obj = ordered_json::parse(line);
    } catch (const ordered_json::parse_error& e) {
      throw SchemaError("line " + std::to_string(line_no) + ": invalid JSON: " +
                        e.what());
    }
    RawExample ex;
    ex.id = id + ":" + std::to_string(line_no);
    if (obj.contains("tokens")) {
      ex.fields["tokens"] = obj.at("tokens").dump();
    } else if (obj.contains("text")) {
      ex.fields["text"] = obj.at("text").get<std::string>();
    } else {
      throw SchemaError("line " + std::to_string(line_no) +
                        ": record needs a 'text' or 'tokens' field");
    }
    out.push_back(std::move(ex));
  }
  return out;
}

TokenSequence record_tokens(const RawExample& ex, const ByteTokenizer& tokenizer) {
  if (auto it = ex.fields.find("tokens"); it != ex.fields.end())
    return ordered_json::parse(it->second).get<TokenSequence>();
  return tokenizer.encode(ex.fields.at("text"));
}

}  // namespace

PackSummary run_pack(const PackConfig& config) {
  config.validate();
  const ByteTokenizer tokenizer;

  std::map<std::string, std::vector<RawExample>> corpora;
  for (const auto& input : config.inputs)
    corpora[input.id] = load_pack_corpus(input.id, input.path);

  std::vector<RawExample> records;
  if (config.mixture) {
    MixtureSpec spec = *config.mixture;
    if (spec.seed == 0) spec.seed = config.seed;
    records = sample_mixture(spec, corpora);
  } else {
    for (const auto& input : config.inputs)
      for (const auto& ex : corpora[input.id]) records.push_back(ex);
  }

  std::vector<TokenSequence> sequences;
  sequences.reserve(records.size());
  for (const auto& ex : records) sequences.push_back(record_tokens(ex, tokenizer));

  PackSummary summary;
  std::vector<PackedBlock> blocks;
  if (sequences.empty()) {
    summary.warning = "empty corpus: no blocks emitted";
  } else if (config.type == PackConfig::Type::pretrain) {
    blocks = pack_pretrain(sequences, config.max_len, *config.separator,
                           config.keep_final_partial);
  } else {
    std::vector<TokenSequence> kept;
    std::vector<std::string> oversize;
    for (std::size_t i = 0; i < sequences.size(); ++i) {
      if (sequences[i].size() > config.max_len)
        oversize.push_back(records[i].id + " (" +
                           std::to_string(sequences[i].size()) + " tokens)");
      else
        kept.push_back(sequences[i]);
    }
    if (!oversize.empty() && !config.skip_oversize) {
      std::ostringstream msg;
      msg << "conversations exceed max_len " << config.max_len << ":";
      for (const auto& o : oversize) msg << " " << o;
      throw ContractError(msg.str());
    }
    summary.skipped_oversize = oversize.size();
    blocks = pack_instructions(kept, config.max_len);
  }

  write_packed_jsonl(config.output_path, blocks);
  if (config.binary)
    write_packed_binary(config.output_path + ".bin",
                        config.output_path + ".index.json", blocks, config.max_len);

  summary.blocks = blocks.size();
  for (const auto& b : blocks) {
    summary.total_tokens += b.tokens.size();
    summary.pad_tokens += b.pad_count;
  }
  summary.pad_fraction =
      blocks.empty() ? 0.0
                     : static_cast<double>(summary.pad_tokens) /
                           static_cast<double>(blocks.size() * config.max_len);
  summary.token_hash = token_stream_hash(blocks);

  std::ofstream out(config.output_path + ".summary.json",
                    std::ios::binary | std::ios::trunc);
  if (!out)
    throw ContractError("cannot write summary: " + config.output_path +
                        ".summary.json");
  out << pack_summary_to_json(summary);
  return summary;
}

std::string pack_summary_to_json(const PackSummary& summary) {
  ordered_json doc{{"blocks", summary.blocks},
                   {"total_tokens", summary.total_tokens},
                   {"pad_tokens", summary.pad_tokens},
                   {"pad_fraction", summary.pad_fraction},
                   {"token_hash", summary.token_hash},
                   {"skipped_oversize", summary.skipped_oversize}};
  if (!summary.warning.empty()) doc["warning"] = summary.warning;
  return doc.dump(2) + "\n";
}

}  // namespace lmkit
