#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "lmkit/gpu_calc.hpp"
#include "lmkit/runner.hpp"
#include "lmkit/version.hpp"

namespace {

// Single-line machine-parseable error record on stderr.
void print_error(const std::string& type, const std::string& message) {
  nlohmann::ordered_json err{{"error", {{"type", type}, {"message", message}}}};
  std::cerr << err.dump() << "\n";
}

int classify(const std::exception& e) {
  // 1 = validation (bad config/flags/schema), 2 = runtime.
  if (dynamic_cast<const lmkit::ConfigError*>(&e) != nullptr ||
      dynamic_cast<const lmkit::SchemaError*>(&e) != nullptr)
    return 1;
  return 2;
}

const char* error_type(int code) { return code == 1 ? "validation" : "runtime"; }

struct EvalArgs {
  lmkit::RunConfig config;
  std::string mode = "ppl_options";
  std::string ranking = "avg_ppl";
  std::string strategy = "greedy";
  long long cache_budget = -1;  // -1 = unlimited
  long long stop_token = 10;    // '\n'; -1 disables
};

void add_eval(CLI::App& app, EvalArgs& args) {
  CLI::App* eval = app.add_subcommand("eval", "score a dataset with the toy backend");
  eval->add_option("-m,--model", args.config.backend, "backend name")
      ->capture_default_str();
  eval->add_option("-d,--dataset", args.config.dataset_path, "dataset JSONL path")
      ->required();
  eval->add_option("--mode", args.mode,
                   "generation | ppl_options | letter_options")
      ->capture_default_str();
  eval->add_option("--shots", args.config.shots, "few-shot examples")
      ->capture_default_str();
  eval->add_option("--sample_num,--num-samples", args.config.generation.num_samples,
                   "samples per instance (generation mode)")
      ->capture_default_str();
  eval->add_option("--strategy", args.strategy, "greedy | sample")
      ->capture_default_str();
  eval->add_option("--temperature", args.config.generation.temperature)
      ->capture_default_str();
  eval->add_option("--top_p", args.config.generation.top_p)->capture_default_str();
  eval->add_option("--repetition-penalty", args.config.generation.repetition_penalty)
      ->capture_default_str();
  eval->add_option("--max-new-tokens", args.config.generation.max_new_tokens)
      ->capture_default_str();
  eval->add_option("--stop-token", args.stop_token,
                   "stop at this token id; -1 disables")
      ->capture_default_str();
  eval->add_option("--ranking", args.ranking, "avg_ppl | per_token | per_byte")
      ->capture_default_str();
  eval->add_flag("--no-cache", [&args](std::int64_t) { args.config.use_cache = false; },
                 "disable prefix caching");
  eval->add_option("--cache-budget", args.cache_budget,
                   "cached tokens budget; -1 = unlimited")
      ->capture_default_str();
  eval->add_option("--instruction", args.config.prompt.instruction,
                   "instruction text prepended to the few-shot prefix");
  eval->add_option("--question-field", args.config.schema.question_field)
      ->capture_default_str();
  eval->add_option("--choices-field", args.config.schema.choices_field)
      ->capture_default_str();
  eval->add_option("--answer-field", args.config.schema.answer_field)
      ->capture_default_str();
  eval->add_option("--vocab-size", args.config.model.vocab_size)->capture_default_str();
  eval->add_option("--layers", args.config.model.num_layers)->capture_default_str();
  eval->add_option("--hidden", args.config.model.hidden_size)->capture_default_str();
  eval->add_option("--heads", args.config.model.num_heads)->capture_default_str();
  eval->add_option("--max-seq-len", args.config.model.max_seq_len)
      ->capture_default_str();
  eval->add_option("--model-seed", args.config.model.seed)->capture_default_str();
  eval->add_option("--seed", args.config.seed, "run seed")->capture_default_str();
  eval->add_option("-o,--output", args.config.output_path, "report JSON path")
      ->required();
}

int run_eval_cmd(EvalArgs& args) {
  args.config.schema.mode = lmkit::parse_scoring_mode(args.mode);
  args.config.ppl_ranking = lmkit::parse_ppl_ranking(args.ranking);
  if (args.strategy == "greedy")
    args.config.generation.strategy = lmkit::DecodeStrategy::greedy;
  else if (args.strategy == "sample")
    args.config.generation.strategy = lmkit::DecodeStrategy::sample;
  else
    throw lmkit::ConfigError("unknown strategy: " + args.strategy);
  if (args.cache_budget >= 0)
    args.config.cache_budget_tokens = static_cast<std::size_t>(args.cache_budget);
  if (args.stop_token >= 0)
    args.config.generation.stop_token = static_cast<lmkit::Token>(args.stop_token);
  else
    args.config.generation.stop_token.reset();

  const lmkit::RunReport report = lmkit::run_eval(args.config);
  std::cout << "instances: " << report.instances.size() << "\n"
            << report.metric_name << ": " << report.metric_value << "\n"
            << "tokens computed: " << report.cache.tokens_computed
            << ", reused: " << report.cache.tokens_reused << "\n"
            << "report: " << args.config.output_path << "\n";
  return 0;
}

struct PackArgs {
  lmkit::PackConfig config;
  std::vector<std::string> inputs;
  std::string type = "instructions";
  long long separator = -1;
  std::string mixture;
  std::string mixture_preset;
  std::size_t mixture_total = 0;
  long long mixture_seed = -1;
  bool drop_final_partial = false;
};

void add_pack(CLI::App& app, PackArgs& args) {
  CLI::App* pack = app.add_subcommand("pack", "pack corpora into training blocks");
  pack->add_option("--input", args.inputs,
                   "corpus as id=path (repeatable); JSONL with text or tokens")
      ->required();
  pack->add_option("--type", args.type, "pretrain | instructions")
      ->capture_default_str();
  pack->add_option("--max-len", args.config.max_len, "block capacity in tokens")
      ->capture_default_str();
  pack->add_option("--separator", args.separator,
                   "document separator token id (pretrain; required)");
  pack->add_flag("--drop-final-partial", args.drop_final_partial,
                 "drop the trailing partial pre-training block");
  pack->add_flag("--skip-oversize", args.config.skip_oversize,
                 "skip conversations longer than max-len instead of failing");
  pack->add_option("--mixture", args.mixture,
                   "weights as id=w,id=w (sampled instead of full concat)");
  pack->add_option("--mixture-preset", args.mixture_preset,
                   "named mixture over ids flan/alpaca, e.g. flan-50-alpaca-50");
  pack->add_option("--total", args.mixture_total, "samples to draw with --mixture");
  pack->add_option("--mixture-seed", args.mixture_seed, "mixture sampling seed");
  pack->add_flag("--binary", args.config.binary,
                 "also write <output>.bin token stream + sidecar index");
  pack->add_option("--seed", args.config.seed)->capture_default_str();
  pack->add_option("-o,--output", args.config.output_path, "packed JSONL path")
      ->required();
}

int run_pack_cmd(PackArgs& args) {
  for (const auto& spec : args.inputs) {
    const auto eq = spec.find('=');
    if (eq == std::string::npos || eq == 0 || eq + 1 >= spec.size())
      throw lmkit::ConfigError("--input must be id=path, got: " + spec);
    args.config.inputs.push_back({spec.substr(0, eq), spec.substr(eq + 1)});
  }
  if (args.type == "pretrain")
    args.config.type = lmkit::PackConfig::Type::pretrain;
  else if (args.type == "instructions")
    args.config.type = lmkit::PackConfig::Type::instructions;
  else
    throw lmkit::ConfigError("unknown pack type: " + args.type);
  if (args.separator >= 0)
    args.config.separator = static_cast<lmkit::Token>(args.separator);
  args.config.keep_final_partial = !args.drop_final_partial;

  if (!args.mixture.empty() && !args.mixture_preset.empty())
    throw lmkit::ConfigError("--mixture conflicts with --mixture-preset");
  if (!args.mixture.empty() || !args.mixture_preset.empty()) {
    lmkit::MixtureSpec spec;
    if (!args.mixture_preset.empty()) {
      const auto& presets = lmkit::mixture_presets();
      auto it = presets.find(args.mixture_preset);
      if (it == presets.end()) {
        std::string known;
        for (const auto& [name, entries] : presets) known += " " + name;
        throw lmkit::ConfigError("unknown mixture preset '" + args.mixture_preset +
                                 "'; available:" + known);
      }
      spec.entries = it->second;
    } else {
      std::stringstream ss(args.mixture);
      std::string part;
      while (std::getline(ss, part, ',')) {
        const auto eq = part.find('=');
        if (eq == std::string::npos)
          throw lmkit::ConfigError("--mixture must be id=weight,...: " + part);
        spec.entries.push_back({part.substr(0, eq), std::stod(part.substr(eq + 1))});
      }
    }
    if (args.mixture_total == 0)
      throw lmkit::ConfigError("--total is required with a mixture");
    spec.total_samples = args.mixture_total;
    spec.seed = args.mixture_seed >= 0 ? static_cast<std::uint64_t>(args.mixture_seed)
                                       : args.config.seed;
    args.config.mixture = spec;
  }

  const lmkit::PackSummary summary = lmkit::run_pack(args.config);
  if (!summary.warning.empty()) std::cerr << "warning: " << summary.warning << "\n";
  std::cout << lmkit::pack_summary_to_json(summary);
  return 0;
}

struct EstimateArgs {
  lmkit::TrainingShape shape;
  std::string preset;
  std::string gpu = "a100-80";
  std::uint64_t max_gpus = 4096;
  bool search_min = false;
  bool table = false;
  std::string json_path;
};

void add_estimate(CLI::App& app, EstimateArgs& args) {
  CLI::App* est = app.add_subcommand("estimate", "per-GPU training memory estimate");
  auto* p = est->add_option("-p,--params", args.shape.params, "total parameters");
  auto* preset =
      est->add_option("--preset", args.preset,
                      "model preset (1.3b 2.7b 6.7b 13b 30b 70b, llama2-7b ...)");
  p->excludes(preset);
  preset->excludes(p);
  est->add_option("-n,--gpus", args.shape.gpus, "GPU count")->capture_default_str();
  est->add_option("-l,--layers", args.shape.layers, "layer count");
  est->add_option("-b,--batch", args.shape.batch, "per-GPU batch size")->required();
  est->add_option("-s,--seq-len", args.shape.seq_len, "sequence length")->required();
  est->add_option("--hidden", args.shape.hidden, "hidden size");
  est->add_option("-v,--vocab", args.shape.vocab, "vocabulary size");
  est->add_option("--gpu", args.gpu, "GPU profile name or name:capacity_gib")
      ->capture_default_str();
  est->add_flag("--min-gpus", args.search_min,
                "search the minimal GPU count for --gpu instead of using -n");
  est->add_option("--max-gpus", args.max_gpus, "search bound for --min-gpus")
      ->capture_default_str();
  est->add_flag("--table", args.table, "print the preset x profile min-GPU table");
  est->add_option("--json", args.json_path, "also write the result as JSON");
}

int run_estimate_cmd(EstimateArgs& args) {
  using nlohmann::ordered_json;
  ordered_json doc;

  if (args.table) {
    const lmkit::TableReport report = lmkit::report_table(
        lmkit::model_presets(), lmkit::gpu_profiles(),
        args.shape.batch, args.shape.seq_len, args.max_gpus);
    std::cout << lmkit::render_table(report);
    doc["table"] = ordered_json::array();
    for (const auto& cell : report.cells)
      doc["table"].push_back(
          {{"model", cell.model},
           {"gpu", cell.gpu},
           {"feasible", cell.result.feasible},
           {"min_gpus", cell.result.gpus},
           {"published", cell.reference},
           {"total_gib", cell.result.feasible ? cell.result.at.total_gib() : 0.0}});
  } else {
    if (!args.preset.empty()) {
      const lmkit::ModelPreset* preset = lmkit::find_preset(args.preset);
      if (preset == nullptr)
        throw lmkit::ConfigError("unknown preset: " + args.preset);
      args.shape.params = preset->params;
      args.shape.layers = preset->layers;
      args.shape.hidden = preset->hidden;
      args.shape.vocab = preset->vocab;
    }
    if (args.shape.params == 0)
      throw lmkit::ConfigError("missing required flag -p/--params (or --preset)");
    if (args.shape.layers == 0)
      throw lmkit::ConfigError("missing required flag -l/--layers (or --preset)");
    if (args.shape.hidden == 0)
      throw lmkit::ConfigError("missing required flag --hidden (or --preset)");
    if (args.shape.vocab == 0)
      throw lmkit::ConfigError("missing required flag -v/--vocab (or --preset)");

    if (args.search_min) {
      const lmkit::GpuProfile gpu = lmkit::parse_gpu_profile(args.gpu);
      const lmkit::MinGpuResult res = lmkit::min_gpus(args.shape, gpu, args.max_gpus);
      if (res.feasible) {
        std::cout << "minimum GPUs on " << gpu.name << ": " << res.gpus << "\n"
                  << lmkit::render_estimate(args.shape, res.at);
      } else {
        std::cout << "infeasible on " << gpu.name << " within " << args.max_gpus
                  << " GPUs\n";
      }
      doc["min_gpus"] = {{"gpu", gpu.name},
                         {"feasible", res.feasible},
                         {"gpus", res.gpus}};
    } else {
      const lmkit::MemoryEstimate e = lmkit::estimate(args.shape);
      std::cout << lmkit::render_estimate(args.shape, e);
      doc["estimate"] = {{"param_gib", e.param_gib()},
                         {"activation_gib", e.activation_gib()},
                         {"logits_gib", e.logits_gib()},
                         {"total_gib", e.total_gib()}};
    }
  }

  if (!args.json_path.empty()) {
    std::ofstream out(args.json_path, std::ios::binary | std::ios::trunc);
    if (!out) throw lmkit::ContractError("cannot write: " + args.json_path);
    out << doc.dump(2) << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"lmkit: desk-scale LM evaluation, packing, and GPU estimation"};
  app.set_version_flag("--version", std::string(lmkit::kVersion));

  const char* env_config = std::getenv("LMKIT_CONFIG");
  app.set_config("--config", env_config != nullptr ? env_config : "",
                 "TOML/INI config file (default from LMKIT_CONFIG)");

  EvalArgs eval_args;
  PackArgs pack_args;
  EstimateArgs estimate_args;
  add_eval(app, eval_args);
  add_pack(app, pack_args);
  add_estimate(app, estimate_args);
  app.require_subcommand(1);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() != 0)
      print_error("validation", e.what());
    return app.exit(e);
  }

  try {
    if (app.got_subcommand("eval")) return run_eval_cmd(eval_args);
    if (app.got_subcommand("pack")) return run_pack_cmd(pack_args);
    if (app.got_subcommand("estimate")) return run_estimate_cmd(estimate_args);
    return 1;
  } catch (const std::exception& e) {
    const int code = classify(e);
    print_error(error_type(code), e.what());
    return code;
  }
}
