#include "lmkit/gpu_calc.hpp"

#include <cmath>
#include <iomanip>
#include <sstream>

#include "lmkit/errors.hpp"

namespace lmkit {

namespace {

constexpr double kGiB = 1024.0 * 1024.0 * 1024.0;

std::uint64_t mul_checked(std::uint64_t a, std::uint64_t b) {
  if (a != 0 && b > UINT64_MAX / a)
    throw ConfigError("memory term overflows 64-bit byte arithmetic");
  return a * b;
}

}  // namespace

void TrainingShape::validate() const {
  auto positive = [](std::uint64_t v, const char* name) {
    if (v == 0) throw ConfigError(std::string(name) + " must be positive");
  };
  positive(params, "params");
  positive(gpus, "gpus");
  positive(layers, "layers");
  positive(batch, "batch");
  positive(seq_len, "seq_len");
  positive(hidden, "hidden");
  positive(vocab, "vocab");
}

double MemoryEstimate::param_gib() const {
  return static_cast<double>(param_bytes_times_n) / static_cast<double>(gpus) / kGiB;
}
double MemoryEstimate::activation_gib() const {
  return static_cast<double>(activation_bytes) / kGiB;
}
double MemoryEstimate::logits_gib() const {
  return static_cast<double>(logits_bytes) / kGiB;
}
double MemoryEstimate::total_gib() const {
  return param_gib() + activation_gib() + logits_gib();
}

MemoryEstimate estimate(const TrainingShape& shape) {
  shape.validate();
  MemoryEstimate e;
  e.param_bytes_times_n = mul_checked(16, shape.params);
  e.activation_bytes = mul_checked(
      mul_checked(12 + 2 * shape.layers, shape.batch),
      mul_checked(shape.seq_len, shape.hidden));
  e.logits_bytes = mul_checked(mul_checked(12, shape.batch),
                               mul_checked(shape.seq_len, shape.vocab));
  e.gpus = shape.gpus;
  return e;
}

const std::vector<GpuProfile>& gpu_profiles() {
  static const std::vector<GpuProfile> profiles = {
      {"a100-80", 80.0},
      {"a6000-48", 48.0},
  };
  return profiles;
}

GpuProfile parse_gpu_profile(const std::string& spec) {
  for (const auto& p : gpu_profiles())
    if (p.name == spec) return p;
  const auto colon = spec.find(':');
  if (colon != std::string::npos) {
    GpuProfile p;
    p.name = spec.substr(0, colon);
    try {
      p.capacity_gib = std::stod(spec.substr(colon + 1));
    } catch (...) {
      throw ConfigError("cannot parse GPU capacity in: " + spec);
    }
    if (p.name.empty() || !(p.capacity_gib > 0.0))
      throw ConfigError("GPU profile needs a name and positive GiB capacity: " + spec);
    return p;
  }
  throw ConfigError("unknown GPU profile '" + spec + "' (use name:capacity_gib)");
}

MinGpuResult min_gpus(TrainingShape shape, const GpuProfile& gpu,
                      std::uint64_t n_max) {
  if (n_max < 1) throw ConfigError("n_max must be >= 1");
  MinGpuResult out;
  for (std::uint64_t n = 1; n <= n_max; ++n) {
    shape.gpus = n;
    const MemoryEstimate e = estimate(shape);
    if (e.total_gib() <= gpu.capacity_gib) {
      out.feasible = true;
      out.gpus = n;
      out.at = e;
      return out;
    }
    // The n-independent terms alone already exceed capacity: no n can work.
    if (e.activation_gib() + e.logits_gib() > gpu.capacity_gib) break;
  }
  return out;
}

const std::vector<ModelPreset>& model_presets() {
  // 6.7b/13b/70b carry the exact LLaMA-2 parameter counts (the 16p/n term is
  // sensitive to p, so rounded "7B" style values are not used); the other
  // sizes use a dense-decoder count, 2vh + l(12h^2 + 13h) + 2h.
  static const std::vector<ModelPreset> presets = {
      {"1.3b", 1339674624ULL, 24, 2048, 32000, 1, 1},
      {"2.7b", 2681492480ULL, 32, 2560, 32000, 1, 2},
      {"6.7b", 6738415616ULL, 32, 4096, 32000, 2, 3},
      {"13b", 13015864320ULL, 40, 5120, 32000, 3, 5},
      {"30b", 30058248192ULL, 48, 7168, 32000, 8, 12},
      {"70b", 68976648192ULL, 80, 8192, 32000, 16, 26},
  };
  return presets;
}

const ModelPreset* find_preset(const std::string& name) {
  std::string key = name;
  if (key == "llama2-7b") key = "6.7b";
  if (key == "llama2-13b") key = "13b";
  if (key == "llama2-70b") key = "70b";
  for (const auto& p : model_presets())
    if (p.name == key) return &p;
  return nullptr;
}

TableReport report_table(const std::vector<ModelPreset>& presets,
                         const std::vector<GpuProfile>& profiles,
                         std::uint64_t batch, std::uint64_t seq_len,
                         std::uint64_t n_max) {
  TableReport report;
  report.batch = batch;
  report.seq_len = seq_len;
  for (const auto& preset : presets) {
    for (const auto& gpu : profiles) {
      TrainingShape shape;
      shape.params = preset.params;
      shape.layers = preset.layers;
      shape.hidden = preset.hidden;
      shape.vocab = preset.vocab;
      shape.batch = batch;
      shape.seq_len = seq_len;
      TableCell cell;
      cell.model = preset.name;
      cell.gpu = gpu.name;
      cell.result = min_gpus(shape, gpu, n_max);
      if (gpu.name == "a100-80") cell.reference = preset.reference_a100;
      if (gpu.name == "a6000-48") cell.reference = preset.reference_a6000;
      report.cells.push_back(std::move(cell));
    }
  }
  return report;
}

std::string render_estimate(const TrainingShape& shape, const MemoryEstimate& e) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(2);
  out << "per-GPU memory estimate (ZeRO-3 data parallelism, gradient "
         "checkpointing, FlashAttention)\n";
  out << "  shape: p=" << shape.params << " n=" << e.gpus << " l=" << shape.layers
      << " b=" << shape.batch << " s=" << shape.seq_len << " h=" << shape.hidden
      << " v=" << shape.vocab << "\n";
  out << "  parameters   16p/n        : " << e.param_gib() << " GiB\n";
  out << "  activations  (12+2l)*b*s*h: " << e.activation_gib() << " GiB\n";
  out << "  logits       12*b*s*v     : " << e.logits_gib() << " GiB\n";
  out << "  total                     : " << e.total_gib() << " GiB\n";
  return out.str();
}

std::string render_table(const TableReport& report) {
  std::ostringstream out;
  out << "minimum GPUs (ZeRO-3 column), assuming b=" << report.batch
      << ", s=" << report.seq_len << "\n";
  out << std::left << std::setw(8) << "model" << std::setw(16) << "params"
      << std::setw(12) << "gpu" << std::setw(10) << "computed" << std::setw(11)
      << "published" << "note\n";
  for (const auto& cell : report.cells) {
    const ModelPreset* preset = find_preset(cell.model);
    out << std::left << std::setw(8) << cell.model << std::setw(16)
        << (preset != nullptr ? std::to_string(preset->params) : std::string("-"))
        << std::setw(12) << cell.gpu;
    if (cell.result.feasible)
      out << std::setw(10) << cell.result.gpus;
    else
      out << std::setw(10) << "infeasible";
    if (cell.reference != 0)
      out << std::setw(11) << cell.reference;
    else
      out << std::setw(11) << "-";
    if (cell.reference != 0 &&
        (!cell.result.feasible || cell.result.gpus != cell.reference))
      out << "differs from published value under these (b, s) assumptions";
    out << "\n";
  }
  return out.str();
}

}  // namespace lmkit
