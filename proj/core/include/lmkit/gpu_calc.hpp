#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace lmkit {

struct TrainingShape {
  std::uint64_t params = 0;   // p: total parameter count
  std::uint64_t gpus = 1;     // n
  std::uint64_t layers = 0;   // l
  std::uint64_t batch = 0;    // b: per-GPU batch size
  std::uint64_t seq_len = 0;  // s
  std::uint64_t hidden = 0;   // h
  std::uint64_t vocab = 0;    // v

  void validate() const;  // throws ConfigError
};

// Per-GPU training memory: 16p/n + (12+2l)*b*s*h + 12*b*s*v bytes, assuming
// data parallelism with ZeRO-3 sharding, gradient checkpointing, and fused
// attention. Byte terms are exact integers; GiB means 2^30 bytes (the unit
// derivation is documented in the README).
struct MemoryEstimate {
  std::uint64_t param_bytes_times_n = 0;  // 16p; per-GPU share is this / n
  std::uint64_t activation_bytes = 0;     // (12+2l)*b*s*h
  std::uint64_t logits_bytes = 0;         // 12*b*s*v
  std::uint64_t gpus = 1;

  double param_gib() const;
  double activation_gib() const;
  double logits_gib() const;
  double total_gib() const;
};

MemoryEstimate estimate(const TrainingShape& shape);

struct GpuProfile {
  std::string name;
  double capacity_gib = 0.0;
};

const std::vector<GpuProfile>& gpu_profiles();  // a100-80, a6000-48
GpuProfile parse_gpu_profile(const std::string& spec);  // name or name:GiB

struct MinGpuResult {
  bool feasible = false;
  std::uint64_t gpus = 0;
  MemoryEstimate at;  // estimate at the minimal count (when feasible)
};

// Smallest n in [1, n_max] with estimate(n).total <= capacity. The total is
// strictly decreasing in n, so a linear scan from 1 finds the minimum.
MinGpuResult min_gpus(TrainingShape shape, const GpuProfile& gpu,
                      std::uint64_t n_max = 4096);

struct ModelPreset {
  std::string name;
  std::uint64_t params = 0;
  std::uint64_t layers = 0;
  std::uint64_t hidden = 0;
  std::uint64_t vocab = 32000;
  // Published minimum-GPU reference for the sharded data-parallel column;
  // 0 = no reference.
  std::uint64_t reference_a100 = 0;
  std::uint64_t reference_a6000 = 0;
};

const std::vector<ModelPreset>& model_presets();
const ModelPreset* find_preset(const std::string& name);  // null if unknown

struct TableCell {
  std::string model;
  std::string gpu;
  MinGpuResult result;
  std::uint64_t reference = 0;  // 0 = no published reference
};

struct TableReport {
  std::uint64_t batch = 0;
  std::uint64_t seq_len = 0;
  std::vector<TableCell> cells;
};

// Min-GPU counts per (preset, profile) under explicit (b, s) assumptions.
// Cells that disagree with a published reference are flagged, not hidden.
TableReport report_table(const std::vector<ModelPreset>& presets,
                         const std::vector<GpuProfile>& profiles,
                         std::uint64_t batch, std::uint64_t seq_len,
                         std::uint64_t n_max = 4096);

std::string render_estimate(const TrainingShape& shape, const MemoryEstimate& e);
std::string render_table(const TableReport& report);

}  // namespace lmkit
