#pragma once

// Run configuration: model shape, data generation, optimization and paths.
// Serialized as a single JSON document; every field has a default and
// unknown keys are rejected.

#include <rtgen/featurizer.hpp>
#include <rtgen/objective.hpp>
#include <rtgen/optim.hpp>
#include <rtgen/synthdata.hpp>

#include <cstdint>
#include <filesystem>
#include <string>

namespace rtgen {

struct DataConfig {
  GenConfig gen;
  int train_samples = 2000;
  int val_samples = 200;
  std::uint64_t seed = 1;
};

struct TrainConfig {
  int epochs = 30;
  int batch_size = 16;
  std::uint64_t seed = 0;
  AdamWOptions optimizer;
  LossWeights loss;
  /// Linear learning-rate ramp over the first optimizer steps (0 = off).
  int warmup_steps = 0;
  /// Global gradient-norm limit (0 = off).
  double clip_norm = 0.0;
  /// Random flips, quarter turns and shifts of each training image.
  bool augment = false;
  int augment_shift = 8;
};

struct PathConfig {
  std::string data_dir = "data";
  std::string out_dir = "runs/default";
};

struct RunConfig {
  ModelConfig model;
  DataConfig data;
  TrainConfig train;
  PathConfig paths;

  /// Throws ConfigError on any inconsistent field.
  void validate() const;
};

std::string to_json_string(const RunConfig& cfg);
/// Missing keys keep their defaults; unknown keys throw ConfigError.
RunConfig run_config_from_json_string(const std::string& text);

RunConfig load_run_config(const std::filesystem::path& path);
void save_run_config(const std::filesystem::path& path, const RunConfig& cfg);

}  // namespace rtgen
