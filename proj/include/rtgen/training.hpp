#pragma once

#include <rtgen/checkpoint.hpp>
#include <rtgen/config.hpp>
#include <rtgen/evaluation.hpp>
#include <rtgen/model.hpp>
#include <rtgen/optim.hpp>
#include <rtgen/synthdata.hpp>

#include <filesystem>
#include <optional>
#include <span>
#include <vector>

namespace rtgen {

using TrainModel = RtGenModel<float>;

struct EvalSummary {
  EvalReport report;
  double exact_name_rate = 0.0;
  std::vector<std::vector<Detection>> detections;  // rescaled, per image
};

/// Inference over a dataset, rescaling against the dataset's own name set.
EvalSummary evaluate_model(const TrainModel& model, const Dataset& data, DecodeMode mode = DecodeMode::viterbi);

/// Fraction of ground-truth objects whose best-scoring overlapping
/// (IoU >= 0.5) detection generated exactly the ground-truth name.
double exact_name_rate(const std::vector<std::vector<Detection>>& detections, const Dataset& data);

/// Rejects datasets whose vocabulary or name lengths do not fit the model.
void check_dataset_fits(const ModelConfig& cfg, const Dataset& data);

class Trainer {
 public:
  explicit Trainer(const RunConfig& cfg);

  /// Loads model, optimizer state and epoch counter from a checkpoint.
  static Trainer resume(const std::filesystem::path& checkpoint);

  /// One pass over `data` in a seed- and epoch-determined order. Returns the
  /// per-sample mean of each loss term.
  LossBreakdown train_epoch(const Dataset& data);
  /// Accumulates gradients over `batch` and takes one optimizer step.
  LossBreakdown train_step(std::span<const DetectionSample* const> batch);

  int epoch() const { return epoch_; }
  const TrainModel& model() const { return model_; }
  const RunConfig& config() const { return cfg_; }
  const Vocabulary& vocab() const { return vocab_; }
  void set_vocab(const Vocabulary& vocab) { vocab_ = vocab; }

  /// Writes `path` (tensors) and `path.json` (config, vocabulary, epoch).
  void save(const std::filesystem::path& path) const;

 private:
  RunConfig cfg_;
  TrainModel model_;
  ParameterList<float> params_;
  AdamW<float> optimizer_;
  Vocabulary vocab_;
  int epoch_ = 0;
};

struct LoadedModel {
  RunConfig config;
  Vocabulary vocab;
  TrainModel model;
};

/// Parameters only; the sidecar supplies config and vocabulary.
LoadedModel load_model(const std::filesystem::path& checkpoint);

std::filesystem::path sidecar_path(const std::filesystem::path& checkpoint);

}  // namespace rtgen
