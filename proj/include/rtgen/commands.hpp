#pragma once

// Pipeline commands behind the command-line tool.

#include <rtgen/config.hpp>
#include <rtgen/model.hpp>
#include <rtgen/training.hpp>

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace rtgen {

/// Exit codes of the command-line tool.
inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitData = 3;

/// Seeds of split `split` (0 = train, 1 = val) never collide with the other.
std::uint64_t scene_seed(std::uint64_t base, int split, int index);

/// Writes `out_dir/train` and `out_dir/val`.
void cmd_gen(const RunConfig& cfg, const std::filesystem::path& out_dir);

struct TrainOptions {
  std::optional<std::filesystem::path> resume;
  std::ostream* log = nullptr;
};

struct TrainResult {
  std::vector<std::string> metrics_rows;
  double best_val_ap50 = -1.0;
  std::filesystem::path best_checkpoint;
  std::filesystem::path last_checkpoint;
};

inline constexpr const char* kMetricsHeader = "epoch,total_loss,reg_loss,iou_loss,obj_loss,dag_loss,val_AP50,val_exact_name";

/// Trains on `paths.data_dir/train`, validates on `paths.data_dir/val`, and
/// writes metrics.csv, best.ckpt and last.ckpt under `paths.out_dir`.
TrainResult cmd_train(const RunConfig& cfg, const TrainOptions& options = {});

/// Writes report.json, pr_curves.csv and predictions.json to `out_dir`.
EvalSummary cmd_eval(const std::filesystem::path& checkpoint, const std::filesystem::path& data_dir,
                     const std::filesystem::path& out_dir, DecodeMode mode = DecodeMode::viterbi);

/// JSON array of the top-k detections (by objectness, at least `threshold`).
std::string cmd_infer(const std::filesystem::path& checkpoint, const std::filesystem::path& image, DecodeMode mode,
                      int topk, double threshold);

enum class SweepAxis { text_tokens, decoder_layers };

inline constexpr const char* kSweepHeader = "axis,value,AP,AP50,AP75,params";

/// Trains one model per value and writes one CSV row per value.
void cmd_sweep(const RunConfig& cfg, SweepAxis axis, const std::vector<int>& values, const std::filesystem::path& csv,
               std::ostream* log = nullptr);

SweepAxis parse_sweep_axis(const std::string& name);
DecodeMode parse_decode_mode(const std::string& name);

}  // namespace rtgen
