#include <rtgen/commands.hpp>

#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

namespace rtgen {
namespace {

using json = nlohmann::ordered_json;

std::string format_row(int epoch, const LossBreakdown& loss, double ap50, double exact) {
  std::ostringstream row;
  row << epoch << std::setprecision(9) << ',' << loss.total << ',' << loss.reg << ',' << loss.iou << ',' << loss.obj << ','
      << loss.dag << ',' << ap50 << ',' << exact;
  return row.str();
}

json detection_json(const std::string& image_id, const Detection& det, const Vocabulary& vocab) {
  std::string name;
  try {
    name = detokenize(det.name, vocab);
  } catch (const VocabularyError&) {
    name = "";
  }
  return {{"image_id", image_id},   {"box", det.box},
          {"objectness", det.objectness}, {"name", name},
          {"final_score", det.final_score}, {"log_score", det.log_score}};
}

Dataset read_split(const std::filesystem::path& dir) {
  if (!std::filesystem::exists(dir / "annotations.json")) throw DatasetError("no dataset at " + dir.string());
  return read_dataset(dir);
}

}  // namespace

std::uint64_t scene_seed(std::uint64_t base, int split, int index) {
  return base + (static_cast<std::uint64_t>(split) << 32) + static_cast<std::uint64_t>(index);
}

void cmd_gen(const RunConfig& cfg, const std::filesystem::path& out_dir) {
  cfg.validate();
  const Vocabulary vocab = synthetic_vocabulary(cfg.data.gen);
  const int counts[2] = {cfg.data.train_samples, cfg.data.val_samples};
  const char* names[2] = {"train", "val"};
  for (int split = 0; split < 2; ++split) {
    Dataset ds{vocab, {}};
    for (int i = 0; i < counts[split]; ++i) {
      ds.samples.push_back(generate_scene(scene_seed(cfg.data.seed, split, i), cfg.data.gen, vocab));
    }
    write_dataset(out_dir / names[split], ds);
  }
}

TrainResult cmd_train(const RunConfig& cfg_in, const TrainOptions& options) {
  cfg_in.validate();
  const std::filesystem::path data_dir = cfg_in.paths.data_dir;
  const Dataset train = read_split(data_dir / "train");
  const Dataset val = std::filesystem::exists(data_dir / "val" / "annotations.json") ? read_dataset(data_dir / "val")
                                                                                       : Dataset{train.vocab, {}};
  check_dataset_fits(cfg_in.model, train);
  check_dataset_fits(cfg_in.model, val);

  Trainer trainer = options.resume ? Trainer::resume(*options.resume) : Trainer(cfg_in);
  if (options.resume) {
    if (trainer.vocab() != train.vocab) throw ConfigError("checkpoint vocabulary differs from the dataset");
  } else {
    trainer.set_vocab(train.vocab);
  }
  const std::filesystem::path out_dir = cfg_in.paths.out_dir;
  std::filesystem::create_directories(out_dir);

  TrainResult result;
  result.best_checkpoint = out_dir / "best.ckpt";
  result.last_checkpoint = out_dir / "last.ckpt";
  const auto metrics_path = out_dir / "metrics.csv";
  if (options.resume && std::filesystem::exists(metrics_path)) {
    std::ifstream in(metrics_path);
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      if (std::stoi(line.substr(0, line.find(','))) > trainer.epoch()) break;
      result.metrics_rows.push_back(line);
      std::istringstream cols(line);
      std::string cell;
      for (int c = 0; c < 7 && std::getline(cols, cell, ','); ++c) {
        if (c == 6) result.best_val_ap50 = std::max(result.best_val_ap50, std::stod(cell));
      }
    }
  }

  while (trainer.epoch() < cfg_in.train.epochs) {
    const LossBreakdown loss = trainer.train_epoch(train);
    double ap50 = 0.0;
    double exact = 0.0;
    if (!val.samples.empty()) {
      const EvalSummary summary = evaluate_model(trainer.model(), val);
      ap50 = summary.report.ap50;
      exact = summary.exact_name_rate;
    }
    result.metrics_rows.push_back(format_row(trainer.epoch(), loss, ap50, exact));
    if (options.log) *options.log << result.metrics_rows.back() << std::endl;
    if (ap50 > result.best_val_ap50) {
      result.best_val_ap50 = ap50;
      trainer.save(result.best_checkpoint);
    }
    trainer.save(result.last_checkpoint);
    std::ofstream out(metrics_path);
    out << kMetricsHeader << '\n';
    for (const auto& row : result.metrics_rows) out << row << '\n';
  }
  if (!std::filesystem::exists(result.best_checkpoint)) trainer.save(result.best_checkpoint);
  if (!std::filesystem::exists(result.last_checkpoint)) trainer.save(result.last_checkpoint);
  if (!std::filesystem::exists(metrics_path)) std::ofstream(metrics_path) << kMetricsHeader << '\n';
  return result;
}

EvalSummary cmd_eval(const std::filesystem::path& checkpoint, const std::filesystem::path& data_dir,
                     const std::filesystem::path& out_dir, DecodeMode mode) {
  const LoadedModel loaded = load_model(checkpoint);
  const Dataset data = read_dataset(data_dir);
  if (data.samples.empty()) throw DatasetError("dataset at " + data_dir.string() + " is empty");
  check_dataset_fits(loaded.config.model, data);
  if (!(data.vocab == loaded.vocab)) throw ConfigError("dataset vocabulary differs from the checkpoint's");
  EvalSummary summary = evaluate_model(loaded.model, data, mode);
  std::filesystem::create_directories(out_dir);
  write_report_json(out_dir / "report.json", summary.report);
  write_pr_csv(out_dir / "pr_curves.csv", summary.report);
  json preds = json::array();
  for (std::size_t i = 0; i < summary.detections.size(); ++i) {
    for (const auto& det : summary.detections[i]) preds.push_back(detection_json(std::to_string(i + 1), det, data.vocab));
  }
  std::ofstream(out_dir / "predictions.json") << preds.dump(1) << '\n';
  return summary;
}

std::string cmd_infer(const std::filesystem::path& checkpoint, const std::filesystem::path& image_path, DecodeMode mode,
                      int topk, double threshold) {
  if (topk < 0) throw ConfigError("topk must be non-negative");
  const LoadedModel loaded = load_model(checkpoint);
  const Image image = read_ppm(image_path);
  if (image.width != loaded.config.model.image_size || image.height != loaded.config.model.image_size) {
    throw DatasetError(image_path.string() + ": image size does not match the model");
  }
  auto dets = loaded.model.predict(image, mode);
  std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) { return a.objectness > b.objectness; });
  json out = json::array();
  for (const auto& det : dets) {
    if (static_cast<int>(out.size()) >= topk) break;
    if (det.objectness < threshold) continue;
    out.push_back(detection_json(image_path.stem().string(), det, loaded.vocab));
  }
  return out.dump(2);
}

void cmd_sweep(const RunConfig& cfg, SweepAxis axis, const std::vector<int>& values, const std::filesystem::path& csv,
               std::ostream* log) {
  if (values.empty()) throw ConfigError("sweep needs at least one value");
  std::vector<RunConfig> runs;
  for (int v : values) {
    RunConfig run = cfg;
    if (axis == SweepAxis::text_tokens) {
      if (v < 2 || v > 64) throw ConfigError("text_tokens sweep value " + std::to_string(v) + " outside [2, 64]");
      run.model.text_tokens = v;
    } else {
      if (v < 1 || v > 32) throw ConfigError("decoder_layers sweep value " + std::to_string(v) + " outside [1, 32]");
      run.model.decoder_layers = v;
    }
    run.validate();
    runs.push_back(std::move(run));
  }
  const Dataset val_check = read_split(std::filesystem::path(cfg.paths.data_dir) / "train");
  for (const auto& run : runs) check_dataset_fits(run.model, val_check);

  const char* axis_name = axis == SweepAxis::text_tokens ? "text_tokens" : "decoder_layers";
  std::vector<std::string> rows;
  for (std::size_t r = 0; r < runs.size(); ++r) {
    RunConfig run = runs[r];
    run.paths.out_dir = (std::filesystem::path(cfg.paths.out_dir) / (std::string(axis_name) + "_" + std::to_string(values[r]))).string();
    const TrainResult trained = cmd_train(run, {std::nullopt, log});
    const LoadedModel best = load_model(trained.best_checkpoint);
    const auto data_dir = std::filesystem::path(run.paths.data_dir);
    const Dataset eval_set = std::filesystem::exists(data_dir / "val" / "annotations.json") ? read_dataset(data_dir / "val")
                                                                                            : read_dataset(data_dir / "train");
    const EvalSummary summary = evaluate_model(best.model, eval_set);
    std::size_t params = 0;
    for (const auto& p : best.model.parameters()) params += static_cast<std::size_t>(p.array.size());
    std::ostringstream row;
    row << axis_name << ',' << values[r] << std::setprecision(9) << ',' << summary.report.ap << ',' << summary.report.ap50 << ','
        << summary.report.ap75 << ',' << params;
    rows.push_back(row.str());
    if (log) *log << row.str() << std::endl;
  }
  if (csv.has_parent_path()) std::filesystem::create_directories(csv.parent_path());
  std::ofstream out(csv);
  if (!out) throw std::runtime_error("cannot write " + csv.string());
  out << kSweepHeader << '\n';
  for (const auto& row : rows) out << row << '\n';
}

SweepAxis parse_sweep_axis(const std::string& name) {
  if (name == "text_tokens") return SweepAxis::text_tokens;
  if (name == "decoder_layers") return SweepAxis::decoder_layers;
  throw ConfigError("unknown sweep axis '" + name + "'");
}

DecodeMode parse_decode_mode(const std::string& name) {
  if (name == "viterbi") return DecodeMode::viterbi;
  if (name == "greedy") return DecodeMode::greedy;
  throw ConfigError("unknown decode mode '" + name + "'");
}

}  // namespace rtgen
