#include <rtgen/commands.hpp>

#include <CLI11.hpp>
#include <json.hpp>

#include <iostream>

namespace {

int report_error(const char* code, const std::string& message, int exit_code) {
  nlohmann::ordered_json line{{"code", code}, {"message", message}};
  std::cerr << "error: " << line.dump() << '\n';
  return exit_code;
}

rtgen::RunConfig resolve_config(const std::string& path, const std::optional<std::uint64_t>& seed,
                                const std::optional<std::string>& out) {
  rtgen::RunConfig cfg = path.empty() ? rtgen::RunConfig{} : rtgen::load_run_config(path);
  if (seed) {
    cfg.train.seed = *seed;
    cfg.data.seed = *seed;
  }
  if (out) cfg.paths.out_dir = *out;
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"RTGen generative object detector"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "JSON run configuration")->check(CLI::ExistingFile);
    cmd->add_option("--seed", seed, "Overrides data and training seeds");
    cmd->add_option("--out", out, "Output directory (or file for sweep)");
  };

  auto* gen = app.add_subcommand("gen", "Generate the synthetic train/val splits");
  add_common(gen);

  auto* train = app.add_subcommand("train", "Train a model");
  add_common(train);
  std::string resume;
  std::string data_dir;
  train->add_option("--resume", resume, "Checkpoint to continue from")->check(CLI::ExistingFile);
  train->add_option("--data", data_dir, "Dataset root with train/ and val/");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset split");
  add_common(eval);
  std::string checkpoint;
  std::string decode = "viterbi";
  eval->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  eval->add_option("--data", data_dir, "Dataset split directory")->required();
  eval->add_option("--decode", decode, "viterbi or greedy");

  auto* infer = app.add_subcommand("infer", "Detect and name objects in one PPM image");
  add_common(infer);
  std::string image;
  int topk = 10;
  double threshold = 0.0;
  infer->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  infer->add_option("--image", image, "PPM image")->required();
  infer->add_option("--topk", topk, "Maximum number of detections");
  infer->add_option("--threshold", threshold, "Minimum objectness");
  infer->add_option("--decode", decode, "viterbi or greedy");

  auto* sweep = app.add_subcommand("sweep", "Train one model per value of an ablation axis");
  add_common(sweep);
  std::string axis;
  std::vector<int> values;
  sweep->add_option("--axis", axis, "text_tokens or decoder_layers")->required();
  sweep->add_option("--values", values, "Values to train")->delimiter(',');
  sweep->add_option("--data", data_dir, "Dataset root with train/ and val/");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    return report_error("usage", e.what(), rtgen::kExitConfig);
  }

  try {
    if (gen->parsed()) {
      const auto cfg = resolve_config(config_path, seed, out);
      rtgen::cmd_gen(cfg, out ? *out : cfg.paths.data_dir);
    } else if (train->parsed()) {
      auto cfg = resolve_config(config_path, seed, out);
      if (!data_dir.empty()) cfg.paths.data_dir = data_dir;
      rtgen::TrainOptions options;
      if (!resume.empty()) options.resume = resume;
      options.log = &std::cout;
      const auto result = rtgen::cmd_train(cfg, options);
      std::cout << "best val AP50 " << result.best_val_ap50 << '\n';
    } else if (eval->parsed()) {
      const auto mode = rtgen::parse_decode_mode(decode);
      const auto summary = rtgen::cmd_eval(checkpoint, data_dir, out ? *out : std::string("eval"), mode);
      std::cout << "AP " << summary.report.ap << " AP50 " << summary.report.ap50 << " AP75 " << summary.report.ap75
                << " exact_name " << summary.exact_name_rate << '\n';
    } else if (infer->parsed()) {
      const auto mode = rtgen::parse_decode_mode(decode);
      std::cout << rtgen::cmd_infer(checkpoint, image, mode, topk, threshold) << '\n';
    } else if (sweep->parsed()) {
      const auto parsed_axis = rtgen::parse_sweep_axis(axis);
      auto cfg = resolve_config(config_path, seed, std::nullopt);
      if (!data_dir.empty()) cfg.paths.data_dir = data_dir;
      if (values.empty()) {
        values = parsed_axis == rtgen::SweepAxis::text_tokens ? std::vector<int>{7, 8, 9, 10} : std::vector<int>{5, 6, 7, 8};
      }
      const std::filesystem::path csv = out ? std::filesystem::path(*out) : std::filesystem::path(cfg.paths.out_dir) / ("sweep_" + axis + ".csv");
      rtgen::cmd_sweep(cfg, parsed_axis, values, csv, &std::cout);
    }
  } catch (const rtgen::ConfigError& e) {
    return report_error("config", e.what(), rtgen::kExitConfig);
  } catch (const rtgen::DatasetError& e) {
    return report_error("data", e.what(), rtgen::kExitData);
  } catch (const rtgen::CheckpointError& e) {
    return report_error("data", e.what(), rtgen::kExitData);
  } catch (const std::exception& e) {
    return report_error("internal", e.what(), 1);
  }
  return rtgen::kExitOk;
}
