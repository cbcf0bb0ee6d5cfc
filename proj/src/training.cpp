#include <rtgen/training.hpp>

#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>

namespace rtgen {
namespace {

using json = nlohmann::ordered_json;

constexpr const char* kModelPrefix = "model.";
constexpr const char* kMomentPrefix = "optim.m.";
constexpr const char* kVelocityPrefix = "optim.v.";
constexpr const char* kStepTensor = "optim.step";

void assign_parameters(const ParameterList<float>& params, const std::vector<NamedTensor>& tensors) {
  for (const auto& p : params) {
    const std::string name = kModelPrefix + p.name;
    auto it = std::find_if(tensors.begin(), tensors.end(), [&](const NamedTensor& t) { return t.name == name; });
    if (it == tensors.end()) throw CheckpointError("checkpoint is missing tensor " + name);
    DiffArray<float> array = p.array;
    assign_tensor(*it, array.mutable_value(), array.shape());
  }
}

struct Sidecar {
  RunConfig config;
  Vocabulary vocab;
  int epoch = 0;
};

Sidecar read_sidecar(const std::filesystem::path& checkpoint) {
  const auto path = sidecar_path(checkpoint);
  std::ifstream in(path);
  if (!in) throw CheckpointError("cannot open " + path.string());
  json doc;
  try {
    doc = json::parse(in);
    Sidecar s{run_config_from_json_string(doc.at("config").dump()), Vocabulary(), doc.at("epoch").get<int>()};
    auto entries = doc.at("vocab").get<std::vector<std::string>>();
    if (entries.size() < 2) throw CheckpointError("sidecar vocabulary lacks reserved entries");
    s.vocab = Vocabulary(std::vector<std::string>(entries.begin() + 2, entries.end()));
    return s;
  } catch (const json::exception& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  }
}

}  // namespace

std::filesystem::path sidecar_path(const std::filesystem::path& checkpoint) {
  return std::filesystem::path(checkpoint.string() + ".json");
}

void check_dataset_fits(const ModelConfig& cfg, const Dataset& data) {
  if (static_cast<Index>(data.vocab.size()) != cfg.vocab_size) {
    throw ConfigError("dataset vocabulary has " + std::to_string(data.vocab.size()) + " entries but model.vocab_size is " +
                      std::to_string(cfg.vocab_size));
  }
  for (const auto& s : data.samples) {
    if (s.image.width != cfg.image_size || s.image.height != cfg.image_size) {
      throw ConfigError("dataset image size does not match model.image_size");
    }
    for (const auto& n : s.names) {
      if (static_cast<Index>(n.size()) + 1 > cfg.text_tokens) {
        throw ConfigError("a dataset name needs " + std::to_string(n.size() + 1) + " DAG vertices but text_tokens is " +
                          std::to_string(cfg.text_tokens));
      }
    }
  }
}

double exact_name_rate(const std::vector<std::vector<Detection>>& detections, const Dataset& data) {
  std::size_t hits = 0;
  std::size_t total = 0;
  for (std::size_t i = 0; i < data.samples.size(); ++i) {
    const auto& s = data.samples[i];
    for (std::size_t g = 0; g < s.boxes.size(); ++g) {
      ++total;
      const Detection* best = nullptr;
      for (const auto& det : detections[i]) {
        if (iou(to_xyxy(det.box), to_xyxy(s.boxes[g])) < 0.5) continue;
        if (!best || det.objectness > best->objectness) best = &det;
      }
      if (best && best->name == s.names[g]) ++hits;
    }
  }
  return total ? static_cast<double>(hits) / static_cast<double>(total) : 0.0;
}

EvalSummary evaluate_model(const TrainModel& model, const Dataset& data, DecodeMode mode) {
  EvalSummary out;
  std::vector<std::vector<TokenSequence>> names;
  for (const auto& s : data.samples) names.push_back(s.names);
  const auto categories = collect_categories(names);
  std::vector<ImageGroundTruth> gts;
  for (const auto& s : data.samples) {
    ImageGroundTruth gt{s.boxes, {}};
    for (const auto& n : s.names) gt.categories.push_back(category_index(categories, n));
    gts.push_back(std::move(gt));
    auto dets = model.predict(s.image, mode);
    if (!categories.empty()) dets = rescale_scores(std::move(dets), categories);
    out.detections.push_back(std::move(dets));
  }
  out.report = compute_ap(out.detections, gts);
  out.exact_name_rate = exact_name_rate(out.detections, data);
  return out;
}

Trainer::Trainer(const RunConfig& cfg)
    : cfg_(cfg), model_(cfg.model, cfg.train.seed), params_(model_.parameters()), optimizer_(cfg.train.optimizer) {
  cfg_.validate();
}

LossBreakdown Trainer::train_step(std::span<const DetectionSample* const> batch) {
  LossBreakdown mean;
  if (batch.empty()) return mean;
  const float inv = 1.0f / static_cast<float>(batch.size());
  for (const DetectionSample* sample : batch) {
    ModelOutput<float> out = model_.forward(sample->image);
    const Eigen::MatrixXd cost = matching_cost(out.box_preds(), sample->boxes, cfg_.train.loss);
    const MatchAssignment assignment = hungarian_match(cost);
    auto [loss, parts] = total_loss(out.boxes, out.logits, out.dags, std::span<const BoxCxcywh>(sample->boxes),
                                    std::span<const TokenSequence>(sample->names), assignment, cfg_.train.loss);
    backward(scale(loss, inv));
    mean.total += parts.total * inv;
    mean.reg += parts.reg * inv;
    mean.iou += parts.iou * inv;
    mean.obj += parts.obj * inv;
    mean.dag += parts.dag * inv;
  }
  clip_grad_norm(params_, cfg_.train.clip_norm);
  double lr = cfg_.train.optimizer.lr;
  if (cfg_.train.warmup_steps > 0) {
    const double progress = static_cast<double>(optimizer_.step_count() + 1) / static_cast<double>(cfg_.train.warmup_steps);
    lr *= std::min(1.0, progress);
  }
  optimizer_.step(params_, lr);
  zero_grad(params_);
  return mean;
}

LossBreakdown Trainer::train_epoch(const Dataset& data) {
  check_dataset_fits(cfg_.model, data);
  std::vector<std::size_t> order(data.samples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(cfg_.train.seed * 0x9E3779B97F4A7C15ULL + static_cast<std::uint64_t>(epoch_) + 1);
  std::shuffle(order.begin(), order.end(), rng);

  LossBreakdown sum;
  const auto batch_size = static_cast<std::size_t>(cfg_.train.batch_size);
  std::vector<const DetectionSample*> batch;
  std::vector<DetectionSample> views;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    batch.clear();
    views.clear();
    const std::size_t stop = std::min(order.size(), start + batch_size);
    for (std::size_t i = start; i < stop; ++i) {
      const DetectionSample& sample = data.samples[order[i]];
      if (cfg_.train.augment) views.push_back(augment_sample(sample, rng, cfg_.train.augment_shift, cfg_.data.gen.background));
    }
    for (std::size_t i = start; i < stop; ++i) {
      batch.push_back(cfg_.train.augment ? &views[i - start] : &data.samples[order[i]]);
    }
    const LossBreakdown step = train_step(batch);
    const double w = static_cast<double>(batch.size());
    sum.total += step.total * w;
    sum.reg += step.reg * w;
    sum.iou += step.iou * w;
    sum.obj += step.obj * w;
    sum.dag += step.dag * w;
  }
  ++epoch_;
  const double n = std::max<double>(1.0, static_cast<double>(order.size()));
  return {sum.total / n, sum.reg / n, sum.iou / n, sum.obj / n, sum.dag / n};
}

void Trainer::save(const std::filesystem::path& path) const {
  std::vector<NamedTensor> tensors;
  for (const auto& p : params_) tensors.push_back(to_tensor(kModelPrefix + p.name, p.array));
  const auto& state = optimizer_.state();
  for (std::size_t i = 0; i < state.size(); ++i) {
    tensors.push_back(to_tensor(kMomentPrefix + params_[i].name, state[i].m, params_[i].array.shape()));
    tensors.push_back(to_tensor(kVelocityPrefix + params_[i].name, state[i].v, params_[i].array.shape()));
  }
  tensors.push_back({kStepTensor, {1}, {static_cast<float>(optimizer_.step_count())}});
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  save_tensors(path, tensors);

  json side;
  side["config"] = json::parse(to_json_string(cfg_));
  side["vocab"] = vocab_.entries();
  side["epoch"] = epoch_;
  std::ofstream out(sidecar_path(path));
  if (!out) throw CheckpointError("cannot write " + sidecar_path(path).string());
  out << side.dump(2) << '\n';
}

Trainer Trainer::resume(const std::filesystem::path& checkpoint) {
  const Sidecar side = read_sidecar(checkpoint);
  Trainer trainer(side.config);
  trainer.vocab_ = side.vocab;
  trainer.epoch_ = side.epoch;
  const auto tensors = load_tensors(checkpoint);
  assign_parameters(trainer.params_, tensors);
  auto find = [&](const std::string& name) -> const NamedTensor* {
    auto it = std::find_if(tensors.begin(), tensors.end(), [&](const NamedTensor& t) { return t.name == name; });
    return it == tensors.end() ? nullptr : &*it;
  };
  const NamedTensor* step = find(kStepTensor);
  if (step && !step->data.empty() && step->data[0] > 0) {
    std::vector<OptimState<float>> state;
    for (const auto& p : trainer.params_) {
      const NamedTensor* m = find(kMomentPrefix + p.name);
      const NamedTensor* v = find(kVelocityPrefix + p.name);
      if (!m || !v) throw CheckpointError("checkpoint is missing optimizer state for " + p.name);
      OptimState<float> st{Matrix<float>(p.array.rows(), p.array.cols()), Matrix<float>(p.array.rows(), p.array.cols())};
      assign_tensor(*m, st.m, p.array.shape());
      assign_tensor(*v, st.v, p.array.shape());
      state.push_back(std::move(st));
    }
    trainer.optimizer_.restore(std::move(state), static_cast<std::int64_t>(step->data[0]));
  }
  return trainer;
}

LoadedModel load_model(const std::filesystem::path& checkpoint) {
  const Sidecar side = read_sidecar(checkpoint);
  side.config.validate();
  LoadedModel loaded{side.config, side.vocab, TrainModel(side.config.model, side.config.train.seed)};
  assign_parameters(loaded.model.parameters(), load_tensors(checkpoint));
  return loaded;
}

}  // namespace rtgen
