#include <rtgen/config.hpp>

#include <json.hpp>

#include <fstream>
#include <iterator>
#include <set>

namespace rtgen {
namespace {

using json = nlohmann::ordered_json;

/// Reads known keys from an object and rejects everything else.
class Reader {
 public:
  Reader(const json& obj, std::string where) : obj_(obj), where_(std::move(where)) {
    if (!obj_.is_object()) throw ConfigError(where_ + ": expected an object");
  }
  void finish() const {
    for (const auto& [key, _] : obj_.items()) {
      if (!seen_.count(key)) throw ConfigError(where_ + ": unknown key '" + key + "'");
    }
  }

  template <typename V>
  void get(const char* key, V& target) {
    seen_.insert(key);
    if (!obj_.contains(key)) return;
    try {
      target = obj_.at(key).get<V>();
    } catch (const json::exception& e) {
      throw ConfigError(where_ + "." + key + ": " + e.what());
    }
  }

  const json* child(const char* key) {
    seen_.insert(key);
    return obj_.contains(key) ? &obj_.at(key) : nullptr;
  }

 private:
  const json& obj_;
  std::string where_;
  std::set<std::string> seen_;
};

json model_json(const ModelConfig& m) {
  return {{"d", m.d},
          {"queries", m.queries},
          {"text_tokens", m.text_tokens},
          {"decoder_layers", m.decoder_layers},
          {"heads", m.heads},
          {"encoder_layers", m.encoder_layers},
          {"patch", m.patch},
          {"image_size", m.image_size},
          {"vocab_size", m.vocab_size},
          {"ffn_dim", m.ffn_dim},
          {"cross_positions", m.cross_positions}};
}

void read_model(const json& j, ModelConfig& m) {
  Reader r(j, "model");
  r.get("d", m.d);
  r.get("queries", m.queries);
  r.get("text_tokens", m.text_tokens);
  r.get("decoder_layers", m.decoder_layers);
  r.get("heads", m.heads);
  r.get("encoder_layers", m.encoder_layers);
  r.get("patch", m.patch);
  r.get("image_size", m.image_size);
  r.get("vocab_size", m.vocab_size);
  r.get("ffn_dim", m.ffn_dim);
  r.get("cross_positions", m.cross_positions);
  r.finish();
}

json data_json(const DataConfig& d) {
  json colors = json::array();
  for (const auto& c : d.gen.colors) colors.push_back({{"name", c.name}, {"rgb", c.rgb}});
  return {{"train_samples", d.train_samples},
          {"val_samples", d.val_samples},
          {"seed", d.seed},
          {"image_size", d.gen.image_size},
          {"min_shapes", d.gen.min_shapes},
          {"max_shapes", d.gen.max_shapes},
          {"min_size", d.gen.min_size},
          {"max_size", d.gen.max_size},
          {"small_up_to", d.gen.small_up_to},
          {"large_from", d.gen.large_from},
          {"size_gap", d.gen.size_gap},
          {"placement_attempts", d.gen.placement_attempts},
          {"background", d.gen.background},
          {"colors", colors},
          {"shapes", d.gen.shapes}};
}

void read_data(const json& j, DataConfig& d) {
  Reader r(j, "data");
  r.get("train_samples", d.train_samples);
  r.get("val_samples", d.val_samples);
  r.get("seed", d.seed);
  r.get("image_size", d.gen.image_size);
  r.get("min_shapes", d.gen.min_shapes);
  r.get("max_shapes", d.gen.max_shapes);
  r.get("min_size", d.gen.min_size);
  r.get("max_size", d.gen.max_size);
  r.get("small_up_to", d.gen.small_up_to);
  r.get("large_from", d.gen.large_from);
  r.get("size_gap", d.gen.size_gap);
  r.get("placement_attempts", d.gen.placement_attempts);
  r.get("background", d.gen.background);
  r.get("shapes", d.gen.shapes);
  if (const json* colors = r.child("colors")) {
    if (!colors->is_array()) throw ConfigError("data.colors: expected an array");
    d.gen.colors.clear();
    for (const auto& c : *colors) {
      ColorSpec spec;
      Reader cr(c, "data.colors[]");
      cr.get("name", spec.name);
      cr.get("rgb", spec.rgb);
      cr.finish();
      d.gen.colors.push_back(spec);
    }
  }
  r.finish();
}

json train_json(const TrainConfig& t) {
  return {{"epochs", t.epochs},
          {"batch_size", t.batch_size},
          {"seed", t.seed},
          {"lr", t.optimizer.lr},
          {"beta1", t.optimizer.beta1},
          {"beta2", t.optimizer.beta2},
          {"weight_decay", t.optimizer.weight_decay},
          {"eps", t.optimizer.eps},
          {"lambda_reg", t.loss.reg},
          {"lambda_iou", t.loss.iou},
          {"lambda_obj", t.loss.obj},
          {"lambda_dag", t.loss.dag},
          {"warmup_steps", t.warmup_steps},
          {"clip_norm", t.clip_norm},
          {"augment", t.augment},
          {"augment_shift", t.augment_shift}};
}

void read_train(const json& j, TrainConfig& t) {
  Reader r(j, "train");
  r.get("epochs", t.epochs);
  r.get("batch_size", t.batch_size);
  r.get("seed", t.seed);
  r.get("lr", t.optimizer.lr);
  r.get("beta1", t.optimizer.beta1);
  r.get("beta2", t.optimizer.beta2);
  r.get("weight_decay", t.optimizer.weight_decay);
  r.get("eps", t.optimizer.eps);
  r.get("lambda_reg", t.loss.reg);
  r.get("lambda_iou", t.loss.iou);
  r.get("lambda_obj", t.loss.obj);
  r.get("lambda_dag", t.loss.dag);
  r.get("warmup_steps", t.warmup_steps);
  r.get("clip_norm", t.clip_norm);
  r.get("augment", t.augment);
  r.get("augment_shift", t.augment_shift);
  r.finish();
}

}  // namespace

void RunConfig::validate() const {
  model.validate();
  try {
    data.gen.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("data: ") + e.what());
  }
  if (data.gen.image_size != model.image_size) throw ConfigError("data.image_size must equal model.image_size");
  if (data.train_samples < 0 || data.val_samples < 0) throw ConfigError("sample counts must be non-negative");
  if (train.epochs < 0) throw ConfigError("train.epochs must be non-negative");
  if (train.warmup_steps < 0 || train.clip_norm < 0) throw ConfigError("train.warmup_steps and train.clip_norm must be non-negative");
  if (train.augment_shift < 0) throw ConfigError("train.augment_shift must be non-negative");
  if (train.batch_size < 1) throw ConfigError("train.batch_size must be at least 1");
  if (!(train.optimizer.lr > 0)) throw ConfigError("train.lr must be positive");
  if (train.optimizer.beta1 < 0 || train.optimizer.beta1 >= 1 || train.optimizer.beta2 < 0 || train.optimizer.beta2 >= 1) {
    throw ConfigError("train.beta1/beta2 must lie in [0, 1)");
  }
  if (train.optimizer.weight_decay < 0 || !(train.optimizer.eps > 0)) throw ConfigError("bad weight decay or eps");
}

std::string to_json_string(const RunConfig& cfg) {
  json doc{{"model", model_json(cfg.model)},
           {"data", data_json(cfg.data)},
           {"train", train_json(cfg.train)},
           {"paths", {{"data_dir", cfg.paths.data_dir}, {"out_dir", cfg.paths.out_dir}}}};
  return doc.dump(2);
}

RunConfig run_config_from_json_string(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  RunConfig cfg;
  Reader r(doc, "config");
  if (const json* m = r.child("model")) read_model(*m, cfg.model);
  if (const json* d = r.child("data")) read_data(*d, cfg.data);
  if (const json* t = r.child("train")) read_train(*t, cfg.train);
  if (const json* p = r.child("paths")) {
    Reader pr(*p, "paths");
    pr.get("data_dir", cfg.paths.data_dir);
    pr.get("out_dir", cfg.paths.out_dir);
    pr.finish();
  }
  r.finish();
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  return run_config_from_json_string(std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>()));
}

void save_run_config(const std::filesystem::path& path, const RunConfig& cfg) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << to_json_string(cfg) << '\n';
}

}  // namespace rtgen
