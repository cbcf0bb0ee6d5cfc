#pragma once

// Full detector: featurizer -> query selection -> region-language decoder ->
// box/objectness head and DAG text head.

#include <rtgen/dag_head.hpp>
#include <rtgen/evaluation.hpp>
#include <rtgen/featurizer.hpp>
#include <rtgen/objective.hpp>
#include <rtgen/rl_decoder.hpp>

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace rtgen {

enum class DecodeMode { viterbi, greedy };

template <typename T>
struct ModelOutput {
  DiffArray<T> boxes;   // [N, 4] normalized cxcywh
  DiffArray<T> logits;  // [N, 1] objectness
  QueryState<T> queries;
  TextState<T> text;
  std::vector<TokenDAG<T>> dags;
  std::vector<Index> selected;

  BoxPreds box_preds() const {
    BoxPreds out;
    for (Index j = 0; j < boxes.rows(); ++j) {
      out.boxes.push_back({static_cast<double>(boxes.value()(j, 0)), static_cast<double>(boxes.value()(j, 1)),
                           static_cast<double>(boxes.value()(j, 2)), static_cast<double>(boxes.value()(j, 3))});
      out.objectness_logits.push_back(static_cast<double>(logits.value()(j, 0)));
    }
    return out;
  }
};

/// Side length of the reference box each query starts from.
inline constexpr double kAnchorSize = 0.25;

template <typename T>
class RtGenModel {
 public:
  RtGenModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    std::mt19937_64 rng(seed);
    featurizer_ = FeaturizerParams<T>(cfg_, rng);
    slots_ = make_slot_embeddings<T>(cfg_, rng);
    for (Index l = 0; l < cfg_.decoder_layers; ++l) decoder_.emplace_back(cfg_, rng);
    box_hidden_ = Linear<T>(cfg_.d, cfg_.d, rng);
    box_out_ = Linear<T>(cfg_.d, 4, rng);
    objectness_ = Linear<T>(cfg_.d, 1, rng);
    dag_head_ = DagHeadParams<T>(cfg_.d, cfg_.vocab_size, rng);
  }

  const ModelConfig& config() const { return cfg_; }
  const FeaturizerParams<T>& featurizer() const { return featurizer_; }
  const std::vector<DecoderLayerParams<T>>& decoder() const { return decoder_; }
  const DiffArray<T>& slot_embeddings() const { return slots_; }
  const DagHeadParams<T>& dag_head() const { return dag_head_; }

  /// Every trainable array with a stable name, in a fixed order.
  ParameterList<T> parameters() const {
    ParameterList<T> list;
    featurizer_.collect(list, "featurizer");
    list.push_back({"text.slots", slots_});
    for (std::size_t l = 0; l < decoder_.size(); ++l) decoder_[l].collect(list, "decoder" + std::to_string(l));
    box_hidden_.collect(list, "head.box_hidden");
    box_out_.collect(list, "head.box_out");
    objectness_.collect(list, "head.objectness");
    dag_head_.collect(list, "dag");
    return list;
  }

  ModelOutput<T> forward(const Image& image) const {
    FeatureMap<T> fm = patch_embed(image, featurizer_, cfg_);
    DiffArray<T> memory = encode(fm, featurizer_);
    QuerySelection<T> sel = select_queries(memory, featurizer_, cfg_);
    TextState<T> t1 = init_text_state(slots_, cfg_.queries);
    CrossPositions<T> pos;
    std::vector<Index> rows(sel.indices);
    pos.memory = DiffArray<T>::constant(fm.positions);
    pos.queries = gather_rows(pos.memory, std::move(rows));
    auto [q, text] = run_decoder(QueryState<T>{sel.queries}, t1, memory, decoder_, cfg_.cross_positions ? &pos : nullptr);

    ModelOutput<T> out;
    out.boxes = sigmoid(add(box_out_(relu(box_hidden_(q.queries))), DiffArray<T>::constant(anchor_logits(sel.indices))));
    // The selection score acts as the prior objectness of the query's token.
    out.logits = add(objectness_(q.queries), sel.logits);
    out.dags = build_dags(text.embeddings, cfg_.queries, dag_head_);
    out.queries = q;
    out.text = text;
    out.selected = sel.indices;
    return out;
  }

  /// Inference: boxes, objectness and decoded names; final_score is the
  /// objectness until rescaled.
  std::vector<Detection> predict(const Image& image, DecodeMode mode = DecodeMode::viterbi) const {
    ModelOutput<T> out = forward(image);
    std::vector<Detection> dets;
    const BoxPreds preds = out.box_preds();
    for (Index j = 0; j < cfg_.queries; ++j) {
      Detection det;
      det.box = preds.boxes[static_cast<std::size_t>(j)];
      det.objectness = 1.0 / (1.0 + std::exp(-preds.objectness_logits[static_cast<std::size_t>(j)]));
      const NamePrediction name = mode == DecodeMode::viterbi ? viterbi_decode(out.dags[static_cast<std::size_t>(j)])
                                                              : greedy_decode(out.dags[static_cast<std::size_t>(j)]);
      det.name = name.token_ids;
      det.log_score = name.log_score;
      det.final_score = det.objectness;
      dets.push_back(std::move(det));
    }
    return dets;
  }

 private:
  Matrix<T> anchor_logits(const std::vector<Index>& indices) const {
    const Index grid = cfg_.grid();
    auto logit = [](double p) { return std::log(p / (1.0 - p)); };
    Matrix<T> a(static_cast<Index>(indices.size()), 4);
    for (std::size_t n = 0; n < indices.size(); ++n) {
      const auto row = static_cast<Index>(n);
      a(row, 0) = static_cast<T>(logit((static_cast<double>(indices[n] % grid) + 0.5) / static_cast<double>(grid)));
      a(row, 1) = static_cast<T>(logit((static_cast<double>(indices[n] / grid) + 0.5) / static_cast<double>(grid)));
      a(row, 2) = static_cast<T>(logit(kAnchorSize));
      a(row, 3) = static_cast<T>(logit(kAnchorSize));
    }
    return a;
  }

  ModelConfig cfg_;
  FeaturizerParams<T> featurizer_;
  DiffArray<T> slots_;
  std::vector<DecoderLayerParams<T>> decoder_;
  Linear<T> box_hidden_;
  Linear<T> box_out_;
  Linear<T> objectness_;
  DagHeadParams<T> dag_head_;
};

}  // namespace rtgen
