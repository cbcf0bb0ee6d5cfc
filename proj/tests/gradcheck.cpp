#include "gradcheck.hpp"

#include <rtgen/dag_head.hpp>
#include <rtgen/model.hpp>
#include <rtgen/objective.hpp>
#include <rtgen/synthdata.hpp>

namespace rtgen::testing {
namespace {

using Built = std::pair<std::function<D()>, std::vector<D>>;

Built unary(std::uint64_t seed, D (*op)(const D&), double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  D x = random_param({3, 4}, rng, lo, hi);
  return {[=] { return project(op(x), seed); }, {x}};
}

Built binary(std::uint64_t seed, D (*op)(const D&, const D&), double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  D a = random_param({3, 4}, rng, lo, hi);
  D b = random_param({3, 4}, rng, lo, hi);
  return {[=] { return project(op(a, b), seed); }, {a, b}};
}

Mask random_mask(Index rows, Index cols, std::mt19937_64& rng) {
  std::bernoulli_distribution keep(0.6);
  Mask m(rows, cols);
  for (Index r = 0; r < rows; ++r) {
    for (Index c = 0; c < cols; ++c) m(r, c) = keep(rng);
  }
  m(0, 0) = true;
  return m;
}

}  // namespace

std::vector<GradCase> gradient_cases() {
  std::vector<GradCase> cases;
  cases.push_back({"matmul", [](std::uint64_t s) -> Built {
                     std::mt19937_64 rng(s);
                     D a = random_param({2, 3, 4}, rng);
                     D b = random_param({4, 5}, rng);
                     return {[=] { return project(matmul(a, b), s); }, {a, b}};
                   }});
  cases.push_back({"linear", [](std::uint64_t s) -> Built {
                     std::mt19937_64 rng(s);
                     D x = random_param({5, 3}, rng);
                     D w = random_param({3, 4}, rng);
                     D b = random_param({4}, rng);
                     return {[=] { return project(linear(x, w, b), s); }, {x, w, b}};
                   }});
  cases.push_back({"add", [](std::uint64_t s) { return binary(s, &add<double>); }});
  cases.push_back({"sub", [](std::uint64_t s) { return binary(s, &sub<double>); }});
  cases.push_back({"mul", [](std::uint64_t s) { return binary(s, &mul<double>); }});
  cases.push_back({"div", [](std::uint64_t s) { return binary(s, &div<double>, 0.5, 2.0); }});
  cases.push_back({"minimum", [](std::uint64_t s) { return binary(s, &minimum<double>); }});
  cases.push_back({"maximum", [](std::uint64_t s) { return binary(s, &maximum<double>); }});
  cases.push_back({"scale_shift", [](std::uint64_t s) -> Built {
                     std::mt19937_64 rng(s);
                     D x = random_param({3, 4}, rng);
                     return {[=] { return project(add_scalar(scale(x, -1.7), 0.3), s); }, {x}};
                   }});
  cases.push_back({"relu", [](std::uint64_t s) { return unary(s, &relu<double>); }});
  cases.push_back({"sigmoid", [](std::uint64_t s) { return unary(s, &sigmoid<double>, -4.0, 4.0); }});
  cases.push_back({"exp", [](std::uint64_t s) { return unary(s, &exp<double>); }});
  cases.push_back({"log", [](std::uint64_t s) { return unary(s, &log<double>, 0.2, 3.0); }});
  cases.push_back({"abs", [](std::uint64_t s) { return unary(s, &abs<double>); }});
  cases.push_back({"sum_mean", [](std::uint64_t s) -> Built {
                     std::mt19937_64 rng(s);
                     D x = random_param({3, 4}, rng);
                     return {[=] { return add(scale(sum(mul(x, x)), 0.5), mean(exp(x))); }, {x}};
                   }});
  cases.push_back({"softmax", [](std::uint64_t s) -> Built {
                     std::mt19937_64 rng(s);
                     D x = random_param({4, 5}, rng, -2.0, 2.0);
                     return {[=] { return project(softmax(x), s); }, {x}};
                   }});
  cases.push_back({"softmax_masked", [](std::uint64_t s) -> Built {
                     std::mt19937_64 rng(s);
                     D x = random_param({4, 5}, rng, -2.0, 2.0);
                     Mask m = random_mask(4, 5, rng);
                     return {[=] { return project(softmax(x, &m), s); }, {x}};
                   }});
  cases.push_back({"log_softmax_masked", [](std::uint64_t s) -> Built {
                     std::mt19937_64 rng(s);
                     D x = random_param({4, 5}, rng, -2.0, 2.0);
                     Mask m = random_mask(4, 5, rng);
                     Matrix<double> w = random_matrix(4, 5, rng);
                     for (Index r = 0; r < 4; ++r) {
                       for (Index c = 0; c < 5; ++c) {
                         if (!m(r, c)) w(r, c) = 0.0;
                       }
                     }
                     return {[=] { return weighted_sum(log_softmax(x, &m), w); }, {x}};
                   }});
  cases.push_back({"layer_norm", [](std::uint64_t s) -> Built {
                     std::mt19937_64 rng(s);
                     D x = random_param({3, 6}, rng, -2.0, 2.0);
                     D g = random_param({6}, rng);
                     D b = random_param({6}, rng);
                     return {[=] { return project(layer_norm(x, g, b), s); }, {x, g, b}};
                   }});
  cases.push_back({"layout", [](std::uint64_t s) -> Built {
                     std::mt19937_64 rng(s);
                     D x = random_param({4, 3}, rng);
                     D y = random_param({2, 3}, rng);
                     return {[=] {
                               D c = concat_rows(x, y);
                               D g = gather_rows(c, {5, 0, 0, 3, 2});
                               D r = reshape(g, Shape{3, 5});
                               D parts = concat_cols<double>({slice_cols(slice_rows(r, 1, 2), 1, 3), slice_cols(slice_rows(r, 0, 2), 0, 1)});
                               return project(parts, s);
                             },
                             {x, y}};
                   }});
  cases.push_back({"attention", [](std::uint64_t s) -> Built {
                     std::mt19937_64 rng(s);
                     D q = random_param({2 * 3, 4}, rng);
                     D k = random_param({2 * 5, 4}, rng);
                     D v = random_param({2 * 5, 4}, rng);
                     return {[=] { return project(scaled_dot_attention(q, k, v, 2, 2), s); }, {q, k, v}};
                   }});
  cases.push_back({"attention_masked", [](std::uint64_t s) -> Built {
                     std::mt19937_64 rng(s);
                     D q = random_param({2 * 3, 4}, rng);
                     D k = random_param({2 * 5, 4}, rng);
                     D v = random_param({2 * 5, 4}, rng);
                     Mask m = random_mask(3, 5, rng);
                     return {[=] { return project(scaled_dot_attention(q, k, v, 2, 2, &m), s); }, {q, k, v}};
                   }});
  cases.push_back({"batched_scores", [](std::uint64_t s) -> Built {
                     std::mt19937_64 rng(s);
                     D q = random_param({2 * 3, 4}, rng);
                     D k = random_param({2 * 3, 4}, rng);
                     return {[=] { return project(batched_scores(q, k, 2, 0.5), s); }, {q, k}};
                   }});
  cases.push_back({"bce_with_logits", [](std::uint64_t s) -> Built {
                     std::mt19937_64 rng(s);
                     D x = random_param({5, 1}, rng, -5.0, 5.0);
                     Matrix<double> t = random_matrix(5, 1, rng, 0.0, 1.0);
                     return {[=] { return project(bce_with_logits(x, t), s); }, {x}};
                   }});
  cases.push_back({"giou", [](std::uint64_t s) -> Built {
                     std::mt19937_64 rng(s);
                     Matrix<double> p = random_matrix(4, 4, rng, 0.2, 0.8);
                     p.col(2) = random_matrix(4, 1, rng, 0.1, 0.5);
                     p.col(3) = random_matrix(4, 1, rng, 0.1, 0.5);
                     Matrix<double> t = random_matrix(4, 4, rng, 0.2, 0.8);
                     t.col(2) = random_matrix(4, 1, rng, 0.1, 0.5);
                     t.col(3) = random_matrix(4, 1, rng, 0.1, 0.5);
                     D x = D::parameter(p);
                     return {[=] { return project(giou_rows(x, t), s); }, {x}};
                   }});
  cases.push_back({"dag_nll", [](std::uint64_t s) -> Built {
                     std::mt19937_64 rng(s);
                     const Index k = 6;
                     const Index vocab = 5;
                     D text = random_param({k, 8}, rng);
                     DagHeadParams<double> head(8, vocab, rng);
                     std::uniform_int_distribution<int> len(2, static_cast<int>(k));
                     std::uniform_int_distribution<int> tok(2, static_cast<int>(vocab) - 1);
                     TokenSequence y(static_cast<std::size_t>(len(rng)));
                     for (auto& t : y) t = tok(rng);
                     y.back() = kEndToken;
                     return {[=] { return dag_nll(build_dag(text, head), std::span<const TokenId>(y)); },
                             {text, head.w_query, head.w_key, head.w_emit}};
                   }});
  cases.push_back({"total_loss_logits_and_names", [](std::uint64_t s) -> Built {
                     std::mt19937_64 rng(s);
                     const Index n = 4;
                     const Index k = 5;
                     const Index vocab = 6;
                     Matrix<double> boxes_value = random_matrix(n, 4, rng, 0.3, 0.7);
                     boxes_value.rightCols(2) = random_matrix(n, 2, rng, 0.2, 0.5);
                     D boxes = D::constant(boxes_value);
                     D logits = random_param({n, 1}, rng, -2.0, 2.0);
                     D text = random_param({n * k, 8}, rng);
                     DagHeadParams<double> head(8, vocab, rng);
                     std::vector<BoxCxcywh> gts{{0.45, 0.5, 0.3, 0.35}, {0.55, 0.4, 0.4, 0.3}};
                     std::vector<TokenSequence> names{{2, 3}, {4, 5, 3}};
                     BoxPreds preds;
                     for (Index j = 0; j < n; ++j) {
                       preds.boxes.push_back({boxes_value(j, 0), boxes_value(j, 1), boxes_value(j, 2), boxes_value(j, 3)});
                       preds.objectness_logits.push_back(logits.value()(j, 0));
                     }
                     const LossWeights w;
                     const MatchAssignment match = hungarian_match(matching_cost(preds, gts, w));
                     return {[=] {
                               const auto dags = build_dags(text, n, head);
                               return total_loss(boxes, logits, dags, std::span<const BoxCxcywh>(gts),
                                                 std::span<const TokenSequence>(names), match, w)
                                   .first;
                             },
                             {logits, text, head.w_query, head.w_key, head.w_emit}};
                   }});
  cases.push_back({"total_loss_boxes", [](std::uint64_t s) -> Built {
                     std::mt19937_64 rng(s);
                     const Index n = 4;
                     D raw = random_param({n, 4}, rng, -1.0, 1.0);
                     D logits = random_param({n, 1}, rng, -2.0, 2.0);
                     D text = D::constant(random_matrix(n * 3, 8, rng));
                     DagHeadParams<double> head(8, 5, rng);
                     std::vector<BoxCxcywh> gts{{0.45, 0.5, 0.3, 0.35}, {0.55, 0.4, 0.4, 0.3}, {0.2, 0.3, 0.2, 0.2}};
                     std::vector<TokenSequence> names{{2}, {3}, {4}};
                     LossWeights w;
                     w.dag = 0.0;
                     BoxPreds preds;
                     const Matrix<double> b0 = raw.value().unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
                     for (Index j = 0; j < n; ++j) {
                       preds.boxes.push_back({b0(j, 0), b0(j, 1), b0(j, 2), b0(j, 3)});
                       preds.objectness_logits.push_back(logits.value()(j, 0));
                     }
                     const MatchAssignment match = hungarian_match(matching_cost(preds, gts, w));
                     return {[=] {
                               const auto dags = build_dags(text, n, head);
                               return total_loss(sigmoid(raw), logits, dags, std::span<const BoxCxcywh>(gts),
                                                 std::span<const TokenSequence>(names), match, w)
                                   .first;
                             },
                             {raw, logits}};
                   }});
  return cases;
}

GradCase model_gradient_case() {
  return {"model_end_to_end", [](std::uint64_t s) -> Built {
            ModelConfig cfg;
            cfg.d = 8;
            cfg.queries = 4;
            cfg.text_tokens = 4;
            cfg.decoder_layers = 2;
            cfg.heads = 2;
            cfg.encoder_layers = 1;
            cfg.patch = 8;
            cfg.image_size = 16;
            cfg.vocab_size = 6;
            cfg.ffn_dim = 12;
            auto model = std::make_shared<RtGenModel<double>>(cfg, s);
            std::mt19937_64 rng(s);
            auto image = std::make_shared<Image>(16, 16);
            std::uniform_int_distribution<int> px(0, 255);
            for (auto& b : image->rgb) b = static_cast<std::uint8_t>(px(rng));
            std::vector<BoxCxcywh> gts{{0.3, 0.3, 0.3, 0.3}, {0.7, 0.6, 0.4, 0.3}};
            std::vector<TokenSequence> names{{2, 3}, {4}};
            LossWeights w;
            w.dag = 0.0;
            const ModelOutput<double> out0 = model->forward(*image);
            // L1 and GIoU have kinks where a predicted coordinate or edge meets a
            // ground-truth one; keep the fixture well away from them.
            auto near_kink = [&] {
              for (const auto& p : out0.box_preds().boxes) {
                const BoxXyxy pe = to_xyxy(p);
                for (const auto& g : gts) {
                  const BoxXyxy ge = to_xyxy(g);
                  for (std::size_t c = 0; c < 4; ++c) {
                    if (std::abs(p[c] - g[c]) < 1e-3) return true;
                    for (std::size_t e = c % 2; e < 4; e += 2) {
                      if (std::abs(pe[c] - ge[e]) < 1e-3) return true;
                    }
                  }
                }
              }
              return false;
            };
            for (int nudge = 0; nudge < 50 && near_kink(); ++nudge) {
              for (auto& g : gts) {
                g[0] += 0.0071;
                g[1] += 0.0043;
              }
            }
            const MatchAssignment match = hungarian_match(matching_cost(out0.box_preds(), gts, w));
            const TokenSequence name_target{2, 5, kEndToken};
            std::vector<D> inputs;
            for (const auto& p : model->parameters()) inputs.push_back(p.array);
            return {[=] {
                      const ModelOutput<double> out = model->forward(*image);
                      D loss = total_loss(out.boxes, out.logits, out.dags, std::span<const BoxCxcywh>(gts),
                                          std::span<const TokenSequence>(names), match, w)
                                   .first;
                      for (const auto& dag : out.dags) loss = add(loss, dag_nll(dag, std::span<const TokenId>(name_target)));
                      return loss;
                    },
                    inputs};
          }};
}

}  // namespace rtgen::testing
