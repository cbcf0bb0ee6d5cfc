#pragma once

#include <rtgen/layers.hpp>

#include <cmath>
#include <cstdint>
#include <vector>

namespace rtgen {

struct AdamWOptions {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 1e-4;
  double eps = 1e-8;
};

/// Moments for one parameter.
template <typename T>
struct OptimState {
  Matrix<T> m;
  Matrix<T> v;
};

/// AdamW with decoupled weight decay and bias-corrected moments. State is
/// positional: entry i belongs to parameter i of the list passed to step().
template <typename T>
class AdamW {
 public:
  explicit AdamW(AdamWOptions options = {}) : options_(options) {}

  const AdamWOptions& options() const { return options_; }
  std::int64_t step_count() const { return step_; }
  const std::vector<OptimState<T>>& state() const { return state_; }

  void restore(std::vector<OptimState<T>> state, std::int64_t step) {
    state_ = std::move(state);
    step_ = step;
  }

  /// Applies one update to every parameter; parameters without a gradient
  /// are treated as having a zero gradient.
  void step(const ParameterList<T>& params) { step(params, options_.lr); }

  /// Same update with the learning rate of this step (for schedules).
  void step(const ParameterList<T>& params, double lr_now) {
    if (state_.empty()) {
      for (const auto& p : params) {
        state_.push_back({Matrix<T>::Zero(p.array.rows(), p.array.cols()),
                          Matrix<T>::Zero(p.array.rows(), p.array.cols())});
      }
    }
    if (state_.size() != params.size()) throw DimensionError("AdamW: parameter list changed between steps");
    ++step_;
    const T lr = static_cast<T>(lr_now);
    const T b1 = static_cast<T>(options_.beta1);
    const T b2 = static_cast<T>(options_.beta2);
    const T correction1 = static_cast<T>(1.0 - std::pow(options_.beta1, static_cast<double>(step_)));
    const T correction2 = static_cast<T>(1.0 - std::pow(options_.beta2, static_cast<double>(step_)));
    const T decay = static_cast<T>(1.0 - lr_now * options_.weight_decay);
    const T eps = static_cast<T>(options_.eps);
    for (std::size_t i = 0; i < params.size(); ++i) {
      DiffArray<T> p = params[i].array;
      auto& st = state_[i];
      if (st.m.rows() != p.rows() || st.m.cols() != p.cols()) throw DimensionError("AdamW: state shape mismatch");
      Matrix<T>& value = p.mutable_value();
      value *= decay;
      if (!p.has_grad()) {
        st.m *= b1;
        st.v *= b2;
      } else {
        st.m = b1 * st.m + (T(1) - b1) * p.grad();
        st.v = b2 * st.v + (T(1) - b2) * p.grad().cwiseAbs2();
      }
      value.array() -= lr * (st.m.array() / correction1) / ((st.v.array() / correction2).sqrt() + eps);
    }
  }

 private:
  AdamWOptions options_;
  std::vector<OptimState<T>> state_;
  std::int64_t step_ = 0;
};

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
template <typename T>
double clip_grad_norm(const ParameterList<T>& params, double max_norm) {
  double total = 0.0;
  for (const auto& p : params) {
    if (p.array.has_grad()) total += p.array.grad().template cast<double>().squaredNorm();
  }
  const double norm = std::sqrt(total);
  if (max_norm > 0.0 && norm > max_norm) {
    const T factor = static_cast<T>(max_norm / norm);
    for (auto p : params) {
      if (p.array.has_grad()) p.array.node().grad *= factor;
    }
  }
  return norm;
}

template <typename T>
void zero_grad(const ParameterList<T>& params) {
  for (auto p : params) p.array.zero_grad();
}

}  // namespace rtgen
