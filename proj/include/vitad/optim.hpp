#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "vitad/params.hpp"

namespace vitad {

struct AdamWConfig {
  double lr = 1e-4;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T = float>
struct AdamWState {
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
  long step = 0;
};

/// One decoupled-weight-decay Adam update of `params` (theta -= lr*wd*theta,
/// then the bias-corrected Adam step). Frozen parameters are skipped.
template <typename T>
void adamw_step(const std::vector<Parameter<T>*>& params, AdamWState<T>& state, double lr,
                const AdamWConfig& cfg) {
  if (state.m.empty()) {
    for (auto* p : params) {
      state.m.push_back(Tensor<T>::zeros(p->value.shape()));
      state.v.push_back(Tensor<T>::zeros(p->value.shape()));
    }
  }
  if (state.m.size() != params.size()) throw ContractError("adamw: state does not match parameter count");
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter<T>& p = *params[k];
    if (p.frozen) continue;
    if (p.grad.shape() != p.value.shape() || state.m[k].shape() != p.value.shape())
      throw ContractError("adamw: shape mismatch for " + p.name);
    auto& m = state.m[k];
    auto& v = state.v[k];
    for (std::size_t i = 0; i < p.value.numel(); ++i) {
      const double g = p.grad[i];
      const double mi = cfg.beta1 * m[i] + (1 - cfg.beta1) * g;
      const double vi = cfg.beta2 * v[i] + (1 - cfg.beta2) * g * g;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      double theta = p.value[i];
      if (cfg.weight_decay != 0) theta -= lr * cfg.weight_decay * theta;
      theta -= lr * (mi / bc1) / (std::sqrt(vi / bc2) + cfg.eps);
      p.value[i] = static_cast<T>(theta);
    }
  }
}

enum class LrSchedule { step, cosine };

struct ScheduleConfig {
  double lr = 1e-4;
  int epochs = 100;
  int lr_drop_epoch = 80;
  double lr_drop_factor = 0.1;
  LrSchedule kind = LrSchedule::step;
  // Floor of the cosine variant, as a fraction of lr.
  double cosine_floor = 0.01;
};

inline double lr_at(int epoch, const ScheduleConfig& cfg) {
  if (cfg.kind == LrSchedule::cosine) {
    const double t = cfg.epochs > 1 ? static_cast<double>(epoch) / (cfg.epochs - 1) : 0.0;
    const double lo = cfg.lr * cfg.cosine_floor;
    return lo + 0.5 * (cfg.lr - lo) * (1 + std::cos(std::numbers::pi * t));
  }
  return epoch < cfg.lr_drop_epoch ? cfg.lr : cfg.lr * cfg.lr_drop_factor;
}

}  // namespace vitad
