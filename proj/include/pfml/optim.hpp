#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>

#include "pfml/nn.hpp"
#include "pfml/tensor.hpp"

namespace pfml {

struct AdamHyper {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  Tensor m;
  Tensor v;
};

// Standard Adam with bias correction. step_count is the 1-based step
// index after this update.
inline void adam_step(Tensor& param, const Tensor& grad, AdamState& state, int64_t step_count,
                      const AdamHyper& h) {
  if (!grad.all_finite()) throw std::runtime_error("adam: non-finite gradient");
  if (state.m.shape.empty()) {
    state.m = Tensor(param.shape);
    state.v = Tensor(param.shape);
  }
  const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(step_count));
  const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(step_count));
  for (int64_t i = 0; i < param.numel(); ++i) {
    state.m[i] = h.beta1 * state.m[i] + (1.0 - h.beta1) * grad[i];
    state.v[i] = h.beta2 * state.v[i] + (1.0 - h.beta2) * grad[i] * grad[i];
    const double mhat = state.m[i] / bc1;
    const double vhat = state.v[i] / bc2;
    param[i] -= h.lr * mhat / (std::sqrt(vhat) + h.eps);
  }
}

// RAdam: variance rectification active only once the approximated SMA
// length rho_t exceeds 4; earlier steps fall back to bias-corrected
// momentum SGD.
inline void radam_step(Tensor& param, const Tensor& grad, AdamState& state, int64_t step_count,
                       const AdamHyper& h) {
  if (!grad.all_finite()) throw std::runtime_error("radam: non-finite gradient");
  if (state.m.shape.empty()) {
    state.m = Tensor(param.shape);
    state.v = Tensor(param.shape);
  }
  const double t = static_cast<double>(step_count);
  const double beta2_t = std::pow(h.beta2, t);
  const double bc1 = 1.0 - std::pow(h.beta1, t);
  const double rho_inf = 2.0 / (1.0 - h.beta2) - 1.0;
  const double rho_t = rho_inf - 2.0 * t * beta2_t / (1.0 - beta2_t);
  double rect = 0.0;
  const bool rectified = rho_t > 4.0;
  if (rectified)
    rect = std::sqrt(((rho_t - 4.0) * (rho_t - 2.0) * rho_inf) /
                     ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t));
  for (int64_t i = 0; i < param.numel(); ++i) {
    state.m[i] = h.beta1 * state.m[i] + (1.0 - h.beta1) * grad[i];
    state.v[i] = h.beta2 * state.v[i] + (1.0 - h.beta2) * grad[i] * grad[i];
    const double mhat = state.m[i] / bc1;
    if (rectified) {
      const double vhat = std::sqrt(state.v[i] / (1.0 - beta2_t));
      param[i] -= h.lr * rect * mhat / (vhat + h.eps);
    } else {
      param[i] -= h.lr * mhat;
    }
  }
}

enum class OptimizerKind { Adam, RAdam };

// Per-parameter Adam/RAdam state over a ParamStore; parameters listed in
// `frozen` are skipped entirely.
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, AdamHyper hyper) : kind_(kind), hyper_(hyper) {}

  void step(ParamStore& params, const std::map<std::string, Tensor>& grads,
            const std::map<std::string, bool>* trainable = nullptr) {
    ++step_count_;
    for (const auto& [name, grad] : grads) {
      if (trainable != nullptr) {
        auto it = trainable->find(name);
        if (it != trainable->end() && !it->second) continue;
      }
      Tensor& p = params.get(name);
      AdamState& st = state_[name];
      if (kind_ == OptimizerKind::Adam)
        adam_step(p, grad, st, step_count_, hyper_);
      else
        radam_step(p, grad, st, step_count_, hyper_);
    }
  }

  void set_lr(double lr) { hyper_.lr = lr; }
  double lr() const { return hyper_.lr; }
  int64_t step_count() const { return step_count_; }
  OptimizerKind kind() const { return kind_; }
  const AdamHyper& hyper() const { return hyper_; }

  std::map<std::string, AdamState>& state() { return state_; }
  const std::map<std::string, AdamState>& state() const { return state_; }
  void restore(int64_t step_count, std::map<std::string, AdamState> st) {
    step_count_ = step_count;
    state_ = std::move(st);
  }

 private:
  OptimizerKind kind_;
  AdamHyper hyper_;
  int64_t step_count_ = 0;
  std::map<std::string, AdamState> state_;
};

// Reduce-on-plateau: halve the learning rate when the validation loss
// has not improved for `patience` consecutive epochs, never below floor.
class PlateauSchedule {
 public:
  PlateauSchedule(double initial_lr, int64_t patience, double floor)
      : lr_(initial_lr), patience_(patience), floor_(floor) {}

  double observe(double val_loss) {
    if (val_loss < best_ - 1e-12) {
      best_ = val_loss;
      bad_epochs_ = 0;
    } else {
      ++bad_epochs_;
      if (bad_epochs_ >= patience_) {
        lr_ = std::max(lr_ * 0.5, floor_);
        bad_epochs_ = 0;
      }
    }
    return lr_;
  }

  double lr() const { return lr_; }

 private:
  double lr_;
  int64_t patience_;
  double floor_;
  double best_ = std::numeric_limits<double>::infinity();
  int64_t bad_epochs_ = 0;
};

// Linear warm-up from 0.001*LR to LR over `warmup_epochs`, then plateau.
// epoch_index is 0-based; the first epoch uses exactly 0.001*LR and
// epoch_index k < warmup uses LR*(0.001 + 0.999*k/warmup).
class WarmupPlateauSchedule {
 public:
  WarmupPlateauSchedule(double base_lr, int64_t warmup_epochs, int64_t patience, double floor)
      : base_lr_(base_lr), warmup_(warmup_epochs), plateau_(base_lr, patience, floor) {}

  double lr_for_epoch(int64_t epoch_index, double prev_val_loss, bool have_val) {
    if (warmup_ > 0 && epoch_index < warmup_) {
      const double frac = static_cast<double>(epoch_index) / static_cast<double>(warmup_);
      return base_lr_ * (0.001 + (1.0 - 0.001) * frac);
    }
    if (have_val) return plateau_.observe(prev_val_loss);
    return plateau_.lr();
  }

 private:
  double base_lr_;
  int64_t warmup_;
  PlateauSchedule plateau_;
};

}  // namespace pfml
