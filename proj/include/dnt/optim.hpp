#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <span>
#include <string>

#include "dnt/error.hpp"
#include "dnt/model.hpp"
#include "dnt/tensor.hpp"

namespace dnt {

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient:
///   g' = g + wd * p;  v <- rho * v + g';  p <- p - lr * v
template <typename T>
class BasicSGDMomentum {
 public:
  BasicSGDMomentum(double lr, double rho, double weight_decay) : lr_(lr), rho_(rho), weight_decay_(weight_decay) {
    if (!(lr > 0.0)) fail(ErrorKind::config_validation, "lr must be > 0");
    if (!(rho >= 0.0 && rho < 1.0)) fail(ErrorKind::config_validation, "momentum must be in [0,1)");
    if (!(weight_decay >= 0.0)) fail(ErrorKind::config_validation, "weight_decay must be >= 0");
  }

  double lr() const { return lr_; }
  double rho() const { return rho_; }
  double weight_decay() const { return weight_decay_; }

  void set_lr(double lr) {
    if (!(lr > 0.0)) fail(ErrorKind::config_validation, "lr must be > 0");
    lr_ = lr;
  }

  /// Velocity buffers are created zeroed the first time a name is seen.
  void step(std::span<const ParamSlot<T>> slots) {
    for (const auto& s : slots) {
      if (s.value == nullptr || s.grad == nullptr) fail(ErrorKind::registry_mismatch, s.name + ": null slot");
      if (s.value->shape() != s.grad->shape()) {
        fail(ErrorKind::registry_mismatch, s.name + ": parameter " + shape_str(s.value->shape()) + " vs gradient " +
                                               shape_str(s.grad->shape()));
      }
      auto it = velocity_.find(s.name);
      if (it == velocity_.end()) {
        it = velocity_.emplace(s.name, BasicTensor<T>(s.value->shape())).first;
      } else if (it->second.shape() != s.value->shape()) {
        fail(ErrorKind::registry_mismatch, s.name + ": velocity shape changed");
      }
      T* p = s.value->data();
      const T* g = s.grad->data();
      T* v = it->second.data();
      const T lr = static_cast<T>(lr_), rho = static_cast<T>(rho_), wd = static_cast<T>(weight_decay_);
      for (std::size_t i = 0; i < s.value->size(); ++i) {
        const T gi = g[i] + wd * p[i];
        v[i] = rho * v[i] + gi;
        p[i] -= lr * v[i];
      }
    }
  }

  const std::map<std::string, BasicTensor<T>>& velocity() const { return velocity_; }

 private:
  double lr_;
  double rho_;
  double weight_decay_;
  std::map<std::string, BasicTensor<T>> velocity_;
};

using SGDMomentum = BasicSGDMomentum<float>;

/// Name-keyed convenience form: both maps must hold the same names and shapes.
template <typename T>
void sgd_step(BasicSGDMomentum<T>& opt, std::map<std::string, BasicTensor<T>>& params,
              std::map<std::string, BasicTensor<T>>& grads) {
  if (params.size() != grads.size()) fail(ErrorKind::registry_mismatch, "parameter and gradient counts differ");
  std::vector<ParamSlot<T>> slots;
  for (auto& [name, p] : params) {
    auto it = grads.find(name);
    if (it == grads.end()) fail(ErrorKind::registry_mismatch, "no gradient for " + name);
    slots.push_back({name, &p, &it->second});
  }
  opt.step(slots);
}

enum class PlateauMonitor { maximize, minimize };

/// Reduce-on-plateau learning rate schedule.
///
/// Per epoch: an improvement (strictly better than the best seen) records the
/// new best and clears the wait counter. Otherwise a pending cooldown is
/// consumed first; outside cooldown the wait counter grows, and once it
/// exceeds `patience` the rate is multiplied by `factor` (clamped at
/// `min_lr`), the counter resets and a cooldown of `cooldown` epochs starts.
class PlateauScheduler {
 public:
  PlateauScheduler(double initial_lr, double factor, int patience, int cooldown, double min_lr,
                   PlateauMonitor monitor = PlateauMonitor::maximize)
      : lr_(initial_lr), factor_(factor), patience_(patience), cooldown_(cooldown), min_lr_(min_lr), monitor_(monitor) {
    if (!(initial_lr > 0.0)) fail(ErrorKind::config_validation, "lr must be > 0");
    if (!(factor > 0.0 && factor < 1.0)) fail(ErrorKind::config_validation, "lr decay factor must be in (0,1)");
    if (patience < 0) fail(ErrorKind::config_validation, "patience must be >= 0");
    if (cooldown < 0) fail(ErrorKind::config_validation, "cooldown must be >= 0");
    if (!(min_lr > 0.0) || min_lr > initial_lr) fail(ErrorKind::config_validation, "min_lr must be in (0, lr]");
    best_ = monitor_ == PlateauMonitor::maximize ? -std::numeric_limits<double>::infinity()
                                                 : std::numeric_limits<double>::infinity();
  }

  double update(double metric) {
    if (!std::isfinite(metric)) fail(ErrorKind::invalid_metric, "scheduler metric is not finite");
    const bool improved = monitor_ == PlateauMonitor::maximize ? metric > best_ : metric < best_;
    if (improved) {
      best_ = metric;
      wait_ = 0;
    } else if (cooldown_counter_ > 0) {
      --cooldown_counter_;
    } else if (++wait_ > patience_) {
      lr_ = std::max(lr_ * factor_, min_lr_);
      wait_ = 0;
      cooldown_counter_ = cooldown_;
    }
    return lr_;
  }

  double lr() const { return lr_; }
  double best() const { return best_; }
  int wait() const { return wait_; }
  int cooldown_remaining() const { return cooldown_counter_; }

 private:
  double lr_;
  double factor_;
  int patience_;
  int cooldown_;
  double min_lr_;
  PlateauMonitor monitor_;
  double best_;
  int wait_ = 0;
  int cooldown_counter_ = 0;
};

inline double scheduler_update(PlateauScheduler& s, double metric) { return s.update(metric); }

}  // namespace dnt
