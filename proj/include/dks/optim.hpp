#pragma once

#include <string>
#include <vector>

#include "dks/blocks.hpp"

namespace dks {

/// Piecewise-constant schedule: the base rate divided by `factor` once per
/// milestone that has been reached (a milestone at epoch e takes effect *at*
/// epoch e). `period` is shorthand for milestones at every multiple of the
/// period. Exactly one of the two forms is active.
struct LrSchedule {
  double lr0 = 0.1;
  double factor = 10.0;
  std::vector<int64_t> milestones;
  int64_t period = 0;  // 0 = use milestones
};

inline double lr_at(const LrSchedule& s, int64_t epoch) {
  if (epoch < 0) throw ConfigError("lr_at: negative epoch");
  if (s.factor <= 0) throw ConfigError("lr_at: factor must be positive");
  int64_t drops = 0;
  if (s.period > 0) {
    drops = epoch / s.period;
  } else {
    for (int64_t m : s.milestones)
      if (m <= epoch) ++drops;
  }
  double lr = s.lr0;
  for (int64_t i = 0; i < drops; ++i) lr /= s.factor;
  return lr;
}

/// SGD with momentum, optional Nesterov lookahead, and coupled weight decay.
/// Per step, for each trainable parameter:
///   g <- grad + weight_decay * theta
///   v <- momentum * v + g
///   theta <- theta - lr * (g + momentum * v)   (nesterov)
///   theta <- theta - lr * v                    (otherwise)
/// BN running statistics are not trainable and are never updated here.
template <typename T>
class Sgd {
 public:
  Sgd(double momentum, double weight_decay, bool nesterov)
      : momentum_(momentum), weight_decay_(weight_decay), nesterov_(nesterov) {
    if (momentum < 0 || momentum >= 1) throw ConfigError("sgd: momentum must be in [0,1)");
    if (weight_decay < 0) throw ConfigError("sgd: weight decay must be >= 0");
  }

  void step(std::vector<NamedTensor<T>>& params, double lr) {
    if (velocity_.empty()) {
      for (auto& p : params)
        if (p.trainable) velocity_.emplace_back(p.tensor.numel(), T(0));
    }
    size_t vi = 0;
    const T m = static_cast<T>(momentum_);
    const T wd = static_cast<T>(weight_decay_);
    const T eta = static_cast<T>(lr);
    for (auto& p : params) {
      if (!p.trainable) continue;
      auto theta = p.tensor.data_mut();
      auto grad = p.tensor.grad();
      std::vector<T>& v = velocity_[vi++];
      if (v.size() != theta.size())
        throw UsageError("sgd: parameter set changed between steps");
      for (size_t i = 0; i < theta.size(); ++i) {
        T g = grad[i] + wd * theta[i];
        v[i] = m * v[i] + g;
        theta[i] -= nesterov_ ? eta * (g + m * v[i]) : eta * v[i];
      }
    }
  }

  double momentum() const { return momentum_; }
  bool nesterov() const { return nesterov_; }

 private:
  double momentum_;
  double weight_decay_;
  bool nesterov_;
  std::vector<std::vector<T>> velocity_;
};

}  // namespace dks
