#pragma once

#include <cmath>
#include <stdexcept>
#include <string>

#include "advcomm/diffcore/param_tree.hpp"

namespace advcomm::diffcore {

enum class OptimizerKind { sgd, adam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adam;
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // global-norm clipping threshold; <= 0 disables it
  double clip_norm = 0.5;
  // true: params move along +grad (objective is maximized)
  bool ascent = true;
};

/// Global L2 norm over every entry of a gradient tree.
template <typename T>
double global_norm(const ParamTree<T>& grads) {
  return std::sqrt(grads.squared_norm());
}

/// SGD / Adam over a ParamTree. Adam moments are keyed by path, so the same
/// optimizer must always be fed trees of one structure.
template <typename T>
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig cfg = {}) : cfg_(cfg) {}

  const OptimizerConfig& config() const { return cfg_; }
  long steps() const { return t_; }

  /// Applies one update in place. Returns the pre-clipping global gradient norm.
  double step(ParamTree<T>& params, const ParamTree<T>& grads) {
    if (!params.same_structure(grads)) {
      throw std::invalid_argument("optimizer: gradient tree does not match parameter tree");
    }
    const double norm = global_norm(grads);
    double scale = 1.0;
    if (cfg_.clip_norm > 0.0 && norm > cfg_.clip_norm) scale = cfg_.clip_norm / norm;
    const double dir = cfg_.ascent ? 1.0 : -1.0;
    ++t_;

    if (cfg_.kind == OptimizerKind::sgd) {
      for (auto& [path, p] : params) {
        const auto& g = grads.at(path);
        for (std::size_t i = 0; i < p.size(); ++i) {
          p[i] = static_cast<T>(p[i] + dir * cfg_.lr * scale * g[i]);
        }
      }
      return norm;
    }

    if (m_.empty()) {
      m_ = params.template cast<double>().zeros_like();
      v_ = m_;
    } else {
      bool same = m_.size() == params.size();
      for (auto a = m_.begin(), b = params.begin(); same && a != m_.end(); ++a, ++b) {
        same = a->first == b->first && a->second.shape() == b->second.shape();
      }
      if (!same) throw std::invalid_argument("optimizer: parameter tree changed between steps");
    }
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (auto& [path, p] : params) {
      const auto& g = grads.at(path);
      auto& m = m_.at(path);
      auto& v = v_.at(path);
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double gi = scale * static_cast<double>(g[i]);
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        p[i] = static_cast<T>(p[i] + dir * cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps));
      }
    }
    return norm;
  }

  void reset() {
    t_ = 0;
    m_ = {};
    v_ = {};
  }

 private:
  OptimizerConfig cfg_;
  long t_ = 0;
  ParamTree<double> m_, v_;
};

}  // namespace advcomm::diffcore
