#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "advcomm/diffcore/param_tree.hpp"
#include "advcomm/diffcore/tape.hpp"

namespace advcomm::diffcore {

/// Builds a scalar loss on the given tape from the given parameters. Must be
/// deterministic; any randomness has to be fixed outside.
using LossBuilder = std::function<Var<double>(Tape<double>&, const ParamTree<double>&)>;

struct GradCheckConfig {
  double h = 1e-3;
  double tol = 1e-4;
  // denominators below this are clamped so that exact zeros compare cleanly
  double floor = 1e-7;
  // per-parameter element budget; 0 checks every element
  std::size_t max_per_param = 0;
  // total element budget across the whole tree, drawn uniformly; 0 disables
  std::size_t total_samples = 0;
  std::uint64_t seed = 1;
};

struct GradCheckEntry {
  double max_rel_err = 0.0;
  std::size_t checked = 0;
  // elements whose stencil crossed a kink of relu/leaky_relu/clamp/minimum
  std::size_t kink_skipped = 0;
};

struct GradCheckReport {
  std::map<std::string, GradCheckEntry> per_param;
  double max_rel_err = 0.0;
  std::size_t checked = 0;
  std::size_t kink_skipped = 0;
  bool pass = true;
};

inline double relative_error(double analytic, double numeric, double floor) {
  const double diff = std::abs(analytic - numeric);
  if (diff == 0.0) return 0.0;
  return diff / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Compares reverse-mode gradients with central differences
/// (f(x+h) - f(x-h)) / 2h for selected parameter elements.
inline GradCheckReport grad_check(const ParamTree<double>& params, const LossBuilder& loss,
                                  const GradCheckConfig& cfg = {}) {
  Tape<double> tape;
  tape.track_branches(true);
  auto out = loss(tape, params);
  tape.backward(out);
  const auto analytic = tape.gradients(params);
  const auto base_branches = tape.branches();

  auto eval = [&](const ParamTree<double>& p, std::vector<bool>& branches) {
    Tape<double> t(false);
    t.track_branches(true);
    const double v = loss(t, p).value().item();
    branches = t.branches();
    return v;
  };

  // (path, element) pairs to check
  std::vector<std::pair<std::string, std::size_t>> picks;
  std::mt19937_64 rng(cfg.seed);
  if (cfg.total_samples > 0) {
    std::vector<std::pair<std::string, std::size_t>> all;
    for (const auto& [path, t] : params)
      for (std::size_t i = 0; i < t.size(); ++i) all.emplace_back(path, i);
    std::shuffle(all.begin(), all.end(), rng);
    all.resize(std::min(all.size(), cfg.total_samples));
    picks = std::move(all);
  } else {
    for (const auto& [path, t] : params) {
      std::vector<std::size_t> idx(t.size());
      for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
      if (cfg.max_per_param > 0 && idx.size() > cfg.max_per_param) {
        std::shuffle(idx.begin(), idx.end(), rng);
        idx.resize(cfg.max_per_param);
      }
      for (auto i : idx) picks.emplace_back(path, i);
    }
  }

  GradCheckReport rep;
  for (const auto& [path, t] : params) rep.per_param[path];
  auto work = params;
  std::vector<bool> bp, bm;
  for (const auto& [path, i] : picks) {
    auto& x = work.at(path)[i];
    const double x0 = x;
    x = x0 + cfg.h;
    const double fp = eval(work, bp);
    x = x0 - cfg.h;
    const double fm = eval(work, bm);
    x = x0;
    auto& e = rep.per_param[path];
    if (bp != base_branches || bm != base_branches) {
      ++e.kink_skipped;
      ++rep.kink_skipped;
      continue;
    }
    const double numeric = (fp - fm) / (2.0 * cfg.h);
    const double err = relative_error(analytic.at(path)[i], numeric, cfg.floor);
    e.max_rel_err = std::max(e.max_rel_err, err);
    ++e.checked;
    ++rep.checked;
    rep.max_rel_err = std::max(rep.max_rel_err, err);
  }
  rep.pass = rep.max_rel_err < cfg.tol;
  return rep;
}

}  // namespace advcomm::diffcore
