#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "advcomm/diffcore/tensor.hpp"

namespace advcomm::graphnet {

using diffcore::Shape;
using diffcore::Tensor;

enum class Normalization { symmetric, row_stochastic, none };

struct ShiftConfig {
  Normalization norm = Normalization::symmetric;
  bool self_loops = true;
};

using Edge = std::pair<std::size_t, std::size_t>;

/// Normalized N x N shift matrix S. The binary adjacency it was built from is
/// kept so that masking can happen before normalization.
class GraphShiftOperator {
 public:
  GraphShiftOperator() = default;

  /// `adjacency[i*n+j] != 0` means i receives from j.
  GraphShiftOperator(std::size_t n, std::vector<double> adjacency, ShiftConfig cfg)
      : n_(n), cfg_(cfg), adj_(std::move(adjacency)) {
    if (adj_.size() != n_ * n_) throw std::invalid_argument("shift operator: adjacency is not N x N");
    normalize();
  }

  static GraphShiftOperator zero(std::size_t n) {
    GraphShiftOperator s;
    s.n_ = n;
    s.cfg_ = {Normalization::none, false};
    s.adj_.assign(n * n, 0.0);
    s.s_.assign(n * n, 0.0);
    return s;
  }

  std::size_t size() const { return n_; }
  const ShiftConfig& config() const { return cfg_; }
  double operator()(std::size_t i, std::size_t j) const { return s_[i * n_ + j]; }
  double adjacency(std::size_t i, std::size_t j) const { return adj_[i * n_ + j]; }
  const std::vector<double>& matrix() const { return s_; }
  const std::vector<double>& adjacency() const { return adj_; }

  template <typename T>
  Tensor<T> tensor() const {
    Tensor<T> t({n_, n_});
    for (std::size_t k = 0; k < s_.size(); ++k) t[k] = static_cast<T>(s_[k]);
    return t;
  }

  /// Agent i's messages reach nobody else; i keeps receiving.
  GraphShiftOperator mask_outgoing(std::size_t i) const {
    if (i >= n_) throw std::out_of_range("mask_outgoing: agent " + std::to_string(i) + " out of range");
    auto adj = adj_;
    for (std::size_t j = 0; j < n_; ++j)
      if (j != i) adj[j * n_ + i] = 0.0;
    return GraphShiftOperator(n_, std::move(adj), cfg_);
  }

 private:
  void normalize() {
    s_ = adj_;
    if (cfg_.norm == Normalization::none) return;
    // Row (in-)degrees. D^-1/2 A D^-1/2 is then similar to D^-1 A, whose rows
    // sum to at most 1, so the spectral radius stays <= 1 also for masked,
    // directed topologies. A node with empty row gets degree 1.
    std::vector<double> deg(n_, 0.0);
    for (std::size_t i = 0; i < n_; ++i) {
      for (std::size_t j = 0; j < n_; ++j) deg[i] += adj_[i * n_ + j];
      if (deg[i] == 0.0) deg[i] = 1.0;
    }
    for (std::size_t i = 0; i < n_; ++i) {
      for (std::size_t j = 0; j < n_; ++j) {
        double& v = s_[i * n_ + j];
        if (v == 0.0) continue;
        if (cfg_.norm == Normalization::row_stochastic) {
          v /= deg[i];
        } else {
          v /= std::sqrt(deg[i] * deg[j]);
        }
      }
    }
  }

  std::size_t n_ = 0;
  ShiftConfig cfg_;
  std::vector<double> adj_;
  std::vector<double> s_;
};

/// Builds S from undirected edges (both directions are added).
inline GraphShiftOperator build_shift_operator(const std::vector<Edge>& edges, std::size_t n, ShiftConfig cfg = {}) {
  std::vector<double> adj(n * n, 0.0);
  for (const auto& [a, b] : edges) {
    if (a >= n || b >= n) {
      throw std::out_of_range("build_shift_operator: edge (" + std::to_string(a) + "," + std::to_string(b) +
                              ") outside " + std::to_string(n) + " agents");
    }
    if (a == b) continue;
    adj[a * n + b] = 1.0;
    adj[b * n + a] = 1.0;
  }
  if (cfg.self_loops)
    for (std::size_t i = 0; i < n; ++i) adj[i * n + i] = 1.0;
  return GraphShiftOperator(n, std::move(adj), cfg);
}

/// Stacks per-sample operators into a [B,N,N] tensor for batched shifting.
template <typename T>
Tensor<T> stack_shifts(const std::vector<GraphShiftOperator>& ops) {
  if (ops.empty()) throw std::invalid_argument("stack_shifts: empty batch");
  const auto n = ops[0].size();
  Tensor<T> out({ops.size(), n, n});
  for (std::size_t b = 0; b < ops.size(); ++b) {
    if (ops[b].size() != n) throw diffcore::ShapeError("stack_shifts: operators of different sizes");
    for (std::size_t k = 0; k < n * n; ++k) out[b * n * n + k] = static_cast<T>(ops[b].matrix()[k]);
  }
  return out;
}

}  // namespace advcomm::graphnet
