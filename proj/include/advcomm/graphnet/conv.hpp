#pragma once

#include <Eigen/Core>

#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "advcomm/diffcore/init.hpp"
#include "advcomm/diffcore/ops.hpp"
#include "advcomm/diffcore/param_tree.hpp"
#include "advcomm/graphnet/shift.hpp"

namespace advcomm::graphnet {

using diffcore::ParamTree;
using diffcore::Tape;
using diffcore::Var;

inline std::string tap_path(const std::string& prefix, std::size_t k) { return prefix + "tap.k" + std::to_string(k); }

/// One filter bank shared by a set of agents. Taps live at
/// `prefix + "tap.k{k}"` for k = 0..K, each of shape [F, F'].
struct BankGroup {
  std::string prefix;
  std::vector<std::size_t> agents;
  bool trainable = true;
};

enum class Nonlinearity { leaky_relu, identity };

template <typename T>
void init_bank(ParamTree<T>& params, const std::string& prefix, std::size_t K, std::size_t f_in, std::size_t f_out,
               std::mt19937_64& rng) {
  // the K+1 taps together act like one [(K+1)F, F'] dense map
  const double gain = 1.0 / std::sqrt(static_cast<double>(K + 1));
  for (std::size_t k = 0; k <= K; ++k) params.set(tap_path(prefix, k), diffcore::orthogonal<T>(f_in, f_out, gain, rng));
}

namespace detail {

inline void check_assignment(const std::vector<BankGroup>& groups, std::size_t n) {
  std::vector<int> owner(n, 0);
  for (const auto& g : groups)
    for (auto a : g.agents) {
      if (a >= n) throw std::out_of_range("hetero_graph_conv: agent " + std::to_string(a) + " out of range");
      ++owner[a];
    }
  for (std::size_t a = 0; a < n; ++a)
    if (owner[a] != 1) throw std::invalid_argument("hetero_graph_conv: agent " + std::to_string(a) + " must belong to exactly one bank");
}

}  // namespace detail

/// Row i of the output is sum_k [S^k X]_i H_k^{g(i)} where g(i) is the bank of
/// agent i. X is [B,N,F], S is [B,N,N]; the result is [B,N,F'].
template <typename T>
Var<T> hetero_graph_conv(Var<T> x, const Tensor<T>& s, const ParamTree<T>& params, const std::vector<BankGroup>& groups,
                         std::size_t K) {
  auto& tape = *x.tape;
  const auto& xs = x.shape();
  if (xs.size() != 3) throw diffcore::ShapeError("hetero_graph_conv: signal must be [B,N,F], got " + diffcore::shape_str(xs));
  const std::size_t B = xs[0], N = xs[1], F = xs[2];
  detail::check_assignment(groups, N);

  std::size_t f_out = 0;
  for (const auto& g : groups) {
    for (std::size_t k = 0; k <= K; ++k) {
      const auto& h = params.at(tap_path(g.prefix, k));
      if (h.rank() != 2 || h.dim(0) != F || (f_out && h.dim(1) != f_out)) {
        throw diffcore::ShapeError("hetero_graph_conv: tap " + tap_path(g.prefix, k) + " " + diffcore::shape_str(h.shape()) +
                                   " incompatible with F=" + std::to_string(F));
      }
      f_out = h.dim(1);
    }
  }

  // shifted signals S^k X, shared across banks
  std::vector<Var<T>> shifted{diffcore::reshape(x, {B * N, F})};
  Var<T> cur = x;
  for (std::size_t k = 1; k <= K; ++k) {
    cur = diffcore::batched_left_matmul(s, cur);
    shifted.push_back(diffcore::reshape(cur, {B * N, F}));
  }

  Var<T> out{};
  bool have = false;
  for (const auto& g : groups) {
    if (g.agents.empty()) continue;
    const bool all = g.agents.size() == N;
    std::vector<std::size_t> rows;
    if (!all) {
      for (std::size_t b = 0; b < B; ++b)
        for (auto a : g.agents) rows.push_back(b * N + a);
    }
    Var<T> acc{};
    for (std::size_t k = 0; k <= K; ++k) {
      auto src = all ? shifted[k] : diffcore::take_rows(shifted[k], rows);
      auto term = diffcore::matmul(src, tape.param(params, tap_path(g.prefix, k), g.trainable));
      acc = k == 0 ? term : diffcore::add(acc, term);
    }
    if (!all) acc = diffcore::scatter_rows(acc, rows, B * N);
    out = have ? diffcore::add(out, acc) : acc;
    have = true;
  }
  return diffcore::reshape(out, {B, N, f_out});
}

/// Homogeneous case: every agent uses the bank under `prefix`.
template <typename T>
Var<T> graph_conv(Var<T> x, const Tensor<T>& s, const ParamTree<T>& params, const std::string& prefix, std::size_t K,
                  bool trainable = true) {
  const auto n = x.shape().size() == 3 ? x.shape()[1] : 0;
  std::vector<std::size_t> all(n);
  for (std::size_t i = 0; i < n; ++i) all[i] = i;
  return hetero_graph_conv(x, s, params, {BankGroup{prefix, all, trainable}}, K);
}

/// Cascade of L hetero layers, X_l = sigma(g_l(X_{l-1}; S)).
template <typename T>
Var<T> agnn_forward(Var<T> x, const Tensor<T>& s, const ParamTree<T>& params,
                    const std::vector<std::vector<BankGroup>>& layers, std::size_t K, Nonlinearity act) {
  if (layers.empty()) throw std::invalid_argument("agnn_forward: no layers");
  for (const auto& layer : layers) {
    const auto f_in = x.shape().at(2);
    for (const auto& g : layer) {
      if (params.at(tap_path(g.prefix, 0)).dim(0) != f_in) {
        throw diffcore::ShapeError("agnn_forward: layer " + g.prefix + " expects F=" +
                                   std::to_string(params.at(tap_path(g.prefix, 0)).dim(0)) + ", chain provides " +
                                   std::to_string(f_in));
      }
    }
    x = hetero_graph_conv(x, s, params, layer, K);
    if (act == Nonlinearity::leaky_relu) x = diffcore::leaky_relu(x);
  }
  return x;
}

// ---------------------------------------------------------------------------
// Decentralized execution. Each node only uses its own row of S, its own
// signal and what its neighbors sent it.

using RowVec = Eigen::RowVectorXd;

struct DenseBank {
  std::vector<Eigen::MatrixXd> taps;  // K+1 matrices, F x F'
  std::size_t K() const { return taps.size() - 1; }
};

template <typename T>
DenseBank bank_from_params(const ParamTree<T>& params, const std::string& prefix, std::size_t K) {
  DenseBank b;
  for (std::size_t k = 0; k <= K; ++k) {
    const auto& h = params.at(tap_path(prefix, k));
    Eigen::MatrixXd m(h.dim(0), h.dim(1));
    for (std::size_t r = 0; r < h.dim(0); ++r)
      for (std::size_t c = 0; c < h.dim(1); ++c) m(r, c) = static_cast<double>(h[r * h.dim(1) + c]);
    b.taps.push_back(std::move(m));
  }
  return b;
}

/// neighbor j -> (y^0_j, ..., y^{K-1}_j)
using Inbox = std::map<std::size_t, std::vector<RowVec>>;

struct NodeResult {
  RowVec output;
  std::vector<RowVec> outbox;  // y^0_i .. y^{K-1}_i for the neighbors
};

/// y^k_i = sum_j S_ij y^{k-1}_j using only row i of S.
inline RowVec local_hop(std::size_t i, const GraphShiftOperator& s, const RowVec& own_prev, const Inbox& inbox,
                        std::size_t k) {
  RowVec y = s(i, i) * own_prev;
  for (std::size_t j = 0; j < s.size(); ++j) {
    if (j == i || s(i, j) == 0.0) continue;
    auto it = inbox.find(j);
    if (it == inbox.end() || it->second.size() < k) {
      throw std::runtime_error("local_node_execute: node " + std::to_string(i) + " is missing hop " +
                               std::to_string(k - 1) + " aggregate from neighbor " + std::to_string(j));
    }
    y += s(i, j) * it->second[k - 1];
  }
  return y;
}

inline NodeResult local_node_execute(std::size_t i, const GraphShiftOperator& s, const Inbox& inbox, const RowVec& x,
                                     const DenseBank& bank) {
  NodeResult r;
  std::vector<RowVec> y{x};
  for (std::size_t k = 1; k <= bank.K(); ++k) y.push_back(local_hop(i, s, y.back(), inbox, k));
  r.output = y[0] * bank.taps[0];
  for (std::size_t k = 1; k <= bank.K(); ++k) r.output += y[k] * bank.taps[k];
  r.outbox.assign(y.begin(), y.begin() + static_cast<long>(bank.K()));
  return r;
}

/// Simulates the synchronous hop rounds of one hetero layer: in round k every
/// node forwards its (k-1)-hop aggregate to its neighbors. Returns the stacked
/// node outputs [N, F'].
inline Eigen::MatrixXd decentralized_layer(const Eigen::MatrixXd& x, const GraphShiftOperator& s,
                                           const std::vector<const DenseBank*>& bank_of) {
  const std::size_t n = s.size();
  if (static_cast<std::size_t>(x.rows()) != n || bank_of.size() != n)
    throw std::invalid_argument("decentralized_layer: row count differs from N");
  const std::size_t K = bank_of[0]->K();
  // what each node has broadcast so far
  std::vector<std::vector<RowVec>> sent(n);
  for (std::size_t j = 0; j < n; ++j) sent[j].push_back(x.row(static_cast<long>(j)));
  for (std::size_t k = 1; k < K; ++k) {
    std::vector<RowVec> next(n);
    for (std::size_t i = 0; i < n; ++i) {
      Inbox inbox;
      for (std::size_t j = 0; j < n; ++j)
        if (j != i && s(i, j) != 0.0) inbox[j] = sent[j];
      next[i] = local_hop(i, s, sent[i].back(), inbox, k);
    }
    for (std::size_t i = 0; i < n; ++i) sent[i].push_back(next[i]);
  }
  Eigen::MatrixXd out;
  for (std::size_t i = 0; i < n; ++i) {
    Inbox inbox;
    for (std::size_t j = 0; j < n; ++j)
      if (j != i && s(i, j) != 0.0) inbox[j] = sent[j];
    auto r = local_node_execute(i, s, inbox, x.row(static_cast<long>(i)), *bank_of[i]);
    if (i == 0) out.resize(static_cast<long>(n), r.output.size());
    out.row(static_cast<long>(i)) = r.output;
  }
  return out;
}

}  // namespace advcomm::graphnet
