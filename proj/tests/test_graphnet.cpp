#include <gtest/gtest.h>

#include <queue>
#include <random>

#include "advcomm/diffcore.hpp"
#include "advcomm/graphnet.hpp"
#include "oracles/graph_oracle.hpp"

using namespace advcomm;
using namespace advcomm::graphnet;
using diffcore::ParamTree;
using diffcore::Tape;
using oracle::Mat;

namespace {

std::vector<Edge> random_edges(std::size_t n, double p, std::mt19937_64& rng) {
  std::vector<Edge> e;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (diffcore::uniform01(rng) < p) e.emplace_back(i, j);
  return e;
}

Mat to_mat(const std::vector<double>& v, std::size_t n) {
  Mat m(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) m(i, j) = v[i * n + j];
  return m;
}

Mat to_mat(const Tensor<double>& t) {
  Mat m(t.dim(0), t.dim(1));
  for (std::size_t i = 0; i < t.dim(0); ++i)
    for (std::size_t j = 0; j < t.dim(1); ++j) m(i, j) = t[i * t.dim(1) + j];
  return m;
}

Tensor<double> to_tensor(const Mat& m) {
  Tensor<double> t({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) t[i * m.cols() + j] = m(i, j);
  return t;
}

Mat random_mat(std::size_t r, std::size_t c, std::mt19937_64& rng) {
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = diffcore::gaussian(rng);
  return m;
}

std::vector<Mat> taps_of(const ParamTree<double>& p, const std::string& prefix, std::size_t K) {
  std::vector<Mat> out;
  for (std::size_t k = 0; k <= K; ++k) out.push_back(to_mat(p.at(tap_path(prefix, k))));
  return out;
}

// Runs one hetero layer on the tape for a single graph; x is [N,F].
Mat run_hetero(const Mat& x, const GraphShiftOperator& s, const ParamTree<double>& p,
               const std::vector<BankGroup>& groups, std::size_t K) {
  Tape<double> t(false);
  const auto n = static_cast<std::size_t>(x.rows()), f = static_cast<std::size_t>(x.cols());
  auto xv = t.constant(to_tensor(x).reshaped({1, n, f}));
  auto y = hetero_graph_conv(xv, s.tensor<double>().reshaped({1, n, n}), p, groups, K).value();
  return to_mat(y.reshaped({n, y.dim(2)}));
}

Mat run_homo(const Mat& x, const GraphShiftOperator& s, const ParamTree<double>& p, std::size_t K) {
  std::vector<std::size_t> all(static_cast<std::size_t>(x.rows()));
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return run_hetero(x, s, p, {BankGroup{"g.", all}}, K);
}

}  // namespace

TEST(Shift, NoEdgesNoSelfLoopsIsZero) {
  auto s = build_shift_operator({}, 4, {Normalization::symmetric, false});
  for (double v : s.matrix()) EXPECT_EQ(v, 0.0);
}

TEST(Shift, TwoNodeSymmetricIsAllHalf) {
  auto s = build_shift_operator({{0, 1}}, 2);
  for (double v : s.matrix()) EXPECT_DOUBLE_EQ(v, 0.5);
}

TEST(Shift, RowStochasticRowsSumToOne) {
  auto s = build_shift_operator({{0, 1}, {1, 2}, {0, 2}}, 3, {Normalization::row_stochastic, true});
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(s(i, 0) + s(i, 1) + s(i, 2), 1.0, 1e-15);
}

TEST(Shift, OutOfRangeEdgeRejected) { EXPECT_THROW(build_shift_operator({{0, 5}}, 3), std::out_of_range); }

TEST(Shift, SymmetricMatchesFormula) {
  std::mt19937_64 rng(1);
  auto s = build_shift_operator(random_edges(6, 0.5, rng), 6);
  Mat a = to_mat(s.adjacency(), 6);
  EXPECT_LT((to_mat(s.matrix(), 6) - oracle::sym_normalize(a)).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Shift, SpectralRadiusAtMostOne) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng() % 8;
    const bool loops = trial % 2 == 0;
    for (auto norm : {Normalization::symmetric, Normalization::row_stochastic}) {
      auto s = build_shift_operator(random_edges(n, 0.4, rng), n, {norm, loops});
      EXPECT_LE(oracle::spectral_radius(to_mat(s.matrix(), n)), 1.0 + 1e-6);
      auto m = s.mask_outgoing(rng() % n);
      EXPECT_LE(oracle::spectral_radius(to_mat(m.matrix(), n)), 1.0 + 1e-6);
    }
  }
}

TEST(Shift, EntriesOnlyOnEdges) {
  std::mt19937_64 rng(3);
  auto edges = random_edges(7, 0.3, rng);
  auto s = build_shift_operator(edges, 7);
  for (std::size_t i = 0; i < 7; ++i)
    for (std::size_t j = 0; j < 7; ++j)
      if (s(i, j) != 0.0) { EXPECT_EQ(s.adjacency(i, j), 1.0); }
}

TEST(Shift, MaskIsolatedAgentUnchanged) {
  auto s = build_shift_operator({{0, 1}}, 3);
  EXPECT_EQ(s.mask_outgoing(2).matrix(), s.matrix());
}

TEST(GraphConv, ZeroHopsIgnoresShift) {
  std::mt19937_64 rng(4);
  ParamTree<double> p;
  init_bank(p, "g.", 0, 3, 2, rng);
  Mat x = random_mat(4, 3, rng);
  auto s = build_shift_operator(random_edges(4, 0.7, rng), 4);
  EXPECT_LT((run_homo(x, s, p, 0) - x * taps_of(p, "g.", 0)[0]).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(GraphConv, ZeroShiftKeepsOnlyFirstTap) {
  std::mt19937_64 rng(5);
  ParamTree<double> p;
  init_bank(p, "g.", 2, 3, 3, rng);
  Mat x = random_mat(4, 3, rng);
  auto s = GraphShiftOperator::zero(4);
  EXPECT_LT((run_homo(x, s, p, 2) - x * taps_of(p, "g.", 2)[0]).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(GraphConv, MatchesDenseMatrixPowers) {
  std::mt19937_64 rng(6);
  ParamTree<double> p;
  init_bank(p, "g.", 2, 3, 3, rng);
  Mat x = random_mat(4, 3, rng);
  auto s = build_shift_operator(random_edges(4, 0.6, rng), 4);
  Mat ref = oracle::graph_filter(x, to_mat(s.matrix(), 4), taps_of(p, "g.", 2));
  EXPECT_LT((run_homo(x, s, p, 2) - ref).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(GraphConv, BatchedEqualsPerSample) {
  std::mt19937_64 rng(7);
  ParamTree<double> p;
  init_bank(p, "g.", 2, 3, 2, rng);
  std::vector<GraphShiftOperator> ops;
  std::vector<Mat> xs;
  Tensor<double> xb({3, 5, 3});
  for (std::size_t b = 0; b < 3; ++b) {
    ops.push_back(build_shift_operator(random_edges(5, 0.5, rng), 5));
    xs.push_back(random_mat(5, 3, rng));
    for (std::size_t i = 0; i < 15; ++i) xb[b * 15 + i] = xs[b](i / 3, i % 3);
  }
  Tape<double> t(false);
  auto y = graph_conv(t.constant(xb), stack_shifts<double>(ops), p, "g.", 2).value();
  for (std::size_t b = 0; b < 3; ++b) {
    Mat ref = oracle::graph_filter(xs[b], to_mat(ops[b].matrix(), 5), taps_of(p, "g.", 2));
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t j = 0; j < 2; ++j) EXPECT_NEAR(y.at(b, i, j), ref(i, j), 1e-12);
  }
}

TEST(GraphConv, TapDimensionMismatchRejected) {
  std::mt19937_64 rng(8);
  ParamTree<double> p;
  init_bank(p, "g.", 1, 4, 2, rng);
  Mat x = random_mat(3, 3, rng);
  EXPECT_THROW(run_homo(x, build_shift_operator({}, 3), p, 1), diffcore::ShapeError);
}

TEST(Hetero, SharedBankEqualsHomogeneous) {
  std::mt19937_64 rng(9);
  ParamTree<double> p;
  init_bank(p, "g.", 3, 4, 4, rng);
  Mat x = random_mat(6, 4, rng);
  auto s = build_shift_operator(random_edges(6, 0.5, rng), 6);
  // same taps under two names, split across two groups
  for (std::size_t k = 0; k <= 3; ++k) p.set(tap_path("h.", k), p.at(tap_path("g.", k)));
  Mat a = run_homo(x, s, p, 3);
  Mat b = run_hetero(x, s, p, {BankGroup{"g.", {0, 2, 5}}, BankGroup{"h.", {1, 3, 4}}}, 3);
  EXPECT_LT((a - b).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Hetero, ZeroedBankZeroesItsRow) {
  std::mt19937_64 rng(10);
  ParamTree<double> p;
  init_bank(p, "c.", 2, 3, 3, rng);
  init_bank(p, "n.", 2, 3, 3, rng);
  Mat x = random_mat(4, 3, rng);
  auto s = build_shift_operator({{0, 1}, {1, 2}, {2, 3}}, 4);
  const std::vector<BankGroup> groups{{"c.", {0, 1, 2}}, {"n.", {3}}};
  Mat before = run_hetero(x, s, p, groups, 2);
  for (std::size_t k = 0; k <= 2; ++k) p.at(tap_path("n.", k)).fill(0.0);
  Mat after = run_hetero(x, s, p, groups, 2);
  EXPECT_EQ(after.row(3).cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ((after.topRows(3) - before.topRows(3)).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Hetero, TwoBanksMatchRowwiseOracle) {
  std::mt19937_64 rng(11);
  ParamTree<double> p;
  init_bank(p, "c.", 2, 3, 2, rng);
  init_bank(p, "n.", 2, 3, 2, rng);
  Mat x = random_mat(3, 3, rng);
  auto s = build_shift_operator({{0, 1}, {1, 2}}, 3);
  Mat ref = oracle::hetero_filter(x, to_mat(s.matrix(), 3), {taps_of(p, "c.", 2), taps_of(p, "n.", 2)}, {0, 1, 0});
  Mat got = run_hetero(x, s, p, {{"c.", {0, 2}}, {"n.", {1}}}, 2);
  EXPECT_LT((got - ref).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Hetero, EveryAgentNeedsExactlyOneBank) {
  std::mt19937_64 rng(12);
  ParamTree<double> p;
  init_bank(p, "c.", 1, 2, 2, rng);
  Mat x = random_mat(3, 2, rng);
  auto s = build_shift_operator({}, 3);
  EXPECT_THROW(run_hetero(x, s, p, {{"c.", {0, 1}}}, 1), std::invalid_argument);
  EXPECT_THROW(run_hetero(x, s, p, {{"c.", {0, 1, 2}}, {"c.", {1}}}, 1), std::invalid_argument);
}

TEST(Agnn, SingleLinearLayerIsGraphConv) {
  std::mt19937_64 rng(13);
  ParamTree<double> p;
  init_bank(p, "g.", 2, 3, 3, rng);
  Mat x = random_mat(5, 3, rng);
  auto s = build_shift_operator(random_edges(5, 0.5, rng), 5);
  Tape<double> t(false);
  auto y = agnn_forward(t.constant(to_tensor(x).reshaped({1, 5, 3})), s.tensor<double>().reshaped({1, 5, 5}), p,
                        {{BankGroup{"g.", {0, 1, 2, 3, 4}}}}, 2, Nonlinearity::identity)
               .value();
  EXPECT_LT((to_mat(y.reshaped({5, 3})) - run_homo(x, s, p, 2)).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Agnn, ZeroInputGivesZeroOutput) {
  std::mt19937_64 rng(14);
  ParamTree<double> p;
  init_bank(p, "a.", 2, 3, 4, rng);
  init_bank(p, "b.", 2, 4, 2, rng);
  auto s = build_shift_operator(random_edges(4, 0.5, rng), 4);
  Tape<double> t(false);
  auto y = agnn_forward(t.constant(Tensor<double>({1, 4, 3})), s.tensor<double>().reshaped({1, 4, 4}), p,
                        {{BankGroup{"a.", {0, 1, 2, 3}}}, {BankGroup{"b.", {0, 1, 2, 3}}}}, 2, Nonlinearity::leaky_relu)
               .value();
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(Agnn, TwoLayersMatchComposedOracle) {
  std::mt19937_64 rng(15);
  ParamTree<double> p;
  init_bank(p, "a.", 2, 3, 4, rng);
  init_bank(p, "b.", 2, 4, 2, rng);
  Mat x = random_mat(5, 3, rng);
  auto s = build_shift_operator(random_edges(5, 0.5, rng), 5);
  Mat sm = to_mat(s.matrix(), 5);
  Mat ref = oracle::leaky(oracle::graph_filter(oracle::leaky(oracle::graph_filter(x, sm, taps_of(p, "a.", 2))), sm,
                                               taps_of(p, "b.", 2)));
  Tape<double> t(false);
  auto y = agnn_forward(t.constant(to_tensor(x).reshaped({1, 5, 3})), s.tensor<double>().reshaped({1, 5, 5}), p,
                        {{BankGroup{"a.", {0, 1, 2, 3, 4}}}, {BankGroup{"b.", {0, 1, 2, 3, 4}}}}, 2,
                        Nonlinearity::leaky_relu)
               .value();
  EXPECT_LT((to_mat(y.reshaped({5, 2})) - ref).cwiseAbs().maxCoeff(), 1e-5);
}

TEST(Agnn, IncompatibleChainRejected) {
  std::mt19937_64 rng(16);
  ParamTree<double> p;
  init_bank(p, "a.", 1, 3, 4, rng);
  init_bank(p, "b.", 1, 3, 2, rng);
  Tape<double> t(false);
  EXPECT_THROW(agnn_forward(t.constant(Tensor<double>({1, 2, 3})), Tensor<double>({1, 2, 2}), p,
                            {{BankGroup{"a.", {0, 1}}}, {BankGroup{"b.", {0, 1}}}}, 1, Nonlinearity::identity),
               diffcore::ShapeError);
}

TEST(Local, IsolatedNodeUsesOnlyFirstTap) {
  std::mt19937_64 rng(17);
  ParamTree<double> p;
  init_bank(p, "g.", 3, 3, 2, rng);
  auto bank = bank_from_params(p, "g.", 3);
  auto s = build_shift_operator({{1, 2}}, 3);
  RowVec x = random_mat(1, 3, rng);
  // self-loop weight of an isolated node is 1, so every hop equals x
  auto r = local_node_execute(0, s, {}, x, bank);
  RowVec expect = x * (bank.taps[0] + bank.taps[1] + bank.taps[2] + bank.taps[3]);
  EXPECT_LT((r.output - expect).cwiseAbs().maxCoeff(), 1e-12);
  auto s0 = build_shift_operator({{1, 2}}, 3, {Normalization::symmetric, false});
  auto r0 = local_node_execute(0, s0, {}, x, bank);
  EXPECT_LT((r0.output - x * bank.taps[0]).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Local, OneHopTwoNodesExpandsDirectly) {
  std::mt19937_64 rng(18);
  ParamTree<double> p;
  init_bank(p, "g.", 1, 2, 2, rng);
  auto bank = bank_from_params(p, "g.", 1);
  auto s = build_shift_operator({{0, 1}}, 2, {Normalization::symmetric, false});
  Mat x = random_mat(2, 2, rng);
  auto r = local_node_execute(0, s, {{1, {x.row(1)}}}, x.row(0), bank);
  RowVec expect = x.row(0) * bank.taps[0] + s(0, 1) * x.row(1) * bank.taps[1];
  EXPECT_LT((r.output - expect).cwiseAbs().maxCoeff(), 1e-15);
  ASSERT_EQ(r.outbox.size(), 1u);
  EXPECT_EQ(r.outbox[0], RowVec(x.row(0)));
}

TEST(Local, MissingNeighborRejected) {
  std::mt19937_64 rng(19);
  ParamTree<double> p;
  init_bank(p, "g.", 2, 2, 2, rng);
  auto s = build_shift_operator({{0, 1}}, 2);
  EXPECT_THROW(local_node_execute(0, s, {}, RowVec::Ones(2), bank_from_params(p, "g.", 2)), std::runtime_error);
  // one hop is not enough for K=2
  EXPECT_THROW(local_node_execute(0, s, {{1, {RowVec::Ones(2)}}}, RowVec::Ones(2), bank_from_params(p, "g.", 2)),
               std::runtime_error);
}

TEST(Local, StackedLocalOutputsEqualCentralized) {
  std::mt19937_64 rng(20);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng() % 8, K = rng() % 4, f = 1 + rng() % 4, fo = 1 + rng() % 4;
    ParamTree<double> p;
    init_bank(p, "c.", K, f, fo, rng);
    init_bank(p, "n.", K, f, fo, rng);
    const std::size_t si = rng() % n;
    std::vector<std::size_t> coop;
    for (std::size_t i = 0; i < n; ++i)
      if (i != si) coop.push_back(i);
    auto s = build_shift_operator(random_edges(n, 0.4, rng), n);
    Mat x = random_mat(n, f, rng);
    auto bc = bank_from_params(p, "c.", K), bn = bank_from_params(p, "n.", K);
    std::vector<const DenseBank*> bank_of(n, &bc);
    bank_of[si] = &bn;
    Mat local = decentralized_layer(x, s, bank_of);
    Mat central = run_hetero(x, s, p, {{"c.", coop}, {"n.", {si}}}, K);
    EXPECT_LT((local - central).cwiseAbs().maxCoeff(), 1e-6) << "trial " << trial;
  }
}

TEST(Mask, MaskedSenderDoesNotReachOthers) {
  std::mt19937_64 rng(21);
  ParamTree<double> p;
  init_bank(p, "g.", 1, 3, 3, rng);
  auto s = build_shift_operator({{0, 1}, {1, 2}, {0, 2}, {2, 3}}, 4).mask_outgoing(2);
  Mat x = random_mat(4, 3, rng);
  Mat a = run_homo(x, s, p, 1);
  x.row(2) = random_mat(1, 3, rng);
  Mat b = run_homo(x, s, p, 1);
  for (int j : {0, 1, 3}) EXPECT_EQ((a.row(j) - b.row(j)).cwiseAbs().maxCoeff(), 0.0);
  EXPECT_GT((a.row(2) - b.row(2)).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Mask, ChainMiddleMaskedMatchesDisconnectedEndpoints) {
  std::mt19937_64 rng(22);
  ParamTree<double> p;
  init_bank(p, "g.", 2, 3, 3, rng);
  Mat x = random_mat(3, 3, rng);
  auto masked = build_shift_operator({{0, 1}, {1, 2}}, 3).mask_outgoing(1);
  // with the middle agent's messages gone the endpoints hear only themselves
  auto disconnected = build_shift_operator({}, 3);
  Mat sm = to_mat(masked.matrix(), 3), sd = to_mat(disconnected.matrix(), 3);
  Mat a = oracle::graph_filter(x, sm, taps_of(p, "g.", 2));
  Mat b = oracle::graph_filter(x, sd, taps_of(p, "g.", 2));
  Mat got = run_homo(x, masked, p, 2);
  for (int j : {0, 2}) {
    EXPECT_LT((a.row(j) - b.row(j)).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((got.row(j) - b.row(j)).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Properties, PermutationEquivariance) {
  std::mt19937_64 rng(23);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 2 + rng() % 7, K = rng() % 4;
    ParamTree<double> p;
    init_bank(p, "g.", K, 3, 2, rng);
    auto s = build_shift_operator(random_edges(n, 0.5, rng), n);
    Mat x = random_mat(n, 3, rng);
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    std::shuffle(perm.begin(), perm.end(), rng);
    Mat P = Mat::Zero(n, n);
    for (std::size_t i = 0; i < n; ++i) P(i, perm[i]) = 1.0;
    Mat sp = P * to_mat(s.matrix(), n) * P.transpose();
    std::vector<double> spv(n * n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) spv[i * n + j] = sp(i, j);
    GraphShiftOperator permuted(n, spv, {Normalization::none, false});
    Mat lhs = run_homo(P * x, permuted, p, K);
    Mat rhs = P * run_homo(x, s, p, K);
    EXPECT_LT((lhs - rhs).cwiseAbs().maxCoeff(), 1e-6);
  }
}

TEST(Properties, KHopLocality) {
  std::mt19937_64 rng(24);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 3 + rng() % 6, K = rng() % 4;
    ParamTree<double> p;
    init_bank(p, "g.", K, 2, 2, rng);
    auto s = build_shift_operator(random_edges(n, 0.3, rng), n);
    Mat x = random_mat(n, 2, rng);
    Mat base = run_homo(x, s, p, K);
    for (std::size_t far = 0; far < n; ++far) {
      // hop distance from far to every node
      std::vector<std::size_t> dist(n, n + 1);
      std::queue<std::size_t> q;
      dist[far] = 0;
      q.push(far);
      while (!q.empty()) {
        auto u = q.front();
        q.pop();
        for (std::size_t v = 0; v < n; ++v)
          if (v != u && s.adjacency(v, u) != 0.0 && dist[v] > n) {
            dist[v] = dist[u] + 1;
            q.push(v);
          }
      }
      Mat xp = x;
      xp.row(far) += random_mat(1, 2, rng);
      Mat pert = run_homo(xp, s, p, K);
      for (std::size_t i = 0; i < n; ++i)
        if (dist[i] > K) { EXPECT_EQ((pert.row(i) - base.row(i)).cwiseAbs().maxCoeff(), 0.0); }
    }
  }
}

TEST(Properties, TapGradientsPassGradCheck) {
  std::mt19937_64 rng(25);
  ParamTree<double> p;
  init_bank(p, "c.", 3, 3, 3, rng);
  init_bank(p, "n.", 3, 3, 3, rng);
  auto s = build_shift_operator(random_edges(5, 0.5, rng), 5);
  Mat x = random_mat(5, 3, rng);
  Mat w = random_mat(5, 3, rng);
  auto rep = diffcore::grad_check(p, [&](Tape<double>& t, const ParamTree<double>& q) {
    auto y = hetero_graph_conv(t.constant(to_tensor(x).reshaped({1, 5, 3})), s.tensor<double>().reshaped({1, 5, 5}), q,
                               {{"c.", {0, 1, 3, 4}}, {"n.", {2}}}, 3);
    return diffcore::sum(diffcore::mul_const(y, to_tensor(w).reshaped({1, 5, 3})));
  });
  EXPECT_TRUE(rep.pass) << rep.max_rel_err;
  EXPECT_EQ(rep.checked, p.parameter_count());
}
