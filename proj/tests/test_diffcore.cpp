#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "advcomm/diffcore.hpp"

using namespace advcomm::diffcore;

namespace {

Tensor<double> randn(Shape s, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> nd(0.0, scale);
  Tensor<double> t(std::move(s));
  for (auto& v : t.data()) v = nd(rng);
  return t;
}

// Contracts the op output with a fixed random tensor so every output element
// contributes to the scalar.
Var<double> contract(Var<double> y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sum(mul_const(y, randn(y.shape(), rng)));
}

GradCheckReport check_op(ParamTree<double> p, std::function<Var<double>(Tape<double>&, const ParamTree<double>&)> f) {
  GradCheckConfig cfg;
  cfg.max_per_param = 64;
  return grad_check(p, [&](Tape<double>& t, const ParamTree<double>& q) { return contract(f(t, q), 99); }, cfg);
}

}  // namespace

TEST(Forward, SigmoidOfZeroIsHalf) {
  Tape<float> t;
  auto y = sigmoid(t.constant(Tensor<float>({1}, 0.0f)));
  EXPECT_EQ(y.value()[0], 0.5f);
}

TEST(Forward, SoftmaxOfEqualLogitsIsUniform) {
  Tape<double> t;
  auto y = softmax(t.constant(Tensor<double>({3}, 2.5)));
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(y.value()[i], 1.0 / 3.0, 1e-15);
}

TEST(Forward, UnitKernelConvIsIdentity) {
  std::mt19937_64 rng(3);
  Tape<double> t;
  auto x = randn({2, 1, 5, 4}, rng);
  auto y = conv2d(t.constant(x), t.constant(Tensor<double>({1, 1, 1, 1}, 1.0)), t.constant(Tensor<double>({1})), 0);
  EXPECT_EQ(y.value(), x);
}

TEST(Forward, ConvMatchesDirectLoop) {
  std::mt19937_64 rng(4);
  auto x = randn({3, 2, 5, 6}, rng);
  auto w = randn({4, 2, 3, 3}, rng);
  auto b = randn({4}, rng);
  Tape<double> t;
  auto y = conv2d(t.constant(x), t.constant(w), t.constant(b), 1).value();
  ASSERT_EQ(y.shape(), (Shape{3, 4, 5, 6}));
  for (int n = 0; n < 3; ++n)
    for (int o = 0; o < 4; ++o)
      for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 6; ++j) {
          double acc = b[o];
          for (int c = 0; c < 2; ++c)
            for (int ki = 0; ki < 3; ++ki)
              for (int kj = 0; kj < 3; ++kj) {
                int ii = i + ki - 1, jj = j + kj - 1;
                if (ii < 0 || jj < 0 || ii >= 5 || jj >= 6) continue;
                acc += w.at(o, c, ki, kj) * x.at(n, c, ii, jj);
              }
          EXPECT_NEAR(y.at(n, o, i, j), acc, 1e-12);
        }
}

TEST(Forward, ShapeMismatchNamesOp) {
  Tape<float> t;
  auto a = t.constant(Tensor<float>({2, 3}));
  auto b = t.constant(Tensor<float>({4, 2}));
  try {
    matmul(a, b);
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("matmul"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("[2x3]"), std::string::npos);
  }
}

TEST(Backward, SquareAtThree) {
  ParamTree<double> p;
  p.set("x", Tensor<double>({1}, 3.0));
  Tape<double> t;
  auto x = t.param(p, "x");
  t.backward(sum(mul(x, x)));
  EXPECT_EQ(t.gradients(p).at("x")[0], 6.0);
}

TEST(Backward, MseOfScaledOne) {
  ParamTree<double> p;
  p.set("w", Tensor<double>({1, 1}, 2.0));
  Tape<double> t;
  auto y = matmul(t.param(p, "w"), t.constant(Tensor<double>({1, 1}, 1.0)));
  t.backward(mse(y, t.constant(Tensor<double>({1, 1}, 0.0))));
  EXPECT_EQ(t.gradients(p).at("w")[0], 4.0);
}

TEST(Backward, NonScalarLossRejected) {
  Tape<double> t;
  auto x = t.variable(Tensor<double>({2}, 1.0));
  EXPECT_THROW(t.backward(x), ShapeError);
}

TEST(Backward, UnusedParamGetsExactZero) {
  ParamTree<double> p;
  p.set("a", Tensor<double>({2}, 1.5));
  p.set("unused", Tensor<double>({3}, 7.0));
  auto rep = grad_check(p, [](Tape<double>& t, const ParamTree<double>& q) {
    auto a = t.param(q, "a");
    return sum(mul(a, a));
  });
  EXPECT_EQ(rep.per_param.at("unused").max_rel_err, 0.0);
  Tape<double> t;
  auto a = t.param(p, "a");
  t.param(p, "unused");
  t.backward(sum(a));
  const auto grads = t.gradients(p);
  for (double g : grads.at("unused").data()) EXPECT_EQ(g, 0.0);
}

TEST(Backward, RandomTwoLayerMlpMatchesFiniteDifferences) {
  std::mt19937_64 rng(11);
  ParamTree<double> p;
  p.set("w1", randn({6, 8}, rng));
  p.set("b1", randn({8}, rng));
  p.set("w2", randn({8, 3}, rng));
  p.set("b2", randn({3}, rng));
  auto x = randn({5, 6}, rng);
  auto rep = grad_check(p, [&](Tape<double>& t, const ParamTree<double>& q) {
    auto h = sigmoid(dense(t.constant(x), t.param(q, "w1"), t.param(q, "b1")));
    return contract(dense(h, t.param(q, "w2"), t.param(q, "b2")), 5);
  });
  EXPECT_TRUE(rep.pass) << rep.max_rel_err;
  EXPECT_EQ(rep.checked, p.parameter_count());
}

TEST(Backward, LinearModelIsExact) {
  std::mt19937_64 rng(12);
  ParamTree<double> p;
  p.set("w", randn({4, 2}, rng));
  auto x = randn({3, 4}, rng);
  auto rep = grad_check(p, [&](Tape<double>& t, const ParamTree<double>& q) {
    return contract(matmul(t.constant(x), t.param(q, "w")), 1);
  });
  EXPECT_LT(rep.max_rel_err, 1e-9);
}

TEST(Backward, LinearInTheLoss) {
  std::mt19937_64 rng(13);
  ParamTree<double> p;
  p.set("w", randn({3, 3}, rng));
  auto x = randn({2, 3}, rng);
  auto grads = [&](double a, double b) {
    Tape<double> t;
    auto y = matmul(t.constant(x), t.param(p, "w"));
    auto l1 = sum(mul(y, y));
    auto l2 = sum(sigmoid(y));
    t.backward(add(scale(l1, a), scale(l2, b)));
    return t.gradients(p).at("w");
  };
  auto g1 = grads(1, 0), g2 = grads(0, 1), g = grads(2.0, -3.0);
  for (std::size_t i = 0; i < g.size(); ++i) EXPECT_NEAR(g[i], 2.0 * g1[i] - 3.0 * g2[i], 1e-12);
}

TEST(Backward, ForwardIsBitwiseDeterministic) {
  std::mt19937_64 rng(14);
  auto x = randn({4, 3, 8, 8}, rng).cast<float>();
  auto w = randn({5, 3, 3, 3}, rng).cast<float>();
  auto run = [&] {
    Tape<float> t;
    return avgpool2x(leaky_relu(conv2d(t.constant(x), t.constant(w), t.constant(Tensor<float>({5})), 1))).value();
  };
  EXPECT_EQ(run(), run());
}

// Finite-difference check for every primitive on random inputs.
class OpGrad : public ::testing::Test {
 protected:
  std::mt19937_64 rng{21};
};

TEST_F(OpGrad, Dense) {
  ParamTree<double> p;
  p.set("x", randn({4, 5}, rng));
  p.set("w", randn({5, 3}, rng));
  p.set("b", randn({3}, rng));
  auto r = check_op(p, [](Tape<double>& t, const ParamTree<double>& q) {
    return dense(t.param(q, "x"), t.param(q, "w"), t.param(q, "b"));
  });
  EXPECT_TRUE(r.pass) << r.max_rel_err;
}

TEST_F(OpGrad, Conv2d) {
  ParamTree<double> p;
  p.set("x", randn({4, 3, 8, 8}, rng));
  p.set("w", randn({2, 3, 3, 3}, rng));
  p.set("b", randn({2}, rng));
  auto r = check_op(p, [](Tape<double>& t, const ParamTree<double>& q) {
    return conv2d(t.param(q, "x"), t.param(q, "w"), t.param(q, "b"), 1);
  });
  EXPECT_TRUE(r.pass) << r.max_rel_err;
}

TEST_F(OpGrad, Conv2dUnpadded) {
  ParamTree<double> p;
  p.set("x", randn({2, 2, 6, 5}, rng));
  p.set("w", randn({3, 2, 2, 3}, rng));
  p.set("b", randn({3}, rng));
  auto r = check_op(p, [](Tape<double>& t, const ParamTree<double>& q) {
    return conv2d(t.param(q, "x"), t.param(q, "w"), t.param(q, "b"), 0);
  });
  EXPECT_TRUE(r.pass) << r.max_rel_err;
}

TEST_F(OpGrad, Elementwise) {
  ParamTree<double> p;
  p.set("a", randn({4, 8, 8}, rng));
  p.set("b", randn({4, 8, 8}, rng));
  using Fn = Var<double> (*)(Tape<double>&, const ParamTree<double>&);
  const Fn fns[] = {
      [](Tape<double>& t, const ParamTree<double>& q) { return leaky_relu(t.param(q, "a")); },
      [](Tape<double>& t, const ParamTree<double>& q) { return relu(t.param(q, "a")); },
      [](Tape<double>& t, const ParamTree<double>& q) { return sigmoid(t.param(q, "a")); },
      [](Tape<double>& t, const ParamTree<double>& q) { return advcomm::diffcore::exp(t.param(q, "a")); },
      [](Tape<double>& t, const ParamTree<double>& q) { return add(t.param(q, "a"), t.param(q, "b")); },
      [](Tape<double>& t, const ParamTree<double>& q) { return sub(t.param(q, "a"), t.param(q, "b")); },
      [](Tape<double>& t, const ParamTree<double>& q) { return mul(t.param(q, "a"), t.param(q, "b")); },
      [](Tape<double>& t, const ParamTree<double>& q) { return minimum(t.param(q, "a"), t.param(q, "b")); },
      [](Tape<double>& t, const ParamTree<double>& q) { return clamp(t.param(q, "a"), -0.5, 0.5); },
      [](Tape<double>& t, const ParamTree<double>& q) { return scale(t.param(q, "a"), -1.7); },
  };
  for (auto f : fns) {
    auto r = check_op(p, f);
    EXPECT_TRUE(r.pass) << r.max_rel_err;
    EXPECT_GT(r.checked, 0u);
  }
}

TEST_F(OpGrad, SoftmaxFamily) {
  ParamTree<double> p;
  p.set("a", randn({6, 5}, rng));
  auto r1 = check_op(p, [](Tape<double>& t, const ParamTree<double>& q) { return softmax(t.param(q, "a")); });
  auto r2 = check_op(p, [](Tape<double>& t, const ParamTree<double>& q) { return log_softmax(t.param(q, "a")); });
  EXPECT_TRUE(r1.pass) << r1.max_rel_err;
  EXPECT_TRUE(r2.pass) << r2.max_rel_err;
}

TEST_F(OpGrad, ResamplingAndPadding) {
  ParamTree<double> p;
  p.set("x", randn({2, 3, 7, 6}, rng));
  auto r1 = check_op(p, [](Tape<double>& t, const ParamTree<double>& q) { return avgpool2x(t.param(q, "x")); });
  auto r2 = check_op(p, [](Tape<double>& t, const ParamTree<double>& q) { return upsample2x(t.param(q, "x")); });
  auto r3 = check_op(p, [](Tape<double>& t, const ParamTree<double>& q) { return pad2d(t.param(q, "x"), 1, -2, 2, -1); });
  EXPECT_TRUE(r1.pass && r2.pass && r3.pass);
}

TEST_F(OpGrad, StructuralOps) {
  ParamTree<double> p;
  p.set("a", randn({4, 3}, rng));
  p.set("b", randn({4, 2}, rng));
  p.set("s", randn({3, 4, 2}, rng));
  std::vector<std::size_t> rows{2, 0};
  auto r1 = check_op(p, [](Tape<double>& t, const ParamTree<double>& q) {
    return concat<double>({t.param(q, "a"), t.param(q, "b")}, 1);
  });
  auto r2 = check_op(p, [&](Tape<double>& t, const ParamTree<double>& q) {
    return scatter_rows(take_rows(t.param(q, "a"), rows), rows, 5);
  });
  auto r3 = check_op(p, [](Tape<double>& t, const ParamTree<double>& q) {
    return pick(t.param(q, "a"), {0, 2, 1, 1});
  });
  auto r4 = check_op(p, [](Tape<double>& t, const ParamTree<double>& q) { return row_sum(t.param(q, "a")); });
  auto r5 = check_op(p, [](Tape<double>& t, const ParamTree<double>& q) { return reshape(t.param(q, "a"), {3, 4}); });
  auto r6 = check_op(p, [&](Tape<double>& t, const ParamTree<double>& q) {
    Tensor<double> s({3, 4, 4});
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = std::sin(double(i));
    return batched_left_matmul(s, t.param(q, "s"));
  });
  for (const auto& r : {r1, r2, r3, r4, r5, r6}) EXPECT_TRUE(r.pass) << r.max_rel_err;
}

TEST_F(OpGrad, ReductionsAndLosses) {
  ParamTree<double> p;
  p.set("a", randn({3, 4}, rng));
  p.set("b", randn({3, 4}, rng));
  Tensor<double> target({3, 4}), mask({3, 4});
  for (std::size_t i = 0; i < 12; ++i) {
    target[i] = i % 3 == 0;
    mask[i] = i % 4 != 1;
  }
  GradCheckConfig cfg;
  auto r1 = grad_check(p, [](Tape<double>& t, const ParamTree<double>& q) { return mean(sigmoid(t.param(q, "a"))); }, cfg);
  auto r2 = grad_check(p, [](Tape<double>& t, const ParamTree<double>& q) { return mse(t.param(q, "a"), t.param(q, "b")); }, cfg);
  auto r3 = grad_check(p, [&](Tape<double>& t, const ParamTree<double>& q) {
    return bce_with_mask(t.param(q, "a"), target, mask);
  }, cfg);
  for (const auto& r : {r1, r2, r3}) EXPECT_TRUE(r.pass) << r.max_rel_err;
}

TEST(Losses, EmptyMaskIsExactlyZero) {
  Tape<double> t;
  auto z = t.variable(Tensor<double>({4}, 3.0));
  auto l = bce_with_mask(z, Tensor<double>({4}, 1.0), Tensor<double>({4}, 0.0));
  EXPECT_EQ(l.value().item(), 0.0);
  t.backward(l);
  const auto gz = t.grad(z);
  for (double g : gz.data()) EXPECT_EQ(g, 0.0);
}

TEST(Optimizer, SgdAscentStep) {
  ParamTree<float> w, g;
  w.set("w", Tensor<float>({1}, 0.0f));
  g.set("w", Tensor<float>({1}, 1.0f));
  Optimizer<float> opt({OptimizerKind::sgd, 0.1, 0.9, 0.999, 1e-8, 0.0, true});
  opt.step(w, g);
  EXPECT_FLOAT_EQ(w.at("w")[0], 0.1f);
}

TEST(Optimizer, ZeroGradientLeavesParamsUnchanged) {
  std::mt19937_64 rng(5);
  ParamTree<double> w;
  w.set("a", randn({3, 2}, rng));
  auto before = w;
  Optimizer<double> sgd({OptimizerKind::sgd, 0.1});
  sgd.step(w, w.zeros_like());
  Optimizer<double> adam({OptimizerKind::adam, 0.1});
  adam.step(w, w.zeros_like());
  EXPECT_EQ(w, before);
}

TEST(Optimizer, AdamConstantGradientTrace) {
  // With a constant gradient g the bias-corrected moments are exactly g and g^2,
  // so every step is lr * g / (|g| + eps).
  const double lr = 0.01, g0 = 2.0, eps = 1e-8;
  ParamTree<double> w, g;
  w.set("w", Tensor<double>({1}, 0.0));
  g.set("w", Tensor<double>({1}, g0));
  Optimizer<double> opt({OptimizerKind::adam, lr, 0.9, 0.999, eps, 0.0, true});
  double prev = 0.0;
  for (int k = 1; k <= 3; ++k) {
    // hand trace of the recurrences
    const double m = (1 - std::pow(0.9, k)) * g0, v = (1 - std::pow(0.999, k)) * g0 * g0;
    const double expected = lr * (m / (1 - std::pow(0.9, k))) / (std::sqrt(v / (1 - std::pow(0.999, k))) + eps);
    opt.step(w, g);
    EXPECT_NEAR(w.at("w")[0] - prev, expected, 1e-15);
    EXPECT_NEAR(w.at("w")[0] - prev, lr * g0 / (g0 + eps), 1e-15);
    prev = w.at("w")[0];
  }
}

TEST(Optimizer, GlobalNormClipping) {
  ParamTree<double> w, g;
  w.set("a", Tensor<double>({2}, 0.0));
  g.set("a", Tensor<double>({2}, std::vector<double>{3.0, 4.0}));
  Optimizer<double> opt({OptimizerKind::sgd, 1.0, 0.9, 0.999, 1e-8, 0.5, false});
  EXPECT_DOUBLE_EQ(opt.step(w, g), 5.0);
  EXPECT_NEAR(w.at("a")[0], -0.3, 1e-15);
  EXPECT_NEAR(w.at("a")[1], -0.4, 1e-15);
}

TEST(Optimizer, StructureMismatchRejected) {
  ParamTree<double> w, g;
  w.set("a", Tensor<double>({2}));
  g.set("b", Tensor<double>({2}));
  Optimizer<double> opt;
  EXPECT_THROW(opt.step(w, g), std::invalid_argument);
}

TEST(Checkpoint, RoundTrip) {
  std::mt19937_64 rng(6);
  ParamTree<float> p;
  p.set("actor.coop.gnn.tap.k0", randn({4, 4}, rng).cast<float>());
  p.set("critic.si.b", randn({1}, rng).cast<float>());
  std::stringstream ss;
  write_checkpoint(ss, p);
  const auto s = ss.str();
  EXPECT_EQ(s.substr(0, 4), "ADVC");
  EXPECT_EQ(read_checkpoint<float>(ss), p);
}

TEST(Checkpoint, BadMagicRejected) {
  std::stringstream ss("XXXX0000");
  EXPECT_THROW(read_checkpoint<float>(ss), std::runtime_error);
}

TEST(ParamTreeTest, LexicographicIteration) {
  ParamTree<float> p;
  p.set("b", Tensor<float>({1}));
  p.set("a.z", Tensor<float>({1}));
  p.set("a.b", Tensor<float>({1}));
  EXPECT_EQ(p.paths(), (std::vector<std::string>{"a.b", "a.z", "b"}));
  EXPECT_EQ(p.subtree("a.").size(), 2u);
}
