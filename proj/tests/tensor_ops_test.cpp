#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "glaucad/ops.hpp"
#include "oracles.hpp"

using namespace glaucad;

namespace {

Tensor<double> T4(std::size_t n, std::size_t c, std::size_t h, std::size_t w, std::vector<double> v) {
  return Tensor<double>({n, c, h, w}, std::move(v));
}

}  // namespace

TEST(Tensor, ShapeInvariant) {
  EXPECT_THROW(Tensor<float>({2, 3}, std::vector<float>(5)), ShapeError);
  EXPECT_THROW(Tensor<float>({2, 0}), ShapeError);
  Tensor<float> t({2, 3}, 1.5f);
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_FALSE(t.has_grad());
}

TEST(Conv2d, BiasOnlyOnZeroInput) {
  auto x = T4(1, 1, 3, 3, std::vector<double>(9, 0.0));
  auto w = T4(1, 1, 1, 1, {-3.7});
  Tensor<double> b({1}, 0.5);
  auto y = conv2d(x, w, b);
  for (double v : y.data()) EXPECT_EQ(v, 0.5);
}

TEST(Conv2d, IdentityKernel) {
  std::mt19937_64 gen(1);
  auto xv = oracle::random_vector(2 * 3 * 5 * 4, gen);
  auto x = T4(2, 3, 5, 4, xv);
  std::vector<double> wv(9, 0.0);
  // 3 -> 3 channels, 1x1, identity matrix
  wv[0] = wv[4] = wv[8] = 1.0;
  auto w = T4(3, 3, 1, 1, wv);
  Tensor<double> b({3}, 0.0);
  auto y = conv2d(x, w, b);
  EXPECT_EQ(y.shape(), x.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) EXPECT_EQ(y[i], xv[i]);
}

TEST(Conv2d, ThreeByThreeOnesPaddedMatchesOracle) {
  auto x = T4(1, 1, 3, 3, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  auto w = T4(1, 1, 3, 3, std::vector<double>(9, 1.0));
  Tensor<double> b({1}, 0.0);
  auto y = conv2d(x, w, b, {1, 1});
  ASSERT_EQ(y.shape(), (Shape{1, 1, 3, 3}));
  EXPECT_EQ(y[4], 45.0);
  std::size_t Ho, Wo;
  auto ref = oracle::conv2d(x.values(), 1, 1, 3, 3, w.values(), 1, 3, 3, b.values(), 1, 1, Ho, Wo);
  // Corner sums: 1+2+4+5 = 12 etc.
  EXPECT_EQ(ref[0], 12.0);
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_EQ(y[i], ref[i]);
}

TEST(Conv2d, RandomShapesExactInDoubleAndCloseInFloat) {
  std::mt19937_64 gen(7);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t N = 1 + gen() % 2, Ci = 1 + gen() % 3, Co = 1 + gen() % 3;
    const std::size_t K = 1 + gen() % 3, pad = gen() % 2, stride = 1 + gen() % 2;
    const std::size_t H = K + gen() % 5, W = K + gen() % 5;
    auto xv = oracle::random_vector(N * Ci * H * W, gen);
    auto wv = oracle::random_vector(Co * Ci * K * K, gen);
    auto bv = oracle::random_vector(Co, gen);
    std::size_t Ho, Wo;
    auto ref = oracle::conv2d(xv, N, Ci, H, W, wv, Co, K, K, bv, stride, pad, Ho, Wo);
    auto y = conv2d(T4(N, Ci, H, W, xv), T4(Co, Ci, K, K, wv), Tensor<double>({Co}, bv), {stride, pad});
    ASSERT_EQ(y.shape(), (Shape{N, Co, Ho, Wo}));
    for (std::size_t i = 0; i < ref.size(); ++i) ASSERT_EQ(y[i], ref[i]) << "trial " << trial;
    auto yf = conv2d(T4(N, Ci, H, W, xv).cast<float>(), T4(Co, Ci, K, K, wv).cast<float>(),
                     Tensor<double>({Co}, bv).cast<float>(), {stride, pad});
    for (std::size_t i = 0; i < ref.size(); ++i) {
      EXPECT_NEAR(yf[i], ref[i], 1e-4 * std::max(1.0, std::abs(ref[i])));
    }
  }
}

TEST(Conv2d, ShapeErrors) {
  Tensor<float> x({1, 2, 4, 4});
  Tensor<float> b({1});
  EXPECT_THROW(conv2d(x, Tensor<float>({1, 3, 3, 3}), b), ShapeError);
  EXPECT_THROW(conv2d(x, Tensor<float>({1, 2, 5, 5}), b), ShapeError);
  EXPECT_THROW(conv2d(x, Tensor<float>({2, 2, 3, 3}), b), ShapeError);
  EXPECT_NO_THROW(conv2d(x, Tensor<float>({1, 2, 5, 5}), b, {1, 1}));
}

TEST(MaxPool, SingleWindowAndConstancy) {
  auto y = maxpool2d(T4(1, 1, 2, 2, {1, 2, 3, 4}));
  ASSERT_EQ(y.numel(), 1u);
  EXPECT_EQ(y[0], 4.0);
  auto c = maxpool2d(T4(1, 2, 4, 4, std::vector<double>(32, 2.5)));
  for (double v : c.data()) EXPECT_EQ(v, 2.5);
}

TEST(MaxPool, RandomMatchesWindowScan) {
  std::mt19937_64 gen(3);
  auto xv = oracle::random_vector(16, gen);
  auto y = maxpool2d(T4(1, 1, 4, 4, xv));
  for (std::size_t oh = 0; oh < 2; ++oh)
    for (std::size_t ow = 0; ow < 2; ++ow) {
      double m = -1e300;
      for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t j = 0; j < 2; ++j) m = std::max(m, xv[(2 * oh + i) * 4 + 2 * ow + j]);
      EXPECT_EQ(y[oh * 2 + ow], m);
    }
}

TEST(MaxPool, TiesRouteGradientToFirstElement) {
  Tape<double> tape;
  auto x = T4(1, 1, 2, 2, {5, 5, 5, 5});
  x.set_requires_grad(true);
  auto y = maxpool2d(x, 2, &tape);
  backward(tape, sum(y, &tape));
  EXPECT_EQ(x.grad()[0], 1.0);
  EXPECT_EQ(x.grad()[1], 0.0);
  EXPECT_EQ(x.grad()[3], 0.0);
}

TEST(MaxPool, IndivisibleExtentThrows) {
  EXPECT_THROW(maxpool2d(Tensor<float>({1, 1, 3, 4})), ShapeError);
}

TEST(Relu, ForwardAndDeadUnit) {
  Tensor<double> x({3}, {-1.0, 0.0, 2.0});
  x.set_requires_grad(true);
  Tape<double> tape;
  auto y = relu(x, &tape);
  EXPECT_EQ(y[0], 0.0);
  EXPECT_EQ(y[1], 0.0);
  EXPECT_EQ(y[2], 2.0);
  backward(tape, sum(y, &tape));
  EXPECT_EQ(x.grad()[0], 0.0);
  EXPECT_EQ(x.grad()[2], 1.0);
  auto z = relu(Tensor<double>({4}, -3.0));
  for (double v : z.data()) EXPECT_EQ(v, 0.0);
}

TEST(Dropout, EvalIsIdentity) {
  std::mt19937_64 gen(5);
  Tensor<double> x({2, 8}, oracle::random_vector(16, gen));
  auto y = dropout(x, 0.5, Mode::eval, nullptr);
  EXPECT_EQ(y.values(), x.values());
}

TEST(Dropout, KeptElementScaledByTwo) {
  Rng rng(11);
  Tensor<double> x({64}, 3.0);
  auto y = dropout(x, 0.5, Mode::train, &rng);
  std::size_t kept = 0;
  for (double v : y.data()) {
    EXPECT_TRUE(v == 0.0 || v == 6.0);
    kept += v == 6.0;
  }
  EXPECT_GT(kept, 0u);
  EXPECT_LT(kept, 64u);
}

TEST(Dropout, SeededMaskIsReproducible) {
  Rng a(42), b(42);
  EXPECT_EQ(dropout_mask(16, 0.5, a), dropout_mask(16, 0.5, b));
  Rng c(42);
  Tensor<float> x({1, 1, 4, 4}, 1.0f);
  Rng d(42);
  auto y1 = dropout(x, 0.5, Mode::train, &c);
  auto y2 = dropout(x, 0.5, Mode::train, &d);
  EXPECT_EQ(y1.values(), y2.values());
}

TEST(Dropout, PreservesExpectation) {
  Rng rng(2024);
  Tensor<double> x({64}, 1.7);
  double total = 0;
  const int masks = 10000;
  for (int i = 0; i < masks; ++i) {
    auto y = dropout(x, 0.5, Mode::train, &rng);
    for (double v : y.data()) total += v;
  }
  const double mean = total / (masks * 64.0);
  EXPECT_NEAR(mean, 1.7, 0.02 * 1.7);
}

TEST(Dropout, RateOutOfRange) {
  Rng rng(1);
  Tensor<float> x({4});
  EXPECT_THROW(dropout(x, 1.0, Mode::train, &rng), ConfigError);
  EXPECT_THROW(dropout(x, -0.1, Mode::eval, &rng), ConfigError);
}

TEST(GlobalAvgPool, Means) {
  auto y = global_avg_pool(T4(1, 1, 2, 2, {1, 2, 3, 4}));
  EXPECT_EQ(y.shape(), (Shape{1, 1}));
  EXPECT_EQ(y[0], 2.5);
  auto one = global_avg_pool(T4(1, 3, 1, 1, {7, 8, 9}));
  EXPECT_EQ(one.values(), (std::vector<double>{7, 8, 9}));
  std::mt19937_64 gen(9);
  auto xv = oracle::random_vector(75, gen);
  auto r = global_avg_pool(T4(1, 3, 5, 5, xv));
  for (std::size_t c = 0; c < 3; ++c) {
    double s = 0;
    for (std::size_t i = 0; i < 25; ++i) s += xv[c * 25 + i];
    EXPECT_NEAR(r[c], s / 25.0, 1e-15);
  }
}

TEST(SoftmaxXent, SymmetricLogits) {
  Tensor<double> z({1, 2}, {0.0, 0.0});
  z.set_requires_grad(true);
  Tape<double> tape;
  std::vector<int> labels{0};
  auto r = softmax_cross_entropy<double>(z, labels, &tape);
  EXPECT_NEAR(r.loss.item(), std::log(2.0), 1e-12);
  EXPECT_NEAR(r.loss.item(), 0.693147, 1e-6);
  EXPECT_EQ(r.probabilities[0], 0.5);
  EXPECT_EQ(r.probabilities[1], 0.5);
  backward(tape, r.loss);
  EXPECT_EQ(z.grad()[0], -0.5);
  EXPECT_EQ(z.grad()[1], 0.5);
}

TEST(SoftmaxXent, RandomMatchesDirectFormula) {
  std::mt19937_64 gen(17);
  for (int trial = 0; trial < 20; ++trial) {
    auto zv = oracle::random_vector(8, gen, -4, 4);
    std::vector<int> labels{static_cast<int>(gen() % 2), static_cast<int>(gen() % 2),
                            static_cast<int>(gen() % 2), static_cast<int>(gen() % 2)};
    double ref = 0;
    for (int n = 0; n < 4; ++n) {
      const double e0 = std::exp(zv[2 * n]), e1 = std::exp(zv[2 * n + 1]);
      ref += -std::log((labels[n] ? e1 : e0) / (e0 + e1));
    }
    ref /= 4;
    auto r = softmax_cross_entropy<float>(Tensor<double>({4, 2}, zv).cast<float>(), labels);
    EXPECT_NEAR(r.loss.item(), ref, 1e-6);
    EXPECT_GE(r.loss.item(), 0.0f);
    for (int n = 0; n < 4; ++n) EXPECT_NEAR(r.probabilities[2 * n] + r.probabilities[2 * n + 1], 1.0, 1e-6);
  }
}

TEST(SoftmaxXent, LabelOutOfRange) {
  Tensor<float> z({1, 2});
  std::vector<int> bad{2};
  EXPECT_THROW(softmax_cross_entropy<float>(z, bad), ConfigError);
}

TEST(Backward, IdentityGradientIsOne) {
  Tensor<double> x({1}, 3.0, true);
  Tape<double> tape;
  auto y = sum(x, &tape);
  backward(tape, y);
  EXPECT_EQ(x.grad()[0], 1.0);
  EXPECT_TRUE(tape.empty());
}

TEST(Backward, FanOutAccumulates) {
  Tensor<double> x({3}, {1.0, -2.0, 0.5}, true);
  Tape<double> tape;
  Tensor<double> w({3}, {2.0, 3.0, 4.0});
  auto a = dot_const(x, w, &tape);  // grad w
  auto b = sum(x, &tape);           // grad 1
  auto loss = add(a, b, &tape);
  EXPECT_EQ(tape.size(), 3u);
  backward(tape, loss);
  EXPECT_EQ(x.grad()[0], 3.0);
  EXPECT_EQ(x.grad()[1], 4.0);
  EXPECT_EQ(x.grad()[2], 5.0);
}

TEST(Backward, Errors) {
  Tape<double> tape;
  Tensor<double> x({2}, 1.0, true);
  auto y = relu(x, &tape);
  EXPECT_THROW(backward(tape, y), ShapeError);
  Tensor<double> detached({1}, 1.0);
  EXPECT_THROW(backward(tape, detached), Error);
}

TEST(Rng, SameSeedSameSequence) {
  Rng a(99), b(99);
  for (int i = 0; i < 100; ++i) {
    EXPECT_EQ(a.next_u64(), b.next_u64());
  }
  Rng c(5);
  for (int i = 0; i < 1000; ++i) {
    const double u = c.uniform();
    EXPECT_GE(u, 0.0);
    EXPECT_LT(u, 1.0);
  }
}
