#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "transecg/optim.hpp"
#include "transecg/param_io.hpp"
#include "transecg/tensor.hpp"
#include "test_util.hpp"

using namespace transecg::nn;

namespace {

std::vector<double> vec(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

constexpr double kOpTol = 1e-4;

}  // namespace

TEST(Tensor, RejectsBadShapes) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), std::invalid_argument);
  EXPECT_THROW(Tensor({2, 0}, {}), std::invalid_argument);
}

TEST(Matmul, IdentityAndHandArithmetic) {
  const Tensor I({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  std::mt19937_64 rng(1);
  const auto X = test::random_tensor({3, 4}, rng, 1.0, false);
  EXPECT_EQ(vec(matmul(I, X)), vec(X));
  const Tensor a({2, 2}, {1, 2, 3, 4}), b({2, 1}, {5, 6});
  const auto c = matmul(a, b);
  EXPECT_EQ(c.shape(), (Shape{2, 1}));
  EXPECT_EQ(vec(c), (std::vector<double>{17, 39}));
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  const Tensor a({2, 3}, std::vector<double>(6)), b({2, 2}, std::vector<double>(4));
  try {
    matmul(a, b);
    FAIL();
  } catch (const std::invalid_argument& e) {
    const std::string m = e.what();
    EXPECT_NE(m.find("[2, 3]"), std::string::npos) << m;
    EXPECT_NE(m.find("[2, 2]"), std::string::npos) << m;
  }
}

TEST(Softmax, Examples) {
  const auto s = softmax(Tensor({3}, {0, 0, 0}));
  for (double v : s.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
  const auto t = softmax(Tensor({2}, {1000, 0}));
  EXPECT_TRUE(std::isfinite(t[0]) && std::isfinite(t[1]));
  EXPECT_NEAR(t[0], 1.0, 1e-15);
  EXPECT_NEAR(t[1], 0.0, 1e-15);
}

TEST(Softmax, SimplexOnAnyAxis) {
  std::mt19937_64 rng(5);
  const auto x = test::random_tensor({3, 4, 5}, rng, 3.0, false);
  for (int axis : {0, 1, 2, -1}) {
    const auto s = softmax(x, axis);
    for (double v : s.data()) EXPECT_GE(v, 0.0);
    const std::size_t ax = x.normalize_axis(axis);
    const std::size_t len = x.dim(axis);
    std::size_t inner = 1;
    for (std::size_t d = ax + 1; d < 3; ++d) inner *= x.dim(static_cast<int>(d));
    const std::size_t outer = x.size() / (len * inner);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < inner; ++i) {
        double sum = 0.0;
        for (std::size_t l = 0; l < len; ++l) sum += s[(o * len + l) * inner + i];
        EXPECT_NEAR(sum, 1.0, 1e-12);
      }
  }
}

TEST(LayerNorm, Examples) {
  const Tensor g({3}, {1, 1, 1}), b({3}, {0, 0, 0});
  const auto flat = layer_norm(Tensor({3}, {4, 4, 4}), g, b, 1e-6);
  for (double v : flat.data()) EXPECT_EQ(v, 0.0);
  const auto y = layer_norm(Tensor({3}, {1, 2, 3}), g, b, 1e-6);
  const double mean = (y[0] + y[1] + y[2]) / 3.0;
  const double var = (y[0] * y[0] + y[1] * y[1] + y[2] * y[2]) / 3.0 - mean * mean;
  EXPECT_NEAR(mean, 0.0, 1e-7);
  EXPECT_NEAR(var, 1.0, 1e-3);
}

TEST(Elementwise, GeluAndLinear) {
  EXPECT_EQ(gelu(Tensor({1}, {0.0}))[0], 0.0);
  std::mt19937_64 rng(2);
  const auto x = test::random_tensor({4, 3}, rng, 1.0, false);
  const Tensor I({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1}), z({3}, {0, 0, 0});
  EXPECT_EQ(vec(linear(x, I, z)), vec(x));
  EXPECT_THROW(add(x, Tensor({4}, {0, 0, 0, 0})), std::invalid_argument);
  EXPECT_THROW(mul(x, Tensor({3, 4}, std::vector<double>(12))), std::invalid_argument);
}

TEST(Backward, SumAndSquare) {
  Tensor x({2, 3}, {1, -2, 3, 0.5, 4, -1}, true);
  backward(sum(x));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
  x.zero_grad();
  backward(sum(mul(x, x)));
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_DOUBLE_EQ(x.grad()[i], 2.0 * x[i]);
}

TEST(Backward, ReuseAccumulates) {
  Tensor x({3}, {1, 2, 3}, true);
  backward(sum(add(x, x)));
  for (double g : x.grad()) EXPECT_EQ(g, 2.0);
}

TEST(Backward, NonScalarLossRejected) {
  Tensor x({3}, {1, 2, 3}, true);
  const auto y = scale(x, 2.0);
  EXPECT_THROW(backward(y), std::invalid_argument);
  Tape::current().clear();
}

TEST(Backward, NoGradGuardRecordsNothing) {
  Tensor x({3}, {1, 2, 3}, true);
  {
    NoGradGuard g;
    const auto y = sum(x);
    EXPECT_FALSE(y.requires_grad());
  }
  EXPECT_TRUE(Tape::current().empty());
}

// Randomized finite-difference check for every differentiable op.
class OpGradients : public ::testing::TestWithParam<int> {};

TEST_P(OpGradients, MatchCentralDifferences) {
  const auto seed = static_cast<std::uint64_t>(GetParam());
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> dim(2, 4);
  const std::size_t B = dim(rng), M = dim(rng), K = dim(rng), N = dim(rng);

  auto x = test::random_tensor({B, M, K}, rng);
  auto y = test::random_tensor({B, M, K}, rng);
  auto bias = test::random_tensor({K}, rng);
  auto w = test::random_tensor({K, N}, rng);
  auto w3 = test::random_tensor({B, K, N}, rng);
  auto g = test::random_tensor({K}, rng);
  auto be = test::random_tensor({K}, rng);

  struct Case {
    const char* name;
    std::function<Tensor()> f;
    std::vector<Tensor> in;
  };
  const std::vector<Case> cases = {
      {"add", [&] { return test::weighted_sum(add(x, y)); }, {x, y}},
      {"add_broadcast", [&] { return test::weighted_sum(add(x, bias)); }, {x, bias}},
      {"mul", [&] { return test::weighted_sum(mul(x, y)); }, {x, y}},
      {"scale", [&] { return test::weighted_sum(scale(x, -1.7)); }, {x}},
      {"gelu", [&] { return test::weighted_sum(gelu(x)); }, {x}},
      {"sum", [&] { return sum(mul(x, x)); }, {x}},
      {"mean", [&] { return mean(mul(x, y)); }, {x, y}},
      {"matmul_shared", [&] { return test::weighted_sum(matmul(x, w)); }, {x, w}},
      {"matmul_batched", [&] { return test::weighted_sum(matmul(x, w3)); }, {x, w3}},
      {"linear", [&] { return test::weighted_sum(linear(x, w, test::random_tensor({N}, rng, 1.0, false))); }, {x, w}},
      {"softmax_last", [&] { return test::weighted_sum(softmax(x, -1)); }, {x}},
      {"softmax_mid", [&] { return test::weighted_sum(softmax(x, 1)); }, {x}},
      {"layer_norm", [&] { return test::weighted_sum(layer_norm(x, g, be, 1e-6)); }, {x, g, be}},
      {"reshape", [&] { return test::weighted_sum(reshape(x, {B * M, K})); }, {x}},
      {"permute", [&] { return test::weighted_sum(permute(x, {2, 0, 1})); }, {x}},
      {"transpose", [&] { return test::weighted_sum(transpose(x)); }, {x}},
      {"concat", [&] { return test::weighted_sum(concat({x, y}, 1)); }, {x, y}},
      {"slice", [&] { return test::weighted_sum(slice(x, 1, 1, M)); }, {x}},
      {"repeat_leading", [&] { return test::weighted_sum(repeat_leading(bias, 3)); }, {bias}},
  };
  for (const auto& c : cases) {
    // linear draws its bias inside f; pin it for the whole check.
    if (std::string(c.name) == "linear") {
      const auto b = test::random_tensor({N}, rng, 1.0, false);
      const auto r = test::gradcheck([&] { return test::weighted_sum(linear(x, w, b)); }, c.in);
      EXPECT_LT(r.max_rel_error, kOpTol) << c.name << " seed " << seed;
      continue;
    }
    const auto r = test::gradcheck(c.f, c.in);
    EXPECT_LT(r.max_rel_error, kOpTol) << c.name << " seed " << seed << " input " << r.worst_input;
  }
}

INSTANTIATE_TEST_SUITE_P(Seeds, OpGradients, ::testing::Range(0, 20));

TEST(AdamW, ZeroGradNoDecayLeavesParams) {
  Tensor w({3}, {1, -2, 3}, true);
  AdamW opt({w}, {1e-2, 0.9, 0.999, 1e-8, 0.0});
  w.mutable_grad();  // zeros
  opt.step();
  EXPECT_EQ(vec(w), (std::vector<double>{1, -2, 3}));
}

TEST(AdamW, FirstStepMovesByLr) {
  Tensor w({3}, {1, -2, 3}, true);
  AdamW opt({w}, {1e-3, 0.9, 0.999, 1e-8, 0.0});
  const std::vector<double> g = {0.5, -3.0, 1e-3};
  auto gr = w.mutable_grad();
  std::copy(g.begin(), g.end(), gr.begin());
  opt.step();
  const std::vector<double> start = {1, -2, 3};
  for (std::size_t i = 0; i < 3; ++i) {
    const double d = w[i] - start[i];
    EXPECT_LT(d * g[i], 0.0);
    EXPECT_NEAR(std::abs(d), 1e-3, 1e-5);
  }
}

TEST(AdamW, QuadraticBowlConverges) {
  Tensor w({4}, {0.5, -0.5, 0.5, -0.5}, true);
  AdamW opt({w}, {1e-2, 0.9, 0.999, 1e-8, 0.0});
  for (int i = 0; i < 500; ++i) {
    backward(sum(mul(w, w)));
    opt.step();
    opt.zero_grad();
  }
  double n = 0.0;
  for (double v : w.data()) n += v * v;
  EXPECT_LT(std::sqrt(n), 1e-2);
}

TEST(AdamW, DecayShrinksNormWithZeroGrad) {
  Tensor w({3}, {1, 2, 3}, true);
  AdamW opt({w}, {1e-2, 0.9, 0.999, 1e-8, 0.1});
  double prev = 14.0;
  for (int i = 0; i < 5; ++i) {
    w.mutable_grad();
    opt.step();
    double n = 0.0;
    for (double v : w.data()) n += v * v;
    EXPECT_LT(n, prev);
    prev = n;
  }
}

TEST(Container, RoundTripIsBitExact) {
  std::mt19937_64 rng(11);
  std::vector<NamedTensor> ts = {{"a", test::random_tensor({2, 3}, rng)}, {"b/c", Tensor::scalar(-0.1)},
                                 {"é", test::random_tensor({1, 1, 5}, rng)}};
  std::stringstream ss;
  write_tensors(ss, ts);
  const auto back = read_tensors(ss);
  ASSERT_EQ(back.size(), ts.size());
  for (std::size_t i = 0; i < ts.size(); ++i) {
    EXPECT_EQ(back[i].name, ts[i].name);
    EXPECT_EQ(back[i].tensor.shape(), ts[i].tensor.shape());
    EXPECT_EQ(vec(back[i].tensor), vec(ts[i].tensor));
  }
}

TEST(Container, BadMagicAndTruncation) {
  std::stringstream bad("NOPE1234");
  EXPECT_THROW(read_tensors(bad), std::runtime_error);
  std::stringstream ss;
  write_tensors(ss, {{"x", Tensor({4}, {1, 2, 3, 4})}});
  auto s = ss.str();
  s.resize(s.size() - 3);
  std::stringstream cut(s);
  EXPECT_THROW(read_tensors(cut), std::runtime_error);
}
