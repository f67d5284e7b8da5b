#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "fedcd/autodiff.hpp"
#include "fedcd/rng.hpp"
#include "testutil.hpp"

using fedcd::Shape;
using fedcd::Tensor;
namespace ad = fedcd::ad;
using testutil::check_gradients;
using testutil::random_tensor;

namespace {

// Scalarize a non-scalar output against a fixed random weighting so the
// finite-difference check exercises the full jacobian, not just row sums.
ad::NodePtr weighted_sum(const ad::NodePtr& out, const Tensor& w) {
  return ad::sum(ad::mul(out, ad::constant(w)));
}

}  // namespace

TEST_CASE("tensor invariants") {
  REQUIRE_THROWS_AS(Tensor({2, 2}, {1.0, 2.0}), std::invalid_argument);
  REQUIRE_THROWS_AS(Tensor({2}, {1.0, std::nan("")}), std::invalid_argument);
  REQUIRE_THROWS_AS(Tensor({2}, {1.0, INFINITY}), std::invalid_argument);
  REQUIRE_THROWS_AS(Tensor({0}, {}), std::invalid_argument);
  Tensor t({2, 3}, std::vector<double>(6, 1.5));
  REQUIRE(t.numel() == 6);
  REQUIRE(t.dim(1) == 3);
}

TEST_CASE("forward examples") {
  auto a = ad::leaf(Tensor::ones({2, 3}));
  auto b = ad::leaf(Tensor::ones({3, 1}));
  auto mm = ad::matmul(a, b);
  REQUIRE(mm->value.shape() == Shape{2, 1});
  REQUIRE(mm->value[0] == 3.0);
  REQUIRE(mm->value[1] == 3.0);

  auto r = ad::relu(ad::leaf(Tensor({3}, {-1.0, 0.0, 2.0})));
  REQUIRE(r->value.vec() == std::vector<double>{0.0, 0.0, 2.0});

  auto sm = ad::softmax_lastdim(ad::leaf(Tensor({2}, {0.0, 0.0})));
  REQUIRE(sm->value[0] == Catch::Approx(0.5).margin(1e-15));
  REQUIRE(sm->value[1] == Catch::Approx(0.5).margin(1e-15));
}

TEST_CASE("shape mismatch errors name the op and shapes") {
  auto a = ad::leaf(Tensor::ones({2, 3}));
  auto b = ad::leaf(Tensor::ones({2, 2}));
  try {
    ad::add(a, b);
    FAIL("expected throw");
  } catch (const std::invalid_argument& e) {
    std::string msg = e.what();
    REQUIRE(msg.find("add") != std::string::npos);
    REQUIRE(msg.find("[2x3]") != std::string::npos);
    REQUIRE(msg.find("[2x2]") != std::string::npos);
  }
  REQUIRE_THROWS_AS(ad::matmul(a, b), std::invalid_argument);
  REQUIRE_THROWS_AS(ad::reshape(a, {4, 2}), std::invalid_argument);
}

TEST_CASE("backward requires scalar root") {
  auto x = ad::leaf(Tensor::ones({3}), true);
  REQUIRE_THROWS_AS(ad::backward(ad::relu(x)), std::invalid_argument);
  REQUIRE_NOTHROW(ad::backward(ad::sum(x)));
}

TEST_CASE("backward examples") {
  // d/dx sum(x*x) = 2x
  auto x = ad::leaf(Tensor({1}, {3.0}), true);
  ad::backward(ad::sum(ad::mul(x, x)));
  REQUIRE(x->grad[0] == Catch::Approx(6.0).margin(1e-12));

  // d/dx sum(x) = ones
  auto y = ad::leaf(Tensor({4}, {0.3, -1.0, 2.0, 0.0}), true);
  ad::backward(ad::sum(y));
  for (std::size_t i = 0; i < 4; ++i) REQUIRE(y->grad[i] == 1.0);

  // d/dx mean(|x - y|) at x=0.1, y=0.2 -> sign(-0.1) = -1
  auto px = ad::leaf(Tensor({1}, {0.1}), true);
  auto py = ad::leaf(Tensor({1}, {0.2}), true);
  ad::backward(ad::mean(ad::abs(ad::sub(px, py))));
  REQUIRE(px->grad[0] == Catch::Approx(-1.0).margin(1e-12));
  REQUIRE(py->grad[0] == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("gradients match central finite differences per op") {
  fedcd::rng::Stream rs(20240817);
  const int instances = 20;

  auto check = [&](const char* what, const testutil::GraphBuilder& build,
                   std::vector<Tensor> leaves) {
    auto rep = check_gradients(build, std::move(leaves));
    INFO(what << " max rel err " << rep.max_rel_err);
    REQUIRE(rep.ok);
  };

  for (int i = 0; i < instances; ++i) {
    Tensor w23 = random_tensor(rs, {2, 3});
    Tensor w24 = random_tensor(rs, {2, 4});
    Tensor w1 = random_tensor(rs, {1});
    Tensor w43 = random_tensor(rs, {4, 3});

    check("add", [&](const auto& L) { return weighted_sum(ad::add(L[0], L[1]), w23); },
          {random_tensor(rs, {2, 3}), random_tensor(rs, {2, 3})});
    check("sub", [&](const auto& L) { return weighted_sum(ad::sub(L[0], L[1]), w23); },
          {random_tensor(rs, {2, 3}), random_tensor(rs, {2, 3})});
    check("mul", [&](const auto& L) { return weighted_sum(ad::mul(L[0], L[1]), w23); },
          {random_tensor(rs, {2, 3}), random_tensor(rs, {2, 3})});
    check("matmul", [&](const auto& L) { return weighted_sum(ad::matmul(L[0], L[1]), w24); },
          {random_tensor(rs, {2, 3}), random_tensor(rs, {3, 4})});
    check("relu", [&](const auto& L) { return weighted_sum(ad::relu(L[0]), w23); },
          {random_tensor(rs, {2, 3}, -2.0, 2.0, 1e-3)});
    check("exp", [&](const auto& L) { return weighted_sum(ad::exp(L[0]), w23); },
          {random_tensor(rs, {2, 3})});
    check("log", [&](const auto& L) { return weighted_sum(ad::log(L[0]), w23); },
          {random_tensor(rs, {2, 3}, 0.1, 2.0)});
    check("sum", [&](const auto& L) { return ad::sum(L[0]); }, {random_tensor(rs, {2, 3})});
    check("mean", [&](const auto& L) { return ad::mean(L[0]); }, {random_tensor(rs, {2, 3})});
    check("softmax", [&](const auto& L) { return weighted_sum(ad::softmax_lastdim(L[0]), w23); },
          {random_tensor(rs, {2, 3})});
    check("reshape", [&](const auto& L) { return weighted_sum(ad::reshape(L[0], {2, 3}), w23); },
          {random_tensor(rs, {6})});
    check("concat",
          [&](const auto& L) { return weighted_sum(ad::concat({L[0], L[1]}, 0), w43); },
          {random_tensor(rs, {1, 3}), random_tensor(rs, {3, 3})});
    check("concat axis1",
          [&](const auto& L) { return weighted_sum(ad::concat({L[0], L[1]}, 1), w24); },
          {random_tensor(rs, {2, 1}), random_tensor(rs, {2, 3})});
    check("scalar_mul", [&](const auto& L) { return weighted_sum(ad::scalar_mul(L[0], -1.7), w23); },
          {random_tensor(rs, {2, 3})});
    check("abs", [&](const auto& L) { return weighted_sum(ad::abs(L[0]), w23); },
          {random_tensor(rs, {2, 3}, -2.0, 2.0, 1e-3)});
    check("composite mae",
          [&](const auto& L) { return ad::mean(ad::abs(ad::sub(L[0], L[1]))); },
          {random_tensor(rs, {5, 1}, -2.0, 2.0, 0.0),
           random_tensor(rs, {5, 1}, 2.5, 4.0)});  // disjoint ranges keep |x-y| off the kink
    check("composite softmax-log chain",
          [&](const auto& L) {
            return ad::sum(ad::mul(ad::log(ad::softmax_lastdim(L[0])), ad::constant(w23)));
          },
          {random_tensor(rs, {2, 3})});
    (void)w1;
  }
}

TEST_CASE("backward is deterministic across repeated evaluation") {
  fedcd::rng::Stream rs(7);
  Tensor xa = random_tensor(rs, {3, 4});
  Tensor xb = random_tensor(rs, {4, 2});

  auto run = [&]() {
    auto a = ad::leaf(xa, true);
    auto b = ad::leaf(xb, true);
    auto root = ad::mean(ad::abs(ad::matmul(ad::relu(a), b)));
    ad::backward(root);
    std::vector<double> flat = a->grad.vec();
    flat.insert(flat.end(), b->grad.vec().begin(), b->grad.vec().end());
    return flat;
  };
  REQUIRE(run() == run());
}

TEST_CASE("softmax rows are normalized distributions") {
  fedcd::rng::Stream rs(99);
  for (int i = 0; i < 50; ++i) {
    auto x = ad::leaf(random_tensor(rs, {4, 7}, -30.0, 30.0));
    auto y = ad::softmax_lastdim(x)->value;
    for (std::size_t r = 0; r < 4; ++r) {
      double s = 0.0;
      for (std::size_t j = 0; j < 7; ++j) {
        const double v = y[r * 7 + j];
        REQUIRE(v > 0.0);
        REQUIRE(v < 1.0);
        s += v;
      }
      REQUIRE(std::fabs(s - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("softmax survives large magnitudes") {
  auto x = ad::leaf(Tensor({2}, {1000.0, 999.0}));
  auto y = ad::softmax_lastdim(x)->value;
  REQUIRE(y.all_finite());
  REQUIRE(y[0] == Catch::Approx(1.0 / (1.0 + std::exp(-1.0))).epsilon(1e-12));
}

TEST_CASE("detach cuts the gradient path") {
  auto x = ad::leaf(Tensor({2}, {0.5, -0.25}), true);
  auto d = ad::detach(ad::mul(x, x));
  auto root = ad::sum(ad::mul(d, x));
  ad::backward(root);
  // Gradient sees d as constant: d/dx sum(c*x) = c = x^2 at the detach point.
  REQUIRE(x->grad[0] == Catch::Approx(0.25).margin(1e-15));
  REQUIRE(x->grad[1] == Catch::Approx(0.0625).margin(1e-15));
}
