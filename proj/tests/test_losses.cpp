#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "fedcd/losses.hpp"
#include "fedcd/model.hpp"
#include "testutil.hpp"

using namespace fedcd;
using testutil::random_tensor;

namespace {

CdlConfig tiny_eps_config() {
  CdlConfig c;
  c.smoothing_epsilon = 1e-12;
  return c;
}

// Random smoothed distribution of dimension d.
Tensor random_distribution(fedcd::rng::Stream& rs, std::size_t d, double eps = 1e-6) {
  std::vector<double> v(d);
  double mx = -1e300;
  for (auto& x : v) {
    x = rs.uniform(-3.0, 3.0);
    mx = std::max(mx, x);
  }
  double z = 0.0;
  for (auto& x : v) {
    x = std::exp(x - mx);
    z += x;
  }
  for (auto& x : v) x = (1.0 - d * eps) * (x / z) + eps;
  return Tensor({d}, std::move(v));
}

}  // namespace

TEST_CASE("cdl config validation and schedule") {
  CdlConfig c;
  REQUIRE_NOTHROW(c.validate());
  c.beta = 1.5;
  REQUIRE_THROWS_AS(c.validate(), std::invalid_argument);
  c = CdlConfig{};
  c.temperature = 0.0;
  REQUIRE_THROWS_AS(c.validate(), std::invalid_argument);
  c = CdlConfig{};
  c.smoothing_epsilon = 1e-2;
  REQUIRE_THROWS_AS(c.validate(), std::invalid_argument);

  c = CdlConfig{};
  c.beta = 0.8;
  c.schedule = BetaSchedule::LinearDecay;
  c.schedule_end = 0.2;
  c.schedule_rounds = 6;
  REQUIRE(c.beta_at(0) == Catch::Approx(0.8));
  REQUIRE(c.beta_at(3) == Catch::Approx(0.5));
  REQUIRE(c.beta_at(6) == Catch::Approx(0.2));
  REQUIRE(c.beta_at(1000) == Catch::Approx(0.2));

  c.positive_weighting = PositiveWeighting::Unweighted;
  REQUIRE(c.backbone_cd_weight(3) == 1.0);
}

TEST_CASE("mae examples") {
  auto pred = ad::leaf(Tensor({2, 1}, {0.1, -0.2}));
  auto tgt = ad::leaf(Tensor({2, 1}, {0.2, 0.0}));
  REQUIRE(mae_loss(pred, tgt)->value.item() == Catch::Approx(0.15).margin(1e-15));

  REQUIRE(mae_loss(pred, pred)->value.item() == 0.0);

  auto one = ad::leaf(Tensor({1, 1}, {1.0}));
  auto zero = ad::leaf(Tensor({1, 1}, {0.0}));
  REQUIRE(mae_loss(one, zero)->value.item() == 1.0);

  REQUIRE_THROWS_AS(mae_loss(pred, one), std::invalid_argument);
}

TEST_CASE("feature distribution examples") {
  CdlConfig cfg = tiny_eps_config();

  auto zeros = ad::leaf(Tensor::zeros({3, 4}));
  auto p = feature_distribution(zeros, cfg)->value;
  for (std::size_t i = 0; i < 4; ++i) REQUIRE(p[i] == Catch::Approx(0.25).margin(1e-12));

  auto one_row = ad::leaf(Tensor({1, 2}, {std::log(3.0), 0.0}));
  auto q = feature_distribution(one_row, cfg)->value;
  REQUIRE(q[0] == Catch::Approx(0.75).margin(1e-9));
  REQUIRE(q[1] == Catch::Approx(0.25).margin(1e-9));

  // smoothing floor and normalization hold for arbitrary inputs
  CdlConfig cfg6;  // default eps 1e-6
  fedcd::rng::Stream rs(5);
  for (int i = 0; i < 50; ++i) {
    auto f = ad::leaf(random_tensor(rs, {4, 6}, -40.0, 40.0));
    auto d = feature_distribution(f, cfg6)->value;
    double s = 0.0;
    for (std::size_t j = 0; j < d.numel(); ++j) {
      REQUIRE(d[j] >= cfg6.smoothing_epsilon);
      s += d[j];
    }
    REQUIRE(std::fabs(s - 1.0) < 1e-12);
  }

  REQUIRE_THROWS_AS(feature_distribution(ad::leaf(Tensor::zeros({3, 1})), cfg),
                    std::invalid_argument);
}

TEST_CASE("kl divergence examples") {
  auto p = ad::leaf(Tensor({2}, {0.5, 0.5}));
  auto q = ad::leaf(Tensor({2}, {0.25, 0.75}));

  REQUIRE(kl_divergence(p, p)->value.item() == 0.0);

  const double pq = 0.5 * std::log(2.0) + 0.5 * std::log(2.0 / 3.0);
  REQUIRE(kl_divergence(p, q)->value.item() == Catch::Approx(pq).margin(1e-15));
  REQUIRE(kl_divergence(p, q)->value.item() == Catch::Approx(0.14384).margin(5e-6));

  REQUIRE(kl_divergence(q, p)->value.item() == Catch::Approx(0.13081).margin(5e-6));
  REQUIRE(kl_divergence(p, q)->value.item() != kl_divergence(q, p)->value.item());

  REQUIRE_THROWS_AS(kl_divergence(p, ad::leaf(Tensor({3}, {0.2, 0.3, 0.5}))),
                    std::invalid_argument);
}

TEST_CASE("kl non-negativity over random smoothed pairs") {
  fedcd::rng::Stream rs(17);
  for (int i = 0; i < 1000; ++i) {
    auto p = ad::leaf(random_distribution(rs, 8));
    auto q = ad::leaf(random_distribution(rs, 8));
    const double kl = kl_divergence(p, q)->value.item();
    REQUIRE(kl >= -1e-12);
    REQUIRE(kl > 0.0);  // distinct random pairs
    REQUIRE(kl_divergence(p, p)->value.item() == 0.0);
  }
}

TEST_CASE("cdl terms on identical and distinct branches") {
  CdlConfig cfg;
  fedcd::rng::Stream rs(23);
  Tensor f = random_tensor(rs, {6, 5});

  auto same = cdl_loss(ad::leaf(f), ad::leaf(f), cfg);
  REQUIRE(same.cd_plus->value.item() == 0.0);
  REQUIRE(same.cd_minus->value.item() == 0.0);
  REQUIRE(same.combined->value.item() == 0.0);

  Tensor g = random_tensor(rs, {6, 5});
  auto diff = cdl_loss(ad::leaf(f), ad::leaf(g), cfg, 1.0);
  REQUIRE(diff.combined->value.item() == diff.cd_plus->value.item());  // beta = 1

  // convex combination bound over random betas
  for (int i = 0; i < 50; ++i) {
    const double beta = rs.next_double();
    auto t = cdl_loss(ad::leaf(random_tensor(rs, {4, 5})), ad::leaf(random_tensor(rs, {4, 5})),
                      cfg, beta);
    const double lo = std::min(t.cd_plus->value.item(), t.cd_minus->value.item());
    const double hi = std::max(t.cd_plus->value.item(), t.cd_minus->value.item());
    REQUIRE(t.combined->value.item() >= lo - 1e-12);
    REQUIRE(t.combined->value.item() <= hi + 1e-12);
  }
}

TEST_CASE("combine and total loss arithmetic") {
  auto cdp = ad::leaf(Tensor::scalar(0.2));
  auto cdm = ad::leaf(Tensor::scalar(0.1));
  REQUIRE(combine_cdl(cdp, cdm, 0.5)->value.item() == Catch::Approx(0.15).margin(1e-15));

  auto mae = ad::leaf(Tensor::scalar(0.3));
  REQUIRE(backbone_loss(mae, ad::leaf(Tensor::scalar(0.0)), 0.5)->value.item() == 0.3);
  REQUIRE(backbone_loss(mae, cdp, 0.5)->value.item() == Catch::Approx(0.4).margin(1e-15));

  auto zero = ad::leaf(Tensor::scalar(0.0));
  REQUIRE(final_loss(zero, zero)->value.item() == 0.0);
  REQUIRE(final_loss(mae, combine_cdl(cdp, cdm, 0.5))->value.item() ==
          Catch::Approx(0.45).margin(1e-15));

  // final == backbone + (1-beta) * cd_minus when decomposed
  const double beta = 0.37;
  const double total = final_loss(mae, combine_cdl(cdp, cdm, beta))->value.item();
  const double decomposed =
      backbone_loss(mae, cdp, beta)->value.item() + (1.0 - beta) * cdm->value.item();
  REQUIRE(total == Catch::Approx(decomposed).margin(1e-15));
}

TEST_CASE("gradient detachment per direction") {
  const NetConfig cfg{.input_dim = 3, .hidden_dim = 4, .residual_blocks = 1, .feature_dim = 3};
  auto agent = init_siamese(cfg, 31);
  // separate the branches so the KL terms are nonzero
  for (auto& [_, t] : agent.subnet.entries)
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] += 0.05;

  fedcd::rng::Stream rs(32);
  Tensor batch = random_tensor(rs, {8, 3});
  auto bb = forward_features(agent.backbone, cfg, batch, true);
  auto sn = forward_features(agent.subnet, cfg, batch, true);

  CdlConfig lcfg;
  auto terms = cdl_loss(bb.features, sn.features, lcfg);
  REQUIRE(terms.cd_plus->value.item() > 0.0);

  auto plus_grads = ad::backward(terms.cd_plus);
  bool backbone_touched = false;
  for (const auto& leaf : bb.leaves) {
    auto it = plus_grads.find(leaf.get());
    if (it != plus_grads.end())
      for (std::size_t i = 0; i < it->second.numel(); ++i)
        if (it->second[i] != 0.0) backbone_touched = true;
  }
  REQUIRE(backbone_touched);
  // subnet leaves are structurally disconnected from cd_plus
  for (const auto& leaf : sn.leaves) REQUIRE(plus_grads.find(leaf.get()) == plus_grads.end());

  auto minus_grads = ad::backward(terms.cd_minus);
  for (const auto& leaf : bb.leaves) REQUIRE(minus_grads.find(leaf.get()) == minus_grads.end());
  bool subnet_touched = false;
  for (const auto& leaf : sn.leaves) {
    auto it = minus_grads.find(leaf.get());
    if (it != minus_grads.end())
      for (std::size_t i = 0; i < it->second.numel(); ++i)
        if (it->second[i] != 0.0) subnet_touched = true;
  }
  REQUIRE(subnet_touched);
}

TEST_CASE("one descent step on cd_plus does not increase it") {
  CdlConfig cfg;
  fedcd::rng::Stream rs(37);
  int strict_decrease = 0;
  for (int trial = 0; trial < 100; ++trial) {
    Tensor fb = random_tensor(rs, {4, 5});
    Tensor fs = random_tensor(rs, {4, 5});

    auto bb = ad::leaf(fb, true);
    auto terms = cdl_loss(bb, ad::leaf(fs), cfg);
    const double before = terms.cd_plus->value.item();
    auto grads = ad::backward(terms.cd_plus);
    const Tensor& g = grads.at(bb.get());

    const double lr = 1e-3;
    Tensor stepped = fb;
    for (std::size_t i = 0; i < stepped.numel(); ++i) stepped[i] -= lr * g[i];

    auto after_terms = cdl_loss(ad::leaf(stepped), ad::leaf(fs), cfg);
    const double after = after_terms.cd_plus->value.item();
    REQUIRE(after <= before + 1e-12);
    if (after < before) ++strict_decrease;
  }
  REQUIRE(strict_decrease > 90);
}
