#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <sstream>

#include "fedcd/cdtheory.hpp"

using namespace fedcd::cdtheory;
namespace rng = fedcd::rng;

TEST_CASE("model construction guards") {
  REQUIRE_THROWS_AS(DiscreteEnergyModel(0, {}), std::invalid_argument);
  REQUIRE_THROWS_AS(DiscreteEnergyModel(13, ParamVector(13 + 78, 0.0)), std::invalid_argument);
  REQUIRE_THROWS_AS(DiscreteEnergyModel(3, ParamVector(5, 0.0)), std::invalid_argument);
  REQUIRE_NOTHROW(DiscreteEnergyModel(1, {0.0}));
  REQUIRE_NOTHROW(DiscreteEnergyModel(12, ParamVector(12 + 66, 0.1)));
}

TEST_CASE("energy and statistics bookkeeping") {
  // n=3: E(x) = -b.x - w01 x0 x1 - w02 x0 x2 - w12 x1 x2
  DiscreteEnergyModel m(3, {0.5, -0.25, 1.0, 2.0, -1.0, 0.5});
  REQUIRE(m.pair_index(0, 1) == 3);
  REQUIRE(m.pair_index(0, 2) == 4);
  REQUIRE(m.pair_index(2, 1) == 5);

  REQUIRE(m.energy({0, 0, 0}) == 0.0);
  REQUIRE(m.energy({1, 1, 0}) == Catch::Approx(-(0.5 - 0.25 + 2.0)).margin(1e-15));
  REQUIRE(m.energy({1, 1, 1}) == Catch::Approx(-(0.5 - 0.25 + 1.0 + 2.0 - 1.0 + 0.5)).margin(1e-15));

  auto g = m.energy_gradient({1, 0, 1});
  REQUIRE(g[0] == -1.0);
  REQUIRE(g[1] == 0.0);
  REQUIRE(g[2] == -1.0);
  REQUIRE(g[4] == -1.0);  // w02 active
  REQUIRE(g[3] == 0.0);
  REQUIRE(g[5] == 0.0);
}

TEST_CASE("partition function oracle cases") {
  DiscreteEnergyModel flat(1, {0.0});
  REQUIRE(partition_function(flat) == Catch::Approx(2.0).epsilon(1e-14));

  for (double b : {-3.0, -0.5, 0.7, 4.2}) {
    DiscreteEnergyModel m(1, {b});
    REQUIRE(partition_function(m) == Catch::Approx(1.0 + std::exp(b)).epsilon(1e-13));
  }

  // log-sum-exp agrees with naive summation for n <= 8, |theta| <= 5
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    const std::size_t n = 2 + seed;
    auto m = DiscreteEnergyModel::random(n, 5.0, seed);
    double naive = 0.0;
    for (const auto& s : enumerate_states(n)) naive += std::exp(-m.energy(s));
    REQUIRE(partition_function(m) == Catch::Approx(naive).epsilon(1e-12));
    REQUIRE(partition_function(m) > 0.0);
  }
}

TEST_CASE("exact ml gradient oracle cases") {
  DiscreteEnergyModel m(1, {0.0});

  // data = always-on spin: grad on bias = sigma(0) - 1 = -0.5
  auto g_ones = exact_ml_gradient(m, EmpiricalDistribution::single({1}));
  REQUIRE(g_ones.size() == 1);
  REQUIRE(g_ones[0] == Catch::Approx(-0.5).margin(1e-14));

  // flipping the data negates the bias gradient at theta = 0
  auto g_zeros = exact_ml_gradient(m, EmpiricalDistribution::single({0}));
  REQUIRE(g_zeros[0] == Catch::Approx(0.5).margin(1e-14));

  // stationarity: data drawn exactly from the model's own distribution
  for (std::uint64_t seed = 10; seed < 14; ++seed) {
    auto rm = DiscreteEnergyModel::random(3, 1.5, seed);
    auto g = exact_ml_gradient(rm, exact_distribution(rm));
    for (double v : g) REQUIRE(std::fabs(v) < 1e-12);
  }
}

TEST_CASE("empirical distribution validation") {
  EmpiricalDistribution bad{{{State{1}, 0.6}, {State{0}, 0.5}}};
  REQUIRE_THROWS_AS(bad.validate(), std::invalid_argument);
  EmpiricalDistribution neg{{{State{1}, -0.5}, {State{0}, 1.5}}};
  REQUIRE_THROWS_AS(neg.validate(), std::invalid_argument);
  REQUIRE_NOTHROW(EmpiricalDistribution::uniform(3).validate());
}

TEST_CASE("cd gradient with zero sweeps cancels exactly") {
  auto m = DiscreteEnergyModel::random(3, 2.0, 77);
  auto data = random_data_distribution(3, 78);
  auto grad = cd_k_gradient(m, data, TransitionKernel{0, 123}, 500);
  for (double v : grad) REQUIRE(v == 0.0);
}

TEST_CASE("cd gradient matches enumeration oracle at 50 sweeps") {
  for (std::uint64_t seed : {1ull, 2ull}) {
    auto m = DiscreteEnergyModel::random(3, 2.0, rng::derive_seed(900, seed));
    auto data = random_data_distribution(3, rng::derive_seed(901, seed));
    auto exact = exact_ml_gradient(m, data);
    auto est = cd_k_gradient_full(m, data, TransitionKernel{50, rng::derive_seed(902, seed)}, 20000);
    for (std::size_t j = 0; j < exact.size(); ++j) {
      INFO("seed " << seed << " coordinate " << j);
      REQUIRE(std::fabs(est.gradient[j] - exact[j]) <= 3.0 * est.stderr_per_dim[j] + 1e-9);
    }
  }
}

TEST_CASE("cd estimator is deterministic for a fixed seed") {
  auto m = DiscreteEnergyModel::random(3, 1.0, 5);
  auto data = random_data_distribution(3, 6);
  auto a = cd_k_gradient(m, data, TransitionKernel{5, 42}, 1000);
  auto b = cd_k_gradient(m, data, TransitionKernel{5, 42}, 1000);
  REQUIRE(a == b);
}

TEST_CASE("doubling chains halves estimator variance") {
  auto m = DiscreteEnergyModel::random(2, 1.5, 303);
  auto data = random_data_distribution(2, 304);
  const int reps = 400;
  const std::size_t dim = m.param_count();

  auto variance_at = [&](std::size_t chains, std::uint64_t salt) {
    std::vector<double> sum(dim, 0.0), sum_sq(dim, 0.0);
    for (int r = 0; r < reps; ++r) {
      auto g = cd_k_gradient(m, data, TransitionKernel{2, rng::derive_seed(salt, r)}, chains);
      for (std::size_t j = 0; j < dim; ++j) {
        sum[j] += g[j];
        sum_sq[j] += g[j] * g[j];
      }
    }
    double avg_var = 0.0;
    for (std::size_t j = 0; j < dim; ++j)
      avg_var += (sum_sq[j] - sum[j] * sum[j] / reps) / (reps - 1);
    return avg_var / dim;
  };

  const double v1 = variance_at(250, 1000);
  const double v2 = variance_at(500, 2000);
  const double ratio = v1 / v2;
  INFO("variance ratio " << ratio);
  REQUIRE(ratio > 1.6);
  REQUIRE(ratio < 2.4);
}

TEST_CASE("negative-direction gradient mirrors the positive machinery") {
  auto ma = DiscreteEnergyModel::random(2, 1.0, 41);
  auto mb = DiscreteEnergyModel::random(2, 1.0, 42);
  auto data = random_data_distribution(2, 43);
  TransitionKernel kernel{3, 99};

  // role-swap definition: the s-slot model drives chains and statistics
  auto swapped = cd_negative_gradient(mb, ma, data, kernel, 800);
  auto direct = cd_k_gradient(mb, data, kernel, 800);
  REQUIRE(swapped == direct);

  // branches equal and data from their common distribution -> gradient ~ 0
  auto est = cd_negative_gradient_full(ma, ma, exact_distribution(ma),
                                       TransitionKernel{50, 100}, 20000);
  for (std::size_t j = 0; j < est.gradient.size(); ++j)
    REQUIRE(std::fabs(est.gradient[j]) <= 3.0 * est.stderr_per_dim[j] + 1e-9);

  // n=2 oracle match
  auto exact = exact_ml_gradient(mb, data);
  auto full = cd_negative_gradient_full(mb, ma, data, TransitionKernel{50, 101}, 20000);
  for (std::size_t j = 0; j < exact.size(); ++j)
    REQUIRE(std::fabs(full.gradient[j] - exact[j]) <= 3.0 * full.stderr_per_dim[j] + 1e-9);

  auto m3 = DiscreteEnergyModel::random(3, 1.0, 44);
  REQUIRE_THROWS_AS(cd_negative_gradient(ma, m3, data, kernel, 10), std::invalid_argument);
}

TEST_CASE("convergence_g is centered and bounded") {
  DiscreteEnergyModel m(1, {0.0});
  auto g = convergence_g(m, {1}, EmpiricalDistribution::uniform(1));
  REQUIRE(g[0] == Catch::Approx(-0.5).margin(1e-14));

  for (std::uint64_t seed = 60; seed < 63; ++seed) {
    auto rm = DiscreteEnergyModel::random(3, 2.0, seed);
    auto data = random_data_distribution(3, seed + 100);
    ParamVector mean(rm.param_count(), 0.0);
    double max_abs = 0.0;
    for (const auto& [x, p] : data.support) {
      auto gx = convergence_g(rm, x, data);
      for (std::size_t j = 0; j < gx.size(); ++j) {
        mean[j] += p * gx[j];
        max_abs = std::max(max_abs, std::fabs(gx[j]));
      }
    }
    for (double v : mean) REQUIRE(std::fabs(v) < 1e-12);
    REQUIRE(std::isfinite(max_abs));
    REQUIRE(max_abs <= 2.0);  // statistics are 0/1 valued, centering keeps |g| <= 2
  }
}

TEST_CASE("gibbs kernel leaves the model distribution invariant") {
  for (std::uint64_t seed = 70; seed < 74; ++seed) {
    const std::size_t n = 2 + seed % 3;
    auto m = DiscreteEnergyModel::random(n, 2.0, seed);
    for (std::size_t sweeps : {std::size_t{1}, std::size_t{3}}) {
      auto K = kernel_matrix(m, TransitionKernel{sweeps, 0});
      auto p = exact_distribution(m);
      std::vector<double> pv(K.size(), 0.0);
      for (std::size_t s = 0; s < K.size(); ++s) pv[s] = p.support[s].second;
      for (std::size_t col = 0; col < K.size(); ++col) {
        double acc = 0.0;
        for (std::size_t row = 0; row < K.size(); ++row) acc += pv[row] * K[row][col];
        REQUIRE(std::fabs(acc - pv[col]) < 1e-12);
      }
      // rows are distributions
      for (const auto& row : K) {
        double s = 0.0;
        for (double v : row) s += v;
        REQUIRE(std::fabs(s - 1.0) < 1e-12);
      }
    }
  }
}

TEST_CASE("sampled sweep agrees with the enumerated kernel row") {
  auto m = DiscreteEnergyModel::random(3, 1.5, 81);
  auto K = kernel_matrix(m, TransitionKernel{1, 0});
  const State start{1, 0, 1};
  const std::size_t row = 0b101;

  const std::size_t chains = 20000;
  std::vector<double> counts(8, 0.0);
  for (std::size_t c = 0; c < chains; ++c) {
    rng::Stream rs(rng::derive_seed(555, c));
    State x = start;
    gibbs_sweep(m, x, rs);
    std::size_t idx = 0;
    for (std::size_t j = 0; j < 3; ++j)
      if (x[j]) idx |= std::size_t{1} << j;
    counts[idx] += 1.0;
  }
  for (std::size_t col = 0; col < 8; ++col) {
    const double p = K[row][col];
    const double freq = counts[col] / chains;
    const double se = std::sqrt(std::max(p * (1.0 - p), 1e-12) / chains);
    REQUIRE(std::fabs(freq - p) <= 4.0 * se + 1e-6);
  }
}

TEST_CASE("k1 condition on a well-specified n=2 model") {
  auto m = DiscreteEnergyModel::random(2, 1.0, 91);
  auto res = check_k1_condition(m, m.theta(), TransitionKernel{1, 17}, 32, 0.1);
  REQUIRE(res.probes_used == 32);
  REQUIRE(res.satisfied);
  REQUIRE(res.min_ratio > 0.0);

  // deterministic given the seed
  auto res2 = check_k1_condition(m, m.theta(), TransitionKernel{1, 17}, 32, 0.1);
  REQUIRE(res.min_ratio == res2.min_ratio);

  // degenerate probes (zero radius) are excluded entirely
  auto degen = check_k1_condition(m, m.theta(), TransitionKernel{1, 17}, 8, 0.0);
  REQUIRE(degen.probes_used == 0);
  REQUIRE_FALSE(degen.satisfied);

  auto big = DiscreteEnergyModel::random(5, 1.0, 92);
  REQUIRE_THROWS_AS(check_k1_condition(big, big.theta(), TransitionKernel{1, 0}, 4, 0.1),
                    std::invalid_argument);
}

TEST_CASE("diagnostic suite passes and emits the CSV schema") {
  auto rep = run_cd_diagnostics(2024);
  INFO(rep.detail);
  REQUIRE(rep.passed);
  REQUIRE(rep.rows.size() == 4);
  REQUIRE(rep.rows[0].sweeps == 0);
  REQUIRE(rep.rows[3].sweeps == 50);

  std::ostringstream os;
  write_diagnostic_csv(os, rep);
  const std::string csv = os.str();
  REQUIRE(csv.rfind("sweeps,chains,grad-error-l2,stderr,k1-estimate\n", 0) == 0);
  REQUIRE(std::count(csv.begin(), csv.end(), '\n') == 5);
}
