#pragma once

// Contrastive-divergence gradient machinery validated on tiny fully-visible
// binary energy models. Everything here is exactly enumerable (n <= 12), so
// the CD-k Monte-Carlo estimators can be checked against closed-form
// enumeration oracles instead of against another sampler.
//
// Energy form: E(x; theta) = -sum_i b_i x_i - sum_{i<j} w_ij x_i x_j over
// x in {0,1}^n, i.e. E = -theta . s(x) with sufficient statistics
// s(x) = (x_i ... ; x_i x_j ...). Gradients of KL(P0 || P_theta) are
// expressed through s: grad = E_model[s] - E_data[s].

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedcd/rng.hpp"

namespace fedcd::cdtheory {

using State = std::vector<std::uint8_t>;
using ParamVector = std::vector<double>;

class DiscreteEnergyModel {
 public:
  DiscreteEnergyModel(std::size_t n, ParamVector theta) : n_(n), theta_(std::move(theta)) {
    // Type contract asks for n >= 2, but the worked oracle cases need the
    // n = 1 single-spin model, so that is admitted too.
    if (n_ < 1 || n_ > 12)
      throw std::invalid_argument("energy model: n must be in [1, 12], got " + std::to_string(n_));
    if (theta_.size() != param_count())
      throw std::invalid_argument("energy model: theta needs " + std::to_string(param_count()) +
                                  " entries, got " + std::to_string(theta_.size()));
    for (double v : theta_)
      if (!std::isfinite(v)) throw std::invalid_argument("energy model: non-finite theta");
  }

  static DiscreteEnergyModel random(std::size_t n, double scale, std::uint64_t seed) {
    rng::Stream rs(seed);
    ParamVector theta(n + n * (n - 1) / 2);
    for (auto& v : theta) v = rs.uniform(-scale, scale);
    return DiscreteEnergyModel(n, std::move(theta));
  }

  std::size_t n() const { return n_; }
  std::size_t param_count() const { return n_ + n_ * (n_ - 1) / 2; }
  const ParamVector& theta() const { return theta_; }

  DiscreteEnergyModel with_theta(ParamVector theta) const {
    return DiscreteEnergyModel(n_, std::move(theta));
  }

  std::size_t pair_index(std::size_t i, std::size_t j) const {
    if (i > j) std::swap(i, j);
    return n_ + i * (2 * n_ - i - 1) / 2 + (j - i - 1);
  }

  double energy(const State& x) const {
    check_state(x);
    double e = 0.0;
    for (std::size_t i = 0; i < n_; ++i) {
      if (!x[i]) continue;
      e -= theta_[i];
      for (std::size_t j = i + 1; j < n_; ++j)
        if (x[j]) e -= theta_[pair_index(i, j)];
    }
    return e;
  }

  // acc += w * s(x)
  void add_sufficient_stats(const State& x, double w, ParamVector& acc) const {
    for (std::size_t i = 0; i < n_; ++i) {
      if (!x[i]) continue;
      acc[i] += w;
      for (std::size_t j = i + 1; j < n_; ++j)
        if (x[j]) acc[pair_index(i, j)] += w;
    }
  }

  // dE/dtheta at x, which is -s(x) for this energy form.
  ParamVector energy_gradient(const State& x) const {
    check_state(x);
    ParamVector g(param_count(), 0.0);
    add_sufficient_stats(x, -1.0, g);
    return g;
  }

  // P(x_i = 1 | x_rest) = sigmoid(b_i + sum_j w_ij x_j)
  double conditional_one(const State& x, std::size_t i) const {
    double z = theta_[i];
    for (std::size_t j = 0; j < n_; ++j)
      if (j != i && x[j]) z += theta_[pair_index(i, j)];
    return 1.0 / (1.0 + std::exp(-z));
  }

  void check_state(const State& x) const {
    if (x.size() != n_) throw std::invalid_argument("energy model: state length mismatch");
  }

 private:
  std::size_t n_;
  ParamVector theta_;
};

inline std::vector<State> enumerate_states(std::size_t n) {
  std::vector<State> states;
  states.reserve(std::size_t{1} << n);
  for (std::size_t s = 0; s < (std::size_t{1} << n); ++s) {
    State x(n);
    for (std::size_t j = 0; j < n; ++j) x[j] = static_cast<std::uint8_t>((s >> j) & 1);
    states.push_back(std::move(x));
  }
  return states;
}

struct EmpiricalDistribution {
  std::vector<std::pair<State, double>> support;

  void validate() const {
    double total = 0.0;
    for (const auto& [_, p] : support) {
      if (p < 0.0) throw std::invalid_argument("empirical: negative probability");
      total += p;
    }
    if (std::fabs(total - 1.0) > 1e-12)
      throw std::invalid_argument("empirical: probabilities sum to " + std::to_string(total));
  }

  static EmpiricalDistribution single(State x) { return {{{std::move(x), 1.0}}}; }

  static EmpiricalDistribution uniform(std::size_t n) {
    EmpiricalDistribution d;
    const auto states = enumerate_states(n);
    const double p = 1.0 / static_cast<double>(states.size());
    for (const auto& s : states) d.support.emplace_back(s, p);
    return d;
  }
};

inline double log_partition_function(const DiscreteEnergyModel& model) {
  const auto states = enumerate_states(model.n());
  double mx = -std::numeric_limits<double>::infinity();
  std::vector<double> neg_e(states.size());
  for (std::size_t i = 0; i < states.size(); ++i) {
    neg_e[i] = -model.energy(states[i]);
    mx = std::max(mx, neg_e[i]);
  }
  double acc = 0.0;
  for (double v : neg_e) acc += std::exp(v - mx);
  return mx + std::log(acc);
}

inline double partition_function(const DiscreteEnergyModel& model) {
  return std::exp(log_partition_function(model));
}

inline EmpiricalDistribution exact_distribution(const DiscreteEnergyModel& model) {
  const double log_z = log_partition_function(model);
  EmpiricalDistribution d;
  for (const auto& s : enumerate_states(model.n()))
    d.support.emplace_back(s, std::exp(-model.energy(s) - log_z));
  return d;
}

// E_P[s] for the exact Boltzmann distribution of the model.
inline ParamVector expected_stats_model(const DiscreteEnergyModel& model) {
  const double log_z = log_partition_function(model);
  ParamVector acc(model.param_count(), 0.0);
  for (const auto& s : enumerate_states(model.n()))
    model.add_sufficient_stats(s, std::exp(-model.energy(s) - log_z), acc);
  return acc;
}

// E_P0[s] for a weighted empirical support.
inline ParamVector expected_stats_data(const DiscreteEnergyModel& model,
                                       const EmpiricalDistribution& data) {
  data.validate();
  ParamVector acc(model.param_count(), 0.0);
  for (const auto& [x, p] : data.support) model.add_sufficient_stats(x, p, acc);
  return acc;
}

// Exact gradient of KL(P0 || P_theta) by full enumeration:
// grad_j = E_{P_theta}[s_j] - E_{P0}[s_j].
inline ParamVector exact_ml_gradient(const DiscreteEnergyModel& model,
                                     const EmpiricalDistribution& data) {
  ParamVector grad = expected_stats_model(model);
  const ParamVector data_stats = expected_stats_data(model, data);
  for (std::size_t j = 0; j < grad.size(); ++j) grad[j] -= data_stats[j];
  return grad;
}

// Single-site Gibbs sweeps in fixed site order; the only kernel kind.
struct TransitionKernel {
  std::size_t sweeps = 1;
  std::uint64_t seed = 0;
};

inline void gibbs_sweep(const DiscreteEnergyModel& model, State& x, rng::Stream& rs) {
  for (std::size_t i = 0; i < model.n(); ++i)
    x[i] = rs.next_double() < model.conditional_one(x, i) ? 1 : 0;
}

inline State sample_from(const EmpiricalDistribution& data, rng::Stream& rs) {
  const double u = rs.next_double();
  double acc = 0.0;
  for (const auto& [x, p] : data.support) {
    acc += p;
    if (u < acc) return x;
  }
  return data.support.back().first;
}

struct CdEstimate {
  ParamVector gradient;        // paired CD-k estimate of grad KL(P0 || P_theta)
  ParamVector stderr_per_dim;  // standard error of each coordinate across chains
};

// CD-k gradient: chains start at samples from P0 and run `sweeps` full Gibbs
// sweeps under the model; the estimate is the paired difference
// mean_c[s(x_k)] - mean_c[s(x_0)], which cancels exactly at zero sweeps and
// approaches the enumeration gradient as sweeps grow. Each chain owns a
// stream derived from (kernel.seed, chain), so the result is independent of
// evaluation order.
inline CdEstimate cd_k_gradient_full(const DiscreteEnergyModel& model,
                                     const EmpiricalDistribution& data,
                                     const TransitionKernel& kernel, std::size_t chains) {
  if (chains < 1) throw std::invalid_argument("cd: need at least one chain");
  data.validate();
  for (const auto& [x, _] : data.support) model.check_state(x);

  const std::size_t dim = model.param_count();
  ParamVector sum(dim, 0.0), sum_sq(dim, 0.0), diff(dim);
  for (std::size_t c = 0; c < chains; ++c) {
    rng::Stream rs(rng::derive_seed(kernel.seed, c));
    State x = sample_from(data, rs);
    std::fill(diff.begin(), diff.end(), 0.0);
    model.add_sufficient_stats(x, -1.0, diff);  // -s(x_0)
    for (std::size_t s = 0; s < kernel.sweeps; ++s) gibbs_sweep(model, x, rs);
    model.add_sufficient_stats(x, 1.0, diff);  // +s(x_k)
    for (std::size_t j = 0; j < dim; ++j) {
      sum[j] += diff[j];
      sum_sq[j] += diff[j] * diff[j];
    }
  }

  CdEstimate est;
  est.gradient.resize(dim);
  est.stderr_per_dim.assign(dim, 0.0);
  const double c = static_cast<double>(chains);
  for (std::size_t j = 0; j < dim; ++j) {
    est.gradient[j] = sum[j] / c;
    if (chains > 1) {
      const double var = std::max(0.0, (sum_sq[j] - sum[j] * sum[j] / c) / (c - 1.0));
      est.stderr_per_dim[j] = std::sqrt(var / c);
    }
  }
  return est;
}

inline ParamVector cd_k_gradient(const DiscreteEnergyModel& model,
                                 const EmpiricalDistribution& data,
                                 const TransitionKernel& kernel, std::size_t chains) {
  return cd_k_gradient_full(model, data, kernel, chains).gradient;
}

// Negative-direction CD gradient: identical machinery with the branch roles
// swapped. Chains run under model_s (energies and statistics taken w.r.t.
// theta_s); `data` stands for the distribution observed under model_b, which
// otherwise only fixes the state dimension.
inline CdEstimate cd_negative_gradient_full(const DiscreteEnergyModel& model_s,
                                            const DiscreteEnergyModel& model_b,
                                            const EmpiricalDistribution& data,
                                            const TransitionKernel& kernel, std::size_t chains) {
  if (model_s.n() != model_b.n())
    throw std::invalid_argument("cd: branch models must share the state dimension");
  return cd_k_gradient_full(model_s, data, kernel, chains);
}

inline ParamVector cd_negative_gradient(const DiscreteEnergyModel& model_s,
                                        const DiscreteEnergyModel& model_b,
                                        const EmpiricalDistribution& data,
                                        const TransitionKernel& kernel, std::size_t chains) {
  return cd_negative_gradient_full(model_s, model_b, data, kernel, chains).gradient;
}

// Per-state centered gradient g(x, theta) = dE/dtheta(x) - E_{P0}[dE/dtheta].
inline ParamVector convergence_g(const DiscreteEnergyModel& model, const State& x,
                                 const EmpiricalDistribution& data) {
  ParamVector g = model.energy_gradient(x);
  data.validate();
  for (const auto& [y, p] : data.support) {
    const ParamVector gy = model.energy_gradient(y);
    for (std::size_t j = 0; j < g.size(); ++j) g[j] -= p * gy[j];
  }
  return g;
}

// Dense row-stochastic matrix of one kernel application (kernel.sweeps full
// Gibbs sweeps), enumerable for n <= 4. Row = source state, column = target.
inline std::vector<std::vector<double>> kernel_matrix(const DiscreteEnergyModel& model,
                                                      const TransitionKernel& kernel) {
  if (model.n() > 4) throw std::invalid_argument("cd: kernel matrix only enumerable for n <= 4");
  const std::size_t size = std::size_t{1} << model.n();
  const auto states = enumerate_states(model.n());

  auto matmul = [size](const std::vector<std::vector<double>>& a,
                       const std::vector<std::vector<double>>& b) {
    std::vector<std::vector<double>> out(size, std::vector<double>(size, 0.0));
    for (std::size_t i = 0; i < size; ++i)
      for (std::size_t k = 0; k < size; ++k) {
        const double v = a[i][k];
        if (v == 0.0) continue;
        for (std::size_t j = 0; j < size; ++j) out[i][j] += v * b[k][j];
      }
    return out;
  };

  // identity
  std::vector<std::vector<double>> total(size, std::vector<double>(size, 0.0));
  for (std::size_t i = 0; i < size; ++i) total[i][i] = 1.0;

  std::vector<std::vector<double>> sweep;
  bool have_sweep = false;
  for (std::size_t site = 0; site < model.n(); ++site) {
    std::vector<std::vector<double>> k_site(size, std::vector<double>(size, 0.0));
    for (std::size_t s = 0; s < size; ++s) {
      const double p1 = model.conditional_one(states[s], site);
      const std::size_t s_one = s | (std::size_t{1} << site);
      const std::size_t s_zero = s & ~(std::size_t{1} << site);
      k_site[s][s_one] += p1;
      k_site[s][s_zero] += 1.0 - p1;
    }
    sweep = have_sweep ? matmul(sweep, k_site) : std::move(k_site);
    have_sweep = true;
  }
  for (std::size_t s = 0; s < kernel.sweeps; ++s) total = matmul(total, sweep);
  return total;
}

struct K1Result {
  double min_ratio = 0.0;
  bool satisfied = false;
  std::size_t probes_used = 0;
};

// Empirical check of the convergence condition: at probe points theta_p on a
// sphere of `radius` around theta_star, evaluates
//   (theta_p - theta*) . { E_{P0}[g(., theta_p)] - E_{P0 K^m_{theta_p}}[g(., theta*)] }
// and reports the minimum of that quantity over |theta_p - theta*|^2. The
// data distribution is the exact Boltzmann distribution at theta_star (the
// well-specified case). Probes that coincide with theta_star are skipped.
inline K1Result check_k1_condition(const DiscreteEnergyModel& model, const ParamVector& theta_star,
                                   const TransitionKernel& kernel, std::size_t probe_count,
                                   double radius = 0.1) {
  if (model.n() > 4) throw std::invalid_argument("cd: k1 check needs an enumerable kernel (n <= 4)");
  const auto star_model = model.with_theta(theta_star);
  const EmpiricalDistribution data = exact_distribution(star_model);
  const auto states = enumerate_states(model.n());
  const std::size_t dim = model.param_count();

  // g(., theta) does not depend on theta for this energy family, so compute
  // the centered gradients once.
  std::vector<ParamVector> g_star(states.size());
  for (std::size_t s = 0; s < states.size(); ++s)
    g_star[s] = convergence_g(star_model, states[s], data);

  rng::Stream rs(rng::derive_seed(kernel.seed, 0x6b31));  // "k1"
  K1Result res;
  res.min_ratio = std::numeric_limits<double>::infinity();
  for (std::size_t t = 0; t < probe_count; ++t) {
    ParamVector dir(dim);
    double norm = 0.0;
    for (auto& v : dir) {
      v = rs.normal();
      norm += v * v;
    }
    norm = std::sqrt(norm);
    if (norm == 0.0) continue;

    ParamVector theta_p = theta_star;
    for (std::size_t j = 0; j < dim; ++j) theta_p[j] += radius * dir[j] / norm;

    double dist_sq = 0.0;
    for (std::size_t j = 0; j < dim; ++j) {
      const double d = theta_p[j] - theta_star[j];
      dist_sq += d * d;
    }
    if (dist_sq < 1e-24) continue;  // degenerate probe, excluded

    const auto probe_model = model.with_theta(theta_p);

    // E_{P0}[g(., theta_p)]: identically zero by centering, evaluated anyway.
    ParamVector term_data(dim, 0.0);
    for (const auto& [x, p] : data.support) {
      const ParamVector gx = convergence_g(probe_model, x, data);
      for (std::size_t j = 0; j < dim; ++j) term_data[j] += p * gx[j];
    }

    // mu = P0 K^m_{theta_p}
    const auto K = kernel_matrix(probe_model, kernel);
    std::vector<double> mu(states.size(), 0.0);
    for (const auto& [x, p] : data.support) {
      std::size_t row = 0;
      for (std::size_t j = 0; j < x.size(); ++j)
        if (x[j]) row |= std::size_t{1} << j;
      for (std::size_t col = 0; col < states.size(); ++col) mu[col] += p * K[row][col];
    }
    ParamVector term_kernel(dim, 0.0);
    for (std::size_t s = 0; s < states.size(); ++s)
      for (std::size_t j = 0; j < dim; ++j) term_kernel[j] += mu[s] * g_star[s][j];

    double lhs = 0.0;
    for (std::size_t j = 0; j < dim; ++j)
      lhs += (theta_p[j] - theta_star[j]) * (term_data[j] - term_kernel[j]);

    res.min_ratio = std::min(res.min_ratio, lhs / dist_sq);
    ++res.probes_used;
  }
  if (res.probes_used == 0) {
    res.min_ratio = 0.0;
    res.satisfied = false;
  } else {
    res.satisfied = res.min_ratio > 0.0;
  }
  return res;
}

inline double l2_norm(const ParamVector& v) {
  double acc = 0.0;
  for (double x : v) acc += x * x;
  return std::sqrt(acc);
}

inline double l2_error(const ParamVector& a, const ParamVector& b) {
  if (a.size() != b.size()) throw std::invalid_argument("cd: vector size mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    acc += d * d;
  }
  return std::sqrt(acc);
}

// ---------------------------------------------------------------------------
// Diagnostic suite behind the `cdtheory` CLI command. One row per sweep
// count on a fixed n=3 model; the pass verdict also covers a multi-seed
// monotonicity check and the n=2 k1 condition.

struct DiagnosticRow {
  std::size_t sweeps = 0;
  std::size_t chains = 0;
  double grad_error_l2 = 0.0;
  double stderr_l2 = 0.0;
  double k1_estimate = 0.0;
};

struct DiagnosticReport {
  std::vector<DiagnosticRow> rows;
  bool passed = false;
  std::string detail;  // human-readable check log, one line per check
};

inline EmpiricalDistribution random_data_distribution(std::size_t n, std::uint64_t seed) {
  rng::Stream rs(seed);
  EmpiricalDistribution d;
  double total = 0.0;
  for (const auto& s : enumerate_states(n)) {
    const double w = rs.next_double() + 1e-3;
    d.support.emplace_back(s, w);
    total += w;
  }
  for (auto& [_, p] : d.support) p /= total;
  return d;
}

inline DiagnosticReport run_cd_diagnostics(std::uint64_t seed = 2024) {
  DiagnosticReport rep;
  std::ostringstream log;
  bool ok = true;

  const auto model = DiscreteEnergyModel::random(3, 2.0, rng::derive_seed(seed, 1));
  const auto data = random_data_distribution(3, rng::derive_seed(seed, 2));
  const ParamVector exact = exact_ml_gradient(model, data);
  const std::size_t chains = 20000;

  const std::size_t sweep_grid[] = {0, 1, 5, 50};
  for (std::size_t sweeps : sweep_grid) {
    TransitionKernel kernel{sweeps, rng::derive_seed(seed, 3)};
    const auto est = cd_k_gradient_full(model, data, kernel, chains);
    DiagnosticRow row;
    row.sweeps = sweeps;
    row.chains = chains;
    row.grad_error_l2 = l2_error(est.gradient, exact);
    row.stderr_l2 = l2_norm(est.stderr_per_dim);
    if (sweeps >= 1) {
      const auto k1_model = DiscreteEnergyModel::random(2, 1.0, rng::derive_seed(seed, 4));
      TransitionKernel k1_kernel{sweeps, rng::derive_seed(seed, 5)};
      const auto k1 = check_k1_condition(k1_model, k1_model.theta(), k1_kernel, 32, 0.1);
      row.k1_estimate = k1.min_ratio;
      if (!k1.satisfied) {
        ok = false;
        log << "FAIL k1 condition not satisfied at sweeps=" << sweeps
            << " (min ratio " << k1.min_ratio << ")\n";
      }
    }
    rep.rows.push_back(row);
  }

  // zero sweeps: the paired estimator is exactly zero
  if (rep.rows[0].grad_error_l2 != l2_norm(exact)) {
    ok = false;
    log << "FAIL zero-sweep estimator is not exactly zero (error "
        << rep.rows[0].grad_error_l2 << " vs exact norm " << l2_norm(exact) << ")\n";
  } else {
    log << "ok   zero-sweep estimator cancels exactly\n";
  }

  // converged sweeps match enumeration within 3 standard errors per coordinate
  {
    TransitionKernel kernel{50, rng::derive_seed(seed, 3)};
    const auto est = cd_k_gradient_full(model, data, kernel, chains);
    double worst = 0.0;
    for (std::size_t j = 0; j < exact.size(); ++j) {
      const double delta = std::fabs(est.gradient[j] - exact[j]);
      const double bound = 3.0 * est.stderr_per_dim[j] + 1e-9;
      worst = std::max(worst, delta - bound);
      if (delta > bound) {
        ok = false;
        log << "FAIL coordinate " << j << ": |cd - exact| = " << delta << " > " << bound << "\n";
      }
    }
    if (worst <= 0.0) log << "ok   CD-50 matches enumeration within 3 standard errors\n";
  }

  // error is non-increasing in sweeps when averaged over seeds
  {
    const std::size_t grid[] = {1, 5, 50};
    double avg[3] = {0.0, 0.0, 0.0};
    const int repeats = 10;
    for (int r = 0; r < repeats; ++r) {
      const auto m = DiscreteEnergyModel::random(3, 2.0, rng::derive_seed(seed, 100 + r));
      const auto d = random_data_distribution(3, rng::derive_seed(seed, 200 + r));
      const auto ex = exact_ml_gradient(m, d);
      for (int gi = 0; gi < 3; ++gi) {
        TransitionKernel kernel{grid[gi], rng::derive_seed(seed, 300 + r)};
        avg[gi] += l2_error(cd_k_gradient(m, d, kernel, 4000), ex) / repeats;
      }
    }
    if (avg[0] >= avg[1] && avg[1] >= avg[2]) {
      log << "ok   mean gradient error non-increasing over sweeps {1,5,50}\n";
    } else {
      ok = false;
      log << "FAIL mean gradient error not monotone: " << avg[0] << " " << avg[1] << " " << avg[2]
          << "\n";
    }
  }

  rep.passed = ok;
  rep.detail = log.str();
  return rep;
}

inline void write_diagnostic_csv(std::ostream& os, const DiagnosticReport& rep) {
  os << "sweeps,chains,grad-error-l2,stderr,k1-estimate\n";
  for (const auto& r : rep.rows) {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%zu,%zu,%.17g,%.17g,%.17g\n", r.sweeps, r.chains,
                  r.grad_error_l2, r.stderr_l2, r.k1_estimate);
    os << buf;
  }
}

}  // namespace fedcd::cdtheory
