#pragma once

// The round engine: per-silo local updates of the Siamese pair, periodic
// aggregation (consensus gossip for DFL, weighted global averaging with
// broadcast for SFL, none for CLL) and per-round evaluation.
//
// Iteration accounting follows the mod rule: the global counter k advances
// by one per local step and by one per aggregation slot, and aggregation
// happens exactly when k = 0 (mod u+1). A communication round is u local
// iterations followed by that slot, so locals always precede mixing.
//
// Silos share nothing during local steps; per-round updates may therefore
// run on worker threads and must produce bit-identical results to the
// sequential order (each silo owns its rng stream).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <future>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "fedcd/autodiff.hpp"
#include "fedcd/data.hpp"
#include "fedcd/losses.hpp"
#include "fedcd/model.hpp"
#include "fedcd/rng.hpp"
#include "fedcd/serialize.hpp"
#include "fedcd/tensor.hpp"
#include "fedcd/topology.hpp"

namespace fedcd::federation {

using topology::Scheme;

// Raised when a local loss stops being finite; carries enough context to
// identify the offending silo and iteration.
struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  ModelParams m;
  ModelParams v;
  std::uint64_t step = 0;

  static AdamState for_params(const ModelParams& p) { return {zeros_like(p), zeros_like(p), 0}; }
};

// One Adam update. `grads` is aligned with params.entries; a null slot means
// zero gradient for that tensor (its moments still decay).
inline void adam_step(ModelParams& params, const std::vector<const Tensor*>& grads,
                      AdamState& st, const AdamConfig& cfg) {
  if (grads.size() != params.entries.size())
    throw std::invalid_argument("adam: gradient list does not match parameter list");
  st.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));
  for (std::size_t e = 0; e < params.entries.size(); ++e) {
    Tensor& theta = params.entries[e].second;
    Tensor& m = st.m.entries[e].second;
    Tensor& v = st.v.entries[e].second;
    const Tensor* g = grads[e];
    for (std::size_t i = 0; i < theta.numel(); ++i) {
      const double gi = g ? (*g)[i] : 0.0;
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
      theta[i] -= cfg.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg.eps);
    }
  }
}

enum class UpdateOrder { Sequential, Simultaneous };

struct TrainerConfig {
  double learning_rate = 0.001;
  std::size_t batch_size = 32;
  std::size_t local_updates = 1;  // u
  std::size_t rounds = 100;
  Scheme scheme = Scheme::DFL;
  bool cdl_enabled = true;
  CdlConfig cdl;
  std::uint64_t seed = 0;
  UpdateOrder update_order = UpdateOrder::Sequential;
  bool parallel_silos = false;

  void validate() const {
    if (!(learning_rate >= 0.0)) throw std::invalid_argument("trainer: learning rate must be >= 0");
    if (batch_size == 0) throw std::invalid_argument("trainer: batch size must be >= 1");
    if (local_updates == 0) throw std::invalid_argument("trainer: local updates must be >= 1");
    cdl.validate();
  }
};

struct SiloState {
  std::size_t id = 0;
  SiameseAgent agent;
  AdamState opt_backbone;
  AdamState opt_subnet;
  std::vector<std::size_t> sample_indices;  // into the training dataset
  rng::Stream rng{0};
  std::vector<std::size_t> order;  // current shuffled pass over the samples
  std::size_t cursor = 0;
  // CD terms observed during the current round's local steps
  double cd_plus_sum = 0.0;
  double cd_minus_sum = 0.0;
  std::size_t cd_observations = 0;
};

struct FedState {
  std::vector<SiloState> silos;
  std::uint64_t k = 0;      // global iteration counter
  std::uint64_t round = 0;  // completed communication rounds
};

struct MetricsRecord {
  std::uint64_t round = 0;
  std::vector<double> silo_rmse;
  std::vector<double> silo_mae;
  std::vector<double> silo_cd_plus;
  std::vector<double> silo_cd_minus;
  double global_rmse = 0.0;
  double global_mae = 0.0;
  double mean_param_distance = 0.0;
  double mean_cd_plus = 0.0;
  double mean_cd_minus = 0.0;
};

// Records every inter-silo payload; lets tests assert that sub-network
// weights never travel.
struct TransportLog {
  static constexpr std::size_t kHub = static_cast<std::size_t>(-1);
  struct Payload {
    std::size_t from;
    std::size_t to;
    bytes::Buffer data;
  };
  std::vector<Payload> payloads;

  void send(std::size_t from, std::size_t to, const ModelParams& params) {
    payloads.push_back({from, to, serialize_params(params)});
  }
};

// ---------------------------------------------------------------------------
// Batching

struct Batch {
  Tensor inputs;   // [m x d]
  Tensor targets;  // [m x 1]
};

inline Batch draw_batch(SiloState& silo, const data::Dataset& train, std::size_t batch_size) {
  const std::size_t n = silo.sample_indices.size();
  if (n == 0) throw std::logic_error("federation: silo has no data");
  const std::size_t m = std::min(batch_size, n);
  if (silo.order.size() != n || silo.cursor + m > n) {
    silo.order = silo.sample_indices;
    silo.rng.shuffle(silo.order);
    silo.cursor = 0;
  }
  std::vector<double> x(m * train.feature_dim), y(m);
  for (std::size_t r = 0; r < m; ++r) {
    const auto& s = train.samples.at(silo.order[silo.cursor + r]);
    std::copy(s.features.begin(), s.features.end(), x.begin() + r * train.feature_dim);
    y[r] = s.steering_angle;
  }
  silo.cursor += m;
  return {Tensor({m, train.feature_dim}, std::move(x)), Tensor({m, 1}, std::move(y))};
}

// ---------------------------------------------------------------------------
// Local updates

namespace detail {

inline std::vector<const Tensor*> collect_grads(const std::vector<ad::NodePtr>& leaves,
                                                const ad::GradientMap& grads) {
  std::vector<const Tensor*> out(leaves.size(), nullptr);
  for (std::size_t i = 0; i < leaves.size(); ++i) {
    auto it = grads.find(leaves[i].get());
    if (it != grads.end()) out[i] = &it->second;
  }
  return out;
}

[[noreturn]] inline void diverged(const char* what, std::size_t silo, std::uint64_t round,
                                  double value) {
  throw DivergenceError("federation: non-finite " + std::string(what) + " at silo " +
                        std::to_string(silo) + ", round " + std::to_string(round) + " (" +
                        std::to_string(value) + ")");
}

}  // namespace detail

// Backbone step on L_b = L_lr + w * L_cd+ (w = 0 when CDL is disabled). The
// sub-network contributes only its detached feature distribution.
inline void local_update_backbone(SiloState& silo, const Batch& batch, const TrainerConfig& cfg,
                                  std::uint64_t round) {
  auto bb = forward_features(silo.agent.backbone, silo.agent.config, batch.inputs, true);
  auto mae = mae_loss(bb.steering, batch.targets);

  ad::NodePtr loss = mae;
  if (cfg.cdl_enabled) {
    auto sn = forward_features(silo.agent.subnet, silo.agent.config, batch.inputs, false);
    auto terms = cdl_loss(bb.features, sn.features, cfg.cdl, cfg.cdl.beta_at(round));
    silo.cd_plus_sum += terms.cd_plus->value.item();
    silo.cd_minus_sum += terms.cd_minus->value.item();
    silo.cd_observations += 1;
    loss = backbone_loss(mae, terms.cd_plus, cfg.cdl.backbone_cd_weight(round));
  }
  const double value = loss->value.item();
  if (!std::isfinite(value)) detail::diverged("backbone loss", silo.id, round, value);

  auto grads = ad::backward(loss);
  AdamConfig opt;
  opt.lr = cfg.learning_rate;
  adam_step(silo.agent.backbone, detail::collect_grads(bb.leaves, grads), silo.opt_backbone, opt);
}

// Sub-network step on (1-beta) * L_cd-. The backbone is read-only here; with
// beta = 1 the term has zero weight and the step is skipped outright.
// `backbone_reference` overrides the backbone used for the reference
// distribution (pre-step snapshot in simultaneous mode).
inline void local_update_subnet(SiloState& silo, const Batch& batch, const TrainerConfig& cfg,
                                std::uint64_t round,
                                const ModelParams* backbone_reference = nullptr) {
  if (!cfg.cdl_enabled) throw std::logic_error("federation: subnet update requires CDL");
  const double weight = 1.0 - cfg.cdl.beta_at(round);
  if (weight == 0.0) return;

  const ModelParams& bb_params = backbone_reference ? *backbone_reference : silo.agent.backbone;
  auto bb = forward_features(bb_params, silo.agent.config, batch.inputs, false);
  auto sn = forward_features(silo.agent.subnet, silo.agent.config, batch.inputs, true);
  auto terms = cdl_loss(bb.features, sn.features, cfg.cdl, cfg.cdl.beta_at(round));
  auto loss = ad::scalar_mul(terms.cd_minus, weight);

  const double value = loss->value.item();
  if (!std::isfinite(value)) detail::diverged("subnet loss", silo.id, round, value);

  auto grads = ad::backward(loss);
  AdamConfig opt;
  opt.lr = cfg.learning_rate;
  adam_step(silo.agent.subnet, detail::collect_grads(sn.leaves, grads), silo.opt_subnet, opt);
}

// One local iteration: backbone then sub-network on the same mini-batch.
inline void local_iteration(SiloState& silo, const data::Dataset& train, const TrainerConfig& cfg,
                            std::uint64_t round) {
  Batch batch = draw_batch(silo, train, cfg.batch_size);
  if (cfg.cdl_enabled && cfg.update_order == UpdateOrder::Simultaneous) {
    const ModelParams snapshot = silo.agent.backbone;
    local_update_backbone(silo, batch, cfg, round);
    local_update_subnet(silo, batch, cfg, round, &snapshot);
  } else {
    local_update_backbone(silo, batch, cfg, round);
    if (cfg.cdl_enabled) local_update_subnet(silo, batch, cfg, round);
  }
}

// ---------------------------------------------------------------------------
// Aggregation

// Synchronous gossip: every backbone becomes the A-weighted mixture of the
// pre-aggregation neighbour snapshots. Sub-networks and optimizer state stay
// local.
inline void aggregate_consensus(std::vector<SiloState>& silos,
                                const topology::ConsensusMatrix& matrix,
                                TransportLog* log = nullptr) {
  if (matrix.n != silos.size())
    throw std::invalid_argument("federation: consensus matrix size " + std::to_string(matrix.n) +
                                " does not match silo count " + std::to_string(silos.size()));
  std::vector<const ModelParams*> snapshot(silos.size());
  std::vector<ModelParams> copies(silos.size());
  for (std::size_t i = 0; i < silos.size(); ++i) {
    copies[i] = silos[i].agent.backbone;
    snapshot[i] = &copies[i];
  }
  if (log) {
    for (std::size_t i = 0; i < silos.size(); ++i)
      for (std::size_t j = 0; j < silos.size(); ++j)
        if (i != j && matrix.at(i, j) > 0.0) log->send(j, i, *snapshot[j]);
  }
  for (std::size_t i = 0; i < silos.size(); ++i) {
    ModelParams mixed = zeros_like(*snapshot[i]);
    for (std::size_t j = 0; j < silos.size(); ++j) {
      const double w = matrix.at(i, j);
      if (w != 0.0) weighted_accumulate(mixed, *snapshot[j], w);
    }
    silos[i].agent.backbone = std::move(mixed);
  }
}

// Participation-masked FedAvg weights: theta_i = p_i n_i / sum_j p_j n_j.
struct AggregationWeights {
  std::vector<double> weights;

  static AggregationWeights fedavg(const std::vector<std::size_t>& counts,
                                   const std::vector<bool>& participation = {}) {
    if (!participation.empty() && participation.size() != counts.size())
      throw std::invalid_argument("federation: participation mask size mismatch");
    AggregationWeights w;
    w.weights.resize(counts.size());
    double total = 0.0;
    for (std::size_t i = 0; i < counts.size(); ++i) {
      const bool on = participation.empty() || participation[i];
      w.weights[i] = on ? static_cast<double>(counts[i]) : 0.0;
      total += w.weights[i];
    }
    if (total <= 0.0) throw std::invalid_argument("federation: no participating silo");
    for (auto& v : w.weights) v /= total;
    return w;
  }

  void validate(std::size_t n) const {
    if (weights.size() != n)
      throw std::invalid_argument("federation: weight count " + std::to_string(weights.size()) +
                                  " does not match silo count " + std::to_string(n));
    double total = 0.0;
    for (double v : weights) {
      if (v < 0.0) throw std::invalid_argument("federation: negative aggregation weight");
      total += v;
    }
    if (std::fabs(total - 1.0) > 1e-9)
      throw std::invalid_argument("federation: aggregation weights sum to " + std::to_string(total));
  }
};

// Server-based aggregation: weighted average of the backbones, broadcast back
// to every silo. Returns the global parameters.
inline ModelParams aggregate_global(std::vector<SiloState>& silos, const AggregationWeights& w,
                                    TransportLog* log = nullptr) {
  w.validate(silos.size());
  ModelParams global = zeros_like(silos.at(0).agent.backbone);
  for (std::size_t i = 0; i < silos.size(); ++i) {
    if (w.weights[i] == 0.0) continue;
    if (log) log->send(i, TransportLog::kHub, silos[i].agent.backbone);
    weighted_accumulate(global, silos[i].agent.backbone, w.weights[i]);
  }
  for (auto& silo : silos) {
    if (log) log->send(TransportLog::kHub, silo.id, global);
    silo.agent.backbone = global;
  }
  return global;
}

// ---------------------------------------------------------------------------
// Evaluation

inline std::pair<double, double> evaluate(const ModelParams& params, const NetConfig& net,
                                          const Tensor& inputs, const Tensor& targets) {
  if (inputs.dim(0) == 0) throw std::invalid_argument("federation: empty evaluation set");
  auto g = forward_features(params, net, inputs, false);
  const Tensor& pred = g.steering->value;
  double se = 0.0, ae = 0.0;
  const std::size_t m = pred.numel();
  for (std::size_t i = 0; i < m; ++i) {
    const double d = pred[i] - targets[i];
    se += d * d;
    ae += std::fabs(d);
  }
  return {std::sqrt(se / static_cast<double>(m)), ae / static_cast<double>(m)};
}

inline std::pair<double, double> evaluate(const ModelParams& params, const NetConfig& net,
                                          const data::Dataset& eval_set) {
  if (eval_set.empty()) throw std::invalid_argument("federation: empty evaluation set");
  std::vector<double> x(eval_set.size() * eval_set.feature_dim), y(eval_set.size());
  for (std::size_t i = 0; i < eval_set.size(); ++i) {
    const auto& s = eval_set.samples[i];
    std::copy(s.features.begin(), s.features.end(), x.begin() + i * eval_set.feature_dim);
    y[i] = s.steering_angle;
  }
  return evaluate(params, net, Tensor({eval_set.size(), eval_set.feature_dim}, std::move(x)),
                  Tensor({eval_set.size(), 1}, std::move(y)));
}

}  // namespace fedcd::federation
