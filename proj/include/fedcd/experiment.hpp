#pragma once

// Experiment context around the round engine: stratified eval split, silo
// partition, the communication-round loop, metrics CSV and resumable
// checkpoints. Everything is a pure function of (config, topology, dataset),
// so a rerun or a checkpoint-resume reproduces a run byte for byte.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "fedcd/federation.hpp"

namespace fedcd::federation {

struct ExperimentConfig {
  TrainerConfig trainer;
  NetConfig net;
  double partition_alpha = 0.1;
  double eval_fraction = 0.2;

  void validate() const {
    trainer.validate();
    net.validate();
    if (!(partition_alpha > 0.0)) throw std::invalid_argument("experiment: partition alpha must be > 0");
    if (!(eval_fraction > 0.0) || !(eval_fraction < 1.0))
      throw std::invalid_argument("experiment: eval fraction must be in (0, 1)");
  }
};

namespace detail {

inline void fnv_mix(std::uint64_t& h, const std::string& s) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
}

template <class T>
inline void fnv_field(std::uint64_t& h, const char* name, T value) {
  char buf[96];
  if constexpr (std::is_floating_point_v<T>)
    std::snprintf(buf, sizeof(buf), "%s=%.17g;", name, static_cast<double>(value));
  else
    std::snprintf(buf, sizeof(buf), "%s=%llu;", name,
                  static_cast<unsigned long long>(value));
  fnv_mix(h, buf);
}

}  // namespace detail

// Stable digest of everything that influences the numeric trajectory; used
// to refuse resuming from a checkpoint written under a different setup.
inline std::uint64_t config_fingerprint(const ExperimentConfig& cfg) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  detail::fnv_field(h, "lr", cfg.trainer.learning_rate);
  detail::fnv_field(h, "batch", cfg.trainer.batch_size);
  detail::fnv_field(h, "u", cfg.trainer.local_updates);
  detail::fnv_field(h, "scheme", static_cast<std::uint64_t>(cfg.trainer.scheme));
  detail::fnv_field(h, "cdl", static_cast<std::uint64_t>(cfg.trainer.cdl_enabled));
  detail::fnv_field(h, "beta", cfg.trainer.cdl.beta);
  detail::fnv_field(h, "temp", cfg.trainer.cdl.temperature);
  detail::fnv_field(h, "eps", cfg.trainer.cdl.smoothing_epsilon);
  detail::fnv_field(h, "sched", static_cast<std::uint64_t>(cfg.trainer.cdl.schedule));
  detail::fnv_field(h, "sched_end", cfg.trainer.cdl.schedule_end);
  detail::fnv_field(h, "sched_rounds", cfg.trainer.cdl.schedule_rounds);
  detail::fnv_field(h, "weighting", static_cast<std::uint64_t>(cfg.trainer.cdl.positive_weighting));
  detail::fnv_field(h, "order", static_cast<std::uint64_t>(cfg.trainer.update_order));
  detail::fnv_field(h, "seed", cfg.trainer.seed);
  detail::fnv_field(h, "in", cfg.net.input_dim);
  detail::fnv_field(h, "hidden", cfg.net.hidden_dim);
  detail::fnv_field(h, "blocks", cfg.net.residual_blocks);
  detail::fnv_field(h, "feat", cfg.net.feature_dim);
  detail::fnv_field(h, "alpha", cfg.partition_alpha);
  detail::fnv_field(h, "eval", cfg.eval_fraction);
  return h;
}

namespace detail {

template <class F>
inline void parallel_for(std::size_t n, bool parallel, F&& f) {
  unsigned hw = std::thread::hardware_concurrency();
  if (!parallel || n < 2 || hw < 2) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  const std::size_t workers = std::min<std::size_t>(hw, n);
  std::vector<std::future<void>> futures;
  futures.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    futures.push_back(std::async(std::launch::async, [&, w]() {
      for (std::size_t i = w; i < n; i += workers) f(i);
    }));
  }
  for (auto& fu : futures) fu.get();
}

}  // namespace detail

class Experiment {
 public:
  Experiment(ExperimentConfig cfg, topology::TopologyGraph topo, const data::Dataset& dataset)
      : cfg_(std::move(cfg)), topo_(std::move(topo)) {
    cfg_.validate();
    if (dataset.empty()) throw std::invalid_argument("experiment: empty dataset");
    if (dataset.feature_dim != cfg_.net.input_dim)
      throw std::invalid_argument("experiment: dataset feature dim " +
                                  std::to_string(dataset.feature_dim) +
                                  " does not match net input dim " +
                                  std::to_string(cfg_.net.input_dim));

    split_eval(dataset);
    const std::size_t silos =
        cfg_.trainer.scheme == Scheme::CLL ? 1 : topo_.silo_count;
    if (cfg_.trainer.scheme != Scheme::CLL) topology::validate_topology(topo_);

    if (silos == 1) {
      partition_.resize(1);
      partition_[0].resize(train_.size());
      for (std::size_t i = 0; i < train_.size(); ++i) partition_[0][i] = i;
    } else {
      auto part = data::partition_dirichlet(train_, silos, cfg_.partition_alpha,
                                            rng::derive_seed(cfg_.trainer.seed, 0x646174));
      partition_ = std::move(part.silos);
    }

    if (cfg_.trainer.scheme == Scheme::DFL) matrix_ = topology::build_consensus_matrix(topo_);
    if (cfg_.trainer.scheme == Scheme::SFL) {
      std::vector<std::size_t> counts(partition_.size());
      for (std::size_t i = 0; i < partition_.size(); ++i) counts[i] = partition_[i].size();
      fedavg_ = AggregationWeights::fedavg(counts);
    }
  }

  const ExperimentConfig& config() const { return cfg_; }
  const topology::TopologyGraph& graph() const { return topo_; }
  std::size_t silo_count() const { return partition_.size(); }
  const data::Dataset& train_set() const { return train_; }
  std::size_t eval_size() const { return eval_x_.empty() ? 0 : eval_x_.dim(0); }
  const std::vector<std::vector<std::size_t>>& partition() const { return partition_; }

  // Every silo draws its own initial weights; consensus (or the first SFL
  // broadcast) is what brings them together. Backbone and sub-network start
  // identical within a silo.
  FedState init_state() const {
    FedState state;
    state.silos.resize(partition_.size());
    for (std::size_t i = 0; i < partition_.size(); ++i) {
      SiloState& s = state.silos[i];
      s.id = i;
      s.agent = init_siamese(cfg_.net, rng::derive_seed(cfg_.trainer.seed, 0x6d6f64, i));
      s.opt_backbone = AdamState::for_params(s.agent.backbone);
      s.opt_subnet = AdamState::for_params(s.agent.subnet);
      s.sample_indices = partition_[i];
      s.rng = rng::Stream(rng::derive_seed(cfg_.trainer.seed, 0x73696c, i));
    }
    return state;
  }

  // u local iterations on every silo, one aggregation slot, then metrics.
  MetricsRecord run_round(FedState& state, TransportLog* log = nullptr) const {
    const TrainerConfig& tr = cfg_.trainer;
    const std::size_t u = tr.local_updates;
    const std::uint64_t round = state.round;

    for (auto& silo : state.silos) {
      silo.cd_plus_sum = 0.0;
      silo.cd_minus_sum = 0.0;
      silo.cd_observations = 0;
    }

    for (std::size_t step = 0; step < u; ++step) {
      state.k += 1;
      if (state.k % (u + 1) == 0)
        throw std::logic_error("federation: local step landed on an aggregation slot");
      detail::parallel_for(state.silos.size(), tr.parallel_silos, [&](std::size_t i) {
        local_iteration(state.silos[i], train_, tr, round);
      });
    }

    state.k += 1;
    if (state.k % (u + 1) != 0)
      throw std::logic_error("federation: aggregation slot out of schedule");
    switch (tr.scheme) {
      case Scheme::DFL:
        aggregate_consensus(state.silos, *matrix_, log);
        break;
      case Scheme::SFL:
        aggregate_global(state.silos, fedavg_, log);
        break;
      case Scheme::CLL:
        break;  // never aggregates
    }

    MetricsRecord rec = collect_metrics(state);
    state.round += 1;
    return rec;
  }

  MetricsRecord collect_metrics(const FedState& state) const {
    const std::size_t n = state.silos.size();
    MetricsRecord rec;
    rec.round = state.round;
    rec.silo_rmse.resize(n);
    rec.silo_mae.resize(n);
    rec.silo_cd_plus.resize(n);
    rec.silo_cd_minus.resize(n);

    detail::parallel_for(n, cfg_.trainer.parallel_silos, [&](std::size_t i) {
      auto [rmse, mae] = evaluate(state.silos[i].agent.backbone, cfg_.net, eval_x_, eval_y_);
      rec.silo_rmse[i] = rmse;
      rec.silo_mae[i] = mae;
      const auto& s = state.silos[i];
      rec.silo_cd_plus[i] = s.cd_observations ? s.cd_plus_sum / s.cd_observations : 0.0;
      rec.silo_cd_minus[i] = s.cd_observations ? s.cd_minus_sum / s.cd_observations : 0.0;
    });

    auto [grmse, gmae] = evaluate(global_mean(state), cfg_.net, eval_x_, eval_y_);
    rec.global_rmse = grmse;
    rec.global_mae = gmae;

    double dist = 0.0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) {
        dist += params_l2_distance(state.silos[i].agent.backbone, state.silos[j].agent.backbone);
        ++pairs;
      }
    rec.mean_param_distance = pairs ? dist / static_cast<double>(pairs) : 0.0;

    for (std::size_t i = 0; i < n; ++i) {
      rec.mean_cd_plus += rec.silo_cd_plus[i] / static_cast<double>(n);
      rec.mean_cd_minus += rec.silo_cd_minus[i] / static_cast<double>(n);
    }
    return rec;
  }

  ModelParams global_mean(const FedState& state) const {
    ModelParams mean = zeros_like(state.silos.at(0).agent.backbone);
    const double w = 1.0 / static_cast<double>(state.silos.size());
    for (const auto& silo : state.silos) weighted_accumulate(mean, silo.agent.backbone, w);
    return mean;
  }

  std::pair<double, double> evaluate_params(const ModelParams& params) const {
    return evaluate(params, cfg_.net, eval_x_, eval_y_);
  }

  // -------------------------------------------------------------------------
  // Checkpoints: <stem>.bin holds the full numeric state, <stem>.json a small
  // readable manifest. Resuming reproduces the uninterrupted run exactly.

  static constexpr std::uint32_t kCheckpointVersion = 1;

  void save_checkpoint(const std::string& stem, const FedState& state) const {
    bytes::Buffer out;
    out.push_back('F');
    out.push_back('C');
    out.push_back('D');
    out.push_back('K');
    bytes::put_u32(out, kCheckpointVersion);
    bytes::put_u64(out, config_fingerprint(cfg_));
    bytes::put_u64(out, state.k);
    bytes::put_u64(out, state.round);
    bytes::put_u64(out, state.silos.size());
    for (const auto& s : state.silos) {
      bytes::put_u64(out, s.id);
      serialize_params(out, s.agent.backbone);
      serialize_params(out, s.agent.subnet);
      serialize_params(out, s.opt_backbone.m);
      serialize_params(out, s.opt_backbone.v);
      bytes::put_u64(out, s.opt_backbone.step);
      serialize_params(out, s.opt_subnet.m);
      serialize_params(out, s.opt_subnet.v);
      bytes::put_u64(out, s.opt_subnet.step);
      for (std::uint64_t word : s.rng.state()) bytes::put_u64(out, word);
      bytes::put_u64(out, s.order.size());
      for (std::size_t idx : s.order) bytes::put_u64(out, idx);
      bytes::put_u64(out, s.cursor);
    }
    std::ofstream f(stem + ".bin", std::ios::binary);
    if (!f) throw std::runtime_error("checkpoint: cannot write " + stem + ".bin");
    f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));

    char manifest[256];
    std::snprintf(manifest, sizeof(manifest),
                  "{\n  \"format\": \"fedcd-checkpoint\",\n  \"version\": %u,\n"
                  "  \"config_hash\": \"%016llx\",\n  \"round\": %llu,\n  \"iteration\": %llu,\n"
                  "  \"silos\": %zu\n}\n",
                  kCheckpointVersion,
                  static_cast<unsigned long long>(config_fingerprint(cfg_)),
                  static_cast<unsigned long long>(state.round),
                  static_cast<unsigned long long>(state.k), state.silos.size());
    std::ofstream mf(stem + ".json");
    if (!mf) throw std::runtime_error("checkpoint: cannot write " + stem + ".json");
    mf << manifest;
  }

  FedState load_checkpoint(const std::string& stem) const {
    std::ifstream f(stem + ".bin", std::ios::binary);
    if (!f) throw std::runtime_error("checkpoint: cannot open " + stem + ".bin");
    bytes::Buffer buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    bytes::Reader r(buf);
    if (r.u32() != 0x4b444346u)  // "FCDK"
      throw std::runtime_error("checkpoint: bad magic");
    if (r.u32() != kCheckpointVersion) throw std::runtime_error("checkpoint: unknown version");
    if (r.u64() != config_fingerprint(cfg_))
      throw std::runtime_error("checkpoint: config fingerprint mismatch");

    FedState state;
    state.k = r.u64();
    state.round = r.u64();
    const std::uint64_t count = r.u64();
    if (count != partition_.size())
      throw std::runtime_error("checkpoint: silo count mismatch");
    state.silos.resize(count);
    for (auto& s : state.silos) {
      s.id = r.u64();
      s.agent.config = cfg_.net;
      s.agent.backbone = deserialize_params(r);
      s.agent.subnet = deserialize_params(r);
      s.opt_backbone.m = deserialize_params(r);
      s.opt_backbone.v = deserialize_params(r);
      s.opt_backbone.step = r.u64();
      s.opt_subnet.m = deserialize_params(r);
      s.opt_subnet.v = deserialize_params(r);
      s.opt_subnet.step = r.u64();
      rng::Stream::State rs;
      for (auto& word : rs) word = r.u64();
      s.rng.set_state(rs);
      s.order.resize(r.u64());
      for (auto& idx : s.order) idx = r.u64();
      s.cursor = r.u64();
      s.sample_indices = partition_.at(s.id);
    }
    return state;
  }

 private:
  void split_eval(const data::Dataset& dataset) {
    std::map<int, std::vector<std::size_t>> by_mode;
    for (std::size_t i = 0; i < dataset.size(); ++i)
      by_mode[dataset.samples[i].mode_id].push_back(i);

    rng::Stream rs(rng::derive_seed(cfg_.trainer.seed, 0x73706c));
    std::vector<std::size_t> eval_idx;
    std::vector<std::size_t> train_idx;
    for (auto& [mode, indices] : by_mode) {
      rs.shuffle(indices);
      std::size_t take = static_cast<std::size_t>(
          cfg_.eval_fraction * static_cast<double>(indices.size()) + 0.5);
      if (take >= indices.size()) take = indices.size() - 1;  // keep training data per mode
      eval_idx.insert(eval_idx.end(), indices.begin(), indices.begin() + take);
      train_idx.insert(train_idx.end(), indices.begin() + take, indices.end());
    }
    if (eval_idx.empty()) throw std::invalid_argument("experiment: evaluation split is empty");
    if (train_idx.empty()) throw std::invalid_argument("experiment: training split is empty");

    train_.feature_dim = dataset.feature_dim;
    train_.samples.reserve(train_idx.size());
    std::sort(train_idx.begin(), train_idx.end());
    for (std::size_t i : train_idx) train_.samples.push_back(dataset.samples[i]);

    std::sort(eval_idx.begin(), eval_idx.end());
    std::vector<double> x(eval_idx.size() * dataset.feature_dim), y(eval_idx.size());
    for (std::size_t r2 = 0; r2 < eval_idx.size(); ++r2) {
      const auto& s = dataset.samples[eval_idx[r2]];
      std::copy(s.features.begin(), s.features.end(), x.begin() + r2 * dataset.feature_dim);
      y[r2] = s.steering_angle;
    }
    eval_x_ = Tensor({eval_idx.size(), dataset.feature_dim}, std::move(x));
    eval_y_ = Tensor({eval_idx.size(), 1}, std::move(y));
  }

  ExperimentConfig cfg_;
  topology::TopologyGraph topo_;
  data::Dataset train_;
  Tensor eval_x_, eval_y_;
  std::optional<topology::ConsensusMatrix> matrix_;
  AggregationWeights fedavg_;
  std::vector<std::vector<std::size_t>> partition_;
};

struct RunResult {
  std::vector<MetricsRecord> history;
  std::vector<ModelParams> final_backbones;
  ModelParams global;
};

using RoundCallback = std::function<void(const MetricsRecord&, const FedState&)>;

inline RunResult run_experiment(const ExperimentConfig& cfg, const topology::TopologyGraph& topo,
                                const data::Dataset& dataset, const RoundCallback& on_round = {}) {
  Experiment exp(cfg, topo, dataset);
  FedState state = exp.init_state();
  RunResult result;
  result.history.reserve(cfg.trainer.rounds);
  for (std::size_t r = 0; r < cfg.trainer.rounds; ++r) {
    MetricsRecord rec = exp.run_round(state);
    if (on_round) on_round(rec, state);
    result.history.push_back(std::move(rec));
  }
  result.final_backbones.reserve(state.silos.size());
  for (const auto& s : state.silos) result.final_backbones.push_back(s.agent.backbone);
  result.global = exp.global_mean(state);
  return result;
}

// ---------------------------------------------------------------------------
// Metrics CSV: one row per silo plus one global row per round.

inline void write_metrics_header(std::ostream& os) {
  os << "round,scope,rmse,mae,cd_plus,cd_minus,param_dist\n";
}

inline void append_metrics_csv(std::ostream& os, const MetricsRecord& rec) {
  char buf[256];
  for (std::size_t i = 0; i < rec.silo_rmse.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%llu,silo_%zu,%.17g,%.17g,%.17g,%.17g,0\n",
                  static_cast<unsigned long long>(rec.round), i, rec.silo_rmse[i],
                  rec.silo_mae[i], rec.silo_cd_plus[i], rec.silo_cd_minus[i]);
    os << buf;
  }
  std::snprintf(buf, sizeof(buf), "%llu,global,%.17g,%.17g,%.17g,%.17g,%.17g\n",
                static_cast<unsigned long long>(rec.round), rec.global_rmse, rec.global_mae,
                rec.mean_cd_plus, rec.mean_cd_minus, rec.mean_param_distance);
  os << buf;
}

}  // namespace fedcd::federation
