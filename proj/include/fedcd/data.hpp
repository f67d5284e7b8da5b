#pragma once

// Synthetic driving-feature data and silo partitioning. Each latent "mode"
// stands for a road condition: it has its own feature cluster and its own
// feature-to-steering map, so a skewed partition shifts both the inputs and
// the label distribution of a silo. Dirichlet(alpha) over modes is the
// heterogeneity knob: large alpha approaches IID, small alpha concentrates
// silos on single modes.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedcd/rng.hpp"

namespace fedcd::data {

inline constexpr double kPi = std::numbers::pi_v<double>;

struct DrivingSample {
  std::vector<double> features;
  double steering_angle = 0.0;  // radians, |angle| <= pi
  int mode_id = -1;             // latent road-condition mode; -1 when unknown
};

struct Dataset {
  std::size_t feature_dim = 0;
  std::vector<DrivingSample> samples;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
};

struct SyntheticConfig {
  std::size_t mode_count = 3;
  std::size_t samples_total = 6000;
  double dirichlet_alpha = 0.1;  // intended partition skew; consumed by the partitioner
  double noise_std = 0.05;
  std::uint64_t seed = 0;
  std::size_t feature_dim = 16;

  void validate() const {
    if (mode_count < 2) throw std::invalid_argument("data: mode_count must be >= 2");
    if (samples_total == 0) throw std::invalid_argument("data: samples_total must be positive");
    if (!(dirichlet_alpha > 0.0)) throw std::invalid_argument("data: dirichlet_alpha must be > 0");
    if (noise_std < 0.0) throw std::invalid_argument("data: noise_std must be >= 0");
    if (feature_dim == 0) throw std::invalid_argument("data: feature_dim must be positive");
  }
};

// Ground-truth map of one mode: bounded linear-plus-sinusoid steering law
// around a Gaussian feature cluster.
struct ModeMap {
  std::vector<double> center;
  std::vector<double> linear;
  std::vector<double> wave;
  double amplitude = 0.0;
  double phase = 0.0;
  double offset = 0.0;

  double operator()(const std::vector<double>& x) const {
    double lin = offset, arg = phase;
    for (std::size_t j = 0; j < x.size(); ++j) {
      lin += linear[j] * x[j];
      arg += wave[j] * x[j];
    }
    return kPi * std::tanh((lin + amplitude * std::sin(arg)) / kPi);
  }
};

inline constexpr double kClusterStd = 0.6;

// Mode maps are a pure function of the config seed; generate_synthetic draws
// them first, so tests can reproduce the noise-free ground truth.
inline std::vector<ModeMap> synthetic_mode_maps(const SyntheticConfig& cfg) {
  cfg.validate();
  rng::Stream rs(rng::derive_seed(cfg.seed, 0x73796e)); // "syn"
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(cfg.feature_dim));
  std::vector<ModeMap> maps(cfg.mode_count);
  for (auto& m : maps) {
    m.center.resize(cfg.feature_dim);
    m.linear.resize(cfg.feature_dim);
    m.wave.resize(cfg.feature_dim);
    for (auto& v : m.center) v = rs.normal();
    for (auto& v : m.linear) v = 1.2 * inv_sqrt_d * rs.normal();
    for (auto& v : m.wave) v = 2.0 * inv_sqrt_d * rs.normal();
    m.amplitude = rs.uniform(0.3, 0.7);
    m.phase = rs.uniform(0.0, 2.0 * kPi);
    m.offset = rs.uniform(-0.9, 0.9);
  }
  return maps;
}

inline Dataset generate_synthetic(const SyntheticConfig& cfg) {
  const auto maps = synthetic_mode_maps(cfg);
  rng::Stream rs(rng::derive_seed(cfg.seed, 0x73616d)); // "sam"

  Dataset ds;
  ds.feature_dim = cfg.feature_dim;
  ds.samples.reserve(cfg.samples_total);
  for (std::size_t i = 0; i < cfg.samples_total; ++i) {
    const int mode = static_cast<int>(i % cfg.mode_count);  // round-robin allocation
    const ModeMap& m = maps[static_cast<std::size_t>(mode)];
    DrivingSample s;
    s.mode_id = mode;
    s.features.resize(cfg.feature_dim);
    for (std::size_t j = 0; j < cfg.feature_dim; ++j)
      s.features[j] = m.center[j] + kClusterStd * rs.normal();
    const double noise = cfg.noise_std * rs.normal();  // drawn even at zero std
    s.steering_angle = std::clamp(m(s.features) + noise, -kPi, kPi);
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

// Per-silo index lists; disjoint and covering by construction.
struct DatasetPartition {
  std::vector<std::vector<std::size_t>> silos;

  std::size_t silo_count() const { return silos.size(); }
  std::vector<std::size_t> counts() const {
    std::vector<std::size_t> c(silos.size());
    for (std::size_t i = 0; i < silos.size(); ++i) c[i] = silos[i].size();
    return c;
  }
  std::size_t total() const {
    std::size_t t = 0;
    for (const auto& s : silos) t += s.size();
    return t;
  }
};

inline DatasetPartition partition_dirichlet(const Dataset& ds, std::size_t silo_count, double alpha,
                                            std::uint64_t seed) {
  if (silo_count < 2) throw std::invalid_argument("partition: silo_count must be >= 2");
  if (!(alpha > 0.0)) throw std::invalid_argument("partition: alpha must be > 0");
  if (ds.size() < silo_count)
    throw std::invalid_argument("partition: dataset smaller than silo count (" +
                                std::to_string(ds.size()) + " < " + std::to_string(silo_count) + ")");

  std::map<int, std::vector<std::size_t>> by_mode;
  for (std::size_t i = 0; i < ds.size(); ++i) by_mode[ds.samples[i].mode_id].push_back(i);

  rng::Stream rs(rng::derive_seed(seed, 0x706172)); // "par"
  DatasetPartition part;
  part.silos.assign(silo_count, {});

  for (auto& [mode, indices] : by_mode) {
    rs.shuffle(indices);
    const auto props = rs.dirichlet(alpha, silo_count);
    const std::size_t g = indices.size();

    // largest-remainder allocation of g samples across silos
    std::vector<std::size_t> counts(silo_count);
    std::vector<std::pair<double, std::size_t>> rema(silo_count);
    std::size_t assigned = 0;
    for (std::size_t s = 0; s < silo_count; ++s) {
      const double exact = props[s] * static_cast<double>(g);
      counts[s] = static_cast<std::size_t>(exact);
      rema[s] = {exact - static_cast<double>(counts[s]), s};
      assigned += counts[s];
    }
    std::sort(rema.begin(), rema.end(), [](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first > b.first;
      return a.second < b.second;
    });
    for (std::size_t r = 0; assigned < g; ++r, ++assigned) counts[rema[r % silo_count].second]++;

    std::size_t off = 0;
    for (std::size_t s = 0; s < silo_count; ++s) {
      part.silos[s].insert(part.silos[s].end(), indices.begin() + off,
                           indices.begin() + off + counts[s]);
      off += counts[s];
    }
  }

  // empty silos take one sample from the currently largest silo
  for (std::size_t s = 0; s < silo_count; ++s) {
    if (!part.silos[s].empty()) continue;
    std::size_t largest = 0;
    for (std::size_t t = 1; t < silo_count; ++t)
      if (part.silos[t].size() > part.silos[largest].size()) largest = t;
    if (part.silos[largest].size() <= 1)
      throw std::runtime_error("partition: cannot repair empty silo");
    part.silos[s].push_back(part.silos[largest].back());
    part.silos[largest].pop_back();
  }
  return part;
}

// CSV schema: header f0,...,f{d-1},angle then one row per sample. Doubles are
// written with max precision so a write/load round trip is exact.
inline void save_csv(const std::string& path, const Dataset& ds) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("data: cannot open " + path + " for writing");
  for (std::size_t j = 0; j < ds.feature_dim; ++j) f << 'f' << j << ',';
  f << "angle\n";
  char buf[32];
  for (const auto& s : ds.samples) {
    for (double v : s.features) {
      std::snprintf(buf, sizeof(buf), "%.17g", v);
      f << buf << ',';
    }
    std::snprintf(buf, sizeof(buf), "%.17g", s.steering_angle);
    f << buf << '\n';
  }
}

namespace detail {

inline double parse_field(const std::string& field, std::size_t line_no, const char* what) {
  std::size_t consumed = 0;
  double v = 0.0;
  try {
    v = std::stod(field, &consumed);
  } catch (const std::exception&) {
    throw std::runtime_error("data: line " + std::to_string(line_no) + ": cannot parse " + what +
                             " '" + field + "'");
  }
  if (consumed != field.size())
    throw std::runtime_error("data: line " + std::to_string(line_no) + ": trailing junk in " +
                             what + " '" + field + "'");
  if (!std::isfinite(v))
    throw std::runtime_error("data: line " + std::to_string(line_no) + ": non-finite " + what);
  return v;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      fields.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  fields.push_back(cur);
  return fields;
}

}  // namespace detail

inline Dataset load_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("data: cannot open " + path);

  std::string line;
  if (!std::getline(f, line)) throw std::runtime_error("data: " + path + " is empty");
  const auto header = detail::split_csv_line(line);
  if (header.size() < 2 || header.back() != "angle")
    throw std::runtime_error("data: line 1: expected header f0,...,angle");
  const std::size_t d = header.size() - 1;
  for (std::size_t j = 0; j < d; ++j)
    if (header[j] != "f" + std::to_string(j))
      throw std::runtime_error("data: line 1: expected column f" + std::to_string(j) + ", got '" +
                               header[j] + "'");

  Dataset ds;
  ds.feature_dim = d;
  std::size_t line_no = 1;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto fields = detail::split_csv_line(line);
    if (fields.size() != d + 1)
      throw std::runtime_error("data: line " + std::to_string(line_no) + ": expected " +
                               std::to_string(d + 1) + " fields, got " +
                               std::to_string(fields.size()));
    DrivingSample s;
    s.features.resize(d);
    for (std::size_t j = 0; j < d; ++j)
      s.features[j] = detail::parse_field(fields[j], line_no, "feature");
    s.steering_angle = detail::parse_field(fields[d], line_no, "angle");
    if (std::fabs(s.steering_angle) > kPi)
      throw std::runtime_error("data: line " + std::to_string(line_no) +
                               ": |angle| exceeds pi");
    s.mode_id = -1;
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

// Normalized histogram over [-pi, pi].
inline std::vector<double> angle_histogram(const Dataset& ds, const std::vector<std::size_t>& idx,
                                           std::size_t bins) {
  if (bins == 0) throw std::invalid_argument("data: histogram needs bins >= 1");
  if (idx.empty()) throw std::invalid_argument("data: histogram over empty index set");
  std::vector<double> h(bins, 0.0);
  for (std::size_t i : idx) {
    const double a = ds.samples.at(i).steering_angle;
    auto b = static_cast<std::size_t>((a + kPi) / (2.0 * kPi) * static_cast<double>(bins));
    if (b >= bins) b = bins - 1;
    h[b] += 1.0;
  }
  for (auto& v : h) v /= static_cast<double>(idx.size());
  return h;
}

inline std::vector<double> silo_angle_histogram(const Dataset& ds, const DatasetPartition& part,
                                                std::size_t silo, std::size_t bins) {
  if (silo >= part.silo_count()) throw std::invalid_argument("data: bad silo id");
  return angle_histogram(ds, part.silos[silo], bins);
}

inline std::vector<double> global_angle_histogram(const Dataset& ds, std::size_t bins) {
  std::vector<std::size_t> all(ds.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return angle_histogram(ds, all, bins);
}

inline double total_variation(const std::vector<double>& p, const std::vector<double>& q) {
  if (p.size() != q.size()) throw std::invalid_argument("data: TV dimension mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) acc += std::fabs(p[i] - q[i]);
  return 0.5 * acc;
}

}  // namespace fedcd::data
