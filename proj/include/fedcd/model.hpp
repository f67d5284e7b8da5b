#pragma once

// Steering regressor: a residual MLP with a linear feature layer and a
// scalar steering head, instantiated twice per silo as a Siamese pair
// (backbone + sub-network). The two branches always share one layout, so
// parameter vectors can be copied, mixed and compared elementwise.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "fedcd/autodiff.hpp"
#include "fedcd/rng.hpp"
#include "fedcd/serialize.hpp"
#include "fedcd/tensor.hpp"

namespace fedcd {

struct NetConfig {
  std::size_t input_dim = 16;
  std::size_t hidden_dim = 32;
  std::size_t residual_blocks = 3;
  std::size_t feature_dim = 16;

  void validate() const {
    if (input_dim == 0 || hidden_dim == 0) throw std::invalid_argument("net: dims must be positive");
    if (feature_dim < 2) throw std::invalid_argument("net: feature_dim must be >= 2");
  }
};

// Named, ordered parameter collection. Two instances built from the same
// NetConfig agree in names, shapes and order.
struct ModelParams {
  std::vector<std::pair<std::string, Tensor>> entries;

  std::size_t size() const { return entries.size(); }

  std::size_t element_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : entries) n += t.numel();
    return n;
  }

  Tensor& at(const std::string& name) {
    for (auto& [k, t] : entries)
      if (k == name) return t;
    throw std::out_of_range("params: no entry named " + name);
  }
  const Tensor& at(const std::string& name) const {
    return const_cast<ModelParams*>(this)->at(name);
  }

  bool same_layout(const ModelParams& o) const {
    if (entries.size() != o.entries.size()) return false;
    for (std::size_t i = 0; i < entries.size(); ++i)
      if (entries[i].first != o.entries[i].first ||
          entries[i].second.shape() != o.entries[i].second.shape())
        return false;
    return true;
  }

  std::vector<double> flatten() const {
    std::vector<double> flat;
    flat.reserve(element_count());
    for (const auto& [_, t] : entries) flat.insert(flat.end(), t.vec().begin(), t.vec().end());
    return flat;
  }

  void unflatten(const std::vector<double>& flat) {
    if (flat.size() != element_count())
      throw std::invalid_argument("params: unflatten size mismatch");
    std::size_t off = 0;
    for (auto& [_, t] : entries) {
      std::copy(flat.begin() + off, flat.begin() + off + t.numel(), t.vec().begin());
      off += t.numel();
    }
  }
};

inline ModelParams zeros_like(const ModelParams& p) {
  ModelParams z;
  z.entries.reserve(p.entries.size());
  for (const auto& [name, t] : p.entries) z.entries.emplace_back(name, Tensor::zeros(t.shape()));
  return z;
}

// acc += w * p
inline void weighted_accumulate(ModelParams& acc, const ModelParams& p, double w) {
  if (!acc.same_layout(p)) throw std::invalid_argument("params: accumulate layout mismatch");
  for (std::size_t i = 0; i < acc.entries.size(); ++i) {
    Tensor& a = acc.entries[i].second;
    const Tensor& b = p.entries[i].second;
    for (std::size_t j = 0; j < a.numel(); ++j) a[j] += w * b[j];
  }
}

inline double params_l2_distance(const ModelParams& a, const ModelParams& b) {
  if (!a.same_layout(b)) throw std::invalid_argument("params: distance layout mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.entries.size(); ++i) {
    const Tensor& x = a.entries[i].second;
    const Tensor& y = b.entries[i].second;
    for (std::size_t j = 0; j < x.numel(); ++j) {
      const double d = x[j] - y[j];
      acc += d * d;
    }
  }
  return std::sqrt(acc);
}

inline bool params_equal(const ModelParams& a, const ModelParams& b) {
  if (!a.same_layout(b)) return false;
  for (std::size_t i = 0; i < a.entries.size(); ++i)
    if (a.entries[i].second.vec() != b.entries[i].second.vec()) return false;
  return true;
}

// ---------------------------------------------------------------------------
// Flat binary format: "FCDM" magic, version, name/shape table, then the
// contiguous little-endian float64 payload. Used for checkpoints.

inline constexpr std::uint32_t kParamsFormatVersion = 1;

inline void serialize_params(bytes::Buffer& out, const ModelParams& p) {
  out.push_back('F');
  out.push_back('C');
  out.push_back('D');
  out.push_back('M');
  bytes::put_u32(out, kParamsFormatVersion);
  bytes::put_u64(out, p.entries.size());
  for (const auto& [name, t] : p.entries) {
    bytes::put_str(out, name);
    bytes::put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) bytes::put_u64(out, d);
  }
  for (const auto& [_, t] : p.entries)
    for (double v : t.vec()) bytes::put_f64(out, v);
}

inline bytes::Buffer serialize_params(const ModelParams& p) {
  bytes::Buffer out;
  serialize_params(out, p);
  return out;
}

inline ModelParams deserialize_params(bytes::Reader& r) {
  if (r.u32() != 0x4d444346u)  // "FCDM" little-endian
    throw std::runtime_error("params: bad magic");
  if (r.u32() != kParamsFormatVersion) throw std::runtime_error("params: unknown format version");
  const std::uint64_t count = r.u64();
  ModelParams p;
  p.entries.reserve(count);
  std::vector<Shape> shapes(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = r.str();
    const std::uint32_t rank = r.u32();
    Shape s(rank);
    for (auto& d : s) d = r.u64();
    shapes[i] = s;
    p.entries.emplace_back(std::move(name), Tensor());
  }
  for (std::uint64_t i = 0; i < count; ++i) {
    std::vector<double> data(shape_numel(shapes[i]));
    for (auto& v : data) v = r.f64();
    p.entries[i].second = Tensor::raw(shapes[i], std::move(data));
  }
  return p;
}

inline void save_params(const std::string& path, const ModelParams& p) {
  auto buf = serialize_params(p);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("params: cannot open " + path + " for writing");
  f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

inline ModelParams load_params(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("params: cannot open " + path);
  bytes::Buffer buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  bytes::Reader r(buf);
  return deserialize_params(r);
}

// ---------------------------------------------------------------------------

namespace detail {

inline Tensor glorot_uniform(rng::Stream& rs, std::size_t fan_in, std::size_t fan_out) {
  const double s = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::vector<double> data(fan_in * fan_out);
  for (auto& v : data) v = rs.uniform(-s, s);
  return Tensor({fan_in, fan_out}, std::move(data));
}

}  // namespace detail

inline ModelParams init_net(const NetConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  rng::Stream rs(rng::derive_seed(seed, 0x6e6574));  // "net"
  ModelParams p;
  auto weight = [&](const std::string& name, std::size_t in, std::size_t out) {
    p.entries.emplace_back(name, detail::glorot_uniform(rs, in, out));
  };
  auto bias = [&](const std::string& name, std::size_t n) {
    p.entries.emplace_back(name, Tensor::zeros({n}));
  };

  weight("stem.weight.0", cfg.input_dim, cfg.hidden_dim);
  bias("stem.bias.0", cfg.hidden_dim);
  for (std::size_t b = 0; b < cfg.residual_blocks; ++b) {
    weight("block.weight." + std::to_string(2 * b), cfg.hidden_dim, cfg.hidden_dim);
    bias("block.bias." + std::to_string(2 * b), cfg.hidden_dim);
    weight("block.weight." + std::to_string(2 * b + 1), cfg.hidden_dim, cfg.hidden_dim);
    bias("block.bias." + std::to_string(2 * b + 1), cfg.hidden_dim);
  }
  weight("feat.weight.0", cfg.hidden_dim, cfg.feature_dim);
  bias("feat.bias.0", cfg.feature_dim);
  weight("head.weight.0", cfg.feature_dim, 1);
  bias("head.bias.0", 1);
  return p;
}

// The two Siamese branches. The sub-network starts as an exact copy of the
// backbone and is never aggregated across silos.
struct SiameseAgent {
  ModelParams backbone;
  ModelParams subnet;
  NetConfig config;
};

inline SiameseAgent init_siamese(const NetConfig& cfg, std::uint64_t seed) {
  SiameseAgent agent;
  agent.config = cfg;
  agent.backbone = init_net(cfg, seed);
  agent.subnet = agent.backbone;  // deep copy via value semantics
  return agent;
}

// Forward graph handle: leaves are aligned with ModelParams::entries so
// gradients can be read back by index.
struct ForwardGraph {
  std::vector<ad::NodePtr> leaves;
  ad::NodePtr features;  // [m x feature_dim]
  ad::NodePtr steering;  // [m x 1]
};

inline ForwardGraph forward_features(const ModelParams& params, const NetConfig& cfg,
                                     const Tensor& batch, bool trainable = true) {
  cfg.validate();
  if (batch.rank() != 2 || batch.dim(1) != cfg.input_dim)
    throw std::invalid_argument("net: batch shape " + shape_str(batch.shape()) +
                                " does not match input_dim " + std::to_string(cfg.input_dim));
  if (batch.dim(0) == 0) throw std::invalid_argument("net: empty batch");

  ForwardGraph g;
  g.leaves.reserve(params.entries.size());
  for (const auto& [_, t] : params.entries) g.leaves.push_back(ad::leaf(t, trainable));

  const std::size_t m = batch.dim(0);
  auto ones_col = ad::constant(Tensor::ones({m, 1}));
  // bias vector [h] tiled to [m x h]; no implicit broadcasting in the graph
  auto tile = [&](const ad::NodePtr& b) {
    return ad::matmul(ones_col, ad::reshape(b, {1, b->value.numel()}));
  };

  std::size_t idx = 0;
  // linear layer consuming the next (weight, bias) pair, in entry order
  auto linear = [&](const ad::NodePtr& in) {
    auto w = g.leaves[idx++];
    auto b = g.leaves[idx++];
    return ad::add(ad::matmul(in, w), tile(b));
  };

  auto x = ad::constant(batch);
  auto h = ad::relu(linear(x));
  for (std::size_t b = 0; b < cfg.residual_blocks; ++b) {
    auto t = ad::relu(linear(h));
    h = ad::add(h, linear(t));
  }
  g.features = linear(h);
  g.steering = linear(g.features);
  return g;
}

}  // namespace fedcd
