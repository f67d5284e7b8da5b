#pragma once

// Silo connectivity: edge-list ingestion, Metropolis-Hastings consensus
// matrices, spectral-gap and per-round cycle-time diagnostics.
//
// Edge-list format: header line `# silos N`, then `i j latency_ms
// bandwidth_mbps` per undirected link; blank lines and further `#` comments
// are ignored.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <limits>
#include <queue>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedcd/rng.hpp"

namespace fedcd::topology {

struct Edge {
  std::size_t a = 0;
  std::size_t b = 0;
  double latency_ms = 0.0;
  double bandwidth_mbps = 0.0;
};

struct TopologyGraph {
  std::size_t silo_count = 0;
  std::vector<Edge> edges;
  std::string name;

  std::vector<std::vector<std::size_t>> adjacency() const {
    std::vector<std::vector<std::size_t>> adj(silo_count);
    for (std::size_t e = 0; e < edges.size(); ++e) {
      adj[edges[e].a].push_back(e);
      adj[edges[e].b].push_back(e);
    }
    return adj;
  }

  std::vector<std::size_t> degrees() const {
    std::vector<std::size_t> deg(silo_count, 0);
    for (const auto& e : edges) {
      deg[e.a]++;
      deg[e.b]++;
    }
    return deg;
  }
};

namespace detail {

inline std::vector<std::vector<std::size_t>> connected_components(const TopologyGraph& g) {
  std::vector<int> comp(g.silo_count, -1);
  auto adj = g.adjacency();
  int comp_count = 0;
  for (std::size_t start = 0; start < g.silo_count; ++start) {
    if (comp[start] != -1) continue;
    std::queue<std::size_t> q;
    q.push(start);
    comp[start] = comp_count;
    while (!q.empty()) {
      const std::size_t v = q.front();
      q.pop();
      for (std::size_t e : adj[v]) {
        const std::size_t w = g.edges[e].a == v ? g.edges[e].b : g.edges[e].a;
        if (comp[w] == -1) {
          comp[w] = comp_count;
          q.push(w);
        }
      }
    }
    ++comp_count;
  }
  std::vector<std::vector<std::size_t>> out(comp_count);
  for (std::size_t v = 0; v < g.silo_count; ++v) out[comp[v]].push_back(v);
  return out;
}

}  // namespace detail

inline void validate_topology(const TopologyGraph& g) {
  if (g.silo_count < 2) throw std::invalid_argument("topology: need at least 2 silos");
  std::vector<std::vector<bool>> seen(g.silo_count, std::vector<bool>(g.silo_count, false));
  for (const auto& e : g.edges) {
    if (e.a >= g.silo_count || e.b >= g.silo_count)
      throw std::invalid_argument("topology: edge " + std::to_string(e.a) + "-" +
                                  std::to_string(e.b) + " references an unknown silo id");
    if (e.a == e.b)
      throw std::invalid_argument("topology: self-loop on silo " + std::to_string(e.a));
    if (seen[e.a][e.b])
      throw std::invalid_argument("topology: duplicate edge " + std::to_string(e.a) + "-" +
                                  std::to_string(e.b));
    seen[e.a][e.b] = seen[e.b][e.a] = true;
    if (e.latency_ms < 0.0) throw std::invalid_argument("topology: negative latency");
    if (!(e.bandwidth_mbps > 0.0)) throw std::invalid_argument("topology: bandwidth must be > 0");
  }
  const auto comps = detail::connected_components(g);
  if (comps.size() > 1) {
    std::ostringstream os;
    os << "topology: graph is disconnected; components:";
    for (const auto& c : comps) {
      os << " {";
      for (std::size_t i = 0; i < c.size(); ++i) os << (i ? "," : "") << c[i];
      os << "}";
    }
    throw std::invalid_argument(os.str());
  }
}

inline TopologyGraph parse_topology(std::istream& in, const std::string& name) {
  TopologyGraph g;
  g.name = name;
  std::string line;
  std::size_t line_no = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++line_no;
    // strip trailing CR and surrounding whitespace
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ' || line.back() == '\t'))
      line.pop_back();
    std::size_t start = line.find_first_not_of(" \t");
    if (start == std::string::npos) continue;
    line = line.substr(start);

    if (line[0] == '#') {
      std::istringstream hs(line.substr(1));
      std::string word;
      hs >> word;
      if (!have_header) {
        std::size_t n = 0;
        if (word == "silos" && (hs >> n)) {
          g.silo_count = n;
          have_header = true;
          continue;
        }
        throw std::invalid_argument("topology: line " + std::to_string(line_no) +
                                    ": expected header '# silos N'");
      }
      continue;  // comment
    }
    if (!have_header)
      throw std::invalid_argument("topology: line " + std::to_string(line_no) +
                                  ": edge before the '# silos N' header");
    std::istringstream es(line);
    Edge e;
    if (!(es >> e.a >> e.b >> e.latency_ms >> e.bandwidth_mbps))
      throw std::invalid_argument("topology: line " + std::to_string(line_no) +
                                  ": expected 'i j latency_ms bandwidth_mbps'");
    std::string extra;
    if (es >> extra)
      throw std::invalid_argument("topology: line " + std::to_string(line_no) + ": trailing junk");
    g.edges.push_back(e);
  }
  if (!have_header) throw std::invalid_argument("topology: missing '# silos N' header");
  validate_topology(g);
  return g;
}

inline TopologyGraph load_topology(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("topology: cannot open " + path);
  std::string name = path;
  const auto slash = name.find_last_of('/');
  if (slash != std::string::npos) name = name.substr(slash + 1);
  const auto dot = name.find_last_of('.');
  if (dot != std::string::npos) name = name.substr(0, dot);
  return parse_topology(f, name);
}

inline std::vector<std::size_t> in_neighbors(const TopologyGraph& g, std::size_t silo) {
  if (silo >= g.silo_count) throw std::invalid_argument("topology: bad silo id");
  std::vector<std::size_t> out;
  for (const auto& e : g.edges) {
    if (e.a == silo) out.push_back(e.b);
    if (e.b == silo) out.push_back(e.a);
  }
  std::sort(out.begin(), out.end());
  return out;
}

// Dense row-major N x N mixing matrix.
struct ConsensusMatrix {
  std::size_t n = 0;
  std::vector<double> a;

  double at(std::size_t i, std::size_t j) const { return a[i * n + j]; }
  double& at(std::size_t i, std::size_t j) { return a[i * n + j]; }

  static ConsensusMatrix identity(std::size_t n) {
    ConsensusMatrix m{n, std::vector<double>(n * n, 0.0)};
    for (std::size_t i = 0; i < n; ++i) m.at(i, i) = 1.0;
    return m;
  }
};

// Metropolis-Hastings weights: A_ij = 1/(1 + max(deg_i, deg_j)) on edges,
// diagonal takes the slack. Symmetric, hence doubly stochastic, on any
// undirected graph.
inline ConsensusMatrix build_consensus_matrix(const TopologyGraph& g) {
  validate_topology(g);
  const auto deg = g.degrees();
  ConsensusMatrix m{g.silo_count, std::vector<double>(g.silo_count * g.silo_count, 0.0)};
  for (const auto& e : g.edges) {
    const double w = 1.0 / (1.0 + static_cast<double>(std::max(deg[e.a], deg[e.b])));
    m.at(e.a, e.b) = w;
    m.at(e.b, e.a) = w;
  }
  for (std::size_t i = 0; i < g.silo_count; ++i) {
    double off = 0.0;
    for (std::size_t j = 0; j < g.silo_count; ++j)
      if (j != i) off += m.at(i, j);
    m.at(i, i) = 1.0 - off;
  }
  return m;
}

inline bool is_doubly_stochastic(const ConsensusMatrix& m, double tol = 1e-12) {
  for (std::size_t i = 0; i < m.n; ++i) {
    double row = 0.0, col = 0.0;
    for (std::size_t j = 0; j < m.n; ++j) {
      if (m.at(i, j) < -tol) return false;
      row += m.at(i, j);
      col += m.at(j, i);
    }
    if (std::fabs(row - 1.0) > tol || std::fabs(col - 1.0) > tol) return false;
  }
  return true;
}

// 1 - |lambda_2| via power iteration on the mean-deflated matrix.
inline double spectral_gap(const ConsensusMatrix& m, double tol = 1e-10,
                           std::size_t max_iters = 100000) {
  const std::size_t n = m.n;
  if (n == 0) throw std::invalid_argument("topology: empty matrix");
  if (n == 1) return 1.0;

  // deflate: B = A - (1/n) J removes the all-ones eigenvector
  std::vector<double> v(n), w(n);
  rng::Stream rs(0x5eedb01dull);
  for (auto& x : v) x = rs.uniform(-1.0, 1.0);

  auto remove_mean = [&](std::vector<double>& x) {
    double mean = 0.0;
    for (double y : x) mean += y;
    mean /= static_cast<double>(n);
    for (double& y : x) y -= mean;
  };
  auto norm = [&](const std::vector<double>& x) {
    double acc = 0.0;
    for (double y : x) acc += y * y;
    return std::sqrt(acc);
  };

  remove_mean(v);
  double nv = norm(v);
  if (nv == 0.0) return 1.0;
  for (auto& x : v) x /= nv;

  double lambda = 0.0;
  for (std::size_t it = 0; it < max_iters; ++it) {
    for (std::size_t i = 0; i < n; ++i) {
      double acc = 0.0;
      const double* row = m.a.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) acc += row[j] * v[j];
      w[i] = acc;
    }
    remove_mean(w);
    const double nw = norm(w);
    if (nw < 1e-280) return 1.0;  // deflated matrix is (numerically) zero
    const double prev = lambda;
    lambda = nw;
    for (std::size_t i = 0; i < n; ++i) v[i] = w[i] / nw;
    if (it > 0 && std::fabs(lambda - prev) < tol) break;
  }
  return 1.0 - std::min(lambda, 1.0);
}

enum class Scheme { CLL, SFL, DFL };

inline double transfer_ms(std::uint64_t model_bytes, double bandwidth_mbps) {
  return static_cast<double>(model_bytes) * 8.0 / (bandwidth_mbps * 1000.0);
}

// Coarse synchronous-round wall-clock model. DFL: every silo exchanges with
// all neighbours in parallel, the slowest incident link gates it. SFL: all
// payloads travel to a hub silo and back over store-and-forward shortest
// paths (edge cost = latency + per-hop transfer).
inline double cycle_time_estimate(const TopologyGraph& g, std::uint64_t model_bytes,
                                  double local_compute_ms, Scheme scheme, std::size_t hub = 0) {
  validate_topology(g);
  if (local_compute_ms < 0.0) throw std::invalid_argument("topology: negative compute time");
  if (scheme == Scheme::CLL) return local_compute_ms;

  if (scheme == Scheme::DFL) {
    double worst = 0.0;
    for (std::size_t i = 0; i < g.silo_count; ++i) {
      double slowest_link = 0.0;
      for (const auto& e : g.edges)
        if (e.a == i || e.b == i)
          slowest_link = std::max(slowest_link, e.latency_ms + transfer_ms(model_bytes, e.bandwidth_mbps));
      worst = std::max(worst, local_compute_ms + slowest_link);
    }
    return worst;
  }

  // SFL: Dijkstra from the hub with per-edge cost latency + transfer
  if (hub >= g.silo_count) throw std::invalid_argument("topology: bad hub id");
  auto adj = g.adjacency();
  std::vector<double> dist(g.silo_count, std::numeric_limits<double>::infinity());
  using Item = std::pair<double, std::size_t>;
  std::priority_queue<Item, std::vector<Item>, std::greater<>> pq;
  dist[hub] = 0.0;
  pq.emplace(0.0, hub);
  while (!pq.empty()) {
    const auto [d, v] = pq.top();
    pq.pop();
    if (d > dist[v]) continue;
    for (std::size_t ei : adj[v]) {
      const Edge& e = g.edges[ei];
      const std::size_t w = e.a == v ? e.b : e.a;
      const double nd = d + e.latency_ms + transfer_ms(model_bytes, e.bandwidth_mbps);
      if (nd < dist[w]) {
        dist[w] = nd;
        pq.emplace(nd, w);
      }
    }
  }
  double far = 0.0;
  for (double d : dist) far = std::max(far, d);
  return local_compute_ms + 2.0 * far;  // upload + broadcast
}

// Parametric builtin graphs with uniform link properties.
inline TopologyGraph make_ring(std::size_t n, double latency_ms = 10.0, double bw_mbps = 1000.0) {
  if (n < 3) throw std::invalid_argument("topology: ring needs >= 3 silos");
  TopologyGraph g;
  g.silo_count = n;
  g.name = "ring" + std::to_string(n);
  for (std::size_t i = 0; i < n; ++i) g.edges.push_back({i, (i + 1) % n, latency_ms, bw_mbps});
  return g;
}

inline TopologyGraph make_star(std::size_t n, double latency_ms = 10.0, double bw_mbps = 1000.0) {
  if (n < 2) throw std::invalid_argument("topology: star needs >= 2 silos");
  TopologyGraph g;
  g.silo_count = n;
  g.name = "star" + std::to_string(n);
  for (std::size_t i = 1; i < n; ++i) g.edges.push_back({0, i, latency_ms, bw_mbps});
  return g;
}

inline TopologyGraph make_complete(std::size_t n, double latency_ms = 10.0,
                                   double bw_mbps = 1000.0) {
  if (n < 2) throw std::invalid_argument("topology: complete graph needs >= 2 silos");
  TopologyGraph g;
  g.silo_count = n;
  g.name = "complete" + std::to_string(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) g.edges.push_back({i, j, latency_ms, bw_mbps});
  return g;
}

}  // namespace fedcd::topology
