#pragma once

// Shared test helpers: seeded random tensors and the central finite
// difference gradient oracle. The oracle only ever calls the forward path
// (graphs are rebuilt from perturbed leaf data), so it stays independent of
// the reverse-mode implementation it checks.

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "fedcd/autodiff.hpp"
#include "fedcd/rng.hpp"
#include "fedcd/tensor.hpp"

namespace testutil {

using fedcd::Shape;
using fedcd::Tensor;
namespace ad = fedcd::ad;

inline Tensor random_tensor(fedcd::rng::Stream& rs, Shape shape, double lo = -2.0,
                            double hi = 2.0, double avoid_below = 0.0) {
  std::vector<double> data(fedcd::shape_numel(shape));
  for (auto& v : data) {
    do {
      v = rs.uniform(lo, hi);
    } while (std::fabs(v) < avoid_below);
  }
  return Tensor(std::move(shape), std::move(data));
}

// Builds a scalar-rooted graph from leaf tensors. The builder receives
// trainable leaves; the same builder is reused for perturbed copies.
using GraphBuilder = std::function<ad::NodePtr(const std::vector<ad::NodePtr>&)>;

struct FdReport {
  double max_rel_err = 0.0;
  bool ok = true;
};

inline FdReport check_gradients(const GraphBuilder& build, std::vector<Tensor> leaf_values,
                                double step = 1e-5, double tol = 1e-5) {
  std::vector<ad::NodePtr> leaves;
  leaves.reserve(leaf_values.size());
  for (const auto& t : leaf_values) leaves.push_back(ad::leaf(t, true));
  auto root = build(leaves);
  auto grads = ad::backward(root);

  auto eval_at = [&](const std::vector<Tensor>& vals) {
    std::vector<ad::NodePtr> ls;
    ls.reserve(vals.size());
    for (const auto& t : vals) ls.push_back(ad::leaf(t, false));
    return ad::forward(build(ls)).item();
  };

  FdReport rep;
  for (std::size_t li = 0; li < leaf_values.size(); ++li) {
    const Tensor& analytic = leaves[li]->grad;
    for (std::size_t e = 0; e < leaf_values[li].numel(); ++e) {
      std::vector<Tensor> plus = leaf_values;
      std::vector<Tensor> minus = leaf_values;
      plus[li][e] += step;
      minus[li][e] -= step;
      const double fd = (eval_at(plus) - eval_at(minus)) / (2.0 * step);
      const double a = analytic[e];
      const double err = std::fabs(a - fd) / std::max({1.0, std::fabs(a), std::fabs(fd)});
      rep.max_rel_err = std::max(rep.max_rel_err, err);
      if (err >= tol) rep.ok = false;
    }
  }
  return rep;
}

}  // namespace testutil
