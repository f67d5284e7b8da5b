#pragma once

// Training losses. The contrastive divergence loss is a beta-weighted pair
// of directed KL terms between the branch feature distributions; each
// direction is gradient-detached on its reference side so the positive term
// trains only the backbone and the negative term only the sub-network.

#include <cmath>
#include <cstdint>
#include <stdexcept>

#include "fedcd/autodiff.hpp"
#include "fedcd/tensor.hpp"

namespace fedcd {

enum class BetaSchedule { None, LinearDecay };
enum class PositiveWeighting { Weighted, Unweighted };

struct CdlConfig {
  double beta = 0.5;              // pull balance between the two KL directions
  double temperature = 1.0;       // softmax temperature for the feature distribution
  double smoothing_epsilon = 1e-6;
  BetaSchedule schedule = BetaSchedule::None;
  double schedule_end = 0.0;          // LinearDecay: beta -> schedule_end
  std::uint64_t schedule_rounds = 0;  // over this many communication rounds
  // Whether Eq-style backbone loss keeps beta on the positive term or uses it
  // unweighted.
  PositiveWeighting positive_weighting = PositiveWeighting::Weighted;

  void validate() const {
    if (beta < 0.0 || beta > 1.0) throw std::invalid_argument("cdl: beta must be in [0,1]");
    if (!(temperature > 0.0)) throw std::invalid_argument("cdl: temperature must be positive");
    if (!(smoothing_epsilon > 0.0) || smoothing_epsilon >= 1e-3)
      throw std::invalid_argument("cdl: smoothing epsilon must be in (0, 1e-3)");
    if (schedule == BetaSchedule::LinearDecay) {
      if (schedule_rounds == 0) throw std::invalid_argument("cdl: schedule needs rounds >= 1");
      if (schedule_end < 0.0 || schedule_end > 1.0)
        throw std::invalid_argument("cdl: schedule end must be in [0,1]");
    }
  }

  double beta_at(std::uint64_t round) const {
    if (schedule != BetaSchedule::LinearDecay) return beta;
    if (round >= schedule_rounds) return schedule_end;
    const double f = static_cast<double>(round) / static_cast<double>(schedule_rounds);
    return beta + (schedule_end - beta) * f;
  }

  // Weight on the positive CD term inside the backbone loss.
  double backbone_cd_weight(std::uint64_t round) const {
    return positive_weighting == PositiveWeighting::Weighted ? beta_at(round) : 1.0;
  }
};

// Mean absolute error over steering predictions.
inline ad::NodePtr mae_loss(const ad::NodePtr& pred, const ad::NodePtr& targets) {
  if (!pred->value.same_shape(targets->value))
    throw std::invalid_argument("mae: prediction shape " + shape_str(pred->value.shape()) +
                                " vs target shape " + shape_str(targets->value.shape()));
  if (pred->value.numel() == 0) throw std::invalid_argument("mae: empty batch");
  return ad::mean(ad::abs(ad::sub(pred, targets)));
}

inline ad::NodePtr mae_loss(const ad::NodePtr& pred, const Tensor& targets) {
  return mae_loss(pred, ad::constant(targets));
}

// Batch-mean temperature softmax over the feature axis, epsilon-smoothed:
// p = (1 - d*eps) * mean_rows(softmax(f / T)) + eps. Sums to one, every
// entry >= eps, differentiable w.r.t. the features.
inline ad::NodePtr feature_distribution(const ad::NodePtr& features, const CdlConfig& cfg) {
  cfg.validate();
  const Tensor& f = features->value;
  if (f.rank() != 2) throw std::invalid_argument("cdl: features must be [batch x dim]");
  const std::size_t m = f.dim(0), d = f.dim(1);
  if (m < 1 || d < 2) throw std::invalid_argument("cdl: need batch >= 1 and dim >= 2");
  if (!f.all_finite()) throw std::invalid_argument("cdl: non-finite features");

  auto sm = ad::softmax_lastdim(ad::scalar_mul(features, 1.0 / cfg.temperature));
  auto col_mean = ad::scalar_mul(ad::matmul(ad::constant(Tensor::ones({1, m})), sm),
                                 1.0 / static_cast<double>(m));
  auto mean_vec = ad::reshape(col_mean, {d});
  const double eps = cfg.smoothing_epsilon;
  return ad::add(ad::scalar_mul(mean_vec, 1.0 - static_cast<double>(d) * eps),
                 ad::constant(Tensor::full({d}, eps)));
}

// KL(p || q) = sum p * (log p - log q), natural log.
inline ad::NodePtr kl_divergence(const ad::NodePtr& p, const ad::NodePtr& q) {
  if (!p->value.same_shape(q->value))
    throw std::invalid_argument("kl: dimension mismatch " + shape_str(p->value.shape()) + " vs " +
                                shape_str(q->value.shape()));
  return ad::sum(ad::mul(p, ad::sub(ad::log(p), ad::log(q))));
}

struct CdlTerms {
  ad::NodePtr cd_plus;   // KL(f(backbone) || f(subnet)), subnet detached
  ad::NodePtr cd_minus;  // KL(f(subnet) || f(backbone)), backbone detached
  ad::NodePtr combined;  // beta * cd_plus + (1 - beta) * cd_minus
};

inline ad::NodePtr combine_cdl(const ad::NodePtr& cd_plus, const ad::NodePtr& cd_minus,
                               double beta) {
  return ad::add(ad::scalar_mul(cd_plus, beta), ad::scalar_mul(cd_minus, 1.0 - beta));
}

inline CdlTerms cdl_loss(const ad::NodePtr& backbone_features, const ad::NodePtr& subnet_features,
                         const CdlConfig& cfg, double beta_effective) {
  auto p_b = feature_distribution(backbone_features, cfg);
  auto p_s = feature_distribution(subnet_features, cfg);
  CdlTerms t;
  t.cd_plus = kl_divergence(p_b, ad::detach(p_s));
  t.cd_minus = kl_divergence(p_s, ad::detach(p_b));
  t.combined = combine_cdl(t.cd_plus, t.cd_minus, beta_effective);
  return t;
}

inline CdlTerms cdl_loss(const ad::NodePtr& backbone_features, const ad::NodePtr& subnet_features,
                         const CdlConfig& cfg) {
  return cdl_loss(backbone_features, subnet_features, cfg, cfg.beta);
}

// L_b = L_lr + beta_effective * L_cd+ ; trains the backbone only.
inline ad::NodePtr backbone_loss(const ad::NodePtr& mae, const ad::NodePtr& cd_plus,
                                 double beta_effective) {
  return ad::add(mae, ad::scalar_mul(cd_plus, beta_effective));
}

// Total local loss, unweighted sum of the regression and contrastive terms.
inline ad::NodePtr final_loss(const ad::NodePtr& mae, const ad::NodePtr& cdl_combined) {
  return ad::add(mae, cdl_combined);
}

}  // namespace fedcd
