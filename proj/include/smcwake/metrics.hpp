#pragma once

// Divergences between the encoder and the exact posterior.

#include "smcwake/encoder.hpp"
#include "smcwake/models.hpp"
#include "smcwake/numkit.hpp"
#include "smcwake/smc.hpp"

#include <optional>
#include <vector>

namespace smcwake {

class UnsupportedAnalyticMetric : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// KL(d0 || d1) for Gaussians.
inline double gaussian_kl(const GaussianDist& d0, const GaussianDist& d1) {
  if (d0.dim() != d1.dim()) throw DimensionError("gaussian_kl: dimension mismatch");
  const auto k = static_cast<double>(d0.dim());
  const auto l1 = d1.factor().triangularView<Eigen::Lower>();
  // tr(S1^{-1} S0) = ||L1^{-1} L0||_F^2
  const Mat a = l1.solve(d0.factor());
  Vec diff = d1.mean() - d0.mean();
  l1.solveInPlace(diff);
  const double kl = 0.5 * (a.squaredNorm() + diff.squaredNorm() - k + d1.log_det_covariance() - d0.log_det_covariance());
  return std::max(kl, 0.0);
}

struct KlReport {
  std::vector<double> forward;  // KL(posterior || q)
  std::vector<double> reverse;  // KL(q || posterior)
  std::vector<double> symmetric;
  double avg_forward = 0.0;
  double avg_reverse = 0.0;
  double avg_symmetric = 0.0;
  // Sample-based values carry standard errors and this flag.
  bool approximate = false;
  double se_forward = 0.0;
  int step = 0;
};

namespace detail {

inline void finish(KlReport& r) {
  const auto n = static_cast<double>(r.forward.size());
  r.avg_forward = r.avg_reverse = r.avg_symmetric = 0.0;
  for (std::size_t j = 0; j < r.forward.size(); ++j) {
    r.symmetric.push_back(r.forward[j] + r.reverse[j]);
    r.avg_forward += r.forward[j] / n;
    r.avg_reverse += r.reverse[j] / n;
    r.avg_symmetric += r.symmetric[j] / n;
  }
}

}  // namespace detail

// Closed-form forward/reverse/symmetric KL averaged over the dataset.
// Needs an analytic posterior and a Gaussian encoder.
inline KlReport amortized_kl_report(const Encoder& enc, const GenerativeModel& model, const std::vector<Vec>& data,
                                    int step = 0) {
  if (!model.has_analytic_posterior()) throw UnsupportedAnalyticMetric("model has no analytic posterior");
  KlReport r;
  r.step = step;
  for (const auto& x : data) {
    const auto q = enc.gaussian(x);
    if (!q) throw UnsupportedAnalyticMetric("encoder family '" + enc.family() + "' is not Gaussian");
    const GaussianDist post = model.analytic_posterior(x);
    r.forward.push_back(gaussian_kl(post, *q));
    r.reverse.push_back(gaussian_kl(*q, post));
  }
  detail::finish(r);
  return r;
}

// Monte Carlo forward KL from posterior draws: mean of log p(z | x) - log q(z | x)
// with log p(z | x) = log p(z, x) - log_evidence.  Returns (estimate, SE).
inline std::pair<double, double> forward_kl_from_samples(const Encoder& enc, const GenerativeModel& model,
                                                         const VecRef& x, const Mat& post_samples, double log_evidence) {
  const Vec lq = enc.log_prob_batch(x, post_samples);
  const Index n = post_samples.cols();
  Vec d(n);
  for (Index i = 0; i < n; ++i) d[i] = model.log_joint(x, post_samples.col(i)) - log_evidence - lq[i];
  const double mean = d.mean();
  const double var = n > 1 ? (d.array() - mean).square().sum() / static_cast<double>(n - 1) : 0.0;
  return {mean, std::sqrt(var / static_cast<double>(n))};
}

// Forward-KL surrogate for encoders or models without closed forms.  Per
// datapoint a reference LT-SMC run supplies posterior draws (resampled to
// `draws` equally weighted atoms) and the log-evidence estimate.  Reverse
// KL is not estimated (left 0) and the report is flagged approximate.
inline KlReport sampled_forward_kl_report(const Encoder& enc, const GenerativeModel& model,
                                          const std::vector<Vec>& data, const SmcConfig& reference, Index draws,
                                          RngStream rng, int step = 0) {
  KlReport r;
  r.step = step;
  r.approximate = true;
  double var = 0.0;
  for (std::size_t j = 0; j < data.size(); ++j) {
    RngStream sub = rng.split(j);
    const SmcRunRecord rec = lt_smc_run(model, data[j], reference, sub);
    const auto idx = resample(rec.weights, static_cast<std::size_t>(draws), ResampleScheme::Systematic, sub);
    Mat zs(model.latent_dim(), draws);
    for (Index i = 0; i < draws; ++i) zs.col(i) = rec.atoms.col(static_cast<Index>(idx[static_cast<std::size_t>(i)]));
    const double log_c = model.has_analytic_posterior() ? model.analytic_log_evidence(data[j]) : rec.log_evidence;
    const auto [kl, se] = forward_kl_from_samples(enc, model, data[j], zs, log_c);
    r.forward.push_back(kl);
    r.reverse.push_back(0.0);
    var += se * se;
  }
  detail::finish(r);
  r.se_forward = std::sqrt(var) / static_cast<double>(data.size());
  return r;
}

// Per-dimension standard deviation of n encoder draws.
inline Vec sample_std(const Mat& zs) {
  const Vec m = zs.rowwise().mean();
  const Mat c = zs.colwise() - m;
  return (c.rowwise().squaredNorm() / static_cast<double>(std::max<Index>(zs.cols() - 1, 1))).cwiseSqrt();
}

// log of the mean of p(z, x) over the columns of zs (unnormalized posterior
// density averaged over samples; -inf only if every sample is outside the
// support).
inline double log_mean_joint(const GenerativeModel& model, const VecRef& x, const Mat& zs) {
  Vec lj(zs.cols());
  for (Index i = 0; i < zs.cols(); ++i) lj[i] = model.log_joint(x, zs.col(i));
  try {
    return log_sum_exp(lj) - std::log(static_cast<double>(zs.cols()));
  } catch (const EmptyMassError&) {
    return kNegInf;
  }
}

}  // namespace smcwake
