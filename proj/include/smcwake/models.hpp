#pragma once

#include "smcwake/numkit.hpp"

#include <cmath>
#include <fstream>
#include <memory>
#include <numbers>
#include <sstream>
#include <string>

namespace smcwake {

class NoAnalyticPosterior : public std::logic_error {
 public:
  explicit NoAnalyticPosterior(const std::string& model)
      : std::logic_error("model '" + model + "' has no analytic posterior/evidence") {}
};

class IllConditionedModel : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Joint model p(z) p(x | z).
class GenerativeModel {
 public:
  virtual ~GenerativeModel() = default;

  [[nodiscard]] virtual std::string name() const = 0;
  [[nodiscard]] virtual Index latent_dim() const = 0;
  [[nodiscard]] virtual Index obs_dim() const = 0;

  virtual Vec prior_sample(RngStream& rng) const = 0;
  // -inf outside the prior support.
  [[nodiscard]] virtual double prior_logpdf(const VecRef& z) const = 0;
  // -inf for impossible observations; never NaN.
  [[nodiscard]] virtual double log_lik(const VecRef& x, const VecRef& z) const = 0;
  virtual Vec simulate(const VecRef& z, RngStream& rng) const = 0;

  [[nodiscard]] virtual bool has_analytic_posterior() const { return false; }
  [[nodiscard]] virtual GaussianDist analytic_posterior(const VecRef&) const {
    throw NoAnalyticPosterior(name());
  }
  [[nodiscard]] virtual double analytic_log_evidence(const VecRef&) const {
    throw NoAnalyticPosterior(name());
  }

  [[nodiscard]] double log_joint(const VecRef& x, const VecRef& z) const {
    const double lp = prior_logpdf(z);
    if (lp == kNegInf) return kNegInf;
    return lp + log_lik(x, z);
  }
};

// n prior draws as the columns of a latent_dim x n matrix.
inline Mat prior_sample(const GenerativeModel& model, Index n, RngStream& rng) {
  Mat out(model.latent_dim(), n);
  for (Index i = 0; i < n; ++i) out.col(i) = model.prior_sample(rng);
  return out;
}

//-----------------------------------------------------------------------------

// z ~ N(0, prior_sd^2), x | z ~ N(z, noise_sd^2).
class ConjugateGaussian1D final : public GenerativeModel {
 public:
  explicit ConjugateGaussian1D(double prior_sd = 10.0, double noise_sd = 1.0)
      : prior_sd_{prior_sd}, noise_sd_{noise_sd} {}

  [[nodiscard]] std::string name() const override { return "conjugate-1d"; }
  [[nodiscard]] Index latent_dim() const override { return 1; }
  [[nodiscard]] Index obs_dim() const override { return 1; }

  Vec prior_sample(RngStream& rng) const override { return Vec::Constant(1, prior_sd_ * rng.normal()); }
  [[nodiscard]] double prior_logpdf(const VecRef& z) const override {
    return normal_logpdf(z[0], 0.0, prior_sd_);
  }
  [[nodiscard]] double log_lik(const VecRef& x, const VecRef& z) const override {
    return normal_logpdf(x[0], z[0], noise_sd_);
  }
  Vec simulate(const VecRef& z, RngStream& rng) const override {
    return Vec::Constant(1, z[0] + noise_sd_ * rng.normal());
  }

  [[nodiscard]] bool has_analytic_posterior() const override { return true; }
  [[nodiscard]] GaussianDist analytic_posterior(const VecRef& x) const override {
    const double v0 = prior_sd_ * prior_sd_;
    const double vn = noise_sd_ * noise_sd_;
    const double var = v0 * vn / (v0 + vn);
    return GaussianDist{Vec::Constant(1, v0 / (v0 + vn) * x[0]), Mat::Constant(1, 1, std::sqrt(var))};
  }
  [[nodiscard]] double analytic_log_evidence(const VecRef& x) const override {
    return normal_logpdf(x[0], 0.0, std::hypot(prior_sd_, noise_sd_));
  }

  [[nodiscard]] double prior_sd() const noexcept { return prior_sd_; }
  [[nodiscard]] double noise_sd() const noexcept { return noise_sd_; }

 private:
  double prior_sd_;
  double noise_sd_;
};

//-----------------------------------------------------------------------------

// z ~ N(0, sigma^2 I_p), x | z ~ N(A z, tau^2 I_d) with A of shape d x p.
class GaussianLinearModel final : public GenerativeModel {
 public:
  GaussianLinearModel(Mat design, double prior_sd, double noise_sd)
      : a_{std::move(design)}, at_{a_.transpose()}, prior_sd_{prior_sd}, noise_sd_{noise_sd} {
    if (a_.size() == 0) throw std::invalid_argument("empty design matrix");
    const Index p = a_.cols();
    precision_ = Mat::Identity(p, p) / (prior_sd_ * prior_sd_) + at_ * a_ / (noise_sd_ * noise_sd_);
    precision_llt_.compute(precision_);
    if (precision_llt_.info() != Eigen::Success) {
      throw IllConditionedModel("posterior precision is not positive definite");
    }
    Mat cov = precision_llt_.solve(Mat::Identity(p, p));
    cov = 0.5 * (cov + cov.transpose());
    Eigen::LLT<Mat> cov_llt(cov);
    if (cov_llt.info() != Eigen::Success) throw IllConditionedModel("posterior covariance factorization failed");
    posterior_factor_ = cov_llt.matrixL();

    Mat marginal = prior_sd_ * prior_sd_ * (a_ * at_);
    marginal.diagonal().array() += noise_sd_ * noise_sd_;
    Eigen::LLT<Mat> m_llt(marginal);
    if (m_llt.info() != Eigen::Success) throw IllConditionedModel("marginal covariance factorization failed");
    marginal_factor_ = m_llt.matrixL();
  }

  // Design with i.i.d. standard-normal entries.
  static Mat random_design(Index d, Index p, RngStream& rng) {
    Mat a(d, p);
    for (Index j = 0; j < p; ++j)
      for (Index i = 0; i < d; ++i) a(i, j) = rng.normal();
    return a;
  }

  // Design U diag(s) V^T with random orthonormal U, V and singular values
  // log-spaced between s_min and s_max.
  static Mat conditioned_design(Index d, Index p, double s_min, double s_max, RngStream& rng) {
    const Index r = std::min(d, p);
    Eigen::HouseholderQR<Mat> qu(random_design(d, d, rng));
    Eigen::HouseholderQR<Mat> qv(random_design(p, p, rng));
    Mat u = qu.householderQ() * Mat::Identity(d, r);
    Mat v = qv.householderQ() * Mat::Identity(p, r);
    Vec s(r);
    for (Index i = 0; i < r; ++i) {
      const double t = r == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(r - 1);
      s[i] = s_min * std::pow(s_max / s_min, t);
    }
    return u * s.asDiagonal() * v.transpose();
  }

  // Rows are observation dimensions; comma separated, '#' comments allowed.
  static Mat load_design_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open design matrix file: " + path);
    std::vector<std::vector<double>> rows;
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty() || line[0] == '#') continue;
      std::vector<double> row;
      std::stringstream ss(line);
      std::string cell;
      while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
      if (!row.empty()) rows.push_back(std::move(row));
    }
    if (rows.empty()) throw std::runtime_error("design matrix file is empty: " + path);
    Mat a(static_cast<Index>(rows.size()), static_cast<Index>(rows[0].size()));
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i].size() != rows[0].size()) throw std::runtime_error("ragged design matrix in " + path);
      for (std::size_t j = 0; j < rows[i].size(); ++j) a(static_cast<Index>(i), static_cast<Index>(j)) = rows[i][j];
    }
    return a;
  }

  [[nodiscard]] std::string name() const override { return "gaussian-linear"; }
  [[nodiscard]] Index latent_dim() const override { return a_.cols(); }
  [[nodiscard]] Index obs_dim() const override { return a_.rows(); }

  Vec prior_sample(RngStream& rng) const override { return prior_sd_ * rng.normal_vector(latent_dim()); }

  [[nodiscard]] double prior_logpdf(const VecRef& z) const override {
    const auto p = static_cast<double>(latent_dim());
    return -0.5 * (p * kLog2Pi + z.squaredNorm() / (prior_sd_ * prior_sd_)) - p * std::log(prior_sd_);
  }

  [[nodiscard]] double log_lik(const VecRef& x, const VecRef& z) const override {
    double ss = 0.0;
    for (Index i = 0; i < a_.rows(); ++i) {
      const double r = x[i] - at_.col(i).dot(z);
      ss += r * r;
    }
    const auto d = static_cast<double>(obs_dim());
    return -0.5 * (d * kLog2Pi + ss / (noise_sd_ * noise_sd_)) - d * std::log(noise_sd_);
  }

  Vec simulate(const VecRef& z, RngStream& rng) const override {
    return a_ * z + noise_sd_ * rng.normal_vector(obs_dim());
  }

  [[nodiscard]] bool has_analytic_posterior() const override { return true; }
  [[nodiscard]] GaussianDist analytic_posterior(const VecRef& x) const override {
    return GaussianDist{precision_llt_.solve(rhs(x)), posterior_factor_};
  }
  [[nodiscard]] double analytic_log_evidence(const VecRef& x) const override {
    return mvn_logpdf(x, GaussianDist{Vec::Zero(obs_dim()), marginal_factor_});
  }

  // b = A^T x / tau^2.
  [[nodiscard]] Vec rhs(const VecRef& x) const { return at_ * x / (noise_sd_ * noise_sd_); }
  // M = I / sigma^2 + A^T A / tau^2.
  [[nodiscard]] const Mat& posterior_precision() const noexcept { return precision_; }
  [[nodiscard]] const Mat& design() const noexcept { return a_; }
  [[nodiscard]] double prior_sd() const noexcept { return prior_sd_; }
  [[nodiscard]] double noise_sd() const noexcept { return noise_sd_; }

 private:
  Mat a_;
  Mat at_;
  double prior_sd_;
  double noise_sd_;
  Mat precision_;
  Eigen::LLT<Mat> precision_llt_;
  Mat posterior_factor_;
  Mat marginal_factor_;
};

// Posterior N(M^{-1} b, M^{-1}) of the linear Gaussian model.
inline GaussianDist linear_posterior_params(const GaussianLinearModel& model, const VecRef& x) {
  return model.analytic_posterior(x);
}

//-----------------------------------------------------------------------------

// Two-moons simulator: z ~ U(-1, 1)^2, a ~ U(-pi/2, pi/2), r ~ N(0.1, 0.01^2),
// x = [r cos a + 0.25, r sin a] + g(z) with
// g(z) = [-|z1 + z2| / sqrt 2, (-z1 + z2) / sqrt 2].
class TwoMoonsModel final : public GenerativeModel {
 public:
  static constexpr double kRadiusMean = 0.1;
  static constexpr double kRadiusSd = 0.01;
  static constexpr double kOffset = 0.25;

  [[nodiscard]] std::string name() const override { return "two-moons"; }
  [[nodiscard]] Index latent_dim() const override { return 2; }
  [[nodiscard]] Index obs_dim() const override { return 2; }

  static Vec shift(const VecRef& z) {
    Vec g(2);
    g[0] = -std::abs(z[0] + z[1]) / std::numbers::sqrt2;
    g[1] = (-z[0] + z[1]) / std::numbers::sqrt2;
    return g;
  }

  Vec prior_sample(RngStream& rng) const override {
    Vec z(2);
    z[0] = rng.uniform(-1.0, 1.0);
    z[1] = rng.uniform(-1.0, 1.0);
    return z;
  }

  [[nodiscard]] double prior_logpdf(const VecRef& z) const override {
    if (std::abs(z[0]) > 1.0 || std::abs(z[1]) > 1.0) return kNegInf;
    return -std::log(4.0);
  }

  // Density of x - g(z) - (0.25, 0) in polar coordinates (rho, angle):
  // (1/pi) N(rho; 0.1, 0.01^2) / rho for angle in (-pi/2, pi/2).
  [[nodiscard]] double log_lik(const VecRef& x, const VecRef& z) const override {
    const double s = std::abs(z[0] + z[1]) / std::numbers::sqrt2;
    const double u0 = x[0] + s - kOffset;
    const double u1 = x[1] - (-z[0] + z[1]) / std::numbers::sqrt2;
    if (!(u0 > 0.0)) return kNegInf;
    const double rho = std::hypot(u0, u1);
    return -std::log(std::numbers::pi) + normal_logpdf(rho, kRadiusMean, kRadiusSd) - std::log(rho);
  }

  // Forward map for given auxiliaries (angle a, radius r).
  static Vec forward(const VecRef& z, double angle, double radius) {
    Vec x(2);
    x[0] = radius * std::cos(angle) + kOffset;
    x[1] = radius * std::sin(angle);
    return x + shift(z);
  }

  Vec simulate(const VecRef& z, RngStream& rng) const override {
    const double a = rng.uniform(-std::numbers::pi / 2.0, std::numbers::pi / 2.0);
    const double r = kRadiusMean + kRadiusSd * rng.normal();
    return forward(z, a, r);
  }
};

// Two-moons simulation at a fixed latent value.
inline Vec two_moons_simulate(const VecRef& z, RngStream& rng) { return TwoMoonsModel{}.simulate(z, rng); }

//-----------------------------------------------------------------------------

// Standard-normal prior with a likelihood that ignores z: p(x | z) = exp(log_c).
// The posterior is the prior and the evidence is exp(log_c).
class ConstantLikelihoodModel final : public GenerativeModel {
 public:
  explicit ConstantLikelihoodModel(Index latent_dim = 1, double log_c = -1.0)
      : dim_{latent_dim}, log_c_{log_c} {}

  [[nodiscard]] std::string name() const override { return "constant-likelihood"; }
  [[nodiscard]] Index latent_dim() const override { return dim_; }
  [[nodiscard]] Index obs_dim() const override { return 1; }
  Vec prior_sample(RngStream& rng) const override { return rng.normal_vector(dim_); }
  [[nodiscard]] double prior_logpdf(const VecRef& z) const override {
    return -0.5 * (static_cast<double>(dim_) * kLog2Pi + z.squaredNorm());
  }
  [[nodiscard]] double log_lik(const VecRef&, const VecRef&) const override { return log_c_; }
  Vec simulate(const VecRef&, RngStream&) const override { return Vec::Zero(1); }

  [[nodiscard]] bool has_analytic_posterior() const override { return true; }
  [[nodiscard]] GaussianDist analytic_posterior(const VecRef&) const override {
    return GaussianDist{Vec::Zero(dim_), Mat::Identity(dim_, dim_)};
  }
  [[nodiscard]] double analytic_log_evidence(const VecRef&) const override { return log_c_; }

 private:
  Index dim_;
  double log_c_;
};

}  // namespace smcwake
