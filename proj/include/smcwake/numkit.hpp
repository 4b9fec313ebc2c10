#pragma once

// Seedable numerical primitives shared by the samplers and trainers:
// counter-based random streams, log-domain weight arithmetic, resampling,
// effective sample size and dense Gaussian densities.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace smcwake {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using VecRef = Eigen::Ref<const Eigen::VectorXd>;
using Index = Eigen::Index;

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();
inline constexpr double kLog2Pi = 1.8378770664093454836;

class EmptyMassError : public std::runtime_error {
 public:
  EmptyMassError() : std::runtime_error("all log-weights are -inf (empty mass)") {}
};

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

//-----------------------------------------------------------------------------
// RngStream

namespace detail {

constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t hash_pair(std::uint64_t a, std::uint64_t b) noexcept {
  return mix64(mix64(a + 0x9e3779b97f4a7c15ULL) ^ (b * 0xd1b54a32d192ed03ULL + 0x8cb92ba72f3d8dd7ULL));
}

}  // namespace detail

// Counter-based random stream.  Output n is a keyed hash of the counter n,
// so a stream is fully determined by (seed, stream id) and child streams
// obtained through split() never share state with their parent.
class RngStream {
 public:
  using result_type = std::uint64_t;

  explicit RngStream(std::uint64_t seed, std::uint64_t stream = 0) noexcept
      : seed_{seed}, stream_{stream}, key_{detail::hash_pair(seed, stream)} {}

  [[nodiscard]] RngStream split(std::uint64_t child) const noexcept {
    return RngStream{seed_, detail::hash_pair(stream_ ^ 0x5851f42d4c957f2dULL, child)};
  }

  static constexpr result_type min() noexcept { return 0; }
  static constexpr result_type max() noexcept { return std::numeric_limits<result_type>::max(); }

  result_type operator()() noexcept {
    const std::uint64_t c = counter_++;
    return detail::mix64(detail::mix64(c ^ key_) + key_);
  }

  // Uniform on [0, 1).
  double uniform() noexcept { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

  // Uniform on (0, 1).
  double uniform_open() noexcept {
    return (static_cast<double>((*this)() >> 11) + 0.5) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  double normal() noexcept {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = uniform_open();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  // Uniform integer in [0, n).
  std::size_t index(std::size_t n) noexcept {
    return static_cast<std::size_t>(uniform() * static_cast<double>(n)) % n;
  }

  Vec normal_vector(Index n) {
    Vec v(n);
    for (Index i = 0; i < n; ++i) v[i] = normal();
    return v;
  }

  [[nodiscard]] std::uint64_t seed() const noexcept { return seed_; }
  [[nodiscard]] std::uint64_t stream_id() const noexcept { return stream_; }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

//-----------------------------------------------------------------------------
// Log-domain weights

inline double log_sum_exp(std::span<const double> values) {
  double hi = kNegInf;
  for (double v : values) hi = std::max(hi, v);
  if (hi == kNegInf) throw EmptyMassError{};
  if (hi == std::numeric_limits<double>::infinity()) return hi;
  double acc = 0.0;
  for (double v : values) acc += std::exp(v - hi);
  return hi + std::log(acc);
}

inline double log_sum_exp(const Vec& values) {
  return log_sum_exp(std::span<const double>(values.data(), static_cast<std::size_t>(values.size())));
}

// log(exp(a) + exp(b)) with -inf handled.
inline double log_add_exp(double a, double b) noexcept {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double hi = std::max(a, b);
  return hi + std::log1p(std::exp(-std::abs(a - b)));
}

struct NormalizedWeights {
  Vec values;
};

struct Normalized {
  NormalizedWeights weights;
  // log of the mean unnormalized weight, log_sum_exp(lw) - log K.
  double log_normalizer;
};

inline Normalized normalize(const Vec& log_weights) {
  for (Index i = 0; i < log_weights.size(); ++i) {
    if (std::isnan(log_weights[i])) throw std::domain_error("NaN log-weight");
  }
  const double lse = log_sum_exp(log_weights);
  Vec w = (log_weights.array() - lse).exp().matrix();
  return {NormalizedWeights{std::move(w)}, lse - std::log(static_cast<double>(log_weights.size()))};
}

inline double ess(const NormalizedWeights& w) { return 1.0 / w.values.squaredNorm(); }
inline double ess(const Vec& w) { return 1.0 / w.squaredNorm(); }

enum class ResampleScheme { Systematic, Multinomial };

inline std::vector<std::size_t> resample(const Vec& w, std::size_t k_out, ResampleScheme scheme,
                                         RngStream& rng) {
  const auto k = static_cast<std::size_t>(w.size());
  std::vector<std::size_t> out;
  out.reserve(k_out);
  std::vector<double> cdf(k);
  double run = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    run += w[static_cast<Index>(i)];
    cdf[i] = run;
  }
  const double total = run;
  auto pick = [&](double u) {
    auto it = std::upper_bound(cdf.begin(), cdf.end(), u * total);
    auto idx = static_cast<std::size_t>(it - cdf.begin());
    if (idx >= k) {
      // round-off past the final cdf value: take the last atom with mass
      idx = k - 1;
      while (idx > 0 && w[static_cast<Index>(idx)] <= 0.0) --idx;
    }
    return idx;
  };
  if (scheme == ResampleScheme::Systematic) {
    const double u0 = rng.uniform();
    for (std::size_t n = 0; n < k_out; ++n) {
      out.push_back(pick((static_cast<double>(n) + u0) / static_cast<double>(k_out)));
    }
  } else {
    for (std::size_t n = 0; n < k_out; ++n) out.push_back(pick(rng.uniform()));
  }
  return out;
}

//-----------------------------------------------------------------------------
// Gaussian

// Multivariate normal with covariance factor * factor^T, factor lower triangular.
class GaussianDist {
 public:
  GaussianDist(Vec mean, Mat lower_factor) : mean_{std::move(mean)}, factor_{std::move(lower_factor)} {
    if (factor_.rows() != mean_.size() || factor_.cols() != mean_.size()) {
      throw DimensionError("GaussianDist: factor shape does not match mean");
    }
    factor_ = factor_.triangularView<Eigen::Lower>();
    for (Index i = 0; i < mean_.size(); ++i) {
      if (!(factor_(i, i) > 0.0)) throw std::invalid_argument("GaussianDist: factor diagonal must be positive");
    }
  }

  static GaussianDist from_covariance(Vec mean, const Mat& cov) {
    Eigen::LLT<Mat> llt(cov);
    if (llt.info() != Eigen::Success) throw std::invalid_argument("covariance is not positive definite");
    return GaussianDist{std::move(mean), llt.matrixL()};
  }

  // N(mean, L L^T + jitter I) for an arbitrary lower-triangular L.
  static GaussianDist with_jitter(Vec mean, const Mat& lower, double jitter) {
    Mat l = lower.triangularView<Eigen::Lower>();
    Mat cov = l * l.transpose();
    cov.diagonal().array() += jitter;
    return from_covariance(std::move(mean), cov);
  }

  [[nodiscard]] Index dim() const noexcept { return mean_.size(); }
  [[nodiscard]] const Vec& mean() const noexcept { return mean_; }
  [[nodiscard]] const Mat& factor() const noexcept { return factor_; }
  [[nodiscard]] Mat covariance() const { return factor_ * factor_.transpose(); }
  [[nodiscard]] double log_det_covariance() const {
    return 2.0 * factor_.diagonal().array().log().sum();
  }
  // Sigma^{-1}.
  [[nodiscard]] Mat precision() const {
    Mat linv = factor_.triangularView<Eigen::Lower>().solve(Mat::Identity(dim(), dim()));
    return linv.transpose() * linv;
  }

 private:
  Vec mean_;
  Mat factor_;
};

inline double mvn_logpdf(const VecRef& z, const GaussianDist& d) {
  if (z.size() != d.dim()) throw DimensionError("mvn_logpdf: dimension mismatch");
  Vec r = z - d.mean();
  d.factor().triangularView<Eigen::Lower>().solveInPlace(r);
  return -0.5 * (static_cast<double>(d.dim()) * kLog2Pi + d.log_det_covariance() + r.squaredNorm());
}

inline Vec mvn_sample(const GaussianDist& d, RngStream& rng) {
  return d.mean() + d.factor().triangularView<Eigen::Lower>() * rng.normal_vector(d.dim());
}

inline double normal_logpdf(double z, double mean, double sd) noexcept {
  const double u = (z - mean) / sd;
  return -0.5 * (kLog2Pi + u * u) - std::log(sd);
}

}  // namespace smcwake
