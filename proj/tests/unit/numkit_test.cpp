#include "smcwake/numkit.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <vector>

using namespace smcwake;

namespace {

Vec vec(std::initializer_list<double> v) {
  Vec out(static_cast<Index>(v.size()));
  Index i = 0;
  for (double x : v) out[i++] = x;
  return out;
}

// direct sum in long double
long double lse_ld(const Vec& v) {
  long double s = 0.0L;
  for (Index i = 0; i < v.size(); ++i) s += std::exp(static_cast<long double>(v[i]));
  return std::log(s);
}

}  // namespace

TEST(LogSumExp, SmallCases) {
  EXPECT_NEAR(log_sum_exp(vec({0.0, 0.0})), std::log(2.0), 1e-15);
  EXPECT_EQ(log_sum_exp(vec({kNegInf, 3.0})), 3.0);
  EXPECT_NEAR(log_sum_exp(vec({1000.0, 1000.0 + std::log(3.0)})), 1000.0 + std::log(4.0), 1e-12);
}

TEST(LogSumExp, ShiftInvariant) {
  RngStream rng(3);
  Vec v = rng.normal_vector(20) * 4.0;
  const double base = log_sum_exp(v);
  for (double c : {-700.0, -3.5, 0.0, 12.0, 900.0}) {
    EXPECT_NEAR(log_sum_exp(Vec(v.array() + c)), base + c, 1e-10 * std::max(1.0, std::abs(c)));
  }
  EXPECT_NEAR(base, static_cast<double>(lse_ld(v)), 1e-13);
}

TEST(LogSumExp, EmptyMass) {
  EXPECT_THROW(log_sum_exp(vec({kNegInf, kNegInf})), EmptyMassError);
  EXPECT_THROW(log_sum_exp(Vec(0)), EmptyMassError);
}

TEST(LogAddExp, MatchesPair) {
  EXPECT_NEAR(log_add_exp(std::log(2.0), std::log(5.0)), std::log(7.0), 1e-15);
  EXPECT_EQ(log_add_exp(kNegInf, -4.0), -4.0);
  EXPECT_EQ(log_add_exp(kNegInf, kNegInf), kNegInf);
}

TEST(Normalize, Examples) {
  auto u = normalize(Vec::Constant(4, -2.0));
  for (Index i = 0; i < 4; ++i) EXPECT_NEAR(u.weights.values[i], 0.25, 1e-15);
  EXPECT_NEAR(u.log_normalizer, -2.0, 1e-14);

  auto r = normalize(vec({0.0, std::log(3.0)}));
  EXPECT_NEAR(r.weights.values[0], 0.25, 1e-15);
  EXPECT_NEAR(r.weights.values[1], 0.75, 1e-15);
  EXPECT_NEAR(r.log_normalizer, std::log(2.0), 1e-15);
}

TEST(Normalize, ExtendedPrecisionOracle) {
  RngStream rng(11);
  for (int rep = 0; rep < 20; ++rep) {
    Vec lw = rng.normal_vector(8) * 3.0;
    const auto n = normalize(lw);
    const long double lse = lse_ld(lw);
    long double total = 0.0L;
    for (Index i = 0; i < 8; ++i) {
      const long double w = std::exp(static_cast<long double>(lw[i]) - lse);
      EXPECT_NEAR(n.weights.values[i], static_cast<double>(w), 1e-14);
      total += n.weights.values[i];
    }
    EXPECT_NEAR(static_cast<double>(total), 1.0, 1e-12);
    EXPECT_NEAR(n.log_normalizer, static_cast<double>(lse - std::log(8.0L)), 1e-13);
  }
}

TEST(Normalize, ShiftLeavesWeightsAndEssUnchanged) {
  RngStream rng(12);
  Vec lw = rng.normal_vector(30) * 2.0;
  const auto a = normalize(lw);
  for (double c : {-500.0, 250.0}) {
    const auto b = normalize(Vec(lw.array() + c));
    EXPECT_LT((a.weights.values - b.weights.values).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_NEAR(ess(a.weights), ess(b.weights), 1e-12 * ess(a.weights));
  }
}

TEST(Normalize, RejectsNan) {
  EXPECT_THROW(normalize(vec({0.0, std::nan("")})), std::domain_error);
  EXPECT_THROW(normalize(vec({kNegInf, kNegInf})), EmptyMassError);
}

TEST(Normalize, StagewiseLogNormalizersTelescope) {
  // product of per-stage mean weights, each stage resampled to uniform
  RngStream rng(13);
  double sum_log = 0.0;
  long double prod = 1.0L;
  for (int t = 0; t < 6; ++t) {
    Vec lw = rng.normal_vector(16);
    sum_log += normalize(lw).log_normalizer;
    long double m = 0.0L;
    for (Index i = 0; i < 16; ++i) m += std::exp(static_cast<long double>(lw[i]));
    prod *= m / 16.0L;
  }
  EXPECT_NEAR(sum_log, static_cast<double>(std::log(prod)), 1e-12);
}

TEST(Ess, Examples) {
  EXPECT_NEAR(ess(Vec(Vec::Constant(10, 0.1))), 10.0, 1e-12);
  EXPECT_NEAR(ess(vec({0.0, 0.0, 1.0, 0.0})), 1.0, 0.0);
  EXPECT_NEAR(ess(vec({0.5, 0.5, 0.0, 0.0})), 2.0, 1e-15);
}

TEST(Resample, OneHot) {
  RngStream rng(1);
  for (auto scheme : {ResampleScheme::Systematic, ResampleScheme::Multinomial}) {
    for (auto i : resample(vec({0, 0, 1, 0, 0}), 50, scheme, rng)) EXPECT_EQ(i, 2u);
  }
}

TEST(Resample, SystematicStratified) {
  RngStream rng(2);
  for (int rep = 0; rep < 20; ++rep) {
    const auto idx = resample(Vec::Constant(5, 0.2), 20, ResampleScheme::Systematic, rng);
    std::vector<int> counts(5, 0);
    for (auto i : idx) counts[i]++;
    for (int c : counts) EXPECT_EQ(c, 4);
  }
}

TEST(Resample, MultinomialBinomialBound) {
  RngStream rng(4);
  const int n = 100000;
  const auto idx = resample(vec({0.7, 0.3}), n, ResampleScheme::Multinomial, rng);
  double f = 0.0;
  for (auto i : idx) f += i == 0 ? 1.0 : 0.0;
  f /= n;
  EXPECT_NEAR(f, 0.7, 3.0 * std::sqrt(0.21 / n));
}

TEST(Resample, MeanCountsUnbiased) {
  const Vec w = vec({0.05, 0.4, 0.15, 0.3, 0.1});
  const std::size_t k_out = 7;
  const int reps = 10000;
  for (auto scheme : {ResampleScheme::Systematic, ResampleScheme::Multinomial}) {
    RngStream rng(5);
    std::vector<double> total(5, 0.0);
    for (int r = 0; r < reps; ++r) {
      for (auto i : resample(w, k_out, scheme, rng)) total[i] += 1.0;
    }
    for (Index i = 0; i < 5; ++i) {
      const double expect = static_cast<double>(k_out) * w[i];
      // multinomial count variance bounds the stratified one
      const double se = std::sqrt(static_cast<double>(k_out) * w[i] * (1.0 - w[i]) / reps);
      EXPECT_NEAR(total[static_cast<std::size_t>(i)] / reps, expect, 3.0 * se) << "index " << i;
    }
  }
}

TEST(RngStream, DeterministicAndSplit) {
  RngStream a(42), b(42);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a(), b());
  RngStream c(42);
  RngStream s1 = c.split(1), s2 = c.split(2), s1b = c.split(1);
  const auto x1 = s1(), x2 = s2(), x1b = s1b();
  EXPECT_EQ(x1, x1b);
  EXPECT_NE(x1, x2);
  EXPECT_NE(RngStream(1)(), RngStream(2)());
  // splitting does not advance the parent
  RngStream d(42);
  (void)d.split(5);
  EXPECT_EQ(d(), RngStream(42)());
}

TEST(RngStream, UniformAndNormalMoments) {
  RngStream rng(8);
  const int n = 200000;
  double su = 0.0, sn = 0.0, sn2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double u = rng.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    su += u;
    const double z = rng.normal();
    sn += z;
    sn2 += z * z;
  }
  EXPECT_NEAR(su / n, 0.5, 3.0 * std::sqrt(1.0 / 12.0 / n));
  EXPECT_NEAR(sn / n, 0.0, 3.0 / std::sqrt(n));
  EXPECT_NEAR(sn2 / n, 1.0, 3.0 * std::sqrt(2.0 / n));
}

TEST(RngStream, IndexInRange) {
  RngStream rng(9);
  std::vector<int> counts(7, 0);
  for (int i = 0; i < 70000; ++i) counts[rng.index(7)]++;
  for (int c : counts) EXPECT_NEAR(c, 10000, 3.0 * std::sqrt(70000.0 / 7 * 6 / 7));
}

TEST(Gaussian, LogPdfExamples) {
  const GaussianDist std1(vec({0.0}), Mat::Identity(1, 1));
  EXPECT_NEAR(mvn_logpdf(vec({0.0}), std1), -0.5 * std::log(2.0 * std::numbers::pi), 1e-15);
  EXPECT_NEAR(normal_logpdf(0.0, 0.0, 1.0), -0.9189385332046727, 1e-15);

  RngStream rng(21);
  Mat b(3, 3);
  for (Index i = 0; i < 9; ++i) b.data()[i] = rng.normal();
  const Mat cov = b * b.transpose() + Mat::Identity(3, 3);
  const Vec mu = rng.normal_vector(3);
  const auto d = GaussianDist::from_covariance(mu, cov);
  EXPECT_NEAR(mvn_logpdf(mu, d), -0.5 * std::log((2.0 * std::numbers::pi * cov).determinant()), 1e-12);

  // dense inverse oracle
  const Mat inv = cov.inverse();
  for (int rep = 0; rep < 10; ++rep) {
    const Vec z = rng.normal_vector(3) * 2.0;
    const Vec r = z - mu;
    const double direct =
        -0.5 * (3.0 * std::log(2.0 * std::numbers::pi) + std::log(cov.determinant()) + r.dot(inv * r));
    EXPECT_NEAR(mvn_logpdf(z, d), direct, 1e-11);
  }
  EXPECT_THROW(mvn_logpdf(vec({0.0, 1.0}), d), DimensionError);
  EXPECT_LT((d.precision() - inv).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Gaussian, RejectsBadFactor) {
  Mat c(2, 2);
  c << 1.0, 2.0, 2.0, 1.0;
  EXPECT_THROW(GaussianDist::from_covariance(Vec::Zero(2), c), std::invalid_argument);
  EXPECT_THROW(GaussianDist(Vec::Zero(2), Mat::Zero(2, 2)), std::invalid_argument);
  EXPECT_THROW(GaussianDist(Vec::Zero(3), Mat::Identity(2, 2)), DimensionError);
}

TEST(Gaussian, SampleMoments) {
  RngStream rng(31);
  const GaussianDist tiny(vec({1.5, -2.0}), Mat::Identity(2, 2) * 1e-30);
  const Vec s = mvn_sample(tiny, rng);
  EXPECT_NEAR(s[0], 1.5, 1e-20);
  EXPECT_NEAR(s[1], -2.0, 1e-20);

  const GaussianDist sn(Vec::Zero(3), Mat::Identity(3, 3));
  const int n = 100000;
  Vec sum = Vec::Zero(3);
  for (int i = 0; i < n; ++i) sum += mvn_sample(sn, rng);
  for (Index i = 0; i < 3; ++i) EXPECT_LT(std::abs(sum[i] / n), 0.02);

  Mat l(2, 2);
  l << 2.0, 0.0, -1.0, 0.5;
  const GaussianDist g(vec({1.0, 2.0}), l);
  Vec m = Vec::Zero(2);
  Mat c = Mat::Zero(2, 2);
  for (int i = 0; i < n; ++i) {
    const Vec z = mvn_sample(g, rng);
    m += z;
    c += z * z.transpose();
  }
  m /= n;
  c = c / n - m * m.transpose();
  EXPECT_LT((m - g.mean()).cwiseAbs().maxCoeff(), 3.0 * 2.0 / std::sqrt(n));
  EXPECT_LT((c - g.covariance()).cwiseAbs().maxCoeff(), 0.05);

  RngStream r1(77), r2(77);
  EXPECT_EQ(mvn_sample(g, r1), mvn_sample(g, r2));
}
