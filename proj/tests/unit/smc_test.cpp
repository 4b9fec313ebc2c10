#include "smcwake/smc.hpp"

#include <gtest/gtest.h>

#include <nlohmann/json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

using namespace smcwake;

namespace {

Vec v1(double a) { return Vec::Constant(1, a); }

ParticleSystem system_from(const GenerativeModel& m, const Vec& x, const Mat& atoms) {
  ParticleSystem s;
  s.atoms = atoms;
  s.log_prior.resize(atoms.cols());
  s.log_lik.resize(atoms.cols());
  for (Index i = 0; i < atoms.cols(); ++i) {
    s.log_prior[i] = m.prior_logpdf(atoms.col(i));
    s.log_lik[i] = m.log_lik(x, atoms.col(i));
  }
  s.log_weights = Vec::Zero(atoms.cols());
  s.weights = Vec::Constant(atoms.cols(), 1.0 / static_cast<double>(atoms.cols()));
  return s;
}

// plain bisection on a decreasing scalar function
template <class F>
double root(F f, double lo, double hi) {
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    (f(mid) > 0.0 ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

SmcConfig fixed_config(Index k, int temps) {
  SmcConfig c;
  c.particles = k;
  c.schedule = linear_schedule(temps);
  return c;
}

}  // namespace

TEST(Schedule, LinearAndGeometric) {
  const auto l = linear_schedule(10);
  ASSERT_EQ(l.temperatures.size(), 10u);
  EXPECT_EQ(l.temperatures.front(), 0.0);
  EXPECT_EQ(l.temperatures.back(), 1.0);
  EXPECT_NO_THROW(validate(l));
  const auto g = geometric_schedule(6, 1e-3);
  EXPECT_NO_THROW(validate(g));
  EXPECT_NEAR(g.temperatures[1], 1e-3, 1e-15);
  EXPECT_THROW(validate(FixedSchedule{{0.0, 0.5, 0.5, 1.0}}), std::invalid_argument);
  EXPECT_THROW(validate(FixedSchedule{{0.1, 1.0}}), std::invalid_argument);
  EXPECT_THROW(validate(FixedSchedule{{0.0, 0.9}}), std::invalid_argument);
  EXPECT_THROW(linear_schedule(1), std::invalid_argument);
}

TEST(TemperedTarget, EndpointsAndGaussianForm) {
  const ConjugateGaussian1D m;
  const Vec x = v1(3.0);
  EXPECT_EQ(tempered_log_target(m, x, v1(1.2), 0.0), m.prior_logpdf(v1(1.2)));
  EXPECT_DOUBLE_EQ(tempered_log_target(m, x, v1(1.2), 1.0), m.log_joint(x, v1(1.2)));
  // tau = 0.5: precision 1/100 + 0.5, mean 0.5 x / precision
  const double prec = 0.01 + 0.5;
  const double mean = 0.5 * 3.0 / prec;
  auto gauss = [&](double z) { return -0.5 * prec * (z - mean) * (z - mean); };
  for (auto [a, b] : {std::pair{-2.0, 4.0}, std::pair{0.5, 1.5}}) {
    const double d = tempered_log_target(m, x, v1(a), 0.5) - tempered_log_target(m, x, v1(b), 0.5);
    EXPECT_NEAR(d, gauss(a) - gauss(b), 1e-12);
  }
}

TEST(Mutation, VanishingStepLeavesAtoms) {
  const ConjugateGaussian1D m;
  RngStream rng(1);
  const Vec x = v1(2.0);
  auto s = system_from(m, x, prior_sample(m, 50, rng));
  const Mat before = s.atoms;
  (void)mh_mutation_sweep(s, m, x, 0.7, 20, 1e-300, rng);
  EXPECT_EQ(s.atoms, before);
  EXPECT_THROW(mh_mutation_sweep(s, m, x, 0.7, 0, 0.1, rng), std::invalid_argument);
}

TEST(Mutation, PriorTargetMoments) {
  const ConjugateGaussian1D m;
  RngStream rng(2);
  const Index k = 2000;
  const Vec x = v1(5.0);
  auto s = system_from(m, x, Mat::Constant(1, k, 40.0));
  (void)mh_mutation_sweep(s, m, x, 0.0, 300, 10.0, rng);
  const double mean = s.atoms.mean();
  const double var = (s.atoms.array() - mean).square().sum() / (k - 1);
  EXPECT_NEAR(mean, 0.0, 3.0 * 10.0 / std::sqrt(k));
  EXPECT_NEAR(var, 100.0, 3.0 * 100.0 * std::sqrt(2.0 / (k - 1)));
}

TEST(Mutation, PosteriorChainMean) {
  const ConjugateGaussian1D m;
  RngStream rng(3);
  const Index k = 500;
  const Vec x = v1(-6.0);
  auto s = system_from(m, x, prior_sample(m, k, rng));
  const auto st = mh_mutation_sweep(s, m, x, 1.0, 10000, 1.0, rng);
  EXPECT_GT(st.acceptance_rate(), 0.2);
  const double sd = std::sqrt(100.0 / 101.0);
  EXPECT_NEAR(s.atoms.mean(), 100.0 / 101.0 * -6.0, 3.0 * sd / std::sqrt(k));
  // cached likelihoods track the moved atoms
  for (Index i = 0; i < k; ++i) EXPECT_DOUBLE_EQ(s.log_lik[i], m.log_lik(x, s.atoms.col(i)));
}

TEST(Mutation, InvariantOnTemperedGaussian) {
  RngStream rng(4);
  const Mat a = GaussianLinearModel::random_design(4, 2, rng);
  const GaussianLinearModel m(a, 1.0, 1.0);
  const Vec x = m.simulate(m.prior_sample(rng), rng);
  const double tau = 0.3;
  const Mat prec = Mat::Identity(2, 2) + tau * a.transpose() * a;
  const Mat cov = prec.inverse();
  const Vec mean = cov * (tau * a.transpose() * x);
  const auto target = GaussianDist::from_covariance(mean, cov);
  const Index k = 5000;
  Mat start(2, k);
  for (Index i = 0; i < k; ++i) start.col(i) = mvn_sample(target, rng);
  auto s = system_from(m, x, start);
  (void)mh_mutation_sweep(s, m, x, tau, 25, 0.5, rng);
  const Vec mu = s.atoms.rowwise().mean();
  const Mat c = s.atoms.colwise() - mu;
  const Mat emp = c * c.transpose() / (k - 1);
  for (Index i = 0; i < 2; ++i) {
    EXPECT_NEAR(mu[i], mean[i], 3.0 * std::sqrt(cov(i, i) / k));
    EXPECT_NEAR(emp(i, i), cov(i, i), 3.0 * cov(i, i) * std::sqrt(2.0 / (k - 1)));
  }
}

TEST(AdaptiveTempering, ConstantPotential) {
  const ConstantLikelihoodModel m(2, -3.0);
  RngStream rng(5);
  auto s = system_from(m, Vec::Zero(1), prior_sample(m, 40, rng));
  s.temperature = 0.25;
  EXPECT_EQ(solve_next_temperature(s, 20.0), 0.75);
  EXPECT_EQ(solve_next_temperature(s, 40.0), 0.75);
}

TEST(AdaptiveTempering, TwoParticleRoot) {
  ParticleSystem s;
  s.atoms = Mat::Zero(1, 2);
  s.log_lik = Vec(2);
  s.log_lik << 0.0, -std::log(3.0);
  auto ess_of = [](double d) {
    const double a = std::pow(3.0, -d);
    return (1.0 + a) * (1.0 + a) / (1.0 + a * a);
  };
  // the full step gives exactly 1.6
  EXPECT_NEAR(ess_of(1.0), 1.6, 1e-15);
  EXPECT_EQ(solve_next_temperature(s, 1.6 - 1e-12), 1.0);
  for (double target : {1.7, 1.8, 1.95}) {
    const double d = solve_next_temperature(s, target);
    const double oracle = root([&](double t) { return ess_of(t) - target; }, 0.0, 1.0);
    EXPECT_LT(std::abs(ess_of(d) - target), 1e-6 * 2.0);
    EXPECT_NEAR(d, oracle, 1e-5);
    EXPECT_NEAR(incremental_ess(s.log_lik, d), ess_of(d), 1e-12);
  }
}

TEST(AdaptiveTempering, BoundaryClamp) {
  ParticleSystem s;
  s.atoms = Mat::Zero(1, 2);
  s.log_lik = Vec(2);
  s.log_lik << 0.0, -std::log(3.0);
  EXPECT_EQ(solve_next_temperature(s, 2.0), 1e-6);
  s.temperature = 1.0;
  EXPECT_THROW(solve_next_temperature(s, 1.5), std::invalid_argument);
  s.temperature = 0.0;
  EXPECT_THROW(solve_next_temperature(s, 1.0), std::invalid_argument);
  EXPECT_THROW(solve_next_temperature(s, 2.5), std::invalid_argument);
}

TEST(LtSmc, ConstantLikelihoodIsExact) {
  const ConstantLikelihoodModel m(2, -1.7);
  for (bool adaptive : {false, true}) {
    SmcConfig c = fixed_config(500, 6);
    if (adaptive) c.schedule = AdaptiveSchedule{0.5};
    RngStream rng(6);
    const auto rec = lt_smc_run(m, Vec::Zero(1), c, rng);
    EXPECT_NEAR(rec.log_evidence, -1.7, 1e-12);
    const Vec mu = rec.posterior_mean();
    for (Index i = 0; i < 2; ++i) EXPECT_NEAR(mu[i], 0.0, 3.0 / std::sqrt(500.0));
    if (adaptive) {
      EXPECT_EQ(rec.temperatures.size(), 2u);  // one jump to the posterior
    }
  }
}

TEST(LtSmc, RecordInvariants) {
  RngStream rng(7);
  const Mat a = GaussianLinearModel::random_design(10, 5, rng);
  const GaussianLinearModel m(a, 1.0, 1.0);
  const Vec x = m.simulate(m.prior_sample(rng), rng);
  for (auto target : {KernelTarget::Current, KernelTarget::Next}) {
    for (bool adaptive : {false, true}) {
      SmcConfig c = fixed_config(128, 12);
      if (adaptive) c.schedule = AdaptiveSchedule{0.5};
      c.mutation = presets::gaussian_many_vs_one();
      c.mutation.target = target;
      RngStream r = rng.split(adaptive ? 1 : 2);
      const auto rec = lt_smc_run(m, x, c, r);
      EXPECT_TRUE(std::isfinite(rec.log_evidence));
      EXPECT_NEAR(rec.weights.sum(), 1.0, 1e-12);
      EXPECT_TRUE((rec.weights.array() >= 0.0).all());
      EXPECT_EQ(rec.temperatures.front(), 0.0);
      EXPECT_EQ(rec.temperatures.back(), 1.0);
      for (std::size_t t = 1; t < rec.temperatures.size(); ++t) {
        EXPECT_GT(rec.temperatures[t], rec.temperatures[t - 1]);
      }
      EXPECT_EQ(rec.ess_trace.size(), rec.temperatures.size());
      EXPECT_EQ(rec.acceptance_trace.size() + 1, rec.temperatures.size());
      EXPECT_FALSE(rec.stage_cap_hit);
      if (!adaptive) EXPECT_EQ(rec.temperatures.size(), 12u);
    }
  }
}

TEST(LtSmc, BitIdenticalReruns) {
  const ConjugateGaussian1D m;
  SmcConfig c;
  c.particles = 64;
  RngStream a(99), b(99);
  const auto r1 = lt_smc_run(m, v1(4.0), c, a);
  const auto r2 = lt_smc_run(m, v1(4.0), c, b);
  EXPECT_EQ(r1.atoms, r2.atoms);
  EXPECT_EQ(r1.weights, r2.weights);
  EXPECT_EQ(r1.log_evidence, r2.log_evidence);
  RngStream d(100);
  EXPECT_NE(lt_smc_run(m, v1(4.0), c, d).log_evidence, r1.log_evidence);
}

TEST(LtSmc, EvidenceUnbiasedBothKernels) {
  // smaller sibling of the 2000-run acceptance check
  const ConjugateGaussian1D m;
  const Vec x = v1(7.5);
  const double truth = std::exp(m.analytic_log_evidence(x));
  for (auto target : {KernelTarget::Current, KernelTarget::Next}) {
    SmcConfig c = fixed_config(32, 10);
    c.mutation.target = target;
    const int runs = 600;
    RngStream root(11);
    std::vector<double> vals;
    for (int r = 0; r < runs; ++r) {
      RngStream rr = root.split(static_cast<std::uint64_t>(r));
      const auto rec = lt_smc_run(m, x, c, rr);
      ASSERT_GT(std::exp(rec.log_evidence), 0.0);
      vals.push_back(std::exp(rec.log_evidence));
    }
    double mean = 0.0;
    for (double v : vals) mean += v / runs;
    double ss = 0.0;
    for (double v : vals) ss += (v - mean) * (v - mean);
    const double se = std::sqrt(ss / (runs - 1) / runs);
    EXPECT_NEAR(mean, truth, 3.0 * se) << "kernel " << static_cast<int>(target);
  }
}

TEST(LtSmc, PosteriorMeanSmallScale) {
  RngStream rng(12);
  const Mat a = GaussianLinearModel::random_design(6, 3, rng);
  const GaussianLinearModel m(a, 1.0, 1.0);
  const Vec x = m.simulate(m.prior_sample(rng), rng);
  SmcConfig c = fixed_config(1024, 10);
  c.mutation = {10, 0.3, KernelTarget::Current};
  const auto rec = lt_smc_run(m, x, c, rng);
  const auto post = linear_posterior_params(m, x);
  EXPECT_LT((rec.posterior_mean() - post.mean()).cwiseAbs().maxCoeff(), 0.1);
  EXPECT_NEAR(rec.posterior_covariance().trace(), post.covariance().trace(), 0.15 * post.covariance().trace());
}

TEST(LtSmc, CollapseAndStageCap) {
  // zero likelihood everywhere kills every particle at the first increment
  const ConstantLikelihoodModel dead(1, -std::numeric_limits<double>::infinity());
  SmcConfig c = fixed_config(16, 5);
  RngStream rng(13);
  EXPECT_THROW(lt_smc_run(dead, Vec::Zero(1), c, rng), ParticleCollapse);

  RngStream r2(14);
  const Mat a = GaussianLinearModel::random_design(10, 5, r2);
  const GaussianLinearModel m(a, 1.0, 1.0);
  const Vec x = m.simulate(m.prior_sample(r2), r2);
  SmcConfig capped;
  capped.particles = 64;
  capped.max_stages = 3;
  const auto rec = lt_smc_run(m, x, capped, r2);
  EXPECT_TRUE(rec.stage_cap_hit);
  EXPECT_EQ(rec.temperatures.back(), 1.0);
  EXPECT_LE(rec.temperatures.size(), 3u);
  EXPECT_TRUE(std::isfinite(rec.log_evidence));

  SmcConfig bad;
  bad.particles = 1;
  EXPECT_THROW(lt_smc_run(m, x, bad, r2), std::invalid_argument);
}

TEST(Diagnostics, JsonLines) {
  const auto path = (std::filesystem::temp_directory_path() / "smcwake_diag_test.jsonl").string();
  std::filesystem::remove(path);
  const ConjugateGaussian1D m;
  SmcConfig c;
  c.particles = 32;
  RngStream rng(15);
  {
    SmcDiagnosticsWriter w(path);
    for (std::size_t r = 0; r < 3; ++r) w.write(lt_smc_run(m, v1(1.0), c, rng), 4, r);
  }
  std::ifstream in(path);
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j.at("datapoint").get<int>(), 4);
    EXPECT_EQ(j.at("run").get<int>(), n);
    EXPECT_EQ(j.at("temperatures").back().get<double>(), 1.0);
    EXPECT_EQ(j.at("ess").size(), j.at("temperatures").size());
    EXPECT_TRUE(j.contains("log_evidence"));
    ++n;
  }
  EXPECT_EQ(n, 3);
}
