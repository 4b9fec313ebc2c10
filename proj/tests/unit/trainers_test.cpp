#include "smcwake/metrics.hpp"
#include "smcwake/trainers.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

using namespace smcwake;

namespace {

Vec v1(double a) { return Vec::Constant(1, a); }

// Linear 1-D encoder: q(z | x) = N(a x + b, exp(2 s)), jitter off.
FullCovGaussianEncoder linear_encoder(double a, double b, double s) {
  FullCovGaussianEncoder enc(1, 1, {}, 0.0);
  enc.params().setZero();
  enc.params()[enc.trunk().weight_offset(0)] = a;
  enc.params()[enc.trunk().bias_offset(0)] = b;
  enc.params()[enc.trunk().bias_offset(0) + 1] = s;
  return enc;
}

FullCovGaussianEncoder exact_conjugate_encoder() {
  return linear_encoder(100.0 / 101.0, 0.0, 0.5 * std::log(100.0 / 101.0));
}

std::vector<Vec> conjugate_data(std::size_t n, std::uint64_t seed) {
  const ConjugateGaussian1D m;
  RngStream rng(seed);
  std::vector<Vec> data;
  for (std::size_t j = 0; j < n; ++j) data.push_back(m.simulate(m.prior_sample(rng), rng));
  return data;
}

TrainerConfig small_config(Method m, int steps) {
  TrainerConfig c;
  c.method = m;
  c.steps = steps;
  c.batch_size = 4;
  c.learning_rate = 3e-3;
  c.smc.particles = 32;
  c.smc.schedule = linear_schedule(6);
  c.is_particles = 32;
  c.seed = 21;
  return c;
}

const Method kAll[] = {Method::SmcWakeA, Method::SmcWakeB, Method::SmcWakeC, Method::SmcPimhWake,
                       Method::Rws,      Method::DefensiveRws, Method::Msc};

// -E_post[grad log q] for a Gaussian score, exact because the score is
// quadratic in z: average over the two points mean +- sd.
Vec analytic_wake_grad(const Encoder& enc, const VecRef& x, double mean, double sd) {
  Mat zs(1, 2);
  zs << mean - sd, mean + sd;
  return enc.score_grad(x, zs, Vec::Constant(2, -0.5));
}

}  // namespace

TEST(Methods, NamesRoundTrip) {
  for (auto m : kAll) EXPECT_EQ(parse_method(method_name(m)), m);
  EXPECT_EQ(parse_method("smc-wake"), Method::SmcWakeA);
  EXPECT_FALSE(parse_method("wake-sleep").has_value());
}

TEST(Training, ZeroStepsLeavesParameters) {
  const ConjugateGaussian1D m;
  const auto data = conjugate_data(5, 1);
  for (auto method : kAll) {
    FullCovGaussianEncoder enc(1, 1, {4});
    RngStream init(3);
    enc.initialize(init);
    const Vec before = enc.params();
    int calls = 0;
    const auto res = train(small_config(method, 0), m, data, enc, [&](const Encoder&, const TrainProgress& p) {
      EXPECT_EQ(p.step, 0);
      ++calls;
    });
    EXPECT_EQ(enc.params(), before) << method_name(method);
    EXPECT_EQ(res.counters.gradient_steps, 0);
    EXPECT_EQ(calls, 1);
  }
}

TEST(Training, DeterministicPerSeed) {
  const ConjugateGaussian1D m;
  const auto data = conjugate_data(5, 2);
  for (auto method : kAll) {
    auto run = [&](std::uint64_t seed) {
      FullCovGaussianEncoder enc(1, 1, {4});
      RngStream init(4);
      enc.initialize(init);
      auto cfg = small_config(method, 30);
      cfg.seed = seed;
      (void)train(cfg, m, data, enc);
      return Vec(enc.params());
    };
    const Vec a = run(5);
    EXPECT_EQ(a, run(5)) << method_name(method);
    EXPECT_NE(a, run(6)) << method_name(method);
  }
}

TEST(Training, ConjugateSmcWakeLearnsPosterior) {
  const ConjugateGaussian1D m;
  const auto data = conjugate_data(10, 3);
  FullCovGaussianEncoder enc(1, 1, {});
  RngStream init(5);
  enc.initialize(init);
  const double before = amortized_kl_report(enc, m, data).avg_forward;
  auto cfg = small_config(Method::SmcWakeA, 2000);
  cfg.smc.particles = 64;
  cfg.batch_size = 10;
  std::vector<SamplerStore> stores;
  const auto res = smc_wake_train(cfg, m, data, enc, stores);
  const double after = amortized_kl_report(enc, m, data).avg_forward;
  EXPECT_LT(after, 0.1 * before) << before << " -> " << after;
  EXPECT_EQ(res.counters.gradient_steps, 2000);
  EXPECT_GT(res.counters.smc_runs, 2000);
}

TEST(Training, MetricsCallbackCadence) {
  const ConjugateGaussian1D m;
  const auto data = conjugate_data(3, 4);
  FullCovGaussianEncoder enc(1, 1, {});
  auto cfg = small_config(Method::SmcWakeC, 25);
  cfg.metrics_every = 10;
  std::vector<int> seen;
  (void)train(cfg, m, data, enc, [&](const Encoder&, const TrainProgress& p) {
    seen.push_back(p.step);
    EXPECT_TRUE(std::isfinite(p.mean_log_C));
    EXPECT_GT(p.mean_ess, 0.0);
  });
  EXPECT_EQ(seen, (std::vector<int>{0, 10, 20, 25}));
}

TEST(Training, CollapsedSmcRunsAreRedrawn) {
  // two particles from the prior rarely hit the two-moons support
  const TwoMoonsModel m;
  RngStream rng(5);
  std::vector<Vec> data;
  for (int j = 0; j < 3; ++j) data.push_back(m.simulate(m.prior_sample(rng), rng));
  FullCovGaussianEncoder enc(2, 2, {});
  auto cfg = small_config(Method::SmcWakeA, 20);
  cfg.smc.particles = 2;
  const auto res = train(cfg, m, data, enc);
  EXPECT_GT(res.counters.collapsed_runs, 0);
  EXPECT_EQ(res.counters.gradient_steps, 20);

  auto again = small_config(Method::SmcWakeA, 20);
  again.smc.particles = 2;
  FullCovGaussianEncoder enc2(2, 2, {});
  const auto res2 = train(again, m, data, enc2);
  EXPECT_EQ(res2.counters.collapsed_runs, res.counters.collapsed_runs);
  EXPECT_EQ(enc2.params(), enc.params());
}

TEST(Training, CollapseRetriesAreBounded) {
  const ConstantLikelihoodModel dead(1, kNegInf);
  FullCovGaussianEncoder enc(1, 1, {});
  auto cfg = small_config(Method::SmcWakeA, 5);
  cfg.collapse_retries = 3;
  EXPECT_THROW((void)train(cfg, dead, {v1(0.0)}, enc), DatapointError);
}

TEST(Pimh, ConstantEvidenceAcceptsEveryProposal) {
  const ConstantLikelihoodModel m(1, -2.0);
  const std::vector<Vec> data{Vec::Zero(1), Vec::Zero(1)};
  FullCovGaussianEncoder enc(1, 1, {});
  auto cfg = small_config(Method::SmcPimhWake, 50);
  cfg.refresh.count = 2;
  std::vector<PimhChainState> chains;
  const auto res = smc_pimh_wake_train(cfg, m, data, enc, chains);
  EXPECT_EQ(res.counters.pimh_proposals, 100);
  EXPECT_EQ(res.counters.pimh_accepts, 100);
  for (const auto& c : chains) EXPECT_EQ(c.accepted, c.proposed);
}

TEST(Pimh, AcceptanceRateMatchesIndependentRuns) {
  // With C-hat draws c_1..c_N the stationary chain holds c with probability
  // proportional to c, so E[accept] = sum_i sum_k c_i min(1, c_k / c_i) / (N sum_i c_i).
  const ConjugateGaussian1D m;
  const std::vector<Vec> data{v1(14.0)};
  auto cfg = small_config(Method::SmcPimhWake, 4000);
  cfg.smc.particles = 6;
  cfg.smc.schedule = linear_schedule(3);
  cfg.learning_rate = 0.0;
  cfg.sgd = true;
  FullCovGaussianEncoder enc(1, 1, {});
  std::vector<PimhChainState> chains;
  const auto res = smc_pimh_wake_train(cfg, m, data, enc, chains);
  const double rate = static_cast<double>(res.counters.pimh_accepts) / static_cast<double>(res.counters.pimh_proposals);

  RngStream rng(8);
  std::vector<double> lc;
  for (int i = 0; i < 3000; ++i) {
    RngStream r = rng.split(static_cast<std::uint64_t>(i));
    lc.push_back(lt_smc_run(m, data[0], cfg.smc, r).log_evidence);
  }
  const double top = *std::max_element(lc.begin(), lc.end());
  double num = 0.0, den = 0.0;
  for (double a : lc) {
    double inner = 0.0;
    for (double b : lc) inner += std::min(1.0, std::exp(b - a));
    num += std::exp(a - top) * inner / static_cast<double>(lc.size());
    den += std::exp(a - top);
  }
  const double expected = num / den;
  EXPECT_LT(expected, 0.95);  // the check has teeth
  EXPECT_NEAR(rate, expected, 0.05);
}

TEST(Pimh, ChainKeepsHigherEvidence) {
  // a proposal with larger C-hat is always taken
  const ConjugateGaussian1D m;
  const std::vector<Vec> data{v1(3.0)};
  auto cfg = small_config(Method::SmcPimhWake, 1);
  FullCovGaussianEncoder enc(1, 1, {});
  std::vector<PimhChainState> chains{{StoredRun{Mat::Zero(1, 1), Vec::Ones(1), -1e6}, 0, 0}};
  (void)smc_pimh_wake_train(cfg, m, data, enc, chains);
  EXPECT_EQ(chains[0].accepted, 1);
  EXPECT_GT(chains[0].current.log_evidence, -1e6);
  EXPECT_EQ(chains[0].current.atoms.cols(), 32);
}

TEST(Rws, SingleParticleIsNegativeScore) {
  const ConjugateGaussian1D m;
  auto enc = linear_encoder(0.3, 1.0, 0.7);
  const Vec x = v1(2.0);
  RngStream a(9), b(9);
  const auto g = rws_wake_grad(enc, m, x, 1, false, a);
  const Mat z = enc.sample(x, 1, b);
  const Vec want = -enc.score_grad(x, z, Vec::Ones(1));
  EXPECT_LT((g.estimate.grad - want).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_EQ(g.ess, 1.0);
}

TEST(Rws, ExactPosteriorProposalHasZeroMeanGradient) {
  const ConjugateGaussian1D m;
  auto enc = exact_conjugate_encoder();
  const Vec x = v1(-4.0);
  RngStream rng(10);
  const int reps = 400;
  Vec sum = Vec::Zero(enc.param_count()), sq = Vec::Zero(enc.param_count());
  for (int r = 0; r < reps; ++r) {
    const auto g = rws_wake_grad(enc, m, x, 50, false, rng);
    EXPECT_NEAR(g.ess, 50.0, 1e-9);  // weights are all equal
    sum += g.estimate.grad;
    sq += g.estimate.grad.cwiseProduct(g.estimate.grad);
  }
  const Vec mean = sum / reps;
  for (Index i = 0; i < mean.size(); ++i) {
    const double se = std::sqrt(std::max(0.0, sq[i] / reps - mean[i] * mean[i]) / reps);
    EXPECT_NEAR(mean[i], 0.0, 3.0 * se + 1e-12);
  }
}

TEST(Rws, LargeKMatchesAnalyticWakeGradient) {
  const ConjugateGaussian1D m;
  auto enc = linear_encoder(0.8, 0.5, 0.4);
  const Vec x = v1(3.0);
  const Vec want = analytic_wake_grad(enc, x, 100.0 / 101.0 * 3.0, std::sqrt(100.0 / 101.0));
  RngStream rng(11);
  const int reps = 40;
  Vec sum = Vec::Zero(enc.param_count()), sq = Vec::Zero(enc.param_count());
  for (int r = 0; r < reps; ++r) {
    const Vec g = rws_wake_grad(enc, m, x, 5000, false, rng).estimate.grad;
    sum += g;
    sq += g.cwiseProduct(g);
  }
  const Vec mean = sum / reps;
  for (Index i = 0; i < mean.size(); ++i) {
    const double se = std::sqrt(std::max(0.0, sq[i] / reps - mean[i] * mean[i]) / reps);
    EXPECT_NEAR(mean[i], want[i], 3.0 * se + 1e-3 * std::abs(want[i])) << "component " << i;
  }
}

TEST(Rws, DefensiveMixtureSurvivesDisjointProposal) {
  const TwoMoonsModel m;
  FullCovGaussianEncoder enc(2, 2, {});
  enc.params().setZero();
  enc.params().segment(enc.trunk().bias_offset(0), 2).setConstant(50.0);  // far outside the prior box
  Vec x(2);
  x << 0.3, 0.1;
  RngStream rng(12);
  EXPECT_THROW((void)rws_wake_grad(enc, m, x, 20, false, rng), UndefinedGradient);
  const auto g = rws_wake_grad(enc, m, x, 200, true, rng);
  EXPECT_TRUE(g.estimate.grad.allFinite());
  EXPECT_TRUE(std::isfinite(g.log_evidence));
}

TEST(Rws, RetryAndSkipCounters) {
  const TwoMoonsModel m;
  FullCovGaussianEncoder enc(2, 2, {});
  enc.params().setZero();
  enc.params().segment(enc.trunk().bias_offset(0), 2).setConstant(50.0);
  std::vector<Vec> data{Vec::Constant(2, 0.2), Vec::Constant(2, -0.1)};
  auto cfg = small_config(Method::Rws, 3);
  cfg.batch_size = 2;
  cfg.max_retries = 4;
  const Vec before = enc.params();
  const auto res = rws_train(cfg, m, data, enc);
  EXPECT_EQ(res.counters.undefined_gradients, 3 * 2 * 5);
  EXPECT_EQ(res.counters.skipped_gradients, 3 * 2);
  EXPECT_EQ(res.counters.rejected_steps, 3);
  EXPECT_EQ(res.counters.gradient_steps, 0);
  EXPECT_EQ(enc.params(), before);
}

TEST(Msc, SingleParticleNeverMoves) {
  const ConjugateGaussian1D m;
  auto enc = linear_encoder(0.5, 0.0, 0.0);
  const Vec x = v1(1.0);
  Vec state = v1(-0.75);
  RngStream rng(13);
  for (int t = 0; t < 50; ++t) {
    const auto r = msc_step(enc, m, x, state, 1, rng);
    EXPECT_FALSE(r.moved);
    state = r.state;
  }
  EXPECT_EQ(state[0], -0.75);
}

TEST(Msc, ExactProposalChainTargetsPosterior) {
  const ConjugateGaussian1D m;
  auto enc = exact_conjugate_encoder();
  const Vec x = v1(5.0);
  RngStream rng(14);
  Vec state = v1(30.0);
  const int burn = 200, n = 20000;
  double s = 0.0, ss = 0.0;
  for (int t = 0; t < burn + n; ++t) {
    state = msc_step(enc, m, x, state, 8, rng).state;
    if (t >= burn) {
      s += state[0];
      ss += state[0] * state[0];
    }
  }
  const double mean = s / n;
  const double var = ss / n - mean * mean;
  const double post_var = 100.0 / 101.0;
  // successive states are correlated only through the retained particle (prob 1/8)
  EXPECT_NEAR(mean, 100.0 / 101.0 * 5.0, 4.0 * std::sqrt(post_var / n * 1.3));
  EXPECT_NEAR(var, post_var, 0.05);
}

TEST(Msc, PoorProposalMovesLess) {
  const ConjugateGaussian1D m;
  const Vec x = v1(5.0);
  auto good = exact_conjugate_encoder();
  auto poor = linear_encoder(0.0, -3.0, 1.5);
  std::vector<Vec> data{x};
  auto cfg = small_config(Method::Msc, 2000);
  cfg.learning_rate = 0.0;
  cfg.sgd = true;
  cfg.is_particles = 10;
  std::vector<Vec> s1, s2;
  const auto r1 = msc_train(cfg, m, data, good, s1);
  const auto r2 = msc_train(cfg, m, data, poor, s2);
  EXPECT_EQ(r1.counters.msc_steps, 2000);
  const double rate_good = static_cast<double>(r1.counters.msc_moves) / 2000.0;
  const double rate_poor = static_cast<double>(r2.counters.msc_moves) / 2000.0;
  EXPECT_NEAR(rate_good, 0.9, 0.03);  // exact q: P(move) = (K - 1) / K
  EXPECT_LT(rate_poor, rate_good - 0.1);
}

TEST(Msc, WeightedGradientUsesAllParticles) {
  const ConjugateGaussian1D m;
  auto enc = linear_encoder(0.2, 0.1, 0.3);
  const Vec x = v1(1.5);
  RngStream a(15);
  const auto r = msc_step(enc, m, x, v1(0.0), 1, a, true);
  // K = 1: weighted and unweighted agree
  RngStream b(15);
  const auto u = msc_step(enc, m, x, v1(0.0), 1, b, false);
  EXPECT_LT((r.estimate.grad - u.estimate.grad).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Surrogate, UniformProposalGivesLogWidth) {
  const ConjugateGaussian1D m;
  RngStream rng(16);
  for (double delta : {0.01, 0.5, 3.0}) {
    const auto r = surrogate_objective(uniform_proposal(v1(0.0), v1(delta)), m, v1(1.0), 100, 5, rng);
    EXPECT_NEAR(r.mean, std::log(delta), 1e-12);
    EXPECT_NEAR(r.replicate_sd, 0.0, 1e-12);
  }
  EXPECT_THROW((void)uniform_proposal(v1(1.0), v1(1.0)), std::invalid_argument);
}

TEST(Surrogate, PosteriorProposalNearEntropy) {
  const ConjugateGaussian1D m;
  const double x = 2.0;
  const double var = 100.0 / 101.0;
  const auto q = gaussian_proposal(GaussianDist::from_covariance(v1(var * x), Mat::Constant(1, 1, var)));
  RngStream rng(17);
  const auto r = surrogate_objective(q, m, v1(x), 10000, 20, rng);
  const double entropy = 0.5 * std::log(2.0 * std::numbers::pi * std::numbers::e * var);
  EXPECT_NEAR(r.mean, entropy, 4.0 * r.se_mean + 1e-3);
  EXPECT_LT(r.replicate_sd, 0.05);
  EXPECT_NEAR(r.se_mean, r.replicate_sd / std::sqrt(20.0), 1e-15);
}

TEST(Surrogate, DeterministicAndDropsDegenerateBatches) {
  const ConjugateGaussian1D m;
  const auto q = gaussian_proposal(GaussianDist::from_covariance(v1(0.0), Mat::Constant(1, 1, 1e-8)));
  RngStream a(18), b(18);
  const auto r1 = surrogate_objective(q, m, v1(1.0), 50, 4, a);
  const auto r2 = surrogate_objective(q, m, v1(1.0), 50, 4, b);
  EXPECT_EQ(r1.mean, r2.mean);
  EXPECT_EQ(r1.replicates, 4);

  const TwoMoonsModel tm;
  const auto off = uniform_proposal(Vec::Constant(2, 5.0), Vec::Constant(2, 6.0));
  EXPECT_THROW((void)surrogate_objective(off, tm, Vec::Zero(2), 10, 3, a), std::runtime_error);
}
