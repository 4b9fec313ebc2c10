#pragma once

// Likelihood-tempered SMC: targets p(z) p(x | z)^tau annealed from the prior
// (tau = 0) to the posterior (tau = 1), random-walk Metropolis-Hastings
// mutation, ESS-gated resampling and the evidence estimate.

#include "smcwake/models.hpp"
#include "smcwake/numkit.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <fstream>
#include <optional>
#include <string>
#include <variant>
#include <vector>

namespace smcwake {

struct FixedSchedule {
  std::vector<double> temperatures;
};

struct AdaptiveSchedule {
  // ESS_min as a fraction of K.
  double ess_min_fraction = 0.5;
};

using TemperSchedule = std::variant<FixedSchedule, AdaptiveSchedule>;

// n temperatures evenly spaced on [0, 1].
inline FixedSchedule linear_schedule(int n) {
  if (n < 2) throw std::invalid_argument("a fixed schedule needs at least two temperatures");
  FixedSchedule s;
  for (int i = 0; i < n; ++i) s.temperatures.push_back(static_cast<double>(i) / (n - 1));
  s.temperatures.back() = 1.0;
  return s;
}

// 0 followed by n - 1 geometrically spaced temperatures ending at 1.
inline FixedSchedule geometric_schedule(int n, double first) {
  if (n < 2 || !(first > 0.0 && first < 1.0)) throw std::invalid_argument("bad geometric schedule");
  FixedSchedule s{{0.0}};
  for (int i = 0; i < n - 1; ++i) {
    s.temperatures.push_back(n == 2 ? 1.0 : first * std::pow(1.0 / first, static_cast<double>(i) / (n - 2)));
  }
  s.temperatures.back() = 1.0;
  return s;
}

inline void validate(const FixedSchedule& s) {
  const auto& t = s.temperatures;
  if (t.size() < 2 || t.front() != 0.0 || t.back() != 1.0) {
    throw std::invalid_argument("fixed schedule must start at 0 and end at 1");
  }
  for (std::size_t i = 1; i < t.size(); ++i) {
    if (!(t[i] > t[i - 1])) throw std::invalid_argument("fixed schedule must be strictly increasing");
  }
}

// Which tempered target the MH kernel leaves invariant at a stage moving
// from tau_t to tau_{t+1}.
enum class KernelTarget {
  // Kernel invariant for gamma_t; resample, move, then weight the moved
  // atoms by p(x | z)^(tau_{t+1} - tau_t).
  Current,
  // Weight the current atoms by the increment, resample, then move with a
  // kernel invariant for gamma_{t+1}.
  Next,
};

struct MutationConfig {
  int steps = 5;
  double step_std = 0.31622776601683794;  // sqrt(0.1)
  KernelTarget target = KernelTarget::Current;
};

struct SmcConfig {
  Index particles = 100;
  TemperSchedule schedule = AdaptiveSchedule{};
  MutationConfig mutation{};
  // Resample when ESS < fraction * K; a value above 1 resamples every stage.
  double resample_ess_fraction = 0.5;
  ResampleScheme scheme = ResampleScheme::Systematic;
  int max_stages = 1000;
  double min_increment = 1e-6;
};

// Named mutation presets.
namespace presets {
inline MutationConfig two_moons() { return {5, 0.1, KernelTarget::Current}; }
inline MutationConfig gaussian_nested() { return {100, 0.01, KernelTarget::Current}; }
inline MutationConfig gaussian_many_vs_one() { return {10, 0.1, KernelTarget::Current}; }
}  // namespace presets

struct ParticleSystem {
  Mat atoms;           // latent_dim x K
  Vec log_prior;       // cached log p(z_i)
  Vec log_lik;         // cached log p(x | z_i)
  Vec log_weights;     // log unnormalized weights
  Vec weights;         // normalized
  double temperature = 0.0;

  [[nodiscard]] Index size() const noexcept { return atoms.cols(); }
};

class ParticleCollapse : public std::runtime_error {
 public:
  ParticleCollapse(int stage, double temperature, long likelihood_evals = 0)
      : std::runtime_error("particle collapse: all weights -inf at stage " + std::to_string(stage) +
                           " (temperature " + std::to_string(temperature) + ")"),
        stage_{stage},
        temperature_{temperature},
        likelihood_evals_{likelihood_evals} {}
  [[nodiscard]] int stage() const noexcept { return stage_; }
  [[nodiscard]] double temperature() const noexcept { return temperature_; }
  // spent by the run before it collapsed
  [[nodiscard]] long likelihood_evals() const noexcept { return likelihood_evals_; }

 private:
  int stage_;
  double temperature_;
  long likelihood_evals_;
};

struct SmcRunRecord {
  Mat atoms;
  Vec weights;
  double log_evidence = 0.0;
  std::vector<double> temperatures;
  std::vector<double> ess_trace;
  std::vector<double> acceptance_trace;
  long likelihood_evals = 0;
  bool stage_cap_hit = false;

  [[nodiscard]] Index size() const noexcept { return atoms.cols(); }
  [[nodiscard]] double final_ess() const { return ess(weights); }
  [[nodiscard]] Vec posterior_mean() const { return atoms * weights; }
  [[nodiscard]] Mat posterior_covariance() const {
    Vec m = posterior_mean();
    Mat c = atoms.colwise() - m;
    return c * weights.asDiagonal() * c.transpose();
  }
};

namespace detail {

inline double tempered(double log_prior, double log_lik, double tau) noexcept {
  if (log_prior == kNegInf) return kNegInf;
  if (tau == 0.0) return log_prior;
  return log_prior + tau * log_lik;
}

}  // namespace detail

// log p(z) + tau * log p(x | z); the likelihood term is dropped at tau = 0.
inline double tempered_log_target(const GenerativeModel& model, const VecRef& x, const VecRef& z, double tau) {
  const double lp = model.prior_logpdf(z);
  if (lp == kNegInf || tau == 0.0) return lp;
  return lp + tau * model.log_lik(x, z);
}

struct SweepStats {
  long proposals = 0;
  long accepted = 0;
  long likelihood_evals = 0;
  [[nodiscard]] double acceptance_rate() const {
    return proposals == 0 ? 0.0 : static_cast<double>(accepted) / static_cast<double>(proposals);
  }
};

// Random-walk MH moves for every atom, leaving p(z) p(x | z)^tau invariant.
// Updates the cached log-prior and log-likelihood of each atom.
inline SweepStats mh_mutation_sweep(ParticleSystem& system, const GenerativeModel& model, const VecRef& x,
                                    double tau, int steps, double step_std, RngStream& rng) {
  if (steps < 1 || !(step_std > 0.0)) throw std::invalid_argument("mh_mutation_sweep: need steps >= 1, step_std > 0");
  SweepStats stats;
  const Index dim = system.atoms.rows();
  Vec proposal(dim);
  for (Index i = 0; i < system.size(); ++i) {
    auto z = system.atoms.col(i);
    double cur = detail::tempered(system.log_prior[i], system.log_lik[i], tau);
    for (int s = 0; s < steps; ++s) {
      for (Index d = 0; d < dim; ++d) proposal[d] = z[d] + step_std * rng.normal();
      ++stats.proposals;
      const double lp = model.prior_logpdf(proposal);
      const double log_u = std::log(rng.uniform_open());
      if (lp == kNegInf) continue;
      const double ll = model.log_lik(x, proposal);
      ++stats.likelihood_evals;
      const double next = detail::tempered(lp, ll, tau);
      if (log_u < next - cur) {
        z = proposal;
        system.log_prior[i] = lp;
        system.log_lik[i] = ll;
        cur = next;
        ++stats.accepted;
      }
    }
  }
  return stats;
}

// ESS of the incremental weights exp(-delta V), V = -log p(x | z).
inline double incremental_ess(const Vec& log_lik, double delta) {
  Vec lw = delta * log_lik;
  for (Index i = 0; i < lw.size(); ++i) {
    if (log_lik[i] == kNegInf) lw[i] = kNegInf;
  }
  double hi = lw.maxCoeff();
  if (hi == kNegInf) return 0.0;
  const Vec e = (lw.array() - hi).exp().matrix();
  return e.sum() * e.sum() / e.squaredNorm();
}

// Bisection for delta in (0, 1 - tau] with ESS(delta) = ess_min.  Returns
// 1 - tau when even the full step keeps ESS >= ess_min and clamps to
// min_increment from below.
inline double solve_next_temperature(const ParticleSystem& system, double ess_min, double min_increment = 1e-6) {
  const double remaining = 1.0 - system.temperature;
  if (!(remaining > 0.0)) throw std::invalid_argument("solve_next_temperature: temperature already at 1");
  const auto k = static_cast<double>(system.size());
  if (!(ess_min > 1.0 && ess_min <= k)) throw std::invalid_argument("ESS_min must lie in (1, K]");
  if (incremental_ess(system.log_lik, remaining) >= ess_min) return remaining;
  // the root is delta = 0 itself
  if (ess_min >= k) return std::min(min_increment, remaining);
  double lo = 0.0;
  double hi = remaining;
  const double tol = 1e-6 * k;
  double mid = hi;
  for (int it = 0; it < 100; ++it) {
    mid = 0.5 * (lo + hi);
    const double e = incremental_ess(system.log_lik, mid);
    if (std::abs(e - ess_min) < tol) break;
    if (e > ess_min) lo = mid;
    else hi = mid;
  }
  return std::clamp(mid, std::min(min_increment, remaining), remaining);
}

// Appends one JSON object per SMC run.
class SmcDiagnosticsWriter {
 public:
  explicit SmcDiagnosticsWriter(const std::string& path) : out_(path, std::ios::app) {
    if (!out_) throw std::runtime_error("cannot open diagnostics file " + path);
  }
  void write(const SmcRunRecord& rec, std::size_t datapoint, std::size_t run) {
    nlohmann::json j{{"datapoint", datapoint},
                     {"run", run},
                     {"temperatures", rec.temperatures},
                     {"ess", rec.ess_trace},
                     {"acceptance", rec.acceptance_trace},
                     {"log_evidence", rec.log_evidence},
                     {"likelihood_evals", rec.likelihood_evals},
                     {"stage_cap_hit", rec.stage_cap_hit}};
    out_ << j.dump() << '\n';
  }

 private:
  std::ofstream out_;
};

namespace detail {

inline void gather(ParticleSystem& sys, const std::vector<std::size_t>& idx) {
  Mat atoms(sys.atoms.rows(), sys.size());
  Vec lp(sys.size());
  Vec ll(sys.size());
  for (std::size_t n = 0; n < idx.size(); ++n) {
    const auto i = static_cast<Index>(idx[n]);
    const auto o = static_cast<Index>(n);
    atoms.col(o) = sys.atoms.col(i);
    lp[o] = sys.log_prior[i];
    ll[o] = sys.log_lik[i];
  }
  sys.atoms = std::move(atoms);
  sys.log_prior = std::move(lp);
  sys.log_lik = std::move(ll);
}

}  // namespace detail

// One run of likelihood-tempered SMC.  log_evidence accumulates, per stage,
// log(sum_i w~_{t+1,i}) - log(sum_i w^_{t,i}) with w^ the carried weights
// (all ones after a resample, the normalized weights otherwise).  Under
// resampling at every stage this is the product of mean incremental weights.
inline SmcRunRecord lt_smc_run(const GenerativeModel& model, const VecRef& x, const SmcConfig& cfg, RngStream& rng) {
  const Index k = cfg.particles;
  if (k < 2) throw std::invalid_argument("lt_smc_run needs K >= 2");
  const FixedSchedule* fixed = std::get_if<FixedSchedule>(&cfg.schedule);
  if (fixed != nullptr) validate(*fixed);
  const double ess_min_adaptive =
      fixed == nullptr ? std::max(1.0 + 1e-9, std::get<AdaptiveSchedule>(cfg.schedule).ess_min_fraction * static_cast<double>(k))
                       : 0.0;
  if (fixed == nullptr && ess_min_adaptive > static_cast<double>(k)) {
    throw std::invalid_argument("adaptive ESS_min fraction must lie in (1/K, 1]");
  }

  RngStream init_rng = rng.split(0);
  ParticleSystem sys;
  sys.atoms = prior_sample(model, k, init_rng);
  sys.log_prior.resize(k);
  sys.log_lik.resize(k);
  for (Index i = 0; i < k; ++i) {
    sys.log_prior[i] = model.prior_logpdf(sys.atoms.col(i));
    sys.log_lik[i] = model.log_lik(x, sys.atoms.col(i));
  }
  sys.log_weights = Vec::Zero(k);
  sys.weights = Vec::Constant(k, 1.0 / static_cast<double>(k));

  SmcRunRecord rec;
  rec.likelihood_evals = k;
  rec.temperatures.push_back(0.0);
  rec.ess_trace.push_back(static_cast<double>(k));
  const double resample_threshold = cfg.resample_ess_fraction * static_cast<double>(k);

  int stage = 0;
  while (sys.temperature < 1.0) {
    RngStream stage_rng = rng.split(static_cast<std::uint64_t>(stage) + 1);
    double next_tau = 1.0;
    if (stage + 2 >= cfg.max_stages) {
      rec.stage_cap_hit = true;
    } else if (fixed != nullptr) {
      next_tau = fixed->temperatures[static_cast<std::size_t>(stage) + 1];
    } else {
      next_tau = sys.temperature + solve_next_temperature(sys, ess_min_adaptive, cfg.min_increment);
      if (next_tau > 1.0 - 1e-12) next_tau = 1.0;
    }
    const double delta = next_tau - sys.temperature;

    auto resample_if_needed = [&]() {
      if (ess(sys.weights) < resample_threshold) {
        detail::gather(sys, resample(sys.weights, static_cast<std::size_t>(k), cfg.scheme, stage_rng));
        sys.weights.setConstant(1.0 / static_cast<double>(k));
        return Vec(Vec::Zero(k));  // log w^ = log 1
      }
      return Vec(sys.weights.array().log().matrix());
    };

    SweepStats sweep;
    Vec log_carried;
    if (cfg.mutation.target == KernelTarget::Current) {
      log_carried = resample_if_needed();
      sweep = mh_mutation_sweep(sys, model, x, sys.temperature, cfg.mutation.steps, cfg.mutation.step_std, stage_rng);
      sys.log_weights = log_carried;
      for (Index i = 0; i < k; ++i) {
        sys.log_weights[i] += sys.log_lik[i] == kNegInf ? kNegInf : delta * sys.log_lik[i];
      }
    } else {
      log_carried = sys.weights.array().log().matrix();
      sys.log_weights = log_carried;
      for (Index i = 0; i < k; ++i) {
        sys.log_weights[i] += sys.log_lik[i] == kNegInf ? kNegInf : delta * sys.log_lik[i];
      }
    }

    double lse = kNegInf;
    try {
      lse = log_sum_exp(sys.log_weights);
    } catch (const EmptyMassError&) {
      throw ParticleCollapse(stage + 1, next_tau, rec.likelihood_evals + sweep.likelihood_evals);
    }
    rec.log_evidence += lse - log_sum_exp(log_carried);
    sys.weights = (sys.log_weights.array() - lse).exp().matrix();
    sys.temperature = next_tau;

    if (cfg.mutation.target == KernelTarget::Next) {
      resample_if_needed();
      sweep = mh_mutation_sweep(sys, model, x, sys.temperature, cfg.mutation.steps, cfg.mutation.step_std, stage_rng);
    }

    rec.likelihood_evals += sweep.likelihood_evals;
    rec.acceptance_trace.push_back(sweep.acceptance_rate());
    rec.temperatures.push_back(sys.temperature);
    rec.ess_trace.push_back(ess(sys.weights));
    ++stage;
  }

  rec.atoms = std::move(sys.atoms);
  rec.weights = std::move(sys.weights);
  return rec;
}

}  // namespace smcwake
