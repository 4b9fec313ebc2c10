#pragma once

// Training loops: SMC-Wake over sampler stores, the PIMH variant, wake-phase
// RWS (plain and defensive), Markovian score climbing with a CIS kernel, and
// the stop-gradient surrogate evaluator used for the peaked-proposal study.

#include "smcwake/encoder.hpp"
#include "smcwake/estimators.hpp"
#include "smcwake/models.hpp"
#include "smcwake/numkit.hpp"
#include "smcwake/smc.hpp"

#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace smcwake {

enum class Method { SmcWakeA, SmcWakeB, SmcWakeC, SmcPimhWake, Rws, DefensiveRws, Msc };

inline constexpr std::string_view method_name(Method m) {
  switch (m) {
    case Method::SmcWakeA: return "smc-wake-a";
    case Method::SmcWakeB: return "smc-wake-b";
    case Method::SmcWakeC: return "smc-wake-c";
    case Method::SmcPimhWake: return "smc-pimh-wake";
    case Method::Rws: return "rws";
    case Method::DefensiveRws: return "defensive-rws";
    case Method::Msc: return "msc";
  }
  return "?";
}

inline std::optional<Method> parse_method(std::string_view s) {
  for (auto m : {Method::SmcWakeA, Method::SmcWakeB, Method::SmcWakeC, Method::SmcPimhWake, Method::Rws,
                 Method::DefensiveRws, Method::Msc}) {
    if (s == method_name(m)) return m;
  }
  if (s == "smc-wake") return Method::SmcWakeA;
  return std::nullopt;
}

inline bool uses_smc(Method m) {
  return m == Method::SmcWakeA || m == Method::SmcWakeB || m == Method::SmcWakeC || m == Method::SmcPimhWake;
}

// Which datapoints get a fresh LT-SMC run, and when.
enum class RefreshKind {
  RoundRobin,  // `count` consecutive datapoints, cyclic, random start
  Random,      // `count` datapoints drawn uniformly without replacement
  Minibatch,   // every datapoint of the current minibatch
  None,        // stores are only filled before training
};

struct RefreshPolicy {
  RefreshKind kind = RefreshKind::RoundRobin;
  int count = 1;
  // Refresh on steps divisible by `every`.
  int every = 1;
  // LT-SMC runs per datapoint before the first gradient step (>= 1).
  int prefill_runs = 1;
};

struct TrainerConfig {
  Method method = Method::SmcWakeA;
  int steps = 1000;
  int batch_size = 10;
  double learning_rate = 1e-3;
  bool sgd = false;
  SmcConfig smc{};
  // Particle count for the importance-sampling baselines (RWS, MSC).
  Index is_particles = 100;
  RefreshPolicy refresh{};
  // Full stores with more runs than this draw M* = mstar records per step
  // in proportion to C-hat; smaller stores use every record.  0 disables.
  std::size_t mstar = 16;
  // M' > 0 replaces the evidence weighting by an evenly weighted uniform
  // subset of M' records (M' = 1 is the naive single-sampler estimator).
  std::size_t subset = 0;
  // Rolling window for the latest-record estimator.
  std::size_t window = 1;
  int metrics_every = 100;
  int max_retries = 10;
  // LT-SMC runs with no particle in the likelihood's support are cheap (they
  // stop at the first reweighting), so they get a much larger budget.
  int collapse_retries = 1000;
  // MSC gradient as the weighted sum over all CIS particles.
  bool msc_weighted = false;
  std::uint64_t seed = 0;
};

inline StoreMode store_mode_for(Method m) {
  switch (m) {
    case Method::SmcWakeB: return StoreMode::SingleAtom;
    case Method::SmcWakeC: return StoreMode::Latest;
    default: return StoreMode::Full;
  }
}

struct TrainCounters {
  long likelihood_evals = 0;
  long gradient_steps = 0;
  long rejected_steps = 0;      // optimizer refused a non-finite gradient
  long undefined_gradients = 0; // SNIS attempts with no finite weight
  long skipped_gradients = 0;   // datapoints dropped after max_retries
  long smc_runs = 0;
  long stage_cap_hits = 0;
  long collapsed_runs = 0;      // LT-SMC runs redrawn after total collapse
  long pimh_proposals = 0;
  long pimh_accepts = 0;
  long msc_steps = 0;
  long msc_moves = 0;
};

// What the metrics callback sees.  mean_log_C and mean_ess describe the
// most recent sampler output per datapoint (LT-SMC record, PIMH state or
// SNIS batch); NaN until every datapoint has one.
struct TrainProgress {
  int step = 0;
  double mean_log_C = 0.0;
  double mean_ess = 0.0;
  const TrainCounters* counters = nullptr;
};

using MetricsCallback = std::function<void(const Encoder&, const TrainProgress&)>;

class DatapointError : public std::runtime_error {
 public:
  DatapointError(std::size_t j, const std::string& what)
      : std::runtime_error("datapoint " + std::to_string(j) + ": " + what), datapoint_{j} {}
  [[nodiscard]] std::size_t datapoint() const noexcept { return datapoint_; }

 private:
  std::size_t datapoint_;
};

class UndefinedGradient : public std::runtime_error {
 public:
  UndefinedGradient() : std::runtime_error("every importance weight is zero; gradient undefined") {}
};

// Named sub-streams of the run seed.
namespace streams {
inline constexpr std::uint64_t kSmc = 1;
inline constexpr std::uint64_t kBatch = 2;
inline constexpr std::uint64_t kImportance = 3;
inline constexpr std::uint64_t kRefresh = 4;
inline constexpr std::uint64_t kStore = 5;
inline constexpr std::uint64_t kChainInit = 6;
inline constexpr std::uint64_t kPimh = 7;
inline constexpr std::uint64_t kEstimate = 8;
}  // namespace streams

//-----------------------------------------------------------------------------
// Importance-sampling gradients

struct SnisGradient {
  GradientEstimate estimate;
  double log_evidence = 0.0;  // log mean unnormalized weight
  double ess = 0.0;
};

// Wake-phase SNIS gradient, -sum_i w_i grad log q(z_i | x), with weights
// p(z, x) / proposal(z) treated as constants.  The defensive proposal is
// the mixture (p(z) + q(z | x)) / 2.
inline SnisGradient rws_wake_grad(const Encoder& enc, const GenerativeModel& model, const VecRef& x, Index k,
                                  bool defensive, RngStream& rng, long* likelihood_evals = nullptr) {
  if (k < 1) throw std::invalid_argument("rws_wake_grad needs K >= 1");
  Mat zs(enc.latent_dim(), k);
  if (!defensive) {
    zs = enc.sample(x, k, rng);
  } else {
    const Mat from_q = enc.sample(x, k, rng);
    for (Index i = 0; i < k; ++i) zs.col(i) = rng.uniform() < 0.5 ? model.prior_sample(rng) : Vec(from_q.col(i));
  }
  const Vec log_q = enc.log_prob_batch(x, zs);
  Vec lw(k);
  for (Index i = 0; i < k; ++i) {
    const double joint = model.log_joint(x, zs.col(i));
    double log_prop = log_q[i];
    if (defensive) log_prop = log_add_exp(model.prior_logpdf(zs.col(i)), log_q[i]) - std::log(2.0);
    lw[i] = joint == kNegInf ? kNegInf : joint - log_prop;
    if (std::isnan(lw[i])) lw[i] = kNegInf;
  }
  if (likelihood_evals != nullptr) *likelihood_evals += k;
  Normalized nw = [&] {
    try {
      return normalize(lw);
    } catch (const EmptyMassError&) {
      throw UndefinedGradient{};
    }
  }();
  SnisGradient out;
  out.estimate.grad = enc.score_grad(x, zs, -nw.weights.values);
  out.estimate.label = defensive ? "defensive-snis" : "snis";
  out.estimate.runs_used = 1;
  out.log_evidence = nw.log_normalizer;
  out.ess = ess(nw.weights);
  return out;
}

struct MscStepResult {
  Vec state;
  GradientEstimate estimate;
  bool moved = false;
  double log_evidence = 0.0;
  double ess = 0.0;
};

// One conditional-importance-sampling step: the current state is particle
// 0, K - 1 fresh particles come from q(. | x), the new state is drawn from
// the normalized weights.  Gradient at the new state (or, weighted, over
// all K particles).
inline MscStepResult msc_step(const Encoder& enc, const GenerativeModel& model, const VecRef& x, const VecRef& state,
                              Index k, RngStream& rng, bool weighted = false, long* likelihood_evals = nullptr) {
  if (k < 1) throw std::invalid_argument("msc_step needs K >= 1");
  Mat zs(enc.latent_dim(), k);
  zs.col(0) = state;
  if (k > 1) zs.rightCols(k - 1) = enc.sample(x, k - 1, rng);
  const Vec log_q = enc.log_prob_batch(x, zs);
  Vec lw(k);
  for (Index i = 0; i < k; ++i) {
    const double joint = model.log_joint(x, zs.col(i));
    lw[i] = joint == kNegInf ? kNegInf : joint - log_q[i];
    if (std::isnan(lw[i])) lw[i] = kNegInf;
  }
  if (likelihood_evals != nullptr) *likelihood_evals += k;
  Normalized nw = [&] {
    try {
      return normalize(lw);
    } catch (const EmptyMassError&) {
      throw UndefinedGradient{};
    }
  }();
  const auto pick = static_cast<Index>(resample(nw.weights.values, 1, ResampleScheme::Multinomial, rng)[0]);
  MscStepResult out;
  out.state = zs.col(pick);
  out.moved = pick != 0;
  out.log_evidence = nw.log_normalizer;
  out.ess = ess(nw.weights);
  if (weighted) {
    out.estimate.grad = enc.score_grad(x, zs, -nw.weights.values);
  } else {
    out.estimate.grad = enc.score_grad(x, out.state, -Vec::Ones(1));
  }
  out.estimate.label = weighted ? "msc-weighted" : "msc";
  out.estimate.runs_used = 1;
  return out;
}

//-----------------------------------------------------------------------------
// Training loops

struct PimhChainState {
  StoredRun current;  // atoms, weights and log C-hat of the accepted run
  long accepted = 0;
  long proposed = 0;
};

struct TrainResult {
  TrainCounters counters;
  std::vector<double> last_log_C;
  std::vector<double> last_ess;
};

namespace detail {

inline std::vector<std::size_t> draw_minibatch(std::size_t n, int batch, RngStream rng) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  const std::size_t b = batch <= 0 ? n : std::min<std::size_t>(n, static_cast<std::size_t>(batch));
  for (std::size_t i = 0; i < b; ++i) std::swap(idx[i], idx[i + rng.index(n - i)]);
  idx.resize(b);
  return idx;
}

inline double mean_or_nan(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) {
    if (std::isnan(x)) return std::numeric_limits<double>::quiet_NaN();
    s += x;
  }
  return v.empty() ? std::numeric_limits<double>::quiet_NaN() : s / static_cast<double>(v.size());
}

// Shared bookkeeping for every training loop.
class LoopContext {
 public:
  LoopContext(const TrainerConfig& cfg, const GenerativeModel& model, const std::vector<Vec>& data, Encoder& enc,
              const MetricsCallback& cb, SmcDiagnosticsWriter* diag)
      : cfg_{cfg}, model_{model}, data_{data}, enc_{enc}, cb_{cb}, diag_{diag}, root_{cfg.seed},
        opt_{cfg.sgd ? AdamState::plain_sgd(enc.param_count(), cfg.learning_rate)
                     : AdamState::adam(enc.param_count(), cfg.learning_rate)},
        run_index_(data.size(), 0) {
    result_.last_log_C.assign(data.size(), std::numeric_limits<double>::quiet_NaN());
    result_.last_ess.assign(data.size(), std::numeric_limits<double>::quiet_NaN());
    if (data.empty()) throw std::invalid_argument("training needs at least one datapoint");
    if (cfg.steps < 0) throw std::invalid_argument("steps must be nonnegative");
    const auto n = data.size();
    cursor_ = root_.split(streams::kRefresh).index(n);
  }

  [[nodiscard]] std::size_t n() const { return data_.size(); }
  [[nodiscard]] const TrainerConfig& cfg() const { return cfg_; }
  [[nodiscard]] const RngStream& root() const { return root_; }
  TrainResult& result() { return result_; }

  // A run whose particles all land outside the likelihood's support is
  // redrawn on the next stream, up to collapse_retries times.
  SmcRunRecord run_smc(std::size_t j) {
    SmcRunRecord rec;
    for (int attempt = 0;; ++attempt) {
      const auto m = run_index_[j]++;
      RngStream rng = root_.split(streams::kSmc).split(j).split(m);
      try {
        rec = lt_smc_run(model_, data_[j], cfg_.smc, rng);
        break;
      } catch (const ParticleCollapse& e) {
        result_.counters.collapsed_runs++;
        result_.counters.likelihood_evals += e.likelihood_evals();
        if (attempt >= cfg_.collapse_retries) throw DatapointError(j, e.what());
      }
    }
    const auto m = run_index_[j] - 1;
    result_.counters.smc_runs++;
    result_.counters.likelihood_evals += rec.likelihood_evals;
    if (rec.stage_cap_hit) result_.counters.stage_cap_hits++;
    if (diag_ != nullptr) diag_->write(rec, j, m);
    return rec;
  }

  [[nodiscard]] std::uint64_t runs_so_far(std::size_t j) const { return run_index_[j]; }

  void note_sampler(std::size_t j, double log_c, double ess_value) {
    result_.last_log_C[j] = log_c;
    result_.last_ess[j] = ess_value;
  }

  std::vector<std::size_t> minibatch(int step) const {
    return draw_minibatch(n(), cfg_.batch_size, root_.split(streams::kBatch).split(static_cast<std::uint64_t>(step)));
  }

  // Datapoints to refresh at `step`, given that step's minibatch.
  std::vector<std::size_t> refresh_targets(int step, const std::vector<std::size_t>& batch) {
    const auto& p = cfg_.refresh;
    if (p.kind == RefreshKind::None || p.every <= 0 || step % p.every != 0) return {};
    const std::size_t count = std::min<std::size_t>(n(), static_cast<std::size_t>(std::max(p.count, 1)));
    switch (p.kind) {
      case RefreshKind::RoundRobin: {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < count; ++i) {
          out.push_back(cursor_);
          cursor_ = (cursor_ + 1) % n();
        }
        return out;
      }
      case RefreshKind::Random:
        return draw_minibatch(n(), static_cast<int>(count),
                              root_.split(streams::kRefresh).split(static_cast<std::uint64_t>(step)));
      case RefreshKind::Minibatch:
        return batch;
      case RefreshKind::None:
        break;
    }
    return {};
  }

  // Averages the per-datapoint gradients and steps the optimizer.
  void apply(const std::vector<Vec>& grads) {
    if (grads.empty()) {
      result_.counters.rejected_steps++;
      return;
    }
    Vec g = Vec::Zero(enc_.param_count());
    for (const auto& gi : grads) g += gi;
    g /= static_cast<double>(grads.size());
    try {
      adam_step(opt_, enc_.params(), g);
      result_.counters.gradient_steps++;
    } catch (const NonFiniteGradient&) {
      result_.counters.rejected_steps++;
    }
  }

  void emit(int step) {
    if (!cb_) return;
    const bool due = step == 0 || step == cfg_.steps || (cfg_.metrics_every > 0 && step % cfg_.metrics_every == 0);
    if (!due) return;
    TrainProgress p{step, mean_or_nan(result_.last_log_C), mean_or_nan(result_.last_ess), &result_.counters};
    cb_(enc_, p);
  }

 private:
  const TrainerConfig& cfg_;
  const GenerativeModel& model_;
  const std::vector<Vec>& data_;
  Encoder& enc_;
  const MetricsCallback& cb_;
  SmcDiagnosticsWriter* diag_;
  RngStream root_;
  AdamState opt_;
  std::vector<std::uint64_t> run_index_;
  std::size_t cursor_ = 0;
  TrainResult result_;
};

}  // namespace detail

// Alg.-1 style training over per-datapoint sampler stores.  `stores` is
// resized to the dataset and filled with prefill_runs runs per datapoint
// when empty.
inline TrainResult smc_wake_train(const TrainerConfig& cfg, const GenerativeModel& model, const std::vector<Vec>& data,
                                  Encoder& enc, std::vector<SamplerStore>& stores, const MetricsCallback& cb = {},
                                  SmcDiagnosticsWriter* diag = nullptr) {
  detail::LoopContext ctx(cfg, model, data, enc, cb, diag);
  const StoreMode mode = store_mode_for(cfg.method);
  if (stores.size() != data.size()) stores.assign(data.size(), SamplerStore(mode, cfg.window));

  auto refresh = [&](std::size_t j) {
    const auto m = ctx.runs_so_far(j);
    SmcRunRecord rec = ctx.run_smc(j);
    RngStream srng = ctx.root().split(streams::kStore).split(j).split(m);
    ctx.note_sampler(j, rec.log_evidence, rec.final_ess());
    stores[j].append(rec, srng);
  };
  for (std::size_t j = 0; j < data.size(); ++j) {
    if (!stores[j].empty()) continue;
    for (int m = 0; m < std::max(cfg.refresh.prefill_runs, 1); ++m) refresh(j);
  }
  ctx.emit(0);

  for (int step = 1; step <= cfg.steps; ++step) {
    const auto batch = ctx.minibatch(step);
    for (auto j : ctx.refresh_targets(step, batch)) refresh(j);
    std::vector<Vec> grads;
    for (auto j : batch) {
      RngStream erng = ctx.root().split(streams::kEstimate).split(static_cast<std::uint64_t>(step)).split(j);
      const SamplerStore& s = stores[j];
      GradientEstimate g;
      if (cfg.subset > 0 && s.mode() == StoreMode::Full) {
        g = grad_estimate_subsampled(s, enc, data[j], cfg.subset, SubsampleMode::UniformSubset, erng);
      } else if (s.mode() == StoreMode::Full && cfg.mstar > 0 && s.records().size() > cfg.mstar) {
        g = grad_estimate_subsampled(s, enc, data[j], cfg.mstar, SubsampleMode::EvidenceProportional, erng);
      } else if (s.mode() == StoreMode::Full) {
        g = grad_estimate_a(s, enc, data[j]);
      } else if (s.mode() == StoreMode::SingleAtom) {
        g = grad_estimate_b(s, enc, data[j]);
      } else {
        g = grad_estimate_c(s, enc, data[j]);
      }
      grads.push_back(std::move(g.grad));
    }
    ctx.apply(grads);
    ctx.emit(step);
  }
  return std::move(ctx.result());
}

// Alg.-2 style training: each datapoint carries one accepted LT-SMC run;
// a fresh run replaces it with probability min(1, C_new / C_current).
inline TrainResult smc_pimh_wake_train(const TrainerConfig& cfg, const GenerativeModel& model,
                                       const std::vector<Vec>& data, Encoder& enc, std::vector<PimhChainState>& chains,
                                       const MetricsCallback& cb = {}, SmcDiagnosticsWriter* diag = nullptr) {
  detail::LoopContext ctx(cfg, model, data, enc, cb, diag);
  if (chains.size() != data.size()) {
    chains.clear();
    for (std::size_t j = 0; j < data.size(); ++j) {
      SmcRunRecord rec = ctx.run_smc(j);
      ctx.note_sampler(j, rec.log_evidence, rec.final_ess());
      chains.push_back({StoredRun{std::move(rec.atoms), std::move(rec.weights), rec.log_evidence}, 0, 0});
    }
  }
  ctx.emit(0);

  for (int step = 1; step <= cfg.steps; ++step) {
    const auto batch = ctx.minibatch(step);
    for (auto j : ctx.refresh_targets(step, batch)) {
      const auto m = ctx.runs_so_far(j);
      SmcRunRecord rec = ctx.run_smc(j);
      RngStream arng = ctx.root().split(streams::kPimh).split(j).split(m);
      auto& ch = chains[j];
      ch.proposed++;
      ctx.result().counters.pimh_proposals++;
      const double log_ratio = rec.log_evidence - ch.current.log_evidence;
      if (log_ratio >= 0.0 || std::log(arng.uniform_open()) < log_ratio) {
        ch.current = StoredRun{std::move(rec.atoms), std::move(rec.weights), rec.log_evidence};
        ch.accepted++;
        ctx.result().counters.pimh_accepts++;
      }
      ctx.note_sampler(j, ch.current.log_evidence, ess(ch.current.weights));
    }
    std::vector<Vec> grads;
    for (auto j : batch) {
      const auto& cur = chains[j].current;
      grads.push_back(enc.score_grad(data[j], cur.atoms, -cur.weights));
    }
    ctx.apply(grads);
    ctx.emit(step);
  }
  return std::move(ctx.result());
}

// Wake-phase training with q (or the defensive mixture) as its own
// proposal.  Undefined SNIS gradients are redrawn up to max_retries times,
// after which the datapoint is left out of that step.
inline TrainResult rws_train(const TrainerConfig& cfg, const GenerativeModel& model, const std::vector<Vec>& data,
                             Encoder& enc, const MetricsCallback& cb = {}) {
  detail::LoopContext ctx(cfg, model, data, enc, cb, nullptr);
  const bool defensive = cfg.method == Method::DefensiveRws;
  ctx.emit(0);
  for (int step = 1; step <= cfg.steps; ++step) {
    const auto batch = ctx.minibatch(step);
    std::vector<Vec> grads;
    for (auto j : batch) {
      RngStream base = ctx.root().split(streams::kImportance).split(static_cast<std::uint64_t>(step)).split(j);
      for (int attempt = 0; attempt <= cfg.max_retries; ++attempt) {
        RngStream rng = base.split(static_cast<std::uint64_t>(attempt));
        try {
          auto g = rws_wake_grad(enc, model, data[j], cfg.is_particles, defensive, rng,
                                 &ctx.result().counters.likelihood_evals);
          ctx.note_sampler(j, g.log_evidence, g.ess);
          grads.push_back(std::move(g.estimate.grad));
          break;
        } catch (const UndefinedGradient&) {
          ctx.result().counters.undefined_gradients++;
          if (attempt == cfg.max_retries) ctx.result().counters.skipped_gradients++;
        }
      }
    }
    ctx.apply(grads);
    ctx.emit(step);
  }
  return std::move(ctx.result());
}

// Markovian score climbing: one CIS step per datapoint each time it is in
// the minibatch.  `states` holds the chain positions (drawn from the prior
// when empty).
inline TrainResult msc_train(const TrainerConfig& cfg, const GenerativeModel& model, const std::vector<Vec>& data,
                             Encoder& enc, std::vector<Vec>& states, const MetricsCallback& cb = {}) {
  detail::LoopContext ctx(cfg, model, data, enc, cb, nullptr);
  if (states.size() != data.size()) {
    states.clear();
    for (std::size_t j = 0; j < data.size(); ++j) {
      RngStream r = ctx.root().split(streams::kChainInit).split(j);
      states.push_back(model.prior_sample(r));
    }
  }
  ctx.emit(0);
  for (int step = 1; step <= cfg.steps; ++step) {
    const auto batch = ctx.minibatch(step);
    std::vector<Vec> grads;
    for (auto j : batch) {
      RngStream base = ctx.root().split(streams::kImportance).split(static_cast<std::uint64_t>(step)).split(j);
      for (int attempt = 0; attempt <= cfg.max_retries; ++attempt) {
        RngStream rng = base.split(static_cast<std::uint64_t>(attempt));
        try {
          auto r = msc_step(enc, model, data[j], states[j], cfg.is_particles, rng, cfg.msc_weighted,
                            &ctx.result().counters.likelihood_evals);
          states[j] = std::move(r.state);
          ctx.result().counters.msc_steps++;
          if (r.moved) ctx.result().counters.msc_moves++;
          ctx.note_sampler(j, r.log_evidence, r.ess);
          grads.push_back(std::move(r.estimate.grad));
          break;
        } catch (const UndefinedGradient&) {
          ctx.result().counters.undefined_gradients++;
          if (attempt == cfg.max_retries) ctx.result().counters.skipped_gradients++;
        }
      }
    }
    ctx.apply(grads);
    ctx.emit(step);
  }
  return std::move(ctx.result());
}

// Dispatches on cfg.method with freshly initialised stores or chains.
inline TrainResult train(const TrainerConfig& cfg, const GenerativeModel& model, const std::vector<Vec>& data,
                         Encoder& enc, const MetricsCallback& cb = {}, SmcDiagnosticsWriter* diag = nullptr) {
  switch (cfg.method) {
    case Method::SmcWakeA:
    case Method::SmcWakeB:
    case Method::SmcWakeC: {
      std::vector<SamplerStore> stores;
      return smc_wake_train(cfg, model, data, enc, stores, cb, diag);
    }
    case Method::SmcPimhWake: {
      std::vector<PimhChainState> chains;
      return smc_pimh_wake_train(cfg, model, data, enc, chains, cb, diag);
    }
    case Method::Rws:
    case Method::DefensiveRws:
      return rws_train(cfg, model, data, enc, cb);
    case Method::Msc: {
      std::vector<Vec> states;
      return msc_train(cfg, model, data, enc, states, cb);
    }
  }
  throw std::logic_error("unknown method");
}

//-----------------------------------------------------------------------------
// Surrogate objective

// An explicit proposal density with a sampler.
struct Proposal {
  std::function<Vec(RngStream&)> sample;
  std::function<double(const VecRef&)> log_density;
};

inline Proposal gaussian_proposal(GaussianDist d) {
  auto shared = std::make_shared<GaussianDist>(std::move(d));
  return {[shared](RngStream& rng) { return mvn_sample(*shared, rng); },
          [shared](const VecRef& z) { return mvn_logpdf(z, *shared); }};
}

// Uniform on the box [lo, hi] (one interval per coordinate).
inline Proposal uniform_proposal(Vec lo, Vec hi) {
  if (lo.size() != hi.size() || !((hi - lo).array() > 0.0).all()) throw std::invalid_argument("bad uniform box");
  const double log_vol = (hi - lo).array().log().sum();
  return {[lo, hi](RngStream& rng) {
            Vec z(lo.size());
            for (Index i = 0; i < lo.size(); ++i) z[i] = rng.uniform(lo[i], hi[i]);
            return z;
          },
          [lo, hi, log_vol](const VecRef& z) {
            for (Index i = 0; i < lo.size(); ++i) {
              if (z[i] < lo[i] || z[i] > hi[i]) return kNegInf;
            }
            return -log_vol;
          }};
}

struct SurrogateResult {
  double mean = 0.0;
  // Spread of single-replicate values (the standard error of one K-sample
  // estimate).
  double replicate_sd = 0.0;
  // Standard error of `mean`.
  double se_mean = 0.0;
  int replicates = 0;
  int dropped = 0;
};

// One replicate: -sum_i w_i log q(z_i), z_i ~ q, w normalized p(z_i, x) / q(z_i).
inline std::optional<double> surrogate_replicate(const Proposal& q, const GenerativeModel& model, const VecRef& x,
                                                 Index k, RngStream& rng) {
  Vec lq(k);
  Vec lw(k);
  for (Index i = 0; i < k; ++i) {
    const Vec z = q.sample(rng);
    lq[i] = q.log_density(z);
    const double joint = model.log_joint(x, z);
    lw[i] = joint == kNegInf ? kNegInf : joint - lq[i];
  }
  try {
    const auto nw = normalize(lw);
    double v = 0.0;
    for (Index i = 0; i < k; ++i) {
      if (nw.weights.values[i] > 0.0) v -= nw.weights.values[i] * lq[i];
    }
    return v;
  } catch (const EmptyMassError&) {
    return std::nullopt;
  }
}

// Monte Carlo mean of the surrogate over `replicates` independent batches.
// Degenerate batches are dropped and redrawn (at most `replicates` extra).
inline SurrogateResult surrogate_objective(const Proposal& q, const GenerativeModel& model, const VecRef& x, Index k,
                                           int replicates, RngStream& rng) {
  if (k < 1 || replicates < 1) throw std::invalid_argument("surrogate_objective needs K >= 1 and replicates >= 1");
  std::vector<double> vals;
  SurrogateResult r;
  for (int attempt = 0; static_cast<int>(vals.size()) < replicates && attempt < 2 * replicates; ++attempt) {
    RngStream sub = rng.split(static_cast<std::uint64_t>(attempt));
    if (auto v = surrogate_replicate(q, model, x, k, sub)) vals.push_back(*v);
    else r.dropped++;
  }
  r.replicates = static_cast<int>(vals.size());
  if (vals.empty()) throw std::runtime_error("surrogate_objective: every replicate was degenerate");
  double s = 0.0;
  for (double v : vals) s += v;
  r.mean = s / static_cast<double>(vals.size());
  double ss = 0.0;
  for (double v : vals) ss += (v - r.mean) * (v - r.mean);
  r.replicate_sd = vals.size() > 1 ? std::sqrt(ss / static_cast<double>(vals.size() - 1)) : 0.0;
  r.se_mean = r.replicate_sd / std::sqrt(static_cast<double>(vals.size()));
  return r;
}

}  // namespace smcwake
