#pragma once

// One experiment end to end: model and dataset from the seed, training,
// metrics rows, checkpoints and the JSON summary.

#include "smcwake/encoder.hpp"
#include "smcwake/estimators.hpp"
#include "smcwake/harness/config.hpp"
#include "smcwake/metrics.hpp"
#include "smcwake/models.hpp"
#include "smcwake/smc.hpp"
#include "smcwake/trainers.hpp"

#include <nlohmann/json.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <ostream>
#include <string>
#include <vector>

namespace smcwake::harness {

inline constexpr const char* kMetricsHeader = "step,method,fwd_kl,rev_kl,sym_kl,mean_log_C,mean_ess,wall_ms";

// Seed sub-streams.
namespace seeds {
inline constexpr std::uint64_t kDesign = 10;
inline constexpr std::uint64_t kData = 11;
inline constexpr std::uint64_t kEncoderInit = 12;
inline constexpr std::uint64_t kTrainer = 13;
inline constexpr std::uint64_t kReference = 14;
inline constexpr std::uint64_t kScatter = 15;
}  // namespace seeds

// Shortest round-trippable-enough text for a metric value.
inline std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

inline std::unique_ptr<GenerativeModel> build_model(const ExperimentConfig& cfg) {
  const auto& m = cfg.model;
  if (m.family == "conjugate-1d") return std::make_unique<ConjugateGaussian1D>(m.prior_sd, m.noise_sd);
  if (m.family == "two-moons") return std::make_unique<TwoMoonsModel>();
  if (m.family == "gaussian-linear") {
    RngStream rng = RngStream(cfg.seed).split(seeds::kDesign);
    Mat a;
    if (m.design == "csv") {
      std::filesystem::path p(m.design_csv);
      if (p.is_relative()) p = std::filesystem::path(cfg.source_dir) / p;
      a = GaussianLinearModel::load_design_csv(p.string());
      if (a.rows() != m.obs_dim || a.cols() != m.latent_dim) {
        throw ConfigError(p.string(), "design matrix is " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                                          ", config expects obs_dim x latent_dim = " + std::to_string(m.obs_dim) +
                                          "x" + std::to_string(m.latent_dim));
      }
    } else if (m.design == "conditioned") {
      a = GaussianLinearModel::conditioned_design(m.obs_dim, m.latent_dim, m.singular_min, m.singular_max, rng);
    } else {
      a = GaussianLinearModel::random_design(m.obs_dim, m.latent_dim, rng);
    }
    return std::make_unique<GaussianLinearModel>(std::move(a), m.prior_sd, m.noise_sd);
  }
  throw ConfigError("model.family", "unknown model family '" + m.family + "'");
}

struct Dataset {
  std::vector<Vec> x;
  std::vector<Vec> z;  // latent draws that generated x
};

inline Dataset simulate_dataset(const GenerativeModel& model, std::size_t n, const RngStream& stream) {
  Dataset d;
  for (std::size_t j = 0; j < n; ++j) {
    RngStream r = stream.split(j);
    Vec z = model.prior_sample(r);
    d.x.push_back(model.simulate(z, r));
    d.z.push_back(std::move(z));
  }
  return d;
}

// Divergence yardstick for one experiment: closed form when the model has
// an analytic posterior and the encoder is Gaussian, otherwise a forward-KL
// estimate against cached reference LT-SMC draws.
class Evaluator {
 public:
  Evaluator(const GenerativeModel& model, const std::vector<Vec>& data, const Encoder& probe, const SmcConfig& base,
            const ReferenceSpec& ref, RngStream rng)
      : model_{model}, data_{data} {
    analytic_ = model.has_analytic_posterior() && probe.gaussian(data.front()).has_value();
    if (analytic_) return;
    SmcConfig cfg = base;
    cfg.particles = ref.particles;
    cfg.schedule = AdaptiveSchedule{0.5};
    for (std::size_t j = 0; j < data.size(); ++j) {
      RngStream sub = rng.split(j);
      const SmcRunRecord rec = lt_smc_run(model, data[j], cfg, sub);
      const auto idx = resample(rec.weights, static_cast<std::size_t>(ref.draws), ResampleScheme::Systematic, sub);
      Mat zs(model.latent_dim(), ref.draws);
      for (Index i = 0; i < ref.draws; ++i) zs.col(i) = rec.atoms.col(static_cast<Index>(idx[static_cast<std::size_t>(i)]));
      draws_.push_back(std::move(zs));
      log_evidence_.push_back(model.has_analytic_posterior() ? model.analytic_log_evidence(data[j]) : rec.log_evidence);
    }
  }

  [[nodiscard]] bool approximate() const noexcept { return !analytic_; }
  [[nodiscard]] const std::vector<Mat>& reference_draws() const noexcept { return draws_; }

  [[nodiscard]] KlReport evaluate(const Encoder& enc, int step) const {
    if (analytic_) return amortized_kl_report(enc, model_, data_, step);
    KlReport r;
    r.step = step;
    r.approximate = true;
    double var = 0.0;
    const double nan = std::numeric_limits<double>::quiet_NaN();
    for (std::size_t j = 0; j < data_.size(); ++j) {
      const auto [kl, se] = forward_kl_from_samples(enc, model_, data_[j], draws_[j], log_evidence_[j]);
      r.forward.push_back(kl);
      r.reverse.push_back(nan);
      r.symmetric.push_back(nan);
      var += se * se;
    }
    double s = 0.0;
    for (double v : r.forward) s += v;
    r.avg_forward = s / static_cast<double>(r.forward.size());
    r.avg_reverse = r.avg_symmetric = nan;
    r.se_forward = std::sqrt(var) / static_cast<double>(data_.size());
    return r;
  }

 private:
  const GenerativeModel& model_;
  const std::vector<Vec>& data_;
  bool analytic_ = false;
  std::vector<Mat> draws_;
  std::vector<double> log_evidence_;
};

struct RunOutcome {
  int exit_code = 0;
  std::string out_dir;
  nlohmann::json summary;
};

namespace detail {

inline nlohmann::json row_json(const KlReport& r, double mean_log_c, double mean_ess) {
  auto num = [](double v) -> nlohmann::json {
    if (std::isfinite(v)) return v;
    return nullptr;
  };
  return {{"step", r.step},          {"fwd_kl", num(r.avg_forward)}, {"rev_kl", num(r.avg_reverse)},
          {"sym_kl", num(r.avg_symmetric)}, {"mean_log_C", num(mean_log_c)}, {"mean_ess", num(mean_ess)}};
}

inline nlohmann::json trainer_json(const ExperimentConfig& cfg) {
  const auto& t = cfg.trainer;
  nlohmann::json smc{{"particles", t.smc.particles},
                     {"mutation_steps", t.smc.mutation.steps},
                     {"step_std", t.smc.mutation.step_std},
                     {"kernel", t.smc.mutation.target == KernelTarget::Current ? "current" : "next"},
                     {"resample_ess", t.smc.resample_ess_fraction},
                     {"scheme", t.smc.scheme == ResampleScheme::Systematic ? "systematic" : "multinomial"},
                     {"max_stages", t.smc.max_stages},
                     {"collapse_retries", t.collapse_retries}};
  if (const auto* f = std::get_if<FixedSchedule>(&t.smc.schedule)) smc["temperatures"] = f->temperatures;
  else smc["ess_min"] = std::get<AdaptiveSchedule>(t.smc.schedule).ess_min_fraction;
  static constexpr const char* kRefresh[] = {"round-robin", "random", "minibatch", "none"};
  return {{"method", std::string(method_name(t.method))},
          {"steps", t.steps},
          {"batch_size", t.batch_size},
          {"learning_rate", t.learning_rate},
          {"optimizer", t.sgd ? "sgd" : "adam"},
          {"is_particles", t.is_particles},
          {"mstar", t.mstar},
          {"subset", t.subset},
          {"window", t.window},
          {"refresh",
           {{"policy", kRefresh[static_cast<int>(t.refresh.kind)]},
            {"count", t.refresh.count},
            {"every", t.refresh.every},
            {"prefill", t.refresh.prefill_runs}}},
          {"smc", smc}};
}

inline nlohmann::json counters_json(const TrainCounters& c) {
  return {{"likelihood_evals", c.likelihood_evals}, {"gradient_steps", c.gradient_steps},
          {"rejected_steps", c.rejected_steps},     {"undefined_gradients", c.undefined_gradients},
          {"skipped_gradients", c.skipped_gradients}, {"smc_runs", c.smc_runs},
          {"stage_cap_hits", c.stage_cap_hits},     {"collapsed_runs", c.collapsed_runs},
          {"pimh_proposals", c.pimh_proposals},     {"pimh_accepts", c.pimh_accepts},
          {"msc_steps", c.msc_steps},               {"msc_moves", c.msc_moves}};
}

inline void write_vec_cols(std::ostream& out, const VecRef& v) {
  for (Index i = 0; i < v.size(); ++i) out << ',' << format_number(v[i]);
}

}  // namespace detail

// Runs `cfg` and writes into `out_dir`:
//   metrics.csv, summary.json, encoder.bin + encoder.json, data.csv,
//   smc_diagnostics.jsonl (LT-SMC methods), scatter.csv (two-moons),
//   stores/store_<j>.bin (when requested).
inline RunOutcome run_experiment(const ExperimentConfig& cfg, const std::string& out_dir, std::ostream* log = nullptr) {
  namespace fs = std::filesystem;
  RunOutcome outcome;
  outcome.out_dir = out_dir;
  fs::create_directories(out_dir);
  const fs::path dir(out_dir);

  const RngStream root(cfg.seed);
  auto model = build_model(cfg);
  const Dataset data = simulate_dataset(*model, cfg.n, root.split(seeds::kData));

  {
    std::ofstream d(dir / "data.csv");
    d << "datapoint";
    for (Index i = 0; i < model->obs_dim(); ++i) d << ",x" << i + 1;
    for (Index i = 0; i < model->latent_dim(); ++i) d << ",z" << i + 1;
    d << '\n';
    for (std::size_t j = 0; j < cfg.n; ++j) {
      d << j;
      detail::write_vec_cols(d, data.x[j]);
      detail::write_vec_cols(d, data.z[j]);
      d << '\n';
    }
  }

  auto enc = make_encoder(cfg.encoder, model->obs_dim(), model->latent_dim());
  {
    RngStream r = root.split(seeds::kEncoderInit);
    enc->initialize(r);
  }
  const Evaluator evaluator(*model, data.x, *enc, cfg.trainer.smc, cfg.reference, root.split(seeds::kReference));

  TrainerConfig tcfg = cfg.trainer;
  tcfg.seed = root.split(seeds::kTrainer)();
  const std::string method(method_name(tcfg.method));

  std::ofstream csv(dir / "metrics.csv");
  csv << kMetricsHeader << '\n';
  const auto t0 = std::chrono::steady_clock::now();
  nlohmann::json first_row;
  nlohmann::json last_row;
  const TrainCounters* live_counters = nullptr;

  MetricsCallback cb = [&](const Encoder& e, const TrainProgress& p) {
    const KlReport r = evaluator.evaluate(e, p.step);
    double wall = 0.0;
    if (cfg.output.wall_clock) {
      wall = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    }
    csv << p.step << ',' << method << ',' << format_number(r.avg_forward) << ',' << format_number(r.avg_reverse)
        << ',' << format_number(r.avg_symmetric) << ',' << format_number(p.mean_log_C) << ','
        << format_number(p.mean_ess) << ',' << format_number(wall) << '\n';
    csv.flush();
    last_row = detail::row_json(r, p.mean_log_C, p.mean_ess);
    if (r.approximate) last_row["fwd_kl_se"] = r.se_forward;
    if (first_row.is_null()) first_row = last_row;
    live_counters = p.counters;
    if (log != nullptr) {
      *log << method << " step " << p.step << " fwd_kl " << format_number(r.avg_forward) << '\n';
    }
  };

  std::unique_ptr<SmcDiagnosticsWriter> diag;
  if (cfg.output.diagnostics && uses_smc(tcfg.method)) {
    fs::remove(dir / "smc_diagnostics.jsonl");
    diag = std::make_unique<SmcDiagnosticsWriter>((dir / "smc_diagnostics.jsonl").string());
  }

  nlohmann::json summary{{"name", cfg.name},
                         {"seed", cfg.seed},
                         {"method", method},
                         {"model", cfg.model.to_json()},
                         {"n", cfg.n},
                         {"encoder", enc->describe()},
                         {"trainer", detail::trainer_json(cfg)},
                         {"metrics_approximate", evaluator.approximate()}};
  TrainResult result;
  std::vector<SamplerStore> stores;
  std::vector<PimhChainState> chains;
  try {
    switch (tcfg.method) {
      case Method::SmcWakeA:
      case Method::SmcWakeB:
      case Method::SmcWakeC:
        result = smc_wake_train(tcfg, *model, data.x, *enc, stores, cb, diag.get());
        break;
      case Method::SmcPimhWake:
        result = smc_pimh_wake_train(tcfg, *model, data.x, *enc, chains, cb, diag.get());
        break;
      default:
        result = train(tcfg, *model, data.x, *enc, cb, nullptr);
        break;
    }
    summary["status"] = "ok";
    summary["counters"] = detail::counters_json(result.counters);
  } catch (const DatapointError& e) {
    summary["status"] = "error";
    summary["error"] = e.what();
    if (live_counters != nullptr) summary["counters"] = detail::counters_json(*live_counters);
    outcome.exit_code = 2;
  }
  csv.close();

  summary["initial"] = first_row;
  summary["final"] = last_row;
  if (cfg.output.wall_clock) {
    summary["wall_ms"] = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  }
  if (result.counters.pimh_proposals > 0) {
    summary["pimh_acceptance"] =
        static_cast<double>(result.counters.pimh_accepts) / static_cast<double>(result.counters.pimh_proposals);
  }
  if (result.counters.msc_steps > 0) {
    summary["msc_move_rate"] =
        static_cast<double>(result.counters.msc_moves) / static_cast<double>(result.counters.msc_steps);
  }

  save_encoder(*enc, (dir / "encoder").string());
  nlohmann::json artifacts{{"metrics", "metrics.csv"}, {"encoder", "encoder.bin"}, {"encoder_sidecar", "encoder.json"},
                           {"data", "data.csv"}};
  if (diag) artifacts["smc_diagnostics"] = "smc_diagnostics.jsonl";

  if (cfg.model.family == "two-moons" && cfg.output.scatter_draws > 0) {
    std::ofstream sc(dir / "scatter.csv");
    sc << "datapoint,source,z1,z2\n";
    const RngStream srng = root.split(seeds::kScatter);
    for (std::size_t j = 0; j < cfg.n; ++j) {
      RngStream r = srng.split(j);
      const Mat zs = enc->sample(data.x[j], cfg.output.scatter_draws, r);
      for (Index i = 0; i < zs.cols(); ++i) {
        sc << j << ",encoder," << format_number(zs(0, i)) << ',' << format_number(zs(1, i)) << '\n';
      }
      if (evaluator.approximate()) {
        const Mat& ref = evaluator.reference_draws()[j];
        for (Index i = 0; i < ref.cols(); ++i) {
          sc << j << ",reference," << format_number(ref(0, i)) << ',' << format_number(ref(1, i)) << '\n';
        }
      }
    }
    artifacts["scatter"] = "scatter.csv";
  }

  if (cfg.output.save_stores && (!stores.empty() || !chains.empty())) {
    fs::create_directories(dir / "stores");
    for (std::size_t j = 0; j < stores.size(); ++j) {
      save_store(stores[j], (dir / "stores" / ("store_" + std::to_string(j) + ".bin")).string());
    }
    for (std::size_t j = 0; j < chains.size(); ++j) {
      SamplerStore s(StoreMode::Latest, 1);
      RngStream unused(0);
      s.append(chains[j].current, unused);
      save_store(s, (dir / "stores" / ("store_" + std::to_string(j) + ".bin")).string());
    }
    artifacts["stores"] = "stores/";
  }
  summary["artifacts"] = artifacts;

  std::ofstream(dir / "summary.json") << summary.dump(2) << '\n';
  outcome.summary = std::move(summary);
  return outcome;
}

}  // namespace smcwake::harness
