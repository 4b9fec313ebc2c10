#pragma once

// Experiment configuration: a TOML file plus command-line overrides.
// Validation errors carry the file name and line of the offending entry.

#include "smcwake/encoder.hpp"
#include "smcwake/smc.hpp"
#include "smcwake/trainers.hpp"

#include <toml.hpp>

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace smcwake::harness {

class ConfigError : public std::runtime_error {
 public:
  ConfigError(const std::string& where, const std::string& what) : std::runtime_error(where + ": " + what) {}
};

struct ModelSpec {
  std::string family = "gaussian-linear";  // conjugate-1d | gaussian-linear | two-moons
  Index latent_dim = 8;
  Index obs_dim = 16;
  double prior_sd = 1.0;
  double noise_sd = 1.0;
  std::string design = "random";  // random | conditioned | csv
  std::string design_csv;         // resolved against the config file's directory
  double singular_min = 0.5;
  double singular_max = 100.0;

  [[nodiscard]] nlohmann::json to_json() const {
    nlohmann::json j{{"family", family}};
    if (family == "gaussian-linear") {
      j["latent_dim"] = latent_dim;
      j["obs_dim"] = obs_dim;
      j["prior_sd"] = prior_sd;
      j["noise_sd"] = noise_sd;
      j["design"] = design;
      if (design == "conditioned") j["singular_range"] = {singular_min, singular_max};
      if (design == "csv") j["design_csv"] = design_csv;
    } else if (family == "conjugate-1d") {
      j["prior_sd"] = prior_sd;
      j["noise_sd"] = noise_sd;
    }
    return j;
  }
};

struct OutputSpec {
  std::string dir;  // empty: --out, then SMCWAKE_OUT_DIR, then "runs"
  bool wall_clock = false;
  bool diagnostics = true;
  bool save_stores = false;
  Index scatter_draws = 500;
};

// Forward-KL surrogate settings for models or encoders without closed forms.
struct ReferenceSpec {
  Index particles = 2000;
  Index draws = 1000;
};

struct ExperimentConfig {
  std::string name = "experiment";
  std::uint64_t seed = 0;
  ModelSpec model;
  std::size_t n = 10;
  TrainerConfig trainer;
  EncoderSpec encoder;
  OutputSpec output;
  ReferenceSpec reference;
  std::string source_dir = ".";
};

inline const char* kOutDirEnv = "SMCWAKE_OUT_DIR";

// --out, then the config's [output].dir, then $SMCWAKE_OUT_DIR, then "runs".
inline std::string resolve_out_dir(const std::optional<std::string>& flag, const ExperimentConfig& cfg) {
  if (flag && !flag->empty()) return *flag;
  if (!cfg.output.dir.empty()) return cfg.output.dir;
  if (const char* env = std::getenv(kOutDirEnv); env != nullptr && *env != '\0') return env;
  return "runs";
}

namespace detail {

inline std::string where(const std::string& file, const toml::source_region& src) {
  std::ostringstream os;
  os << file << ':' << src.begin.line;
  return os.str();
}

// Reads one TOML table and rejects keys nobody asked for.
class TableReader {
 public:
  TableReader(const toml::table* tbl, std::string file, std::string path)
      : tbl_{tbl}, file_{std::move(file)}, path_{std::move(path)} {}

  [[nodiscard]] bool present() const { return tbl_ != nullptr; }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (tbl_ == nullptr) return;
    const toml::node* n = tbl_->get(key);
    if (n == nullptr) return;
    if constexpr (std::is_same_v<T, bool>) {
      if (auto v = n->value_exact<bool>()) out = *v;
      else fail(*n, key, "expected a boolean");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (auto v = n->value_exact<std::string>()) out = *v;
      else fail(*n, key, "expected a string");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (auto v = n->value<double>()) out = *v;
      else fail(*n, key, "expected a number");
    } else if constexpr (std::is_integral_v<T>) {
      auto v = n->value_exact<std::int64_t>();
      if (!v) fail(*n, key, "expected an integer");
      if constexpr (std::is_unsigned_v<T>) {
        if (*v < 0) fail(*n, key, "must be nonnegative");
      }
      out = static_cast<T>(*v);
    } else if constexpr (std::is_same_v<T, std::vector<double>> || std::is_same_v<T, std::vector<Index>>) {
      const auto* arr = n->as_array();
      if (arr == nullptr) fail(*n, key, "expected an array");
      out.clear();
      for (const auto& e : *arr) {
        if constexpr (std::is_same_v<T, std::vector<double>>) {
          auto v = e.value<double>();
          if (!v) fail(e, key, "expected numbers");
          out.push_back(*v);
        } else {
          auto v = e.value_exact<std::int64_t>();
          if (!v || *v <= 0) fail(e, key, "expected positive integers");
          out.push_back(static_cast<Index>(*v));
        }
      }
    } else {
      static_assert(sizeof(T) == 0, "unsupported config type");
    }
  }

  [[noreturn]] void fail(const toml::node& n, const std::string& key, const std::string& msg) const {
    throw ConfigError(where(file_, n.source()), qualified(key) + ": " + msg);
  }

  [[noreturn]] void fail_key(const char* key, const std::string& msg) const {
    const toml::node* n = tbl_ != nullptr ? tbl_->get(key) : nullptr;
    if (n != nullptr) fail(*n, key, msg);
    throw ConfigError(file_, qualified(key) + ": " + msg);
  }

  void finish() const {
    if (tbl_ == nullptr) return;
    for (auto&& [k, v] : *tbl_) {
      if (v.is_table() && path_.empty()) continue;  // sections are handled by the caller
      if (seen_.count(std::string(k.str())) == 0) {
        throw ConfigError(where(file_, k.source()), "unknown key '" + qualified(std::string(k.str())) + "'");
      }
    }
  }

 private:
  [[nodiscard]] std::string qualified(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  const toml::table* tbl_;
  std::string file_;
  std::string path_;
  std::set<std::string> seen_;
};

inline MutationConfig preset_by_name(const std::string& name, bool& ok) {
  ok = true;
  if (name == "two-moons") return presets::two_moons();
  if (name == "gaussian-nested") return presets::gaussian_nested();
  if (name == "gaussian-many-vs-one") return presets::gaussian_many_vs_one();
  ok = false;
  return {};
}

}  // namespace detail

// Parses TOML text.  `file` is used in messages and to resolve relative paths.
inline ExperimentConfig parse_config(std::string_view text, const std::string& file = "<config>") {
  toml::table root;
  try {
    root = toml::parse(text, file);
  } catch (const toml::parse_error& e) {
    throw ConfigError(detail::where(file, e.source()), std::string(e.description()));
  }

  ExperimentConfig cfg;
  cfg.source_dir = std::filesystem::path(file).parent_path().string();
  if (cfg.source_dir.empty()) cfg.source_dir = ".";
  static const std::set<std::string> kSections{"model", "data", "method", "smc", "refresh", "encoder", "output",
                                               "reference"};
  for (auto&& [k, v] : root) {
    if (v.is_table() && kSections.count(std::string(k.str())) == 0) {
      throw ConfigError(detail::where(file, k.source()), "unknown section [" + std::string(k.str()) + "]");
    }
  }

  detail::TableReader top(&root, file, "");
  top.get("name", cfg.name);
  top.get("seed", cfg.seed);
  top.finish();

  auto section = [&](const char* name) { return detail::TableReader(root[name].as_table(), file, name); };

  {
    auto t = section("model");
    auto& m = cfg.model;
    t.get("family", m.family);
    if (m.family == "conjugate-1d") m.prior_sd = 10.0;
    t.get("latent_dim", m.latent_dim);
    t.get("obs_dim", m.obs_dim);
    t.get("prior_sd", m.prior_sd);
    t.get("noise_sd", m.noise_sd);
    t.get("design", m.design);
    t.get("design_csv", m.design_csv);
    t.get("singular_min", m.singular_min);
    t.get("singular_max", m.singular_max);
    if (m.family == "conjugate-1d") {
      m.latent_dim = m.obs_dim = 1;
    } else if (m.family == "two-moons") {
      m.latent_dim = m.obs_dim = 2;
    } else if (m.family != "gaussian-linear") {
      t.fail_key("family", "unknown model family '" + m.family + "'");
    }
    if (m.latent_dim < 1 || m.obs_dim < 1) t.fail_key("latent_dim", "dimensions must be positive");
    if (!(m.prior_sd > 0.0) || !(m.noise_sd > 0.0)) t.fail_key("prior_sd", "standard deviations must be positive");
    if (!m.design_csv.empty()) m.design = "csv";
    if (m.design != "random" && m.design != "conditioned" && m.design != "csv") {
      t.fail_key("design", "expected random, conditioned or csv");
    }
    if (m.design == "csv" && m.design_csv.empty()) t.fail_key("design", "design = \"csv\" needs design_csv");
    if (m.design == "conditioned" && !(m.singular_min > 0.0 && m.singular_max >= m.singular_min)) {
      t.fail_key("singular_min", "need 0 < singular_min <= singular_max");
    }
    t.finish();
  }
  {
    auto t = section("data");
    t.get("n", cfg.n);
    if (cfg.n < 1) t.fail_key("n", "dataset size must be positive");
    t.finish();
  }

  auto& tr = cfg.trainer;
  {
    auto t = section("method");
    std::string name = std::string(method_name(tr.method));
    std::string optimizer = "adam";
    Index particles = 100;
    t.get("name", name);
    t.get("steps", tr.steps);
    t.get("batch_size", tr.batch_size);
    t.get("learning_rate", tr.learning_rate);
    t.get("optimizer", optimizer);
    t.get("particles", particles);
    t.get("mstar", tr.mstar);
    t.get("subset", tr.subset);
    t.get("window", tr.window);
    t.get("max_retries", tr.max_retries);
    t.get("msc_weighted", tr.msc_weighted);
    const auto m = parse_method(name);
    if (!m) t.fail_key("name", "unknown method '" + name + "'");
    tr.method = *m;
    if (optimizer != "adam" && optimizer != "sgd") t.fail_key("optimizer", "expected adam or sgd");
    tr.sgd = optimizer == "sgd";
    if (tr.steps < 0) t.fail_key("steps", "must be nonnegative");
    if (tr.batch_size < 1) t.fail_key("batch_size", "must be positive");
    if (!(tr.learning_rate > 0.0)) t.fail_key("learning_rate", "must be positive");
    if (particles < 2) t.fail_key("particles", "need at least 2 particles");
    if (tr.window < 1) t.fail_key("window", "must be positive");
    tr.smc.particles = particles;
    tr.is_particles = particles;
    t.finish();
  }
  {
    auto t = section("smc");
    std::string schedule = "adaptive";
    double ess_min = 0.5;
    int stages = 0;
    std::vector<double> temps;
    std::string scheme = "systematic";
    std::string kernel = "current";
    std::string preset;
    auto& mut = tr.smc.mutation;
    t.get("preset", preset);
    if (!preset.empty()) {
      bool ok = false;
      mut = detail::preset_by_name(preset, ok);
      if (!ok) t.fail_key("preset", "unknown mutation preset '" + preset + "'");
    }
    t.get("schedule", schedule);
    t.get("ess_min", ess_min);
    t.get("stages", stages);
    t.get("temperatures", temps);
    t.get("resample_ess", tr.smc.resample_ess_fraction);
    t.get("scheme", scheme);
    t.get("mutation_steps", mut.steps);
    t.get("step_std", mut.step_std);
    t.get("kernel", kernel);
    t.get("max_stages", tr.smc.max_stages);
    t.get("collapse_retries", tr.collapse_retries);
    if (schedule == "adaptive") {
      if (!(ess_min > 0.0 && ess_min <= 1.0)) t.fail_key("ess_min", "fraction must lie in (0, 1]");
      tr.smc.schedule = AdaptiveSchedule{ess_min};
    } else if (schedule == "fixed") {
      FixedSchedule fs;
      if (!temps.empty()) {
        fs.temperatures = temps;
      } else if (stages >= 2) {
        fs = linear_schedule(stages);
      } else {
        t.fail_key("schedule", "fixed schedule needs temperatures or stages >= 2");
      }
      try {
        validate(fs);
      } catch (const std::invalid_argument& e) {
        t.fail_key("temperatures", e.what());
      }
      tr.smc.schedule = fs;
    } else {
      t.fail_key("schedule", "expected adaptive or fixed");
    }
    if (scheme == "systematic") tr.smc.scheme = ResampleScheme::Systematic;
    else if (scheme == "multinomial") tr.smc.scheme = ResampleScheme::Multinomial;
    else t.fail_key("scheme", "expected systematic or multinomial");
    if (kernel == "current") mut.target = KernelTarget::Current;
    else if (kernel == "next") mut.target = KernelTarget::Next;
    else t.fail_key("kernel", "expected current or next");
    if (mut.steps < 1) t.fail_key("mutation_steps", "must be positive");
    if (!(mut.step_std > 0.0)) t.fail_key("step_std", "must be positive");
    if (tr.smc.max_stages < 2) t.fail_key("max_stages", "must be at least 2");
    if (tr.collapse_retries < 0) t.fail_key("collapse_retries", "must be nonnegative");
    t.finish();
  }
  {
    auto t = section("refresh");
    std::string policy = "round-robin";
    auto& r = tr.refresh;
    t.get("policy", policy);
    t.get("count", r.count);
    t.get("every", r.every);
    t.get("prefill", r.prefill_runs);
    if (policy == "round-robin") r.kind = RefreshKind::RoundRobin;
    else if (policy == "random") r.kind = RefreshKind::Random;
    else if (policy == "minibatch") r.kind = RefreshKind::Minibatch;
    else if (policy == "none") r.kind = RefreshKind::None;
    else t.fail_key("policy", "expected round-robin, random, minibatch or none");
    if (r.count < 1 || r.every < 1) t.fail_key("count", "count and every must be positive");
    if (r.prefill_runs < 1) t.fail_key("prefill", "every store needs at least one run before training");
    t.finish();
  }
  {
    auto t = section("encoder");
    auto& e = cfg.encoder;
    if (cfg.model.family == "two-moons") e.family = "mixture";
    t.get("family", e.family);
    t.get("hidden", e.hidden);
    t.get("components", e.components);
    t.get("jitter", e.jitter);
    t.get("mean_init_scale", e.mean_init_scale);
    if (e.family != "fullcov" && e.family != "mixture") t.fail_key("family", "expected fullcov or mixture");
    if (e.components < 1) t.fail_key("components", "must be positive");
    if (!(e.jitter >= 0.0)) t.fail_key("jitter", "must be nonnegative");
    t.finish();
  }
  {
    auto t = section("output");
    auto& o = cfg.output;
    t.get("dir", o.dir);
    t.get("metrics_every", tr.metrics_every);
    t.get("wall_clock", o.wall_clock);
    t.get("diagnostics", o.diagnostics);
    t.get("save_stores", o.save_stores);
    t.get("scatter_draws", o.scatter_draws);
    if (tr.metrics_every < 1) t.fail_key("metrics_every", "must be positive");
    t.finish();
  }
  {
    auto t = section("reference");
    t.get("particles", cfg.reference.particles);
    t.get("draws", cfg.reference.draws);
    if (cfg.reference.particles < 2 || cfg.reference.draws < 1) t.fail_key("particles", "must be positive");
    t.finish();
  }
  return cfg;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path, "cannot open config file");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path);
}

// Flag overrides applied after parsing (flags win).
struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> method;
  std::optional<std::string> out;
  std::optional<int> steps;
  std::optional<Index> particles;
};

inline void apply_overrides(ExperimentConfig& cfg, const Overrides& o) {
  if (o.seed) cfg.seed = *o.seed;
  if (o.method) {
    const auto m = parse_method(*o.method);
    if (!m) throw ConfigError("--method", "unknown method '" + *o.method + "'");
    cfg.trainer.method = *m;
  }
  if (o.out) cfg.output.dir = *o.out;
  if (o.steps) {
    if (*o.steps < 0) throw ConfigError("--steps", "must be nonnegative");
    cfg.trainer.steps = *o.steps;
  }
  if (o.particles) {
    if (*o.particles < 2) throw ConfigError("--particles", "need at least 2 particles");
    cfg.trainer.smc.particles = *o.particles;
    cfg.trainer.is_particles = *o.particles;
  }
}

}  // namespace smcwake::harness
