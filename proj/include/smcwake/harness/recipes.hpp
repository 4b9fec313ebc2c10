#pragma once

// Packaged experiment recipes.  Each recipe is a set of labelled configs run
// into <out>/<recipe>/<label>/ followed by a comparison of their metrics.

#include "smcwake/harness/compare.hpp"
#include "smcwake/harness/config.hpp"
#include "smcwake/harness/experiment.hpp"

#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace smcwake::harness {

struct RecipeRun {
  std::string label;
  std::string toml;
};

struct Recipe {
  std::string name;
  std::string summary;
  std::vector<RecipeRun> runs;
};

namespace detail {

inline const char* kGaussianModel = R"(
[model]
family = "gaussian-linear"
latent_dim = 8
obs_dim = 16
prior_sd = 1.0
noise_sd = 1.0

[data]
n = 10

[encoder]
family = "fullcov"
hidden = [64, 64]
)";

inline const char* kManyVsOneModel = R"(
[model]
family = "gaussian-linear"
latent_dim = 8
obs_dim = 16
design = "conditioned"
singular_min = 0.5
singular_max = 100.0

[data]
n = 10

[encoder]
family = "fullcov"
hidden = [64, 64]

[smc]
preset = "gaussian-many-vs-one"
schedule = "fixed"
stages = 10
)";

inline const char* kTwoMoonsModel = R"(
[model]
family = "two-moons"

[data]
n = 100

[encoder]
family = "mixture"
components = 8
hidden = [64, 64]

[reference]
particles = 2000
draws = 1000

[output]
metrics_every = 250
)";

}  // namespace detail

inline const std::vector<Recipe>& recipe_book() {
  static const std::vector<Recipe> book{
      {"conjugate-smc-wake",
       "1-D conjugate Gaussian, SMC-Wake with the evidence-weighted estimator",
       {{"smc-wake-a", R"(
name = "conjugate-smc-wake"
[model]
family = "conjugate-1d"
[data]
n = 10
[encoder]
family = "fullcov"
hidden = [32, 32]
[method]
name = "smc-wake-a"
steps = 2000
batch_size = 10
learning_rate = 0.003
particles = 64
[smc]
schedule = "adaptive"
[refresh]
policy = "round-robin"
count = 1
[output]
metrics_every = 100
)"}}},
      {"gaussian-pimh-vs-msc",
       "Gaussian linear model p=8, d=16, n=10: SMC-PIMH-Wake against MSC at equal K and step count",
       {{"smc-pimh-wake", std::string("name = \"gaussian-pimh\"\n") + detail::kGaussianModel + R"(
[method]
name = "smc-pimh-wake"
steps = 3000
batch_size = 10
learning_rate = 0.0001
particles = 100
[smc]
schedule = "adaptive"
mutation_steps = 10
step_std = 0.1
[refresh]
policy = "random"
count = 1
[output]
metrics_every = 250
)"},
        {"msc", std::string("name = \"gaussian-msc\"\n") + detail::kGaussianModel + R"(
[method]
name = "msc"
steps = 3000
batch_size = 10
learning_rate = 0.0001
particles = 100
[output]
metrics_every = 250
)"}}},
      {"gaussian-smc-wake-vs-rws",
       "Gaussian linear model p=8, d=16, n=10: SMC-Wake against wake-phase RWS at equal step count",
       {{"smc-wake-a", std::string("name = \"gaussian-smc-wake\"\n") + detail::kGaussianModel + R"(
[method]
name = "smc-wake-a"
steps = 3000
batch_size = 10
learning_rate = 0.001
particles = 100
[smc]
schedule = "adaptive"
mutation_steps = 10
step_std = 0.1
[refresh]
policy = "round-robin"
count = 1
[output]
metrics_every = 250
)"},
        {"rws", std::string("name = \"gaussian-rws\"\n") + detail::kGaussianModel + R"(
[method]
name = "rws"
steps = 3000
batch_size = 10
learning_rate = 0.001
particles = 100
[output]
metrics_every = 250
)"}}},
      {"gaussian-many-vs-one",
       "Ill-conditioned Gaussian linear model: 20 samplers of K=64 against one sampler of K=1280, naive M'=1",
       {{"many-k64", std::string("name = \"many-vs-one\"\n") + detail::kManyVsOneModel + R"(
[method]
name = "smc-wake-a"
steps = 10000
batch_size = 10
learning_rate = 0.001
particles = 64
subset = 1
[output]
metrics_every = 250
[refresh]
policy = "none"
prefill = 20
)"},
        {"one-k1280", std::string("name = \"many-vs-one\"\n") + detail::kManyVsOneModel + R"(
[method]
name = "smc-wake-a"
steps = 10000
batch_size = 10
learning_rate = 0.001
particles = 1280
subset = 1
[output]
metrics_every = 250
[refresh]
policy = "none"
prefill = 1
)"}}},
      {"two-moons-wake-vs-smc",
       "Two moons with a mixture encoder: wake-phase RWS against SMC-Wake at equal K and step count",
       {{"rws", std::string("name = \"two-moons\"\n") + detail::kTwoMoonsModel + R"(
[method]
name = "rws"
steps = 2000
batch_size = 16
learning_rate = 0.001
particles = 16
)"},
        {"smc-wake-a", std::string("name = \"two-moons\"\n") + detail::kTwoMoonsModel + R"(
[method]
name = "smc-wake-a"
steps = 2000
batch_size = 16
learning_rate = 0.001
particles = 16
[smc]
preset = "two-moons"
schedule = "adaptive"
[refresh]
policy = "random"
count = 1
every = 2
)"}}},
  };
  return book;
}

inline const Recipe* find_recipe(const std::string& name) {
  for (const auto& r : recipe_book()) {
    if (r.name == name) return &r;
  }
  return nullptr;
}

// Runs every config of the recipe and writes comparison.txt / .json.
// Returns the worst exit code of the runs.
inline int run_recipe(const Recipe& recipe, const std::string& out_root, std::optional<std::uint64_t> seed,
                      std::optional<int> steps, std::ostream& log) {
  namespace fs = std::filesystem;
  const fs::path base = fs::path(out_root) / recipe.name;
  std::vector<std::string> metrics;
  int worst = 0;
  for (const auto& run : recipe.runs) {
    ExperimentConfig cfg = parse_config(run.toml, "recipe:" + recipe.name + "/" + run.label);
    Overrides o;
    o.seed = seed;
    o.steps = steps;
    apply_overrides(cfg, o);
    const std::string dir = (base / run.label).string();
    log << "[" << recipe.name << "] " << run.label << " -> " << dir << '\n';
    const RunOutcome out = run_experiment(cfg, dir, nullptr);
    worst = std::max(worst, out.exit_code);
    metrics.push_back((base / run.label / "metrics.csv").string());
  }
  const Comparison c = compare_runs(metrics);
  const std::string text = format_comparison(c);
  std::ofstream(base / "comparison.txt") << text;
  std::ofstream(base / "comparison.json") << comparison_json(c).dump(2) << '\n';
  log << text;
  return worst;
}

}  // namespace smcwake::harness
