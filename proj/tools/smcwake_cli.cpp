// smcwake: run experiments, compare metrics files, run packaged recipes.

#include "smcwake/smcwake.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>

namespace h = smcwake::harness;

int main(int argc, char** argv) {
  CLI::App app{"SMC-Wake amortized inference experiments"};
  app.require_subcommand(1);

  auto* run = app.add_subcommand("run", "train one configuration");
  std::string config_pos;
  std::string config_opt;
  h::Overrides ov;
  std::uint64_t seed = 0;
  std::string method;
  std::string out;
  int steps = 0;
  long particles = 0;
  bool quiet = false;
  run->add_option("config_file", config_pos, "TOML config file");
  run->add_option("--config", config_opt, "TOML config file");
  auto* o_seed = run->add_option("--seed", seed, "seed for every random stream");
  auto* o_method = run->add_option("--method", method, "smc-wake-a|b|c, smc-pimh-wake, rws, defensive-rws, msc");
  auto* o_out = run->add_option("--out", out, "output directory");
  auto* o_steps = run->add_option("--steps", steps, "gradient steps");
  auto* o_part = run->add_option("--particles", particles, "particles per sampler");
  run->add_flag("-q,--quiet", quiet, "no progress lines");

  auto* cmp = app.add_subcommand("compare", "tabulate finished runs");
  std::vector<std::string> files;
  std::string json_out;
  bool json_stdout = false;
  cmp->add_option("metrics", files, "metrics.csv files")->required();
  cmp->add_option("--json", json_out, "also write the table as JSON to this file");
  cmp->add_flag("--print-json", json_stdout, "print JSON instead of text");

  auto* rec = app.add_subcommand("recipes", "packaged experiments");
  rec->require_subcommand(1);
  auto* rec_list = rec->add_subcommand("list", "show recipes");
  auto* rec_run = rec->add_subcommand("run", "run a recipe");
  std::string recipe_name;
  std::string recipe_out;
  std::uint64_t recipe_seed = 0;
  int recipe_steps = 0;
  rec_run->add_option("name", recipe_name, "recipe name")->required();
  auto* r_out = rec_run->add_option("--out", recipe_out, "output root");
  auto* r_seed = rec_run->add_option("--seed", recipe_seed, "seed");
  auto* r_steps = rec_run->add_option("--steps", recipe_steps, "gradient steps for every run");

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) {
      if (config_pos.empty() == config_opt.empty()) {
        std::cerr << "run: give the config file either positionally or with --config\n";
        return 1;
      }
      h::ExperimentConfig cfg = h::load_config(config_pos.empty() ? config_opt : config_pos);
      if (*o_seed) ov.seed = seed;
      if (*o_method) ov.method = method;
      if (*o_steps) ov.steps = steps;
      if (*o_part) ov.particles = particles;
      h::apply_overrides(cfg, ov);
      const std::string dir = h::resolve_out_dir(*o_out ? std::optional<std::string>(out) : std::nullopt, cfg);
      const auto outcome = h::run_experiment(cfg, dir, quiet ? nullptr : &std::cerr);
      if (outcome.exit_code != 0) {
        std::cerr << "run failed: " << outcome.summary.value("error", std::string("unknown error")) << '\n';
      } else {
        std::cout << dir << '\n';
      }
      return outcome.exit_code;
    }
    if (cmp->parsed()) {
      const auto c = h::compare_runs(files);
      if (json_stdout) std::cout << h::comparison_json(c).dump(2) << '\n';
      else std::cout << h::format_comparison(c);
      if (!json_out.empty()) std::ofstream(json_out) << h::comparison_json(c).dump(2) << '\n';
      return 0;
    }
    if (rec_list->parsed()) {
      for (const auto& r : h::recipe_book()) std::cout << r.name << "\t" << r.summary << '\n';
      return 0;
    }
    if (rec_run->parsed()) {
      const auto* r = h::find_recipe(recipe_name);
      if (r == nullptr) {
        std::cerr << "unknown recipe '" << recipe_name << "' (see: recipes list)\n";
        return 1;
      }
      h::ExperimentConfig defaults;
      const std::string root = h::resolve_out_dir(*r_out ? std::optional<std::string>(recipe_out) : std::nullopt, defaults);
      return h::run_recipe(*r, root, *r_seed ? std::optional<std::uint64_t>(recipe_seed) : std::nullopt,
                           *r_steps ? std::optional<int>(recipe_steps) : std::nullopt, std::cerr);
    }
  } catch (const h::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 1;
  } catch (const h::MismatchedRuns& e) {
    std::cerr << "compare refused: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
