#include <CLI11.hpp>

#include <iostream>
#include <mutex>

#include "emlab/expcli.hpp"

namespace {

std::mutex log_mu;

void log_line(const std::string& s) {
  std::lock_guard lock(log_mu);
  std::cerr << s << '\n';
}

emlab::ExperimentConfig load(const std::string& path, const std::string& out, const std::string& seeds) {
  auto e = emlab::load_config(path);
  if (!out.empty()) e.out_dir = out;
  if (!seeds.empty()) e.seeds = emlab::cfg::parse_u64_list(seeds);
  emlab::validate(e);
  return e;
}

std::vector<emlab::fs::path> to_paths(const std::vector<std::string>& v) {
  return {v.begin(), v.end()};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"emlab: execution-manifold experiments on marker arithmetic"};
  app.require_subcommand(1);

  std::string config, out, seeds;
  std::size_t jobs = 1;
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "Suppress progress output");

  auto* train = app.add_subcommand("train", "Train one run per seed");
  train->add_option("--config", config, "Experiment config file")->required()->check(CLI::ExistingFile);
  train->add_option("--out", out, "Output directory (overrides [output] dir)");
  train->add_option("--jobs", jobs, "Parallel runs")->check(CLI::PositiveNumber);
  train->add_option("--seeds", seeds, "Seed list, e.g. 0,1,2 or 0-4");

  std::vector<std::string> runs;
  std::vector<std::string> which{"rank", "entropy", "commutator", "sae"};
  auto* analyze = app.add_subcommand("analyze", "Run analyses over trained runs");
  analyze->add_option("runs", runs, "Run directories")->required()->check(CLI::ExistingDirectory);
  analyze->add_option("--which", which, "rank, entropy, commutator, sae, angles")
      ->check(CLI::IsMember({"rank", "entropy", "commutator", "sae", "angles"}));
  analyze->add_option("--config", config, "Override the config stored with each run")->check(CLI::ExistingFile);
  analyze->add_option("--out", out, "Output path for cross-run outputs (angles.csv)");
  analyze->add_option("--jobs", jobs, "Runs analysed in parallel")->check(CLI::PositiveNumber);

  auto* compare = app.add_subcommand("compare-curricula", "Train mixed and curriculum runs and tabulate forgetting");
  compare->add_option("--config", config, "Experiment config file")->required()->check(CLI::ExistingFile);
  compare->add_option("--out", out, "Output directory");
  compare->add_option("--jobs", jobs, "Parallel runs")->check(CLI::PositiveNumber);
  compare->add_option("--seeds", seeds, "Seed list");

  auto* report = app.add_subcommand("report", "Summarize runs across seeds");
  report->add_option("runs", runs, "Run directories")->required()->check(CLI::ExistingDirectory);
  report->add_option("--out", out, "Summary JSON path (default: stdout)");

  CLI11_PARSE(app, argc, argv);
  const emlab::LogFn log = quiet ? emlab::LogFn{} : emlab::LogFn{log_line};

  try {
    if (*train) {
      for (const auto& d : emlab::cmd_train(load(config, out, seeds), jobs, log)) std::cout << d.string() << '\n';
    } else if (*analyze) {
      const auto dirs = to_paths(runs);
      std::vector<std::function<void()>> tasks;
      for (const auto& d : dirs) {
        tasks.push_back([&, d] {
          const auto e = config.empty() ? emlab::experiment_for_run(d) : emlab::load_config(config);
          for (const auto& w : which) {
            if (w == "rank") emlab::analyze_rank(d, e);
            if (w == "entropy") emlab::analyze_entropy(d);
            if (w == "commutator") emlab::analyze_commutator(d, e, log);
            if (w == "sae") emlab::analyze_sae(d, e, log);
          }
        });
      }
      emlab::run_jobs(tasks, jobs);
      if (std::find(which.begin(), which.end(), "angles") != which.end()) {
        const emlab::fs::path dest = out.empty() ? dirs.front().parent_path() / "angles.csv" : emlab::fs::path(out);
        emlab::analyze_angles(dirs, dest);
        std::cout << dest.string() << '\n';
      }
    } else if (*compare) {
      const auto r = emlab::cmd_compare_curricula(load(config, out, seeds), jobs, log);
      for (const auto& s : r.summaries)
        std::cout << s.condition << " seed " << s.seed << " max drop acc(m=1) " << s.max_drop_m1 << '\n';
    } else if (*report) {
      const auto j = emlab::cmd_report(to_paths(runs), out);
      if (out.empty()) std::cout << j.dump(2) << '\n';
    }
  } catch (const emlab::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
