// fmlab: command-line driver for the stability, reconstruction, scaling and
// RKHS sampling experiments.
#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <thread>

#include <CLI11.hpp>

#include "fmlab/experiment.hpp"
#include "fmlab/parallel.hpp"

namespace {

struct Options {
  std::string config;
  std::string out = "out";
  std::optional<std::uint64_t> seed;
  int threads = 0;
};

int run(const std::string& experiment, const Options& o) {
  using namespace fmlab;
  experiment::ExperimentConfig cfg;
  try {
    cfg = experiment::load_config(o.config, experiment, o.seed);
  } catch (const Error& e) {
    std::cerr << "fmlab " << experiment << ": " << e.what() << "\n";
    return experiment::exit_code_for(e.kind());
  }
  set_thread_count(o.threads > 0 ? o.threads : static_cast<int>(std::thread::hardware_concurrency()));
  const experiment::ExperimentReport rep = experiment::run_experiment(cfg, o.out);
  if (rep.status != "ok") {
    std::cerr << "fmlab " << experiment << ": failed in stage '" << rep.stage << "': " << rep.diagnostics << "\n";
    return rep.exit_code;
  }
  std::cout << experiment << " finished; report written to " << (std::filesystem::path(o.out) / "report.json").string()
            << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Finite-measurement stability and reconstruction experiments"};
  app.require_subcommand(1);
  Options o;
  std::string chosen;
  for (const char* name : {"stability", "reconstruct", "scaling", "rkhs-demo"}) {
    CLI::App* sub = app.add_subcommand(name, std::string("run the ") + name + " experiment");
    sub->add_option("--config", o.config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
    sub->add_option("--out", o.out, "output directory")->capture_default_str();
    sub->add_option("--seed", o.seed, "override the config seed");
    sub->add_option("--threads", o.threads, "worker threads (default: hardware concurrency)")
        ->check(CLI::PositiveNumber);
    sub->callback([&chosen, name] { chosen = name; });
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  try {
    return run(chosen, o);
  } catch (const fmlab::Error& e) {
    std::cerr << "fmlab: " << e.what() << "\n";
    return fmlab::experiment::exit_code_for(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "fmlab: " << e.what() << "\n";
    return 3;
  }
}
