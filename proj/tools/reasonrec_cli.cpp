// reasonrec: command-line front end.
//
//   reasonrec <gen-data|train|eval|bench-latency|inspect-trajectory|plot-curves>
//             --config PATH [--seed INT] [--checkpoint last|PATH] [--strict]
//             [--ablation none|no_reasoning|no_rc|no_rd] [--estimator grpo|rloo]
//             [--pooling last|mean|max]
//
// Exit codes: 0 success, 1 usage or validation error, 2 runtime failure.

#include <exception>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "reasonrec/reasonrec.hpp"

namespace rr = reasonrec;

namespace {

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> checkpoint;
  bool strict = false;
  std::optional<std::string> ablation, estimator, pooling;
};

void add_common(CLI::App* sub, Flags& f, bool with_checkpoint) {
  sub->add_option("--config", f.config, "run configuration (JSON)")->required();
  sub->add_option("--seed", f.seed, "seed for data, initialization and sampling");
  sub->add_flag("--strict", f.strict, "serial execution for byte-exact reproducibility");
  sub->add_option("--ablation", f.ablation, "none|no_reasoning|no_rc|no_rd");
  sub->add_option("--estimator", f.estimator, "grpo|rloo");
  sub->add_option("--pooling", f.pooling, "last|mean|max");
  if (with_checkpoint) sub->add_option("--checkpoint", f.checkpoint, "'last' or a checkpoint path");
}

int run(const std::string& command, const Flags& f) {
  rr::RunConfig cfg = rr::load_run_config(f.config);
  rr::Overrides o;
  o.seed = f.seed;
  o.strict = f.strict;
  o.ablation = f.ablation;
  o.estimator = f.estimator;
  o.pooling = f.pooling;
  rr::apply_overrides(cfg, o);
  cfg.validate();
  const rr::RunPaths paths{cfg.output_dir};

  if (command == "plot-curves") {
    for (const auto& p : rr::run_plot_curves(paths)) std::cout << p.string() << "\n";
    return 0;
  }

  rr::RunLock lock(paths.lock());
  if (command == "gen-data") {
    rr::write_config_echo(cfg, paths);
    rr::run_gen_data(cfg, paths, std::cout);
  } else if (command == "train") {
    try {
      rr::run_train(cfg, paths, std::cout);
    } catch (const rr::NonFiniteError& e) {
      rr::write_text(paths.reports() / "nonfinite_dump.json", e.state() + "\n");
      throw;
    }
  } else if (command == "eval") {
    rr::run_eval(cfg, paths, f.checkpoint, f.pooling.has_value(), std::cout);
  } else if (command == "bench-latency") {
    rr::run_bench_latency(cfg, paths, f.checkpoint, std::cout);
  } else if (command == "inspect-trajectory") {
    rr::run_inspect(cfg, paths, f.checkpoint, f.pooling.has_value(), std::cout);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"reasoning recommender: data, training, evaluation and latency tools"};
  app.require_subcommand(1, 1);
  Flags flags;
  const char* commands[] = {"gen-data", "train", "eval", "bench-latency", "inspect-trajectory", "plot-curves"};
  const char* help[] = {"generate the synthetic corpus",
                        "train the policy",
                        "evaluate a checkpoint on the configured split",
                        "time reasoning, catalog scoring and identifier decoding",
                        "sample and dump trajectories with rewards",
                        "render metric curves as SVG"};
  for (int i = 0; i < 6; ++i) {
    const std::string name = commands[i];
    const bool ckpt = name == "eval" || name == "bench-latency" || name == "inspect-trajectory";
    add_common(app.add_subcommand(name, help[i]), flags, ckpt);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    std::cout << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 1;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    return run(command, flags);
  } catch (const rr::ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
