// conflab: command-line front end for the experiment harness.
//
//   conflab run --config configs/e1_cmc.json --out out/e1
//   conflab sweep --config configs/e3_sweep.json --workers 4
//   conflab validate --config configs/e3_sweep.json
//   conflab oracle-check
//   conflab replay --config out/e1/manifest.json
//
// Exit codes: 0 ok, 1 NonConvergence (or failed check) under --strict, or a
// replay mismatch, 2 configuration error.

#include <CLI11.hpp>

#include <cstdio>
#include <string>

#include "conflab/experiment.hpp"

namespace ex = conflab::exp;

int main(int argc, char** argv) {
  CLI::App app{"Numerical lab for the conformal constraint equations"};
  app.require_subcommand(1);

  std::string config, out;
  bool strict = false, trace = false;
  int workers = 0;
  auto common = [&](CLI::App* sc, bool need_config) {
    auto* o = sc->add_option("--config", config, "experiment config (JSON), or a manifest for replay");
    if (need_config) o->required();
    sc->add_option("--out", out, "output directory (default: the config's 'out')");
    sc->add_flag("--strict", strict, "exit 1 when any run ends in NonConvergence or a check fails");
    sc->add_flag("--trace", trace, "also write the final fields of every run");
    sc->add_option("--workers", workers, "worker threads (default: CONFLAB_WORKERS or all cores)");
  };
  auto* run = app.add_subcommand("run", "run one experiment");
  auto* sweep = app.add_subcommand("sweep", "expand the config's sweep block and run every point");
  auto* validate = app.add_subcommand("validate", "seed hypotheses, certificate, Yamabe sign, TT receipt");
  auto* oracle = app.add_subcommand("oracle-check", "compare reduced operators with the full-tensor oracle");
  auto* rep = app.add_subcommand("replay", "re-run a manifest and compare every CSV byte for byte");
  common(run, true);
  common(sweep, true);
  common(validate, true);
  common(oracle, false);
  common(rep, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  ex::RunOptions opt;
  opt.workers = workers > 0 ? workers : ex::default_workers();
  opt.strict = strict;
  opt.trace = trace;
  opt.verbose = true;

  try {
    if (rep->parsed()) {
      const std::filesystem::path man(config);
      const std::filesystem::path dst = out.empty() ? man.parent_path() / "replay" : std::filesystem::path(out);
      const auto r = ex::replay(man, dst, opt.workers);
      for (const auto& [name, same] : r.files)
        std::printf("%-9s %s\n", same ? "identical" : "DIFFERS", name.c_str());
      std::printf("replay: %zu csv files, %s\n", r.files.size(), r.exit_code ? "mismatch" : "all identical");
      return r.exit_code;
    }

    ex::Config c;
    if (oracle->parsed() && config.empty()) {
      c = ex::parse_config(ex::json{{"experiment", "oracle-check"}, {"out", "out/oracle-check"}});
    } else {
      c = ex::load_config(config);
    }
    if (validate->parsed()) {
      c.experiment = "validate";
      c.raw["experiment"] = "validate";
    } else if (oracle->parsed()) {
      c.experiment = "oracle-check";
      c.raw["experiment"] = "oracle-check";
    }
    const std::filesystem::path dst = out.empty() ? std::filesystem::path(c.out) : std::filesystem::path(out);
    const auto r = sweep->parsed() ? ex::run_sweep(c, dst, opt) : ex::run_experiment(c, dst, opt);
    std::printf("%s: %zu summary rows, %zu files in %s%s\n", c.experiment.c_str(), r.rows, r.files.size(),
                dst.string().c_str(), r.any_nonconvergence ? " (some runs did not converge)" : "");
    return r.exit_code;
  } catch (const ex::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const conflab::Error& e) {
    if (e.code() == conflab::ErrorCode::ConfigError) {
      std::fprintf(stderr, "config error: %s\n", e.what());
      return 2;
    }
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
