#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "dks/runner.hpp"

namespace {

// Applies command-line overrides on top of the config file.
dks::RunConfig load_config(const std::string& config_path, const std::string& out,
                           int64_t seed, int64_t precision, bool have_seed) {
  dks::RunConfig rc = config_path.empty() ? dks::parse_run_config("{}")
                                          : dks::load_run_config(config_path);
  if (!out.empty()) rc.out = out;
  if (have_seed) {
    rc.seed = static_cast<uint64_t>(seed);
    rc.train.seed = rc.seed;
  }
  if (precision != 0) {
    if (precision != 32 && precision != 64)
      throw dks::ConfigError("--precision must be 32 or 64");
    rc.precision = precision;
  }
  return rc;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dks: multi-head training engine with pairwise knowledge matching"};
  app.require_subcommand(1);

  std::string config_path, out_dir, ckpt_path, data_dir, suite = "all", axis, kind, src_dir;
  std::string values_csv;
  int64_t seed = 0, precision = 0, n_samples = 4'000'000, grad_elements = 200;
  bool have_seed = false;

  auto add_common = [&](CLI::App* cmd, bool with_precision = true) {
    cmd->add_option("--config", config_path, "JSON run configuration");
    cmd->add_option("--out", out_dir, "output directory");
    cmd->add_option("--seed", seed, "seed override")->each([&](const std::string&) {
      have_seed = true;
    });
    if (with_precision) cmd->add_option("--precision", precision, "32 or 64");
  };

  CLI::App* train = app.add_subcommand("train", "train a model per config");
  add_common(train);
  train->get_option("--config")->required();

  CLI::App* ablate = app.add_subcommand("ablate", "run one training per axis value");
  add_common(ablate);
  ablate->get_option("--config")->required();
  ablate->add_option("--axis", axis, "strategy | attachments")->required();
  ablate->add_option("--values", values_csv, "comma-separated axis values")->required();

  CLI::App* exp = app.add_subcommand("export", "strip aux branches from a checkpoint");
  exp->add_option("--ckpt", ckpt_path, "input checkpoint")->required();
  exp->add_option("--out", out_dir, "output checkpoint path")->required();

  CLI::App* verify = app.add_subcommand("verify", "numerical verification suites");
  verify->add_option("--suite", suite, "grads | synergy | all");
  verify->add_option("--out", out_dir, "report directory");
  verify->add_option("--seed", seed, "seed")->each([&](const std::string&) { have_seed = true; });
  verify->add_option("--samples", n_samples, "Monte-Carlo samples per sigma");
  verify->add_option("--grad-samples", grad_elements,
                     "max elements per parameter group in the model audit (0 = all)");

  CLI::App* gen = app.add_subcommand("gen-data", "write a synthetic dataset");
  add_common(gen, false);
  gen->get_option("--out")->required();

  CLI::App* conv = app.add_subcommand("convert-data", "convert raw CIFAR-10/MNIST dumps");
  conv->add_option("--kind", kind, "cifar10 | mnist")->required();
  conv->add_option("--src", src_dir, "directory with the raw files")->required();
  conv->add_option("--out", out_dir, "output directory")->required();

  CLI::App* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  ev->add_option("--ckpt", ckpt_path, "checkpoint path")->required();
  ev->add_option("--data", data_dir, "dataset directory")->required();
  ev->add_option("--precision", precision, "32 or 64");
  ev->add_option("--out", out_dir, "optional report directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    app.exit(e);
    return dks::kExitConfig;
  }

  try {
    if (train->parsed()) {
      return dks::run_train(load_config(config_path, out_dir, seed, precision, have_seed));
    }
    if (ablate->parsed()) {
      std::vector<std::string> values;
      std::stringstream ss(values_csv);
      std::string v;
      while (std::getline(ss, v, ','))
        if (!v.empty()) values.push_back(v);
      return dks::run_ablate(load_config(config_path, out_dir, seed, precision, have_seed), axis,
                             values);
    }
    if (exp->parsed()) return dks::run_export(ckpt_path, out_dir);
    if (verify->parsed()) {
      dks::VerifyOptions opts;
      opts.suite = suite;
      if (!out_dir.empty()) opts.out_dir = out_dir;
      if (have_seed) opts.seed = static_cast<uint64_t>(seed);
      opts.n_samples = n_samples;
      opts.grad_elements_per_group = grad_elements;
      return dks::run_verify(opts);
    }
    if (gen->parsed()) {
      return dks::run_gen_data(load_config(config_path, "", seed, 0, have_seed), out_dir);
    }
    if (conv->parsed()) return dks::run_convert_data(kind, src_dir, out_dir);
    if (ev->parsed()) {
      if (precision != 0 && precision != 32 && precision != 64)
        throw dks::ConfigError("--precision must be 32 or 64");
      return dks::run_eval(ckpt_path, data_dir, precision == 0 ? 32 : precision, out_dir);
    }
  } catch (const dks::TrainingAbort& e) {
    std::cerr << "training aborted: " << e.what() << "\n";
    return dks::kExitTrainAbort;
  } catch (const dks::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return dks::kExitConfig;
  } catch (const dks::UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return dks::kExitConfig;
  } catch (const dks::IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return dks::kExitIo;
  } catch (const dks::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return dks::kExitIo;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 70;
  }
  return dks::kExitConfig;
}
