// Command-line front end: parses a subcommand plus common flags, loads the
// experiment config, and dispatches to the in-process command layer.
//
// Exit codes: 0 success, 1 usage error, 2 configuration error, 3 numeric
// failure (divergence, failed gradient audit, benchmark self-check), 4 I/O
// error.

#include <cstdio>
#include <string>

#include "CLI11.hpp"
#include "segaware/commands.hpp"
#include "segaware/config.hpp"
#include "segaware/errors.hpp"

namespace {

segaware::ExperimentConfig load_config(const std::string& path, bool have_seed,
                                        std::uint64_t seed) {
  segaware::ExperimentConfig cfg = path.empty()
                                       ? segaware::ExperimentConfig{}
                                       : segaware::load_experiment_config(path);
  if (have_seed) {
    // One flag reseeds everything downstream: dataset, both train stages.
    cfg.dataset.seed = seed;
    cfg.train.seed = seed;
    cfg.train_stage2.seed = seed;
    cfg.validate();
  }
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"segmentation-aware convolution experiments"};
  app.require_subcommand(1);

  std::string config_path, data_dir, out_dir, checkpoint_dir;
  std::uint64_t seed = 0;
  bool have_seed = false;
  std::uint64_t scene_index = 0;

  auto add_common = [&](CLI::App* cmd, bool needs_config) {
    auto* c = cmd->add_option("--config", config_path, "experiment config (JSON)");
    if (needs_config) c->required()->check(CLI::ExistingFile);
    cmd->add_option("--seed", seed, "override every seed in the config")
        ->each([&](const std::string&) { have_seed = true; });
    return cmd;
  };

  auto* gen = add_common(app.add_subcommand("gen-data", "write a synthetic dataset"), true);
  gen->add_option("--out", out_dir, "dataset directory")->required();

  auto* train = add_common(app.add_subcommand("train", "two-stage training"), true);
  train->add_option("--data", data_dir, "gen-data directory")
      ->required()
      ->check(CLI::ExistingDirectory);
  train->add_option("--out", out_dir, "checkpoint + metrics directory")->required();

  auto* eval = add_common(app.add_subcommand("eval", "score a checkpoint"), true);
  eval->add_option("--data", data_dir, "gen-data directory")
      ->required()
      ->check(CLI::ExistingDirectory);
  eval->add_option("--checkpoint", checkpoint_dir, "stage-2 checkpoint directory");
  eval->add_option("--out", out_dir, "report directory")->required();

  auto* grad = app.add_subcommand("grad-check", "audit analytic gradients");
  (void)grad;

  auto* bench = app.add_subcommand("bench", "time the convolution paths");
  bench->add_option("--out", out_dir, "bench.csv directory");

  auto* vis = add_common(app.add_subcommand("visualize", "render one test scene"), true);
  vis->add_option("--checkpoint", checkpoint_dir, "stage-1 or stage-2 checkpoint")
      ->required()
      ->check(CLI::ExistingDirectory);
  vis->add_option("--scene", scene_index, "test scene index (default 0)");
  vis->add_option("--out", out_dir, "image directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      cmd_gen_data(load_config(config_path, have_seed, seed), out_dir);
    } else if (train->parsed()) {
      cmd_train(load_config(config_path, have_seed, seed), data_dir, out_dir);
    } else if (eval->parsed()) {
      const auto report =
          cmd_eval(load_config(config_path, have_seed, seed), checkpoint_dir, data_dir,
                   out_dir);
      std::printf("%s\n", report.dump(2).c_str());
    } else if (grad->parsed()) {
      if (!segaware::cmd_grad_check().passed) {
        throw segaware::NumericError("gradient audit failed");
      }
    } else if (bench->parsed()) {
      segaware::cmd_bench(out_dir);
    } else if (vis->parsed()) {
      cmd_visualize(load_config(config_path, have_seed, seed), checkpoint_dir,
                    scene_index, out_dir);
    }
  } catch (const segaware::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const segaware::DimensionError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const segaware::NumericError& e) {
    std::fprintf(stderr, "numeric error: %s\n", e.what());
    return 3;
  } catch (const segaware::IoError& e) {
    std::fprintf(stderr, "io error: %s\n", e.what());
    return 4;
  }
  return 0;
}
