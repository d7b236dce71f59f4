#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include "doctest.h"
#include "json.hpp"
#include "segaware/config.hpp"
#include "segaware/errors.hpp"

using namespace segaware;
using nlohmann::json;

namespace {

json parse_text(const char* text) { return json::parse(text); }

}  // namespace

TEST_CASE("config: empty document yields the defaults") {
  const ExperimentConfig cfg = parse_experiment_config(parse_text("{}"));
  CHECK(cfg.dataset.height == 64);
  CHECK(cfg.dataset.train_count == 200);
  CHECK(cfg.embed_net.embed_dim == 16);
  CHECK(cfg.embed_net.channels.size() == 7);
  CHECK(cfg.task_net.depth == 3);
  CHECK(cfg.task_net.segaware == SegawareMode::kNone);
  CHECK(cfg.task_net.post == PostMode::kNone);
  CHECK(cfg.train.lr == 0.1);
  CHECK(cfg.train.epochs == 10);
  CHECK(cfg.eval.trimap_halfwidths == std::vector<std::size_t>{1, 2, 3, 5, 10, 20, 40});
  CHECK_FALSE(cfg.eval.predict_ground_truth);
}

TEST_CASE("config: unknown keys are rejected with their location") {
  CHECK_THROWS_WITH_AS(parse_experiment_config(parse_text(R"({"datset": {}})")),
                       doctest::Contains("datset"), ConfigError);
  CHECK_THROWS_WITH_AS(
      parse_experiment_config(parse_text(R"({"dataset": {"hight": 3}})")),
      doctest::Contains("hight"), ConfigError);
  CHECK_THROWS_WITH_AS(
      parse_experiment_config(parse_text(R"({"train": {"stage2": {"lrr": 1}}})")),
      doctest::Contains("lrr"), ConfigError);
  CHECK_THROWS_WITH_AS(
      parse_experiment_config(parse_text(R"({"task_net": {"crf": {"w3": 1}}})")),
      doctest::Contains("w3"), ConfigError);
  CHECK_THROWS_WITH_AS(
      parse_experiment_config(parse_text(R"({"embed_net": {"loss": {"gamma": 1}}})")),
      doctest::Contains("gamma"), ConfigError);
}

TEST_CASE("config: type and enum errors") {
  CHECK_THROWS_AS(parse_experiment_config(parse_text(R"({"train": {"lr": "fast"}})")),
                  ConfigError);
  CHECK_THROWS_AS(parse_experiment_config(parse_text(R"({"dataset": {"height": -4}})")),
                  ConfigError);
  CHECK_THROWS_AS(
      parse_experiment_config(parse_text(R"({"task_net": {"segaware": "everywhere"}})")),
      ConfigError);
  CHECK_THROWS_AS(
      parse_experiment_config(parse_text(R"({"task_net": {"mask_norm": "linf"}})")),
      ConfigError);
  CHECK_THROWS_AS(
      parse_experiment_config(parse_text(R"({"task_net": {"conv_spec": [3, 3]}})")),
      ConfigError);
  CHECK_THROWS_AS(
      parse_experiment_config(
          parse_text(R"({"embed_net": {"loss": {"neighborhoods": [[3]]}}})")),
      ConfigError);
  // Structural validation still runs after parsing.
  CHECK_THROWS_AS(
      parse_experiment_config(parse_text(R"({"train": {"momentum": 1.5}})")),
      ConfigError);
  CHECK_THROWS_AS(
      parse_experiment_config(parse_text(R"({"eval": {"trimap_halfwidths": [0]}})")),
      ConfigError);
}

TEST_CASE("config: enums and patch specs parse") {
  const ExperimentConfig cfg = parse_experiment_config(parse_text(R"({
    "task_net": {
      "segaware": "all_layers", "post": "crf", "mask_norm": "l2",
      "conv_spec": [5, 5, 2],
      "crf": {"bilateral_spec": [7, 7, 3], "iterations": 3}
    },
    "embed_net": {"loss": {"norm": "l2", "neighborhoods": [[3, 1], [5, 4]]}}
  })"));
  CHECK(cfg.task_net.segaware == SegawareMode::kAllLayers);
  CHECK(cfg.task_net.post == PostMode::kCrf);
  CHECK(cfg.task_net.mask_norm == Norm::L2);
  CHECK(cfg.task_net.conv_spec.kernel_h == 5);
  CHECK(cfg.task_net.conv_spec.atrous == 2);
  CHECK(cfg.task_net.crf.bilateral_spec.kernel_h == 7);
  CHECK(cfg.task_net.crf.bilateral_spec.atrous == 3);
  CHECK(cfg.task_net.crf.iterations == 3);
  CHECK(cfg.embed_net.loss.norm == Norm::L2);
  REQUIRE(cfg.embed_net.loss.neighborhoods.size() == 2);
  CHECK(cfg.embed_net.loss.neighborhoods[1].first == 5);
  CHECK(cfg.embed_net.loss.neighborhoods[1].second == 4);
}

TEST_CASE("config: stage-2 fields inherit from train and apply overrides") {
  const ExperimentConfig cfg = parse_experiment_config(parse_text(R"({
    "train": {"lr": 0.2, "epochs": 7, "seed": 11,
              "stage2": {"lr": 0.01, "stage2_embed_loss_weight": 0.3}}
  })"));
  CHECK(cfg.train.lr == 0.2);
  CHECK(cfg.train.epochs == 7);
  CHECK(cfg.train_stage2.lr == 0.01);                       // overridden
  CHECK(cfg.train_stage2.epochs == 7);                      // inherited
  CHECK(cfg.train_stage2.seed == 11);                       // inherited
  CHECK(cfg.train_stage2.stage2_embed_loss_weight == 0.3);  // overridden
  CHECK(cfg.train.stage2_embed_loss_weight == 0.0);
}

TEST_CASE("config: serialized echo parses back to the same configuration") {
  ExperimentConfig cfg;
  cfg.dataset.height = 32;
  cfg.dataset.width = 48;
  cfg.dataset.max_shapes = 4;
  cfg.dataset.noise_sigma = 0.02;
  cfg.dataset.seed = 99;
  cfg.embed_net.channels = {4, 4, 8, 8, 8, 8, 8};
  cfg.embed_net.embed_dim = 6;
  cfg.embed_net.loss.alpha = 0.25;
  cfg.embed_net.loss.norm = Norm::L2;
  cfg.embed_net.loss.neighborhoods = {{3, 1}, {3, 4}};
  cfg.embed_net.fused_loss_weight = 0.5;
  cfg.task_net.channels = 12;
  cfg.task_net.depth = 4;
  cfg.task_net.out_channels = 5;
  cfg.task_net.regression = true;
  cfg.task_net.segaware = SegawareMode::kLastLayer;
  cfg.task_net.post = PostMode::kBilateral;
  cfg.task_net.bilateral_reps = 2;
  cfg.task_net.bilateral_lambda = 3.5;
  cfg.task_net.mask_norm = Norm::L2;
  cfg.task_net.lambda_init = 0.7;
  cfg.task_net.conv_spec = PatchSpec{5, 5, 1};
  cfg.task_net.crf.w1 = 2.0;
  cfg.task_net.crf.theta_beta = 0.6;
  cfg.task_net.crf.spatial_spec = PatchSpec{3, 3, 1};
  cfg.train.lr = 0.05;
  cfg.train.momentum = 0.8;
  cfg.train.epochs = 3;
  cfg.train.batch = 2;
  cfg.train.seed = 21;
  cfg.train_stage2 = cfg.train;
  cfg.train_stage2.lr = 0.01;
  cfg.train_stage2.stage2_embed_loss_weight = 0.1;
  cfg.eval.trimap_halfwidths = {1, 5};
  cfg.eval.predict_ground_truth = true;

  const ExperimentConfig back = parse_experiment_config(experiment_config_json(cfg));
  CHECK(back.dataset.height == cfg.dataset.height);
  CHECK(back.dataset.width == cfg.dataset.width);
  CHECK(back.dataset.max_shapes == cfg.dataset.max_shapes);
  CHECK(back.dataset.noise_sigma == cfg.dataset.noise_sigma);
  CHECK(back.dataset.seed == cfg.dataset.seed);
  CHECK(back.embed_net.channels == cfg.embed_net.channels);
  CHECK(back.embed_net.embed_dim == cfg.embed_net.embed_dim);
  CHECK(back.embed_net.loss.alpha == cfg.embed_net.loss.alpha);
  CHECK(back.embed_net.loss.norm == cfg.embed_net.loss.norm);
  CHECK(back.embed_net.loss.neighborhoods == cfg.embed_net.loss.neighborhoods);
  CHECK(back.embed_net.fused_loss_weight == cfg.embed_net.fused_loss_weight);
  CHECK(back.task_net.channels == cfg.task_net.channels);
  CHECK(back.task_net.depth == cfg.task_net.depth);
  CHECK(back.task_net.out_channels == cfg.task_net.out_channels);
  CHECK(back.task_net.regression == cfg.task_net.regression);
  CHECK(back.task_net.segaware == cfg.task_net.segaware);
  CHECK(back.task_net.post == cfg.task_net.post);
  CHECK(back.task_net.bilateral_reps == cfg.task_net.bilateral_reps);
  CHECK(back.task_net.bilateral_lambda == cfg.task_net.bilateral_lambda);
  CHECK(back.task_net.mask_norm == cfg.task_net.mask_norm);
  CHECK(back.task_net.lambda_init == cfg.task_net.lambda_init);
  CHECK(back.task_net.conv_spec.kernel_h == cfg.task_net.conv_spec.kernel_h);
  CHECK(back.task_net.crf.w1 == cfg.task_net.crf.w1);
  CHECK(back.task_net.crf.theta_beta == cfg.task_net.crf.theta_beta);
  CHECK(back.train.lr == cfg.train.lr);
  CHECK(back.train.momentum == cfg.train.momentum);
  CHECK(back.train.epochs == cfg.train.epochs);
  CHECK(back.train.seed == cfg.train.seed);
  CHECK(back.train_stage2.lr == cfg.train_stage2.lr);
  CHECK(back.train_stage2.stage2_embed_loss_weight ==
        cfg.train_stage2.stage2_embed_loss_weight);
  CHECK(back.eval.trimap_halfwidths == cfg.eval.trimap_halfwidths);
  CHECK(back.eval.predict_ground_truth == cfg.eval.predict_ground_truth);
}

TEST_CASE("config: file round trip and file errors") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "segaware_cfg_test";
  fs::create_directories(dir);
  const std::string path = (dir / "cfg.json").string();

  ExperimentConfig cfg;
  cfg.train.lr = 0.025;
  cfg.dataset.train_count = 12;
  write_experiment_config(path, cfg);
  const ExperimentConfig back = load_experiment_config(path);
  CHECK(back.train.lr == 0.025);
  CHECK(back.dataset.train_count == 12);

  CHECK_THROWS_AS(load_experiment_config((dir / "missing.json").string()), IoError);
  std::ofstream((dir / "broken.json").string()) << "{ not json";
  CHECK_THROWS_AS(load_experiment_config((dir / "broken.json").string()), ConfigError);
  fs::remove_all(dir);
}
