#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "json.hpp"
#include "segaware/data_synth.hpp"
#include "segaware/net.hpp"
#include "segaware/train.hpp"

namespace segaware {

// Evaluation settings: which trimap bands to score, and an optional
// self-check mode that scores the ground truth against itself (every IOU
// must then be exactly 1).
struct EvalConfig {
  std::vector<std::size_t> trimap_halfwidths = {1, 2, 3, 5, 10, 20, 40};
  bool predict_ground_truth = false;

  void validate() const;
};

// Everything one experiment needs, mirrored 1:1 by a JSON document with
// sections dataset / embed_net / task_net / train / eval. Unknown keys are
// rejected everywhere so a typo cannot silently fall back to a default.
// The optional "stage2" object inside "train" overrides individual fields
// for the stage-2 run (it inherits the rest).
struct ExperimentConfig {
  DatasetConfig dataset;
  EmbedNetConfig embed_net;
  TaskNetConfig task_net;
  TrainConfig train;         // stage 1
  TrainConfig train_stage2;  // stage 2; defaults to `train`
  EvalConfig eval;

  void validate() const;
};

// Parse/serialize. Parsing validates; serialization emits every field fully
// resolved (including inherited stage-2 values), so the echo written next
// to a run's outputs reproduces the run exactly.
ExperimentConfig parse_experiment_config(const nlohmann::json& doc);
ExperimentConfig load_experiment_config(const std::string& path);
nlohmann::json experiment_config_json(const ExperimentConfig& cfg);
void write_experiment_config(const std::string& path, const ExperimentConfig& cfg);

}  // namespace segaware
