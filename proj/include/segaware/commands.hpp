#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "segaware/config.hpp"
#include "segaware/data_synth.hpp"
#include "segaware/net.hpp"
#include "segaware/train.hpp"

namespace segaware {

// In-process command implementations behind the CLI. Every command is
// deterministic given config + seed and throws ConfigError / NumericError /
// IoError on failure (the CLI maps those to exit codes 2 / 3 / 4). Commands
// that produce files also write the fully resolved config next to them.

// Writes cfg.dataset.train_count + test_count scenes into `out_dir` as
// scene_%05d.ppm / scene_%05d_labels.pgm / scene_%05d_flow.tnsr (test scenes
// numbered after the train scenes) plus a dataset.json manifest.
void cmd_gen_data(const ExperimentConfig& cfg, const std::string& out_dir);

// Scenes reloaded from a gen-data directory. Images carry the 8-bit
// quantization of the PPM round trip; labels and flow are exact.
struct DatasetOnDisk {
  std::vector<SyntheticScene> train;
  std::vector<SyntheticScene> test;
};
DatasetOnDisk load_dataset_dir(const std::string& dir);

struct TrainOutcome {
  TrainResult stage1;
  TrainResult stage2;
};

// Two-stage training from a gen-data directory: stage 1 fits the embedding
// net on the pairwise loss, stage 2 fits the task net (with the stage-1
// embeddings attached when the architecture uses them). Writes stage1/ and
// stage2/ checkpoints, stage1_metrics.csv / stage2_metrics.csv, and the
// resolved config into out_dir. A non-finite loss checkpoints the last good
// epoch, then raises NumericError.
TrainOutcome cmd_train(const ExperimentConfig& cfg, const std::string& data_dir,
                       const std::string& out_dir);

// Scores a stage-2 checkpoint on the test split and writes report.json
// (schema_version 1) into out_dir: overall mean IOU or average EPE, the
// per-trimap-halfwidth table, embedding mask AUC when the architecture has
// embeddings, and wall-clock per image. With eval.predict_ground_truth set
// the ground truth is scored as its own prediction (checkpoint_dir may then
// be empty) — a self-check that must give 1.0 / 0.0 everywhere.
nlohmann::json cmd_eval(const ExperimentConfig& cfg, const std::string& checkpoint_dir,
                        const std::string& data_dir, const std::string& out_dir);

struct GradCheckOutcome {
  GradAuditReport linear;    // bias-free smooth net, gate 1e-8
  GradAuditReport composed;  // embedding net + segaware task net, gate 1e-5
  GradAuditReport crf_head;  // segaware + CRF head + embedding input, gate 1e-5
  bool passed = false;
};

// Audits pinned miniature networks against central finite differences and
// prints a per-layer-kind table to stdout.
GradCheckOutcome cmd_grad_check();

struct BenchRow {
  std::size_t h = 0, w = 0, e = 0, f = 0;
  PatchSpec spec;
  double naive_ms = 0.0;     // direct-summation masked convolution
  double gemm_ms = 0.0;      // column+GEMM path, prebuilt masks
  double speedup = 0.0;      // naive_ms / gemm_ms
  double conv_ms = 0.0;      // standard convolution, same shape
  double segaware_ms = 0.0;  // masked conv including mask construction
  double overhead = 0.0;     // segaware_ms / conv_ms
};

// Median-of-5 timings over a pinned size ladder; verifies the two masked
// convolution implementations agree numerically on a small case first.
// Writes bench.csv into out_dir and returns the rows.
std::vector<BenchRow> cmd_bench(const std::string& out_dir);

// Renders test scene `scene_index` of the configured dataset through a
// checkpoint: input copy, PCA-to-RGB embedding image, masks of 4 seeded
// reference pixels from the embeddings and (for comparison) from raw color,
// and — when the checkpoint is a stage-2 one — the prediction map. AUCs of
// the embedding masks vs the color masks go into visualize.json.
void cmd_visualize(const ExperimentConfig& cfg, const std::string& checkpoint_dir,
                   std::uint64_t scene_index, const std::string& out_dir);

}  // namespace segaware
