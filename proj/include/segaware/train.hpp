#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "segaware/data_synth.hpp"
#include "segaware/net.hpp"

namespace segaware {

struct TrainConfig {
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 0.0;
  std::size_t epochs = 10;
  std::size_t batch = 4;  // scenes per SGD step, gradients averaged
  std::uint64_t seed = 1;
  // Weight of the pairwise embedding loss kept attached during stage-2
  // fine-tuning; 0 trains the task loss alone.
  double stage2_embed_loss_weight = 0.0;

  void validate() const;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double loss = 0.0;
  double val_metric = 0.0;  // stage 1: mask AUC; stage 2: mIOU or aEPE
};

struct TrainResult {
  std::vector<EpochRecord> log;
  bool aborted = false;
  std::string abort_reason;
};

// SGD with classical momentum and optional L2 weight decay. Parameters
// flagged nonneg are projected back to >= 0 after each step.
class Sgd {
 public:
  Sgd(std::vector<ParamRef> params, double lr, double momentum, double weight_decay);

  void step();
  std::vector<Tensor>& velocity() { return vel_; }
  const std::vector<ParamRef>& params() const { return params_; }

 private:
  std::vector<ParamRef> params_;
  std::vector<Tensor> vel_;
  double lr_, momentum_, weight_decay_;
};

// Stage 1: embedding net alone on the pairwise loss. `val`, when given,
// is scored each epoch with the fused-embedding mask AUC (median over at
// most 5 scenes). `start_epoch` supports resuming: epochs before it are
// skipped, with identical per-epoch data orders either way.
TrainResult train_stage1(EmbeddingNet& net, const std::vector<SyntheticScene>& train,
                         const std::vector<SyntheticScene>* val, const TrainConfig& cfg,
                         Sgd* optimizer = nullptr, std::size_t start_epoch = 0);

// Stage 2: task net (optionally composed with a fine-tuned embedding net)
// on cross-entropy or flow regression. Validation metric is mean IOU for
// classification and average EPE for regression (at most 10 scenes).
TrainResult train_stage2(TaskNet& task, EmbeddingNet* embed,
                         const std::vector<SyntheticScene>& train,
                         const std::vector<SyntheticScene>* val, const TrainConfig& cfg,
                         Sgd* optimizer = nullptr, std::size_t start_epoch = 0);

// ---------------------------------------------------------------------------
// Checkpoints: one .tnsr file per parameter plus manifest.json. When an
// optimizer is given, its velocity buffers are stored alongside so training
// can resume exactly.
// ---------------------------------------------------------------------------

void save_checkpoint(const std::string& dir, const std::string& kind, std::size_t epoch,
                     const std::vector<ParamRef>& params,
                     const std::vector<Tensor>* velocity = nullptr);

struct CheckpointInfo {
  std::string kind;
  std::size_t epoch = 0;
  bool has_velocity = false;
};

// Reads manifest + tensors into the given parameter set. Any missing,
// extra, or differently-shaped entry raises an IoError naming them all.
CheckpointInfo load_checkpoint(const std::string& dir, const std::vector<ParamRef>& params,
                               std::vector<Tensor>* velocity = nullptr);

// epoch,loss,val_metric rows with full double precision.
void write_metrics_csv(const std::string& path, const std::vector<EpochRecord>& log);

}  // namespace segaware
