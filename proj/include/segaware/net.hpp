#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "segaware/crf.hpp"
#include "segaware/embedding_loss.hpp"
#include "segaware/labels.hpp"
#include "segaware/mask_ops.hpp"
#include "segaware/patch.hpp"
#include "segaware/rng.hpp"
#include "segaware/tensor.hpp"

namespace segaware {

enum class LayerKind {
  kConv,
  kSegawareConv,
  kRelu,
  kMaxpool2,
  kUpsample,
  kConcat,
  kFuse1x1,
  kBilateral,
  kCrf,
  kSoftmaxLoss,
  kRegressLoss,
};

const char* layer_kind_name(LayerKind kind);

// Named handle on one learnable tensor and its gradient accumulator. The
// optimizer and the numeric audit both walk these; `nonneg` marks mask
// sharpness parameters that are projected back to >= 0 after every step.
struct ParamRef {
  std::string name;
  LayerKind kind = LayerKind::kConv;
  Tensor* value = nullptr;
  Tensor* grad = nullptr;
  bool nonneg = false;
};

// One convolution unit on the im2col/GEMM path: plain, 1x1 fusion, or
// segmentation-aware (mask-weighted columns, with a learnable sharpness
// lambda against the shared embedding distances). Optional fused ReLU.
struct ConvUnit {
  std::string name;
  LayerKind kind = LayerKind::kConv;
  ConvFilter filter;
  bool relu = false;
  Norm norm = Norm::L1;                        // segaware units only
  Tensor lambda{std::vector<std::size_t>{1}};  // segaware units only
  Tensor grad_w, grad_b, grad_lambda;

  bool segaware() const { return kind == LayerKind::kSegawareConv; }
  std::size_t out_channels() const { return filter.weights.shape[1]; }

  // Uniform init in +-sqrt(3 / fan_in), zero bias, grads zeroed.
  void init(std::string unit_name, LayerKind unit_kind, std::size_t in_ch,
            std::size_t out_ch, const PatchSpec& spec, bool with_relu, Rng& rng);
  void zero_grads();
  void collect_params(std::vector<ParamRef>& out);

  // `dist` is required for segaware units (embedding distances under
  // `norm` on the unit's patch geometry).
  Tensor forward(const Tensor& x, const ColMatrix* dist) const;
  // Chains grad_out through the (optional) ReLU and the convolution,
  // accumulating parameter grads. For segaware units, `emb` must be the
  // field `dist` was measured on and grad_emb_accum receives its gradient.
  Tensor backward(const Tensor& grad_out, const Tensor& x, const Tensor& y,
                  const ColMatrix* dist, const Tensor* emb, Tensor* grad_emb_accum);
};

// 2x2 max pooling over even-sized maps; `argmax` records the flat source
// index per output element (first maximum wins, deterministically).
Tensor maxpool2(const Tensor& x, std::vector<std::size_t>* argmax);
Tensor maxpool2_backward(const Tensor& grad, const std::vector<std::size_t>& argmax,
                         std::size_t in_h, std::size_t in_w);

// Channel-wise concatenation of equal-resolution maps, and its inverse.
Tensor concat_channels(const std::vector<const Tensor*>& parts);
std::vector<Tensor> split_channels(const Tensor& x, const std::vector<std::size_t>& sizes);

// ---------------------------------------------------------------------------
// Embedding network: 7-conv trunk with pools after the 2nd and 4th conv,
// 1x1 embedding heads at the three scales, nearest upsampling to full
// resolution, channel concat, and a 1x1 fusion to the final embedding.
// ---------------------------------------------------------------------------

struct EmbedNetConfig {
  std::vector<std::size_t> channels = {16, 16, 32, 32, 32, 32, 32};
  std::size_t embed_dim = 16;
  LossConfig loss;
  // Weight of the pairwise loss applied to the fused embedding; the fusion
  // layer only learns in stage 1 through this head.
  double fused_loss_weight = 1.0;

  void validate() const;
};

struct EmbedCache {
  std::vector<Tensor> conv_in;             // input to each trunk conv
  std::vector<Tensor> conv_out;            // post-activation outputs
  std::vector<std::size_t> pool_argmax[2];
  Tensor scale_feat[3];  // features feeding each embedding head
  Tensor emb[3];         // native-resolution embeddings
  Tensor emb_up[3];      // upsampled to full resolution
  Tensor concat;
  Tensor fused;
};

class EmbeddingNet {
 public:
  EmbeddingNet(const EmbedNetConfig& cfg, Rng& rng);

  const EmbedNetConfig& config() const { return cfg_; }

  // Returns the fused H x W x D embedding; fills `cache` when given.
  Tensor forward(const Tensor& image, EmbedCache* cache) const;

  // Backpropagates loss_weight * (per-scale + weighted fused pairwise
  // losses) when `labels` is given, plus an external gradient on the fused
  // output when `grad_fused` is given (stage-2 fine-tuning). Returns the
  // weighted embedding loss value. Gradients accumulate until zero_grads().
  double backward(const EmbedCache& cache, const LabelMap* labels, double loss_weight,
                  const Tensor* grad_fused);

  // The same loss value backward() would report (at weight 1), grad-free.
  double loss_only(const EmbedCache& cache, const LabelMap& labels) const;

  std::vector<ParamRef> params();
  void zero_grads();

 private:
  EmbedNetConfig cfg_;
  std::vector<ConvUnit> trunk_;
  std::vector<ConvUnit> heads_;
  ConvUnit fuse_;
};

// ---------------------------------------------------------------------------
// Task network: small FCN whose 3x3 convolutions can be swapped to
// segmentation-aware mode, with optional output-stage bilateral filtering
// or CRF inference against the shared embedding.
// ---------------------------------------------------------------------------

enum class SegawareMode { kNone, kLastLayer, kAllLayers };
enum class PostMode { kNone, kBilateral, kCrf };

const char* segaware_mode_name(SegawareMode m);
const char* post_mode_name(PostMode m);

struct TaskNetConfig {
  std::size_t in_channels = 3;
  std::size_t channels = 16;
  std::size_t depth = 3;         // 3x3 trunk convolutions
  std::size_t out_channels = 6;  // classes, or regression channels
  bool regression = false;       // L2 head instead of softmax head
  bool relu = true;              // disabled only by the linear gradient audit
  SegawareMode segaware = SegawareMode::kNone;
  PostMode post = PostMode::kNone;
  std::size_t bilateral_reps = 4;
  double bilateral_lambda = 1.0;  // fixed (not learned) post-filter sharpness
  Norm mask_norm = Norm::L1;
  double lambda_init = 1.0;
  PatchSpec conv_spec{3, 3, 1};
  CRFParams crf;

  bool needs_embedding() const {
    return segaware != SegawareMode::kNone || post != PostMode::kNone;
  }
  void validate() const;
};

struct TaskCache {
  std::vector<Tensor> conv_in;
  std::vector<Tensor> conv_out;
  Tensor logits;                // head output before any post stage
  std::vector<Tensor> post_in;  // input to each bilateral repetition
  MaskField post_masks;
  bool has_post_masks = false;
  CRFForward crf;
  bool has_crf = false;
  Tensor output;  // scores (logits), filtered scores, or CRF marginals
  Tensor emb;     // embedding used by this pass
  ColMatrix dist; // embedding distances on conv_spec under mask_norm
  bool has_emb = false;
};

class TaskNet {
 public:
  TaskNet(const TaskNetConfig& cfg, Rng& rng);

  const TaskNetConfig& config() const { return cfg_; }

  // `emb` is required whenever the config needs an embedding. Returns the
  // post-processed per-pixel output.
  Tensor forward(const Tensor& image, const Tensor* emb, TaskCache* cache) const;

  // Loss + full backward from a saved forward. Classification uses
  // `labels` (softmax cross-entropy, or negative log marginals after a CRF
  // head); regression uses `flow_target`. grad_emb, when given, accumulates
  // the gradient w.r.t. the shared embedding. Returns the loss.
  double backward(const TaskCache& cache, const LabelMap* labels,
                  const Tensor* flow_target, Tensor* grad_emb);

  // Loss of an already-computed output, grad-free.
  double loss_only(const Tensor& output, const LabelMap* labels,
                   const Tensor* flow_target) const;

  std::vector<ParamRef> params();
  void zero_grads();

 private:
  TaskNetConfig cfg_;
  std::vector<ConvUnit> trunk_;
  ConvUnit head_;
  Tensor crf_w_[2];       // [1] each: learnable CRF mixture weights w1, w2
  Tensor grad_crf_w_[2];
};

// ---------------------------------------------------------------------------
// Losses and prediction helpers
// ---------------------------------------------------------------------------

// Per-pixel softmax cross-entropy averaged over non-ignore pixels; `grad`
// (optional) receives d loss / d logits.
double softmax_xent(const Tensor& logits, const LabelMap& labels, Tensor* grad);

// Negative log likelihood of given per-pixel distributions (CRF output).
double nll_prob(const Tensor& probs, const LabelMap& labels, Tensor* grad);

// 0.5 * mean over pixels of the squared channel difference.
double l2_loss(const Tensor& y, const Tensor& target, Tensor* grad);

// Channel argmax per pixel.
LabelMap argmax_labels(const Tensor& scores);

// ---------------------------------------------------------------------------
// Numeric gradient audit
// ---------------------------------------------------------------------------

struct GradAuditEntry {
  LayerKind kind = LayerKind::kConv;
  std::string worst_param;
  double max_rel_err = 0.0;
  std::size_t checked = 0;
  std::size_t excluded = 0;  // probes skipped for straddling a kink
};

struct GradAuditReport {
  std::vector<GradAuditEntry> per_kind;
  double max_rel_err = 0.0;
  std::size_t checked = 0;
  std::size_t excluded = 0;
  bool pass(double tol) const { return checked > 0 && max_rel_err < tol; }
};

// Central-difference audit over every parameter tensor. `run(true)` must
// recompute the loss with freshly accumulated gradients; `run(false)` must
// return the loss without touching gradients. Up to `samples_per_tensor`
// coordinates are drawn per tensor; relative error uses a max(1, |a|, |b|)
// scale. Results are grouped by layer kind.
//
// Kink handling: ReLU and hinge terms make the loss piecewise smooth, and a
// probe that brackets a kink (or sits exactly on one, which zero-initialized
// biases make common) produces a meaningless difference quotient. Each probe
// therefore measures the one-sided slope disagreement at steps h and h/8: a
// disagreement that shrinks with the step is curvature (kept, compared at
// the smaller step), one that persists above `kink_tol` is a kink inside
// [x-h/8, x+h/8] (excluded, counted in `excluded`). A wrong analytic
// gradient is never masked: at smooth points the one-sided slopes agree with
// each other no matter what backward computed.
GradAuditReport numeric_grad_audit(const std::function<double(bool)>& run,
                                   const std::vector<ParamRef>& params, double h,
                                   std::size_t samples_per_tensor, Rng& rng,
                                   double kink_tol = 1e-6);

}  // namespace segaware
