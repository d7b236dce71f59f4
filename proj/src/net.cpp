#include "segaware/net.hpp"

#include <algorithm>
#include <cmath>

#include "segaware/errors.hpp"

namespace segaware {

namespace {

void acc(Tensor& into, const Tensor& t) {
  if (into.numel() != t.numel()) {
    throw DimensionError("gradient accumulation shape mismatch: " + into.shape_str() +
                         " vs " + t.shape_str());
  }
  for (std::size_t i = 0; i < t.numel(); ++i) into.data[i] += t.data[i];
}

void acc_scaled(Tensor& into, const Tensor& t, double s) {
  if (into.numel() != t.numel()) {
    throw DimensionError("gradient accumulation shape mismatch: " + into.shape_str() +
                         " vs " + t.shape_str());
  }
  for (std::size_t i = 0; i < t.numel(); ++i) into.data[i] += s * t.data[i];
}

}  // namespace

const char* layer_kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::kConv: return "conv";
    case LayerKind::kSegawareConv: return "segaware_conv";
    case LayerKind::kRelu: return "relu";
    case LayerKind::kMaxpool2: return "maxpool2";
    case LayerKind::kUpsample: return "upsample";
    case LayerKind::kConcat: return "concat";
    case LayerKind::kFuse1x1: return "fuse1x1";
    case LayerKind::kBilateral: return "bilateral";
    case LayerKind::kCrf: return "crf";
    case LayerKind::kSoftmaxLoss: return "softmax_loss";
    case LayerKind::kRegressLoss: return "regress_loss";
  }
  return "unknown";
}

const char* segaware_mode_name(SegawareMode m) {
  switch (m) {
    case SegawareMode::kNone: return "none";
    case SegawareMode::kLastLayer: return "last_layer";
    case SegawareMode::kAllLayers: return "all_layers";
  }
  return "unknown";
}

const char* post_mode_name(PostMode m) {
  switch (m) {
    case PostMode::kNone: return "none";
    case PostMode::kBilateral: return "bilateral";
    case PostMode::kCrf: return "crf";
  }
  return "unknown";
}

// ---------------------------------------------------------------------------
// ConvUnit
// ---------------------------------------------------------------------------

void ConvUnit::init(std::string unit_name, LayerKind unit_kind, std::size_t in_ch,
                    std::size_t out_ch, const PatchSpec& spec, bool with_relu, Rng& rng) {
  spec.validate();
  name = std::move(unit_name);
  kind = unit_kind;
  relu = with_relu;
  const std::size_t fan_in = spec.patch() * in_ch;
  filter.spec = spec;
  filter.weights = init_uniform({fan_in, out_ch}, rng, std::sqrt(3.0 / static_cast<double>(fan_in)));
  filter.bias = Tensor({out_ch});
  filter.has_bias = true;
  lambda = Tensor::full({1}, 1.0);
  zero_grads();
}

void ConvUnit::zero_grads() {
  grad_w = Tensor(filter.weights.shape);
  grad_b = Tensor(filter.bias.shape);
  grad_lambda = Tensor({1});
}

void ConvUnit::collect_params(std::vector<ParamRef>& out) {
  out.push_back({name + ".w", kind, &filter.weights, &grad_w, false});
  out.push_back({name + ".b", kind, &filter.bias, &grad_b, false});
  if (segaware()) {
    out.push_back({name + ".lambda", kind, &lambda, &grad_lambda, true});
  }
}

Tensor ConvUnit::forward(const Tensor& x, const ColMatrix* dist) const {
  Tensor y;
  if (segaware()) {
    if (!dist) throw ConfigError(name + ": segaware unit run without embedding distances");
    const MaskField masks = compute_masks(*dist, lambda(0), filter.spec, norm);
    y = segaware_conv(x, masks, filter);
  } else {
    y = conv2d(x, filter);
  }
  if (relu) {
    for (auto& v : y.data) v = v > 0.0 ? v : 0.0;
  }
  return y;
}

Tensor ConvUnit::backward(const Tensor& grad_out, const Tensor& x, const Tensor& y,
                          const ColMatrix* dist, const Tensor* emb,
                          Tensor* grad_emb_accum) {
  Tensor g = grad_out;
  if (relu) {
    for (std::size_t i = 0; i < g.numel(); ++i) {
      if (y.data[i] <= 0.0) g.data[i] = 0.0;
    }
  }
  if (segaware()) {
    if (!dist || !emb) {
      throw ConfigError(name + ": segaware unit backward without embedding state");
    }
    const MaskField masks = compute_masks(*dist, lambda(0), filter.spec, norm);
    SegawareConvGrads sg = segaware_conv_backward(g, x, masks, filter, *emb);
    acc(grad_w, sg.grad_weights);
    acc(grad_b, sg.grad_bias);
    grad_lambda(0) += sg.grad_lambda;
    if (grad_emb_accum) acc(*grad_emb_accum, sg.grad_emb);
    return sg.grad_x;
  }
  Conv2dGrads cg = conv2d_backward(g, x, filter);
  acc(grad_w, cg.grad_weights);
  acc(grad_b, cg.grad_bias);
  return cg.grad_x;
}

// ---------------------------------------------------------------------------
// Pooling / concat plumbing
// ---------------------------------------------------------------------------

Tensor maxpool2(const Tensor& x, std::vector<std::size_t>* argmax) {
  if (x.rank() != 3 || x.shape[0] % 2 != 0 || x.shape[1] % 2 != 0) {
    throw DimensionError("maxpool2 expects an even H x W x C map, got " + x.shape_str());
  }
  const std::size_t H = x.shape[0], W = x.shape[1], C = x.shape[2];
  Tensor out({H / 2, W / 2, C});
  if (argmax) argmax->assign(out.numel(), 0);
  for (std::size_t oi = 0; oi < H / 2; ++oi) {
    for (std::size_t oj = 0; oj < W / 2; ++oj) {
      for (std::size_t c = 0; c < C; ++c) {
        double best = x(2 * oi, 2 * oj, c);
        std::size_t best_src = (2 * oi * W + 2 * oj) * C + c;
        for (std::size_t di = 0; di < 2; ++di) {
          for (std::size_t dj = 0; dj < 2; ++dj) {
            const double v = x(2 * oi + di, 2 * oj + dj, c);
            if (v > best) {  // strict: first maximum wins on ties
              best = v;
              best_src = ((2 * oi + di) * W + (2 * oj + dj)) * C + c;
            }
          }
        }
        out(oi, oj, c) = best;
        if (argmax) (*argmax)[(oi * (W / 2) + oj) * C + c] = best_src;
      }
    }
  }
  return out;
}

Tensor maxpool2_backward(const Tensor& grad, const std::vector<std::size_t>& argmax,
                         std::size_t in_h, std::size_t in_w) {
  if (grad.rank() != 3 || argmax.size() != grad.numel()) {
    throw DimensionError("maxpool2_backward argmax record does not match gradient");
  }
  Tensor out({in_h, in_w, grad.shape[2]});
  for (std::size_t i = 0; i < grad.numel(); ++i) out.data[argmax[i]] += grad.data[i];
  return out;
}

Tensor concat_channels(const std::vector<const Tensor*>& parts) {
  if (parts.empty()) throw DimensionError("concat_channels needs at least one input");
  const std::size_t H = parts[0]->shape[0], W = parts[0]->shape[1];
  std::size_t total = 0;
  for (const Tensor* p : parts) {
    if (p->rank() != 3 || p->shape[0] != H || p->shape[1] != W) {
      throw DimensionError("concat_channels resolution mismatch at " + p->shape_str());
    }
    total += p->shape[2];
  }
  Tensor out({H, W, total});
  for (std::size_t pix = 0; pix < H * W; ++pix) {
    std::size_t off = 0;
    for (const Tensor* p : parts) {
      const std::size_t c = p->shape[2];
      for (std::size_t k = 0; k < c; ++k) out.data[pix * total + off + k] = p->data[pix * c + k];
      off += c;
    }
  }
  return out;
}

std::vector<Tensor> split_channels(const Tensor& x, const std::vector<std::size_t>& sizes) {
  std::size_t total = 0;
  for (std::size_t s : sizes) total += s;
  if (x.rank() != 3 || x.shape[2] != total) {
    throw DimensionError("split_channels sizes do not cover " + x.shape_str());
  }
  const std::size_t H = x.shape[0], W = x.shape[1];
  std::vector<Tensor> parts;
  std::size_t off = 0;
  for (std::size_t s : sizes) {
    Tensor part({H, W, s});
    for (std::size_t pix = 0; pix < H * W; ++pix)
      for (std::size_t k = 0; k < s; ++k) part.data[pix * s + k] = x.data[pix * total + off + k];
    parts.push_back(std::move(part));
    off += s;
  }
  return parts;
}

// ---------------------------------------------------------------------------
// EmbeddingNet
// ---------------------------------------------------------------------------

void EmbedNetConfig::validate() const {
  if (channels.size() != 7) {
    throw ConfigError("embedding trunk expects 7 conv widths, got " +
                      std::to_string(channels.size()));
  }
  for (std::size_t c : channels) {
    if (c == 0) throw ConfigError("embedding conv widths must be positive");
  }
  if (embed_dim < 2) throw ConfigError("embedding dimension must be at least 2");
  if (fused_loss_weight < 0.0) throw ConfigError("fused loss weight must be >= 0");
  loss.validate();
}

EmbeddingNet::EmbeddingNet(const EmbedNetConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  const PatchSpec spec3{3, 3, 1};
  const PatchSpec spec1{1, 1, 1};
  trunk_.resize(7);
  std::size_t in_ch = 3;
  for (std::size_t i = 0; i < 7; ++i) {
    trunk_[i].init("embed_conv" + std::to_string(i + 1), LayerKind::kConv, in_ch,
                   cfg_.channels[i], spec3, /*with_relu=*/true, rng);
    in_ch = cfg_.channels[i];
  }
  heads_.resize(3);
  const std::size_t feat_ch[3] = {cfg_.channels[1], cfg_.channels[3], cfg_.channels[6]};
  for (std::size_t s = 0; s < 3; ++s) {
    heads_[s].init("embed_head" + std::to_string(s + 1), LayerKind::kConv, feat_ch[s],
                   cfg_.embed_dim, spec1, /*with_relu=*/false, rng);
  }
  fuse_.init("embed_fuse", LayerKind::kFuse1x1, 3 * cfg_.embed_dim, cfg_.embed_dim, spec1,
             /*with_relu=*/false, rng);
}

Tensor EmbeddingNet::forward(const Tensor& image, EmbedCache* cache) const {
  if (image.rank() != 3 || image.shape[2] != 3) {
    throw DimensionError("embedding net expects an H x W x 3 image, got " + image.shape_str());
  }
  if (image.shape[0] % 4 != 0 || image.shape[1] % 4 != 0) {
    throw DimensionError("embedding net needs H and W divisible by 4, got " +
                         image.shape_str());
  }
  EmbedCache local;
  EmbedCache& c = cache ? *cache : local;
  c.conv_in.clear();
  c.conv_out.clear();

  Tensor cur = image;
  for (std::size_t i = 0; i < 7; ++i) {
    c.conv_in.push_back(cur);
    cur = trunk_[i].forward(cur, nullptr);
    c.conv_out.push_back(cur);
    if (i == 1) {
      c.scale_feat[0] = cur;
      cur = maxpool2(cur, &c.pool_argmax[0]);
    } else if (i == 3) {
      c.scale_feat[1] = cur;
      cur = maxpool2(cur, &c.pool_argmax[1]);
    }
  }
  c.scale_feat[2] = cur;

  for (std::size_t s = 0; s < 3; ++s) c.emb[s] = heads_[s].forward(c.scale_feat[s], nullptr);
  c.emb_up[0] = c.emb[0];
  c.emb_up[1] = upsample_nearest(c.emb[1], 2);
  c.emb_up[2] = upsample_nearest(c.emb[2], 4);
  c.concat = concat_channels({&c.emb_up[0], &c.emb_up[1], &c.emb_up[2]});
  c.fused = fuse_.forward(c.concat, nullptr);
  return c.fused;
}

double EmbeddingNet::backward(const EmbedCache& c, const LabelMap* labels,
                              double loss_weight, const Tensor* grad_fused) {
  const double inv = 1.0 / static_cast<double>(c.fused.shape[0] * c.fused.shape[1]);
  double total = 0.0;

  Tensor g_fused(c.fused.shape);
  if (grad_fused) acc(g_fused, *grad_fused);
  Tensor g_up[3];
  for (std::size_t s = 0; s < 3; ++s) g_up[s] = Tensor(c.emb_up[s].shape);

  if (labels && loss_weight != 0.0) {
    for (std::size_t s = 0; s < 3; ++s) {
      const LossResult r = embedding_loss(c.emb_up[s], *labels, cfg_.loss);
      total += loss_weight * inv * r.loss;
      acc_scaled(g_up[s], r.grad, loss_weight * inv);
    }
    if (cfg_.fused_loss_weight > 0.0) {
      const LossResult r = embedding_loss(c.fused, *labels, cfg_.loss);
      total += loss_weight * cfg_.fused_loss_weight * inv * r.loss;
      acc_scaled(g_fused, r.grad, loss_weight * cfg_.fused_loss_weight * inv);
    }
  }

  const std::size_t D = cfg_.embed_dim;
  Tensor g_concat = fuse_.backward(g_fused, c.concat, c.fused, nullptr, nullptr, nullptr);
  std::vector<Tensor> parts = split_channels(g_concat, {D, D, D});
  for (std::size_t s = 0; s < 3; ++s) acc(g_up[s], parts[s]);

  Tensor g_emb[3];
  g_emb[0] = g_up[0];
  g_emb[1] = upsample_nearest_backward(g_up[1], 2);
  g_emb[2] = upsample_nearest_backward(g_up[2], 4);

  Tensor g_feat[3];
  for (std::size_t s = 0; s < 3; ++s) {
    g_feat[s] = heads_[s].backward(g_emb[s], c.scale_feat[s], c.emb[s], nullptr, nullptr,
                                   nullptr);
  }

  // Trunk in reverse, undoing the two pools and merging the head branches.
  Tensor g = g_feat[2];
  g = trunk_[6].backward(g, c.conv_in[6], c.conv_out[6], nullptr, nullptr, nullptr);
  g = trunk_[5].backward(g, c.conv_in[5], c.conv_out[5], nullptr, nullptr, nullptr);
  g = trunk_[4].backward(g, c.conv_in[4], c.conv_out[4], nullptr, nullptr, nullptr);
  g = maxpool2_backward(g, c.pool_argmax[1], c.conv_out[3].shape[0], c.conv_out[3].shape[1]);
  acc(g, g_feat[1]);
  g = trunk_[3].backward(g, c.conv_in[3], c.conv_out[3], nullptr, nullptr, nullptr);
  g = trunk_[2].backward(g, c.conv_in[2], c.conv_out[2], nullptr, nullptr, nullptr);
  g = maxpool2_backward(g, c.pool_argmax[0], c.conv_out[1].shape[0], c.conv_out[1].shape[1]);
  acc(g, g_feat[0]);
  g = trunk_[1].backward(g, c.conv_in[1], c.conv_out[1], nullptr, nullptr, nullptr);
  trunk_[0].backward(g, c.conv_in[0], c.conv_out[0], nullptr, nullptr, nullptr);
  return total;
}

double EmbeddingNet::loss_only(const EmbedCache& c, const LabelMap& labels) const {
  const double inv = 1.0 / static_cast<double>(c.fused.shape[0] * c.fused.shape[1]);
  double total = 0.0;
  for (std::size_t s = 0; s < 3; ++s) {
    total += inv * embedding_loss(c.emb_up[s], labels, cfg_.loss).loss;
  }
  if (cfg_.fused_loss_weight > 0.0) {
    total += cfg_.fused_loss_weight * inv * embedding_loss(c.fused, labels, cfg_.loss).loss;
  }
  return total;
}

std::vector<ParamRef> EmbeddingNet::params() {
  std::vector<ParamRef> out;
  for (auto& u : trunk_) u.collect_params(out);
  for (auto& u : heads_) u.collect_params(out);
  fuse_.collect_params(out);
  return out;
}

void EmbeddingNet::zero_grads() {
  for (auto& u : trunk_) u.zero_grads();
  for (auto& u : heads_) u.zero_grads();
  fuse_.zero_grads();
}

// ---------------------------------------------------------------------------
// TaskNet
// ---------------------------------------------------------------------------

void TaskNetConfig::validate() const {
  if (depth == 0) throw ConfigError("task net needs at least one trunk convolution");
  if (channels == 0 || out_channels == 0 || in_channels == 0) {
    throw ConfigError("task net channel counts must be positive");
  }
  if (!regression && out_channels < 2) {
    throw ConfigError("classification head needs at least 2 classes");
  }
  if (regression && post == PostMode::kCrf) {
    throw ConfigError("a CRF head only applies to classification outputs");
  }
  if (post == PostMode::kBilateral && bilateral_reps == 0) {
    throw ConfigError("bilateral post-processing needs at least one repetition");
  }
  if (lambda_init < 0.0) throw ConfigError("mask sharpness init must be >= 0");
  conv_spec.validate();
  if (post == PostMode::kCrf) crf.validate();
}

TaskNet::TaskNet(const TaskNetConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  trunk_.resize(cfg_.depth);
  std::size_t in_ch = cfg_.in_channels;
  for (std::size_t i = 0; i < cfg_.depth; ++i) {
    const bool seg = cfg_.segaware == SegawareMode::kAllLayers ||
                     (cfg_.segaware == SegawareMode::kLastLayer && i + 1 == cfg_.depth);
    trunk_[i].init("task_conv" + std::to_string(i + 1),
                   seg ? LayerKind::kSegawareConv : LayerKind::kConv, in_ch, cfg_.channels,
                   cfg_.conv_spec, cfg_.relu, rng);
    trunk_[i].norm = cfg_.mask_norm;
    trunk_[i].lambda(0) = cfg_.lambda_init;
    in_ch = cfg_.channels;
  }
  head_.init("task_head", LayerKind::kConv, cfg_.channels, cfg_.out_channels,
             PatchSpec{1, 1, 1}, /*with_relu=*/false, rng);
  crf_w_[0] = Tensor::full({1}, cfg_.crf.w1);
  crf_w_[1] = Tensor::full({1}, cfg_.crf.w2);
  grad_crf_w_[0] = Tensor({1});
  grad_crf_w_[1] = Tensor({1});
}

Tensor TaskNet::forward(const Tensor& image, const Tensor* emb, TaskCache* cache) const {
  if (cfg_.needs_embedding() && !emb) {
    throw ConfigError("task net configured with segaware/post stages but run without an embedding");
  }
  TaskCache local;
  TaskCache& c = cache ? *cache : local;
  c.conv_in.clear();
  c.conv_out.clear();
  c.post_in.clear();
  c.has_post_masks = false;
  c.has_crf = false;
  c.has_emb = false;

  if (emb) {
    c.emb = *emb;
    c.has_emb = true;
    c.dist = im2dist(*emb, cfg_.conv_spec, cfg_.mask_norm);
  }

  Tensor cur = image;
  for (const auto& u : trunk_) {
    c.conv_in.push_back(cur);
    cur = u.forward(cur, c.has_emb ? &c.dist : nullptr);
    c.conv_out.push_back(cur);
  }
  c.logits = head_.forward(cur, nullptr);

  switch (cfg_.post) {
    case PostMode::kNone:
      c.output = c.logits;
      break;
    case PostMode::kBilateral: {
      c.post_masks = compute_masks(c.dist, cfg_.bilateral_lambda, cfg_.conv_spec,
                                   cfg_.mask_norm);
      c.has_post_masks = true;
      Tensor y = c.logits;
      for (std::size_t r = 0; r < cfg_.bilateral_reps; ++r) {
        c.post_in.push_back(y);
        y = bilateral_filter(y, c.post_masks);
      }
      c.output = y;
      break;
    }
    case PostMode::kCrf: {
      CRFParams p = cfg_.crf;
      p.w1 = crf_w_[0](0);
      p.w2 = crf_w_[1](0);
      const Tensor unary = scale(c.logits, -1.0);
      c.crf = crf_forward(unary, c.emb, p);
      c.has_crf = true;
      c.output = c.crf.qs.back();
      break;
    }
  }
  return c.output;
}

double TaskNet::backward(const TaskCache& c, const LabelMap* labels,
                         const Tensor* flow_target, Tensor* grad_emb) {
  double loss = 0.0;
  Tensor g_out;
  if (cfg_.regression) {
    if (!flow_target) throw ConfigError("regression backward needs a target field");
    loss = l2_loss(c.output, *flow_target, &g_out);
  } else {
    if (!labels) throw ConfigError("classification backward needs a label map");
    loss = c.has_crf ? nll_prob(c.output, *labels, &g_out)
                     : softmax_xent(c.output, *labels, &g_out);
  }

  Tensor g_logits;
  switch (cfg_.post) {
    case PostMode::kNone:
      g_logits = g_out;
      break;
    case PostMode::kBilateral: {
      Tensor g = g_out;
      for (std::size_t r = cfg_.bilateral_reps; r-- > 0;) {
        BilateralGrads bg = bilateral_filter_backward(g, c.post_in[r], c.post_masks, c.emb);
        g = std::move(bg.grad_x);
        // The post-filter sharpness is a fixed config value, so its
        // gradient is dropped; the embeddings still receive theirs.
        if (grad_emb) acc(*grad_emb, bg.grad_emb);
      }
      g_logits = g;
      break;
    }
    case PostMode::kCrf: {
      CRFGrads cg = crf_backward(g_out, c.crf);
      g_logits = scale(cg.grad_unary, -1.0);
      grad_crf_w_[0](0) += cg.grad_w1;
      grad_crf_w_[1](0) += cg.grad_w2;
      if (grad_emb) acc(*grad_emb, cg.grad_emb);
      break;
    }
  }

  Tensor g = head_.backward(g_logits, c.conv_out.back(), c.logits, nullptr, nullptr, nullptr);
  for (std::size_t i = cfg_.depth; i-- > 0;) {
    g = trunk_[i].backward(g, c.conv_in[i], c.conv_out[i],
                           c.has_emb ? &c.dist : nullptr, c.has_emb ? &c.emb : nullptr,
                           grad_emb);
  }
  return loss;
}

double TaskNet::loss_only(const Tensor& output, const LabelMap* labels,
                          const Tensor* flow_target) const {
  if (cfg_.regression) {
    if (!flow_target) throw ConfigError("regression loss needs a target field");
    return l2_loss(output, *flow_target, nullptr);
  }
  if (!labels) throw ConfigError("classification loss needs a label map");
  return cfg_.post == PostMode::kCrf ? nll_prob(output, *labels, nullptr)
                                     : softmax_xent(output, *labels, nullptr);
}

std::vector<ParamRef> TaskNet::params() {
  std::vector<ParamRef> out;
  for (auto& u : trunk_) u.collect_params(out);
  head_.collect_params(out);
  if (cfg_.post == PostMode::kCrf) {
    out.push_back({"crf.w1", LayerKind::kCrf, &crf_w_[0], &grad_crf_w_[0], false});
    out.push_back({"crf.w2", LayerKind::kCrf, &crf_w_[1], &grad_crf_w_[1], false});
  }
  return out;
}

void TaskNet::zero_grads() {
  for (auto& u : trunk_) u.zero_grads();
  head_.zero_grads();
  grad_crf_w_[0] = Tensor({1});
  grad_crf_w_[1] = Tensor({1});
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

namespace {

double safe_log(double v) { return std::log(std::max(v, 1e-300)); }

}  // namespace

double softmax_xent(const Tensor& logits, const LabelMap& labels, Tensor* grad) {
  if (logits.rank() != 3 || logits.shape[0] != labels.h || logits.shape[1] != labels.w) {
    throw DimensionError("softmax loss logits do not cover the label map");
  }
  const std::size_t L = logits.shape[2];
  const Tensor probs = softmax_channels(logits);
  if (grad) *grad = Tensor(logits.shape);

  std::size_t count = 0;
  for (int l : labels.labels) {
    if (l == kIgnoreLabel) continue;
    if (l < 0 || static_cast<std::size_t>(l) >= L) {
      throw NumericError("label " + std::to_string(l) + " outside the class range");
    }
    ++count;
  }
  if (count == 0) return 0.0;
  const double inv = 1.0 / static_cast<double>(count);

  double loss = 0.0;
  for (std::size_t p = 0; p < labels.labels.size(); ++p) {
    const int l = labels.labels[p];
    if (l == kIgnoreLabel) continue;
    loss -= safe_log(probs.data[p * L + static_cast<std::size_t>(l)]);
    if (grad) {
      for (std::size_t k = 0; k < L; ++k) grad->data[p * L + k] = probs.data[p * L + k] * inv;
      grad->data[p * L + static_cast<std::size_t>(l)] -= inv;
    }
  }
  return loss * inv;
}

double nll_prob(const Tensor& probs, const LabelMap& labels, Tensor* grad) {
  if (probs.rank() != 3 || probs.shape[0] != labels.h || probs.shape[1] != labels.w) {
    throw DimensionError("marginal loss does not cover the label map");
  }
  const std::size_t L = probs.shape[2];
  if (grad) *grad = Tensor(probs.shape);
  std::size_t count = 0;
  for (int l : labels.labels) {
    if (l == kIgnoreLabel) continue;
    if (l < 0 || static_cast<std::size_t>(l) >= L) {
      throw NumericError("label " + std::to_string(l) + " outside the class range");
    }
    ++count;
  }
  if (count == 0) return 0.0;
  const double inv = 1.0 / static_cast<double>(count);
  double loss = 0.0;
  for (std::size_t p = 0; p < labels.labels.size(); ++p) {
    const int l = labels.labels[p];
    if (l == kIgnoreLabel) continue;
    const double q = probs.data[p * L + static_cast<std::size_t>(l)];
    loss -= safe_log(q);
    if (grad) {
      grad->data[p * L + static_cast<std::size_t>(l)] = -inv / std::max(q, 1e-300);
    }
  }
  return loss * inv;
}

double l2_loss(const Tensor& y, const Tensor& target, Tensor* grad) {
  if (!y.same_shape(target) || y.rank() != 3) {
    throw DimensionError("regression target shape mismatch: " + y.shape_str() + " vs " +
                         target.shape_str());
  }
  const double inv = 1.0 / static_cast<double>(y.shape[0] * y.shape[1]);
  if (grad) *grad = Tensor(y.shape);
  double loss = 0.0;
  for (std::size_t i = 0; i < y.numel(); ++i) {
    const double d = y.data[i] - target.data[i];
    loss += 0.5 * d * d;
    if (grad) grad->data[i] = d * inv;
  }
  return loss * inv;
}

LabelMap argmax_labels(const Tensor& scores) {
  if (scores.rank() != 3) throw DimensionError("argmax expects H x W x L scores");
  const std::size_t L = scores.shape[2];
  LabelMap out(scores.shape[0], scores.shape[1]);
  for (std::size_t p = 0; p < out.labels.size(); ++p) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < L; ++k) {
      if (scores.data[p * L + k] > scores.data[p * L + best]) best = k;
    }
    out.labels[p] = static_cast<int>(best);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Numeric gradient audit
// ---------------------------------------------------------------------------

GradAuditReport numeric_grad_audit(const std::function<double(bool)>& run,
                                   const std::vector<ParamRef>& params, double h,
                                   std::size_t samples_per_tensor, Rng& rng,
                                   double kink_tol) {
  if (h <= 0.0) throw ConfigError("finite difference step must be positive");
  GradAuditReport report;
  run(true);
  std::vector<Tensor> analytic;
  analytic.reserve(params.size());
  for (const auto& p : params) analytic.push_back(*p.grad);
  const double f0 = run(false);

  auto entry_for = [&report](LayerKind kind) -> GradAuditEntry& {
    for (auto& e : report.per_kind) {
      if (e.kind == kind) return e;
    }
    report.per_kind.push_back(GradAuditEntry{kind});
    return report.per_kind.back();
  };

  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    const ParamRef& p = params[pi];
    Tensor& v = *p.value;
    const std::size_t n = v.numel();
    const std::size_t draws = std::min(n, samples_per_tensor);
    for (std::size_t s = 0; s < draws; ++s) {
      const std::size_t idx = n <= samples_per_tensor ? s : rng.next_below(n);
      const double hs = h / 8.0;
      const double keep = v.data[idx];
      auto eval = [&](double x) {
        v.data[idx] = x;
        return run(false);
      };
      const double f1 = eval(keep + h);
      const double f2 = eval(keep - h);
      const double f3 = eval(keep + hs);
      const double f4 = eval(keep - hs);
      v.data[idx] = keep;
      GradAuditEntry& e = entry_for(p.kind);
      // One-sided slope disagreement at both step sizes. Curvature shrinks
      // with the step; a kink inside the inner bracket does not.
      const double d_outer = std::abs((f1 - f0) / h - (f0 - f2) / h);
      const double sp = (f3 - f0) / hs;
      const double sm = (f0 - f4) / hs;
      const double d_inner = std::abs(sp - sm);
      const double scale = std::max({1.0, std::abs(sp), std::abs(sm)});
      if (d_inner > kink_tol * scale && d_inner > 0.5 * d_outer) {
        ++e.excluded;
        ++report.excluded;
        continue;
      }
      const double fd = (f3 - f4) / (2.0 * hs);
      const double an = analytic[pi].data[idx];
      const double rel = std::abs(fd - an) / std::max({1.0, std::abs(fd), std::abs(an)});
      ++e.checked;
      ++report.checked;
      if (rel > e.max_rel_err) {
        e.max_rel_err = rel;
        e.worst_param = p.name;
      }
      report.max_rel_err = std::max(report.max_rel_err, rel);
    }
  }
  return report;
}

}  // namespace segaware
