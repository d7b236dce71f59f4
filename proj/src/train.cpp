#include "segaware/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "json.hpp"
#include "segaware/errors.hpp"
#include "segaware/metrics.hpp"
#include "segaware/tensor_io.hpp"

namespace segaware {

namespace {

void scale_grads(const std::vector<ParamRef>& params, double s) {
  for (const auto& p : params) {
    for (auto& g : p.grad->data) g *= s;
  }
}

std::vector<Tensor> snapshot_values(const std::vector<ParamRef>& params) {
  std::vector<Tensor> out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back(*p.value);
  return out;
}

void restore_values(const std::vector<ParamRef>& params, const std::vector<Tensor>& snap) {
  for (std::size_t i = 0; i < params.size(); ++i) *params[i].value = snap[i];
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  // Order depends only on (seed, epoch), never on optimizer history, so a
  // resumed run walks the exact same batches as an uninterrupted one.
  Rng rng = Rng(seed).fork(epoch);
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = rng.next_below(i);
    std::swap(idx[i - 1], idx[j]);
  }
  return idx;
}

double median_of(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

void TrainConfig::validate() const {
  if (lr < 0.0) throw ConfigError("learning rate must be >= 0");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must lie in [0, 1)");
  if (weight_decay < 0.0) throw ConfigError("weight decay must be >= 0");
  if (batch == 0) throw ConfigError("batch size must be positive");
  if (stage2_embed_loss_weight < 0.0) {
    throw ConfigError("stage-2 embedding loss weight must be >= 0");
  }
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

Sgd::Sgd(std::vector<ParamRef> params, double lr, double momentum, double weight_decay)
    : params_(std::move(params)), lr_(lr), momentum_(momentum), weight_decay_(weight_decay) {
  vel_.reserve(params_.size());
  for (const auto& p : params_) vel_.push_back(Tensor(p.value->shape));
}

void Sgd::step() {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& v = vel_[i];
    Tensor& x = *params_[i].value;
    const Tensor& g = *params_[i].grad;
    for (std::size_t k = 0; k < x.numel(); ++k) {
      v.data[k] = momentum_ * v.data[k] + g.data[k] + weight_decay_ * x.data[k];
      x.data[k] -= lr_ * v.data[k];
    }
    if (params_[i].nonneg) {
      for (auto& val : x.data) val = std::max(0.0, val);
    }
  }
}

// ---------------------------------------------------------------------------
// Stage 1: embeddings on the pairwise loss
// ---------------------------------------------------------------------------

TrainResult train_stage1(EmbeddingNet& net, const std::vector<SyntheticScene>& train,
                         const std::vector<SyntheticScene>* val, const TrainConfig& cfg,
                         Sgd* optimizer, std::size_t start_epoch) {
  cfg.validate();
  if (train.empty()) throw ConfigError("stage-1 training set is empty");

  const std::vector<ParamRef> params = net.params();
  Sgd local(params, cfg.lr, cfg.momentum, cfg.weight_decay);
  Sgd& opt = optimizer ? *optimizer : local;

  TrainResult result;
  const std::size_t n = train.size();
  for (std::size_t epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    const std::vector<Tensor> snap_v = snapshot_values(params);
    const std::vector<Tensor> snap_m = opt.velocity();
    const std::vector<std::size_t> order = epoch_order(n, cfg.seed, epoch);

    double epoch_loss = 0.0;
    for (std::size_t at = 0; at < n; at += cfg.batch) {
      const std::size_t m = std::min(cfg.batch, n - at);
      net.zero_grads();
      double batch_loss = 0.0;
      for (std::size_t b = 0; b < m; ++b) {
        const SyntheticScene& scene = train[order[at + b]];
        EmbedCache cache;
        net.forward(scene.image, &cache);
        batch_loss += net.backward(cache, &scene.labels, 1.0, nullptr);
      }
      if (!std::isfinite(batch_loss)) {
        restore_values(params, snap_v);
        opt.velocity() = snap_m;
        result.aborted = true;
        result.abort_reason =
            "stage-1 loss became non-finite in epoch " + std::to_string(epoch + 1);
        return result;
      }
      scale_grads(params, 1.0 / static_cast<double>(m));
      opt.step();
      epoch_loss += batch_loss;
    }
    epoch_loss /= static_cast<double>(n);

    double metric = 0.0;
    if (val && !val->empty()) {
      std::vector<double> aucs;
      const std::size_t v = std::min<std::size_t>(5, val->size());
      for (std::size_t i = 0; i < v; ++i) {
        const Tensor emb = net.forward((*val)[i].image, nullptr);
        const AucResult r =
            mask_auc(emb, (*val)[i].labels, PatchSpec{3, 3, 1}, net.config().loss.norm);
        if (r.defined) aucs.push_back(r.value);
      }
      metric = median_of(aucs);
    }
    result.log.push_back({epoch + 1, epoch_loss, metric});
  }
  return result;
}

// ---------------------------------------------------------------------------
// Stage 2: task net, optionally fine-tuning the embeddings through it
// ---------------------------------------------------------------------------

TrainResult train_stage2(TaskNet& task, EmbeddingNet* embed,
                         const std::vector<SyntheticScene>& train,
                         const std::vector<SyntheticScene>* val, const TrainConfig& cfg,
                         Sgd* optimizer, std::size_t start_epoch) {
  cfg.validate();
  if (train.empty()) throw ConfigError("stage-2 training set is empty");
  if (task.config().needs_embedding() && !embed) {
    throw ConfigError("task net requires embeddings but no embedding net was given");
  }

  std::vector<ParamRef> params = task.params();
  if (embed) {
    std::vector<ParamRef> extra = embed->params();
    params.insert(params.end(), extra.begin(), extra.end());
  }
  Sgd local(params, cfg.lr, cfg.momentum, cfg.weight_decay);
  Sgd& opt = optimizer ? *optimizer : local;

  const bool regression = task.config().regression;
  TrainResult result;
  const std::size_t n = train.size();
  for (std::size_t epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    const std::vector<Tensor> snap_v = snapshot_values(params);
    const std::vector<Tensor> snap_m = opt.velocity();
    const std::vector<std::size_t> order = epoch_order(n, cfg.seed, epoch);

    double epoch_loss = 0.0;
    for (std::size_t at = 0; at < n; at += cfg.batch) {
      const std::size_t m = std::min(cfg.batch, n - at);
      task.zero_grads();
      if (embed) embed->zero_grads();
      double batch_loss = 0.0;
      for (std::size_t b = 0; b < m; ++b) {
        const SyntheticScene& scene = train[order[at + b]];
        EmbedCache ec;
        Tensor emb;
        const Tensor* embp = nullptr;
        if (embed) {
          emb = embed->forward(scene.image, &ec);
          embp = &emb;
        }
        TaskCache tc;
        task.forward(scene.image, embp, &tc);
        Tensor grad_emb;
        if (embed) grad_emb = Tensor(emb.shape);
        batch_loss += task.backward(tc, regression ? nullptr : &scene.labels,
                                    regression ? &scene.flow : nullptr,
                                    embed ? &grad_emb : nullptr);
        if (embed) {
          batch_loss += embed->backward(ec, &scene.labels, cfg.stage2_embed_loss_weight,
                                        &grad_emb);
        }
      }
      if (!std::isfinite(batch_loss)) {
        restore_values(params, snap_v);
        opt.velocity() = snap_m;
        result.aborted = true;
        result.abort_reason =
            "stage-2 loss became non-finite in epoch " + std::to_string(epoch + 1);
        return result;
      }
      scale_grads(params, 1.0 / static_cast<double>(m));
      opt.step();
      epoch_loss += batch_loss;
    }
    epoch_loss /= static_cast<double>(n);

    double metric = 0.0;
    if (val && !val->empty()) {
      const std::size_t v = std::min<std::size_t>(10, val->size());
      double sum = 0.0;
      for (std::size_t i = 0; i < v; ++i) {
        const SyntheticScene& scene = (*val)[i];
        Tensor emb;
        const Tensor* embp = nullptr;
        if (embed) {
          emb = embed->forward(scene.image, nullptr);
          embp = &emb;
        }
        const Tensor out = task.forward(scene.image, embp, nullptr);
        sum += regression ? epe(out, scene.flow)
                          : mean_iou(argmax_labels(out), scene.labels);
      }
      metric = sum / static_cast<double>(v);
    }
    result.log.push_back({epoch + 1, epoch_loss, metric});
  }
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

void save_checkpoint(const std::string& dir, const std::string& kind, std::size_t epoch,
                     const std::vector<ParamRef>& params,
                     const std::vector<Tensor>* velocity) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create checkpoint directory " + dir + ": " + ec.message());
  if (velocity && velocity->size() != params.size()) {
    throw ConfigError("velocity buffers do not match the parameter list");
  }

  nlohmann::json manifest;
  manifest["schema_version"] = 1;
  manifest["kind"] = kind;
  manifest["epoch"] = epoch;
  manifest["has_velocity"] = velocity != nullptr;
  manifest["params"] = nlohmann::json::array();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const ParamRef& p = params[i];
    const std::string file = p.name + ".tnsr";
    write_tensor(dir + "/" + file, *p.value);
    if (velocity) write_tensor(dir + "/" + p.name + ".m.tnsr", (*velocity)[i]);
    nlohmann::json entry;
    entry["name"] = p.name;
    entry["layer_kind"] = layer_kind_name(p.kind);
    entry["file"] = file;
    entry["shape"] = p.value->shape;
    manifest["params"].push_back(entry);
  }

  std::ofstream os(dir + "/manifest.json");
  if (!os) throw IoError("cannot write " + dir + "/manifest.json");
  os << manifest.dump(2) << "\n";
  if (!os) throw IoError("short write to " + dir + "/manifest.json");
}

CheckpointInfo load_checkpoint(const std::string& dir, const std::vector<ParamRef>& params,
                               std::vector<Tensor>* velocity) {
  std::ifstream is(dir + "/manifest.json");
  if (!is) throw IoError("cannot open checkpoint manifest " + dir + "/manifest.json");
  nlohmann::json manifest;
  try {
    is >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed checkpoint manifest in " + dir + ": " + e.what());
  }

  CheckpointInfo info;
  info.kind = manifest.value("kind", "");
  info.epoch = manifest.value("epoch", 0u);
  info.has_velocity = manifest.value("has_velocity", false);

  // Index the stored entries, then walk the architecture's parameters and
  // collect every disagreement before failing.
  struct Stored {
    std::string file;
    std::vector<std::size_t> shape;
    bool used = false;
  };
  std::vector<std::pair<std::string, Stored>> stored;
  for (const auto& entry : manifest.at("params")) {
    stored.emplace_back(entry.at("name").get<std::string>(),
                        Stored{entry.at("file").get<std::string>(),
                               entry.at("shape").get<std::vector<std::size_t>>(), false});
  }
  auto find = [&stored](const std::string& name) -> Stored* {
    for (auto& [n, s] : stored) {
      if (n == name) return &s;
    }
    return nullptr;
  };

  std::vector<std::string> mismatches;
  for (const ParamRef& p : params) {
    Stored* s = find(p.name);
    if (!s) {
      mismatches.push_back(p.name + " (missing from checkpoint)");
      continue;
    }
    s->used = true;
    if (s->shape != p.value->shape) {
      mismatches.push_back(p.name + " (checkpoint shape differs)");
    }
  }
  for (const auto& [name, s] : stored) {
    if (!s.used) mismatches.push_back(name + " (not in this architecture)");
  }
  if (!mismatches.empty()) {
    std::string msg = "checkpoint " + dir + " does not match the architecture:";
    for (const auto& m : mismatches) msg += "\n  " + m;
    throw IoError(msg);
  }

  if (velocity && !info.has_velocity) {
    throw IoError("checkpoint " + dir + " has no optimizer state to resume from");
  }
  if (velocity) velocity->clear();
  for (const ParamRef& p : params) {
    *p.value = read_tensor(dir + "/" + find(p.name)->file);
    if (velocity) velocity->push_back(read_tensor(dir + "/" + p.name + ".m.tnsr"));
  }
  return info;
}

void write_metrics_csv(const std::string& path, const std::vector<EpochRecord>& log) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write metrics to " + path);
  os << "epoch,loss,val_metric\n";
  char buf[128];
  for (const auto& r : log) {
    std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g\n", r.epoch, r.loss, r.val_metric);
    os << buf;
  }
  if (!os) throw IoError("short write to " + path);
}

}  // namespace segaware
