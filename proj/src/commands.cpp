#include "segaware/commands.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>

#include "segaware/errors.hpp"
#include "segaware/image_io.hpp"
#include "segaware/metrics.hpp"
#include "segaware/parallel.hpp"
#include "segaware/tensor_io.hpp"

namespace segaware {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

std::string scene_stem(const std::string& dir, std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "scene_%05zu", index);
  return (fs::path(dir) / buf).string();
}

void write_scene(const std::string& dir, std::size_t index, const SyntheticScene& scene) {
  const std::string stem = scene_stem(dir, index);
  write_ppm(stem + ".ppm", scene.image);
  write_pgm(stem + "_labels.pgm", scene.labels);
  write_tensor(stem + "_flow.tnsr", scene.flow);
}

SyntheticScene read_scene(const std::string& dir, std::size_t index) {
  const std::string stem = scene_stem(dir, index);
  SyntheticScene scene;
  scene.image = read_ppm(stem + ".ppm");
  scene.labels = read_pgm(stem + "_labels.pgm");
  scene.flow = read_tensor(stem + "_flow.tnsr");
  return scene;
}

// Whether stage 2 trains (and checkpoints) the embedding net alongside the
// task net. Shared by train, eval, and visualize so checkpoints always
// match.
bool stage2_uses_embedding(const ExperimentConfig& cfg) {
  return cfg.task_net.needs_embedding() ||
         cfg.train_stage2.stage2_embed_loss_weight > 0.0;
}

std::vector<ParamRef> joint_params(TaskNet& task, EmbeddingNet* embed) {
  std::vector<ParamRef> params = task.params();
  if (embed) {
    std::vector<ParamRef> extra = embed->params();
    params.insert(params.end(), extra.begin(), extra.end());
  }
  return params;
}

// Stage-2 task net init stream, distinct from the stage-1 embedding stream.
Rng task_init_rng(const ExperimentConfig& cfg) {
  return Rng(cfg.train_stage2.seed).fork(1);
}

std::string checkpoint_kind(const std::string& dir) {
  std::ifstream in((fs::path(dir) / "manifest.json").string());
  if (!in.good()) throw IoError("cannot open checkpoint manifest in " + dir);
  json doc;
  try {
    in >> doc;
    return doc.at("kind").get<std::string>();
  } catch (const json::exception& e) {
    throw IoError("bad checkpoint manifest in " + dir + ": " + e.what());
  }
}

// Mean EPE over the pixels selected by `band` (all pixels when empty).
double banded_epe(const Tensor& pred, const Tensor& gt,
                  const std::vector<unsigned char>& band) {
  const std::size_t n = pred.shape[0] * pred.shape[1];
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t p = 0; p < n; ++p) {
    if (!band.empty() && !band[p]) continue;
    const double du = pred.data[p * 2] - gt.data[p * 2];
    const double dv = pred.data[p * 2 + 1] - gt.data[p * 2 + 1];
    total += std::sqrt(du * du + dv * dv);
    ++count;
  }
  return count == 0 ? 0.0 : total / static_cast<double>(count);
}

double now_ms() {
  return std::chrono::duration<double, std::milli>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

volatile double g_bench_sink = 0.0;

template <typename Fn>
double median_of_5_ms(const Fn& fn) {
  std::vector<double> times;
  for (int rep = 0; rep < 5; ++rep) {
    const double t0 = now_ms();
    fn();
    times.push_back(now_ms() - t0);
  }
  std::sort(times.begin(), times.end());
  return times[2];
}

Tensor random_field(std::vector<std::size_t> shape, Rng& rng) {
  Tensor t(std::move(shape));
  for (auto& v : t.data) v = rng.uniform(-1.0, 1.0);
  return t;
}

LabelMap random_label_field(std::size_t h, std::size_t w, int classes, Rng& rng) {
  LabelMap out(h, w);
  for (auto& l : out.labels) {
    l = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(classes)));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Visualization helpers
// ---------------------------------------------------------------------------

double field_distance(const Tensor& field, std::size_t a, std::size_t b, Norm norm) {
  const std::size_t d = field.shape[2];
  double acc = 0.0;
  for (std::size_t c = 0; c < d; ++c) {
    const double diff = field.data[a * d + c] - field.data[b * d + c];
    acc += norm == Norm::L1 ? std::abs(diff) : diff * diff;
  }
  return norm == Norm::L1 ? acc : std::sqrt(acc);
}

// Whole-image soft mask around one reference pixel: exp(-lambda * distance)
// in the given field, rendered as a grayscale RGB image. The reference
// pixel itself has distance 0, hence value exactly 1.
Tensor reference_mask_image(const Tensor& field, std::size_t ref, double lambda,
                            Norm norm) {
  const std::size_t h = field.shape[0], w = field.shape[1];
  Tensor img({h, w, 3});
  for (std::size_t p = 0; p < h * w; ++p) {
    const double v = std::exp(-lambda * field_distance(field, p, ref, norm));
    img.data[p * 3] = img.data[p * 3 + 1] = img.data[p * 3 + 2] = v;
  }
  return img;
}

// Jacobi eigendecomposition of a small symmetric matrix (row-major n x n).
// Returns eigenvalues and column eigenvectors, unsorted.
void jacobi_eigen(std::vector<double>& a, std::size_t n, std::vector<double>& eigvals,
                  std::vector<double>& eigvecs) {
  eigvecs.assign(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) eigvecs[i * n + i] = 1.0;
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += a[p * n + q] * a[p * n + q];
    if (off < 1e-24) break;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a[p * n + q];
        if (std::abs(apq) < 1e-30) continue;
        const double theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a[k * n + p], akq = a[k * n + q];
          a[k * n + p] = c * akp - s * akq;
          a[k * n + q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a[p * n + k], aqk = a[q * n + k];
          a[p * n + k] = c * apk - s * aqk;
          a[q * n + k] = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = eigvecs[k * n + p], vkq = eigvecs[k * n + q];
          eigvecs[k * n + p] = c * vkp - s * vkq;
          eigvecs[k * n + q] = s * vkp + c * vkq;
        }
      }
    }
  }
  eigvals.assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) eigvals[i] = a[i * n + i];
}

// Per-image PCA of the embedding pixels, top 3 components min-max scaled
// into RGB. Components with no variance render as flat 0.5 gray.
Tensor pca_rgb(const Tensor& emb) {
  const std::size_t n = emb.shape[0] * emb.shape[1];
  const std::size_t d = emb.shape[2];
  std::vector<double> mean(d, 0.0);
  for (std::size_t p = 0; p < n; ++p)
    for (std::size_t c = 0; c < d; ++c) mean[c] += emb.data[p * d + c];
  for (auto& m : mean) m /= static_cast<double>(n);

  std::vector<double> cov(d * d, 0.0);
  for (std::size_t p = 0; p < n; ++p) {
    for (std::size_t i = 0; i < d; ++i) {
      const double vi = emb.data[p * d + i] - mean[i];
      for (std::size_t j = i; j < d; ++j) {
        cov[i * d + j] += vi * (emb.data[p * d + j] - mean[j]);
      }
    }
  }
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < i; ++j) cov[i * d + j] = cov[j * d + i];

  std::vector<double> eigvals, eigvecs;
  jacobi_eigen(cov, d, eigvals, eigvecs);
  std::vector<std::size_t> order(d);
  for (std::size_t i = 0; i < d; ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return eigvals[a] > eigvals[b]; });

  Tensor img({emb.shape[0], emb.shape[1], 3});
  for (std::size_t comp = 0; comp < 3; ++comp) {
    const std::size_t e = order[std::min(comp, d - 1)];
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    std::vector<double> proj(n, 0.0);
    for (std::size_t p = 0; p < n; ++p) {
      double v = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        v += (emb.data[p * d + c] - mean[c]) * eigvecs[c * d + e];
      }
      proj[p] = v;
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    const double range = hi - lo;
    for (std::size_t p = 0; p < n; ++p) {
      img.data[p * 3 + comp] = range > 0.0 ? (proj[p] - lo) / range : 0.5;
    }
  }
  return img;
}

}  // namespace

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

void cmd_gen_data(const ExperimentConfig& cfg, const std::string& out_dir) {
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create dataset directory " + out_dir + ": " + ec.message());

  const DatasetPalette palette = make_palette(cfg.dataset);
  for (std::size_t i = 0; i < cfg.dataset.train_count + cfg.dataset.test_count; ++i) {
    write_scene(out_dir, i, scene_at(cfg.dataset, palette, i));
  }

  json manifest = {{"schema_version", 1},
                   {"train_count", cfg.dataset.train_count},
                   {"test_count", cfg.dataset.test_count},
                   {"dataset", experiment_config_json(cfg)["dataset"]}};
  std::ofstream out((fs::path(out_dir) / "dataset.json").string());
  if (!out.good()) throw IoError("cannot write dataset manifest in " + out_dir);
  out << manifest.dump(2) << "\n";

  write_experiment_config((fs::path(out_dir) / "config_resolved.json").string(), cfg);
}

DatasetOnDisk load_dataset_dir(const std::string& dir) {
  std::ifstream in((fs::path(dir) / "dataset.json").string());
  if (!in.good()) throw IoError("no dataset manifest (dataset.json) in " + dir);
  std::size_t train_count = 0, test_count = 0;
  try {
    json doc;
    in >> doc;
    train_count = doc.at("train_count").get<std::size_t>();
    test_count = doc.at("test_count").get<std::size_t>();
  } catch (const json::exception& e) {
    throw IoError("bad dataset manifest in " + dir + ": " + e.what());
  }
  DatasetOnDisk data;
  for (std::size_t i = 0; i < train_count; ++i) data.train.push_back(read_scene(dir, i));
  for (std::size_t j = 0; j < test_count; ++j) {
    data.test.push_back(read_scene(dir, train_count + j));
  }
  return data;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

TrainOutcome cmd_train(const ExperimentConfig& cfg, const std::string& data_dir,
                       const std::string& out_dir) {
  const DatasetOnDisk data = load_dataset_dir(data_dir);
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create output directory " + out_dir + ": " + ec.message());
  write_experiment_config((fs::path(out_dir) / "config_resolved.json").string(), cfg);

  TrainOutcome out;
  const std::vector<SyntheticScene>* val = data.test.empty() ? nullptr : &data.test;

  // Stage 1: embeddings on the pairwise loss.
  Rng embed_rng(cfg.train.seed);
  EmbeddingNet embed(cfg.embed_net, embed_rng);
  Sgd opt1(embed.params(), cfg.train.lr, cfg.train.momentum, cfg.train.weight_decay);
  out.stage1 = train_stage1(embed, data.train, val, cfg.train, &opt1);
  save_checkpoint((fs::path(out_dir) / "stage1").string(), "stage1", out.stage1.log.size(),
                  embed.params(), &opt1.velocity());
  write_metrics_csv((fs::path(out_dir) / "stage1_metrics.csv").string(), out.stage1.log);
  if (out.stage1.aborted) throw NumericError(out.stage1.abort_reason);

  // Stage 2: the task net, with the trained embeddings attached when the
  // architecture (or an attached embedding loss) uses them.
  Rng task_rng = task_init_rng(cfg);
  TaskNet task(cfg.task_net, task_rng);
  EmbeddingNet* eptr = stage2_uses_embedding(cfg) ? &embed : nullptr;
  std::vector<ParamRef> params = joint_params(task, eptr);
  Sgd opt2(params, cfg.train_stage2.lr, cfg.train_stage2.momentum,
           cfg.train_stage2.weight_decay);
  out.stage2 = train_stage2(task, eptr, data.train, val, cfg.train_stage2, &opt2);
  save_checkpoint((fs::path(out_dir) / "stage2").string(), "stage2", out.stage2.log.size(),
                  params, &opt2.velocity());
  write_metrics_csv((fs::path(out_dir) / "stage2_metrics.csv").string(), out.stage2.log);
  if (out.stage2.aborted) throw NumericError(out.stage2.abort_reason);
  return out;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

nlohmann::json cmd_eval(const ExperimentConfig& cfg, const std::string& checkpoint_dir,
                        const std::string& data_dir, const std::string& out_dir) {
  const DatasetOnDisk data = load_dataset_dir(data_dir);
  if (data.test.empty()) throw ConfigError("dataset has no test scenes to evaluate");
  const std::size_t n = data.test.size();
  const bool regression = cfg.task_net.regression;
  const bool gt_mode = cfg.eval.predict_ground_truth;

  Rng embed_rng(cfg.train.seed);
  EmbeddingNet embed(cfg.embed_net, embed_rng);
  Rng task_rng = task_init_rng(cfg);
  TaskNet task(cfg.task_net, task_rng);
  EmbeddingNet* eptr = stage2_uses_embedding(cfg) ? &embed : nullptr;
  if (!gt_mode) {
    if (checkpoint_dir.empty()) throw ConfigError("evaluation requires a checkpoint");
    const std::string kind = checkpoint_kind(checkpoint_dir);
    if (kind != "stage2") {
      throw ConfigError("evaluation needs a stage-2 checkpoint, got kind \"" + kind + "\"");
    }
    load_checkpoint(checkpoint_dir, joint_params(task, eptr));
  }

  // Per-scene scores, written by index so the parallel schedule cannot
  // change the result.
  std::vector<double> overall(n, 0.0);
  std::vector<std::vector<double>> banded(cfg.eval.trimap_halfwidths.size(),
                                          std::vector<double>(n, 0.0));
  std::vector<double> auc(n, 0.0);
  std::vector<unsigned char> auc_defined(n, 0);

  const double t0 = now_ms();
  parallel_for_rows(n, [&](std::size_t s0, std::size_t s1) {
    for (std::size_t s = s0; s < s1; ++s) {
      const SyntheticScene& scene = data.test[s];
      Tensor output;
      Tensor emb;
      bool have_emb = false;
      if (gt_mode) {
        if (regression) output = scene.flow;
      } else {
        if (eptr) {
          emb = embed.forward(scene.image, nullptr);
          have_emb = true;
        }
        output = task.forward(scene.image,
                              cfg.task_net.needs_embedding() ? &emb : nullptr, nullptr);
      }

      if (regression) {
        overall[s] = banded_epe(output, scene.flow, {});
        for (std::size_t b = 0; b < cfg.eval.trimap_halfwidths.size(); ++b) {
          const auto band = trimap(scene.labels, cfg.eval.trimap_halfwidths[b]);
          banded[b][s] = banded_epe(output, scene.flow, band);
        }
      } else {
        const LabelMap pred = gt_mode ? scene.labels : argmax_labels(output);
        overall[s] = mean_iou(pred, scene.labels, nullptr);
        for (std::size_t b = 0; b < cfg.eval.trimap_halfwidths.size(); ++b) {
          const auto band = trimap(scene.labels, cfg.eval.trimap_halfwidths[b]);
          banded[b][s] = mean_iou(pred, scene.labels, &band);
        }
      }
      if (have_emb) {
        const AucResult r = mask_auc(emb, scene.labels, PatchSpec{3, 3, 1},
                                     cfg.task_net.mask_norm);
        auc[s] = r.value;
        auc_defined[s] = r.defined ? 1 : 0;
      }
    }
  });
  const double seconds_per_image = (now_ms() - t0) / 1000.0 / static_cast<double>(n);

  auto mean_of = [](const std::vector<double>& v) {
    double t = 0.0;
    for (double x : v) t += x;
    return t / static_cast<double>(v.size());
  };

  json trimap_table = json::array();
  for (std::size_t b = 0; b < cfg.eval.trimap_halfwidths.size(); ++b) {
    json row = {{"halfwidth", cfg.eval.trimap_halfwidths[b]}};
    row[regression ? "aepe" : "mean_iou"] = mean_of(banded[b]);
    trimap_table.push_back(row);
  }

  double auc_total = 0.0;
  std::size_t auc_count = 0;
  for (std::size_t s = 0; s < n; ++s) {
    if (auc_defined[s]) {
      auc_total += auc[s];
      ++auc_count;
    }
  }

  json report = {{"schema_version", 1},
                 {"task", regression ? "regression" : "classification"},
                 {"scenes", n},
                 {"overall", json{{regression ? "aepe" : "mean_iou", mean_of(overall)}}},
                 {"trimap", trimap_table},
                 {"seconds_per_image", seconds_per_image}};
  if (auc_count > 0) {
    report["mask_auc"] = auc_total / static_cast<double>(auc_count);
  } else {
    report["mask_auc"] = nullptr;
  }

  if (!out_dir.empty()) {
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create output directory " + out_dir + ": " + ec.message());
    std::ofstream out((fs::path(out_dir) / "report.json").string());
    if (!out.good()) throw IoError("cannot write report.json in " + out_dir);
    out << report.dump(2) << "\n";
    write_experiment_config((fs::path(out_dir) / "config_resolved.json").string(), cfg);
  }
  return report;
}

// ---------------------------------------------------------------------------
// grad-check
// ---------------------------------------------------------------------------

namespace {

GradAuditReport audit_linear() {
  Rng rng(51), rng_x(52);
  TaskNetConfig cfg;
  cfg.depth = 2;
  cfg.channels = 4;
  cfg.out_channels = 2;
  cfg.relu = false;
  cfg.regression = true;
  TaskNet net(cfg, rng);
  const Tensor image = random_field({7, 7, 3}, rng_x);
  const Tensor target = random_field({7, 7, 2}, rng_x);
  auto run = [&](bool grads) {
    TaskCache cache;
    net.forward(image, nullptr, &cache);
    if (grads) {
      net.zero_grads();
      return net.backward(cache, nullptr, &target, nullptr);
    }
    return net.loss_only(cache.output, nullptr, &target);
  };
  Rng audit_rng(53);
  return numeric_grad_audit(run, net.params(), 1e-5, 6, audit_rng);
}

GradAuditReport audit_composed() {
  Rng rng(61), rng_t(62), rng_x(63);
  EmbedNetConfig ecfg;
  ecfg.channels = {3, 3, 4, 4, 4, 4, 4};
  ecfg.embed_dim = 3;
  ecfg.loss.neighborhoods = {{3, 1}, {3, 2}};
  EmbeddingNet enet(ecfg, rng);
  TaskNetConfig tcfg;
  tcfg.depth = 2;
  tcfg.channels = 4;
  tcfg.out_channels = 3;
  tcfg.segaware = SegawareMode::kAllLayers;
  tcfg.mask_norm = Norm::L2;
  TaskNet tnet(tcfg, rng_t);
  Rng lrng(63);
  const Tensor image = random_field({8, 8, 3}, rng_x);
  const LabelMap labels = random_label_field(8, 8, 3, lrng);
  const double embed_weight = 0.1;
  auto run = [&](bool grads) {
    EmbedCache ec;
    TaskCache tc;
    const Tensor emb = enet.forward(image, &ec);
    tnet.forward(image, &emb, &tc);
    if (grads) {
      enet.zero_grads();
      tnet.zero_grads();
      Tensor gemb(emb.shape);
      const double task_loss = tnet.backward(tc, &labels, nullptr, &gemb);
      return task_loss + enet.backward(ec, &labels, embed_weight, &gemb);
    }
    return tnet.loss_only(tc.output, &labels, nullptr) +
           embed_weight * enet.loss_only(ec, labels);
  };
  std::vector<ParamRef> params = tnet.params();
  std::vector<ParamRef> extra = enet.params();
  params.insert(params.end(), extra.begin(), extra.end());
  Rng audit_rng(64);
  return numeric_grad_audit(run, params, 1e-5, 3, audit_rng);
}

GradAuditReport audit_crf_head() {
  Rng rng(71), rng_x(72);
  TaskNetConfig cfg;
  cfg.depth = 1;
  cfg.channels = 4;
  cfg.out_channels = 3;
  cfg.segaware = SegawareMode::kLastLayer;
  cfg.mask_norm = Norm::L2;
  cfg.post = PostMode::kCrf;
  cfg.crf.bilateral_spec = PatchSpec{3, 3, 2};
  cfg.crf.spatial_spec = PatchSpec{3, 3, 1};
  cfg.crf.theta_beta = 0.8;
  TaskNet net(cfg, rng);
  const Tensor image = random_field({6, 6, 3}, rng_x);
  Tensor emb = random_field({6, 6, 2}, rng_x);
  Tensor grad_emb(emb.shape);
  Rng lrng(72);
  const LabelMap labels = random_label_field(6, 6, 3, lrng);
  auto run = [&](bool grads) {
    TaskCache cache;
    net.forward(image, &emb, &cache);
    if (grads) {
      net.zero_grads();
      grad_emb = Tensor(emb.shape);
      return net.backward(cache, &labels, nullptr, &grad_emb);
    }
    return net.loss_only(cache.output, &labels, nullptr);
  };
  std::vector<ParamRef> params = net.params();
  params.push_back({"embedding", LayerKind::kCrf, &emb, &grad_emb, false});
  Rng audit_rng(73);
  return numeric_grad_audit(run, params, 1e-5, 4, audit_rng);
}

void print_audit(const char* label, const GradAuditReport& report, double gate) {
  std::printf("%-12s gate %.0e  max rel err %.3e  (%zu probes, %zu kink-excluded)  %s\n",
              label, gate, report.max_rel_err, report.checked, report.excluded,
              report.pass(gate) ? "pass" : "FAIL");
  for (const auto& e : report.per_kind) {
    std::printf("  %-14s max %.3e  worst %-18s checked %zu excluded %zu\n",
                layer_kind_name(e.kind), e.max_rel_err, e.worst_param.c_str(), e.checked,
                e.excluded);
  }
}

}  // namespace

GradCheckOutcome cmd_grad_check() {
  GradCheckOutcome out;
  out.linear = audit_linear();
  out.composed = audit_composed();
  out.crf_head = audit_crf_head();
  out.passed = out.linear.pass(1e-8) && out.composed.pass(1e-5) && out.crf_head.pass(1e-5);
  print_audit("linear", out.linear, 1e-8);
  print_audit("composed", out.composed, 1e-5);
  print_audit("crf-head", out.crf_head, 1e-5);
  return out;
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

std::vector<BenchRow> cmd_bench(const std::string& out_dir) {
  struct Point {
    std::size_t h, w, e, f;
    PatchSpec spec;
  };
  const std::vector<Point> points = {
      {8, 8, 4, 4, {3, 3, 1}},        {32, 32, 8, 8, {3, 3, 1}},
      {64, 64, 8, 16, {3, 3, 1}},     {64, 64, 16, 16, {5, 5, 1}},
      {128, 128, 16, 16, {3, 3, 1}},
  };

  std::vector<BenchRow> rows;
  Rng rng(1234);
  for (const Point& pt : points) {
    Tensor x = random_field({pt.h, pt.w, pt.e}, rng);
    Tensor emb = random_field({pt.h, pt.w, 2}, rng);
    ConvFilter filter;
    filter.spec = pt.spec;
    filter.weights = random_field({pt.spec.patch() * pt.e, pt.f}, rng);
    filter.bias = Tensor({pt.f});
    filter.has_bias = true;
    const ColMatrix dist = im2dist(emb, pt.spec, Norm::L1);
    const MaskField masks = compute_masks(dist, 1.0, pt.spec, Norm::L1);

    // Both implementations must agree before timing means anything.
    if (pt.h == 8) {
      const Tensor a = segaware_conv(x, masks, filter);
      const Tensor b = segaware_conv_reference(x, masks, filter);
      for (std::size_t i = 0; i < a.numel(); ++i) {
        if (std::abs(a.data[i] - b.data[i]) > 1e-12) {
          throw NumericError("masked convolution implementations disagree at the "
                             "benchmark self-check");
        }
      }
    }

    BenchRow row;
    row.h = pt.h;
    row.w = pt.w;
    row.e = pt.e;
    row.f = pt.f;
    row.spec = pt.spec;
    row.naive_ms = median_of_5_ms([&] {
      g_bench_sink = g_bench_sink + segaware_conv_reference(x, masks, filter).data[0];
    });
    row.gemm_ms = median_of_5_ms([&] {
      g_bench_sink = g_bench_sink + segaware_conv(x, masks, filter).data[0];
    });
    row.conv_ms = median_of_5_ms([&] { g_bench_sink = g_bench_sink + conv2d(x, filter).data[0]; });
    row.segaware_ms = median_of_5_ms([&] {
      // Full segaware cost: distances, masks, then the masked convolution.
      const ColMatrix d = im2dist(emb, pt.spec, Norm::L1);
      const MaskField m = compute_masks(d, 1.0, pt.spec, Norm::L1);
      g_bench_sink = g_bench_sink + segaware_conv(x, m, filter).data[0];
    });
    row.speedup = row.naive_ms / row.gemm_ms;
    row.overhead = row.segaware_ms / row.conv_ms;
    rows.push_back(row);
    std::printf(
        "%3zux%-3zu E=%-2zu F=%-2zu K=%zu a=%zu  naive %8.3f ms  gemm %8.3f ms  "
        "(%.1fx)  conv %8.3f ms  segaware %8.3f ms  (%.2fx)\n",
        row.h, row.w, row.e, row.f, row.spec.patch(), row.spec.atrous, row.naive_ms,
        row.gemm_ms, row.speedup, row.conv_ms, row.segaware_ms, row.overhead);
  }

  if (!out_dir.empty()) {
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create output directory " + out_dir + ": " + ec.message());
    const std::string path = (fs::path(out_dir) / "bench.csv").string();
    std::ofstream out(path);
    if (!out.good()) throw IoError("cannot write " + path);
    out << "h,w,e,f,kernel,atrous,naive_ms,gemm_ms,speedup,conv_ms,segaware_ms,overhead\n";
    char buf[256];
    for (const BenchRow& r : rows) {
      std::snprintf(buf, sizeof(buf), "%zu,%zu,%zu,%zu,%zu,%zu,%.6f,%.6f,%.3f,%.6f,%.6f,%.3f\n",
                    r.h, r.w, r.e, r.f, r.spec.patch(), r.spec.atrous, r.naive_ms,
                    r.gemm_ms, r.speedup, r.conv_ms, r.segaware_ms, r.overhead);
      out << buf;
    }
  }
  return rows;
}

// ---------------------------------------------------------------------------
// visualize
// ---------------------------------------------------------------------------

void cmd_visualize(const ExperimentConfig& cfg, const std::string& checkpoint_dir,
                   std::uint64_t scene_index, const std::string& out_dir) {
  const DatasetPalette palette = make_palette(cfg.dataset);
  const SyntheticScene scene =
      scene_at(cfg.dataset, palette, cfg.dataset.train_count + scene_index);

  Rng embed_rng(cfg.train.seed);
  EmbeddingNet embed(cfg.embed_net, embed_rng);
  Rng task_rng = task_init_rng(cfg);
  TaskNet task(cfg.task_net, task_rng);

  const std::string kind = checkpoint_kind(checkpoint_dir);
  bool have_task = false;
  if (kind == "stage1") {
    load_checkpoint(checkpoint_dir, embed.params());
  } else if (kind == "stage2") {
    if (!stage2_uses_embedding(cfg)) {
      throw ConfigError(
          "this stage-2 checkpoint has no embedding parameters to visualize "
          "(task_net uses no embeddings and no embedding loss was attached)");
    }
    load_checkpoint(checkpoint_dir, joint_params(task, &embed));
    have_task = true;
  } else {
    throw ConfigError("unknown checkpoint kind \"" + kind + "\"");
  }

  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create output directory " + out_dir + ": " + ec.message());

  const Tensor emb = embed.forward(scene.image, nullptr);
  write_ppm((fs::path(out_dir) / "input.ppm").string(), scene.image);
  write_ppm((fs::path(out_dir) / "embedding_pca.ppm").string(), pca_rgb(emb));

  // Four seeded reference pixels; each gets an embedding-distance mask and
  // the color-distance mask the embeddings are supposed to beat.
  const std::size_t hw = scene.image.shape[0] * scene.image.shape[1];
  Rng ref_rng(cfg.dataset.seed ^ (scene_index + 1));
  json refs = json::array();
  for (int r = 0; r < 4; ++r) {
    const std::size_t ref = ref_rng.next_below(hw);
    const std::string tag = std::to_string(r);
    write_ppm((fs::path(out_dir) / ("mask_embed_" + tag + ".ppm")).string(),
              reference_mask_image(emb, ref, cfg.task_net.bilateral_lambda,
                                   cfg.task_net.mask_norm));
    write_ppm((fs::path(out_dir) / ("mask_color_" + tag + ".ppm")).string(),
              reference_mask_image(scene.image, ref, cfg.task_net.bilateral_lambda,
                                   cfg.task_net.mask_norm));
    refs.push_back({{"row", ref / scene.image.shape[1]},
                    {"col", ref % scene.image.shape[1]}});
  }

  if (have_task) {
    const Tensor output = task.forward(
        scene.image, cfg.task_net.needs_embedding() ? &emb : nullptr, nullptr);
    if (cfg.task_net.regression) {
      write_tensor((fs::path(out_dir) / "prediction_flow.tnsr").string(), output);
    } else {
      const LabelMap pred = argmax_labels(output);
      Tensor vis({scene.image.shape[0], scene.image.shape[1], 3});
      for (std::size_t p = 0; p < hw; ++p) {
        const std::size_t l = static_cast<std::size_t>(pred.labels[p]);
        for (std::size_t c = 0; c < 3; ++c) {
          vis.data[p * 3 + c] =
              l < cfg.dataset.num_labels() ? palette.colors[l * 3 + c] : 0.0;
        }
      }
      write_ppm((fs::path(out_dir) / "prediction.ppm").string(), vis);
    }
  }

  const PatchSpec auc_spec{3, 3, 1};
  const AucResult emb_auc = mask_auc(emb, scene.labels, auc_spec, cfg.task_net.mask_norm);
  const AucResult color_auc =
      mask_auc(scene.image, scene.labels, auc_spec, cfg.task_net.mask_norm);
  json sidecar = {{"scene_index", scene_index},
                  {"reference_pixels", refs},
                  {"embedding_mask_auc",
                   emb_auc.defined ? json(emb_auc.value) : json(nullptr)},
                  {"color_mask_auc",
                   color_auc.defined ? json(color_auc.value) : json(nullptr)}};
  std::ofstream side((fs::path(out_dir) / "visualize.json").string());
  if (!side.good()) throw IoError("cannot write visualize.json in " + out_dir);
  side << sidecar.dump(2) << "\n";

  write_experiment_config((fs::path(out_dir) / "config_resolved.json").string(), cfg);
}

}  // namespace segaware
