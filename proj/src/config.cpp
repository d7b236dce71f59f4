#include "segaware/config.hpp"

#include <fstream>
#include <set>
#include <utility>

#include "segaware/errors.hpp"

namespace segaware {

namespace {

using nlohmann::json;

// One JSON object plus the path it sits at. Every read registers its key;
// finish() then rejects anything that was never asked for.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + " must be a JSON object");
  }

  const std::string& path() const { return path_; }

  const json* find(const std::string& key) {
    seen_.insert(key);
    const auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void read(const std::string& key, double& out) {
    if (const json* v = find(key)) {
      if (!v->is_number()) throw ConfigError(at(key) + " must be a number");
      out = v->get<double>();
    }
  }

  void read(const std::string& key, bool& out) {
    if (const json* v = find(key)) {
      if (!v->is_boolean()) throw ConfigError(at(key) + " must be a boolean");
      out = v->get<bool>();
    }
  }

  void read(const std::string& key, std::size_t& out) {
    if (const json* v = find(key)) {
      if (!v->is_number_unsigned()) {
        throw ConfigError(at(key) + " must be a nonnegative integer");
      }
      out = v->get<std::size_t>();
    }
  }

  void read(const std::string& key, std::vector<std::size_t>& out) {
    if (const json* v = find(key)) {
      if (!v->is_array()) throw ConfigError(at(key) + " must be an array");
      out.clear();
      for (const auto& e : *v) {
        if (!e.is_number_unsigned()) {
          throw ConfigError(at(key) + " must hold nonnegative integers");
        }
        out.push_back(e.get<std::size_t>());
      }
    }
  }

  void read(const std::string& key, PatchSpec& out) {
    if (const json* v = find(key)) {
      if (!v->is_array() || v->size() != 3) {
        throw ConfigError(at(key) + " must be [kernel_h, kernel_w, atrous]");
      }
      for (const auto& e : *v) {
        if (!e.is_number_unsigned()) {
          throw ConfigError(at(key) + " must hold nonnegative integers");
        }
      }
      out = PatchSpec{(*v)[0].get<std::size_t>(), (*v)[1].get<std::size_t>(),
                      (*v)[2].get<std::size_t>()};
    }
  }

  void read(const std::string& key,
            std::vector<std::pair<std::size_t, std::size_t>>& out) {
    if (const json* v = find(key)) {
      if (!v->is_array()) throw ConfigError(at(key) + " must be an array");
      out.clear();
      for (const auto& e : *v) {
        if (!e.is_array() || e.size() != 2 || !e[0].is_number_unsigned() ||
            !e[1].is_number_unsigned()) {
          throw ConfigError(at(key) + " entries must be [kernel, atrous] pairs");
        }
        out.emplace_back(e[0].get<std::size_t>(), e[1].get<std::size_t>());
      }
    }
  }

  void read(const std::string& key, Norm& out) {
    std::string s = out == Norm::L1 ? "l1" : "l2";
    read_string(key, s);
    if (s == "l1") {
      out = Norm::L1;
    } else if (s == "l2") {
      out = Norm::L2;
    } else {
      throw ConfigError(at(key) + " must be \"l1\" or \"l2\", got \"" + s + "\"");
    }
  }

  void read(const std::string& key, SegawareMode& out) {
    std::string s = segaware_mode_name(out);
    read_string(key, s);
    if (s == "none") {
      out = SegawareMode::kNone;
    } else if (s == "last_layer") {
      out = SegawareMode::kLastLayer;
    } else if (s == "all_layers") {
      out = SegawareMode::kAllLayers;
    } else {
      throw ConfigError(at(key) + " must be \"none\", \"last_layer\" or \"all_layers\"");
    }
  }

  void read(const std::string& key, PostMode& out) {
    std::string s = post_mode_name(out);
    read_string(key, s);
    if (s == "none") {
      out = PostMode::kNone;
    } else if (s == "bilateral") {
      out = PostMode::kBilateral;
    } else if (s == "crf") {
      out = PostMode::kCrf;
    } else {
      throw ConfigError(at(key) + " must be \"none\", \"bilateral\" or \"crf\"");
    }
  }

  void finish() {
    for (const auto& item : j_.items()) {
      if (!seen_.count(item.key())) {
        throw ConfigError("unknown key \"" + item.key() + "\" in " + path_);
      }
    }
  }

 private:
  void read_string(const std::string& key, std::string& out) {
    if (const json* v = find(key)) {
      if (!v->is_string()) throw ConfigError(at(key) + " must be a string");
      out = v->get<std::string>();
    }
  }

  std::string at(const std::string& key) const { return path_ + "." + key; }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void parse_dataset(Section& s, DatasetConfig& out) {
  s.read("height", out.height);
  s.read("width", out.width);
  s.read("min_shapes", out.min_shapes);
  s.read("max_shapes", out.max_shapes);
  s.read("noise_sigma", out.noise_sigma);
  s.read("texture_amplitude", out.texture_amplitude);
  s.read("min_color_separation", out.min_color_separation);
  s.read("max_flow", out.max_flow);
  s.read("train_count", out.train_count);
  s.read("test_count", out.test_count);
  s.read("seed", out.seed);
  s.finish();
}

void parse_loss(Section& s, LossConfig& out) {
  s.read("alpha", out.alpha);
  s.read("beta", out.beta);
  s.read("norm", out.norm);
  s.read("neighborhoods", out.neighborhoods);
  s.finish();
}

void parse_embed_net(Section& s, EmbedNetConfig& out) {
  s.read("channels", out.channels);
  s.read("embed_dim", out.embed_dim);
  s.read("fused_loss_weight", out.fused_loss_weight);
  if (const json* j = s.find("loss")) {
    Section sub(*j, s.path() + ".loss");
    parse_loss(sub, out.loss);
  }
  s.finish();
}

void parse_crf(Section& s, CRFParams& out) {
  s.read("w1", out.w1);
  s.read("w2", out.w2);
  s.read("theta_alpha", out.theta_alpha);
  s.read("theta_beta", out.theta_beta);
  s.read("theta_gamma", out.theta_gamma);
  s.read("bilateral_spec", out.bilateral_spec);
  s.read("spatial_spec", out.spatial_spec);
  s.read("iterations", out.iterations);
  s.finish();
}

void parse_task_net(Section& s, TaskNetConfig& out) {
  s.read("in_channels", out.in_channels);
  s.read("channels", out.channels);
  s.read("depth", out.depth);
  s.read("out_channels", out.out_channels);
  s.read("regression", out.regression);
  s.read("relu", out.relu);
  s.read("segaware", out.segaware);
  s.read("post", out.post);
  s.read("bilateral_reps", out.bilateral_reps);
  s.read("bilateral_lambda", out.bilateral_lambda);
  s.read("mask_norm", out.mask_norm);
  s.read("lambda_init", out.lambda_init);
  s.read("conv_spec", out.conv_spec);
  if (const json* j = s.find("crf")) {
    Section sub(*j, s.path() + ".crf");
    parse_crf(sub, out.crf);
  }
  s.finish();
}

void parse_train_fields(Section& s, TrainConfig& out) {
  s.read("lr", out.lr);
  s.read("momentum", out.momentum);
  s.read("weight_decay", out.weight_decay);
  s.read("epochs", out.epochs);
  s.read("batch", out.batch);
  s.read("seed", out.seed);
  s.read("stage2_embed_loss_weight", out.stage2_embed_loss_weight);
}

void parse_eval(Section& s, EvalConfig& out) {
  s.read("trimap_halfwidths", out.trimap_halfwidths);
  s.read("predict_ground_truth", out.predict_ground_truth);
  s.finish();
}

json patch_spec_json(const PatchSpec& spec) {
  return json::array({spec.kernel_h, spec.kernel_w, spec.atrous});
}

const char* norm_name(Norm n) { return n == Norm::L1 ? "l1" : "l2"; }

json train_json(const TrainConfig& t) {
  return json{{"lr", t.lr},
              {"momentum", t.momentum},
              {"weight_decay", t.weight_decay},
              {"epochs", t.epochs},
              {"batch", t.batch},
              {"seed", t.seed},
              {"stage2_embed_loss_weight", t.stage2_embed_loss_weight}};
}

}  // namespace

void EvalConfig::validate() const {
  for (const std::size_t h : trimap_halfwidths) {
    if (h == 0) throw ConfigError("trimap halfwidths must be >= 1");
  }
}

void ExperimentConfig::validate() const {
  dataset.validate();
  embed_net.validate();
  task_net.validate();
  train.validate();
  train_stage2.validate();
  eval.validate();
}

ExperimentConfig parse_experiment_config(const nlohmann::json& doc) {
  ExperimentConfig cfg;
  Section root(doc, "config");
  if (const json* j = root.find("dataset")) {
    Section s(*j, "dataset");
    parse_dataset(s, cfg.dataset);
  }
  if (const json* j = root.find("embed_net")) {
    Section s(*j, "embed_net");
    parse_embed_net(s, cfg.embed_net);
  }
  if (const json* j = root.find("task_net")) {
    Section s(*j, "task_net");
    parse_task_net(s, cfg.task_net);
  }
  if (const json* j = root.find("train")) {
    Section s(*j, "train");
    parse_train_fields(s, cfg.train);
    cfg.train_stage2 = cfg.train;
    if (const json* j2 = s.find("stage2")) {
      Section s2(*j2, "train.stage2");
      parse_train_fields(s2, cfg.train_stage2);
      s2.finish();
    }
    s.finish();
  } else {
    cfg.train_stage2 = cfg.train;
  }
  if (const json* j = root.find("eval")) {
    Section s(*j, "eval");
    parse_eval(s, cfg.eval);
  }
  root.finish();
  cfg.validate();
  return cfg;
}

ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in.good()) throw IoError("cannot open config file " + path);
  json doc;
  try {
    in >> doc;
  } catch (const json::exception& e) {
    throw ConfigError("config file " + path + " is not valid JSON: " + e.what());
  }
  return parse_experiment_config(doc);
}

nlohmann::json experiment_config_json(const ExperimentConfig& cfg) {
  json neigh = json::array();
  for (const auto& [k, a] : cfg.embed_net.loss.neighborhoods) {
    neigh.push_back(json::array({k, a}));
  }
  json train = train_json(cfg.train);
  train["stage2"] = train_json(cfg.train_stage2);
  return json{
      {"dataset",
       {{"height", cfg.dataset.height},
        {"width", cfg.dataset.width},
        {"min_shapes", cfg.dataset.min_shapes},
        {"max_shapes", cfg.dataset.max_shapes},
        {"noise_sigma", cfg.dataset.noise_sigma},
        {"texture_amplitude", cfg.dataset.texture_amplitude},
        {"min_color_separation", cfg.dataset.min_color_separation},
        {"max_flow", cfg.dataset.max_flow},
        {"train_count", cfg.dataset.train_count},
        {"test_count", cfg.dataset.test_count},
        {"seed", cfg.dataset.seed}}},
      {"embed_net",
       {{"channels", cfg.embed_net.channels},
        {"embed_dim", cfg.embed_net.embed_dim},
        {"fused_loss_weight", cfg.embed_net.fused_loss_weight},
        {"loss",
         {{"alpha", cfg.embed_net.loss.alpha},
          {"beta", cfg.embed_net.loss.beta},
          {"norm", norm_name(cfg.embed_net.loss.norm)},
          {"neighborhoods", neigh}}}}},
      {"task_net",
       {{"in_channels", cfg.task_net.in_channels},
        {"channels", cfg.task_net.channels},
        {"depth", cfg.task_net.depth},
        {"out_channels", cfg.task_net.out_channels},
        {"regression", cfg.task_net.regression},
        {"relu", cfg.task_net.relu},
        {"segaware", segaware_mode_name(cfg.task_net.segaware)},
        {"post", post_mode_name(cfg.task_net.post)},
        {"bilateral_reps", cfg.task_net.bilateral_reps},
        {"bilateral_lambda", cfg.task_net.bilateral_lambda},
        {"mask_norm", norm_name(cfg.task_net.mask_norm)},
        {"lambda_init", cfg.task_net.lambda_init},
        {"conv_spec", patch_spec_json(cfg.task_net.conv_spec)},
        {"crf",
         {{"w1", cfg.task_net.crf.w1},
          {"w2", cfg.task_net.crf.w2},
          {"theta_alpha", cfg.task_net.crf.theta_alpha},
          {"theta_beta", cfg.task_net.crf.theta_beta},
          {"theta_gamma", cfg.task_net.crf.theta_gamma},
          {"bilateral_spec", patch_spec_json(cfg.task_net.crf.bilateral_spec)},
          {"spatial_spec", patch_spec_json(cfg.task_net.crf.spatial_spec)},
          {"iterations", cfg.task_net.crf.iterations}}}}},
      {"train", train},
      {"eval",
       {{"trimap_halfwidths", cfg.eval.trimap_halfwidths},
        {"predict_ground_truth", cfg.eval.predict_ground_truth}}}};
}

void write_experiment_config(const std::string& path, const ExperimentConfig& cfg) {
  std::ofstream out(path);
  if (!out.good()) throw IoError("cannot write config file " + path);
  out << experiment_config_json(cfg).dump(2) << "\n";
  if (!out.good()) throw IoError("failed while writing config file " + path);
}

}  // namespace segaware
