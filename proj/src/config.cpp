#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>

#include "mhaff/train.hpp"

namespace mhaff {

using nlohmann::json;

namespace {

[[noreturn]] void unknown(const std::string& section, const std::string& key) {
  throw ConfigError("unknown config key '" + section + key + "'");
}

void require_object(const json& j, const std::string& section) {
  if (!j.is_object()) throw ConfigError("config section '" + section + "' must be an object");
}

template <typename T>
void get(const json& j, T& out) {
  out = j.get<T>();
}

void read_cnn(const json& j, CnnBranchConfig& c) {
  require_object(j, "model.cnn");
  for (const auto& [k, v] : j.items()) {
    if (k == "input_size") get(v, c.input_size);
    else if (k == "in_channels") get(v, c.in_channels);
    else if (k == "stem_channels") get(v, c.stem_channels);
    else if (k == "stem_stride") get(v, c.stem_stride);
    else if (k == "block_channels") get(v, c.block_channels);
    else if (k == "kernel_size") get(v, c.kernel_size);
    else if (k == "norm_groups") get(v, c.norm_groups);
    else unknown("model.cnn.", k);
  }
}

void read_vit(const json& j, VitBranchConfig& c) {
  require_object(j, "model.vit");
  for (const auto& [k, v] : j.items()) {
    if (k == "input_size") get(v, c.input_size);
    else if (k == "in_channels") get(v, c.in_channels);
    else if (k == "patch_size") get(v, c.patch_size);
    else if (k == "d_model") get(v, c.d_model);
    else if (k == "num_encoders") get(v, c.num_encoders);
    else if (k == "num_heads") get(v, c.num_heads);
    else if (k == "mlp_ratio") get(v, c.mlp_ratio);
    else unknown("model.vit.", k);
  }
}

void read_model(const json& j, ModelConfig& m) {
  require_object(j, "model");
  for (const auto& [k, v] : j.items()) {
    if (k == "cnn") read_cnn(v, m.cnn);
    else if (k == "vit") read_vit(v, m.vit);
    else if (k == "token_grid") get(v, m.token_grid);
    else if (k == "fusion") m.fusion = parse_fusion_method(v.get<std::string>());
    else if (k == "wiring") m.wiring = QkvWiring::parse(v.get<std::string>());
    else if (k == "fusion_heads") get(v, m.fusion_heads);
    else if (k == "fusion_residual") get(v, m.fusion_residual);
    else if (k == "fused_dim") get(v, m.fused_dim);
    else if (k == "classes") get(v, m.classes);
    else if (k == "dropout") get(v, m.dropout);
    else unknown("model.", k);
  }
}

void read_augment(const json& j, TrainConfig& c) {
  require_object(j, "augment");
  AugmentSpec& a = c.augmentation;
  for (const auto& [k, v] : j.items()) {
    if (k == "enabled") get(v, c.augment);
    else if (k == "hflip_probability") get(v, a.hflip_probability);
    else if (k == "brightness_probability") get(v, a.brightness_probability);
    else if (k == "brightness_min") get(v, a.brightness_min);
    else if (k == "brightness_max") get(v, a.brightness_max);
    else if (k == "rotation_degrees") get(v, a.rotation_degrees);
    else if (k == "blur_kernels") get(v, a.blur_kernels);
    else unknown("augment.", k);
  }
}

void read_preprocess(const json& j, PreprocessConfig& p) {
  require_object(j, "preprocess");
  for (const auto& [k, v] : j.items()) {
    if (k == "cnn_resize") get(v, p.cnn_resize);
    else if (k == "cnn_crop") get(v, p.cnn_crop);
    else if (k == "vit_size") get(v, p.vit_size);
    else if (k == "mean") get(v, p.mean);
    else if (k == "std") get(v, p.stddev);
    else unknown("preprocess.", k);
  }
}

void read_config(const json& j, TrainConfig& c) {
  require_object(j, "");
  for (const auto& [k, v] : j.items()) {
    if (k == "epochs") get(v, c.epochs);
    else if (k == "learning_rate") get(v, c.learning_rate);
    else if (k == "scheduler") {
      require_object(v, "scheduler");
      for (const auto& [sk, sv] : v.items()) {
        if (sk == "factor") get(sv, c.lr_factor);
        else if (sk == "patience") get(sv, c.lr_patience);
        else if (sk == "threshold") get(sv, c.improvement_threshold);
        else unknown("scheduler.", sk);
      }
    } else if (k == "early_stop_patience") get(v, c.early_stop_patience);
    else if (k == "batch_size") get(v, c.batch_size);
    else if (k == "seed") get(v, c.seed);
    else if (k == "data") get(v, c.data);
    else if (k == "split") {
      require_object(v, "split");
      for (const auto& [sk, sv] : v.items()) {
        if (sk == "train") get(sv, c.split.train);
        else if (sk == "val") get(sv, c.split.val);
        else if (sk == "test") get(sv, c.split.test);
        else unknown("split.", sk);
      }
    } else if (k == "augment") read_augment(v, c);
    else if (k == "preprocess") read_preprocess(v, c.preprocess);
    else if (k == "adam") {
      require_object(v, "adam");
      for (const auto& [sk, sv] : v.items()) {
        if (sk == "beta1") get(sv, c.adam.beta1);
        else if (sk == "beta2") get(sv, c.adam.beta2);
        else if (sk == "eps") get(sv, c.adam.eps);
        else unknown("adam.", sk);
      }
    } else if (k == "model") read_model(v, c.model);
    else unknown("", k);
  }
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs == 0) throw ConfigError("epochs must be positive");
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (!(lr_factor > 0.0 && lr_factor < 1.0)) throw ConfigError("scheduler.factor must lie in (0, 1)");
  if (lr_patience == 0 || early_stop_patience == 0) throw ConfigError("patience values must be positive");
  if (improvement_threshold < 0.0) throw ConfigError("scheduler.threshold must be non-negative");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (data.empty()) throw ConfigError("no dataset given");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0 && adam.eps > 0.0)) {
    throw ConfigError("adam hyperparameters out of range");
  }
  augmentation.validate();
  preprocess.validate();
  model.validate();
  if (preprocess.cnn_crop != model.cnn.input_size || preprocess.vit_size != model.vit.input_size) {
    throw ConfigError("preprocess sizes (cnn_crop " + std::to_string(preprocess.cnn_crop) + ", vit_size " +
                      std::to_string(preprocess.vit_size) + ") must match the branch input sizes");
  }
}

TrainConfig config_from_json(std::string_view text) {
  TrainConfig c;
  try {
    read_config(json::parse(text), c);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

std::string config_to_json(const TrainConfig& c) {
  const ModelConfig& m = c.model;
  json j;
  j["epochs"] = c.epochs;
  j["learning_rate"] = c.learning_rate;
  j["scheduler"] = {{"factor", c.lr_factor}, {"patience", c.lr_patience}, {"threshold", c.improvement_threshold}};
  j["early_stop_patience"] = c.early_stop_patience;
  j["batch_size"] = c.batch_size;
  j["seed"] = c.seed;
  j["data"] = c.data;
  j["split"] = {{"train", c.split.train}, {"val", c.split.val}, {"test", c.split.test}};
  j["augment"] = {{"enabled", c.augment},
                  {"hflip_probability", c.augmentation.hflip_probability},
                  {"brightness_probability", c.augmentation.brightness_probability},
                  {"brightness_min", c.augmentation.brightness_min},
                  {"brightness_max", c.augmentation.brightness_max},
                  {"rotation_degrees", c.augmentation.rotation_degrees},
                  {"blur_kernels", c.augmentation.blur_kernels}};
  j["preprocess"] = {{"cnn_resize", c.preprocess.cnn_resize},
                     {"cnn_crop", c.preprocess.cnn_crop},
                     {"vit_size", c.preprocess.vit_size},
                     {"mean", c.preprocess.mean},
                     {"std", c.preprocess.stddev}};
  j["adam"] = {{"beta1", c.adam.beta1}, {"beta2", c.adam.beta2}, {"eps", c.adam.eps}};
  j["model"] = {{"token_grid", m.token_grid},
                {"fusion", to_string(m.fusion)},
                {"wiring", m.wiring.name()},
                {"fusion_heads", m.fusion_heads},
                {"fusion_residual", m.fusion_residual},
                {"fused_dim", m.fused_dim},
                {"classes", m.classes},
                {"dropout", m.dropout},
                {"cnn",
                 {{"input_size", m.cnn.input_size},
                  {"in_channels", m.cnn.in_channels},
                  {"stem_channels", m.cnn.stem_channels},
                  {"stem_stride", m.cnn.stem_stride},
                  {"block_channels", m.cnn.block_channels},
                  {"kernel_size", m.cnn.kernel_size},
                  {"norm_groups", m.cnn.norm_groups}}},
                {"vit",
                 {{"input_size", m.vit.input_size},
                  {"in_channels", m.vit.in_channels},
                  {"patch_size", m.vit.patch_size},
                  {"d_model", m.vit.d_model},
                  {"num_encoders", m.vit.num_encoders},
                  {"num_heads", m.vit.num_heads},
                  {"mlp_ratio", m.vit.mlp_ratio}}}};
  return j.dump(2);
}

TrainConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return config_from_json(ss.str());
}

}  // namespace mhaff
