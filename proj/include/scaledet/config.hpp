#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "scaledet/core_types.hpp"
#include "scaledet/data.hpp"
#include "scaledet/losses.hpp"
#include "scaledet/model.hpp"

namespace scaledet {

/// Everything one training run needs, parseable from and serializable to a
/// flat key=value text file. Unknown keys are rejected.
struct RunConfig {
  ModelConfig model;
  LossWeights weights;
  SceneConfig scene;
  ScaleLossMode scale_loss_mode = ScaleLossMode::kLiteral;
  WsmWeightMode wsm_weight_mode = WsmWeightMode::kRank;
  bool intermediate_supervision = true;
  int epochs = 20;
  int batch_size = 16;
  double learning_rate = 2e-4;
  double weight_decay = 1e-4;
  int train_samples = 2000;
  int val_samples = 200;
  std::uint64_t seed = 0;
  std::string out_dir = "runs/default";
  std::string class_profile = "car";  // car | pedestrian | cyclist

  /// Propagates shared fields (image size, seeds, scene classes) into the
  /// nested configs and validates the result. Profile-provided scale-set
  /// defaults are a parsing convenience only; programmatic configs own their
  /// scales directly.
  void finalize() {
    scene.image_width = model.image_width;
    scene.image_height = model.image_height;
    scene.seed = seed;
    model.seed = seed;
    scene.classes = profile_classes();
    model.validate();
    scene.validate();
    weights.validate();
    if (epochs < 1 || batch_size < 1 || train_samples < 1 || val_samples < 1)
      throw std::invalid_argument("RunConfig: counts must be positive");
  }

  std::vector<std::string> class_names() const { return class_names_of(scene); }

  static const char* scale_mode_name(ScaleLossMode m) {
    return m == ScaleLossMode::kLiteral ? "literal" : "expected";
  }
  static const char* wsm_mode_name(WsmWeightMode m) {
    switch (m) {
      case WsmWeightMode::kRank: return "rank";
      case WsmWeightMode::kConstant: return "constant";
      case WsmWeightMode::kLogLoss: return "log_loss";
    }
    return "rank";
  }

  std::string to_text() const {
    std::ostringstream o;
    o.precision(12);
    o << "channels=" << model.channels << "\n";
    o << "heads=" << model.heads << "\n";
    o << "decoder_blocks=" << model.decoder_blocks << "\n";
    o << "queries=" << model.queries << "\n";
    o << "keypoints=" << model.keypoints << "\n";
    o << "scales=";
    for (std::size_t i = 0; i < model.scales.size(); ++i) o << (i ? "," : "") << model.scales[i];
    o << "\n";
    o << "vertical_expansion=" << model.vertical_expansion << "\n";
    o << "image_width=" << model.image_width << "\n";
    o << "image_height=" << model.image_height << "\n";
    o << "num_classes=" << model.num_classes << "\n";
    o << "encoder_blocks=" << model.encoder_blocks << "\n";
    o << "use_ssda=" << (model.use_ssda ? 1 : 0) << "\n";
    o << "shared_head_offsets=" << (model.shared_head_offsets ? 1 : 0) << "\n";
    o << "lambda1=" << weights.lambda1 << "\n";
    o << "lambda2=" << weights.lambda2 << "\n";
    o << "lambda3=" << weights.lambda3 << "\n";
    o << "lambda4=" << weights.lambda4 << "\n";
    o << "lambda5=" << weights.lambda5 << "\n";
    o << "lambda6=" << weights.lambda6 << "\n";
    o << "lambda7=" << weights.lambda7 << "\n";
    o << "lambda8=" << weights.lambda8 << "\n";
    o << "scale_loss_mode=" << scale_mode_name(scale_loss_mode) << "\n";
    o << "wsm_weight_mode=" << wsm_mode_name(wsm_weight_mode) << "\n";
    o << "intermediate_supervision=" << (intermediate_supervision ? 1 : 0) << "\n";
    o << "min_objects=" << scene.min_objects << "\n";
    o << "max_objects=" << scene.max_objects << "\n";
    o << "z_min=" << scene.z_min << "\n";
    o << "z_max=" << scene.z_max << "\n";
    o << "focal=" << scene.focal << "\n";
    o << "noise=" << scene.noise << "\n";
    o << "class_profile=" << class_profile << "\n";
    o << "epochs=" << epochs << "\n";
    o << "batch_size=" << batch_size << "\n";
    o << "learning_rate=" << learning_rate << "\n";
    o << "weight_decay=" << weight_decay << "\n";
    o << "train_samples=" << train_samples << "\n";
    o << "val_samples=" << val_samples << "\n";
    o << "seed=" << seed << "\n";
    o << "out_dir=" << out_dir << "\n";
    return o.str();
  }

  static RunConfig from_text(const std::string& text) {
    RunConfig cfg;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty() || line[0] == '#') continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        throw std::runtime_error("RunConfig: bad line " + std::to_string(line_no));
      cfg.apply(line.substr(0, eq), line.substr(eq + 1));
    }
    cfg.apply_profile_scale_defaults();
    cfg.finalize();
    return cfg;
  }

  static RunConfig from_file(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("RunConfig: cannot open " + path.string());
    std::stringstream buf;
    buf << f.rdbuf();
    return from_text(buf.str());
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("RunConfig: cannot write " + path.string());
    f << to_text();
  }

  /// Applies a single key=value setting; used by the parser and by the
  /// ablation driver's overrides.
  void apply(const std::string& key, const std::string& value) {
    auto as_int = [&] { return std::stoi(value); };
    auto as_double = [&] { return std::stod(value); };
    auto as_bool = [&] { return value != "0" && value != "false"; };
    if (key == "channels") model.channels = as_int();
    else if (key == "heads") model.heads = as_int();
    else if (key == "decoder_blocks") model.decoder_blocks = as_int();
    else if (key == "queries") model.queries = as_int();
    else if (key == "keypoints") model.keypoints = as_int();
    else if (key == "scales") {
      model.scales.clear();
      std::istringstream vs(value);
      std::string tok;
      while (std::getline(vs, tok, ',')) model.scales.push_back(std::stoi(tok));
      scales_explicit_ = true;
    } else if (key == "vertical_expansion") {
      model.vertical_expansion = as_int();
      vexp_explicit_ = true;
    } else if (key == "image_width") model.image_width = as_int();
    else if (key == "image_height") model.image_height = as_int();
    else if (key == "num_classes") model.num_classes = as_int();
    else if (key == "encoder_blocks") model.encoder_blocks = as_int();
    else if (key == "use_ssda") model.use_ssda = as_bool();
    else if (key == "shared_head_offsets") model.shared_head_offsets = as_bool();
    else if (key == "lambda1") weights.lambda1 = as_double();
    else if (key == "lambda2") weights.lambda2 = as_double();
    else if (key == "lambda3") weights.lambda3 = as_double();
    else if (key == "lambda4") weights.lambda4 = as_double();
    else if (key == "lambda5") weights.lambda5 = as_double();
    else if (key == "lambda6") weights.lambda6 = as_double();
    else if (key == "lambda7") weights.lambda7 = as_double();
    else if (key == "lambda8") weights.lambda8 = as_double();
    else if (key == "scale_loss_mode") {
      if (value == "literal") scale_loss_mode = ScaleLossMode::kLiteral;
      else if (value == "expected") scale_loss_mode = ScaleLossMode::kExpected;
      else throw std::runtime_error("RunConfig: bad scale_loss_mode " + value);
    } else if (key == "wsm_weight_mode") {
      if (value == "rank") wsm_weight_mode = WsmWeightMode::kRank;
      else if (value == "constant") wsm_weight_mode = WsmWeightMode::kConstant;
      else if (value == "log_loss") wsm_weight_mode = WsmWeightMode::kLogLoss;
      else throw std::runtime_error("RunConfig: bad wsm_weight_mode " + value);
    } else if (key == "intermediate_supervision") intermediate_supervision = as_bool();
    else if (key == "min_objects") scene.min_objects = as_int();
    else if (key == "max_objects") scene.max_objects = as_int();
    else if (key == "z_min") scene.z_min = as_double();
    else if (key == "z_max") scene.z_max = as_double();
    else if (key == "focal") scene.focal = as_double();
    else if (key == "noise") scene.noise = as_double();
    else if (key == "class_profile") class_profile = value;
    else if (key == "epochs") epochs = as_int();
    else if (key == "batch_size") batch_size = as_int();
    else if (key == "learning_rate") learning_rate = as_double();
    else if (key == "weight_decay") weight_decay = as_double();
    else if (key == "train_samples") train_samples = as_int();
    else if (key == "val_samples") val_samples = as_int();
    else if (key == "seed") seed = std::stoull(value);
    else if (key == "out_dir") out_dir = value;
    else throw std::runtime_error("RunConfig: unknown key " + key);
  }

 private:
  bool scales_explicit_ = false;
  bool vexp_explicit_ = false;

  std::vector<ObjectClassSpec> profile_classes() const {
    if (class_profile == "car") return {car_class_spec()};
    if (class_profile == "pedestrian") return {pedestrian_class_spec()};
    if (class_profile == "cyclist") return {cyclist_class_spec()};
    throw std::invalid_argument("RunConfig: unknown class_profile " + class_profile);
  }

  void apply_profile_scale_defaults() {
    if (class_profile == "pedestrian") {
      if (!scales_explicit_) model.scales = {1, 3, 5};
      if (!vexp_explicit_) model.vertical_expansion = 3;
    } else if (class_profile == "cyclist") {
      if (!scales_explicit_) model.scales = {1, 3, 5};
      if (!vexp_explicit_) model.vertical_expansion = 2;
    }
  }
};

}  // namespace scaledet
