#include "meshclick/config.hpp"

#include <fstream>
#include <iterator>
#include <set>

#include <json.hpp>

namespace meshclick {

namespace {

using nlohmann::json;

// Reads known keys of one section and rejects the rest.
class Section {
 public:
  Section(const json& root, const char* name) : name_(name) {
    if (!root.contains(name)) return;
    obj_ = &root.at(name);
    if (!obj_->is_object()) throw ConfigError(std::string("config section '") + name + "' must be an object");
  }

  template <class T>
  void read(const char* key, T& out) {
    seen_.insert(key);
    if (obj_ == nullptr || !obj_->contains(key)) return;
    const json& v = obj_->at(key);
    const bool ok = std::is_same_v<T, bool> ? v.is_boolean()
                    : std::is_integral_v<T> ? v.is_number_integer() && (std::is_signed_v<T> || v >= 0)
                                            : v.is_number();
    if (!ok) throw ConfigError(where(key) + " has the wrong type");
    out = v.get<T>();
  }

  void finish() const {
    if (obj_ == nullptr) return;
    for (const auto& [key, value] : obj_->items()) {
      if (!seen_.contains(key)) throw ConfigError("unknown config key " + where(key.c_str()));
    }
  }

 private:
  std::string where(const char* key) const { return std::string("'") + name_ + "." + key + "'"; }
  const char* name_;
  const json* obj_ = nullptr;
  std::set<std::string, std::less<>> seen_;
};

}  // namespace

void RunConfig::validate() const {
  train.validate();
  encoder.validate();
  decoder.validate();
  if (decoder.feature_dim != encoder.out_dim) throw ConfigError("decoder feature_dim must equal encoder out_dim");
  if (teacher.feature_dim != encoder.out_dim) throw ConfigError("teacher feature_dim must equal encoder out_dim");
  if (!(teacher.angle_threshold > 0.0) || !(teacher.depth_step_ratio > 0.0)) {
    throw ConfigError("teacher thresholds must be positive");
  }
  if (fusion.num_views < 1 || fusion.max_candidate_views < 1) throw ConfigError("fusion view counts must be >= 1");
}

RunConfig parse_run_config(std::string_view json_text) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!root.is_object()) throw ConfigError("config must be a JSON object");
  for (const auto& [key, value] : root.items()) {
    static const std::set<std::string> sections = {"version", "train", "encoder", "decoder", "teacher", "fusion"};
    if (!sections.contains(key)) throw ConfigError("unknown config section '" + key + "'");
  }
  if (root.contains("version") && root.at("version") != RunConfig::kVersion) {
    throw ConfigError("unsupported config version " + root.at("version").dump());
  }

  RunConfig c;
  Section t(root, "train");
  t.read("image_size", c.train.image_size);
  t.read("views_per_epoch", c.train.views_per_epoch);
  t.read("encoder_epochs", c.train.encoder_epochs);
  t.read("decoder_epochs", c.train.decoder_epochs);
  t.read("validation_views", c.train.validation_views);
  t.read("encoder_learning_rate", c.train.encoder_learning_rate);
  t.read("decoder_learning_rate", c.train.decoder_learning_rate);
  t.read("seed", c.train.seed);
  t.read("train_vertex_fraction", c.train.train_vertex_fraction);
  t.read("second_click_change_threshold", c.train.second_click_change_threshold);
  t.read("max_resample_attempts", c.train.max_resample_attempts);
  t.read("views_per_vertex", c.train.views_per_vertex);
  t.read("joint_encoder_weight", c.train.joint_encoder_weight);
  t.read("elevation_limit", c.train.elevation_limit);
  t.read("camera_radius", c.train.camera_radius);
  t.read("fov_y", c.train.fov_y);
  t.finish();

  Section e(root, "encoder");
  e.read("pe_frequencies", c.encoder.pe_frequencies);
  e.read("hidden_dim", c.encoder.hidden_dim);
  e.read("layers", c.encoder.layers);
  e.read("out_dim", c.encoder.out_dim);
  e.finish();

  Section d(root, "decoder");
  d.read("hidden_dim", c.decoder.hidden_dim);
  d.read("mlp_layers", c.decoder.mlp_layers);
  d.finish();

  Section s(root, "teacher");
  s.read("seed", c.teacher.seed);
  s.read("angle_threshold", c.teacher.angle_threshold);
  s.read("depth_step_ratio", c.teacher.depth_step_ratio);
  s.finish();

  Section f(root, "fusion");
  f.read("num_views", c.fusion.num_views);
  f.read("max_candidate_views", c.fusion.max_candidate_views);
  f.read("seed", c.fusion.seed);
  f.finish();

  c.decoder.feature_dim = c.encoder.out_dim;
  c.teacher.feature_dim = c.encoder.out_dim;
  try {
    c.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& ex) {
    throw ConfigError(ex.what());
  }
  c.fusion.views = c.train.view_policy();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  const std::string text{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return parse_run_config(text);
}

std::string run_config_json(const RunConfig& c) {
  nlohmann::ordered_json j;
  j["version"] = RunConfig::kVersion;
  auto& t = j["train"];
  t["image_size"] = c.train.image_size;
  t["views_per_epoch"] = c.train.views_per_epoch;
  t["encoder_epochs"] = c.train.encoder_epochs;
  t["decoder_epochs"] = c.train.decoder_epochs;
  t["validation_views"] = c.train.validation_views;
  t["encoder_learning_rate"] = c.train.encoder_learning_rate;
  t["decoder_learning_rate"] = c.train.decoder_learning_rate;
  t["seed"] = c.train.seed;
  t["train_vertex_fraction"] = c.train.train_vertex_fraction;
  t["second_click_change_threshold"] = c.train.second_click_change_threshold;
  t["max_resample_attempts"] = c.train.max_resample_attempts;
  t["views_per_vertex"] = c.train.views_per_vertex;
  t["joint_encoder_weight"] = c.train.joint_encoder_weight;
  t["elevation_limit"] = c.train.elevation_limit;
  t["camera_radius"] = c.train.camera_radius;
  t["fov_y"] = c.train.fov_y;
  j["encoder"] = {{"pe_frequencies", c.encoder.pe_frequencies},
                  {"hidden_dim", c.encoder.hidden_dim},
                  {"layers", c.encoder.layers},
                  {"out_dim", c.encoder.out_dim}};
  j["decoder"] = {{"hidden_dim", c.decoder.hidden_dim}, {"mlp_layers", c.decoder.mlp_layers}};
  j["teacher"] = {{"seed", c.teacher.seed},
                  {"angle_threshold", c.teacher.angle_threshold},
                  {"depth_step_ratio", c.teacher.depth_step_ratio}};
  j["fusion"] = {{"num_views", c.fusion.num_views},
                 {"max_candidate_views", c.fusion.max_candidate_views},
                 {"seed", c.fusion.seed}};
  return j.dump(2);
}

}  // namespace meshclick
