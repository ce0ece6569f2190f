#include "meshclick/service.hpp"

#include <chrono>
#include <cmath>
#include <mutex>
#include <stdexcept>

#include <httplib.h>
#include <json.hpp>

#include "meshclick/evaluation.hpp"

namespace meshclick {

namespace {

using nlohmann::json;

constexpr int kApiVersion = 1;

HttpReply error_reply(int status, const std::string& message) {
  return {status, json{{"version", kApiVersion}, {"error", message}}.dump()};
}

std::string hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// Parses and validates a segment request body into a click set.
ClickSet parse_request(std::string_view body, std::size_t vertex_count) {
  json req;
  try {
    req = json::parse(body);
  } catch (const json::parse_error&) {
    throw std::invalid_argument("request body is not valid JSON");
  }
  if (!req.is_object()) throw std::invalid_argument("request must be a JSON object");
  for (const auto& [key, value] : req.items()) {
    if (key != "clicks" && key != "version") throw std::invalid_argument("unknown request field '" + key + "'");
  }
  if (req.contains("version") && req.at("version") != kApiVersion) {
    throw std::invalid_argument("unsupported request version");
  }
  if (!req.contains("clicks") || !req.at("clicks").is_array()) {
    throw std::invalid_argument("request needs a 'clicks' array");
  }
  std::vector<Click> clicks;
  for (const auto& c : req.at("clicks")) {
    if (!c.is_object()) throw std::invalid_argument("each click must be an object");
    for (const auto& [key, value] : c.items()) {
      if (key != "vertex" && key != "sign") throw std::invalid_argument("unknown click field '" + key + "'");
    }
    if (!c.contains("vertex") || !c.at("vertex").is_number_integer()) {
      throw std::invalid_argument("click needs an integer 'vertex'");
    }
    const auto v = c.at("vertex").get<std::int64_t>();
    if (v < 0 || v >= static_cast<std::int64_t>(vertex_count)) {
      throw std::invalid_argument("click vertex " + std::to_string(v) + " out of range");
    }
    if (!c.contains("sign") || !c.at("sign").is_string()) throw std::invalid_argument("click needs a 'sign'");
    const auto& s = c.at("sign").get_ref<const std::string&>();
    if (s != "positive" && s != "negative") throw std::invalid_argument("sign must be 'positive' or 'negative'");
    clicks.push_back({static_cast<std::int32_t>(v), s == "positive" ? ClickSign::positive : ClickSign::negative});
  }
  return ClickSet::create(std::move(clicks), vertex_count);
}

}  // namespace

SegmentationService::SegmentationService(Mesh mesh) : mesh_(std::move(mesh)) {
  json j;
  j["version"] = kApiVersion;
  json verts = json::array();
  for (const auto& v : mesh_.vertices) verts.push_back({v.x(), v.y(), v.z()});
  json faces = json::array();
  for (const auto& f : mesh_.faces) faces.push_back({f[0], f[1], f[2]});
  j["vertices"] = std::move(verts);
  j["faces"] = std::move(faces);
  mesh_json_ = j.dump();
}

void SegmentationService::load_model(Model model) {
  if (!model.has_decoder()) throw std::invalid_argument("model has no trained decoder (stage '" + model.stage + "')");
  if (model.mesh_hash != mesh_hash(mesh_)) throw std::invalid_argument("model was trained on a different mesh");
  if (model.features.rows() != static_cast<Eigen::Index>(mesh_.vertex_count())) model.refresh_features(mesh_);
  std::string id = model.id();
  std::unique_lock lock(mutex_);
  model_ = std::move(model);
  model_id_ = std::move(id);
}

void SegmentationService::unload_model() {
  std::unique_lock lock(mutex_);
  model_.reset();
}

bool SegmentationService::has_model() const {
  std::shared_lock lock(mutex_);
  return model_.has_value();
}

std::optional<std::uint64_t> SegmentationService::model_hash() const {
  std::shared_lock lock(mutex_);
  if (!model_) return std::nullopt;
  return model_->params.hash();
}

HttpReply SegmentationService::get_mesh() const { return {200, mesh_json_}; }

HttpReply SegmentationService::get_health() const {
  return {200, json{{"version", kApiVersion}, {"status", "ok"}, {"model_loaded", has_model()}}.dump()};
}

HttpReply SegmentationService::get_model() const {
  std::shared_lock lock(mutex_);
  if (!model_) return error_reply(409, "no model loaded");
  json j;
  j["version"] = kApiVersion;
  j["model_id"] = model_id_;
  j["stage"] = model_->stage;
  j["seed"] = model_->seed;
  j["mesh_hash"] = hex(model_->mesh_hash);
  j["feature_dim"] = model_->encoder.out_dim;
  j["vertex_count"] = mesh_.vertex_count();
  return {200, j.dump()};
}

HttpReply SegmentationService::post_segment(std::string_view body) const {
  const auto start = std::chrono::steady_clock::now();
  ClickSet clicks;
  try {
    clicks = parse_request(body, mesh_.vertex_count());
  } catch (const std::invalid_argument& e) {
    return error_reply(400, e.what());
  }
  std::shared_lock lock(mutex_);
  if (!model_) return error_reply(409, "no model loaded");
  ProbabilityField p;
  double threshold = 0.5;
  try {
    p = model_->segment(clicks);
    threshold = otsu_threshold(p).threshold;
  } catch (const std::exception& e) {
    return error_reply(500, std::string("segmentation failed: ") + e.what());
  }
  for (double x : p) {
    if (!std::isfinite(x)) return error_reply(500, "segmentation produced a non-finite probability");
  }
  json j;
  j["version"] = kApiVersion;
  j["probabilities"] = std::move(p);
  j["threshold_otsu"] = threshold;
  j["model_id"] = model_id_;
  j["elapsed_ms"] = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  return {200, j.dump()};
}

struct HttpServer::Impl {
  httplib::Server server;
};

HttpServer::HttpServer(SegmentationService& service) : impl_(std::make_unique<Impl>()) {
  auto send = [](httplib::Response& res, const HttpReply& reply) {
    res.status = reply.status;
    res.set_content(reply.body, "application/json");
  };
  auto& s = impl_->server;
  s.Get("/mesh", [&service, send](const httplib::Request&, httplib::Response& res) { send(res, service.get_mesh()); });
  s.Get("/health",
        [&service, send](const httplib::Request&, httplib::Response& res) { send(res, service.get_health()); });
  s.Get("/model", [&service, send](const httplib::Request&, httplib::Response& res) { send(res, service.get_model()); });
  s.Post("/segment", [&service, send](const httplib::Request& req, httplib::Response& res) {
    send(res, service.post_segment(req.body));
  });
}

HttpServer::~HttpServer() = default;

int HttpServer::bind(const std::string& host, int port) {
  int bound = port;
  if (port == 0) {
    bound = impl_->server.bind_to_any_port(host);
  } else if (!impl_->server.bind_to_port(host, port)) {
    bound = -1;
  }
  if (bound < 0) throw std::runtime_error("cannot bind " + host + ":" + std::to_string(port));
  return bound;
}

void HttpServer::listen() { impl_->server.listen_after_bind(); }

void HttpServer::stop() { impl_->server.stop(); }

}  // namespace meshclick
