#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <shared_mutex>
#include <string>
#include <string_view>

#include "meshclick/decoder.hpp"
#include "meshclick/geometry.hpp"

namespace meshclick {

struct HttpReply {
  int status = 200;
  std::string body;  // JSON
};

// Request handling for the segmentation endpoints, independent of any socket.
// Handlers may run concurrently; load_model/unload_model wait for in-flight
// requests to finish.
class SegmentationService {
 public:
  explicit SegmentationService(Mesh mesh);

  // Rejects a model without a decoder or bound to a different mesh.
  void load_model(Model model);
  void unload_model();
  bool has_model() const;
  // Parameter hash of the loaded model; nullopt without one.
  std::optional<std::uint64_t> model_hash() const;
  const Mesh& mesh() const { return mesh_; }

  HttpReply get_mesh() const;
  HttpReply get_health() const;
  HttpReply get_model() const;
  // {"clicks": [{"vertex": 12, "sign": "positive"}], "version": 1 (optional)}
  HttpReply post_segment(std::string_view body) const;

 private:
  Mesh mesh_;
  std::string mesh_json_;
  mutable std::shared_mutex mutex_;
  std::optional<Model> model_;
  std::string model_id_;  // parameter digest, computed once per load
};

// Blocking HTTP front end over a service.
class HttpServer {
 public:
  explicit HttpServer(SegmentationService& service);
  ~HttpServer();
  HttpServer(const HttpServer&) = delete;
  HttpServer& operator=(const HttpServer&) = delete;

  // Binds (port 0 picks a free port) and returns the bound port; throws on failure.
  int bind(const std::string& host, int port);
  // Serves until stop() is called from another thread.
  void listen();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace meshclick
