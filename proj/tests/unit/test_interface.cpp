#include <doctest.h>

#include <atomic>
#include <filesystem>
#include <thread>

#include "meshclick/checkpoint.hpp"
#include "meshclick/config.hpp"
#include "meshclick/service.hpp"

// after Eigen: resolv.h defines a _res macro that collides with Eigen internals
#include <httplib.h>
#include <json.hpp>

using namespace meshclick;
using nlohmann::json;

namespace {

Model small_model(const Mesh& mesh, std::uint64_t seed, const char* stage = "two-stage") {
  EncoderConfig e;
  e.pe_frequencies = 2;
  e.hidden_dim = 8;
  e.layers = 2;
  e.out_dim = 6;
  DecoderConfig d;
  d.feature_dim = 6;
  d.hidden_dim = 7;
  d.mlp_layers = 3;
  Model m = make_untrained_model(mesh, e, d, seed);
  m.stage = stage;
  return m;
}

}  // namespace

TEST_CASE("checkpoint save, load, save is byte-identical") {
  const Mesh mesh = make_icosphere(1);
  const Model m = small_model(mesh, 4);
  const std::string a = serialize_checkpoint(m);
  CHECK(a.substr(0, 4) == "ISEG");
  const Model back = deserialize_checkpoint(a, &mesh);
  CHECK(serialize_checkpoint(back) == a);
  CHECK(back.id() == m.id());
  CHECK(back.stage == "two-stage");
  CHECK(back.seed == 4);
  CHECK(back.encoder == m.encoder);
  CHECK(back.decoder == m.decoder);
  CHECK(back.features == m.features);

  const auto path = std::filesystem::temp_directory_path() / "meshclick_ckpt_test.bin";
  save_checkpoint(path, m);
  CHECK(serialize_checkpoint(load_checkpoint(path, mesh)) == a);
  std::filesystem::remove(path);
}

TEST_CASE("checkpoint loading validates its contents") {
  const Mesh mesh = make_icosphere(1);
  const std::string good = serialize_checkpoint(small_model(mesh, 4));

  CHECK(deserialize_checkpoint(good).features.size() == 0);
  const Mesh other = make_icosphere(2);
  CHECK_THROWS_WITH_AS(deserialize_checkpoint(good, &other), doctest::Contains("different mesh"), CheckpointError);

  std::string bad = good;
  bad[0] = 'X';
  CHECK_THROWS_WITH_AS(deserialize_checkpoint(bad), doctest::Contains("magic"), CheckpointError);
  bad = good;
  bad[4] = 2;
  CHECK_THROWS_WITH_AS(deserialize_checkpoint(bad), doctest::Contains("version 2"), CheckpointError);
  CHECK_THROWS_WITH_AS(deserialize_checkpoint(good.substr(0, good.size() - 3)), doctest::Contains("truncated"),
                       CheckpointError);
  CHECK_THROWS_WITH_AS(deserialize_checkpoint(good + "x"), doctest::Contains("trailing"), CheckpointError);

  // encoder width field (after magic, version, stage "two-stage", d, pe) bumped: shapes no longer match
  bad = good;
  const std::size_t width_at = 4 + 4 + 4 + 9 + 4 + 4;
  bad[width_at] = 9;
  CHECK_THROWS_WITH_AS(deserialize_checkpoint(bad), doctest::Contains("layer spec needs"), CheckpointError);

  bad = good;
  bad[12] = 'X';  // stage tag
  CHECK_THROWS_WITH_AS(deserialize_checkpoint(bad), doctest::Contains("stage"), CheckpointError);
}

TEST_CASE("config parses known keys and rejects unknown ones") {
  const auto c = parse_run_config(R"({"version": 1, "train": {"image_size": 32, "seed": 9,
      "decoder_learning_rate": 0.0002}, "encoder": {"out_dim": 16}, "teacher": {"seed": 3}})");
  CHECK(c.train.image_size == 32);
  CHECK(c.train.seed == 9);
  CHECK(c.train.decoder_learning_rate == 0.0002);
  CHECK(c.decoder.feature_dim == 16);
  CHECK(c.teacher.feature_dim == 16);
  CHECK(c.fusion.views.width == 32);
  CHECK(c.train.views_per_vertex == 8);

  const auto round = parse_run_config(run_config_json(c));
  CHECK(run_config_json(round) == run_config_json(c));

  CHECK_THROWS_AS(parse_run_config(R"({"train": {"image_sise": 32}})"), ConfigError);
  CHECK_THROWS_AS(parse_run_config(R"({"trian": {}})"), ConfigError);
  CHECK_THROWS_AS(parse_run_config(R"({"version": 2})"), ConfigError);
  CHECK_THROWS_AS(parse_run_config(R"({"train": {"image_size": "big"}})"), ConfigError);
  CHECK_THROWS_AS(parse_run_config(R"({"train": {"image_size": 32.5}})"), ConfigError);
  CHECK_THROWS_AS(parse_run_config(R"({"train": {"train_vertex_fraction": 0}})"), ConfigError);
  CHECK_THROWS_AS(parse_run_config(R"({"train": {"seed": -1}})"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("{not json"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("[]"), ConfigError);
}

TEST_CASE("service endpoints without a socket") {
  const Mesh mesh = make_icosphere(1);
  SegmentationService svc(mesh);
  CHECK(json::parse(svc.get_health().body)["model_loaded"] == false);
  CHECK(svc.get_model().status == 409);
  CHECK(svc.post_segment(R"({"clicks":[{"vertex":3,"sign":"positive"}]})").status == 409);

  const auto mj = json::parse(svc.get_mesh().body);
  CHECK(mj["vertices"].size() == mesh.vertex_count());
  CHECK(mj["faces"].size() == mesh.face_count());

  CHECK_THROWS_AS(svc.load_model(small_model(mesh, 1, "encoder")), std::invalid_argument);
  CHECK_THROWS_AS(svc.load_model(small_model(make_icosphere(2), 1)), std::invalid_argument);
  const Model m = small_model(mesh, 1);
  svc.load_model(m);
  CHECK(svc.has_model());

  const std::string req = R"({"clicks":[{"vertex":3,"sign":"positive"},{"vertex":20,"sign":"negative"}]})";
  const auto r1 = svc.post_segment(req);
  REQUIRE(r1.status == 200);
  const auto j1 = json::parse(r1.body);
  const auto probs = j1["probabilities"].get<std::vector<double>>();
  CHECK(probs.size() == mesh.vertex_count());
  for (double p : probs) CHECK((p >= 0.0 && p <= 1.0));
  CHECK(j1["model_id"] == m.id());
  CHECK(j1["threshold_otsu"].get<double>() > 0.0);
  CHECK(j1.contains("elapsed_ms"));
  const auto j2 = json::parse(svc.post_segment(req).body);
  CHECK(j2["probabilities"] == j1["probabilities"]);
  CHECK(j2["threshold_otsu"] == j1["threshold_otsu"]);

  CHECK(svc.post_segment(R"({"clicks":[{"vertex":3,"sign":"negative"}]})").status == 400);
  CHECK(svc.post_segment(R"({"clicks":[{"vertex":999,"sign":"positive"}]})").status == 400);
  CHECK(svc.post_segment(R"({"clicks":[{"vertex":3,"sign":"up"}]})").status == 400);
  CHECK(svc.post_segment(R"({"clicks":[{"vertex":3,"sign":"positive","x":1}]})").status == 400);
  CHECK(svc.post_segment(R"({"clicks":[],"extra":1})").status == 400);
  CHECK(svc.post_segment(R"({"clicks":[{"vertex":3,"sign":"positive"},{"vertex":3,"sign":"positive"}]})").status ==
        400);
  CHECK(svc.post_segment("nope").status == 400);

  const auto mm = json::parse(svc.get_model().body);
  CHECK(mm["stage"] == "two-stage");
  CHECK(mm["vertex_count"] == mesh.vertex_count());
  svc.unload_model();
  CHECK(svc.post_segment(req).status == 409);
}

TEST_CASE("service keeps parameters fixed under concurrent requests") {
  const Mesh mesh = make_icosphere(1);
  SegmentationService svc(mesh);
  svc.load_model(small_model(mesh, 2));
  const auto before = svc.model_hash();
  std::atomic<int> ok{0};
  std::vector<std::thread> workers;
  for (int t = 0; t < 4; ++t) {
    workers.emplace_back([&, t] {
      for (int i = 0; i < 25; ++i) {
        const int v = (t * 25 + i) % 42;
        const auto r = svc.post_segment(R"({"clicks":[{"vertex":)" + std::to_string(v) + R"(,"sign":"positive"}]})");
        ok += r.status == 200;
      }
    });
  }
  for (auto& w : workers) w.join();
  CHECK(ok == 100);
  CHECK(svc.model_hash() == before);
}

TEST_CASE("http server routes to the service") {
  const Mesh mesh = make_icosphere(1);
  SegmentationService svc(mesh);
  svc.load_model(small_model(mesh, 3));
  HttpServer server(svc);
  const int port = server.bind("127.0.0.1", 0);
  std::thread th([&] { server.listen(); });
  httplib::Client client("127.0.0.1", port);
  for (int i = 0; i < 50 && !client.Get("/health"); ++i) std::this_thread::sleep_for(std::chrono::milliseconds(20));
  auto h = client.Get("/health");
  REQUIRE(h);
  CHECK(h->status == 200);
  auto s = client.Post("/segment", R"({"clicks":[{"vertex":0,"sign":"positive"}]})", "application/json");
  REQUIRE(s);
  CHECK(s->status == 200);
  CHECK(json::parse(s->body)["probabilities"].size() == mesh.vertex_count());
  auto bad = client.Post("/segment", R"({"clicks":[]})", "application/json");
  REQUIRE(bad);
  CHECK(bad->status == 400);
  auto mesh_reply = client.Get("/mesh");
  REQUIRE(mesh_reply);
  CHECK(json::parse(mesh_reply->body)["vertices"].size() == mesh.vertex_count());
  server.stop();
  th.join();
}
