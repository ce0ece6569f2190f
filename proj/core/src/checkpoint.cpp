#include "meshclick/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace meshclick {

namespace {

constexpr char kMagic[4] = {'I', 'S', 'E', 'G'};

class Writer {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    out_.append(s);
  }
  void raw(const char* p, std::size_t n) { out_.append(p, n); }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(std::string_view in) : in_(in) {}
  const char* take(std::size_t n) {
    if (in_.size() - pos_ < n) throw CheckpointError("checkpoint truncated at byte " + std::to_string(pos_));
    const char* p = in_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::uint64_t uint(int bytes) {
    const auto* p = reinterpret_cast<const unsigned char*>(take(static_cast<std::size_t>(bytes)));
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
  }
  std::uint32_t u32() { return static_cast<std::uint32_t>(uint(4)); }
  std::uint64_t u64() { return uint(8); }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string str(std::size_t limit) {
    const auto n = u32();
    if (n > limit) throw CheckpointError("checkpoint string too long");
    return std::string(take(n), n);
  }
  bool done() const { return pos_ == in_.size(); }

 private:
  std::string_view in_;
  std::size_t pos_ = 0;
};

bool known_stage(const std::string& s) {
  return s == "init" || s == "encoder" || s == "two-stage" || s == "joint";
}

int positive_int(std::uint32_t v, const char* what) {
  if (v == 0 || v > (1u << 20)) throw CheckpointError(std::string("checkpoint: bad ") + what);
  return static_cast<int>(v);
}

}  // namespace

std::string serialize_checkpoint(const Model& model) {
  Writer w;
  w.raw(kMagic, 4);
  w.u32(kCheckpointVersion);
  w.str(model.stage);
  w.u32(static_cast<std::uint32_t>(model.encoder.out_dim));
  w.u32(static_cast<std::uint32_t>(model.encoder.pe_frequencies));
  w.u32(static_cast<std::uint32_t>(model.encoder.hidden_dim));
  w.u32(static_cast<std::uint32_t>(model.encoder.layers));
  w.u32(static_cast<std::uint32_t>(model.decoder.hidden_dim));
  w.u32(static_cast<std::uint32_t>(model.decoder.mlp_layers));
  w.u64(model.seed);
  w.u64(model.mesh_hash);
  w.u32(static_cast<std::uint32_t>(model.params.size()));
  for (const auto& [name, p] : model.params) {
    w.str(name);
    w.u32(static_cast<std::uint32_t>(p.value.rows()));
    w.u32(static_cast<std::uint32_t>(p.value.cols()));
    for (Eigen::Index i = 0; i < p.value.size(); ++i) w.f32(p.value.data()[i]);
  }
  return w.take();
}

Model deserialize_checkpoint(std::string_view bytes, const Mesh* mesh) {
  Reader r(bytes);
  if (std::memcmp(r.take(4), kMagic, 4) != 0) throw CheckpointError("not a checkpoint (bad magic)");
  const auto version = r.u32();
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  }
  Model model;
  model.stage = r.str(64);
  if (!known_stage(model.stage)) throw CheckpointError("unknown checkpoint stage '" + model.stage + "'");
  const int d = positive_int(r.u32(), "feature dimension");
  model.encoder.out_dim = d;
  model.decoder.feature_dim = d;
  model.encoder.pe_frequencies = positive_int(r.u32(), "pe frequencies");
  model.encoder.hidden_dim = positive_int(r.u32(), "encoder width");
  model.encoder.layers = positive_int(r.u32(), "encoder depth");
  model.decoder.hidden_dim = positive_int(r.u32(), "decoder width");
  model.decoder.mlp_layers = positive_int(r.u32(), "decoder depth");
  try {
    model.encoder.validate();
    model.decoder.validate();
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(std::string("checkpoint layer spec: ") + e.what());
  }
  model.seed = r.u64();
  model.mesh_hash = r.u64();

  // Expected names and shapes come from the layer spec.
  ParamStore<float> expected;
  init_encoder_params(expected, model.encoder, 0);
  init_decoder_params(expected, model.decoder, 0);
  const auto count = r.u32();
  if (count != expected.size()) {
    throw CheckpointError("checkpoint has " + std::to_string(count) + " parameters, layer spec needs " +
                          std::to_string(expected.size()));
  }
  for (std::uint32_t k = 0; k < count; ++k) {
    const std::string name = r.str(256);
    if (!expected.contains(name)) throw CheckpointError("unexpected checkpoint parameter '" + name + "'");
    if (model.params.contains(name)) throw CheckpointError("duplicate checkpoint parameter '" + name + "'");
    const auto rows = r.u32();
    const auto cols = r.u32();
    const auto& want = expected.value(name);
    if (rows != want.rows() || cols != want.cols()) {
      throw CheckpointError("parameter '" + name + "' is " + std::to_string(rows) + "x" + std::to_string(cols) +
                            ", layer spec needs " + std::to_string(want.rows()) + "x" + std::to_string(want.cols()));
    }
    Matrix<float> value(rows, cols);
    for (Eigen::Index i = 0; i < value.size(); ++i) value.data()[i] = r.f32();
    model.params.add(name, std::move(value));
  }
  if (!r.done()) throw CheckpointError("trailing bytes after checkpoint parameters");
  if (mesh != nullptr) {
    if (mesh_hash(*mesh) != model.mesh_hash) throw CheckpointError("checkpoint was trained on a different mesh");
    model.refresh_features(*mesh);
  }
  return model;
}

void save_checkpoint(const std::filesystem::path& path, const Model& model) {
  const std::string bytes = serialize_checkpoint(model);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("write failed for " + path.string());
}

Model load_checkpoint(const std::filesystem::path& path, const Mesh& mesh) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path.string());
  const std::string bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return deserialize_checkpoint(bytes, &mesh);
}

}  // namespace meshclick
