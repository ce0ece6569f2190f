#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>

#include "meshclick/decoder.hpp"
#include "meshclick/geometry.hpp"

namespace meshclick {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Little-endian layout:
//   "ISEG" u32 version
//   u32 len + stage tag
//   u32 d, u32 pe_frequencies
//   u32 encoder hidden, u32 encoder layers
//   u32 decoder hidden, u32 decoder mlp_layers
//   u64 seed, u64 mesh hash
//   u32 count, then per parameter (name order): u32 len + name, u32 rows, u32 cols, rows*cols f32
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::string serialize_checkpoint(const Model& model);
// Validates the version, the stage tag, every parameter name and shape
// against the stored layer spec, and (with a mesh) the mesh hash. Features
// are refreshed when a mesh is given.
Model deserialize_checkpoint(std::string_view bytes, const Mesh* mesh = nullptr);

void save_checkpoint(const std::filesystem::path& path, const Model& model);
Model load_checkpoint(const std::filesystem::path& path, const Mesh& mesh);

}  // namespace meshclick
