#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>

#include "meshclick/decoder.hpp"
#include "meshclick/encoder.hpp"
#include "meshclick/evaluation.hpp"
#include "meshclick/teacher.hpp"
#include "meshclick/training.hpp"

namespace meshclick {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Everything a run reads from its config file. The teacher and decoder
// feature widths follow encoder.out_dim.
struct RunConfig {
  static constexpr int kVersion = 1;
  TrainConfig train;
  EncoderConfig encoder;
  DecoderConfig decoder;
  SyntheticTeacherConfig teacher;
  FusionConfig fusion;  // fusion.views follows the training view policy

  void validate() const;
};

// JSON object with optional sections "train", "encoder", "decoder",
// "teacher", "fusion" and an optional "version" (must be 1). Missing keys
// keep their defaults; unknown keys and wrong types are ConfigErrors.
RunConfig parse_run_config(std::string_view json_text);
RunConfig load_run_config(const std::filesystem::path& path);
std::string run_config_json(const RunConfig& config);

}  // namespace meshclick
