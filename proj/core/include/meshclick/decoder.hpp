#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "meshclick/encoder.hpp"
#include "meshclick/geometry.hpp"
#include "meshclick/numerics.hpp"

namespace meshclick {

// Interactive attention (five feature_dim x feature_dim projections, no
// bias) followed by the probability MLP on concat(f_i, g_i). The MLP has
// `mlp_layers` linear layers: 2*feature_dim -> hidden, hidden -> hidden
// repeated, and hidden -> 2 last; ReLU + layer norm after all but the last,
// row softmax on the output.
struct DecoderConfig {
  int feature_dim = 256;
  int hidden_dim = 256;
  int mlp_layers = 16;

  static constexpr int kOutputChannels = 2;
  int layer_in(int layer) const { return layer == 0 ? 2 * feature_dim : hidden_dim; }
  int layer_out(int layer) const { return layer + 1 == mlp_layers ? kOutputChannels : hidden_dim; }
  void validate() const;
  bool operator==(const DecoderConfig&) const = default;
};

inline constexpr const char* kDecoderPrefix = "decoder.";

namespace attention_param {
inline const std::string query = "decoder.attn.query";
inline const std::string key_positive = "decoder.attn.key_pos";
inline const std::string key_negative = "decoder.attn.key_neg";
inline const std::string value_positive = "decoder.attn.value_pos";
inline const std::string value_negative = "decoder.attn.value_neg";
}  // namespace attention_param

std::string decoder_param_name(int layer, const char* field);

template <class T>
void init_decoder_params(ParamStore<T>& store, const DecoderConfig& config, std::uint64_t seed);

template <class T>
struct InteractiveAttentionTrace {
  LinearTrace<T> query;
  LinearTrace<T> key_pos;
  LinearTrace<T> key_neg;
  LinearTrace<T> value_pos;
  LinearTrace<T> value_neg;
  AttentionTrace<T> attention;
  Eigen::Index positive_count = 0;
  Eigen::Index negative_count = 0;
};

template <class T>
struct InteractiveAttentionGrads {
  Matrix<T> query_features;
  Matrix<T> positive_features;
  Matrix<T> negative_features;
};

// G = softmax(Q K^T / sqrt(d)) V with Q = F_query W_Q, K = [F_pos W_Kpos;
// F_neg W_Kneg], V = [F_pos W_Vpos; F_neg W_Vneg]. F_neg may have zero rows;
// F_pos may not.
template <class T>
std::pair<Matrix<T>, InteractiveAttentionTrace<T>> interactive_attention_forward(
    const Matrix<T>& query_features, const Matrix<T>& positive_features, const Matrix<T>& negative_features,
    const ParamStore<T>& store);

template <class T>
InteractiveAttentionGrads<T> interactive_attention_backward(const InteractiveAttentionTrace<T>& trace,
                                                            const Matrix<T>& grad_out, ParamStore<T>& store);

// Convenience form over a full feature matrix and a validated click set.
template <class T>
Matrix<T> interactive_attention(const Matrix<T>& features, const ClickSet& clicks, const ParamStore<T>& store);

template <class T>
struct DecodeTrace {
  std::vector<LinearTrace<T>> linear;
  std::vector<ReluTrace<T>> relu;
  std::vector<LayerNormTrace<T>> norm;
  Matrix<T> probabilities;  // rows x 2
  Eigen::Index feature_dim = 0;
};

template <class T>
struct DecodeGrads {
  Matrix<T> features;     // d loss / d f_i
  Matrix<T> conditioned;  // d loss / d g_i
};

// Per-row MLP on concat(F, G); returns rows x 2 softmax probabilities,
// channel 0 = segment.
template <class T>
std::pair<Matrix<T>, DecodeTrace<T>> decode_forward(const Matrix<T>& features, const Matrix<T>& conditioned,
                                                    const ParamStore<T>& store, const DecoderConfig& config);
template <class T>
DecodeGrads<T> decode_backward(const DecodeTrace<T>& trace, const Matrix<T>& grad_probabilities,
                               ParamStore<T>& store, const DecoderConfig& config);

using ProbabilityField = std::vector<double>;

template <class T>
struct SegmentTrace {
  std::vector<std::int32_t> rows;
  std::vector<std::int32_t> positive_rows;
  std::vector<std::int32_t> negative_rows;
  InteractiveAttentionTrace<T> attention;
  DecodeTrace<T> decode;
  Eigen::Index vertex_count = 0;
};

// Attention + decode restricted to `rows` (all vertices when empty). Returns
// rows x 2 probabilities.
template <class T>
std::pair<Matrix<T>, SegmentTrace<T>> segment_forward(const Matrix<T>& features, const ClickSet& clicks,
                                                      const std::vector<std::int32_t>& rows,
                                                      const ParamStore<T>& store, const DecoderConfig& config);

// Backward through decode and attention; accumulates decoder gradients and
// returns d loss / d F (n x d) covering query, concat and click paths.
template <class T>
Matrix<T> segment_backward(const SegmentTrace<T>& trace, const Matrix<T>& grad_probabilities,
                           ParamStore<T>& store, const DecoderConfig& config);

// Per-vertex segment probability (channel 0) for every vertex. Read-only on
// the parameters.
template <class T>
ProbabilityField segment(const Matrix<T>& features, const ClickSet& clicks, const ParamStore<T>& store,
                         const DecoderConfig& config);

// A trained encoder/decoder pair bound to a mesh, with its feature field cached.
struct Model {
  EncoderConfig encoder;
  DecoderConfig decoder;
  ParamStore<float> params;
  Matrix<float> features;  // cached F
  std::string stage;       // "init", "encoder", "two-stage", "joint"
  std::uint64_t seed = 0;
  std::uint64_t mesh_hash = 0;

  bool has_decoder() const { return stage == "two-stage" || stage == "joint"; }
  void refresh_features(const Mesh& mesh);
  ProbabilityField segment(const ClickSet& clicks) const;
  std::string id() const;  // hex digest of the parameters
};

Model make_untrained_model(const Mesh& mesh, const EncoderConfig& encoder, const DecoderConfig& decoder,
                           std::uint64_t seed);

}  // namespace meshclick
