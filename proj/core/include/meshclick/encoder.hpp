#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "meshclick/geometry.hpp"
#include "meshclick/numerics.hpp"
#include "meshclick/rasterizer.hpp"

namespace meshclick {

// Shape of the per-vertex feature network: positional encoding, then
// `layers` linear layers of width hidden_dim (ReLU + layer norm after every
// one but the last), tanh on the last.
struct EncoderConfig {
  int pe_frequencies = 85;
  int hidden_dim = 256;
  int layers = 6;
  int out_dim = 256;

  int pe_dim() const { return 3 + 6 * pe_frequencies; }
  void validate() const;
  bool operator==(const EncoderConfig&) const = default;
};

inline constexpr const char* kEncoderPrefix = "encoder.";

// (x, y, z) followed, for k = 0..L-1, by sin(2^k pi c) for c in x,y,z and
// then cos(2^k pi c) for c in x,y,z.
Eigen::RowVectorXd positional_encode(const Vec3& v, int frequencies);
Matrix<double> positional_encode_mesh(const Mesh& mesh, int frequencies);

std::string encoder_param_name(int layer, const char* field);

// Kaiming-uniform weights, zero biases, unit norm gains; last layer at 0.1x.
template <class T>
void init_encoder_params(ParamStore<T>& store, const EncoderConfig& config, std::uint64_t seed);

template <class T>
struct EncoderTrace {
  std::vector<LinearTrace<T>> linear;
  std::vector<ReluTrace<T>> relu;
  std::vector<LayerNormTrace<T>> norm;
  TanhTrace<T> output;
};

// Rows are independent: row i of the result depends only on row i of
// `encoded_positions`.
template <class T>
std::pair<Matrix<T>, EncoderTrace<T>> encoder_forward(const Matrix<T>& encoded_positions,
                                                      const ParamStore<T>& store, const EncoderConfig& config);

// Accumulates parameter gradients into `store`.
template <class T>
void encoder_backward(const EncoderTrace<T>& trace, const Matrix<T>& grad_features, ParamStore<T>& store,
                      const EncoderConfig& config);

// Per-vertex features F (n x out_dim); every entry in (-1, 1).
template <class T>
struct MeshFeatureField {
  Matrix<T> features;
};

template <class T>
MeshFeatureField<T> compute_feature_field(const Mesh& mesh, const ParamStore<T>& store,
                                          const EncoderConfig& config);

template <class T>
struct EncoderLossResult {
  double loss = 0.0;
  Matrix<T> grad_features;  // n x d
  std::size_t covered_pixels = 0;
};

// Mean over covered pixels of the squared feature error between the rendered
// field and the teacher feature image; gradient routed through shade_backward.
template <class T>
EncoderLossResult<T> encoder_loss(const Matrix<T>& features, const Mesh& mesh, const RasterOutput& raster,
                                  const AttributeImage<T>& teacher_features);
template <class T>
EncoderLossResult<T> encoder_loss(const Matrix<T>& features, const Mesh& mesh, const Camera& cam,
                                  const AttributeImage<T>& teacher_features);

}  // namespace meshclick
