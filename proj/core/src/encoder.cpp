#include "meshclick/encoder.hpp"

#include <cmath>
#include <numbers>

namespace meshclick {

void EncoderConfig::validate() const {
  if (pe_frequencies < 0) throw std::invalid_argument("pe_frequencies must be >= 0");
  if (hidden_dim < 1 || out_dim < 1) throw std::invalid_argument("encoder widths must be positive");
  if (layers < 1) throw std::invalid_argument("encoder needs at least one layer");
}

Eigen::RowVectorXd positional_encode(const Vec3& v, int frequencies) {
  if (frequencies < 0) throw std::invalid_argument("positional_encode: frequencies must be >= 0");
  Eigen::RowVectorXd out(3 + 6 * frequencies);
  out.head<3>() = v.transpose();
  for (int k = 0; k < frequencies; ++k) {
    const double omega = std::ldexp(std::numbers::pi, k);
    for (int c = 0; c < 3; ++c) {
      out(3 + 6 * k + c) = std::sin(omega * v[c]);
      out(3 + 6 * k + 3 + c) = std::cos(omega * v[c]);
    }
  }
  return out;
}

Matrix<double> positional_encode_mesh(const Mesh& mesh, int frequencies) {
  Matrix<double> out(static_cast<Eigen::Index>(mesh.vertex_count()), 3 + 6 * frequencies);
  for (std::size_t i = 0; i < mesh.vertex_count(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) = positional_encode(mesh.vertices[i], frequencies);
  }
  return out;
}

std::string encoder_param_name(int layer, const char* field) {
  return std::string(kEncoderPrefix) + std::to_string(layer) + "." + field;
}

template <class T>
void init_encoder_params(ParamStore<T>& store, const EncoderConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  for (int l = 0; l < config.layers; ++l) {
    const int in = l == 0 ? config.pe_dim() : config.hidden_dim;
    const bool last = l + 1 == config.layers;
    const int out = last ? config.out_dim : config.hidden_dim;
    store.add(encoder_param_name(l, "weight"), kaiming_uniform<T>(in, out, rng, last ? 0.1 : 1.0));
    store.add(encoder_param_name(l, "bias"), Matrix<T>::Zero(1, out));
    if (!last) {
      store.add(encoder_param_name(l, "norm_gain"), Matrix<T>::Ones(1, out));
      store.add(encoder_param_name(l, "norm_offset"), Matrix<T>::Zero(1, out));
    }
  }
}

template <class T>
std::pair<Matrix<T>, EncoderTrace<T>> encoder_forward(const Matrix<T>& encoded_positions,
                                                      const ParamStore<T>& store, const EncoderConfig& config) {
  if (encoded_positions.cols() != config.pe_dim()) {
    throw ShapeError("encoder_forward: expected " + std::to_string(config.pe_dim()) + " input columns");
  }
  EncoderTrace<T> trace;
  Matrix<T> h = encoded_positions;
  for (int l = 0; l < config.layers; ++l) {
    auto [z, lin] = linear_forward(h, store.value(encoder_param_name(l, "weight")),
                                   store.value(encoder_param_name(l, "bias")));
    trace.linear.push_back(std::move(lin));
    if (l + 1 == config.layers) {
      auto [y, tt] = tanh_forward(z);
      trace.output = std::move(tt);
      return {std::move(y), std::move(trace)};
    }
    auto [a, rt] = relu_forward(z);
    trace.relu.push_back(std::move(rt));
    auto [n, nt] = layer_norm_forward(a, store.value(encoder_param_name(l, "norm_gain")),
                                      store.value(encoder_param_name(l, "norm_offset")));
    trace.norm.push_back(std::move(nt));
    h = std::move(n);
  }
  throw std::logic_error("encoder_forward: unreachable");
}

template <class T>
void encoder_backward(const EncoderTrace<T>& trace, const Matrix<T>& grad_features, ParamStore<T>& store,
                      const EncoderConfig& config) {
  Matrix<T> g = tanh_backward(trace.output, grad_features);
  for (int l = config.layers - 1; l >= 0; --l) {
    if (l + 1 < config.layers) {
      auto ng = layer_norm_backward(trace.norm[static_cast<std::size_t>(l)], g);
      store.accumulate(encoder_param_name(l, "norm_gain"), ng.gain);
      store.accumulate(encoder_param_name(l, "norm_offset"), ng.offset);
      g = relu_backward(trace.relu[static_cast<std::size_t>(l)], ng.input);
    }
    auto lg = linear_backward(trace.linear[static_cast<std::size_t>(l)],
                              store.value(encoder_param_name(l, "weight")), g);
    store.accumulate(encoder_param_name(l, "weight"), lg.weight);
    store.accumulate(encoder_param_name(l, "bias"), lg.bias);
    g = std::move(lg.input);
  }
}

template <class T>
MeshFeatureField<T> compute_feature_field(const Mesh& mesh, const ParamStore<T>& store,
                                          const EncoderConfig& config) {
  const Matrix<T> pe = positional_encode_mesh(mesh, config.pe_frequencies).cast<T>();
  return {encoder_forward(pe, store, config).first};
}

template <class T>
EncoderLossResult<T> encoder_loss(const Matrix<T>& features, const Mesh& mesh, const RasterOutput& raster,
                                  const AttributeImage<T>& teacher_features) {
  if (teacher_features.channels() != features.cols()) {
    throw ShapeError("encoder_loss: teacher has " + std::to_string(teacher_features.channels()) +
                     " channels, field has " + std::to_string(features.cols()));
  }
  if (teacher_features.width != raster.width || teacher_features.height != raster.height) {
    throw ShapeError("encoder_loss: teacher image size does not match the view");
  }
  const AttributeImage<T> rendered = shade_attributes(raster, features, mesh.faces);
  auto sq = squared_error_loss(rendered.values, teacher_features.values, raster.coverage());
  EncoderLossResult<T> out;
  out.loss = sq.loss;
  out.covered_pixels = sq.counted_rows;
  AttributeImage<T> grad_image{raster.width, raster.height, std::move(sq.grad)};
  out.grad_features = shade_backward(raster, mesh.faces, grad_image, mesh.vertex_count());
  return out;
}

template <class T>
EncoderLossResult<T> encoder_loss(const Matrix<T>& features, const Mesh& mesh, const Camera& cam,
                                  const AttributeImage<T>& teacher_features) {
  return encoder_loss(features, mesh, rasterize(mesh, cam), teacher_features);
}

#define MESHCLICK_INSTANTIATE(T)                                                                          \
  template void init_encoder_params(ParamStore<T>&, const EncoderConfig&, std::uint64_t);               \
  template std::pair<Matrix<T>, EncoderTrace<T>> encoder_forward(const Matrix<T>&, const ParamStore<T>&, \
                                                                 const EncoderConfig&);                   \
  template void encoder_backward(const EncoderTrace<T>&, const Matrix<T>&, ParamStore<T>&,               \
                                 const EncoderConfig&);                                                   \
  template MeshFeatureField<T> compute_feature_field(const Mesh&, const ParamStore<T>&,                 \
                                                     const EncoderConfig&);                               \
  template EncoderLossResult<T> encoder_loss(const Matrix<T>&, const Mesh&, const RasterOutput&,         \
                                             const AttributeImage<T>&);                                   \
  template EncoderLossResult<T> encoder_loss(const Matrix<T>&, const Mesh&, const Camera&,               \
                                             const AttributeImage<T>&);

MESHCLICK_INSTANTIATE(float)
MESHCLICK_INSTANTIATE(double)

#undef MESHCLICK_INSTANTIATE

}  // namespace meshclick
