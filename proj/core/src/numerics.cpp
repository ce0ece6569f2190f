#include "meshclick/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace meshclick {

namespace {

template <class T>
void require_shape(const Matrix<T>& m, Eigen::Index rows, Eigen::Index cols, const char* what) {
  if (m.rows() != rows || m.cols() != cols) {
    throw ShapeError(std::string(what) + ": expected " + std::to_string(rows) + "x" + std::to_string(cols) +
                     ", got " + std::to_string(m.rows()) + "x" + std::to_string(m.cols()));
  }
}

bool mask_selects(const std::vector<std::uint8_t>& mask, Eigen::Index row) {
  return mask.empty() || mask[static_cast<std::size_t>(row)] != 0;
}

}  // namespace

template <class T>
std::pair<Matrix<T>, LinearTrace<T>> linear_forward(const Matrix<T>& x, const Matrix<T>& weight,
                                                    const Matrix<T>& bias) {
  if (x.cols() != weight.rows()) {
    throw ShapeError("linear_forward: input has " + std::to_string(x.cols()) + " columns, weight has " +
                     std::to_string(weight.rows()) + " rows");
  }
  Matrix<T> y(x.rows(), weight.cols());
  y.noalias() = x * weight;
  if (bias.size() != 0) {
    require_shape(bias, 1, weight.cols(), "linear_forward bias");
    y.rowwise() += bias.row(0);
  }
  return {std::move(y), LinearTrace<T>{x}};
}

template <class T>
LinearGrads<T> linear_backward(const LinearTrace<T>& trace, const Matrix<T>& weight,
                               const Matrix<T>& grad_out, bool has_bias) {
  require_shape(grad_out, trace.input.rows(), weight.cols(), "linear_backward grad_out");
  LinearGrads<T> g;
  g.input.noalias() = grad_out * weight.transpose();
  g.weight.noalias() = trace.input.transpose() * grad_out;
  if (has_bias) g.bias = grad_out.colwise().sum();
  return g;
}

template <class T>
std::pair<Matrix<T>, ReluTrace<T>> relu_forward(const Matrix<T>& x) {
  Matrix<T> y = x.cwiseMax(T(0));
  return {std::move(y), ReluTrace<T>{x}};
}

template <class T>
Matrix<T> relu_backward(const ReluTrace<T>& trace, const Matrix<T>& grad_out) {
  require_shape(grad_out, trace.pre_activation.rows(), trace.pre_activation.cols(), "relu_backward");
  return (trace.pre_activation.array() > T(0)).select(grad_out, T(0));
}

template <class T>
std::pair<Matrix<T>, LayerNormTrace<T>> layer_norm_forward(const Matrix<T>& x, const Matrix<T>& gain,
                                                           const Matrix<T>& offset, double eps) {
  const Eigen::Index d = x.cols();
  require_shape(gain, 1, d, "layer_norm gain");
  require_shape(offset, 1, d, "layer_norm offset");
  if (!(eps > 0.0)) throw std::invalid_argument("layer_norm eps must be positive");
  LayerNormTrace<T> trace;
  trace.normalized.resize(x.rows(), d);
  trace.inv_std.resize(x.rows());
  trace.gain = gain;
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const T mean = x.row(r).mean();
    const auto centered = (x.row(r).array() - mean).matrix();
    const T var = centered.squaredNorm() / static_cast<T>(d);
    const T inv_std = T(1) / std::sqrt(var + static_cast<T>(eps));
    trace.inv_std(r) = inv_std;
    trace.normalized.row(r) = centered * inv_std;
  }
  Matrix<T> y = trace.normalized.array().rowwise() * gain.row(0).array();
  y.rowwise() += offset.row(0);
  return {std::move(y), std::move(trace)};
}

template <class T>
LayerNormGrads<T> layer_norm_backward(const LayerNormTrace<T>& trace, const Matrix<T>& grad_out) {
  const auto& xhat = trace.normalized;
  require_shape(grad_out, xhat.rows(), xhat.cols(), "layer_norm_backward");
  LayerNormGrads<T> g;
  g.gain = (grad_out.array() * xhat.array()).colwise().sum();
  g.offset = grad_out.colwise().sum();
  const Matrix<T> dxhat = grad_out.array().rowwise() * trace.gain.row(0).array();
  g.input.resize(xhat.rows(), xhat.cols());
  for (Eigen::Index r = 0; r < xhat.rows(); ++r) {
    const T mean_d = dxhat.row(r).mean();
    const T mean_dx = dxhat.row(r).dot(xhat.row(r)) / static_cast<T>(xhat.cols());
    g.input.row(r) = trace.inv_std(r) * (dxhat.row(r).array() - mean_d - xhat.row(r).array() * mean_dx).matrix();
  }
  return g;
}

template <class T>
std::pair<Matrix<T>, TanhTrace<T>> tanh_forward(const Matrix<T>& x) {
  Matrix<T> y = x.array().tanh();
  TanhTrace<T> trace{y};
  return {std::move(y), std::move(trace)};
}

template <class T>
Matrix<T> tanh_backward(const TanhTrace<T>& trace, const Matrix<T>& grad_out) {
  require_shape(grad_out, trace.output.rows(), trace.output.cols(), "tanh_backward");
  return grad_out.array() * (T(1) - trace.output.array().square());
}

template <class T>
Matrix<T> softmax_rows(const Matrix<T>& x) {
  Matrix<T> y(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const T max = x.row(r).maxCoeff();
    y.row(r) = (x.row(r).array() - max).exp();
    y.row(r) /= y.row(r).sum();
  }
  return y;
}

template <class T>
Matrix<T> softmax_rows_backward(const Matrix<T>& output, const Matrix<T>& grad_out) {
  require_shape(grad_out, output.rows(), output.cols(), "softmax_rows_backward");
  Matrix<T> dx(output.rows(), output.cols());
  for (Eigen::Index r = 0; r < output.rows(); ++r) {
    const T inner = output.row(r).dot(grad_out.row(r));
    dx.row(r) = output.row(r).array() * (grad_out.row(r).array() - inner);
  }
  return dx;
}

template <class T>
std::pair<Matrix<T>, AttentionTrace<T>> attention_forward(const Matrix<T>& query, const Matrix<T>& key,
                                                          const Matrix<T>& value, double scale) {
  if (key.rows() == 0) throw ShapeError("attention_forward: at least one key is required");
  if (key.cols() != query.cols()) throw ShapeError("attention_forward: query/key width mismatch");
  if (value.rows() != key.rows()) throw ShapeError("attention_forward: key/value count mismatch");
  AttentionTrace<T> trace;
  trace.scale = scale > 0.0 ? scale : 1.0 / std::sqrt(static_cast<double>(query.cols()));
  Matrix<T> scores(query.rows(), key.rows());
  scores.noalias() = query * key.transpose();
  scores *= static_cast<T>(trace.scale);
  trace.weights = softmax_rows(scores);
  Matrix<T> out(query.rows(), value.cols());
  out.noalias() = trace.weights * value;
  trace.query = query;
  trace.key = key;
  trace.value = value;
  return {std::move(out), std::move(trace)};
}

template <class T>
AttentionGrads<T> attention_backward(const AttentionTrace<T>& trace, const Matrix<T>& grad_out) {
  require_shape(grad_out, trace.query.rows(), trace.value.cols(), "attention_backward");
  AttentionGrads<T> g;
  g.value.noalias() = trace.weights.transpose() * grad_out;
  Matrix<T> d_weights(grad_out.rows(), trace.value.rows());
  d_weights.noalias() = grad_out * trace.value.transpose();
  Matrix<T> d_scores = softmax_rows_backward(trace.weights, d_weights);
  d_scores *= static_cast<T>(trace.scale);
  g.query.noalias() = d_scores * trace.key;
  g.key.noalias() = d_scores.transpose() * trace.query;
  return g;
}

template <class T>
LossResult<T> squared_error_loss(const Matrix<T>& prediction, const Matrix<T>& target,
                                 const std::vector<std::uint8_t>& row_mask) {
  require_shape(target, prediction.rows(), prediction.cols(), "squared_error_loss target");
  if (!row_mask.empty() && static_cast<Eigen::Index>(row_mask.size()) != prediction.rows()) {
    throw ShapeError("squared_error_loss: mask length mismatch");
  }
  LossResult<T> out;
  out.grad = Matrix<T>::Zero(prediction.rows(), prediction.cols());
  for (Eigen::Index r = 0; r < prediction.rows(); ++r) {
    if (mask_selects(row_mask, r)) ++out.counted_rows;
  }
  if (out.counted_rows == 0) return out;
  const double inv = 1.0 / static_cast<double>(out.counted_rows);
  double total = 0.0;
  for (Eigen::Index r = 0; r < prediction.rows(); ++r) {
    if (!mask_selects(row_mask, r)) continue;
    const auto diff = (prediction.row(r) - target.row(r)).eval();
    total += static_cast<double>(diff.squaredNorm());
    out.grad.row(r) = diff * static_cast<T>(2.0 * inv);
  }
  out.loss = total * inv;
  return out;
}

template <class T>
LossResult<T> binary_cross_entropy(const Matrix<T>& probability, const Matrix<T>& target,
                                   const std::vector<std::uint8_t>& row_mask) {
  require_shape(target, probability.rows(), probability.cols(), "binary_cross_entropy target");
  if (!row_mask.empty() && static_cast<Eigen::Index>(row_mask.size()) != probability.rows()) {
    throw ShapeError("binary_cross_entropy: mask length mismatch");
  }
  LossResult<T> out;
  out.grad = Matrix<T>::Zero(probability.rows(), probability.cols());
  for (Eigen::Index r = 0; r < probability.rows(); ++r) {
    if (mask_selects(row_mask, r)) ++out.counted_rows;
  }
  if (out.counted_rows == 0) return out;
  const double inv = 1.0 / (static_cast<double>(out.counted_rows) * static_cast<double>(probability.cols()));
  double total = 0.0;
  for (Eigen::Index r = 0; r < probability.rows(); ++r) {
    if (!mask_selects(row_mask, r)) continue;
    for (Eigen::Index c = 0; c < probability.cols(); ++c) {
      const double p = std::clamp(static_cast<double>(probability(r, c)), kProbabilityClamp, 1.0 - kProbabilityClamp);
      const double t = static_cast<double>(target(r, c));
      total -= t * std::log(p) + (1.0 - t) * std::log(1.0 - p);
      out.grad(r, c) = static_cast<T>((p - t) / (p * (1.0 - p)) * inv);
    }
  }
  out.loss = total * inv;
  return out;
}

template <class T>
Param<T>& ParamStore<T>::add(const std::string& name, Matrix<T> init) {
  Param<T> p;
  p.grad = Matrix<T>::Zero(init.rows(), init.cols());
  p.m = Matrix<T>::Zero(init.rows(), init.cols());
  p.v = Matrix<T>::Zero(init.rows(), init.cols());
  p.value = std::move(init);
  auto [it, inserted] = params_.emplace(name, std::move(p));
  if (!inserted) throw std::invalid_argument("parameter '" + name + "' already exists");
  return it->second;
}

template <class T>
Param<T>& ParamStore<T>::at(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
  return it->second;
}

template <class T>
const Param<T>& ParamStore<T>::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
  return it->second;
}

template <class T>
void ParamStore<T>::accumulate(const std::string& name, const Matrix<T>& delta) {
  Param<T>& p = at(name);
  require_shape(delta, p.value.rows(), p.value.cols(), ("gradient for " + name).c_str());
  p.grad += delta;
}

template <class T>
void ParamStore<T>::zero_grad(std::string_view prefix) {
  for (auto& [name, p] : params_) {
    if (name.starts_with(prefix)) p.grad.setZero();
  }
}

template <class T>
std::vector<std::string> ParamStore<T>::names(std::string_view prefix) const {
  std::vector<std::string> out;
  for (const auto& [name, p] : params_) {
    if (name.starts_with(prefix)) out.push_back(name);
  }
  return out;
}

template <class T>
std::size_t ParamStore<T>::scalar_count(std::string_view prefix) const {
  std::size_t n = 0;
  for (const auto& [name, p] : params_) {
    if (name.starts_with(prefix)) n += static_cast<std::size_t>(p.value.size());
  }
  return n;
}

template <class T>
std::uint64_t ParamStore<T>::hash(std::string_view prefix) const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const void* data, std::size_t bytes) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < bytes; ++i) {
      h ^= p[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& [name, p] : params_) {
    if (!name.starts_with(prefix)) continue;
    mix(name.data(), name.size());
    const std::int64_t shape[2] = {p.value.rows(), p.value.cols()};
    mix(shape, sizeof(shape));
    mix(p.value.data(), static_cast<std::size_t>(p.value.size()) * sizeof(T));
  }
  return h;
}

template <class T>
void adam_step(ParamStore<T>& store, const AdamConfig& config, std::int64_t step, std::string_view prefix) {
  if (step < 1) throw std::invalid_argument("adam_step: step must be >= 1");
  for (const auto& [name, p] : store) {
    if (name.starts_with(prefix) && !p.grad.allFinite()) {
      throw NumericError("non-finite gradient in parameter '" + name + "'");
    }
  }
  const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(step));
  const T b1 = static_cast<T>(config.beta1);
  const T b2 = static_cast<T>(config.beta2);
  const T step_size = static_cast<T>(config.learning_rate / bc1);
  const T inv_sqrt_bc2 = static_cast<T>(1.0 / std::sqrt(bc2));
  const T eps = static_cast<T>(config.eps);
  for (const auto& name : store.names(prefix)) {
    Param<T>& p = store.at(name);
    p.m = b1 * p.m + (T(1) - b1) * p.grad;
    p.v = b2 * p.v + (T(1) - b2) * p.grad.cwiseProduct(p.grad);
    p.value.array() -= step_size * p.m.array() / (p.v.array().sqrt() * inv_sqrt_bc2 + eps);
    p.grad.setZero();
  }
}

template <class T>
Matrix<T> kaiming_uniform(Eigen::Index rows, Eigen::Index cols, Rng& rng, double scale) {
  const double bound = scale * std::sqrt(6.0 / static_cast<double>(rows));
  Matrix<T> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(rng.uniform(-bound, bound));
  return m;
}

template <class T>
Matrix<T> gather_rows(const Matrix<T>& x, const std::vector<std::int32_t>& rows) {
  Matrix<T> out(static_cast<Eigen::Index>(rows.size()), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= x.rows()) throw std::out_of_range("gather_rows: row out of range");
    out.row(static_cast<Eigen::Index>(i)) = x.row(rows[i]);
  }
  return out;
}

template <class T>
void scatter_add_rows(Matrix<T>& out, const Matrix<T>& x, const std::vector<std::int32_t>& rows) {
  if (x.rows() != static_cast<Eigen::Index>(rows.size()) || x.cols() != out.cols()) {
    throw ShapeError("scatter_add_rows: shape mismatch");
  }
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(rows[i]) += x.row(static_cast<Eigen::Index>(i));
}

#define MESHCLICK_INSTANTIATE(T)                                                                         \
  template std::pair<Matrix<T>, LinearTrace<T>> linear_forward(const Matrix<T>&, const Matrix<T>&,      \
                                                               const Matrix<T>&);                         \
  template LinearGrads<T> linear_backward(const LinearTrace<T>&, const Matrix<T>&, const Matrix<T>&,     \
                                          bool);                                                          \
  template std::pair<Matrix<T>, ReluTrace<T>> relu_forward(const Matrix<T>&);                           \
  template Matrix<T> relu_backward(const ReluTrace<T>&, const Matrix<T>&);                              \
  template std::pair<Matrix<T>, LayerNormTrace<T>> layer_norm_forward(const Matrix<T>&, const Matrix<T>&, \
                                                                      const Matrix<T>&, double);         \
  template LayerNormGrads<T> layer_norm_backward(const LayerNormTrace<T>&, const Matrix<T>&);           \
  template std::pair<Matrix<T>, TanhTrace<T>> tanh_forward(const Matrix<T>&);                           \
  template Matrix<T> tanh_backward(const TanhTrace<T>&, const Matrix<T>&);                              \
  template Matrix<T> softmax_rows(const Matrix<T>&);                                                     \
  template Matrix<T> softmax_rows_backward(const Matrix<T>&, const Matrix<T>&);                         \
  template std::pair<Matrix<T>, AttentionTrace<T>> attention_forward(const Matrix<T>&, const Matrix<T>&, \
                                                                     const Matrix<T>&, double);          \
  template AttentionGrads<T> attention_backward(const AttentionTrace<T>&, const Matrix<T>&);            \
  template LossResult<T> squared_error_loss(const Matrix<T>&, const Matrix<T>&,                         \
                                            const std::vector<std::uint8_t>&);                           \
  template LossResult<T> binary_cross_entropy(const Matrix<T>&, const Matrix<T>&,                       \
                                              const std::vector<std::uint8_t>&);                         \
  template class ParamStore<T>;                                                                          \
  template void adam_step(ParamStore<T>&, const AdamConfig&, std::int64_t, std::string_view);           \
  template Matrix<T> kaiming_uniform<T>(Eigen::Index, Eigen::Index, Rng&, double);                      \
  template Matrix<T> gather_rows(const Matrix<T>&, const std::vector<std::int32_t>&);                   \
  template void scatter_add_rows(Matrix<T>&, const Matrix<T>&, const std::vector<std::int32_t>&);

MESHCLICK_INSTANTIATE(float)
MESHCLICK_INSTANTIATE(double)

#undef MESHCLICK_INSTANTIATE

}  // namespace meshclick
