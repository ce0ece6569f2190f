#include "meshclick/decoder.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace meshclick {

void DecoderConfig::validate() const {
  if (feature_dim < 1 || hidden_dim < 1) throw std::invalid_argument("decoder widths must be positive");
  if (mlp_layers < 1) throw std::invalid_argument("decoder MLP needs at least one layer");
}

std::string decoder_param_name(int layer, const char* field) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "mlp.%02d.", layer);
  return std::string(kDecoderPrefix) + buf + field;
}

template <class T>
void init_decoder_params(ParamStore<T>& store, const DecoderConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  const int d = config.feature_dim;
  // Variance-preserving projections (bound sqrt(3/d)).
  for (const auto* name : {&attention_param::query, &attention_param::key_positive, &attention_param::key_negative,
                           &attention_param::value_positive, &attention_param::value_negative}) {
    store.add(*name, kaiming_uniform<T>(d, d, rng, std::sqrt(0.5)));
  }
  for (int l = 0; l < config.mlp_layers; ++l) {
    const bool last = l + 1 == config.mlp_layers;
    store.add(decoder_param_name(l, "weight"),
              kaiming_uniform<T>(config.layer_in(l), config.layer_out(l), rng, last ? 0.1 : 1.0));
    store.add(decoder_param_name(l, "bias"), Matrix<T>::Zero(1, config.layer_out(l)));
    if (!last) {
      store.add(decoder_param_name(l, "norm_gain"), Matrix<T>::Ones(1, config.layer_out(l)));
      store.add(decoder_param_name(l, "norm_offset"), Matrix<T>::Zero(1, config.layer_out(l)));
    }
  }
}

template <class T>
std::pair<Matrix<T>, InteractiveAttentionTrace<T>> interactive_attention_forward(
    const Matrix<T>& query_features, const Matrix<T>& positive_features, const Matrix<T>& negative_features,
    const ParamStore<T>& store) {
  if (positive_features.rows() == 0) throw ShapeError("interactive attention needs at least one positive click");
  const Matrix<T> no_bias;
  InteractiveAttentionTrace<T> trace;
  trace.positive_count = positive_features.rows();
  trace.negative_count = negative_features.rows();

  auto [q, q_tr] = linear_forward(query_features, store.value(attention_param::query), no_bias);
  auto [kp, kp_tr] = linear_forward(positive_features, store.value(attention_param::key_positive), no_bias);
  auto [vp, vp_tr] = linear_forward(positive_features, store.value(attention_param::value_positive), no_bias);
  trace.query = std::move(q_tr);
  trace.key_pos = std::move(kp_tr);
  trace.value_pos = std::move(vp_tr);

  Matrix<T> keys = std::move(kp);
  Matrix<T> values = std::move(vp);
  if (trace.negative_count > 0) {
    auto [kn, kn_tr] = linear_forward(negative_features, store.value(attention_param::key_negative), no_bias);
    auto [vn, vn_tr] = linear_forward(negative_features, store.value(attention_param::value_negative), no_bias);
    trace.key_neg = std::move(kn_tr);
    trace.value_neg = std::move(vn_tr);
    Matrix<T> k_all(keys.rows() + kn.rows(), keys.cols());
    k_all << keys, kn;
    Matrix<T> v_all(values.rows() + vn.rows(), values.cols());
    v_all << values, vn;
    keys = std::move(k_all);
    values = std::move(v_all);
  }
  auto [g, att_tr] = attention_forward(q, keys, values);
  trace.attention = std::move(att_tr);
  return {std::move(g), std::move(trace)};
}

template <class T>
InteractiveAttentionGrads<T> interactive_attention_backward(const InteractiveAttentionTrace<T>& trace,
                                                            const Matrix<T>& grad_out, ParamStore<T>& store) {
  const auto ag = attention_backward(trace.attention, grad_out);
  const Eigen::Index np = trace.positive_count;
  const Eigen::Index nn = trace.negative_count;
  InteractiveAttentionGrads<T> out;

  auto qg = linear_backward(trace.query, store.value(attention_param::query), ag.query, false);
  store.accumulate(attention_param::query, qg.weight);
  out.query_features = std::move(qg.input);

  const Matrix<T> dk_pos = ag.key.topRows(np);
  const Matrix<T> dv_pos = ag.value.topRows(np);
  auto kpg = linear_backward(trace.key_pos, store.value(attention_param::key_positive), dk_pos, false);
  auto vpg = linear_backward(trace.value_pos, store.value(attention_param::value_positive), dv_pos, false);
  store.accumulate(attention_param::key_positive, kpg.weight);
  store.accumulate(attention_param::value_positive, vpg.weight);
  out.positive_features = kpg.input + vpg.input;

  if (nn > 0) {
    const Matrix<T> dk_neg = ag.key.bottomRows(nn);
    const Matrix<T> dv_neg = ag.value.bottomRows(nn);
    auto kng = linear_backward(trace.key_neg, store.value(attention_param::key_negative), dk_neg, false);
    auto vng = linear_backward(trace.value_neg, store.value(attention_param::value_negative), dv_neg, false);
    store.accumulate(attention_param::key_negative, kng.weight);
    store.accumulate(attention_param::value_negative, vng.weight);
    out.negative_features = kng.input + vng.input;
  } else {
    out.negative_features.resize(0, grad_out.cols());
  }
  return out;
}

template <class T>
Matrix<T> interactive_attention(const Matrix<T>& features, const ClickSet& clicks, const ParamStore<T>& store) {
  if (clicks.size() == 0) throw ClickError("click set is empty");
  return interactive_attention_forward(features, gather_rows(features, clicks.positives()),
                                       gather_rows(features, clicks.negatives()), store)
      .first;
}

template <class T>
std::pair<Matrix<T>, DecodeTrace<T>> decode_forward(const Matrix<T>& features, const Matrix<T>& conditioned,
                                                    const ParamStore<T>& store, const DecoderConfig& config) {
  if (features.rows() != conditioned.rows() || features.cols() != conditioned.cols() ||
      features.cols() != config.feature_dim) {
    throw ShapeError("decode_forward: F and G must both be rows x feature_dim");
  }
  DecodeTrace<T> trace;
  trace.feature_dim = features.cols();
  Matrix<T> h(features.rows(), 2 * features.cols());
  h << features, conditioned;
  for (int l = 0; l < config.mlp_layers; ++l) {
    auto [z, lin] = linear_forward(h, store.value(decoder_param_name(l, "weight")),
                                   store.value(decoder_param_name(l, "bias")));
    trace.linear.push_back(std::move(lin));
    if (l + 1 == config.mlp_layers) {
      trace.probabilities = softmax_rows(z);
      Matrix<T> p = trace.probabilities;
      return {std::move(p), std::move(trace)};
    }
    auto [a, rt] = relu_forward(z);
    trace.relu.push_back(std::move(rt));
    auto [n, nt] = layer_norm_forward(a, store.value(decoder_param_name(l, "norm_gain")),
                                      store.value(decoder_param_name(l, "norm_offset")));
    trace.norm.push_back(std::move(nt));
    h = std::move(n);
  }
  throw std::logic_error("decode_forward: unreachable");
}

template <class T>
DecodeGrads<T> decode_backward(const DecodeTrace<T>& trace, const Matrix<T>& grad_probabilities,
                               ParamStore<T>& store, const DecoderConfig& config) {
  Matrix<T> g = softmax_rows_backward(trace.probabilities, grad_probabilities);
  for (int l = config.mlp_layers - 1; l >= 0; --l) {
    if (l + 1 < config.mlp_layers) {
      auto ng = layer_norm_backward(trace.norm[static_cast<std::size_t>(l)], g);
      store.accumulate(decoder_param_name(l, "norm_gain"), ng.gain);
      store.accumulate(decoder_param_name(l, "norm_offset"), ng.offset);
      g = relu_backward(trace.relu[static_cast<std::size_t>(l)], ng.input);
    }
    auto lg = linear_backward(trace.linear[static_cast<std::size_t>(l)],
                              store.value(decoder_param_name(l, "weight")), g);
    store.accumulate(decoder_param_name(l, "weight"), lg.weight);
    store.accumulate(decoder_param_name(l, "bias"), lg.bias);
    g = std::move(lg.input);
  }
  DecodeGrads<T> out;
  out.features = g.leftCols(trace.feature_dim);
  out.conditioned = g.rightCols(trace.feature_dim);
  return out;
}

template <class T>
std::pair<Matrix<T>, SegmentTrace<T>> segment_forward(const Matrix<T>& features, const ClickSet& clicks,
                                                      const std::vector<std::int32_t>& rows,
                                                      const ParamStore<T>& store, const DecoderConfig& config) {
  for (const Click& c : clicks.entries()) {
    if (c.vertex >= features.rows()) throw ClickError("click vertex " + std::to_string(c.vertex) + " out of range");
  }
  if (clicks.positive_count() == 0) throw ClickError("click set needs at least one positive click");
  SegmentTrace<T> trace;
  trace.vertex_count = features.rows();
  trace.rows = rows;
  if (trace.rows.empty()) {
    trace.rows.resize(static_cast<std::size_t>(features.rows()));
    for (std::size_t i = 0; i < trace.rows.size(); ++i) trace.rows[i] = static_cast<std::int32_t>(i);
  }
  trace.positive_rows = clicks.positives();
  trace.negative_rows = clicks.negatives();
  const Matrix<T> query = gather_rows(features, trace.rows);
  auto [g, att] = interactive_attention_forward(query, gather_rows(features, trace.positive_rows),
                                                gather_rows(features, trace.negative_rows), store);
  trace.attention = std::move(att);
  auto [p, dec] = decode_forward(query, g, store, config);
  trace.decode = std::move(dec);
  return {std::move(p), std::move(trace)};
}

template <class T>
Matrix<T> segment_backward(const SegmentTrace<T>& trace, const Matrix<T>& grad_probabilities,
                           ParamStore<T>& store, const DecoderConfig& config) {
  auto dg = decode_backward(trace.decode, grad_probabilities, store, config);
  auto ag = interactive_attention_backward(trace.attention, dg.conditioned, store);
  Matrix<T> grad = Matrix<T>::Zero(trace.vertex_count, dg.features.cols());
  scatter_add_rows(grad, dg.features, trace.rows);
  scatter_add_rows(grad, ag.query_features, trace.rows);
  scatter_add_rows(grad, ag.positive_features, trace.positive_rows);
  scatter_add_rows(grad, ag.negative_features, trace.negative_rows);
  return grad;
}

namespace {

// ReLU then layer norm, in place on every row.
template <class T>
void relu_norm_inplace(Matrix<T>& h, const Matrix<T>& gain, const Matrix<T>& offset) {
  const auto d = static_cast<T>(h.cols());
  for (Eigen::Index r = 0; r < h.rows(); ++r) {
    auto row = h.row(r);
    row = row.cwiseMax(T(0));
    const T mean = row.mean();
    row.array() -= mean;
    const T inv_std = T(1) / std::sqrt(row.squaredNorm() / d + static_cast<T>(kLayerNormEps));
    row = (row.array() * inv_std * gain.row(0).array() + offset.row(0).array()).matrix();
  }
}

}  // namespace

// Inference path: the same arithmetic as segment_forward without traces,
// in row blocks so activations stay in cache.
template <class T>
ProbabilityField segment(const Matrix<T>& features, const ClickSet& clicks, const ParamStore<T>& store,
                         const DecoderConfig& config) {
  for (const Click& c : clicks.entries()) {
    if (c.vertex >= features.rows()) throw ClickError("click vertex " + std::to_string(c.vertex) + " out of range");
  }
  if (clicks.positive_count() == 0) throw ClickError("click set needs at least one positive click");
  if (features.cols() != config.feature_dim) throw ShapeError("segment: features must be n x feature_dim");
  const Matrix<T> g = interactive_attention(features, clicks, store);
  const Eigen::Index d = features.cols();
  const Matrix<T>& w0 = store.value(decoder_param_name(0, "weight"));

  constexpr Eigen::Index kBlock = 256;
  ProbabilityField out(static_cast<std::size_t>(features.rows()));
  Matrix<T> h;
  Matrix<T> z;
  for (Eigen::Index start = 0; start < features.rows(); start += kBlock) {
    const Eigen::Index m = std::min(kBlock, features.rows() - start);
    z.resize(m, w0.cols());
    z.noalias() = features.middleRows(start, m) * w0.topRows(d);
    z.noalias() += g.middleRows(start, m) * w0.bottomRows(d);
    z.rowwise() += store.value(decoder_param_name(0, "bias")).row(0);
    for (int l = 1; l < config.mlp_layers; ++l) {
      relu_norm_inplace(z, store.value(decoder_param_name(l - 1, "norm_gain")),
                        store.value(decoder_param_name(l - 1, "norm_offset")));
      std::swap(h, z);
      const Matrix<T>& w = store.value(decoder_param_name(l, "weight"));
      z.resize(m, w.cols());
      z.noalias() = h * w;
      z.rowwise() += store.value(decoder_param_name(l, "bias")).row(0);
    }
    const Matrix<T> p = softmax_rows(z);
    for (Eigen::Index i = 0; i < m; ++i) out[static_cast<std::size_t>(start + i)] = static_cast<double>(p(i, 0));
  }
  return out;
}

void Model::refresh_features(const Mesh& mesh) {
  features = compute_feature_field(mesh, params, encoder).features;
}

ProbabilityField Model::segment(const ClickSet& clicks) const {
  if (!has_decoder()) throw std::logic_error("model has no trained decoder (stage '" + stage + "')");
  return meshclick::segment(features, clicks, params, decoder);
}

std::string Model::id() const {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(params.hash()));
  return buf;
}

Model make_untrained_model(const Mesh& mesh, const EncoderConfig& encoder, const DecoderConfig& decoder,
                           std::uint64_t seed) {
  if (encoder.out_dim != decoder.feature_dim) {
    throw std::invalid_argument("encoder out_dim must equal decoder feature_dim");
  }
  Model model;
  model.encoder = encoder;
  model.decoder = decoder;
  model.seed = seed;
  model.stage = "init";
  model.mesh_hash = mesh_hash(mesh);
  init_encoder_params(model.params, encoder, seed);
  init_decoder_params(model.params, decoder, seed ^ 0x9e3779b97f4a7c15ULL);
  model.refresh_features(mesh);
  return model;
}

#define MESHCLICK_INSTANTIATE(T)                                                                             \
  template void init_decoder_params(ParamStore<T>&, const DecoderConfig&, std::uint64_t);                  \
  template std::pair<Matrix<T>, InteractiveAttentionTrace<T>> interactive_attention_forward(                \
      const Matrix<T>&, const Matrix<T>&, const Matrix<T>&, const ParamStore<T>&);                         \
  template InteractiveAttentionGrads<T> interactive_attention_backward(const InteractiveAttentionTrace<T>&, \
                                                                       const Matrix<T>&, ParamStore<T>&);  \
  template Matrix<T> interactive_attention(const Matrix<T>&, const ClickSet&, const ParamStore<T>&);       \
  template std::pair<Matrix<T>, DecodeTrace<T>> decode_forward(const Matrix<T>&, const Matrix<T>&,         \
                                                               const ParamStore<T>&, const DecoderConfig&); \
  template DecodeGrads<T> decode_backward(const DecodeTrace<T>&, const Matrix<T>&, ParamStore<T>&,         \
                                          const DecoderConfig&);                                            \
  template std::pair<Matrix<T>, SegmentTrace<T>> segment_forward(                                           \
      const Matrix<T>&, const ClickSet&, const std::vector<std::int32_t>&, const ParamStore<T>&,           \
      const DecoderConfig&);                                                                                \
  template Matrix<T> segment_backward(const SegmentTrace<T>&, const Matrix<T>&, ParamStore<T>&,            \
                                      const DecoderConfig&);                                                \
  template ProbabilityField segment(const Matrix<T>&, const ClickSet&, const ParamStore<T>&,               \
                                    const DecoderConfig&);

MESHCLICK_INSTANTIATE(float)
MESHCLICK_INSTANTIATE(double)

#undef MESHCLICK_INSTANTIATE

}  // namespace meshclick
