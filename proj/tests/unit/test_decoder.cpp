#include <doctest.h>

#include <cmath>

#include "meshclick/decoder.hpp"
#include "support/oracles.hpp"

using namespace meshclick;

namespace {

DecoderConfig tiny_decoder() {
  DecoderConfig c;
  c.feature_dim = 4;
  c.hidden_dim = 5;
  c.mlp_layers = 3;
  return c;
}

ParamStore<double> tiny_params(std::uint64_t seed) {
  ParamStore<double> s;
  init_decoder_params(s, tiny_decoder(), seed);
  for (const auto& name : s.names())
    s.at(name).value += oracle::random_matrix(s.value(name).rows(), s.value(name).cols(), seed + 100, 0.3);
  return s;
}

Matrix<double> softmax_reference(const Matrix<double>& z) {
  Matrix<double> out(z.rows(), z.cols());
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    const double m = z.row(r).maxCoeff();
    double sum = 0.0;
    for (Eigen::Index c = 0; c < z.cols(); ++c) sum += std::exp(z(r, c) - m);
    for (Eigen::Index c = 0; c < z.cols(); ++c) out(r, c) = std::exp(z(r, c) - m) / sum;
  }
  return out;
}

}  // namespace

TEST_CASE("default decoder has sixteen linear layers ending in two channels") {
  DecoderConfig c;
  ParamStore<float> s;
  init_decoder_params(s, c, 1);
  CHECK(s.value(decoder_param_name(0, "weight")).rows() == 512);
  CHECK(s.value(decoder_param_name(0, "weight")).cols() == 256);
  for (int l = 1; l < 15; ++l) CHECK(s.value(decoder_param_name(l, "weight")).rows() == 256);
  CHECK(s.value(decoder_param_name(15, "weight")).cols() == 2);
  CHECK_FALSE(s.contains(decoder_param_name(16, "weight")));
  CHECK(decoder_param_name(3, "bias") == "decoder.mlp.03.bias");
  CHECK(s.value(attention_param::query).rows() == 256);
  CHECK(s.value(attention_param::value_negative).cols() == 256);
}

TEST_CASE("interactive attention matches the explicit formula") {
  const auto s = tiny_params(1);
  const Matrix<double> fq = oracle::random_matrix(6, 4, 2);
  const Matrix<double> fp = oracle::random_matrix(2, 4, 3);
  const Matrix<double> fn = oracle::random_matrix(1, 4, 4);
  const auto g = interactive_attention_forward(fq, fp, fn, s).first;

  const Matrix<double> q = fq * s.value(attention_param::query);
  Matrix<double> k(3, 4);
  k << fp * s.value(attention_param::key_positive), fn * s.value(attention_param::key_negative);
  Matrix<double> v(3, 4);
  v << fp * s.value(attention_param::value_positive), fn * s.value(attention_param::value_negative);
  const Matrix<double> expect = softmax_reference(q * k.transpose() / 2.0) * v;
  CHECK((g - expect).cwiseAbs().maxCoeff() < 1e-13);
}

TEST_CASE("interactive attention without negative clicks") {
  const auto s = tiny_params(2);
  const Matrix<double> fq = oracle::random_matrix(3, 4, 5);
  const Matrix<double> fp = oracle::random_matrix(1, 4, 6);
  const auto [g, trace] = interactive_attention_forward(fq, fp, Matrix<double>(0, 4), s);
  // A single key: every query receives the one value row.
  const Matrix<double> v = fp * s.value(attention_param::value_positive);
  for (int r = 0; r < 3; ++r) CHECK((g.row(r) - v.row(0)).norm() < 1e-13);
  CHECK_THROWS_AS(interactive_attention_forward(fq, Matrix<double>(0, 4), fp, s), ShapeError);
}

TEST_CASE("interactive attention gradients") {
  for (int negatives : {0, 2}) {
    auto s = tiny_params(3);
    Matrix<double> fq = oracle::random_matrix(5, 4, 7);
    Matrix<double> fp = oracle::random_matrix(2, 4, 8);
    Matrix<double> fn = oracle::random_matrix(negatives, 4, 9);
    const Matrix<double> probe = oracle::random_matrix(5, 4, 10);
    auto [g, trace] = interactive_attention_forward(fq, fp, fn, s);
    const auto grads = interactive_attention_backward(trace, probe, s);
    auto f = [&] { return oracle::dot(interactive_attention_forward(fq, fp, fn, s).first, probe); };
    CHECK(oracle::relative_error(grads.query_features, oracle::numeric_gradient(fq, f)) < 1e-6);
    CHECK(oracle::relative_error(grads.positive_features, oracle::numeric_gradient(fp, f)) < 1e-6);
    if (negatives > 0) {
      CHECK(oracle::relative_error(grads.negative_features, oracle::numeric_gradient(fn, f)) < 1e-6);
    } else {
      CHECK(grads.negative_features.rows() == 0);
    }
    for (const auto& name : s.names("decoder.attn.")) {
      INFO(name);
      const Matrix<double> analytic = s.grad(name);
      CHECK(oracle::relative_error(analytic, oracle::numeric_gradient(s.at(name).value, f)) < 1e-6);
    }
  }
}

TEST_CASE("decode matches a hand-written MLP") {
  const auto cfg = tiny_decoder();
  const auto s = tiny_params(4);
  const Matrix<double> f = oracle::random_matrix(3, 4, 11);
  const Matrix<double> g = oracle::random_matrix(3, 4, 12);
  const auto p = decode_forward(f, g, s, cfg).first;

  Matrix<double> h(3, 8);
  h << f, g;
  for (int l = 0; l < cfg.mlp_layers; ++l) {
    Matrix<double> z = h * s.value(decoder_param_name(l, "weight"));
    z.rowwise() += s.value(decoder_param_name(l, "bias")).row(0);
    if (l + 1 == cfg.mlp_layers) {
      h = softmax_reference(z);
      break;
    }
    z = z.cwiseMax(0.0);
    for (Eigen::Index r = 0; r < z.rows(); ++r) {
      const double mean = z.row(r).mean();
      const double var = (z.row(r).array() - mean).square().mean();
      z.row(r) = ((z.row(r).array() - mean) / std::sqrt(var + kLayerNormEps)).matrix();
      z.row(r) = z.row(r).cwiseProduct(s.value(decoder_param_name(l, "norm_gain")).row(0)) +
                 s.value(decoder_param_name(l, "norm_offset")).row(0);
    }
    h = z;
  }
  CHECK((p - h).cwiseAbs().maxCoeff() < 1e-13);
  for (int r = 0; r < 3; ++r) CHECK(p.row(r).sum() == doctest::Approx(1.0).epsilon(1e-14));
  CHECK_THROWS_AS(decode_forward(f, oracle::random_matrix(2, 4, 1), s, cfg), ShapeError);
}

TEST_CASE("segment backward covers concat, query and click paths") {
  const auto cfg = tiny_decoder();
  auto s = tiny_params(5);
  Matrix<double> feats = oracle::random_matrix(9, 4, 13);
  const auto clicks = ClickSet::create({{2, ClickSign::positive}, {7, ClickSign::negative}, {4, ClickSign::positive}}, 9);
  // Restrict to a subset that includes a clicked vertex and one that does not.
  const std::vector<std::int32_t> rows = {0, 2, 3, 8};
  const Matrix<double> probe = oracle::random_matrix(4, 2, 14);
  auto [p, trace] = segment_forward(feats, clicks, rows, s, cfg);
  const Matrix<double> df = segment_backward(trace, probe, s, cfg);
  auto f = [&] { return oracle::dot(segment_forward(feats, clicks, rows, s, cfg).first, probe); };
  CHECK(oracle::relative_error(df, oracle::numeric_gradient(feats, f)) < 1e-6);
  // Vertex 7 is only a key/value, vertex 5 is unused.
  CHECK(df.row(7).norm() > 0.0);
  CHECK(df.row(5).norm() == 0.0);
  for (const auto& name : s.names(kDecoderPrefix)) {
    INFO(name);
    const Matrix<double> analytic = s.grad(name);
    CHECK(oracle::relative_error(analytic, oracle::numeric_gradient(s.at(name).value, f)) < 1e-6);
  }
}

TEST_CASE("row subsets agree with the full field") {
  const auto cfg = tiny_decoder();
  const auto s = tiny_params(6);
  const Matrix<double> feats = oracle::random_matrix(10, 4, 15);
  const auto clicks = ClickSet::create({{1, ClickSign::positive}}, 10);
  const auto full = segment(feats, clicks, s, cfg);
  const auto sub = segment_forward(feats, clicks, {3, 9}, s, cfg).first;
  CHECK(sub(0, 0) == doctest::Approx(full[3]).epsilon(1e-14));
  CHECK(sub(1, 0) == doctest::Approx(full[9]).epsilon(1e-14));
  for (double v : full) {
    CHECK(v > 0.0);
    CHECK(v < 1.0);
  }
  const auto bad = ClickSet::create({{12, ClickSign::positive}}, 20);
  CHECK_THROWS_AS(segment(feats, bad, s, cfg), ClickError);
}

TEST_CASE("inference path matches the traced forward across row blocks") {
  const auto cfg = tiny_decoder();
  const auto s = tiny_params(8);
  const Matrix<double> feats = oracle::random_matrix(600, 4, 17);
  const auto clicks = ClickSet::create({{4, ClickSign::positive}, {590, ClickSign::negative}}, 600);
  const auto fast = segment(feats, clicks, s, cfg);
  const auto traced = segment_forward(feats, clicks, {}, s, cfg).first;
  REQUIRE(fast.size() == 600);
  double worst = 0.0;
  for (int i = 0; i < 600; ++i) worst = std::max(worst, std::abs(fast[i] - traced(i, 0)));
  CHECK(worst < 1e-12);
}

TEST_CASE("click listing order does not change the output") {
  const auto cfg = tiny_decoder();
  const auto s = tiny_params(7);
  const Matrix<double> feats = oracle::random_matrix(12, 4, 16);
  const auto a = ClickSet::create({{3, ClickSign::positive}, {8, ClickSign::negative}, {5, ClickSign::positive}, {1, ClickSign::negative}}, 12);
  const auto b = ClickSet::create({{1, ClickSign::negative}, {5, ClickSign::positive}, {8, ClickSign::negative}, {3, ClickSign::positive}}, 12);
  CHECK(segment(feats, a, s, cfg) == segment(feats, b, s, cfg));
}

TEST_CASE("untrained model") {
  const Mesh m = make_icosphere(1);
  EncoderConfig enc;
  enc.pe_frequencies = 2;
  enc.hidden_dim = 8;
  enc.layers = 2;
  enc.out_dim = 4;
  const auto model = make_untrained_model(m, enc, tiny_decoder(), 3);
  CHECK(model.features.rows() == 42);
  CHECK(model.stage == "init");
  CHECK(model.id().size() == 16);
  CHECK(model.mesh_hash == mesh_hash(m));
  CHECK_THROWS_AS(model.segment(ClickSet::create({{0, ClickSign::positive}}, 42)), std::logic_error);
  auto trained = model;
  trained.stage = "two-stage";
  CHECK(trained.segment(ClickSet::create({{0, ClickSign::positive}}, 42)).size() == 42);
  enc.out_dim = 5;
  CHECK_THROWS_AS(make_untrained_model(m, enc, tiny_decoder(), 3), std::invalid_argument);
  CHECK(make_untrained_model(m, EncoderConfig{.pe_frequencies = 2, .hidden_dim = 8, .layers = 2, .out_dim = 4},
                             tiny_decoder(), 3)
            .id() == model.id());
}
