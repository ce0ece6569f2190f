#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "meshclick/random.hpp"

// Dense kernels for the fixed layer vocabulary of the encoder and decoder.
// Every forward returns its output together with the trace its backward pass
// consumes; there is no general autodiff graph. All kernels are instantiated
// for float (training) and double (gradient checks).
namespace meshclick {

template <class T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Non-finite values during optimization. Maps to the CLI's numeric-abort exit.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <class T>
struct LinearTrace {
  Matrix<T> input;
};

template <class T>
struct LinearGrads {
  Matrix<T> input;
  Matrix<T> weight;
  Matrix<T> bias;  // 1 x out, empty when the layer has no bias
};

// y = x W + bias (bias broadcast over rows; pass an empty matrix for none).
template <class T>
std::pair<Matrix<T>, LinearTrace<T>> linear_forward(const Matrix<T>& x, const Matrix<T>& weight,
                                                    const Matrix<T>& bias);
template <class T>
LinearGrads<T> linear_backward(const LinearTrace<T>& trace, const Matrix<T>& weight,
                               const Matrix<T>& grad_out, bool has_bias = true);

template <class T>
struct ReluTrace {
  Matrix<T> pre_activation;
};
template <class T>
std::pair<Matrix<T>, ReluTrace<T>> relu_forward(const Matrix<T>& x);
template <class T>
Matrix<T> relu_backward(const ReluTrace<T>& trace, const Matrix<T>& grad_out);

inline constexpr double kLayerNormEps = 1e-5;

template <class T>
struct LayerNormTrace {
  Matrix<T> normalized;                // x_hat, before gain/offset
  Eigen::Matrix<T, Eigen::Dynamic, 1> inv_std;
  Matrix<T> gain;
};
template <class T>
struct LayerNormGrads {
  Matrix<T> input;
  Matrix<T> gain;
  Matrix<T> offset;
};
template <class T>
std::pair<Matrix<T>, LayerNormTrace<T>> layer_norm_forward(const Matrix<T>& x, const Matrix<T>& gain,
                                                           const Matrix<T>& offset,
                                                           double eps = kLayerNormEps);
template <class T>
LayerNormGrads<T> layer_norm_backward(const LayerNormTrace<T>& trace, const Matrix<T>& grad_out);

template <class T>
struct TanhTrace {
  Matrix<T> output;
};
template <class T>
std::pair<Matrix<T>, TanhTrace<T>> tanh_forward(const Matrix<T>& x);
template <class T>
Matrix<T> tanh_backward(const TanhTrace<T>& trace, const Matrix<T>& grad_out);

// Row-wise softmax with per-row max subtraction.
template <class T>
Matrix<T> softmax_rows(const Matrix<T>& x);
// Gradient w.r.t. the softmax input, given the softmax output.
template <class T>
Matrix<T> softmax_rows_backward(const Matrix<T>& output, const Matrix<T>& grad_out);

template <class T>
struct AttentionTrace {
  Matrix<T> query;
  Matrix<T> key;
  Matrix<T> value;
  Matrix<T> weights;  // softmax(Q K^T * scale), n x k
  double scale = 1.0;
};
template <class T>
struct AttentionGrads {
  Matrix<T> query;
  Matrix<T> key;
  Matrix<T> value;
};
// G = softmax(Q K^T / sqrt(d)) V with d = Q.cols(), unless scale > 0 is given.
template <class T>
std::pair<Matrix<T>, AttentionTrace<T>> attention_forward(const Matrix<T>& query, const Matrix<T>& key,
                                                          const Matrix<T>& value, double scale = 0.0);
template <class T>
AttentionGrads<T> attention_backward(const AttentionTrace<T>& trace, const Matrix<T>& grad_out);

template <class T>
struct LossResult {
  double loss = 0.0;
  Matrix<T> grad;  // d loss / d prediction
  std::size_t counted_rows = 0;
};

// Mean over selected rows of the squared L2 row error. `row_mask` empty means
// every row counts. No selected rows gives loss 0 and a zero gradient.
template <class T>
LossResult<T> squared_error_loss(const Matrix<T>& prediction, const Matrix<T>& target,
                                 const std::vector<std::uint8_t>& row_mask = {});

inline constexpr double kProbabilityClamp = 1e-7;

// Binary cross-entropy averaged over selected rows and all channels.
template <class T>
LossResult<T> binary_cross_entropy(const Matrix<T>& probability, const Matrix<T>& target,
                                   const std::vector<std::uint8_t>& row_mask = {});

template <class T>
struct Param {
  Matrix<T> value;
  Matrix<T> grad;
  Matrix<T> m;
  Matrix<T> v;
};

// Named parameters with gradients and adaptive-moment state. Iteration order
// is by name, which fixes checkpoint layout and hashing.
template <class T>
class ParamStore {
 public:
  Param<T>& add(const std::string& name, Matrix<T> init);
  bool contains(const std::string& name) const { return params_.contains(name); }
  Param<T>& at(const std::string& name);
  const Param<T>& at(const std::string& name) const;
  const Matrix<T>& value(const std::string& name) const { return at(name).value; }
  Matrix<T>& grad(const std::string& name) { return at(name).grad; }

  // Adds `delta` into the named gradient, checking shapes.
  void accumulate(const std::string& name, const Matrix<T>& delta);

  void zero_grad(std::string_view prefix = {});
  std::vector<std::string> names(std::string_view prefix = {}) const;
  std::size_t size() const { return params_.size(); }
  std::size_t scalar_count(std::string_view prefix = {}) const;

  // FNV-1a over names, shapes and value bytes of matching parameters.
  std::uint64_t hash(std::string_view prefix = {}) const;

  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  // Copies values into another precision; gradients and moments reset.
  template <class U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& [name, p] : params_) out.add(name, p.value.template cast<U>());
    return out;
  }

 private:
  std::map<std::string, Param<T>, std::less<>> params_;
};

struct AdamConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Bias-corrected adaptive-moment update on every parameter whose name starts
// with `prefix`, then zeroes those gradients. A non-finite gradient aborts the
// whole step before anything is modified. `step` is 1-based.
template <class T>
void adam_step(ParamStore<T>& store, const AdamConfig& config, std::int64_t step,
               std::string_view prefix = {});

// Uniform(-bound, bound) with bound = scale * sqrt(6 / fan_in).
template <class T>
Matrix<T> kaiming_uniform(Eigen::Index rows, Eigen::Index cols, Rng& rng, double scale = 1.0);

// Gathers the listed rows of `x`.
template <class T>
Matrix<T> gather_rows(const Matrix<T>& x, const std::vector<std::int32_t>& rows);
// out.row(rows[i]) += x.row(i)
template <class T>
void scatter_add_rows(Matrix<T>& out, const Matrix<T>& x, const std::vector<std::int32_t>& rows);

}  // namespace meshclick
