#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "shno/rng.hpp"

// Define-by-run reverse-mode differentiation over dense double tensors.
//
// Operations record themselves on the calling thread's active Tape when one
// is installed (TapeGuard) and at least one input requires a gradient.
// backward() never writes into tensors: it returns a Gradients map, so
// several threads can run independent tapes over shared parameters and
// reduce the maps afterwards in a fixed order.
namespace shno::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& s);
std::string shape_str(const Shape& s);

struct Node {
  Shape shape;
  std::vector<double> value;
  bool requires_grad = false;
  std::uint64_t id = 0;
};

class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor zeros(const Shape& s, bool requires_grad = false);
  static Tensor full(const Shape& s, double v, bool requires_grad = false);
  static Tensor scalar(double v);
  static Tensor randn(const Shape& s, double stddev, Rng& rng, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t size() const { return node_->value.size(); }
  std::span<const double> data() const { return node_->value; }
  const std::vector<double>& values() const { return node_->value; }
  /// In-place access for optimisers and initialisers. Not taped.
  std::span<double> mutable_data() { return node_->value; }
  double item() const;
  double at(std::size_t i) const { return node_->value[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  std::uint64_t id() const { return node_->id; }

  /// Same values, new identity, no gradient tracking.
  Tensor detach() const;

 private:
  std::shared_ptr<Node> node_;
};

struct Record;
/// grad_in[k] is null when input k needs no gradient; rules accumulate.
using BackwardFn = std::function<void(const Record& rec, std::span<const double> grad_out,
                                      std::span<double* const> grad_in)>;

struct Record {
  std::vector<Tensor> inputs;
  Tensor output;
  BackwardFn backward;
};

class Tape {
 public:
  void record(std::vector<Tensor> inputs, const Tensor& output, BackwardFn fn);
  const std::vector<Record>& records() const { return records_; }
  std::size_t size() const { return records_.size(); }
  void clear() { records_.clear(); }

 private:
  std::vector<Record> records_;
};

/// Tape that ops on this thread currently record to, or null.
Tape* active_tape();

class TapeGuard {
 public:
  explicit TapeGuard(Tape& tape);
  ~TapeGuard();
  TapeGuard(const TapeGuard&) = delete;
  TapeGuard& operator=(const TapeGuard&) = delete;

 private:
  Tape* previous_;
};

/// Suspends recording on this thread.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  Tape* previous_;
};

class Gradients {
 public:
  bool has(const Tensor& t) const { return grads_.count(t.id()) != 0; }
  /// Gradient of t, or zeros of t's shape when t did not take part.
  Tensor get(const Tensor& t) const;
  const std::vector<double>* find(const Tensor& t) const;
  std::size_t size() const { return grads_.size(); }

  std::unordered_map<std::uint64_t, std::vector<double>>& raw() { return grads_; }

 private:
  std::unordered_map<std::uint64_t, std::vector<double>> grads_;
};

/// Builds an op result: records `fn` on the active tape when some input
/// requires a gradient. Used by ops defined outside this file.
Tensor make_result(Shape shape, std::vector<double> values, std::vector<Tensor> inputs, BackwardFn fn);

/// Reverse sweep from a scalar loss. Gradients of intermediate results are
/// dropped as soon as they have been propagated.
Gradients backward(const Tape& tape, const Tensor& loss);

// ---- elementwise, with numpy-style broadcasting for binary ops ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& x);
Tensor scale(const Tensor& x, double s);
Tensor add_scalar(const Tensor& x, double s);
Tensor exp(const Tensor& x);
Tensor erf(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor sigmoid(const Tensor& x);
/// Exact GELU, x * Phi(x).
Tensor gelu(const Tensor& x);
/// Smooth maximum unit, 0.5 [(1 + a) x + (1 - a) x erf(mu (1 - a) x)], mu a
/// one-element tensor.
Tensor smu(const Tensor& x, const Tensor& mu, double alpha = 0.25);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator-(const Tensor& x) { return neg(x); }

// ---- shape ----
Tensor reshape(const Tensor& x, const Shape& s);
/// 2-D transpose.
Tensor transpose(const Tensor& x);
Tensor concat(const std::vector<Tensor>& xs, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length);
/// Zero the strictly upper part of a matrix (entries with column > row).
Tensor tril_mask(const Tensor& x);
/// [N] (or [N,1]) -> N x N diagonal matrix.
Tensor diag_embed(const Tensor& v);

// ---- reductions ----
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum_axis(const Tensor& x, std::size_t axis, bool keepdim = true);
Tensor mean_axis(const Tensor& x, std::size_t axis, bool keepdim = true);

// ---- linear algebra and structured ops ----
/// op(a) * op(b) for 2-D tensors; op transposes when the flag is set.
Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_a = false, bool transpose_b = false);
/// x w + b for x [N, in], w [in, out], b [out], as one op.
Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b);
/// Softmax over the last axis.
Tensor softmax(const Tensor& x);
/// Per-column normalisation of a [P, C] tensor over its P rows (biased variance).
Tensor instance_norm(const Tensor& x, double eps = 1e-5);
/// s x s box average of a [nlat*nlon, C] field; longitude periodic, latitude clamped.
Tensor box_average(const Tensor& x, std::size_t nlat, std::size_t nlon, std::size_t width);
/// out[l, c] = sum_k w[k, c] x[l + k - K/2, c]; indices wrap when periodic,
/// otherwise clamp to the ends.
Tensor depthwise_conv1d(const Tensor& x, const Tensor& w, bool periodic);

// ---- gradient checking ----
/// Max over coordinates of |analytic - numeric| / max(1e-8, |analytic| + |numeric|),
/// numeric from central differences with step eps.
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps = 1e-6);

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
  std::string worst;  // "name[index]"
};

/// Same measure over named parameters of a closure. At most max_coords
/// coordinates per tensor are probed (chosen by seed) when max_coords > 0.
GradCheckReport grad_check_params(const std::function<Tensor()>& f,
                                  const std::vector<std::pair<std::string, Tensor>>& params,
                                  double eps = 1e-6, std::size_t max_coords = 0,
                                  std::uint64_t seed = 0);

}  // namespace shno::ad
