#include "shno/autodiff.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "shno/kernels.hpp"

namespace shno::ad {

namespace {

std::atomic<std::uint64_t> next_id{1};
thread_local Tape* current_tape = nullptr;

}  // namespace

std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad)
    : node_(std::make_shared<Node>()) {
  if (numel(shape) != values.size())
    throw std::invalid_argument("tensor: shape " + shape_str(shape) + " does not match " +
                                std::to_string(values.size()) + " values");
  node_->shape = std::move(shape);
  node_->value = std::move(values);
  node_->requires_grad = requires_grad;
  node_->id = next_id.fetch_add(1, std::memory_order_relaxed);
}

Tensor Tensor::zeros(const Shape& s, bool requires_grad) {
  return Tensor(s, std::vector<double>(numel(s), 0.0), requires_grad);
}

Tensor Tensor::full(const Shape& s, double v, bool requires_grad) {
  return Tensor(s, std::vector<double>(numel(s), v), requires_grad);
}

Tensor Tensor::scalar(double v) { return Tensor({1}, {v}); }

Tensor Tensor::randn(const Shape& s, double stddev, Rng& rng, bool requires_grad) {
  std::vector<double> v(numel(s));
  for (double& x : v) x = rng.normal(0.0, stddev);
  return Tensor(s, std::move(v), requires_grad);
}

double Tensor::item() const {
  if (size() != 1) throw std::invalid_argument("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
  return node_->value[0];
}

Tensor Tensor::detach() const { return Tensor(shape(), values(), false); }

void Tape::record(std::vector<Tensor> inputs, const Tensor& output, BackwardFn fn) {
  records_.push_back({std::move(inputs), output, std::move(fn)});
}

Tape* active_tape() { return current_tape; }

TapeGuard::TapeGuard(Tape& tape) : previous_(current_tape) { current_tape = &tape; }
TapeGuard::~TapeGuard() { current_tape = previous_; }

NoGradGuard::NoGradGuard() : previous_(current_tape) { current_tape = nullptr; }
NoGradGuard::~NoGradGuard() { current_tape = previous_; }

Tensor Gradients::get(const Tensor& t) const {
  auto it = grads_.find(t.id());
  if (it == grads_.end()) return Tensor::zeros(t.shape());
  return Tensor(t.shape(), it->second);
}

const std::vector<double>* Gradients::find(const Tensor& t) const {
  auto it = grads_.find(t.id());
  return it == grads_.end() ? nullptr : &it->second;
}

Gradients backward(const Tape& tape, const Tensor& loss) {
  if (loss.size() != 1)
    throw std::invalid_argument("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
  Gradients out;
  auto& g = out.raw();
  if (!loss.requires_grad()) return out;
  g[loss.id()] = {1.0};
  const auto& recs = tape.records();
  std::vector<double*> gin;
  for (auto it = recs.rbegin(); it != recs.rend(); ++it) {
    const Record& rec = *it;
    auto found = g.find(rec.output.id());
    if (found == g.end()) continue;
    const std::vector<double> gout = std::move(found->second);
    g.erase(found);
    gin.assign(rec.inputs.size(), nullptr);
    for (std::size_t k = 0; k < rec.inputs.size(); ++k) {
      const Tensor& in = rec.inputs[k];
      if (!in.requires_grad()) continue;
      auto& buf = g[in.id()];
      if (buf.empty()) buf.assign(in.size(), 0.0);
      gin[k] = buf.data();
    }
    rec.backward(rec, gout, gin);
  }
  return out;
}

Tensor make_result(Shape shape, std::vector<double> values, std::vector<Tensor> inputs, BackwardFn fn) {
  Tape* tape = current_tape;
  const bool track = tape != nullptr &&
                     std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
  Tensor out(std::move(shape), std::move(values), track);
  if (track) tape->record(std::move(inputs), out, std::move(fn));
  return out;
}

namespace {

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
  throw std::invalid_argument(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

struct Broadcast {
  Shape out;
  std::vector<std::size_t> sa, sb;
  bool same = false;
};

Broadcast broadcast(const Shape& a, const Shape& b, const char* op) {
  Broadcast bc;
  if (a == b) {
    bc.out = a;
    bc.same = true;
    return bc;
  }
  const std::size_t r = std::max(a.size(), b.size());
  Shape pa(r, 1), pb(r, 1);
  std::copy(a.begin(), a.end(), pa.begin() + static_cast<std::ptrdiff_t>(r - a.size()));
  std::copy(b.begin(), b.end(), pb.begin() + static_cast<std::ptrdiff_t>(r - b.size()));
  bc.out.resize(r);
  for (std::size_t d = 0; d < r; ++d) {
    if (pa[d] != pb[d] && pa[d] != 1 && pb[d] != 1) shape_error(op, a, b);
    bc.out[d] = std::max(pa[d], pb[d]);
  }
  bc.sa.assign(r, 0);
  bc.sb.assign(r, 0);
  std::size_t stride_a = 1, stride_b = 1;
  for (std::size_t d = r; d-- > 0;) {
    bc.sa[d] = pa[d] == 1 ? 0 : stride_a;
    bc.sb[d] = pb[d] == 1 ? 0 : stride_b;
    stride_a *= pa[d];
    stride_b *= pb[d];
  }
  return bc;
}

template <class F>
void for_each_pair(const Broadcast& bc, F&& f) {
  const std::size_t n = numel(bc.out);
  if (bc.same) {
    for (std::size_t i = 0; i < n; ++i) f(i, i, i);
    return;
  }
  // Odometer over every axis but the last; the last axis is a plain loop
  // whose operand strides are each 0 or 1.
  const std::size_t r = bc.out.size();
  const std::size_t len = bc.out[r - 1];
  const std::size_t la = bc.sa[r - 1], lb = bc.sb[r - 1];
  std::vector<std::size_t> idx(r, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t i = 0; i < n; i += len) {
    if (la == 1 && lb == 1) {
      for (std::size_t j = 0; j < len; ++j) f(i + j, ia + j, ib + j);
    } else if (la == 1) {
      for (std::size_t j = 0; j < len; ++j) f(i + j, ia + j, ib);
    } else if (lb == 1) {
      for (std::size_t j = 0; j < len; ++j) f(i + j, ia, ib + j);
    } else {
      for (std::size_t j = 0; j < len; ++j) f(i + j, ia, ib);
    }
    for (std::size_t d = r - 1; d-- > 0;) {
      ++idx[d];
      ia += bc.sa[d];
      ib += bc.sb[d];
      if (idx[d] < bc.out[d]) break;
      ia -= bc.sa[d] * bc.out[d];
      ib -= bc.sb[d] * bc.out[d];
      idx[d] = 0;
    }
  }
}

// fwd(a, b) -> y; da(a, b) and db(a, b) are the partial derivatives.
template <class Fwd, class Da, class Db>
Tensor binary(const Tensor& a, const Tensor& b, const char* name, Fwd fwd, Da da, Db db) {
  Broadcast bc = broadcast(a.shape(), b.shape(), name);
  std::vector<double> y(numel(bc.out));
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for_each_pair(bc, [&](std::size_t i, std::size_t ia, std::size_t ib) { y[i] = fwd(pa[ia], pb[ib]); });
  Shape out_shape = bc.out;
  return make_result(std::move(out_shape), std::move(y), {a, b},
                     [bc = std::move(bc), da, db](const Record& rec, std::span<const double> g,
                                                  std::span<double* const> gin) {
                       const double* xa = rec.inputs[0].data().data();
                       const double* xb = rec.inputs[1].data().data();
                       double* ga = gin[0];
                       double* gb = gin[1];
                       if (ga)
                         for_each_pair(bc, [&](std::size_t i, std::size_t ia, std::size_t ib) {
                           ga[ia] += g[i] * da(xa[ia], xb[ib]);
                         });
                       if (gb)
                         for_each_pair(bc, [&](std::size_t i, std::size_t ia, std::size_t ib) {
                           gb[ib] += g[i] * db(xa[ia], xb[ib]);
                         });
                     });
}

// deriv(x, y) = dy/dx
template <class Fwd, class Deriv>
Tensor unary(const Tensor& x, Fwd fwd, Deriv deriv) {
  std::vector<double> y(x.size());
  const auto xv = x.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = fwd(xv[i]);
  return make_result(x.shape(), std::move(y), {x},
                     [deriv](const Record& rec, std::span<const double> g, std::span<double* const> gin) {
                       const auto xv = rec.inputs[0].data();
                       const auto yv = rec.output.data();
                       double* gx = gin[0];
                       for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * deriv(xv[i], yv[i]);
                     });
}

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "div", [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

Tensor neg(const Tensor& x) {
  return unary(x, [](double v) { return -v; }, [](double, double) { return -1.0; });
}

Tensor scale(const Tensor& x, double s) {
  return unary(x, [s](double v) { return s * v; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& x, double s) {
  return unary(x, [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}

Tensor exp(const Tensor& x) {
  return unary(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor erf(const Tensor& x) {
  return unary(
      x, [](double v) { return std::erf(v); },
      [](double v, double) { return 2.0 / std::sqrt(std::numbers::pi) * std::exp(-v * v); });
}

Tensor sqrt(const Tensor& x) {
  return unary(x, [](double v) { return std::sqrt(v); }, [](double, double y) { return 0.5 / y; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); }, [](double, double y) { return y * (1.0 - y); });
}

Tensor gelu(const Tensor& x) {
  return unary(
      x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); },
      [](double v, double y) {
        // Phi(v) = y / v reuses the forward erf, the costly part of the op.
        const double phi = std::abs(v) > 1e-150 ? y / v : 0.5;
        return phi + v * kInvSqrt2Pi * std::exp(-0.5 * v * v);
      });
}

Tensor smu(const Tensor& x, const Tensor& mu, double alpha) {
  if (mu.size() != 1) throw std::invalid_argument("smu: mu must have one element, got " + shape_str(mu.shape()));
  const double m = mu.item();
  const double k = 1.0 - alpha;
  std::vector<double> y(x.size());
  const auto xv = x.data();
  for (std::size_t i = 0; i < y.size(); ++i)
    y[i] = 0.5 * ((1.0 + alpha) * xv[i] + k * xv[i] * std::erf(m * k * xv[i]));
  return make_result(x.shape(), std::move(y), {x, mu},
                     [alpha, k](const Record& rec, std::span<const double> g, std::span<double* const> gin) {
                       const auto xv = rec.inputs[0].data();
                       const double m = rec.inputs[1].item();
                       const double c = 2.0 / std::sqrt(std::numbers::pi);
                       double gmu = 0.0;
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         const double z = m * k * xv[i];
                         const double bump = c * std::exp(-z * z);
                         if (gin[0]) gin[0][i] += g[i] * 0.5 * ((1.0 + alpha) + k * (std::erf(z) + z * bump));
                         gmu += g[i] * 0.5 * k * xv[i] * bump * k * xv[i];
                       }
                       if (gin[1]) gin[1][0] += gmu;
                     });
}

Tensor reshape(const Tensor& x, const Shape& s) {
  if (numel(s) != x.size()) shape_error("reshape", x.shape(), s);
  return make_result(s, x.values(), {x}, [](const Record&, std::span<const double> g, std::span<double* const> gin) {
    for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i];
  });
}

Tensor transpose(const Tensor& x) {
  if (x.rank() != 2) throw std::invalid_argument("transpose: expected a matrix, got " + shape_str(x.shape()));
  const std::size_t r = x.dim(0), c = x.dim(1);
  std::vector<double> y(x.size());
  kernels::transpose(x.data(), y, r, c);
  return make_result({c, r}, std::move(y), {x},
                     [r, c](const Record&, std::span<const double> g, std::span<double* const> gin) {
                       for (std::size_t i = 0; i < r; ++i)
                         for (std::size_t j = 0; j < c; ++j) gin[0][i * c + j] += g[j * r + i];
                     });
}

Tensor concat(const std::vector<Tensor>& xs, std::size_t axis) {
  if (xs.empty()) throw std::invalid_argument("concat: no inputs");
  const Shape& s0 = xs[0].shape();
  if (axis >= s0.size()) throw std::invalid_argument("concat: axis out of range for " + shape_str(s0));
  Shape out = s0;
  out[axis] = 0;
  for (const auto& t : xs) {
    if (t.rank() != s0.size()) shape_error("concat", s0, t.shape());
    for (std::size_t d = 0; d < s0.size(); ++d)
      if (d != axis && t.dim(d) != s0[d]) shape_error("concat", s0, t.shape());
    out[axis] += t.dim(axis);
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= s0[d];
  for (std::size_t d = axis + 1; d < s0.size(); ++d) inner *= s0[d];
  const std::size_t row = out[axis] * inner;
  std::vector<double> y(numel(out));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& t : xs) {
    offsets.push_back(off);
    const std::size_t len = t.dim(axis) * inner;
    const auto v = t.data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy(v.begin() + static_cast<std::ptrdiff_t>(o * len), v.begin() + static_cast<std::ptrdiff_t>((o + 1) * len),
                y.begin() + static_cast<std::ptrdiff_t>(o * row + off));
    off += len;
  }
  return make_result(std::move(out), std::move(y), xs,
                     [offsets, outer, inner, row, axis](const Record& rec, std::span<const double> g,
                                                        std::span<double* const> gin) {
                       for (std::size_t k = 0; k < rec.inputs.size(); ++k) {
                         if (!gin[k]) continue;
                         const std::size_t len = rec.inputs[k].dim(axis) * inner;
                         for (std::size_t o = 0; o < outer; ++o)
                           for (std::size_t i = 0; i < len; ++i) gin[k][o * len + i] += g[o * row + offsets[k] + i];
                       }
                     });
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
  if (axis >= x.rank() || start + length > x.dim(axis))
    throw std::invalid_argument("slice: [" + std::to_string(start) + ", " + std::to_string(start + length) +
                                ") along axis " + std::to_string(axis) + " is outside " + shape_str(x.shape()));
  Shape out = x.shape();
  out[axis] = length;
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= x.dim(d);
  for (std::size_t d = axis + 1; d < x.rank(); ++d) inner *= x.dim(d);
  const std::size_t row = x.dim(axis) * inner;
  const std::size_t len = length * inner;
  std::vector<double> y(numel(out));
  const auto v = x.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < len; ++i) y[o * len + i] = v[o * row + start * inner + i];
  return make_result(std::move(out), std::move(y), {x},
                     [outer, inner, row, len, start](const Record&, std::span<const double> g,
                                                     std::span<double* const> gin) {
                       for (std::size_t o = 0; o < outer; ++o)
                         for (std::size_t i = 0; i < len; ++i) gin[0][o * row + start * inner + i] += g[o * len + i];
                     });
}

Tensor tril_mask(const Tensor& x) {
  if (x.rank() != 2) throw std::invalid_argument("tril_mask: expected a matrix, got " + shape_str(x.shape()));
  const std::size_t r = x.dim(0), c = x.dim(1);
  std::vector<double> y(x.values());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = i + 1; j < c; ++j) y[i * c + j] = 0.0;
  return make_result(x.shape(), std::move(y), {x},
                     [r, c](const Record&, std::span<const double> g, std::span<double* const> gin) {
                       for (std::size_t i = 0; i < r; ++i)
                         for (std::size_t j = 0; j <= std::min(i, c - 1) && j < c; ++j) gin[0][i * c + j] += g[i * c + j];
                     });
}

Tensor diag_embed(const Tensor& v) {
  if (!(v.rank() == 1 || (v.rank() == 2 && v.dim(1) == 1)))
    throw std::invalid_argument("diag_embed: expected a vector, got " + shape_str(v.shape()));
  const std::size_t n = v.dim(0);
  std::vector<double> y(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) y[i * n + i] = v.at(i);
  return make_result({n, n}, std::move(y), {v}, [n](const Record&, std::span<const double> g, std::span<double* const> gin) {
    for (std::size_t i = 0; i < n; ++i) gin[0][i] += g[i * n + i];
  });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return make_result({1}, {s}, {x}, [](const Record& rec, std::span<const double> g, std::span<double* const> gin) {
    const std::size_t n = rec.inputs[0].size();
    for (std::size_t i = 0; i < n; ++i) gin[0][i] += g[0];
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

Tensor sum_axis(const Tensor& x, std::size_t axis, bool keepdim) {
  if (axis >= x.rank()) throw std::invalid_argument("sum_axis: axis out of range for " + shape_str(x.shape()));
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= x.dim(d);
  for (std::size_t d = axis + 1; d < x.rank(); ++d) inner *= x.dim(d);
  const std::size_t len = x.dim(axis);
  Shape out = x.shape();
  if (keepdim) {
    out[axis] = 1;
  } else {
    out.erase(out.begin() + static_cast<std::ptrdiff_t>(axis));
    if (out.empty()) out = {1};
  }
  std::vector<double> y(outer * inner, 0.0);
  const auto v = x.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t k = 0; k < len; ++k)
      for (std::size_t i = 0; i < inner; ++i) y[o * inner + i] += v[(o * len + k) * inner + i];
  return make_result(std::move(out), std::move(y), {x},
                     [outer, inner, len](const Record&, std::span<const double> g, std::span<double* const> gin) {
                       for (std::size_t o = 0; o < outer; ++o)
                         for (std::size_t k = 0; k < len; ++k)
                           for (std::size_t i = 0; i < inner; ++i) gin[0][(o * len + k) * inner + i] += g[o * inner + i];
                     });
}

Tensor mean_axis(const Tensor& x, std::size_t axis, bool keepdim) {
  if (axis >= x.rank()) throw std::invalid_argument("mean_axis: axis out of range for " + shape_str(x.shape()));
  return scale(sum_axis(x, axis, keepdim), 1.0 / static_cast<double>(x.dim(axis)));
}

Tensor matmul(const Tensor& a, const Tensor& b, bool ta, bool tb) {
  if (a.rank() != 2 || b.rank() != 2) shape_error("matmul", a.shape(), b.shape());
  const std::size_t n = ta ? a.dim(1) : a.dim(0);
  const std::size_t k = ta ? a.dim(0) : a.dim(1);
  const std::size_t kb = tb ? b.dim(1) : b.dim(0);
  const std::size_t m = tb ? b.dim(0) : b.dim(1);
  if (k != kb) shape_error("matmul", a.shape(), b.shape());
  std::vector<double> y(n * m);
  kernels::gemm(a.data(), ta, b.data(), tb, y, n, k, m);
  return make_result({n, m}, std::move(y), {a, b},
                     [n, k, m, ta, tb](const Record& rec, std::span<const double> g, std::span<double* const> gin) {
                       const auto av = rec.inputs[0].data();
                       const auto bv = rec.inputs[1].data();
                       // d op(A) = G op(B)^T and d op(B) = op(A)^T G, written
                       // straight into the stored layout of each operand.
                       if (gin[0]) {
                         const std::span<double> ga(gin[0], n * k);
                         if (!ta)
                           kernels::gemm(g, false, bv, !tb, ga, n, m, k, true);
                         else
                           kernels::gemm(bv, tb, g, true, ga, k, m, n, true);
                       }
                       if (gin[1]) {
                         const std::span<double> gb(gin[1], k * m);
                         if (!tb)
                           kernels::gemm(av, !ta, g, false, gb, k, n, m, true);
                         else
                           kernels::gemm(g, true, av, ta, gb, m, n, k, true);
                       }
                     });
}

Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(0)) shape_error("affine", x.shape(), w.shape());
  const std::size_t n = x.dim(0), k = x.dim(1), m = w.dim(1);
  if (b.size() != m) shape_error("affine", w.shape(), b.shape());
  std::vector<double> y(n * m);
  const auto bv = b.data();
  for (std::size_t i = 0; i < n; ++i) std::copy(bv.begin(), bv.end(), y.begin() + static_cast<std::ptrdiff_t>(i * m));
  kernels::gemm(x.data(), false, w.data(), false, y, n, k, m, true);
  return make_result({n, m}, std::move(y), {x, w, b},
                     [n, k, m](const Record& rec, std::span<const double> g, std::span<double* const> gin) {
                       if (gin[0]) kernels::gemm(g, false, rec.inputs[1].data(), true, {gin[0], n * k}, n, m, k, true);
                       if (gin[1]) kernels::gemm(rec.inputs[0].data(), true, g, false, {gin[1], k * m}, k, n, m, true);
                       if (gin[2])
                         for (std::size_t i = 0; i < n; ++i)
                           for (std::size_t j = 0; j < m; ++j) gin[2][j] += g[i * m + j];
                     });
}

Tensor softmax(const Tensor& x) {
  if (x.rank() == 0 || x.size() == 0) throw std::invalid_argument("softmax: empty tensor");
  const std::size_t cols = x.shape().back();
  const std::size_t rows = x.size() / cols;
  std::vector<double> y(x.size());
  const auto v = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* src = v.data() + r * cols;
    double* dst = y.data() + r * cols;
    const double mx = *std::max_element(src, src + cols);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += (dst[c] = std::exp(src[c] - mx));
    for (std::size_t c = 0; c < cols; ++c) dst[c] /= z;
  }
  return make_result(x.shape(), std::move(y), {x},
                     [rows, cols](const Record& rec, std::span<const double> g, std::span<double* const> gin) {
                       const auto y = rec.output.data();
                       for (std::size_t r = 0; r < rows; ++r) {
                         double dot = 0.0;
                         for (std::size_t c = 0; c < cols; ++c) dot += g[r * cols + c] * y[r * cols + c];
                         for (std::size_t c = 0; c < cols; ++c)
                           gin[0][r * cols + c] += y[r * cols + c] * (g[r * cols + c] - dot);
                       }
                     });
}

Tensor instance_norm(const Tensor& x, double eps) {
  if (x.rank() != 2) throw std::invalid_argument("instance_norm: expected [P, C], got " + shape_str(x.shape()));
  const std::size_t p = x.dim(0), c = x.dim(1);
  const auto v = x.data();
  std::vector<double> mu(c, 0.0), inv_sd(c, 0.0), y(x.size());
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j < c; ++j) mu[j] += v[i * c + j];
  for (double& m : mu) m /= static_cast<double>(p);
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      const double d = v[i * c + j] - mu[j];
      inv_sd[j] += d * d;
    }
  for (double& s : inv_sd) s = 1.0 / std::sqrt(s / static_cast<double>(p) + eps);
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j < c; ++j) y[i * c + j] = (v[i * c + j] - mu[j]) * inv_sd[j];
  return make_result(x.shape(), std::move(y), {x},
                     [p, c, inv_sd](const Record& rec, std::span<const double> g, std::span<double* const> gin) {
                       const auto y = rec.output.data();
                       std::vector<double> gm(c, 0.0), gy(c, 0.0);
                       for (std::size_t i = 0; i < p; ++i)
                         for (std::size_t j = 0; j < c; ++j) {
                           gm[j] += g[i * c + j];
                           gy[j] += g[i * c + j] * y[i * c + j];
                         }
                       const double inv_p = 1.0 / static_cast<double>(p);
                       for (std::size_t i = 0; i < p; ++i)
                         for (std::size_t j = 0; j < c; ++j)
                           gin[0][i * c + j] +=
                               inv_sd[j] * (g[i * c + j] - gm[j] * inv_p - y[i * c + j] * gy[j] * inv_p);
                     });
}

Tensor box_average(const Tensor& x, std::size_t nlat, std::size_t nlon, std::size_t width) {
  if (x.rank() != 2 || x.dim(0) != nlat * nlon)
    throw std::invalid_argument("box_average: expected [" + std::to_string(nlat * nlon) + ", C], got " +
                                shape_str(x.shape()));
  const std::size_t c = x.dim(1);
  std::vector<double> y(x.size());
  kernels::box_average(x.data(), y, nlat, nlon, c, width);
  return make_result(x.shape(), std::move(y), {x},
                     [nlat, nlon, c, width](const Record&, std::span<const double> g, std::span<double* const> gin) {
                       kernels::box_average_adjoint(g, std::span<double>(gin[0], g.size()), nlat, nlon, c, width);
                     });
}

Tensor depthwise_conv1d(const Tensor& x, const Tensor& w, bool periodic) {
  if (x.rank() != 2 || w.rank() != 2 || w.dim(1) != x.dim(1)) shape_error("depthwise_conv1d", x.shape(), w.shape());
  const std::size_t len = x.dim(0), c = x.dim(1), kw = w.dim(0);
  const auto half = static_cast<std::ptrdiff_t>(kw / 2);
  auto src_index = [len, periodic](std::ptrdiff_t i) {
    const auto n = static_cast<std::ptrdiff_t>(len);
    if (periodic) return static_cast<std::size_t>(((i % n) + n) % n);
    return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(i, 0, n - 1));
  };
  std::vector<double> y(x.size(), 0.0);
  const auto xv = x.data();
  const auto wv = w.data();
  for (std::size_t l = 0; l < len; ++l)
    for (std::size_t k = 0; k < kw; ++k) {
      const std::size_t s = src_index(static_cast<std::ptrdiff_t>(l + k) - half);
      for (std::size_t j = 0; j < c; ++j) y[l * c + j] += wv[k * c + j] * xv[s * c + j];
    }
  return make_result(x.shape(), std::move(y), {x, w},
                     [len, c, kw, half, src_index](const Record& rec, std::span<const double> g,
                                                  std::span<double* const> gin) {
                       const auto xv = rec.inputs[0].data();
                       const auto wv = rec.inputs[1].data();
                       for (std::size_t l = 0; l < len; ++l)
                         for (std::size_t k = 0; k < kw; ++k) {
                           const std::size_t s = src_index(static_cast<std::ptrdiff_t>(l + k) - half);
                           for (std::size_t j = 0; j < c; ++j) {
                             if (gin[0]) gin[0][s * c + j] += wv[k * c + j] * g[l * c + j];
                             if (gin[1]) gin[1][k * c + j] += xv[s * c + j] * g[l * c + j];
                           }
                         }
                     });
}

namespace {

double rel_error(double a, double b) { return std::abs(a - b) / std::max(1e-8, std::abs(a) + std::abs(b)); }

}  // namespace

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps) {
  Tensor xp(x.shape(), x.values(), true);
  Tape tape;
  Tensor y;
  {
    TapeGuard guard(tape);
    y = f(xp);
  }
  const auto grads = backward(tape, y);
  const Tensor analytic = grads.get(xp);
  tape.clear();
  NoGradGuard no_grad;
  double worst = 0.0;
  auto data = xp.mutable_data();
  for (std::size_t i = 0; i < data.size(); ++i) {
    const double orig = data[i];
    data[i] = orig + eps;
    const double fp = f(xp).item();
    data[i] = orig - eps;
    const double fm = f(xp).item();
    data[i] = orig;
    worst = std::max(worst, rel_error(analytic.at(i), (fp - fm) / (2.0 * eps)));
  }
  return worst;
}

GradCheckReport grad_check_params(const std::function<Tensor()>& f,
                                  const std::vector<std::pair<std::string, Tensor>>& params, double eps,
                                  std::size_t max_coords, std::uint64_t seed) {
  Tape tape;
  Tensor y;
  {
    TapeGuard guard(tape);
    y = f();
  }
  const auto grads = backward(tape, y);
  tape.clear();
  NoGradGuard no_grad;
  GradCheckReport report;
  Rng rng(seed, 0x67726164);
  for (auto [name, p] : params) {
    const Tensor analytic = grads.get(p);
    std::vector<std::size_t> coords(p.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (max_coords > 0 && coords.size() > max_coords) {
      std::shuffle(coords.begin(), coords.end(), rng.engine());
      coords.resize(max_coords);
      std::sort(coords.begin(), coords.end());
    }
    auto data = p.mutable_data();
    for (std::size_t i : coords) {
      const double orig = data[i];
      data[i] = orig + eps;
      const double fp = f().item();
      data[i] = orig - eps;
      const double fm = f().item();
      data[i] = orig;
      const double e = rel_error(analytic.at(i), (fp - fm) / (2.0 * eps));
      ++report.coordinates;
      if (report.worst.empty() || e > report.max_rel_error) {
        report.max_rel_error = e;
        report.worst = name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return report;
}

}  // namespace shno::ad
