#include "shno/complex_ops.hpp"

#include <stdexcept>

namespace shno::ad {

CTensor::CTensor(Tensor r, Tensor i) : re(std::move(r)), im(std::move(i)) {
  if (re.shape() != im.shape())
    throw std::invalid_argument("complex tensor: real part " + shape_str(re.shape()) + " vs imaginary part " +
                                shape_str(im.shape()));
}

CTensor CTensor::zeros(const Shape& s, bool requires_grad) {
  return {Tensor::zeros(s, requires_grad), Tensor::zeros(s, requires_grad)};
}

CTensor CTensor::randn(const Shape& s, double stddev, Rng& rng, bool requires_grad) {
  Tensor r = Tensor::randn(s, stddev, rng, requires_grad);
  Tensor i = Tensor::randn(s, stddev, rng, requires_grad);
  return {r, i};
}

CTensor cadd(const CTensor& a, const CTensor& b) { return {add(a.re, b.re), add(a.im, b.im)}; }
CTensor csub(const CTensor& a, const CTensor& b) { return {sub(a.re, b.re), sub(a.im, b.im)}; }

CTensor cmul(const CTensor& a, const CTensor& b) {
  return {sub(mul(a.re, b.re), mul(a.im, b.im)), add(mul(a.re, b.im), mul(a.im, b.re))};
}

CTensor cmul_real(const CTensor& a, const Tensor& r) { return {mul(a.re, r), mul(a.im, r)}; }
CTensor cscale(const CTensor& a, double s) { return {scale(a.re, s), scale(a.im, s)}; }

CTensor cmatmul(const CTensor& a, const CTensor& b, bool conj_transpose_b) {
  if (!conj_transpose_b)
    return {sub(matmul(a.re, b.re), matmul(a.im, b.im)), add(matmul(a.re, b.im), matmul(a.im, b.re))};
  // (ar + i ai)(br^T - i bi^T)
  return {add(matmul(a.re, b.re, false, true), matmul(a.im, b.im, false, true)),
          sub(matmul(a.im, b.re, false, true), matmul(a.re, b.im, false, true))};
}

CTensor cmatmul_real(const CTensor& a, const Tensor& r) { return {matmul(a.re, r), matmul(a.im, r)}; }

CTensor conj_transpose(const CTensor& a) { return {transpose(a.re), neg(transpose(a.im))}; }

CTensor csoftmax(const CTensor& a) { return {softmax(a.re), softmax(a.im)}; }
CTensor cgelu(const CTensor& a) { return {gelu(a.re), gelu(a.im)}; }
CTensor csmu(const CTensor& a, const Tensor& mu) { return {smu(a.re, mu), smu(a.im, mu)}; }
CTensor ctril(const CTensor& a) { return {tril_mask(a.re), tril_mask(a.im)}; }
CTensor cdiag_embed(const CTensor& v) { return {diag_embed(v.re), diag_embed(v.im)}; }

CTensor csum_axis(const CTensor& a, std::size_t axis, bool keepdim) {
  return {sum_axis(a.re, axis, keepdim), sum_axis(a.im, axis, keepdim)};
}

CTensor cconcat(const std::vector<CTensor>& xs, std::size_t axis) {
  std::vector<Tensor> re, im;
  for (const auto& x : xs) {
    re.push_back(x.re);
    im.push_back(x.im);
  }
  return {concat(re, axis), concat(im, axis)};
}

CTensor cslice(const CTensor& a, std::size_t axis, std::size_t start, std::size_t length) {
  return {slice(a.re, axis, start, length), slice(a.im, axis, start, length)};
}

Tensor cabs2_sum(const CTensor& a) { return add(sum(mul(a.re, a.re)), sum(mul(a.im, a.im))); }

Tensor grouped_linear(const Tensor& x, const Tensor& w, const std::vector<int>& group) {
  if (x.rank() != 2 || w.rank() != 3 || w.dim(1) != x.dim(1) || group.size() != x.dim(0))
    throw std::invalid_argument("grouped_linear: incompatible shapes " + shape_str(x.shape()) + " and " +
                                shape_str(w.shape()) + " with " + std::to_string(group.size()) + " group labels");
  const std::size_t n = x.dim(0), ci = x.dim(1), co = w.dim(2), ng = w.dim(0);
  for (int g : group)
    if (g < 0 || static_cast<std::size_t>(g) >= ng)
      throw std::invalid_argument("grouped_linear: group " + std::to_string(g) + " outside [0, " +
                                  std::to_string(ng) + ")");
  std::vector<double> y(n * co, 0.0);
  const auto xv = x.data();
  const auto wv = w.data();
  for (std::size_t k = 0; k < n; ++k) {
    const double* wk = wv.data() + static_cast<std::size_t>(group[k]) * ci * co;
    double* yk = y.data() + k * co;
    for (std::size_t i = 0; i < ci; ++i) {
      const double xi = xv[k * ci + i];
      for (std::size_t j = 0; j < co; ++j) yk[j] += xi * wk[i * co + j];
    }
  }
  return make_result({n, co}, std::move(y), {x, w},
                     [group, n, ci, co](const Record& rec, std::span<const double> g, std::span<double* const> gin) {
                       const auto xv = rec.inputs[0].data();
                       const auto wv = rec.inputs[1].data();
                       for (std::size_t k = 0; k < n; ++k) {
                         const std::size_t off = static_cast<std::size_t>(group[k]) * ci * co;
                         const double* gk = g.data() + k * co;
                         for (std::size_t i = 0; i < ci; ++i) {
                           if (gin[0]) {
                             double s = 0.0;
                             for (std::size_t j = 0; j < co; ++j) s += gk[j] * wv[off + i * co + j];
                             gin[0][k * ci + i] += s;
                           }
                           if (gin[1]) {
                             const double xi = xv[k * ci + i];
                             for (std::size_t j = 0; j < co; ++j) gin[1][off + i * co + j] += xi * gk[j];
                           }
                         }
                       }
                     });
}

CTensor cgrouped_linear(const CTensor& x, const CTensor& w, const std::vector<int>& group) {
  return {sub(grouped_linear(x.re, w.re, group), grouped_linear(x.im, w.im, group)),
          add(grouped_linear(x.re, w.im, group), grouped_linear(x.im, w.re, group))};
}

CTensor sht_analysis(const sht::ShtPlan& plan, const Tensor& grid) {
  if (grid.rank() != 2 || grid.dim(0) != plan.num_points())
    throw std::invalid_argument("sht_analysis: expected [" + std::to_string(plan.num_points()) + ", C], got " +
                                shape_str(grid.shape()));
  const std::size_t c = grid.dim(1), nm = plan.num_modes();
  std::vector<double> both(2 * nm * c);
  std::span<double> all(both);
  plan.forward(grid.data(), c, all.first(nm * c), all.subspan(nm * c));
  const sht::ShtPlan* p = &plan;
  Tensor packed = make_result({2, nm, c}, std::move(both), {grid},
                              [p, c, nm](const Record&, std::span<const double> g, std::span<double* const> gin) {
                                std::vector<double> tmp(p->num_points() * c);
                                p->forward_adjoint(g.first(nm * c), g.subspan(nm * c), c, tmp);
                                for (std::size_t i = 0; i < tmp.size(); ++i) gin[0][i] += tmp[i];
                              });
  return {reshape(slice(packed, 0, 0, 1), {nm, c}), reshape(slice(packed, 0, 1, 1), {nm, c})};
}

Tensor sht_synthesis(const sht::ShtPlan& plan, const CTensor& coeffs) {
  if (coeffs.re.rank() != 2 || coeffs.dim(0) != plan.num_modes())
    throw std::invalid_argument("sht_synthesis: expected [" + std::to_string(plan.num_modes()) + ", C], got " +
                                shape_str(coeffs.shape()));
  const std::size_t c = coeffs.dim(1), np = plan.num_points(), nm = plan.num_modes();
  std::vector<double> y(np * c);
  plan.inverse(coeffs.re.data(), coeffs.im.data(), c, y);
  const sht::ShtPlan* p = &plan;
  return make_result({np, c}, std::move(y), {coeffs.re, coeffs.im},
                     [p, c, nm](const Record&, std::span<const double> g, std::span<double* const> gin) {
                       std::vector<double> re(nm * c), im(nm * c);
                       p->inverse_adjoint(g, c, re, im);
                       if (gin[0])
                         for (std::size_t i = 0; i < re.size(); ++i) gin[0][i] += re[i];
                       if (gin[1])
                         for (std::size_t i = 0; i < im.size(); ++i) gin[1][i] += im[i];
                     });
}

}  // namespace shno::ad
