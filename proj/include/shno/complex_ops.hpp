#pragma once

#include <vector>

#include "shno/autodiff.hpp"
#include "shno/sht.hpp"

// Complex tensors as pairs of real tensors, so every complex op is a
// composition of taped real ops and differentiates with the real engine.
namespace shno::ad {

struct CTensor {
  Tensor re;
  Tensor im;

  CTensor() = default;
  CTensor(Tensor r, Tensor i);

  static CTensor zeros(const Shape& s, bool requires_grad = false);
  static CTensor randn(const Shape& s, double stddev, Rng& rng, bool requires_grad = false);

  const Shape& shape() const { return re.shape(); }
  std::size_t dim(std::size_t i) const { return re.dim(i); }
  std::size_t size() const { return re.size(); }
  bool defined() const { return re.defined(); }
};

CTensor cadd(const CTensor& a, const CTensor& b);
CTensor csub(const CTensor& a, const CTensor& b);
/// Elementwise complex product (broadcasting like mul).
CTensor cmul(const CTensor& a, const CTensor& b);
CTensor cmul_real(const CTensor& a, const Tensor& r);
CTensor cscale(const CTensor& a, double s);
/// a * b, or a * b^H when conj_transpose_b is set.
CTensor cmatmul(const CTensor& a, const CTensor& b, bool conj_transpose_b = false);
/// Real matrix applied to a complex one from the right: a * r.
CTensor cmatmul_real(const CTensor& a, const Tensor& r);
CTensor conj_transpose(const CTensor& a);
/// Softmax of the real and imaginary parts separately, over the last axis.
CTensor csoftmax(const CTensor& a);
CTensor cgelu(const CTensor& a);
CTensor csmu(const CTensor& a, const Tensor& mu);
CTensor ctril(const CTensor& a);
CTensor cdiag_embed(const CTensor& v);
CTensor csum_axis(const CTensor& a, std::size_t axis, bool keepdim = true);
CTensor cconcat(const std::vector<CTensor>& xs, std::size_t axis);
CTensor cslice(const CTensor& a, std::size_t axis, std::size_t start, std::size_t length);
/// Sum of |a|^2 over all entries.
Tensor cabs2_sum(const CTensor& a);

/// y[k] = x[k] * w[group[k]] with x [N, Cin], w [G, Cin, Cout].
Tensor grouped_linear(const Tensor& x, const Tensor& w, const std::vector<int>& group);
/// Complex version, four real products.
CTensor cgrouped_linear(const CTensor& x, const CTensor& w, const std::vector<int>& group);

/// Forward SHT of a channel-last grid tensor [nlat*nlon, C] to [modes, C].
/// The plan must outlive any tape this records on.
CTensor sht_analysis(const sht::ShtPlan& plan, const Tensor& grid);
/// Inverse SHT of [modes, C] back to [nlat*nlon, C].
Tensor sht_synthesis(const sht::ShtPlan& plan, const CTensor& coeffs);

}  // namespace shno::ad
