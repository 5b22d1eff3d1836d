#pragma once

#include <complex>
#include <string>
#include <utility>
#include <vector>

#include "shno/complex_ops.hpp"

// Attention over spectral tokens: one token per retained (n, m) mode, C
// complex channels per token. Tokens are rows of an [N, C] CTensor.
namespace shno::attn {

using ad::CTensor;
using ad::Tensor;
using NamedParams = std::vector<std::pair<std::string, Tensor>>;

/// Complex affine map x W + b, W [C_in, C_out], b [C_out] (b may be absent).
struct CLinear {
  CTensor w;
  CTensor b;

  static CLinear init(std::size_t in, std::size_t out, double stddev, Rng& rng, bool bias = true);
  CTensor operator()(const CTensor& x) const;
  void collect(const std::string& prefix, NamedParams& out) const;
};

struct SmhsaParams {
  std::size_t heads = 1;
  CLinear q, k, v, o;

  static SmhsaParams init(std::size_t channels, std::size_t heads, double stddev, Rng& rng);
  std::size_t channels() const { return q.w.dim(0); }
  NamedParams parameters(const std::string& prefix = "") const;
};

/// Multi-head attention with csoftmax(Q K^H / sqrt(d)) V per head, heads
/// concatenated and projected back to C.
CTensor smhsa(const CTensor& z, const SmhsaParams& p);

struct GrsaParams {
  std::size_t heads = 1;
  std::size_t registers = 0;
  CLinear y, v, q, p;
  // Per head: g(x) = (gelu(x G1 + c1)) G2 + c2, widths C -> d -> d.
  std::vector<CLinear> g1, g2;
  CTensor register_tokens;  // [R, C]
  Tensor alpha;             // [1], moving-average logit
  Tensor mu;                // [1], SMU sharpness

  static GrsaParams init(std::size_t channels, std::size_t heads, std::size_t registers, double stddev,
                         Rng& rng);
  std::size_t channels() const { return y.w.dim(0); }
  std::size_t head_dim() const { return channels() / heads; }
  NamedParams parameters(const std::string& prefix = "") const;
};

/// Per-head Laplacians handed from one layer to the next. Empty means zero.
struct LaplacianState {
  std::vector<CTensor> l;
  bool empty() const { return l.empty(); }
};

struct LaplacianParts {
  CTensor b;          // csoftmax(g(X')), [T, d]
  CTensor a;          // tril(B) tril(B)^H, [T, T], values only
  CTensor d_minus_a;  // diag(A 1) - A, values only
  CTensor l;          // sigmoid(alpha)(D - A) + (1 - sigmoid(alpha)) L_prev
};

/// Laplacian of one head from the extended tokens X' [T, C]. An undefined
/// l_prev stands for the zero matrix.
LaplacianParts parametric_laplacian(const CTensor& xprime, const CLinear& g1, const CLinear& g2,
                                    const Tensor& alpha, const CTensor& l_prev);

struct GrsaOutput {
  CTensor out;
  LaplacianState state;
};

/// Gated residual spectral attention:
///   Y = X W_Y + b_Y, X' = [X; registers],
///   Z_h = L_h smu(X' W_V + b_V)_h, Z' = Z (.) smu(X' W_Q + b_Q),
///   O = drop_registers(Z' W_P + b_P) + Y.
GrsaOutput grsa(const CTensor& x, const GrsaParams& p, const LaplacianState& prev);

struct LaplacianDiagnostics {
  double max_row_sum_abs = 0.0;
  double hermitian_gap = 0.0;
  double min_eig_hermitian_part = 0.0;
};

LaplacianDiagnostics laplacian_diagnostics(const std::vector<std::complex<double>>& l, std::size_t n);
LaplacianDiagnostics laplacian_diagnostics(const CTensor& l);

}  // namespace shno::attn
