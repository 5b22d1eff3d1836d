#include "shno/attention.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "shno/kernels.hpp"

namespace shno::attn {

using namespace shno::ad;

CLinear CLinear::init(std::size_t in, std::size_t out, double stddev, Rng& rng, bool bias) {
  CLinear l{CTensor::randn({in, out}, stddev, rng, true), {}};
  if (bias) l.b = CTensor::zeros({out}, true);
  return l;
}

CTensor CLinear::operator()(const CTensor& x) const {
  CTensor y = cmatmul(x, w);
  return b.defined() ? cadd(y, b) : y;
}

void CLinear::collect(const std::string& prefix, NamedParams& out) const {
  out.emplace_back(prefix + ".w.re", w.re);
  out.emplace_back(prefix + ".w.im", w.im);
  if (!b.defined()) return;
  out.emplace_back(prefix + ".b.re", b.re);
  out.emplace_back(prefix + ".b.im", b.im);
}

namespace {

void check_heads(std::size_t channels, std::size_t heads) {
  if (heads == 0 || channels % heads != 0)
    throw std::invalid_argument("attention: " + std::to_string(channels) + " channels do not split into " +
                                std::to_string(heads) + " heads");
}

void check_tokens(const CTensor& x, std::size_t channels, const char* op) {
  if (x.shape().size() != 2 || x.dim(1) != channels)
    throw std::invalid_argument(std::string(op) + ": expected tokens [N, " + std::to_string(channels) + "], got " +
                                shape_str(x.shape()));
}

}  // namespace

SmhsaParams SmhsaParams::init(std::size_t channels, std::size_t heads, double stddev, Rng& rng) {
  check_heads(channels, heads);
  SmhsaParams p;
  p.heads = heads;
  p.q = CLinear::init(channels, channels, stddev, rng);
  // A key bias adds a constant to each row of logits, which csoftmax
  // cancels, so the key projection has none.
  p.k = CLinear::init(channels, channels, stddev, rng, false);
  p.v = CLinear::init(channels, channels, stddev, rng);
  p.o = CLinear::init(channels, channels, stddev, rng);
  return p;
}

NamedParams SmhsaParams::parameters(const std::string& prefix) const {
  NamedParams out;
  q.collect(prefix + "q", out);
  k.collect(prefix + "k", out);
  v.collect(prefix + "v", out);
  o.collect(prefix + "o", out);
  return out;
}

CTensor smhsa(const CTensor& z, const SmhsaParams& p) {
  const std::size_t c = p.channels();
  check_heads(c, p.heads);
  check_tokens(z, c, "smhsa");
  const std::size_t d = c / p.heads;
  const CTensor q = p.q(z), k = p.k(z), v = p.v(z);
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  std::vector<CTensor> heads;
  for (std::size_t h = 0; h < p.heads; ++h) {
    const CTensor qh = cslice(q, 1, h * d, d), kh = cslice(k, 1, h * d, d), vh = cslice(v, 1, h * d, d);
    const CTensor att = csoftmax(cscale(cmatmul(qh, kh, true), inv_sqrt_d));
    heads.push_back(cmatmul(att, vh));
  }
  return p.o(p.heads == 1 ? heads[0] : cconcat(heads, 1));
}

GrsaParams GrsaParams::init(std::size_t channels, std::size_t heads, std::size_t registers, double stddev,
                            Rng& rng) {
  check_heads(channels, heads);
  GrsaParams p;
  p.heads = heads;
  p.registers = registers;
  p.y = CLinear::init(channels, channels, stddev, rng);
  p.v = CLinear::init(channels, channels, stddev, rng);
  p.q = CLinear::init(channels, channels, stddev, rng);
  p.p = CLinear::init(channels, channels, stddev, rng);
  const std::size_t d = channels / heads;
  for (std::size_t h = 0; h < heads; ++h) {
    p.g1.push_back(CLinear::init(channels, d, stddev, rng));
    p.g2.push_back(CLinear::init(d, d, stddev, rng));
  }
  p.register_tokens = CTensor::randn({registers, channels}, stddev, rng, true);
  p.alpha = Tensor::zeros({1}, true);
  p.mu = Tensor::full({1}, 1.0, true);
  return p;
}

NamedParams GrsaParams::parameters(const std::string& prefix) const {
  NamedParams out;
  y.collect(prefix + "y", out);
  v.collect(prefix + "v", out);
  q.collect(prefix + "q", out);
  p.collect(prefix + "p", out);
  for (std::size_t h = 0; h < heads; ++h) {
    g1[h].collect(prefix + "g1." + std::to_string(h), out);
    g2[h].collect(prefix + "g2." + std::to_string(h), out);
  }
  if (registers > 0) {
    out.emplace_back(prefix + "registers.re", register_tokens.re);
    out.emplace_back(prefix + "registers.im", register_tokens.im);
  }
  out.emplace_back(prefix + "alpha", alpha);
  out.emplace_back(prefix + "mu", mu);
  return out;
}

namespace {

// L = s (diag(A 1) - A) + (1 - s) L_prev with A = tril(B) tril(B)^H and
// s = sigmoid(alpha), as one op over B's real and imaginary parts. The
// result is packed [2, T, T]; A and D - A are handed back as plain values.
//
// Backward, for real-pair gradients G of L:
//   G_M = s G,  G_A[i,k] = G_M[i,i] - G_M[i,k],
//   G_T = (G_A + G_A^H) T,  G_B = tril(G_T).
Tensor laplacian_op(const CTensor& b, const Tensor& alpha, const CTensor& l_prev, CTensor& a_out, CTensor& m_out) {
  const std::size_t t = b.dim(0), d = b.dim(1), tt = t * t;
  std::vector<double> tr(b.re.values()), ti(b.im.values());
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t j = i + 1; j < d; ++j) tr[i * d + j] = ti[i * d + j] = 0.0;
  // A = T T^H: re = Tr Tr^T + Ti Ti^T, im = Ti Tr^T - Tr Ti^T
  std::vector<double> are(tt), aim(tt);
  kernels::gemm(tr, false, tr, true, are, t, d, t);
  kernels::gemm(ti, false, ti, true, are, t, d, t, true);
  kernels::gemm(ti, false, tr, true, aim, t, d, t);
  std::vector<double> neg_tr(tr.size());
  for (std::size_t i = 0; i < tr.size(); ++i) neg_tr[i] = -tr[i];
  kernels::gemm(neg_tr, false, ti, true, aim, t, d, t, true);

  std::vector<double> mre(tt), mim(tt);
  for (std::size_t i = 0; i < t; ++i) {
    double sr = 0.0, si = 0.0;
    for (std::size_t k = 0; k < t; ++k) {
      sr += are[i * t + k];
      si += aim[i * t + k];
      mre[i * t + k] = -are[i * t + k];
      mim[i * t + k] = -aim[i * t + k];
    }
    mre[i * t + i] += sr;
    mim[i * t + i] += si;
  }
  const double s = 1.0 / (1.0 + std::exp(-alpha.item()));
  const bool has_prev = l_prev.defined();
  std::vector<double> packed(2 * tt);
  for (std::size_t i = 0; i < tt; ++i) {
    packed[i] = s * mre[i] + (has_prev ? (1.0 - s) * l_prev.re.at(i) : 0.0);
    packed[tt + i] = s * mim[i] + (has_prev ? (1.0 - s) * l_prev.im.at(i) : 0.0);
  }
  a_out = {Tensor({t, t}, are), Tensor({t, t}, aim)};
  m_out = {Tensor({t, t}, mre), Tensor({t, t}, mim)};

  std::vector<Tensor> inputs{b.re, b.im, alpha};
  if (has_prev) {
    inputs.push_back(l_prev.re);
    inputs.push_back(l_prev.im);
  }
  return make_result(
      {2, t, t}, std::move(packed), std::move(inputs),
      [t, d, tt, s, has_prev, tr = std::move(tr), ti = std::move(ti), mre = std::move(mre), mim = std::move(mim)](
          const Record& rec, std::span<const double> g, std::span<double* const> gin) {
        const double* gre = g.data();
        const double* gim = g.data() + tt;
        if (has_prev) {
          if (gin[3])
            for (std::size_t i = 0; i < tt; ++i) gin[3][i] += (1.0 - s) * gre[i];
          if (gin[4])
            for (std::size_t i = 0; i < tt; ++i) gin[4][i] += (1.0 - s) * gim[i];
        }
        if (gin[2]) {
          const auto pre = has_prev ? rec.inputs[3].data() : std::span<const double>{};
          const auto pim = has_prev ? rec.inputs[4].data() : std::span<const double>{};
          double acc = 0.0;
          for (std::size_t i = 0; i < tt; ++i)
            acc += gre[i] * (mre[i] - (has_prev ? pre[i] : 0.0)) + gim[i] * (mim[i] - (has_prev ? pim[i] : 0.0));
          gin[2][0] += s * (1.0 - s) * acc;
        }
        if (!gin[0] && !gin[1]) return;
        // H = G_A + G_A^H with G_A[i,k] = s (G[i,i] - G[i,k])
        std::vector<double> hre(tt), him(tt);
        for (std::size_t i = 0; i < t; ++i)
          for (std::size_t k = 0; k < t; ++k) {
            const double ar = s * (gre[i * t + i] - gre[i * t + k]), ai = s * (gim[i * t + i] - gim[i * t + k]);
            const double br = s * (gre[k * t + k] - gre[k * t + i]), bi = s * (gim[k * t + k] - gim[k * t + i]);
            hre[i * t + k] = ar + br;
            him[i * t + k] = ai - bi;
          }
        // G_T = H T: re = Hr Tr - Hi Ti, im = Hr Ti + Hi Tr
        std::vector<double> gtr(t * d), gti(t * d), neg_him(tt);
        for (std::size_t i = 0; i < tt; ++i) neg_him[i] = -him[i];
        kernels::gemm(hre, false, tr, false, gtr, t, t, d);
        kernels::gemm(neg_him, false, ti, false, gtr, t, t, d, true);
        kernels::gemm(hre, false, ti, false, gti, t, t, d);
        kernels::gemm(him, false, tr, false, gti, t, t, d, true);
        for (std::size_t i = 0; i < t; ++i)
          for (std::size_t j = 0; j < d && j <= i; ++j) {
            if (gin[0]) gin[0][i * d + j] += gtr[i * d + j];
            if (gin[1]) gin[1][i * d + j] += gti[i * d + j];
          }
      });
}

}  // namespace

LaplacianParts parametric_laplacian(const CTensor& xprime, const CLinear& g1, const CLinear& g2,
                                    const Tensor& alpha, const CTensor& l_prev) {
  const std::size_t t = xprime.dim(0);
  if (l_prev.defined() && l_prev.shape() != Shape{t, t})
    throw std::invalid_argument("parametric_laplacian: previous Laplacian " + shape_str(l_prev.shape()) +
                                " does not match " + std::to_string(t) + " tokens");
  LaplacianParts parts;
  parts.b = csoftmax(g2(cgelu(g1(xprime))));
  const Tensor packed = laplacian_op(parts.b, alpha, l_prev, parts.a, parts.d_minus_a);
  parts.l = {reshape(slice(packed, 0, 0, 1), {t, t}), reshape(slice(packed, 0, 1, 1), {t, t})};
  return parts;
}

GrsaOutput grsa(const CTensor& x, const GrsaParams& p, const LaplacianState& prev) {
  const std::size_t c = p.channels();
  check_heads(c, p.heads);
  check_tokens(x, c, "grsa");
  const std::size_t n = x.dim(0), t = n + p.registers, d = p.head_dim();
  if (!prev.empty()) {
    if (prev.l.size() != p.heads)
      throw std::invalid_argument("grsa: previous state has " + std::to_string(prev.l.size()) +
                                  " Laplacians for " + std::to_string(p.heads) + " heads");
    if (prev.l[0].shape() != Shape{t, t})
      throw std::invalid_argument("grsa: register count mismatch, previous Laplacian is " +
                                  shape_str(prev.l[0].shape()) + " but " + std::to_string(n) + " tokens + " +
                                  std::to_string(p.registers) + " registers need " + std::to_string(t));
  }

  const CTensor y = p.y(x);
  const CTensor xp = p.registers > 0 ? cconcat({x, p.register_tokens}, 0) : x;
  const CTensor v = csmu(p.v(xp), p.mu);
  const CTensor q = csmu(p.q(xp), p.mu);

  GrsaOutput result;
  std::vector<CTensor> z;
  for (std::size_t h = 0; h < p.heads; ++h) {
    const CTensor l_prev = prev.empty() ? CTensor{} : prev.l[h];
    LaplacianParts parts = parametric_laplacian(xp, p.g1[h], p.g2[h], p.alpha, l_prev);
    z.push_back(cmatmul(parts.l, p.heads == 1 ? v : cslice(v, 1, h * d, d)));
    result.state.l.push_back(std::move(parts.l));
  }
  const CTensor gated = cmul(p.heads == 1 ? z[0] : cconcat(z, 1), q);
  CTensor o = p.p(gated);
  if (p.registers > 0) o = cslice(o, 0, 0, n);
  result.out = cadd(o, y);
  return result;
}

LaplacianDiagnostics laplacian_diagnostics(const std::vector<std::complex<double>>& l, std::size_t n) {
  if (l.size() != n * n)
    throw std::invalid_argument("laplacian_diagnostics: " + std::to_string(l.size()) + " entries for a " +
                                std::to_string(n) + "x" + std::to_string(n) + " matrix");
  LaplacianDiagnostics out;
  if (n == 0) return out;
  Eigen::MatrixXcd herm(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    std::complex<double> row{0.0, 0.0};
    for (std::size_t j = 0; j < n; ++j) {
      row += l[i * n + j];
      out.hermitian_gap = std::max(out.hermitian_gap, std::abs(l[i * n + j] - std::conj(l[j * n + i])));
      herm(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
          0.5 * (l[i * n + j] + std::conj(l[j * n + i]));
    }
    out.max_row_sum_abs = std::max(out.max_row_sum_abs, std::abs(row));
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> solver(herm, Eigen::EigenvaluesOnly);
  out.min_eig_hermitian_part = solver.eigenvalues().minCoeff();
  return out;
}

LaplacianDiagnostics laplacian_diagnostics(const CTensor& l) {
  if (l.shape().size() != 2 || l.dim(0) != l.dim(1))
    throw std::invalid_argument("laplacian_diagnostics: expected a square matrix, got " + shape_str(l.shape()));
  std::vector<std::complex<double>> m(l.size());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = {l.re.at(i), l.im.at(i)};
  return laplacian_diagnostics(m, l.dim(0));
}

}  // namespace shno::attn
