#include "test_main.hpp"

#include <Eigen/Eigenvalues>
#include <cmath>
#include <complex>

#include "shno/attention.hpp"

using namespace shno;
using namespace shno::ad;
using namespace shno::attn;
using cd = std::complex<double>;

namespace {

cd entry(const CTensor& t, std::size_t i) { return {t.re.at(i), t.im.at(i)}; }

// Scalar probe of a complex result: sum of Re(out) * wr + Im(out) * wi with
// fixed random weights.
Tensor probe(const CTensor& out, std::uint64_t seed) {
  Rng rng(seed, 11);
  Tensor wr = Tensor::randn(out.shape(), 1.0, rng);
  Tensor wi = Tensor::randn(out.shape(), 1.0, rng);
  return add(sum(mul(out.re, wr)), sum(mul(out.im, wi)));
}

// Gradient check of a complex-to-complex map through both input parts.
double complex_grad_check(const std::function<CTensor(const CTensor&)>& f, const CTensor& x, std::uint64_t seed) {
  const double a = grad_check([&](const Tensor& r) { return probe(f({r, x.im}), seed); }, x.re);
  const double b = grad_check([&](const Tensor& i) { return probe(f({x.re, i}), seed); }, x.im);
  return std::max(a, b);
}

std::vector<cd> to_complex(const CTensor& t) {
  std::vector<cd> v(t.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = entry(t, i);
  return v;
}

Eigen::MatrixXcd to_eigen(const CTensor& t) {
  const auto n = static_cast<Eigen::Index>(t.dim(0)), m = static_cast<Eigen::Index>(t.dim(1));
  Eigen::MatrixXcd out(n, m);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < m; ++j) out(i, j) = entry(t, static_cast<std::size_t>(i * m + j));
  return out;
}

// Weights large enough that gradients are O(1) for finite-difference checks.
constexpr double kCheckStd = 0.5;

// The Laplacian written op by op, as an independent form of the fused one.
CTensor composed_laplacian(const CTensor& xp, const CLinear& g1, const CLinear& g2, const Tensor& alpha,
                           const CTensor& prev) {
  const CTensor b = csoftmax(g2(cgelu(g1(xp))));
  const CTensor lower = ctril(b);
  const CTensor a = cmatmul(lower, lower, true);
  const CTensor m = csub(cdiag_embed(csum_axis(a, 1, false)), a);
  CTensor l = cmul_real(m, sigmoid(alpha));
  if (prev.defined()) l = cadd(l, cmul_real(prev, sigmoid(neg(alpha))));
  return l;
}

}  // namespace

TEST_CASE("complex matmul matches std::complex arithmetic") {
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 1 + rng.next() % 4, k = 1 + rng.next() % 4, m = 1 + rng.next() % 4;
    CTensor a = CTensor::randn({n, k}, 1.0, rng);
    CTensor b = CTensor::randn({k, m}, 1.0, rng);
    CTensor bh = CTensor::randn({m, k}, 1.0, rng);
    const auto c = to_complex(cmatmul(a, b));
    const auto ch = to_complex(cmatmul(a, bh, true));
    const auto at = to_complex(conj_transpose(a));
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < m; ++j) {
        cd s{0, 0}, sh{0, 0};
        for (std::size_t l = 0; l < k; ++l) {
          s += entry(a, i * k + l) * entry(b, l * m + j);
          sh += entry(a, i * k + l) * std::conj(entry(bh, j * k + l));
        }
        CHECK(std::abs(c[i * m + j] - s) < 1e-13);
        CHECK(std::abs(ch[i * m + j] - sh) < 1e-13);
      }
      for (std::size_t l = 0; l < k; ++l) CHECK(at[l * n + i] == std::conj(entry(a, i * k + l)));
    }
    CTensor u = CTensor::randn({n, k}, 1.0, rng);
    const auto h = to_complex(cmul(a, u));
    for (std::size_t i = 0; i < h.size(); ++i) CHECK(std::abs(h[i] - entry(a, i) * entry(u, i)) < 1e-14);
  }
}

TEST_CASE("complex op gradients") {
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 1 + rng.next() % 4, k = 1 + rng.next() % 4;
    CTensor b = CTensor::randn({k, 3}, 1.0, rng);
    CTensor bh = CTensor::randn({3, k}, 1.0, rng);
    CTensor u = CTensor::randn({n, k}, 1.0, rng);
    Tensor mu = Tensor::scalar(1.0);
    CTensor x = CTensor::randn({n, k}, 1.0, rng);
    const auto seed = rng.next();
    CHECK(complex_grad_check([&](const CTensor& a) { return cmatmul(a, b); }, x, seed) < 1e-5);
    CHECK(complex_grad_check([&](const CTensor& a) { return cmatmul(a, bh, true); }, x, seed) < 1e-5);
    CHECK(complex_grad_check([&](const CTensor& a) { return cmatmul(a, a, true); }, x, seed) < 1e-5);
    CHECK(complex_grad_check([&](const CTensor& a) { return cmul(a, u); }, x, seed) < 1e-5);
    CHECK(complex_grad_check([&](const CTensor& a) { return csoftmax(a); }, x, seed) < 1e-5);
    CHECK(complex_grad_check([&](const CTensor& a) { return csmu(a, mu); }, x, seed) < 1e-5);
    CHECK(complex_grad_check([&](const CTensor& a) { return conj_transpose(a); }, x, seed) < 1e-5);
  }
}

TEST_CASE("grouped linear") {
  Rng rng(3);
  const std::vector<int> group{0, 2, 1, 2, 0};
  Tensor x = Tensor::randn({5, 3}, 1.0, rng);
  Tensor w = Tensor::randn({3, 3, 2}, 1.0, rng);
  Tensor y = grouped_linear(x, w, group);
  for (std::size_t k = 0; k < 5; ++k)
    for (std::size_t j = 0; j < 2; ++j) {
      double s = 0.0;
      for (std::size_t i = 0; i < 3; ++i) s += x.at(k * 3 + i) * w.at((static_cast<std::size_t>(group[k]) * 3 + i) * 2 + j);
      CHECK(std::abs(y.at(k * 2 + j) - s) < 1e-14);
    }
  CHECK(grad_check([&](const Tensor& t) { return sum(mul(grouped_linear(t, w, group), grouped_linear(t, w, group))); }, x) < 1e-6);
  CHECK(grad_check([&](const Tensor& t) { return sum(mul(grouped_linear(x, t, group), grouped_linear(x, t, group))); }, w) < 1e-6);
  CHECK_THROWS_AS(grouped_linear(x, w, {0, 1, 2, 3, 0}), std::invalid_argument);
}

TEST_CASE("taped transforms match the plan and differentiate") {
  sht::SphericalGrid grid(8, 16);
  sht::ShtPlan plan(grid, sht::Truncation::triangular(5));
  Rng rng(4);
  const std::size_t c = 3;
  Tensor g = Tensor::randn({grid.size(), c}, 1.0, rng);
  CTensor s = sht_analysis(plan, g);
  std::vector<double> re(plan.num_modes() * c), im(re.size());
  plan.forward(g.data(), c, re, im);
  CHECK(s.re.values() == re);
  CHECK(s.im.values() == im);
  Tensor back = sht_synthesis(plan, s);
  std::vector<double> gv(grid.size() * c);
  plan.inverse(re, im, c, gv);
  CHECK(back.values() == gv);

  const auto seed = rng.next();
  CHECK(grad_check([&](const Tensor& t) { return probe(sht_analysis(plan, t), seed); }, g) < 1e-6);
  CTensor coeffs = CTensor::randn({plan.num_modes(), c}, 1.0, rng);
  CHECK(complex_grad_check(
            [&](const CTensor& a) {
              Tensor f = sht_synthesis(plan, a);
              return CTensor{f, scale(f, 0.5)};
            },
            coeffs, seed) < 1e-6);
}

TEST_CASE("csoftmax examples") {
  CTensor z = CTensor::zeros({3, 3});
  CTensor s = csoftmax(z);
  for (std::size_t i = 0; i < 9; ++i) {
    CHECK(std::abs(s.re.at(i) - 1.0 / 3.0) < 1e-15);
    CHECK(std::abs(s.im.at(i) - 1.0 / 3.0) < 1e-15);
  }
  Rng rng(5);
  CTensor a = CTensor::randn({4, 5}, 3.0, rng);
  CTensor shifted = a;
  shifted.re = add(a.re, Tensor({4, 1}, {1.5, -2.0, 7.0, 0.0}));
  shifted.im = add(a.im, Tensor({4, 1}, {-3.0, 0.5, 2.0, 9.0}));
  const CTensor p = csoftmax(a), q = csoftmax(shifted);
  for (std::size_t i = 0; i < p.size(); ++i) {
    CHECK(std::abs(p.re.at(i) - q.re.at(i)) < 1e-12);
    CHECK(std::abs(p.im.at(i) - q.im.at(i)) < 1e-12);
  }
}

TEST_CASE("smhsa") {
  Rng rng(6);
  SUBCASE("single token attends to itself with weight 1+1i") {
    SmhsaParams p = SmhsaParams::init(4, 2, kCheckStd, rng);
    CTensor z = CTensor::randn({1, 4}, 1.0, rng);
    const auto out = to_complex(smhsa(z, p));
    const auto v = to_complex(p.v(z));
    std::vector<cd> mixed(4);
    for (std::size_t j = 0; j < 4; ++j) mixed[j] = cd{1.0, 1.0} * v[j];
    CTensor mt = CTensor::zeros({1, 4});
    for (std::size_t j = 0; j < 4; ++j) {
      mt.re.mutable_data()[j] = mixed[j].real();
      mt.im.mutable_data()[j] = mixed[j].imag();
    }
    const auto expect = to_complex(p.o(mt));
    for (std::size_t j = 0; j < 4; ++j) CHECK(std::abs(out[j] - expect[j]) < 1e-13);
  }
  SUBCASE("a key bias would cancel inside csoftmax") {
    SmhsaParams p = SmhsaParams::init(4, 2, kCheckStd, rng);
    CTensor z = CTensor::randn({5, 4}, 1.0, rng);
    const auto base = to_complex(smhsa(z, p));
    p.k.b = CTensor::randn({4}, 1.0, rng);
    const auto shifted = to_complex(smhsa(z, p));
    for (std::size_t i = 0; i < base.size(); ++i) CHECK(std::abs(base[i] - shifted[i]) < 1e-12);
  }
  SUBCASE("permutation equivariance") {
    SmhsaParams p = SmhsaParams::init(4, 2, kCheckStd, rng);
    CTensor z = CTensor::randn({5, 4}, 1.0, rng);
    const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
    std::vector<CTensor> rows;
    for (auto r : perm) rows.push_back(cslice(z, 0, r, 1));
    const auto out = to_complex(smhsa(z, p));
    const auto outp = to_complex(smhsa(cconcat(rows, 0), p));
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t j = 0; j < 4; ++j) CHECK(std::abs(outp[i * 4 + j] - out[perm[i] * 4 + j]) < 1e-13);
  }
  SUBCASE("gradients at N=3, C=4, M=2") {
    SmhsaParams p = SmhsaParams::init(4, 2, kCheckStd, rng);
    CTensor z = CTensor::randn({3, 4}, 1.0, rng);
    const auto seed = rng.next();
    CHECK(complex_grad_check([&](const CTensor& a) { return smhsa(a, p); }, z, seed) < 1e-5);
    auto rep = grad_check_params([&] { return probe(smhsa(z, p), seed); }, p.parameters());
    INFO(rep.worst);
    CHECK(rep.max_rel_error < 1e-5);
    CHECK_FALSE(p.k.b.defined());
  }
  SUBCASE("bad channel count") {
    SmhsaParams p = SmhsaParams::init(4, 2, kCheckStd, rng);
    CHECK_THROWS_WITH(smhsa(CTensor::zeros({2, 3}), p), doctest::Contains("[2,3]"));
    CHECK_THROWS_AS(SmhsaParams::init(6, 4, 0.1, rng), std::invalid_argument);
  }
}

TEST_CASE("parametric Laplacian") {
  Rng rng(7);
  SUBCASE("a single token gives the zero Laplacian") {
    CLinear g1 = CLinear::init(3, 2, kCheckStd, rng), g2 = CLinear::init(2, 2, kCheckStd, rng);
    auto parts = parametric_laplacian(CTensor::randn({1, 3}, 1.0, rng), g1, g2, Tensor::scalar(0.3), {});
    CHECK(parts.l.re.at(0) == 0.0);
    CHECK(parts.l.im.at(0) == 0.0);
  }
  SUBCASE("alpha = 0 averages with the previous Laplacian") {
    CLinear g1 = CLinear::init(3, 2, kCheckStd, rng), g2 = CLinear::init(2, 2, kCheckStd, rng);
    CTensor prev = CTensor::randn({4, 4}, 1.0, rng);
    auto parts = parametric_laplacian(CTensor::randn({4, 3}, 1.0, rng), g1, g2, Tensor::scalar(0.0), prev);
    for (std::size_t i = 0; i < 16; ++i) {
      CHECK(std::abs(parts.l.re.at(i) - 0.5 * (parts.d_minus_a.re.at(i) + prev.re.at(i))) < 1e-15);
      CHECK(std::abs(parts.l.im.at(i) - 0.5 * (parts.d_minus_a.im.at(i) + prev.im.at(i))) < 1e-15);
    }
  }
  SUBCASE("gradients") {
    CLinear g1 = CLinear::init(3, 2, kCheckStd, rng), g2 = CLinear::init(2, 2, kCheckStd, rng);
    CTensor prev = CTensor::randn({5, 5}, 1.0, rng);
    Tensor alpha = Tensor::scalar(0.4);
    const auto seed = rng.next();
    CHECK(complex_grad_check([&](const CTensor& x) { return parametric_laplacian(x, g1, g2, alpha, prev).l; },
                             CTensor::randn({5, 3}, 1.0, rng), seed) < 1e-5);
    const CTensor x = CTensor::randn({5, 3}, 1.0, rng);
    CHECK(grad_check([&](const Tensor& a) { return probe(parametric_laplacian(x, g1, g2, a, prev).l, seed); }, alpha) < 1e-5);
  }
}

TEST_CASE("fused Laplacian matches the composed definition") {
  Rng rng(17);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t t = 1 + rng.next() % 7, c = 1 + rng.next() % 4, d = 1 + rng.next() % 4;
    CLinear g1 = CLinear::init(c, d, kCheckStd, rng), g2 = CLinear::init(d, d, kCheckStd, rng);
    const CTensor x = CTensor::randn({t, c}, 1.0, rng, true);
    const CTensor prev = trial % 2 ? CTensor::randn({t, t}, 1.0, rng, true) : CTensor{};
    const Tensor alpha = Tensor::full({1}, rng.normal(), true);
    const auto seed = rng.next();

    auto grads = [&](bool fused) {
      Tape tape;
      Tensor loss;
      {
        TapeGuard guard(tape);
        const CTensor l = fused ? parametric_laplacian(x, g1, g2, alpha, prev).l
                                : composed_laplacian(x, g1, g2, alpha, prev);
        loss = probe(l, seed);
      }
      auto g = backward(tape, loss);
      std::vector<Tensor> out{Tensor({1}, {loss.item()}), g.get(x.re), g.get(x.im), g.get(alpha)};
      if (prev.defined()) {
        out.push_back(g.get(prev.re));
        out.push_back(g.get(prev.im));
      }
      return out;
    };
    const auto f = grads(true), r = grads(false);
    for (std::size_t k = 0; k < f.size(); ++k)
      for (std::size_t i = 0; i < f[k].size(); ++i)
        CHECK(f[k].at(i) == doctest::Approx(r[k].at(i)).epsilon(1e-12).scale(1.0));
  }
}

TEST_CASE("Laplacian invariants over random instances") {
  Rng rng(8);
  double worst_softmax = 0, worst_herm = 0, worst_eig = 0, worst_rows = 0, worst_bound = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t t = 1 + rng.next() % 8, c = 1 + rng.next() % 5, d = 1 + rng.next() % 4;
    CLinear g1 = CLinear::init(c, d, 1.0, rng), g2 = CLinear::init(d, d, 1.0, rng);
    CTensor prev = CTensor::randn({t, t}, 1.0, rng);
    Tensor alpha = Tensor::scalar(rng.normal(0.0, 2.0));
    auto parts = parametric_laplacian(CTensor::randn({t, c}, 2.0, rng), g1, g2, alpha, prev);
    for (std::size_t i = 0; i < t; ++i) {
      double sr = 0, si = 0;
      for (std::size_t j = 0; j < d; ++j) {
        sr += parts.b.re.at(i * d + j);
        si += parts.b.im.at(i * d + j);
      }
      worst_softmax = std::max({worst_softmax, std::abs(sr - 1), std::abs(si - 1)});
    }
    const Eigen::MatrixXcd a = to_eigen(parts.a);
    worst_herm = std::max(worst_herm, (a - a.adjoint()).cwiseAbs().maxCoeff());
    // General (non-Hermitian) eigen-solver as an independent check of PSD.
    Eigen::ComplexEigenSolver<Eigen::MatrixXcd> es(a, false);
    for (Eigen::Index k = 0; k < es.eigenvalues().size(); ++k)
      worst_eig = std::min(worst_eig, es.eigenvalues()(k).real());
    const Eigen::MatrixXcd dma = to_eigen(parts.d_minus_a);
    worst_rows = std::max(worst_rows, dma.rowwise().sum().cwiseAbs().maxCoeff());
    // Convex combination bound.
    auto opnorm = [](const Eigen::MatrixXcd& m) { return Eigen::JacobiSVD<Eigen::MatrixXcd>(m).singularValues()(0); };
    const double bound = std::max(opnorm(dma), opnorm(to_eigen(prev)));
    worst_bound = std::max(worst_bound, opnorm(to_eigen(parts.l)) - bound);
  }
  CHECK(worst_softmax < 1e-12);
  CHECK(worst_herm < 1e-12);
  CHECK(worst_eig >= -1e-10);
  CHECK(worst_rows < 1e-10);
  CHECK(worst_bound < 1e-12);
}

TEST_CASE("grsa") {
  Rng rng(10);
  SUBCASE("zero output projection leaves the residual") {
    GrsaParams p = GrsaParams::init(4, 2, 3, kCheckStd, rng);
    for (double& v : p.p.w.re.mutable_data()) v = 0.0;
    for (double& v : p.p.w.im.mutable_data()) v = 0.0;
    CTensor x = CTensor::randn({6, 4}, 1.0, rng);
    auto out = grsa(x, p, {});
    const CTensor y = p.y(x);
    CHECK(out.out.shape() == Shape{6, 4});
    CHECK(out.out.re.values() == y.re.values());
    CHECK(out.out.im.values() == y.im.values());
    CHECK(out.state.l.size() == 2);
    CHECK(out.state.l[0].shape() == Shape{9, 9});
  }
  SUBCASE("state threading and register mismatch") {
    GrsaParams p = GrsaParams::init(4, 1, 2, kCheckStd, rng);
    CTensor x = CTensor::randn({5, 4}, 1.0, rng);
    auto first = grsa(x, p, {});
    auto second = grsa(x, p, first.state);
    // The second call mixes its own Laplacian with the first one.
    auto own = parametric_laplacian(cconcat({x, p.register_tokens}, 0), p.g1[0], p.g2[0], p.alpha, first.state.l[0]);
    CHECK(second.state.l[0].re.values() == own.l.re.values());
    GrsaParams other = GrsaParams::init(4, 1, 3, kCheckStd, rng);
    CHECK_THROWS_WITH(grsa(x, other, first.state), doctest::Contains("register count mismatch"));
  }
  SUBCASE("deterministic") {
    GrsaParams p = GrsaParams::init(8, 2, 4, 0.02, rng);
    CTensor x = CTensor::randn({10, 8}, 1.0, rng);
    auto a = grsa(x, p, {});
    auto b = grsa(x, p, {});
    CHECK(a.out.re.values() == b.out.re.values());
    CHECK(a.out.im.values() == b.out.im.values());
  }
  SUBCASE("gradients at N=4, R=2, C=4, M=1") {
    GrsaParams p = GrsaParams::init(4, 1, 2, kCheckStd, rng);
    p.alpha.mutable_data()[0] = 0.3;
    CTensor x = CTensor::randn({4, 4}, 1.0, rng);
    LaplacianState prev{{CTensor::randn({6, 6}, 0.5, rng)}};
    const auto seed = rng.next();
    CHECK(complex_grad_check([&](const CTensor& a) { return grsa(a, p, prev).out; }, x, seed) < 1e-5);
    auto rep = grad_check_params([&] { return probe(grsa(x, p, prev).out, seed); }, p.parameters());
    INFO(rep.worst << " " << rep.max_rel_error);
    CHECK(rep.max_rel_error < 1e-5);
    // Gradient also flows into the previous layer's Laplacian.
    CHECK(complex_grad_check([&](const CTensor& l) { return grsa(x, p, LaplacianState{{l}}).out; }, prev.l[0], seed) < 1e-5);
  }
}

TEST_CASE("Laplacian diagnostics") {
  auto zero = laplacian_diagnostics(std::vector<cd>(9, cd{0, 0}), 3);
  CHECK(zero.max_row_sum_abs == 0.0);
  CHECK(zero.hermitian_gap == 0.0);
  CHECK(std::abs(zero.min_eig_hermitian_part) < 1e-15);
  // A = [[2,1],[1,2]] -> D - A = [[1,-1],[-1,1]], eigenvalues {0, 2}.
  auto two = laplacian_diagnostics({cd{1, 0}, cd{-1, 0}, cd{-1, 0}, cd{1, 0}}, 2);
  CHECK(two.max_row_sum_abs == 0.0);
  CHECK(two.hermitian_gap == 0.0);
  CHECK(std::abs(two.min_eig_hermitian_part) < 1e-14);
  auto skew = laplacian_diagnostics({cd{0, 0}, cd{0, 1}, cd{0, 1}, cd{0, 0}}, 2);
  CHECK(skew.hermitian_gap == doctest::Approx(2.0));
  CHECK_THROWS_AS(laplacian_diagnostics(std::vector<cd>(3), 2), std::invalid_argument);
}
