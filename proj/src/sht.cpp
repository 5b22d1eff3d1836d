#include "shno/sht.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "shno/kernels.hpp"

namespace shno::sht {

namespace {

constexpr double kPi = std::numbers::pi;

std::string sizes_message(const SphericalGrid& grid, const Truncation& t) {
  std::ostringstream os;
  os << "grid " << grid.nlat() << "x" << grid.nlon() << " cannot carry truncation n_max="
     << t.n_max << " m_max=" << t.m_max << " (needs nlat >= " << t.n_max + 1
     << " and nlon >= " << 2 * t.m_max + 1 << ")";
  return os.str();
}

const Truncation& checked_truncation(const SphericalGrid& grid, const Truncation& t) {
  t.validate();
  if (grid.nlat() < static_cast<std::size_t>(t.n_max) + 1 ||
      grid.nlon() < 2 * static_cast<std::size_t>(t.m_max) + 1)
    throw std::invalid_argument(sizes_message(grid, t));
  return t;
}

}  // namespace

Truncation Truncation::for_grid(std::size_t nlat, std::size_t nlon) {
  int n = static_cast<int>((nlon - 1) / 3);
  n = std::min(n, static_cast<int>(nlat) - 1);
  return triangular(std::max(n, 0));
}

std::size_t Truncation::num_modes() const {
  std::size_t total = 0;
  for (int m = 0; m <= m_max; ++m) total += static_cast<std::size_t>(n_max - m + 1);
  return total;
}

void Truncation::validate() const {
  if (n_max < 0 || m_max < 0 || m_max > n_max) {
    std::ostringstream os;
    os << "invalid truncation n_max=" << n_max << " m_max=" << m_max;
    throw std::invalid_argument(os.str());
  }
}

std::size_t mode_index(const Truncation& t, int n, int m) {
  // modes before order m: sum_{k<m} (n_max - k + 1)
  const auto mm = static_cast<std::size_t>(m);
  const std::size_t before = mm * static_cast<std::size_t>(t.n_max + 1) - mm * (mm - 1) / 2;
  return before + static_cast<std::size_t>(n - m);
}

ModeTable mode_table(const Truncation& t) {
  ModeTable mt;
  mt.degree.reserve(t.num_modes());
  mt.order.reserve(t.num_modes());
  for (int m = 0; m <= t.m_max; ++m)
    for (int n = m; n <= t.n_max; ++n) {
      mt.degree.push_back(n);
      mt.order.push_back(m);
    }
  return mt;
}

Quadrature gauss_legendre(std::size_t n) {
  if (n == 0) throw std::invalid_argument("gauss_legendre: n must be >= 1");
  Quadrature q;
  q.nodes.resize(n);
  q.weights.resize(n);
  const std::size_t half = (n + 1) / 2;
  for (std::size_t i = 0; i < half; ++i) {
    double x = std::cos(kPi * (static_cast<double>(i) + 0.75) / (static_cast<double>(n) + 0.5));
    double dp = 0.0;
    for (int iter = 0; iter < 100; ++iter) {
      double p0 = 1.0, p1 = x;
      for (std::size_t k = 2; k <= n; ++k) {
        const double kk = static_cast<double>(k);
        const double p2 = ((2.0 * kk - 1.0) * x * p1 - (kk - 1.0) * p0) / kk;
        p0 = p1;
        p1 = p2;
      }
      if (n == 1) {
        p1 = x;
        p0 = 1.0;
      }
      dp = static_cast<double>(n) * (x * p1 - p0) / (x * x - 1.0);
      const double dx = p1 / dp;
      x -= dx;
      if (std::abs(dx) < 1e-16) break;
    }
    // recompute derivative at the converged root
    {
      double p0 = 1.0, p1 = x;
      for (std::size_t k = 2; k <= n; ++k) {
        const double kk = static_cast<double>(k);
        const double p2 = ((2.0 * kk - 1.0) * x * p1 - (kk - 1.0) * p0) / kk;
        p0 = p1;
        p1 = p2;
      }
      if (n == 1) p0 = 1.0;
      dp = static_cast<double>(n) * (x * p1 - p0) / (x * x - 1.0);
    }
    const double w = 2.0 / ((1.0 - x * x) * dp * dp);
    q.nodes[i] = x;
    q.nodes[n - 1 - i] = -x;
    q.weights[i] = w;
    q.weights[n - 1 - i] = w;
  }
  if (n % 2 == 1) q.nodes[n / 2] = 0.0;
  return q;
}

SphericalGrid::SphericalGrid(std::size_t nlat, std::size_t nlon, double radius)
    : nlat_(nlat), nlon_(nlon), radius_(radius) {
  if (nlat == 0 || nlon == 0) throw std::invalid_argument("SphericalGrid: empty grid");
  if (!(radius > 0.0)) throw std::invalid_argument("SphericalGrid: radius must be positive");
  auto q = gauss_legendre(nlat);
  nodes_ = std::move(q.nodes);
  weights_ = std::move(q.weights);
  lats_.resize(nlat);
  for (std::size_t i = 0; i < nlat; ++i) lats_[i] = std::asin(nodes_[i]);
  lons_.resize(nlon);
  for (std::size_t j = 0; j < nlon; ++j) lons_[j] = 2.0 * kPi * static_cast<double>(j) / static_cast<double>(nlon);
}

double SphericalGrid::dlon() const { return 2.0 * kPi / static_cast<double>(nlon_); }

bool GridField::all_finite() const {
  return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
}

LegendreTable::LegendreTable(const Truncation& trunc, std::span<const double> x, int extra_degrees)
    : n_top_(trunc.n_max + extra_degrees), npts_(x.size()) {
  trunc.validate();
  if (trunc.n_max > kMaxDegree) {
    std::ostringstream os;
    os << "legendre_table: n_max=" << trunc.n_max << " exceeds supported maximum " << kMaxDegree
       << " (sectoral seed underflow)";
    throw std::invalid_argument(os.str());
  }
  for (double xi : x)
    if (!(std::abs(xi) < 1.0)) throw std::invalid_argument("legendre_table: |x| must be < 1");

  m_offsets_.resize(static_cast<std::size_t>(trunc.m_max) + 1);
  std::size_t rows = 0;
  for (int m = 0; m <= trunc.m_max; ++m) {
    m_offsets_[static_cast<std::size_t>(m)] = rows;
    rows += static_cast<std::size_t>(n_top_ - m + 1);
  }
  values_.assign(rows * npts_, 0.0);

  // Sectoral seeds carried as mantissa * 2^exponent so that high orders near
  // the poles do not underflow before the recurrence in n lifts them.
  constexpr int kRescale = 400;
  const double big = std::ldexp(1.0, kRescale);
  const int m_max = trunc.m_max;
#pragma omp parallel for schedule(static)
  for (std::int64_t ii = 0; ii < static_cast<std::int64_t>(npts_); ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    const double xi = x[i];
    const double s = std::sqrt((1.0 - xi) * (1.0 + xi));
    double seed = 1.0 / std::sqrt(4.0 * kPi);
    int seed_exp = 0;
    for (int m = 0; m <= m_max; ++m) {
      if (m > 0) {
        const double mm = static_cast<double>(m);
        seed *= -std::sqrt((2.0 * mm + 1.0) / (2.0 * mm)) * s;
        int e = 0;
        seed = std::frexp(seed, &e);
        seed_exp += e;
      }
      double p_prev = 0.0;
      double p_cur = seed;
      int scale = seed_exp;
      auto store = [&](int n, double val) {
        values_[offset(n, m) + i] = scale == 0 ? val : std::ldexp(val, scale);
      };
      store(m, p_cur);
      const double mm = static_cast<double>(m);
      double a_prev = 0.0;
      for (int n = m + 1; n <= n_top_; ++n) {
        const double nn = static_cast<double>(n);
        const double a = std::sqrt((4.0 * nn * nn - 1.0) / (nn * nn - mm * mm));
        const double p_next = (n == m + 1) ? a * xi * p_cur : a * (xi * p_cur - p_prev / a_prev);
        p_prev = p_cur;
        p_cur = p_next;
        a_prev = a;
        if (scale < 0 && std::abs(p_cur) > big) {
          const int shift = std::min(kRescale, -scale);
          p_cur = std::ldexp(p_cur, -shift);
          p_prev = std::ldexp(p_prev, -shift);
          scale += shift;
        }
        store(n, p_cur);
      }
    }
  }
}

LegendreTable legendre_table(const Truncation& trunc, std::span<const double> x) {
  return LegendreTable(trunc, x, 0);
}

ShtPlan::ShtPlan(const SphericalGrid& grid, const Truncation& trunc)
    : grid_(grid),
      trunc_(checked_truncation(grid, trunc)),
      modes_(mode_table(trunc_)),
      table_(trunc_, grid_.colat_nodes(), 1) {
  const std::size_t nlat = grid_.nlat();
  const std::size_t nlon = grid_.nlon();
  // (1 - x^2) dP_n^m/dx = -n eps_{n+1} P_{n+1} + (n+1) eps_n P_{n-1}
  dm_offsets_.resize(static_cast<std::size_t>(trunc_.m_max) + 1);
  std::size_t rows = 0;
  for (int m = 0; m <= trunc_.m_max; ++m) {
    dm_offsets_[static_cast<std::size_t>(m)] = rows;
    rows += static_cast<std::size_t>(trunc_.n_max - m + 1);
  }
  dtable_.assign(rows * nlat, 0.0);
  auto eps = [](int n, int m) {
    const double nn = n, mm = m;
    return std::sqrt((nn * nn - mm * mm) / (4.0 * nn * nn - 1.0));
  };
  for (int m = 0; m <= trunc_.m_max; ++m)
    for (int n = m; n <= trunc_.n_max; ++n) {
      const double up = -static_cast<double>(n) * eps(n + 1, m);
      const double dn = n > m ? static_cast<double>(n + 1) * eps(n, m) : 0.0;
      double* dst = dtable_.data() + (dm_offsets_[static_cast<std::size_t>(m)] + static_cast<std::size_t>(n - m)) * nlat;
      for (std::size_t i = 0; i < nlat; ++i)
        dst[i] = up * table_(n + 1, m, i) + (n > m ? dn * table_(n - 1, m, i) : 0.0);
    }

  // rows 0..m_max hold cos(m lon_j), rows m_max+1.. hold -sin(m lon_j)
  const std::size_t mcount = static_cast<std::size_t>(trunc_.m_max) + 1;
  dft_.resize(2 * mcount * nlon);
  for (std::size_t m = 0; m < mcount; ++m)
    for (std::size_t j = 0; j < nlon; ++j) {
      const double ang = 2.0 * kPi * static_cast<double>((m * j) % nlon) / static_cast<double>(nlon);
      dft_[m * nlon + j] = std::cos(ang);
      dft_[(mcount + m) * nlon + j] = -std::sin(ang);
    }
  dft_t_.resize(dft_.size());
  kernels::transpose(dft_, dft_t_, 2 * mcount, nlon);

  ptab_.assign(rows * nlat, 0.0);
  ptab_t_.assign(rows * nlat, 0.0);
  dtab_t_.assign(rows * nlat, 0.0);
  for (int m = 0; m <= trunc_.m_max; ++m) {
    const std::size_t off = dm_offsets_[static_cast<std::size_t>(m)] * nlat;
    const std::size_t r = static_cast<std::size_t>(trunc_.n_max - m + 1);
    std::copy(table_.row(m, m), table_.row(m, m) + r * nlat, ptab_.begin() + static_cast<std::ptrdiff_t>(off));
    kernels::transpose(std::span<const double>(ptab_).subspan(off, r * nlat),
                       std::span<double>(ptab_t_).subspan(off, r * nlat), r, nlat);
    kernels::transpose(std::span<const double>(dtable_).subspan(off, r * nlat),
                       std::span<double>(dtab_t_).subspan(off, r * nlat), r, nlat);
  }
  fwd_lat_w_.resize(nlat);
  for (std::size_t i = 0; i < nlat; ++i) fwd_lat_w_[i] = grid_.quad_weights()[i] * grid_.dlon();
  ones_m_.assign(static_cast<std::size_t>(trunc_.m_max) + 1, 1.0);
  real_m_.assign(static_cast<std::size_t>(trunc_.m_max) + 1, 2.0);
  real_m_[0] = 1.0;
  ones_lat_.assign(nlat, 1.0);
}

namespace {

// Below this many channels the products are arranged so the vectorised loop
// runs over modes or longitudes instead of channels.
constexpr std::size_t kWideChannels = 8;

}  // namespace

// F[m][i][c] = lat_scale[i] * sum_j f[i][j][c] (cos(m lon_j) - i sin(m lon_j))
void ShtPlan::fourier_analysis(std::span<const double> grid, std::size_t channels,
                               std::span<const double> lat_scale, std::vector<double>& fre,
                               std::vector<double>& fim) const {
  const std::size_t nlat = grid_.nlat();
  const std::size_t nlon = grid_.nlon();
  const std::size_t mcount = static_cast<std::size_t>(trunc_.m_max) + 1;
  const std::size_t two_m = 2 * mcount;
  fre.assign(mcount * nlat * channels, 0.0);
  fim.assign(mcount * nlat * channels, 0.0);
  const bool wide = channels >= kWideChannels;
#pragma omp parallel for schedule(static)
  for (std::int64_t ii = 0; ii < static_cast<std::int64_t>(nlat); ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    const std::span<const double> row = grid.subspan(i * nlon * channels, nlon * channels);
    std::vector<double> tmp(two_m * channels);
    if (wide) {
      kernels::matmul(dft_, row, tmp, two_m, nlon, channels);
    } else {
      std::vector<double> rowt(channels * nlon), tmpt(channels * two_m);
      kernels::transpose(row, rowt, nlon, channels);
      kernels::matmul(rowt, dft_t_, tmpt, channels, nlon, two_m);
      kernels::transpose(tmpt, tmp, channels, two_m);
    }
    const double ls = lat_scale[i];
    for (std::size_t m = 0; m < mcount; ++m)
      for (std::size_t c = 0; c < channels; ++c) {
        fre[(m * nlat + i) * channels + c] = ls * tmp[m * channels + c];
        fim[(m * nlat + i) * channels + c] = ls * tmp[(mcount + m) * channels + c];
      }
  }
}

// f[i][j][c] = lat_scale[i] * sum_m m_scale[m] (G_re cos(m lon_j) - G_im sin(m lon_j))
void ShtPlan::fourier_synthesis(const std::vector<double>& gre, const std::vector<double>& gim,
                                std::size_t channels, std::span<const double> lat_scale,
                                std::span<const double> m_scale, std::span<double> grid) const {
  const std::size_t nlat = grid_.nlat();
  const std::size_t nlon = grid_.nlon();
  const std::size_t mcount = static_cast<std::size_t>(trunc_.m_max) + 1;
  const std::size_t two_m = 2 * mcount;
  const bool wide = channels >= kWideChannels;
#pragma omp parallel for schedule(static)
  for (std::int64_t ii = 0; ii < static_cast<std::int64_t>(nlat); ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    const double ls = lat_scale[i];
    std::vector<double> g(two_m * channels);
    for (std::size_t m = 0; m < mcount; ++m)
      for (std::size_t c = 0; c < channels; ++c) {
        g[m * channels + c] = ls * m_scale[m] * gre[(m * nlat + i) * channels + c];
        g[(mcount + m) * channels + c] = ls * m_scale[m] * gim[(m * nlat + i) * channels + c];
      }
    std::span<double> row = grid.subspan(i * nlon * channels, nlon * channels);
    if (wide) {
      kernels::matmul(dft_t_, g, row, nlon, two_m, channels);
    } else {
      std::vector<double> gt(channels * two_m), rowt(channels * nlon);
      kernels::transpose(g, gt, two_m, channels);
      kernels::matmul(gt, dft_, rowt, channels, two_m, nlon);
      kernels::transpose(rowt, row, channels, nlon);
    }
  }
}

void ShtPlan::legendre_analysis(const std::vector<double>& fre, const std::vector<double>& fim,
                                std::size_t channels, std::span<const double> lat_weight,
                                int table, std::span<double> re, std::span<double> im) const {
  const std::size_t nlat = grid_.nlat();
  const int m_max = trunc_.m_max;
  const bool wide = channels >= kWideChannels;
  const std::vector<double>& tab = table == 0 ? ptab_ : dtable_;
  const std::vector<double>& tab_t = table == 0 ? ptab_t_ : dtab_t_;
#pragma omp parallel for schedule(dynamic)
  for (int m = 0; m <= m_max; ++m) {
    const auto mm = static_cast<std::size_t>(m);
    const std::size_t rows = static_cast<std::size_t>(trunc_.n_max - m + 1);
    const std::size_t out0 = mode_index(trunc_, m, m) * channels;
    const std::span<const double> t(tab.data() + dm_offsets_[mm] * nlat, rows * nlat);
    const std::span<const double> tt(tab_t.data() + dm_offsets_[mm] * nlat, rows * nlat);
    std::vector<double> w(nlat * channels), wt(channels * nlat), outt(channels * rows);
    for (int part = 0; part < 2; ++part) {
      const std::vector<double>& src = part == 0 ? fre : fim;
      std::span<double> dst = (part == 0 ? re : im).subspan(out0, rows * channels);
      for (std::size_t i = 0; i < nlat; ++i)
        for (std::size_t c = 0; c < channels; ++c)
          w[i * channels + c] = lat_weight[i] * src[(mm * nlat + i) * channels + c];
      if (wide) {
        kernels::matmul(t, w, dst, rows, nlat, channels);
      } else {
        kernels::transpose(w, wt, nlat, channels);
        kernels::matmul(wt, tt, outt, channels, nlat, rows);
        kernels::transpose(outt, dst, channels, rows);
      }
    }
  }
}

void ShtPlan::legendre_synthesis(std::span<const double> re, std::span<const double> im,
                                 std::size_t channels, int table, std::vector<double>& gre,
                                 std::vector<double>& gim) const {
  const std::size_t nlat = grid_.nlat();
  const std::size_t mcount = static_cast<std::size_t>(trunc_.m_max) + 1;
  gre.assign(mcount * nlat * channels, 0.0);
  gim.assign(mcount * nlat * channels, 0.0);
  const int m_max = trunc_.m_max;
  const bool wide = channels >= kWideChannels;
  const std::vector<double>& tab = table == 0 ? ptab_ : dtable_;
  const std::vector<double>& tab_t = table == 0 ? ptab_t_ : dtab_t_;
#pragma omp parallel for schedule(dynamic)
  for (int m = 0; m <= m_max; ++m) {
    const auto mm = static_cast<std::size_t>(m);
    const std::size_t rows = static_cast<std::size_t>(trunc_.n_max - m + 1);
    const std::size_t in0 = mode_index(trunc_, m, m) * channels;
    const std::span<const double> t(tab.data() + dm_offsets_[mm] * nlat, rows * nlat);
    const std::span<const double> tt(tab_t.data() + dm_offsets_[mm] * nlat, rows * nlat);
    std::vector<double> ct(channels * rows), gt(channels * nlat);
    for (int part = 0; part < 2; ++part) {
      const std::span<const double> src = (part == 0 ? re : im).subspan(in0, rows * channels);
      std::span<double> dst((part == 0 ? gre : gim).data() + mm * nlat * channels, nlat * channels);
      if (wide) {
        kernels::matmul(tt, src, dst, nlat, rows, channels);
      } else {
        kernels::transpose(src, ct, rows, channels);
        kernels::matmul(ct, t, gt, channels, rows, nlat);
        kernels::transpose(gt, dst, channels, nlat);
      }
    }
  }
}

void ShtPlan::analysis(std::span<const double> grid, std::size_t channels, std::span<double> re,
                       std::span<double> im, std::span<const double> lat_weight,
                       std::span<const double> m_scale) const {
  std::vector<double> fre, fim;
  fourier_analysis(grid, channels, ones_lat_, fre, fim);
  legendre_analysis(fre, fim, channels, lat_weight, 0, re, im);
  const std::size_t nm = num_modes();
  for (std::size_t k = 0; k < nm; ++k) {
    const double s = m_scale[static_cast<std::size_t>(modes_.order[k])];
    if (s == 1.0) continue;
    for (std::size_t c = 0; c < channels; ++c) {
      re[k * channels + c] *= s;
      im[k * channels + c] *= s;
    }
  }
}

void ShtPlan::synthesis(std::span<const double> re, std::span<const double> im,
                        std::size_t channels, std::span<double> grid,
                        std::span<const double> lat_scale, std::span<const double> m_scale) const {
  std::vector<double> gre, gim;
  legendre_synthesis(re, im, channels, 0, gre, gim);
  fourier_synthesis(gre, gim, channels, lat_scale, m_scale, grid);
}

void ShtPlan::forward(std::span<const double> grid, std::size_t channels, std::span<double> re,
                      std::span<double> im) const {
  analysis(grid, channels, re, im, fwd_lat_w_, ones_m_);
}

void ShtPlan::inverse(std::span<const double> re, std::span<const double> im,
                      std::size_t channels, std::span<double> grid) const {
  synthesis(re, im, channels, grid, ones_lat_, real_m_);
}

void ShtPlan::forward_adjoint(std::span<const double> re, std::span<const double> im,
                              std::size_t channels, std::span<double> grid) const {
  synthesis(re, im, channels, grid, fwd_lat_w_, ones_m_);
}

void ShtPlan::inverse_adjoint(std::span<const double> grid, std::size_t channels,
                              std::span<double> re, std::span<double> im) const {
  analysis(grid, channels, re, im, ones_lat_, real_m_);
}

void ShtPlan::vortdiv_from_uv(std::span<const double> u, std::span<const double> v,
                              std::size_t channels, std::span<double> zeta_re,
                              std::span<double> zeta_im, std::span<double> delta_re,
                              std::span<double> delta_im) const {
  const std::size_t nlat = grid_.nlat();
  const std::size_t nm = num_modes();
  const double a = grid_.radius();
  // U = u cos(lat), V = v cos(lat), longitude analysis scaled by dlon
  std::vector<double> coslat(nlat), w_over(nlat);
  for (std::size_t i = 0; i < nlat; ++i) {
    const double x = grid_.colat_nodes()[i];
    coslat[i] = std::sqrt((1.0 - x) * (1.0 + x));
    w_over[i] = grid_.quad_weights()[i] / ((1.0 - x) * (1.0 + x)) / a;
  }
  std::vector<double> lat_s(nlat);
  for (std::size_t i = 0; i < nlat; ++i) lat_s[i] = coslat[i] * grid_.dlon();
  std::vector<double> ure, uim, vre, vim;
  fourier_analysis(u, channels, lat_s, ure, uim);
  fourier_analysis(v, channels, lat_s, vre, vim);

  std::vector<double> pu_re(nm * channels), pu_im(nm * channels), pv_re(nm * channels),
      pv_im(nm * channels), hu_re(nm * channels), hu_im(nm * channels), hv_re(nm * channels),
      hv_im(nm * channels);
  legendre_analysis(ure, uim, channels, w_over, 0, pu_re, pu_im);
  legendre_analysis(vre, vim, channels, w_over, 0, pv_re, pv_im);
  legendre_analysis(ure, uim, channels, w_over, 1, hu_re, hu_im);
  legendre_analysis(vre, vim, channels, w_over, 1, hv_re, hv_im);

  // zeta = i m [V P] + [U H];  delta = i m [U P] - [V H]
  for (std::size_t k = 0; k < nm; ++k) {
    const double m = modes_.order[k];
    for (std::size_t c = 0; c < channels; ++c) {
      const std::size_t q = k * channels + c;
      zeta_re[q] = -m * pv_im[q] + hu_re[q];
      zeta_im[q] = m * pv_re[q] + hu_im[q];
      delta_re[q] = -m * pu_im[q] - hv_re[q];
      delta_im[q] = m * pu_re[q] - hv_im[q];
    }
  }
}

void ShtPlan::uv_from_vortdiv(std::span<const double> zeta_re, std::span<const double> zeta_im,
                              std::span<const double> delta_re, std::span<const double> delta_im,
                              std::size_t channels, std::span<double> u,
                              std::span<double> v) const {
  const std::size_t nlat = grid_.nlat();
  const std::size_t nm = num_modes();
  const double a = grid_.radius();
  // streamfunction and velocity potential, already divided by a
  std::vector<double> psi_re(nm * channels), psi_im(nm * channels), chi_re(nm * channels),
      chi_im(nm * channels);
  for (std::size_t k = 0; k < nm; ++k) {
    const double n = modes_.degree[k];
    const double f = n == 0 ? 0.0 : -a / (n * (n + 1.0));
    for (std::size_t c = 0; c < channels; ++c) {
      const std::size_t q = k * channels + c;
      psi_re[q] = f * zeta_re[q];
      psi_im[q] = f * zeta_im[q];
      chi_re[q] = f * delta_re[q];
      chi_im[q] = f * delta_im[q];
    }
  }
  // U_m = sum_n [-psi H + i m chi P],  V_m = sum_n [i m psi P + chi H]
  std::vector<double> ipsi_re(nm * channels), ipsi_im(nm * channels), ichi_re(nm * channels),
      ichi_im(nm * channels);
  for (std::size_t k = 0; k < nm; ++k) {
    const double m = modes_.order[k];
    for (std::size_t c = 0; c < channels; ++c) {
      const std::size_t q = k * channels + c;
      ipsi_re[q] = -m * psi_im[q];
      ipsi_im[q] = m * psi_re[q];
      ichi_re[q] = -m * chi_im[q];
      ichi_im[q] = m * chi_re[q];
    }
  }
  std::vector<double> a_re, a_im, b_re, b_im, c_re, c_im, d_re, d_im;
  legendre_synthesis(psi_re, psi_im, channels, 1, a_re, a_im);    // psi H
  legendre_synthesis(ichi_re, ichi_im, channels, 0, b_re, b_im);  // i m chi P
  legendre_synthesis(ipsi_re, ipsi_im, channels, 0, c_re, c_im);  // i m psi P
  legendre_synthesis(chi_re, chi_im, channels, 1, d_re, d_im);    // chi H
  for (std::size_t q = 0; q < a_re.size(); ++q) {
    a_re[q] = b_re[q] - a_re[q];
    a_im[q] = b_im[q] - a_im[q];
    c_re[q] += d_re[q];
    c_im[q] += d_im[q];
  }
  std::vector<double> inv_cos(nlat);
  for (std::size_t i = 0; i < nlat; ++i) {
    const double x = grid_.colat_nodes()[i];
    inv_cos[i] = 1.0 / std::sqrt((1.0 - x) * (1.0 + x));
  }
  fourier_synthesis(a_re, a_im, channels, inv_cos, real_m_, u);
  fourier_synthesis(c_re, c_im, channels, inv_cos, real_m_, v);
}

std::vector<double> to_channel_last(const GridField& f) {
  std::vector<double> out(f.values.size());
  const std::size_t pts = f.nlat * f.nlon;
  for (std::size_t c = 0; c < f.channels; ++c)
    for (std::size_t p = 0; p < pts; ++p) out[p * f.channels + c] = f.values[c * pts + p];
  return out;
}

GridField from_channel_last(std::span<const double> data, std::size_t channels, std::size_t nlat,
                            std::size_t nlon) {
  GridField f(channels, nlat, nlon);
  const std::size_t pts = nlat * nlon;
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t p = 0; p < pts; ++p) f.values[c * pts + p] = data[p * channels + c];
  return f;
}

namespace {

void check_field(const ShtPlan& plan, const GridField& f) {
  if (f.nlat != plan.grid().nlat() || f.nlon != plan.grid().nlon()) {
    std::ostringstream os;
    os << "field is " << f.nlat << "x" << f.nlon << " but grid is " << plan.grid().nlat() << "x"
       << plan.grid().nlon();
    throw std::invalid_argument(os.str());
  }
  if (!f.all_finite()) throw std::invalid_argument("sht_forward: field contains non-finite values");
}

}  // namespace

SpectralCoeffs pack_channel_last(const Truncation& t, std::size_t channels, const std::vector<double>& re,
                    const std::vector<double>& im) {
  SpectralCoeffs out(t, channels);
  const std::size_t nm = t.num_modes();
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t k = 0; k < nm; ++k)
      out.coeffs[c * nm + k] = {re[k * channels + c], im[k * channels + c]};
  return out;
}

void unpack_channel_last(const SpectralCoeffs& s, std::vector<double>& re, std::vector<double>& im) {
  const std::size_t nm = s.trunc.num_modes();
  re.assign(nm * s.channels, 0.0);
  im.assign(nm * s.channels, 0.0);
  for (std::size_t c = 0; c < s.channels; ++c)
    for (std::size_t k = 0; k < nm; ++k) {
      re[k * s.channels + c] = s.coeffs[c * nm + k].real();
      im[k * s.channels + c] = s.coeffs[c * nm + k].imag();
    }
}

SpectralCoeffs sht_forward(const ShtPlan& plan, const GridField& f) {
  check_field(plan, f);
  const auto data = to_channel_last(f);
  std::vector<double> re(plan.num_modes() * f.channels), im(re.size());
  plan.forward(data, f.channels, re, im);
  return pack_channel_last(plan.trunc(), f.channels, re, im);
}

SpectralCoeffs sht_forward(const GridField& f, const SphericalGrid& grid, const Truncation& trunc) {
  return sht_forward(ShtPlan(grid, trunc), f);
}

GridField sht_inverse(const ShtPlan& plan, const SpectralCoeffs& c) {
  if (!(c.trunc == plan.trunc())) throw std::invalid_argument("sht_inverse: truncation mismatch");
  std::vector<double> re, im;
  unpack_channel_last(c, re, im);
  std::vector<double> data(plan.num_points() * c.channels);
  plan.inverse(re, im, c.channels, data);
  return from_channel_last(data, c.channels, plan.grid().nlat(), plan.grid().nlon());
}

GridField sht_inverse(const SpectralCoeffs& c, const SphericalGrid& grid) {
  return sht_inverse(ShtPlan(grid, c.trunc), c);
}

SpectralCoeffs spectral_laplacian(const SpectralCoeffs& c, double radius) {
  if (!(radius > 0.0)) throw std::invalid_argument("spectral_laplacian: radius must be positive");
  SpectralCoeffs out = c;
  const auto modes = mode_table(c.trunc);
  const std::size_t nm = c.trunc.num_modes();
  for (std::size_t ch = 0; ch < c.channels; ++ch)
    for (std::size_t k = 0; k < nm; ++k) {
      const double n = modes.degree[k];
      out.coeffs[ch * nm + k] *= -n * (n + 1.0) / (radius * radius);
    }
  return out;
}

SpectralCoeffs inv_spectral_laplacian(const SpectralCoeffs& c, double radius) {
  if (!(radius > 0.0)) throw std::invalid_argument("inv_spectral_laplacian: radius must be positive");
  SpectralCoeffs out = c;
  const auto modes = mode_table(c.trunc);
  const std::size_t nm = c.trunc.num_modes();
  for (std::size_t ch = 0; ch < c.channels; ++ch)
    for (std::size_t k = 0; k < nm; ++k) {
      const double n = modes.degree[k];
      out.coeffs[ch * nm + k] = n == 0 ? 0.0 : out.coeffs[ch * nm + k] * (-(radius * radius) / (n * (n + 1.0)));
    }
  return out;
}

std::pair<GridField, GridField> uv_from_vortdiv(const SpectralCoeffs& zeta,
                                                const SpectralCoeffs& delta,
                                                const SphericalGrid& grid) {
  if (!(zeta.trunc == delta.trunc) || zeta.channels != delta.channels)
    throw std::invalid_argument("uv_from_vortdiv: vorticity and divergence must share truncation");
  ShtPlan plan(grid, zeta.trunc);
  std::vector<double> zr, zi, dr, di;
  unpack_channel_last(zeta, zr, zi);
  unpack_channel_last(delta, dr, di);
  std::vector<double> u(grid.size() * zeta.channels), v(u.size());
  plan.uv_from_vortdiv(zr, zi, dr, di, zeta.channels, u, v);
  return {from_channel_last(u, zeta.channels, grid.nlat(), grid.nlon()),
          from_channel_last(v, zeta.channels, grid.nlat(), grid.nlon())};
}

std::pair<SpectralCoeffs, SpectralCoeffs> vortdiv_from_uv(const GridField& u, const GridField& v,
                                                          const SphericalGrid& grid,
                                                          const Truncation& trunc) {
  ShtPlan plan(grid, trunc);
  check_field(plan, u);
  check_field(plan, v);
  if (u.channels != v.channels) throw std::invalid_argument("vortdiv_from_uv: channel mismatch");
  const auto ud = to_channel_last(u);
  const auto vd = to_channel_last(v);
  const std::size_t n = plan.num_modes() * u.channels;
  std::vector<double> zr(n), zi(n), dr(n), di(n);
  plan.vortdiv_from_uv(ud, vd, u.channels, zr, zi, dr, di);
  return {pack_channel_last(trunc, u.channels, zr, zi), pack_channel_last(trunc, u.channels, dr, di)};
}

SpectralCoeffs retruncate(const SpectralCoeffs& c, const Truncation& trunc) {
  trunc.validate();
  SpectralCoeffs out(trunc, c.channels);
  for (std::size_t ch = 0; ch < c.channels; ++ch)
    for (int m = 0; m <= std::min(trunc.m_max, c.trunc.m_max); ++m)
      for (int n = m; n <= std::min(trunc.n_max, c.trunc.n_max); ++n) out.at(ch, n, m) = c.at(ch, n, m);
  return out;
}

GridField resample(const GridField& f, const SphericalGrid& from, const SphericalGrid& to,
                   const Truncation& trunc) {
  const auto c = sht_forward(f, from, trunc);
  return sht_inverse(c, to);
}

std::vector<double> degree_spectrum(const SpectralCoeffs& c, std::size_t channel) {
  std::vector<double> e(static_cast<std::size_t>(c.trunc.n_max) + 1, 0.0);
  for (int m = 0; m <= c.trunc.m_max; ++m)
    for (int n = m; n <= c.trunc.n_max; ++n) {
      const double mult = m == 0 ? 1.0 : 2.0;
      e[static_cast<std::size_t>(n)] += 0.5 * mult * std::norm(c.at(channel, n, m));
    }
  return e;
}

std::vector<double> kinetic_energy_spectrum(const SpectralCoeffs& u, const SpectralCoeffs& v,
                                            std::size_t channel_u, std::size_t channel_v) {
  if (!(u.trunc == v.trunc)) throw std::invalid_argument("kinetic_energy_spectrum: truncation mismatch");
  auto eu = degree_spectrum(u, channel_u);
  const auto ev = degree_spectrum(v, channel_v);
  for (std::size_t n = 0; n < eu.size(); ++n) eu[n] += ev[n];
  return eu;
}

double grid_energy(const GridField& f, const SphericalGrid& grid, std::size_t channel) {
  double total = 0.0;
  for (std::size_t i = 0; i < grid.nlat(); ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < grid.nlon(); ++j) {
      const double x = f.at(channel, i, j);
      row += x * x;
    }
    total += grid.quad_weights()[i] * grid.dlon() * row;
  }
  return total;
}

double spectral_energy(const SpectralCoeffs& c, std::size_t channel) {
  double total = 0.0;
  for (int m = 0; m <= c.trunc.m_max; ++m)
    for (int n = m; n <= c.trunc.n_max; ++n)
      total += (m == 0 ? 1.0 : 2.0) * std::norm(c.at(channel, n, m));
  return total;
}

}  // namespace shno::sht
