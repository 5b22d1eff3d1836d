#pragma once

#include <complex>
#include <cstddef>
#include <span>
#include <utility>
#include <vector>

// Spherical harmonic transforms on Gaussian grids.
//
// Conventions
//   * x = cos(colatitude) = sin(latitude); grid rows run north to south, so
//     the quadrature nodes are strictly decreasing.
//   * Orthonormal complex harmonics with the Condon-Shortley phase:
//       Y_n^m(x, lon) = P_n^m(x) exp(i m lon),  integral of |Y|^2 over the sphere = 1.
//   * Real fields keep only m >= 0; c_{n,-m} = (-1)^m conj(c_{n,m}).
//   * Spectral arrays are packed m-major: for m = 0..m_max, n = m..n_max.
namespace shno::sht {

struct Truncation {
  int n_max = 0;
  int m_max = 0;

  static Truncation triangular(int n) { return {n, n}; }
  /// Largest triangular truncation a grid can carry without aliasing
  /// quadratic products: floor((nlon - 1) / 3).
  static Truncation for_grid(std::size_t nlat, std::size_t nlon);

  std::size_t num_modes() const;
  void validate() const;
  bool operator==(const Truncation&) const = default;
};

/// Flat index of mode (n, m) in the packed layout.
std::size_t mode_index(const Truncation& t, int n, int m);

/// Degree and order of every packed mode, in packing order.
struct ModeTable {
  std::vector<int> degree;
  std::vector<int> order;
};
ModeTable mode_table(const Truncation& t);

struct Quadrature {
  std::vector<double> nodes;    // descending
  std::vector<double> weights;  // sum 2
};

/// Gauss-Legendre nodes (roots of P_n, descending) and weights on [-1, 1].
Quadrature gauss_legendre(std::size_t n);

class SphericalGrid {
 public:
  SphericalGrid(std::size_t nlat, std::size_t nlon, double radius = 1.0);

  std::size_t nlat() const { return nlat_; }
  std::size_t nlon() const { return nlon_; }
  std::size_t size() const { return nlat_ * nlon_; }
  double radius() const { return radius_; }
  double dlon() const;

  std::span<const double> colat_nodes() const { return nodes_; }
  std::span<const double> quad_weights() const { return weights_; }
  std::span<const double> lats_rad() const { return lats_; }
  std::span<const double> lons_rad() const { return lons_; }

  bool operator==(const SphericalGrid& o) const {
    return nlat_ == o.nlat_ && nlon_ == o.nlon_ && radius_ == o.radius_;
  }

 private:
  std::size_t nlat_;
  std::size_t nlon_;
  double radius_;
  std::vector<double> nodes_;
  std::vector<double> weights_;
  std::vector<double> lats_;
  std::vector<double> lons_;
};

/// Real multi-channel field, layout (channel, lat, lon).
struct GridField {
  std::size_t channels = 0;
  std::size_t nlat = 0;
  std::size_t nlon = 0;
  std::vector<double> values;

  GridField() = default;
  GridField(std::size_t c, std::size_t h, std::size_t w, double fill = 0.0)
      : channels(c), nlat(h), nlon(w), values(c * h * w, fill) {}

  double& at(std::size_t c, std::size_t i, std::size_t j) { return values[(c * nlat + i) * nlon + j]; }
  double at(std::size_t c, std::size_t i, std::size_t j) const { return values[(c * nlat + i) * nlon + j]; }
  std::span<double> channel(std::size_t c) { return {values.data() + c * nlat * nlon, nlat * nlon}; }
  std::span<const double> channel(std::size_t c) const { return {values.data() + c * nlat * nlon, nlat * nlon}; }
  bool all_finite() const;
};

struct SpectralCoeffs {
  Truncation trunc;
  std::size_t channels = 0;
  std::vector<std::complex<double>> coeffs;  // (channel, mode)

  SpectralCoeffs() = default;
  SpectralCoeffs(Truncation t, std::size_t c)
      : trunc(t), channels(c), coeffs(c * t.num_modes()) {}

  std::complex<double>& at(std::size_t c, int n, int m) { return coeffs[c * trunc.num_modes() + mode_index(trunc, n, m)]; }
  std::complex<double> at(std::size_t c, int n, int m) const { return coeffs[c * trunc.num_modes() + mode_index(trunc, n, m)]; }
  std::span<std::complex<double>> channel(std::size_t c) { return {coeffs.data() + c * trunc.num_modes(), trunc.num_modes()}; }
  std::span<const std::complex<double>> channel(std::size_t c) const { return {coeffs.data() + c * trunc.num_modes(), trunc.num_modes()}; }
};

/// Normalised associated Legendre functions at a set of points, for
/// 0 <= m <= m_max and m <= n <= n_max + extra_degrees.
class LegendreTable {
 public:
  LegendreTable(const Truncation& trunc, std::span<const double> x, int extra_degrees = 0);

  double operator()(int n, int m, std::size_t i) const { return values_[offset(n, m) + i]; }
  /// Pointer to the run of values for (n, m) over all points.
  const double* row(int n, int m) const { return values_.data() + offset(n, m); }
  std::size_t points() const { return npts_; }
  int top_degree() const { return n_top_; }

 private:
  std::size_t offset(int n, int m) const {
    return (m_offsets_[static_cast<std::size_t>(m)] + static_cast<std::size_t>(n - m)) * npts_;
  }
  int n_top_;
  std::size_t npts_;
  std::vector<std::size_t> m_offsets_;
  std::vector<double> values_;
};

/// Largest n_max the Legendre recurrence accepts.
inline constexpr int kMaxDegree = 1500;

LegendreTable legendre_table(const Truncation& trunc, std::span<const double> x);

/// Precomputed transform between a grid and a truncation. All array
/// arguments are channel-last: grids are [nlat][nlon][C], spectra are
/// [mode][C] with real and imaginary parts in separate arrays.
class ShtPlan {
 public:
  ShtPlan(const SphericalGrid& grid, const Truncation& trunc);

  const SphericalGrid& grid() const { return grid_; }
  const Truncation& trunc() const { return trunc_; }
  std::size_t num_modes() const { return trunc_.num_modes(); }
  std::size_t num_points() const { return grid_.size(); }
  const ModeTable& modes() const { return modes_; }

  /// coeff = sum_i lat_weight[i] P(n,m,i) m_scale[m] sum_j f[i][j] exp(-i m lon_j)
  void analysis(std::span<const double> grid, std::size_t channels, std::span<double> re,
                std::span<double> im, std::span<const double> lat_weight,
                std::span<const double> m_scale) const;
  /// f[i][j] = lat_scale[i] sum_m m_scale[m] Re( sum_n c(n,m) P(n,m,i) exp(i m lon_j) )
  void synthesis(std::span<const double> re, std::span<const double> im, std::size_t channels,
                 std::span<double> grid, std::span<const double> lat_scale,
                 std::span<const double> m_scale) const;

  void forward(std::span<const double> grid, std::size_t channels, std::span<double> re,
               std::span<double> im) const;
  void inverse(std::span<const double> re, std::span<const double> im, std::size_t channels,
               std::span<double> grid) const;
  /// Transposes of forward/inverse with respect to the real inner product
  /// on (grid values) and (re, im) pairs.
  void forward_adjoint(std::span<const double> re, std::span<const double> im,
                       std::size_t channels, std::span<double> grid) const;
  void inverse_adjoint(std::span<const double> grid, std::size_t channels, std::span<double> re,
                       std::span<double> im) const;

  /// Vorticity and divergence spectra of a wind field (u, v on the grid).
  void vortdiv_from_uv(std::span<const double> u, std::span<const double> v, std::size_t channels,
                       std::span<double> zeta_re, std::span<double> zeta_im,
                       std::span<double> delta_re, std::span<double> delta_im) const;
  /// Winds from vorticity and divergence spectra (Helmholtz decomposition).
  void uv_from_vortdiv(std::span<const double> zeta_re, std::span<const double> zeta_im,
                       std::span<const double> delta_re, std::span<const double> delta_im,
                       std::size_t channels, std::span<double> u, std::span<double> v) const;

  std::span<const double> forward_lat_weights() const { return fwd_lat_w_; }
  std::span<const double> unit_m_scale() const { return ones_m_; }
  std::span<const double> real_m_scale() const { return real_m_; }
  std::span<const double> unit_lat_scale() const { return ones_lat_; }

 private:
  void fourier_analysis(std::span<const double> grid, std::size_t channels,
                        std::span<const double> lat_scale, std::vector<double>& fre,
                        std::vector<double>& fim) const;
  void fourier_synthesis(const std::vector<double>& gre, const std::vector<double>& gim,
                         std::size_t channels, std::span<const double> lat_scale,
                         std::span<const double> m_scale, std::span<double> grid) const;
  // table == 0 selects P, table == 1 selects (1 - x^2) dP/dx.
  void legendre_analysis(const std::vector<double>& fre, const std::vector<double>& fim,
                         std::size_t channels, std::span<const double> lat_weight, int table,
                         std::span<double> re, std::span<double> im) const;
  void legendre_synthesis(std::span<const double> re, std::span<const double> im,
                          std::size_t channels, int table, std::vector<double>& gre,
                          std::vector<double>& gim) const;

  SphericalGrid grid_;
  Truncation trunc_;
  ModeTable modes_;
  LegendreTable table_;
  std::vector<std::size_t> dm_offsets_;
  std::vector<double> dtable_;  // (1 - x^2) dP/dx, same layout as ptab_
  std::vector<double> ptab_;    // P per m, [n][lat], n <= n_max
  std::vector<double> ptab_t_;  // same blocks transposed, [lat][n]
  std::vector<double> dtab_t_;
  std::vector<double> dft_;     // [2 (m_max+1)][nlon]
  std::vector<double> dft_t_;
  std::vector<double> fwd_lat_w_;
  std::vector<double> ones_m_;
  std::vector<double> real_m_;
  std::vector<double> ones_lat_;
};

/// (channel, lat, lon) <-> [lat][lon][channel]
std::vector<double> to_channel_last(const GridField& f);
GridField from_channel_last(std::span<const double> data, std::size_t channels, std::size_t nlat,
                            std::size_t nlon);

/// SpectralCoeffs <-> [mode][channel] real/imaginary arrays used by ShtPlan.
SpectralCoeffs pack_channel_last(const Truncation& t, std::size_t channels,
                                 const std::vector<double>& re, const std::vector<double>& im);
void unpack_channel_last(const SpectralCoeffs& s, std::vector<double>& re, std::vector<double>& im);

SpectralCoeffs sht_forward(const GridField& f, const SphericalGrid& grid, const Truncation& trunc);
SpectralCoeffs sht_forward(const ShtPlan& plan, const GridField& f);
GridField sht_inverse(const SpectralCoeffs& c, const SphericalGrid& grid);
GridField sht_inverse(const ShtPlan& plan, const SpectralCoeffs& c);

/// c_{n,m} <- -n(n+1)/a^2 c_{n,m}
SpectralCoeffs spectral_laplacian(const SpectralCoeffs& c, double radius);
/// Inverse Laplacian; the n = 0 mode maps to zero.
SpectralCoeffs inv_spectral_laplacian(const SpectralCoeffs& c, double radius);

std::pair<GridField, GridField> uv_from_vortdiv(const SpectralCoeffs& zeta,
                                                const SpectralCoeffs& delta,
                                                const SphericalGrid& grid);
std::pair<SpectralCoeffs, SpectralCoeffs> vortdiv_from_uv(const GridField& u, const GridField& v,
                                                          const SphericalGrid& grid,
                                                          const Truncation& trunc);

/// Copy onto a different truncation; missing modes are zero.
SpectralCoeffs retruncate(const SpectralCoeffs& c, const Truncation& trunc);
/// Spectral resampling: analyse on `from`, truncate, synthesise on `to`.
GridField resample(const GridField& f, const SphericalGrid& from, const SphericalGrid& to,
                   const Truncation& trunc);

/// E_n = sum_m (1/2) multiplicity(m) |c_{n,m}|^2 for one channel.
std::vector<double> degree_spectrum(const SpectralCoeffs& c, std::size_t channel = 0);
/// Kinetic-energy spectrum from the u and v coefficient sets.
std::vector<double> kinetic_energy_spectrum(const SpectralCoeffs& u, const SpectralCoeffs& v,
                                            std::size_t channel_u = 0, std::size_t channel_v = 0);
/// Quadrature value of the integral of f^2 over the sphere, one channel.
double grid_energy(const GridField& f, const SphericalGrid& grid, std::size_t channel = 0);
/// sum_{n,m} multiplicity(m) |c_{n,m}|^2 for one channel.
double spectral_energy(const SpectralCoeffs& c, std::size_t channel = 0);

}  // namespace shno::sht
