#include "shno/swe.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "shno/rng.hpp"

namespace shno::swe {

using sht::GridField;
using sht::ShtPlan;
using sht::SpectralCoeffs;
using sht::SphericalGrid;
using sht::Truncation;

void PlanetParams::validate() const {
  if (!(radius > 0.0)) throw std::invalid_argument("planet radius must be positive");
  if (!(rotation_rate >= 0.0)) throw std::invalid_argument("rotation rate must be non-negative");
  if (!(mean_geopotential > 0.0)) throw std::invalid_argument("mean geopotential must be positive");
  if (!(hyperdiffusion_coeff >= 0.0)) throw std::invalid_argument("hyperdiffusion coefficient must be non-negative");
  if (hyperdiffusion_order < 1) throw std::invalid_argument("hyperdiffusion order must be >= 1");
}

double hyperdiffusion_for_efold(const Truncation& trunc, double radius, double efold_seconds,
                                int order) {
  if (!(efold_seconds > 0.0)) throw std::invalid_argument("hyperdiffusion e-folding time must be positive");
  const double n = trunc.n_max;
  const double eig = n * (n + 1.0) / (radius * radius);
  return 1.0 / (efold_seconds * std::pow(eig, order));
}

SWEState SWEState::zeros(const Truncation& t) {
  return {SpectralCoeffs(t, 1), SpectralCoeffs(t, 1), SpectralCoeffs(t, 1), 0.0};
}

bool SWEState::all_finite() const {
  for (const auto* c : {&zeta, &delta, &phi})
    for (const auto& z : c->coeffs)
      if (!std::isfinite(z.real()) || !std::isfinite(z.imag())) return false;
  return true;
}

GridField coriolis_field(const SphericalGrid& grid, double omega) {
  GridField f(1, grid.nlat(), grid.nlon());
  for (std::size_t i = 0; i < grid.nlat(); ++i) {
    // sin(lat) is the quadrature node itself; odd symmetry is exact
    const double v = 2.0 * omega * grid.colat_nodes()[i];
    for (std::size_t j = 0; j < grid.nlon(); ++j) f.at(0, i, j) = v;
  }
  return f;
}

namespace {

void require_finite(std::span<const double> v, const char* name) {
  for (double x : v)
    if (!std::isfinite(x)) throw std::runtime_error(std::string("swe: non-finite values in ") + name);
}

// out[k] = fn(k, out[k], t[k]) over all three prognostics
template <class F>
void combine(SWEState& out, const Tendency& t, F&& fn) {
  auto one = [&](SpectralCoeffs& x, const SpectralCoeffs& y) {
    for (std::size_t k = 0; k < x.coeffs.size(); ++k) x.coeffs[k] = fn(k, x.coeffs[k], y.coeffs[k]);
  };
  one(out.zeta, t.dzeta);
  one(out.delta, t.ddelta);
  one(out.phi, t.dphi);
}

std::vector<double> decay_factors(const std::vector<double>& rate, double h) {
  std::vector<double> e(rate.size());
  for (std::size_t k = 0; k < rate.size(); ++k) e[k] = std::exp(-rate[k] * h);
  return e;
}

}  // namespace

SweSolver::SweSolver(const SphericalGrid& grid, const Truncation& trunc, const PlanetParams& p)
    : grid_(grid.nlat(), grid.nlon(), p.radius), plan_(grid_, trunc), params_(p) {
  params_.validate();
  if (2 * grid_.nlat() < 3 * static_cast<std::size_t>(trunc.n_max)) {
    std::ostringstream os;
    os << "swe: grid " << grid_.nlat() << "x" << grid_.nlon() << " cannot dealias quadratic terms at n_max="
       << trunc.n_max;
    throw std::invalid_argument(os.str());
  }
  coriolis_.resize(grid_.nlat());
  for (std::size_t i = 0; i < grid_.nlat(); ++i) coriolis_[i] = 2.0 * p.rotation_rate * grid_.colat_nodes()[i];
  const auto& modes = plan_.modes();
  damping_.resize(modes.degree.size());
  for (std::size_t k = 0; k < damping_.size(); ++k) {
    const double n = modes.degree[k];
    damping_[k] = p.hyperdiffusion_coeff * std::pow(n * (n + 1.0) / (p.radius * p.radius), p.hyperdiffusion_order);
  }
}

Tendency SweSolver::nonlinear_tendency(const SWEState& s) const {
  const Truncation& t = plan_.trunc();
  if (!(s.zeta.trunc == t) || !(s.delta.trunc == t) || !(s.phi.trunc == t))
    throw std::invalid_argument("swe: state truncation does not match the solver");
  const std::size_t nm = plan_.num_modes();
  const std::size_t np = plan_.num_points();
  const std::size_t nlon = grid_.nlon();
  const double a = params_.radius;
  const double phibar = params_.mean_geopotential;

  std::vector<double> zr, zi, dr, di, pr, pi;
  sht::unpack_channel_last(s.zeta, zr, zi);
  sht::unpack_channel_last(s.delta, dr, di);
  sht::unpack_channel_last(s.phi, pr, pi);

  std::vector<double> u(np), v(np);
  plan_.uv_from_vortdiv(zr, zi, dr, di, 1, u, v);
  require_finite(u, "u");
  require_finite(v, "v");

  // vorticity and geopotential on the grid in one two-channel synthesis
  std::vector<double> cre(2 * nm), cim(2 * nm), zp(2 * np);
  for (std::size_t k = 0; k < nm; ++k) {
    cre[2 * k] = zr[k];
    cim[2 * k] = zi[k];
    cre[2 * k + 1] = pr[k];
    cim[2 * k + 1] = pi[k];
  }
  plan_.inverse(cre, cim, 2, zp);
  require_finite(zp, "zeta/phi");

  std::vector<double> fx(2 * np), fy(2 * np), ke(np);
  for (std::size_t q = 0; q < np; ++q) {
    const double eta = zp[2 * q] + coriolis_[q / nlon];
    const double dphi = zp[2 * q + 1] - phibar;
    fx[2 * q] = eta * u[q];
    fy[2 * q] = eta * v[q];
    fx[2 * q + 1] = dphi * u[q];
    fy[2 * q + 1] = dphi * v[q];
    ke[q] = 0.5 * (u[q] * u[q] + v[q] * v[q]);
  }
  require_finite(fx, "eta*u / phi'*u flux");
  require_finite(fy, "eta*v / phi'*v flux");
  require_finite(ke, "kinetic energy");

  std::vector<double> curl_re(2 * nm), curl_im(2 * nm), div_re(2 * nm), div_im(2 * nm);
  plan_.vortdiv_from_uv(fx, fy, 2, curl_re, curl_im, div_re, div_im);
  std::vector<double> kre(nm), kim(nm);
  plan_.forward(ke, 1, kre, kim);

  Tendency out{SpectralCoeffs(t, 1), SpectralCoeffs(t, 1), SpectralCoeffs(t, 1)};
  const auto& modes = plan_.modes();
  for (std::size_t k = 0; k < nm; ++k) {
    const double n = modes.degree[k];
    const double lap = n * (n + 1.0) / (a * a);
    out.dzeta.coeffs[k] = {-div_re[2 * k], -div_im[2 * k]};
    out.ddelta.coeffs[k] = {curl_re[2 * k] + lap * (pr[k] + kre[k]), curl_im[2 * k] + lap * (pi[k] + kim[k])};
    out.dphi.coeffs[k] = {-div_re[2 * k + 1] - phibar * dr[k], -div_im[2 * k + 1] - phibar * di[k]};
  }
  return out;
}

Tendency SweSolver::tendency(const SWEState& s) const {
  Tendency out = nonlinear_tendency(s);
  auto damp = [&](SpectralCoeffs& d, const SpectralCoeffs& x) {
    for (std::size_t k = 0; k < d.coeffs.size(); ++k) d.coeffs[k] -= damping_[k] * x.coeffs[k];
  };
  damp(out.dzeta, s.zeta);
  damp(out.ddelta, s.delta);
  damp(out.dphi, s.phi);
  return out;
}

double SweSolver::max_stable_dt(const SWEState& s) const {
  const auto [u, v] = winds(s);
  const auto phi = geopotential(s);
  double vmax = 0.0, phimax = 0.0;
  for (std::size_t q = 0; q < u.values.size(); ++q) {
    vmax = std::max(vmax, std::hypot(u.values[q], v.values[q]));
    phimax = std::max(phimax, phi.values[q]);
  }
  const double c = vmax + std::sqrt(std::max(phimax, 0.0));
  const double n = plan_.trunc().n_max;
  const double k = std::sqrt(n * (n + 1.0)) / params_.radius;
  if (c * k == 0.0) return std::numeric_limits<double>::infinity();
  return 0.7 / (c * k);
}

void SweSolver::reset() {
  history_.clear();
  history_dt_ = 0.0;
}

SWEState SweSolver::rk3_step(const SWEState& s, double dt, const Tendency& k1) const {
  const auto e_half = decay_factors(damping_, 0.5 * dt);
  const auto e_full = decay_factors(damping_, dt);
  const std::size_t nm = damping_.size();

  SWEState ua = s;
  combine(ua, k1, [&](std::size_t k, auto x, auto y) { return e_half[k % nm] * (x + 0.5 * dt * y); });
  const Tendency k2 = nonlinear_tendency(ua);

  SWEState ub = s;
  combine(ub, k1, [&](std::size_t k, auto x, auto y) { return e_full[k % nm] * (x - dt * y); });
  combine(ub, k2, [&](std::size_t k, auto x, auto y) { return x + 2.0 * dt * e_half[k % nm] * y; });
  const Tendency k3 = nonlinear_tendency(ub);

  SWEState out = s;
  combine(out, k1, [&](std::size_t k, auto x, auto y) { return e_full[k % nm] * (x + dt / 6.0 * y); });
  combine(out, k2, [&](std::size_t k, auto x, auto y) { return x + dt / 6.0 * 4.0 * e_half[k % nm] * y; });
  combine(out, k3, [&](std::size_t, auto x, auto y) { return x + dt / 6.0 * y; });
  return out;
}

SWEState SweSolver::step(const SWEState& s, double dt) {
  if (!(dt > 0.0)) throw std::invalid_argument("swe: dt must be positive");
  if (!s.all_finite()) throw std::runtime_error("swe: non-finite state before step");
  const double limit = max_stable_dt(s);
  if (dt > limit) {
    std::ostringstream os;
    os << "swe: dt=" << dt << " s violates the CFL limit " << limit << " s";
    throw std::runtime_error(os.str());
  }
  if (dt != history_dt_ || s.time != last_time_) reset();
  history_dt_ = dt;

  Tendency n0 = nonlinear_tendency(s);
  SWEState out;
  if (history_.size() < 2) {
    out = rk3_step(s, dt, n0);
  } else {
    const std::size_t nm = damping_.size();
    const auto e1 = decay_factors(damping_, dt);
    const auto e2 = decay_factors(damping_, 2.0 * dt);
    const auto e3 = decay_factors(damping_, 3.0 * dt);
    out = s;
    combine(out, n0, [&](std::size_t k, auto x, auto y) { return e1[k % nm] * (x + dt * 23.0 / 12.0 * y); });
    combine(out, history_[0], [&](std::size_t k, auto x, auto y) { return x - dt * 16.0 / 12.0 * e2[k % nm] * y; });
    combine(out, history_[1], [&](std::size_t k, auto x, auto y) { return x + dt * 5.0 / 12.0 * e3[k % nm] * y; });
  }
  history_.insert(history_.begin(), std::move(n0));
  if (history_.size() > 2) history_.pop_back();
  out.time = s.time + dt;
  last_time_ = out.time;
  if (!out.all_finite()) throw std::runtime_error("swe: state became non-finite");
  return out;
}

std::pair<GridField, GridField> SweSolver::winds(const SWEState& s) const {
  std::vector<double> zr, zi, dr, di;
  sht::unpack_channel_last(s.zeta, zr, zi);
  sht::unpack_channel_last(s.delta, dr, di);
  GridField u(1, grid_.nlat(), grid_.nlon()), v(1, grid_.nlat(), grid_.nlon());
  plan_.uv_from_vortdiv(zr, zi, dr, di, 1, u.values, v.values);
  return {std::move(u), std::move(v)};
}

GridField SweSolver::geopotential(const SWEState& s) const { return sht::sht_inverse(plan_, s.phi); }

double SweSolver::total_energy(const SWEState& s) const {
  const auto [u, v] = winds(s);
  const auto phi = geopotential(s);
  double total = 0.0;
  for (std::size_t i = 0; i < grid_.nlat(); ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < grid_.nlon(); ++j) {
      const double p = phi.at(0, i, j);
      const double uu = u.at(0, i, j), vv = v.at(0, i, j);
      row += 0.5 * p * (uu * uu + vv * vv) + 0.5 * p * p;
    }
    total += grid_.quad_weights()[i] * grid_.dlon() * row;
  }
  return total;
}

std::pair<double, double> area_mean_std(const GridField& f, const SphericalGrid& grid,
                                        std::size_t channel) {
  double mean = 0.0;
  for (std::size_t i = 0; i < grid.nlat(); ++i)
    for (std::size_t j = 0; j < grid.nlon(); ++j)
      mean += grid.quad_weights()[i] * grid.dlon() * f.at(channel, i, j);
  mean /= 4.0 * std::numbers::pi;
  double var = 0.0;
  for (std::size_t i = 0; i < grid.nlat(); ++i)
    for (std::size_t j = 0; j < grid.nlon(); ++j) {
      const double d = f.at(channel, i, j) - mean;
      var += grid.quad_weights()[i] * grid.dlon() * d * d;
    }
  return {mean, std::sqrt(var / (4.0 * std::numbers::pi))};
}

namespace {

// Isotropic field with per-degree variance ~ (1 + n)^-p and no mean.
SpectralCoeffs grf_coeffs(const Truncation& t, double slope, Rng& rng) {
  SpectralCoeffs c(t, 1);
  for (int m = 0; m <= t.m_max; ++m)
    for (int n = m; n <= t.n_max; ++n) {
      const double amp = std::pow(1.0 + n, -0.5 * slope);
      const double re = rng.normal();
      const double im = rng.normal();
      if (n == 0) continue;
      c.at(0, n, m) = m == 0 ? std::complex<double>(amp * re, 0.0)
                             : std::complex<double>(amp * re, amp * im) / std::numbers::sqrt2;
    }
  return c;
}

double rescale_factor(const GridField& f, const SphericalGrid& grid, double target) {
  const double sd = area_mean_std(f, grid).second;
  return sd > 0.0 ? target / sd : 0.0;
}

}  // namespace

SWEState grf_initial_condition(const GRFInitConfig& cfg, const Truncation& trunc,
                               const SphericalGrid& grid_in, const PlanetParams& p) {
  if (!(cfg.phi_avg > cfg.phi_std) || cfg.phi_std < 0.0)
    throw std::invalid_argument("grf: need phi_avg > phi_std >= 0");
  if (cfg.wind_std < 0.0) throw std::invalid_argument("grf: wind_std must be non-negative");
  const SphericalGrid grid(grid_in.nlat(), grid_in.nlon(), p.radius);
  const ShtPlan plan(grid, trunc);
  SWEState s = SWEState::zeros(trunc);

  Rng rng_phi(cfg.seed, 0), rng_u(cfg.seed, 1), rng_v(cfg.seed, 2);
  auto cphi = grf_coeffs(trunc, cfg.spectral_slope, rng_phi);
  const double kphi = rescale_factor(sht::sht_inverse(plan, cphi), grid, cfg.phi_std);
  for (auto& z : cphi.coeffs) z *= kphi;
  cphi.at(0, 0, 0) = cfg.phi_avg * std::sqrt(4.0 * std::numbers::pi);
  s.phi = cphi;

  auto u = sht::sht_inverse(plan, grf_coeffs(trunc, cfg.spectral_slope, rng_u));
  auto v = sht::sht_inverse(plan, grf_coeffs(trunc, cfg.spectral_slope, rng_v));
  const double ku = rescale_factor(u, grid, cfg.wind_std);
  const double kv = rescale_factor(v, grid, cfg.wind_std);
  for (double& x : u.values) x *= ku;
  for (double& x : v.values) x *= kv;
  auto [zeta, delta] = sht::vortdiv_from_uv(u, v, grid, trunc);
  // winds never carry a mean vorticity or divergence
  zeta.at(0, 0, 0) = 0.0;
  delta.at(0, 0, 0) = 0.0;
  s.zeta = std::move(zeta);
  s.delta = std::move(delta);
  return s;
}

GridField TrajectoryDataset::field(std::size_t member, std::size_t time) const {
  GridField f(channels(), nlat, nlon);
  std::copy(snapshot(member, time), snapshot(member, time) + snapshot_size(), f.values.begin());
  return f;
}

TrajectoryDataset generate_dataset(const DatasetConfig& cfg) {
  if (cfg.members < 1) throw std::invalid_argument("gen-data: members must be >= 1");
  if (!(cfg.sim_hours > cfg.spinup_hours) || cfg.spinup_hours < 0.0)
    throw std::invalid_argument("gen-data: need sim_hours > spinup_hours >= 0");
  if (!(cfg.snapshot_interval_hours > 0.0)) throw std::invalid_argument("gen-data: snapshot interval must be positive");
  if (cfg.output_nlat > cfg.solver_nlat || cfg.output_nlon > cfg.solver_nlon)
    throw std::invalid_argument("gen-data: output grid must not exceed the solver grid");
  const double kept = (cfg.sim_hours - cfg.spinup_hours) / cfg.snapshot_interval_hours;
  const double skip = cfg.spinup_hours / cfg.snapshot_interval_hours;
  if (std::abs(kept - std::round(kept)) > 1e-9 || std::abs(skip - std::round(skip)) > 1e-9)
    throw std::invalid_argument("gen-data: spin-up and retained span must be whole snapshot intervals");

  const auto n_kept = static_cast<std::size_t>(std::llround(kept)) + 1;
  const auto n_skip = static_cast<std::size_t>(std::llround(skip));
  const double interval = cfg.snapshot_interval_hours * 3600.0;
  const auto substeps = static_cast<std::size_t>(std::ceil(interval / cfg.max_dt - 1e-12));
  const double dt = interval / static_cast<double>(substeps);

  const SphericalGrid solver_grid(cfg.solver_nlat, cfg.solver_nlon, kEarthRadius);
  const SphericalGrid out_grid(cfg.output_nlat, cfg.output_nlon, kEarthRadius);
  const Truncation solver_trunc = Truncation::for_grid(cfg.solver_nlat, cfg.solver_nlon);
  const Truncation out_trunc = Truncation::for_grid(cfg.output_nlat, cfg.output_nlon);
  const ShtPlan down(solver_grid, out_trunc);
  const ShtPlan up(out_grid, out_trunc);

  PlanetParams base;
  base.hyperdiffusion_order = cfg.hyperdiffusion_order;
  base.hyperdiffusion_coeff = cfg.hyperdiffusion_coeff.value_or(
      hyperdiffusion_for_efold(solver_trunc, base.radius, cfg.hyperdiffusion_efold_hours * 3600.0,
                               cfg.hyperdiffusion_order));

  TrajectoryDataset ds;
  ds.nlat = cfg.output_nlat;
  ds.nlon = cfg.output_nlon;
  ds.n_max = out_trunc.n_max;
  ds.radius = kEarthRadius;
  ds.members = cfg.members;
  ds.times = n_kept;
  ds.interval_seconds = interval;
  ds.start_seconds = cfg.spinup_hours * 3600.0;
  ds.values.assign(ds.members * ds.times * ds.snapshot_size(), 0.0);

  std::vector<std::string> errors(cfg.members);
  const std::size_t np_in = solver_grid.size();
  const std::size_t np_out = out_grid.size();
  const std::size_t nm_out = out_trunc.num_modes();

#pragma omp parallel for schedule(dynamic, 1)
  for (std::int64_t mm = 0; mm < static_cast<std::int64_t>(cfg.members); ++mm) {
    const auto member = static_cast<std::size_t>(mm);
    try {
      GRFInitConfig init = cfg.init;
      init.seed = stream_seed(cfg.seed, member);
      PlanetParams p = base;
      p.mean_geopotential = init.phi_avg;
      SWEState s = grf_initial_condition(init, solver_trunc, solver_grid, p);
      SweSolver solver(solver_grid, solver_trunc, p);

      std::vector<double> zre, zim, dre, dim, pre, pim;
      std::vector<double> u(np_in), v(np_in), phi(np_in), full(3 * np_in);
      std::vector<double> cre(3 * nm_out), cim(3 * nm_out), out(3 * np_out);
      for (std::size_t snap = 0; snap < n_skip + n_kept; ++snap) {
        if (snap > 0)
          for (std::size_t k = 0; k < substeps; ++k) s = solver.step(s, dt);
        if (snap < n_skip) continue;
        sht::unpack_channel_last(s.zeta, zre, zim);
        sht::unpack_channel_last(s.delta, dre, dim);
        sht::unpack_channel_last(s.phi, pre, pim);
        solver.plan().uv_from_vortdiv(zre, zim, dre, dim, 1, u, v);
        solver.plan().inverse(pre, pim, 1, phi);
        for (std::size_t q = 0; q < np_in; ++q) {
          full[3 * q] = phi[q] / kGravity;
          full[3 * q + 1] = u[q];
          full[3 * q + 2] = v[q];
        }
        down.forward(full, 3, cre, cim);
        up.inverse(cre, cim, 3, out);
        double* dst = ds.snapshot(member, snap - n_skip);
        for (std::size_t q = 0; q < np_out; ++q)
          for (std::size_t c = 0; c < 3; ++c) dst[c * np_out + q] = out[3 * q + c];
      }
    } catch (const std::exception& e) {
      errors[member] = e.what();
    }
  }
  for (std::size_t m = 0; m < cfg.members; ++m)
    if (!errors[m].empty()) {
      std::ostringstream os;
      os << "gen-data: member " << m << " aborted: " << errors[m];
      throw std::runtime_error(os.str());
    }
  return ds;
}

}  // namespace shno::swe
