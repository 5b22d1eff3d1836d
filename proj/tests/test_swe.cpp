#include "test_main.hpp"

#include <cmath>
#include <numbers>

#include "shno/rng.hpp"
#include "shno/swe.hpp"

using namespace shno;
using namespace shno::swe;
using sht::GridField;
using sht::SpectralCoeffs;
using sht::SphericalGrid;
using sht::Truncation;

namespace {

double max_abs(const SpectralCoeffs& c) {
  double m = 0.0;
  for (const auto& z : c.coeffs) m = std::max(m, std::abs(z));
  return m;
}

SWEState rest_state(const Truncation& t, double phi0) {
  auto s = SWEState::zeros(t);
  s.phi.at(0, 0, 0) = phi0 * std::sqrt(4.0 * std::numbers::pi);
  return s;
}

PlanetParams damped_params(const Truncation& t) {
  PlanetParams p;
  p.hyperdiffusion_coeff = hyperdiffusion_for_efold(t, p.radius, 6.0 * 3600.0, 2);
  return p;
}

// Relative distance between two states, each prognostic normalised by its own size.
double state_distance(const SWEState& a, const SWEState& b) {
  double total = 0.0;
  for (auto [x, y] : {std::pair{&a.zeta, &b.zeta}, {&a.delta, &b.delta}, {&a.phi, &b.phi}}) {
    double num = 0.0, den = 0.0;
    for (std::size_t k = 0; k < x->coeffs.size(); ++k) {
      num += std::norm(x->coeffs[k] - y->coeffs[k]);
      den += std::norm(y->coeffs[k]);
    }
    total += num / den;
  }
  return std::sqrt(total);
}

SWEState integrate(const SphericalGrid& g, const Truncation& t, const PlanetParams& p, SWEState s,
                   double dt, int steps) {
  SweSolver solver(g, t, p);
  for (int k = 0; k < steps; ++k) s = solver.step(s, dt);
  return s;
}

}  // namespace

TEST_CASE("coriolis field") {
  const SphericalGrid odd(33, 8);
  auto f = coriolis_field(odd, kEarthRotation);
  for (std::size_t j = 0; j < 8; ++j) CHECK(std::abs(f.at(0, 16, j)) < 1e-20);
  for (std::size_t i = 0; i < 33; ++i) CHECK(f.at(0, i, 0) == -f.at(0, 32 - i, 0));
  const SphericalGrid fine(512, 4);
  auto ff = coriolis_field(fine, kEarthRotation);
  CHECK(std::abs(ff.at(0, 0, 0) - 2.0 * kEarthRotation) < 1e-4 * kEarthRotation);
  CHECK(ff.at(0, 0, 0) < 2.0 * kEarthRotation);
}

TEST_CASE("state of rest has zero tendency and stays at rest") {
  const SphericalGrid g(32, 64);
  const Truncation t = Truncation::for_grid(32, 64);
  const auto p = damped_params(t);
  const auto s = rest_state(t, 1.0e4);
  SweSolver solver(g, t, p);
  auto d = solver.tendency(s);
  CHECK(max_abs(d.dzeta) < 1e-13);
  CHECK(max_abs(d.ddelta) < 1e-13);
  CHECK(max_abs(d.dphi) < 1e-13);

  auto x = s;
  for (int k = 0; k < 1000; ++k) x = solver.step(x, 600.0);
  CHECK(max_abs(x.zeta) < 1e-11);
  CHECK(max_abs(x.delta) < 1e-11);
  CHECK(std::abs(x.phi.at(0, 0, 0) - s.phi.at(0, 0, 0)) < 1e-11 * std::abs(s.phi.at(0, 0, 0)));
  for (int m = 0; m <= t.m_max; ++m)
    for (int n = std::max(m, 1); n <= t.n_max; ++n) CHECK(std::abs(x.phi.at(0, n, m)) < 1e-11);
}

TEST_CASE("balanced zonal flow is steady") {
  // Geopotential from numerically integrating the gradient-wind balance
  //   d(phi)/d(lat) = -a u (f + u tan(lat) / a)
  // for u = u0 cos(lat); composite Simpson from the equator.
  const double a = kEarthRadius, omega = kEarthRotation, u0 = 25.0, phi0 = 3.0e4;
  const SphericalGrid g(64, 128, a);
  const Truncation t = Truncation::for_grid(64, 128);
  auto rhs = [&](double lat) {
    const double u = u0 * std::cos(lat);
    return -a * u * (2.0 * omega * std::sin(lat) + u * std::tan(lat) / a);
  };
  GridField u(1, 64, 128), v(1, 64, 128), phi(1, 64, 128);
  for (std::size_t i = 0; i < 64; ++i) {
    const double lat = g.lats_rad()[i];
    const int n = 4000;
    const double h = lat / n;
    double integral = rhs(0.0) + rhs(lat);
    for (int k = 1; k < n; ++k) integral += (k % 2 ? 4.0 : 2.0) * rhs(k * h);
    integral *= h / 3.0;
    for (std::size_t j = 0; j < 128; ++j) {
      u.at(0, i, j) = u0 * std::cos(lat);
      phi.at(0, i, j) = phi0 + integral;
    }
  }
  PlanetParams p;
  p.mean_geopotential = phi0;
  SWEState s = SWEState::zeros(t);
  std::tie(s.zeta, s.delta) = sht::vortdiv_from_uv(u, v, g, t);
  s.phi = sht::sht_forward(phi, g, t);
  SweSolver solver(g, t, p);
  auto d = solver.tendency(s);
  const double lap_scale = max_abs(sht::spectral_laplacian(s.phi, a));
  CHECK(max_abs(d.dphi) < 1e-6 * max_abs(s.phi));
  CHECK(max_abs(d.ddelta) < 1e-6 * lap_scale);
  CHECK(max_abs(d.dzeta) < 1e-6 * 2.0 * omega * max_abs(s.zeta));
}

TEST_CASE("tendency conserves mass for random states") {
  const SphericalGrid g(32, 64);
  const Truncation t = Truncation::for_grid(32, 64);
  const auto p = damped_params(t);
  SweSolver solver(g, t, p);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    GRFInitConfig cfg;
    cfg.seed = seed;
    auto s = grf_initial_condition(cfg, t, g, p);
    auto d = solver.tendency(s);
    CHECK(std::abs(d.dphi.at(0, 0, 0)) < 1e-13);
  }
}

TEST_CASE("mass conserved over 1000 steps without diffusion") {
  const SphericalGrid g(64, 128);
  const Truncation t = Truncation::for_grid(64, 128);
  PlanetParams p;
  GRFInitConfig cfg;
  cfg.seed = 7;
  auto s0 = grf_initial_condition(cfg, t, g, p);
  auto s = integrate(g, t, p, s0, 120.0, 1000);
  CHECK(s.all_finite());
  CHECK(std::abs(s.phi.at(0, 0, 0) - s0.phi.at(0, 0, 0)) <= 1e-10 * std::abs(s0.phi.at(0, 0, 0)));
}

TEST_CASE("time stepping converges at third order") {
  const SphericalGrid g(64, 128);
  const Truncation t = Truncation::for_grid(64, 128);
  const auto p = damped_params(t);
  GRFInitConfig cfg;
  cfg.seed = 3;
  const auto s0 = grf_initial_condition(cfg, t, g, p);
  const double span = 4800.0;
  const auto ref = integrate(g, t, p, s0, span / 256, 256);
  std::vector<double> err;
  for (int steps : {8, 16, 32}) err.push_back(state_distance(integrate(g, t, p, s0, span / steps, steps), ref));
  const double order1 = std::log2(err[0] / err[1]);
  const double order2 = std::log2(err[1] / err[2]);
  MESSAGE("AB3 errors " << err[0] << " " << err[1] << " " << err[2] << " orders " << order1 << " " << order2);
  CHECK(order1 >= 2.7);
  CHECK(order2 >= 2.7);
}

TEST_CASE("step rejects CFL violations and broken states") {
  const SphericalGrid g(32, 64);
  const Truncation t = Truncation::for_grid(32, 64);
  PlanetParams p;
  GRFInitConfig cfg;
  auto s = grf_initial_condition(cfg, t, g, p);
  SweSolver solver(g, t, p);
  const double limit = solver.max_stable_dt(s);
  CHECK_THROWS_WITH_AS(solver.step(s, 2.0 * limit), doctest::Contains("CFL"), std::runtime_error);
  CHECK_NOTHROW(solver.step(s, 0.9 * limit));
  s.phi.at(0, 3, 1) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(solver.step(s, 0.5 * limit), std::runtime_error);
  CHECK_THROWS_WITH(solver.tendency(s), doctest::Contains("phi"));
}

TEST_CASE("solver refuses grids that alias quadratic terms") {
  CHECK_THROWS_AS(SweSolver(SphericalGrid(16, 128), Truncation::triangular(15), PlanetParams{}),
                  std::invalid_argument);
}

TEST_CASE("GRF initial condition") {
  const SphericalGrid g(32, 64);
  const Truncation t = Truncation::for_grid(32, 64);
  PlanetParams p;

  GRFInitConfig calm;
  calm.phi_std = 0.0;
  calm.wind_std = 0.0;
  auto rest = grf_initial_condition(calm, t, g, p);
  CHECK(max_abs(rest.zeta) == 0.0);
  CHECK(max_abs(rest.delta) == 0.0);
  auto phi_rest = sht::sht_inverse(rest.phi, g);
  for (double x : phi_rest.values) CHECK(std::abs(x - calm.phi_avg) < 1e-9 * calm.phi_avg);

  GRFInitConfig cfg;
  for (std::uint64_t seed = 0; seed < 32; ++seed) {
    cfg.seed = seed;
    auto s = grf_initial_condition(cfg, t, g, p);
    auto [mean, sd] = area_mean_std(sht::sht_inverse(s.phi, g), g);
    CHECK(std::abs(sd - cfg.phi_std) < 0.02 * cfg.phi_std);
    CHECK(std::abs(mean - cfg.phi_avg) < 1e-9 * cfg.phi_avg);
  }

  cfg.seed = 99;
  auto s1 = grf_initial_condition(cfg, t, g, p);
  auto s2 = grf_initial_condition(cfg, t, g, p);
  CHECK(s1.zeta.coeffs == s2.zeta.coeffs);
  CHECK(s1.delta.coeffs == s2.delta.coeffs);
  CHECK(s1.phi.coeffs == s2.phi.coeffs);
  cfg.seed = 100;
  auto s3 = grf_initial_condition(cfg, t, g, p);
  CHECK(s3.phi.coeffs != s1.phi.coeffs);
}

TEST_CASE("dataset snapshot counting and resampling") {
  DatasetConfig cfg;
  cfg.members = 1;
  cfg.sim_hours = 2.0;
  cfg.spinup_hours = 1.0;
  cfg.snapshot_interval_hours = 1.0;
  cfg.solver_nlat = 32;
  cfg.solver_nlon = 64;
  cfg.output_nlat = 16;
  cfg.output_nlon = 32;
  cfg.seed = 5;
  auto ds = generate_dataset(cfg);
  CHECK(ds.members == 1);
  CHECK(ds.times == 2);
  CHECK(ds.start_seconds == 3600.0);
  CHECK(ds.values.size() == 2 * 3 * 16 * 32);

  // Replay the member on the solver grid and resample by hand.
  const SphericalGrid solver_grid(32, 64, kEarthRadius), out_grid(16, 32, kEarthRadius);
  const Truncation st = Truncation::for_grid(32, 64), ot = Truncation::for_grid(16, 32);
  PlanetParams p;
  p.hyperdiffusion_coeff = hyperdiffusion_for_efold(st, p.radius, cfg.hyperdiffusion_efold_hours * 3600.0, 2);
  GRFInitConfig init = cfg.init;
  init.seed = stream_seed(cfg.seed, 0);
  p.mean_geopotential = init.phi_avg;
  auto s = grf_initial_condition(init, st, solver_grid, p);
  SweSolver solver(solver_grid, st, p);
  for (int k = 0; k < 24; ++k) s = solver.step(s, 300.0);  // t = 2h, the second kept snapshot
  auto [u, v] = solver.winds(s);
  auto phi = solver.geopotential(s);
  GridField full(3, 32, 64);
  for (std::size_t q = 0; q < 32 * 64; ++q) {
    full.values[q] = phi.values[q] / kGravity;
    full.values[32 * 64 + q] = u.values[q];
    full.values[2 * 32 * 64 + q] = v.values[q];
  }
  auto expected = sht::sht_inverse(sht::retruncate(sht::sht_forward(full, solver_grid, st), ot), out_grid);
  auto got = ds.field(0, 1);
  double e = 0.0;
  for (std::size_t q = 0; q < got.values.size(); ++q) e = std::max(e, std::abs(got.values[q] - expected.values[q]));
  CHECK(e < 1e-10 * 1.0e3);  // Z is O(1e3) metres

  auto again = generate_dataset(cfg);
  CHECK(again.values == ds.values);
}

TEST_CASE("dataset generation rejects bad requests") {
  DatasetConfig cfg;
  cfg.sim_hours = 10.0;
  cfg.spinup_hours = 10.0;
  CHECK_THROWS_AS(generate_dataset(cfg), std::invalid_argument);
  cfg.spinup_hours = 1.0;
  cfg.output_nlat = 128;
  CHECK_THROWS_AS(generate_dataset(cfg), std::invalid_argument);
}

TEST_CASE("energy drift over a simulated day") {
  const SphericalGrid g(64, 128);
  const Truncation t = Truncation::for_grid(64, 128);
  PlanetParams p;
  GRFInitConfig cfg;
  cfg.seed = 11;
  auto s0 = grf_initial_condition(cfg, t, g, p);
  SweSolver solver(g, t, p);
  const double e0 = solver.total_energy(s0);
  auto s = integrate(g, t, p, s0, 300.0, 288);
  const double drift = std::abs(solver.total_energy(s) - e0) / e0;
  MESSAGE("relative energy drift over 24 h at 64x128: " << drift);
  CHECK(drift < 5e-3);
}
