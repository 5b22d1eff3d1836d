#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "shno/sht.hpp"

// Shallow water equations on the rotating sphere in vorticity/divergence
// form, solved with the spectral transform method.
namespace shno::swe {

inline constexpr double kEarthRadius = 6.371e6;
inline constexpr double kEarthRotation = 7.292e-5;
inline constexpr double kGravity = 9.80616;

struct PlanetParams {
  double radius = kEarthRadius;
  double rotation_rate = kEarthRotation;
  double mean_geopotential = 1.0e3 * kGravity;  // phi-bar in the mass equation
  double hyperdiffusion_coeff = 0.0;            // nu, m^(2 order)/s
  int hyperdiffusion_order = 2;

  void validate() const;
};

/// nu such that the highest retained degree decays with the given e-folding time.
double hyperdiffusion_for_efold(const sht::Truncation& trunc, double radius, double efold_seconds,
                                int order);

struct SWEState {
  sht::SpectralCoeffs zeta;
  sht::SpectralCoeffs delta;
  sht::SpectralCoeffs phi;  // total geopotential
  double time = 0.0;

  static SWEState zeros(const sht::Truncation& t);
  bool all_finite() const;
};

struct Tendency {
  sht::SpectralCoeffs dzeta;
  sht::SpectralCoeffs ddelta;
  sht::SpectralCoeffs dphi;
};

/// f = 2 Omega sin(lat)
sht::GridField coriolis_field(const sht::SphericalGrid& grid, double omega);

/// Transform grid, truncation and planet bundled together. The integrator
/// keeps its multistep history, so one solver object advances one trajectory.
class SweSolver {
 public:
  SweSolver(const sht::SphericalGrid& grid, const sht::Truncation& trunc, const PlanetParams& p);

  const sht::ShtPlan& plan() const { return plan_; }
  const PlanetParams& params() const { return params_; }

  /// Full right-hand side including hyperdiffusion.
  Tendency tendency(const SWEState& s) const;
  /// Right-hand side without hyperdiffusion.
  Tendency nonlinear_tendency(const SWEState& s) const;

  /// Largest dt allowed by the CFL check for this state.
  double max_stable_dt(const SWEState& s) const;

  /// One integrating-factor AB3 step. The first two steps, and any step whose
  /// dt or input time does not continue the previous one, use RK3 instead.
  SWEState step(const SWEState& s, double dt);
  void reset();

  /// Grid winds and geopotential of a state on the solver grid.
  std::pair<sht::GridField, sht::GridField> winds(const SWEState& s) const;
  sht::GridField geopotential(const SWEState& s) const;

  /// Integral over the sphere of (1/2) phi (u^2 + v^2) + (1/2) phi^2.
  double total_energy(const SWEState& s) const;

 private:
  SWEState rk3_step(const SWEState& s, double dt, const Tendency& k1) const;

  sht::SphericalGrid grid_;
  sht::ShtPlan plan_;
  PlanetParams params_;
  std::vector<double> coriolis_;  // per latitude
  std::vector<double> damping_;   // per mode
  double history_dt_ = 0.0;
  double last_time_ = 0.0;
  std::vector<Tendency> history_;  // newest first, at most 2 previous
};

struct GRFInitConfig {
  double phi_avg = 1.0e3 * kGravity;
  double phi_std = 120.0 * kGravity;
  double wind_std = 20.0;
  double spectral_slope = 4.0;
  std::uint64_t seed = 0;
};

/// Random initial state: phi = phi_avg + GRF, winds from independent GRFs.
SWEState grf_initial_condition(const GRFInitConfig& cfg, const sht::Truncation& trunc,
                               const sht::SphericalGrid& grid, const PlanetParams& p);

/// Area-weighted mean and standard deviation of one channel.
std::pair<double, double> area_mean_std(const sht::GridField& f, const sht::SphericalGrid& grid,
                                        std::size_t channel = 0);

struct TrajectoryDataset {
  std::size_t nlat = 0;
  std::size_t nlon = 0;
  int n_max = 0;
  double radius = kEarthRadius;
  std::vector<std::string> channel_names{"Z", "U", "V"};
  std::size_t members = 0;
  std::size_t times = 0;
  double interval_seconds = 3600.0;
  double start_seconds = 0.0;
  std::vector<double> values;  // (member, time, channel, lat, lon)

  std::size_t channels() const { return channel_names.size(); }
  std::size_t snapshot_size() const { return channels() * nlat * nlon; }
  const double* snapshot(std::size_t member, std::size_t time) const {
    return values.data() + (member * times + time) * snapshot_size();
  }
  double* snapshot(std::size_t member, std::size_t time) {
    return values.data() + (member * times + time) * snapshot_size();
  }
  sht::GridField field(std::size_t member, std::size_t time) const;
};

struct DatasetConfig {
  std::size_t members = 8;
  double sim_hours = 140.0;
  double spinup_hours = 100.0;
  double snapshot_interval_hours = 1.0;
  std::size_t solver_nlat = 64;
  std::size_t solver_nlon = 128;
  std::size_t output_nlat = 32;
  std::size_t output_nlon = 64;
  double max_dt = 300.0;
  double hyperdiffusion_efold_hours = 6.0;
  std::optional<double> hyperdiffusion_coeff;  // overrides the e-folding rule
  int hyperdiffusion_order = 2;
  GRFInitConfig init;
  std::uint64_t seed = 0;
};

/// Runs every member from its own GRF state, drops the spin-up and keeps
/// (Z = phi / g, U, V) snapshots spectrally resampled to the output grid.
TrajectoryDataset generate_dataset(const DatasetConfig& cfg);

}  // namespace shno::swe
