// Acceptance run: one PASS/FAIL line per criterion on stdout, progress on
// stderr. `acceptance [--out DIR] [N ...]` runs the listed criteria (all by
// default) and exits non-zero when any of them fails.
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <vector>

#include "shno/attention.hpp"
#include "shno/config.hpp"
#include "shno/container.hpp"
#include "shno/model.hpp"
#include "shno/pipeline.hpp"
#include "shno/rng.hpp"
#include "shno/sht.hpp"
#include "shno/swe.hpp"
#include "shno/train.hpp"

#ifndef SHNO_CLI
#error "SHNO_CLI must name the shno binary"
#endif

namespace fs = std::filesystem;
using namespace shno;
using Clock = std::chrono::steady_clock;

namespace {

// Pinned tolerances and budgets.
constexpr double kShtRoundTrip = 1e-9, kParseval = 1e-10, kShtSeconds = 5.0;
constexpr double kRestState = 1e-11, kMass = 1e-10, kBalance = 1e-6, kAb3Order = 2.7, kSweSeconds = 120.0;
constexpr double kSoftmaxRows = 1e-12, kHermitian = 1e-12, kMinEig = -1e-10, kRowSums = 1e-10;
constexpr double kBlockGrad = 1e-5, kDeepGrad = 1e-4, kGradSeconds = 60.0;
constexpr double kDeskTargetMinutes = 30.0;
constexpr double kLatMean = 1e-12, kSpectraParseval = 1e-10;

struct Result {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << " [failed: " << what << "]";
    }
  }
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

void progress(const std::string& s) { std::cerr << "  .. " << s << std::endl; }

sht::SpectralCoeffs random_coeffs(const sht::Truncation& t, std::size_t channels, Rng& rng) {
  sht::SpectralCoeffs c(t, channels);
  for (std::size_t ch = 0; ch < channels; ++ch)
    for (int m = 0; m <= t.m_max; ++m)
      for (int n = m; n <= t.n_max; ++n) c.at(ch, n, m) = {rng.normal(), m == 0 ? 0.0 : rng.normal()};
  return c;
}

// ---- 1: SHT ----

Result sht_correctness() {
  Result r;
  const auto t0 = Clock::now();
  const sht::SphericalGrid grid(64, 128);
  const sht::Truncation t = sht::Truncation::for_grid(64, 128);
  const sht::ShtPlan plan(grid, t);
  Rng rng(101);
  double worst_rt = 0.0, worst_parseval = 0.0;
  for (int k = 0; k < 100; ++k) {
    const sht::GridField f = sht::sht_inverse(plan, random_coeffs(t, 1, rng));
    const sht::SpectralCoeffs c = sht::sht_forward(plan, f);
    const sht::GridField g = sht::sht_inverse(plan, c);
    for (std::size_t i = 0; i < f.values.size(); ++i) worst_rt = std::max(worst_rt, std::abs(f.values[i] - g.values[i]));
    const double ge = sht::grid_energy(f, grid), se = sht::spectral_energy(c);
    worst_parseval = std::max(worst_parseval, std::abs(ge - se) / ge);
  }
  const double secs = seconds_since(t0);
  r.detail << "100 fields at 64x128: round trip " << worst_rt << " (< " << kShtRoundTrip << "), Parseval "
           << worst_parseval << " (< " << kParseval << "), " << secs << " s (< " << kShtSeconds << ")";
  r.require(worst_rt < kShtRoundTrip, "round trip");
  r.require(worst_parseval < kParseval, "Parseval");
  r.require(secs < kShtSeconds, "time");
  return r;
}

// ---- 2: SWE ----

double max_abs(const sht::SpectralCoeffs& c) {
  double m = 0.0;
  for (const auto& z : c.coeffs) m = std::max(m, std::abs(z));
  return m;
}

// A fresh solver per run: the multistep history belongs to one trajectory.
swe::SWEState integrate(const sht::SphericalGrid& g, const sht::Truncation& t, const swe::PlanetParams& p,
                        swe::SWEState s, double dt, int steps) {
  swe::SweSolver solver(g, t, p);
  for (int k = 0; k < steps; ++k) s = solver.step(s, dt);
  return s;
}

double state_distance(const swe::SWEState& a, const swe::SWEState& b) {
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

Result swe_solver() {
  Result r;
  const auto t0 = Clock::now();
  const sht::SphericalGrid g(64, 128);
  const sht::Truncation t = sht::Truncation::for_grid(64, 128);
  swe::PlanetParams damped;
  damped.hyperdiffusion_coeff = swe::hyperdiffusion_for_efold(t, damped.radius, 6.0 * 3600.0, 2);

  // rest state, 1000 steps
  double rest_drift = 0.0;
  {
    auto s = swe::SWEState::zeros(t);
    s.phi.at(0, 0, 0) = 1.0e4 * std::sqrt(4.0 * std::numbers::pi);
    const auto x = integrate(g, t, damped, s, 600.0, 1000);
    // winds and non-mean geopotential modes in absolute terms, the mean relative
    sht::SpectralCoeffs dphi = x.phi;
    dphi.at(0, 0, 0) = 0.0;
    rest_drift = std::max({max_abs(x.zeta), max_abs(x.delta), max_abs(dphi),
                           std::abs(x.phi.at(0, 0, 0) - s.phi.at(0, 0, 0)) / std::abs(s.phi.at(0, 0, 0))});
  }
  progress("rest state done");

  // mass with nu = 0
  double mass_drift = 0.0;
  {
    swe::PlanetParams p;
    swe::GRFInitConfig cfg;
    cfg.seed = 7;
    const auto s0 = swe::grf_initial_condition(cfg, t, g, p);
    const auto s = integrate(g, t, p, s0, 120.0, 1000);
    mass_drift = s.all_finite() ? std::abs(s.phi.at(0, 0, 0) - s0.phi.at(0, 0, 0)) / std::abs(s0.phi.at(0, 0, 0))
                                : INFINITY;
  }
  progress("mass conservation done");

  // balanced zonal flow: phi from the gradient-wind balance by Simpson quadrature
  double balance = 0.0;
  {
    const double a = swe::kEarthRadius, omega = swe::kEarthRotation, u0 = 25.0, phi0 = 3.0e4;
    const sht::SphericalGrid g(64, 128, a);
    auto rhs = [&](double lat) {
      const double u = u0 * std::cos(lat);
      return -a * u * (2.0 * omega * std::sin(lat) + u * std::tan(lat) / a);
    };
    sht::GridField u(1, 64, 128), v(1, 64, 128), phi(1, 64, 128);
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
    swe::PlanetParams p;
    p.mean_geopotential = phi0;
    swe::SWEState s = swe::SWEState::zeros(t);
    std::tie(s.zeta, s.delta) = sht::vortdiv_from_uv(u, v, g, t);
    s.phi = sht::sht_forward(phi, g, t);
    swe::SweSolver solver(g, t, p);
    const auto d = solver.tendency(s);
    balance = std::max({max_abs(d.dphi) / max_abs(s.phi),
                        max_abs(d.ddelta) / max_abs(sht::spectral_laplacian(s.phi, a)),
                        max_abs(d.dzeta) / (2.0 * omega * max_abs(s.zeta))});
  }

  // AB3 order by dt halving against a fine reference
  double order = 0.0;
  {
    swe::GRFInitConfig cfg;
    cfg.seed = 3;
    const auto s0 = swe::grf_initial_condition(cfg, t, g, damped);
    const double span = 4800.0;
    const auto ref = integrate(g, t, damped, s0, span / 256, 256);
    std::vector<double> err;
    for (int steps : {8, 16, 32}) err.push_back(state_distance(integrate(g, t, damped, s0, span / steps, steps), ref));
    order = std::min(std::log2(err[0] / err[1]), std::log2(err[1] / err[2]));
  }
  const double secs = seconds_since(t0);
  r.detail << "rest drift " << rest_drift << " (< " << kRestState << "), mass " << mass_drift << " (< " << kMass
           << "), balance residual " << balance << " (< " << kBalance << "), AB3 order " << order << " (>= "
           << kAb3Order << "), " << secs << " s (< " << kSweSeconds << ")";
  r.require(rest_drift < kRestState, "rest state");
  r.require(mass_drift < kMass, "mass");
  r.require(balance < kBalance, "balance");
  r.require(order >= kAb3Order, "AB3 order");
  r.require(secs < kSweSeconds, "time");
  return r;
}

// ---- 3: attention ----

Eigen::MatrixXcd to_eigen(const attn::CTensor& t) {
  const auto n = static_cast<Eigen::Index>(t.dim(0)), m = static_cast<Eigen::Index>(t.dim(1));
  Eigen::MatrixXcd out(n, m);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < m; ++j) {
      const auto k = static_cast<std::size_t>(i * m + j);
      out(i, j) = {t.re.at(k), t.im.at(k)};
    }
  return out;
}

Result attention_invariants() {
  Result r;
  Rng rng(303);
  double softmax_rows = 0.0, herm = 0.0, min_eig = 0.0, row_sums = 0.0;
  std::size_t residual_mismatch = 0;
  auto pick = [&](std::size_t lo, std::size_t hi) { return lo + rng.next() % (hi - lo + 1); };
  for (int trial = 0; trial < 500; ++trial) {
    // csoftmax on raw logits
    {
      const std::size_t rows = pick(1, 8), cols = pick(1, 8);
      const attn::CTensor z = attn::CTensor::randn({rows, cols}, rng.uniform(0.1, 10.0), rng);
      const attn::CTensor s = ad::csoftmax(z);
      for (std::size_t i = 0; i < rows; ++i) {
        double sr = 0.0, si = 0.0;
        for (std::size_t j = 0; j < cols; ++j) {
          sr += s.re.at(i * cols + j);
          si += s.im.at(i * cols + j);
        }
        softmax_rows = std::max({softmax_rows, std::abs(sr - 1.0), std::abs(si - 1.0)});
      }
    }
    // Laplacian parts
    {
      const std::size_t tok = pick(1, 10), c = pick(1, 6), d = pick(1, 5);
      const attn::CLinear g1 = attn::CLinear::init(c, d, 1.0, rng), g2 = attn::CLinear::init(d, d, 1.0, rng);
      const attn::CTensor prev = attn::CTensor::randn({tok, tok}, 1.0, rng);
      const ad::Tensor alpha = ad::Tensor::scalar(rng.normal(0.0, 2.0));
      const auto parts = attn::parametric_laplacian(attn::CTensor::randn({tok, c}, 2.0, rng), g1, g2, alpha, prev);
      for (std::size_t i = 0; i < tok; ++i) {
        double sr = 0.0, si = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          sr += parts.b.re.at(i * d + j);
          si += parts.b.im.at(i * d + j);
        }
        softmax_rows = std::max({softmax_rows, std::abs(sr - 1.0), std::abs(si - 1.0)});
      }
      const Eigen::MatrixXcd a = to_eigen(parts.a);
      herm = std::max(herm, (a - a.adjoint()).cwiseAbs().maxCoeff());
      Eigen::ComplexEigenSolver<Eigen::MatrixXcd> es(a, false);
      for (Eigen::Index k = 0; k < es.eigenvalues().size(); ++k) min_eig = std::min(min_eig, es.eigenvalues()(k).real());
      row_sums = std::max(row_sums, to_eigen(parts.d_minus_a).rowwise().sum().cwiseAbs().maxCoeff());
    }
    // GRSA with a zero output projection is its Y residual
    {
      const std::size_t tok = pick(1, 8), c = 2 * pick(1, 4), heads = pick(1, 2), regs = pick(0, 3);
      attn::GrsaParams p = attn::GrsaParams::init(c, heads, regs, 0.5, rng);
      for (double& v : p.p.w.re.mutable_data()) v = 0.0;
      for (double& v : p.p.w.im.mutable_data()) v = 0.0;
      const attn::CTensor x = attn::CTensor::randn({tok, c}, 1.0, rng);
      const auto out = attn::grsa(x, p, {});
      const attn::CTensor y = p.y(x);
      if (out.out.re.values() != y.re.values() || out.out.im.values() != y.im.values()) ++residual_mismatch;
    }
  }
  r.detail << "500 instances: csoftmax row sums " << softmax_rows << " (< " << kSoftmaxRows << "), A Hermitian "
           << herm << " (< " << kHermitian << "), min eig(A) " << min_eig << " (>= " << kMinEig << "), rows of D-A "
           << row_sums << " (< " << kRowSums << "), W_P=0 residual mismatches " << residual_mismatch;
  r.require(softmax_rows < kSoftmaxRows, "csoftmax");
  r.require(herm < kHermitian, "Hermitian");
  r.require(min_eig >= kMinEig, "PSD");
  r.require(row_sums < kRowSums, "D-A rows");
  r.require(residual_mismatch == 0, "GRSA residual");
  return r;
}

// ---- 4: gradients ----

Result gradient_fidelity() {
  Result r;
  const auto t0 = Clock::now();
  const auto rows = pipeline::gradcheck_all(0);
  const double secs = seconds_since(t0);
  double block = 0.0, deep = 0.0;
  std::string worst_block, worst_deep;
  for (const auto& row : rows) {
    const bool composite = row.block.rfind("shno_layer.", 0) == 0 || row.block.rfind("forward.", 0) == 0;
    double& w = composite ? deep : block;
    if (row.max_rel_error >= w) {
      w = row.max_rel_error;
      (composite ? worst_deep : worst_block) = row.block;
    }
    r.require(row.max_rel_error < (composite ? kDeepGrad : kBlockGrad), row.block);
  }
  r.detail << rows.size() << " rows: primitive blocks max " << block << " (" << worst_block << ", < " << kBlockGrad
           << "), layer/forward max " << deep << " (" << worst_deep << ", < " << kDeepGrad << "), " << secs
           << " s (< " << kGradSeconds << ")";
  r.require(secs < kGradSeconds, "time");
  return r;
}

// ---- 5 and 6: desk-scale learning ----

struct DeskRun {
  std::vector<train::EpochLog> history;
  train::Evaluation eval;
  double minutes = 0.0;
};

struct Desk {
  config::RunConfig cfg;
  swe::TrajectoryDataset train_data, test_data;
  std::map<std::pair<std::string, std::uint64_t>, DeskRun> runs;
  double data_minutes = 0.0;
};

config::RunConfig desk_config() {
  // 8 members x 40 h after a 100 h spin-up on 64x128, stored at 32x64; held-out
  // members run to 201 h so a 100-step rollout has truth at every lead.
  const std::string ini = R"(
[data]
members = 8
sim_hours = 140
spinup_hours = 100
test_members = 2
test_sim_hours = 201

[model]
embed_dim = 64
layers = 2

[train]
epochs = 10
batch_size = 16
peak_lr = 1e-3
min_lr = 2e-5

[eval]
max_steps = 100
)";
  return config::parse_config(ini);
}

Desk& desk() {
  static std::optional<Desk> d;
  if (!d) {
    d.emplace();
    d->cfg = desk_config();
    const auto t0 = Clock::now();
    progress("generating 8 training and 2 held-out trajectories");
    d->train_data = swe::generate_dataset(d->cfg.train_dataset());
    d->test_data = swe::generate_dataset(d->cfg.test_dataset());
    d->data_minutes = seconds_since(t0) / 60.0;
  }
  return *d;
}

const DeskRun& desk_run(model::Mixer mixer, std::uint64_t seed, bool evaluate) {
  Desk& d = desk();
  const auto key = std::make_pair(model::mixer_name(mixer), seed);
  auto it = d.runs.find(key);
  if (it != d.runs.end() && (!evaluate || it->second.eval.model.forecasts > 0)) return it->second;
  const auto t0 = Clock::now();
  config::RunConfig cfg = d.cfg;
  cfg.seed = seed;
  cfg.model.mixer = mixer;
  model::ShnoModel model(cfg.model_config());
  DeskRun run;
  const auto fit = train::fit(model, d.train_data, cfg.train_config(), [&](const train::EpochLog& e) {
    std::ostringstream os;
    os << key.first << " seed " << seed << " epoch " << e.epoch << " train " << e.train_loss << " val " << e.val_loss;
    progress(os.str());
  });
  run.history = fit.history;
  if (evaluate) run.eval = train::evaluate_rollout(model, key.first, d.test_data, cfg.eval);
  run.minutes = seconds_since(t0) / 60.0;
  return d.runs[key] = std::move(run);
}

double mean_lead1(const train::EvalReport& r) {
  double s = 0.0;
  for (const auto& v : r.rel_loss) s += v.front();
  return s / static_cast<double>(r.rel_loss.size());
}

bool rollout_finite(const train::EvalReport& r) {
  if (r.forecasts == 0 || r.leads.back() != 100) return false;
  for (std::size_t k = 0; k < r.leads.size(); ++k)
    if (r.valid[k] != r.forecasts || r.nonfinite[k] != 0) return false;
  for (const auto& v : r.rel_loss)
    for (double x : v)
      if (!std::isfinite(x)) return false;
  return true;
}

Result desk_learning(const fs::path& out) {
  Result r;
  Desk& d = desk();
  double minutes = d.data_minutes;
  std::size_t decreasing = 0;
  for (std::uint64_t seed : {0, 1, 2}) {
    const DeskRun& run = desk_run(model::Mixer::grsa, seed, seed == 0);
    minutes += run.minutes;
    bool strict = run.history.size() == 11;
    for (std::size_t e = 1; strict && e < run.history.size(); ++e)
      strict = run.history[e].train_loss < run.history[e - 1].train_loss;
    decreasing += strict;
    r.detail << "seed " << seed << " train loss " << run.history.front().train_loss << " -> "
             << run.history.back().train_loss << (strict ? " (strictly decreasing); " : " (NOT strictly decreasing); ");
  }
  const DeskRun& main = desk_run(model::Mixer::grsa, 0, true);
  const double model1 = mean_lead1(main.eval.model), persist1 = mean_lead1(main.eval.persistence);
  const bool finite = rollout_finite(main.eval.model);
  r.detail << "held-out one-step rel loss " << model1 << " vs persistence " << persist1 << "; 100-step rollout "
           << (finite ? "finite" : "NOT finite") << " for " << main.eval.model.forecasts << " forecasts; "
           << minutes << " min (target < " << kDeskTargetMinutes << ")";
  r.require(decreasing == 3, "(a) loss decrease");
  r.require(model1 < persist1, "(b) below persistence");
  r.require(finite, "(c) finite rollout");
  std::ofstream h(out / "desk_history_grsa_seed0.csv");
  train::write_history_csv(h, main.history);
  return r;
}

Result baseline_contrast(const fs::path& out) {
  Result r;
  const DeskRun& shno = desk_run(model::Mixer::grsa, 0, true);
  const DeskRun& sfno = desk_run(model::Mixer::sfno_linear, 0, true);
  const double s1 = mean_lead1(sfno.eval.model), p1 = mean_lead1(sfno.eval.persistence);
  const double g1 = mean_lead1(shno.eval.model);
  const bool finite = rollout_finite(shno.eval.model) && rollout_finite(sfno.eval.model);
  {
    std::ofstream m(out / "desk_metrics.csv");
    train::write_metrics_csv(m, {&shno.eval.model, &sfno.eval.model, &shno.eval.persistence});
    std::ofstream s(out / "desk_spectra.csv");
    train::write_spectra_csv(s, {&shno.eval.model, &sfno.eval.model, &shno.eval.persistence});
  }
  auto mean_last = [](const train::EvalReport& e) {
    double s = 0.0;
    for (const auto& v : e.rel_loss) s += v.back();
    return s / static_cast<double>(e.rel_loss.size());
  };
  r.detail << "sfno_linear one-step " << s1 << " vs persistence " << p1 << "; both 100-step rollouts "
           << (finite ? "finite" : "NOT finite") << "; reported ordering: lead 1 grsa " << g1 << " / sfno_linear "
           << s1 << ", lead 100 grsa " << mean_last(shno.eval.model) << " / sfno_linear " << mean_last(sfno.eval.model)
           << "; per-lead CSV " << (out / "desk_metrics.csv").string();
  r.require(s1 < p1, "baseline below persistence");
  r.require(finite, "finite rollouts");
  r.require(fs::file_size(out / "desk_metrics.csv") > 0, "CSV");
  return r;
}

// ---- 7: metrics ----

Result metrics_sanity() {
  Result r;
  const sht::SphericalGrid grid(32, 64);
  const auto w = train::metric_weights(grid);
  Rng rng(707);
  std::vector<sht::GridField> truth, shifted;
  for (int k = 0; k < 3; ++k) {
    sht::GridField t(3, 32, 64);
    // dyadic values so that (t + 1) - t is exactly 1
    for (double& v : t.values) v = std::ldexp(std::round(std::ldexp(rng.normal(5.0, 2.0), 20)), -20);
    truth.push_back(t);
    for (double& v : t.values) v += 1.0;
    shifted.push_back(t);
  }
  const sht::GridField clim = train::climatology(truth);
  const auto rm0 = train::rmse(truth, truth, w.w);
  const auto acc1 = train::acc(truth, truth, clim, w.w);
  const auto rm1 = train::rmse(shifted, truth, w.w);
  const auto rel0 = train::relative_loss_per_channel(truth[0], truth[0], w.quad_w);
  double worst_rm1 = 0.0;
  bool exact = true;
  for (std::size_t c = 0; c < 3; ++c) {
    exact = exact && rm0[c] == 0.0 && acc1[c] == 1.0 && rel0[c] == 0.0;
    worst_rm1 = std::max(worst_rm1, std::abs(rm1[c] - 1.0));
  }
  exact = exact && train::geometric_relative_loss(truth[0], truth[0], w.quad_w) == 0.0;
  double mean_w = 0.0;
  for (double v : w.w) mean_w += v;
  mean_w /= static_cast<double>(w.w.size());
  r.detail << "pred=truth gives RMSE 0, ACC 1, rel 0: " << (exact ? "exact" : "NOT exact") << "; pred=truth+1 RMSE off by "
           << worst_rm1 << "; mean latitude weight - 1 = " << mean_w - 1.0 << " (< " << kLatMean << ")";
  r.require(exact, "identities");
  // sqrt(mean w) with mean w = 1 up to rounding of the weights
  r.require(worst_rm1 <= 4 * std::numeric_limits<double>::epsilon(), "RMSE 1");
  r.require(std::abs(mean_w - 1.0) < kLatMean, "latitude mean");
  return r;
}

// ---- 8: spectra ----

Result spectra_diagnostics(const fs::path& out) {
  Result r;
  const sht::Truncation t = sht::Truncation::triangular(10);
  bool onehot = true;
  Rng rng(808);
  for (int n = 0; n <= t.n_max; ++n)
    for (int m = 0; m <= n; ++m) {
      sht::SpectralCoeffs c(t, 1);
      const std::complex<double> z{rng.normal(), m == 0 ? 0.0 : rng.normal()};
      c.at(0, n, m) = z;
      const auto e = sht::degree_spectrum(c);
      const double expect = (m == 0 ? 0.5 : 1.0) * std::norm(z);
      for (int k = 0; k <= t.n_max; ++k) onehot = onehot && e[static_cast<std::size_t>(k)] == (k == n ? expect : 0.0);
    }
  const sht::SphericalGrid grid(64, 128);
  const sht::Truncation full = sht::Truncation::for_grid(64, 128);
  const sht::ShtPlan plan(grid, full);
  double parseval = 0.0;
  for (int k = 0; k < 20; ++k) {
    const auto f = sht::sht_inverse(plan, random_coeffs(full, 1, rng));
    double s = 0.0;
    for (double e : sht::degree_spectrum(sht::sht_forward(plan, f))) s += e;
    const double ge = 0.5 * sht::grid_energy(f, grid);
    parseval = std::max(parseval, std::abs(s - ge) / ge);
  }

  // per-lead spectra from a rollout evaluation on a small held-out set
  const auto cfg = config::parse_config(
      "[data]\nmembers = 1\nsim_hours = 12\nspinup_hours = 2\nsolver_nlat = 32\nsolver_nlon = 64\nnlat = 16\nnlon = 32\n"
      "test_members = 2\ntest_sim_hours = 12\n[model]\nembed_dim = 8\nlayers = 1\nheads = 2\nregisters = 2\n"
      "[eval]\nmax_steps = 8\n");
  const auto test = swe::generate_dataset(cfg.test_dataset());
  model::ShnoModel model(cfg.model_config());
  std::vector<double> mean(3, 0.0), stdv(3, 1.0);
  model.set_normalization(mean, stdv);
  const auto ev = train::evaluate_rollout(model, "grsa", test, cfg.eval);
  const std::size_t degrees = static_cast<std::size_t>(test.n_max) + 1;
  bool per_lead = ev.model.spectra.size() == 8 && ev.model.truth_spectra.size() == 8 &&
                  ev.persistence.spectra.size() == 8 && ev.model.initial_spectra.size() == 3;
  for (const auto* rep : {&ev.model, &ev.persistence})
    for (const auto* block : {&rep->spectra, &rep->truth_spectra})
      for (const auto& lead : *block) {
        per_lead = per_lead && lead.size() == 3;
        for (const auto& var : lead) {
          per_lead = per_lead && var.size() == degrees;
          for (double e : var) per_lead = per_lead && std::isfinite(e) && e >= 0.0;
        }
      }
  // persistence keeps the initial spectrum at every lead
  for (const auto& lead : ev.persistence.spectra) per_lead = per_lead && lead == ev.persistence.initial_spectra;
  {
    std::ofstream s(out / "spectra_check.csv");
    train::write_spectra_csv(s, {&ev.model, &ev.persistence});
  }
  r.detail << "one-hot spectra equal |c|^2/2 " << (onehot ? "exactly" : "NOT exactly") << "; sum E_n vs Parseval "
           << parseval << " (< " << kSpectraParseval << "); evaluate_rollout spectra for 8 leads x 3 variables x "
           << degrees << " degrees " << (per_lead ? "complete" : "INCOMPLETE");
  r.require(onehot, "one-hot");
  r.require(parseval < kSpectraParseval, "Parseval");
  r.require(per_lead, "per-lead spectra");
  return r;
}

// ---- 9: I/O and CLI ----

int run(const std::string& cmd) {
  const int rc = std::system((cmd + " >/dev/null 2>&1").c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

Result io_and_cli(const fs::path& out) {
  Result r;
  Rng rng(909);
  io::Container c;
  std::vector<double> d(64);
  for (double& v : d) v = rng.normal() * std::exp(rng.uniform(-50.0, 50.0));
  std::vector<float> f(10);
  for (float& v : f) v = static_cast<float>(rng.normal());
  std::vector<std::complex<double>> z(12);
  for (auto& v : z) v = {rng.normal(), rng.normal()};
  c.add(io::Section::f64("f64", {4, 16}, d));
  c.add(io::Section::f32("f32", {10}, f));
  c.add(io::Section::c128("c128", {3, 4}, z));
  c.add(io::Section::text("utf8", "[run]\nseed = 1\n"));
  const fs::path path = out / "roundtrip.shnc";
  io::write_container(path, c);
  const io::Container back = io::read_container(path);
  bool bitwise = back.sections().size() == c.sections().size();
  for (std::size_t k = 0; bitwise && k < c.sections().size(); ++k)
    bitwise = back.sections()[k].bytes == c.sections()[k].bytes && back.sections()[k].shape == c.sections()[k].shape &&
              back.sections()[k].dtype == c.sections()[k].dtype;
  const auto vals = back.get("f64").as_f64();
  bitwise = bitwise && std::memcmp(vals.data(), d.data(), d.size() * sizeof(double)) == 0;

  std::size_t crc_caught = 0, flips = 0;
  const auto bytes = io::serialize(c);
  for (std::size_t i = 16; i + 4 < bytes.size(); i += 13, ++flips) {
    auto b = bytes;
    b[i] ^= 0x01;
    try {
      io::deserialize(b);
    } catch (const io::CrcMismatch&) {
      ++crc_caught;
    } catch (const std::exception&) {
    }
  }

  const fs::path dir = out / "cli";
  fs::remove_all(dir);
  fs::create_directories(dir);
  {
    std::ofstream ini(dir / "smoke.ini");
    ini << "[run]\nout_dir = " << dir.string()
        << "\n\n[data]\nmembers = 2\nsim_hours = 6\nspinup_hours = 2\nsolver_nlat = 32\nsolver_nlon = 64\nnlat = 16\n"
           "nlon = 32\ntest_members = 1\ntest_sim_hours = 8\n\n[model]\nembed_dim = 8\nlayers = 1\nheads = 2\n"
           "registers = 2\n\n[train]\nepochs = 2\nbatch_size = 4\n\n[eval]\nmax_steps = 5\n";
  }
  const std::string shno = std::string(SHNO_CLI) + " -c " + (dir / "smoke.ini").string() + " ";
  std::vector<std::pair<std::string, int>> codes;
  for (const char* cmd : {"gen-data", "train", "rollout", "eval", "spectra"}) codes.emplace_back(cmd, run(shno + cmd));
  bool all_zero = true;
  std::ostringstream code_text;
  for (const auto& [cmd, rc] : codes) {
    all_zero = all_zero && rc == 0;
    code_text << cmd << "=" << rc << " ";
  }
  std::vector<std::string> missing;
  for (const char* a : {"train.shnc", "test.shnc", "model.shnc", "history.csv", "forecast.shnc", "metrics.csv",
                        "spectra.csv", "forecast_spectra.csv"})
    if (!fs::exists(dir / a) || fs::file_size(dir / a) == 0) missing.push_back(a);

  r.detail << "4 dtypes round trip " << (bitwise ? "bitwise" : "NOT bitwise") << "; " << crc_caught << "/" << flips
           << " flipped payload bytes raised a CRC error; CLI exit codes " << code_text.str() << "; "
           << (missing.empty() ? "all 8 artifacts present" : std::to_string(missing.size()) + " artifacts missing");
  r.require(bitwise, "round trip");
  r.require(crc_caught == flips, "CRC");
  r.require(all_zero, "exit codes");
  r.require(missing.empty(), "artifacts");
  return r;
}

}  // namespace

int main(int argc, char** argv) {
  fs::path out = "acceptance_out";
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--out" && i + 1 < argc) {
      out = argv[++i];
    } else {
      try {
        selected.insert(std::stoi(a));
      } catch (const std::exception&) {
        std::cerr << "usage: acceptance [--out DIR] [criterion ...]\n";
        return 2;
      }
    }
  }
  fs::create_directories(out);
  const std::vector<std::pair<const char*, std::function<Result()>>> criteria{
      {"SHT correctness", sht_correctness},
      {"SWE solver", swe_solver},
      {"attention invariants", attention_invariants},
      {"gradient fidelity", gradient_fidelity},
      {"desk-scale learning", [&] { return desk_learning(out); }},
      {"baseline contrast", [&] { return baseline_contrast(out); }},
      {"metrics sanity", metrics_sanity},
      {"spectra diagnostics", [&] { return spectra_diagnostics(out); }},
      {"I/O and CLI", [&] { return io_and_cli(out); }},
  };
  std::cout.precision(3);
  std::cerr.precision(4);
  int failed = 0;
  for (std::size_t k = 0; k < criteria.size(); ++k) {
    const int id = static_cast<int>(k) + 1;
    if (!selected.empty() && !selected.count(id)) continue;
    std::cerr << "criterion " << id << ": " << criteria[k].first << std::endl;
    Result r;
    try {
      r = criteria[k].second();
    } catch (const std::exception& e) {
      r.pass = false;
      r.detail << " [exception: " << e.what() << "]";
    }
    failed += !r.pass;
    std::cout << "criterion " << id << " (" << criteria[k].first << "): " << (r.pass ? "PASS" : "FAIL") << ": "
              << r.detail.str() << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
