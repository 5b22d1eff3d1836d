#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "shno/config.hpp"
#include "shno/container.hpp"
#include "shno/model.hpp"
#include "shno/swe.hpp"
#include "shno/train.hpp"

// End-to-end steps behind the command line: generate data, train, roll out,
// evaluate, dump spectra, and the gradient-check table.
namespace shno::pipeline {

namespace fs = std::filesystem;

// ---- containers for domain objects ----

/// Field trajectories, kind "dataset" or "forecast":
///   kind (utf8), config (utf8), channels (utf8, comma separated),
///   meta f64 [interval_seconds, start_seconds, radius, n_max],
///   values f64 [members, times, channels, nlat, nlon].
io::Container trajectory_container(const swe::TrajectoryDataset& d, const std::string& kind,
                                   const std::string& config_echo);
swe::TrajectoryDataset trajectory_from_container(const io::Container& c);

/// kind "checkpoint", config, norm/mean, norm/std, param/<name> per tensor,
/// optim/hp [beta1, beta2, eps, weight_decay], optim/step, optim/m/<name>, optim/v/<name>.
io::Container checkpoint_container(const model::ShnoModel& m, const train::OptimState& optim,
                                   const std::string& config_echo);

struct Checkpoint {
  config::RunConfig config;
  model::ShnoModel model;
  train::OptimState optim;
};

Checkpoint checkpoint_from_container(const io::Container& c);

// ---- gradient checks ----

struct GradCheckRow {
  std::string block;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  std::size_t coordinates = 0;
  std::string worst;  // "input" or the parameter coordinate with the largest error
  bool pass() const { return max_rel_error < tolerance; }
};

/// Finite-difference checks. Primitive blocks run at small shapes (tolerance
/// 1e-5); one layer and the full forward run at the tiny configuration
/// (8x16 grid, C = 8, n_max = 5, 2 heads, 2 registers; tolerance 1e-4).
std::vector<GradCheckRow> gradcheck_all(std::uint64_t seed = 0);
/// block,max_rel_error,tolerance,coordinates,result,worst
void write_gradcheck_csv(std::ostream& os, const std::vector<GradCheckRow>& rows);

// ---- commands ----

/// Writes the training and/or test trajectories.
void gen_data(const config::RunConfig& cfg, bool train_split, bool test_split, std::ostream& log);

/// Trains on the training trajectories; writes the checkpoint and history CSV.
train::FitResult train_model(const config::RunConfig& cfg, std::ostream& log);

/// Rolls the checkpoint out eval.max_steps from time 0 of every test member
/// and writes a forecast container. Throws train::NumericalError when a
/// state turns nonfinite.
void rollout(const config::RunConfig& cfg, std::ostream& log);

/// Scores the checkpoint and persistence on the test set; writes the metrics
/// and spectra CSVs.
train::Evaluation evaluate(const config::RunConfig& cfg, std::ostream& log);

/// Degree spectra of a trajectory container averaged over members, one block
/// per time index: model,variable,lead,n,E_n with model set to the kind.
void spectra(const fs::path& container, const fs::path& csv);

/// Long-format CSV of a dataset or forecast container for other tools:
/// member,hours,variable,lat,lon,value (degrees).
void export_csv(const fs::path& container, const fs::path& csv);

}  // namespace shno::pipeline
