#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "shno/model.hpp"
#include "shno/swe.hpp"
#include "shno/train.hpp"

// Run configuration: an INI-style file of `key = value` lines under
// `[section]` headers, plus `section.key=value` overrides. See
// docs/config.md for the full key list.
namespace shno::config {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class Preset { swe, weather };

Preset parse_preset(const std::string& s);
std::string preset_name(Preset p);

struct Paths {
  std::filesystem::path out_dir = "run";
  // Relative paths resolve against out_dir.
  std::filesystem::path train_data = "train.shnc";
  std::filesystem::path test_data = "test.shnc";
  std::filesystem::path checkpoint = "model.shnc";
  std::filesystem::path forecast = "forecast.shnc";
  std::filesystem::path history_csv = "history.csv";
  std::filesystem::path metrics_csv = "metrics.csv";
  std::filesystem::path spectra_csv = "spectra.csv";

  std::filesystem::path resolve(const std::filesystem::path& p) const;
};

struct RunConfig {
  Preset preset = Preset::swe;
  std::uint64_t seed = 0;
  swe::DatasetConfig data;  // training trajectories; members and seed of the test set below
  std::size_t test_members = 2;
  double test_sim_hours = 201.0;  // includes spin-up, like data.sim_hours
  model::ModelConfig model;
  train::TrainConfig train;
  train::EvalConfig eval;
  Paths paths;

  /// Grid and seeds of the sub-configs follow from the top-level fields.
  swe::DatasetConfig train_dataset() const;
  swe::DatasetConfig test_dataset() const;
  model::ModelConfig model_config() const;
  train::TrainConfig train_config() const;

  /// Throws ConfigError with the first inconsistency found.
  void validate() const;
};

/// Defaults for a preset.
RunConfig preset_defaults(Preset p);

using Overrides = std::vector<std::pair<std::string, std::string>>;  // ("section.key", value)

/// "section.key=value" -> pair; throws ConfigError on a malformed entry.
std::pair<std::string, std::string> parse_override(const std::string& s);

/// Parses INI text, then overrides, then validates. The preset is read
/// first (run.preset) and fills in everything the text leaves out.
RunConfig parse_config(const std::string& ini_text, const Overrides& overrides = {});
RunConfig load_config(const std::filesystem::path& path, const Overrides& overrides = {});

/// Every key, resolved, in the file grammar; parse_config(to_ini(c)) == c.
std::string to_ini(const RunConfig& c);

/// All accepted keys as "section.key".
std::vector<std::string> known_keys();

}  // namespace shno::config
