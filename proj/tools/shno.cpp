// shno: command-line driver for data generation, training and evaluation.
//
// Failures print one line to stderr, `shno: error: <kind>: <message>`, and
// exit with 2 (usage or config), 3 (numerical), 4 (file or container) or 1.
#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "shno/pipeline.hpp"

namespace {

using namespace shno;

int fail(const char* kind, const std::string& msg, int code) {
  std::string line = msg;
  for (char& c : line)
    if (c == '\n' || c == '\r') c = ' ';
  std::cerr << "shno: error: " << kind << ": " << line << '\n';
  return code;
}

void export_beside(const std::filesystem::path& container) {
  auto csv = container;
  csv.replace_extension(".csv");
  pipeline::export_csv(container, csv);
  std::cerr << "csv -> " << csv.string() << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Spherical harmonic neural operator toolkit"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  std::vector<std::string> sets;
  app.add_option("-c,--config", config_path, "INI-style run configuration");
  app.add_option("--set", sets, "Override one key, section.key=value (repeatable)");

  auto* gen = app.add_subcommand("gen-data", "Simulate training and test trajectories");
  std::string split = "both";
  gen->add_option("--split", split, "train, test or both")->check(CLI::IsMember({"train", "test", "both"}));
  bool gen_csv = false;
  gen->add_flag("--csv", gen_csv, "Also export each container as <name>.csv");

  app.add_subcommand("train", "Train a model and write the checkpoint and loss history");
  auto* roll = app.add_subcommand("rollout", "Roll the checkpoint out over the test members");
  bool roll_csv = false;
  roll->add_flag("--csv", roll_csv, "Also export the forecast as <name>.csv");
  app.add_subcommand("eval", "Score the checkpoint and persistence; write metrics and spectra CSVs");

  auto* spec = app.add_subcommand("spectra", "Degree spectra CSV of a dataset or forecast container");
  std::string spec_in, spec_out;
  spec->add_option("--input", spec_in, "Container (default: the configured forecast)");
  spec->add_option("--output", spec_out, "CSV path (default: <out_dir>/<input stem>_spectra.csv)");

  auto* grad = app.add_subcommand("gradcheck", "Finite-difference checks of every block at a tiny size");
  std::uint64_t grad_seed = 0;
  std::string grad_out;
  grad->add_option("--seed", grad_seed, "Seed for inputs and parameters");
  grad->add_option("--output", grad_out, "Also write the table to this CSV");

  app.add_subcommand("show-config", "Print the resolved configuration");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage", e.what(), 2);
  }

  try {
    config::Overrides overrides;
    for (const auto& s : sets) overrides.push_back(config::parse_override(s));
    const config::RunConfig cfg =
        config_path.empty() ? config::parse_config("", overrides) : config::load_config(config_path, overrides);

    if (*gen) {
      pipeline::gen_data(cfg, split != "test", split != "train", std::cerr);
      if (gen_csv) {
        if (split != "test") export_beside(cfg.paths.resolve(cfg.paths.train_data));
        if (split != "train") export_beside(cfg.paths.resolve(cfg.paths.test_data));
      }
    } else if (app.got_subcommand("train")) {
      pipeline::train_model(cfg, std::cerr);
    } else if (*roll) {
      pipeline::rollout(cfg, std::cerr);
      if (roll_csv) export_beside(cfg.paths.resolve(cfg.paths.forecast));
    } else if (app.got_subcommand("eval")) {
      pipeline::evaluate(cfg, std::cerr);
    } else if (*spec) {
      const std::filesystem::path in = spec_in.empty() ? cfg.paths.resolve(cfg.paths.forecast) : std::filesystem::path(spec_in);
      const std::filesystem::path out =
          spec_out.empty() ? cfg.paths.out_dir / (in.stem().string() + "_spectra.csv") : std::filesystem::path(spec_out);
      if (!std::filesystem::exists(in)) throw io::IoError("missing container '" + in.string() + "'");
      pipeline::spectra(in, out);
      std::cerr << "spectra -> " << out.string() << '\n';
    } else if (*grad) {
      const auto rows = pipeline::gradcheck_all(grad_seed);
      pipeline::write_gradcheck_csv(std::cout, rows);
      if (!grad_out.empty()) {
        std::ofstream f(grad_out);
        if (!f) throw io::IoError("cannot write '" + grad_out + "'");
        pipeline::write_gradcheck_csv(f, rows);
      }
      std::size_t failed = 0;
      for (const auto& r : rows) failed += !r.pass();
      if (failed) return fail("numerical", std::to_string(failed) + " gradient checks failed", 3);
    } else if (app.got_subcommand("show-config")) {
      std::cout << config::to_ini(cfg);
    }
  } catch (const config::ConfigError& e) {
    return fail("config", e.what(), 2);
  } catch (const train::NumericalError& e) {
    return fail("numerical", e.what(), 3);
  } catch (const io::IoError& e) {
    return fail("io", e.what(), 4);
  } catch (const io::ContainerError& e) {
    return fail("container", e.what(), 4);
  } catch (const std::filesystem::filesystem_error& e) {
    return fail("io", e.what(), 4);
  } catch (const std::invalid_argument& e) {
    return fail("invalid", e.what(), 2);
  } catch (const std::exception& e) {
    return fail("internal", e.what(), 1);
  }
  return 0;
}
