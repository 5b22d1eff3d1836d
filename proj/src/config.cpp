#include "shno/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <sstream>

namespace shno::config {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const auto s = trim(v);
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  if (ec != std::errc() || p != s.data() + s.size() || s.empty())
    throw ConfigError(key + ": expected " + (std::is_integral_v<T> ? "a non-negative integer" : "a number") +
                      ", got '" + v + "'");
  if constexpr (std::is_floating_point_v<T>)
    if (!std::isfinite(out)) throw ConfigError(key + ": expected a finite number, got '" + v + "'");
  return out;
}

// Shortest text that parses back to the same double.
std::string fmt(double v) {
  char buf[32];
  const auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

// One configurable key: how to read it from text and write it back.
struct Field {
  std::string key;
  std::function<void(const std::string&)> set;
  std::function<std::string()> get;
};

template <class T>
Field num(std::string key, T& ref) {
  return {key, [key, &ref](const std::string& v) { ref = parse_number<T>(key, v); },
          [&ref] {
            if constexpr (std::is_floating_point_v<T>)
              return fmt(ref);
            else
              return std::to_string(ref);
          }};
}

template <class E>
Field choice(std::string key, E& ref, E (*parse)(const std::string&), std::string (*name)(E)) {
  return {key,
          [key, &ref, parse](const std::string& v) {
            try {
              ref = parse(trim(v));
            } catch (const std::invalid_argument& e) {
              throw ConfigError(key + ": " + e.what());
            }
          },
          [&ref, name] { return name(ref); }};
}

Field path(std::string key, std::filesystem::path& ref) {
  return {key, [&ref](const std::string& v) { ref = trim(v); }, [&ref] { return ref.string(); }};
}

std::vector<Field> fields(RunConfig& c) {
  return {
      choice("run.preset", c.preset, parse_preset, preset_name),
      num("run.seed", c.seed),
      path("run.out_dir", c.paths.out_dir),

      num("data.members", c.data.members),
      num("data.sim_hours", c.data.sim_hours),
      num("data.spinup_hours", c.data.spinup_hours),
      num("data.interval_hours", c.data.snapshot_interval_hours),
      num("data.solver_nlat", c.data.solver_nlat),
      num("data.solver_nlon", c.data.solver_nlon),
      num("data.nlat", c.data.output_nlat),
      num("data.nlon", c.data.output_nlon),
      num("data.max_dt", c.data.max_dt),
      num("data.hyperdiffusion_efold_hours", c.data.hyperdiffusion_efold_hours),
      num("data.hyperdiffusion_order", c.data.hyperdiffusion_order),
      num("data.phi_avg", c.data.init.phi_avg),
      num("data.phi_std", c.data.init.phi_std),
      num("data.wind_std", c.data.init.wind_std),
      num("data.spectral_slope", c.data.init.spectral_slope),
      num("data.test_members", c.test_members),
      num("data.test_sim_hours", c.test_sim_hours),

      choice("model.mixer", c.model.mixer, model::parse_mixer, model::mixer_name),
      num("model.embed_dim", c.model.embed_dim),
      num("model.layers", c.model.layers),
      num("model.heads", c.model.heads),
      num("model.registers", c.model.registers),
      {"model.n_max",
       [&c](const std::string& v) {
         const auto s = trim(v);
         c.model.n_max = s == "auto" ? -1 : parse_number<int>("model.n_max", s);
       },
       [&c] { return c.model.n_max < 0 ? std::string("auto") : std::to_string(c.model.n_max); }},
      num("model.ffn_expansion", c.model.ffn_expansion),
      num("model.ela_kernel", c.model.ela_kernel),
      num("model.init_std", c.model.init_std),

      num("train.epochs", c.train.epochs),
      num("train.batch_size", c.train.batch_size),
      num("train.peak_lr", c.train.peak_lr),
      num("train.min_lr", c.train.min_lr),
      num("train.warmup_epochs", c.train.warmup_epochs),
      num("train.val_fraction", c.train.val_fraction),
      choice("train.loss", c.train.loss, train::parse_loss, train::loss_name),
      num("train.beta1", c.train.adam.beta1),
      num("train.beta2", c.train.adam.beta2),
      num("train.eps", c.train.adam.eps),
      num("train.weight_decay", c.train.adam.weight_decay),
      choice("train.nonfinite", c.train.nonfinite, train::parse_policy, train::policy_name),

      num("eval.max_steps", c.eval.max_steps),
      num("eval.start_stride", c.eval.start_stride),

      path("paths.train_data", c.paths.train_data),
      path("paths.test_data", c.paths.test_data),
      path("paths.checkpoint", c.paths.checkpoint),
      path("paths.forecast", c.paths.forecast),
      path("paths.history_csv", c.paths.history_csv),
      path("paths.metrics_csv", c.paths.metrics_csv),
      path("paths.spectra_csv", c.paths.spectra_csv),
  };
}

}  // namespace

Preset parse_preset(const std::string& s) {
  if (s == "swe") return Preset::swe;
  if (s == "weather") return Preset::weather;
  throw std::invalid_argument("unknown preset '" + s + "' (expected swe or weather)");
}

std::string preset_name(Preset p) { return p == Preset::swe ? "swe" : "weather"; }

std::filesystem::path Paths::resolve(const std::filesystem::path& p) const {
  return p.is_absolute() ? p : out_dir / p;
}

RunConfig preset_defaults(Preset p) {
  RunConfig c;
  c.preset = p;
  if (p == Preset::weather) {
    c.train.loss = train::LossKind::latitude_l2;
    c.train.warmup_epochs = 6;
    c.train.peak_lr = 2e-4;
    c.train.min_lr = 0.0;
  }
  return c;
}

swe::DatasetConfig RunConfig::train_dataset() const {
  swe::DatasetConfig d = data;
  d.seed = stream_seed(seed, 1);
  return d;
}

swe::DatasetConfig RunConfig::test_dataset() const {
  swe::DatasetConfig d = data;
  d.members = test_members;
  d.sim_hours = test_sim_hours;
  d.seed = stream_seed(seed, 2);
  return d;
}

model::ModelConfig RunConfig::model_config() const {
  model::ModelConfig m = model;
  m.nlat = data.output_nlat;
  m.nlon = data.output_nlon;
  m.in_channels = m.out_channels = 3;
  m.seed = stream_seed(seed, 3);
  return m;
}

train::TrainConfig RunConfig::train_config() const {
  train::TrainConfig t = train;
  t.seed = stream_seed(seed, 4);
  return t;
}

void RunConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError(m); };
  if (data.members == 0) fail("data.members must be positive");
  if (test_members == 0) fail("data.test_members must be positive");
  if (!(data.snapshot_interval_hours > 0.0)) fail("data.interval_hours must be positive");
  if (!(data.spinup_hours >= 0.0)) fail("data.spinup_hours must be non-negative");
  const double min_hours = data.spinup_hours + data.snapshot_interval_hours;
  if (data.sim_hours < min_hours)
    fail("data.sim_hours must cover the spin-up plus one interval (>= " + fmt(min_hours) + ")");
  if (test_sim_hours < min_hours)
    fail("data.test_sim_hours must cover the spin-up plus one interval (>= " + fmt(min_hours) + ")");
  if (data.output_nlat > data.solver_nlat || data.output_nlon > data.solver_nlon)
    fail("data.nlat x data.nlon must not exceed the solver grid");
  if (!(data.max_dt > 0.0)) fail("data.max_dt must be positive");
  if (eval.max_steps == 0) fail("eval.max_steps must be positive");
  try {
    model_config().validate();
    train_config().validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (paths.out_dir.empty()) fail("run.out_dir must not be empty");
}

std::pair<std::string, std::string> parse_override(const std::string& s) {
  const auto eq = s.find('=');
  const auto key = eq == std::string::npos ? std::string() : trim(s.substr(0, eq));
  if (key.empty() || key.find('.') == std::string::npos)
    throw ConfigError("override '" + s + "' is not of the form section.key=value");
  return {key, trim(s.substr(eq + 1))};
}

RunConfig parse_config(const std::string& ini_text, const Overrides& overrides) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream in(ini_text);
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError("config line " + std::to_string(e.line()) + ": " + e.message());
  }
  std::map<std::string, std::string> values;
  for (const auto& [section, body] : tree) {
    if (body.empty()) throw ConfigError("key '" + section + "' outside a [section]");
    for (const auto& [key, v] : body) values[section + "." + key] = v.data();
  }
  for (const auto& [k, v] : overrides) values[k] = v;

  Preset p = Preset::swe;
  if (auto it = values.find("run.preset"); it != values.end()) {
    try {
      p = parse_preset(trim(it->second));
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("run.preset: ") + e.what());
    }
  }
  RunConfig c = preset_defaults(p);
  auto fs = fields(c);
  for (const auto& [k, v] : values) {
    auto it = std::find_if(fs.begin(), fs.end(), [&k](const Field& f) { return f.key == k; });
    if (it == fs.end()) throw ConfigError("unknown key '" + k + "'");
    it->set(v);
  }
  c.validate();
  return c;
}

RunConfig load_config(const std::filesystem::path& path, const Overrides& overrides) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), overrides);
}

std::string to_ini(const RunConfig& c) {
  RunConfig copy = c;
  std::ostringstream os;
  std::string section;
  for (const auto& f : fields(copy)) {
    const auto dot = f.key.find('.');
    const auto s = f.key.substr(0, dot);
    if (s != section) {
      os << (section.empty() ? "" : "\n") << '[' << s << "]\n";
      section = s;
    }
    os << f.key.substr(dot + 1) << " = " << f.get() << '\n';
  }
  return os.str();
}

std::vector<std::string> known_keys() {
  RunConfig c;
  std::vector<std::string> out;
  for (const auto& f : fields(c)) out.push_back(f.key);
  return out;
}

}  // namespace shno::config
