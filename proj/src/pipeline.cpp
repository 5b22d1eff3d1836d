#include "shno/pipeline.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numbers>
#include <sstream>

#include "shno/attention.hpp"
#include "shno/complex_ops.hpp"

namespace shno::pipeline {

using ad::CTensor;
using ad::Tensor;

namespace {

std::vector<std::uint64_t> dims(const ad::Shape& s) { return {s.begin(), s.end()}; }

std::string join(const std::vector<std::string>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + v[i];
  return out;
}

std::vector<std::string> split(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');) out.push_back(item);
  return out;
}

std::string expect_kind(const io::Container& c, std::initializer_list<const char*> kinds) {
  const std::string k = c.get("kind").as_text();
  for (const char* want : kinds)
    if (k == want) return k;
  throw io::FormatError("container holds a " + k + ", not a " + *kinds.begin());
}

void write_text(const fs::path& path, const std::string& text) {
  io::write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

swe::TrajectoryDataset load_trajectories(const fs::path& path, const char* kind) {
  if (!fs::exists(path)) throw io::IoError(std::string("missing ") + kind + " file '" + path.string() + "'");
  return trajectory_from_container(io::read_container(path));
}

Checkpoint load_checkpoint(const fs::path& path) {
  if (!fs::exists(path)) throw io::IoError("missing checkpoint file '" + path.string() + "'");
  return checkpoint_from_container(io::read_container(path));
}

std::string stamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::ostringstream os;
  os << std::put_time(std::gmtime(&now), "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

// Timings and timestamps go to a sidecar log so the artifacts stay reproducible.
class RunLog {
 public:
  RunLog(const config::RunConfig& cfg, const std::string& command, std::ostream& echo)
      : file_(cfg.paths.out_dir / (command + ".log"), std::ios::app), echo_(echo), start_(clock::now()) {
    line(command + " started " + stamp());
  }
  ~RunLog() {
    const double s = std::chrono::duration<double>(clock::now() - start_).count();
    std::ostringstream os;
    os << "finished in " << std::fixed << std::setprecision(1) << s << " s";
    line(os.str());
  }
  void line(const std::string& s) {
    echo_ << s << '\n' << std::flush;
    if (file_) file_ << s << '\n' << std::flush;
  }

 private:
  using clock = std::chrono::steady_clock;
  std::ofstream file_;
  std::ostream& echo_;
  clock::time_point start_;
};

void prepare_out_dir(const config::RunConfig& cfg) { fs::create_directories(cfg.paths.out_dir); }

}  // namespace

// ---- containers ----

io::Container trajectory_container(const swe::TrajectoryDataset& d, const std::string& kind,
                                   const std::string& config_echo) {
  io::Container c;
  c.add(io::Section::text("kind", kind));
  c.add(io::Section::text("config", config_echo));
  c.add(io::Section::text("channels", join(d.channel_names)));
  const std::vector<double> meta{d.interval_seconds, d.start_seconds, d.radius, static_cast<double>(d.n_max)};
  c.add(io::Section::f64("meta", {4}, meta));
  c.add(io::Section::f64("values", {d.members, d.times, d.channels(), d.nlat, d.nlon}, d.values));
  return c;
}

swe::TrajectoryDataset trajectory_from_container(const io::Container& c) {
  expect_kind(c, {"dataset", "forecast"});
  const io::Section& v = c.get("values");
  if (v.shape.size() != 5) throw io::FormatError("'values' must have rank 5");
  const auto meta = c.get("meta").as_f64();
  if (meta.size() != 4) throw io::FormatError("'meta' must hold 4 numbers");
  swe::TrajectoryDataset d;
  d.channel_names = split(c.get("channels").as_text());
  if (d.channel_names.size() != v.shape[2]) throw io::FormatError("channel names do not match 'values'");
  d.members = v.shape[0];
  d.times = v.shape[1];
  d.nlat = v.shape[3];
  d.nlon = v.shape[4];
  d.interval_seconds = meta[0];
  d.start_seconds = meta[1];
  d.radius = meta[2];
  d.n_max = static_cast<int>(meta[3]);
  d.values = v.as_f64();
  return d;
}

io::Container checkpoint_container(const model::ShnoModel& m, const train::OptimState& optim,
                                   const std::string& config_echo) {
  io::Container c;
  c.add(io::Section::text("kind", "checkpoint"));
  c.add(io::Section::text("config", config_echo));
  c.add(io::Section::f64("norm/mean", {m.norm_mean().size()}, m.norm_mean()));
  c.add(io::Section::f64("norm/std", {m.norm_std().size()}, m.norm_std()));
  const auto params = m.parameters();
  for (const auto& [name, t] : params) c.add(io::Section::f64("param/" + name, dims(t.shape()), t.values()));
  const std::vector<double> hp{optim.hp.beta1, optim.hp.beta2, optim.hp.eps, optim.hp.weight_decay};
  c.add(io::Section::f64("optim/hp", {4}, hp));
  const std::vector<double> step{static_cast<double>(optim.step)};
  c.add(io::Section::f64("optim/step", {1}, step));
  if (optim.m.size() == params.size())
    for (std::size_t k = 0; k < params.size(); ++k) {
      c.add(io::Section::f64("optim/m/" + params[k].first, dims(params[k].second.shape()), optim.m[k]));
      c.add(io::Section::f64("optim/v/" + params[k].first, dims(params[k].second.shape()), optim.v[k]));
    }
  return c;
}

Checkpoint checkpoint_from_container(const io::Container& c) {
  expect_kind(c, {"checkpoint"});
  config::RunConfig cfg = config::parse_config(c.get("config").as_text());
  Checkpoint ck{cfg, model::ShnoModel(cfg.model_config()), {}};
  ck.model.set_normalization(c.get("norm/mean").as_f64(), c.get("norm/std").as_f64());
  auto params = ck.model.parameters();
  for (auto& [name, t] : params) {
    const io::Section& s = c.get("param/" + name);
    if (s.shape != dims(t.shape()))
      throw io::FormatError("parameter " + name + " has shape " + ad::shape_str({s.shape.begin(), s.shape.end()}) +
                            ", the model expects " + ad::shape_str(t.shape()));
    const auto v = s.as_f64();
    std::copy(v.begin(), v.end(), t.mutable_data().begin());
  }
  const auto hp = c.get("optim/hp").as_f64();
  if (hp.size() != 4) throw io::FormatError("'optim/hp' must hold 4 numbers");
  ck.optim = train::OptimState::init(params, {hp[0], hp[1], hp[2], hp[3]});
  ck.optim.step = static_cast<std::size_t>(c.get("optim/step").as_f64().at(0));
  if (c.find("optim/m/" + params.front().first))
    for (std::size_t k = 0; k < params.size(); ++k) {
      ck.optim.m[k] = c.get("optim/m/" + params[k].first).as_f64();
      ck.optim.v[k] = c.get("optim/v/" + params[k].first).as_f64();
    }
  return ck;
}

// ---- gradient checks ----

namespace {

Tensor probe(const Tensor& out, std::uint64_t seed) {
  Rng rng(seed, 13);
  return ad::sum(ad::mul(out, Tensor::randn(out.shape(), 1.0, rng)));
}

Tensor cprobe(const CTensor& out, std::uint64_t seed) {
  Rng rng(seed, 11);
  const Tensor wr = Tensor::randn(out.shape(), 1.0, rng), wi = Tensor::randn(out.shape(), 1.0, rng);
  return ad::add(ad::sum(ad::mul(out.re, wr)), ad::sum(ad::mul(out.im, wi)));
}

double complex_input_check(const std::function<CTensor(const CTensor&)>& f, const CTensor& x, std::uint64_t seed,
                           double eps) {
  const double a = ad::grad_check([&](const Tensor& r) { return cprobe(f({r, x.im}), seed); }, x.re, eps);
  const double b = ad::grad_check([&](const Tensor& i) { return cprobe(f({x.re, i}), seed); }, x.im, eps);
  return std::max(a, b);
}

struct RowBuilder {
  GradCheckRow row;
  RowBuilder(std::string block, double tol) { row = {std::move(block), 0.0, tol, 0, ""}; }
  void input(double err, std::size_t n) {
    if (row.worst.empty() || err > row.max_rel_error) {
      row.max_rel_error = err;
      row.worst = "input";
    }
    row.coordinates += n;
  }
  void params(const ad::GradCheckReport& r) {
    if (row.worst.empty() || r.max_rel_error > row.max_rel_error) {
      row.max_rel_error = r.max_rel_error;
      row.worst = r.worst;
    }
    row.coordinates += r.coordinates;
  }
};

}  // namespace

std::vector<GradCheckRow> gradcheck_all(std::uint64_t seed) {
  constexpr double kBlockTol = 1e-5, kDeepTol = 1e-4;
  // Central steps: the probes sum ~10^3 outputs, so at step 1e-6 round-off in
  // the difference quotient reaches 1e-5 relative on small coordinates.
  constexpr double kBlockEps = 1e-5, kDeepEps = 1e-5;
  // Projections drawn at std 0.5 keep attention gradients O(1); at the 0.02
  // training init many coordinates sit at round-off level.
  constexpr double kAttnStd = 0.5;
  const std::size_t nlat = 8, nlon = 16, c = 8;
  auto tiny = [&](model::Mixer mixer) {
    model::ModelConfig m;
    m.nlat = nlat;
    m.nlon = nlon;
    m.n_max = 5;
    m.embed_dim = c;
    m.heads = 2;
    m.registers = 2;
    m.layers = 2;
    m.mixer = mixer;
    m.init_std = 0.3;
    m.seed = stream_seed(seed, 1);
    return m;
  };
  Rng rng(seed, 2);
  std::vector<GradCheckRow> rows;
  const std::size_t points = nlat * nlon;

  model::ShnoModel grsa_model(tiny(model::Mixer::grsa));
  const Tensor x = Tensor::randn({points, 3}, 1.0, rng);
  const Tensor z = Tensor::randn({points, c}, 1.0, rng);

  // Primitive blocks run at their own small shapes: encoder and decoder on a
  // 4x8 grid, ELA and MPFFN with 2 channels, attention on a handful of tokens.
  model::ModelConfig pc = tiny(model::Mixer::grsa);
  pc.nlat = 4;
  pc.nlon = 8;
  pc.n_max = -1;
  model::ShnoModel point_model(pc);
  const Tensor xp = Tensor::randn({32, 3}, 1.0, rng);
  const Tensor zp = Tensor::randn({32, c}, 1.0, rng);
  const Tensor z2 = Tensor::randn({points, 2}, 1.0, rng);

  {
    RowBuilder r("encoder", kBlockTol);
    const auto s = rng.next();
    r.input(ad::grad_check([&](const Tensor& t) { return probe(point_model.encode(t), s); }, xp, kBlockEps), xp.size());
    model::NamedParams ps;
    point_model.encoder().collect("encoder", ps);
    r.params(ad::grad_check_params([&] { return probe(point_model.encode(xp), s); }, ps, kBlockEps));
    rows.push_back(r.row);
  }
  {
    RowBuilder r("decoder", kBlockTol);
    const auto s = rng.next();
    r.input(ad::grad_check([&](const Tensor& t) { return probe(point_model.decode(t, xp), s); }, zp, kBlockEps), zp.size());
    r.input(ad::grad_check([&](const Tensor& t) { return probe(point_model.decode(zp, t), s); }, xp, kBlockEps), xp.size());
    model::NamedParams ps;
    point_model.decoder().collect("decoder", ps);
    ps.emplace_back("decoder.skip", point_model.decoder_skip());
    r.params(ad::grad_check_params([&] { return probe(point_model.decode(zp, xp), s); }, ps, kBlockEps));
    rows.push_back(r.row);
  }
  {
    RowBuilder r("sht_analysis", kBlockTol);
    const auto s = rng.next();
    const auto& plan = grsa_model.plan();
    r.input(ad::grad_check([&](const Tensor& t) { return cprobe(ad::sht_analysis(plan, t), s); }, z, kBlockEps), z.size());
    rows.push_back(r.row);
    RowBuilder q("sht_synthesis", kBlockTol);
    const CTensor zs = ad::sht_analysis(plan, z);
    q.input(complex_input_check([&](const CTensor& t) { return ad::CTensor{ad::sht_synthesis(plan, t), Tensor::zeros({points, c})}; }, zs, s, kBlockEps),
            2 * zs.size());
    rows.push_back(q.row);
  }
  {
    RowBuilder r("ela", kBlockTol);
    const auto s = rng.next();
    const model::ElaParams p = model::ElaParams::init(2, 7, 0.3, rng);
    r.input(ad::grad_check([&](const Tensor& t) { return probe(model::ela(t, p, nlat, nlon), s); }, z2, kBlockEps), z2.size());
    model::NamedParams ps;
    p.collect("ela", ps);
    r.params(ad::grad_check_params([&] { return probe(model::ela(z2, p, nlat, nlon), s); }, ps, kBlockEps));
    rows.push_back(r.row);
  }
  {
    RowBuilder r("mpffn", kBlockTol);
    const auto s = rng.next();
    model::MpffnParams p = model::MpffnParams::init(2, 4, 0.3, rng);
    for (auto& sc : p.path_scale)
      for (double& v : sc.mutable_data()) v = rng.uniform(0.5, 1.5);
    r.input(ad::grad_check([&](const Tensor& t) { return probe(model::mpffn(t, p, nlat, nlon), s); }, z2, kBlockEps), z2.size());
    model::NamedParams ps;
    p.collect("ffn", ps);
    r.params(ad::grad_check_params([&] { return probe(model::mpffn(z2, p, nlat, nlon), s); }, ps, kBlockEps));
    rows.push_back(r.row);
  }
  {
    RowBuilder r("smhsa", kBlockTol);
    const auto s = rng.next();
    const attn::SmhsaParams p = attn::SmhsaParams::init(4, 2, kAttnStd, rng);
    const CTensor t = CTensor::randn({3, 4}, 1.0, rng);
    r.input(complex_input_check([&](const CTensor& a) { return attn::smhsa(a, p); }, t, s, kBlockEps), 2 * t.size());
    r.params(ad::grad_check_params([&] { return cprobe(attn::smhsa(t, p), s); }, p.parameters(), kBlockEps));
    rows.push_back(r.row);
  }
  {
    RowBuilder r("laplacian", kBlockTol);
    const auto s = rng.next();
    const attn::CLinear g1 = attn::CLinear::init(4, 4, kAttnStd, rng), g2 = attn::CLinear::init(4, 4, kAttnStd, rng);
    const CTensor prev = CTensor::randn({4, 4}, 1.0, rng);
    const Tensor alpha = Tensor::scalar(0.4);
    const CTensor t = CTensor::randn({4, 4}, 1.0, rng);
    r.input(complex_input_check([&](const CTensor& a) { return attn::parametric_laplacian(a, g1, g2, alpha, prev).l; },
                                t, s, kBlockEps),
            2 * t.size());
    r.input(complex_input_check([&](const CTensor& l) { return attn::parametric_laplacian(t, g1, g2, alpha, l).l; },
                                prev, s, kBlockEps),
            2 * prev.size());
    r.input(ad::grad_check([&](const Tensor& a) { return cprobe(attn::parametric_laplacian(t, g1, g2, a, prev).l, s); },
                           alpha, kBlockEps),
            1);
    model::NamedParams ps;
    g1.collect("g1", ps);
    g2.collect("g2", ps);
    r.params(ad::grad_check_params([&] { return cprobe(attn::parametric_laplacian(t, g1, g2, alpha, prev).l, s); }, ps, kBlockEps));
    rows.push_back(r.row);
  }
  {
    RowBuilder r("grsa", kBlockTol);
    const auto s = rng.next();
    const attn::GrsaParams p = attn::GrsaParams::init(4, 1, 2, kAttnStd, rng);
    const CTensor t = CTensor::randn({4, 4}, 1.0, rng);
    attn::LaplacianState prev;
    prev.l.push_back(CTensor::randn({6, 6}, 0.5, rng));
    r.input(complex_input_check([&](const CTensor& a) { return attn::grsa(a, p, prev).out; }, t, s, kBlockEps), 2 * t.size());
    r.params(ad::grad_check_params([&] { return cprobe(attn::grsa(t, p, prev).out, s); }, p.parameters(), kBlockEps));
    rows.push_back(r.row);
  }
  for (model::Mixer mix : {model::Mixer::grsa, model::Mixer::smhsa, model::Mixer::sfno_linear}) {
    model::ShnoModel m(tiny(mix));
    const auto s = rng.next();
    {
      RowBuilder r("shno_layer." + model::mixer_name(mix), kDeepTol);
      const attn::LaplacianState prev = m.layer(z, 0, {}).second;
      r.input(ad::grad_check([&](const Tensor& t) { return probe(m.layer(t, 1, prev).first, s); }, z, kDeepEps), z.size());
      model::NamedParams ps;
      m.layers()[1].collect("layer1", mix, ps);
      r.params(ad::grad_check_params([&] { return probe(m.layer(z, 1, prev).first, s); }, ps, kDeepEps, 6, seed));
      rows.push_back(r.row);
    }
    {
      RowBuilder r("forward." + model::mixer_name(mix), kDeepTol);
      r.input(ad::grad_check([&](const Tensor& t) { return probe(m.forward(t), s); }, x, kDeepEps), x.size());
      r.params(ad::grad_check_params([&] { return probe(m.forward(x), s); }, m.parameters(), kDeepEps, 4, seed));
      rows.push_back(r.row);
    }
  }
  {
    RowBuilder r("loss.geometric_relative", kBlockTol);
    const Tensor truth = Tensor::randn({points, 3}, 1.0, rng);
    const auto w = train::metric_weights(grsa_model.plan().grid()).quad_w;
    r.input(ad::grad_check([&](const Tensor& t) { return train::geometric_relative_loss(t, truth, w, nlat, nlon); }, x,
                           kBlockEps),
            x.size());
    rows.push_back(r.row);
  }
  return rows;
}

void write_gradcheck_csv(std::ostream& os, const std::vector<GradCheckRow>& rows) {
  os << "block,max_rel_error,tolerance,coordinates,result,worst\n";
  for (const auto& r : rows) {
    std::ostringstream e;
    e << std::setprecision(3) << std::scientific << r.max_rel_error << ',' << r.tolerance;
    os << r.block << ',' << e.str() << ',' << r.coordinates << ',' << (r.pass() ? "pass" : "FAIL") << ',' << r.worst << '\n';
  }
}

// ---- commands ----

void gen_data(const config::RunConfig& cfg, bool train_split, bool test_split, std::ostream& log) {
  cfg.validate();
  prepare_out_dir(cfg);
  RunLog rl(cfg, "gen-data", log);
  const std::string echo = config::to_ini(cfg);
  auto run = [&](const swe::DatasetConfig& dc, const fs::path& path, const char* what) {
    const auto t0 = std::chrono::steady_clock::now();
    const swe::TrajectoryDataset d = swe::generate_dataset(dc);
    io::write_container(path, trajectory_container(d, "dataset", echo));
    std::ostringstream os;
    os << what << ": " << d.members << " members x " << d.times << " snapshots on " << d.nlat << "x" << d.nlon
       << " -> " << path.string() << " (" << std::fixed << std::setprecision(1)
       << std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() << " s)";
    rl.line(os.str());
  };
  if (train_split) run(cfg.train_dataset(), cfg.paths.resolve(cfg.paths.train_data), "train");
  if (test_split) run(cfg.test_dataset(), cfg.paths.resolve(cfg.paths.test_data), "test");
}

train::FitResult train_model(const config::RunConfig& cfg, std::ostream& log) {
  cfg.validate();
  const fs::path data_path = cfg.paths.resolve(cfg.paths.train_data);
  const swe::TrajectoryDataset data = load_trajectories(data_path, "training data");
  prepare_out_dir(cfg);
  RunLog rl(cfg, "train", log);
  model::ShnoModel m(cfg.model_config());
  {
    std::ostringstream os;
    os << "model " << model::mixer_name(cfg.model.mixer) << ", " << m.parameter_count() << " parameters; "
       << data.members << " members x " << data.times << " snapshots";
    rl.line(os.str());
  }
  const train::FitResult r = train::fit(m, data, cfg.train_config(), [&](const train::EpochLog& e) {
    std::ostringstream os;
    os << "epoch " << e.epoch << " lr " << std::setprecision(4) << e.lr << " train " << std::setprecision(6)
       << e.train_loss << " val " << e.val_loss << " steps " << e.steps << " skipped " << e.skipped << " ("
       << std::fixed << std::setprecision(1) << e.seconds << " s)";
    rl.line(os.str());
  });
  io::write_container(cfg.paths.resolve(cfg.paths.checkpoint), checkpoint_container(m, r.optim, config::to_ini(cfg)));
  std::ostringstream csv;
  train::write_history_csv(csv, r.history);
  write_text(cfg.paths.resolve(cfg.paths.history_csv), csv.str());
  rl.line("best epoch " + std::to_string(r.best_epoch) + "; checkpoint " +
          cfg.paths.resolve(cfg.paths.checkpoint).string());
  return r;
}

void rollout(const config::RunConfig& cfg, std::ostream& log) {
  cfg.validate();
  const Checkpoint ck = load_checkpoint(cfg.paths.resolve(cfg.paths.checkpoint));
  const swe::TrajectoryDataset test = load_trajectories(cfg.paths.resolve(cfg.paths.test_data), "test data");
  prepare_out_dir(cfg);
  RunLog rl(cfg, "rollout", log);
  swe::TrajectoryDataset out = test;
  out.times = cfg.eval.max_steps + 1;
  out.values.assign(out.members * out.times * out.snapshot_size(), 0.0);
  for (std::size_t m = 0; m < test.members; ++m) {
    std::vector<sht::GridField> states;
    try {
      states = model::rollout(ck.model, test.field(m, 0), cfg.eval.max_steps);
    } catch (const std::runtime_error& e) {
      throw train::NumericalError("rollout of test member " + std::to_string(m) + ": " + e.what());
    }
    for (std::size_t t = 0; t < states.size(); ++t)
      std::copy(states[t].values.begin(), states[t].values.end(), out.snapshot(m, t));
  }
  const fs::path path = cfg.paths.resolve(cfg.paths.forecast);
  io::write_container(path, trajectory_container(out, "forecast", config::to_ini(cfg)));
  rl.line(std::to_string(out.members) + " forecasts x " + std::to_string(cfg.eval.max_steps) + " steps -> " +
          path.string());
}

train::Evaluation evaluate(const config::RunConfig& cfg, std::ostream& log) {
  cfg.validate();
  const Checkpoint ck = load_checkpoint(cfg.paths.resolve(cfg.paths.checkpoint));
  const swe::TrajectoryDataset test = load_trajectories(cfg.paths.resolve(cfg.paths.test_data), "test data");
  prepare_out_dir(cfg);
  RunLog rl(cfg, "eval", log);
  const train::Evaluation e =
      train::evaluate_rollout(ck.model, model::mixer_name(ck.config.model.mixer), test, cfg.eval);
  std::ostringstream metrics, spec;
  train::write_metrics_csv(metrics, {&e.model, &e.persistence});
  train::write_spectra_csv(spec, {&e.model, &e.persistence});
  write_text(cfg.paths.resolve(cfg.paths.metrics_csv), metrics.str());
  write_text(cfg.paths.resolve(cfg.paths.spectra_csv), spec.str());
  std::ostringstream os;
  os << std::setprecision(4) << "one-step relative loss";
  for (std::size_t v = 0; v < e.model.variables.size(); ++v)
    os << ' ' << e.model.variables[v] << ' ' << e.model.rel_loss[v][0] << " (persistence "
       << e.persistence.rel_loss[v][0] << ")";
  os << "; lost forecasts " << e.model.nonfinite.back() << "/" << e.model.forecasts;
  rl.line(os.str());
  return e;
}

void spectra(const fs::path& container, const fs::path& csv) {
  const io::Container c = io::read_container(container);
  const std::string kind = expect_kind(c, {"dataset", "forecast"});
  const swe::TrajectoryDataset d = trajectory_from_container(c);
  const sht::SphericalGrid grid(d.nlat, d.nlon, d.radius);
  const sht::ShtPlan plan(grid, sht::Truncation::triangular(d.n_max));
  std::ostringstream os;
  os << std::setprecision(std::numeric_limits<double>::max_digits10) << "model,variable,lead,n,E_n\n";
  for (std::size_t t = 0; t < d.times; ++t) {
    std::vector<std::vector<double>> mean(d.channels(), std::vector<double>(static_cast<std::size_t>(d.n_max) + 1));
    for (std::size_t m = 0; m < d.members; ++m) {
      const sht::SpectralCoeffs s = sht::sht_forward(plan, d.field(m, t));
      for (std::size_t ch = 0; ch < d.channels(); ++ch) {
        const auto e = sht::degree_spectrum(s, ch);
        for (std::size_t n = 0; n < e.size(); ++n) mean[ch][n] += e[n];
      }
    }
    for (std::size_t ch = 0; ch < d.channels(); ++ch)
      for (std::size_t n = 0; n < mean[ch].size(); ++n)
        os << kind << ',' << d.channel_names[ch] << ',' << t << ',' << n << ','
           << mean[ch][n] / static_cast<double>(d.members) << '\n';
  }
  write_text(csv, os.str());
}

void export_csv(const fs::path& container, const fs::path& csv) {
  const io::Container c = io::read_container(container);
  expect_kind(c, {"dataset", "forecast"});
  const swe::TrajectoryDataset d = trajectory_from_container(c);
  const sht::SphericalGrid grid(d.nlat, d.nlon, d.radius);
  constexpr double deg = 180.0 / std::numbers::pi;
  std::ostringstream os;
  os << std::setprecision(std::numeric_limits<double>::max_digits10) << "member,hours,variable,lat,lon,value\n";
  for (std::size_t m = 0; m < d.members; ++m)
    for (std::size_t t = 0; t < d.times; ++t) {
      const double hours = (d.start_seconds + static_cast<double>(t) * d.interval_seconds) / 3600.0;
      const double* v = d.snapshot(m, t);
      for (std::size_t ch = 0; ch < d.channels(); ++ch)
        for (std::size_t i = 0; i < d.nlat; ++i)
          for (std::size_t j = 0; j < d.nlon; ++j)
            os << m << ',' << hours << ',' << d.channel_names[ch] << ',' << grid.lats_rad()[i] * deg << ','
               << grid.lons_rad()[j] * deg << ',' << v[(ch * d.nlat + i) * d.nlon + j] << '\n';
    }
  write_text(csv, os.str());
}

}  // namespace shno::pipeline
