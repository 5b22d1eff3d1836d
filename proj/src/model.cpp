#include "shno/model.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "shno/kernels.hpp"

namespace shno::model {

using namespace shno::ad;

Mixer parse_mixer(const std::string& s) {
  if (s == "grsa") return Mixer::grsa;
  if (s == "smhsa") return Mixer::smhsa;
  if (s == "sfno_linear") return Mixer::sfno_linear;
  throw std::invalid_argument("unknown mixer '" + s + "' (expected grsa, smhsa or sfno_linear)");
}

std::string mixer_name(Mixer m) {
  switch (m) {
    case Mixer::grsa: return "grsa";
    case Mixer::smhsa: return "smhsa";
    case Mixer::sfno_linear: return "sfno_linear";
  }
  return "?";
}

sht::Truncation ModelConfig::truncation() const {
  if (n_max < 0) return sht::Truncation::for_grid(nlat, nlon);
  return sht::Truncation::triangular(n_max);
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("model config: " + m); };
  if (in_channels == 0 || out_channels == 0) fail("channel counts must be positive");
  if (embed_dim == 0) fail("embed_dim must be positive");
  if (heads == 0 || embed_dim % heads != 0)
    fail("embed_dim " + std::to_string(embed_dim) + " is not divisible by heads " + std::to_string(heads));
  if (nlat < 2 || nlon < 2) fail("grid " + std::to_string(nlat) + "x" + std::to_string(nlon) + " is too small");
  if (ffn_expansion == 0) fail("ffn_expansion must be positive");
  if (ffn_expansion * embed_dim < 3) fail("ffn width must hold three paths");
  if (ela_kernel % 2 == 0) fail("ela_kernel must be odd");
  if (!(init_std > 0.0)) fail("init_std must be positive");
  const auto t = truncation();
  t.validate();
  if (static_cast<std::size_t>(t.m_max) > (nlon - 1) / 2 || static_cast<std::size_t>(t.n_max) >= nlat)
    fail("truncation n_max=" + std::to_string(t.n_max) + " is not resolved by the " + std::to_string(nlat) + "x" +
         std::to_string(nlon) + " grid");
}

Dense Dense::init(std::size_t in, std::size_t out, double stddev, Rng& rng, bool bias) {
  Dense d{Tensor::randn({in, out}, stddev, rng, true), {}};
  if (bias) d.b = Tensor::zeros({out}, true);
  return d;
}

Tensor Dense::operator()(const Tensor& x) const {
  return b.defined() ? affine(x, w, b) : matmul(x, w);
}

void Dense::collect(const std::string& prefix, NamedParams& out) const {
  out.emplace_back(prefix + ".w", w);
  if (b.defined()) out.emplace_back(prefix + ".b", b);
}

Tensor Mlp::operator()(const Tensor& x) const { return second(gelu(first(x))); }

void Mlp::collect(const std::string& prefix, NamedParams& out) const {
  first.collect(prefix + ".0", out);
  second.collect(prefix + ".1", out);
}

Norm Norm::init(std::size_t channels) {
  return {Tensor::full({channels}, 1.0, true), Tensor::zeros({channels}, true)};
}

Tensor Norm::operator()(const Tensor& x) const { return add(mul(instance_norm(x), gamma), beta); }

void Norm::collect(const std::string& prefix, NamedParams& out) const {
  out.emplace_back(prefix + ".gamma", gamma);
  out.emplace_back(prefix + ".beta", beta);
}

ElaParams ElaParams::init(std::size_t channels, std::size_t kernel, double stddev, Rng& rng) {
  ElaParams p;
  p.conv_lat = Tensor::randn({kernel, channels}, stddev, rng, true);
  p.conv_lon = Tensor::randn({kernel, channels}, stddev, rng, true);
  p.norm_lat = Norm::init(channels);
  p.norm_lon = Norm::init(channels);
  return p;
}

void ElaParams::collect(const std::string& prefix, NamedParams& out) const {
  out.emplace_back(prefix + ".conv_lat", conv_lat);
  out.emplace_back(prefix + ".conv_lon", conv_lon);
  norm_lat.collect(prefix + ".norm_lat", out);
  norm_lon.collect(prefix + ".norm_lon", out);
}

Tensor ela(const Tensor& g, const ElaParams& p, std::size_t nlat, std::size_t nlon) {
  const std::size_t c = g.dim(1);
  const Tensor g3 = reshape(g, {nlat, nlon, c});
  const Tensor strip_lat = mean_axis(g3, 1, false);  // [nlat, C]
  const Tensor strip_lon = mean_axis(g3, 0, false);  // [nlon, C]
  const Tensor gate_lat = sigmoid(p.norm_lat(depthwise_conv1d(strip_lat, p.conv_lat, false)));
  const Tensor gate_lon = sigmoid(p.norm_lon(depthwise_conv1d(strip_lon, p.conv_lon, true)));
  const Tensor gated = mul(mul(g3, reshape(gate_lat, {nlat, 1, c})), reshape(gate_lon, {1, nlon, c}));
  return reshape(gated, {nlat * nlon, c});
}

namespace {

std::vector<std::size_t> path_sizes(std::size_t width, std::size_t paths) {
  std::vector<std::size_t> s(paths, width / paths);
  for (std::size_t i = 0; i < width % paths; ++i) ++s[i];
  return s;
}

}  // namespace

MpffnParams MpffnParams::init(std::size_t channels, std::size_t expansion, double stddev, Rng& rng) {
  MpffnParams p;
  const std::size_t hidden = channels * expansion;
  p.up = Dense::init(channels, hidden, stddev, rng);
  // A layer's output only reaches the next instance norm (or the decoder's
  // biased input layer), so a bias here would be dead weight.
  p.down = Dense::init(hidden, channels, stddev, rng, false);
  for (std::size_t s : path_sizes(hidden, p.widths.size())) p.path_scale.push_back(Tensor::full({s}, 1.0, true));
  return p;
}

void MpffnParams::collect(const std::string& prefix, NamedParams& out) const {
  up.collect(prefix + ".up", out);
  down.collect(prefix + ".down", out);
  for (std::size_t k = 0; k < path_scale.size(); ++k)
    out.emplace_back(prefix + ".scale" + std::to_string(widths[k]), path_scale[k]);
}

namespace {

// The hidden stage of the feed-forward block as one op: for every path,
// gelu(scale * box_average(h[:, path])), written back in place of the path.
// Fusing it keeps the [P, expansion*C] intermediates off the tape.
Tensor multipath(const Tensor& h, const std::vector<Tensor>& scales, const std::vector<std::size_t>& widths,
                 std::size_t nlat, std::size_t nlon) {
  const std::size_t pts = h.dim(0), hid = h.dim(1);
  std::vector<double> y(h.size());
  std::vector<std::vector<double>> pooled(widths.size());
  const auto hv = h.data();
  std::size_t offset = 0;
  for (std::size_t k = 0; k < widths.size(); ++k) {
    const std::size_t len = scales[k].size();
    std::vector<double> part(pts * len);
    for (std::size_t i = 0; i < pts; ++i)
      std::copy_n(hv.begin() + static_cast<std::ptrdiff_t>(i * hid + offset), len,
                  part.begin() + static_cast<std::ptrdiff_t>(i * len));
    if (widths[k] > 1) {
      pooled[k].resize(part.size());
      kernels::box_average(part, pooled[k], nlat, nlon, len, widths[k]);
    } else {
      pooled[k] = std::move(part);
    }
    const auto sv = scales[k].data();
    for (std::size_t i = 0; i < pts; ++i)
      for (std::size_t c = 0; c < len; ++c) {
        const double v = sv[c] * pooled[k][i * len + c];
        y[i * hid + offset + c] = 0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
      }
    offset += len;
  }
  std::vector<Tensor> inputs{h};
  inputs.insert(inputs.end(), scales.begin(), scales.end());
  return make_result(
      h.shape(), std::move(y), std::move(inputs),
      [pooled = std::move(pooled), widths, pts, hid, nlat, nlon](const Record& rec, std::span<const double> g,
                                                                  std::span<double* const> gin) {
        const auto yv = rec.output.data();
        std::size_t offset = 0;
        for (std::size_t k = 0; k < widths.size(); ++k) {
          const auto sv = rec.inputs[k + 1].data();
          const std::size_t len = sv.size();
          double* gs = gin[k + 1];
          std::vector<double> gp(pts * len);
          for (std::size_t i = 0; i < pts; ++i)
            for (std::size_t c = 0; c < len; ++c) {
              const double b = pooled[k][i * len + c];
              const double v = sv[c] * b;
              const double phi = std::abs(v) > 1e-150 ? yv[i * hid + offset + c] / v : 0.5;
              const double gv = g[i * hid + offset + c] *
                                (phi + v * std::numbers::inv_sqrtpi / std::numbers::sqrt2 * std::exp(-0.5 * v * v));
              if (gs) gs[c] += gv * b;
              gp[i * len + c] = gv * sv[c];
            }
          if (gin[0]) {
            std::vector<double> gu;
            if (widths[k] > 1) {
              gu.assign(gp.size(), 0.0);
              kernels::box_average_adjoint(gp, gu, nlat, nlon, len, widths[k]);
            } else {
              gu = std::move(gp);
            }
            for (std::size_t i = 0; i < pts; ++i)
              for (std::size_t c = 0; c < len; ++c) gin[0][i * hid + offset + c] += gu[i * len + c];
          }
          offset += len;
        }
      });
}

}  // namespace

Tensor mpffn(const Tensor& g, const MpffnParams& p, std::size_t nlat, std::size_t nlon) {
  return p.down(multipath(p.up(g), p.path_scale, p.widths, nlat, nlon));
}

void LayerParams::collect(const std::string& prefix, Mixer mixer, NamedParams& out) const {
  norm1.collect(prefix + ".norm1", out);
  norm2.collect(prefix + ".norm2", out);
  out.emplace_back(prefix + ".residual", residual);
  ffn.collect(prefix + ".ffn", out);
  if (mixer == Mixer::sfno_linear) {
    out.emplace_back(prefix + ".degree_weights.re", degree_weights.re);
    out.emplace_back(prefix + ".degree_weights.im", degree_weights.im);
    return;
  }
  out.emplace_back(prefix + ".degree_encoding.re", degree_encoding.re);
  out.emplace_back(prefix + ".degree_encoding.im", degree_encoding.im);
  ela.collect(prefix + ".ela", out);
  const NamedParams mp =
      mixer == Mixer::grsa ? grsa.parameters(prefix + ".grsa.") : smhsa.parameters(prefix + ".smhsa.");
  out.insert(out.end(), mp.begin(), mp.end());
}

namespace {

Tensor identity(std::size_t rows, std::size_t cols) {
  Tensor t = Tensor::zeros({rows, cols}, true);
  for (std::size_t i = 0; i < std::min(rows, cols); ++i) t.mutable_data()[i * cols + i] = 1.0;
  return t;
}

void require_finite(const Tensor& t, std::size_t layer, const char* stage) {
  for (double v : t.data())
    if (!std::isfinite(v))
      throw std::runtime_error("layer " + std::to_string(layer) + ": nonfinite value after " + stage);
}

}  // namespace

ShnoModel::ShnoModel(const ModelConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  const auto trunc = cfg_.truncation();
  plan_ = std::make_shared<const sht::ShtPlan>(sht::SphericalGrid(cfg_.nlat, cfg_.nlon), trunc);
  degrees_ = plan_->modes().degree;
  const std::size_t c = cfg_.embed_dim, modes = plan_->num_modes();
  const double s = cfg_.init_std;
  Rng rng(cfg_.seed, 0x5eed);
  // The first layer's instance norm removes any constant the encoder adds,
  // so its output layer has no bias.
  encoder_ = {Dense::init(cfg_.in_channels, c, s, rng), Dense::init(c, c, s, rng, false)};
  for (std::size_t l = 0; l < cfg_.layers; ++l) {
    LayerParams p;
    p.norm1 = Norm::init(c);
    p.norm2 = Norm::init(c);
    p.residual = identity(c, c);
    p.ffn = MpffnParams::init(c, cfg_.ffn_expansion, s, rng);
    switch (cfg_.mixer) {
      case Mixer::grsa:
        p.degree_encoding = CTensor::randn({modes, c}, s, rng, true);
        p.ela = ElaParams::init(c, cfg_.ela_kernel, s, rng);
        p.grsa = attn::GrsaParams::init(c, cfg_.heads, cfg_.registers, s, rng);
        break;
      case Mixer::smhsa:
        p.degree_encoding = CTensor::randn({modes, c}, s, rng, true);
        p.ela = ElaParams::init(c, cfg_.ela_kernel, s, rng);
        p.smhsa = attn::SmhsaParams::init(c, cfg_.heads, s, rng);
        break;
      case Mixer::sfno_linear: {
        const auto nd = static_cast<std::size_t>(trunc.n_max) + 1;
        Tensor re = Tensor::zeros({nd, c, c}, true);
        for (std::size_t n = 0; n < nd; ++n)
          for (std::size_t i = 0; i < c; ++i) re.mutable_data()[(n * c + i) * c + i] = 1.0;
        p.degree_weights = {re, Tensor::zeros({nd, c, c}, true)};
        break;
      }
    }
    layers_.push_back(std::move(p));
  }
  decoder_ = {Dense::init(c + cfg_.in_channels, c, s, rng), Dense::init(c, cfg_.out_channels, s, rng)};
  skip_ = identity(cfg_.in_channels, cfg_.out_channels);
  mean_.assign(cfg_.in_channels, 0.0);
  std_.assign(cfg_.in_channels, 1.0);
}

Tensor ShnoModel::encode(const Tensor& x) const {
  if (x.rank() != 2 || x.dim(0) != plan_->num_points() || x.dim(1) != cfg_.in_channels)
    throw std::invalid_argument("encode: expected [" + std::to_string(plan_->num_points()) + ", " +
                                std::to_string(cfg_.in_channels) + "], got " + shape_str(x.shape()));
  return encoder_(x);
}

Tensor ShnoModel::decode(const Tensor& z, const Tensor& x) const {
  if (z.rank() != 2 || x.rank() != 2 || z.dim(0) != x.dim(0) || z.dim(1) != cfg_.embed_dim ||
      x.dim(1) != cfg_.in_channels)
    throw std::invalid_argument("decode: incompatible latent " + shape_str(z.shape()) + " and input " +
                                shape_str(x.shape()));
  return add(decoder_(concat({z, x}, 1)), matmul(x, skip_));
}

std::pair<Tensor, attn::LaplacianState> ShnoModel::layer(const Tensor& z, std::size_t index,
                                                         const attn::LaplacianState& state) const {
  const LayerParams& p = layers_.at(index);
  const std::size_t h = cfg_.nlat, w = cfg_.nlon;
  const CTensor spec = sht_analysis(*plan_, p.norm1(z));
  const Tensor base = sht_synthesis(*plan_, spec);
  attn::LaplacianState next;
  Tensor mixed;
  if (cfg_.mixer == Mixer::sfno_linear) {
    mixed = sht_synthesis(*plan_, cgrouped_linear(spec, p.degree_weights, degrees_));
  } else {
    const CTensor tokens = cadd(spec, p.degree_encoding);
    CTensor t;
    if (cfg_.mixer == Mixer::grsa) {
      auto r = attn::grsa(tokens, p.grsa, state);
      t = std::move(r.out);
      next = std::move(r.state);
    } else {
      t = attn::smhsa(tokens, p.smhsa);
    }
    require_finite(t.re, index, "attention");
    require_finite(t.im, index, "attention");
    mixed = ela(sht_synthesis(*plan_, t), p.ela, h, w);
  }
  const Tensor zz = add(mixed, matmul(base, p.residual));
  require_finite(zz, index, "spectral mixing");
  Tensor out = add(mpffn(p.norm2(gelu(zz)), p.ffn, h, w), base);
  require_finite(out, index, "feed-forward");
  return {std::move(out), std::move(next)};
}

Tensor ShnoModel::forward(const Tensor& x, const LaplacianHook& hook) const {
  Tensor z = encode(x);
  attn::LaplacianState state;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    auto [out, next] = layer(z, l, state);
    if (hook) hook(l, state, next);
    z = std::move(out);
    state = std::move(next);
  }
  return decode(z, x);
}

void ShnoModel::set_normalization(std::vector<double> mean, std::vector<double> stddev) {
  if (mean.size() != cfg_.in_channels || stddev.size() != cfg_.in_channels)
    throw std::invalid_argument("normalization: expected " + std::to_string(cfg_.in_channels) + " channels");
  for (double s : stddev)
    if (!(s > 0.0)) throw std::invalid_argument("normalization: standard deviations must be positive");
  mean_ = std::move(mean);
  std_ = std::move(stddev);
}

Tensor ShnoModel::normalize(const sht::GridField& f) const {
  if (f.channels != cfg_.in_channels || f.nlat != cfg_.nlat || f.nlon != cfg_.nlon)
    throw std::invalid_argument("normalize: field " + std::to_string(f.channels) + "x" + std::to_string(f.nlat) +
                                "x" + std::to_string(f.nlon) + " does not match the model");
  auto v = sht::to_channel_last(f);
  const std::size_t c = f.channels;
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = (v[i] - mean_[i % c]) / std_[i % c];
  return Tensor({f.nlat * f.nlon, c}, std::move(v));
}

sht::GridField ShnoModel::denormalize(const Tensor& t) const {
  const std::size_t c = cfg_.out_channels;
  if (t.rank() != 2 || t.dim(1) != c || t.dim(0) != cfg_.nlat * cfg_.nlon)
    throw std::invalid_argument("denormalize: unexpected shape " + shape_str(t.shape()));
  std::vector<double> v(t.values());
  // Output channels share statistics with the matching input channels.
  for (std::size_t i = 0; i < v.size(); ++i) {
    const std::size_t k = i % c;
    if (k < mean_.size()) v[i] = v[i] * std_[k] + mean_[k];
  }
  return sht::from_channel_last(v, c, cfg_.nlat, cfg_.nlon);
}

sht::GridField ShnoModel::predict(const sht::GridField& x) const {
  NoGradGuard no_grad;
  return denormalize(forward(normalize(x)));
}

NamedParams ShnoModel::parameters() const {
  NamedParams out;
  encoder_.collect("encoder", out);
  for (std::size_t l = 0; l < layers_.size(); ++l) layers_[l].collect("layer" + std::to_string(l), cfg_.mixer, out);
  decoder_.collect("decoder", out);
  out.emplace_back("decoder.skip", skip_);
  return out;
}

std::size_t ShnoModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : parameters()) n += t.size();
  return n;
}

std::size_t expected_parameter_count(const ModelConfig& cfg) {
  const std::size_t c = cfg.embed_dim, ci = cfg.in_channels, co = cfg.out_channels;
  const std::size_t e = c * cfg.ffn_expansion, d = c / cfg.heads;
  const std::size_t modes = cfg.truncation().num_modes();
  const std::size_t clin = 2 * c * c + 2 * c;  // complex C x C map with bias
  std::size_t per_layer = 4 * c + c * c + (c * e + e) + e + e * c;
  switch (cfg.mixer) {
    case Mixer::grsa:
      per_layer += 2 * modes * c + (2 * cfg.ela_kernel * c + 4 * c) + 4 * clin +
                   cfg.heads * ((2 * c * d + 2 * d) + (2 * d * d + 2 * d)) + 2 * cfg.registers * c + 2;
      break;
    case Mixer::smhsa:
      per_layer += 2 * modes * c + (2 * cfg.ela_kernel * c + 4 * c) + 4 * clin - 2 * c;
      break;
    case Mixer::sfno_linear:
      per_layer += 2 * (static_cast<std::size_t>(cfg.truncation().n_max) + 1) * c * c;
      break;
  }
  const std::size_t encoder = ci * c + c + c * c;
  const std::size_t decoder = (c + ci) * c + c + c * co + co + ci * co;
  return encoder + cfg.layers * per_layer + decoder;
}

std::vector<sht::GridField> rollout(const StepFn& f, const sht::GridField& x0, std::size_t steps) {
  std::vector<sht::GridField> out{x0};
  out.reserve(steps + 1);
  for (std::size_t k = 1; k <= steps; ++k) {
    out.push_back(f(out.back()));
    if (!out.back().all_finite()) throw std::runtime_error("rollout: nonfinite state at step " + std::to_string(k));
  }
  return out;
}

std::vector<sht::GridField> rollout(const ShnoModel& model, const sht::GridField& x0, std::size_t steps) {
  if (model.config().in_channels != model.config().out_channels)
    throw std::invalid_argument("rollout: model maps " + std::to_string(model.config().in_channels) + " to " +
                                std::to_string(model.config().out_channels) + " channels");
  return rollout([&model](const sht::GridField& x) { return model.predict(x); }, x0, steps);
}

StepFn persistence() {
  return [](const sht::GridField& x) { return x; };
}

}  // namespace shno::model
