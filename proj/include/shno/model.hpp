#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "shno/attention.hpp"
#include "shno/sht.hpp"

// The spherical harmonic neural operator and its SFNO-linear baseline.
//
// Fields travel through the network channel-last, as [nlat*nlon, C]
// tensors. The model works on normalised data; predict() wraps it with the
// per-channel statistics stored alongside the weights.
namespace shno::model {

using ad::CTensor;
using ad::Tensor;
using attn::NamedParams;

enum class Mixer { grsa, smhsa, sfno_linear };

Mixer parse_mixer(const std::string& s);
std::string mixer_name(Mixer m);

struct ModelConfig {
  std::size_t in_channels = 3;
  std::size_t out_channels = 3;
  std::size_t embed_dim = 64;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t registers = 4;
  std::size_t nlat = 32;
  std::size_t nlon = 64;
  int n_max = -1;  // -1: largest alias-free truncation for the grid
  std::size_t ffn_expansion = 4;
  std::size_t ela_kernel = 7;
  double init_std = 0.02;
  Mixer mixer = Mixer::grsa;
  std::uint64_t seed = 0;

  sht::Truncation truncation() const;
  void validate() const;
};

struct Dense {
  Tensor w;  // [in, out]
  Tensor b;  // [out], may be absent

  static Dense init(std::size_t in, std::size_t out, double stddev, Rng& rng, bool bias = true);
  Tensor operator()(const Tensor& x) const;
  void collect(const std::string& prefix, NamedParams& out) const;
};

/// Pointwise two-layer perceptron with a GELU in between.
struct Mlp {
  Dense first, second;
  Tensor operator()(const Tensor& x) const;
  void collect(const std::string& prefix, NamedParams& out) const;
};

/// Instance normalisation with a per-channel affine map.
struct Norm {
  Tensor gamma, beta;  // [C]
  static Norm init(std::size_t channels);
  Tensor operator()(const Tensor& x) const;
  void collect(const std::string& prefix, NamedParams& out) const;
};

/// Local gating from latitude and longitude strips.
struct ElaParams {
  Tensor conv_lat;  // [K, C], clamped at the poles
  Tensor conv_lon;  // [K, C], periodic
  Norm norm_lat, norm_lon;

  static ElaParams init(std::size_t channels, std::size_t kernel, double stddev, Rng& rng);
  void collect(const std::string& prefix, NamedParams& out) const;
};

Tensor ela(const Tensor& g, const ElaParams& p, std::size_t nlat, std::size_t nlon);

/// Expansion, three box-averaging paths at scales 1, 3, 5, projection back.
struct MpffnParams {
  Dense up, down;
  std::vector<Tensor> path_scale;  // per path, [group width], init 1
  std::vector<std::size_t> widths{1, 3, 5};

  static MpffnParams init(std::size_t channels, std::size_t expansion, double stddev, Rng& rng);
  void collect(const std::string& prefix, NamedParams& out) const;
};

Tensor mpffn(const Tensor& g, const MpffnParams& p, std::size_t nlat, std::size_t nlon);

struct LayerParams {
  Norm norm1, norm2;
  CTensor degree_encoding;  // [modes, C]
  Tensor residual;          // [C, C], init identity
  ElaParams ela;
  MpffnParams ffn;
  attn::GrsaParams grsa;
  attn::SmhsaParams smhsa;
  CTensor degree_weights;   // sfno_linear: [n_max+1, C, C], init identity

  void collect(const std::string& prefix, Mixer mixer, NamedParams& out) const;
};

/// Hook observing each layer's input Laplacian state and output state.
using LaplacianHook =
    std::function<void(std::size_t layer, const attn::LaplacianState& in, const attn::LaplacianState& out)>;

class ShnoModel {
 public:
  explicit ShnoModel(const ModelConfig& cfg);

  const ModelConfig& config() const { return cfg_; }
  const sht::ShtPlan& plan() const { return *plan_; }
  const std::vector<int>& mode_degrees() const { return degrees_; }

  Tensor encode(const Tensor& x) const;
  Tensor decode(const Tensor& z, const Tensor& x) const;
  /// One spectral layer; sfno_linear models ignore and return an empty state.
  std::pair<Tensor, attn::LaplacianState> layer(const Tensor& z, std::size_t index,
                                                const attn::LaplacianState& state) const;
  /// Normalised input [nlat*nlon, in_channels] -> normalised output.
  Tensor forward(const Tensor& x, const LaplacianHook& hook = {}) const;

  /// Physical GridField in, physical GridField out, untaped.
  sht::GridField predict(const sht::GridField& x) const;

  void set_normalization(std::vector<double> mean, std::vector<double> stddev);
  const std::vector<double>& norm_mean() const { return mean_; }
  const std::vector<double>& norm_std() const { return std_; }
  Tensor normalize(const sht::GridField& f) const;
  sht::GridField denormalize(const Tensor& t) const;

  NamedParams parameters() const;
  std::size_t parameter_count() const;

  Mlp& encoder() { return encoder_; }
  Mlp& decoder() { return decoder_; }
  Tensor& decoder_skip() { return skip_; }
  std::vector<LayerParams>& layers() { return layers_; }
  const std::vector<LayerParams>& layers() const { return layers_; }

 private:
  ModelConfig cfg_;
  std::shared_ptr<const sht::ShtPlan> plan_;
  std::vector<int> degrees_;
  Mlp encoder_, decoder_;
  Tensor skip_;  // [in, out], init identity
  std::vector<LayerParams> layers_;
  std::vector<double> mean_, std_;
};

/// Closed-form parameter count for a configuration.
std::size_t expected_parameter_count(const ModelConfig& cfg);

using StepFn = std::function<sht::GridField(const sht::GridField&)>;

/// [x0, f(x0), f(f(x0)), ...], steps + 1 states. Throws on a nonfinite state
/// naming the step.
std::vector<sht::GridField> rollout(const StepFn& f, const sht::GridField& x0, std::size_t steps);
std::vector<sht::GridField> rollout(const ShnoModel& model, const sht::GridField& x0, std::size_t steps);

StepFn persistence();

}  // namespace shno::model
