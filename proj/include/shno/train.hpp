#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "shno/model.hpp"
#include "shno/swe.hpp"

// Losses, metrics, the optimiser and the training and evaluation loops.
namespace shno::train {

using ad::Tensor;
using attn::NamedParams;
using sht::GridField;

/// Raised for numerical failures that a run cannot recover from.
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct MetricWeights {
  std::vector<double> w;       // per latitude, cos(lat) normalised to mean 1
  std::vector<double> quad_w;  // per latitude, Gauss-Legendre weights
};

/// w_i = cos(lat_i) / mean_j cos(lat_j).
std::vector<double> latitude_weights(std::span<const double> lats_rad);
MetricWeights metric_weights(const sht::SphericalGrid& grid);

/// Mean over channels of sqrt(sum_i q_i |p - t|^2 / sum_i q_i |t|^2), with
/// q the per-latitude weights. Throws on a channel whose truth is zero.
double geometric_relative_loss(const GridField& pred, const GridField& truth, std::span<const double> lat_w);
/// Per-channel terms of the same loss.
std::vector<double> relative_loss_per_channel(const GridField& pred, const GridField& truth,
                                              std::span<const double> lat_w);
/// Taped version on channel-last [nlat*nlon, C] tensors; truth is a constant.
Tensor geometric_relative_loss(const Tensor& pred, const Tensor& truth, std::span<const double> lat_w,
                               std::size_t nlat, std::size_t nlon);

/// mean over channels and grid of w_i (p - t)^2.
double latitude_weighted_l2(const GridField& pred, const GridField& truth, std::span<const double> w);
Tensor latitude_weighted_l2(const Tensor& pred, const Tensor& truth, std::span<const double> w, std::size_t nlat,
                            std::size_t nlon);

/// Per variable: mean over forecasts of sqrt(mean_ij w_i (f - t)^2).
std::vector<double> rmse(const std::vector<GridField>& forecasts, const std::vector<GridField>& truths,
                         std::span<const double> w);
/// Per variable: sum w f' t' / sqrt(sum w f'^2 sum w t'^2), pooled over all
/// forecasts and grid points, anomalies taken against the climatology.
std::vector<double> acc(const std::vector<GridField>& forecasts, const std::vector<GridField>& truths,
                        const GridField& climatology, std::span<const double> w);
/// Time mean of a pool of fields.
GridField climatology(const std::vector<GridField>& pool);

// ---- optimiser ----

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1e-8;
  double weight_decay = 1e-5;
};

enum class NonfinitePolicy { skip, fail };

NonfinitePolicy parse_policy(const std::string& s);
std::string policy_name(NonfinitePolicy p);

struct OptimState {
  AdamWConfig hp;
  std::size_t step = 0;
  std::vector<std::vector<double>> m, v;  // shaped like the parameters

  static OptimState init(const NamedParams& params, const AdamWConfig& hp);
};

/// One decoupled-weight-decay Adam update. Returns false when the gradient
/// was nonfinite and the step was skipped; throws NumericalError instead
/// under NonfinitePolicy::fail.
bool optimizer_step(NamedParams& params, const std::vector<std::vector<double>>& grads, OptimState& state,
                    double lr, NonfinitePolicy policy = NonfinitePolicy::skip);

/// Linear warm-up to peak_lr (epoch e < warmup gets peak (e + 1) / warmup),
/// then cosine from peak_lr at epoch `warmup` to min_lr at the last epoch.
double lr_schedule(std::size_t epoch, std::size_t total_epochs, std::size_t warmup_epochs, double peak_lr,
                   double min_lr);

// ---- training ----

enum class LossKind { geometric_relative, latitude_l2 };

LossKind parse_loss(const std::string& s);
std::string loss_name(LossKind k);

struct TrainConfig {
  std::size_t epochs = 50;
  std::size_t batch_size = 16;
  double peak_lr = 1e-3;
  double min_lr = 2e-5;
  std::size_t warmup_epochs = 0;
  double val_fraction = 0.2;
  LossKind loss = LossKind::geometric_relative;
  AdamWConfig adam;
  NonfinitePolicy nonfinite = NonfinitePolicy::skip;
  std::uint64_t seed = 0;

  void validate() const;
};

/// One (x_t, x_{t+1}) training pair.
struct Sample {
  std::size_t member = 0;
  std::size_t time = 0;
};

std::vector<Sample> all_pairs(const swe::TrajectoryDataset& data);

struct EpochLog {
  std::size_t epoch = 0;  // 0 is the untrained model
  double lr = 0.0;
  double train_loss = 0.0;
  double val_loss = 0.0;  // NaN without a validation split
  std::size_t steps = 0;
  std::size_t skipped = 0;
  double seconds = 0.0;
};

struct FitResult {
  std::vector<EpochLog> history;
  std::size_t optimizer_steps = 0;
  std::size_t skipped_steps = 0;
  std::size_t best_epoch = 0;
  double best_val = 0.0;
  OptimState optim;
  std::vector<Sample> train_pairs, val_pairs;
};

using EpochCallback = std::function<void(const EpochLog&)>;

/// Per-channel mean and standard deviation over every grid value of the
/// listed input snapshots.
std::pair<std::vector<double>, std::vector<double>> channel_stats(const swe::TrajectoryDataset& data,
                                                                  const std::vector<Sample>& pairs);

/// Single-step supervised training on (x_t, x_{t+1}). Sets the model's
/// normalisation from the training inputs, trains in normalised space and
/// leaves the best-validation weights in the model (the last weights when
/// there is no validation split). history[0] evaluates the initial model;
/// later entries average the batch losses seen during the epoch.
FitResult fit(model::ShnoModel& model, const swe::TrajectoryDataset& data, const TrainConfig& cfg,
              const EpochCallback& on_epoch = {});

/// Mean loss of the model over pairs, in normalised space, without a tape.
double evaluate_loss(const model::ShnoModel& model, const swe::TrajectoryDataset& data,
                     const std::vector<Sample>& pairs, LossKind loss);

// ---- evaluation ----

struct EvalConfig {
  std::size_t max_steps = 100;
  std::size_t start_stride = 0;  // 0: a single start per member at time 0
};

struct EvalReport {
  std::string model;
  std::vector<std::string> variables;
  double interval_hours = 1.0;
  std::vector<std::size_t> leads;  // 1..max_steps, increasing
  // [variable][lead index]; NaN when no forecast reached that lead
  std::vector<std::vector<double>> rel_loss, rmse, acc;
  std::vector<std::size_t> valid;      // finite forecasts per lead
  std::vector<std::size_t> nonfinite;  // forecasts lost at or before each lead
  // [lead index][variable][degree], averaged over finite forecasts; lead
  // index 0 of `initial_spectra` is the initial state.
  std::vector<std::vector<std::vector<double>>> spectra, truth_spectra;
  std::vector<std::vector<double>> initial_spectra;  // [variable][degree]
  std::size_t forecasts = 0;
};

struct Evaluation {
  EvalReport model;
  EvalReport persistence;
};

/// Rolls `step` out from every start in the test pool and scores each lead
/// against the truth. Nonfinite forecasts (or steps that throw) are counted
/// and dropped from that lead on; the other forecasts carry on.
EvalReport evaluate_rollout(const model::StepFn& step, const std::string& name, const swe::TrajectoryDataset& test,
                            const EvalConfig& cfg);
/// The model and persistence on the same pool.
Evaluation evaluate_rollout(const model::ShnoModel& model, const std::string& name,
                            const swe::TrajectoryDataset& test, const EvalConfig& cfg);

// ---- CSV ----

/// model,variable,lead,hours,rel_loss,rmse,acc,valid,nonfinite
void write_metrics_csv(std::ostream& os, const std::vector<const EvalReport*>& reports);
/// model,variable,lead,n,E_n; truth rows use model "truth", lead 0 is the
/// initial state.
void write_spectra_csv(std::ostream& os, const std::vector<const EvalReport*>& reports);
/// epoch,lr,train_loss,val_loss,steps,skipped. Wall times stay out so the
/// file is reproducible byte for byte.
void write_history_csv(std::ostream& os, const std::vector<EpochLog>& history);

}  // namespace shno::train
