#include "shno/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <ostream>
#include <numbers>
#include <random>

namespace shno::train {

using namespace shno::ad;

namespace {

void check_same(const GridField& a, const GridField& b, const char* op) {
  if (a.channels != b.channels || a.nlat != b.nlat || a.nlon != b.nlon)
    throw std::invalid_argument(std::string(op) + ": fields " + std::to_string(a.channels) + "x" +
                                std::to_string(a.nlat) + "x" + std::to_string(a.nlon) + " and " +
                                std::to_string(b.channels) + "x" + std::to_string(b.nlat) + "x" +
                                std::to_string(b.nlon) + " differ");
}

void check_weights(std::span<const double> w, std::size_t nlat, const char* op) {
  if (w.size() != nlat)
    throw std::invalid_argument(std::string(op) + ": " + std::to_string(w.size()) + " latitude weights for " +
                                std::to_string(nlat) + " latitudes");
}

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

}  // namespace

std::vector<double> latitude_weights(std::span<const double> lats_rad) {
  if (lats_rad.empty()) throw std::invalid_argument("latitude_weights: no latitudes");
  std::vector<double> w(lats_rad.size());
  double total = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) total += (w[i] = std::cos(lats_rad[i]));
  const double mean = total / static_cast<double>(w.size());
  for (double& x : w) x /= mean;
  return w;
}

MetricWeights metric_weights(const sht::SphericalGrid& grid) {
  MetricWeights m;
  m.w = latitude_weights(grid.lats_rad());
  m.quad_w.assign(grid.quad_weights().begin(), grid.quad_weights().end());
  return m;
}

std::vector<double> relative_loss_per_channel(const GridField& pred, const GridField& truth,
                                              std::span<const double> lat_w) {
  check_same(pred, truth, "geometric_relative_loss");
  check_weights(lat_w, truth.nlat, "geometric_relative_loss");
  std::vector<double> out(truth.channels);
  for (std::size_t c = 0; c < truth.channels; ++c) {
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < truth.nlat; ++i) {
      double rn = 0.0, rd = 0.0;
      for (std::size_t j = 0; j < truth.nlon; ++j) {
        const double t = truth.at(c, i, j), d = pred.at(c, i, j) - t;
        rn += d * d;
        rd += t * t;
      }
      num += lat_w[i] * rn;
      den += lat_w[i] * rd;
    }
    if (!(den > 0.0))
      throw std::invalid_argument("geometric_relative_loss: channel " + std::to_string(c) + " of the truth is zero");
    out[c] = std::sqrt(num / den);
  }
  return out;
}

double geometric_relative_loss(const GridField& pred, const GridField& truth, std::span<const double> lat_w) {
  const auto per = relative_loss_per_channel(pred, truth, lat_w);
  return std::accumulate(per.begin(), per.end(), 0.0) / static_cast<double>(per.size());
}

namespace {

// [P, 1] column of per-point weights from per-latitude ones.
Tensor point_weights(std::span<const double> lat_w, std::size_t nlat, std::size_t nlon) {
  std::vector<double> w(nlat * nlon);
  for (std::size_t i = 0; i < nlat; ++i) std::fill_n(w.begin() + static_cast<std::ptrdiff_t>(i * nlon), nlon, lat_w[i]);
  return Tensor({nlat * nlon, 1}, std::move(w));
}

void check_tensor_pair(const Tensor& pred, const Tensor& truth, std::size_t points, const char* op) {
  if (pred.shape() != truth.shape() || pred.rank() != 2 || pred.dim(0) != points)
    throw std::invalid_argument(std::string(op) + ": prediction " + shape_str(pred.shape()) + " and truth " +
                                shape_str(truth.shape()) + " do not match a " + std::to_string(points) +
                                "-point grid");
}

}  // namespace

Tensor geometric_relative_loss(const Tensor& pred, const Tensor& truth, std::span<const double> lat_w,
                               std::size_t nlat, std::size_t nlon) {
  check_tensor_pair(pred, truth, nlat * nlon, "geometric_relative_loss");
  check_weights(lat_w, nlat, "geometric_relative_loss");
  const Tensor w = point_weights(lat_w, nlat, nlon);
  const Tensor d = sub(pred, truth);
  const Tensor num = sum_axis(mul(mul(d, d), w), 0);
  const Tensor den = sum_axis(mul(mul(truth, truth), w), 0);
  for (std::size_t c = 0; c < den.size(); ++c)
    if (!(den.at(c) > 0.0))
      throw std::invalid_argument("geometric_relative_loss: channel " + std::to_string(c) + " of the truth is zero");
  return mean(sqrt(div(num, den)));
}

double latitude_weighted_l2(const GridField& pred, const GridField& truth, std::span<const double> w) {
  check_same(pred, truth, "latitude_weighted_l2");
  check_weights(w, truth.nlat, "latitude_weighted_l2");
  double s = 0.0;
  for (std::size_t c = 0; c < truth.channels; ++c)
    for (std::size_t i = 0; i < truth.nlat; ++i) {
      double row = 0.0;
      for (std::size_t j = 0; j < truth.nlon; ++j) {
        const double d = pred.at(c, i, j) - truth.at(c, i, j);
        row += d * d;
      }
      s += w[i] * row;
    }
  return s / static_cast<double>(truth.values.size());
}

Tensor latitude_weighted_l2(const Tensor& pred, const Tensor& truth, std::span<const double> w, std::size_t nlat,
                            std::size_t nlon) {
  check_tensor_pair(pred, truth, nlat * nlon, "latitude_weighted_l2");
  check_weights(w, nlat, "latitude_weighted_l2");
  const Tensor d = sub(pred, truth);
  return mean(mul(mul(d, d), point_weights(w, nlat, nlon)));
}

std::vector<double> rmse(const std::vector<GridField>& forecasts, const std::vector<GridField>& truths,
                         std::span<const double> w) {
  if (forecasts.size() != truths.size() || forecasts.empty())
    throw std::invalid_argument("rmse: " + std::to_string(forecasts.size()) + " forecasts for " +
                                std::to_string(truths.size()) + " truths");
  const std::size_t nc = truths[0].channels;
  std::vector<double> out(nc, 0.0);
  for (std::size_t k = 0; k < forecasts.size(); ++k) {
    check_same(forecasts[k], truths[k], "rmse");
    check_weights(w, truths[k].nlat, "rmse");
    const GridField& f = forecasts[k];
    const GridField& t = truths[k];
    for (std::size_t c = 0; c < nc; ++c) {
      // row sums first, then one weight per latitude
      double s = 0.0;
      for (std::size_t i = 0; i < t.nlat; ++i) {
        double row = 0.0;
        for (std::size_t j = 0; j < t.nlon; ++j) {
          const double d = f.at(c, i, j) - t.at(c, i, j);
          row += d * d;
        }
        s += w[i] * row;
      }
      out[c] += std::sqrt(s / static_cast<double>(t.nlat * t.nlon));
    }
  }
  for (double& v : out) v /= static_cast<double>(forecasts.size());
  return out;
}

std::vector<double> acc(const std::vector<GridField>& forecasts, const std::vector<GridField>& truths,
                        const GridField& clim, std::span<const double> w) {
  if (forecasts.size() != truths.size() || forecasts.empty())
    throw std::invalid_argument("acc: " + std::to_string(forecasts.size()) + " forecasts for " +
                                std::to_string(truths.size()) + " truths");
  const std::size_t nc = truths[0].channels;
  std::vector<double> ft(nc, 0.0), ff(nc, 0.0), tt(nc, 0.0);
  for (std::size_t k = 0; k < forecasts.size(); ++k) {
    check_same(forecasts[k], truths[k], "acc");
    check_same(clim, truths[k], "acc");
    check_weights(w, truths[k].nlat, "acc");
    for (std::size_t c = 0; c < nc; ++c)
      for (std::size_t i = 0; i < clim.nlat; ++i)
        for (std::size_t j = 0; j < clim.nlon; ++j) {
          const double fa = forecasts[k].at(c, i, j) - clim.at(c, i, j);
          const double ta = truths[k].at(c, i, j) - clim.at(c, i, j);
          ft[c] += w[i] * fa * ta;
          ff[c] += w[i] * fa * fa;
          tt[c] += w[i] * ta * ta;
        }
  }
  std::vector<double> out(nc);
  for (std::size_t c = 0; c < nc; ++c) {
    if (!(ff[c] > 0.0) || !(tt[c] > 0.0))
      throw std::invalid_argument("acc: zero anomaly variance in channel " + std::to_string(c));
    out[c] = ft[c] / std::sqrt(ff[c] * tt[c]);
  }
  return out;
}

GridField climatology(const std::vector<GridField>& pool) {
  if (pool.empty()) throw std::invalid_argument("climatology: empty pool");
  GridField out(pool[0].channels, pool[0].nlat, pool[0].nlon);
  for (const auto& f : pool) {
    check_same(f, out, "climatology");
    for (std::size_t i = 0; i < f.values.size(); ++i) out.values[i] += f.values[i];
  }
  for (double& v : out.values) v /= static_cast<double>(pool.size());
  return out;
}

// ---- optimiser ----

NonfinitePolicy parse_policy(const std::string& s) {
  if (s == "skip") return NonfinitePolicy::skip;
  if (s == "fail") return NonfinitePolicy::fail;
  throw std::invalid_argument("unknown nonfinite policy '" + s + "' (expected skip or fail)");
}

std::string policy_name(NonfinitePolicy p) { return p == NonfinitePolicy::skip ? "skip" : "fail"; }

OptimState OptimState::init(const NamedParams& params, const AdamWConfig& hp) {
  OptimState s;
  s.hp = hp;
  for (const auto& [name, t] : params) {
    s.m.emplace_back(t.size(), 0.0);
    s.v.emplace_back(t.size(), 0.0);
  }
  return s;
}

bool optimizer_step(NamedParams& params, const std::vector<std::vector<double>>& grads, OptimState& state,
                    double lr, NonfinitePolicy policy) {
  if (grads.size() != params.size() || state.m.size() != params.size() || state.v.size() != params.size())
    throw std::invalid_argument("optimizer_step: " + std::to_string(params.size()) + " parameters, " +
                                std::to_string(grads.size()) + " gradients, " + std::to_string(state.m.size()) +
                                " moment sets");
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (grads[k].size() != params[k].second.size() || state.m[k].size() != grads[k].size())
      throw std::invalid_argument("optimizer_step: gradient for " + params[k].first + " has the wrong size");
    for (double g : grads[k])
      if (!std::isfinite(g)) {
        if (policy == NonfinitePolicy::fail)
          throw NumericalError("nonfinite gradient for " + params[k].first + " at step " +
                               std::to_string(state.step + 1));
        return false;
      }
  }
  const AdamWConfig& hp = state.hp;
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(hp.beta1, t), c2 = 1.0 - std::pow(hp.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto p = params[k].second.mutable_data();
    auto& m = state.m[k];
    auto& v = state.v[k];
    const auto& g = grads[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g[i];
      v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g[i] * g[i];
      const double mh = m[i] / c1, vh = v[i] / c2;
      p[i] -= lr * (mh / (std::sqrt(vh) + hp.eps) + hp.weight_decay * p[i]);
    }
  }
  return true;
}

double lr_schedule(std::size_t epoch, std::size_t total_epochs, std::size_t warmup_epochs, double peak_lr,
                   double min_lr) {
  if (warmup_epochs >= total_epochs)
    throw std::invalid_argument("lr_schedule: warm-up of " + std::to_string(warmup_epochs) + " epochs needs more than " +
                                std::to_string(total_epochs) + " epochs in total");
  if (epoch < warmup_epochs)
    return peak_lr * static_cast<double>(epoch + 1) / static_cast<double>(warmup_epochs);
  const std::size_t span = total_epochs - 1 - warmup_epochs;
  if (span == 0) return peak_lr;
  const double pos = std::min(1.0, static_cast<double>(epoch - warmup_epochs) / static_cast<double>(span));
  return min_lr + 0.5 * (peak_lr - min_lr) * (1.0 + std::cos(std::numbers::pi * pos));
}

// ---- training ----

LossKind parse_loss(const std::string& s) {
  if (s == "geometric_relative") return LossKind::geometric_relative;
  if (s == "latitude_l2") return LossKind::latitude_l2;
  throw std::invalid_argument("unknown loss '" + s + "' (expected geometric_relative or latitude_l2)");
}

std::string loss_name(LossKind k) { return k == LossKind::geometric_relative ? "geometric_relative" : "latitude_l2"; }

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("train config: " + m); };
  if (epochs == 0) fail("epochs must be positive");
  if (batch_size == 0) fail("batch_size must be positive");
  if (!(peak_lr > 0.0) || !(min_lr >= 0.0) || min_lr > peak_lr) fail("need 0 <= min_lr <= peak_lr, peak_lr > 0");
  if (warmup_epochs >= epochs) fail("warmup_epochs must be below epochs");
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) fail("val_fraction must lie in [0, 1)");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0))
    fail("betas must lie in [0, 1)");
  if (!(adam.eps > 0.0) || !(adam.weight_decay >= 0.0)) fail("eps must be positive and weight_decay non-negative");
}

std::vector<Sample> all_pairs(const swe::TrajectoryDataset& data) {
  std::vector<Sample> out;
  for (std::size_t m = 0; m < data.members; ++m)
    for (std::size_t t = 0; t + 1 < data.times; ++t) out.push_back({m, t});
  return out;
}

std::pair<std::vector<double>, std::vector<double>> channel_stats(const swe::TrajectoryDataset& data,
                                                                  const std::vector<Sample>& pairs) {
  const std::size_t nc = data.channels(), np = data.nlat * data.nlon;
  std::vector<double> mean(nc, 0.0), sd(nc, 0.0);
  if (pairs.empty()) throw std::invalid_argument("channel_stats: no samples");
  for (const auto& s : pairs) {
    const double* x = data.snapshot(s.member, s.time);
    for (std::size_t c = 0; c < nc; ++c)
      for (std::size_t p = 0; p < np; ++p) mean[c] += x[c * np + p];
  }
  const double count = static_cast<double>(pairs.size() * np);
  for (double& m : mean) m /= count;
  for (const auto& s : pairs) {
    const double* x = data.snapshot(s.member, s.time);
    for (std::size_t c = 0; c < nc; ++c)
      for (std::size_t p = 0; p < np; ++p) {
        const double d = x[c * np + p] - mean[c];
        sd[c] += d * d;
      }
  }
  for (double& v : sd) v = std::sqrt(v / count);
  return {mean, sd};
}

namespace {

void check_data(const model::ShnoModel& model, const swe::TrajectoryDataset& data) {
  const auto& c = model.config();
  if (data.nlat != c.nlat || data.nlon != c.nlon || data.channels() != c.in_channels ||
      data.channels() != c.out_channels)
    throw std::invalid_argument("dataset " + std::to_string(data.channels()) + "x" + std::to_string(data.nlat) + "x" +
                                std::to_string(data.nlon) + " does not match the model's " +
                                std::to_string(c.in_channels) + "x" + std::to_string(c.nlat) + "x" +
                                std::to_string(c.nlon));
}

// Normalised channel-last tensors of every snapshot, indexed [member][time].
std::vector<std::vector<Tensor>> normalised_snapshots(const model::ShnoModel& model,
                                                      const swe::TrajectoryDataset& data) {
  std::vector<std::vector<Tensor>> out(data.members);
  for (std::size_t m = 0; m < data.members; ++m)
    for (std::size_t t = 0; t < data.times; ++t) out[m].push_back(model.normalize(data.field(m, t)));
  return out;
}

Tensor sample_loss(const Tensor& pred, const Tensor& truth, LossKind kind, const MetricWeights& w, std::size_t nlat,
                   std::size_t nlon) {
  return kind == LossKind::geometric_relative ? geometric_relative_loss(pred, truth, w.quad_w, nlat, nlon)
                                              : latitude_weighted_l2(pred, truth, w.w, nlat, nlon);
}

double mean_loss(const model::ShnoModel& model, const std::vector<std::vector<Tensor>>& snaps,
                 const std::vector<Sample>& pairs, LossKind kind, const MetricWeights& w) {
  if (pairs.empty()) return kNaN;
  const auto& c = model.config();
  std::vector<double> losses(pairs.size());
#pragma omp parallel for schedule(dynamic)
  for (std::int64_t k = 0; k < static_cast<std::int64_t>(pairs.size()); ++k) {
    NoGradGuard no_grad;
    const Sample& s = pairs[static_cast<std::size_t>(k)];
    try {
      losses[static_cast<std::size_t>(k)] =
          sample_loss(model.forward(snaps[s.member][s.time]), snaps[s.member][s.time + 1], kind, w, c.nlat, c.nlon)
              .item();
    } catch (const std::runtime_error&) {
      losses[static_cast<std::size_t>(k)] = kNaN;
    }
  }
  return std::accumulate(losses.begin(), losses.end(), 0.0) / static_cast<double>(losses.size());
}

}  // namespace

double evaluate_loss(const model::ShnoModel& model, const swe::TrajectoryDataset& data,
                     const std::vector<Sample>& pairs, LossKind loss) {
  check_data(model, data);
  const auto snaps = normalised_snapshots(model, data);
  return mean_loss(model, snaps, pairs, loss, metric_weights(model.plan().grid()));
}

FitResult fit(model::ShnoModel& model, const swe::TrajectoryDataset& data, const TrainConfig& cfg,
              const EpochCallback& on_epoch) {
  cfg.validate();
  check_data(model, data);
  if (data.times < 2) throw std::invalid_argument("fit: the dataset needs at least 2 time steps");

  FitResult result;
  std::vector<Sample> pairs = all_pairs(data);
  Rng split_rng(cfg.seed, 0x73706c6974);
  std::shuffle(pairs.begin(), pairs.end(), split_rng.engine());
  const auto n_val = static_cast<std::size_t>(std::llround(cfg.val_fraction * static_cast<double>(pairs.size())));
  if (n_val >= pairs.size()) throw std::invalid_argument("fit: validation split leaves no training pairs");
  result.val_pairs.assign(pairs.end() - static_cast<std::ptrdiff_t>(n_val), pairs.end());
  result.train_pairs.assign(pairs.begin(), pairs.end() - static_cast<std::ptrdiff_t>(n_val));

  auto [mean, sd] = channel_stats(data, result.train_pairs);
  for (double& s : sd) s = std::max(s, 1e-12);
  model.set_normalization(mean, sd);
  const auto snaps = normalised_snapshots(model, data);
  const MetricWeights weights = metric_weights(model.plan().grid());
  const auto& mc = model.config();

  NamedParams params = model.parameters();
  result.optim = OptimState::init(params, cfg.adam);
  const bool has_val = !result.val_pairs.empty();

  auto snapshot_params = [&] {
    std::vector<std::vector<double>> v;
    for (const auto& [name, t] : params) v.push_back(t.values());
    return v;
  };
  std::vector<std::vector<double>> best_params;

  auto log_epoch = [&](EpochLog log) {
    if (has_val && (result.history.empty() || log.val_loss < result.best_val)) {
      result.best_val = log.val_loss;
      result.best_epoch = log.epoch;
      best_params = snapshot_params();
    }
    result.history.push_back(log);
    if (on_epoch) on_epoch(log);
  };

  {
    const auto t0 = std::chrono::steady_clock::now();
    EpochLog log;
    log.lr = 0.0;
    log.train_loss = mean_loss(model, snaps, result.train_pairs, cfg.loss, weights);
    log.val_loss = has_val ? mean_loss(model, snaps, result.val_pairs, cfg.loss, weights) : kNaN;
    log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log_epoch(log);
  }

  std::vector<std::size_t> order(result.train_pairs.size());
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    EpochLog log;
    log.epoch = epoch;
    log.lr = lr_schedule(epoch - 1, cfg.epochs, cfg.warmup_epochs, cfg.peak_lr, cfg.min_lr);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle_rng(cfg.seed, 0x65706f6368 + epoch);
    std::shuffle(order.begin(), order.end(), shuffle_rng.engine());

    double loss_sum = 0.0;
    std::size_t loss_count = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t n = std::min(cfg.batch_size, order.size() - start);
      std::vector<double> losses(n);
      std::vector<std::vector<std::vector<double>>> grads(n);
      // One tape per sample; gradients are summed below in sample order, so
      // the result does not depend on how samples were spread over threads.
#pragma omp parallel for schedule(dynamic)
      for (std::int64_t kk = 0; kk < static_cast<std::int64_t>(n); ++kk) {
        const auto k = static_cast<std::size_t>(kk);
        const Sample& s = result.train_pairs[order[start + k]];
        Tape tape;
        Tensor loss;
        try {
          {
            TapeGuard guard(tape);
            loss = sample_loss(model.forward(snaps[s.member][s.time]), snaps[s.member][s.time + 1], cfg.loss,
                               weights, mc.nlat, mc.nlon);
          }
          const Gradients g = backward(tape, loss);
          losses[k] = loss.item();
          grads[k].resize(params.size());
          for (std::size_t p = 0; p < params.size(); ++p) {
            const auto* gv = g.find(params[p].second);
            grads[k][p] = gv ? *gv : std::vector<double>(params[p].second.size(), 0.0);
          }
        } catch (const std::runtime_error&) {
          losses[k] = kNaN;
          grads[k].clear();
        }
      }
      std::vector<std::vector<double>> total(params.size());
      bool broken = false;
      for (std::size_t p = 0; p < params.size(); ++p) total[p].assign(params[p].second.size(), 0.0);
      for (std::size_t k = 0; k < n; ++k) {
        if (grads[k].empty()) {
          broken = true;
          continue;
        }
        for (std::size_t p = 0; p < params.size(); ++p)
          for (std::size_t i = 0; i < total[p].size(); ++i) total[p][i] += grads[k][p][i];
      }
      const double inv = 1.0 / static_cast<double>(n);
      double batch_loss = 0.0;
      for (double l : losses) batch_loss += l;
      batch_loss *= inv;
      if (broken) total[0][0] = kNaN;
      for (auto& t : total)
        for (double& v : t) v *= inv;
      if (optimizer_step(params, total, result.optim, log.lr, cfg.nonfinite)) {
        ++log.steps;
        loss_sum += batch_loss * static_cast<double>(n);
        loss_count += n;
      } else {
        ++log.skipped;
      }
    }
    result.optimizer_steps += log.steps;
    result.skipped_steps += log.skipped;
    log.train_loss = loss_count ? loss_sum / static_cast<double>(loss_count) : kNaN;
    log.val_loss = has_val ? mean_loss(model, snaps, result.val_pairs, cfg.loss, weights) : kNaN;
    log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log_epoch(log);
  }

  if (has_val && !best_params.empty())
    for (std::size_t p = 0; p < params.size(); ++p) {
      auto dst = params[p].second.mutable_data();
      std::copy(best_params[p].begin(), best_params[p].end(), dst.begin());
    }
  return result;
}

// ---- evaluation ----

namespace {

struct LeadAccumulator {
  std::vector<double> rel, rmse, ft, ff, tt;
  std::vector<std::vector<double>> spec, truth_spec;
  std::size_t valid = 0;
  std::size_t lost = 0;

  void init(std::size_t nc, std::size_t nd) {
    rel.assign(nc, 0.0);
    rmse.assign(nc, 0.0);
    ft.assign(nc, 0.0);
    ff.assign(nc, 0.0);
    tt.assign(nc, 0.0);
    spec.assign(nc, std::vector<double>(nd, 0.0));
    truth_spec.assign(nc, std::vector<double>(nd, 0.0));
  }
};

std::vector<std::vector<double>> spectra_of(const sht::ShtPlan& plan, const GridField& f) {
  const sht::SpectralCoeffs c = sht::sht_forward(plan, f);
  std::vector<std::vector<double>> out;
  for (std::size_t ch = 0; ch < f.channels; ++ch) out.push_back(sht::degree_spectrum(c, ch));
  return out;
}

void add_to(std::vector<std::vector<double>>& acc, const std::vector<std::vector<double>>& v) {
  for (std::size_t c = 0; c < acc.size(); ++c)
    for (std::size_t n = 0; n < acc[c].size(); ++n) acc[c][n] += v[c][n];
}

}  // namespace

EvalReport evaluate_rollout(const model::StepFn& step, const std::string& name, const swe::TrajectoryDataset& test,
                            const EvalConfig& cfg) {
  if (cfg.max_steps == 0) throw std::invalid_argument("evaluate_rollout: max_steps must be positive");
  if (test.members == 0 || test.times < 2)
    throw std::invalid_argument("evaluate_rollout: the test set needs a member with at least 2 snapshots");
  const std::size_t nc = test.channels();
  const sht::SphericalGrid grid(test.nlat, test.nlon, test.radius);
  const sht::ShtPlan plan(grid, sht::Truncation::triangular(test.n_max));
  const MetricWeights weights = metric_weights(grid);
  const std::size_t nd = static_cast<std::size_t>(test.n_max) + 1;

  std::vector<GridField> pool;
  for (std::size_t m = 0; m < test.members; ++m)
    for (std::size_t t = 0; t < test.times; ++t) pool.push_back(test.field(m, t));
  const GridField clim = climatology(pool);

  std::vector<LeadAccumulator> acc(cfg.max_steps);
  for (auto& a : acc) a.init(nc, nd);
  std::vector<std::vector<double>> initial(nc, std::vector<double>(nd, 0.0));

  EvalReport rep;
  rep.model = name;
  rep.variables = test.channel_names;
  rep.interval_hours = test.interval_seconds / 3600.0;

  const std::size_t stride = cfg.start_stride == 0 ? test.times : cfg.start_stride;
  for (std::size_t m = 0; m < test.members; ++m)
    for (std::size_t t0 = 0; t0 + 1 < test.times; t0 += stride) {
      ++rep.forecasts;
      GridField state = test.field(m, t0);
      add_to(initial, spectra_of(plan, state));
      const std::size_t horizon = std::min(cfg.max_steps, test.times - 1 - t0);
      for (std::size_t k = 1; k <= horizon; ++k) {
        bool ok = true;
        try {
          state = step(state);
          ok = state.all_finite();
        } catch (const std::runtime_error&) {
          ok = false;
        }
        if (!ok) {
          for (std::size_t j = k; j <= cfg.max_steps; ++j) ++acc[j - 1].lost;
          break;
        }
        const GridField truth = test.field(m, t0 + k);
        LeadAccumulator& a = acc[k - 1];
        ++a.valid;
        const auto rel = relative_loss_per_channel(state, truth, weights.quad_w);
        const auto r = rmse({state}, {truth}, weights.w);
        for (std::size_t c = 0; c < nc; ++c) {
          a.rel[c] += rel[c];
          a.rmse[c] += r[c];
          for (std::size_t i = 0; i < grid.nlat(); ++i)
            for (std::size_t j = 0; j < grid.nlon(); ++j) {
              const double fa = state.at(c, i, j) - clim.at(c, i, j), ta = truth.at(c, i, j) - clim.at(c, i, j);
              a.ft[c] += weights.w[i] * fa * ta;
              a.ff[c] += weights.w[i] * fa * fa;
              a.tt[c] += weights.w[i] * ta * ta;
            }
        }
        add_to(a.spec, spectra_of(plan, state));
        add_to(a.truth_spec, spectra_of(plan, truth));
      }
    }

  rep.rel_loss.assign(nc, {});
  rep.rmse.assign(nc, {});
  rep.acc.assign(nc, {});
  for (auto& v : initial)
    for (double& e : v) e /= static_cast<double>(rep.forecasts);
  rep.initial_spectra = initial;
  for (std::size_t k = 0; k < cfg.max_steps; ++k) {
    LeadAccumulator& a = acc[k];
    rep.leads.push_back(k + 1);
    rep.valid.push_back(a.valid);
    rep.nonfinite.push_back(a.lost);
    const double inv = a.valid ? 1.0 / static_cast<double>(a.valid) : kNaN;
    for (std::size_t c = 0; c < nc; ++c) {
      rep.rel_loss[c].push_back(a.rel[c] * inv);
      rep.rmse[c].push_back(a.rmse[c] * inv);
      const double den = std::sqrt(a.ff[c] * a.tt[c]);
      rep.acc[c].push_back(a.valid && den > 0.0 ? a.ft[c] / den : kNaN);
      for (double& e : a.spec[c]) e = a.valid ? e / static_cast<double>(a.valid) : kNaN;
      for (double& e : a.truth_spec[c]) e = a.valid ? e / static_cast<double>(a.valid) : kNaN;
    }
    rep.spectra.push_back(std::move(a.spec));
    rep.truth_spectra.push_back(std::move(a.truth_spec));
  }
  return rep;
}

Evaluation evaluate_rollout(const model::ShnoModel& model, const std::string& name,
                            const swe::TrajectoryDataset& test, const EvalConfig& cfg) {
  check_data(model, test);
  Evaluation e;
  e.model = evaluate_rollout([&model](const GridField& x) { return model.predict(x); }, name, test, cfg);
  e.persistence = evaluate_rollout(model::persistence(), "persistence", test, cfg);
  return e;
}

// ---- CSV ----

namespace {

std::ostream& full_precision(std::ostream& os) {
  return os << std::setprecision(std::numeric_limits<double>::max_digits10);
}

}  // namespace

void write_metrics_csv(std::ostream& os, const std::vector<const EvalReport*>& reports) {
  full_precision(os) << "model,variable,lead,hours,rel_loss,rmse,acc,valid,nonfinite\n";
  for (const EvalReport* r : reports)
    for (std::size_t c = 0; c < r->variables.size(); ++c)
      for (std::size_t k = 0; k < r->leads.size(); ++k)
        os << r->model << ',' << r->variables[c] << ',' << r->leads[k] << ','
           << static_cast<double>(r->leads[k]) * r->interval_hours << ',' << r->rel_loss[c][k] << ','
           << r->rmse[c][k] << ',' << r->acc[c][k] << ',' << r->valid[k] << ',' << r->nonfinite[k] << '\n';
}

void write_spectra_csv(std::ostream& os, const std::vector<const EvalReport*>& reports) {
  full_precision(os) << "model,variable,lead,n,E_n\n";
  auto rows = [&os](const std::string& model, const std::string& var, std::size_t lead, const std::vector<double>& e) {
    for (std::size_t n = 0; n < e.size(); ++n) os << model << ',' << var << ',' << lead << ',' << n << ',' << e[n] << '\n';
  };
  if (reports.empty()) return;
  const EvalReport& first = *reports.front();
  for (std::size_t c = 0; c < first.variables.size(); ++c) {
    rows("truth", first.variables[c], 0, first.initial_spectra[c]);
    for (std::size_t k = 0; k < first.leads.size(); ++k)
      rows("truth", first.variables[c], first.leads[k], first.truth_spectra[k][c]);
  }
  for (const EvalReport* r : reports)
    for (std::size_t c = 0; c < r->variables.size(); ++c)
      for (std::size_t k = 0; k < r->leads.size(); ++k) rows(r->model, r->variables[c], r->leads[k], r->spectra[k][c]);
}

void write_history_csv(std::ostream& os, const std::vector<EpochLog>& history) {
  full_precision(os) << "epoch,lr,train_loss,val_loss,steps,skipped\n";
  for (const auto& h : history)
    os << h.epoch << ',' << h.lr << ',' << h.train_loss << ',' << h.val_loss << ',' << h.steps << ',' << h.skipped
       << '\n';
}

}  // namespace shno::train
