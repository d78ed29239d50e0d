#pragma once

// Mini-batch Adam loop shared by the recurrent model and the graph-conv
// baseline, plus MAE bookkeeping over episodes.

#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "mlcl/errors.hpp"
#include "mlcl/geometry.hpp"
#include "mlcl/rng.hpp"
#include "mlcl/sensing.hpp"
#include "mlcl/tensorcore.hpp"

namespace mlcl {

struct TrainConfig {
  double lr = 0.0005;
  int batch_size = 32;
  int window = 20;
  int group_size = 10;
  std::int64_t steps = 600;
  std::uint64_t seed = 1;
  bool disable_comm = false;
  double position_scale = 1000.0;  // L, meters
  int eval_every = 50;             // 0: only after the final step
  double clip_norm = 0.0;          // global-norm clipping, 0 disables
  double lr_final = -1.0;          // < 0: constant lr; else cosine decay to this
  std::int64_t lr_horizon = 0;     // global step where the decay ends; 0: `steps`

  void validate() const {
    if (!(lr >= 0.0)) throw ConfigError("lr must be >= 0");
    if (batch_size < 1 || window < 1 || group_size < 1 || steps < 0 || eval_every < 0)
      throw ConfigError("training sizes must be positive");
    if (!(position_scale > 0.0)) throw ConfigError("position scale must be positive");
    if (clip_norm < 0.0) throw ConfigError("clip_norm must be >= 0");
    if (lr_final > lr) throw ConfigError("lr_final must not exceed lr");
    if (lr_horizon < 0) throw ConfigError("lr_horizon must be >= 0");
  }
};

struct CurveRow {
  std::int64_t step = 0;
  double train_loss = 0.0;
  std::optional<double> eval_mae;
};

/// Per-episode estimates indexed [t][vehicle].
using EstimateGrid = std::vector<std::vector<Vec2>>;

/// Mean Euclidean error of `est` against the episode truth.
inline double episode_mae(const EstimateGrid& est, const Episode& ep) {
  if (est.size() != ep.window()) throw ShapeError("estimate window does not match episode");
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t t = 0; t < ep.window(); ++t) {
    if (est[t].size() != ep.vehicles()) throw ShapeError("estimate group size does not match episode");
    for (std::size_t v = 0; v < ep.vehicles(); ++v) {
      total += distance(est[t][v], ep.steps[t].truth[v]);
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

struct EvalResult {
  std::vector<double> per_episode;  // MAE per episode, meters
  std::vector<double> per_step;     // mean over episodes of the step-t group MAE
  double aggregate = 0.0;           // mean of per_episode
};

/// Aggregates estimates into MAE figures. With tail > 0 only the last `tail`
/// steps of every episode count towards per_episode / aggregate.
inline EvalResult summarize(const std::vector<EstimateGrid>& estimates, const std::vector<Episode>& episodes,
                            std::size_t tail = 0) {
  if (estimates.size() != episodes.size()) throw ShapeError("estimate count does not match episodes");
  EvalResult r;
  std::size_t max_window = 0;
  for (const auto& ep : episodes) max_window = std::max(max_window, ep.window());
  std::vector<double> step_sum(max_window, 0.0);
  std::vector<std::size_t> step_n(max_window, 0);
  for (std::size_t e = 0; e < episodes.size(); ++e) {
    const auto& ep = episodes[e];
    const auto& est = estimates[e];
    if (est.size() != ep.window()) throw ShapeError("estimate window does not match episode");
    const std::size_t first = tail > 0 && tail < ep.window() ? ep.window() - tail : 0;
    double ep_total = 0.0;
    std::size_t ep_count = 0;
    for (std::size_t t = 0; t < ep.window(); ++t) {
      double s = 0.0;
      for (std::size_t v = 0; v < ep.vehicles(); ++v) s += distance(est[t][v], ep.steps[t].truth[v]);
      step_sum[t] += s / static_cast<double>(ep.vehicles());
      ++step_n[t];
      if (t >= first) {
        ep_total += s;
        ep_count += ep.vehicles();
      }
    }
    r.per_episode.push_back(ep_total / static_cast<double>(ep_count));
  }
  for (std::size_t t = 0; t < max_window; ++t)
    r.per_step.push_back(step_n[t] ? step_sum[t] / static_cast<double>(step_n[t]) : 0.0);
  double s = 0.0;
  for (double v : r.per_episode) s += v;
  r.aggregate = r.per_episode.empty() ? 0.0 : s / static_cast<double>(r.per_episode.size());
  return r;
}

/// Builds the scalar mean-loss node for a mini-batch on `tape`.
using BatchLossFn =
    std::function<tc::Var(tc::Tape&, const tc::ParamSet&, const std::vector<const Episode*>&)>;
/// Returns the evaluation MAE for the current parameters.
using EvalFn = std::function<double(const tc::ParamSet&)>;
using ProgressFn = std::function<void(const CurveRow&)>;

/// Indices of the mini-batch for 1-based global step `step`: a stream of
/// per-epoch permutations keyed by (seed, epoch), cut into consecutive chunks.
/// Depends only on (seed, step), so a resumed run sees the same batches.
inline std::vector<std::size_t> batch_indices(std::size_t dataset_size, int batch_size, std::int64_t step,
                                              std::uint64_t seed) {
  std::vector<std::size_t> out;
  const auto b = static_cast<std::uint64_t>(batch_size);
  std::uint64_t epoch = UINT64_MAX;
  std::vector<std::size_t> perm;
  for (std::uint64_t j = 0; j < b; ++j) {
    const std::uint64_t pos = static_cast<std::uint64_t>(step - 1) * b + j;
    const std::uint64_t e = pos / dataset_size;
    if (e != epoch) {
      epoch = e;
      perm.resize(dataset_size);
      for (std::size_t i = 0; i < dataset_size; ++i) perm[i] = i;
      Rng rng(stream_key(seed, "epoch", e));
      rng.shuffle(perm.begin(), perm.end());
    }
    out.push_back(perm[pos % dataset_size]);
  }
  return out;
}

/// Learning rate for 1-based global step `step`; constant at lr_final past the horizon.
inline double scheduled_lr(const TrainConfig& cfg, std::int64_t step) {
  const std::int64_t horizon = cfg.lr_horizon > 0 ? cfg.lr_horizon : cfg.steps;
  if (cfg.lr_final < 0.0 || horizon <= 1) return cfg.lr;
  const double f = std::min(1.0, static_cast<double>(step - 1) / static_cast<double>(horizon - 1));
  return cfg.lr_final + 0.5 * (cfg.lr - cfg.lr_final) * (1.0 + std::cos(std::numbers::pi * f));
}

/// Runs `steps` Adam updates on `params`, continuing the step numbering held
/// in `adam.step`. Each step: batch loss on a recording tape, backward,
/// optional clipping, one Adam update. Evaluation runs after every
/// `eval_every`-th step and after the last one.
inline std::vector<CurveRow> run_training(tc::ParamSet& params, tc::AdamState& adam,
                                          const std::vector<Episode>& data, const TrainConfig& cfg,
                                          std::int64_t steps, const BatchLossFn& batch_loss, const EvalFn& eval,
                                          const ProgressFn& progress = {}) {
  cfg.validate();
  if (data.empty()) throw ConfigError("training dataset is empty");
  std::vector<CurveRow> curve;
  const std::int64_t last = adam.step + steps;
  while (adam.step < last) {
    const std::int64_t step = adam.step + 1;
    std::vector<const Episode*> batch;
    for (auto i : batch_indices(data.size(), cfg.batch_size, step, cfg.seed)) batch.push_back(&data[i]);
    CurveRow row;
    row.step = step;
    adam.lr = scheduled_lr(cfg, step);
    try {
      tc::Tape tape;
      const tc::Var loss = batch_loss(tape, params, batch);
      row.train_loss = tape.value(loss)(0, 0);
      tc::Gradients grads(params.size());
      tape.backward(loss, &grads);
      for (std::size_t i = 0; i < grads.size(); ++i)
        if (grads[i].size() == 0) grads[i] = tc::Matrix::Zero(params[i].rows(), params[i].cols());
      const double gnorm = tc::global_norm(grads);
      if (!std::isfinite(gnorm)) throw NumericError("non-finite gradient");
      if (cfg.clip_norm > 0.0 && gnorm > cfg.clip_norm)
        for (auto& g : grads) g *= cfg.clip_norm / gnorm;
      tc::adam_step(params, grads, adam);
    } catch (const NumericError& e) {
      throw NumericError("training step " + std::to_string(step) + ": " + e.what());
    }
    if (step == last || (cfg.eval_every > 0 && step % cfg.eval_every == 0)) row.eval_mae = eval(params);
    curve.push_back(row);
    if (progress) progress(row);
  }
  return curve;
}

}  // namespace mlcl
