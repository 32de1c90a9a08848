// RMSProp, the validation-UAR learning-rate schedule, the per-fold training
// loop and multi-repeat aggregation.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rawser/metrics.hpp"
#include "rawser/model.hpp"

namespace rawser {

struct TrainOptions {
  std::size_t batch_size = 32;
  int max_epochs = 200;
  double learning_rate = 1e-4;
  double rho = 0.9;
  double epsilon = 1e-8;
  int halve_patience = 5;
  int stop_patience = 20;
  double clip_norm = 5.0;  // global gradient-norm cap; <= 0 disables

  friend bool operator==(const TrainOptions&, const TrainOptions&) = default;
};

// ---------------------------------------------------------------------------
// RMSProp
// ---------------------------------------------------------------------------

struct OptimizerState {
  double learning_rate = 1e-4;
  double rho = 0.9;
  double epsilon = 1e-8;
  std::vector<std::vector<double>> accumulators;  // one per trainable parameter
};

/// acc <- rho * acc + (1 - rho) * g^2;  p <- p - lr * g / (sqrt(acc) + eps)
inline void rmsprop_update(std::span<double> param, std::span<const double> grad, std::span<double> acc,
                           double lr, double rho, double eps) {
  if (param.size() != grad.size() || param.size() != acc.size()) {
    throw ShapeError("rmsprop: parameter, gradient and accumulator sizes differ");
  }
  for (double g : grad)
    if (!std::isfinite(g)) throw NumericError("rmsprop: non-finite gradient");
  for (std::size_t i = 0; i < param.size(); ++i) {
    acc[i] = rho * acc[i] + (1.0 - rho) * grad[i] * grad[i];
    param[i] -= lr * grad[i] / (std::sqrt(acc[i]) + eps);
  }
}

/// Updates every trainable parameter from its gradient buffer.
inline void rmsprop_step(ParamList& params, OptimizerState& state) {
  std::size_t k = 0;
  for (auto& p : params) {
    if (!p.trainable) continue;
    if (state.accumulators.size() <= k) state.accumulators.emplace_back(p.tensor.size(), 0.0);
    auto& acc = state.accumulators[k++];
    if (acc.size() != p.tensor.size()) throw ShapeError("rmsprop: accumulator does not match " + p.name);
    rmsprop_update(p.tensor.data(), p.tensor.grad(), acc, state.learning_rate, state.rho, state.epsilon);
  }
}

/// Scales gradients so their global L2 norm is at most max_norm. Returns
/// the norm before clipping.
inline double clip_grad_norm(ParamList& params, double max_norm) {
  double ss = 0.0;
  for (auto& p : params)
    if (p.trainable)
      for (double g : p.tensor.grad()) ss += g * g;
  const double norm = std::sqrt(ss);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& p : params)
      if (p.trainable)
        for (double& g : p.tensor.grad()) g *= s;
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Learning-rate schedule
// ---------------------------------------------------------------------------

enum class ScheduleDecision { Continue, Halve, Stop };

inline std::string to_string(ScheduleDecision d) {
  switch (d) {
    case ScheduleDecision::Continue: return "continue";
    case ScheduleDecision::Halve: return "halve";
    case ScheduleDecision::Stop: return "stop";
  }
  return {};
}

inline constexpr double kImprovementThreshold = 1e-6;

struct ScheduleState {
  double best_val_uar = 0.0;
  int epochs_since_improvement = 0;
  int halvings_applied = 0;
  bool stopped = false;

  friend bool operator==(const ScheduleState&, const ScheduleState&) = default;
};

/// An epoch improves when its UAR beats the best by more than 1e-6. Every
/// halve_patience epochs without improvement the rate is halved; after
/// stop_patience such epochs training stops.
inline ScheduleDecision schedule_update(ScheduleState& s, double epoch_val_uar, int halve_patience = 5,
                                        int stop_patience = 20) {
  if (s.stopped) return ScheduleDecision::Stop;
  if (epoch_val_uar > s.best_val_uar + kImprovementThreshold) {
    s.best_val_uar = epoch_val_uar;
    s.epochs_since_improvement = 0;
    return ScheduleDecision::Continue;
  }
  ++s.epochs_since_improvement;
  if (s.epochs_since_improvement >= stop_patience) {
    s.stopped = true;
    return ScheduleDecision::Stop;
  }
  if (halve_patience > 0 && s.epochs_since_improvement % halve_patience == 0) {
    ++s.halvings_applied;
    return ScheduleDecision::Halve;
  }
  return ScheduleDecision::Continue;
}

// ---------------------------------------------------------------------------
// Data and prediction
// ---------------------------------------------------------------------------

struct Example {
  const std::vector<double>* samples = nullptr;
  int label = 0;
};

using Dataset = std::vector<Example>;

inline Tensor make_batch(const Dataset& data, std::span<const std::size_t> idx, std::size_t length) {
  Tensor t = Tensor::zeros({idx.size(), length});
  for (std::size_t b = 0; b < idx.size(); ++b) {
    const auto& s = *data[idx[b]].samples;
    if (s.size() != length) {
      throw ShapeError("example has " + std::to_string(s.size()) + " samples, model expects " + std::to_string(length));
    }
    std::copy(s.begin(), s.end(), t.values().begin() + static_cast<std::ptrdiff_t>(b * length));
  }
  return t;
}

/// Eval-mode class probabilities, row-major [n x n_classes].
inline std::vector<double> predict_proba(Model& model, const Dataset& data, std::size_t batch_size = 32) {
  NoGradGuard no_grad;
  const std::size_t k = model.config().n_classes;
  std::vector<double> out;
  out.reserve(data.size() * k);
  std::vector<std::size_t> idx(data.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const std::size_t end = std::min(data.size(), start + batch_size);
    Tensor x = make_batch(data, std::span(idx).subspan(start, end - start), model.config().input_samples());
    const auto p = softmax_rows(model.forward(x, Mode::Eval));
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

inline std::vector<int> argmax_rows(const std::vector<double>& probs, std::size_t k) {
  std::vector<int> pred(probs.size() / k);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const auto* row = probs.data() + i * k;
    pred[i] = static_cast<int>(std::max_element(row, row + k) - row);
  }
  return pred;
}

inline std::vector<int> labels_of(const Dataset& d) {
  std::vector<int> l;
  l.reserve(d.size());
  for (const auto& e : d) l.push_back(e.label);
  return l;
}

inline ConfusionMatrix evaluate(Model& model, const Dataset& data) {
  const std::size_t k = model.config().n_classes;
  return confusion_from(labels_of(data), argmax_rows(predict_proba(model, data), k), k);
}

// ---------------------------------------------------------------------------
// Per-fold training
// ---------------------------------------------------------------------------

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double train_uar = 0.0;  // from the epoch's own train-mode predictions
  double val_uar = 0.0;
  double learning_rate = 0.0;
  std::string decision;
  int clipped_batches = 0;
};

inline nlohmann::json to_json(const EpochRecord& r) {
  return {{"epoch", r.epoch},         {"train_loss", r.train_loss}, {"train_uar", r.train_uar},
          {"val_uar", r.val_uar},     {"lr", r.learning_rate},      {"decision", r.decision},
          {"clipped_batches", r.clipped_batches}};
}

struct TrainRunResult {
  Model model;  // best-validation checkpoint
  std::vector<EpochRecord> history;
  int best_epoch = 0;
  double best_val_uar = 0.0;
  ScheduleState schedule;
  std::uint64_t seed = 0;
};

/// Batch boundaries over n shuffled items; no batch is left with a single
/// item, since batch normalization needs two.
/// Halving divides the rate by two exactly, so k halvings give lr * 2^-k bit for bit.
inline void apply_schedule(ScheduleDecision d, OptimizerState& opt) {
  if (d == ScheduleDecision::Halve) opt.learning_rate /= 2.0;
}

inline std::vector<std::pair<std::size_t, std::size_t>> batch_ranges(std::size_t n, std::size_t batch_size) {
  std::vector<std::pair<std::size_t, std::size_t>> r;
  if (batch_size < 2) throw Error("batch size must be at least 2");
  for (std::size_t s = 0; s < n; s += batch_size) r.emplace_back(s, std::min(n, s + batch_size));
  if (r.size() > 1 && r.back().second - r.back().first == 1) {
    r[r.size() - 2].second = n;
    r.pop_back();
  }
  return r;
}

/// Trains one model from `seed`; the test partition never enters this loop.
/// `log`, when given, receives one JSON line per epoch.
inline TrainRunResult train_fold(const ModelConfig& config, const TrainOptions& opts, const Dataset& train,
                                 const Dataset& val, std::uint64_t seed, std::ostream* log = nullptr) {
  if (train.size() < 2) throw Error("train_fold: training partition needs at least 2 examples");
  if (val.empty()) throw Error("train_fold: validation partition is empty");
  if (opts.max_epochs < 1) throw Error("train_fold: max_epochs must be >= 1");

  TrainRunResult res{Model::build(config, seed), {}, 0, 0.0, {}, seed};
  Model& model = res.model;
  Rng shuffle_rng(seed ^ 0x9E3779B97F4A7C15ull);
  Rng dropout_rng(seed ^ 0xD1B54A32D192ED03ull);
  OptimizerState opt{opts.learning_rate, opts.rho, opts.epsilon, {}};
  // The untrained model's validation UAR is the baseline every later epoch must beat.
  ScheduleState sched;
  sched.best_val_uar = uar(evaluate(model, val));
  std::vector<std::vector<double>> best = model.snapshot();
  const std::size_t k = config.n_classes, length = config.input_samples();
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (int epoch = 1; epoch <= opts.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0.0;
    int clipped = 0;
    ConfusionMatrix train_cm(k);
    for (const auto& [lo, hi] : batch_ranges(order.size(), opts.batch_size)) {
      std::span<const std::size_t> idx(order.data() + lo, hi - lo);
      Tensor x = make_batch(train, idx, length);
      std::vector<int> labels;
      for (std::size_t i : idx) labels.push_back(train[i].label);
      for (auto& p : model.parameters())
        if (p.trainable) p.tensor.zero_grad();
      Tensor logits = model.forward(x, Mode::Train, &dropout_rng);
      Tensor loss = softmax_cross_entropy(logits, labels);
      if (!std::isfinite(loss.item())) throw NumericError("train_fold: loss diverged (non-finite) at epoch " + std::to_string(epoch));
      backward(loss);
      if (clip_grad_norm(model.parameters(), opts.clip_norm) > opts.clip_norm && opts.clip_norm > 0.0) ++clipped;
      rmsprop_step(model.parameters(), opt);
      loss_sum += loss.item() * static_cast<double>(idx.size());
      const auto pred = argmax_rows(softmax_rows(logits), k);
      for (std::size_t b = 0; b < idx.size(); ++b) train_cm.add(labels[b], pred[b]);
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(train.size());
    rec.train_uar = uar(train_cm);
    rec.val_uar = uar(evaluate(model, val));
    rec.learning_rate = opt.learning_rate;
    rec.clipped_batches = clipped;
    if (epoch == 1 || rec.val_uar > res.best_val_uar + kImprovementThreshold) {
      best = model.snapshot();
      res.best_epoch = epoch;
      res.best_val_uar = rec.val_uar;
    }
    const auto decision = schedule_update(sched, rec.val_uar, opts.halve_patience, opts.stop_patience);
    rec.decision = to_string(decision);
    res.history.push_back(rec);
    if (log) *log << to_json(rec).dump() << '\n';
    apply_schedule(decision, opt);
    if (decision == ScheduleDecision::Stop) break;
  }
  model.restore(best);
  res.schedule = sched;
  return res;
}

// ---------------------------------------------------------------------------
// Repeats
// ---------------------------------------------------------------------------

struct RepeatResult {
  std::vector<std::uint64_t> seeds;
  std::vector<double> test_uars;
  std::vector<ConfusionMatrix> test_cms;
  std::vector<int> best_epochs;
  std::vector<int> epochs_run;
  MeanStd summary;                 // across repeats
  double ensemble_uar = 0.0;       // UAR of the repeat-averaged probabilities
  ConfusionMatrix ensemble_cm;
};

/// Trains `n_repeats` models with seeds seed0, seed0+1, ... (all seed0 when
/// same_seed is set) and scores each, plus their probability average, on test.
/// `on_run` observes each finished run (for logs/checkpoints).
template <typename OnRun = std::nullptr_t>
RepeatResult repeat_and_aggregate(const ModelConfig& config, const TrainOptions& opts, const Dataset& train,
                                  const Dataset& val, const Dataset& test, int n_repeats, std::uint64_t seed0,
                                  bool same_seed = false, OnRun on_run = nullptr) {
  if (n_repeats < 1) throw Error("repeat_and_aggregate: n_repeats must be >= 1");
  if (test.empty()) throw Error("repeat_and_aggregate: test partition is empty");
  const std::size_t k = config.n_classes;
  const auto truth = labels_of(test);
  RepeatResult r;
  std::vector<double> prob_sum(test.size() * k, 0.0);
  for (int i = 0; i < n_repeats; ++i) {
    const std::uint64_t seed = same_seed ? seed0 : seed0 + static_cast<std::uint64_t>(i);
    TrainRunResult run = train_fold(config, opts, train, val, seed);
    const auto probs = predict_proba(run.model, test);
    for (std::size_t j = 0; j < probs.size(); ++j) prob_sum[j] += probs[j];
    ConfusionMatrix cm = confusion_from(truth, argmax_rows(probs, k), k);
    r.seeds.push_back(seed);
    r.test_uars.push_back(uar(cm));
    r.test_cms.push_back(cm);
    r.best_epochs.push_back(run.best_epoch);
    r.epochs_run.push_back(static_cast<int>(run.history.size()));
    if constexpr (!std::is_same_v<OnRun, std::nullptr_t>) on_run(i, run);
  }
  r.summary = mean_std(r.test_uars);
  r.ensemble_cm = confusion_from(truth, argmax_rows(prob_sum, k), k);
  r.ensemble_uar = uar(r.ensemble_cm);
  return r;
}

}  // namespace rawser
