// Finite-difference verification of every differentiable component and of a
// tiny end-to-end model. Shared by the `gradcheck` command and the tests.
#pragma once

#include <algorithm>
#include <chrono>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "rawser/model.hpp"

namespace rawser {

inline constexpr double kGradCheckStep = 1e-3;
inline constexpr double kGradCheckTolerance = 1e-4;

struct ComponentCheck {
  std::string name;
  int seeds = 0;
  double max_rel_error = 0.0;
  std::uint64_t worst_seed = 0;
  std::size_t checked = 0;        // coordinates compared
  std::size_t kinks_skipped = 0;  // coordinates whose +-h straddled a ReLU/max kink
  bool passed() const { return max_rel_error < kGradCheckTolerance; }
};

struct GradCheckReport {
  std::vector<ComponentCheck> components;
  double seconds = 0.0;
  bool passed() const {
    return std::all_of(components.begin(), components.end(), [](const auto& c) { return c.passed(); });
  }
};

namespace gc {

inline Tensor normal(Shape s, Rng& rng, double sd = 1.0) {
  std::normal_distribution<double> n(0.0, sd);
  Tensor t = Tensor::zeros(std::move(s));
  for (double& v : t.values()) v = n(rng);
  return t;
}

/// Values bounded away from zero by `gap`, so ReLU kinks are never crossed.
inline Tensor away_from_zero(Shape s, Rng& rng, double gap = 0.05) {
  std::uniform_real_distribution<double> u(gap, 2.0);
  std::bernoulli_distribution sign(0.5);
  Tensor t = Tensor::zeros(std::move(s));
  for (double& v : t.values()) v = sign(rng) ? u(rng) : -u(rng);
  return t;
}

/// Distinct values spaced `gap` apart in random order, so max selections
/// are stable under perturbation.
inline Tensor distinct(Shape s, Rng& rng, double gap = 0.02) {
  Tensor t = Tensor::zeros(std::move(s));
  std::vector<double>& v = t.values();
  std::iota(v.begin(), v.end(), 0.0);
  std::shuffle(v.begin(), v.end(), rng);
  const double centre = 0.5 * static_cast<double>(v.size());
  for (double& x : v) x = (x - centre) * gap;
  return t;
}

inline std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

/// Scalar probe: sum(out * w) with fixed random weights, so every output
/// element carries a distinct upstream gradient.
inline Tensor project(const Tensor& out, const Tensor& w) { return sum(mul(out, w)); }

struct CaseResult {
  double error = 0.0;
  std::size_t checked = 0;
  std::size_t kinks = 0;
};

using Case = std::function<CaseResult(Rng&)>;

/// Max elementwise relative error of f w.r.t. each listed input, taking the
/// others as constants.
inline CaseResult check_inputs(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                               const std::vector<Tensor>& inputs) {
  CaseResult r;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto fk = [&](const Tensor& x) {
      std::vector<Tensor> args = inputs;
      args[k] = x;
      return f(args);
    };
    const GradCheckResult g = grad_check_detail(fk, inputs[k], kGradCheckStep);
    r.error = std::max(r.error, g.max_rel_error);
    r.checked += g.checked;
    r.kinks += g.kinks_skipped;
  }
  return r;
}

inline std::vector<std::pair<std::string, Case>> component_cases() {
  std::vector<std::pair<std::string, Case>> cases;

  cases.emplace_back("add/sub/mul (broadcast)", [](Rng& rng) {
    const std::size_t r = pick(rng, 1, 4), c = pick(rng, 1, 5);
    Tensor a = normal({r, c}, rng), b = normal({1, c}, rng), w = normal({r, c}, rng);
    return check_inputs([&](const auto& x) { return project(mul(add(x[0], x[1]), sub(x[0], x[1])), w); }, {a, b});
  });
  cases.emplace_back("matmul", [](Rng& rng) {
    const std::size_t m = pick(rng, 1, 4), k = pick(rng, 1, 5), n = pick(rng, 1, 4);
    Tensor a = normal({m, k}, rng), b = normal({k, n}, rng), w = normal({m, n}, rng);
    return check_inputs([&](const auto& x) { return project(matmul(x[0], x[1]), w); }, {a, b});
  });
  cases.emplace_back("sigmoid/tanh", [](Rng& rng) {
    const std::size_t n = pick(rng, 1, 12);
    Tensor a = normal({n}, rng, 2.0), w = normal({n}, rng);
    return check_inputs([&](const auto& x) { return project(mul(sigmoid(x[0]), tanh(x[0])), w); }, {a});
  });
  cases.emplace_back("relu", [](Rng& rng) {
    const std::size_t n = pick(rng, 1, 12);
    Tensor a = away_from_zero({n}, rng), w = normal({n}, rng);
    return check_inputs([&](const auto& x) { return project(relu(x[0]), w); }, {a});
  });
  cases.emplace_back("reshape/permute/concat/slice", [](Rng& rng) {
    const std::size_t b = pick(rng, 1, 3), c = pick(rng, 2, 4), t = pick(rng, 2, 5);
    Tensor a = normal({b, c, t}, rng), a2 = normal({b, c, t}, rng), w = normal({b, t, c - 1, 2}, rng);
    return check_inputs(
        [&](const auto& x) {
          Tensor cat = concat({x[0], x[1]}, 2);                    // [b x c x 2t]
          Tensor p = permute(slice(cat, 1, 1, c), {0, 2, 1});      // [b x 2t x c-1]
          return project(reshape(p, {b, t, 2, c - 1}), permute(w, {0, 1, 3, 2}));
        },
        {a, a2});
  });
  cases.emplace_back("sum/reduce_max", [](Rng& rng) {
    const std::size_t r = pick(rng, 1, 4), c = pick(rng, 2, 6);
    Tensor a = distinct({r, c}, rng), w = normal({r}, rng);
    return check_inputs([&](const auto& x) { return add(project(reduce_max(x[0], 1), w), sum(sum(x[0], 0))); }, {a});
  });
  cases.emplace_back("conv1d", [](Rng& rng) {
    const std::size_t b = pick(rng, 1, 3), n = pick(rng, 1, 4), k = pick(rng, 1, 6), s = pick(rng, 1, 4);
    const std::size_t len = k + pick(rng, 0, 12);
    const std::size_t tout = conv_output_length(len, k, s);
    Tensor x = normal({b, len}, rng), wt = normal({n, k}, rng), bias = normal({n}, rng), w = normal({b, n, tout}, rng);
    return check_inputs([&](const auto& a) { return project(conv1d(a[0], a[1], a[2], s), w); }, {x, wt, bias});
  });
  cases.emplace_back("max pooling (adaptive)", [](Rng& rng) {
    const std::size_t b = pick(rng, 1, 2), c = pick(rng, 1, 3), t = pick(rng, 3, 12), f = pick(rng, 1, t);
    Tensor x = distinct({b, c, t}, rng), w = normal({b, c, f}, rng);
    return check_inputs([&](const auto& a) { return project(adaptive_pool1d(a[0], PoolMode::Max, f), w); }, {x});
  });
  cases.emplace_back("l2 pooling (adaptive)", [](Rng& rng) {
    const std::size_t b = pick(rng, 1, 2), c = pick(rng, 1, 3), t = pick(rng, 3, 12), f = pick(rng, 1, t);
    Tensor x = away_from_zero({b, c, t}, rng, 0.1), w = normal({b, c, f}, rng);
    return check_inputs([&](const auto& a) { return project(adaptive_pool1d(a[0], PoolMode::L2, f), w); }, {x});
  });
  cases.emplace_back("average pooling (windowed)", [](Rng& rng) {
    const std::size_t b = pick(rng, 1, 2), c = pick(rng, 1, 3), win = pick(rng, 1, 4), s = pick(rng, 1, 3);
    const std::size_t t = win + pick(rng, 0, 8);
    const std::size_t out = (t - win) / s + 1;
    Tensor x = normal({b, c, t}, rng), w = normal({b, c, out}, rng);
    return check_inputs([&](const auto& a) { return project(pool1d(a[0], PoolMode::Average, win, s), w); }, {x});
  });
  cases.emplace_back("batch norm (train)", [](Rng& rng) {
    const std::size_t b = pick(rng, 2, 4), c = pick(rng, 1, 3), t = pick(rng, 1, 4);
    Tensor x = normal({b, c, t}, rng), g = normal({c}, rng), be = normal({c}, rng), w = normal({b, c, t}, rng);
    return check_inputs(
        [&](const auto& a) {
          BatchNormLayer bn(c);
          bn.gamma = a[1];
          bn.beta = a[2];
          return project(bn.forward(a[0], Mode::Train), w);
        },
        {x, g, be});
  });
  cases.emplace_back("conv2d", [](Rng& rng) {
    const std::size_t b = pick(rng, 1, 2), ci = pick(rng, 1, 2), co = pick(rng, 1, 3), kh = pick(rng, 1, 2),
                      kw = pick(rng, 1, 3);
    const std::size_t h = kh + pick(rng, 0, 3), wd = kw + pick(rng, 0, 3);
    Tensor x = normal({b, ci, h, wd}, rng), wt = normal({co, ci, kh, kw}, rng), bias = normal({co}, rng),
           w = normal({b, co, h - kh + 1, wd - kw + 1}, rng);
    return check_inputs([&](const auto& a) { return project(conv2d(a[0], a[1], a[2]), w); }, {x, wt, bias});
  });
  cases.emplace_back("max pool2d", [](Rng& rng) {
    const std::size_t b = pick(rng, 1, 2), c = pick(rng, 1, 2), ph = pick(rng, 1, 2), pw = pick(rng, 1, 3);
    const std::size_t h = ph * pick(rng, 1, 3) + pick(rng, 0, 1), wd = pw * pick(rng, 1, 3) + pick(rng, 0, 1);
    Tensor x = distinct({b, c, h, wd}, rng), w = normal({b, c, h / ph, wd / pw}, rng);
    return check_inputs([&](const auto& a) { return project(pool2d(a[0], PoolMode::Max, ph, pw), w); }, {x});
  });
  cases.emplace_back("linear", [](Rng& rng) {
    const std::size_t n = pick(rng, 1, 4), in = pick(rng, 1, 5), out = pick(rng, 1, 4);
    Tensor x = normal({n, in}, rng), wt = normal({out, in}, rng), bias = normal({out}, rng), w = normal({n, out}, rng);
    return check_inputs([&](const auto& a) { return project(linear(a[0], a[1], a[2]), w); }, {x, wt, bias});
  });
  cases.emplace_back("softmax cross-entropy", [](Rng& rng) {
    const std::size_t n = pick(rng, 1, 5), k = pick(rng, 2, 5);
    Tensor logits = normal({n, k}, rng, 2.0);
    std::vector<int> labels(n);
    for (auto& l : labels) l = static_cast<int>(pick(rng, 0, k - 1));
    return check_inputs([&](const auto& a) { return softmax_cross_entropy(a[0], labels); }, {logits});
  });
  cases.emplace_back("lstm", [](Rng& rng) {
    const std::size_t b = pick(rng, 1, 2), t = pick(rng, 2, 4), d = pick(rng, 1, 3), h = pick(rng, 1, 3);
    LstmLayer proto(d, h, rng);
    Tensor x = normal({b, t, d}, rng), w = normal({b, t, h}, rng);
    return check_inputs(
        [&](const auto& a) {
          LstmLayer l = proto;
          l.w_ih = a[1];
          l.w_hh = a[2];
          l.bias = a[3];
          return project(l.forward(a[0]), w);
        },
        {x, proto.w_ih.detach(), proto.w_hh.detach(), normal({4 * h}, rng, 0.5)});
  });
  return cases;
}

/// Two branches of two filters, F = 8, 0.25 s at 16 kHz, with a block that
/// still exercises every block layer kind.
inline ModelConfig tiny_model_config() {
  ModelConfig c;
  c.sample_rate = 16000;
  c.input_seconds = 0.25;
  c.branch_widths_ms = {15, 25};
  c.branch_stride_ms = 10;
  c.filters_per_branch = 2;
  c.pooled_frames = 8;
  c.pool_mode = PoolMode::Max;
  c.block = parse_block_spec("conv2d(2x2,2) pool2d(2x2) lstm(3) dense(4)");
  c.n_classes = 4;
  c.dropout = 0.3;
  return c;
}

/// Norm-wise relative error ||a - n|| / max(||a||, ||n||, 1e-8) of the tape
/// gradient of `loss` w.r.t. `target`, perturbed in place. Coordinates whose
/// perturbation crosses a ReLU/max kink are skipped and counted.
inline double tensor_rel_error(const std::function<Tensor()>& loss, Tensor& target, std::uint64_t base_signature,
                               CaseResult& tally) {
  const std::vector<double> analytic(target.grad().begin(), target.grad().end());
  NoGradGuard guard;
  std::vector<double>& v = target.values();
  double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
  auto eval = [&](bool& same) {
    KinkTrace trace;
    const double y = loss().item();
    same = same && trace.signature() == base_signature;
    return y;
  };
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double x0 = v[i];
    bool same = true;
    v[i] = x0 + kGradCheckStep;
    const double up = eval(same);
    v[i] = x0 - kGradCheckStep;
    const double down = eval(same);
    v[i] = x0;
    if (!same) {
      ++tally.kinks;
      continue;
    }
    ++tally.checked;
    const double numeric = (up - down) / (2.0 * kGradCheckStep);
    diff2 += (analytic[i] - numeric) * (analytic[i] - numeric);
    a2 += analytic[i] * analytic[i];
    n2 += numeric * numeric;
  }
  return std::sqrt(diff2) / std::max({std::sqrt(a2), std::sqrt(n2), 1e-8});
}

/// End-to-end check of the train-mode loss w.r.t. the input batch and every
/// trainable parameter tensor. Stacked batch norms over a tiny batch make the
/// loss strongly curved along directions it is nearly invariant to, so single
/// near-zero entries carry O(h^2) error far above their own magnitude; the
/// error is therefore measured per tensor.
inline CaseResult check_end_to_end(Rng& rng) {
  const ModelConfig cfg = tiny_model_config();
  Model model = Model::build(cfg, rng());
  const std::size_t batch = 2;
  Tensor input = normal({batch, cfg.input_samples()}, rng);
  input.set_requires_grad(true);
  std::vector<int> labels(batch);
  for (auto& l : labels) l = static_cast<int>(pick(rng, 0, cfg.n_classes - 1));
  const std::uint64_t dropout_seed = rng();
  auto loss = [&]() {
    Rng drop(dropout_seed);  // identical mask on every evaluation
    return softmax_cross_entropy(model.forward(input, Mode::Train, &drop), labels);
  };

  std::vector<Tensor> targets = {input};
  for (auto& p : model.parameters())
    if (p.trainable) targets.push_back(p.tensor);
  for (auto& t : targets) t.zero_grad();
  std::uint64_t base_signature = 0;
  {
    KinkTrace trace;
    Tensor l = loss();
    base_signature = trace.signature();
    backward(l);
  }
  CaseResult r;
  for (auto& t : targets) r.error = std::max(r.error, tensor_rel_error(loss, t, base_signature, r));
  return r;
}

}  // namespace gc

/// Runs every component and the end-to-end model over `seeds` seeds each.
inline GradCheckReport run_gradcheck_suite(int seeds = 10, std::uint64_t base_seed = 1) {
  const auto start = std::chrono::steady_clock::now();
  GradCheckReport report;
  auto cases = gc::component_cases();
  cases.emplace_back("end-to-end model", gc::check_end_to_end);
  for (const auto& [name, fn] : cases) {
    ComponentCheck c{name, seeds, 0.0, base_seed};
    for (int s = 0; s < seeds; ++s) {
      const std::uint64_t seed = base_seed + static_cast<std::uint64_t>(s);
      Rng rng(seed);
      const gc::CaseResult r = fn(rng);
      c.checked += r.checked;
      c.kinks_skipped += r.kinks;
      if (s == 0 || r.error > c.max_rel_error) {
        c.max_rel_error = r.error;
        c.worst_seed = seed;
      }
    }
    report.components.push_back(c);
  }
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace rawser
