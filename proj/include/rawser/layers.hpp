// Neural building blocks: strided 1-D convolution over raw samples, temporal
// pooling (max / l2 / average, fixed or adaptive windows), batch
// normalization, 2-D convolution and pooling, LSTM, dense, dropout and
// softmax cross-entropy.
#pragma once

#include <cmath>
#include <cstddef>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "rawser/tensor.hpp"

namespace rawser {

enum class Mode { Train, Eval };

enum class PoolMode { Max, L2, Average };

inline std::string to_string(PoolMode m) {
  switch (m) {
    case PoolMode::Max: return "max";
    case PoolMode::L2: return "l2";
    case PoolMode::Average: return "average";
  }
  return "max";
}

inline PoolMode parse_pool_mode(std::string_view s) {
  if (s == "max") return PoolMode::Max;
  if (s == "l2") return PoolMode::L2;
  if (s == "average" || s == "avg") return PoolMode::Average;
  throw Error("unknown pool mode '" + std::string(s) + "' (expected max, l2 or average)");
}

/// Zero-mean normal init with variance 2 / fan_in.
inline Tensor he_normal(Shape shape, std::size_t fan_in, Rng& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  Tensor t = Tensor::zeros(std::move(shape), true);
  for (double& v : t.values()) v = dist(rng);
  return t;
}

// ---------------------------------------------------------------------------
// 1-D convolution over raw samples
// ---------------------------------------------------------------------------

/// Pre-activation strided convolution:
///   y[b][i][t] = bias[i] + sum_k w[i][k] * x[b][stride*t + k]
/// x: [batch x T], w: [n_filters x width], bias: [n_filters].
inline Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t stride) {
  if (x.rank() != 2 || w.rank() != 2 || bias.rank() != 1 || bias.dim(0) != w.dim(0)) {
    throw ShapeError("conv1d: expected x[batch x T], w[n x k], b[n]; got " + shape_str(x.shape()) + ", " +
                     shape_str(w.shape()) + ", " + shape_str(bias.shape()));
  }
  if (stride < 1) throw ShapeError("conv1d: stride must be >= 1");
  const std::size_t batch = x.dim(0), len = x.dim(1), n = w.dim(0), k = w.dim(1);
  if (len < k) {
    throw ShapeError("conv1d: input length " + std::to_string(len) + " shorter than filter width " +
                     std::to_string(k));
  }
  const std::size_t t_out = (len - k) / stride + 1;

  using ColMat = Eigen::MatrixXd;
  using StridedMap = Eigen::Map<const ColMat, 0, Eigen::OuterStride<>>;
  const auto ek = static_cast<Eigen::Index>(k), en = static_cast<Eigen::Index>(n),
             et = static_cast<Eigen::Index>(t_out), es = static_cast<Eigen::Index>(stride);

  std::vector<double> out(batch * n * t_out);
  // Row-major [n x k] weights read column-major are their transpose [k x n].
  Eigen::Map<const ColMat> wt(w.data().data(), ek, en);
  for (std::size_t b = 0; b < batch; ++b) {
    StridedMap cols(x.data().data() + b * len, ek, et, Eigen::OuterStride<>(es));
    Eigen::Map<ColMat> y(out.data() + b * n * t_out, et, en);
    y.noalias() = cols.transpose() * wt;
    for (std::size_t i = 0; i < n; ++i) y.col(static_cast<Eigen::Index>(i)).array() += bias[i];
  }

  auto ix = x.impl(), iw = w.impl(), ib = bias.impl();
  return detail::record(
      "conv1d", {batch, n, t_out}, std::move(out), {x, w, bias},
      [=](std::span<const double> g) {
        double* gx = detail::grad_sink(ix);
        double* gw = detail::grad_sink(iw);
        double* gb = detail::grad_sink(ib);
        Eigen::Map<const ColMat> wt_b(iw->data.data(), ek, en);
        ColMat dcols;
        for (std::size_t b = 0; b < batch; ++b) {
          Eigen::Map<const ColMat> gy(g.data() + b * n * t_out, et, en);
          StridedMap cols(ix->data.data() + b * len, ek, et, Eigen::OuterStride<>(es));
          if (gw) Eigen::Map<ColMat>(gw, ek, en).noalias() += cols * gy;
          if (gb) {
            for (std::size_t i = 0; i < n; ++i) gb[i] += gy.col(static_cast<Eigen::Index>(i)).sum();
          }
          if (gx) {
            dcols.noalias() = wt_b * gy.transpose();
            double* dst = gx + b * len;
            for (std::size_t t = 0; t < t_out; ++t) {
              const double* src = dcols.data() + t * k;
              double* d = dst + t * stride;
              for (std::size_t j = 0; j < k; ++j) d[j] += src[j];
            }
          }
        }
      });
}

inline std::size_t conv_output_length(std::size_t len, std::size_t width, std::size_t stride) {
  if (len < width) throw ShapeError("input length shorter than filter width");
  return (len - width) / stride + 1;
}

struct Conv1DLayer {
  Tensor weight;  // [n_filters x width]
  Tensor bias;    // [n_filters]
  std::size_t stride = 1;

  Conv1DLayer() = default;
  Conv1DLayer(std::size_t n_filters, std::size_t width, std::size_t stride_, Rng& rng)
      : weight(he_normal({n_filters, width}, width, rng)),
        bias(Tensor::zeros({n_filters}, true)),
        stride(stride_) {
    if (n_filters < 1 || width < 1 || stride_ < 1) throw Error("Conv1DLayer: sizes must be >= 1");
  }

  std::size_t n_filters() const { return weight.dim(0); }
  std::size_t width() const { return weight.dim(1); }

  Tensor forward(const Tensor& x) const { return conv1d(x, weight, bias, stride); }
};

// ---------------------------------------------------------------------------
// Temporal pooling
// ---------------------------------------------------------------------------

using FrameRange = std::pair<std::size_t, std::size_t>;

namespace detail {

/// Pools the last axis of x[batch x C x T] over the given half-open ranges.
inline Tensor pool_ranges(const Tensor& x, PoolMode mode, const std::vector<FrameRange>& ranges, const char* op) {
  const std::size_t rows = x.size() / x.shape().back();
  const std::size_t len = x.shape().back();
  const std::size_t f = ranges.size();
  Shape shape = x.shape();
  shape.back() = f;
  std::vector<double> out(rows * f);
  std::vector<std::size_t> argmax(mode == PoolMode::Max ? rows * f : 0);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* src = x.data().data() + r * len;
    for (std::size_t j = 0; j < f; ++j) {
      const auto [lo, hi] = ranges[j];
      double acc = 0.0;
      switch (mode) {
        case PoolMode::Max: {
          std::size_t best = lo;
          for (std::size_t t = lo + 1; t < hi; ++t)
            if (src[t] > src[best]) best = t;
          acc = src[best];
          argmax[r * f + j] = best;
          trace_branch(best);
          break;
        }
        case PoolMode::Average:
          for (std::size_t t = lo; t < hi; ++t) acc += src[t];
          acc /= static_cast<double>(hi - lo);
          break;
        case PoolMode::L2:
          for (std::size_t t = lo; t < hi; ++t) acc += src[t] * src[t];
          acc = std::sqrt(acc / static_cast<double>(hi - lo));
          break;
      }
      out[r * f + j] = acc;
    }
  }
  auto ix = x.impl();
  auto out_vals = std::make_shared<std::vector<double>>(out);
  return record(op, std::move(shape), std::move(out), {x},
                [ix, mode, ranges, argmax = std::move(argmax), out_vals, rows, len, f](std::span<const double> g) {
                  double* gx = grad_sink(ix);
                  if (!gx) return;
                  for (std::size_t r = 0; r < rows; ++r) {
                    const double* src = ix->data.data() + r * len;
                    double* dst = gx + r * len;
                    for (std::size_t j = 0; j < f; ++j) {
                      const auto [lo, hi] = ranges[j];
                      const double gj = g[r * f + j];
                      const double n = static_cast<double>(hi - lo);
                      switch (mode) {
                        case PoolMode::Max: dst[argmax[r * f + j]] += gj; break;
                        case PoolMode::Average:
                          for (std::size_t t = lo; t < hi; ++t) dst[t] += gj / n;
                          break;
                        case PoolMode::L2: {
                          const double y = (*out_vals)[r * f + j];
                          if (y > 0.0) {
                            for (std::size_t t = lo; t < hi; ++t) dst[t] += gj * src[t] / (n * y);
                          }
                          break;
                        }
                      }
                    }
                  }
                });
}

}  // namespace detail

/// Fixed-window pooling along the last axis. l2 is the root mean square.
inline Tensor pool1d(const Tensor& x, PoolMode mode, std::size_t window, std::size_t stride) {
  if (x.rank() < 1) throw ShapeError("pool1d: scalar input");
  if (window < 1 || stride < 1) throw ShapeError("pool1d: window and stride must be >= 1");
  const std::size_t len = x.shape().back();
  if (window > len) {
    throw ShapeError("pool1d: window " + std::to_string(window) + " larger than input length " +
                     std::to_string(len));
  }
  std::vector<FrameRange> ranges;
  for (std::size_t s = 0; s + window <= len; s += stride) ranges.emplace_back(s, s + window);
  return detail::pool_ranges(x, mode, ranges, "pool1d");
}

/// Frame j covers [floor(j*T/F), floor((j+1)*T/F)).
inline std::vector<FrameRange> adaptive_ranges(std::size_t len, std::size_t frames) {
  if (frames < 1 || frames > len) {
    throw ShapeError("adaptive_pool1d: cannot pool " + std::to_string(len) + " frames into " +
                     std::to_string(frames));
  }
  std::vector<FrameRange> r;
  r.reserve(frames);
  for (std::size_t j = 0; j < frames; ++j) r.emplace_back(j * len / frames, (j + 1) * len / frames);
  return r;
}

inline Tensor adaptive_pool1d(const Tensor& x, PoolMode mode, std::size_t out_frames) {
  if (x.rank() < 1) throw ShapeError("adaptive_pool1d: scalar input");
  return detail::pool_ranges(x, mode, adaptive_ranges(x.shape().back(), out_frames), "adaptive_pool1d");
}

// ---------------------------------------------------------------------------
// Batch normalization (channel axis 1; statistics over batch and all
// trailing axes)
// ---------------------------------------------------------------------------

struct BatchNormLayer {
  Tensor gamma;         // [C], trainable
  Tensor beta;          // [C], trainable
  Tensor running_mean;  // [C], buffer
  Tensor running_var;   // [C], buffer
  double momentum = 0.9;
  double eps = 1e-5;

  BatchNormLayer() = default;
  explicit BatchNormLayer(std::size_t channels, double momentum_ = 0.9, double eps_ = 1e-5)
      : gamma(Tensor::full({channels}, 1.0, true)),
        beta(Tensor::zeros({channels}, true)),
        running_mean(Tensor::zeros({channels})),
        running_var(Tensor::full({channels}, 1.0)),
        momentum(momentum_),
        eps(eps_) {}

  std::size_t channels() const { return gamma.dim(0); }

  /// Train mode normalizes with batch statistics and folds them into the
  /// running estimates: running = momentum * running + (1 - momentum) * batch,
  /// using the unbiased variance. Eval mode uses the running estimates only.
  Tensor forward(const Tensor& x, Mode mode) {
    if (x.rank() < 2 || x.dim(1) != channels()) {
      throw ShapeError("batchnorm: expected [batch x " + std::to_string(channels()) + " x ...], got " +
                       shape_str(x.shape()));
    }
    const std::size_t batch = x.dim(0), c = channels();
    const std::size_t inner = x.size() / (batch * c);
    const std::size_t count = batch * inner;
    std::vector<double> mean(c, 0.0), invstd(c, 0.0);

    if (mode == Mode::Train) {
      if (batch < 2) throw Error("batchnorm: train mode requires a batch of at least 2 (got 1)");
      std::vector<double> var(c, 0.0);
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t ch = 0; ch < c; ++ch) {
          const double* p = x.data().data() + (b * c + ch) * inner;
          for (std::size_t i = 0; i < inner; ++i) mean[ch] += p[i];
        }
      for (auto& m : mean) m /= static_cast<double>(count);
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t ch = 0; ch < c; ++ch) {
          const double* p = x.data().data() + (b * c + ch) * inner;
          for (std::size_t i = 0; i < inner; ++i) var[ch] += (p[i] - mean[ch]) * (p[i] - mean[ch]);
        }
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double biased = var[ch] / static_cast<double>(count);
        invstd[ch] = 1.0 / std::sqrt(biased + eps);
        const double unbiased = var[ch] / static_cast<double>(count - 1);
        running_mean.values()[ch] = momentum * running_mean[ch] + (1.0 - momentum) * mean[ch];
        running_var.values()[ch] = momentum * running_var[ch] + (1.0 - momentum) * unbiased;
      }
    } else {
      for (std::size_t ch = 0; ch < c; ++ch) {
        mean[ch] = running_mean[ch];
        invstd[ch] = 1.0 / std::sqrt(running_var[ch] + eps);
      }
    }

    std::vector<double> xhat(x.size()), out(x.size());
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const std::size_t base = (b * c + ch) * inner;
        for (std::size_t i = 0; i < inner; ++i) {
          xhat[base + i] = (x[base + i] - mean[ch]) * invstd[ch];
          out[base + i] = gamma[ch] * xhat[base + i] + beta[ch];
        }
      }

    auto ix = x.impl(), ig = gamma.impl(), ibt = beta.impl();
    const bool train = mode == Mode::Train;
    return detail::record(
        "batchnorm", x.shape(), std::move(out), {x, gamma, beta},
        [ix, ig, ibt, xhat = std::move(xhat), invstd, batch, c, inner, count, train](std::span<const double> g) {
          double* gx = detail::grad_sink(ix);
          double* gg = detail::grad_sink(ig);
          double* gbt = detail::grad_sink(ibt);
          std::vector<double> sum_g(c, 0.0), sum_gx(c, 0.0);
          for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t ch = 0; ch < c; ++ch) {
              const std::size_t base = (b * c + ch) * inner;
              for (std::size_t i = 0; i < inner; ++i) {
                sum_g[ch] += g[base + i];
                sum_gx[ch] += g[base + i] * xhat[base + i];
              }
            }
          for (std::size_t ch = 0; ch < c; ++ch) {
            if (gg) gg[ch] += sum_gx[ch];
            if (gbt) gbt[ch] += sum_g[ch];
          }
          if (!gx) return;
          const double n = static_cast<double>(count);
          for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t ch = 0; ch < c; ++ch) {
              const std::size_t base = (b * c + ch) * inner;
              const double gam = ig->data[ch];
              for (std::size_t i = 0; i < inner; ++i) {
                if (train) {
                  gx[base + i] += gam * invstd[ch] / n *
                                  (n * g[base + i] - sum_g[ch] - xhat[base + i] * sum_gx[ch]);
                } else {
                  gx[base + i] += gam * invstd[ch] * g[base + i];
                }
              }
            }
        });
  }
};

// ---------------------------------------------------------------------------
// 2-D convolution and pooling
// ---------------------------------------------------------------------------

/// Valid, stride-1 cross-correlation. x: [B x C x H x W], w: [O x C x kh x kw].
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias) {
  if (x.rank() != 4 || w.rank() != 4 || x.dim(1) != w.dim(1) || bias.rank() != 1 || bias.dim(0) != w.dim(0)) {
    throw ShapeError("conv2d: incompatible shapes x" + shape_str(x.shape()) + " w" + shape_str(w.shape()) + " b" +
                     shape_str(bias.shape()));
  }
  const std::size_t batch = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t o = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (h < kh || wd < kw) {
    throw ShapeError("conv2d: input " + shape_str(x.shape()) + " smaller than filter " + shape_str(w.shape()));
  }
  const std::size_t ho = h - kh + 1, wo = wd - kw + 1, hw = ho * wo, ckk = c * kh * kw;

  using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const auto eo = static_cast<Eigen::Index>(o), eckk = static_cast<Eigen::Index>(ckk),
             ehw = static_cast<Eigen::Index>(hw);

  auto im2col = [=](const double* src, RowMat& cols) {
    cols.resize(eckk, ehw);
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t a = 0; a < kh; ++a)
        for (std::size_t bcol = 0; bcol < kw; ++bcol) {
          double* row = cols.data() + ((ch * kh + a) * kw + bcol) * hw;
          for (std::size_t y = 0; y < ho; ++y) {
            const double* s = src + (ch * h + y + a) * wd + bcol;
            std::copy_n(s, wo, row + y * wo);
          }
        }
  };

  std::vector<double> out(batch * o * hw);
  Eigen::Map<const RowMat> wm(w.data().data(), eo, eckk);
  RowMat cols;
  for (std::size_t b = 0; b < batch; ++b) {
    im2col(x.data().data() + b * c * h * wd, cols);
    Eigen::Map<RowMat> y(out.data() + b * o * hw, eo, ehw);
    y.noalias() = wm * cols;
    for (std::size_t i = 0; i < o; ++i) y.row(static_cast<Eigen::Index>(i)).array() += bias[i];
  }

  auto ix = x.impl(), iw = w.impl(), ib = bias.impl();
  return detail::record("conv2d", {batch, o, ho, wo}, std::move(out), {x, w, bias}, [=](std::span<const double> g) {
    double* gx = detail::grad_sink(ix);
    double* gw = detail::grad_sink(iw);
    double* gb = detail::grad_sink(ib);
    Eigen::Map<const RowMat> wmb(iw->data.data(), eo, eckk);
    RowMat cols_b, dcols;
    for (std::size_t b = 0; b < batch; ++b) {
      Eigen::Map<const RowMat> gy(g.data() + b * o * hw, eo, ehw);
      if (gb) {
        for (std::size_t i = 0; i < o; ++i) gb[i] += gy.row(static_cast<Eigen::Index>(i)).sum();
      }
      if (gw) {
        im2col(ix->data.data() + b * c * h * wd, cols_b);
        Eigen::Map<RowMat>(gw, eo, eckk).noalias() += gy * cols_b.transpose();
      }
      if (gx) {
        dcols.noalias() = wmb.transpose() * gy;
        double* dst = gx + b * c * h * wd;
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t a = 0; a < kh; ++a)
            for (std::size_t bcol = 0; bcol < kw; ++bcol) {
              const double* row = dcols.data() + ((ch * kh + a) * kw + bcol) * hw;
              for (std::size_t y = 0; y < ho; ++y) {
                double* d = dst + (ch * h + y + a) * wd + bcol;
                for (std::size_t xx = 0; xx < wo; ++xx) d[xx] += row[y * wo + xx];
              }
            }
      }
    }
  });
}

/// Non-overlapping 2-D pooling (stride = pool size), trailing remainder dropped.
inline Tensor pool2d(const Tensor& x, PoolMode mode, std::size_t ph, std::size_t pw) {
  if (x.rank() != 4) throw ShapeError("pool2d: expected [B x C x H x W], got " + shape_str(x.shape()));
  if (ph < 1 || pw < 1) throw ShapeError("pool2d: pool size must be >= 1");
  const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), wd = x.dim(3);
  if (h < ph || wd < pw) {
    throw ShapeError("pool2d: input " + shape_str(x.shape()) + " smaller than pool " + std::to_string(ph) + "x" +
                     std::to_string(pw));
  }
  const std::size_t ho = h / ph, wo = wd / pw;
  const double n = static_cast<double>(ph * pw);
  std::vector<double> out(planes * ho * wo);
  // Each output cell's source indices, row-major within the window.
  auto src_idx = std::make_shared<std::vector<std::size_t>>();
  src_idx->reserve(out.size() * ph * pw);
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t y = 0; y < ho; ++y)
      for (std::size_t xx = 0; xx < wo; ++xx)
        for (std::size_t a = 0; a < ph; ++a)
          for (std::size_t bcol = 0; bcol < pw; ++bcol)
            src_idx->push_back((p * h + y * ph + a) * wd + xx * pw + bcol);
  const std::size_t win = ph * pw;
  std::vector<std::size_t> argmax(mode == PoolMode::Max ? out.size() : 0);
  for (std::size_t k = 0; k < out.size(); ++k) {
    const std::size_t* ids = src_idx->data() + k * win;
    double acc = 0.0;
    if (mode == PoolMode::Max) {
      std::size_t best = ids[0];
      for (std::size_t j = 1; j < win; ++j)
        if (x[ids[j]] > x[best]) best = ids[j];
      argmax[k] = best;
      detail::trace_branch(best);
      acc = x[best];
    } else if (mode == PoolMode::Average) {
      for (std::size_t j = 0; j < win; ++j) acc += x[ids[j]];
      acc /= n;
    } else {
      for (std::size_t j = 0; j < win; ++j) acc += x[ids[j]] * x[ids[j]];
      acc = std::sqrt(acc / n);
    }
    out[k] = acc;
  }
  auto ix = x.impl();
  auto outv = std::make_shared<std::vector<double>>(out);
  return detail::record("pool2d", {x.dim(0), x.dim(1), ho, wo}, std::move(out), {x},
                        [ix, src_idx, argmax = std::move(argmax), outv, mode, win, n](std::span<const double> g) {
                          double* gx = detail::grad_sink(ix);
                          if (!gx) return;
                          for (std::size_t k = 0; k < g.size(); ++k) {
                            const std::size_t* ids = src_idx->data() + k * win;
                            if (mode == PoolMode::Max) {
                              gx[argmax[k]] += g[k];
                            } else if (mode == PoolMode::Average) {
                              for (std::size_t j = 0; j < win; ++j) gx[ids[j]] += g[k] / n;
                            } else if ((*outv)[k] > 0.0) {
                              for (std::size_t j = 0; j < win; ++j)
                                gx[ids[j]] += g[k] * ix->data[ids[j]] / (n * (*outv)[k]);
                            }
                          }
                        });
}

struct Conv2DLayer {
  Tensor weight;  // [O x C x kh x kw]
  Tensor bias;    // [O]

  Conv2DLayer() = default;
  Conv2DLayer(std::size_t in_channels, std::size_t out_channels, std::size_t kh, std::size_t kw, Rng& rng)
      : weight(he_normal({out_channels, in_channels, kh, kw}, in_channels * kh * kw, rng)),
        bias(Tensor::zeros({out_channels}, true)) {}

  Tensor forward(const Tensor& x) const { return conv2d(x, weight, bias); }
};

// ---------------------------------------------------------------------------
// Dense, dropout, loss
// ---------------------------------------------------------------------------

/// y = x W^T + b, with x: [N x in], W: [out x in], b: [out].
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(1) || bias.rank() != 1 || bias.dim(0) != w.dim(0)) {
    throw ShapeError("linear: incompatible shapes x" + shape_str(x.shape()) + " W" + shape_str(w.shape()) + " b" +
                     shape_str(bias.shape()));
  }
  using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const auto en = static_cast<Eigen::Index>(x.dim(0)), ein = static_cast<Eigen::Index>(x.dim(1)),
             eout = static_cast<Eigen::Index>(w.dim(0));
  std::vector<double> out(x.dim(0) * w.dim(0));
  Eigen::Map<RowMat> y(out.data(), en, eout);
  y.noalias() = Eigen::Map<const RowMat>(x.data().data(), en, ein) *
                Eigen::Map<const RowMat>(w.data().data(), eout, ein).transpose();
  y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.data().data(), eout);
  auto ix = x.impl(), iw = w.impl(), ib = bias.impl();
  return detail::record("linear", {x.dim(0), w.dim(0)}, std::move(out), {x, w, bias}, [=](std::span<const double> g) {
    Eigen::Map<const RowMat> gy(g.data(), en, eout);
    if (double* gx = detail::grad_sink(ix)) {
      Eigen::Map<RowMat>(gx, en, ein).noalias() += gy * Eigen::Map<const RowMat>(iw->data.data(), eout, ein);
    }
    if (double* gw = detail::grad_sink(iw)) {
      Eigen::Map<RowMat>(gw, eout, ein).noalias() +=
          gy.transpose() * Eigen::Map<const RowMat>(ix->data.data(), en, ein);
    }
    if (double* gb = detail::grad_sink(ib)) {
      Eigen::Map<Eigen::RowVectorXd>(gb, eout) += gy.colwise().sum();
    }
  });
}

struct DenseLayer {
  Tensor weight;  // [out x in]
  Tensor bias;    // [out]

  DenseLayer() = default;
  DenseLayer(std::size_t in, std::size_t out, Rng& rng)
      : weight(he_normal({out, in}, in, rng)), bias(Tensor::zeros({out}, true)) {}

  std::size_t in_features() const { return weight.dim(1); }
  std::size_t out_features() const { return weight.dim(0); }

  Tensor forward(const Tensor& x) const { return linear(x, weight, bias); }
};

/// Inverted dropout: in train mode each unit is zeroed with probability p and
/// survivors are scaled by 1 / (1 - p). Eval mode is the identity.
inline Tensor dropout(const Tensor& x, double p, Mode mode, Rng& rng) {
  if (!(p >= 0.0 && p < 1.0)) throw Error("dropout: rate must lie in [0, 1), got " + std::to_string(p));
  if (mode == Mode::Eval || p == 0.0) return x;
  std::bernoulli_distribution keep(1.0 - p);
  Tensor mask = Tensor::zeros(x.shape());
  const double s = 1.0 / (1.0 - p);
  for (double& m : mask.values()) m = keep(rng) ? s : 0.0;
  return mul(x, mask);
}

/// Mean over the batch of -log softmax(logits)[label]. logits: [B x K].
inline Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw ShapeError("softmax_cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                     std::to_string(labels.size()) + " labels");
  }
  const std::size_t batch = logits.dim(0), k = logits.dim(1);
  for (int l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= k) {
      throw Error("softmax_cross_entropy: label " + std::to_string(l) + " outside [0, " + std::to_string(k) + ")");
    }
  }
  std::vector<double> probs(batch * k);
  double loss = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    const double* z = logits.data().data() + b * k;
    const double mx = *std::max_element(z, z + k);
    double denom = 0.0;
    for (std::size_t j = 0; j < k; ++j) denom += std::exp(z[j] - mx);
    for (std::size_t j = 0; j < k; ++j) probs[b * k + j] = std::exp(z[j] - mx) / denom;
    loss += -(z[labels[b]] - mx - std::log(denom));
  }
  loss /= static_cast<double>(batch);
  auto il = logits.impl();
  return detail::record("softmax_cross_entropy", {}, {loss}, {logits},
                        [il, probs = std::move(probs), labels, batch, k](std::span<const double> g) {
                          double* gl = detail::grad_sink(il);
                          if (!gl) return;
                          const double s = g[0] / static_cast<double>(batch);
                          for (std::size_t b = 0; b < batch; ++b)
                            for (std::size_t j = 0; j < k; ++j) {
                              const double onehot = static_cast<int>(j) == labels[b] ? 1.0 : 0.0;
                              gl[b * k + j] += s * (probs[b * k + j] - onehot);
                            }
                        });
}

/// Row-wise softmax, no graph.
inline std::vector<double> softmax_rows(const Tensor& logits) {
  const std::size_t batch = logits.dim(0), k = logits.dim(1);
  std::vector<double> p(batch * k);
  for (std::size_t b = 0; b < batch; ++b) {
    const double* z = logits.data().data() + b * k;
    const double mx = *std::max_element(z, z + k);
    double denom = 0.0;
    for (std::size_t j = 0; j < k; ++j) denom += std::exp(z[j] - mx);
    for (std::size_t j = 0; j < k; ++j) p[b * k + j] = std::exp(z[j] - mx) / denom;
  }
  return p;
}

// ---------------------------------------------------------------------------
// LSTM
// ---------------------------------------------------------------------------

/// Single-direction LSTM, gate order (input, forget, candidate, output):
///   i = sigm(W_i x + U_i h + b_i)    f = sigm(W_f x + U_f h + b_f)
///   g = tanh(W_g x + U_g h + b_g)    o = sigm(W_o x + U_o h + b_o)
///   c' = f * c + i * g               h' = o * tanh(c')
/// with zero initial state.
struct LstmLayer {
  Tensor w_ih;  // [4H x D]
  Tensor w_hh;  // [4H x H]
  Tensor bias;  // [4H]

  LstmLayer() = default;
  LstmLayer(std::size_t input_size, std::size_t hidden_size, Rng& rng)
      : w_ih(he_normal({4 * hidden_size, input_size}, input_size, rng)),
        w_hh(he_normal({4 * hidden_size, hidden_size}, hidden_size, rng)),
        bias(Tensor::zeros({4 * hidden_size}, true)) {
    for (std::size_t j = hidden_size; j < 2 * hidden_size; ++j) bias.values()[j] = 1.0;
  }

  std::size_t input_size() const { return w_ih.dim(1); }
  std::size_t hidden_size() const { return w_hh.dim(1); }

  /// x: [B x T x D] -> all hidden states [B x T x H].
  Tensor forward(const Tensor& x) const {
    if (x.rank() != 3 || x.dim(2) != input_size()) {
      throw ShapeError("lstm: expected [batch x T x " + std::to_string(input_size()) + "], got " +
                       shape_str(x.shape()));
    }
    const std::size_t batch = x.dim(0), steps = x.dim(1), hid = hidden_size();
    Tensor projected = reshape(linear(reshape(x, {batch * steps, input_size()}), w_ih, bias), {batch, steps, 4 * hid});
    Tensor zero_bias = Tensor::zeros({4 * hid});
    Tensor h = Tensor::zeros({batch, hid});
    Tensor c = Tensor::zeros({batch, hid});
    std::vector<Tensor> outputs;
    outputs.reserve(steps);
    for (std::size_t t = 0; t < steps; ++t) {
      Tensor pre = reshape(slice(projected, 1, t, t + 1), {batch, 4 * hid});
      if (t > 0) pre = add(pre, linear(h, w_hh, zero_bias));
      Tensor in_gate = sigmoid(slice(pre, 1, 0, hid));
      Tensor forget_gate = sigmoid(slice(pre, 1, hid, 2 * hid));
      Tensor cand = tanh(slice(pre, 1, 2 * hid, 3 * hid));
      Tensor out_gate = sigmoid(slice(pre, 1, 3 * hid, 4 * hid));
      c = t > 0 ? add(mul(forget_gate, c), mul(in_gate, cand)) : mul(in_gate, cand);
      h = mul(out_gate, tanh(c));
      outputs.push_back(reshape(h, {batch, 1, hid}));
    }
    return steps == 1 ? outputs.front() : concat(outputs, 1);
  }
};

}  // namespace rawser
