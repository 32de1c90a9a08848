// Confusion matrices and unweighted average recall.
#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "rawser/tensor.hpp"

namespace rawser {

/// Rows are the true class, columns the predicted class.
struct ConfusionMatrix {
  std::size_t n = 0;
  std::vector<std::int64_t> counts;

  ConfusionMatrix() = default;
  explicit ConfusionMatrix(std::size_t classes) : n(classes), counts(classes * classes, 0) {}

  std::int64_t& at(std::size_t truth, std::size_t pred) { return counts[truth * n + pred]; }
  std::int64_t at(std::size_t truth, std::size_t pred) const { return counts[truth * n + pred]; }

  void add(int truth, int pred) {
    if (truth < 0 || pred < 0 || static_cast<std::size_t>(truth) >= n || static_cast<std::size_t>(pred) >= n) {
      throw Error("ConfusionMatrix::add: class index out of range");
    }
    ++at(static_cast<std::size_t>(truth), static_cast<std::size_t>(pred));
  }

  std::int64_t support(std::size_t cls) const {
    std::int64_t s = 0;
    for (std::size_t j = 0; j < n; ++j) s += at(cls, j);
    return s;
  }

  std::int64_t total() const { return std::accumulate(counts.begin(), counts.end(), std::int64_t{0}); }

  ConfusionMatrix& operator+=(const ConfusionMatrix& o) {
    if (o.n != n) throw Error("ConfusionMatrix: class counts differ");
    for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += o.counts[i];
    return *this;
  }

  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;
};

/// Classes absent from the true labels; they are left out of uar().
inline std::vector<std::size_t> zero_support_classes(const ConfusionMatrix& cm) {
  std::vector<std::size_t> out;
  for (std::size_t c = 0; c < cm.n; ++c)
    if (cm.support(c) == 0) out.push_back(c);
  return out;
}

/// Mean per-class recall over the classes that have support.
inline double uar(const ConfusionMatrix& cm) {
  double sum = 0.0;
  std::size_t classes = 0;
  for (std::size_t c = 0; c < cm.n; ++c) {
    const std::int64_t s = cm.support(c);
    if (s == 0) continue;
    sum += static_cast<double>(cm.at(c, c)) / static_cast<double>(s);
    ++classes;
  }
  if (classes == 0) throw Error("uar: confusion matrix is empty (no class has support)");
  return sum / static_cast<double>(classes);
}

inline ConfusionMatrix confusion_from(const std::vector<int>& truth, const std::vector<int>& pred, std::size_t classes) {
  if (truth.size() != pred.size()) throw Error("confusion_from: label and prediction counts differ");
  ConfusionMatrix cm(classes);
  for (std::size_t i = 0; i < truth.size(); ++i) cm.add(truth[i], pred[i]);
  return cm;
}

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation, 0 for a single value
};

inline MeanStd mean_std(const std::vector<double>& xs) {
  MeanStd r;
  if (xs.empty()) return r;
  r.mean = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
  if (xs.size() < 2) return r;
  double ss = 0.0;
  for (double x : xs) ss += (x - r.mean) * (x - r.mean);
  r.std = std::sqrt(ss / static_cast<double>(xs.size() - 1));
  return r;
}

}  // namespace rawser
