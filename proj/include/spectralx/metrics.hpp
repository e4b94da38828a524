#pragma once

#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "spectralx/common.hpp"
#include "spectralx/dataio.hpp"

namespace spectralx {

// Integer confusion counts, rows = ground truth, columns = prediction.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int64_t classes) : classes_(classes) {
    if (classes < 2) throw ValueError("confusion: need at least 2 classes");
    counts_.assign(static_cast<size_t>(classes * classes), 0);
  }

  int64_t classes() const { return classes_; }
  int64_t at(int64_t truth, int64_t pred) const {
    return counts_[static_cast<size_t>(truth * classes_ + pred)];
  }

  void add(int64_t truth, int64_t pred) {
    if (truth < 0 || truth >= classes_ || pred < 0 || pred >= classes_) {
      throw ValueError("confusion: label out of range");
    }
    ++counts_[static_cast<size_t>(truth * classes_ + pred)];
  }

  void accumulate(const SegmentationMap& truth, const SegmentationMap& pred) {
    if (truth.height != pred.height || truth.width != pred.width) {
      throw ShapeError("confusion: map size mismatch");
    }
    for (size_t i = 0; i < truth.labels.size(); ++i) add(truth.labels[i], pred.labels[i]);
  }

  ConfusionMatrix& operator+=(const ConfusionMatrix& other) {
    if (other.classes_ != classes_) throw ShapeError("confusion: class count mismatch");
    for (size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
    return *this;
  }

  int64_t total() const {
    int64_t t = 0;
    for (int64_t c : counts_) t += c;
    return t;
  }

  int64_t tp(int64_t c) const { return at(c, c); }
  int64_t fp(int64_t c) const {
    int64_t s = 0;
    for (int64_t t = 0; t < classes_; ++t)
      if (t != c) s += at(t, c);
    return s;
  }
  int64_t fn(int64_t c) const {
    int64_t s = 0;
    for (int64_t p = 0; p < classes_; ++p)
      if (p != c) s += at(c, p);
    return s;
  }
  bool present(int64_t c) const { return tp(c) + fp(c) + fn(c) > 0; }

 private:
  int64_t classes_;
  std::vector<int64_t> counts_;
};

struct ClassScores {
  std::vector<real> iou, f1, acc;  // NaN-free: absent classes carry 0
  std::vector<bool> present;
};

inline ClassScores per_class_scores(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw ValueError("metrics: empty confusion matrix");
  ClassScores s;
  const int64_t n = cm.classes();
  s.iou.resize(static_cast<size_t>(n), 0.0);
  s.f1.resize(static_cast<size_t>(n), 0.0);
  s.acc.resize(static_cast<size_t>(n), 0.0);
  s.present.resize(static_cast<size_t>(n), false);
  for (int64_t c = 0; c < n; ++c) {
    const real tp = static_cast<real>(cm.tp(c));
    const real fp = static_cast<real>(cm.fp(c));
    const real fn = static_cast<real>(cm.fn(c));
    s.present[static_cast<size_t>(c)] = cm.present(c);
    if (tp + fp + fn > 0) s.iou[static_cast<size_t>(c)] = tp / (tp + fp + fn);
    if (2 * tp + fp + fn > 0) s.f1[static_cast<size_t>(c)] = 2 * tp / (2 * tp + fp + fn);
    if (tp + fn > 0) s.acc[static_cast<size_t>(c)] = tp / (tp + fn);
  }
  return s;
}

namespace detail {
inline real mean_over(const std::vector<real>& per_class, const std::vector<bool>& present,
                      bool all_classes) {
  real sum = 0.0;
  int64_t count = 0;
  for (size_t c = 0; c < per_class.size(); ++c) {
    if (all_classes || present[c]) {
      sum += per_class[c];
      ++count;
    }
  }
  if (count == 0) throw ValueError("metrics: no classes to average");
  return sum / static_cast<real>(count);
}
}  // namespace detail

// Means are taken over classes appearing in truth or prediction unless
// all_classes is set (then every class counts, absent ones as 0).
inline real miou(const ConfusionMatrix& cm, bool all_classes = false) {
  const auto s = per_class_scores(cm);
  return detail::mean_over(s.iou, s.present, all_classes);
}

inline real m_f1(const ConfusionMatrix& cm, bool all_classes = false) {
  const auto s = per_class_scores(cm);
  return detail::mean_over(s.f1, s.present, all_classes);
}

inline real m_acc(const ConfusionMatrix& cm, bool all_classes = false) {
  const auto s = per_class_scores(cm);
  return detail::mean_over(s.acc, s.present, all_classes);
}

inline std::string metrics_report(const ConfusionMatrix& cm, bool all_classes = false) {
  const auto s = per_class_scores(cm);
  std::ostringstream os;
  os.precision(6);
  os << std::fixed;
  for (int64_t c = 0; c < cm.classes(); ++c) {
    os << "class " << c << " iou=" << s.iou[static_cast<size_t>(c)]
       << " f1=" << s.f1[static_cast<size_t>(c)] << " acc=" << s.acc[static_cast<size_t>(c)]
       << (s.present[static_cast<size_t>(c)] ? "" : " (absent)") << "\n";
  }
  os << "miou=" << miou(cm, all_classes) << " m_f1=" << m_f1(cm, all_classes)
     << " m_acc=" << m_acc(cm, all_classes) << " pixels=" << cm.total() << "\n";
  return os.str();
}

}  // namespace spectralx
