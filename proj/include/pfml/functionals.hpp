#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "pfml/signal.hpp"

namespace pfml {

// The 11 statistical functionals. Integer codes are the serialization
// contract for functional target stores; never reorder.
enum class FunctionalId : uint32_t {
  Mean = 0,
  Variance = 1,
  Skewness = 2,
  Kurtosis = 3,
  Min = 4,
  Max = 5,
  Zcr = 6,
  AcfMean = 7,
  AcfVariance = 8,
  AcfSkewness = 9,
  AcfKurtosis = 10,
};

inline constexpr int kNumFunctionals = 11;

inline const char* functional_name(FunctionalId id) {
  switch (id) {
    case FunctionalId::Mean: return "mean";
    case FunctionalId::Variance: return "variance";
    case FunctionalId::Skewness: return "skewness";
    case FunctionalId::Kurtosis: return "kurtosis";
    case FunctionalId::Min: return "min";
    case FunctionalId::Max: return "max";
    case FunctionalId::Zcr: return "zcr";
    case FunctionalId::AcfMean: return "acf_mean";
    case FunctionalId::AcfVariance: return "acf_variance";
    case FunctionalId::AcfSkewness: return "acf_skewness";
    case FunctionalId::AcfKurtosis: return "acf_kurtosis";
  }
  throw std::invalid_argument("unknown functional id");
}

inline FunctionalId functional_from_name(const std::string& name) {
  for (uint32_t i = 0; i < kNumFunctionals; ++i) {
    auto id = static_cast<FunctionalId>(i);
    if (name == functional_name(id)) return id;
  }
  throw std::invalid_argument("unknown functional name: " + name);
}

// Ordered, duplicate-free list of functionals; the order fixes the
// target-vector layout.
struct FunctionalSet {
  std::vector<FunctionalId> ids;
  bool include_lag0 = false;  // ACF moments over lags 1..N-1 by default

  FunctionalSet() = default;
  explicit FunctionalSet(std::vector<FunctionalId> list) : ids(std::move(list)) { validate(); }

  static FunctionalSet all() {
    FunctionalSet s;
    for (uint32_t i = 0; i < kNumFunctionals; ++i) s.ids.push_back(static_cast<FunctionalId>(i));
    return s;
  }

  size_t size() const { return ids.size(); }

  void validate() const {
    if (ids.empty() || ids.size() > kNumFunctionals)
      throw std::invalid_argument("functional set: need 1..11 members");
    for (size_t i = 0; i < ids.size(); ++i)
      for (size_t j = i + 1; j < ids.size(); ++j)
        if (ids[i] == ids[j]) throw std::invalid_argument("functional set: duplicate member");
  }
};

// Per-frame functional values, functional-major then channel:
// values[f * C + c] = F_f(frame channel c).
struct FunctionalVector {
  std::vector<double> values;
  size_t m = 0;
  size_t channels = 0;

  double& at(size_t f, size_t c) { return values[f * channels + c]; }
  double at(size_t f, size_t c) const { return values[f * channels + c]; }
};

namespace detail {

struct Moments {
  double mean, var, skew, kurt;  // population; skew/kurt 0 when var == 0
};

inline Moments moments(std::span<const double> x) {
  const double n = static_cast<double>(x.size());
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= n;
  double m2 = 0.0, m3 = 0.0, m4 = 0.0;
  for (double v : x) {
    const double d = v - mean;
    m2 += d * d;
    m3 += d * d * d;
    m4 += d * d * d * d;
  }
  m2 /= n;
  m3 /= n;
  m4 /= n;
  Moments out{mean, m2, 0.0, 0.0};
  if (m2 > 0.0) {
    const double sd = std::sqrt(m2);
    out.skew = m3 / (sd * sd * sd);
    out.kurt = m4 / (m2 * m2);  // non-excess (Pearson)
  }
  return out;
}

inline int sgn(double v) { return (v > 0.0) - (v < 0.0); }

}  // namespace detail

// ZCR(x) = 1/(N-1) * sum |sgn(x_k) - sgn(x_{k-1})|, range [0, 2].
inline double compute_zcr(std::span<const double> frame) {
  const size_t n = frame.size();
  if (n < 2) throw std::invalid_argument("zcr: frame needs at least 2 samples");
  double acc = 0.0;
  for (size_t k = 1; k < n; ++k)
    acc += std::abs(detail::sgn(frame[k]) - detail::sgn(frame[k - 1]));
  return acc / static_cast<double>(n - 1);
}

// ACF(x, tau) = 1/((N-tau) sigma^2) * sum_{k} (x_{k+tau}-mu)(x_k-mu),
// population mu/sigma^2, so ACF(x, 0) = 1 exactly. Returns false (and an
// untouched output) when the frame is constant.
inline bool compute_acf(std::span<const double> frame, std::vector<double>& acf_out) {
  const size_t n = frame.size();
  if (n < 2) throw std::invalid_argument("acf: frame needs at least 2 samples");
  double mean = 0.0;
  for (double v : frame) mean += v;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (double v : frame) var += (v - mean) * (v - mean);
  var /= static_cast<double>(n);
  if (var <= 0.0) return false;
  acf_out.resize(n);
  for (size_t tau = 0; tau < n; ++tau) {
    double acc = 0.0;
    for (size_t k = 0; k + tau < n; ++k) acc += (frame[k + tau] - mean) * (frame[k] - mean);
    acf_out[tau] = acc / (static_cast<double>(n - tau) * var);
  }
  return true;
}

// One channel of a frame -> values of the requested functionals.
// Degenerate (constant) frames: skewness/kurtosis and all ACF-derived
// values are 0; mean/variance/min/max/zcr are still defined.
inline void compute_functionals_channel(std::span<const double> frame, const FunctionalSet& set,
                                        std::vector<double>& out) {
  const size_t n = frame.size();
  if (n < 2) throw std::invalid_argument("functionals: frame needs at least 2 samples");
  const detail::Moments mom = detail::moments(frame);
  double mn = frame[0], mx = frame[0];
  for (double v : frame) {
    mn = std::min(mn, v);
    mx = std::max(mx, v);
  }

  detail::Moments acf_mom{0.0, 0.0, 0.0, 0.0};
  bool need_acf = false;
  for (FunctionalId id : set.ids)
    if (id == FunctionalId::AcfMean || id == FunctionalId::AcfVariance ||
        id == FunctionalId::AcfSkewness || id == FunctionalId::AcfKurtosis)
      need_acf = true;
  if (need_acf) {
    std::vector<double> acf;
    if (compute_acf(frame, acf)) {
      const size_t first = set.include_lag0 ? 0 : 1;
      if (first < acf.size())
        acf_mom = detail::moments(std::span<const double>(acf.data() + first, acf.size() - first));
    }
  }

  out.clear();
  out.reserve(set.ids.size());
  for (FunctionalId id : set.ids) {
    switch (id) {
      case FunctionalId::Mean: out.push_back(mom.mean); break;
      case FunctionalId::Variance: out.push_back(mom.var); break;
      case FunctionalId::Skewness: out.push_back(mom.skew); break;
      case FunctionalId::Kurtosis: out.push_back(mom.kurt); break;
      case FunctionalId::Min: out.push_back(mn); break;
      case FunctionalId::Max: out.push_back(mx); break;
      case FunctionalId::Zcr: out.push_back(compute_zcr(frame)); break;
      case FunctionalId::AcfMean: out.push_back(acf_mom.mean); break;
      case FunctionalId::AcfVariance: out.push_back(acf_mom.var); break;
      case FunctionalId::AcfSkewness: out.push_back(acf_mom.skew); break;
      case FunctionalId::AcfKurtosis: out.push_back(acf_mom.kurt); break;
    }
  }
}

// Full frame (C channels x N samples) -> FunctionalVector.
inline FunctionalVector compute_functionals(const std::vector<std::vector<double>>& frame,
                                            const FunctionalSet& set) {
  FunctionalVector fv;
  fv.m = set.ids.size();
  fv.channels = frame.size();
  fv.values.resize(fv.m * fv.channels);
  std::vector<double> chvals;
  for (size_t c = 0; c < frame.size(); ++c) {
    compute_functionals_channel(frame[c], set, chvals);
    for (size_t f = 0; f < fv.m; ++f) fv.at(f, c) = chvals[f];
  }
  return fv;
}

// Per-(functional, channel) z-scoring statistics, fitted over the entire
// pre-training set.
struct NormalizationStats {
  std::vector<double> mean;  // m*C
  std::vector<double> std;   // m*C
  size_t m = 0;
  size_t channels = 0;
  int64_t frame_count = 0;
};

inline NormalizationStats fit_normalization(const std::vector<FunctionalVector>& all) {
  if (all.size() < 2) throw std::invalid_argument("normalization: need at least 2 frames");
  NormalizationStats stats;
  stats.m = all[0].m;
  stats.channels = all[0].channels;
  stats.frame_count = static_cast<int64_t>(all.size());
  const size_t dim = stats.m * stats.channels;
  stats.mean.assign(dim, 0.0);
  stats.std.assign(dim, 0.0);
  for (const auto& fv : all) {
    if (fv.values.size() != dim) throw std::invalid_argument("normalization: mixed layouts");
    for (size_t i = 0; i < dim; ++i) stats.mean[i] += fv.values[i];
  }
  for (size_t i = 0; i < dim; ++i) stats.mean[i] /= static_cast<double>(all.size());
  for (const auto& fv : all)
    for (size_t i = 0; i < dim; ++i) {
      const double d = fv.values[i] - stats.mean[i];
      stats.std[i] += d * d;
    }
  for (size_t i = 0; i < dim; ++i)
    stats.std[i] = std::sqrt(stats.std[i] / static_cast<double>(all.size()));
  return stats;
}

// Coordinates with std == 0 divide by 1 and come out as 0.
inline FunctionalVector apply_normalization(const FunctionalVector& v,
                                            const NormalizationStats& stats) {
  if (v.values.size() != stats.mean.size())
    throw std::invalid_argument("normalization: layout mismatch");
  FunctionalVector out = v;
  for (size_t i = 0; i < out.values.size(); ++i) {
    const double denom = stats.std[i] > 0.0 ? stats.std[i] : 1.0;
    out.values[i] = (v.values[i] - stats.mean[i]) / denom;
  }
  return out;
}

}  // namespace pfml
