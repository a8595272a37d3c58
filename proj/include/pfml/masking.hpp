#pragma once

#include <algorithm>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "pfml/rng.hpp"

namespace pfml {

enum class MaskType : uint32_t { Ones = 0, Zeros = 1, GaussianNoise = 2, LearnableToken = 3 };
enum class MaskLocation : uint32_t { Embeddings = 0, Inputs = 1 };

inline const char* mask_type_name(MaskType t) {
  switch (t) {
    case MaskType::Ones: return "ones";
    case MaskType::Zeros: return "zeros";
    case MaskType::GaussianNoise: return "gaussian_noise";
    case MaskType::LearnableToken: return "learnable_token";
  }
  throw std::invalid_argument("unknown mask type");
}

inline MaskType mask_type_from_name(const std::string& s) {
  for (uint32_t i = 0; i < 4; ++i)
    if (s == mask_type_name(static_cast<MaskType>(i))) return static_cast<MaskType>(i);
  throw std::invalid_argument("unknown mask type: " + s);
}

struct MaskConfig {
  double start_prob = 0.065;  // p_m, per-frame mask-start probability
  int64_t min_span = 5;       // l_m, frames masked from each start
  MaskType mask_type = MaskType::Ones;
  MaskLocation location = MaskLocation::Embeddings;

  void validate() const {
    if (start_prob < 0.0 || start_prob > 1.0)
      throw std::invalid_argument("mask config: start_prob must be in [0,1]");
    if (min_span < 1) throw std::invalid_argument("mask config: min_span must be >= 1");
  }
};

// Mask starts plus the boolean cover they induce. Spans clamp at the
// sequence end and may overlap; there is always at least one start.
struct MaskSet {
  std::vector<int64_t> starts;  // sorted
  std::vector<bool> masked;     // length S

  int64_t masked_count() const {
    return static_cast<int64_t>(std::count(masked.begin(), masked.end(), true));
  }
};

inline MaskSet sample_masks(int64_t num_frames, const MaskConfig& cfg, RngStream& rng) {
  cfg.validate();
  if (num_frames < 1) throw std::invalid_argument("sample_masks: need at least one frame");
  MaskSet set;
  set.masked.assign(num_frames, false);
  for (int64_t i = 0; i < num_frames; ++i)
    if (rng.bernoulli(cfg.start_prob)) set.starts.push_back(i);
  if (set.starts.empty())
    set.starts.push_back(static_cast<int64_t>(rng.uniform_int(num_frames)));
  for (int64_t s : set.starts) {
    const int64_t end = std::min(s + cfg.min_span, num_frames);
    for (int64_t i = s; i < end; ++i) set.masked[i] = true;
  }
  return set;
}

// Replaces masked rows of an S x d tensor (flat row-major) in place.
// LearnableToken replacement is handled in the autodiff graph so the
// token receives gradients; this overload covers the constant types.
inline void apply_mask(std::vector<double>& rows, int64_t dim, const MaskSet& mask_set,
                       MaskType type, RngStream& rng) {
  if (type == MaskType::LearnableToken)
    throw std::invalid_argument("apply_mask: learnable token requires a token vector");
  const int64_t s = static_cast<int64_t>(mask_set.masked.size());
  if (static_cast<int64_t>(rows.size()) != s * dim)
    throw std::invalid_argument("apply_mask: shape mismatch");
  for (int64_t i = 0; i < s; ++i) {
    if (!mask_set.masked[i]) continue;
    double* row = rows.data() + i * dim;
    switch (type) {
      case MaskType::Ones:
        std::fill(row, row + dim, 1.0);
        break;
      case MaskType::Zeros:
        std::fill(row, row + dim, 0.0);
        break;
      case MaskType::GaussianNoise:
        for (int64_t j = 0; j < dim; ++j) row[j] = rng.gaussian();
        break;
      case MaskType::LearnableToken:
        break;  // unreachable
    }
  }
}

inline void apply_mask(std::vector<double>& rows, int64_t dim, const MaskSet& mask_set,
                       MaskType type, const std::vector<double>& token) {
  if (type != MaskType::LearnableToken)
    throw std::invalid_argument("apply_mask: token overload is for learnable tokens");
  if (static_cast<int64_t>(token.size()) != dim)
    throw std::invalid_argument("apply_mask: token dimension mismatch");
  const int64_t s = static_cast<int64_t>(mask_set.masked.size());
  if (static_cast<int64_t>(rows.size()) != s * dim)
    throw std::invalid_argument("apply_mask: shape mismatch");
  for (int64_t i = 0; i < s; ++i)
    if (mask_set.masked[i])
      std::copy(token.begin(), token.end(), rows.begin() + i * dim);
}

}  // namespace pfml
