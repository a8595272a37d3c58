#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace pfml {

// Multi-channel sampled waveform. Samples are stored channel-major:
// data[c] is channel c, all channels share the same length.
struct Signal {
  int64_t channels = 1;
  std::vector<std::vector<double>> data;  // channels x length
  double sample_rate = 1.0;

  int64_t length() const { return data.empty() ? 0 : static_cast<int64_t>(data[0].size()); }

  void validate() const {
    if (channels < 1) throw std::invalid_argument("signal: channels must be >= 1");
    if (sample_rate <= 0.0) throw std::invalid_argument("signal: sample_rate must be > 0");
    if (static_cast<int64_t>(data.size()) != channels)
      throw std::invalid_argument("signal: channel count mismatch");
    const size_t len = data.empty() ? 0 : data[0].size();
    for (const auto& ch : data) {
      if (ch.size() != len) throw std::invalid_argument("signal: ragged channel lengths");
      for (double v : ch)
        if (!std::isfinite(v)) throw std::invalid_argument("signal: non-finite sample");
    }
  }
};

struct FrameConfig {
  int64_t frame_len = 2;  // N
  int64_t hop = 1;        // H

  void validate() const {
    if (frame_len < 2) throw std::invalid_argument("frame config: frame_len must be >= 2");
    if (hop < 1 || hop > frame_len)
      throw std::invalid_argument("frame config: hop must satisfy 1 <= hop <= frame_len");
  }
};

// S frames x C channels x N samples, each frame a contiguous slice of the
// source. Trailing samples that do not fill a frame are dropped.
struct FrameSequence {
  std::vector<std::vector<std::vector<double>>> frames;  // S x C x N
  FrameConfig frame_config;
  std::optional<std::string> origin;

  int64_t num_frames() const { return static_cast<int64_t>(frames.size()); }
  int64_t channels() const { return frames.empty() ? 0 : static_cast<int64_t>(frames[0].size()); }
};

inline int64_t frame_count(int64_t length, const FrameConfig& cfg) {
  return (length - cfg.frame_len) / cfg.hop + 1;
}

inline FrameSequence frame_signal(const Signal& signal, const FrameConfig& cfg) {
  cfg.validate();
  const int64_t len = signal.length();
  if (len < cfg.frame_len) throw std::invalid_argument("signal shorter than frame");
  FrameSequence seq;
  seq.frame_config = cfg;
  const int64_t count = frame_count(len, cfg);
  seq.frames.resize(count);
  for (int64_t n = 0; n < count; ++n) {
    const int64_t start = n * cfg.hop;
    seq.frames[n].resize(signal.channels);
    for (int64_t c = 0; c < signal.channels; ++c) {
      seq.frames[n][c].assign(signal.data[c].begin() + start,
                              signal.data[c].begin() + start + cfg.frame_len);
    }
  }
  return seq;
}

// Per-channel z-score normalization with population (1/L) variance.
// A constant channel becomes all zeros: subtract the mean, divide by 1.
inline Signal znormalize(const Signal& signal) {
  if (signal.length() < 1) throw std::invalid_argument("znormalize: empty signal");
  Signal out = signal;
  for (auto& ch : out.data) {
    const double n = static_cast<double>(ch.size());
    double mean = 0.0;
    for (double v : ch) mean += v;
    mean /= n;
    double var = 0.0;
    for (double v : ch) var += (v - mean) * (v - mean);
    var /= n;
    const double denom = var > 0.0 ? std::sqrt(var) : 1.0;
    for (double& v : ch) v = (v - mean) / denom;
  }
  return out;
}

// Keeps the prefix on truncation, appends zeros on padding.
inline Signal pad_or_truncate(const Signal& signal, int64_t target_len) {
  if (target_len < 1) throw std::invalid_argument("pad_or_truncate: target_len must be >= 1");
  Signal out = signal;
  for (auto& ch : out.data) ch.resize(target_len, 0.0);
  return out;
}

}  // namespace pfml
