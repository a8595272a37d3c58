#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "pfml/io.hpp"
#include "pfml/rng.hpp"
#include "pfml/signal.hpp"

namespace pfml {

enum class SynthFamily : uint32_t { ArProcess = 0, Sinusoid = 1 };

// Per-class dynamics band. Classes stay learnable when the bands are
// disjoint enough; the shipped presets document their separation.
struct SynthClassParams {
  // sinusoid family: frequency band in Hz
  double freq_lo = 1.0;
  double freq_hi = 5.0;
  // AR(2) family: pole radius and angle bands
  double pole_lo = 0.5;
  double pole_hi = 0.7;
  double angle_lo = 0.2;
  double angle_hi = 1.0;
};

struct SyntheticSpec {
  SynthFamily family = SynthFamily::Sinusoid;
  int64_t num_classes = 0;  // 0 = unlabeled
  int64_t channels = 1;
  double sample_rate = 100.0;
  int64_t sequence_length = 2000;
  int64_t count = 50;
  int64_t num_groups = 10;
  uint64_t seed = 1;
  double noise_std = 0.3;
  std::vector<SynthClassParams> class_params;  // one per class (or one, unlabeled)

  void validate() const {
    if (channels < 1 || sequence_length < 2 || count < 1 || num_groups < 1)
      throw std::invalid_argument("synthetic spec: bad shape parameters");
    const size_t expected = num_classes > 0 ? static_cast<size_t>(num_classes) : 1;
    if (class_params.size() != expected)
      throw std::invalid_argument("synthetic spec: class_params count mismatch");
    if (sample_rate <= 0.0) throw std::invalid_argument("synthetic spec: bad sample rate");
  }
};

namespace detail {

inline double draw_in(RngStream& rng, double lo, double hi) {
  return lo + (hi - lo) * rng.uniform();
}

inline std::vector<double> synth_channel(const SyntheticSpec& spec, const SynthClassParams& p,
                                         RngStream& rng) {
  std::vector<double> x(spec.sequence_length);
  if (spec.family == SynthFamily::Sinusoid) {
    const double freq = draw_in(rng, p.freq_lo, p.freq_hi);
    const double phase = draw_in(rng, 0.0, 6.283185307179586);
    const double amp = draw_in(rng, 0.7, 1.3);
    for (int64_t t = 0; t < spec.sequence_length; ++t)
      x[t] = amp * std::sin(6.283185307179586 * freq * static_cast<double>(t) /
                                spec.sample_rate +
                            phase) +
             spec.noise_std * rng.gaussian();
  } else {
    const double r = draw_in(rng, p.pole_lo, p.pole_hi);
    const double theta = draw_in(rng, p.angle_lo, p.angle_hi);
    const double a1 = 2.0 * r * std::cos(theta);
    const double a2 = -r * r;
    double x1 = 0.0, x2 = 0.0;
    for (int64_t t = 0; t < spec.sequence_length; ++t) {
      const double v = a1 * x1 + a2 * x2 + rng.gaussian();
      x[t] = v + spec.noise_std * rng.gaussian();
      x2 = x1;
      x1 = v;
    }
  }
  return x;
}

}  // namespace detail

inline Signal synth_sequence(const SyntheticSpec& spec, int64_t class_id, RngStream& rng) {
  const SynthClassParams& p = spec.class_params[class_id < 0 ? 0 : class_id];
  Signal sig;
  sig.channels = spec.channels;
  sig.sample_rate = spec.sample_rate;
  sig.data.reserve(spec.channels);
  for (int64_t c = 0; c < spec.channels; ++c)
    sig.data.push_back(detail::synth_channel(spec, p, rng));
  return sig;
}

// Deterministic given the seed. Emits seq_<i>.pfts files and a manifest;
// labeled specs round-robin classes (uniform priors) and assign group
// ids round-robin as well.
inline io::DatasetManifest generate_synthetic(const SyntheticSpec& spec,
                                              const std::filesystem::path& out_dir,
                                              const FrameConfig& frame_cfg,
                                              const std::string& task = "synthetic") {
  spec.validate();
  std::filesystem::create_directories(out_dir);
  io::DatasetManifest manifest;
  manifest.channels = spec.channels;
  manifest.sample_rate = spec.sample_rate;
  manifest.frame_config = frame_cfg;
  manifest.task = task;
  manifest.num_classes = spec.num_classes;
  manifest.base_dir = out_dir;
  for (int64_t i = 0; i < spec.count; ++i) {
    const int64_t label = spec.num_classes > 0 ? i % spec.num_classes : -1;
    RngStream rng(spec.seed, "synth", static_cast<uint64_t>(i));
    Signal sig = synth_sequence(spec, label, rng);
    const std::string name = "seq_" + std::to_string(i) + ".pfts";
    io::write_sequence(out_dir / name, sig);
    io::ManifestEntry entry;
    entry.path = name;
    if (label >= 0) entry.label = label;
    entry.group = "g" + std::to_string(i % spec.num_groups);
    manifest.entries.push_back(std::move(entry));
  }
  io::write_manifest(out_dir / "manifest.json", manifest);
  return manifest;
}

}  // namespace pfml
