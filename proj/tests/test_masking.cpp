#include <doctest.h>

#include <cmath>
#include <vector>

#include "pfml/masking.hpp"
#include "pfml/rng.hpp"

using namespace pfml;

TEST_CASE("sample_masks: start_prob 1 masks every frame") {
  RngStream rng(1, "mask");
  MaskConfig cfg;
  cfg.start_prob = 1.0;
  cfg.min_span = 5;
  MaskSet set = sample_masks(40, cfg, rng);
  CHECK(set.starts.size() == 40);
  CHECK(set.masked_count() == 40);
}

TEST_CASE("sample_masks: start_prob 0 forces exactly one span") {
  RngStream rng(2, "mask");
  MaskConfig cfg;
  cfg.start_prob = 0.0;
  cfg.min_span = 5;
  for (int trial = 0; trial < 100; ++trial) {
    MaskSet set = sample_masks(50, cfg, rng);
    REQUIRE(set.starts.size() == 1);
    const int64_t s = set.starts[0];
    CHECK(s >= 0);
    CHECK(s < 50);
    const int64_t expect = std::min<int64_t>(5, 50 - s);
    CHECK(set.masked_count() == expect);
    for (int64_t i = 0; i < 50; ++i)
      CHECK(set.masked[i] == (i >= s && i < s + 5));
  }
}

TEST_CASE("sample_masks: spans clamp at the sequence end") {
  RngStream rng(3, "mask");
  MaskConfig cfg;
  cfg.start_prob = 1.0;
  cfg.min_span = 10;
  MaskSet set = sample_masks(4, cfg, rng);
  CHECK(set.masked_count() == 4);
  CHECK(static_cast<int64_t>(set.masked.size()) == 4);
}

TEST_CASE("sample_masks: empirical start rate matches p_m within 3 sigma") {
  RngStream rng(4, "mask");
  MaskConfig cfg;
  cfg.start_prob = 0.065;
  cfg.min_span = 1;
  // Use long sequences so the "force one start" fallback is negligible,
  // and count starts directly rather than via the mask cover.
  const int64_t frames_per_seq = 1000;
  const int trials = 100;
  int64_t starts = 0, frames = 0;
  int forced = 0;
  for (int t = 0; t < trials; ++t) {
    MaskSet set = sample_masks(frames_per_seq, cfg, rng);
    // A forced start is indistinguishable from a single natural start;
    // with p=0.065 and 1000 frames, P(no natural start) ~ 5e-30, so ignore.
    starts += static_cast<int64_t>(set.starts.size());
    frames += frames_per_seq;
    if (set.starts.size() == 1) ++forced;
  }
  CHECK(forced == 0);
  const double p = 0.065;
  const double n = static_cast<double>(frames);
  const double rate = static_cast<double>(starts) / n;
  const double sigma = std::sqrt(p * (1.0 - p) / n);
  CHECK(std::abs(rate - p) < 3.0 * sigma);
}

TEST_CASE("sample_masks: deterministic given the same stream state") {
  MaskConfig cfg;
  cfg.start_prob = 0.2;
  cfg.min_span = 3;
  RngStream a(77, "mask");
  RngStream b(77, "mask");
  for (int t = 0; t < 20; ++t) {
    MaskSet sa = sample_masks(64, cfg, a);
    MaskSet sb = sample_masks(64, cfg, b);
    CHECK(sa.starts == sb.starts);
    CHECK(sa.masked == sb.masked);
  }
}

TEST_CASE("sample_masks: rejects invalid configs") {
  RngStream rng(5, "mask");
  MaskConfig bad;
  bad.start_prob = 1.5;
  CHECK_THROWS_AS(static_cast<void>(sample_masks(10, bad, rng)), std::invalid_argument);
  bad.start_prob = 0.1;
  bad.min_span = 0;
  CHECK_THROWS_AS(static_cast<void>(sample_masks(10, bad, rng)), std::invalid_argument);
  MaskConfig ok;
  CHECK_THROWS_AS(static_cast<void>(sample_masks(0, ok, rng)), std::invalid_argument);
}

TEST_CASE("apply_mask: ones and zeros replace only masked rows") {
  MaskSet set;
  set.masked = {false, true, false, true};
  set.starts = {1, 3};
  const int64_t dim = 3;
  std::vector<double> base = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12};

  RngStream rng(6, "masknoise");
  std::vector<double> ones_rows = base;
  apply_mask(ones_rows, dim, set, MaskType::Ones, rng);
  std::vector<double> zeros_rows = base;
  apply_mask(zeros_rows, dim, set, MaskType::Zeros, rng);

  for (int64_t i = 0; i < 4; ++i)
    for (int64_t j = 0; j < dim; ++j) {
      if (set.masked[i]) {
        CHECK(ones_rows[i * dim + j] == 1.0);
        CHECK(zeros_rows[i * dim + j] == 0.0);
      } else {
        CHECK(ones_rows[i * dim + j] == base[i * dim + j]);
        CHECK(zeros_rows[i * dim + j] == base[i * dim + j]);
      }
    }
}

TEST_CASE("apply_mask: gaussian replacement has ~N(0,1) statistics over masked rows") {
  const int64_t s = 2000, dim = 8;
  MaskSet set;
  set.masked.assign(s, false);
  for (int64_t i = 0; i < s; i += 2) set.masked[i] = true;
  std::vector<double> rows(s * dim, 42.0);
  RngStream rng(7, "masknoise");
  apply_mask(rows, dim, set, MaskType::GaussianNoise, rng);

  double sum = 0.0, sq = 0.0;
  int64_t n = 0;
  for (int64_t i = 0; i < s; ++i) {
    for (int64_t j = 0; j < dim; ++j) {
      const double v = rows[i * dim + j];
      if (!set.masked[i]) {
        CHECK(v == 42.0);
        continue;
      }
      sum += v;
      sq += v * v;
      ++n;
    }
  }
  const double mean = sum / static_cast<double>(n);
  const double var = sq / static_cast<double>(n) - mean * mean;
  const double sd_mean = 1.0 / std::sqrt(static_cast<double>(n));
  CHECK(std::abs(mean) < 3.0 * sd_mean);
  CHECK(std::abs(var - 1.0) < 3.0 * std::sqrt(2.0 / static_cast<double>(n)));
}

TEST_CASE("apply_mask: learnable token copies the token into masked rows") {
  MaskSet set;
  set.masked = {true, false, true};
  set.starts = {0, 2};
  const int64_t dim = 2;
  std::vector<double> rows = {9, 9, 5, 6, 9, 9};
  std::vector<double> token = {-1.5, 2.5};
  apply_mask(rows, dim, set, MaskType::LearnableToken, token);
  CHECK(rows == std::vector<double>{-1.5, 2.5, 5, 6, -1.5, 2.5});
}

TEST_CASE("apply_mask: overload misuse is rejected") {
  MaskSet set;
  set.masked = {true};
  set.starts = {0};
  std::vector<double> rows = {1.0, 2.0};
  RngStream rng(8, "masknoise");
  CHECK_THROWS_AS(apply_mask(rows, 2, set, MaskType::LearnableToken, rng), std::invalid_argument);
  std::vector<double> token = {1.0};
  CHECK_THROWS_AS(apply_mask(rows, 2, set, MaskType::LearnableToken, token),
                  std::invalid_argument);
  std::vector<double> short_rows = {1.0};
  CHECK_THROWS_AS(apply_mask(short_rows, 2, set, MaskType::Zeros, rng), std::invalid_argument);
}

TEST_CASE("mask type names round-trip") {
  for (uint32_t i = 0; i < 4; ++i) {
    const MaskType t = static_cast<MaskType>(i);
    CHECK(mask_type_from_name(mask_type_name(t)) == t);
  }
  CHECK_THROWS_AS(static_cast<void>(mask_type_from_name("bogus")), std::invalid_argument);
}
