#include <doctest.h>

#include <cmath>

#include "pfml/rng.hpp"
#include "pfml/signal.hpp"

using namespace pfml;

namespace {

Signal random_signal(int64_t channels, int64_t len, uint64_t seed) {
  Signal s;
  s.channels = channels;
  s.sample_rate = 100.0;
  RngStream rng(seed, "test-signal");
  s.data.resize(channels);
  for (auto& ch : s.data) {
    ch.resize(len);
    for (double& v : ch) v = rng.gaussian() * 2.0 + 0.5;
  }
  return s;
}

}  // namespace

TEST_CASE("frame_signal: 30 s at 100 Hz with 4 s frames / 2 s hop gives 14 frames") {
  Signal s = random_signal(1, 3000, 1);
  FrameSequence seq = frame_signal(s, FrameConfig{400, 200});
  CHECK(seq.num_frames() == 14);
}

TEST_CASE("frame_signal: L == N gives exactly one frame") {
  Signal s = random_signal(2, 64, 2);
  FrameSequence seq = frame_signal(s, FrameConfig{64, 32});
  CHECK(seq.num_frames() == 1);
}

TEST_CASE("frame_signal: IMU-style framing count") {
  Signal s = random_signal(1, 1000, 3);
  FrameSequence seq = frame_signal(s, FrameConfig{120, 60});
  CHECK(seq.num_frames() == 15);
}

TEST_CASE("frame_signal: rejects signals shorter than one frame") {
  Signal s = random_signal(1, 100, 4);
  CHECK_THROWS_WITH_AS(static_cast<void>(frame_signal(s, FrameConfig{128, 64})),
                       "signal shorter than frame", std::invalid_argument);
}

TEST_CASE("frame count law and slice identity against an explicit slicing oracle") {
  RngStream rng(7, "framing-cases");
  for (int trial = 0; trial < 40; ++trial) {
    const int64_t n = 2 + static_cast<int64_t>(rng.uniform_int(60));
    const int64_t h = 1 + static_cast<int64_t>(rng.uniform_int(n));
    const int64_t len = n + static_cast<int64_t>(rng.uniform_int(500));
    Signal s = random_signal(2, len, 100 + trial);
    FrameSequence seq = frame_signal(s, FrameConfig{n, h});

    // oracle: walk starts explicitly
    int64_t expected = 0;
    for (int64_t start = 0; start + n <= len; start += h) ++expected;
    REQUIRE(seq.num_frames() == expected);
    REQUIRE(seq.num_frames() == (len - n) / h + 1);

    for (int64_t f = 0; f < seq.num_frames(); ++f)
      for (int64_t c = 0; c < 2; ++c)
        for (int64_t k = 0; k < n; ++k)
          REQUIRE(seq.frames[f][c][k] == s.data[c][f * h + k]);
  }
}

TEST_CASE("znormalize: mean 0 / std 1 against a two-pass oracle") {
  Signal s = random_signal(3, 512, 11);
  Signal z = znormalize(s);
  for (const auto& ch : z.data) {
    double mean = 0.0;
    for (double v : ch) mean += v;
    mean /= static_cast<double>(ch.size());
    double var = 0.0;
    for (double v : ch) var += (v - mean) * (v - mean);
    var /= static_cast<double>(ch.size());
    CHECK(std::abs(mean) < 1e-9);
    CHECK(std::abs(var - 1.0) < 1e-9);
  }
}

TEST_CASE("znormalize: idempotent on non-constant channels") {
  Signal s = random_signal(1, 256, 12);
  Signal z1 = znormalize(s);
  Signal z2 = znormalize(z1);
  for (int64_t t = 0; t < z1.length(); ++t)
    CHECK(std::abs(z1.data[0][t] - z2.data[0][t]) < 1e-6);
}

TEST_CASE("znormalize: constant channel becomes all zeros") {
  Signal s;
  s.channels = 1;
  s.sample_rate = 10.0;
  s.data = {std::vector<double>(50, 5.0)};
  Signal z = znormalize(s);
  for (double v : z.data[0]) CHECK(v == 0.0);
}

TEST_CASE("pad_or_truncate: identity / zero padding / prefix truncation") {
  Signal s = random_signal(2, 100, 13);
  {
    Signal out = pad_or_truncate(s, 100);
    CHECK(out.data == s.data);
  }
  {
    Signal in = random_signal(1, 50, 14);
    Signal out = pad_or_truncate(in, 80);
    CHECK(out.length() == 80);
    for (int64_t t = 0; t < 50; ++t) CHECK(out.data[0][t] == in.data[0][t]);
    for (int64_t t = 50; t < 80; ++t) CHECK(out.data[0][t] == 0.0);
  }
  {
    Signal in = random_signal(1, 120, 15);
    Signal out = pad_or_truncate(in, 80);
    CHECK(out.length() == 80);
    for (int64_t t = 0; t < 80; ++t) CHECK(out.data[0][t] == in.data[0][t]);
  }
}

TEST_CASE("pad_or_truncate is a projection: applying twice equals once") {
  Signal s = random_signal(1, 97, 16);
  for (int64_t target : {1, 50, 97, 130}) {
    Signal once = pad_or_truncate(s, target);
    Signal twice = pad_or_truncate(once, target);
    CHECK(once.data == twice.data);
  }
}
