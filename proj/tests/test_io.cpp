#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <vector>

#include "pfml/config.hpp"
#include "pfml/io.hpp"
#include "pfml/rng.hpp"

using namespace pfml;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
  fs::path dir = fs::temp_directory_path() / "pfml-io-tests";
  fs::create_directories(dir);
  return dir;
}

std::vector<char> slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  REQUIRE(is.good());
  return std::vector<char>(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
}

Signal make_signal(RngStream& rng, int64_t channels, int64_t len, double rate) {
  Signal s;
  s.channels = channels;
  s.sample_rate = rate;
  s.data.assign(channels, std::vector<double>(len));
  for (auto& ch : s.data)
    for (double& v : ch) {
      // quantize to f32 so the round-trip is lossless
      v = static_cast<float>(rng.gaussian());
    }
  return s;
}

}  // namespace

TEST_CASE("sequence file: write + read round-trips bit-identically") {
  const fs::path dir = temp_dir();
  RngStream rng(301, "io");

  // 24 channels at 52 Hz exercises multichannel interleaving
  for (auto [c, len, rate] : {std::tuple<int64_t, int64_t, double>{1, 3000, 16000.0},
                              {24, 520, 52.0}, {3, 7, 1.0}}) {
    Signal s = make_signal(rng, c, len, rate);
    const fs::path p = dir / "seq.pfts";
    io::write_sequence(p, s);
    Signal r = io::read_sequence(p);
    CHECK(r.channels == s.channels);
    CHECK(r.sample_rate == s.sample_rate);
    CHECK(r.data == s.data);

    // rewriting the parsed signal reproduces the file byte for byte
    const fs::path p2 = dir / "seq2.pfts";
    io::write_sequence(p2, r);
    CHECK(slurp(p) == slurp(p2));
  }
}

TEST_CASE("sequence file: corrupt magic is rejected") {
  const fs::path dir = temp_dir();
  RngStream rng(302, "io");
  const fs::path p = dir / "bad.pfts";
  io::write_sequence(p, make_signal(rng, 2, 16, 100.0));
  {
    std::fstream f(p, std::ios::in | std::ios::out | std::ios::binary);
    f.put('X');
  }
  CHECK_THROWS_WITH_AS(static_cast<void>(io::read_sequence(p)),
                       doctest::Contains("bad magic"), std::runtime_error);
}

TEST_CASE("sequence file: truncated payload is rejected") {
  const fs::path dir = temp_dir();
  RngStream rng(303, "io");
  const fs::path p = dir / "trunc.pfts";
  io::write_sequence(p, make_signal(rng, 2, 100, 50.0));
  fs::resize_file(p, fs::file_size(p) - 10);
  CHECK_THROWS_AS(static_cast<void>(io::read_sequence(p)), std::runtime_error);
}

TEST_CASE("functional store: round-trips header and rows") {
  const fs::path dir = temp_dir();
  RngStream rng(304, "io");
  io::FunctionalStore store;
  store.set = FunctionalSet::all();
  store.channels = 3;
  store.normalized = true;
  for (int i = 0; i < 17; ++i) {
    std::vector<double> row(store.row_dim());
    for (double& v : row) v = static_cast<float>(rng.gaussian());
    store.rows.push_back(std::move(row));
  }
  const fs::path p = dir / "targets.pffn";
  io::write_functional_store(p, store);
  io::FunctionalStore r = io::read_functional_store(p);
  CHECK(r.set.ids == store.set.ids);
  CHECK(r.channels == store.channels);
  CHECK(r.normalized == store.normalized);
  CHECK(r.rows == store.rows);
}

TEST_CASE("functional store: subset of functionals and empty row set") {
  const fs::path dir = temp_dir();
  io::FunctionalStore store;
  store.set = FunctionalSet({FunctionalId::Mean, FunctionalId::Zcr});
  store.channels = 1;
  const fs::path p = dir / "subset.pffn";
  io::write_functional_store(p, store);
  io::FunctionalStore r = io::read_functional_store(p);
  CHECK(r.set.ids == store.set.ids);
  CHECK(r.rows.empty());
}

TEST_CASE("normalization stats sidecar round-trips") {
  const fs::path dir = temp_dir();
  NormalizationStats stats;
  stats.m = 11;
  stats.channels = 2;
  stats.frame_count = 123;
  stats.mean = {0.5, -1.25, 3.0};
  stats.std = {1.0, 0.0, 2.5};
  const fs::path p = dir / "norm.json";
  io::write_normalization_stats(p, stats);
  NormalizationStats r = io::read_normalization_stats(p);
  CHECK(r.m == stats.m);
  CHECK(r.channels == stats.channels);
  CHECK(r.frame_count == stats.frame_count);
  CHECK(r.mean == stats.mean);
  CHECK(r.std == stats.std);
}

TEST_CASE("manifest: round-trips entries with optional labels and groups") {
  const fs::path dir = temp_dir();
  io::DatasetManifest m;
  m.channels = 4;
  m.sample_rate = 250.0;
  m.frame_config.frame_len = 400;
  m.frame_config.hop = 200;
  m.task = "classification";
  m.num_classes = 3;
  m.entries.push_back({"a.pfts", 0, std::string("g1")});
  m.entries.push_back({"b.pfts", std::nullopt, std::nullopt});
  const fs::path p = dir / "manifest.json";
  io::write_manifest(p, m);
  io::DatasetManifest r = io::read_manifest(p);
  CHECK(r.channels == 4);
  CHECK(r.sample_rate == 250.0);
  CHECK(r.frame_config.frame_len == 400);
  CHECK(r.frame_config.hop == 200);
  CHECK(r.task == "classification");
  CHECK(r.num_classes == 3);
  REQUIRE(r.entries.size() == 2);
  CHECK(r.entries[0].label == 0);
  CHECK(r.entries[0].group == "g1");
  CHECK_FALSE(r.entries[1].label.has_value());
  CHECK(r.resolve(r.entries[0]) == dir / "a.pfts");
}

TEST_CASE("checkpoint: params, moments, step and strings round-trip") {
  const fs::path dir = temp_dir();
  RngStream rng(305, "io");
  io::Checkpoint ckpt;
  ckpt.config_digest = "0123456789abcdef";
  Tensor w({3, 2});
  for (double& v : w.data) v = static_cast<float>(rng.gaussian());
  Tensor b({2}, {0.25f, -1.5f});
  ckpt.params.put("enc.0.w", w);
  ckpt.params.put("enc.0.b", b);
  AdamState st;
  st.m = Tensor({3, 2});
  st.v = Tensor({3, 2});
  for (double& v : st.m.data) v = static_cast<float>(rng.gaussian());
  for (double& v : st.v.data) v = static_cast<float>(std::abs(rng.gaussian()));
  ckpt.opt_state.emplace("enc.0.w", st);
  ckpt.opt_step = 420;
  ckpt.strings["rng.dropout"] = "somestate";
  ckpt.strings["best_epoch"] = "7";

  const fs::path p = dir / "model.pfck";
  io::write_checkpoint(p, ckpt);
  io::Checkpoint r = io::read_checkpoint(p);
  CHECK(r.config_digest == ckpt.config_digest);
  CHECK(r.params.get("enc.0.w").data == w.data);
  CHECK(r.params.get("enc.0.w").shape == w.shape);
  CHECK(r.params.get("enc.0.b").data == b.data);
  CHECK(r.opt_state.at("enc.0.w").m.data == st.m.data);
  CHECK(r.opt_state.at("enc.0.w").v.data == st.v.data);
  CHECK(r.opt_step == 420);
  CHECK(r.strings == ckpt.strings);

  // rewriting reproduces the file exactly
  const fs::path p2 = dir / "model2.pfck";
  io::write_checkpoint(p2, r);
  CHECK(slurp(p) == slurp(p2));
}

TEST_CASE("checkpoint: corrupt magic is rejected") {
  const fs::path dir = temp_dir();
  const fs::path p = dir / "bad.pfck";
  std::ofstream(p, std::ios::binary) << "NOPEnope";
  CHECK_THROWS_WITH_AS(static_cast<void>(io::read_checkpoint(p)),
                       doctest::Contains("bad magic"), std::runtime_error);
}

TEST_CASE("config digest: stable across key order, sensitive to values") {
  io::json a = {{"lr", 1e-3}, {"epochs", 30}};
  io::json b = {{"epochs", 30}, {"lr", 1e-3}};
  io::json c = {{"epochs", 31}, {"lr", 1e-3}};
  const std::string da = io::config_digest(a);
  CHECK(da == io::config_digest(b));
  CHECK(da != io::config_digest(c));
  CHECK(da.size() == 16);
  for (char ch : da) CHECK(((ch >= '0' && ch <= '9') || (ch >= 'a' && ch <= 'f')));
}

TEST_CASE("config: pretrain round-trips through json") {
  PretrainConfig c;
  c.objective = Objective::MAE;
  c.loss_type = LossType::L1;
  c.mask.start_prob = 0.1;
  c.mask.min_span = 3;
  c.mask.mask_type = MaskType::GaussianNoise;
  c.mask.location = MaskLocation::Inputs;
  c.epochs = 12;
  c.batch_size = 4;
  c.lr = 5e-4;
  c.seed = 99;
  c.model.in_channels = 1;
  c.model.frame_len = 480;
  c.model.encoder.layers = {{32, 10, 5, 3}, {32, 8, 4, 2}, {32, 4, 2, 1}, {32, 4, 2, 1}};
  c.model.encoder.avg_pool_kernel = 6;
  c.model.transformer.dim = 32;
  c.model.transformer.ff = 64;

  io::json j = config::to_json(c);
  PretrainConfig r = config::pretrain_from_json(j);
  CHECK(config::to_json(r) == j);
  CHECK(r.objective == Objective::MAE);
  CHECK(r.loss_type == LossType::L1);
  CHECK(r.mask.mask_type == MaskType::GaussianNoise);
  CHECK(r.mask.location == MaskLocation::Inputs);
  CHECK(r.seed == 99);
}

TEST_CASE("config: finetune round-trips through json") {
  FinetuneConfig c;
  c.num_classes = 3;
  c.seed = 7;
  c.sensor_dropout = 0.3;
  c.channels_per_sensor = 2;
  c.metric = SelectionMetric::UAF1;
  c.model.in_channels = 4;
  c.model.frame_len = 400;
  c.model.encoder.layers = {{32, 10, 5, 3}, {32, 8, 5, 2}, {32, 4, 3, 1}};
  c.model.encoder.avg_pool_kernel = 5;
  c.model.transformer.dim = 32;
  c.model.transformer.ff = 64;

  io::json j = config::to_json(c);
  FinetuneConfig r = config::finetune_from_json(j);
  CHECK(config::to_json(r) == j);
  CHECK(r.metric == SelectionMetric::UAF1);
}

TEST_CASE("config: unknown keys are rejected and named") {
  io::json j = {{"start_prob", 0.1}, {"min_spam", 5}};
  CHECK_THROWS_WITH_AS(static_cast<void>(config::mask_from_json(j)),
                       doctest::Contains("min_spam"), std::invalid_argument);

  io::json enc = {{"layers", io::json::array()}, {"droput", 0.1}};
  CHECK_THROWS_WITH_AS(static_cast<void>(config::encoder_from_json(enc)),
                       doctest::Contains("droput"), std::invalid_argument);
}

TEST_CASE("config: seed is mandatory in training configs") {
  io::json model = config::to_json(ModelConfig{
      1, 480,
      EncoderConfig{{{32, 10, 5, 3}, {32, 8, 4, 2}, {32, 4, 2, 1}, {32, 4, 2, 1}},
                    true, 0.1, 6},
      PosEncConfig{}, TransformerConfig{2, 32, 4, 64, 0.1}});
  io::json j = {{"model", model}};
  CHECK_THROWS_WITH_AS(static_cast<void>(config::pretrain_from_json(j)),
                       doctest::Contains("seed"), std::invalid_argument);

  io::json jf = {{"model", model}, {"num_classes", 2}};
  CHECK_THROWS_WITH_AS(static_cast<void>(config::finetune_from_json(jf)),
                       doctest::Contains("seed"), std::invalid_argument);
}

TEST_CASE("rng stream state serializes and restores exactly") {
  RngStream a(42, "dropout");
  for (int i = 0; i < 1000; ++i) static_cast<void>(a.uniform());
  const std::string state = a.serialize();
  RngStream b(0, "other");
  b.deserialize(state);
  for (int i = 0; i < 100; ++i) CHECK(a.uniform() == b.uniform());
}
