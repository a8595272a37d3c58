// Acceptance suite: one pass/fail line per criterion, exit code = number of
// failures. Each criterion carries its own pinned tolerance and time budget.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "pfml/config.hpp"
#include "pfml/finetune.hpp"
#include "pfml/functionals.hpp"
#include "pfml/graph.hpp"
#include "pfml/io.hpp"
#include "pfml/masking.hpp"
#include "pfml/nn.hpp"
#include "pfml/pretrain.hpp"
#include "pfml/signal.hpp"
#include "pfml/synth.hpp"

namespace fs = std::filesystem;
using namespace pfml;

namespace {

int failures = 0;

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void run_criterion(int index, const std::string& title, double budget_s,
                   const std::function<std::string()>& body) {
  const auto t0 = std::chrono::steady_clock::now();
  std::string detail;
  bool ok = true;
  try {
    detail = body();
    if (!detail.empty()) ok = false;
  } catch (const std::exception& e) {
    ok = false;
    detail = std::string("exception: ") + e.what();
  }
  const double elapsed = seconds_since(t0);
  if (ok && budget_s > 0.0 && elapsed > budget_s) {
    ok = false;
    detail = "over time budget";
  }
  std::ostringstream line;
  line << (ok ? "PASS" : "FAIL") << ": C" << index << " " << title << " [" << std::fixed;
  line.precision(1);
  line << elapsed << "s]";
  if (!ok) line << " -- " << detail;
  std::cout << line.str() << std::endl;
  if (!ok) ++failures;
}

std::string cli_path() { return PFML_CLI_PATH; }
fs::path preset_dir() { return fs::path(PFML_PRESET_DIR); }

int run_cli(const std::string& args) {
  const std::string cmd = cli_path() + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string read_bytes(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + p.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

nlohmann::json load_json(const fs::path& p) {
  std::ifstream is(p);
  if (!is) throw std::runtime_error("cannot read " + p.string());
  return nlohmann::json::parse(is);
}

void dump_json(const fs::path& p, const nlohmann::json& j) {
  std::ofstream os(p);
  os << j.dump(2) << "\n";
}

fs::path work_dir() {
  static fs::path dir = [] {
    fs::path d = fs::temp_directory_path() / "pfml-acceptance";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

// ---- naive functional oracle (loop-by-the-definition, no shared code) ----

namespace oracle {

double mean(const std::vector<double>& x) {
  double s = 0.0;
  for (double v : x) s += v;
  return s / static_cast<double>(x.size());
}

double central_moment(const std::vector<double>& x, int p) {
  const double m = mean(x);
  double s = 0.0;
  for (double v : x) s += std::pow(v - m, p);
  return s / static_cast<double>(x.size());
}

double zcr(const std::vector<double>& x) {
  auto sign = [](double v) { return v > 0.0 ? 1 : (v < 0.0 ? -1 : 0); };
  double acc = 0.0;
  for (size_t k = 1; k < x.size(); ++k) acc += std::abs(sign(x[k]) - sign(x[k - 1]));
  return acc / static_cast<double>(x.size() - 1);
}

bool acf(const std::vector<double>& x, std::vector<double>& out) {
  const size_t n = x.size();
  const double m = mean(x);
  const double var = central_moment(x, 2);
  if (var <= 0.0) return false;
  out.assign(n, 0.0);
  for (size_t tau = 0; tau < n; ++tau) {
    double s = 0.0;
    for (size_t k = 0; k + tau < n; ++k) s += (x[k + tau] - m) * (x[k] - m);
    out[tau] = s / (static_cast<double>(n - tau) * var);
  }
  return true;
}

std::vector<double> all_eleven(const std::vector<double>& x) {
  std::vector<double> f(11, 0.0);
  f[0] = mean(x);
  f[1] = central_moment(x, 2);
  const double sd = std::sqrt(f[1]);
  f[2] = f[1] > 0.0 ? central_moment(x, 3) / (sd * sd * sd) : 0.0;
  f[3] = f[1] > 0.0 ? central_moment(x, 4) / (f[1] * f[1]) : 0.0;
  f[4] = *std::min_element(x.begin(), x.end());
  f[5] = *std::max_element(x.begin(), x.end());
  f[6] = zcr(x);
  std::vector<double> a;
  if (acf(x, a)) {
    std::vector<double> tail(a.begin() + 1, a.end());
    f[7] = mean(tail);
    f[8] = central_moment(tail, 2);
    const double tsd = std::sqrt(f[8]);
    f[9] = f[8] > 0.0 ? central_moment(tail, 3) / (tsd * tsd * tsd) : 0.0;
    f[10] = f[8] > 0.0 ? central_moment(tail, 4) / (f[8] * f[8]) : 0.0;
  }
  return f;
}

}  // namespace oracle

std::vector<double> random_frame(RngStream& rng, size_t n) {
  std::vector<double> x(n);
  const uint64_t kind = rng.uniform_int(4);
  for (double& v : x) {
    switch (kind) {
      case 0: v = rng.gaussian(); break;
      case 1: v = rng.uniform() * 4.0 - 2.0; break;
      case 2: {
        const double g = rng.gaussian();
        v = g * g * g;
        break;
      }
      default: v = (rng.bernoulli(0.5) ? 1.0 : -1.0) * (0.5 + rng.uniform()); break;
    }
  }
  return x;
}

// ---- tiny configs shared by the training criteria ----

ModelConfig tiny_model(int64_t channels) {
  ModelConfig m;
  m.in_channels = channels;
  m.frame_len = 8;
  m.encoder.layers = {{16, 4, 2, 1}, {16, 4, 2, 1}};
  m.encoder.avg_pool_kernel = 2;
  m.encoder.dropout = 0.0;
  m.posenc.kernel = 25;
  m.posenc.groups = 16;
  m.transformer.blocks = 1;
  m.transformer.dim = 16;
  m.transformer.heads = 4;
  m.transformer.ff = 32;
  m.transformer.dropout = 0.0;
  return m;
}

// Gradient-check model: small enough that exhaustive finite differences over
// every parameter coordinate stay well under the two-minute budget.
ModelConfig grad_model() {
  ModelConfig m;
  m.in_channels = 1;
  m.frame_len = 8;
  m.encoder.layers = {{8, 4, 2, 1}, {8, 4, 2, 1}};
  m.encoder.avg_pool_kernel = 2;
  m.encoder.dropout = 0.0;
  m.posenc.kernel = 3;
  m.posenc.groups = 4;
  m.transformer.blocks = 1;
  m.transformer.dim = 8;
  m.transformer.heads = 2;
  m.transformer.ff = 16;
  m.transformer.dropout = 0.0;
  return m;
}

// Finite-difference check over every parameter coordinate. `build` must
// return a scalar loss built from ctx.param(...) leaves.
std::string fd_check_params(ParamStore params, const std::function<ag::Var(ForwardCtx&)>& build,
                            double rel = 1e-4, double abs_tol = 1e-6) {
  std::map<std::string, Tensor> analytic;
  {
    ForwardCtx ctx(params);
    ag::Var loss = build(ctx);
    if (loss.val().numel() != 1) return "loss is not scalar";
    ctx.graph.backward(loss.id);
    analytic = ctx.grads();
  }
  const double h = 1e-5;
  for (auto& [name, grad] : analytic) {
    Tensor& t = params.get(name);
    for (int64_t i = 0; i < t.numel(); ++i) {
      const double saved = t[i];
      auto eval = [&](double delta) {
        t[i] = saved + delta;
        ForwardCtx ctx(params);
        const double v = build(ctx).val()[0];
        return v;
      };
      const double numeric = (eval(h) - eval(-h)) / (2.0 * h);
      t[i] = saved;
      const double got = grad[i];
      const double tol = std::max(abs_tol, rel * std::max(std::abs(numeric), std::abs(got)));
      if (std::abs(numeric - got) > tol)
        return name + "[" + std::to_string(i) + "]: analytic " + std::to_string(got) +
               " vs numeric " + std::to_string(numeric);
    }
  }
  return "";
}

ag::Var weighted_sum(ag::Var x) {
  ag::Graph& g = *x.g;
  Tensor w = x.val();
  uint64_t hsh = 0x9e3779b97f4a7c15ULL;
  for (double& v : w.data) {
    hsh = hsh * 6364136223846793005ULL + 1442695040888963407ULL;
    v = static_cast<double>((hsh >> 11) & 0xffff) / 65536.0 - 0.5;
  }
  ag::Var wv = ag::constant(g, std::move(w));
  ag::Var flat = ag::reshape(ag::mul(x, wv), {1, x.val().numel()});
  return ag::mean_rows(ag::transpose(flat));
}

Tensor random_frames_tensor(RngStream& rng, int64_t s, int64_t c, int64_t n) {
  Tensor t({s, c, n});
  for (double& v : t.data) v = rng.gaussian();
  return t;
}

// ---- shared synthetic datasets ----

struct Datasets {
  fs::path unlabeled_manifest;
  fs::path labeled_manifest;
};

const Datasets& datasets() {
  static Datasets d = [] {
    Datasets out;
    for (const char* name : {"synth-unlabeled", "synth-labeled"}) {
      const fs::path out_dir = work_dir() / name;
      auto [spec, frame] = config::synth_from_json(load_json(preset_dir() / (std::string(name) + ".json")));
      generate_synthetic(spec, out_dir, frame);
    }
    out.unlabeled_manifest = work_dir() / "synth-unlabeled" / "manifest.json";
    out.labeled_manifest = work_dir() / "synth-labeled" / "manifest.json";
    return out;
  }();
  return d;
}

PretrainConfig preset_pretrain() {
  return config::pretrain_from_json(load_json(preset_dir() / "pretrain-tiny.json"));
}

FinetuneConfig preset_probe() {
  return config::finetune_from_json(load_json(preset_dir() / "probe-tiny.json"));
}

double mean_masked_output_variance(const PretrainResult& result, const PretrainConfig& cfg,
                                   const FramedDataset& ds) {
  ParamStore params = result.best_params;
  RngStream mask_rng(cfg.seed, "valmask");
  RngStream noise_rng(cfg.seed, "valmasknoise");
  double acc = 0.0;
  int64_t count = 0;
  for (const Tensor& seq : ds.sequences) {
    const MaskSet mask = sample_masks(seq.dim(0), cfg.mask, mask_rng);
    ForwardCtx ctx(params);
    PretrainForward fwd = pretrain_forward(ctx, cfg, seq, mask, noise_rng);
    acc += masked_rows_variance(fwd.predictions.val(), mask);
    ++count;
  }
  return acc / static_cast<double>(count);
}

EvalOutcome probe_all_folds(const ParamStore& backbone, const FinetuneConfig& cfg,
                            const FramedDataset& ds, int64_t k) {
  const auto folds = grouped_kfold(ds.groups, k, cfg.seed);
  std::vector<ConfusionMatrix> cms;
  for (const auto& fold : folds)
    cms.push_back(linear_probe(backbone, cfg, ds, fold.train, fold.val, fold.test).test.cm);
  const ConfusionMatrix agg = aggregate_eval(cms);
  return EvalOutcome{agg, uar(agg), uaf1(agg)};
}

// ---- criteria ----

std::string c1_functional_oracles() {
  // exact conventions
  const std::vector<double> alt{1.0, -1.0, 1.0, -1.0};
  if (compute_zcr(alt) != 2.0) return "alternating-sign ZCR != 2";
  RngStream rng(41, "c1");
  {
    std::vector<double> acf_vals;
    const std::vector<double> x = random_frame(rng, 64);
    if (!compute_acf(x, acf_vals)) return "ACF reported a constant frame";
    if (acf_vals[0] != 1.0) return "ACF at lag 0 != 1";
  }
  // 1000 random frames against the naive oracle, 1e-9 relative
  const FunctionalSet set = FunctionalSet::all();
  for (int t = 0; t < 1000; ++t) {
    const size_t n = 16 + rng.uniform_int(240);
    const std::vector<double> x = random_frame(rng, n);
    const FunctionalVector got = compute_functionals({x}, set);
    const std::vector<double> want = oracle::all_eleven(x);
    for (size_t f = 0; f < 11; ++f) {
      const double a = got.at(f, 0), b = want[f];
      const double tol = std::max(1e-12, 1e-9 * std::max(std::abs(a), std::abs(b)));
      if (std::abs(a - b) > tol)
        return std::string(functional_name(set.ids[f])) + " off by " + std::to_string(a - b) +
               " at trial " + std::to_string(t);
    }
  }
  return "";
}

std::string c2_framing_law() {
  Signal sig;
  sig.channels = 1;
  sig.sample_rate = 100.0;
  sig.data = {std::vector<double>(3000, 0.0)};
  for (size_t i = 0; i < 3000; ++i) sig.data[0][i] = std::sin(0.01 * static_cast<double>(i));
  const FrameConfig cfg{400, 200};
  if (frame_count(3000, cfg) != 14) return "frame_count(3000, 400/200) != 14";
  const FrameSequence seq = frame_signal(sig, cfg);
  if (seq.num_frames() != 14) return "frame_signal produced " + std::to_string(seq.num_frames());
  return "";
}

std::string c3_encoder_shapes() {
  ModelConfig speech;
  speech.in_channels = 1;
  speech.frame_len = 480;
  speech.encoder.layers = {{128, 10, 5, 3}, {128, 8, 4, 2}, {128, 4, 2, 1}, {128, 4, 2, 1}};
  speech.encoder.avg_pool_kernel = 6;
  speech.encoder.dropout = 0.0;
  speech.transformer.dim = 128;
  speech.transformer.dropout = 0.0;
  speech.validate();
  const std::vector<int64_t> want_speech{96, 24, 12, 6, 1};
  if (speech.encoder.length_chain(480) != want_speech) return "speech length chain mismatch";

  ModelConfig eeg = speech;
  eeg.in_channels = 2;
  eeg.frame_len = 400;
  eeg.encoder.layers = {{128, 10, 5, 3}, {128, 8, 5, 2}, {128, 4, 3, 1}};
  eeg.encoder.avg_pool_kernel = 5;
  eeg.validate();
  const std::vector<int64_t> want_eeg{80, 16, 5, 1};
  if (eeg.encoder.length_chain(400) != want_eeg) return "EEG length chain mismatch";

  RngStream rng(7, "init");
  for (const ModelConfig* m : {&speech, &eeg}) {
    ParamStore params = init_backbone(*m, rng);
    ForwardCtx ctx(params);
    RngStream data(8, "c3");
    Tensor frames = random_frames_tensor(data, 3, m->in_channels, m->frame_len);
    ag::Var z = encoder_forward(ctx, ag::constant(ctx.graph, frames), *m);
    if (z.shape() != std::vector<int64_t>{3, 128})
      return "encoder output shape is not (S, 128)";
  }
  return "";
}

std::string c4_gradients() {
  const ModelConfig m = grad_model();
  RngStream data(3, "c4");
  const Tensor frames = random_frames_tensor(data, 4, 1, 8);
  const int64_t s = 4, d = m.transformer.dim;

  auto fresh_params = [&](bool token) {
    ModelConfig cfg = m;
    cfg.learnable_mask_token = token;
    RngStream init(5, "init");
    return init_backbone(cfg, init);
  };

  // encoder
  {
    ParamStore p = fresh_params(false);
    const std::string err = fd_check_params(p, [&](ForwardCtx& ctx) {
      return weighted_sum(encoder_forward(ctx, ag::constant(ctx.graph, frames), m));
    });
    if (!err.empty()) return "encoder: " + err;
  }
  Tensor z({s, d});
  for (double& v : z.data) v = data.gaussian();
  // positional encoder
  {
    ParamStore p = fresh_params(false);
    const std::string err = fd_check_params(p, [&](ForwardCtx& ctx) {
      return weighted_sum(positional_encode(ctx, ag::constant(ctx.graph, z), m));
    });
    if (!err.empty()) return "posenc: " + err;
  }
  // attention block
  {
    ParamStore p = fresh_params(false);
    const std::string err = fd_check_params(p, [&](ForwardCtx& ctx) {
      return weighted_sum(attention_block(ctx, ag::constant(ctx.graph, z), m.transformer, "tf.0."));
    });
    if (!err.empty()) return "attention: " + err;
  }
  // heads
  {
    ParamStore p = fresh_params(false);
    RngStream hr(6, "head-init");
    init_projection_head(p, d, 7, hr);
    init_classifier_head(p, d, 3, hr);
    init_probe_head(p, d, 3, hr);
    const std::string err = fd_check_params(p, [&](ForwardCtx& ctx) {
      ag::Var y = ag::constant(ctx.graph, z);
      std::vector<ag::Var> terms{weighted_sum(projection_head(ctx, y)),
                                 weighted_sum(classifier_logits_2layer(ctx, y)),
                                 weighted_sum(probe_logits(ctx, y))};
      return ag::add_scalar_list(terms);
    });
    if (!err.empty()) return "heads: " + err;
  }
  // both losses through the full masked pipeline
  PretrainConfig pc;
  pc.model = m;
  pc.mask.start_prob = 0.3;
  pc.mask.min_span = 2;
  pc.mask.mask_type = MaskType::LearnableToken;
  pc.seed = 9;
  RngStream mask_rng(11, "mask");
  const MaskSet mask = sample_masks(s, pc.mask, mask_rng);
  Tensor target({s, 11});
  for (double& v : target.data) v = data.gaussian();
  for (const bool l1 : {false, true}) {
    PretrainConfig cfg = pc;
    cfg.loss_type = l1 ? LossType::L1 : LossType::MSE;
    cfg.model.learnable_mask_token = true;
    ParamStore p = fresh_params(true);
    RngStream hr(6, "head-init");
    init_projection_head(p, d, 11, hr);
    const std::string err = fd_check_params(p, [&](ForwardCtx& ctx) {
      RngStream noise(13, "masknoise");
      PretrainForward fwd = pretrain_forward(ctx, cfg, frames, mask, noise);
      return ag::masked_loss(fwd.predictions, target, mask, l1);
    });
    if (!err.empty()) return std::string(l1 ? "L1" : "MSE") + " loss: " + err;
  }
  // weighted cross-entropy through the classifier path
  {
    ParamStore p = fresh_params(false);
    RngStream hr(6, "head-init");
    init_classifier_head(p, d, 3, hr);
    const std::vector<int64_t> labels{0, 2, 1, 2};
    const std::vector<double> weights{0.2, 0.3, 0.5};
    const std::string err = fd_check_params(p, [&](ForwardCtx& ctx) {
      ag::Var logits = classifier_logits_2layer(ctx, ag::constant(ctx.graph, z));
      return ag::weighted_cross_entropy(logits, labels, weights);
    });
    if (!err.empty()) return "cross-entropy: " + err;
  }
  return "";
}

std::string c5_masking_distribution() {
  MaskConfig cfg;
  cfg.start_prob = 0.065;
  cfg.min_span = 5;
  RngStream rng(17, "mask");
  // start rate over 1e5 long sequences (forced-start fallback is
  // astronomically unlikely at S=1000, so every start is a Bernoulli draw)
  const int64_t seqs = 100000, s_long = 1000;
  int64_t starts = 0;
  for (int64_t i = 0; i < seqs; ++i) {
    const MaskSet m = sample_masks(s_long, cfg, rng);
    if (m.starts.empty()) return "sequence without a mask start";
    starts += static_cast<int64_t>(m.starts.size());
  }
  const double n = static_cast<double>(seqs * s_long);
  const double rate = static_cast<double>(starts) / n;
  const double sigma = std::sqrt(cfg.start_prob * (1.0 - cfg.start_prob) / n);
  if (std::abs(rate - cfg.start_prob) > 3.0 * sigma)
    return "start rate " + std::to_string(rate) + " outside 3 sigma of 0.065";
  // run lengths: every maximal run shorter than min_span must touch the end
  for (int64_t i = 0; i < 2000; ++i) {
    const int64_t s_short = 7 + static_cast<int64_t>(rng.uniform_int(60));
    MaskConfig dense = cfg;
    dense.start_prob = 0.25;
    const MaskSet m = sample_masks(s_short, dense, rng);
    if (m.starts.empty()) return "short sequence without a mask start";
    int64_t run = 0;
    for (int64_t t = 0; t < s_short; ++t) {
      if (m.masked[t]) {
        ++run;
      } else {
        if (run > 0 && run < dense.min_span) return "interior run shorter than min_span";
        run = 0;
      }
    }
    // a trailing short run is the boundary clamp and is allowed
  }
  return "";
}

std::string c6_masked_loss_contract() {
  MaskSet mask;
  mask.starts = {1};
  mask.masked = {false, true, true, false};
  Tensor pred({4, 2});
  Tensor target({4, 2});
  RngStream rng(23, "c6");
  for (double& v : pred.data) v = rng.gaussian();
  for (double& v : target.data) v = rng.gaussian();
  const double base_mse = masked_prediction_loss(pred, target, mask, LossType::MSE);
  const double base_l1 = masked_prediction_loss(pred, target, mask, LossType::L1);
  Tensor pred2 = pred, target2 = target;
  pred2.at2(0, 0) += 100.0;
  pred2.at2(3, 1) -= 42.0;
  target2.at2(0, 1) += 7.0;
  target2.at2(3, 0) += 3.0;
  if (masked_prediction_loss(pred2, target2, mask, LossType::MSE) != base_mse)
    return "MSE changed after unmasked perturbation";
  if (masked_prediction_loss(pred2, target2, mask, LossType::L1) != base_l1)
    return "L1 changed after unmasked perturbation";
  // hand case: masked residuals {1, -1, 2, 0}
  Tensor hp({3, 2}), ht({3, 2});
  hp.data = {9.0, 9.0, 1.0, 0.0, 2.5, 1.0};
  ht.data = {0.0, 0.0, 0.0, 1.0, 0.5, 1.0};
  MaskSet hm;
  hm.starts = {1};
  hm.masked = {false, true, true};
  if (masked_prediction_loss(hp, ht, hm, LossType::MSE) != 1.5) return "hand MSE != 1.5";
  if (masked_prediction_loss(hp, ht, hm, LossType::L1) != 1.0) return "hand L1 != 1.0";
  return "";
}

std::string c7_no_collapse() {
  const auto manifest = io::read_manifest(datasets().unlabeled_manifest);
  PretrainConfig cfg = preset_pretrain();
  const FramedDataset ds = load_framed_dataset(manifest, cfg.znormalize_sequences, cfg.target_len);
  for (uint64_t seed = 1; seed <= 10; ++seed) {
    PretrainConfig run = cfg;
    run.seed = seed;
    const PretrainResult result = pretrain(ds, run);
    if (result.collapse_ever) return "collapse fired at seed " + std::to_string(seed);
    for (const EpochStats& e : result.log)
      if (e.collapse_flag) return "collapse flag set at seed " + std::to_string(seed);
    const double var = mean_masked_output_variance(result, run, ds);
    if (var <= 0.1)
      return "masked output variance " + std::to_string(var) + " at seed " +
             std::to_string(seed);
  }
  return "";
}

std::string c8_pretraining_usefulness() {
  const auto manifest = io::read_manifest(datasets().labeled_manifest);
  PretrainConfig pre = preset_pretrain();
  pre.model.in_channels = 2;
  FinetuneConfig probe = preset_probe();
  const FramedDataset ds = load_framed_dataset(manifest, pre.znormalize_sequences, 0);
  const int64_t k = 4;

  double pretrained_sum = 0.0, random_sum = 0.0;
  ConfusionMatrix shuffled_agg(probe.num_classes);
  for (uint64_t seed = 1; seed <= 5; ++seed) {
    PretrainConfig run = pre;
    run.seed = seed;
    const PretrainResult result = pretrain(ds, run);
    FinetuneConfig fc = probe;
    fc.seed = seed;
    pretrained_sum += probe_all_folds(result.best_params, fc, ds, k).uar_v;

    RngStream init(seed, "init");
    const ParamStore random_backbone = init_backbone(fc.model, init);
    random_sum += probe_all_folds(random_backbone, fc, ds, k).uar_v;

    FramedDataset shuffled = ds;
    RngStream sh(seed, "shuffle");
    for (size_t i = shuffled.labels.size(); i > 1; --i)
      std::swap(shuffled.labels[i - 1], shuffled.labels[sh.uniform_int(i)]);
    shuffled_agg += probe_all_folds(random_backbone, fc, shuffled, k).cm;
  }
  const double pretrained = pretrained_sum / 5.0;
  const double random_init = random_sum / 5.0;
  if (pretrained < random_init + 0.05)
    return "UAR gap " + std::to_string(pretrained - random_init) + " (pretrained " +
           std::to_string(pretrained) + ", random " + std::to_string(random_init) + ") < 5pp";
  // shuffled labels: aggregate UAR within the 95% CI of chance 1/K
  const double chance = 1.0 / static_cast<double>(probe.num_classes);
  double se_sq = 0.0;
  for (int64_t c = 0; c < shuffled_agg.k; ++c) {
    int64_t row = 0;
    for (int64_t j = 0; j < shuffled_agg.k; ++j) row += shuffled_agg.at(c, j);
    if (row == 0) return "shuffled aggregate has an empty class";
    se_sq += chance * (1.0 - chance) / static_cast<double>(row);
  }
  const double se = std::sqrt(se_sq) / static_cast<double>(shuffled_agg.k);
  const double shuffled_uar = uar(shuffled_agg);
  if (std::abs(shuffled_uar - chance) > 1.96 * se)
    return "shuffled-label UAR " + std::to_string(shuffled_uar) + " outside 95% CI of chance";
  return "";
}

std::string c9_ablation_toggles() {
  const fs::path dir = work_dir() / "ablations";
  fs::create_directories(dir);
  const std::string manifest = datasets().labeled_manifest.string();

  nlohmann::json base = load_json(preset_dir() / "pretrain-tiny.json");
  base["epochs"] = 2;
  base["model"]["in_channels"] = 2;
  nlohmann::json probe_cfg = load_json(preset_dir() / "probe-tiny.json");
  probe_cfg["stage1_epochs"] = 4;
  probe_cfg["model"]["in_channels"] = 2;

  struct Toggle {
    std::string name;
    std::function<void(nlohmann::json&)> apply;
  };
  const std::vector<Toggle> toggles{
      {"mae", [](nlohmann::json& j) { j["objective"] = "mae"; }},
      {"inputs", [](nlohmann::json& j) { j["mask"]["location"] = "inputs"; }},
      {"mask-ones", [](nlohmann::json& j) { j["mask"]["mask_type"] = "ones"; }},
      {"mask-zeros", [](nlohmann::json& j) { j["mask"]["mask_type"] = "zeros"; }},
      {"mask-noise", [](nlohmann::json& j) { j["mask"]["mask_type"] = "gaussian_noise"; }},
      {"mask-token", [](nlohmann::json& j) {
         j["mask"]["mask_type"] = "learnable_token";
         j["model"]["learnable_mask_token"] = true;
       }},
      {"fn-moments",
       [](nlohmann::json& j) { j["functionals"]["ids"] = {"mean", "variance", "skewness", "kurtosis"}; }},
      {"fn-zcr", [](nlohmann::json& j) { j["functionals"]["ids"] = {"zcr", "min", "max"}; }},
  };

  for (const Toggle& t : toggles) {
    const fs::path tdir = dir / t.name;
    fs::create_directories(tdir);
    nlohmann::json cfg = base;
    t.apply(cfg);
    dump_json(tdir / "pretrain.json", cfg);
    dump_json(tdir / "probe.json", probe_cfg);
    if (run_cli("pretrain --config " + (tdir / "pretrain.json").string() + " --manifest " +
                manifest + " --out " + (tdir / "pre").string()) != 0)
      return t.name + ": pretrain failed";
    const io::Checkpoint ckpt = io::read_checkpoint(tdir / "pre" / "best.pfck");
    const PretrainConfig parsed = config::pretrain_from_json(cfg);
    if (ckpt.config_digest != io::config_digest(config::to_json(parsed)))
      return t.name + ": checkpoint digest does not match the config digest";
    if (run_cli("probe --config " + (tdir / "probe.json").string() + " --manifest " + manifest +
                " --checkpoint " + (tdir / "pre" / "best.pfck").string() + " --out " +
                (tdir / "probe").string() + " --folds 2") != 0)
      return t.name + ": probe failed";
    if (!fs::exists(tdir / "probe" / "metrics.csv")) return t.name + ": no probe metrics";
  }
  return "";
}

std::string c10_metric_arithmetic() {
  ConfusionMatrix diag(3);
  diag.record(0, 0);
  diag.record(1, 1);
  diag.record(1, 1);
  diag.record(2, 2);
  if (uar(diag) != 1.0 || uaf1(diag) != 1.0) return "diagonal matrix is not perfect";
  ConfusionMatrix cm(2);
  for (int i = 0; i < 8; ++i) cm.record(0, 0);
  for (int i = 0; i < 2; ++i) cm.record(0, 1);
  for (int i = 0; i < 4; ++i) cm.record(1, 0);
  for (int i = 0; i < 6; ++i) cm.record(1, 1);
  if (std::abs(uar(cm) - 0.7) > 1e-15) return "UAR([[8,2],[4,6]]) != 0.7";

  std::vector<std::string> groups;
  for (int g = 0; g < 41; ++g)
    for (int r = 0; r < 3; ++r) groups.push_back("g" + std::to_string(g));
  const auto folds = grouped_kfold(groups, 10, 29);
  if (folds.size() != 10) return "expected 10 folds";
  std::set<std::string> tested;
  for (const Fold& f : folds) {
    std::set<std::string> test_groups, other;
    for (size_t i : f.test) test_groups.insert(groups[i]);
    for (size_t i : f.train) other.insert(groups[i]);
    for (size_t i : f.val) other.insert(groups[i]);
    if (test_groups.size() != 4 && test_groups.size() != 5)
      return "fold test group count " + std::to_string(test_groups.size());
    for (const std::string& g : test_groups) {
      if (other.count(g)) return "group leakage: " + g;
      if (!tested.insert(g).second) return "group tested twice: " + g;
    }
  }
  if (tested.size() != 41) return "folds do not cover all groups";
  return "";
}

std::string c11_determinism() {
  const std::string manifest = datasets().labeled_manifest.string();
  const fs::path dir = work_dir() / "determinism";
  fs::create_directories(dir);
  nlohmann::json cfg = load_json(preset_dir() / "pretrain-tiny.json");
  cfg["epochs"] = 3;
  cfg["model"]["in_channels"] = 2;
  dump_json(dir / "pretrain.json", cfg);
  nlohmann::json probe_cfg = load_json(preset_dir() / "probe-tiny.json");
  probe_cfg["model"]["in_channels"] = 2;
  dump_json(dir / "probe.json", probe_cfg);

  for (const char* run : {"a", "b"}) {
    if (run_cli("pretrain --config " + (dir / "pretrain.json").string() + " --manifest " +
                manifest + " --out " + (dir / ("pre-" + std::string(run))).string()) != 0)
      return "pretrain run failed";
  }
  for (const char* file : {"best.pfck", "log.csv", "targets.norm.json"}) {
    if (read_bytes(dir / "pre-a" / file) != read_bytes(dir / "pre-b" / file))
      return std::string(file) + " differs between identical pretrain runs";
  }
  for (const char* run : {"a", "b"}) {
    if (run_cli("probe --config " + (dir / "probe.json").string() + " --manifest " + manifest +
                " --checkpoint " + (dir / "pre-a" / "best.pfck").string() + " --out " +
                (dir / ("probe-" + std::string(run))).string() + " --folds 2") != 0)
      return "probe run failed";
  }
  for (const char* file : {"metrics.csv", "aggregate.csv", "fold_0.pfck", "fold_1.pfck"}) {
    if (read_bytes(dir / "probe-a" / file) != read_bytes(dir / "probe-b" / file))
      return std::string(file) + " differs between identical probe runs";
  }
  return "";
}

}  // namespace

int main() {
  run_criterion(1, "functional oracle suite (1000 frames, 1e-9 rel)", 10.0, c1_functional_oracles);
  run_criterion(2, "framing law (3000 samples @ 400/200 -> 14 frames)", 5.0, c2_framing_law);
  run_criterion(3, "encoder shape chains (480->96/24/12/6/pool, 400->80/16/5/pool)", 30.0,
                c3_encoder_shapes);
  run_criterion(4, "finite-difference gradients (rel 1e-4)", 120.0, c4_gradients);
  run_criterion(5, "masking distribution (rate within 3 sigma, spans >= min)", 30.0,
                c5_masking_distribution);
  run_criterion(6, "masked-only loss contract (bit-identical, hand cases)", 5.0,
                c6_masked_loss_contract);
  run_criterion(7, "no representation collapse over 10 seeded runs", 900.0, c7_no_collapse);
  run_criterion(8, "pretrained probe beats random init by >= 5pp UAR", 1800.0,
                c8_pretraining_usefulness);
  run_criterion(9, "ablation toggles run end-to-end with config digests", 1800.0,
                c9_ablation_toggles);
  run_criterion(10, "metric arithmetic and grouped 10-fold over 41 groups", 5.0,
                c10_metric_arithmetic);
  run_criterion(11, "byte-identical reruns (checkpoints and logs)", 600.0, c11_determinism);
  std::cout << (failures == 0 ? "ALL CRITERIA PASSED" : "FAILURES: " + std::to_string(failures))
            << std::endl;
  return failures;
}
