#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "pfml/functionals.hpp"
#include "pfml/graph.hpp"
#include "pfml/io.hpp"
#include "pfml/masking.hpp"
#include "pfml/nn.hpp"
#include "pfml/optim.hpp"
#include "pfml/rng.hpp"
#include "pfml/signal.hpp"

namespace pfml {

enum class Objective : uint32_t { PFML = 0, MAE = 1 };
enum class LossType : uint32_t { MSE = 0, L1 = 1 };

struct PretrainConfig {
  Objective objective = Objective::PFML;
  LossType loss_type = LossType::MSE;
  MaskConfig mask;
  FunctionalSet functionals = FunctionalSet::all();
  int64_t epochs = 30;
  int64_t batch_size = 8;
  double lr = 1e-3;
  double split_ratio = 0.8;  // train fraction, split by sequence
  uint64_t seed = 1;
  bool znormalize_sequences = true;
  int64_t target_len = 0;  // 0 = keep natural length
  int64_t patience = 5;
  double lr_floor_div = 64.0;  // floor = lr / div
  ModelConfig model;

  void validate() const {
    if (split_ratio <= 0.0 || split_ratio >= 1.0)
      throw std::invalid_argument("pretrain: split_ratio must be in (0,1)");
    if (epochs < 1 || batch_size < 1) throw std::invalid_argument("pretrain: bad epochs/batch");
    mask.validate();
    functionals.validate();
    model.validate();
    if (objective == Objective::PFML && functionals.ids.empty())
      throw std::invalid_argument("pretrain: PFML requires a functional set");
  }
};

// In-memory framed dataset: one (S, C, N) tensor per sequence.
struct FramedDataset {
  std::vector<Tensor> sequences;
  std::vector<std::optional<int64_t>> labels;
  std::vector<std::string> groups;
  int64_t channels = 1;
  int64_t frame_len = 0;
  FrameConfig frame_config;
  int64_t num_classes = 0;

  size_t size() const { return sequences.size(); }
};

inline Tensor frames_to_tensor(const FrameSequence& seq) {
  const int64_t s = seq.num_frames();
  const int64_t c = seq.channels();
  const int64_t n = seq.frame_config.frame_len;
  Tensor t({s, c, n});
  for (int64_t i = 0; i < s; ++i)
    for (int64_t ch = 0; ch < c; ++ch)
      for (int64_t k = 0; k < n; ++k) t.at3(i, ch, k) = seq.frames[i][ch][k];
  return t;
}

inline FramedDataset load_framed_dataset(const io::DatasetManifest& manifest, bool znorm,
                                         int64_t target_len) {
  FramedDataset ds;
  ds.channels = manifest.channels;
  ds.frame_config = manifest.frame_config;
  ds.frame_len = manifest.frame_config.frame_len;
  ds.num_classes = manifest.num_classes;
  for (const auto& entry : manifest.entries) {
    Signal sig;
    try {
      sig = io::read_sequence(manifest.resolve(entry));
    } catch (const std::exception& e) {
      throw std::runtime_error("sequence '" + entry.path + "': " + e.what());
    }
    if (sig.channels != manifest.channels)
      throw std::runtime_error("sequence '" + entry.path + "': channel count mismatch");
    if (znorm) sig = znormalize(sig);
    if (target_len > 0) sig = pad_or_truncate(sig, target_len);
    ds.sequences.push_back(frames_to_tensor(frame_signal(sig, manifest.frame_config)));
    ds.labels.push_back(entry.label);
    ds.groups.push_back(entry.group.value_or(entry.path));
  }
  return ds;
}

// Functional targets per sequence: (S, m*C) rows in FunctionalVector
// layout, z-scored over the whole pre-training set.
inline std::vector<Tensor> pfml_targets(const FramedDataset& ds, const FunctionalSet& set,
                                        NormalizationStats* stats_out = nullptr) {
  std::vector<FunctionalVector> all;
  std::vector<std::vector<FunctionalVector>> per_seq(ds.size());
  for (size_t q = 0; q < ds.size(); ++q) {
    const Tensor& t = ds.sequences[q];
    const int64_t s = t.dim(0), c = t.dim(1), n = t.dim(2);
    per_seq[q].reserve(s);
    std::vector<std::vector<double>> frame(c, std::vector<double>(n));
    for (int64_t i = 0; i < s; ++i) {
      for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t k = 0; k < n; ++k) frame[ch][k] = t.at3(i, ch, k);
      per_seq[q].push_back(compute_functionals(frame, set));
      all.push_back(per_seq[q].back());
    }
  }
  const NormalizationStats stats = fit_normalization(all);
  if (stats_out != nullptr) *stats_out = stats;
  std::vector<Tensor> targets;
  targets.reserve(ds.size());
  const int64_t dim = static_cast<int64_t>(stats.m * stats.channels);
  for (size_t q = 0; q < ds.size(); ++q) {
    Tensor t({static_cast<int64_t>(per_seq[q].size()), dim});
    for (size_t i = 0; i < per_seq[q].size(); ++i) {
      const FunctionalVector norm = apply_normalization(per_seq[q][i], stats);
      for (int64_t j = 0; j < dim; ++j) t.at2(static_cast<int64_t>(i), j) = norm.values[j];
    }
    targets.push_back(std::move(t));
  }
  return targets;
}

// MAE targets: raw frames flattened to (S, C*N).
inline std::vector<Tensor> mae_targets(const FramedDataset& ds) {
  std::vector<Tensor> targets;
  targets.reserve(ds.size());
  for (const Tensor& t : ds.sequences) {
    Tensor flat({t.dim(0), t.dim(1) * t.dim(2)}, t.data);
    targets.push_back(std::move(flat));
  }
  return targets;
}

inline Tensor unflatten_mae_target(const Tensor& flat, int64_t channels, int64_t frame_len) {
  return Tensor({flat.dim(0), channels, frame_len}, flat.data);
}

// Mean over coordinates of the across-frame (population) variance of an
// (S, d) tensor. This is the collapse-monitor variance estimator.
inline double across_frame_variance(const Tensor& rows) {
  const int64_t s = rows.dim(0), d = rows.dim(1);
  if (s < 1 || d < 1) return 0.0;
  double acc = 0.0;
  for (int64_t j = 0; j < d; ++j) {
    double mean = 0.0;
    for (int64_t i = 0; i < s; ++i) mean += rows.at2(i, j);
    mean /= static_cast<double>(s);
    double var = 0.0;
    for (int64_t i = 0; i < s; ++i) {
      const double dv = rows.at2(i, j) - mean;
      var += dv * dv;
    }
    acc += var / static_cast<double>(s);
  }
  return acc / static_cast<double>(d);
}

inline double masked_rows_variance(const Tensor& rows, const MaskSet& mask) {
  std::vector<int64_t> idx;
  for (size_t i = 0; i < mask.masked.size(); ++i)
    if (mask.masked[i]) idx.push_back(static_cast<int64_t>(i));
  if (idx.size() < 2) return 0.0;
  Tensor sub({static_cast<int64_t>(idx.size()), rows.dim(1)});
  for (size_t i = 0; i < idx.size(); ++i)
    for (int64_t j = 0; j < rows.dim(1); ++j)
      sub.at2(static_cast<int64_t>(i), j) = rows.at2(idx[i], j);
  return across_frame_variance(sub);
}

// Collapse criterion: variance of embeddings or outputs below the
// threshold for `window` consecutive epochs while the validation loss is
// decreasing throughout. Diagnostic only for PFML/MAE.
struct CollapseMonitor {
  double threshold = 0.01;
  int64_t window = 10;

  int64_t run_length = 0;
  double prev_val_loss = std::numeric_limits<double>::infinity();

  // Returns true when the criterion fires at this epoch.
  bool observe(double emb_var, double out_var, double val_loss) {
    const bool low_var = emb_var < threshold || out_var < threshold;
    const bool decreasing = val_loss < prev_val_loss;
    prev_val_loss = val_loss;
    if (low_var && decreasing)
      ++run_length;
    else
      run_length = 0;
    return run_length >= window;
  }
};

// Masked prediction loss on plain tensors (oracle-facing variant of the
// graph op; the graph op is what training uses).
inline double masked_prediction_loss(const Tensor& pred, const Tensor& target,
                                     const MaskSet& mask, LossType type) {
  if (!pred.same_shape(target)) throw std::invalid_argument("loss: shape mismatch");
  const int64_t s = pred.dim(0), d = pred.dim(1);
  const int64_t m_count = mask.masked_count();
  if (m_count == 0) throw std::invalid_argument("loss: zero masked frames");
  double acc = 0.0;
  for (int64_t i = 0; i < s; ++i) {
    if (!mask.masked[i]) continue;
    for (int64_t j = 0; j < d; ++j) {
      const double r = pred.at2(i, j) - target.at2(i, j);
      acc += type == LossType::L1 ? std::abs(r) : r * r;
    }
  }
  return acc / static_cast<double>(m_count * d);
}

// One masked forward pass shared by training, validation and the
// acceptance probes. Returns embeddings (pre-mask) and predictions.
struct PretrainForward {
  ag::Var embeddings;
  ag::Var predictions;
};

inline PretrainForward pretrain_forward(ForwardCtx& ctx, const PretrainConfig& cfg,
                                        const Tensor& frames, const MaskSet& mask,
                                        RngStream& noise_rng) {
  const int64_t s = frames.dim(0);
  const int64_t d = cfg.model.transformer.dim;
  Tensor input = frames;
  if (cfg.mask.location == MaskLocation::Inputs) {
    if (cfg.mask.mask_type == MaskType::LearnableToken)
      throw std::invalid_argument("input masking does not support a learnable token");
    std::vector<double> flat = input.data;
    apply_mask(flat, input.dim(1) * input.dim(2), mask, cfg.mask.mask_type, noise_rng);
    input.data = std::move(flat);
  }
  ag::Var x = ag::constant(ctx.graph, input);
  ag::Var z = encoder_forward(ctx, x, cfg.model);
  ag::Var z_masked = z;
  if (cfg.mask.location == MaskLocation::Embeddings) {
    if (cfg.mask.mask_type == MaskType::LearnableToken) {
      z_masked = ag::mask_rows_token(z, mask, ctx.param("mask.token"));
    } else {
      Tensor repl({s, d});
      for (int64_t i = 0; i < s; ++i)
        for (int64_t j = 0; j < d; ++j) {
          switch (cfg.mask.mask_type) {
            case MaskType::Ones: repl.at2(i, j) = 1.0; break;
            case MaskType::Zeros: repl.at2(i, j) = 0.0; break;
            case MaskType::GaussianNoise:
              repl.at2(i, j) = mask.masked[i] ? noise_rng.gaussian() : 0.0;
              break;
            case MaskType::LearnableToken: break;  // handled above
          }
        }
      z_masked = ag::mask_rows_constant(z, mask, repl);
    }
  }
  ag::Var h = positional_encode(ctx, z_masked, cfg.model);
  ag::Var y = transformer_forward(ctx, h, cfg.model);
  ag::Var pred = projection_head(ctx, y);
  return PretrainForward{z, pred};
}

struct EpochStats {
  int64_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double emb_var = 0.0;
  double out_var = 0.0;
  double lr = 0.0;
  bool collapse_flag = false;
};

struct PretrainResult {
  ParamStore best_params;
  int64_t best_epoch = -1;
  double best_val_loss = std::numeric_limits<double>::infinity();
  std::vector<EpochStats> log;
  bool collapse_ever = false;
  NormalizationStats norm_stats;  // PFML only
};

// Seeded 80:20 split by sequence index.
inline void split_sequences(size_t count, double train_ratio, uint64_t seed,
                            std::vector<size_t>& train, std::vector<size_t>& val) {
  std::vector<size_t> order(count);
  std::iota(order.begin(), order.end(), size_t{0});
  RngStream rng(seed, "split");
  for (size_t i = count; i > 1; --i) std::swap(order[i - 1], order[rng.uniform_int(i)]);
  size_t n_train = static_cast<size_t>(std::floor(train_ratio * static_cast<double>(count)));
  n_train = std::clamp<size_t>(n_train, 1, count - 1);
  train.assign(order.begin(), order.begin() + n_train);
  val.assign(order.begin() + n_train, order.end());
}

inline PretrainResult pretrain(const FramedDataset& ds, const PretrainConfig& cfg) {
  cfg.validate();
  if (ds.size() < 2) throw std::invalid_argument("pretrain: need at least 2 sequences");
  if (ds.channels != cfg.model.in_channels || ds.frame_len != cfg.model.frame_len)
    throw std::invalid_argument("pretrain: dataset shape does not match model config");

  PretrainResult result;
  std::vector<Tensor> targets = cfg.objective == Objective::PFML
                                    ? pfml_targets(ds, cfg.functionals, &result.norm_stats)
                                    : mae_targets(ds);
  const int64_t target_dim = targets[0].dim(1);

  RngStream init_rng(cfg.seed, "init");
  ModelConfig model_cfg = cfg.model;
  model_cfg.learnable_mask_token = cfg.mask.mask_type == MaskType::LearnableToken &&
                                   cfg.mask.location == MaskLocation::Embeddings;
  ParamStore params = init_backbone(model_cfg, init_rng);
  init_projection_head(params, model_cfg.transformer.dim, target_dim, init_rng);

  std::vector<size_t> train_idx, val_idx;
  split_sequences(ds.size(), cfg.split_ratio, cfg.seed, train_idx, val_idx);

  Optimizer opt(OptimizerKind::RAdam, AdamHyper{cfg.lr});
  PlateauSchedule schedule(cfg.lr, cfg.patience, cfg.lr / cfg.lr_floor_div);
  CollapseMonitor monitor;

  const bool l1 = cfg.loss_type == LossType::L1;
  PretrainConfig fwd_cfg = cfg;
  fwd_cfg.model = model_cfg;

  for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    // shuffled training order, deterministic per (seed, epoch)
    std::vector<size_t> order = train_idx;
    RngStream shuffle_rng(cfg.seed, "shuffle", static_cast<uint64_t>(epoch));
    for (size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[shuffle_rng.uniform_int(i)]);

    double train_loss_sum = 0.0;
    double emb_var_sum = 0.0, out_var_sum = 0.0;
    int64_t var_batches = 0;

    size_t pos = 0;
    while (pos < order.size()) {
      const size_t batch_end = std::min(pos + static_cast<size_t>(cfg.batch_size), order.size());
      std::map<std::string, Tensor> acc_grads;
      const double inv_batch = 1.0 / static_cast<double>(batch_end - pos);
      for (size_t bi = pos; bi < batch_end; ++bi) {
        const size_t q = order[bi];
        const Tensor& frames = ds.sequences[q];
        RngStream mask_rng(cfg.seed, "mask",
                           static_cast<uint64_t>(epoch) * 1000003ULL + q);
        RngStream noise_rng(cfg.seed, "masknoise",
                            static_cast<uint64_t>(epoch) * 1000003ULL + q);
        RngStream drop_rng(cfg.seed, "dropout",
                           static_cast<uint64_t>(epoch) * 1000003ULL + q);
        MaskSet mask = sample_masks(frames.dim(0), cfg.mask, mask_rng);

        ForwardCtx ctx(params);
        ctx.training = true;
        ctx.dropout_rng = &drop_rng;
        PretrainForward fwd = pretrain_forward(ctx, fwd_cfg, frames, mask, noise_rng);
        ag::Var loss = ag::masked_loss(fwd.predictions, targets[q], mask, l1);
        if (!std::isfinite(loss.val()[0])) throw std::runtime_error("pretrain: non-finite loss");
        train_loss_sum += loss.val()[0];
        emb_var_sum += across_frame_variance(fwd.embeddings.val());
        out_var_sum += across_frame_variance(fwd.predictions.val());
        ++var_batches;
        ctx.graph.backward(loss.id);
        for (auto& [name, grad] : ctx.grads()) {
          auto it = acc_grads.find(name);
          if (it == acc_grads.end()) {
            Tensor g = grad;
            for (double& v : g.data) v *= inv_batch;
            acc_grads.emplace(name, std::move(g));
          } else {
            for (int64_t i = 0; i < grad.numel(); ++i) it->second[i] += grad[i] * inv_batch;
          }
        }
      }
      opt.step(params, acc_grads);
      pos = batch_end;
    }

    // validation: no dropout, masks from the validation stream
    double val_loss_sum = 0.0;
    for (size_t q : val_idx) {
      const Tensor& frames = ds.sequences[q];
      RngStream mask_rng(cfg.seed, "valmask",
                         static_cast<uint64_t>(epoch) * 1000003ULL + q);
      RngStream noise_rng(cfg.seed, "valmasknoise",
                          static_cast<uint64_t>(epoch) * 1000003ULL + q);
      MaskSet mask = sample_masks(frames.dim(0), cfg.mask, mask_rng);
      ForwardCtx ctx(params);
      ctx.training = false;
      PretrainForward fwd = pretrain_forward(ctx, fwd_cfg, frames, mask, noise_rng);
      val_loss_sum += masked_prediction_loss(fwd.predictions.val(), targets[q], mask,
                                             cfg.loss_type);
    }

    EpochStats st;
    st.epoch = epoch;
    st.train_loss = train_loss_sum / static_cast<double>(order.size());
    st.val_loss = val_loss_sum / static_cast<double>(val_idx.size());
    st.emb_var = emb_var_sum / static_cast<double>(var_batches);
    st.out_var = out_var_sum / static_cast<double>(var_batches);
    st.collapse_flag = monitor.observe(st.emb_var, st.out_var, st.val_loss);
    result.collapse_ever = result.collapse_ever || st.collapse_flag;
    st.lr = schedule.lr();
    opt.set_lr(schedule.observe(st.val_loss));
    result.log.push_back(st);

    if (st.val_loss < result.best_val_loss) {
      result.best_val_loss = st.val_loss;
      result.best_epoch = epoch;
      result.best_params = params;
    }
  }
  return result;
}

}  // namespace pfml
