#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "pfml/graph.hpp"
#include "pfml/nn.hpp"
#include "pfml/optim.hpp"
#include "pfml/pretrain.hpp"
#include "pfml/rng.hpp"

namespace pfml {

// ---- metrics ----

struct ConfusionMatrix {
  int64_t k = 0;
  std::vector<int64_t> counts;  // k*k, rows = true class

  explicit ConfusionMatrix(int64_t num_classes = 0)
      : k(num_classes), counts(static_cast<size_t>(num_classes * num_classes), 0) {}

  int64_t& at(int64_t true_c, int64_t pred_c) { return counts[true_c * k + pred_c]; }
  int64_t at(int64_t true_c, int64_t pred_c) const { return counts[true_c * k + pred_c]; }

  void record(int64_t true_c, int64_t pred_c) {
    if (true_c < 0 || true_c >= k || pred_c < 0 || pred_c >= k)
      throw std::invalid_argument("confusion matrix: class out of range");
    ++at(true_c, pred_c);
  }

  int64_t total() const { return std::accumulate(counts.begin(), counts.end(), int64_t{0}); }

  ConfusionMatrix& operator+=(const ConfusionMatrix& o) {
    if (k != o.k) throw std::invalid_argument("confusion matrix: size mismatch");
    for (size_t i = 0; i < counts.size(); ++i) counts[i] += o.counts[i];
    return *this;
  }
};

// Unweighted average recall: mean over classes of per-class recall.
// Classes with no true samples count recall 0.
inline double uar(const ConfusionMatrix& cm) {
  if (cm.k == 0 || cm.total() == 0) throw std::invalid_argument("uar: empty confusion matrix");
  double acc = 0.0;
  for (int64_t c = 0; c < cm.k; ++c) {
    int64_t row = 0;
    for (int64_t j = 0; j < cm.k; ++j) row += cm.at(c, j);
    acc += row > 0 ? static_cast<double>(cm.at(c, c)) / static_cast<double>(row) : 0.0;
  }
  return acc / static_cast<double>(cm.k);
}

// Unweighted average F1; per-class F1 is 0 when its denominator is 0.
inline double uaf1(const ConfusionMatrix& cm) {
  if (cm.k == 0 || cm.total() == 0) throw std::invalid_argument("uaf1: empty confusion matrix");
  double acc = 0.0;
  for (int64_t c = 0; c < cm.k; ++c) {
    int64_t row = 0, col = 0;
    for (int64_t j = 0; j < cm.k; ++j) {
      row += cm.at(c, j);
      col += cm.at(j, c);
    }
    const double tp = static_cast<double>(cm.at(c, c));
    const double recall = row > 0 ? tp / static_cast<double>(row) : 0.0;
    const double precision = col > 0 ? tp / static_cast<double>(col) : 0.0;
    acc += (precision + recall) > 0.0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
  }
  return acc / static_cast<double>(cm.k);
}

inline ConfusionMatrix aggregate_eval(const std::vector<ConfusionMatrix>& per_fold) {
  if (per_fold.empty()) throw std::invalid_argument("aggregate: no folds");
  ConfusionMatrix out(per_fold[0].k);
  for (const auto& cm : per_fold) out += cm;
  return out;
}

// ---- grouped k-fold ----

struct Fold {
  std::vector<size_t> train;  // item indices
  std::vector<size_t> val;
  std::vector<size_t> test;
};

// Each group lands in exactly one test fold; the remaining groups split
// 80:20 by group into train/val per fold.
inline std::vector<Fold> grouped_kfold(const std::vector<std::string>& groups, int64_t k,
                                       uint64_t seed, double train_ratio = 0.8) {
  std::vector<std::string> unique;
  {
    std::set<std::string> seen;
    for (const auto& g : groups)
      if (seen.insert(g).second) unique.push_back(g);
  }
  if (static_cast<int64_t>(unique.size()) < k)
    throw std::invalid_argument("grouped_kfold: fewer groups than folds");
  RngStream rng(seed, "kfold");
  for (size_t i = unique.size(); i > 1; --i) std::swap(unique[i - 1], unique[rng.uniform_int(i)]);

  // distribute groups round-robin so fold sizes differ by at most 1
  std::vector<std::vector<std::string>> fold_groups(k);
  for (size_t i = 0; i < unique.size(); ++i) fold_groups[i % k].push_back(unique[i]);

  std::map<std::string, std::vector<size_t>> by_group;
  for (size_t i = 0; i < groups.size(); ++i) by_group[groups[i]].push_back(i);

  std::vector<Fold> folds(k);
  for (int64_t f = 0; f < k; ++f) {
    std::set<std::string> test_set(fold_groups[f].begin(), fold_groups[f].end());
    std::vector<std::string> rest;
    for (const auto& g : unique)
      if (!test_set.count(g)) rest.push_back(g);
    RngStream fold_rng(seed, "kfold-split", static_cast<uint64_t>(f));
    for (size_t i = rest.size(); i > 1; --i)
      std::swap(rest[i - 1], rest[fold_rng.uniform_int(i)]);
    size_t n_train = static_cast<size_t>(std::floor(train_ratio * static_cast<double>(rest.size())));
    n_train = std::clamp<size_t>(n_train, 1, rest.size() - 1);
    for (size_t i = 0; i < rest.size(); ++i) {
      const auto& items = by_group[rest[i]];
      auto& dst = i < n_train ? folds[f].train : folds[f].val;
      dst.insert(dst.end(), items.begin(), items.end());
    }
    for (const auto& g : fold_groups[f]) {
      const auto& items = by_group[g];
      folds[f].test.insert(folds[f].test.end(), items.begin(), items.end());
    }
  }
  return folds;
}

// ---- class weights / channel dropout ----

// Inverse-frequency class weights. A class with zero count would get an
// infinite weight, so that is an error.
inline std::vector<double> inverse_frequency_weights(const std::vector<int64_t>& class_counts) {
  std::vector<double> w(class_counts.size());
  for (size_t i = 0; i < class_counts.size(); ++i) {
    if (class_counts[i] <= 0)
      throw std::invalid_argument("class weights: zero-count class " + std::to_string(i));
    w[i] = 1.0 / static_cast<double>(class_counts[i]);
  }
  return w;
}

// Zeroes each sensor's channel group independently with probability p.
// channels_per_sensor partitions the channel axis into sensors.
inline Tensor channel_dropout(const Tensor& frames, double p, int64_t channels_per_sensor,
                              RngStream& rng) {
  if (frames.rank() != 3) throw std::invalid_argument("channel_dropout: rank-3 frames");
  const int64_t c = frames.dim(1);
  if (channels_per_sensor < 1 || c % channels_per_sensor != 0)
    throw std::invalid_argument("channel_dropout: channel grouping does not divide channels");
  Tensor out = frames;
  const int64_t sensors = c / channels_per_sensor;
  for (int64_t sn = 0; sn < sensors; ++sn) {
    if (!rng.bernoulli(p)) continue;
    for (int64_t ch = sn * channels_per_sensor; ch < (sn + 1) * channels_per_sensor; ++ch)
      for (int64_t i = 0; i < out.dim(0); ++i)
        for (int64_t k = 0; k < out.dim(2); ++k) out.at3(i, ch, k) = 0.0;
  }
  return out;
}

// ---- classification forward ----

enum class HeadKind { TwoLayer, Probe };

// frames -> backbone -> mean-pooled (sequence label) or per-frame logits.
inline ag::Var classifier_forward(ForwardCtx& ctx, const ModelConfig& model, const Tensor& frames,
                                  bool pooled, HeadKind head) {
  ag::Var x = ag::constant(ctx.graph, frames);
  ag::Var z = encoder_forward(ctx, x, model);
  ag::Var h = positional_encode(ctx, z, model);
  ag::Var y = transformer_forward(ctx, h, model);
  if (pooled) y = ag::mean_rows(y);
  return head == HeadKind::TwoLayer ? classifier_logits_2layer(ctx, y) : probe_logits(ctx, y);
}

inline std::vector<int64_t> predict_labels(const Tensor& logits) {
  std::vector<int64_t> out(logits.dim(0));
  for (int64_t i = 0; i < logits.dim(0); ++i) {
    int64_t best = 0;
    for (int64_t j = 1; j < logits.dim(1); ++j)
      if (logits.at2(i, j) > logits.at2(i, best)) best = j;
    out[i] = best;
  }
  return out;
}

// ---- fine-tuning ----

enum class SelectionMetric { UAR, UAF1 };

struct FinetuneConfig {
  int64_t num_classes = 2;
  int64_t stage1_epochs = 15;
  int64_t stage2_epochs = 15;
  int64_t batch_size = 8;
  double lr = 1e-4;
  int64_t warmup_epochs = 20;
  int64_t patience = 5;
  double lr_floor_div = 64.0;
  uint64_t seed = 1;
  bool pooled = true;  // sequence-level classification
  double sensor_dropout = 0.0;
  int64_t channels_per_sensor = 1;
  SelectionMetric metric = SelectionMetric::UAF1;
  ModelConfig model;
};

struct EvalOutcome {
  ConfusionMatrix cm;
  double uar_v = 0.0;
  double uaf1_v = 0.0;
};

namespace detail {

inline std::vector<int64_t> dataset_labels(const FramedDataset& ds,
                                           const std::vector<size_t>& idx) {
  std::vector<int64_t> out;
  for (size_t q : idx) {
    if (!ds.labels[q]) throw std::invalid_argument("fine-tune: sequence without label");
    out.push_back(*ds.labels[q]);
  }
  return out;
}

inline std::vector<int64_t> class_counts(const std::vector<int64_t>& labels, int64_t k) {
  std::vector<int64_t> counts(k, 0);
  for (int64_t l : labels) {
    if (l < 0 || l >= k) throw std::invalid_argument("fine-tune: label out of range");
    ++counts[l];
  }
  return counts;
}

inline EvalOutcome evaluate(ParamStore& params, const FinetuneConfig& cfg,
                            const FramedDataset& ds, const std::vector<size_t>& idx,
                            HeadKind head) {
  ConfusionMatrix cm(cfg.num_classes);
  for (size_t q : idx) {
    ForwardCtx ctx(params);
    ctx.training = false;
    ag::Var logits = classifier_forward(ctx, cfg.model, ds.sequences[q], cfg.pooled, head);
    const auto pred = predict_labels(logits.val());
    if (cfg.pooled) {
      cm.record(*ds.labels[q], pred[0]);
    } else {
      for (int64_t p : pred) cm.record(*ds.labels[q], p);
    }
  }
  EvalOutcome out{cm, uar(cm), uaf1(cm)};
  return out;
}

inline double metric_value(const EvalOutcome& e, SelectionMetric m) {
  return m == SelectionMetric::UAR ? e.uar_v : e.uaf1_v;
}

// One supervised training stage: train `trainable` parameters with Adam
// and weighted CE, keep the epoch whose validation metric is best
// (ties -> earliest epoch).
inline ParamStore train_stage(ParamStore params, const FinetuneConfig& cfg,
                              const FramedDataset& ds, const std::vector<size_t>& train_idx,
                              const std::vector<size_t>& val_idx, HeadKind head,
                              const std::map<std::string, bool>& trainable, int64_t epochs,
                              bool warmup, const std::string& stage_tag) {
  const auto labels = dataset_labels(ds, train_idx);
  const auto counts = class_counts(labels, cfg.num_classes);
  const auto weights = inverse_frequency_weights(counts);

  Optimizer opt(OptimizerKind::Adam, AdamHyper{cfg.lr});
  WarmupPlateauSchedule schedule(cfg.lr, warmup ? cfg.warmup_epochs : 0, cfg.patience,
                                 cfg.lr / cfg.lr_floor_div);
  ParamStore best = params;
  double best_metric = -1.0;
  double prev_val_loss = std::numeric_limits<double>::infinity();
  bool have_val_loss = false;

  for (int64_t epoch = 0; epoch < epochs; ++epoch) {
    opt.set_lr(schedule.lr_for_epoch(epoch, prev_val_loss, have_val_loss));

    std::vector<size_t> order = train_idx;
    RngStream shuffle_rng(cfg.seed, stage_tag + "-shuffle", static_cast<uint64_t>(epoch));
    for (size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[shuffle_rng.uniform_int(i)]);

    size_t pos = 0;
    while (pos < order.size()) {
      const size_t batch_end = std::min(pos + static_cast<size_t>(cfg.batch_size), order.size());
      std::map<std::string, Tensor> acc_grads;
      const double inv_batch = 1.0 / static_cast<double>(batch_end - pos);
      for (size_t bi = pos; bi < batch_end; ++bi) {
        const size_t q = order[bi];
        Tensor frames = ds.sequences[q];
        RngStream aug_rng(cfg.seed, stage_tag + "-aug",
                          static_cast<uint64_t>(epoch) * 1000003ULL + q);
        if (cfg.sensor_dropout > 0.0)
          frames = channel_dropout(frames, cfg.sensor_dropout, cfg.channels_per_sensor, aug_rng);
        RngStream drop_rng(cfg.seed, stage_tag + "-dropout",
                           static_cast<uint64_t>(epoch) * 1000003ULL + q);
        ForwardCtx ctx(params);
        ctx.training = true;
        ctx.dropout_rng = &drop_rng;
        ag::Var logits = classifier_forward(ctx, cfg.model, frames, cfg.pooled, head);
        std::vector<int64_t> sample_labels;
        if (cfg.pooled)
          sample_labels.assign(1, *ds.labels[q]);
        else
          sample_labels.assign(static_cast<size_t>(logits.dim(0)), *ds.labels[q]);
        ag::Var loss = ag::weighted_cross_entropy(logits, sample_labels, weights);
        if (!std::isfinite(loss.val()[0])) throw std::runtime_error("fine-tune: non-finite loss");
        ctx.graph.backward(loss.id);
        for (auto& [name, grad] : ctx.grads()) {
          auto it = trainable.find(name);
          if (it != trainable.end() && !it->second) continue;
          auto ac = acc_grads.find(name);
          if (ac == acc_grads.end()) {
            Tensor g = grad;
            for (double& v : g.data) v *= inv_batch;
            acc_grads.emplace(name, std::move(g));
          } else {
            for (int64_t i = 0; i < grad.numel(); ++i) ac->second[i] += grad[i] * inv_batch;
          }
        }
      }
      opt.step(params, acc_grads, &trainable);
      pos = batch_end;
    }

    // validation loss feeds the plateau rule; the selection criterion is
    // the validation metric
    double val_loss = 0.0;
    {
      const auto vlabels = dataset_labels(ds, val_idx);
      size_t vi = 0;
      for (size_t q : val_idx) {
        ForwardCtx ctx(params);
        ctx.training = false;
        ag::Var logits = classifier_forward(ctx, cfg.model, ds.sequences[q], cfg.pooled, head);
        std::vector<int64_t> sample_labels(
            cfg.pooled ? 1 : static_cast<size_t>(logits.dim(0)), vlabels[vi]);
        ag::Var loss = ag::weighted_cross_entropy(logits, sample_labels, weights);
        val_loss += loss.val()[0];
        ++vi;
      }
      val_loss /= static_cast<double>(val_idx.size());
    }
    prev_val_loss = val_loss;
    have_val_loss = true;

    const EvalOutcome val_eval = evaluate(params, cfg, ds, val_idx, head);
    const double metric = metric_value(val_eval, cfg.metric);
    if (metric > best_metric) {
      best_metric = metric;
      best = params;
    }
  }
  return best;
}

}  // namespace detail

inline std::map<std::string, bool> trainable_head_only(const ParamStore& params) {
  std::map<std::string, bool> t;
  for (const auto& [name, _] : params.tensors)
    t[name] = name.rfind("head.", 0) == 0 || name.rfind("probe.", 0) == 0;
  return t;
}

inline std::map<std::string, bool> trainable_all(const ParamStore& params) {
  std::map<std::string, bool> t;
  for (const auto& [name, _] : params.tensors) t[name] = true;
  return t;
}

// Stage 1: new two-layer head trained with the backbone frozen.
inline ParamStore finetune_stage1(const ParamStore& backbone, const FinetuneConfig& cfg,
                                  const FramedDataset& ds, const std::vector<size_t>& train_idx,
                                  const std::vector<size_t>& val_idx) {
  ParamStore params = backbone;
  RngStream head_rng(cfg.seed, "head-init");
  init_classifier_head(params, cfg.model.transformer.dim, cfg.num_classes, head_rng);
  const auto trainable = trainable_head_only(params);
  return detail::train_stage(std::move(params), cfg, ds, train_idx, val_idx, HeadKind::TwoLayer,
                             trainable, cfg.stage1_epochs, /*warmup=*/false, "ft1");
}

// Stage 2: everything trainable, 20-epoch linear warm-up then plateau.
// For the no-pretraining baseline call this directly on a random-init
// backbone + head with warmup disabled.
inline ParamStore finetune_stage2(const ParamStore& model, const FinetuneConfig& cfg,
                                  const FramedDataset& ds, const std::vector<size_t>& train_idx,
                                  const std::vector<size_t>& val_idx, bool warmup = true) {
  ParamStore params = model;
  const auto trainable = trainable_all(params);
  return detail::train_stage(std::move(params), cfg, ds, train_idx, val_idx, HeadKind::TwoLayer,
                             trainable, cfg.stage2_epochs, warmup, "ft2");
}

inline EvalOutcome evaluate_classifier(ParamStore& params, const FinetuneConfig& cfg,
                                       const FramedDataset& ds, const std::vector<size_t>& idx,
                                       HeadKind head = HeadKind::TwoLayer) {
  return detail::evaluate(params, cfg, ds, idx, head);
}

// ---- linear probe ----
// Backbone frozen with dropout off, so features are fixed: extract them
// once, then train a single linear layer on top.

inline Tensor extract_pooled_features(ParamStore& params, const ModelConfig& model,
                                      const FramedDataset& ds, const std::vector<size_t>& idx) {
  const int64_t d = model.transformer.dim;
  Tensor feats({static_cast<int64_t>(idx.size()), d});
  for (size_t i = 0; i < idx.size(); ++i) {
    ForwardCtx ctx(params);
    ctx.training = false;
    ag::Var x = ag::constant(ctx.graph, ds.sequences[idx[i]]);
    ag::Var z = encoder_forward(ctx, x, model);
    ag::Var h = positional_encode(ctx, z, model);
    ag::Var y = ag::mean_rows(transformer_forward(ctx, h, model));
    for (int64_t j = 0; j < d; ++j) feats.at2(static_cast<int64_t>(i), j) = y.val().at2(0, j);
  }
  return feats;
}

struct ProbeResult {
  EvalOutcome test;
  ParamStore probe_params;  // probe.w / probe.b only
};

inline ProbeResult linear_probe(const ParamStore& backbone, const FinetuneConfig& cfg,
                                const FramedDataset& ds, const std::vector<size_t>& train_idx,
                                const std::vector<size_t>& val_idx,
                                const std::vector<size_t>& test_idx) {
  ParamStore bp = backbone;
  const Tensor train_f = extract_pooled_features(bp, cfg.model, ds, train_idx);
  const Tensor val_f = extract_pooled_features(bp, cfg.model, ds, val_idx);
  const Tensor test_f = extract_pooled_features(bp, cfg.model, ds, test_idx);
  const auto train_labels = detail::dataset_labels(ds, train_idx);
  const auto val_labels = detail::dataset_labels(ds, val_idx);
  const auto test_labels = detail::dataset_labels(ds, test_idx);
  const auto weights =
      inverse_frequency_weights(detail::class_counts(train_labels, cfg.num_classes));

  ParamStore head;
  RngStream probe_rng(cfg.seed, "probe-init");
  init_probe_head(head, cfg.model.transformer.dim, cfg.num_classes, probe_rng);
  Optimizer opt(OptimizerKind::Adam, AdamHyper{cfg.lr});
  PlateauSchedule schedule(cfg.lr, cfg.patience, cfg.lr / cfg.lr_floor_div);

  ParamStore best = head;
  double best_metric = -1.0;
  const int64_t n = train_f.dim(0);
  for (int64_t epoch = 0; epoch < cfg.stage1_epochs; ++epoch) {
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t{0});
    RngStream shuffle_rng(cfg.seed, "probe-shuffle", static_cast<uint64_t>(epoch));
    for (size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[shuffle_rng.uniform_int(i)]);

    size_t pos = 0;
    while (pos < order.size()) {
      const size_t batch_end = std::min(pos + static_cast<size_t>(cfg.batch_size), order.size());
      const int64_t bsz = static_cast<int64_t>(batch_end - pos);
      Tensor batch({bsz, train_f.dim(1)});
      std::vector<int64_t> blabels(bsz);
      for (int64_t i = 0; i < bsz; ++i) {
        const size_t q = order[pos + i];
        for (int64_t j = 0; j < train_f.dim(1); ++j) batch.at2(i, j) = train_f.at2(q, j);
        blabels[i] = train_labels[q];
      }
      ForwardCtx ctx(head);
      ag::Var x = ag::constant(ctx.graph, batch);
      ag::Var logits = probe_logits(ctx, x);
      ag::Var loss = ag::weighted_cross_entropy(logits, blabels, weights);
      ctx.graph.backward(loss.id);
      auto grads = ctx.grads();
      opt.step(head, grads);
      pos = batch_end;
    }

    // epoch metric on validation features
    ConfusionMatrix cm(cfg.num_classes);
    {
      ForwardCtx ctx(head);
      ag::Var logits = probe_logits(ctx, ag::constant(ctx.graph, val_f));
      const auto preds = predict_labels(logits.val());
      for (size_t i = 0; i < preds.size(); ++i) cm.record(val_labels[i], preds[i]);
    }
    EvalOutcome val_eval{cm, uar(cm), uaf1(cm)};
    const double metric = detail::metric_value(val_eval, cfg.metric);
    if (metric > best_metric) {
      best_metric = metric;
      best = head;
    }
  }

  ProbeResult result{EvalOutcome{ConfusionMatrix(cfg.num_classes)}, best};
  {
    ForwardCtx ctx(best);
    ag::Var logits = probe_logits(ctx, ag::constant(ctx.graph, test_f));
    const auto preds = predict_labels(logits.val());
    for (size_t i = 0; i < preds.size(); ++i)
      result.test.cm.record(test_labels[i], preds[i]);
  }
  result.test.uar_v = uar(result.test.cm);
  result.test.uaf1_v = uaf1(result.test.cm);
  return result;
}

}  // namespace pfml
