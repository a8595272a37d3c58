#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "pfml/graph.hpp"
#include "pfml/rng.hpp"
#include "pfml/tensor.hpp"

namespace pfml {

struct ConvLayerSpec {
  int64_t out_channels = 128;
  int64_t kernel = 3;
  int64_t stride = 1;
  int64_t padding = 0;
};

inline int64_t conv_output_length(int64_t len, const ConvLayerSpec& l) {
  return (len + 2 * l.padding - l.kernel) / l.stride + 1;
}

struct EncoderConfig {
  std::vector<ConvLayerSpec> layers;
  bool layer_norm = true;
  double dropout = 0.1;
  int64_t avg_pool_kernel = 0;  // 0 = no pooling

  // Per-layer time lengths on a frame of n samples, final entry after
  // optional pooling. Throws if the chain collapses below one step.
  std::vector<int64_t> length_chain(int64_t n) const {
    std::vector<int64_t> out;
    int64_t len = n;
    for (size_t i = 0; i < layers.size(); ++i) {
      len = conv_output_length(len, layers[i]);
      if (len < 1)
        throw std::invalid_argument("encoder: layer " + std::to_string(i) +
                                    " output length < 1");
      out.push_back(len);
    }
    if (avg_pool_kernel > 0) {
      len /= avg_pool_kernel;
      if (len < 1) throw std::invalid_argument("encoder: pooling output length < 1");
      out.push_back(len);
    }
    return out;
  }

  int64_t embedding_dim() const {
    if (layers.empty()) throw std::invalid_argument("encoder: no layers");
    return layers.back().out_channels;
  }
};

struct PosEncConfig {
  int64_t kernel = 25;
  int64_t groups = 16;
};

struct TransformerConfig {
  int64_t blocks = 4;
  int64_t dim = 128;
  int64_t heads = 4;
  int64_t ff = 512;
  double dropout = 0.1;

  void validate() const {
    if (dim % heads != 0) throw std::invalid_argument("transformer: dim % heads != 0");
    if (blocks < 1 || heads < 1 || ff < 1) throw std::invalid_argument("transformer: bad config");
  }
};

struct ModelConfig {
  int64_t in_channels = 1;
  int64_t frame_len = 120;
  EncoderConfig encoder;
  PosEncConfig posenc;
  TransformerConfig transformer;
  bool learnable_mask_token = false;

  void validate() const {
    transformer.validate();
    if (encoder.embedding_dim() != transformer.dim)
      throw std::invalid_argument("model: encoder output channels must equal transformer dim");
    auto chain = encoder.length_chain(frame_len);
    if (chain.back() != 1)
      throw std::invalid_argument("model: encoder chain must reduce a frame to one time step");
    if (posenc.kernel % 2 == 0) throw std::invalid_argument("model: posenc kernel must be odd");
    if (transformer.dim % posenc.groups != 0)
      throw std::invalid_argument("model: dim % posenc groups != 0");
  }
};

// Named parameter tensors; std::map so iteration order (and therefore
// optimizer traversal and checkpoint layout) is deterministic.
struct ParamStore {
  std::map<std::string, Tensor> tensors;

  Tensor& get(const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw std::invalid_argument("unknown parameter: " + name);
    return it->second;
  }
  const Tensor& get(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw std::invalid_argument("unknown parameter: " + name);
    return it->second;
  }
  bool has(const std::string& name) const { return tensors.count(name) > 0; }
  void put(const std::string& name, Tensor t) {
    if (!tensors.emplace(name, std::move(t)).second)
      throw std::invalid_argument("duplicate parameter: " + name);
  }
};

namespace init {

inline double truncated_normal(RngStream& rng, double std_dev) {
  double v;
  do {
    v = rng.gaussian() * std_dev;
  } while (std::abs(v) > 2.0 * std_dev);
  return v;
}

inline Tensor trunc_normal(std::vector<int64_t> shape, RngStream& rng, double std_dev = 0.02) {
  Tensor t(std::move(shape));
  for (double& v : t.data) v = truncated_normal(rng, std_dev);
  return t;
}

inline Tensor fan_in_uniform(std::vector<int64_t> shape, int64_t fan_in, RngStream& rng) {
  Tensor t(std::move(shape));
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (double& v : t.data) v = (2.0 * rng.uniform() - 1.0) * bound;
  return t;
}

inline Tensor zeros(std::vector<int64_t> shape) { return Tensor(std::move(shape)); }

inline Tensor ones(std::vector<int64_t> shape) {
  Tensor t(std::move(shape));
  for (double& v : t.data) v = 1.0;
  return t;
}

}  // namespace init

// Backbone parameters: encoder + positional encoder + Transformer
// (+ optional mask token). Heads are added by the pre-training /
// fine-tuning code on top of this set.
inline ParamStore init_backbone(const ModelConfig& cfg, RngStream& rng) {
  cfg.validate();
  ParamStore p;
  int64_t cin = cfg.in_channels;
  for (size_t i = 0; i < cfg.encoder.layers.size(); ++i) {
    const auto& l = cfg.encoder.layers[i];
    const std::string base = "enc." + std::to_string(i) + ".";
    p.put(base + "w", init::fan_in_uniform({l.out_channels, cin, l.kernel}, cin * l.kernel, rng));
    p.put(base + "b", init::zeros({l.out_channels}));
    if (cfg.encoder.layer_norm) {
      p.put(base + "ln_g", init::ones({l.out_channels}));
      p.put(base + "ln_b", init::zeros({l.out_channels}));
    }
    cin = l.out_channels;
  }
  const int64_t d = cfg.transformer.dim;
  const int64_t pos_cin_g = d / cfg.posenc.groups;
  p.put("pos.w", init::fan_in_uniform({d, pos_cin_g, cfg.posenc.kernel},
                                      pos_cin_g * cfg.posenc.kernel, rng));
  p.put("pos.b", init::zeros({d}));
  p.put("pos.ln_g", init::ones({d}));
  p.put("pos.ln_b", init::zeros({d}));
  for (int64_t t = 0; t < cfg.transformer.blocks; ++t) {
    const std::string base = "tf." + std::to_string(t) + ".";
    p.put(base + "ln1_g", init::ones({d}));
    p.put(base + "ln1_b", init::zeros({d}));
    p.put(base + "wq", init::trunc_normal({d, d}, rng));
    p.put(base + "bq", init::zeros({d}));
    p.put(base + "wk", init::trunc_normal({d, d}, rng));
    p.put(base + "bk", init::zeros({d}));
    p.put(base + "wv", init::trunc_normal({d, d}, rng));
    p.put(base + "bv", init::zeros({d}));
    p.put(base + "wo", init::trunc_normal({d, d}, rng));
    p.put(base + "bo", init::zeros({d}));
    p.put(base + "ln2_g", init::ones({d}));
    p.put(base + "ln2_b", init::zeros({d}));
    p.put(base + "ff1_w", init::trunc_normal({d, cfg.transformer.ff}, rng));
    p.put(base + "ff1_b", init::zeros({cfg.transformer.ff}));
    p.put(base + "ff2_w", init::trunc_normal({cfg.transformer.ff, d}, rng));
    p.put(base + "ff2_b", init::zeros({d}));
  }
  p.put("tf.final_ln_g", init::ones({d}));
  p.put("tf.final_ln_b", init::zeros({d}));
  if (cfg.learnable_mask_token) p.put("mask.token", init::trunc_normal({d}, rng));
  return p;
}

// One forward pass: a fresh tape bound to the parameter store. Parameters
// enter the graph as leaves on first use; grads() collects their
// gradients after backward().
struct ForwardCtx {
  ag::Graph graph;
  ParamStore* params = nullptr;
  bool training = false;
  RngStream* dropout_rng = nullptr;
  std::map<std::string, int> leaf_ids;

  explicit ForwardCtx(ParamStore& store) : params(&store) {}

  ag::Var param(const std::string& name) {
    auto it = leaf_ids.find(name);
    if (it != leaf_ids.end()) return ag::Var{&graph, it->second};
    ag::Var v = ag::leaf(graph, params->get(name));
    leaf_ids.emplace(name, v.id);
    return v;
  }

  std::map<std::string, Tensor> grads() {
    std::map<std::string, Tensor> out;
    for (const auto& [name, id] : leaf_ids) out.emplace(name, graph.grad(id));
    return out;
  }

  ag::Var maybe_dropout(ag::Var x, double p) {
    if (dropout_rng == nullptr) return x;
    return ag::dropout(x, p, training, *dropout_rng);
  }
};

// frames (S, C, N) -> embeddings (S, d): conv -> layer norm -> GeLU ->
// dropout per layer, average pooling before the final dropout when
// configured.
inline ag::Var encoder_forward(ForwardCtx& ctx, ag::Var frames, const ModelConfig& cfg) {
  ag::Var h = frames;
  const size_t n_layers = cfg.encoder.layers.size();
  for (size_t i = 0; i < n_layers; ++i) {
    const auto& l = cfg.encoder.layers[i];
    const std::string base = "enc." + std::to_string(i) + ".";
    h = ag::conv1d(h, ctx.param(base + "w"), ctx.param(base + "b"), l.stride, l.padding);
    if (cfg.encoder.layer_norm)
      h = ag::layer_norm_channels(h, ctx.param(base + "ln_g"), ctx.param(base + "ln_b"));
    h = ag::gelu(h);
    const bool last = i + 1 == n_layers;
    if (last && cfg.encoder.avg_pool_kernel > 0) h = ag::avg_pool1d(h, cfg.encoder.avg_pool_kernel);
    h = ctx.maybe_dropout(h, cfg.encoder.dropout);
  }
  if (h.dim(2) != 1)
    throw std::invalid_argument("encoder: frame not reduced to one step, got length " +
                                std::to_string(h.dim(2)));
  return ag::reshape(h, {h.dim(0), h.dim(1)});
}

// z (S, d) -> z + layer_norm(GeLU(grouped_conv_over_time(z))).
inline ag::Var positional_encode(ForwardCtx& ctx, ag::Var z, const ModelConfig& cfg) {
  const int64_t s = z.dim(0), d = z.dim(1);
  ag::Var zt = ag::reshape(ag::transpose(z), {1, d, s});
  const int64_t pad = (cfg.posenc.kernel - 1) / 2;
  ag::Var conv = ag::conv1d(zt, ctx.param("pos.w"), ctx.param("pos.b"), 1, pad,
                            cfg.posenc.groups);
  ag::Var back = ag::transpose(ag::reshape(conv, {d, s}));
  ag::Var act = ag::gelu(back);
  ag::Var normed = ag::layer_norm_rows(act, ctx.param("pos.ln_g"), ctx.param("pos.ln_b"));
  return ag::add(z, normed);
}

inline ag::Var attention_block(ForwardCtx& ctx, ag::Var x, const TransformerConfig& cfg,
                               const std::string& base) {
  const int64_t d = cfg.dim, heads = cfg.heads, dk = d / heads;
  ag::Var q = ag::linear(x, ctx.param(base + "wq"), ctx.param(base + "bq"));
  ag::Var k = ag::linear(x, ctx.param(base + "wk"), ctx.param(base + "bk"));
  ag::Var v = ag::linear(x, ctx.param(base + "wv"), ctx.param(base + "bv"));
  std::vector<ag::Var> heads_out;
  heads_out.reserve(heads);
  const double scale_v = 1.0 / std::sqrt(static_cast<double>(dk));
  for (int64_t h = 0; h < heads; ++h) {
    ag::Var qh = ag::slice_cols(q, h * dk, (h + 1) * dk);
    ag::Var kh = ag::slice_cols(k, h * dk, (h + 1) * dk);
    ag::Var vh = ag::slice_cols(v, h * dk, (h + 1) * dk);
    ag::Var scores = ag::scale(ag::matmul(qh, ag::transpose(kh)), scale_v);
    ag::Var attn = ag::softmax_rows(scores);
    heads_out.push_back(ag::matmul(attn, vh));
  }
  ag::Var cat = ag::concat_cols(heads_out);
  return ag::linear(cat, ctx.param(base + "wo"), ctx.param(base + "bo"));
}

// Pre-norm Transformer encoder stack with a final layer norm.
inline ag::Var transformer_forward(ForwardCtx& ctx, ag::Var h, const ModelConfig& cfg) {
  const auto& tf = cfg.transformer;
  for (int64_t t = 0; t < tf.blocks; ++t) {
    const std::string base = "tf." + std::to_string(t) + ".";
    ag::Var n1 = ag::layer_norm_rows(h, ctx.param(base + "ln1_g"), ctx.param(base + "ln1_b"));
    ag::Var attn = attention_block(ctx, n1, tf, base);
    h = ag::add(h, ctx.maybe_dropout(attn, tf.dropout));
    ag::Var n2 = ag::layer_norm_rows(h, ctx.param(base + "ln2_g"), ctx.param(base + "ln2_b"));
    ag::Var ff = ag::linear(n2, ctx.param(base + "ff1_w"), ctx.param(base + "ff1_b"));
    ff = ag::gelu(ff);
    ff = ag::linear(ff, ctx.param(base + "ff2_w"), ctx.param(base + "ff2_b"));
    h = ag::add(h, ctx.maybe_dropout(ff, tf.dropout));
    if (!h.val().all_finite())
      throw std::runtime_error("transformer: non-finite values after block " + std::to_string(t));
  }
  return ag::layer_norm_rows(h, ctx.param("tf.final_ln_g"), ctx.param("tf.final_ln_b"));
}

// Linear projection to the functional-target layout (S, m*C).
inline ag::Var projection_head(ForwardCtx& ctx, ag::Var y) {
  return ag::linear(y, ctx.param("proj.w"), ctx.param("proj.b"));
}

inline void init_projection_head(ParamStore& p, int64_t d, int64_t out_dim, RngStream& rng) {
  p.put("proj.w", init::trunc_normal({d, out_dim}, rng));
  p.put("proj.b", init::zeros({out_dim}));
}

// Fine-tuning head: two fully-connected layers with a GeLU in between;
// softmax lives in the loss / predict step.
inline ag::Var classifier_logits_2layer(ForwardCtx& ctx, ag::Var y) {
  ag::Var h = ag::linear(y, ctx.param("head.fc1_w"), ctx.param("head.fc1_b"));
  h = ag::gelu(h);
  return ag::linear(h, ctx.param("head.fc2_w"), ctx.param("head.fc2_b"));
}

inline void init_classifier_head(ParamStore& p, int64_t d, int64_t k, RngStream& rng) {
  p.put("head.fc1_w", init::trunc_normal({d, d}, rng));
  p.put("head.fc1_b", init::zeros({d}));
  p.put("head.fc2_w", init::trunc_normal({d, k}, rng));
  p.put("head.fc2_b", init::zeros({k}));
}

// Linear-probe head: one linear layer.
inline ag::Var probe_logits(ForwardCtx& ctx, ag::Var y) {
  return ag::linear(y, ctx.param("probe.w"), ctx.param("probe.b"));
}

inline void init_probe_head(ParamStore& p, int64_t d, int64_t k, RngStream& rng) {
  p.put("probe.w", init::trunc_normal({d, k}, rng));
  p.put("probe.b", init::zeros({k}));
}

}  // namespace pfml
