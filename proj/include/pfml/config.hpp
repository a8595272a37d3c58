#pragma once

#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "pfml/finetune.hpp"
#include "pfml/masking.hpp"
#include "pfml/nn.hpp"
#include "pfml/pretrain.hpp"
#include "pfml/synth.hpp"

namespace pfml::config {

using json = nlohmann::json;

inline void check_keys(const json& j, const std::set<std::string>& allowed,
                       const std::string& where) {
  if (!j.is_object()) throw std::invalid_argument("config: expected object for " + where);
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.count(it.key()))
      throw std::invalid_argument("config: unknown key '" + it.key() + "' in " + where);
}

// ---- model ----

inline json to_json(const ConvLayerSpec& l) {
  return json{{"out_channels", l.out_channels},
              {"kernel", l.kernel},
              {"stride", l.stride},
              {"padding", l.padding}};
}

inline ConvLayerSpec conv_layer_from_json(const json& j) {
  check_keys(j, {"out_channels", "kernel", "stride", "padding"}, "encoder layer");
  ConvLayerSpec l;
  l.out_channels = j.at("out_channels").get<int64_t>();
  l.kernel = j.at("kernel").get<int64_t>();
  l.stride = j.at("stride").get<int64_t>();
  l.padding = j.at("padding").get<int64_t>();
  return l;
}

inline json to_json(const EncoderConfig& e) {
  json layers = json::array();
  for (const auto& l : e.layers) layers.push_back(to_json(l));
  return json{{"layers", layers},
              {"layer_norm", e.layer_norm},
              {"dropout", e.dropout},
              {"avg_pool_kernel", e.avg_pool_kernel}};
}

inline EncoderConfig encoder_from_json(const json& j) {
  check_keys(j, {"layers", "layer_norm", "dropout", "avg_pool_kernel"}, "encoder");
  EncoderConfig e;
  e.layers.clear();
  for (const auto& jl : j.at("layers")) e.layers.push_back(conv_layer_from_json(jl));
  e.layer_norm = j.value("layer_norm", true);
  e.dropout = j.value("dropout", 0.1);
  e.avg_pool_kernel = j.value("avg_pool_kernel", int64_t{0});
  return e;
}

inline json to_json(const TransformerConfig& t) {
  return json{{"blocks", t.blocks}, {"dim", t.dim},         {"heads", t.heads},
              {"ff", t.ff},         {"dropout", t.dropout}};
}

inline TransformerConfig transformer_from_json(const json& j) {
  check_keys(j, {"blocks", "dim", "heads", "ff", "dropout"}, "transformer");
  TransformerConfig t;
  t.blocks = j.value("blocks", int64_t{4});
  t.dim = j.value("dim", int64_t{128});
  t.heads = j.value("heads", int64_t{4});
  t.ff = j.value("ff", int64_t{512});
  t.dropout = j.value("dropout", 0.1);
  return t;
}

inline json to_json(const PosEncConfig& p) {
  return json{{"kernel", p.kernel}, {"groups", p.groups}};
}

inline PosEncConfig posenc_from_json(const json& j) {
  check_keys(j, {"kernel", "groups"}, "positional encoder");
  PosEncConfig p;
  p.kernel = j.value("kernel", int64_t{25});
  p.groups = j.value("groups", int64_t{16});
  return p;
}

inline json to_json(const ModelConfig& m) {
  return json{{"in_channels", m.in_channels},
              {"frame_len", m.frame_len},
              {"encoder", to_json(m.encoder)},
              {"posenc", to_json(m.posenc)},
              {"transformer", to_json(m.transformer)},
              {"learnable_mask_token", m.learnable_mask_token}};
}

inline ModelConfig model_from_json(const json& j) {
  check_keys(j, {"in_channels", "frame_len", "encoder", "posenc", "transformer",
                 "learnable_mask_token"},
             "model");
  ModelConfig m;
  m.in_channels = j.at("in_channels").get<int64_t>();
  m.frame_len = j.at("frame_len").get<int64_t>();
  m.encoder = encoder_from_json(j.at("encoder"));
  if (j.contains("posenc")) m.posenc = posenc_from_json(j.at("posenc"));
  m.transformer = transformer_from_json(j.at("transformer"));
  m.learnable_mask_token = j.value("learnable_mask_token", false);
  return m;
}

// ---- masking ----

inline const char* mask_location_name(MaskLocation l) {
  return l == MaskLocation::Embeddings ? "embeddings" : "inputs";
}

inline MaskLocation mask_location_from_name(const std::string& s) {
  if (s == "embeddings") return MaskLocation::Embeddings;
  if (s == "inputs") return MaskLocation::Inputs;
  throw std::invalid_argument("unknown mask location: " + s);
}

inline json to_json(const MaskConfig& m) {
  return json{{"start_prob", m.start_prob},
              {"min_span", m.min_span},
              {"mask_type", mask_type_name(m.mask_type)},
              {"location", mask_location_name(m.location)}};
}

inline MaskConfig mask_from_json(const json& j) {
  check_keys(j, {"start_prob", "min_span", "mask_type", "location"}, "mask");
  MaskConfig m;
  m.start_prob = j.value("start_prob", 0.065);
  m.min_span = j.value("min_span", int64_t{5});
  if (j.contains("mask_type")) m.mask_type = mask_type_from_name(j.at("mask_type"));
  if (j.contains("location")) m.location = mask_location_from_name(j.at("location"));
  return m;
}

// ---- functionals ----

inline json to_json(const FunctionalSet& s) {
  json names = json::array();
  for (FunctionalId id : s.ids) names.push_back(functional_name(id));
  return json{{"ids", names}, {"include_lag0", s.include_lag0}};
}

inline FunctionalSet functionals_from_json(const json& j) {
  check_keys(j, {"ids", "include_lag0"}, "functionals");
  FunctionalSet s;
  if (j.contains("ids")) {
    for (const auto& name : j.at("ids")) s.ids.push_back(functional_from_name(name));
  } else {
    s = FunctionalSet::all();
  }
  s.include_lag0 = j.value("include_lag0", false);
  s.validate();
  return s;
}

// ---- pretrain ----

inline json to_json(const PretrainConfig& c) {
  return json{{"objective", c.objective == Objective::PFML ? "pfml" : "mae"},
              {"loss", c.loss_type == LossType::L1 ? "l1" : "mse"},
              {"mask", to_json(c.mask)},
              {"functionals", to_json(c.functionals)},
              {"epochs", c.epochs},
              {"batch_size", c.batch_size},
              {"lr", c.lr},
              {"split_ratio", c.split_ratio},
              {"seed", c.seed},
              {"znormalize", c.znormalize_sequences},
              {"target_len", c.target_len},
              {"patience", c.patience},
              {"lr_floor_div", c.lr_floor_div},
              {"model", to_json(c.model)}};
}

inline PretrainConfig pretrain_from_json(const json& j) {
  check_keys(j,
             {"objective", "loss", "mask", "functionals", "epochs", "batch_size", "lr",
              "split_ratio", "seed", "znormalize", "target_len", "patience", "lr_floor_div",
              "model"},
             "pretrain");
  PretrainConfig c;
  if (j.contains("objective")) {
    const std::string o = j.at("objective");
    if (o == "pfml")
      c.objective = Objective::PFML;
    else if (o == "mae")
      c.objective = Objective::MAE;
    else
      throw std::invalid_argument("unknown objective: " + o);
  }
  if (j.contains("loss")) {
    const std::string l = j.at("loss");
    if (l == "mse")
      c.loss_type = LossType::MSE;
    else if (l == "l1")
      c.loss_type = LossType::L1;
    else
      throw std::invalid_argument("unknown loss: " + l);
  }
  if (j.contains("mask")) c.mask = mask_from_json(j.at("mask"));
  if (j.contains("functionals")) c.functionals = functionals_from_json(j.at("functionals"));
  c.epochs = j.value("epochs", int64_t{30});
  c.batch_size = j.value("batch_size", int64_t{8});
  c.lr = j.value("lr", 1e-3);
  c.split_ratio = j.value("split_ratio", 0.8);
  if (!j.contains("seed")) throw std::invalid_argument("pretrain config: 'seed' is required");
  c.seed = j.at("seed").get<uint64_t>();
  c.znormalize_sequences = j.value("znormalize", true);
  c.target_len = j.value("target_len", int64_t{0});
  c.patience = j.value("patience", int64_t{5});
  c.lr_floor_div = j.value("lr_floor_div", 64.0);
  c.model = model_from_json(j.at("model"));
  return c;
}

// ---- finetune ----

inline json to_json(const FinetuneConfig& c) {
  return json{{"num_classes", c.num_classes},
              {"stage1_epochs", c.stage1_epochs},
              {"stage2_epochs", c.stage2_epochs},
              {"batch_size", c.batch_size},
              {"lr", c.lr},
              {"warmup_epochs", c.warmup_epochs},
              {"patience", c.patience},
              {"lr_floor_div", c.lr_floor_div},
              {"seed", c.seed},
              {"pooled", c.pooled},
              {"sensor_dropout", c.sensor_dropout},
              {"channels_per_sensor", c.channels_per_sensor},
              {"metric", c.metric == SelectionMetric::UAR ? "uar" : "uaf1"},
              {"model", to_json(c.model)}};
}

inline FinetuneConfig finetune_from_json(const json& j) {
  check_keys(j,
             {"num_classes", "stage1_epochs", "stage2_epochs", "batch_size", "lr",
              "warmup_epochs", "patience", "lr_floor_div", "seed", "pooled", "sensor_dropout",
              "channels_per_sensor", "metric", "model"},
             "finetune");
  FinetuneConfig c;
  c.num_classes = j.at("num_classes").get<int64_t>();
  c.stage1_epochs = j.value("stage1_epochs", int64_t{15});
  c.stage2_epochs = j.value("stage2_epochs", int64_t{15});
  c.batch_size = j.value("batch_size", int64_t{8});
  c.lr = j.value("lr", 1e-4);
  c.warmup_epochs = j.value("warmup_epochs", int64_t{20});
  c.patience = j.value("patience", int64_t{5});
  c.lr_floor_div = j.value("lr_floor_div", 64.0);
  if (!j.contains("seed")) throw std::invalid_argument("finetune config: 'seed' is required");
  c.seed = j.at("seed").get<uint64_t>();
  c.pooled = j.value("pooled", true);
  c.sensor_dropout = j.value("sensor_dropout", 0.0);
  c.channels_per_sensor = j.value("channels_per_sensor", int64_t{1});
  if (j.contains("metric")) {
    const std::string m = j.at("metric");
    if (m == "uar")
      c.metric = SelectionMetric::UAR;
    else if (m == "uaf1")
      c.metric = SelectionMetric::UAF1;
    else
      throw std::invalid_argument("unknown metric: " + m);
  }
  c.model = model_from_json(j.at("model"));
  return c;
}

// ---- synthetic ----

inline json to_json(const SynthClassParams& p, SynthFamily family) {
  if (family == SynthFamily::Sinusoid)
    return json{{"freq_lo", p.freq_lo}, {"freq_hi", p.freq_hi}};
  return json{{"pole_lo", p.pole_lo},
              {"pole_hi", p.pole_hi},
              {"angle_lo", p.angle_lo},
              {"angle_hi", p.angle_hi}};
}

inline SynthClassParams synth_class_from_json(const json& j) {
  check_keys(j, {"freq_lo", "freq_hi", "pole_lo", "pole_hi", "angle_lo", "angle_hi"},
             "synthetic class");
  SynthClassParams p;
  p.freq_lo = j.value("freq_lo", p.freq_lo);
  p.freq_hi = j.value("freq_hi", p.freq_hi);
  p.pole_lo = j.value("pole_lo", p.pole_lo);
  p.pole_hi = j.value("pole_hi", p.pole_hi);
  p.angle_lo = j.value("angle_lo", p.angle_lo);
  p.angle_hi = j.value("angle_hi", p.angle_hi);
  return p;
}

inline json to_json(const SyntheticSpec& s, const FrameConfig& frame) {
  json classes = json::array();
  for (const auto& p : s.class_params) classes.push_back(to_json(p, s.family));
  return json{{"family", s.family == SynthFamily::Sinusoid ? "sine" : "ar"},
              {"num_classes", s.num_classes},
              {"channels", s.channels},
              {"sample_rate", s.sample_rate},
              {"sequence_length", s.sequence_length},
              {"count", s.count},
              {"num_groups", s.num_groups},
              {"seed", s.seed},
              {"noise_std", s.noise_std},
              {"class_params", classes},
              {"frame", {{"len", frame.frame_len}, {"hop", frame.hop}}}};
}

inline std::pair<SyntheticSpec, FrameConfig> synth_from_json(const json& j) {
  check_keys(j,
             {"family", "num_classes", "channels", "sample_rate", "sequence_length", "count",
              "num_groups", "seed", "noise_std", "class_params", "frame"},
             "synthetic");
  SyntheticSpec s;
  const std::string family = j.value("family", std::string{"sine"});
  if (family == "sine")
    s.family = SynthFamily::Sinusoid;
  else if (family == "ar")
    s.family = SynthFamily::ArProcess;
  else
    throw std::invalid_argument("unknown synthetic family: " + family);
  s.num_classes = j.value("num_classes", int64_t{0});
  s.channels = j.value("channels", int64_t{1});
  s.sample_rate = j.value("sample_rate", 100.0);
  s.sequence_length = j.value("sequence_length", int64_t{2000});
  s.count = j.value("count", int64_t{50});
  s.num_groups = j.value("num_groups", int64_t{10});
  if (!j.contains("seed")) throw std::invalid_argument("synthetic config: 'seed' is required");
  s.seed = j.at("seed").get<uint64_t>();
  s.noise_std = j.value("noise_std", 0.3);
  for (const auto& jc : j.at("class_params")) s.class_params.push_back(synth_class_from_json(jc));
  FrameConfig frame;
  frame.frame_len = j.at("frame").at("len").get<int64_t>();
  frame.hop = j.at("frame").at("hop").get<int64_t>();
  return {s, frame};
}

}  // namespace pfml::config
