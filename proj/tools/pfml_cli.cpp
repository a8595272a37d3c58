// Command-line surface for the pfml library: synthetic data generation,
// functional extraction, pre-training, fine-tuning, probing, evaluation
// and collapse-report over a training log.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "pfml/config.hpp"
#include "pfml/finetune.hpp"
#include "pfml/io.hpp"
#include "pfml/pretrain.hpp"
#include "pfml/synth.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace pfml;

namespace {

json load_json(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open config: " + path.string());
  return json::parse(is);
}

std::string csv_bool(bool b) { return b ? "1" : "0"; }

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

void write_log_csv(const fs::path& path, const std::vector<EpochStats>& log) {
  io::CsvWriter csv(path, "epoch,train_loss,val_loss,emb_var,out_var,lr,collapse_flag");
  for (const auto& st : log)
    csv.row(std::to_string(st.epoch) + "," + fmt(st.train_loss) + "," + fmt(st.val_loss) + "," +
            fmt(st.emb_var) + "," + fmt(st.out_var) + "," + fmt(st.lr) + "," +
            csv_bool(st.collapse_flag));
}

void write_confusion_csv(const fs::path& path, const ConfusionMatrix& cm) {
  io::CsvWriter csv(path, "true_class,pred_class,count");
  for (int64_t i = 0; i < cm.k; ++i)
    for (int64_t j = 0; j < cm.k; ++j)
      csv.row(std::to_string(i) + "," + std::to_string(j) + "," + std::to_string(cm.at(i, j)));
}

// shared overrides: --seed, --objective, --mask-location
struct Overrides {
  std::optional<uint64_t> seed;
  std::string objective;
  std::string mask_location;
};

void apply_overrides(PretrainConfig& cfg, const Overrides& ov) {
  if (ov.seed) cfg.seed = *ov.seed;
  if (!ov.objective.empty()) {
    if (ov.objective == "pfml")
      cfg.objective = Objective::PFML;
    else if (ov.objective == "mae")
      cfg.objective = Objective::MAE;
    else
      throw std::invalid_argument("unknown objective: " + ov.objective);
  }
  if (!ov.mask_location.empty())
    cfg.mask.location = config::mask_location_from_name(ov.mask_location);
}

// ---- commands ----

int cmd_synth(const fs::path& config_path, const fs::path& out_dir,
              std::optional<uint64_t> seed) {
  json j = load_json(config_path);
  auto [spec, frame] = config::synth_from_json(j);
  if (seed) spec.seed = *seed;
  io::DatasetManifest m = generate_synthetic(spec, out_dir, frame);
  std::cout << "wrote " << m.entries.size() << " sequences to " << out_dir.string() << "\n";
  return 0;
}

int cmd_extract(const fs::path& config_path, const fs::path& manifest_path,
                const fs::path& out_dir) {
  json j = load_json(config_path);
  config::check_keys(j, {"functionals", "znormalize", "normalize", "target_len"},
                     "extract-functionals");
  FunctionalSet set = j.contains("functionals") ? config::functionals_from_json(j.at("functionals"))
                                                : FunctionalSet::all();
  const bool znorm = j.value("znormalize", true);
  const bool normalize = j.value("normalize", true);
  const int64_t target_len = j.value("target_len", int64_t{0});

  io::DatasetManifest manifest = io::read_manifest(manifest_path);
  FramedDataset ds = load_framed_dataset(manifest, znorm, target_len);

  std::vector<FunctionalVector> all;
  std::vector<size_t> boundaries;  // frame count per sequence
  for (const Tensor& t : ds.sequences) {
    const int64_t s = t.dim(0), c = t.dim(1), n = t.dim(2);
    boundaries.push_back(static_cast<size_t>(s));
    std::vector<std::vector<double>> frame(c, std::vector<double>(n));
    for (int64_t i = 0; i < s; ++i) {
      for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t k = 0; k < n; ++k) frame[ch][k] = t.at3(i, ch, k);
      all.push_back(compute_functionals(frame, set));
    }
  }

  fs::create_directories(out_dir);
  io::FunctionalStore store;
  store.set = set;
  store.channels = static_cast<uint32_t>(ds.channels);
  store.normalized = normalize;
  if (normalize) {
    NormalizationStats stats = fit_normalization(all);
    io::write_normalization_stats(out_dir / "targets.norm.json", stats);
    for (const auto& fv : all) store.rows.push_back(apply_normalization(fv, stats).values);
  } else {
    for (const auto& fv : all) store.rows.push_back(fv.values);
  }
  io::write_functional_store(out_dir / "targets.pffn", store);
  std::cout << "wrote " << store.rows.size() << " functional rows over " << boundaries.size()
            << " sequences\n";
  return 0;
}

int cmd_pretrain(const fs::path& config_path, const fs::path& manifest_path,
                 const fs::path& out_dir, const Overrides& ov) {
  json j = load_json(config_path);
  PretrainConfig cfg = config::pretrain_from_json(j);
  apply_overrides(cfg, ov);

  io::DatasetManifest manifest = io::read_manifest(manifest_path);
  FramedDataset ds = load_framed_dataset(manifest, cfg.znormalize_sequences, cfg.target_len);
  PretrainResult res = pretrain(ds, cfg);

  fs::create_directories(out_dir);
  write_log_csv(out_dir / "log.csv", res.log);

  io::Checkpoint ckpt;
  ckpt.config_digest = io::config_digest(config::to_json(cfg));
  ckpt.params = res.best_params;
  ckpt.strings["best_epoch"] = std::to_string(res.best_epoch);
  ckpt.strings["best_val_loss"] = fmt(res.best_val_loss);
  ckpt.strings["objective"] = cfg.objective == Objective::PFML ? "pfml" : "mae";
  io::write_checkpoint(out_dir / "best.pfck", ckpt);
  if (cfg.objective == Objective::PFML)
    io::write_normalization_stats(out_dir / "targets.norm.json", res.norm_stats);

  std::cout << "best epoch " << res.best_epoch << " val_loss " << fmt(res.best_val_loss)
            << (res.collapse_ever ? " (collapse criterion fired)" : "") << "\n";
  return 0;
}

// shared fold loop for finetune/probe
template <typename RunFold>
int run_folds(const FinetuneConfig& cfg, const FramedDataset& ds, int64_t folds,
              const fs::path& out_dir, RunFold run_fold) {
  const std::vector<Fold> kfolds = grouped_kfold(ds.groups, folds, cfg.seed);
  fs::create_directories(out_dir);
  io::CsvWriter metrics(out_dir / "metrics.csv", "fold,uar,uaf1");
  std::vector<ConfusionMatrix> cms;
  for (size_t f = 0; f < kfolds.size(); ++f) {
    EvalOutcome out = run_fold(f, kfolds[f]);
    metrics.row(std::to_string(f) + "," + fmt(out.uar_v) + "," + fmt(out.uaf1_v));
    cms.push_back(out.cm);
    std::cout << "fold " << f << " uar " << fmt(out.uar_v) << " uaf1 " << fmt(out.uaf1_v) << "\n";
  }
  const ConfusionMatrix agg = aggregate_eval(cms);
  write_confusion_csv(out_dir / "confusion.csv", agg);
  io::CsvWriter aggm(out_dir / "aggregate.csv", "uar,uaf1");
  aggm.row(fmt(uar(agg)) + "," + fmt(uaf1(agg)));
  std::cout << "aggregate uar " << fmt(uar(agg)) << " uaf1 " << fmt(uaf1(agg)) << "\n";
  return 0;
}

ParamStore load_backbone_or_init(const fs::path& checkpoint_path, const FinetuneConfig& cfg) {
  if (!checkpoint_path.empty()) return io::read_checkpoint(checkpoint_path).params;
  RngStream init_rng(cfg.seed, "init");
  return init_backbone(cfg.model, init_rng);
}

int cmd_finetune(const fs::path& config_path, const fs::path& manifest_path,
                 const fs::path& checkpoint_path, const fs::path& out_dir, int64_t folds,
                 const Overrides& ov) {
  json j = load_json(config_path);
  FinetuneConfig cfg = config::finetune_from_json(j);
  if (ov.seed) cfg.seed = *ov.seed;

  io::DatasetManifest manifest = io::read_manifest(manifest_path);
  FramedDataset ds = load_framed_dataset(manifest, true, 0);
  ParamStore backbone = load_backbone_or_init(checkpoint_path, cfg);
  const bool pretrained = !checkpoint_path.empty();

  return run_folds(cfg, ds, folds, out_dir, [&](size_t f, const Fold& fold) {
    ParamStore s1 = finetune_stage1(backbone, cfg, ds, fold.train, fold.val);
    ParamStore s2 = finetune_stage2(s1, cfg, ds, fold.train, fold.val, /*warmup=*/pretrained);
    io::Checkpoint ckpt;
    ckpt.config_digest = io::config_digest(config::to_json(cfg));
    ckpt.params = s2;
    io::write_checkpoint(out_dir / ("fold_" + std::to_string(f) + ".pfck"), ckpt);
    return evaluate_classifier(s2, cfg, ds, fold.test);
  });
}

int cmd_probe(const fs::path& config_path, const fs::path& manifest_path,
              const fs::path& checkpoint_path, const fs::path& out_dir, int64_t folds,
              const Overrides& ov) {
  json j = load_json(config_path);
  FinetuneConfig cfg = config::finetune_from_json(j);
  if (ov.seed) cfg.seed = *ov.seed;

  io::DatasetManifest manifest = io::read_manifest(manifest_path);
  FramedDataset ds = load_framed_dataset(manifest, true, 0);
  ParamStore backbone = load_backbone_or_init(checkpoint_path, cfg);

  return run_folds(cfg, ds, folds, out_dir, [&](size_t f, const Fold& fold) {
    ProbeResult r = linear_probe(backbone, cfg, ds, fold.train, fold.val, fold.test);
    io::Checkpoint ckpt;
    ckpt.config_digest = io::config_digest(config::to_json(cfg));
    ckpt.params = backbone;
    for (const auto& [name, t] : r.probe_params.tensors) ckpt.params.put(name, t);
    io::write_checkpoint(out_dir / ("fold_" + std::to_string(f) + ".pfck"), ckpt);
    return r.test;
  });
}

int cmd_eval(const fs::path& config_path, const fs::path& manifest_path,
             const fs::path& checkpoint_path, const fs::path& out_dir) {
  json j = load_json(config_path);
  FinetuneConfig cfg = config::finetune_from_json(j);
  io::DatasetManifest manifest = io::read_manifest(manifest_path);
  FramedDataset ds = load_framed_dataset(manifest, true, 0);
  io::Checkpoint ckpt = io::read_checkpoint(checkpoint_path);

  std::vector<size_t> idx(ds.size());
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  const HeadKind head = ckpt.params.has("head.fc1_w") ? HeadKind::TwoLayer : HeadKind::Probe;
  EvalOutcome out = evaluate_classifier(ckpt.params, cfg, ds, idx, head);

  fs::create_directories(out_dir);
  io::CsvWriter metrics(out_dir / "metrics.csv", "uar,uaf1");
  metrics.row(fmt(out.uar_v) + "," + fmt(out.uaf1_v));
  write_confusion_csv(out_dir / "confusion.csv", out.cm);
  std::cout << "uar " << fmt(out.uar_v) << " uaf1 " << fmt(out.uaf1_v) << "\n";
  return 0;
}

int cmd_collapse_report(const fs::path& log_path) {
  std::ifstream is(log_path);
  if (!is) throw std::runtime_error("cannot open log: " + log_path.string());
  std::string line;
  if (!std::getline(is, line)) throw std::runtime_error("empty log: " + log_path.string());
  if (line.rfind("epoch,", 0) != 0)
    throw std::runtime_error("log missing expected header: " + log_path.string());

  CollapseMonitor monitor;
  bool ever = false;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string field;
    std::vector<std::string> cols;
    while (std::getline(ss, field, ',')) cols.push_back(field);
    if (cols.size() < 7) throw std::runtime_error("malformed log row: " + line);
    const int64_t epoch = std::stoll(cols[0]);
    const double val_loss = std::stod(cols[2]);
    const double emb_var = std::stod(cols[3]);
    const double out_var = std::stod(cols[4]);
    const bool fired = monitor.observe(emb_var, out_var, val_loss);
    ever = ever || fired;
    std::cout << epoch << "," << csv_bool(fired) << "\n";
  }
  std::cout << (ever ? "collapse: detected" : "collapse: none") << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pfml: masked-latent functional prediction for time-series"};
  app.require_subcommand(1);

  std::string config_path, manifest_path, checkpoint_path, out_dir, log_path;
  int64_t folds = 10;
  Overrides ov;
  std::optional<uint64_t> seed;

  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  synth->add_option("--config", config_path, "synthetic spec JSON")->required();
  synth->add_option("--out", out_dir, "output directory")->required();
  synth->add_option("--seed", seed, "override the config seed");

  auto* extract = app.add_subcommand("extract-functionals", "compute functional targets");
  extract->add_option("--config", config_path, "extraction config JSON")->required();
  extract->add_option("--manifest", manifest_path, "dataset manifest")->required();
  extract->add_option("--out", out_dir, "output directory")->required();

  auto* pre = app.add_subcommand("pretrain", "self-supervised pre-training");
  pre->add_option("--config", config_path, "pretrain config JSON")->required();
  pre->add_option("--manifest", manifest_path, "dataset manifest")->required();
  pre->add_option("--out", out_dir, "output directory")->required();
  pre->add_option("--seed", ov.seed, "override the config seed");
  pre->add_option("--objective", ov.objective, "pfml|mae")
      ->check(CLI::IsMember({"pfml", "mae"}));
  pre->add_option("--mask-location", ov.mask_location, "embeddings|inputs")
      ->check(CLI::IsMember({"embeddings", "inputs"}));

  auto* ft = app.add_subcommand("finetune", "two-stage supervised fine-tuning");
  ft->add_option("--config", config_path, "finetune config JSON")->required();
  ft->add_option("--manifest", manifest_path, "dataset manifest")->required();
  ft->add_option("--checkpoint", checkpoint_path, "pre-trained backbone (omit for random init)");
  ft->add_option("--out", out_dir, "output directory")->required();
  ft->add_option("--folds", folds, "grouped cross-validation folds");
  ft->add_option("--seed", ov.seed, "override the config seed");

  auto* probe = app.add_subcommand("probe", "linear probe on frozen features");
  probe->add_option("--config", config_path, "finetune config JSON")->required();
  probe->add_option("--manifest", manifest_path, "dataset manifest")->required();
  probe->add_option("--checkpoint", checkpoint_path,
                    "pre-trained backbone (omit for random init)");
  probe->add_option("--out", out_dir, "output directory")->required();
  probe->add_option("--folds", folds, "grouped cross-validation folds");
  probe->add_option("--seed", ov.seed, "override the config seed");

  auto* ev = app.add_subcommand("eval", "evaluate a checkpointed classifier");
  ev->add_option("--config", config_path, "finetune config JSON")->required();
  ev->add_option("--manifest", manifest_path, "dataset manifest")->required();
  ev->add_option("--checkpoint", checkpoint_path, "model checkpoint")->required();
  ev->add_option("--out", out_dir, "output directory")->required();

  auto* rep = app.add_subcommand("collapse-report", "re-apply the collapse rule to a log CSV");
  rep->add_option("--log", log_path, "training log CSV")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth) return cmd_synth(config_path, out_dir, seed);
    if (*extract) return cmd_extract(config_path, manifest_path, out_dir);
    if (*pre) return cmd_pretrain(config_path, manifest_path, out_dir, ov);
    if (*ft) return cmd_finetune(config_path, manifest_path, checkpoint_path, out_dir, folds, ov);
    if (*probe) return cmd_probe(config_path, manifest_path, checkpoint_path, out_dir, folds, ov);
    if (*ev) return cmd_eval(config_path, manifest_path, checkpoint_path, out_dir);
    if (*rep) return cmd_collapse_report(log_path);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
