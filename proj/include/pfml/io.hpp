#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "pfml/functionals.hpp"
#include "pfml/nn.hpp"
#include "pfml/optim.hpp"
#include "pfml/signal.hpp"
#include "pfml/tensor.hpp"

namespace pfml::io {

using json = nlohmann::json;

// All binary formats are little-endian. Interchange precision is 32-bit;
// compute stays 64-bit in memory.
namespace detail {

template <typename T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is, const std::string& what) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("truncated file while reading " + what);
  return v;
}

inline void write_magic(std::ostream& os, const char magic[4]) { os.write(magic, 4); }

inline void expect_magic(std::istream& is, const char magic[4], const std::string& what) {
  char buf[4];
  is.read(buf, 4);
  if (!is || std::memcmp(buf, magic, 4) != 0)
    throw std::runtime_error(what + ": bad magic");
}

inline void write_string(std::ostream& os, const std::string& s) {
  write_pod<uint32_t>(os, static_cast<uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& is, const std::string& what) {
  const uint32_t n = read_pod<uint32_t>(is, what);
  std::string s(n, '\0');
  is.read(s.data(), n);
  if (!is) throw std::runtime_error("truncated file while reading " + what);
  return s;
}

}  // namespace detail

// ---- PFTS: binary time-series sequence ----

inline constexpr char kSequenceMagic[4] = {'P', 'F', 'T', 'S'};
inline constexpr uint32_t kSequenceVersion = 1;

inline void write_sequence(const std::filesystem::path& path, const Signal& signal) {
  signal.validate();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for writing: " + path.string());
  detail::write_magic(os, kSequenceMagic);
  detail::write_pod<uint32_t>(os, kSequenceVersion);
  detail::write_pod<uint32_t>(os, static_cast<uint32_t>(signal.channels));
  detail::write_pod<double>(os, signal.sample_rate);
  detail::write_pod<uint64_t>(os, static_cast<uint64_t>(signal.length()));
  // sample-major interleave: all channels of sample t, then t+1, ...
  for (int64_t t = 0; t < signal.length(); ++t)
    for (int64_t c = 0; c < signal.channels; ++c)
      detail::write_pod<float>(os, static_cast<float>(signal.data[c][t]));
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

inline Signal read_sequence(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open: " + path.string());
  detail::expect_magic(is, kSequenceMagic, "sequence " + path.string());
  const uint32_t version = detail::read_pod<uint32_t>(is, "sequence version");
  if (version != kSequenceVersion)
    throw std::runtime_error("sequence " + path.string() + ": unsupported version " +
                             std::to_string(version));
  Signal signal;
  signal.channels = detail::read_pod<uint32_t>(is, "sequence channels");
  signal.sample_rate = detail::read_pod<double>(is, "sequence sample_rate");
  const uint64_t len = detail::read_pod<uint64_t>(is, "sequence length");
  signal.data.assign(signal.channels, std::vector<double>(len));
  for (uint64_t t = 0; t < len; ++t)
    for (int64_t c = 0; c < signal.channels; ++c)
      signal.data[c][t] = detail::read_pod<float>(is, "sequence samples");
  signal.validate();
  return signal;
}

// ---- PFFN: functional target store ----
// Header {magic, version, m, C, functional-id list, normalization flag},
// then per-frame rows of m*C 32-bit reals, functional-major layout.
// Sequence boundaries come from the manifest via the frame-count law.

inline constexpr char kStoreMagic[4] = {'P', 'F', 'F', 'N'};
inline constexpr uint32_t kStoreVersion = 1;

struct FunctionalStore {
  FunctionalSet set;
  uint32_t channels = 0;
  bool normalized = false;
  std::vector<std::vector<double>> rows;  // each row m*C

  size_t row_dim() const { return set.size() * channels; }
};

inline void write_functional_store(const std::filesystem::path& path,
                                   const FunctionalStore& store) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for writing: " + path.string());
  detail::write_magic(os, kStoreMagic);
  detail::write_pod<uint32_t>(os, kStoreVersion);
  detail::write_pod<uint32_t>(os, static_cast<uint32_t>(store.set.size()));
  detail::write_pod<uint32_t>(os, store.channels);
  for (FunctionalId id : store.set.ids)
    detail::write_pod<uint32_t>(os, static_cast<uint32_t>(id));
  detail::write_pod<uint8_t>(os, store.normalized ? 1 : 0);
  for (const auto& row : store.rows) {
    if (row.size() != store.row_dim())
      throw std::runtime_error("functional store: row layout mismatch");
    for (double v : row) detail::write_pod<float>(os, static_cast<float>(v));
  }
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

inline FunctionalStore read_functional_store(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open: " + path.string());
  detail::expect_magic(is, kStoreMagic, "functional store " + path.string());
  const uint32_t version = detail::read_pod<uint32_t>(is, "store version");
  if (version != kStoreVersion)
    throw std::runtime_error("functional store " + path.string() + ": unsupported version");
  FunctionalStore store;
  const uint32_t m = detail::read_pod<uint32_t>(is, "store m");
  store.channels = detail::read_pod<uint32_t>(is, "store channels");
  for (uint32_t i = 0; i < m; ++i)
    store.set.ids.push_back(
        static_cast<FunctionalId>(detail::read_pod<uint32_t>(is, "store functional id")));
  store.set.validate();
  store.normalized = detail::read_pod<uint8_t>(is, "store flag") != 0;
  const size_t dim = store.row_dim();
  std::vector<float> row(dim);
  while (true) {
    is.read(reinterpret_cast<char*>(row.data()),
            static_cast<std::streamsize>(dim * sizeof(float)));
    if (is.gcount() == 0 && is.eof()) break;
    if (static_cast<size_t>(is.gcount()) != dim * sizeof(float))
      throw std::runtime_error("functional store " + path.string() + ": truncated row");
    store.rows.emplace_back(row.begin(), row.end());
  }
  return store;
}

// ---- normalization stats sidecar (JSON) ----

inline void write_normalization_stats(const std::filesystem::path& path,
                                      const NormalizationStats& stats) {
  json j;
  j["m"] = stats.m;
  j["channels"] = stats.channels;
  j["frame_count"] = stats.frame_count;
  j["mean"] = stats.mean;
  j["std"] = stats.std;
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open for writing: " + path.string());
  os << j.dump(2) << "\n";
}

inline NormalizationStats read_normalization_stats(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open: " + path.string());
  json j = json::parse(is);
  NormalizationStats stats;
  stats.m = j.at("m").get<size_t>();
  stats.channels = j.at("channels").get<size_t>();
  stats.frame_count = j.at("frame_count").get<int64_t>();
  stats.mean = j.at("mean").get<std::vector<double>>();
  stats.std = j.at("std").get<std::vector<double>>();
  return stats;
}

// ---- dataset manifest (JSON) ----

struct ManifestEntry {
  std::string path;
  std::optional<int64_t> label;
  std::optional<std::string> group;
};

struct DatasetManifest {
  int64_t channels = 1;
  double sample_rate = 1.0;
  FrameConfig frame_config;
  std::string task;
  int64_t num_classes = 0;  // 0 for unlabeled
  std::vector<ManifestEntry> entries;
  std::filesystem::path base_dir;  // directory of the manifest file

  std::filesystem::path resolve(const ManifestEntry& e) const { return base_dir / e.path; }
};

inline DatasetManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open manifest: " + path.string());
  json j = json::parse(is);
  DatasetManifest m;
  m.channels = j.at("channels").get<int64_t>();
  m.sample_rate = j.at("sample_rate").get<double>();
  m.frame_config.frame_len = j.at("frame").at("len").get<int64_t>();
  m.frame_config.hop = j.at("frame").at("hop").get<int64_t>();
  m.task = j.value("task", std::string{});
  m.num_classes = j.value("num_classes", int64_t{0});
  for (const auto& e : j.at("sequences")) {
    ManifestEntry entry;
    entry.path = e.at("path").get<std::string>();
    if (e.contains("label")) entry.label = e.at("label").get<int64_t>();
    if (e.contains("group")) entry.group = e.at("group").get<std::string>();
    m.entries.push_back(std::move(entry));
  }
  m.base_dir = path.parent_path();
  m.frame_config.validate();
  if (m.entries.empty()) throw std::runtime_error("manifest has no sequences");
  return m;
}

inline void write_manifest(const std::filesystem::path& path, const DatasetManifest& m) {
  json j;
  j["channels"] = m.channels;
  j["sample_rate"] = m.sample_rate;
  j["frame"] = {{"len", m.frame_config.frame_len}, {"hop", m.frame_config.hop}};
  if (!m.task.empty()) j["task"] = m.task;
  if (m.num_classes > 0) j["num_classes"] = m.num_classes;
  j["sequences"] = json::array();
  for (const auto& e : m.entries) {
    json je;
    je["path"] = e.path;
    if (e.label) je["label"] = *e.label;
    if (e.group) je["group"] = *e.group;
    j["sequences"].push_back(std::move(je));
  }
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open for writing: " + path.string());
  os << j.dump(2) << "\n";
}

// ---- config digest ----

inline std::string config_digest(const json& config) {
  // nlohmann objects keep keys sorted, so dump() is canonical
  const std::string canon = config.dump();
  uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : canon) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

// ---- PFCK: checkpoint ----
// Header {magic, version, config digest}, named 32-bit tensors for
// parameters and optimizer moments, a string section for RNG states and
// scalar metadata.

inline constexpr char kCheckpointMagic[4] = {'P', 'F', 'C', 'K'};
inline constexpr uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::string config_digest;
  ParamStore params;
  std::map<std::string, AdamState> opt_state;
  int64_t opt_step = 0;
  std::map<std::string, std::string> strings;  // rng states, metadata
};

namespace detail {

inline void write_tensor(std::ostream& os, const std::string& name, const Tensor& t) {
  write_string(os, name);
  write_pod<uint32_t>(os, static_cast<uint32_t>(t.rank()));
  for (int64_t d : t.shape) write_pod<uint64_t>(os, static_cast<uint64_t>(d));
  for (double v : t.data) write_pod<float>(os, static_cast<float>(v));
}

inline std::pair<std::string, Tensor> read_tensor(std::istream& is) {
  std::string name = read_string(is, "tensor name");
  const uint32_t rank = read_pod<uint32_t>(is, "tensor rank");
  std::vector<int64_t> shape(rank);
  for (uint32_t i = 0; i < rank; ++i)
    shape[i] = static_cast<int64_t>(read_pod<uint64_t>(is, "tensor shape"));
  Tensor t(shape);
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = read_pod<float>(is, "tensor data");
  return {std::move(name), std::move(t)};
}

}  // namespace detail

inline void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for writing: " + path.string());
  detail::write_magic(os, kCheckpointMagic);
  detail::write_pod<uint32_t>(os, kCheckpointVersion);
  detail::write_string(os, ckpt.config_digest);
  uint32_t n_tensors = static_cast<uint32_t>(ckpt.params.tensors.size() +
                                             2 * ckpt.opt_state.size());
  detail::write_pod<uint32_t>(os, n_tensors);
  for (const auto& [name, t] : ckpt.params.tensors) detail::write_tensor(os, "p." + name, t);
  for (const auto& [name, st] : ckpt.opt_state) {
    detail::write_tensor(os, "om." + name, st.m);
    detail::write_tensor(os, "ov." + name, st.v);
  }
  detail::write_pod<int64_t>(os, ckpt.opt_step);
  detail::write_pod<uint32_t>(os, static_cast<uint32_t>(ckpt.strings.size()));
  for (const auto& [k, v] : ckpt.strings) {
    detail::write_string(os, k);
    detail::write_string(os, v);
  }
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open: " + path.string());
  detail::expect_magic(is, kCheckpointMagic, "checkpoint " + path.string());
  const uint32_t version = detail::read_pod<uint32_t>(is, "checkpoint version");
  if (version != kCheckpointVersion)
    throw std::runtime_error("checkpoint " + path.string() + ": unsupported version");
  Checkpoint ckpt;
  ckpt.config_digest = detail::read_string(is, "config digest");
  const uint32_t n_tensors = detail::read_pod<uint32_t>(is, "tensor count");
  for (uint32_t i = 0; i < n_tensors; ++i) {
    auto [name, t] = detail::read_tensor(is);
    if (name.rfind("p.", 0) == 0)
      ckpt.params.put(name.substr(2), std::move(t));
    else if (name.rfind("om.", 0) == 0)
      ckpt.opt_state[name.substr(3)].m = std::move(t);
    else if (name.rfind("ov.", 0) == 0)
      ckpt.opt_state[name.substr(3)].v = std::move(t);
    else
      throw std::runtime_error("checkpoint: unknown tensor section for " + name);
  }
  ckpt.opt_step = detail::read_pod<int64_t>(is, "optimizer step");
  const uint32_t n_strings = detail::read_pod<uint32_t>(is, "string count");
  for (uint32_t i = 0; i < n_strings; ++i) {
    std::string k = detail::read_string(is, "string key");
    std::string v = detail::read_string(is, "string value");
    ckpt.strings.emplace(std::move(k), std::move(v));
  }
  return ckpt;
}

// ---- CSV helpers ----

class CsvWriter {
 public:
  CsvWriter(const std::filesystem::path& path, const std::string& header) : os_(path) {
    if (!os_) throw std::runtime_error("cannot open for writing: " + path.string());
    os_ << header << "\n";
  }
  void row(const std::string& line) { os_ << line << "\n"; }
  void flush() { os_.flush(); }

 private:
  std::ofstream os_;
};

}  // namespace pfml::io
