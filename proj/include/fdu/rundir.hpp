#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <nlohmann/json.hpp>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "fdu/archive.hpp"
#include "fdu/data.hpp"
#include "fdu/fedsim.hpp"
#include "fdu/unlearn.hpp"

namespace fdu {

inline constexpr const char* kToolVersion = "0.1.0";

/// Errors caused by wrong usage or missing prerequisites (CLI exit code 2).
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace fs = std::filesystem;

inline nlohmann::json read_json_file(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw UsageError("cannot read " + path.string());
  nlohmann::json j;
  is >> j;
  return j;
}

inline void write_json_file(const fs::path& path, const nlohmann::json& j) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << j.dump(2) << "\n";
}

// ---- single-writer lock -------------------------------------------------------

/// One writer per run directory: creating the lock file is exclusive, and the
/// file is removed when the guard leaves scope.
class RunLock {
 public:
  explicit RunLock(const fs::path& run_dir) : path_(run_dir / ".lock") {
    std::error_code ec;
    fs::create_directories(run_dir, ec);
    // "wx" fails if the file already exists, so acquisition is atomic.
    std::FILE* f = std::fopen(path_.string().c_str(), "wx");
    if (!f) {
      throw UsageError("run directory is locked by another writer: " + path_.string());
    }
    std::fputs("locked\n", f);
    std::fclose(f);
  }
  ~RunLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  fs::path path_;
};

// ---- manifest -----------------------------------------------------------------

struct RunManifest {
  std::string run_id;
  nlohmann::json config = nlohmann::json::object();
  nlohmann::json stages = nlohmann::json::object();      // stage -> bool / method map
  nlohmann::json artifacts = nlohmann::json::object();   // stage -> relative paths
  std::string tool_version = kToolVersion;

  static fs::path path_in(const fs::path& run_dir) { return run_dir / "manifest.json"; }

  static RunManifest load(const fs::path& run_dir) {
    const nlohmann::json j = read_json_file(path_in(run_dir));
    RunManifest m;
    m.run_id = j.at("run_id").get<std::string>();
    m.config = j.value("config", nlohmann::json::object());
    m.stages = j.value("stages", nlohmann::json::object());
    m.artifacts = j.value("artifacts", nlohmann::json::object());
    m.tool_version = j.value("tool_version", std::string(kToolVersion));
    return m;
  }

  static RunManifest load_or_create(const fs::path& run_dir, const std::string& run_id) {
    if (fs::exists(path_in(run_dir))) return load(run_dir);
    RunManifest m;
    m.run_id = run_id;
    return m;
  }

  void save(const fs::path& run_dir) const {
    nlohmann::json j;
    j["run_id"] = run_id;
    j["config"] = config;
    j["stages"] = stages;
    j["artifacts"] = artifacts;
    j["tool_version"] = tool_version;
    write_json_file(path_in(run_dir), j);
  }

  bool stage_done(const std::string& stage) const {
    return stages.contains(stage) && stages.at(stage).is_boolean() &&
           stages.at(stage).get<bool>();
  }
  bool unlearn_done(const std::string& method) const {
    return stages.contains("unlearn") && stages.at("unlearn").contains(method) &&
           stages.at("unlearn").at(method).get<bool>();
  }
  std::vector<std::string> unlearn_methods_done() const {
    std::vector<std::string> out;
    if (!stages.contains("unlearn")) return out;
    for (const auto& [method, done] : stages.at("unlearn").items()) {
      if (done.get<bool>()) out.push_back(method);
    }
    return out;
  }

  /// Requires a prerequisite stage, naming the subcommand that produces it.
  void require_stage(const std::string& stage) const {
    if (!stage_done(stage)) {
      throw UsageError("run is missing the '" + stage + "' stage; run the `" + stage +
                       "` subcommand first");
    }
  }
};

// ---- dataset directory ----------------------------------------------------------

inline void save_domains(const fs::path& data_dir, const std::vector<DomainDataset>& domains,
                         const nlohmann::json& gen_config) {
  fs::create_directories(data_dir);
  nlohmann::json meta;
  meta["generator"] = gen_config;
  nlohmann::json list = nlohmann::json::array();
  for (std::size_t i = 0; i < domains.size(); ++i) {
    std::ostringstream name;
    name << "domain_" << std::setw(2) << std::setfill('0') << i << ".tar";
    save_domain(data_dir / name.str(), domains[i]);
    list.push_back({{"file", name.str()},
                    {"domain_id", domains[i].domain_id},
                    {"transform_spec", domains[i].transform_spec},
                    {"n", domains[i].size()}});
  }
  meta["domains"] = list;
  write_json_file(data_dir / "domains.json", meta);
}

/// Loads a data directory. Accepts our own layout (domains.json) or a bare
/// directory of *.tar archives with images/labels entries (external import).
inline std::vector<DomainDataset> load_domains_dir(const fs::path& data_dir) {
  std::vector<DomainDataset> out;
  if (fs::exists(data_dir / "domains.json")) {
    const nlohmann::json meta = read_json_file(data_dir / "domains.json");
    for (const auto& d : meta.at("domains")) {
      out.push_back(load_domain(data_dir / d.at("file").get<std::string>()));
    }
    return out;
  }
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(data_dir)) {
    if (e.path().extension() == ".tar") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files) out.push_back(load_domain(f));
  if (out.empty()) throw UsageError("no datasets found in " + data_dir.string());
  return out;
}

// ---- correctness log --------------------------------------------------------------

// Bit-packed correctness log. Client-major; within a client the epoch steps
// (round * local_epochs + epoch) run in time order and samples in sample-id
// order. Bits pack LSB-first; every client's block starts on a byte boundary.
inline void save_correctness(const fs::path& path,
                             const std::vector<std::vector<std::vector<std::uint8_t>>>& log) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  for (const auto& client : log) {
    std::vector<std::uint8_t> packed;
    std::size_t bit = 0;
    std::uint8_t cur = 0;
    for (const auto& epoch : client) {
      for (const std::uint8_t b : epoch) {
        if (b) cur |= static_cast<std::uint8_t>(1u << bit);
        if (++bit == 8) {
          packed.push_back(cur);
          cur = 0;
          bit = 0;
        }
      }
    }
    if (bit) packed.push_back(cur);
    os.write(reinterpret_cast<const char*>(packed.data()),
             static_cast<std::streamsize>(packed.size()));
  }
}

inline std::vector<std::vector<std::vector<std::uint8_t>>> load_correctness(
    const fs::path& path, const std::vector<std::size_t>& client_sizes, int epoch_steps) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  std::vector<std::vector<std::vector<std::uint8_t>>> log(client_sizes.size());
  for (std::size_t i = 0; i < client_sizes.size(); ++i) {
    const std::size_t total_bits = client_sizes[i] * static_cast<std::size_t>(epoch_steps);
    const std::size_t bytes = (total_bits + 7) / 8;
    std::vector<std::uint8_t> packed(bytes);
    if (!is.read(reinterpret_cast<char*>(packed.data()), static_cast<std::streamsize>(bytes))) {
      throw std::runtime_error("correctness log truncated");
    }
    log[i].assign(static_cast<std::size_t>(epoch_steps),
                  std::vector<std::uint8_t>(client_sizes[i], 0));
    std::size_t at = 0;
    for (int t = 0; t < epoch_steps; ++t) {
      for (std::size_t s = 0; s < client_sizes[i]; ++s, ++at) {
        log[i][static_cast<std::size_t>(t)][s] = (packed[at / 8] >> (at % 8)) & 1u;
      }
    }
  }
  return log;
}

// ---- trace persistence ---------------------------------------------------------

inline fs::path round_dir(const fs::path& run_dir, int round) {
  std::ostringstream os;
  os << "round_" << std::setw(4) << std::setfill('0') << round;
  return run_dir / os.str();
}

inline fs::path client_delta_path(const fs::path& run_dir, int round, std::size_t client) {
  std::ostringstream os;
  os << "client_" << std::setw(2) << std::setfill('0') << client << "_delta.tar";
  return round_dir(run_dir, round) / os.str();
}

inline void save_trace(const fs::path& run_dir, const TrainingTrace& trace) {
  nlohmann::json cfg_json;
  cfg_json["fl"] = trace.cfg.to_json();
  cfg_json["spec"] = trace.spec.to_json();
  cfg_json["domain_ids"] = trace.domain_ids;
  cfg_json["client_sizes"] = trace.client_sizes;
  write_json_file(run_dir / "config.json", cfg_json);

  for (int t = 0; t <= trace.rounds_recorded(); ++t) {
    fs::create_directories(round_dir(run_dir, t));
    ModelCheckpoint global;
    global.spec = trace.spec;
    global.params = trace.round_checkpoints.at(static_cast<std::size_t>(t));
    global.seed = trace.cfg.seed;
    global.provenance = "round" + std::to_string(t);
    save_checkpoint(round_dir(run_dir, t) / "global.tar", global);
    if (t == trace.rounds_recorded()) break;
    for (std::size_t i = 0; i < trace.num_clients(); ++i) {
      const auto delta = trace.client_delta(t, i);
      std::map<std::string, AnyTensor> entries;
      for (const auto& [name, d] : delta) entries.emplace(name, d);
      write_archive(client_delta_path(run_dir, t, i), entries);
    }
  }
  save_correctness(run_dir / "correctness.bin", trace.correctness);
}

inline TrainingTrace load_trace(const fs::path& run_dir) {
  const nlohmann::json cfg_json = read_json_file(run_dir / "config.json");
  TrainingTrace trace;
  trace.cfg = FLConfig::from_json(cfg_json.at("fl"));
  trace.spec = ModelSpec::from_json(cfg_json.at("spec"));
  trace.domain_ids = cfg_json.at("domain_ids").get<std::vector<std::string>>();
  trace.client_sizes = cfg_json.at("client_sizes").get<std::vector<std::size_t>>();

  for (int t = 0; t <= trace.cfg.rounds; ++t) {
    const ModelCheckpoint global = load_checkpoint(round_dir(run_dir, t) / "global.tar");
    trace.round_checkpoints.push_back(global.params);
    if (t == trace.cfg.rounds) break;
    std::vector<ParamMap> posts;
    for (std::size_t i = 0; i < trace.client_sizes.size(); ++i) {
      const auto entries = read_archive(client_delta_path(run_dir, t, i));
      ParamMap post;
      for (const auto& [name, any] : entries) {
        const TensorD& d = std::get<TensorD>(any);
        const TensorF& base = global.params.at(name);
        TensorF p(d.shape);
        for (std::size_t j = 0; j < d.data.size(); ++j) {
          p.data[j] = static_cast<float>(static_cast<double>(base.data[j]) + d.data[j]);
        }
        post.emplace(name, std::move(p));
      }
      posts.push_back(std::move(post));
    }
    trace.client_post.push_back(std::move(posts));
  }
  trace.correctness = load_correctness(run_dir / "correctness.bin", trace.client_sizes,
                                       trace.cfg.rounds * trace.cfg.local_epochs);
  return trace;
}

// ---- unlearn reports ------------------------------------------------------------

inline void save_unlearn_report(const fs::path& run_dir, const UnlearnReport& report) {
  const fs::path dir = run_dir / ("unlearn_" + report.method);
  fs::create_directories(dir);
  save_checkpoint(dir / "model.tar", report.unlearned);
  write_json_file(dir / "report.json", report.to_json());
}

}  // namespace fdu
