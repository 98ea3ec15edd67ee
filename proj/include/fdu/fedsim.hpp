#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "fdu/data.hpp"
#include "fdu/metrics.hpp"
#include "fdu/model.hpp"
#include "fdu/rng.hpp"

namespace fdu {

struct FLConfig {
  int rounds = 50;
  int local_epochs = 10;
  double lr = 0.01;
  double momentum = 0.9;
  int batch_size = 64;
  std::uint64_t seed = 0;
  std::string aggregator = "fedavg";

  void validate() const {
    if (rounds < 1) throw std::invalid_argument("rounds must be >= 1");
    // lr == 0 is allowed so no-op updates stay expressible in tests.
    if (lr < 0.0 || !std::isfinite(lr)) throw std::invalid_argument("lr must be >= 0");
    if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    if (local_epochs < 1) throw std::invalid_argument("local_epochs must be >= 1");
    if (aggregator != "fedavg") throw std::invalid_argument("unknown aggregator: " + aggregator);
  }

  nlohmann::json to_json() const {
    return {{"rounds", rounds},       {"local_epochs", local_epochs}, {"lr", lr},
            {"momentum", momentum},   {"batch_size", batch_size},     {"seed", seed},
            {"aggregator", aggregator}};
  }
  static FLConfig from_json(const nlohmann::json& j) {
    FLConfig c;
    c.rounds = j.at("rounds").get<int>();
    c.local_epochs = j.at("local_epochs").get<int>();
    c.lr = j.at("lr").get<double>();
    c.momentum = j.at("momentum").get<double>();
    c.batch_size = j.at("batch_size").get<int>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.aggregator = j.at("aggregator").get<std::string>();
    return c;
  }
};

/// Everything a federated run leaves behind: per-round global checkpoints,
/// each client's post-training parameters (deltas are derived on demand),
/// and per-epoch correctness bits per client sample. Exact reconstruction:
/// client post params are stored verbatim, so base + delta round-trips
/// bit-for-bit.
struct TrainingTrace {
  ModelSpec spec;
  FLConfig cfg;
  std::vector<std::string> domain_ids;
  std::vector<std::size_t> client_sizes;
  // round_checkpoints[t] = global parameters at the START of round t;
  // round_checkpoints[rounds] = final global model.
  std::vector<ParamMap> round_checkpoints;
  // client_post[t][i] = client i's parameters after local training in round t.
  std::vector<std::vector<ParamMap>> client_post;
  // correctness[i][t * local_epochs + e][s]: 1 if client i's model predicted
  // sample s correctly after local epoch e of round t (sample-id order).
  std::vector<std::vector<std::vector<std::uint8_t>>> correctness;

  int rounds_recorded() const { return static_cast<int>(client_post.size()); }
  std::size_t num_clients() const { return client_sizes.size(); }

  /// delta = post - base in f64. Exact for any realistically scaled floats.
  std::map<std::string, TensorD> client_delta(int round, std::size_t client) const {
    const ParamMap& base = round_checkpoints.at(static_cast<std::size_t>(round));
    const ParamMap& post = client_post.at(static_cast<std::size_t>(round)).at(client);
    std::map<std::string, TensorD> delta;
    for (const auto& [name, t] : post) {
      const TensorF& b = base.at(name);
      TensorD d(t.shape);
      for (std::size_t i = 0; i < t.data.size(); ++i) {
        d.data[i] = static_cast<double>(t.data[i]) - static_cast<double>(b.data[i]);
      }
      delta.emplace(name, std::move(d));
    }
    return delta;
  }
};

struct LocalResult {
  ParamMap post_params;
  std::vector<std::vector<std::uint8_t>> epoch_correctness;  // [local_epochs][N]
};

namespace detail_fed {

inline std::vector<std::vector<std::size_t>> make_batches(std::size_t n, int batch_size,
                                                          Rng& rng) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  rng.shuffle(order);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t at = 0; at < n; at += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(n, at + static_cast<std::size_t>(batch_size));
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(at),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

inline TensorF gather_images(const TensorF& images, const std::vector<std::size_t>& idx) {
  const std::size_t c = images.dim(1), h = images.dim(2), w = images.dim(3);
  TensorF out({idx.size(), c, h, w});
  for (std::size_t r = 0; r < idx.size(); ++r) {
    std::copy_n(&images.data[idx[r] * c * h * w], c * h * w, &out.data[r * c * h * w]);
  }
  return out;
}

inline TensorI64 gather_labels(const TensorI64& labels, const std::vector<std::size_t>& idx) {
  TensorI64 out({idx.size()});
  for (std::size_t r = 0; r < idx.size(); ++r) out[r] = labels[idx[r]];
  return out;
}

}  // namespace detail_fed

/// Predicts over a full dataset in batches; returns one correctness bit per
/// sample in dataset order.
inline std::vector<std::uint8_t> correctness_bits(const ModelCheckpoint& ckpt,
                                                  const DomainDataset& ds,
                                                  int batch_size = 256) {
  const std::size_t n = ds.size();
  std::vector<std::uint8_t> bits(n, 0);
  for (std::size_t at = 0; at < n; at += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(n, at + static_cast<std::size_t>(batch_size));
    std::vector<std::size_t> idx(end - at);
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = at + i;
    const TensorI64 pred = predict(ckpt, detail_fed::gather_images(ds.images, idx));
    for (std::size_t i = 0; i < idx.size(); ++i) {
      bits[at + i] = pred[i] == ds.labels[at + i] ? 1 : 0;
    }
  }
  return bits;
}

inline double accuracy(const ModelCheckpoint& ckpt, const DomainDataset& ds) {
  const auto bits = correctness_bits(ckpt, ds);
  if (bits.empty()) return 0.0;
  std::size_t hit = 0;
  for (const auto b : bits) hit += b;
  return static_cast<double>(hit) / static_cast<double>(bits.size());
}

/// Per-parameter learning-rate scales for the adaptive retraining variant;
/// absent means plain SGD.
struct LrScales {
  ParamMap scales;
};

/// One client's local training: SGD with momentum over shuffled mini-batches.
/// Momentum buffers start at zero (they do not persist across rounds). After
/// every epoch the correctness bits over the full training set are recorded.
inline LocalResult local_update(const ModelCheckpoint& ckpt, const DomainDataset& train_set,
                                const FLConfig& cfg, Rng rng,
                                const LrScales* lr_scales = nullptr) {
  if (train_set.size() == 0) throw std::invalid_argument("empty training set");
  ModelCheckpoint cur = ckpt;
  ParamMap velocity = zeros_like(cur.params);
  LocalResult result;
  for (int epoch = 0; epoch < cfg.local_epochs; ++epoch) {
    const auto batches = detail_fed::make_batches(train_set.size(), cfg.batch_size, rng);
    for (const auto& batch_idx : batches) {
      const TensorF x = detail_fed::gather_images(train_set.images, batch_idx);
      const TensorI64 y = detail_fed::gather_labels(train_set.labels, batch_idx);
      GradResult g = loss_and_grad(cur, x, y, Wrt::params);
      for (auto& [name, v] : velocity) {
        const TensorF& grad = g.param_grads.at(name);
        TensorF& w = cur.params.at(name);
        const float* scale =
            lr_scales ? lr_scales->scales.at(name).data.data() : nullptr;
        for (std::size_t i = 0; i < v.data.size(); ++i) {
          v.data[i] = static_cast<float>(cfg.momentum * v.data[i] + grad.data[i]);
          const double step = cfg.lr * (scale ? scale[i] : 1.0f);
          w.data[i] = static_cast<float>(w.data[i] - step * v.data[i]);
        }
      }
    }
    result.epoch_correctness.push_back(correctness_bits(cur, train_set));
  }
  result.post_params = std::move(cur.params);
  return result;
}

/// Eq-style size weights as exact rationals (numerator/denominator) plus the
/// converted double values. The numerators always sum to the denominator.
struct AggregationWeights {
  std::vector<std::size_t> numerators;
  std::size_t denominator = 0;
  std::vector<double> values;
};

inline AggregationWeights aggregation_weights(const std::vector<std::size_t>& sizes) {
  AggregationWeights w;
  w.numerators = sizes;
  for (const std::size_t s : sizes) w.denominator += s;
  if (w.denominator == 0) throw std::invalid_argument("aggregation weights need nonzero sizes");
  for (const std::size_t s : sizes) {
    w.values.push_back(static_cast<double>(s) / static_cast<double>(w.denominator));
  }
  return w;
}

/// Size-weighted aggregation: params = base + sum_i w_i * delta_i, summed in
/// fixed client-index order with f64 accumulation.
inline ModelCheckpoint aggregate(const ModelCheckpoint& base,
                                 const std::vector<ParamMap>& deltas,
                                 const std::vector<std::size_t>& sizes) {
  if (deltas.empty()) throw std::invalid_argument("aggregate: empty update list");
  if (deltas.size() != sizes.size()) throw std::invalid_argument("aggregate: sizes mismatch");
  const AggregationWeights w = aggregation_weights(sizes);
  ModelCheckpoint out = base;
  std::map<std::string, TensorD> acc;
  for (const auto& [name, t] : base.params) acc.emplace(name, TensorD::zeros(t.shape));
  for (std::size_t i = 0; i < deltas.size(); ++i) {
    for (const auto& [name, d] : deltas[i]) {
      if (d.shape != base.params.at(name).shape) {
        throw std::invalid_argument("aggregate: delta shape mismatch for " + name);
      }
      TensorD& a = acc.at(name);
      for (std::size_t j = 0; j < d.data.size(); ++j) {
        a.data[j] += w.values[i] * static_cast<double>(d.data[j]);
      }
    }
  }
  for (auto& [name, t] : out.params) {
    const TensorD& a = acc.at(name);
    for (std::size_t j = 0; j < t.data.size(); ++j) {
      t.data[j] = static_cast<float>(static_cast<double>(t.data[j]) + a.data[j]);
    }
  }
  return out;
}

struct TraceOptions {
  bool record_checkpoints = true;
  bool record_client_post = true;
  bool record_correctness = true;
};

/// Optional per-client override of the local update (used for marker
/// injection and similar protocol experiments). Receives the trace recorded
/// so far; returning nullopt falls back to the plain local update.
using ClientHook = std::function<std::optional<LocalResult>(
    int round, std::size_t client, const ModelCheckpoint& global, const TrainingTrace& so_far)>;

/// The federated training loop: broadcast, local updates in client-index
/// order, size-weighted aggregation. Deterministic in (datasets, spec, cfg).
inline std::pair<ModelCheckpoint, TrainingTrace> train_federated(
    const std::vector<DomainDataset>& train_sets, const ModelSpec& spec, const FLConfig& cfg,
    const TraceOptions& opts = {}, const ClientHook& hook = nullptr) {
  cfg.validate();
  if (train_sets.size() < 2) throw std::invalid_argument("need at least 2 clients");
  TrainingTrace trace;
  trace.spec = spec;
  trace.cfg = cfg;
  std::vector<std::size_t> sizes;
  for (const auto& ds : train_sets) {
    trace.domain_ids.push_back(ds.domain_id);
    sizes.push_back(ds.size());
  }
  trace.client_sizes = sizes;
  if (opts.record_correctness) trace.correctness.resize(train_sets.size());

  ModelCheckpoint global = init_params(spec, derive_seed(cfg.seed, "init"));
  global.provenance = "round0";
  for (int round = 0; round < cfg.rounds; ++round) {
    if (opts.record_checkpoints) trace.round_checkpoints.push_back(global.params);
    std::vector<ParamMap> deltas;
    std::vector<ParamMap> posts;
    for (std::size_t i = 0; i < train_sets.size(); ++i) {
      LocalResult local;
      std::optional<LocalResult> hooked;
      if (hook) hooked = hook(round, i, global, trace);
      if (hooked) {
        local = std::move(*hooked);
      } else {
        try {
          local = local_update(global, train_sets[i],
                               cfg, derive_rng(cfg.seed, "client", {i, static_cast<std::uint64_t>(round)}));
        } catch (const std::exception& e) {
          throw std::runtime_error("client " + std::to_string(i) + ": " + e.what());
        }
      }
      ParamMap delta = local.post_params;
      for (auto& [name, t] : delta) {
        const TensorF& b = global.params.at(name);
        for (std::size_t j = 0; j < t.data.size(); ++j) {
          t.data[j] = static_cast<float>(static_cast<double>(t.data[j]) -
                                         static_cast<double>(b.data[j]));
        }
      }
      if (opts.record_correctness) {
        for (auto& bits : local.epoch_correctness) {
          trace.correctness[i].push_back(std::move(bits));
        }
      }
      if (opts.record_client_post) posts.push_back(std::move(local.post_params));
      deltas.push_back(std::move(delta));
    }
    if (opts.record_client_post) trace.client_post.push_back(std::move(posts));
    global = aggregate(global, deltas, sizes);
    global.provenance = "round" + std::to_string(round + 1);
  }
  if (opts.record_checkpoints) trace.round_checkpoints.push_back(global.params);
  return {std::move(global), std::move(trace)};
}

/// One test-accuracy record per domain.
inline std::vector<MetricRecord> evaluate_per_domain(const ModelCheckpoint& ckpt,
                                                     const std::vector<DomainDataset>& test_sets,
                                                     const std::string& run_id = "",
                                                     const std::string& method = "") {
  std::vector<MetricRecord> out;
  for (const auto& ds : test_sets) {
    MetricRecord r;
    r.run_id = run_id;
    r.method = method;
    r.domain = ds.domain_id;
    r.metric = "test_accuracy";
    r.value = accuracy(ckpt, ds);
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace fdu
