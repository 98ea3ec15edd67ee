#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <map>
#include <nlohmann/json.hpp>
#include <stdexcept>
#include <string>
#include <vector>

#include "fdu/fedsim.hpp"
#include "fdu/model.hpp"

namespace fdu {

inline const std::vector<std::string>& unlearn_method_names() {
  static const std::vector<std::string> names = {
      "retrain", "rapid_retrain", "federaser", "increase_loss", "class_pruning"};
  return names;
}

struct UnlearnReport {
  ModelCheckpoint unlearned;
  std::string method;
  double target_train_acc = 0.0;
  std::map<std::string, double> per_domain_test_acc;
  double wall_time_seconds = 0.0;
  int rounds_used = 0;
  // Mean L2 distance between full-model and unlearned feature vectors on the
  // target client's data. Informational only; nothing gates on it.
  double target_feature_shift_l2 = 0.0;
  nlohmann::json method_params;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["method"] = method;
    j["target_train_acc"] = target_train_acc;
    j["per_domain_test_acc"] = per_domain_test_acc;
    j["wall_time_seconds"] = wall_time_seconds;
    j["rounds_used"] = rounds_used;
    j["target_feature_shift_l2"] = target_feature_shift_l2;
    j["method_params"] = method_params;
    return j;
  }
};

namespace detail_unlearn {

inline std::vector<DomainDataset> without_client(const std::vector<DomainDataset>& sets,
                                                 std::size_t k) {
  if (k >= sets.size()) throw std::invalid_argument("target client index out of range");
  std::vector<DomainDataset> out;
  for (std::size_t i = 0; i < sets.size(); ++i) {
    if (i != k) out.push_back(sets[i]);
  }
  return out;
}

inline double mean_feature_shift(const ModelCheckpoint& full, const ModelCheckpoint& unlearned,
                                 const DomainDataset& target) {
  const std::size_t n = target.size();
  double total = 0.0;
  constexpr std::size_t kBatch = 256;
  for (std::size_t at = 0; at < n; at += kBatch) {
    const std::size_t end = std::min(n, at + kBatch);
    std::vector<std::size_t> idx(end - at);
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = at + i;
    const TensorF batch = detail_fed::gather_images(target.images, idx);
    const TensorF fa = feature(full, batch);
    const TensorF fb = feature(unlearned, batch);
    const std::size_t d = fa.dim(1);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double diff = static_cast<double>(fa.at2(i, j)) - static_cast<double>(fb.at2(i, j));
        s += diff * diff;
      }
      total += std::sqrt(s);
    }
  }
  return n ? total / static_cast<double>(n) : 0.0;
}

/// Accuracies in every report are recomputed from the returned checkpoint.
inline void finish_report(UnlearnReport& report, const ModelCheckpoint* full,
                          const std::vector<DomainDataset>& train_sets,
                          const std::vector<DomainDataset>& test_sets, std::size_t k,
                          std::chrono::steady_clock::time_point started) {
  report.target_train_acc = accuracy(report.unlearned, train_sets[k]);
  for (const auto& ds : test_sets) {
    report.per_domain_test_acc[ds.domain_id] = accuracy(report.unlearned, ds);
  }
  if (full) {
    report.target_feature_shift_l2 = mean_feature_shift(*full, report.unlearned, train_sets[k]);
  }
  report.wall_time_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
}

/// Warm-started federated fine-tuning on a client subset (no trace).
inline ModelCheckpoint fed_finetune(const ModelCheckpoint& start,
                                    const std::vector<DomainDataset>& clients,
                                    const FLConfig& cfg, int rounds, std::string_view stream_label,
                                    const LrScales* scales = nullptr) {
  ModelCheckpoint global = start;
  std::vector<std::size_t> sizes;
  for (const auto& ds : clients) sizes.push_back(ds.size());
  for (int round = 0; round < rounds; ++round) {
    std::vector<ParamMap> deltas;
    for (std::size_t i = 0; i < clients.size(); ++i) {
      LocalResult local =
          local_update(global, clients[i], cfg,
                       derive_rng(cfg.seed, stream_label, {i, static_cast<std::uint64_t>(round)}),
                       scales);
      ParamMap delta = std::move(local.post_params);
      for (auto& [name, t] : delta) {
        const TensorF& b = global.params.at(name);
        for (std::size_t j = 0; j < t.data.size(); ++j) {
          t.data[j] = static_cast<float>(static_cast<double>(t.data[j]) -
                                         static_cast<double>(b.data[j]));
        }
      }
      deltas.push_back(std::move(delta));
    }
    global = aggregate(global, deltas, sizes);
  }
  return global;
}

}  // namespace detail_unlearn

// ---- retrain ----------------------------------------------------------------

/// The oracle every other method is judged against: a from-scratch federated
/// run on the remaining clients with the same config. Bit-identical to
/// calling train_federated on the remaining client list directly.
inline UnlearnReport retrain(const std::vector<DomainDataset>& train_sets,
                             const std::vector<DomainDataset>& test_sets, std::size_t k,
                             const ModelSpec& spec, const FLConfig& cfg,
                             const ModelCheckpoint* full = nullptr) {
  const auto started = std::chrono::steady_clock::now();
  const auto remaining = detail_unlearn::without_client(train_sets, k);
  TraceOptions opts;
  opts.record_checkpoints = false;
  opts.record_client_post = false;
  opts.record_correctness = false;
  auto [ckpt, trace] = train_federated(remaining, spec, cfg, opts);
  (void)trace;
  UnlearnReport report;
  report.method = "retrain";
  report.unlearned = std::move(ckpt);
  report.unlearned.provenance = "unlearn_retrain";
  report.rounds_used = cfg.rounds;
  report.method_params = {{"seed", cfg.seed}};
  detail_unlearn::finish_report(report, full, train_sets, test_sets, k, started);
  return report;
}

// ---- rapid retrain ----------------------------------------------------------

struct RapidRetrainParams {
  bool warm_start = true;
  double curvature_damping = 1e-3;
  double rounds_fraction = 0.4;
};

/// Warm-started accelerated retraining on the remaining clients. Per-parameter
/// learning rates are scaled by a damped diagonal curvature proxy accumulated
/// from the squared historical client updates in the trace:
///   G_j = mean over (round, remaining client) of delta_j^2
///   scale_j = clamp(sqrt((mean(G) + d) / (G_j + d)), 1/8, 8),  d = damping * mean(G)
/// so parameters that historically moved a lot take smaller steps.
inline UnlearnReport rapid_retrain(const TrainingTrace& trace,
                                   const std::vector<DomainDataset>& train_sets,
                                   const std::vector<DomainDataset>& test_sets, std::size_t k,
                                   const FLConfig& cfg, const RapidRetrainParams& params,
                                   const ModelCheckpoint& full) {
  const auto started = std::chrono::steady_clock::now();
  const int rounds_used = static_cast<int>(
      std::ceil(params.rounds_fraction * static_cast<double>(cfg.rounds)));
  const auto remaining = detail_unlearn::without_client(train_sets, k);

  UnlearnReport report;
  report.method = "rapid_retrain";
  report.rounds_used = rounds_used;
  report.method_params = {{"warm_start", params.warm_start},
                          {"curvature_damping", params.curvature_damping},
                          {"rounds_fraction", params.rounds_fraction},
                          {"lr_scale_rule", "clamp(sqrt((meanG+d)/(G+d)), 1/8, 8)"}};
  if (rounds_used == 0) {
    report.unlearned = full;
    report.unlearned.provenance = "unlearn_rapid_retrain";
    detail_unlearn::finish_report(report, &full, train_sets, test_sets, k, started);
    return report;
  }
  if (trace.rounds_recorded() == 0) throw std::invalid_argument("trace has no recorded rounds");

  // Diagonal curvature proxy from the stored history of the remaining clients.
  std::map<std::string, TensorD> sq_sum;
  for (const auto& [name, t] : full.params) sq_sum.emplace(name, TensorD::zeros(t.shape));
  std::size_t terms = 0;
  for (int t = 0; t < trace.rounds_recorded(); ++t) {
    for (std::size_t i = 0; i < trace.num_clients(); ++i) {
      if (i == k) continue;
      const auto delta = trace.client_delta(t, i);
      for (auto& [name, acc] : sq_sum) {
        const TensorD& d = delta.at(name);
        for (std::size_t j = 0; j < acc.data.size(); ++j) acc.data[j] += d.data[j] * d.data[j];
      }
      ++terms;
    }
  }
  double g_mean = 0.0;
  std::size_t count = 0;
  for (auto& [name, acc] : sq_sum) {
    for (double& v : acc.data) {
      v /= static_cast<double>(terms);
      g_mean += v;
    }
    count += acc.data.size();
  }
  g_mean /= static_cast<double>(count);
  const double damp = params.curvature_damping * g_mean + 1e-30;
  LrScales scales;
  for (const auto& [name, acc] : sq_sum) {
    TensorF s(acc.shape);
    for (std::size_t j = 0; j < acc.data.size(); ++j) {
      const double raw = std::sqrt((g_mean + damp) / (acc.data[j] + damp));
      s.data[j] = static_cast<float>(std::clamp(raw, 0.125, 8.0));
    }
    scales.scales.emplace(name, std::move(s));
  }

  ModelCheckpoint start = params.warm_start ? full : init_params(full.spec, derive_seed(cfg.seed, "init"));
  report.unlearned = detail_unlearn::fed_finetune(start, remaining, cfg, rounds_used,
                                                  "rapid_retrain", &scales);
  report.unlearned.provenance = "unlearn_rapid_retrain";
  detail_unlearn::finish_report(report, &full, train_sets, test_sets, k, started);
  return report;
}

// ---- federaser --------------------------------------------------------------

struct FedEraserParams {
  double calibration_ratio = 0.5;  // fraction of local epochs spent calibrating
  int retain_interval = 1;         // replay every retain_interval-th round
};

/// History replay: starting from the round-0 global model, each retained
/// round is replayed with the remaining clients running short calibration
/// updates. The applied update per client takes the DIRECTION of its stored
/// historical update with the NORM of its calibration update (norms taken
/// per named parameter tensor), aggregated with the usual size weights. The
/// target client's stored updates are never read.
inline UnlearnReport federaser(const TrainingTrace& trace,
                               const std::vector<DomainDataset>& train_sets,
                               const std::vector<DomainDataset>& test_sets, std::size_t k,
                               const FedEraserParams& params,
                               const ModelCheckpoint* full = nullptr) {
  const auto started = std::chrono::steady_clock::now();
  if (params.retain_interval < 1) throw std::invalid_argument("retain_interval must be >= 1");
  if (trace.rounds_recorded() == 0) throw std::invalid_argument("retained history is empty");
  const FLConfig& cfg = trace.cfg;
  const int cal_epochs = static_cast<int>(
      std::ceil(params.calibration_ratio * static_cast<double>(cfg.local_epochs)));
  FLConfig cal_cfg = cfg;
  cal_cfg.local_epochs = std::max(1, cal_epochs);

  std::vector<std::size_t> remaining_idx;
  std::vector<std::size_t> sizes;
  for (std::size_t i = 0; i < train_sets.size(); ++i) {
    if (i == k) continue;
    remaining_idx.push_back(i);
    sizes.push_back(train_sets[i].size());
  }

  ModelCheckpoint global;
  global.spec = trace.spec;
  global.params = trace.round_checkpoints.at(0);
  global.seed = cfg.seed;
  global.provenance = "unlearn_federaser";

  int replayed = 0;
  for (int t = 0; t < trace.rounds_recorded(); t += params.retain_interval) {
    std::vector<ParamMap> updates;
    for (std::size_t ri = 0; ri < remaining_idx.size(); ++ri) {
      const std::size_t i = remaining_idx[ri];
      LocalResult cal = local_update(
          global, train_sets[i], cal_cfg,
          derive_rng(cfg.seed, "federaser_cal", {i, static_cast<std::uint64_t>(t)}));
      const auto hist = trace.client_delta(t, i);
      ParamMap update;
      for (const auto& [name, h] : hist) {
        const TensorF& base = global.params.at(name);
        const TensorF& post = cal.post_params.at(name);
        double hist_norm_sq = 0.0, cal_norm_sq = 0.0;
        TensorD cal_delta(h.shape);
        for (std::size_t j = 0; j < h.data.size(); ++j) {
          hist_norm_sq += h.data[j] * h.data[j];
          cal_delta.data[j] =
              static_cast<double>(post.data[j]) - static_cast<double>(base.data[j]);
          cal_norm_sq += cal_delta.data[j] * cal_delta.data[j];
        }
        TensorF u(h.shape);
        if (hist_norm_sq == 0.0) {
          // Degenerate history: fall back to the calibration step itself.
          for (std::size_t j = 0; j < u.data.size(); ++j) {
            u.data[j] = static_cast<float>(cal_delta.data[j]);
          }
        } else {
          const double scale = std::sqrt(cal_norm_sq) / std::sqrt(hist_norm_sq);
          for (std::size_t j = 0; j < u.data.size(); ++j) {
            u.data[j] = static_cast<float>(h.data[j] * scale);
          }
        }
        update.emplace(name, std::move(u));
      }
      updates.push_back(std::move(update));
    }
    global = aggregate(global, updates, sizes);
    ++replayed;
  }

  UnlearnReport report;
  report.method = "federaser";
  report.unlearned = std::move(global);
  report.unlearned.provenance = "unlearn_federaser";
  report.rounds_used = replayed;
  report.method_params = {{"calibration_ratio", params.calibration_ratio},
                          {"retain_interval", params.retain_interval},
                          {"calibration_epochs", cal_cfg.local_epochs},
                          {"norm_granularity", "per_tensor"}};
  detail_unlearn::finish_report(report, full, train_sets, test_sets, k, started);
  return report;
}

// ---- increase loss ----------------------------------------------------------

struct IncreaseLossParams {
  double tau_stop = 5.0;
  double lr = 0.01;
  int max_steps = 200;
};

/// Gradient ascent on the target client's cross-entropy, starting from the
/// full model. Full-batch steps; a step that would lower the loss is retried
/// with a halved step size so the logged trajectory never decreases. Stops
/// once the mean loss reaches tau_stop or max_steps is exhausted.
inline UnlearnReport increase_loss(const ModelCheckpoint& full,
                                   const std::vector<DomainDataset>& train_sets,
                                   const std::vector<DomainDataset>& test_sets, std::size_t k,
                                   const IncreaseLossParams& params) {
  const auto started = std::chrono::steady_clock::now();
  const DomainDataset& target = train_sets[k];
  ModelCheckpoint cur = full;
  std::vector<double> trajectory;
  double loss = loss_value(cur, target.images, target.labels);
  trajectory.push_back(loss);
  int steps = 0;
  bool stalled = false;
  while (loss < params.tau_stop && steps < params.max_steps && !stalled) {
    const GradResult g = loss_and_grad(cur, target.images, target.labels, Wrt::params);
    double step_lr = params.lr;
    bool advanced = false;
    for (int attempt = 0; attempt < 20; ++attempt) {
      ModelCheckpoint trial = cur;
      for (auto& [name, t] : trial.params) {
        const TensorF& grad = g.param_grads.at(name);
        for (std::size_t j = 0; j < t.data.size(); ++j) {
          t.data[j] = static_cast<float>(static_cast<double>(t.data[j]) +
                                         step_lr * static_cast<double>(grad.data[j]));
        }
      }
      const double trial_loss = loss_value(trial, target.images, target.labels);
      if (trial_loss >= loss) {
        cur = std::move(trial);
        loss = trial_loss;
        advanced = true;
        break;
      }
      step_lr *= 0.5;
    }
    if (!advanced) stalled = true;
    ++steps;
    trajectory.push_back(loss);
  }

  UnlearnReport report;
  report.method = "increase_loss";
  report.unlearned = std::move(cur);
  report.unlearned.provenance = "unlearn_increase_loss";
  report.rounds_used = steps;
  report.method_params = {{"tau_stop", params.tau_stop},
                          {"lr", params.lr},
                          {"max_steps", params.max_steps},
                          {"final_loss", loss},
                          {"stalled", stalled},
                          {"loss_trajectory", trajectory}};
  detail_unlearn::finish_report(report, &full, train_sets, test_sets, k, started);
  return report;
}

// ---- class-discriminative pruning ---------------------------------------------

struct ChannelScore {
  std::string layer;   // conv block name
  int layer_index = 0; // index into the conv stack
  int channel = 0;
  double tf_target = 0.0;
  double idf = 0.0;
  double score = 0.0;  // min-max normalized over all channels
};

/// One conv layer's mean-absolute-activation table: tf[channel][domain].
struct TfMatrix {
  std::string layer;
  int layer_index = 0;
  std::vector<std::vector<double>> tf;
};

/// TF-IDF scoring from precomputed activation tables. A channel "fires" for
/// a domain when its TF exceeds the cross-channel mean of its layer; IDF is
/// log(M / (1 + firing domain count)). Raw scores (TF on the target domain
/// times IDF) are min-max normalized to [0, 1] over all channels; if every
/// raw score is equal the normalized scores are all zero.
inline std::vector<ChannelScore> tfidf_scores_from_tf(const std::vector<TfMatrix>& layers,
                                                      std::size_t k) {
  std::vector<ChannelScore> scores;
  for (const auto& layer : layers) {
    const std::size_t ch = layer.tf.size();
    if (ch == 0) continue;
    const std::size_t num_domains = layer.tf.front().size();
    std::vector<double> layer_mean(num_domains, 0.0);
    for (std::size_t c = 0; c < ch; ++c) {
      for (std::size_t dj = 0; dj < num_domains; ++dj) layer_mean[dj] += layer.tf[c][dj];
    }
    for (double& v : layer_mean) v /= static_cast<double>(ch);
    for (std::size_t c = 0; c < ch; ++c) {
      int firing = 0;
      for (std::size_t dj = 0; dj < num_domains; ++dj) {
        if (layer.tf[c][dj] > layer_mean[dj]) ++firing;
      }
      ChannelScore s;
      s.layer = layer.layer;
      s.layer_index = layer.layer_index;
      s.channel = static_cast<int>(c);
      s.tf_target = layer.tf[c][k];
      s.idf = std::log(static_cast<double>(num_domains) / (1.0 + static_cast<double>(firing)));
      s.score = s.tf_target * s.idf;
      scores.push_back(s);
    }
  }
  if (scores.empty()) throw std::invalid_argument("no conv channels to score");
  double lo = scores.front().score, hi = scores.front().score;
  for (const auto& s : scores) {
    lo = std::min(lo, s.score);
    hi = std::max(hi, s.score);
  }
  if (hi == lo) {
    for (auto& s : scores) s.score = 0.0;  // documented degenerate case
  } else {
    for (auto& s : scores) s.score = (s.score - lo) / (hi - lo);
  }
  return scores;
}

/// Channel relevance from model activations: TF is the mean absolute
/// post-activation of each conv channel over a domain's data.
inline std::vector<ChannelScore> tfidf_channel_scores(const ModelCheckpoint& full,
                                                      const std::vector<DomainDataset>& datasets,
                                                      std::size_t k) {
  if (k >= datasets.size()) throw std::invalid_argument("target index out of range");
  const std::size_t num_domains = datasets.size();
  const plan::NetPlan p = plan::NetPlan::make(full.spec);

  // Mean activation per (layer, channel, domain). Conv activations are
  // captured by forward_with_trace as per-channel spatial means (>= 0 after
  // relu, so the mean is already the mean absolute value).
  std::vector<std::vector<std::vector<double>>> tf(p.blocks.size());
  for (std::size_t bi = 0; bi < p.blocks.size(); ++bi) {
    if (p.blocks[bi].kind == plan::BlockKind::conv) {
      tf[bi].assign(static_cast<std::size_t>(p.blocks[bi].conv.out_ch),
                    std::vector<double>(num_domains, 0.0));
    }
  }
  constexpr std::size_t kBatch = 256;
  for (std::size_t dj = 0; dj < num_domains; ++dj) {
    const DomainDataset& ds = datasets[dj];
    const std::size_t n = ds.size();
    for (std::size_t at = 0; at < n; at += kBatch) {
      const std::size_t end = std::min(n, at + kBatch);
      std::vector<std::size_t> idx(end - at);
      for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = at + i;
      const auto [logits, trace] =
          forward_with_trace(full, detail_fed::gather_images(ds.images, idx));
      (void)logits;
      for (std::size_t bi = 0; bi < p.blocks.size(); ++bi) {
        if (p.blocks[bi].kind != plan::BlockKind::conv) continue;
        const TensorD& act = trace.activations[bi];  // trace order matches the plan
        const std::size_t ch = act.dim(1);
        for (std::size_t c = 0; c < ch; ++c) {
          double s = 0.0;
          for (std::size_t r = 0; r < act.dim(0); ++r) s += act.at2(r, c);
          tf[bi][c][dj] += s;
        }
      }
    }
    for (std::size_t bi = 0; bi < p.blocks.size(); ++bi) {
      if (p.blocks[bi].kind != plan::BlockKind::conv) continue;
      for (auto& per_domain : tf[bi]) per_domain[dj] /= static_cast<double>(n);
    }
  }

  std::vector<TfMatrix> layers;
  for (std::size_t bi = 0; bi < p.blocks.size(); ++bi) {
    if (p.blocks[bi].kind != plan::BlockKind::conv) continue;
    TfMatrix m;
    m.layer = p.blocks[bi].name;
    m.layer_index = static_cast<int>(bi);
    m.tf = tf[bi];
    layers.push_back(std::move(m));
  }
  return tfidf_scores_from_tf(layers, k);
}

struct ClassPruningParams {
  double threshold = 0.7;  // prune channels with normalized score > threshold
  int finetune_rounds = 5;
};

/// Zeroes the weights, bias and downstream input slices of every conv channel
/// whose normalized TF-IDF score exceeds the threshold, then fine-tunes on
/// the remaining clients. With the downstream slices zeroed too, pruned
/// channels receive zero gradient and stay exactly zero through fine-tuning.
inline UnlearnReport class_pruning(const ModelCheckpoint& full,
                                   const std::vector<DomainDataset>& train_sets,
                                   const std::vector<DomainDataset>& test_sets, std::size_t k,
                                   const ClassPruningParams& params, const FLConfig& cfg) {
  const auto started = std::chrono::steady_clock::now();
  const plan::NetPlan p = plan::NetPlan::make(full.spec);
  const auto scores = tfidf_channel_scores(full, train_sets, k);

  std::map<int, std::vector<int>> pruned_by_block;
  for (const auto& s : scores) {
    if (s.score > params.threshold) pruned_by_block[s.layer_index].push_back(s.channel);
  }
  for (const auto& [bi, channels] : pruned_by_block) {
    if (channels.size() == static_cast<std::size_t>(p.blocks[static_cast<std::size_t>(bi)].conv.out_ch)) {
      throw std::runtime_error("layer fully pruned: " + p.blocks[static_cast<std::size_t>(bi)].name +
                               " (lower the threshold)");
    }
  }

  ModelCheckpoint pruned = full;
  int pruned_count = 0;
  for (const auto& [bi, channels] : pruned_by_block) {
    const plan::Block& b = p.blocks[static_cast<std::size_t>(bi)];
    TensorF& w = pruned.params.at(b.name + ".weight");
    TensorF& bias = pruned.params.at(b.name + ".bias");
    const std::size_t per_ch = w.data.size() / static_cast<std::size_t>(b.conv.out_ch);
    for (const int c : channels) {
      std::fill_n(w.data.begin() + static_cast<std::ptrdiff_t>(per_ch * static_cast<std::size_t>(c)),
                  per_ch, 0.0f);
      bias.data[static_cast<std::size_t>(c)] = 0.0f;
      ++pruned_count;
    }
    // Downstream consumers of this channel.
    const std::size_t next = static_cast<std::size_t>(bi) + 1;
    const plan::Block& nb = p.blocks.at(next);
    if (nb.kind == plan::BlockKind::conv) {
      TensorF& nw = pruned.params.at(nb.name + ".weight");
      const std::size_t kk = static_cast<std::size_t>(nb.conv.k) * nb.conv.k;
      for (int oc = 0; oc < nb.conv.out_ch; ++oc) {
        for (const int c : channels) {
          std::fill_n(nw.data.begin() +
                          static_cast<std::ptrdiff_t>(
                              (static_cast<std::size_t>(oc) * nb.conv.in_ch +
                               static_cast<std::size_t>(c)) * kk),
                      kk, 0.0f);
        }
      }
    } else {
      // Flatten boundary: zero the fc columns fed by this channel's plane.
      TensorF& nw = pruned.params.at(nb.name + ".weight");
      const std::size_t out_dim = nw.dim(0), in_dim = nw.dim(1);
      const std::size_t plane = in_dim / static_cast<std::size_t>(b.conv.out_ch);
      for (std::size_t r = 0; r < out_dim; ++r) {
        for (const int c : channels) {
          std::fill_n(nw.data.begin() + static_cast<std::ptrdiff_t>(
                                             r * in_dim + static_cast<std::size_t>(c) * plane),
                      plane, 0.0f);
        }
      }
    }
  }

  UnlearnReport report;
  report.method = "class_pruning";
  report.rounds_used = params.finetune_rounds;
  report.method_params = {{"threshold", params.threshold},
                          {"finetune_rounds", params.finetune_rounds},
                          {"pruned_channels", pruned_count}};
  const auto remaining = detail_unlearn::without_client(train_sets, k);
  report.unlearned = params.finetune_rounds > 0
                         ? detail_unlearn::fed_finetune(pruned, remaining, cfg,
                                                        params.finetune_rounds, "prune_tune")
                         : pruned;
  report.unlearned.provenance = "unlearn_class_pruning";
  detail_unlearn::finish_report(report, &full, train_sets, test_sets, k, started);
  return report;
}

}  // namespace fdu
