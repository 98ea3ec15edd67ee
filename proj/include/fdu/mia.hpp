#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <nlohmann/json.hpp>
#include <stdexcept>
#include <string>
#include <vector>

#include "fdu/fedsim.hpp"
#include "fdu/model.hpp"

namespace fdu {

/// One attack-classifier input: the victim model's sorted softmax vector plus
/// the loss on the true label.
struct AttackSample {
  std::vector<double> confidence;  // sorted descending, sums to ~1
  double loss = 0.0;
  bool member = false;
};

namespace detail_mia {

inline std::vector<AttackSample> features_for(const ModelCheckpoint& model,
                                              const DomainDataset& ds, bool member) {
  std::vector<AttackSample> out;
  out.reserve(ds.size());
  constexpr std::size_t kBatch = 256;
  const std::size_t n = ds.size();
  for (std::size_t at = 0; at < n; at += kBatch) {
    const std::size_t end = std::min(n, at + kBatch);
    std::vector<std::size_t> idx(end - at);
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = at + i;
    const TensorF logits = forward(model, detail_fed::gather_images(ds.images, idx));
    const std::size_t c = logits.dim(1);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const float* row = logits.data.data() + i * c;
      double m = row[0];
      for (std::size_t j = 1; j < c; ++j) m = std::max(m, static_cast<double>(row[j]));
      std::vector<double> p(c);
      double z = 0.0;
      for (std::size_t j = 0; j < c; ++j) {
        p[j] = std::exp(static_cast<double>(row[j]) - m);
        z += p[j];
      }
      for (double& v : p) v /= z;
      const auto y = static_cast<std::size_t>(ds.labels[at + i]);
      AttackSample s;
      s.loss = -std::log(std::max(p[y], 1e-300));
      std::sort(p.begin(), p.end(), std::greater<>());
      s.confidence = std::move(p);
      s.member = member;
      out.push_back(std::move(s));
    }
  }
  return out;
}

}  // namespace detail_mia

/// Shadow models: full federated runs over all domains with derived seeds and
/// re-sampled train/test splits.
struct ShadowModel {
  ModelCheckpoint model;
  std::vector<DomainDataset> train_splits;
  std::vector<DomainDataset> test_splits;
};

inline std::vector<ShadowModel> train_shadows(const std::vector<DomainDataset>& full_domains,
                                              const ModelSpec& spec, const FLConfig& cfg,
                                              double test_fraction, int num_shadows,
                                              std::uint64_t seed) {
  if (num_shadows < 1) throw std::invalid_argument("need at least one shadow");
  std::vector<ShadowModel> shadows;
  for (int s = 0; s < num_shadows; ++s) {
    ShadowModel sm;
    for (const auto& ds : full_domains) {
      auto [train, test] =
          split_train_test(ds, test_fraction, derive_seed(seed, "shadow_split",
                                                          {static_cast<std::uint64_t>(s)}));
      sm.train_splits.push_back(std::move(train));
      sm.test_splits.push_back(std::move(test));
    }
    FLConfig shadow_cfg = cfg;
    shadow_cfg.seed = derive_seed(seed, "shadow", {static_cast<std::uint64_t>(s)});
    TraceOptions opts;
    opts.record_checkpoints = false;
    opts.record_client_post = false;
    opts.record_correctness = false;
    auto [model, trace] = train_federated(sm.train_splits, spec, shadow_cfg, opts);
    (void)trace;
    sm.model = std::move(model);
    shadows.push_back(std::move(sm));
  }
  return shadows;
}

/// Member samples are each shadow's train splits, non-members its held-out
/// splits; the majority side is downsampled so the set is balanced.
inline std::vector<AttackSample> build_attack_set(const std::vector<ShadowModel>& shadows,
                                                  std::uint64_t seed) {
  std::vector<AttackSample> members, nonmembers;
  for (const auto& sm : shadows) {
    for (const auto& ds : sm.train_splits) {
      auto f = detail_mia::features_for(sm.model, ds, true);
      members.insert(members.end(), f.begin(), f.end());
    }
    for (const auto& ds : sm.test_splits) {
      auto f = detail_mia::features_for(sm.model, ds, false);
      nonmembers.insert(nonmembers.end(), f.begin(), f.end());
    }
  }
  auto downsample = [&](std::vector<AttackSample>& v, std::size_t target_size,
                        std::uint64_t stream) {
    if (v.size() <= target_size) return;
    std::vector<std::size_t> order(v.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng = derive_rng(seed, "mia_balance", {stream});
    rng.shuffle(order);
    order.resize(target_size);
    std::sort(order.begin(), order.end());
    std::vector<AttackSample> kept;
    kept.reserve(target_size);
    for (const std::size_t i : order) kept.push_back(std::move(v[i]));
    v = std::move(kept);
  };
  const std::size_t balanced = std::min(members.size(), nonmembers.size());
  downsample(members, balanced, 0);
  downsample(nonmembers, balanced, 1);
  std::vector<AttackSample> out;
  out.reserve(2 * balanced);
  // Interleave so mini-batches see both classes.
  for (std::size_t i = 0; i < balanced; ++i) {
    out.push_back(std::move(members[i]));
    out.push_back(std::move(nonmembers[i]));
  }
  return out;
}

/// Two-layer perceptron over the confidence features, trained with plain SGD.
struct AttackModel {
  // feature normalization
  std::vector<double> mean, stdev;
  // fc1: [hidden, d], fc2: [2, hidden]
  TensorD w1, b1, w2, b2;

  std::vector<double> featurize(const AttackSample& s) const {
    std::vector<double> x = s.confidence;
    x.push_back(s.loss);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = (x[i] - mean[i]) / stdev[i];
    return x;
  }

  /// Returns true when the sample is classified as a member.
  bool predict_member(const AttackSample& s) const {
    const std::vector<double> x = featurize(s);
    const std::size_t hidden = b1.data.size();
    const std::size_t d = x.size();
    std::vector<double> h(hidden);
    for (std::size_t i = 0; i < hidden; ++i) {
      double v = b1.data[i];
      for (std::size_t j = 0; j < d; ++j) v += w1.data[i * d + j] * x[j];
      h[i] = v > 0 ? v : 0;
    }
    double l0 = b2.data[0], l1 = b2.data[1];
    for (std::size_t i = 0; i < hidden; ++i) {
      l0 += w2.data[i] * h[i];
      l1 += w2.data[hidden + i] * h[i];
    }
    return l1 > l0;
  }
};

inline AttackModel train_attack_model(const std::vector<AttackSample>& attack_set,
                                      std::uint64_t seed, int hidden = 16, int epochs = 40,
                                      double lr = 0.05) {
  if (attack_set.empty()) throw std::invalid_argument("empty attack set");
  const std::size_t d = attack_set.front().confidence.size() + 1;
  AttackModel m;
  m.mean.assign(d, 0.0);
  m.stdev.assign(d, 0.0);
  for (const auto& s : attack_set) {
    for (std::size_t j = 0; j < d - 1; ++j) m.mean[j] += s.confidence[j];
    m.mean[d - 1] += s.loss;
  }
  for (double& v : m.mean) v /= static_cast<double>(attack_set.size());
  for (const auto& s : attack_set) {
    for (std::size_t j = 0; j < d - 1; ++j) {
      const double diff = s.confidence[j] - m.mean[j];
      m.stdev[j] += diff * diff;
    }
    const double diff = s.loss - m.mean[d - 1];
    m.stdev[d - 1] += diff * diff;
  }
  for (double& v : m.stdev) {
    v = std::sqrt(v / static_cast<double>(attack_set.size()));
    if (v < 1e-9) v = 1.0;
  }

  const auto h = static_cast<std::size_t>(hidden);
  m.w1 = TensorD({h, d});
  m.b1 = TensorD({h});
  m.w2 = TensorD({2, h});
  m.b2 = TensorD({2});
  Rng rng = derive_rng(seed, "attack_init");
  const double bound1 = std::sqrt(3.0 / static_cast<double>(d));
  for (auto& v : m.w1.data) v = rng.next_uniform(-bound1, bound1);
  const double bound2 = std::sqrt(3.0 / static_cast<double>(h));
  for (auto& v : m.w2.data) v = rng.next_uniform(-bound2, bound2);

  std::vector<std::size_t> order(attack_set.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng shuffle_rng = derive_rng(seed, "attack_shuffle");
  for (int epoch = 0; epoch < epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    for (const std::size_t si : order) {
      const AttackSample& s = attack_set[si];
      const std::vector<double> x = m.featurize(s);
      std::vector<double> hpre(h), hact(h);
      for (std::size_t i = 0; i < h; ++i) {
        double v = m.b1.data[i];
        for (std::size_t j = 0; j < d; ++j) v += m.w1.data[i * d + j] * x[j];
        hpre[i] = v;
        hact[i] = v > 0 ? v : 0;
      }
      double logits[2] = {m.b2.data[0], m.b2.data[1]};
      for (std::size_t i = 0; i < h; ++i) {
        logits[0] += m.w2.data[i] * hact[i];
        logits[1] += m.w2.data[h + i] * hact[i];
      }
      const double mx = std::max(logits[0], logits[1]);
      const double z = std::exp(logits[0] - mx) + std::exp(logits[1] - mx);
      const int y = s.member ? 1 : 0;
      double dlog[2];
      for (int c = 0; c < 2; ++c) {
        dlog[c] = std::exp(logits[c] - mx) / z - (c == y ? 1.0 : 0.0);
      }
      std::vector<double> dh(h);
      for (std::size_t i = 0; i < h; ++i) {
        dh[i] = dlog[0] * m.w2.data[i] + dlog[1] * m.w2.data[h + i];
        if (!(hpre[i] > 0)) dh[i] = 0;
      }
      for (int c = 0; c < 2; ++c) {
        for (std::size_t i = 0; i < h; ++i) {
          m.w2.data[static_cast<std::size_t>(c) * h + i] -= lr * dlog[c] * hact[i];
        }
        m.b2.data[static_cast<std::size_t>(c)] -= lr * dlog[c];
      }
      for (std::size_t i = 0; i < h; ++i) {
        for (std::size_t j = 0; j < d; ++j) m.w1.data[i * d + j] -= lr * dh[i] * x[j];
        m.b1.data[i] -= lr * dh[i];
      }
    }
  }
  return m;
}

struct AttackEvaluation {
  double precision = 0.0;
  double recall = 0.0;
  bool degenerate_precision = false;  // no positive predictions
  std::size_t true_positives = 0, false_positives = 0, false_negatives = 0;

  nlohmann::json to_json() const {
    return {{"precision", precision},
            {"recall", recall},
            {"degenerate_precision", degenerate_precision}};
  }
};

/// Precision/recall of membership prediction on a victim model, with the
/// target domain's training samples as positives and held-out samples as
/// negatives.
inline AttackEvaluation evaluate_attack(const AttackModel& attack, const ModelCheckpoint& victim,
                                        const DomainDataset& target_train,
                                        const DomainDataset& target_heldout) {
  const auto pos = detail_mia::features_for(victim, target_train, true);
  const auto neg = detail_mia::features_for(victim, target_heldout, false);
  AttackEvaluation e;
  for (const auto& s : pos) {
    if (attack.predict_member(s)) ++e.true_positives;
    else ++e.false_negatives;
  }
  for (const auto& s : neg) {
    if (attack.predict_member(s)) ++e.false_positives;
  }
  const std::size_t predicted_pos = e.true_positives + e.false_positives;
  if (predicted_pos == 0) {
    e.precision = 0.0;
    e.degenerate_precision = true;
  } else {
    e.precision = static_cast<double>(e.true_positives) / static_cast<double>(predicted_pos);
  }
  const std::size_t actual_pos = e.true_positives + e.false_negatives;
  e.recall = actual_pos == 0
                 ? 0.0
                 : static_cast<double>(e.true_positives) / static_cast<double>(actual_pos);
  return e;
}

}  // namespace fdu
