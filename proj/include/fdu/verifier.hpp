#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <nlohmann/json.hpp>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fdu/fedsim.hpp"
#include "fdu/model.hpp"
#include "fdu/nn_ops.hpp"
#include "fdu/rng.hpp"

namespace fdu {

// ---- forgetting/learning events ---------------------------------------------

struct EventCounts {
  std::uint64_t sample_id = 0;
  int learning_events = 0;    // 0 -> 1 transitions
  int forgetting_events = 0;  // 1 -> 0 transitions
  int r = 0;                  // forgetting - learning
  bool unforgettable = false; // forgetting_events < delta_min over the whole log
};

inline EventCounts count_events(std::span<const std::uint8_t> bits, std::uint64_t sample_id = 0,
                                int delta_min = 1) {
  if (bits.size() < 2) throw std::invalid_argument("count_events: need at least 2 observations");
  EventCounts e;
  e.sample_id = sample_id;
  for (std::size_t t = 0; t + 1 < bits.size(); ++t) {
    if (bits[t] > bits[t + 1]) ++e.forgetting_events;
    if (bits[t] < bits[t + 1]) ++e.learning_events;
  }
  e.r = e.forgetting_events - e.learning_events;
  e.unforgettable = e.forgetting_events < delta_min;
  return e;
}

/// Per-sample event counts from a client's correctness log laid out as
/// [epoch_step][sample]. The epoch steps are all rounds x local epochs
/// concatenated in time order.
inline std::vector<EventCounts> per_sample_events(
    const std::vector<std::vector<std::uint8_t>>& log, int delta_min = 1) {
  if (log.size() < 2) throw std::invalid_argument("correctness log too short");
  const std::size_t n = log.front().size();
  std::vector<EventCounts> out;
  out.reserve(n);
  std::vector<std::uint8_t> seq(log.size());
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t t = 0; t < log.size(); ++t) seq[t] = log[t][s];
    out.push_back(count_events(seq, s, delta_min));
  }
  return out;
}

/// Picks the samples the target domain keeps re-learning and forgetting:
/// never-forgotten samples are dropped, then samples whose forgetting-event
/// count exceeds tau are kept, ordered by (-count, sample_id). These
/// oscillating samples are the ones whose fate is bound to the domain's
/// continued participation, which is what makes them useful carriers.
inline std::vector<EventCounts> select_representative_events(
    const std::vector<std::vector<std::uint8_t>>& log, double tau, int delta_min = 1) {
  const auto events = per_sample_events(log, delta_min);
  std::vector<EventCounts> selected;
  for (const auto& e : events) {
    if (e.unforgettable) continue;
    if (static_cast<double>(e.forgetting_events) > tau) selected.push_back(e);
  }
  std::sort(selected.begin(), selected.end(), [](const EventCounts& a, const EventCounts& b) {
    if (a.forgetting_events != b.forgetting_events) {
      return a.forgetting_events > b.forgetting_events;
    }
    return a.sample_id < b.sample_id;
  });
  if (selected.empty()) {
    throw std::runtime_error(
        "representative selection is empty; lower tau or train longer before injecting");
  }
  return selected;
}

inline std::vector<std::uint64_t> select_representative(const TrainingTrace& trace,
                                                        std::size_t target, double tau,
                                                        int delta_min = 1) {
  const auto selected =
      select_representative_events(trace.correctness.at(target), tau, delta_min);
  std::vector<std::uint64_t> ids;
  ids.reserve(selected.size());
  for (const auto& e : selected) ids.push_back(e.sample_id);
  return ids;
}

// ---- marker generator ---------------------------------------------------------

/// Small encoder-decoder with a skip connection. The output passes through
/// tanh scaled by epsilon, so the perturbation bound is structural: it holds
/// at every optimization step, not just after projection.
struct MarkerGenerator {
  int in_channels = 3;
  int height = 32;
  int width = 32;
  int base_channels = 8;
  double epsilon = 0.3;
  int y_target = 0;
  ParamMap params;
};

namespace detail_marker {

struct GenDims {
  nn::ConvDims enc1, enc2, dec, out;
};

inline GenDims gen_dims(const MarkerGenerator& g) {
  const int b = g.base_channels;
  GenDims d;
  d.enc1 = nn::conv_dims(g.in_channels, b, 3, 1, 1, g.height, g.width);
  d.enc2 = nn::conv_dims(b, 2 * b, 3, 1, 1, g.height / 2, g.width / 2);
  d.dec = nn::conv_dims(3 * b, b, 3, 1, 1, g.height, g.width);  // concat(up, enc1)
  d.out = nn::conv_dims(b, g.in_channels, 3, 1, 1, g.height, g.width);
  return d;
}

struct GenCache {
  TensorF z;
  TensorF enc1_pre, enc1_act, pooled;
  std::vector<std::uint32_t> argmax;
  TensorF enc2_pre, enc2_act, up, concat;
  TensorF dec_pre, dec_act;
  TensorF out_pre;    // u
  TensorF m;          // epsilon * tanh(u)
  TensorF t;          // clamp(z + m)
  std::vector<std::uint8_t> interior;  // 1 where z + m was inside (0, 1)
};

}  // namespace detail_marker

inline MarkerGenerator init_marker_generator(const ImageShape& shape, double epsilon, int y_target,
                                             std::uint64_t seed, int base_channels = 8) {
  if (!(epsilon > 0.0 && epsilon <= 1.0)) throw std::invalid_argument("epsilon must be in (0, 1]");
  if (shape.height % 2 || shape.width % 2) {
    throw std::invalid_argument("marker generator needs even spatial dims");
  }
  MarkerGenerator g;
  g.in_channels = static_cast<int>(shape.channels);
  g.height = static_cast<int>(shape.height);
  g.width = static_cast<int>(shape.width);
  g.base_channels = base_channels;
  g.epsilon = epsilon;
  g.y_target = y_target;
  const detail_marker::GenDims d = detail_marker::gen_dims(g);
  auto add = [&](const std::string& name, const nn::ConvDims& c) {
    const std::size_t fan_in = static_cast<std::size_t>(c.in_ch) * c.k * c.k;
    TensorF w({static_cast<std::size_t>(c.out_ch), static_cast<std::size_t>(c.in_ch),
               static_cast<std::size_t>(c.k), static_cast<std::size_t>(c.k)});
    const double bound = std::sqrt(3.0) / std::sqrt(static_cast<double>(fan_in));
    Rng rng = derive_rng(seed, "marker_init", {hash_label(name)});
    for (float& v : w.data) v = static_cast<float>(rng.next_uniform(-bound, bound));
    g.params.emplace(name + ".weight", std::move(w));
    g.params.emplace(name + ".bias", TensorF::zeros({static_cast<std::size_t>(c.out_ch)}));
  };
  add("enc1", d.enc1);
  add("enc2", d.enc2);
  add("dec", d.dec);
  add("out", d.out);
  return g;
}

namespace detail_marker {

inline void forward(const MarkerGenerator& g, const TensorF& z, GenCache& c) {
  const GenDims d = gen_dims(g);
  const std::size_t batch = z.dim(0);
  std::vector<float> cols;
  c.z = z;

  c.enc1_pre = TensorF({batch, static_cast<std::size_t>(d.enc1.out_ch),
                        static_cast<std::size_t>(d.enc1.out_h), static_cast<std::size_t>(d.enc1.out_w)});
  nn::conv_forward(z, d.enc1, plan::param(g.params, "enc1.weight"),
                   plan::param(g.params, "enc1.bias"), c.enc1_pre, cols);
  c.enc1_act = c.enc1_pre;
  nn::relu_forward(c.enc1_act);

  c.pooled = TensorF({batch, static_cast<std::size_t>(d.enc1.out_ch),
                      static_cast<std::size_t>(d.enc1.out_h / 2),
                      static_cast<std::size_t>(d.enc1.out_w / 2)});
  nn::maxpool_forward(c.enc1_act, d.enc1.out_ch, d.enc1.out_h, d.enc1.out_w, c.pooled, c.argmax);

  c.enc2_pre = TensorF({batch, static_cast<std::size_t>(d.enc2.out_ch),
                        static_cast<std::size_t>(d.enc2.out_h), static_cast<std::size_t>(d.enc2.out_w)});
  nn::conv_forward(c.pooled, d.enc2, plan::param(g.params, "enc2.weight"),
                   plan::param(g.params, "enc2.bias"), c.enc2_pre, cols);
  c.enc2_act = c.enc2_pre;
  nn::relu_forward(c.enc2_act);

  c.up = TensorF({batch, static_cast<std::size_t>(d.enc2.out_ch),
                  static_cast<std::size_t>(d.enc2.out_h * 2),
                  static_cast<std::size_t>(d.enc2.out_w * 2)});
  nn::upsample2_forward(c.enc2_act, c.up);

  // concat(up, enc1_act) along channels
  const std::size_t up_ch = c.up.dim(1), skip_ch = c.enc1_act.dim(1);
  const std::size_t hw = c.up.dim(2) * c.up.dim(3);
  c.concat = TensorF({batch, up_ch + skip_ch, c.up.dim(2), c.up.dim(3)});
  for (std::size_t b = 0; b < batch; ++b) {
    std::copy_n(&c.up.data[b * up_ch * hw], up_ch * hw, &c.concat.data[b * (up_ch + skip_ch) * hw]);
    std::copy_n(&c.enc1_act.data[b * skip_ch * hw], skip_ch * hw,
                &c.concat.data[b * (up_ch + skip_ch) * hw + up_ch * hw]);
  }

  c.dec_pre = TensorF({batch, static_cast<std::size_t>(d.dec.out_ch),
                       static_cast<std::size_t>(d.dec.out_h), static_cast<std::size_t>(d.dec.out_w)});
  nn::conv_forward(c.concat, d.dec, plan::param(g.params, "dec.weight"),
                   plan::param(g.params, "dec.bias"), c.dec_pre, cols);
  c.dec_act = c.dec_pre;
  nn::relu_forward(c.dec_act);

  c.out_pre = TensorF({batch, static_cast<std::size_t>(d.out.out_ch),
                       static_cast<std::size_t>(d.out.out_h), static_cast<std::size_t>(d.out.out_w)});
  nn::conv_forward(c.dec_act, d.out, plan::param(g.params, "out.weight"),
                   plan::param(g.params, "out.bias"), c.out_pre, cols);

  c.m = TensorF(c.out_pre.shape);
  c.t = TensorF(c.out_pre.shape);
  c.interior.resize(c.m.data.size());
  const float eps = static_cast<float>(g.epsilon);
  for (std::size_t i = 0; i < c.m.data.size(); ++i) {
    const float m = eps * std::tanh(c.out_pre.data[i]);
    c.m.data[i] = m;
    const float raw = z.data[i] + m;
    float t = std::clamp(raw, 0.0f, 1.0f);
    c.interior[i] = raw > 0.0f && raw < 1.0f ? 1 : 0;
    // Float addition can overshoot the bound by a rounding step; walk back
    // so |t - z| <= epsilon holds exactly in f64 as well.
    while (std::abs(static_cast<double>(t) - static_cast<double>(z.data[i])) >
           static_cast<double>(eps)) {
      t = std::nextafterf(t, z.data[i]);
    }
    c.t.data[i] = t;
  }
}

/// Gradients of the generator parameters given d(loss)/d(T).
inline ParamMap backward(const MarkerGenerator& g, const GenCache& c, const TensorF& dt) {
  const GenDims d = gen_dims(g);
  ParamMap grads = zeros_like(g.params);
  std::vector<float> cols, dcols;
  const float eps = static_cast<float>(g.epsilon);

  // through clamp and the tanh scaling
  TensorF du(c.out_pre.shape);
  for (std::size_t i = 0; i < du.data.size(); ++i) {
    const float th = std::tanh(c.out_pre.data[i]);
    const float dm = c.interior[i] ? dt.data[i] : 0.0f;
    du.data[i] = dm * eps * (1.0f - th * th);
  }

  TensorF ddec_act(c.dec_act.shape);
  nn::conv_backward(c.dec_act, d.out, plan::param(g.params, "out.weight"), du,
                    grads.at("out.weight"), grads.at("out.bias"), &ddec_act, cols, dcols);

  nn::relu_backward(c.dec_pre, ddec_act);
  TensorF dconcat(c.concat.shape);
  nn::conv_backward(c.concat, d.dec, plan::param(g.params, "dec.weight"), ddec_act,
                    grads.at("dec.weight"), grads.at("dec.bias"), &dconcat, cols, dcols);

  // split concat gradient
  const std::size_t batch = c.z.dim(0);
  const std::size_t up_ch = c.up.dim(1), skip_ch = c.enc1_act.dim(1);
  const std::size_t hw = c.up.dim(2) * c.up.dim(3);
  TensorF dup(c.up.shape);
  TensorF denc1(c.enc1_act.shape);
  for (std::size_t b = 0; b < batch; ++b) {
    std::copy_n(&dconcat.data[b * (up_ch + skip_ch) * hw], up_ch * hw, &dup.data[b * up_ch * hw]);
    std::copy_n(&dconcat.data[b * (up_ch + skip_ch) * hw + up_ch * hw], skip_ch * hw,
                &denc1.data[b * skip_ch * hw]);
  }

  TensorF denc2_act(c.enc2_act.shape);
  nn::upsample2_backward(dup, denc2_act);
  nn::relu_backward(c.enc2_pre, denc2_act);
  TensorF dpooled(c.pooled.shape);
  nn::conv_backward(c.pooled, d.enc2, plan::param(g.params, "enc2.weight"), denc2_act,
                    grads.at("enc2.weight"), grads.at("enc2.bias"), &dpooled, cols, dcols);

  TensorF dpool_in(c.enc1_act.shape);
  nn::maxpool_backward(dpooled, d.enc1.out_ch, d.enc1.out_h, d.enc1.out_w, c.argmax, dpool_in);
  for (std::size_t i = 0; i < denc1.data.size(); ++i) denc1.data[i] += dpool_in.data[i];
  nn::relu_backward(c.enc1_pre, denc1);
  nn::conv_backward(c.z, d.enc1, plan::param(g.params, "enc1.weight"), denc1,
                    grads.at("enc1.weight"), grads.at("enc1.bias"),
                    static_cast<TensorF*>(nullptr), cols, dcols);
  return grads;
}

}  // namespace detail_marker

/// M_delta(z): the bounded perturbation itself.
inline TensorF marker_perturbation(const MarkerGenerator& g, const TensorF& batch) {
  detail_marker::GenCache c;
  detail_marker::forward(g, batch, c);
  return c.m;
}

/// T_delta(z) = clamp(z + M_delta(z), 0, 1), with |T - z|_inf <= epsilon.
inline TensorF apply_marker(const MarkerGenerator& g, const TensorF& batch) {
  detail_marker::GenCache c;
  detail_marker::forward(g, batch, c);
  return c.t;
}

/// One marker-generator training run against a frozen surrogate classifier:
/// SGD with momentum on the cross-entropy of the surrogate's prediction on
/// marked inputs toward the target label.
inline void train_marker_generator(MarkerGenerator& gen, const ModelCheckpoint& surrogate,
                                   const TensorF& samples, double eta, int steps, int batch_size,
                                   Rng rng, double momentum = 0.9) {
  if (samples.dim(0) == 0) throw std::invalid_argument("marker training needs samples");
  const plan::NetPlan p = plan::NetPlan::make(surrogate.spec);
  const std::size_t n = samples.dim(0);
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::size_t cursor = n;  // triggers an initial shuffle
  ParamMap velocity = zeros_like(gen.params);
  for (int step = 0; step < steps; ++step) {
    if (cursor >= n) {
      rng.shuffle(order);
      cursor = 0;
    }
    const std::size_t take = std::min<std::size_t>(static_cast<std::size_t>(batch_size), n - cursor);
    std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(cursor),
                                 order.begin() + static_cast<std::ptrdiff_t>(cursor + take));
    cursor += take;
    const TensorF z = detail_fed::gather_images(samples, idx);
    detail_marker::GenCache gc;
    detail_marker::forward(gen, z, gc);

    plan::Cache<float> cc;
    TensorF logits = plan::forward<float>(p, surrogate.params, gc.t, &cc);
    TensorI64 target({idx.size()});
    for (auto& v : target.data) v = gen.y_target;
    TensorF dlogits(logits.shape);
    nn::softmax_cross_entropy(logits, target, &dlogits);
    TensorF dt;
    (void)plan::backward<float>(p, surrogate.params, cc, dlogits, nullptr, &dt);

    const ParamMap grads = detail_marker::backward(gen, gc, dt);
    for (auto& [name, t] : gen.params) {
      const TensorF& grad = grads.at(name);
      TensorF& v = velocity.at(name);
      for (std::size_t i = 0; i < t.data.size(); ++i) {
        v.data[i] = static_cast<float>(momentum * v.data[i] + grad.data[i]);
        t.data[i] = static_cast<float>(static_cast<double>(t.data[i]) -
                                       eta * static_cast<double>(v.data[i]));
      }
    }
  }
}

// ---- injection ---------------------------------------------------------------

struct VerificationConfig {
  double tau = 10.0;
  double mu = 0.5;
  double lambda = 0.5;
  double epsilon = 0.3;
  int inject_rounds = 10;
  double proximal_coeff = 0.01;
  int y_target = 0;
  int delta_min = 1;
  int gen_steps = 150;
  double gen_lr = 0.2;
  int gen_batch = 32;
  int gen_base_channels = 8;
  bool cosine_as_printed = false;   // ablation: add +cos instead of (1 - cos)
  // Clean loss term over the full local set (the marked term always runs on
  // representative samples). Keeping the full set preserves the client's
  // clean accuracy through the injection window.
  bool clean_term_full_set = true;
  bool disable_cosine = false;
  std::uint64_t gen_seed = 1;

  void validate(const FLConfig& cfg) const {
    if (mu < 0 || lambda < 0) throw std::invalid_argument("mu and lambda must be >= 0");
    if (!(epsilon > 0.0 && epsilon <= 1.0)) throw std::invalid_argument("epsilon must be in (0,1]");
    if (inject_rounds < 1 || inject_rounds > cfg.rounds) {
      throw std::invalid_argument("inject_rounds must be in [1, rounds]");
    }
    if (proximal_coeff < 0) throw std::invalid_argument("proximal_coeff must be >= 0");
  }

  nlohmann::json to_json() const {
    return {{"tau", tau},
            {"mu", mu},
            {"lambda", lambda},
            {"epsilon", epsilon},
            {"inject_rounds", inject_rounds},
            {"proximal_coeff", proximal_coeff},
            {"y_target", y_target},
            {"delta_min", delta_min},
            {"gen_steps", gen_steps},
            {"gen_lr", gen_lr},
            {"gen_batch", gen_batch},
            {"cosine_as_printed", cosine_as_printed},
            {"clean_term_full_set", clean_term_full_set}};
  }
};

/// Composite local update used during injection rounds. Per step:
///   mu * CE(h(z), y)           over a clean batch (full local set by
///                              default, representative set otherwise)
///   + lambda * CE(h(T(m)), y_T) over a marked representative batch m
///   + (1 - cos(F(m), F(T(m))))  feature alignment on the marked pair
///   + proximal_coeff * ||theta - theta_global||^2
/// optimized with the same SGD/momentum/batching discipline as local_update;
/// the degenerate configuration (mu=1, lambda=0, no cosine, no proximal)
/// reproduces plain training exactly, batch for batch.
struct InjectStats {
  std::vector<double> epoch_losses;
};

inline LocalResult inject_local_update(const ModelCheckpoint& global,
                                       const DomainDataset& full_local,
                                       const std::vector<std::uint64_t>& representative_ids,
                                       const MarkerGenerator& gen, const VerificationConfig& vcfg,
                                       const FLConfig& cfg, Rng rng, Rng marked_rng,
                                       InjectStats* stats = nullptr) {
  if (representative_ids.empty()) throw std::invalid_argument("no representative samples");
  const plan::NetPlan p = plan::NetPlan::make(global.spec);

  std::vector<std::size_t> clean_idx;
  if (vcfg.clean_term_full_set) {
    clean_idx.resize(full_local.size());
    for (std::size_t i = 0; i < clean_idx.size(); ++i) clean_idx[i] = i;
  } else {
    for (const auto id : representative_ids) clean_idx.push_back(static_cast<std::size_t>(id));
  }
  DomainDataset clean_set;
  clean_set.images = detail_fed::gather_images(full_local.images, clean_idx);
  clean_set.labels = detail_fed::gather_labels(full_local.labels, clean_idx);

  std::vector<std::size_t> rep_idx;
  for (const auto id : representative_ids) rep_idx.push_back(static_cast<std::size_t>(id));
  const TensorF rep_images = detail_fed::gather_images(full_local.images, rep_idx);

  // Marked batches cycle through a shuffled representative order, refreshed
  // from its own rng so the clean batch stream stays aligned with plain
  // local training.
  std::vector<std::size_t> rep_order(rep_idx.size());
  for (std::size_t i = 0; i < rep_order.size(); ++i) rep_order[i] = i;
  std::size_t rep_cursor = rep_order.size();
  auto next_marked_batch = [&](std::size_t want) {
    std::vector<std::size_t> out;
    out.reserve(want);
    while (out.size() < want) {
      if (rep_cursor >= rep_order.size()) {
        marked_rng.shuffle(rep_order);
        rep_cursor = 0;
      }
      out.push_back(rep_order[rep_cursor++]);
    }
    return out;
  };

  ModelCheckpoint cur = global;
  ParamMap velocity = zeros_like(cur.params);
  LocalResult result;
  const bool use_marked = vcfg.lambda > 0.0 || !vcfg.disable_cosine;
  for (int epoch = 0; epoch < cfg.local_epochs; ++epoch) {
    double epoch_loss = 0.0;
    std::size_t batches_seen = 0;
    const auto batches = detail_fed::make_batches(clean_set.size(), cfg.batch_size, rng);
    for (const auto& batch_idx : batches) {
      const TensorF z = detail_fed::gather_images(clean_set.images, batch_idx);
      const TensorI64 y = detail_fed::gather_labels(clean_set.labels, batch_idx);

      plan::Cache<float> cache_clean;
      TensorF logits_clean = plan::forward<float>(p, cur.params, z, &cache_clean);
      TensorF dlogits_clean(logits_clean.shape);
      double loss = vcfg.mu * nn::softmax_cross_entropy(logits_clean, y, &dlogits_clean);
      if (vcfg.mu != 1.0) {
        for (float& v : dlogits_clean.data) v = static_cast<float>(v * vcfg.mu);
      }
      ParamMap grads = plan::backward<float>(p, cur.params, cache_clean, dlogits_clean);

      if (use_marked) {
        const auto midx = next_marked_batch(
            std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size), rep_idx.size()));
        const TensorF m = detail_fed::gather_images(rep_images, midx);
        const std::size_t bsz = midx.size();
        const TensorF marked = apply_marker(gen, m);

        plan::Cache<float> cache_ref;
        (void)plan::forward<float>(p, cur.params, m, &cache_ref);
        plan::Cache<float> cache_marked;
        TensorF logits_marked = plan::forward<float>(p, cur.params, marked, &cache_marked);
        TensorI64 yt({bsz});
        for (auto& v : yt.data) v = vcfg.y_target;
        TensorF dlogits_marked(logits_marked.shape);
        const double marked_ce = nn::softmax_cross_entropy(logits_marked, yt, &dlogits_marked);
        loss += vcfg.lambda * marked_ce;
        for (float& v : dlogits_marked.data) v = static_cast<float>(v * vcfg.lambda);

        std::map<int, TensorF> extra_ref, extra_marked;
        TensorF dlogits_ref(logits_marked.shape);  // zero seed for the clean pass
        if (!vcfg.disable_cosine) {
          const TensorF& f1 = cache_ref.out[static_cast<std::size_t>(p.feature_block)];
          const TensorF& f2 = cache_marked.out[static_cast<std::size_t>(p.feature_block)];
          const std::size_t d = f1.data.size() / bsz;
          TensorF g1(f1.shape), g2(f2.shape);
          double cos_loss = 0.0;
          const double sign = vcfg.cosine_as_printed ? 1.0 : -1.0;
          for (std::size_t i = 0; i < bsz; ++i) {
            const float* a = f1.data.data() + i * d;
            const float* b = f2.data.data() + i * d;
            double sa = 0, sb = 0, dot = 0;
            for (std::size_t j = 0; j < d; ++j) {
              sa += static_cast<double>(a[j]) * a[j];
              sb += static_cast<double>(b[j]) * b[j];
              dot += static_cast<double>(a[j]) * b[j];
            }
            if (sa < 1e-24 || sb < 1e-24) continue;  // cosine undefined; skip sample
            // sqrt(sa * sb) instead of sqrt(sa) * sqrt(sb): identical feature
            // vectors then give exactly c = 1 and a zero gradient.
            const double denom = std::sqrt(sa * sb);
            const double c = dot / denom;
            cos_loss += vcfg.cosine_as_printed ? c : 1.0 - c;
            // d cos / d a = b/denom - c * a/sa ; loss uses sign * cos / B
            const double scale = sign / static_cast<double>(bsz);
            for (std::size_t j = 0; j < d; ++j) {
              g1.data[i * d + j] = static_cast<float>(scale * (b[j] / denom - c * a[j] / sa));
              g2.data[i * d + j] = static_cast<float>(scale * (a[j] / denom - c * b[j] / sb));
            }
          }
          loss += cos_loss / static_cast<double>(bsz);
          extra_ref.emplace(p.feature_block, std::move(g1));
          extra_marked.emplace(p.feature_block, std::move(g2));
        }
        if (!extra_ref.empty()) {
          const ParamMap grads_ref =
              plan::backward<float>(p, cur.params, cache_ref, dlogits_ref, &extra_ref);
          for (auto& [name, t] : grads) {
            const TensorF& gr = grads_ref.at(name);
            for (std::size_t i = 0; i < t.data.size(); ++i) t.data[i] += gr.data[i];
          }
        }
        const ParamMap grads_marked = plan::backward<float>(
            p, cur.params, cache_marked, dlogits_marked,
            extra_marked.empty() ? nullptr : &extra_marked);
        for (auto& [name, t] : grads) {
          const TensorF& gm = grads_marked.at(name);
          for (std::size_t i = 0; i < t.data.size(); ++i) t.data[i] += gm.data[i];
        }
      }

      if (vcfg.proximal_coeff > 0.0) {
        double prox = 0.0;
        for (auto& [name, t] : grads) {
          const TensorF& w = cur.params.at(name);
          const TensorF& w0 = global.params.at(name);
          for (std::size_t i = 0; i < t.data.size(); ++i) {
            const double diff = static_cast<double>(w.data[i]) - static_cast<double>(w0.data[i]);
            prox += diff * diff;
            t.data[i] = static_cast<float>(t.data[i] + 2.0 * vcfg.proximal_coeff * diff);
          }
        }
        loss += vcfg.proximal_coeff * prox;
      }

      for (auto& [name, v] : velocity) {
        const TensorF& grad = grads.at(name);
        TensorF& w = cur.params.at(name);
        for (std::size_t i = 0; i < v.data.size(); ++i) {
          v.data[i] = static_cast<float>(cfg.momentum * v.data[i] + grad.data[i]);
          w.data[i] = static_cast<float>(w.data[i] - cfg.lr * v.data[i]);
        }
      }
      epoch_loss += loss;
      ++batches_seen;
    }
    if (stats) stats->epoch_losses.push_back(epoch_loss / static_cast<double>(batches_seen));
    result.epoch_correctness.push_back(correctness_bits(cur, full_local));
  }
  result.post_params = std::move(cur.params);
  return result;
}

/// Fraction of marked samples the model classifies as the target label.
inline double verify_accuracy(const ModelCheckpoint& ckpt, const TensorF& marked_images,
                              int y_target) {
  const std::size_t n = marked_images.dim(0);
  if (n == 0) throw std::invalid_argument("verify_accuracy: empty set");
  std::size_t hits = 0;
  constexpr std::size_t kBatch = 256;
  for (std::size_t at = 0; at < n; at += kBatch) {
    const std::size_t end = std::min(n, at + kBatch);
    std::vector<std::size_t> idx(end - at);
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = at + i;
    const TensorI64 pred = predict(ckpt, detail_fed::gather_images(marked_images, idx));
    for (std::size_t i = 0; i < pred.data.size(); ++i) {
      if (pred[i] == y_target) ++hits;
    }
  }
  return static_cast<double>(hits) / static_cast<double>(n);
}

/// A federated run with marker injection on the target client during the
/// final inject_rounds rounds.
struct InjectedRun {
  ModelCheckpoint model;
  TrainingTrace trace;
  MarkerGenerator generator;
  std::vector<std::uint64_t> representative_ids;
  // Marked verification inputs: representative samples whose true label is
  // not y_target (label flipping is meaningless on samples already labeled
  // y_target), transformed by the final generator.
  TensorF verification_images;
  std::vector<InjectStats> round_stats;
};

inline TensorF build_verification_images(const DomainDataset& target,
                                         const std::vector<std::uint64_t>& ids,
                                         const MarkerGenerator& gen, int y_target) {
  std::vector<std::size_t> keep;
  for (const auto id : ids) {
    if (target.labels[static_cast<std::size_t>(id)] != y_target) {
      keep.push_back(static_cast<std::size_t>(id));
    }
  }
  if (keep.empty()) {
    throw std::runtime_error("verification set is empty after removing target-label samples");
  }
  return apply_marker(gen, detail_fed::gather_images(target.images, keep));
}

inline InjectedRun train_with_marker_injection(const std::vector<DomainDataset>& train_sets,
                                               const ModelSpec& spec, const FLConfig& cfg,
                                               std::size_t target, VerificationConfig vcfg) {
  vcfg.validate(cfg);
  if (target >= train_sets.size()) throw std::invalid_argument("target client out of range");
  const int inject_start = cfg.rounds - vcfg.inject_rounds;
  if (inject_start < 1) {
    throw std::invalid_argument("need at least one plain round before injection starts");
  }
  const ImageShape shape{train_sets[target].images.dim(1), train_sets[target].images.dim(2),
                         train_sets[target].images.dim(3)};

  InjectedRun run;
  bool selected = false;
  MarkerGenerator gen;
  std::vector<std::uint64_t> rep_ids;
  std::vector<InjectStats> stats;

  ClientHook hook = [&](int round, std::size_t client, const ModelCheckpoint& global,
                        const TrainingTrace& so_far) -> std::optional<LocalResult> {
    if (client != target || round < inject_start) return std::nullopt;
    if (!selected) {
      rep_ids = select_representative(so_far, target, vcfg.tau, vcfg.delta_min);
      gen = init_marker_generator(shape, vcfg.epsilon, vcfg.y_target,
                                  derive_seed(cfg.seed, "marker", {vcfg.gen_seed}),
                                  vcfg.gen_base_channels);
      selected = true;
    }
    // The generator re-adapts to the current surrogate each injection round,
    // before the local update it perturbs.
    const TensorF rep_images = detail_fed::gather_images(
        train_sets[target].images,
        std::vector<std::size_t>(rep_ids.begin(), rep_ids.end()));
    train_marker_generator(gen, global, rep_images, vcfg.gen_lr, vcfg.gen_steps, vcfg.gen_batch,
                           derive_rng(cfg.seed, "marker_train", {static_cast<std::uint64_t>(round)}));
    InjectStats st;
    LocalResult r = inject_local_update(
        global, train_sets[target], rep_ids, gen, vcfg, cfg,
        derive_rng(cfg.seed, "client", {client, static_cast<std::uint64_t>(round)}),
        derive_rng(cfg.seed, "inject_marked", {static_cast<std::uint64_t>(round)}), &st);
    stats.push_back(std::move(st));
    return r;
  };

  auto [model, trace] = train_federated(train_sets, spec, cfg, {}, hook);
  run.model = std::move(model);
  run.trace = std::move(trace);
  run.generator = std::move(gen);
  run.representative_ids = std::move(rep_ids);
  run.round_stats = std::move(stats);
  run.verification_images =
      build_verification_images(train_sets[target], run.representative_ids, run.generator,
                                vcfg.y_target);
  return run;
}

inline void save_marker_generator(const std::filesystem::path& path, const MarkerGenerator& g) {
  std::map<std::string, AnyTensor> entries;
  for (const auto& [name, t] : g.params) entries.emplace("param/" + name, t);
  TensorD meta;
  meta.shape = {6};
  meta.data = {static_cast<double>(g.in_channels),   static_cast<double>(g.height),
               static_cast<double>(g.width),         static_cast<double>(g.base_channels),
               g.epsilon,                            static_cast<double>(g.y_target)};
  entries.emplace("meta", meta);
  write_archive(path, entries);
}

inline MarkerGenerator load_marker_generator(const std::filesystem::path& path) {
  const auto entries = read_archive(path);
  const TensorD& meta = archive_get<double>(entries, "meta");
  MarkerGenerator g;
  g.in_channels = static_cast<int>(meta.data.at(0));
  g.height = static_cast<int>(meta.data.at(1));
  g.width = static_cast<int>(meta.data.at(2));
  g.base_channels = static_cast<int>(meta.data.at(3));
  g.epsilon = meta.data.at(4);
  g.y_target = static_cast<int>(meta.data.at(5));
  for (const auto& [name, t] : entries) {
    if (name.rfind("param/", 0) == 0) g.params.emplace(name.substr(6), std::get<TensorF>(t));
  }
  return g;
}

// ---- backdoor baseline --------------------------------------------------------

struct BackdoorParams {
  int y_target = 0;
  double poison_fraction = 0.3;
  int trigger_size = 3;
};

/// Stamps a fixed high-contrast checkerboard square near the bottom-right
/// corner. Stamping is idempotent: pixels are assigned, not blended.
inline void stamp_trigger(TensorF& images, int trigger_size = 3) {
  const std::size_t n = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
  const std::size_t ts = static_cast<std::size_t>(trigger_size);
  if (h < ts + 1 || w < ts + 1) throw std::invalid_argument("image too small for trigger");
  const std::size_t y0 = h - ts - 1, x0 = w - ts - 1;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t dy = 0; dy < ts; ++dy) {
        for (std::size_t dx = 0; dx < ts; ++dx) {
          images.at4(i, ch, y0 + dy, x0 + dx) = (dy + dx) % 2 == 0 ? 1.0f : 0.0f;
        }
      }
    }
  }
}

struct BackdoorRun {
  ModelCheckpoint model;
  TrainingTrace trace;
  std::vector<std::size_t> poisoned_indices;
};

/// Classic dirty-label pixel-pattern baseline: a fraction of the target
/// client's samples get the trigger stamped and their labels flipped to the
/// target label; training then proceeds unmodified.
inline BackdoorRun backdoor_baseline(const std::vector<DomainDataset>& train_sets,
                                     const ModelSpec& spec, const FLConfig& cfg,
                                     std::size_t target, const BackdoorParams& params) {
  if (target >= train_sets.size()) throw std::invalid_argument("target client out of range");
  std::vector<DomainDataset> poisoned_sets = train_sets;
  DomainDataset& victim = poisoned_sets[target];
  const std::size_t n = victim.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng = derive_rng(cfg.seed, "backdoor_poison");
  rng.shuffle(order);
  const std::size_t n_poison = static_cast<std::size_t>(
      std::llround(params.poison_fraction * static_cast<double>(n)));
  BackdoorRun run;
  run.poisoned_indices.assign(order.begin(),
                              order.begin() + static_cast<std::ptrdiff_t>(std::min(n_poison, n)));
  std::sort(run.poisoned_indices.begin(), run.poisoned_indices.end());
  for (const std::size_t i : run.poisoned_indices) {
    std::vector<std::size_t> one{i};
    TensorF img = detail_fed::gather_images(victim.images, one);
    stamp_trigger(img, params.trigger_size);
    const std::size_t sz = img.data.size();
    std::copy_n(img.data.data(), sz, &victim.images.data[i * sz]);
    victim.labels[i] = params.y_target;
  }
  auto [model, trace] = train_federated(poisoned_sets, spec, cfg);
  run.model = std::move(model);
  run.trace = std::move(trace);
  return run;
}

/// Trigger-set verification images for the backdoor baseline: the target
/// client's non-target-label samples with the trigger stamped.
inline TensorF backdoor_verification_images(const DomainDataset& target, int y_target,
                                            int trigger_size = 3) {
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < target.size(); ++i) {
    if (target.labels[i] != y_target) keep.push_back(i);
  }
  TensorF imgs = detail_fed::gather_images(target.images, keep);
  stamp_trigger(imgs, trigger_size);
  return imgs;
}

}  // namespace fdu
