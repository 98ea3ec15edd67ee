#pragma once

#include <cstdint>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "fdu/archive.hpp"
#include "fdu/nn_ops.hpp"
#include "fdu/rng.hpp"
#include "fdu/tensor.hpp"

namespace fdu {

struct ConvLayerSpec {
  int out_channels = 0;
  int kernel = 3;
  int stride = 1;
};

/// Architecture description of the classifier: a conv stack (feature
/// extractor front), then fully connected layers. `feature_boundary` counts
/// how many fc layers belong to the feature extractor; the remaining fc
/// layers form the classifier head. Padding is kernel/2, pooling is 2x2/2.
struct ModelSpec {
  int in_channels = 3;
  int in_h = 32;
  int in_w = 32;
  std::vector<ConvLayerSpec> conv_layers;
  std::set<int> pool_after;       // conv indices followed by a max-pool
  std::vector<int> fc_layers;     // widths; last one equals num_classes
  int num_classes = 10;
  int feature_boundary = 2;       // fc layers inside the feature extractor

  static ModelSpec default_spec(int num_classes = 10, int in_channels = 3, int in_h = 32,
                                int in_w = 32) {
    ModelSpec s;
    s.in_channels = in_channels;
    s.in_h = in_h;
    s.in_w = in_w;
    s.conv_layers = {{8, 3, 1}, {16, 3, 1}, {32, 3, 1}};
    s.pool_after = {0, 1};
    s.fc_layers = {128, 64, num_classes};
    s.num_classes = num_classes;
    s.feature_boundary = 2;
    return s;
  }

  void validate() const {
    if (in_channels < 1 || in_h < 1 || in_w < 1) throw std::invalid_argument("bad input shape");
    if (fc_layers.empty()) throw std::invalid_argument("need at least one fc layer");
    if (fc_layers.back() != num_classes) {
      throw std::invalid_argument("last fc width must equal num_classes");
    }
    for (const auto& c : conv_layers) {
      if (c.out_channels < 1 || c.kernel < 1 || c.stride < 1) {
        throw std::invalid_argument("bad conv layer spec");
      }
    }
    for (const int p : pool_after) {
      if (p < 0 || p >= static_cast<int>(conv_layers.size())) {
        throw std::invalid_argument("pool_after index out of range");
      }
    }
    if (feature_boundary < 1 || feature_boundary >= static_cast<int>(fc_layers.size())) {
      throw std::invalid_argument("feature_boundary must split the fc stack");
    }
  }

  int feature_dim() const { return fc_layers[static_cast<std::size_t>(feature_boundary) - 1]; }

  std::vector<std::string> layer_names() const {
    std::vector<std::string> names;
    for (std::size_t i = 0; i < conv_layers.size(); ++i) {
      names.push_back("conv" + std::to_string(i + 1));
    }
    for (std::size_t i = 0; i < fc_layers.size(); ++i) {
      names.push_back("fc" + std::to_string(i + 1));
    }
    return names;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["in_channels"] = in_channels;
    j["in_h"] = in_h;
    j["in_w"] = in_w;
    nlohmann::json convs = nlohmann::json::array();
    for (const auto& c : conv_layers) {
      convs.push_back({{"out_channels", c.out_channels}, {"kernel", c.kernel}, {"stride", c.stride}});
    }
    j["conv_layers"] = convs;
    j["pool_after"] = std::vector<int>(pool_after.begin(), pool_after.end());
    j["fc_layers"] = fc_layers;
    j["num_classes"] = num_classes;
    j["feature_boundary"] = feature_boundary;
    return j;
  }

  static ModelSpec from_json(const nlohmann::json& j) {
    ModelSpec s;
    s.in_channels = j.at("in_channels").get<int>();
    s.in_h = j.at("in_h").get<int>();
    s.in_w = j.at("in_w").get<int>();
    s.conv_layers.clear();
    for (const auto& c : j.at("conv_layers")) {
      s.conv_layers.push_back({c.at("out_channels").get<int>(), c.at("kernel").get<int>(),
                               c.at("stride").get<int>()});
    }
    const auto pools = j.at("pool_after").get<std::vector<int>>();
    s.pool_after = std::set<int>(pools.begin(), pools.end());
    s.fc_layers = j.at("fc_layers").get<std::vector<int>>();
    s.num_classes = j.at("num_classes").get<int>();
    s.feature_boundary = j.at("feature_boundary").get<int>();
    s.validate();
    return s;
  }

  std::string to_string() const { return to_json().dump(); }
  static ModelSpec parse(const std::string& text) {
    return from_json(nlohmann::json::parse(text));
  }

  bool operator==(const ModelSpec& o) const { return to_string() == o.to_string(); }
};

using ParamMap = std::map<std::string, TensorF>;

/// Immutable parameter snapshot. Training replaces checkpoints wholesale.
struct ModelCheckpoint {
  ModelSpec spec;
  ParamMap params;
  std::uint64_t seed = 0;
  std::string provenance;
};

/// Per-layer probe activations: one [N, d] matrix per named layer, conv
/// outputs reduced by global average pooling per channel.
struct ActivationTrace {
  std::vector<std::string> layer_names;
  std::vector<TensorD> activations;
};

// ---- execution plan --------------------------------------------------------

namespace plan {

enum class BlockKind { conv, dense };

struct Block {
  BlockKind kind;
  std::string name;
  nn::ConvDims conv{};      // conv blocks
  bool pooled = false;      // conv blocks: 2x2 max-pool after relu
  int in_dim = 0, out_dim = 0;  // dense blocks
  bool relu = true;         // final dense block has no relu
};

struct NetPlan {
  std::vector<Block> blocks;
  int flatten_dim = 0;
  int feature_block = 0;  // block whose output is the feature vector
  int num_conv = 0;

  static NetPlan make(const ModelSpec& spec) {
    spec.validate();
    NetPlan p;
    int h = spec.in_h, w = spec.in_w, ch = spec.in_channels;
    for (std::size_t i = 0; i < spec.conv_layers.size(); ++i) {
      const auto& c = spec.conv_layers[i];
      Block b;
      b.kind = BlockKind::conv;
      b.name = "conv" + std::to_string(i + 1);
      b.conv = nn::conv_dims(ch, c.out_channels, c.kernel, c.stride, c.kernel / 2, h, w);
      h = b.conv.out_h;
      w = b.conv.out_w;
      ch = c.out_channels;
      if (spec.pool_after.count(static_cast<int>(i))) {
        if (h < 2 || w < 2) throw std::invalid_argument("feature map too small to pool");
        b.pooled = true;
        h /= 2;
        w /= 2;
      }
      p.blocks.push_back(b);
    }
    p.num_conv = static_cast<int>(spec.conv_layers.size());
    p.flatten_dim = ch * h * w;
    int in_dim = p.flatten_dim;
    for (std::size_t i = 0; i < spec.fc_layers.size(); ++i) {
      Block b;
      b.kind = BlockKind::dense;
      b.name = "fc" + std::to_string(i + 1);
      b.in_dim = in_dim;
      b.out_dim = spec.fc_layers[i];
      b.relu = i + 1 < spec.fc_layers.size();
      in_dim = b.out_dim;
      p.blocks.push_back(b);
    }
    p.feature_block = p.num_conv + spec.feature_boundary - 1;
    return p;
  }

  std::map<std::string, std::vector<std::size_t>> param_shapes() const {
    std::map<std::string, std::vector<std::size_t>> shapes;
    for (const auto& b : blocks) {
      if (b.kind == BlockKind::conv) {
        shapes[b.name + ".weight"] = {static_cast<std::size_t>(b.conv.out_ch),
                                      static_cast<std::size_t>(b.conv.in_ch),
                                      static_cast<std::size_t>(b.conv.k),
                                      static_cast<std::size_t>(b.conv.k)};
        shapes[b.name + ".bias"] = {static_cast<std::size_t>(b.conv.out_ch)};
      } else {
        shapes[b.name + ".weight"] = {static_cast<std::size_t>(b.out_dim),
                                      static_cast<std::size_t>(b.in_dim)};
        shapes[b.name + ".bias"] = {static_cast<std::size_t>(b.out_dim)};
      }
    }
    return shapes;
  }
};

/// Forward cache: inputs, pre-activations and block outputs needed by the
/// backward pass.
template <typename T>
struct Cache {
  std::size_t batch = 0;
  Tensor<T> input;
  std::vector<Tensor<T>> pre;                      // pre-relu (conv: pre-pool)
  std::vector<Tensor<T>> out;                      // block outputs
  std::vector<std::vector<std::uint32_t>> argmax;  // pool indices per conv block
};

template <typename T>
const Tensor<T>& param(const std::map<std::string, Tensor<T>>& params, const std::string& name) {
  const auto it = params.find(name);
  if (it == params.end()) throw std::out_of_range("missing parameter: " + name);
  return it->second;
}

template <typename T>
Tensor<T> forward(const NetPlan& p, const std::map<std::string, Tensor<T>>& params,
                  const Tensor<T>& input, Cache<T>* cache) {
  const std::size_t batch = input.dim(0);
  if (cache) {
    cache->batch = batch;
    cache->input = input;
    cache->pre.assign(p.blocks.size(), {});
    cache->out.assign(p.blocks.size(), {});
    cache->argmax.assign(p.blocks.size(), {});
  }
  Tensor<T> cur = input;
  std::vector<T> cols;
  for (std::size_t bi = 0; bi < p.blocks.size(); ++bi) {
    const Block& b = p.blocks[bi];
    if (b.kind == BlockKind::conv) {
      Tensor<T> pre({batch, static_cast<std::size_t>(b.conv.out_ch),
                     static_cast<std::size_t>(b.conv.out_h), static_cast<std::size_t>(b.conv.out_w)});
      nn::conv_forward(cur, b.conv, param(params, b.name + ".weight"),
                       param(params, b.name + ".bias"), pre, cols);
      Tensor<T> act = pre;
      nn::relu_forward(act);
      Tensor<T> outb;
      std::vector<std::uint32_t> argmax;
      if (b.pooled) {
        outb = Tensor<T>({batch, static_cast<std::size_t>(b.conv.out_ch),
                          static_cast<std::size_t>(b.conv.out_h / 2),
                          static_cast<std::size_t>(b.conv.out_w / 2)});
        nn::maxpool_forward(act, b.conv.out_ch, b.conv.out_h, b.conv.out_w, outb, argmax);
      } else {
        outb = std::move(act);
      }
      if (cache) {
        cache->pre[bi] = std::move(pre);
        cache->out[bi] = outb;
        cache->argmax[bi] = std::move(argmax);
      }
      cur = std::move(outb);
    } else {
      // Flattening [B,C,H,W] -> [B, C*H*W] is a relabeling in row-major layout.
      Tensor<T> flat_in = cur;
      flat_in.shape = {batch, static_cast<std::size_t>(b.in_dim)};
      Tensor<T> pre({batch, static_cast<std::size_t>(b.out_dim)});
      nn::dense_forward(flat_in, param(params, b.name + ".weight"), param(params, b.name + ".bias"),
                        pre);
      Tensor<T> outb = pre;
      if (b.relu) nn::relu_forward(outb);
      if (cache) {
        cache->pre[bi] = std::move(pre);
        cache->out[bi] = outb;
      }
      cur = std::move(outb);
    }
  }
  return cur;
}

/// Reverse pass. `dlogits` seeds the gradient at the network output; the
/// optional `extra` map injects additional gradients at block outputs
/// (block index -> [B, d] gradient), which is how the feature-alignment
/// term reaches the shared trunk. Returns gradients for every parameter;
/// writes d(loss)/d(input) when `input_grad` is non-null.
template <typename T>
std::map<std::string, Tensor<T>> backward(
    const NetPlan& p, const std::map<std::string, Tensor<T>>& params, const Cache<T>& cache,
    const Tensor<T>& dlogits, const std::map<int, Tensor<T>>* extra = nullptr,
    Tensor<T>* input_grad = nullptr) {
  std::map<std::string, Tensor<T>> grads;
  for (const auto& [name, t] : params) {
    grads.emplace(name, Tensor<T>::zeros(t.shape));
  }
  std::vector<T> cols, dcols;
  Tensor<T> grad = dlogits;
  for (int bi = static_cast<int>(p.blocks.size()) - 1; bi >= 0; --bi) {
    const Block& b = p.blocks[static_cast<std::size_t>(bi)];
    if (extra) {
      const auto it = extra->find(bi);
      if (it != extra->end()) {
        if (it->second.data.size() != grad.data.size()) {
          throw std::invalid_argument("extra gradient shape mismatch at block " + b.name);
        }
        for (std::size_t i = 0; i < grad.data.size(); ++i) grad.data[i] += it->second.data[i];
      }
    }
    const Tensor<T>& below =
        bi == 0 ? cache.input : cache.out[static_cast<std::size_t>(bi) - 1];
    if (b.kind == BlockKind::dense) {
      if (b.relu) nn::relu_backward(cache.pre[static_cast<std::size_t>(bi)], grad);
      Tensor<T> flat_in = below;
      flat_in.shape = {cache.batch, static_cast<std::size_t>(b.in_dim)};
      const bool need_below = bi > 0 || input_grad != nullptr;
      Tensor<T> dinput;
      if (need_below) dinput = Tensor<T>({cache.batch, static_cast<std::size_t>(b.in_dim)});
      nn::dense_backward(flat_in, param(params, b.name + ".weight"), grad,
                         grads.at(b.name + ".weight"), grads.at(b.name + ".bias"),
                         need_below ? &dinput : nullptr);
      if (need_below) {
        dinput.shape = below.shape;
        grad = std::move(dinput);
      }
    } else {
      Tensor<T> dact;
      if (b.pooled) {
        dact = Tensor<T>({cache.batch, static_cast<std::size_t>(b.conv.out_ch),
                          static_cast<std::size_t>(b.conv.out_h),
                          static_cast<std::size_t>(b.conv.out_w)});
        nn::maxpool_backward(grad, b.conv.out_ch, b.conv.out_h, b.conv.out_w,
                             cache.argmax[static_cast<std::size_t>(bi)], dact);
      } else {
        dact = std::move(grad);
      }
      nn::relu_backward(cache.pre[static_cast<std::size_t>(bi)], dact);
      const bool need_below = bi > 0 || input_grad != nullptr;
      Tensor<T> dinput;
      if (need_below) dinput = Tensor<T>(below.shape);
      nn::conv_backward(below, b.conv, param(params, b.name + ".weight"), dact,
                        grads.at(b.name + ".weight"), grads.at(b.name + ".bias"),
                        need_below ? &dinput : nullptr, cols, dcols);
      if (need_below) grad = std::move(dinput);
    }
  }
  if (input_grad) *input_grad = std::move(grad);
  return grads;
}

}  // namespace plan

// ---- public operations -----------------------------------------------------

/// Fan-in scaled uniform init (std ~ 1/sqrt(fan_in)); biases zero.
inline ModelCheckpoint init_params(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  const plan::NetPlan p = plan::NetPlan::make(spec);
  ModelCheckpoint ckpt;
  ckpt.spec = spec;
  ckpt.seed = seed;
  ckpt.provenance = "init";
  const auto shapes = p.param_shapes();
  std::uint64_t layer_index = 0;
  for (const auto& [name, shape] : shapes) {
    TensorF t(shape);
    if (name.ends_with(".weight")) {
      std::size_t fan_in = 1;
      for (std::size_t d = 1; d < shape.size(); ++d) fan_in *= shape[d];
      const double bound = std::sqrt(3.0) / std::sqrt(static_cast<double>(fan_in));
      Rng rng = derive_rng(seed, "init", {hash_label(name), layer_index});
      for (float& v : t.data) v = static_cast<float>(rng.next_uniform(-bound, bound));
    }
    ckpt.params.emplace(name, std::move(t));
    ++layer_index;
  }
  return ckpt;
}

inline void check_batch_shape(const ModelSpec& spec, const TensorF& batch) {
  if (batch.ndim() != 4 || batch.dim(1) != static_cast<std::size_t>(spec.in_channels) ||
      batch.dim(2) != static_cast<std::size_t>(spec.in_h) ||
      batch.dim(3) != static_cast<std::size_t>(spec.in_w)) {
    throw std::invalid_argument("batch shape " + shape_to_string(batch.shape) +
                                " does not match model input");
  }
}

inline TensorF forward(const ModelCheckpoint& ckpt, const TensorF& batch) {
  check_batch_shape(ckpt.spec, batch);
  const plan::NetPlan p = plan::NetPlan::make(ckpt.spec);
  return plan::forward<float>(p, ckpt.params, batch, nullptr);
}

/// Forward pass that also captures per-layer activations for analysis.
inline std::pair<TensorF, ActivationTrace> forward_with_trace(const ModelCheckpoint& ckpt,
                                                              const TensorF& batch) {
  check_batch_shape(ckpt.spec, batch);
  const plan::NetPlan p = plan::NetPlan::make(ckpt.spec);
  plan::Cache<float> cache;
  TensorF logits = plan::forward<float>(p, ckpt.params, batch, &cache);
  ActivationTrace trace;
  const std::size_t n = batch.dim(0);
  for (std::size_t bi = 0; bi < p.blocks.size(); ++bi) {
    const auto& b = p.blocks[bi];
    trace.layer_names.push_back(b.name);
    const TensorF& out = cache.out[bi];
    if (b.kind == plan::BlockKind::conv) {
      // Global average pool per channel: one column per channel.
      const std::size_t ch = out.dim(1), hw = out.dim(2) * out.dim(3);
      TensorD m({n, ch});
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t c = 0; c < ch; ++c) {
          double s = 0.0;
          const float* at = out.data.data() + (i * ch + c) * hw;
          for (std::size_t j = 0; j < hw; ++j) s += at[j];
          m.at2(i, c) = s / static_cast<double>(hw);
        }
      }
      trace.activations.push_back(std::move(m));
    } else {
      TensorD m({n, out.dim(1)});
      for (std::size_t i = 0; i < out.data.size(); ++i) m.data[i] = out.data[i];
      trace.activations.push_back(std::move(m));
    }
  }
  return {std::move(logits), std::move(trace)};
}

enum class Wrt { params, input };

struct GradResult {
  double loss = 0.0;
  ParamMap param_grads;  // populated for Wrt::params
  TensorF input_grad;    // populated for Wrt::input
};

inline GradResult loss_and_grad(const ModelCheckpoint& ckpt, const TensorF& batch,
                                const TensorI64& labels, Wrt wrt = Wrt::params) {
  check_batch_shape(ckpt.spec, batch);
  if (labels.dim(0) != batch.dim(0)) throw std::invalid_argument("labels/batch size mismatch");
  for (const std::int64_t y : labels.data) {
    if (y < 0 || y >= ckpt.spec.num_classes) throw std::invalid_argument("label out of range");
  }
  const plan::NetPlan p = plan::NetPlan::make(ckpt.spec);
  plan::Cache<float> cache;
  TensorF logits = plan::forward<float>(p, ckpt.params, batch, &cache);
  TensorF dlogits(logits.shape);
  GradResult r;
  r.loss = nn::softmax_cross_entropy(logits, labels, &dlogits);
  if (wrt == Wrt::params) {
    r.param_grads = plan::backward<float>(p, ckpt.params, cache, dlogits);
  } else {
    TensorF input_grad;
    (void)plan::backward<float>(p, ckpt.params, cache, dlogits, nullptr, &input_grad);
    r.input_grad = std::move(input_grad);
  }
  return r;
}

inline double loss_value(const ModelCheckpoint& ckpt, const TensorF& batch,
                         const TensorI64& labels) {
  TensorF logits = forward(ckpt, batch);
  return nn::softmax_cross_entropy<float>(logits, labels, nullptr);
}

/// Argmax prediction; ties break to the lowest class index.
inline TensorI64 predict_logits(const TensorF& logits) {
  const std::size_t b = logits.dim(0), c = logits.dim(1);
  TensorI64 out({b});
  for (std::size_t i = 0; i < b; ++i) {
    const float* row = logits.data.data() + i * c;
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j) {
      if (row[j] > row[best]) best = j;
    }
    out[i] = static_cast<std::int64_t>(best);
  }
  return out;
}

inline TensorI64 predict(const ModelCheckpoint& ckpt, const TensorF& batch) {
  return predict_logits(forward(ckpt, batch));
}

/// Feature vectors z = f(x): the activation entering the classifier head.
inline TensorF feature(const ModelCheckpoint& ckpt, const TensorF& batch) {
  check_batch_shape(ckpt.spec, batch);
  const plan::NetPlan p = plan::NetPlan::make(ckpt.spec);
  plan::Cache<float> cache;
  (void)plan::forward<float>(p, ckpt.params, batch, &cache);
  TensorF out = cache.out[static_cast<std::size_t>(p.feature_block)];
  out.shape = {batch.dim(0), static_cast<std::size_t>(ckpt.spec.feature_dim())};
  return out;
}

// ---- checkpoint persistence -------------------------------------------------

inline void save_checkpoint(const std::filesystem::path& path, const ModelCheckpoint& ckpt) {
  std::map<std::string, AnyTensor> entries;
  for (const auto& [name, t] : ckpt.params) entries.emplace("param/" + name, t);
  entries.emplace("spec", string_entry(ckpt.spec.to_string()));
  entries.emplace("provenance", string_entry(ckpt.provenance));
  TensorI64 seed_t;
  seed_t.shape = {1};
  seed_t.data = {static_cast<std::int64_t>(ckpt.seed)};
  entries.emplace("seed", seed_t);
  write_archive(path, entries);
}

inline ModelCheckpoint load_checkpoint(const std::filesystem::path& path) {
  const auto entries = read_archive(path);
  ModelCheckpoint ckpt;
  ckpt.spec = ModelSpec::parse(entry_string(entries, "spec"));
  ckpt.provenance = entry_string(entries, "provenance");
  ckpt.seed = static_cast<std::uint64_t>(archive_get<std::int64_t>(entries, "seed").data[0]);
  for (const auto& [name, t] : entries) {
    if (name.rfind("param/", 0) == 0) {
      ckpt.params.emplace(name.substr(6), std::get<TensorF>(t));
    }
  }
  // Shape check against the spec catches corrupted or mismatched files.
  const auto shapes = plan::NetPlan::make(ckpt.spec).param_shapes();
  for (const auto& [name, shape] : shapes) {
    const auto it = ckpt.params.find(name);
    if (it == ckpt.params.end() || it->second.shape != shape) {
      throw std::invalid_argument("checkpoint parameter " + name + " missing or misshapen");
    }
  }
  return ckpt;
}

// ---- small param-map helpers used across training code ----------------------

inline ParamMap zeros_like(const ParamMap& params) {
  ParamMap out;
  for (const auto& [name, t] : params) out.emplace(name, TensorF::zeros(t.shape));
  return out;
}

/// dst += scale * src, elementwise across the map, accumulating in f64.
inline void axpy(ParamMap& dst, const ParamMap& src, double scale) {
  for (auto& [name, t] : dst) {
    const TensorF& s = src.at(name);
    for (std::size_t i = 0; i < t.data.size(); ++i) {
      t.data[i] = static_cast<float>(static_cast<double>(t.data[i]) +
                                     scale * static_cast<double>(s.data[i]));
    }
  }
}

inline double param_l2_norm_sq(const ParamMap& a, const ParamMap& b) {
  double s = 0.0;
  for (const auto& [name, t] : a) {
    const TensorF& u = b.at(name);
    for (std::size_t i = 0; i < t.data.size(); ++i) {
      const double d = static_cast<double>(t.data[i]) - static_cast<double>(u.data[i]);
      s += d * d;
    }
  }
  return s;
}

inline bool params_equal(const ParamMap& a, const ParamMap& b) {
  if (a.size() != b.size()) return false;
  for (const auto& [name, t] : a) {
    const auto it = b.find(name);
    if (it == b.end() || it->second.shape != t.shape) return false;
    if (std::memcmp(t.data.data(), it->second.data.data(), t.data.size() * sizeof(float)) != 0) {
      return false;
    }
  }
  return true;
}

}  // namespace fdu
