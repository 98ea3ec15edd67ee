#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "fdu/archive.hpp"
#include "fdu/rng.hpp"
#include "fdu/tensor.hpp"

namespace fdu {

/// One client's labeled image set for a single domain.
struct DomainDataset {
  std::string domain_id;
  TensorF images;        // [N, C, H, W], values in [0, 1]
  TensorI64 labels;      // [N], values in [0, num_classes)
  std::string transform_spec;
  std::uint64_t seed = 0;

  std::size_t size() const { return images.shape.empty() ? 0 : images.dim(0); }
  int num_classes() const {
    std::int64_t m = -1;
    for (const std::int64_t v : labels.data) m = std::max(m, v);
    return static_cast<int>(m + 1);
  }
};

struct ImageShape {
  std::size_t channels = 3, height = 32, width = 32;
};

// Domain-shift recipes. Every domain renders the same base glyphs; only the
// transform differs, so the label distribution matches across domains while
// the conditional feature distribution does not. Ordered so that the leading
// transforms also separate cleanly in mean pixel value.
inline const std::vector<std::string>& transform_menu() {
  static const std::vector<std::string> menu = {
      "identity", "invert", "texture", "noise:0.10", "rotate:40", "chanperm:201",
  };
  return menu;
}

namespace detail {

// Foreground tint: channel-asymmetric so channel permutation is a real shift.
constexpr std::array<float, 3> kTint = {1.0f, 0.7f, 0.4f};

struct Glyph {
  // Polyline segments in unit coordinates.
  std::vector<std::array<double, 4>> segments;  // x0, y0, x1, y1
};

/// Deterministic per-class glyph: a pseudo-random polyline through a handful
/// of anchor points. Distinct classes get distinct strokes.
inline Glyph class_glyph(int cls) {
  Glyph g;
  Rng rng(derive_seed(0x67687970ULL, "glyph", {static_cast<std::uint64_t>(cls)}));
  const int anchors = 5 + static_cast<int>(rng.next_below(3));
  double px = rng.next_uniform(0.2, 0.8), py = rng.next_uniform(0.2, 0.8);
  for (int a = 1; a < anchors; ++a) {
    const double nx = rng.next_uniform(0.15, 0.85);
    const double ny = rng.next_uniform(0.15, 0.85);
    g.segments.push_back({px, py, nx, ny});
    px = nx;
    py = ny;
  }
  return g;
}

inline double point_segment_dist(double x, double y, const std::array<double, 4>& s) {
  const double dx = s[2] - s[0], dy = s[3] - s[1];
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0 ? ((x - s[0]) * dx + (y - s[1]) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double cx = s[0] + t * dx, cy = s[1] + t * dy;
  return std::hypot(x - cx, y - cy);
}

/// Rasterizes a glyph with per-sample affine jitter, anchor wobble and a bit
/// of stroke clutter, so classes overlap enough that models have to work
/// (and can overfit) instead of saturating immediately. Output is a
/// grayscale intensity in [0, 1] per pixel.
inline std::vector<float> render_glyph(const Glyph& glyph, std::size_t h, std::size_t w,
                                       Rng& rng) {
  const double angle = rng.next_uniform(-0.35, 0.35);
  const double scale = rng.next_uniform(0.78, 1.22);
  const double tx = rng.next_uniform(-0.10, 0.10);
  const double ty = rng.next_uniform(-0.10, 0.10);
  const double thickness = rng.next_uniform(0.030, 0.060);
  const double ca = std::cos(angle), sa = std::sin(angle);

  auto jitter = [&](double x, double y) -> std::array<double, 2> {
    const double wx = x + rng.next_uniform(-0.05, 0.05);
    const double wy = y + rng.next_uniform(-0.05, 0.05);
    const double cx = wx - 0.5, cy = wy - 0.5;
    return {0.5 + scale * (ca * cx - sa * cy) + tx, 0.5 + scale * (sa * cx + ca * cy) + ty};
  };
  std::vector<std::array<double, 4>> segs;
  segs.reserve(glyph.segments.size() + 2);
  for (const auto& s : glyph.segments) {
    const auto a = jitter(s[0], s[1]);
    const auto b = jitter(s[2], s[3]);
    segs.push_back({a[0], a[1], b[0], b[1]});
  }
  std::vector<double> seg_gain(segs.size(), 1.0);
  // Two short clutter strokes per sample, drawn fainter than the glyph.
  for (int c = 0; c < 2; ++c) {
    const double x0 = rng.next_uniform(0.05, 0.95);
    const double y0 = rng.next_uniform(0.05, 0.95);
    const double dx = rng.next_uniform(-0.25, 0.25);
    const double dy = rng.next_uniform(-0.25, 0.25);
    segs.push_back({x0, y0, std::clamp(x0 + dx, 0.0, 1.0), std::clamp(y0 + dy, 0.0, 1.0)});
    seg_gain.push_back(rng.next_uniform(0.35, 0.6));
  }

  std::vector<float> img(h * w, 0.0f);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double px = (static_cast<double>(x) + 0.5) / static_cast<double>(w);
      const double py = (static_cast<double>(y) + 0.5) / static_cast<double>(h);
      double v = 0.0;
      for (std::size_t si = 0; si < segs.size(); ++si) {
        const double d = point_segment_dist(px, py, segs[si]);
        // Soft pen: full intensity on the stroke, smooth falloff at the edge.
        v = std::max(v, seg_gain[si] * std::clamp(1.5 - d / thickness, 0.0, 1.0));
      }
      img[y * w + x] = static_cast<float>(v);
    }
  }
  return img;
}

inline void apply_transform(const std::string& spec, TensorF& images, std::uint64_t seed,
                            std::size_t domain_index) {
  const std::size_t n = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
  auto param = [&](std::size_t pos) { return spec.substr(pos); };

  if (spec == "identity") {
    return;
  }
  if (spec == "invert") {
    for (float& v : images.data) v = 1.0f - v;
    return;
  }
  if (spec.rfind("noise:", 0) == 0) {
    const double sigma = std::stod(param(6));
    for (std::size_t i = 0; i < n; ++i) {
      Rng rng(derive_seed(seed, "noise", {domain_index, i}));
      float* at = &images.data[i * c * h * w];
      for (std::size_t j = 0; j < c * h * w; ++j) {
        at[j] = std::clamp(at[j] + static_cast<float>(sigma * rng.next_normal()), 0.0f, 1.0f);
      }
    }
    return;
  }
  if (spec == "texture") {
    // Additive diagonal sinusoid with a per-sample phase.
    for (std::size_t i = 0; i < n; ++i) {
      Rng rng(derive_seed(seed, "texture", {domain_index, i}));
      const double phase = rng.next_uniform(0.0, 6.28318530717958647692);
      const double fx = 2.0 * 6.28318530717958647692 / static_cast<double>(w);
      const double fy = 3.0 * 6.28318530717958647692 / static_cast<double>(h);
      for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t y = 0; y < h; ++y) {
          for (std::size_t x = 0; x < w; ++x) {
            const double t =
                0.5 + 0.5 * std::sin(fx * static_cast<double>(x) + fy * static_cast<double>(y) + phase);
            float& v = images.at4(i, ch, y, x);
            v = std::clamp(v + static_cast<float>(0.30 * t), 0.0f, 1.0f);
          }
        }
      }
    }
    return;
  }
  if (spec.rfind("rotate:", 0) == 0) {
    const double deg = std::stod(param(7));
    const double rad = deg * 6.28318530717958647692 / 360.0;
    const double ca = std::cos(rad), sa = std::sin(rad);
    TensorF rotated = images;
    const double cx = (static_cast<double>(w) - 1.0) / 2.0;
    const double cy = (static_cast<double>(h) - 1.0) / 2.0;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t y = 0; y < h; ++y) {
          for (std::size_t x = 0; x < w; ++x) {
            // Inverse map with bilinear sampling; outside pixels become 0.
            const double sx = ca * (static_cast<double>(x) - cx) + sa * (static_cast<double>(y) - cy) + cx;
            const double sy = -sa * (static_cast<double>(x) - cx) + ca * (static_cast<double>(y) - cy) + cy;
            float v = 0.0f;
            const double fx = std::floor(sx), fy = std::floor(sy);
            const int x0 = static_cast<int>(fx), y0 = static_cast<int>(fy);
            const double ax = sx - fx, ay = sy - fy;
            auto sample = [&](int yy, int xx) -> double {
              if (yy < 0 || xx < 0 || yy >= static_cast<int>(h) || xx >= static_cast<int>(w)) return 0.0;
              return images.at4(i, ch, static_cast<std::size_t>(yy), static_cast<std::size_t>(xx));
            };
            const double b = (1 - ay) * ((1 - ax) * sample(y0, x0) + ax * sample(y0, x0 + 1)) +
                             ay * ((1 - ax) * sample(y0 + 1, x0) + ax * sample(y0 + 1, x0 + 1));
            v = static_cast<float>(b);
            rotated.at4(i, ch, y, x) = std::clamp(v, 0.0f, 1.0f);
          }
        }
      }
    }
    images = std::move(rotated);
    return;
  }
  if (spec.rfind("chanperm:", 0) == 0) {
    const std::string perm = param(9);
    if (perm.size() != c) throw std::invalid_argument("chanperm arity mismatch");
    TensorF permuted = images;
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t src = static_cast<std::size_t>(perm[ch] - '0');
      if (src >= c) throw std::invalid_argument("chanperm index out of range");
      for (std::size_t i = 0; i < n; ++i) {
        std::copy_n(&images.at4(i, src, 0, 0), h * w, &permuted.at4(i, ch, 0, 0));
      }
    }
    images = std::move(permuted);
    return;
  }
  throw std::invalid_argument("unknown transform spec: " + spec);
}

}  // namespace detail

/// Renders the shared base image set: `n` jittered glyph samples with labels
/// assigned round-robin over classes. Identical across domains by design.
inline void render_base_set(std::uint64_t seed, int num_classes, int n, const ImageShape& shape,
                            TensorF& images, TensorI64& labels) {
  images = TensorF::zeros({static_cast<std::size_t>(n), shape.channels, shape.height, shape.width});
  labels = TensorI64::zeros({static_cast<std::size_t>(n)});
  std::vector<detail::Glyph> glyphs;
  glyphs.reserve(static_cast<std::size_t>(num_classes));
  for (int cls = 0; cls < num_classes; ++cls) glyphs.push_back(detail::class_glyph(cls));

  for (int i = 0; i < n; ++i) {
    const int cls = i % num_classes;
    labels[static_cast<std::size_t>(i)] = cls;
    Rng rng(derive_seed(seed, "sample", {static_cast<std::uint64_t>(i)}));
    const std::vector<float> gray =
        detail::render_glyph(glyphs[static_cast<std::size_t>(cls)], shape.height, shape.width, rng);
    for (std::size_t ch = 0; ch < shape.channels; ++ch) {
      const float tint = ch < 3 ? detail::kTint[ch] : 1.0f;
      for (std::size_t p = 0; p < shape.height * shape.width; ++p) {
        images.data[((static_cast<std::size_t>(i) * shape.channels + ch) * shape.height * shape.width) + p] =
            tint * gray[p];
      }
    }
  }
}

/// Builds one dataset per domain. All domains share the identical base
/// glyph set; each applies a distinct transform from the menu, so P(y)
/// matches across domains while P(x|y) differs.
inline std::vector<DomainDataset> generate_domains(std::uint64_t seed, int num_domains,
                                                   int num_classes, int n_per_domain,
                                                   const ImageShape& shape = {}) {
  if (num_domains < 2) throw std::invalid_argument("need at least 2 domains");
  if (num_classes < 2) throw std::invalid_argument("need at least 2 classes");
  const auto& menu = transform_menu();
  if (static_cast<std::size_t>(num_domains) > menu.size()) {
    throw std::invalid_argument("num_domains exceeds transform menu size (" +
                                std::to_string(menu.size()) + ")");
  }

  TensorF base_images;
  TensorI64 base_labels;
  render_base_set(seed, num_classes, n_per_domain, shape, base_images, base_labels);

  std::vector<DomainDataset> out;
  out.reserve(static_cast<std::size_t>(num_domains));
  for (int d = 0; d < num_domains; ++d) {
    DomainDataset ds;
    ds.domain_id = "domain" + std::to_string(d) + "_" + menu[static_cast<std::size_t>(d)];
    ds.transform_spec = menu[static_cast<std::size_t>(d)];
    ds.seed = seed;
    ds.images = base_images;
    ds.labels = base_labels;
    detail::apply_transform(ds.transform_spec, ds.images, seed, static_cast<std::size_t>(d));
    out.push_back(std::move(ds));
  }
  return out;
}

/// Stratified train/test split, deterministic in `seed`. Per class, the
/// test side receives round(test_fraction * count) samples.
inline std::pair<DomainDataset, DomainDataset> split_train_test(const DomainDataset& ds,
                                                                double test_fraction,
                                                                std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
    throw std::invalid_argument("test_fraction must be in (0, 1)");
  }
  const std::size_t n = ds.size();
  std::map<std::int64_t, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < n; ++i) by_class[ds.labels[i]].push_back(i);

  std::vector<std::size_t> train_idx, test_idx;
  for (auto& [cls, idx] : by_class) {
    if (idx.size() < 2) {
      throw std::invalid_argument("class " + std::to_string(cls) +
                                  " has fewer than 2 samples; cannot stratify");
    }
    Rng rng(derive_seed(seed, "split", {ds.seed, static_cast<std::uint64_t>(cls)}));
    rng.shuffle(idx);
    std::size_t n_test = static_cast<std::size_t>(
        std::llround(test_fraction * static_cast<double>(idx.size())));
    n_test = std::clamp<std::size_t>(n_test, 1, idx.size() - 1);
    test_idx.insert(test_idx.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_test));
    train_idx.insert(train_idx.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_test), idx.end());
  }
  std::sort(train_idx.begin(), train_idx.end());
  std::sort(test_idx.begin(), test_idx.end());

  auto take = [&](const std::vector<std::size_t>& idx, const char* tag) {
    DomainDataset out;
    out.domain_id = ds.domain_id;
    out.transform_spec = ds.transform_spec;
    out.seed = ds.seed;
    const std::size_t c = ds.images.dim(1), h = ds.images.dim(2), w = ds.images.dim(3);
    out.images = TensorF::zeros({idx.size(), c, h, w});
    out.labels = TensorI64::zeros({idx.size()});
    for (std::size_t r = 0; r < idx.size(); ++r) {
      std::copy_n(&ds.images.data[idx[r] * c * h * w], c * h * w, &out.images.data[r * c * h * w]);
      out.labels[r] = ds.labels[idx[r]];
    }
    (void)tag;
    return out;
  };
  return {take(train_idx, "train"), take(test_idx, "test")};
}

inline double mean_pixel(const TensorF& images) {
  double s = 0.0;
  for (const float v : images.data) s += v;
  return images.data.empty() ? 0.0 : s / static_cast<double>(images.data.size());
}

// ---- persistence -----------------------------------------------------------

inline void save_domain(const std::filesystem::path& path, const DomainDataset& ds) {
  std::map<std::string, AnyTensor> entries;
  entries.emplace("images", ds.images);
  entries.emplace("labels", ds.labels);
  entries.emplace("domain_id", string_entry(ds.domain_id));
  entries.emplace("transform_spec", string_entry(ds.transform_spec));
  TensorI64 seed_t;
  seed_t.shape = {1};
  seed_t.data = {static_cast<std::int64_t>(ds.seed)};
  entries.emplace("seed", seed_t);
  write_archive(path, entries);
}

inline DomainDataset load_domain(const std::filesystem::path& path) {
  const auto entries = read_archive(path);
  DomainDataset ds;
  ds.images = archive_get<float>(entries, "images");
  ds.labels = archive_get<std::int64_t>(entries, "labels");
  // Metadata entries are optional so externally produced archives with just
  // images+labels import cleanly.
  ds.domain_id = entries.count("domain_id") ? entry_string(entries, "domain_id")
                                            : path.stem().string();
  ds.transform_spec =
      entries.count("transform_spec") ? entry_string(entries, "transform_spec") : "external";
  ds.seed = entries.count("seed")
                ? static_cast<std::uint64_t>(archive_get<std::int64_t>(entries, "seed").data[0])
                : 0;
  if (ds.images.ndim() != 4) throw std::invalid_argument("images entry must be [N,C,H,W]");
  if (ds.labels.ndim() != 1 || ds.labels.dim(0) != ds.images.dim(0)) {
    throw std::invalid_argument("labels entry must be [N] matching images");
  }
  return ds;
}

}  // namespace fdu
