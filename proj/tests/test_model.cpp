#include <catch_amalgamated.hpp>
#include <cmath>
#include <filesystem>

#include "fdu/model.hpp"
#include "fdu/rng.hpp"
#include "support/oracles.hpp"

using namespace fdu;

namespace {

ModelSpec micro_spec() {
  ModelSpec spec;
  spec.in_channels = 2;
  spec.in_h = 6;
  spec.in_w = 6;
  spec.conv_layers = {{3, 3, 1}, {4, 3, 1}};
  spec.pool_after = {0};
  spec.fc_layers = {8, 5};
  spec.num_classes = 5;
  spec.feature_boundary = 1;
  return spec;
}

TensorF random_batch(const ModelSpec& spec, std::size_t b, std::uint64_t seed) {
  TensorF x({b, static_cast<std::size_t>(spec.in_channels), static_cast<std::size_t>(spec.in_h),
             static_cast<std::size_t>(spec.in_w)});
  Rng rng(seed);
  for (auto& v : x.data) v = static_cast<float>(rng.next_double());
  return x;
}

TensorI64 random_labels(const ModelSpec& spec, std::size_t b, std::uint64_t seed) {
  TensorI64 y({b});
  Rng rng(seed);
  for (auto& v : y.data) v = static_cast<std::int64_t>(rng.next_below(spec.num_classes));
  return y;
}

ModelCheckpoint zero_model(const ModelSpec& spec) {
  ModelCheckpoint ckpt = init_params(spec, 0);
  for (auto& [name, t] : ckpt.params) std::fill(t.data.begin(), t.data.end(), 0.0f);
  return ckpt;
}

}  // namespace

TEST_CASE("init is deterministic with zero biases") {
  const auto spec = ModelSpec::default_spec(10);
  const auto a = init_params(spec, 42);
  const auto b = init_params(spec, 42);
  CHECK(params_equal(a.params, b.params));
  const auto c = init_params(spec, 43);
  CHECK_FALSE(params_equal(a.params, c.params));
  for (const auto& [name, t] : a.params) {
    if (name.ends_with(".bias")) {
      for (const float v : t.data) REQUIRE(v == 0.0f);
    }
  }
}

TEST_CASE("weight std tracks 1/sqrt(fan_in) for a 64-unit dense layer") {
  ModelSpec spec;
  spec.in_channels = 1;
  spec.in_h = 4;
  spec.in_w = 4;
  spec.conv_layers = {};
  spec.pool_after = {};
  spec.fc_layers = {64, 3};
  spec.num_classes = 3;
  spec.feature_boundary = 1;
  const double expected = 1.0 / std::sqrt(16.0);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto ckpt = init_params(spec, seed);
    const TensorF& w = ckpt.params.at("fc1.weight");
    double mean = 0.0;
    for (const float v : w.data) mean += v;
    mean /= static_cast<double>(w.data.size());
    double var = 0.0;
    for (const float v : w.data) var += (v - mean) * (v - mean);
    const double std = std::sqrt(var / static_cast<double>(w.data.size()));
    CHECK(std > 0.8 * expected);
    CHECK(std < 1.2 * expected);
  }
}

TEST_CASE("zero model maps zero input to zero logits and loss ln(C)") {
  const auto spec = micro_spec();
  const auto ckpt = zero_model(spec);
  TensorF x({4, 2, 6, 6});
  const TensorF logits = forward(ckpt, x);
  for (const float v : logits.data) REQUIRE(v == 0.0f);

  const TensorI64 y = random_labels(spec, 4, 7);
  const double loss = loss_value(ckpt, x, y);
  CHECK(loss == std::log(5.0));  // uniform logits, exact
}

TEST_CASE("single sample logits match the same sample inside a batch") {
  const auto spec = micro_spec();
  const auto ckpt = init_params(spec, 3);
  const TensorF batch = random_batch(spec, 8, 11);
  const TensorF all = forward(ckpt, batch);
  for (std::size_t i = 0; i < 8; ++i) {
    TensorF one({1, 2, 6, 6});
    std::copy_n(&batch.data[i * 72], 72, one.data.begin());
    const TensorF single = forward(ckpt, one);
    for (std::size_t c = 0; c < 5; ++c) {
      CHECK(std::abs(single.at2(0, c) - all.at2(i, c)) < 1e-6f);
    }
  }
}

TEST_CASE("forward matches a scalar reference implementation") {
  const auto spec = micro_spec();
  const auto ckpt = init_params(spec, 123);
  const auto params64 = oracles::to_f64(ckpt.params);
  const TensorF batch = random_batch(spec, 3, 31);
  const TensorF logits = forward(ckpt, batch);
  for (std::size_t i = 0; i < 3; ++i) {
    std::vector<double> img(72);
    for (std::size_t j = 0; j < 72; ++j) img[j] = batch.data[i * 72 + j];
    const auto ref = oracles::scalar_forward(spec, params64, img);
    for (std::size_t c = 0; c < 5; ++c) {
      CHECK(std::abs(logits.at2(i, c) - ref[c]) < 1e-4);
    }
  }
  // Golden row for (seed=123, input stream 31), frozen from the scalar
  // reference implementation above.
  const double golden[5] = {-0.042498190772812569, 0.086851616656901817, 0.41601754508131877,
                            0.077351335575143593, -0.67478623474212285};
  std::vector<double> img(72);
  for (std::size_t j = 0; j < 72; ++j) img[j] = batch.data[j];
  const auto ref = oracles::scalar_forward(spec, params64, img);
  for (std::size_t c = 0; c < 5; ++c) {
    CHECK(std::abs(ref[c] - golden[c]) < 1e-12);
    CHECK(std::abs(logits.at2(0, c) - golden[c]) < 1e-4);
  }
}

TEST_CASE("shape mismatches are rejected") {
  const auto spec = micro_spec();
  const auto ckpt = init_params(spec, 1);
  TensorF bad({2, 2, 5, 6});
  CHECK_THROWS_AS(forward(ckpt, bad), std::invalid_argument);
  TensorF x = random_batch(spec, 2, 1);
  TensorI64 bad_labels({2});
  bad_labels.data = {0, 99};
  CHECK_THROWS_AS(loss_and_grad(ckpt, x, bad_labels), std::invalid_argument);
}

TEST_CASE("analytic gradients match central finite differences (f64)") {
  // Step is 1e-3; sample points whose relu/pool activation pattern changes
  // inside the step are skipped (the loss is not differentiable there).
  const auto spec = micro_spec();
  const plan::NetPlan p = plan::NetPlan::make(spec);
  std::map<std::string, TensorD> params;
  Rng prng(4);
  for (const auto& [name, shape] : p.param_shapes()) {
    TensorD t(shape);
    for (auto& v : t.data) v = prng.next_uniform(-0.3, 0.3);
    params.emplace(name, std::move(t));
  }
  TensorD x({4, 2, 6, 6});
  Rng xrng(40);
  for (auto& v : x.data) v = xrng.next_double();
  TensorI64 y({4});
  for (auto& v : y.data) v = static_cast<std::int64_t>(xrng.next_below(5));

  auto pattern_sig = [&](const std::map<std::string, TensorD>& pp) {
    plan::Cache<double> c;
    plan::forward<double>(p, pp, x, &c);
    std::size_t h = 1469598103934665603ull;
    auto mix = [&](std::size_t v) {
      h ^= v;
      h *= 1099511628211ull;
    };
    for (std::size_t bi = 0; bi < p.blocks.size(); ++bi) {
      for (const double v : c.pre[bi].data) mix(v > 0 ? 1 : 0);
      for (const auto a : c.argmax[bi]) mix(a);
    }
    return h;
  };
  auto loss_of = [&](const std::map<std::string, TensorD>& pp) {
    auto logits = plan::forward<double>(p, pp, x, nullptr);
    return nn::softmax_cross_entropy<double>(logits, y, nullptr);
  };

  plan::Cache<double> cache;
  auto logits = plan::forward<double>(p, params, x, &cache);
  TensorD dlogits(logits.shape);
  nn::softmax_cross_entropy<double>(logits, y, &dlogits);
  TensorD dx;
  const auto grads = plan::backward<double>(p, params, cache, dlogits, nullptr, &dx);

  const double h = 1e-3;
  for (const auto& [name, g] : grads) {
    int kept = 0;
    double worst = 0.0;
    for (std::size_t i = 0; i < g.data.size(); ++i) {
      auto pp = params;
      pp.at(name).data[i] += h;
      const auto sig_plus = pattern_sig(pp);
      const double lp = loss_of(pp);
      pp.at(name).data[i] -= 2 * h;
      const auto sig_minus = pattern_sig(pp);
      const double lm = loss_of(pp);
      if (sig_plus != sig_minus) continue;
      ++kept;
      const double num = (lp - lm) / (2 * h);
      const double rel = std::abs(num - g.data[i]) /
                         std::max({std::abs(num), std::abs(g.data[i]), 1e-8});
      worst = std::max(worst, rel);
    }
    INFO(name << " kept=" << kept);
    REQUIRE(kept > 0);
    CHECK(worst < 1e-4);
  }

  // Input gradients, same protocol.
  int kept = 0;
  double worst = 0.0;
  for (std::size_t i = 0; i < x.data.size(); i += 7) {
    auto xx = x;
    xx.data[i] += h;
    plan::Cache<double> cp;
    plan::forward<double>(p, params, xx, &cp);
    const double lp = nn::softmax_cross_entropy<double>(
        plan::forward<double>(p, params, xx, nullptr), y, nullptr);
    xx.data[i] -= 2 * h;
    const double lm = nn::softmax_cross_entropy<double>(
        plan::forward<double>(p, params, xx, nullptr), y, nullptr);
    ++kept;
    const double num = (lp - lm) / (2 * h);
    const double rel =
        std::abs(num - dx.data[i]) / std::max({std::abs(num), std::abs(dx.data[i]), 1e-8});
    worst = std::max(worst, rel);
  }
  REQUIRE(kept > 0);
  CHECK(worst < 1e-4);
}

TEST_CASE("input gradient has the input's shape") {
  const auto spec = micro_spec();
  const auto ckpt = init_params(spec, 5);
  const TensorF x = random_batch(spec, 3, 5);
  const TensorI64 y = random_labels(spec, 3, 6);
  const GradResult g = loss_and_grad(ckpt, x, y, Wrt::input);
  CHECK(g.input_grad.shape == x.shape);
}

TEST_CASE("predict breaks ties toward the lowest class index") {
  TensorF logits({2, 2});
  logits.data = {0.1f, 0.9f, 0.5f, 0.5f};
  const TensorI64 prediction = predict_logits(logits);
  CHECK(prediction[0] == 1);
  CHECK(prediction[1] == 0);
}

TEST_CASE("predict agrees with argmax of forward on random batches") {
  const auto spec = micro_spec();
  const auto ckpt = init_params(spec, 77);
  for (std::uint64_t s = 0; s < 3; ++s) {
    const TensorF x = random_batch(spec, 16, 100 + s);
    const TensorF logits = forward(ckpt, x);
    const TensorI64 direct = predict(ckpt, x);
    for (std::size_t i = 0; i < 16; ++i) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < 5; ++c) {
        if (logits.at2(i, c) > logits.at2(i, best)) best = c;
      }
      CHECK(direct[i] == static_cast<std::int64_t>(best));
    }
  }
}

TEST_CASE("feature returns the activation entering the classifier head") {
  const auto spec = micro_spec();
  const auto ckpt = init_params(spec, 8);
  const TensorF x = random_batch(spec, 4, 9);
  const TensorF f = feature(ckpt, x);
  REQUIRE(f.shape == std::vector<std::size_t>{4, 8});
  const auto [logits, trace] = forward_with_trace(ckpt, x);
  (void)logits;
  // fc1 is the feature layer in the micro spec.
  for (std::size_t i = 0; i < f.data.size(); ++i) {
    CHECK(f.data[i] == Catch::Approx(trace.activations[2].data[i]));
  }
}

TEST_CASE("checkpoint serialization round-trips to bit-identical logits") {
  const auto spec = ModelSpec::default_spec(6, 3, 16, 16);
  const auto ckpt = init_params(spec, 2024);
  const auto path = std::filesystem::temp_directory_path() / "fdu_ckpt_roundtrip.tar";
  save_checkpoint(path, ckpt);
  const auto back = load_checkpoint(path);
  CHECK(back.spec == ckpt.spec);
  CHECK(params_equal(back.params, ckpt.params));
  TensorF x({2, 3, 16, 16});
  Rng rng(5);
  for (auto& v : x.data) v = static_cast<float>(rng.next_double());
  const TensorF a = forward(ckpt, x);
  const TensorF b = forward(back, x);
  CHECK(a.data == b.data);
}

TEST_CASE("activation trace layer names and widths follow the spec") {
  const auto spec = ModelSpec::default_spec(10);
  const auto ckpt = init_params(spec, 1);
  TensorF x({2, 3, 32, 32});
  const auto [logits, trace] = forward_with_trace(ckpt, x);
  (void)logits;
  REQUIRE(trace.layer_names ==
          std::vector<std::string>{"conv1", "conv2", "conv3", "fc1", "fc2", "fc3"});
  CHECK(trace.activations[0].dim(1) == 8);
  CHECK(trace.activations[2].dim(1) == 32);
  CHECK(trace.activations[3].dim(1) == 128);
  CHECK(trace.activations[5].dim(1) == 10);
  for (const auto& m : trace.activations) CHECK(m.dim(0) == 2);
}

TEST_CASE("spec validation rejects inconsistent layouts") {
  ModelSpec bad = ModelSpec::default_spec(10);
  bad.fc_layers.back() = 9;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  ModelSpec bad2 = ModelSpec::default_spec(10);
  bad2.feature_boundary = 3;
  CHECK_THROWS_AS(bad2.validate(), std::invalid_argument);
  ModelSpec bad3 = ModelSpec::default_spec(10);
  bad3.pool_after = {5};
  CHECK_THROWS_AS(bad3.validate(), std::invalid_argument);
}
