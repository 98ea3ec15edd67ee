#include <catch_amalgamated.hpp>
#include <cmath>

#include "fdu/mia.hpp"

using namespace fdu;

namespace {

DomainDataset tiny_dataset(std::size_t n, int num_classes, std::uint64_t seed,
                           std::int64_t fixed_label = -1) {
  DomainDataset ds;
  ds.domain_id = "tiny";
  ds.images = TensorF({n, 3, 16, 16});
  ds.labels = TensorI64({n});
  Rng rng(seed);
  for (auto& v : ds.images.data) v = static_cast<float>(rng.next_double());
  for (std::size_t i = 0; i < n; ++i) {
    ds.labels[i] = fixed_label >= 0 ? fixed_label
                                    : static_cast<std::int64_t>(i % static_cast<std::size_t>(
                                                                        num_classes));
  }
  return ds;
}

AttackModel manual_attack(std::size_t feature_dim, double bias_nonmember, double bias_member) {
  AttackModel m;
  m.mean.assign(feature_dim, 0.0);
  m.stdev.assign(feature_dim, 1.0);
  m.w1 = TensorD({4, feature_dim});
  m.b1 = TensorD({4});
  m.w2 = TensorD({2, 4});
  m.b2 = TensorD({2});
  m.b2.data = {bias_nonmember, bias_member};
  return m;
}

}  // namespace

TEST_CASE("confident correct predictions give first entry near 1 and loss near 0") {
  const ModelSpec spec = ModelSpec::default_spec(4, 3, 16, 16);
  ModelCheckpoint ckpt = init_params(spec, 0);
  for (auto& [name, t] : ckpt.params) std::fill(t.data.begin(), t.data.end(), 0.0f);
  ckpt.params.at("fc3.bias").data[2] = 30.0f;  // class 2 with overwhelming confidence

  const DomainDataset ds = tiny_dataset(10, 4, 1, 2);  // all labels are class 2
  const auto features = detail_mia::features_for(ckpt, ds, true);
  REQUIRE(features.size() == 10);
  for (const auto& s : features) {
    CHECK(s.confidence[0] == Catch::Approx(1.0).margin(1e-9));
    CHECK(s.loss == Catch::Approx(0.0).margin(1e-9));
    CHECK(s.member);
    double sum = 0.0;
    for (const double v : s.confidence) sum += v;
    CHECK(sum == Catch::Approx(1.0).margin(1e-6));
    for (std::size_t i = 1; i < s.confidence.size(); ++i) {
      CHECK(s.confidence[i - 1] >= s.confidence[i]);  // sorted descending
    }
  }
}

TEST_CASE("attack set is balanced and interleaved") {
  const auto domains = generate_domains(41, 2, 4, 40, ImageShape{3, 16, 16});
  const ModelSpec spec = ModelSpec::default_spec(4, 3, 16, 16);
  FLConfig cfg;
  cfg.rounds = 1;
  cfg.local_epochs = 1;
  cfg.batch_size = 16;
  cfg.seed = 17;
  const auto shadows = train_shadows(domains, spec, cfg, 0.25, 2, 9);
  REQUIRE(shadows.size() == 2);
  const auto set = build_attack_set(shadows, 9);
  std::size_t members = 0;
  for (const auto& s : set) members += s.member ? 1 : 0;
  CHECK(members * 2 == set.size());
  // Shadow models differ (distinct derived seeds and splits).
  CHECK_FALSE(params_equal(shadows[0].model.params, shadows[1].model.params));
}

TEST_CASE("degenerate predictors produce flagged precision and base-rate behavior") {
  const ModelSpec spec = ModelSpec::default_spec(4, 3, 16, 16);
  const ModelCheckpoint victim = init_params(spec, 5);
  const DomainDataset train = tiny_dataset(30, 4, 2);
  const DomainDataset heldout = tiny_dataset(20, 4, 3);

  const AttackModel all_negative = manual_attack(5, 1.0, 0.0);
  const AttackEvaluation neg = evaluate_attack(all_negative, victim, train, heldout);
  CHECK(neg.degenerate_precision);
  CHECK(neg.precision == 0.0);
  CHECK(neg.recall == 0.0);

  const AttackModel all_positive = manual_attack(5, 0.0, 1.0);
  const AttackEvaluation pos = evaluate_attack(all_positive, victim, train, heldout);
  CHECK_FALSE(pos.degenerate_precision);
  CHECK(pos.recall == 1.0);
  CHECK(pos.precision == Catch::Approx(30.0 / 50.0));  // the positive base rate
}

TEST_CASE("attack training is deterministic in the seed") {
  std::vector<AttackSample> set;
  Rng rng(77);
  for (int i = 0; i < 60; ++i) {
    AttackSample s;
    s.member = i % 2 == 0;
    s.confidence = {0.5 + (s.member ? 0.3 : 0.0) * rng.next_double(), 0.3, 0.2};
    double total = 0.0;
    for (const double v : s.confidence) total += v;
    for (double& v : s.confidence) v /= total;
    s.loss = s.member ? 0.1 : 1.5;
    set.push_back(std::move(s));
  }
  const AttackModel a = train_attack_model(set, 31);
  const AttackModel b = train_attack_model(set, 31);
  CHECK(a.w1.data == b.w1.data);
  CHECK(a.w2.data == b.w2.data);
  const AttackModel c = train_attack_model(set, 32);
  CHECK(a.w1.data != c.w1.data);
}

TEST_CASE("attack separates obviously leaky features") {
  // Members: near-one-hot confidence with tiny loss. Non-members: flat
  // confidence with large loss. The perceptron must learn this cleanly.
  std::vector<AttackSample> train_set, eval_set;
  Rng rng(88);
  auto make = [&](bool member) {
    AttackSample s;
    s.member = member;
    if (member) {
      s.confidence = {0.97 + 0.02 * rng.next_double(), 0.02, 0.01};
      s.loss = 0.05 + 0.05 * rng.next_double();
    } else {
      s.confidence = {0.4 + 0.1 * rng.next_double(), 0.35, 0.25};
      s.loss = 1.0 + rng.next_double();
    }
    double total = 0.0;
    for (const double v : s.confidence) total += v;
    for (double& v : s.confidence) v /= total;
    return s;
  };
  for (int i = 0; i < 200; ++i) train_set.push_back(make(i % 2 == 0));
  for (int i = 0; i < 100; ++i) eval_set.push_back(make(i % 2 == 0));
  const AttackModel model = train_attack_model(train_set, 3);
  int correct = 0;
  for (const auto& s : eval_set) correct += model.predict_member(s) == s.member ? 1 : 0;
  CHECK(correct >= 95);
}
