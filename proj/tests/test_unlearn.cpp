#include <catch_amalgamated.hpp>
#include <cmath>

#include "fdu/unlearn.hpp"

using namespace fdu;

namespace {

struct TrainedFixture {
  std::vector<DomainDataset> train;
  std::vector<DomainDataset> test;
  ModelSpec spec;
  FLConfig cfg;
  ModelCheckpoint full;
  TrainingTrace trace;
};

/// A small federated run shared by the unlearning tests (built once).
const TrainedFixture& fixture() {
  static const TrainedFixture f = [] {
    TrainedFixture fx;
    const auto domains = generate_domains(77, 3, 4, 90, ImageShape{3, 16, 16});
    for (std::size_t i = 0; i < domains.size(); ++i) {
      auto [train, test] = split_train_test(domains[i], 0.2, derive_seed(5, "split", {i}));
      fx.train.push_back(std::move(train));
      fx.test.push_back(std::move(test));
    }
    fx.spec = ModelSpec::default_spec(4, 3, 16, 16);
    fx.cfg.rounds = 3;
    fx.cfg.local_epochs = 2;
    fx.cfg.lr = 0.03;
    fx.cfg.momentum = 0.9;
    fx.cfg.batch_size = 16;
    fx.cfg.seed = 11;
    auto [model, trace] = train_federated(fx.train, fx.spec, fx.cfg);
    fx.full = std::move(model);
    fx.trace = std::move(trace);
    return fx;
  }();
  return f;
}

std::vector<DomainDataset> corrupt_client(std::vector<DomainDataset> sets, std::size_t k) {
  Rng rng(987);
  for (auto& v : sets[k].images.data) v = static_cast<float>(rng.next_double());
  for (auto& v : sets[k].labels.data) v = static_cast<std::int64_t>(rng.next_below(4));
  return sets;
}

}  // namespace

TEST_CASE("retrain equals a from-scratch run on the remaining clients") {
  const auto& f = fixture();
  const std::size_t k = 1;
  const UnlearnReport report = retrain(f.train, f.test, k, f.spec, f.cfg, &f.full);
  std::vector<DomainDataset> remaining = {f.train[0], f.train[2]};
  auto [direct, trace] = train_federated(remaining, f.spec, f.cfg);
  (void)trace;
  CHECK(params_equal(report.unlearned.params, direct.params));
  CHECK(report.rounds_used == f.cfg.rounds);

  // Reported accuracies are recomputed from the returned checkpoint.
  CHECK(report.target_train_acc == accuracy(report.unlearned, f.train[k]));
  for (const auto& ds : f.test) {
    CHECK(report.per_domain_test_acc.at(ds.domain_id) == accuracy(report.unlearned, ds));
  }
}

TEST_CASE("retrain never touches the target client's data") {
  const auto& f = fixture();
  const std::size_t k = 2;
  const UnlearnReport a = retrain(f.train, f.test, k, f.spec, f.cfg);
  const UnlearnReport b = retrain(corrupt_client(f.train, k), f.test, k, f.spec, f.cfg);
  CHECK(params_equal(a.unlearned.params, b.unlearned.params));
}

TEST_CASE("rapid_retrain with zero rounds returns the full model unchanged") {
  const auto& f = fixture();
  RapidRetrainParams p;
  p.rounds_fraction = 0.0;
  const UnlearnReport report = rapid_retrain(f.trace, f.train, f.test, 0, f.cfg, p, f.full);
  CHECK(report.rounds_used == 0);
  CHECK(params_equal(report.unlearned.params, f.full.params));
}

TEST_CASE("rapid_retrain reports ceil(fraction x rounds) rounds") {
  const auto& f = fixture();
  RapidRetrainParams p;
  p.rounds_fraction = 0.4;
  const UnlearnReport report = rapid_retrain(f.trace, f.train, f.test, 1, f.cfg, p, f.full);
  CHECK(report.rounds_used == 2);  // ceil(0.4 * 3)
  // Same formula at the default scale: ceil(0.4 * 50) = 20.
  CHECK(static_cast<int>(std::ceil(0.4 * 50)) == 20);
}

TEST_CASE("rapid_retrain ignores the target client's data and history") {
  const auto& f = fixture();
  const std::size_t k = 0;
  RapidRetrainParams p;
  p.rounds_fraction = 0.5;
  const UnlearnReport a = rapid_retrain(f.trace, f.train, f.test, k, f.cfg, p, f.full);

  TrainingTrace corrupted_trace = f.trace;
  Rng rng(55);
  for (auto& round : corrupted_trace.client_post) {
    for (auto& [name, t] : round[k]) {
      for (auto& v : t.data) v = static_cast<float>(rng.next_normal());
    }
  }
  const UnlearnReport b =
      rapid_retrain(corrupted_trace, corrupt_client(f.train, k), f.test, k, f.cfg, p, f.full);
  CHECK(params_equal(a.unlearned.params, b.unlearned.params));
}

TEST_CASE("rapid_retrain runs faster than retrain on the same fixture") {
  const auto& f = fixture();
  const UnlearnReport slow = retrain(f.train, f.test, 1, f.spec, f.cfg);
  RapidRetrainParams p;
  p.rounds_fraction = 0.34;  // 1 of 3 rounds
  const UnlearnReport fast = rapid_retrain(f.trace, f.train, f.test, 1, f.cfg, p, f.full);
  CHECK(fast.wall_time_seconds < slow.wall_time_seconds);
}

TEST_CASE("federaser never reads the target client's stored updates") {
  const auto& f = fixture();
  const std::size_t k = 1;
  FedEraserParams p;
  const UnlearnReport a = federaser(f.trace, f.train, f.test, k, p, &f.full);

  TrainingTrace corrupted = f.trace;
  Rng rng(66);
  for (auto& round : corrupted.client_post) {
    for (auto& [name, t] : round[k]) {
      for (auto& v : t.data) v = static_cast<float>(rng.next_normal());
    }
  }
  const UnlearnReport b = federaser(corrupted, f.train, f.test, k, p, &f.full);
  CHECK(params_equal(a.unlearned.params, b.unlearned.params));
}

TEST_CASE("federaser calibration epochs follow ceil(ratio x local_epochs)") {
  const auto& f = fixture();
  FedEraserParams p;
  p.calibration_ratio = 0.5;
  const UnlearnReport report = federaser(f.trace, f.train, f.test, 1, p);
  CHECK(report.method_params.at("calibration_epochs").get<int>() == 1);  // ceil(0.5 * 2)
  CHECK(report.rounds_used == 3);
  // The defaults' arithmetic: ceil(0.5 * 10) = 5.
  CHECK(static_cast<int>(std::ceil(0.5 * 10)) == 5);

  FedEraserParams p2;
  p2.retain_interval = 2;
  const UnlearnReport sub = federaser(f.trace, f.train, f.test, 1, p2);
  CHECK(sub.rounds_used == 2);  // rounds 0 and 2
}

TEST_CASE("increase_loss stops immediately when tau is already met") {
  const auto& f = fixture();
  IncreaseLossParams p;
  p.tau_stop = 0.0;  // initial loss is always >= 0
  const UnlearnReport report = increase_loss(f.full, f.train, f.test, 1, p);
  CHECK(report.rounds_used == 0);
  CHECK(params_equal(report.unlearned.params, f.full.params));
}

TEST_CASE("increase_loss raises the target loss monotonically to tau") {
  const auto& f = fixture();
  const std::size_t k = 1;
  IncreaseLossParams p;
  p.tau_stop = 5.0;
  p.max_steps = 200;
  const double before = loss_value(f.full, f.train[k].images, f.train[k].labels);
  const UnlearnReport report = increase_loss(f.full, f.train, f.test, k, p);
  const double after = loss_value(report.unlearned, f.train[k].images, f.train[k].labels);
  CHECK(after >= before);
  CHECK(after >= 5.0);
  CHECK(report.rounds_used <= 200);
  const auto traj = report.method_params.at("loss_trajectory").get<std::vector<double>>();
  for (std::size_t i = 1; i < traj.size(); ++i) {
    REQUIRE(traj[i] >= traj[i - 1]);  // logged trajectory never decreases
  }
}

TEST_CASE("increase_loss only sees the target client's data") {
  const auto& f = fixture();
  IncreaseLossParams p;
  p.tau_stop = 3.0;
  const UnlearnReport a = increase_loss(f.full, f.train, f.test, 0, p);
  // Corrupt every *other* client's data: the output cannot change.
  auto corrupted = f.train;
  corrupted = corrupt_client(corrupted, 1);
  corrupted = corrupt_client(corrupted, 2);
  const UnlearnReport b = increase_loss(f.full, corrupted, f.test, 0, p);
  CHECK(params_equal(a.unlearned.params, b.unlearned.params));
}

TEST_CASE("tfidf scoring on a hand-built two-channel toy") {
  // Channel 0 fires only on the target domain; channel 1 fires a little
  // harder everywhere. With two domains the firing counts are 0 for the
  // specific channel and 2 for the generic one, so the specific channel
  // gets the only positive raw score.
  TfMatrix layer;
  layer.layer = "conv1";
  layer.layer_index = 0;
  const double a = 1.0, b = 1.5;  // b > a
  layer.tf = {{a, 0.0}, {b, b}};  // [channel][domain], target is domain 0
  const auto scores = tfidf_scores_from_tf({layer}, 0);
  REQUIRE(scores.size() == 2);
  CHECK(scores[0].score == 1.0);
  CHECK(scores[1].score == 0.0);
}

TEST_CASE("tfidf scores stay in [0,1] and a dead channel scores zero") {
  // Four domains, target is domain 0. Channel 0 never activates (raw 0).
  // Channel 1 fires only on the target: firing count 1, idf = log(4/2) > 0,
  // so its raw score is the maximum. Channel 2 fires on the three other
  // domains only: firing count 3, idf = log(4/4) = 0, raw 0. No raw score
  // is negative, so min-max keeps the dead channel at exactly 0.
  TfMatrix layer;
  layer.layer = "conv1";
  layer.layer_index = 0;
  layer.tf = {{0.0, 0.0, 0.0, 0.0}, {1.0, 0.0, 0.0, 0.0}, {0.5, 0.8, 0.8, 0.8}};
  const auto scores = tfidf_scores_from_tf({layer}, 0);
  double max_score = 0.0;
  for (const auto& s : scores) {
    CHECK(s.score >= 0.0);
    CHECK(s.score <= 1.0);
    max_score = std::max(max_score, s.score);
  }
  CHECK(max_score == 1.0);
  CHECK(scores[1].score == 1.0);
  CHECK(scores[0].tf_target == 0.0);
  CHECK(scores[0].score == 0.0);
  CHECK(scores[2].score == 0.0);

  // All-equal raw scores normalize to zero.
  TfMatrix flat;
  flat.layer = "conv1";
  flat.tf = {{1.0, 1.0}, {1.0, 1.0}};
  for (const auto& s : tfidf_scores_from_tf({flat}, 0)) CHECK(s.score == 0.0);
}

TEST_CASE("tfidf channel scores from a real model lie in [0,1]") {
  const auto& f = fixture();
  const auto scores = tfidf_channel_scores(f.full, f.train, 1);
  REQUIRE(scores.size() == 8 + 16 + 32);
  double max_score = 0.0;
  for (const auto& s : scores) {
    CHECK(s.score >= 0.0);
    CHECK(s.score <= 1.0);
    max_score = std::max(max_score, s.score);
  }
  CHECK(max_score == 1.0);
}

TEST_CASE("class_pruning with threshold above one prunes nothing") {
  const auto& f = fixture();
  ClassPruningParams p;
  p.threshold = 1.0 + 1e-9;
  p.finetune_rounds = 1;
  const UnlearnReport report = class_pruning(f.full, f.train, f.test, 1, p, f.cfg);
  CHECK(report.method_params.at("pruned_channels").get<int>() == 0);
  std::vector<DomainDataset> remaining = {f.train[0], f.train[2]};
  const ModelCheckpoint baseline =
      detail_unlearn::fed_finetune(f.full, remaining, f.cfg, 1, "prune_tune");
  CHECK(params_equal(report.unlearned.params, baseline.params));
}

TEST_CASE("pruned channels produce exactly zero activations before fine-tuning") {
  const auto& f = fixture();
  ClassPruningParams p;
  p.threshold = 0.7;
  p.finetune_rounds = 0;
  const UnlearnReport report = class_pruning(f.full, f.train, f.test, 1, p, f.cfg);
  const int pruned = report.method_params.at("pruned_channels").get<int>();
  REQUIRE(pruned >= 1);

  const auto scores = tfidf_channel_scores(f.full, f.train, 1);
  const auto [logits, trace] = forward_with_trace(report.unlearned, f.test[1].images);
  (void)logits;
  for (const auto& s : scores) {
    if (s.score <= 0.7) continue;
    const TensorD& act = trace.activations[static_cast<std::size_t>(s.layer_index)];
    for (std::size_t i = 0; i < act.dim(0); ++i) {
      REQUIRE(act.at2(i, static_cast<std::size_t>(s.channel)) == 0.0);
    }
  }
}

TEST_CASE("a threshold that prunes an entire layer is an error") {
  const auto& f = fixture();
  ClassPruningParams p;
  p.threshold = -1.0;  // every channel exceeds this
  CHECK_THROWS_WITH(class_pruning(f.full, f.train, f.test, 1, p, f.cfg),
                    Catch::Matchers::ContainsSubstring("fully pruned"));
}
