// Command-line front end: gen-data -> train -> unlearn -> analyze -> verify
// -> mia -> report, all operating on a self-contained run directory.

#include <CLI11.hpp>
#include <iostream>
#include <set>

#include "fdu/fdu.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct SplitData {
  std::vector<fdu::DomainDataset> train;
  std::vector<fdu::DomainDataset> test;
};

fs::path data_dir_of(const fs::path& run_or_data) {
  if (fs::exists(run_or_data / "data" / "domains.json") || fs::is_directory(run_or_data / "data")) {
    return run_or_data / "data";
  }
  return run_or_data;
}

SplitData load_and_split(const fs::path& run_dir, double test_fraction, std::uint64_t seed) {
  const auto domains = fdu::load_domains_dir(data_dir_of(run_dir));
  SplitData out;
  for (std::size_t i = 0; i < domains.size(); ++i) {
    auto [train, test] = fdu::split_train_test(domains[i], test_fraction,
                                               fdu::derive_seed(seed, "split", {i}));
    out.train.push_back(std::move(train));
    out.test.push_back(std::move(test));
  }
  return out;
}

SplitData load_run_splits(const fs::path& run_dir, const fdu::RunManifest& manifest) {
  const double tf = manifest.config.at("train").at("test_fraction").get<double>();
  const auto seed = manifest.config.at("train").at("fl").at("seed").get<std::uint64_t>();
  return load_and_split(run_dir, tf, seed);
}

/// Idempotence gate: a completed stage with identical config is a no-op;
/// a completed stage with different config needs --force.
bool stage_is_fresh(fdu::RunManifest& manifest, const std::string& stage_key, bool stage_done,
                    const json& config, bool force) {
  if (!stage_done || force) return true;
  if (manifest.config.contains(stage_key) && manifest.config.at(stage_key) == config) {
    std::cout << "stage '" << stage_key << "' already complete with identical config; skipping"
              << " (use --force to rerun)\n";
    return false;
  }
  throw fdu::UsageError("stage '" + stage_key +
                        "' already ran with a different config; pass --force to overwrite");
}

std::vector<double> parse_list(const std::string& csv) {
  std::vector<double> out;
  std::stringstream ss(csv);
  std::string cell;
  while (std::getline(ss, cell, ',')) {
    if (!cell.empty()) out.push_back(std::stod(cell));
  }
  if (out.empty()) throw fdu::UsageError("empty numeric list: " + csv);
  return out;
}

fdu::ModelSpec spec_from_config(const fdu::RunManifest& manifest) {
  return fdu::ModelSpec::from_json(manifest.config.at("train").at("spec"));
}

fdu::FLConfig fl_from_config(const fdu::RunManifest& manifest) {
  return fdu::FLConfig::from_json(manifest.config.at("train").at("fl"));
}

int resolve_probe(const std::string& probe, const std::vector<fdu::DomainDataset>& domains,
                  int target) {
  if (probe == "target") {
    if (target < 0) throw fdu::UsageError("--probe target needs a --target");
    return target;
  }
  for (std::size_t i = 0; i < domains.size(); ++i) {
    if (domains[i].domain_id == probe) return static_cast<int>(i);
  }
  try {
    const int idx = std::stoi(probe);
    if (idx >= 0 && idx < static_cast<int>(domains.size())) return idx;
  } catch (...) {
  }
  throw fdu::UsageError("unknown probe domain: " + probe);
}

// ---- gen-data -----------------------------------------------------------------

struct GenDataArgs {
  std::uint64_t seed = 7;
  int domains = 4;
  int classes = 10;
  int per_domain = 500;
  int image_size = 32;
  std::string out;
  bool force = false;
};

int cmd_gen_data(const GenDataArgs& a) {
  const fs::path run_dir(a.out);
  fdu::RunLock lock(run_dir);
  auto manifest = fdu::RunManifest::load_or_create(run_dir, run_dir.filename().string());
  const json config = {{"seed", a.seed},
                       {"domains", a.domains},
                       {"classes", a.classes},
                       {"per_domain", a.per_domain},
                       {"image_size", a.image_size}};
  if (!stage_is_fresh(manifest, "gen_data", manifest.stage_done("data"), config, a.force)) {
    return 0;
  }
  fdu::ImageShape shape{3, static_cast<std::size_t>(a.image_size),
                        static_cast<std::size_t>(a.image_size)};
  const auto domains = fdu::generate_domains(a.seed, a.domains, a.classes, a.per_domain, shape);
  fdu::save_domains(run_dir / "data", domains, config);
  manifest.config["gen_data"] = config;
  manifest.stages["data"] = true;
  json files = json::array();
  for (std::size_t i = 0; i < domains.size(); ++i) {
    files.push_back("data/domain_" + std::string(i < 10 ? "0" : "") + std::to_string(i) + ".tar");
  }
  manifest.artifacts["data"] = files;
  manifest.save(run_dir);
  std::cout << "generated " << domains.size() << " domains x " << a.per_domain << " samples in "
            << (run_dir / "data").string() << "\n";
  return 0;
}

// ---- train ----------------------------------------------------------------------

struct TrainArgs {
  std::string data;
  std::string out;
  int rounds = 50;
  int local_epochs = 10;
  double lr = 0.01;
  double momentum = 0.9;
  int batch = 64;
  std::uint64_t seed = 1;
  double test_fraction = 0.2;
  bool force = false;
};

int cmd_train(const TrainArgs& a) {
  const fs::path run_dir(a.out);
  const fs::path data_src = a.data.empty() ? run_dir : fs::path(a.data);
  fdu::RunLock lock(run_dir);
  auto manifest = fdu::RunManifest::load_or_create(run_dir, run_dir.filename().string());

  fdu::FLConfig cfg;
  cfg.rounds = a.rounds;
  cfg.local_epochs = a.local_epochs;
  cfg.lr = a.lr;
  cfg.momentum = a.momentum;
  cfg.batch_size = a.batch;
  cfg.seed = a.seed;
  cfg.validate();

  const auto domains = fdu::load_domains_dir(data_dir_of(data_src));
  int num_classes = 0;
  for (const auto& d : domains) num_classes = std::max(num_classes, d.num_classes());
  const fdu::ModelSpec spec = fdu::ModelSpec::default_spec(
      num_classes, static_cast<int>(domains[0].images.dim(1)),
      static_cast<int>(domains[0].images.dim(2)), static_cast<int>(domains[0].images.dim(3)));

  json config = {{"fl", cfg.to_json()}, {"spec", spec.to_json()}, {"test_fraction", a.test_fraction}};
  if (!stage_is_fresh(manifest, "train", manifest.stage_done("train"), config, a.force)) return 0;

  SplitData split;
  for (std::size_t i = 0; i < domains.size(); ++i) {
    auto [train, test] = fdu::split_train_test(domains[i], a.test_fraction,
                                               fdu::derive_seed(cfg.seed, "split", {i}));
    split.train.push_back(std::move(train));
    split.test.push_back(std::move(test));
  }

  std::cout << "training " << split.train.size() << " clients for " << cfg.rounds
            << " rounds...\n";
  auto [model, trace] = fdu::train_federated(split.train, spec, cfg);
  fdu::save_trace(run_dir, trace);
  fdu::save_checkpoint(run_dir / "full_model.tar", model);

  json eval;
  for (const auto& ds : split.test) eval["test_acc"][ds.domain_id] = fdu::accuracy(model, ds);
  for (const auto& ds : split.train) eval["train_acc"][ds.domain_id] = fdu::accuracy(model, ds);
  fdu::write_json_file(run_dir / "full_eval.json", eval);

  manifest.config["train"] = config;
  manifest.stages["train"] = true;
  manifest.artifacts["train"] = {"config.json", "full_model.tar", "full_eval.json",
                                 "correctness.bin"};
  manifest.save(run_dir);
  std::cout << "final per-domain test accuracy:\n";
  for (const auto& [dom, acc] : eval["test_acc"].items()) {
    std::cout << "  " << dom << ": " << acc.get<double>() << "\n";
  }
  return 0;
}

// ---- unlearn ---------------------------------------------------------------------

struct UnlearnArgs {
  std::string run;
  std::string out;
  int target = -1;
  std::string method;
  // method params (defaults match the per-method structs)
  double tau_stop = 5.0;
  double ascent_lr = 0.01;
  int max_steps = 200;
  double calibration_ratio = 0.5;
  int retain_interval = 1;
  double rounds_fraction = 0.4;
  double curvature_damping = 1e-3;
  bool no_warm_start = false;
  double threshold = 0.7;
  int finetune_rounds = 5;
  bool force = false;
};

int cmd_unlearn(const UnlearnArgs& a) {
  const fs::path run_dir(a.run);
  const fs::path out_dir = a.out.empty() ? run_dir : fs::path(a.out);
  if (out_dir != run_dir) fs::create_directories(out_dir);
  fdu::RunLock lock(out_dir);
  auto manifest = fdu::RunManifest::load(run_dir);
  manifest.require_stage("train");
  if (a.target < 0) throw fdu::UsageError("--target is required");
  const auto& methods = fdu::unlearn_method_names();
  if (std::find(methods.begin(), methods.end(), a.method) == methods.end()) {
    throw fdu::UsageError("unknown method '" + a.method + "'");
  }

  json config = {{"target", a.target}, {"method", a.method}};
  if (a.method == "increase_loss") {
    config["tau_stop"] = a.tau_stop;
    config["lr"] = a.ascent_lr;
    config["max_steps"] = a.max_steps;
  } else if (a.method == "federaser") {
    config["calibration_ratio"] = a.calibration_ratio;
    config["retain_interval"] = a.retain_interval;
  } else if (a.method == "rapid_retrain") {
    config["rounds_fraction"] = a.rounds_fraction;
    config["curvature_damping"] = a.curvature_damping;
    config["warm_start"] = !a.no_warm_start;
  } else if (a.method == "class_pruning") {
    config["threshold"] = a.threshold;
    config["finetune_rounds"] = a.finetune_rounds;
  }
  if (!stage_is_fresh(manifest, "unlearn_" + a.method, manifest.unlearn_done(a.method), config,
                      a.force)) {
    return 0;
  }

  const auto split = load_run_splits(run_dir, manifest);
  const auto k = static_cast<std::size_t>(a.target);
  if (k >= split.train.size()) throw fdu::UsageError("--target out of range");
  const fdu::ModelSpec spec = spec_from_config(manifest);
  const fdu::FLConfig cfg = fl_from_config(manifest);
  const fdu::ModelCheckpoint full = fdu::load_checkpoint(run_dir / "full_model.tar");

  fdu::UnlearnReport report;
  if (a.method == "retrain") {
    report = fdu::retrain(split.train, split.test, k, spec, cfg, &full);
  } else if (a.method == "increase_loss") {
    fdu::IncreaseLossParams p;
    p.tau_stop = a.tau_stop;
    p.lr = a.ascent_lr;
    p.max_steps = a.max_steps;
    report = fdu::increase_loss(full, split.train, split.test, k, p);
  } else if (a.method == "federaser") {
    const fdu::TrainingTrace trace = fdu::load_trace(run_dir);
    fdu::FedEraserParams p;
    p.calibration_ratio = a.calibration_ratio;
    p.retain_interval = a.retain_interval;
    report = fdu::federaser(trace, split.train, split.test, k, p, &full);
  } else if (a.method == "rapid_retrain") {
    const fdu::TrainingTrace trace = fdu::load_trace(run_dir);
    fdu::RapidRetrainParams p;
    p.rounds_fraction = a.rounds_fraction;
    p.curvature_damping = a.curvature_damping;
    p.warm_start = !a.no_warm_start;
    report = fdu::rapid_retrain(trace, split.train, split.test, k, cfg, p, full);
  } else {
    fdu::ClassPruningParams p;
    p.threshold = a.threshold;
    p.finetune_rounds = a.finetune_rounds;
    report = fdu::class_pruning(full, split.train, split.test, k, p, cfg);
  }

  fdu::save_unlearn_report(out_dir, report);
  manifest.config["unlearn_" + a.method] = config;
  manifest.stages["unlearn"][a.method] = true;
  manifest.artifacts["unlearn_" + a.method] = {"unlearn_" + a.method + "/model.tar",
                                               "unlearn_" + a.method + "/report.json"};
  manifest.save(run_dir);
  std::cout << a.method << ": target train acc " << report.target_train_acc << ", wall time "
            << report.wall_time_seconds << "s\n";
  return 0;
}

// ---- analyze ---------------------------------------------------------------------

struct AnalyzeArgs {
  std::string run;
  std::string baseline = "full";
  std::string compare;
  std::string probe = "target";
  int k = 10;
  int target = -1;
  std::string cka_denominator = "standard";
  bool force = false;
};

int cmd_analyze(const AnalyzeArgs& a) {
  const fs::path run_dir(a.run);
  fdu::RunLock lock(run_dir);
  auto manifest = fdu::RunManifest::load(run_dir);
  manifest.require_stage("train");
  if (a.baseline != "full") throw fdu::UsageError("only --baseline full is supported");
  if (!manifest.unlearn_done(a.compare)) {
    throw fdu::UsageError("run is missing unlearn results for '" + a.compare +
                          "'; run the `unlearn` subcommand first");
  }
  int target = a.target;
  if (target < 0 && manifest.config.contains("unlearn_" + a.compare)) {
    target = manifest.config.at("unlearn_" + a.compare).at("target").get<int>();
  }
  const auto split = load_run_splits(run_dir, manifest);
  const int probe_idx = resolve_probe(a.probe, split.test, target);

  const json config = {{"compare", a.compare},
                       {"probe", split.test[static_cast<std::size_t>(probe_idx)].domain_id},
                       {"k", a.k},
                       {"cka_denominator", a.cka_denominator}};
  const bool done = manifest.stages.contains("analyze") &&
                    manifest.stages["analyze"].is_object() &&
                    manifest.stages["analyze"].contains(a.compare) &&
                    manifest.stages["analyze"][a.compare].get<bool>();
  if (!stage_is_fresh(manifest, "analyze_" + a.compare, done, config, a.force)) return 0;

  const fdu::ModelCheckpoint full = fdu::load_checkpoint(run_dir / "full_model.tar");
  const fdu::ModelCheckpoint other =
      fdu::load_checkpoint(run_dir / ("unlearn_" + a.compare) / "model.tar");
  fdu::ProbeSet probe;
  probe.images = split.test[static_cast<std::size_t>(probe_idx)].images;
  probe.source_domain = split.test[static_cast<std::size_t>(probe_idx)].domain_id;

  const auto records = fdu::layerwise_report(full, other, probe, a.k, manifest.run_id, a.compare,
                                             fdu::cka_denominator_from_string(a.cka_denominator));
  fs::create_directories(run_dir / "analysis");
  fdu::write_metric_csv(run_dir / "analysis" / (a.compare + ".csv"), records);

  manifest.config["analyze_" + a.compare] = config;
  manifest.stages["analyze"][a.compare] = true;
  bool any = false;
  for (const auto& [m, v] : manifest.stages["analyze"].items()) {
    (void)m;
    any = any || v.get<bool>();
  }
  manifest.stages["analyze_done"] = any;
  manifest.artifacts["analyze_" + a.compare] = {"analysis/" + a.compare + ".csv"};
  manifest.save(run_dir);
  for (const auto& r : records) {
    if (r.metric == "cka") std::cout << r.layer << " cka=" << r.value << "\n";
  }
  return 0;
}

// ---- verify ----------------------------------------------------------------------

struct VerifyArgs {
  std::string run;
  int target = -1;
  double tau = 10.0;
  std::string mu = "0.5";
  std::string lambda = "0.5";
  std::string epsilon = "0.3";
  int inject_rounds = 10;
  double proximal = 0.01;
  int y_target = 0;
  int gen_steps = 150;
  double gen_lr = 0.05;
  std::string methods = "retrain";
  bool baseline_backdoor = false;
  double poison_fraction = 0.3;
  bool cosine_as_printed = false;
  bool clean_term_full_set = false;
  bool force = false;
};

int cmd_verify(const VerifyArgs& a) {
  const fs::path run_dir(a.run);
  fdu::RunLock lock(run_dir);
  auto manifest = fdu::RunManifest::load(run_dir);
  manifest.require_stage("train");
  if (a.target < 0) throw fdu::UsageError("--target is required");

  const json config = {{"target", a.target},         {"tau", a.tau},
                       {"mu", a.mu},                 {"lambda", a.lambda},
                       {"epsilon", a.epsilon},       {"inject_rounds", a.inject_rounds},
                       {"proximal", a.proximal},     {"y_target", a.y_target},
                       {"gen_steps", a.gen_steps},   {"gen_lr", a.gen_lr},
                       {"methods", a.methods},       {"backdoor", a.baseline_backdoor},
                       {"poison_fraction", a.poison_fraction},
                       {"cosine_as_printed", a.cosine_as_printed},
                       {"clean_term_full_set", a.clean_term_full_set}};
  if (!stage_is_fresh(manifest, "verify", manifest.stage_done("verify"), config, a.force)) {
    return 0;
  }

  const auto split = load_run_splits(run_dir, manifest);
  const auto k = static_cast<std::size_t>(a.target);
  if (k >= split.train.size()) throw fdu::UsageError("--target out of range");
  const fdu::ModelSpec spec = spec_from_config(manifest);
  const fdu::FLConfig cfg = fl_from_config(manifest);

  const auto eps_list = parse_list(a.epsilon);
  const auto mu_list = parse_list(a.mu);
  const auto lambda_list = parse_list(a.lambda);
  if (mu_list.size() != lambda_list.size()) {
    throw fdu::UsageError("--mu and --lambda lists must have equal length (they are zipped)");
  }

  std::vector<std::string> method_list;
  {
    std::stringstream ss(a.methods);
    std::string m;
    while (std::getline(ss, m, ',')) {
      if (!m.empty()) method_list.push_back(m);
    }
  }

  json report;
  report["target"] = a.target;
  report["settings"] = json::array();
  bool first_setting = true;
  for (const double eps : eps_list) {
    for (std::size_t mi = 0; mi < mu_list.size(); ++mi) {
      fdu::VerificationConfig vcfg;
      vcfg.tau = a.tau;
      vcfg.mu = mu_list[mi];
      vcfg.lambda = lambda_list[mi];
      vcfg.epsilon = eps;
      vcfg.inject_rounds = a.inject_rounds;
      vcfg.proximal_coeff = a.proximal;
      vcfg.y_target = a.y_target;
      vcfg.gen_steps = a.gen_steps;
      vcfg.gen_lr = a.gen_lr;
      vcfg.cosine_as_printed = a.cosine_as_printed;
      vcfg.clean_term_full_set = a.clean_term_full_set;

      std::cout << "verify: injecting markers (epsilon=" << eps << ", mu=" << vcfg.mu
                << ", lambda=" << vcfg.lambda << ")...\n";
      const fdu::InjectedRun injected =
          fdu::train_with_marker_injection(split.train, spec, cfg, k, vcfg);

      json setting;
      setting["epsilon"] = eps;
      setting["mu"] = vcfg.mu;
      setting["lambda"] = vcfg.lambda;
      setting["tau"] = a.tau;
      setting["representative_count"] = injected.representative_ids.size();
      json entries = json::array();

      auto entry_for = [&](const std::string& method, const fdu::ModelCheckpoint& model) {
        json e;
        e["method"] = method;
        e["domain"] = split.train[k].domain_id;
        e["marker_acc"] =
            fdu::verify_accuracy(model, injected.verification_images, vcfg.y_target);
        json clean;
        for (const auto& ds : split.test) clean[ds.domain_id] = fdu::accuracy(model, ds);
        e["clean_acc_per_domain"] = clean;
        e["epsilon"] = eps;
        e["mu"] = vcfg.mu;
        e["lambda"] = vcfg.lambda;
        e["tau"] = a.tau;
        return e;
      };

      entries.push_back(entry_for("full", injected.model));
      for (const std::string& method : method_list) {
        std::cout << "verify: unlearning the injected run with " << method << "...\n";
        fdu::UnlearnReport ur;
        if (method == "retrain") {
          ur = fdu::retrain(split.train, split.test, k, spec, cfg);
        } else if (method == "increase_loss") {
          ur = fdu::increase_loss(injected.model, split.train, split.test, k, {});
        } else if (method == "federaser") {
          ur = fdu::federaser(injected.trace, split.train, split.test, k, {});
        } else if (method == "rapid_retrain") {
          ur = fdu::rapid_retrain(injected.trace, split.train, split.test, k, cfg, {},
                                  injected.model);
        } else if (method == "class_pruning") {
          ur = fdu::class_pruning(injected.model, split.train, split.test, k, {}, cfg);
        } else {
          throw fdu::UsageError("unknown verify method '" + method + "'");
        }
        entries.push_back(entry_for(method, ur.unlearned));
      }

      if (a.baseline_backdoor) {
        std::cout << "verify: training the pixel-pattern backdoor baseline...\n";
        fdu::BackdoorParams bp;
        bp.y_target = a.y_target;
        bp.poison_fraction = a.poison_fraction;
        const fdu::BackdoorRun bd = fdu::backdoor_baseline(split.train, spec, cfg, k, bp);
        const fdu::TensorF trigger_images =
            fdu::backdoor_verification_images(split.train[k], a.y_target);
        json e;
        e["method"] = "backdoor_full";
        e["domain"] = split.train[k].domain_id;
        e["marker_acc"] = fdu::verify_accuracy(bd.model, trigger_images, a.y_target);
        json clean;
        for (const auto& ds : split.test) clean[ds.domain_id] = fdu::accuracy(bd.model, ds);
        e["clean_acc_per_domain"] = clean;
        e["epsilon"] = eps;
        e["mu"] = vcfg.mu;
        e["lambda"] = vcfg.lambda;
        e["tau"] = a.tau;
        e["poison_fraction"] = a.poison_fraction;
        entries.push_back(e);
      }

      setting["entries"] = entries;
      report["settings"].push_back(setting);

      if (first_setting) {
        fs::create_directories(run_dir / "verify");
        fdu::save_checkpoint(run_dir / "verify" / "injected_model.tar", injected.model);
        fdu::save_marker_generator(run_dir / "verify" / "marker_generator.tar",
                                   injected.generator);
        first_setting = false;
      }
    }
  }

  fdu::write_json_file(run_dir / "verify_report.json", report);
  manifest.config["verify"] = config;
  manifest.stages["verify"] = true;
  manifest.artifacts["verify"] = {"verify_report.json", "verify/injected_model.tar",
                                  "verify/marker_generator.tar"};
  manifest.save(run_dir);
  for (const auto& setting : report["settings"]) {
    for (const auto& e : setting["entries"]) {
      std::cout << "  " << e["method"].get<std::string>() << " marker_acc="
                << e["marker_acc"].get<double>() << "\n";
    }
  }
  return 0;
}

// ---- mia -------------------------------------------------------------------------

struct MiaArgs {
  std::string run;
  int target = -1;
  int shadows = 3;
  std::uint64_t seed = 99;
  bool force = false;
};

int cmd_mia(const MiaArgs& a) {
  const fs::path run_dir(a.run);
  fdu::RunLock lock(run_dir);
  auto manifest = fdu::RunManifest::load(run_dir);
  manifest.require_stage("train");
  if (a.target < 0) throw fdu::UsageError("--target is required");

  const json config = {{"target", a.target}, {"shadows", a.shadows}, {"seed", a.seed}};
  if (!stage_is_fresh(manifest, "mia", manifest.stage_done("mia"), config, a.force)) return 0;

  const auto domains = fdu::load_domains_dir(data_dir_of(run_dir));
  const auto split = load_run_splits(run_dir, manifest);
  const auto k = static_cast<std::size_t>(a.target);
  const fdu::ModelSpec spec = spec_from_config(manifest);
  const fdu::FLConfig cfg = fl_from_config(manifest);
  const double tf = manifest.config.at("train").at("test_fraction").get<double>();

  std::cout << "mia: training " << a.shadows << " shadow models...\n";
  const auto shadows = fdu::train_shadows(domains, spec, cfg, tf, a.shadows, a.seed);
  const auto attack_set = fdu::build_attack_set(shadows, a.seed);
  const fdu::AttackModel attack = fdu::train_attack_model(attack_set, a.seed);

  // Balanced evaluation: as many member candidates as held-out samples.
  fdu::DomainDataset targets = split.train[k];
  const std::size_t eval_n = std::min(split.test[k].size(), targets.size());
  {
    std::vector<std::size_t> order(targets.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    fdu::Rng rng = fdu::derive_rng(a.seed, "mia_eval");
    rng.shuffle(order);
    order.resize(eval_n);
    std::sort(order.begin(), order.end());
    fdu::DomainDataset sub;
    sub.domain_id = targets.domain_id;
    sub.images = fdu::detail_fed::gather_images(targets.images, order);
    sub.labels = fdu::detail_fed::gather_labels(targets.labels, order);
    targets = std::move(sub);
  }

  json report;
  report["target"] = a.target;
  report["num_shadows"] = a.shadows;
  json entries = json::array();
  auto eval_victim = [&](const std::string& name, const fdu::ModelCheckpoint& victim) {
    const fdu::AttackEvaluation e = fdu::evaluate_attack(attack, victim, targets, split.test[k]);
    json j = e.to_json();
    j["victim"] = name;
    j["domain"] = split.train[k].domain_id;
    j["num_shadows"] = a.shadows;
    entries.push_back(j);
    std::cout << "  " << name << ": precision=" << e.precision << " recall=" << e.recall << "\n";
  };
  eval_victim("full", fdu::load_checkpoint(run_dir / "full_model.tar"));
  for (const std::string& method : manifest.unlearn_methods_done()) {
    eval_victim(method, fdu::load_checkpoint(run_dir / ("unlearn_" + method) / "model.tar"));
  }
  report["entries"] = entries;
  fdu::write_json_file(run_dir / "mia_report.json", report);

  manifest.config["mia"] = config;
  manifest.stages["mia"] = true;
  manifest.artifacts["mia"] = {"mia_report.json"};
  manifest.save(run_dir);
  return 0;
}

// ---- report ----------------------------------------------------------------------

struct ReportArgs {
  std::string run;
  std::string out;
};

int cmd_report(const ReportArgs& a) {
  const fs::path run_dir(a.run);
  auto manifest = fdu::RunManifest::load(run_dir);
  for (const char* stage : {"data", "train"}) manifest.require_stage(stage);
  const auto methods = manifest.unlearn_methods_done();
  if (methods.empty()) {
    throw fdu::UsageError("run is missing the 'unlearn' stage; run the `unlearn` subcommand first");
  }
  if (!manifest.stages.contains("analyze_done") ||
      !manifest.stages["analyze_done"].get<bool>()) {
    throw fdu::UsageError("run is missing the 'analyze' stage; run the `analyze` subcommand first");
  }
  manifest.require_stage("verify");

  const fs::path out_dir = a.out.empty() ? run_dir / "report" : fs::path(a.out);
  fs::create_directories(out_dir);

  // Per-domain test accuracy table: the full model plus every unlearned
  // model, one row per (method, domain). All values re-read from artifacts.
  const json full_eval = fdu::read_json_file(run_dir / "full_eval.json");
  std::vector<std::string> domain_order;
  for (const auto& [dom, acc] : full_eval.at("test_acc").items()) {
    (void)acc;
    domain_order.push_back(dom);
  }
  {
    std::ofstream os(out_dir / "accuracy.csv", std::ios::trunc);
    os << "method,domain,metric,value\n";
    for (const auto& dom : domain_order) {
      os << "full," << dom << ",test_accuracy,"
         << fdu::format_double(full_eval.at("test_acc").at(dom).get<double>()) << "\n";
    }
    for (const auto& method : methods) {
      const json r = fdu::read_json_file(run_dir / ("unlearn_" + method) / "report.json");
      for (const auto& dom : domain_order) {
        os << method << "," << dom << ",test_accuracy,"
           << fdu::format_double(r.at("per_domain_test_acc").at(dom).get<double>()) << "\n";
      }
    }
  }
  {
    std::ofstream os(out_dir / "target_train.csv", std::ios::trunc);
    os << "method,metric,value\n";
    for (const auto& method : methods) {
      const json r = fdu::read_json_file(run_dir / ("unlearn_" + method) / "report.json");
      os << method << ",target_train_accuracy,"
         << fdu::format_double(r.at("target_train_acc").get<double>()) << "\n";
    }
  }

  // Layer-wise similarity charts from the persisted analysis CSVs.
  std::vector<std::string> layer_order;
  std::vector<fdu::ChartSeries> cka_series, sub_series;
  std::vector<fdu::MetricRecord> merged;
  for (const auto& method : methods) {
    const fs::path csv = run_dir / "analysis" / (method + ".csv");
    if (!fs::exists(csv)) continue;
    const auto records = fdu::read_metric_csv(csv);
    merged.insert(merged.end(), records.begin(), records.end());
    fdu::ChartSeries cka{method, {}}, sub{method, {}};
    std::vector<std::string> layers;
    for (const auto& r : records) {
      if (r.metric == "cka" || r.metric == "cka_as_printed") {
        cka.values.push_back(r.value);
        layers.push_back(r.layer);
      } else if (r.metric == "subspace_similarity") {
        sub.values.push_back(r.value);
      }
    }
    if (layer_order.empty()) layer_order = layers;
    if (!cka.values.empty()) cka_series.push_back(std::move(cka));
    if (!sub.values.empty()) sub_series.push_back(std::move(sub));
  }
  if (!merged.empty()) {
    fdu::write_metric_csv(out_dir / "layer_metrics.csv", merged);
    fdu::write_line_chart_svg(out_dir / "cka_layers.svg", "Layer-wise CKA vs full model",
                              layer_order, cka_series);
    fdu::write_line_chart_svg(out_dir / "subspace_layers.svg",
                              "Layer-wise subspace similarity vs full model", layer_order,
                              sub_series);
  }

  // Verification summary and the marker-vs-backdoor comparison.
  const json verify = fdu::read_json_file(run_dir / "verify_report.json");
  {
    std::ofstream os(out_dir / "verify.csv", std::ios::trunc);
    os << "epsilon,mu,lambda,method,marker_acc\n";
    for (const auto& setting : verify.at("settings")) {
      for (const auto& e : setting.at("entries")) {
        os << fdu::format_double(e.at("epsilon").get<double>()) << ','
           << fdu::format_double(e.at("mu").get<double>()) << ','
           << fdu::format_double(e.at("lambda").get<double>()) << ','
           << e.at("method").get<std::string>() << ','
           << fdu::format_double(e.at("marker_acc").get<double>()) << "\n";
      }
    }
  }
  {
    const auto& first = verify.at("settings").at(0).at("entries");
    const json* marker_full = nullptr;
    const json* backdoor_full = nullptr;
    for (const auto& e : first) {
      if (e.at("method") == "full") marker_full = &e;
      if (e.at("method") == "backdoor_full") backdoor_full = &e;
    }
    if (marker_full && backdoor_full) {
      std::ofstream os(out_dir / "marker_vs_backdoor.csv", std::ios::trunc);
      os << "domain,clean_test_acc,marker_clean_acc,backdoor_clean_acc\n";
      for (const auto& dom : domain_order) {
        os << dom << ',' << fdu::format_double(full_eval.at("test_acc").at(dom).get<double>())
           << ','
           << fdu::format_double(marker_full->at("clean_acc_per_domain").at(dom).get<double>())
           << ','
           << fdu::format_double(backdoor_full->at("clean_acc_per_domain").at(dom).get<double>())
           << "\n";
      }
    }
  }

  // Accuracy bar chart: full + methods per domain.
  {
    std::vector<fdu::ChartSeries> series;
    fdu::ChartSeries full_series{"full", {}};
    for (const auto& dom : domain_order) {
      full_series.values.push_back(full_eval.at("test_acc").at(dom).get<double>());
    }
    series.push_back(std::move(full_series));
    for (const auto& method : methods) {
      const json r = fdu::read_json_file(run_dir / ("unlearn_" + method) / "report.json");
      fdu::ChartSeries s{method, {}};
      for (const auto& dom : domain_order) {
        s.values.push_back(r.at("per_domain_test_acc").at(dom).get<double>());
      }
      series.push_back(std::move(s));
    }
    fdu::write_bar_chart_svg(out_dir / "accuracy_bars.svg", "Per-domain test accuracy",
                             domain_order, series);
  }

  if (manifest.stage_done("mia")) {
    const json mia = fdu::read_json_file(run_dir / "mia_report.json");
    std::ofstream os(out_dir / "mia.csv", std::ios::trunc);
    os << "victim,domain,precision,recall\n";
    for (const auto& e : mia.at("entries")) {
      os << e.at("victim").get<std::string>() << ',' << e.at("domain").get<std::string>() << ','
         << fdu::format_double(e.at("precision").get<double>()) << ','
         << fdu::format_double(e.at("recall").get<double>()) << "\n";
    }
  }

  std::cout << "report written to " << out_dir.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated domain unlearning simulator and analysis toolkit"};
  app.set_version_flag("--version", fdu::kToolVersion);
  app.require_subcommand(1);

  GenDataArgs gen;
  auto* cmd_gen = app.add_subcommand("gen-data", "Generate a synthetic multi-domain dataset");
  cmd_gen->add_option("--seed", gen.seed, "RNG seed");
  cmd_gen->add_option("--domains", gen.domains, "number of domains (clients)");
  cmd_gen->add_option("--classes", gen.classes, "number of classes");
  cmd_gen->add_option("--per-domain", gen.per_domain, "samples per domain");
  cmd_gen->add_option("--image-size", gen.image_size, "square image size");
  cmd_gen->add_option("--out", gen.out, "run directory")->required();
  cmd_gen->add_flag("--force", gen.force, "rerun even if the stage is complete");

  TrainArgs train;
  auto* cmd_tr = app.add_subcommand("train", "Federated training with full trace logging");
  cmd_tr->add_option("--data", train.data, "data directory (defaults to --out)");
  cmd_tr->add_option("--rounds", train.rounds, "global rounds");
  cmd_tr->add_option("--local-epochs", train.local_epochs, "local epochs per round");
  cmd_tr->add_option("--lr", train.lr, "learning rate");
  cmd_tr->add_option("--momentum", train.momentum, "SGD momentum");
  cmd_tr->add_option("--batch", train.batch, "local batch size");
  cmd_tr->add_option("--seed", train.seed, "training seed");
  cmd_tr->add_option("--test-fraction", train.test_fraction, "held-out fraction per domain");
  cmd_tr->add_option("--out", train.out, "run directory")->required();
  cmd_tr->add_flag("--force", train.force, "rerun even if the stage is complete");

  UnlearnArgs unl;
  auto* cmd_un = app.add_subcommand("unlearn", "Remove one client's domain from the full model");
  cmd_un->add_option("--run", unl.run, "run directory")->required();
  cmd_un->add_option("--out", unl.out, "output run directory (defaults to --run)");
  cmd_un->add_option("--target", unl.target, "target client index")->required();
  cmd_un->add_option("--method", unl.method,
                     "retrain | rapid_retrain | federaser | increase_loss | class_pruning")
      ->required();
  cmd_un->add_option("--tau-stop", unl.tau_stop, "increase_loss: stop once mean loss reaches this");
  cmd_un->add_option("--ascent-lr", unl.ascent_lr, "increase_loss: ascent step size");
  cmd_un->add_option("--max-steps", unl.max_steps, "increase_loss: maximum ascent steps");
  cmd_un->add_option("--calibration-ratio", unl.calibration_ratio,
                     "federaser: fraction of local epochs per replayed round");
  cmd_un->add_option("--retain-interval", unl.retain_interval,
                     "federaser: replay every n-th round");
  cmd_un->add_option("--rounds-fraction", unl.rounds_fraction,
                     "rapid_retrain: fraction of the original rounds");
  cmd_un->add_option("--curvature-damping", unl.curvature_damping,
                     "rapid_retrain: damping for the lr scales");
  cmd_un->add_flag("--no-warm-start", unl.no_warm_start, "rapid_retrain: start from fresh init");
  cmd_un->add_option("--threshold", unl.threshold, "class_pruning: prune scores above this");
  cmd_un->add_option("--finetune-rounds", unl.finetune_rounds,
                     "class_pruning: federated fine-tune rounds");
  cmd_un->add_flag("--force", unl.force, "rerun even if the stage is complete");

  AnalyzeArgs ana;
  auto* cmd_an = app.add_subcommand("analyze", "Layer-wise CKA and subspace similarity");
  cmd_an->add_option("--run", ana.run, "run directory")->required();
  cmd_an->add_option("--baseline", ana.baseline, "baseline model (full)");
  cmd_an->add_option("--compare", ana.compare, "unlearn method to compare")->required();
  cmd_an->add_option("--probe", ana.probe, "probe domain: 'target', an index, or a domain id");
  cmd_an->add_option("--k", ana.k, "top-k principal components");
  cmd_an->add_option("--target", ana.target, "target client (for --probe target)");
  cmd_an->add_option("--cka-denominator", ana.cka_denominator, "standard | as-printed");
  cmd_an->add_flag("--force", ana.force, "rerun even if the stage is complete");

  VerifyArgs ver;
  auto* cmd_ve = app.add_subcommand("verify", "Marker-injection unlearning verification");
  cmd_ve->add_option("--run", ver.run, "run directory")->required();
  cmd_ve->add_option("--target", ver.target, "target client index")->required();
  cmd_ve->add_option("--tau", ver.tau, "representativeness threshold");
  cmd_ve->add_option("--mu", ver.mu, "clean-loss weight (comma list for sweeps)");
  cmd_ve->add_option("--lambda", ver.lambda, "marker-loss weight (comma list, zipped with --mu)");
  cmd_ve->add_option("--epsilon", ver.epsilon, "marker budget (comma list for sweeps)");
  cmd_ve->add_option("--inject-rounds", ver.inject_rounds, "inject during the final n rounds");
  cmd_ve->add_option("--proximal", ver.proximal, "proximal coefficient toward the global model");
  cmd_ve->add_option("--y-target", ver.y_target, "marker target label");
  cmd_ve->add_option("--gen-steps", ver.gen_steps, "generator steps per injection round");
  cmd_ve->add_option("--gen-lr", ver.gen_lr, "generator learning rate");
  cmd_ve->add_option("--methods", ver.methods, "comma list of unlearn methods to verify");
  cmd_ve->add_flag("--baseline", ver.baseline_backdoor,
                   "also run the 3x3 pixel-pattern backdoor baseline");
  cmd_ve->add_option("--poison-fraction", ver.poison_fraction, "backdoor poison fraction");
  cmd_ve->add_flag("--cosine-as-printed", ver.cosine_as_printed,
                   "ablation: use the +cos feature term");
  cmd_ve->add_flag("--clean-term-full", ver.clean_term_full_set,
                   "clean loss term over the full local set");
  cmd_ve->add_flag("--force", ver.force, "rerun even if the stage is complete");

  MiaArgs mia;
  auto* cmd_mi = app.add_subcommand("mia", "Shadow-model membership inference baseline");
  cmd_mi->add_option("--run", mia.run, "run directory")->required();
  cmd_mi->add_option("--target", mia.target, "target client index")->required();
  cmd_mi->add_option("--shadows", mia.shadows, "number of shadow models");
  cmd_mi->add_option("--seed", mia.seed, "attack seed");
  cmd_mi->add_flag("--force", mia.force, "rerun even if the stage is complete");

  ReportArgs rep;
  auto* cmd_re = app.add_subcommand("report", "Emit CSV tables and charts from a completed run");
  cmd_re->add_option("--run", rep.run, "run directory")->required();
  cmd_re->add_option("--out", rep.out, "output directory (defaults to RUN/report)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*cmd_gen) return cmd_gen_data(gen);
    if (*cmd_tr) return cmd_train(train);
    if (*cmd_un) return cmd_unlearn(unl);
    if (*cmd_an) return cmd_analyze(ana);
    if (*cmd_ve) return cmd_verify(ver);
    if (*cmd_mi) return cmd_mia(mia);
    if (*cmd_re) return cmd_report(rep);
  } catch (const fdu::UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
