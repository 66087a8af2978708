// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "endofuse/dataset.hpp"
#include "endofuse/metrics.hpp"
#include "endofuse/pipeline.hpp"
#include "endofuse/training.hpp"

#include "support/checks.hpp"
#include "support/fixtures.hpp"

#ifndef ENDOFUSE_CLI_PATH
#error "ENDOFUSE_CLI_PATH must name the endofuse executable"
#endif

namespace fs = std::filesystem;
using namespace endofuse;
using namespace endofuse::testing;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v, int digits = 3) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string first_failures(const SuiteResult& r) {
  std::string s;
  for (std::size_t i = 0; i < r.failures.size() && i < 3; ++i) s += "; " + r.failures[i];
  return s;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

Outcome gradients() {
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0;
  std::string worst_name;
  int ops = 0;
  for (const auto& c : op_gradchecks()) {
    ++ops;
    if (c.report.worst >= worst) {
      worst = c.report.worst;
      worst_name = c.op + "/" + c.report.worst_tensor;
    }
  }
  const auto model = model_gradcheck();
  if (model.worst >= worst) {
    worst = model.worst;
    worst_name = "tiny model/" + model.worst_tensor;
  }
  const double secs = seconds_since(t0);
  const bool pass = worst < 1e-3 && secs < 60;
  return {pass, std::to_string(ops) + " ops + tiny model; max rel err " + fmt(worst * 1e6, 3) + "e-6 (" + worst_name +
                    "); " + fmt(secs, 1) + " s"};
}

Outcome textures() {
  const auto t0 = std::chrono::steady_clock::now();
  const SuiteResult r = texture_oracle_suite(60);
  const double secs = seconds_since(t0);
  return {r.ok() && secs < 10, r.summary + ", " + std::to_string(r.failures.size()) + " mismatches; " + fmt(secs, 2) +
                                   " s" + first_failures(r)};
}

Outcome masks() {
  const SuiteResult r = mask_partition_suite(100);
  return {r.ok(), r.summary + ", " + std::to_string(r.failures.size()) + " violations" + first_failures(r)};
}

Outcome architecture() {
  const SuiteResult r = architecture_suite();
  return {r.ok(), r.summary + first_failures(r)};
}

Outcome optimizer() {
  const SuiteResult r = adam_suite();
  return {r.ok(), r.summary + first_failures(r)};
}

Outcome metric_identities() {
  const SuiteResult r = metric_identity_suite();
  return {r.ok(), r.summary + first_failures(r)};
}

// Synthetic 4-class data, features extracted with the default flags.
struct Prepared {
  DatasetManifest manifest;
  FeatureTable features;
};

Prepared prepare(const fs::path& dir, int per_class, Index side, std::uint64_t seed) {
  SyntheticSpec spec;
  spec.per_class = per_class;
  spec.side = side;
  spec.seed = seed;
  Prepared p;
  p.manifest = synthesize_dataset(spec, dir);
  ExtractOptions opts;
  opts.side = side;
  p.features = extract_features(p.manifest, opts).table;
  return p;
}

Outcome smoke_training() {
  TempDir tmp("accept-smoke");
  const auto t0 = std::chrono::steady_clock::now();
  const Prepared data = prepare(tmp.path(), 50, 64, 7);
  const RunConfig cfg = desk_config();
  FitOptions opts;
  opts.model = cfg.model;
  opts.train = cfg.train;
  opts.train.seed = 1;
  const FitResult fit_result = fit(data.manifest, data.features, opts);
  const double secs = seconds_since(t0);
  const EpochLog& last = fit_result.log.back();
  const bool pass = fit_result.log.size() == 20 && last.train_acc >= 0.90 && last.val_acc >= 0.70 && secs < 600;
  return {pass, std::to_string(data.manifest.entries.size()) + " images, " + std::to_string(fit_result.log.size()) +
                    " epochs: train acc " + fmt(last.train_acc) + ", val acc " + fmt(last.val_acc) + "; " +
                    fmt(secs, 1) + " s"};
}

Outcome determinism() {
  TempDir tmp("accept-determinism");
  const Prepared data = prepare(tmp / "data", 10, 32, 21);
  RunConfig cfg = desk_config();
  cfg.model.input_side = 32;
  cfg.train.epochs = 2;
  cfg.train.batch = 8;
  cfg.train.seed = 4;
  FitOptions opts;
  opts.model = cfg.model;
  opts.train = cfg.train;

  const FitResult a = fit(data.manifest, data.features, opts);
  const FitResult b = fit(data.manifest, data.features, opts);
  write_epoch_log(a.log, tmp / "a.csv");
  write_epoch_log(b.log, tmp / "b.csv");
  const bool logs_equal = slurp(tmp / "a.csv") == slurp(tmp / "b.csv") && !slurp(tmp / "a.csv").empty();

  // Checkpoint round trip: eval logits before and after save/load.
  save_checkpoint(a.final_checkpoint, tmp / "final.ckpt");
  const Checkpoint loaded = load_checkpoint(tmp / "final.ckpt");
  const FeatureTable normed = apply_norm(data.features, a.final_checkpoint.norm);
  const Dataset ds = build_dataset(data.manifest, normed, cfg.model.input_side);
  std::vector<Index> rows(static_cast<std::size_t>(ds.size()));
  for (Index i = 0; i < ds.size(); ++i) rows[static_cast<std::size_t>(i)] = i;
  auto logits_of = [&](const Checkpoint& ck) {
    ParameterSet<TrainScalar> params = restore_parameters(ck);
    ForwardContext<TrainScalar> ctx{Mode::eval, nullptr, nullptr};
    return model_forward(gather_images(ds, rows), gather_features(ds, rows), params, ck.model, ctx).value();
  };
  const auto before = logits_of(a.final_checkpoint);
  const auto after = logits_of(loaded);
  const bool logits_equal = before.size() == after.size() &&
                            std::memcmp(before.data(), after.data(), sizeof(float) * before.size()) == 0;

  // Feature CSV round trip.
  write_feature_csv(data.features, tmp / "f1.csv");
  const FeatureTable back = read_feature_csv(tmp / "f1.csv");
  write_feature_csv(back, tmp / "f2.csv");
  const bool csv_lossless = back.image_ids == data.features.image_ids && back.columns == data.features.columns &&
                            back.labels == data.features.labels && back.values == data.features.values &&
                            slurp(tmp / "f1.csv") == slurp(tmp / "f2.csv");

  return {logs_equal && logits_equal && csv_lossless,
          std::string("train_log identical: ") + (logs_equal ? "yes" : "NO") +
              ", checkpoint logits bit-identical: " + (logits_equal ? "yes" : "NO") +
              ", feature CSV lossless: " + (csv_lossless ? "yes" : "NO")};
}

Outcome pipeline() {
  TempDir tmp("accept-pipeline");
  const std::string cli = ENDOFUSE_CLI_PATH;
  const std::string d = tmp.path().string();
  {
    std::ofstream cfg(tmp / "desk.cfg");
    RunConfig c = desk_config();
    c.train.epochs = 2;
    cfg << format_config(c);
  }
  const std::vector<std::string> steps = {
      "synth --out " + d + "/data --seed 3",
      "extract --manifest " + d + "/data/manifest.csv --out " + d + "/features.csv",
      "train --manifest " + d + "/data/manifest.csv --features " + d + "/features.csv --config " + d +
          "/desk.cfg --out " + d + "/run --seed 1",
      "eval --checkpoint " + d + "/run/best.ckpt --manifest " + d + "/data/manifest.csv --features " + d +
          "/features.csv --out " + d + "/eval",
      "plot --log " + d + "/run/train_log.csv --roc " + d + "/eval/roc.csv --out " + d + "/figures",
  };
  for (const auto& s : steps) {
    const std::string cmd = "\"" + cli + "\" " + s + " > \"" + d + "/step.log\" 2>&1";
    const int rc = std::system(cmd.c_str());
    if (rc != 0) return {false, "step failed (status " + std::to_string(rc) + "): " + s.substr(0, s.find(' '))};
  }
  const std::vector<std::string> artifacts = {"features.csv",         "run/final.ckpt",    "run/best.ckpt",
                                              "run/train_log.csv",    "eval/metrics.json", "eval/roc.csv",
                                              "figures/training_curves.svg", "figures/roc_curves.svg"};
  for (const auto& a : artifacts) {
    std::error_code ec;
    if (fs::file_size(tmp / a, ec) == 0 || ec) return {false, "missing or empty artifact " + a};
  }
  return {true, "synth -> extract -> train -> eval -> plot, " + std::to_string(artifacts.size()) +
                    " artifacts written, all exit codes 0"};
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient correctness", gradients},
      {"texture-matrix oracles", textures},
      {"mask partition", masks},
      {"architecture arithmetic", architecture},
      {"optimizer fidelity", optimizer},
      {"metric identities", metric_identities},
      {"end-to-end smoke training", smoke_training},
      {"determinism and persistence", determinism},
      {"pipeline reproducibility", pipeline},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  [" << i + 1 << "] " << criteria[i].first << " -- " << o.detail
              << std::endl;
  }
  std::cout << (criteria.size() - failed) << "/" << criteria.size() << " criteria passed" << std::endl;
  return failed == 0 ? 0 : 1;
}
