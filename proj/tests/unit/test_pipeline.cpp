#include "doctest.h"

#include <fstream>
#include <iterator>
#include <sstream>

#include "json.hpp"

#include "endofuse/errors.hpp"
#include "endofuse/pipeline.hpp"

#include "support/fixtures.hpp"

using namespace endofuse;
using namespace endofuse::testing;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::size_t count_of(const std::string& s, const std::string& needle) {
  std::size_t n = 0;
  for (auto pos = s.find(needle); pos != std::string::npos; pos = s.find(needle, pos + 1)) ++n;
  return n;
}

RunConfig tiny_run(int epochs) {
  RunConfig c;
  c.model = tiny_model_config();
  c.train.epochs = epochs;
  c.train.batch = 8;
  c.train.val_fraction = 0.25;
  return c;
}

// Synthetic 3-class set at 16x16 with features, shared by several cases.
struct Workspace {
  TempDir tmp{"unit-pipeline"};
  DatasetManifest manifest;

  Workspace() {
    SyntheticSpec spec;
    spec.classes = 3;
    spec.per_class = 8;
    spec.side = 16;
    spec.seed = 4;
    manifest = synthesize_dataset(spec, tmp / "data");
    ExtractOptions eo;
    eo.side = 16;
    std::ostringstream sink;
    cmd_extract(tmp / "data/manifest.csv", tmp / "features.csv", eo, sink);
    std::ofstream(tmp / "tiny.cfg") << format_config(tiny_run(3));
  }
};

}  // namespace

TEST_CASE("config parsing") {
  std::istringstream ok("# comment\nepochs = 7\n\nlr=0.01  # trailing\ngrowth_rate = 6\nbottleneck = true\n");
  const RunConfig c = parse_config(ok, "a.cfg");
  CHECK(c.train.epochs == 7);
  CHECK(c.train.lr == 0.01);
  CHECK(c.model.growth_rate == 6);
  CHECK(c.model.bottleneck);

  std::istringstream unknown("epochs = 3\nlearning_rate = 1\n");
  try {
    parse_config(unknown, "b.cfg");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("b.cfg:2") != std::string::npos);
    CHECK(std::string(e.what()).find("learning_rate") != std::string::npos);
  }
  std::istringstream bad("epochs = many\n");
  CHECK_THROWS_AS(parse_config(bad), ConfigError);

  const RunConfig desk = desk_config();
  std::istringstream again(format_config(desk));
  const RunConfig round = parse_config(again);
  CHECK(format_config(round) == format_config(desk));
  CHECK(round.model.blocks == 2);
  CHECK(round.model.layers_per_block == 4);
}

TEST_CASE("extraction writes one row per image with 92 features") {
  TempDir tmp("unit-extract");
  SyntheticSpec spec;
  spec.classes = 3;
  spec.per_class = 1;
  spec.side = 16;
  const DatasetManifest m = synthesize_dataset(spec, tmp.path());
  ExtractOptions eo;
  eo.side = 16;
  eo.threads = 2;
  std::ostringstream sink;
  cmd_extract(tmp / "manifest.csv", tmp / "f1.csv", eo, sink);
  const FeatureTable t = read_feature_csv(tmp / "f1.csv");
  CHECK(t.rows() == 3);
  CHECK(t.cols() == 92);
  REQUIRE(t.labels.has_value());
  CHECK(*t.labels == m.labels());
  const std::string header = slurp(tmp / "f1.csv").substr(0, slurp(tmp / "f1.csv").find('\n'));
  CHECK(count_of(header, ",") + 1 == 94);

  eo.threads = 1;
  cmd_extract(tmp / "manifest.csv", tmp / "f2.csv", eo, sink);
  CHECK(slurp(tmp / "f1.csv") == slurp(tmp / "f2.csv"));
}

TEST_CASE("extracted bytes do not depend on the worker count") {
  TempDir tmp("unit-threads");
  SyntheticSpec spec;
  spec.classes = 4;
  spec.per_class = 3;
  spec.side = 24;
  spec.seed = 9;
  synthesize_dataset(spec, tmp.path());
  ExtractOptions eo;
  eo.side = 24;
  std::ostringstream sink;
  eo.threads = 1;
  cmd_extract(tmp / "manifest.csv", tmp / "one.csv", eo, sink);
  eo.threads = 3;
  cmd_extract(tmp / "manifest.csv", tmp / "three.csv", eo, sink);
  CHECK(slurp(tmp / "one.csv") == slurp(tmp / "three.csv"));
}

TEST_CASE("extraction skips unreadable images up to the failure budget") {
  TempDir tmp("unit-skip");
  SyntheticSpec spec;
  spec.classes = 2;
  spec.per_class = 6;
  spec.side = 16;
  DatasetManifest m = synthesize_dataset(spec, tmp.path());
  std::ofstream(m.resolve(m.entries[0]), std::ios::binary) << "garbage";
  ExtractOptions eo;
  eo.side = 16;
  const ExtractResult r = extract_features(m, eo);
  CHECK(r.table.rows() == 11);
  REQUIRE(r.skipped.size() == 1);
  CHECK(r.skipped[0].first == m.entries[0].path);
  CHECK_FALSE(r.table.row_of(m.entries[0].path).has_value());

  std::ofstream(m.resolve(m.entries[1]), std::ios::binary) << "garbage";
  CHECK_THROWS_AS(extract_features(m, eo), ValidationError);
}

TEST_CASE("ENDOFUSE_THREADS controls the worker count") {
  ::setenv("ENDOFUSE_THREADS", "3", 1);
  CHECK(extract_worker_count(0, 100) == 3);
  CHECK(extract_worker_count(0, 2) == 2);
  ::setenv("ENDOFUSE_THREADS", "zero", 1);
  CHECK_THROWS_AS(extract_worker_count(0, 100), ConfigError);
  ::unsetenv("ENDOFUSE_THREADS");
  CHECK(extract_worker_count(0, 100) >= 1);
  CHECK(extract_worker_count(5, 100) == 5);
}

TEST_CASE("train, eval and plot on a tiny configuration") {
  Workspace ws;
  const auto& tmp = ws.tmp;
  std::ostringstream train_out;
  cmd_train(tmp / "data/manifest.csv", tmp / "features.csv", tmp / "tiny.cfg", tmp / "run", 5, train_out);
  for (const char* f : {"final.ckpt", "best.ckpt", "train_log.csv"}) CHECK(fs::file_size(tmp / "run" / f) > 0);
  const auto log = read_epoch_log(tmp / "run/train_log.csv");
  CHECK(log.size() == 3);
  CHECK(count_of(train_out.str(), "epoch ") >= 3);
  CHECK(load_checkpoint(tmp / "run/final.ckpt").train.seed == 5);

  // Same seed, same bytes.
  std::ostringstream again;
  cmd_train(tmp / "data/manifest.csv", tmp / "features.csv", tmp / "tiny.cfg", tmp / "run2", 5, again);
  CHECK(slurp(tmp / "run/train_log.csv") == slurp(tmp / "run2/train_log.csv"));

  std::ostringstream eval_out;
  const auto report =
      cmd_eval(tmp / "run/final.ckpt", tmp / "data/manifest.csv", tmp / "features.csv", tmp / "eval", false, eval_out);
  const Split split = split_for(ws.manifest, load_checkpoint(tmp / "run/final.ckpt").train);
  CHECK(report.samples == static_cast<int>(split.val.size()));
  CHECK(eval_out.str().find(metrics::table_row(report)) != std::string::npos);
  std::ifstream js(tmp / "eval/metrics.json");
  const auto j = nlohmann::json::parse(js);
  CHECK(j.at("accuracy").get<double>() == report.accuracy);
  CHECK(j.at("f1").get<double>() == report.f1);

  std::vector<std::string> ids;
  std::vector<int> labels;
  Eigen::MatrixXd probs;
  read_scores_csv(tmp / "eval/scores.csv", ids, labels, probs);
  CHECK(ids.size() == split.val.size());
  CHECK(probs.cols() == 3);
  CHECK((probs.rowwise().sum().array() - 1.0).abs().maxCoeff() < 1e-5);

  const auto all = cmd_eval(tmp / "run/final.ckpt", tmp / "data/manifest.csv", tmp / "features.csv", tmp / "eval_all",
                            true, eval_out);
  CHECK(all.samples == 24);

  cmd_plot(tmp / "run/train_log.csv", tmp / "eval/roc.csv", tmp / "fig");
  const std::string curves = slurp(tmp / "fig/training_curves.svg");
  const std::string roc = slurp(tmp / "fig/roc_curves.svg");
  CHECK(curves.find("<svg") != std::string::npos);
  CHECK(count_of(curves, "<polyline") == 4);
  CHECK(count_of(roc, "<polyline") == metrics::read_roc_csv(tmp / "eval/roc.csv").size());
  CHECK(roc.find("AUC = ") != std::string::npos);
  cmd_plot(tmp / "run/train_log.csv", tmp / "eval/roc.csv", tmp / "fig2");
  CHECK(slurp(tmp / "fig2/roc_curves.svg") == roc);
  CHECK(slurp(tmp / "fig2/training_curves.svg") == curves);

  std::ofstream(tmp / "empty_roc.csv") << "class,fpr,tpr\n";
  CHECK_THROWS_AS(cmd_plot(tmp / "run/train_log.csv", tmp / "empty_roc.csv", tmp / "fig3"), ValidationError);

  // A feature table missing a column the checkpoint was normalized with.
  FeatureTable f = read_feature_csv(tmp / "features.csv");
  const std::string victim = load_checkpoint(tmp / "run/final.ckpt").norm.columns.front();
  f.columns[*f.column_of(victim)] = "renamed";
  write_feature_csv(f, tmp / "broken.csv");
  try {
    cmd_eval(tmp / "run/final.ckpt", tmp / "data/manifest.csv", tmp / "broken.csv", tmp / "eval3", false, eval_out);
    FAIL("expected SchemaError");
  } catch (const SchemaError& e) {
    CHECK(std::string(e.what()).find(victim) != std::string::npos);
  }
}
