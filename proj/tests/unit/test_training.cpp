#include "doctest.h"

#include <cstring>
#include <fstream>
#include <iterator>

#include "endofuse/dataset.hpp"
#include "endofuse/errors.hpp"
#include "endofuse/pipeline.hpp"
#include "endofuse/training.hpp"

#include "support/checks.hpp"
#include "support/fixtures.hpp"

using namespace endofuse;
using namespace endofuse::testing;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

NormStats some_norm() {
  NormStats n;
  n.columns = {"a", "b", "c", "d", "e"};
  n.mean = Eigen::VectorXd::LinSpaced(5, -1, 1);
  n.stddev = Eigen::VectorXd::Constant(5, 0.3);
  n.dropped = {"z"};
  return n;
}

}  // namespace

TEST_CASE("Adam matches the scalar reference") {
  const auto r = adam_suite(200, 23);
  for (const auto& f : r.failures) INFO(f);
  CHECK(r.ok());
}

TEST_CASE("Adam leaves running statistics alone") {
  ParameterSet<double> p;
  Tensor<double> w = p.add("w", {3}, ParamKind::weight);
  Tensor<double> rm = p.add("bn.running_mean", {3}, ParamKind::running_mean);
  rm.value() << 1, 2, 3;
  w.grad().setOnes();
  AdamState<double> st;
  TrainConfig cfg;
  adam_step(p, st, cfg);
  CHECK((rm.value() == Eigen::Array3d(1, 2, 3)).all());
  CHECK((w.value() < 0).all());
  CHECK(st.t == 1);
}

TEST_CASE("checkpoint round trip and corruption") {
  TempDir tmp("unit-ckpt");
  const ModelConfig cfg = tiny_model_config();
  const auto params = init_parameters<TrainScalar>(cfg, 6);
  TrainConfig tc;
  tc.seed = 77;
  const Checkpoint ck = make_checkpoint(cfg, tc, params, some_norm(), 3);
  save_checkpoint(ck, tmp / "a.ckpt");

  const Checkpoint back = load_checkpoint(tmp / "a.ckpt");
  CHECK(back.epoch == 3);
  CHECK(back.train.seed == 77);
  CHECK(back.model.growth_rate == cfg.growth_rate);
  CHECK(back.norm.columns == ck.norm.columns);
  CHECK(back.norm.mean == ck.norm.mean);
  CHECK(back.norm.dropped == ck.norm.dropped);
  REQUIRE(back.tensors.size() == ck.tensors.size());
  for (std::size_t i = 0; i < ck.tensors.size(); ++i) {
    CHECK(back.tensors[i].name == ck.tensors[i].name);
    CHECK(back.tensors[i].shape == ck.tensors[i].shape);
    CHECK(back.tensors[i].data == ck.tensors[i].data);
  }
  CHECK(checkpoint_tensor_names(tmp / "a.ckpt").front() == ck.tensors.front().name);
  CHECK(read_checkpoint_header(tmp / "a.ckpt").find("\"layer_order\"") != std::string::npos);

  auto restored = restore_parameters(back);
  for (std::size_t i = 0; i < params.entries().size(); ++i)
    CHECK((restored.entries()[i].tensor.value() == params.entries()[i].tensor.value()).all());

  const std::string bytes = slurp(tmp / "a.ckpt");
  std::ofstream(tmp / "cut.ckpt", std::ios::binary) << bytes.substr(0, bytes.size() - 7);
  CHECK_THROWS_AS(load_checkpoint(tmp / "cut.ckpt"), FormatError);
  std::string bad = bytes;
  bad[0] = 'X';
  std::ofstream(tmp / "magic.ckpt", std::ios::binary) << bad;
  CHECK_THROWS_AS(load_checkpoint(tmp / "magic.ckpt"), FormatError);
  std::ofstream(tmp / "short.ckpt", std::ios::binary) << "EF";
  CHECK_THROWS_AS(load_checkpoint(tmp / "short.ckpt"), FormatError);
  CHECK_THROWS_AS(load_checkpoint(tmp / "missing.ckpt"), IoError);

  Checkpoint wrong = back;
  wrong.tensors.pop_back();
  CHECK_THROWS_AS(restore_parameters(wrong), SchemaError);
}

TEST_CASE("epoch log round trip") {
  TempDir tmp("unit-log");
  const std::vector<EpochLog> log{{1, 1.25, 0.5, 1.5, 0.25}, {2, 0.1 + 0.2, 1.0 / 3.0, 0.7, 0.75}};
  write_epoch_log(log, tmp / "log.csv");
  const auto back = read_epoch_log(tmp / "log.csv");
  REQUIRE(back.size() == 2);
  CHECK(back[1].epoch == 2);
  CHECK(back[1].train_loss == log[1].train_loss);
  CHECK(back[1].train_acc == log[1].train_acc);
  std::ofstream(tmp / "bad.csv") << "epoch,loss\n1,2\n";
  CHECK_THROWS_AS(read_epoch_log(tmp / "bad.csv"), FormatError);
}

TEST_CASE("training config validation") {
  TrainConfig c;
  c.batch = 1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.val_fraction = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("a short fit lowers the training loss and is reproducible") {
  TempDir tmp("unit-fit");
  SyntheticSpec spec;
  spec.classes = 2;
  spec.per_class = 12;
  spec.side = 16;
  spec.seed = 2;
  const DatasetManifest manifest = synthesize_dataset(spec, tmp.path());
  ExtractOptions eo;
  eo.side = 16;
  const FeatureTable features = extract_features(manifest, eo).table;

  FitOptions opts;
  opts.model = tiny_model_config();
  opts.model.d_in = 92;
  opts.model.num_classes = 2;
  opts.train.epochs = 6;
  opts.train.batch = 8;
  opts.train.lr = 3e-3;
  opts.train.val_fraction = 0.25;
  opts.train.seed = 3;
  int callbacks = 0;
  opts.on_epoch = [&](const EpochLog&) { ++callbacks; };

  const FitResult a = fit(manifest, features, opts);
  REQUIRE(a.log.size() == 6);
  CHECK(callbacks == 6);
  CHECK(a.log.back().train_loss < a.log.front().train_loss);
  CHECK(a.final_checkpoint.epoch == 6);
  double best = 0;
  for (const auto& e : a.log) best = std::max(best, e.val_acc);
  const auto best_it = std::find_if(a.log.begin(), a.log.end(), [&](const EpochLog& e) { return e.val_acc == best; });
  CHECK(a.best_checkpoint.epoch == best_it->epoch);

  const FitResult b = fit(manifest, features, opts);
  for (std::size_t i = 0; i < a.log.size(); ++i) {
    CHECK(a.log[i].train_loss == b.log[i].train_loss);
    CHECK(a.log[i].val_acc == b.log[i].val_acc);
  }

  // Resuming continues the epoch count from the checkpoint's weights.
  FitOptions first = opts;
  first.on_epoch = nullptr;
  first.train.epochs = 3;
  const FitResult half = fit(manifest, features, first);
  FitOptions rest = opts;
  rest.on_epoch = nullptr;
  rest.resume = &half.final_checkpoint;
  const FitResult resumed = fit(manifest, features, rest);
  REQUIRE(resumed.log.size() == 3);
  CHECK(resumed.log.front().epoch == 4);
  CHECK(resumed.final_checkpoint.epoch == 6);
  CHECK(std::isfinite(resumed.log.back().train_loss));
}
