// endofuse: radiomics + CNN fusion pipeline driver.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"

#include "endofuse/dataset.hpp"
#include "endofuse/errors.hpp"
#include "endofuse/pipeline.hpp"
#include "endofuse/training.hpp"

namespace fs = std::filesystem;
using namespace endofuse;

int main(int argc, char** argv) {
  CLI::App app{"Radiomics + DenseNet feature fusion for image classification"};
  app.require_subcommand(1);

  std::string manifest, out, features, config, checkpoint, log_csv, roc_csv;
  ExtractOptions extract;
  std::optional<std::uint64_t> seed;
  bool all_rows = false;

  auto* ex = app.add_subcommand("extract", "Radiomics features for every manifest image");
  ex->add_option("--manifest", manifest, "Manifest CSV (path,label)")->required()->check(CLI::ExistingFile);
  ex->add_option("--out", out, "Output feature CSV")->required();
  ex->add_option("--radius", extract.radius, "Central disc radius as a fraction of the half-size")->capture_default_str();
  ex->add_option("--bins", extract.bins, "Gray levels for texture matrices")->capture_default_str();
  ex->add_option("--side", extract.side, "Images are resized to side x side")->capture_default_str();

  auto* tr = app.add_subcommand("train", "Fit the fusion model");
  tr->add_option("--manifest", manifest)->required()->check(CLI::ExistingFile);
  tr->add_option("--features", features)->required()->check(CLI::ExistingFile);
  tr->add_option("--config", config, "key = value file; defaults to the desk preset")->check(CLI::ExistingFile);
  tr->add_option("--out", out, "Output directory")->required();
  tr->add_option("--seed", seed, "Overrides the config seed");

  auto* ev = app.add_subcommand("eval", "Metrics and ROC curves for a checkpoint");
  ev->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  ev->add_option("--manifest", manifest)->required()->check(CLI::ExistingFile);
  ev->add_option("--features", features)->required()->check(CLI::ExistingFile);
  ev->add_option("--out", out, "Output directory")->required();
  ev->add_flag("--all", all_rows, "Evaluate every manifest row instead of the validation split");

  auto* pl = app.add_subcommand("plot", "SVG training curves and ROC curves");
  pl->add_option("--log", log_csv, "train_log.csv")->required()->check(CLI::ExistingFile);
  pl->add_option("--roc", roc_csv, "roc.csv")->required()->check(CLI::ExistingFile);
  pl->add_option("--out", out, "Output directory")->required();

  SyntheticSpec synth;
  auto* sy = app.add_subcommand("synth", "Write a synthetic texture dataset");
  sy->add_option("--out", out, "Output directory")->required();
  sy->add_option("--classes", synth.classes)->capture_default_str();
  sy->add_option("--per-class", synth.per_class)->capture_default_str();
  sy->add_option("--side", synth.side)->capture_default_str();
  sy->add_option("--seed", synth.seed)->capture_default_str();

  auto* in = app.add_subcommand("inspect", "Print a checkpoint header");
  in->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);

  auto* cf = app.add_subcommand("config", "Print the desk preset as a config file");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*ex) {
      cmd_extract(manifest, out, extract, std::cerr);
    } else if (*tr) {
      cmd_train(manifest, features, config.empty() ? std::nullopt : std::optional<fs::path>(config), out, seed,
                std::cout);
    } else if (*ev) {
      cmd_eval(checkpoint, manifest, features, out, all_rows, std::cout);
    } else if (*pl) {
      cmd_plot(log_csv, roc_csv, out);
    } else if (*sy) {
      const auto m = synthesize_dataset(synth, out);
      std::cerr << "wrote " << m.entries.size() << " images to " << out << '\n';
    } else if (*in) {
      std::cout << read_checkpoint_header(checkpoint) << '\n';
    } else if (*cf) {
      std::cout << format_config(desk_config());
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
