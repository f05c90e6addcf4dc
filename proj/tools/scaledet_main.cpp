// Command-line entry points: train, eval, inspect, ablate.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "scaledet/config.hpp"
#include "scaledet/eval.hpp"
#include "scaledet/train.hpp"

namespace fs = std::filesystem;
using namespace scaledet;

namespace {

RunConfig load_config_or_default(const std::string& config_path, long long seed_flag,
                                 const std::string& out_flag) {
  RunConfig cfg;
  if (!config_path.empty()) cfg = RunConfig::from_file(config_path);
  if (seed_flag >= 0) cfg.seed = static_cast<std::uint64_t>(seed_flag);
  if (!out_flag.empty()) cfg.out_dir = out_flag;
  cfg.finalize();
  return cfg;
}

std::vector<std::string> split_values(const std::string& csv) {
  std::vector<std::string> out;
  std::stringstream ss(csv);
  std::string tok;
  // Scale sets carry commas, so pipes separate ablation values when present.
  const char sep = csv.find('|') != std::string::npos ? '|' : ',';
  while (std::getline(ss, tok, sep))
    if (!tok.empty()) out.push_back(tok);
  return out;
}

int cmd_train(const std::string& config_path, long long seed, const std::string& out) {
  RunConfig cfg = load_config_or_default(config_path, seed, out);
  std::cout << "training run -> " << cfg.out_dir << "\n";
  const TrainResult result = train_run(cfg, &std::cout);
  std::cout << "checkpoint: " << result.checkpoint_path.string() << "\n";
  std::cout << "final total loss: " << result.final_total << "\n";
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& data_dir, const std::string& out,
             double iou) {
  Model model = Model::load_checkpoint(checkpoint);
  const LoadedDataset dataset = load_dataset(data_dir);
  if (dataset.samples.empty()) throw std::runtime_error("eval: dataset is empty");
  if (dataset.samples[0].width != model.config().image_width ||
      dataset.samples[0].height != model.config().image_height) {
    throw std::runtime_error("eval: dataset image size does not match the checkpoint");
  }
  const MetricsReport report = evaluate_model(model, dataset.samples, iou);
  const std::string json = report_to_json(report);
  std::cout << json;
  if (!out.empty()) {
    std::ofstream f(out);
    f << json;
  }
  return 0;
}

int cmd_inspect(const std::string& checkpoint, const std::string& data_dir,
                const std::string& sample_id, const std::string& out) {
  Model model = Model::load_checkpoint(checkpoint);
  const LoadedDataset dataset = load_dataset(data_dir);
  auto it = std::find(dataset.ids.begin(), dataset.ids.end(), sample_id);
  if (it == dataset.ids.end())
    throw std::runtime_error("inspect: sample " + sample_id + " not found in " + data_dir);
  const auto& sample = dataset.samples[static_cast<std::size_t>(it - dataset.ids.begin())];
  const fs::path out_path = out.empty() ? fs::path("inspect_" + sample_id + ".ppm") : fs::path(out);
  render_inspection(model, sample, out_path);
  std::cout << "overlay written to " << out_path.string() << "\n";
  return 0;
}

int cmd_ablate(const std::string& config_path, const std::string& axis, const std::string& values,
               long long seed, const std::string& out) {
  RunConfig base = load_config_or_default(config_path, seed, out.empty() ? "runs/ablate" : out);
  const auto value_list = split_values(values);
  if (value_list.empty()) throw std::runtime_error("ablate: no values given");
  const auto rows = run_ablation(base, axis, value_list, &std::cout);
  const std::string table = ablation_table_text(axis, rows);
  std::cout << table;
  const fs::path dir(base.out_dir);
  fs::create_directories(dir);
  {
    std::ofstream f(dir / "ablation.tsv");
    f << table;
  }
  {
    std::ofstream f(dir / "ablation.json");
    f << ablation_table_json(axis, rows);
  }
  std::cout << "tables written to " << (dir / "ablation.tsv").string() << " and "
            << (dir / "ablation.json").string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Scale-aware deformable detector: training and evaluation harness"};
  app.require_subcommand(1);

  std::string config_path, checkpoint, data_dir, out, sample_id, axis, values;
  long long seed = -1;
  double iou = 0.5;

  auto* train = app.add_subcommand("train", "Train on the synthetic dataset");
  train->add_option("--config", config_path, "Flat key=value config file");
  train->add_option("--seed", seed, "Override the config seed");
  train->add_option("--out", out, "Override the run directory");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset split");
  eval->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  eval->add_option("--data", data_dir, "Dataset split directory")->required();
  eval->add_option("--out", out, "Also write the JSON report here");
  eval->add_option("--iou", iou, "AP40 IoU threshold (default 0.5)");

  auto* inspect = app.add_subcommand("inspect", "Render a key-point overlay image");
  inspect->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  inspect->add_option("--data", data_dir, "Dataset split directory")->required();
  inspect->add_option("--sample", sample_id, "Sample id, e.g. 000003")->required();
  inspect->add_option("--out", out, "Output image path (.ppm)");

  auto* ablate = app.add_subcommand("ablate", "Train one run per axis value and tabulate");
  ablate->add_option("--config", config_path, "Base config file");
  ablate->add_option("--axis", axis, "scale-set | lambda8 | wsm-mode")->required();
  ablate->add_option("--values", values, "Value list; use | between scale sets")->required();
  ablate->add_option("--seed", seed, "Shared seed for every run");
  ablate->add_option("--out", out, "Base output directory");

  CLI11_PARSE(app, argc, argv);

  try {
    if (app.got_subcommand(train)) return cmd_train(config_path, seed, out);
    if (app.got_subcommand(eval)) return cmd_eval(checkpoint, data_dir, out, iou);
    if (app.got_subcommand(inspect)) return cmd_inspect(checkpoint, data_dir, sample_id, out);
    if (app.got_subcommand(ablate)) return cmd_ablate(config_path, axis, values, seed, out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
