// Command-line front end: train, translate, evaluate, ablate, plot and
// make-toy-data. Exit codes: 0 ok, 2 configuration error, 3 runtime or
// numeric failure.
#include "facecycle/data_pipeline.hpp"
#include "facecycle/image_io.hpp"
#include "facecycle/runner.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using namespace facecycle;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

struct TrainArgs {
  fs::path config;
  std::vector<std::string> overrides;
  std::optional<uint64_t> seed;
  std::optional<fs::path> output_dir;
  bool quiet = false;
};

RunConfig resolve_config(const TrainArgs& a) {
  auto cfg = load_run_config(a.config, a.overrides);
  if (a.seed) cfg.seed = *a.seed;
  if (a.output_dir) cfg.output_dir = *a.output_dir;
  cfg.validate();
  return cfg;
}

void add_config_options(CLI::App* cmd, TrainArgs& a) {
  cmd->add_option("-c,--config", a.config, "JSON run configuration")->required()->check(CLI::ExistingFile);
  cmd->add_option("--set", a.overrides, "Override a field, section.key=value (repeatable)");
  cmd->add_option("--seed", a.seed, "Override the run seed");
  cmd->add_option("-o,--output-dir", a.output_dir, "Override the run directory");
  cmd->add_flag("-q,--quiet", a.quiet, "Only warnings and errors on stderr");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Guided unpaired face-to-cartoon translation"};
  app.require_subcommand(1);

  TrainArgs train_args;
  auto* train = app.add_subcommand("train", "Train a model from a run configuration");
  add_config_options(train, train_args);

  fs::path tr_ckpt, tr_in, tr_out;
  std::string tr_dir = "X2Y";
  auto* translate = app.add_subcommand("translate", "Translate a directory of images");
  translate->add_option("--checkpoint", tr_ckpt)->required()->check(CLI::ExistingFile);
  translate->add_option("--input", tr_in)->required()->check(CLI::ExistingDirectory);
  translate->add_option("--direction", tr_dir, "X2Y or Y2X");
  translate->add_option("--out", tr_out)->required();

  EvaluateRequest eval_req;
  std::string eval_protocol = "unpaired";
  std::optional<fs::path> eval_x, eval_y;
  std::optional<int> eval_timing;
  auto* evaluate = app.add_subcommand("evaluate", "Score checkpoints and write report.json/report.md");
  evaluate->add_option("checkpoints", eval_req.checkpoints, "Checkpoint files")->required()->check(CLI::ExistingFile);
  evaluate->add_option("--protocol", eval_protocol, "paired or unpaired");
  evaluate->add_option("--x-test", eval_x, "Source-domain test directory");
  evaluate->add_option("--y-test", eval_y, "Target-domain test directory");
  evaluate->add_option("--out", eval_req.out_dir, "Report directory");
  evaluate->add_option("--timing-images", eval_timing, "Images timed for ms/img");

  TrainArgs ablate_args;
  std::string ablate_axes, ablate_seeds;
  bool ablate_no_eval = false;
  auto* ablate = app.add_subcommand("ablate", "Train and compare one-component-off variants");
  add_config_options(ablate, ablate_args);
  ablate->add_option("--axes", ablate_axes, "Comma-separated axes (default: all)");
  ablate->add_option("--seeds", ablate_seeds, "Comma-separated seeds (default: the config seed)");
  ablate->add_flag("--no-eval", ablate_no_eval, "Report stability only");

  std::vector<fs::path> plot_runs;
  fs::path plot_out = ".";
  int plot_window = 50;
  auto* plot = app.add_subcommand("plot", "Overlay loss curves of finished runs");
  plot->add_option("runs", plot_runs, "Run directories")->required()->check(CLI::ExistingDirectory);
  plot->add_option("--out", plot_out);
  plot->add_option("--window", plot_window, "Moving-average window")->check(CLI::PositiveNumber);

  fs::path toy_out;
  int toy_n = 500, toy_res = 64, toy_per_id = 10;
  uint64_t toy_seed = 0;
  auto* toy = app.add_subcommand("make-toy-data", "Render synthetic paired face domains with sidecars");
  toy->add_option("--out", toy_out)->required();
  toy->add_option("-n,--n", toy_n, "Images per domain");
  toy->add_option("--resolution", toy_res);
  toy->add_option("--seed", toy_seed);
  toy->add_option("--per-identity", toy_per_id, "Images per identity");

  std::optional<fs::path> show_path;
  std::vector<std::string> show_overrides;
  auto* show = app.add_subcommand("show-config", "Print the resolved configuration (defaults without --config)");
  show->add_option("-c,--config", show_path)->check(CLI::ExistingFile);
  show->add_option("--set", show_overrides, "Override a field, section.key=value (repeatable)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }

  try {
    if (*train) {
      set_event_log_quiet(train_args.quiet);
      const auto result = cmd_train(resolve_config(train_args));
      std::cout << "checkpoint " << result.final_checkpoint.string() << "\n";
    } else if (*translate) {
      const auto n = cmd_translate(tr_ckpt, tr_in, parse_direction(tr_dir), tr_out);
      std::cout << "translated " << n << " images into " << tr_out.string() << "\n";
    } else if (*evaluate) {
      eval_req.protocol = parse_eval_protocol(eval_protocol);
      eval_req.x_test_dir = eval_x;
      eval_req.y_test_dir = eval_y;
      eval_req.timing_images = eval_timing;
      const auto reports = cmd_evaluate(eval_req);
      std::cout << render_markdown(reports);
    } else if (*ablate) {
      set_event_log_quiet(ablate_args.quiet);
      AblateRequest req;
      req.axes = ablate_axes.empty() ? ablation_axes() : split_list(ablate_axes);
      for (const auto& s : split_list(ablate_seeds)) {
        try {
          req.seeds.push_back(std::stoull(s));
        } catch (const std::exception&) {
          throw ConfigError("--seeds: '" + s + "' is not an unsigned integer");
        }
      }
      req.evaluate = !ablate_no_eval;
      const auto result = cmd_ablate(resolve_config(ablate_args), req);
      for (const auto& [variant, v] : result.median_d_loss_variance) {
        std::cout << variant << " median_d_loss_variance " << v << "\n";
      }
    } else if (*plot) {
      std::cout << cmd_plot(plot_runs, plot_out, plot_window);
    } else if (*show) {
      RunConfig cfg = show_path ? load_run_config(*show_path, show_overrides) : RunConfig{};
      if (!show_path) {
        for (const auto& o : show_overrides) cfg.apply_override(o);
      }
      cfg.validate();
      std::cout << cfg.to_json() << "\n";
    } else if (*toy) {
      const auto dirs = make_toy_domains(toy_out, toy_n, toy_res, toy_seed, toy_per_id);
      std::cout << dirs.dir_x.string() << "\n" << dirs.dir_y.string() << "\n";
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kExitRuntime;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return 0;
}
