#include "lift3d/config.hpp"
#include "lift3d/error.hpp"
#include "lift3d/pipeline.hpp"

#include "CLI11.hpp"

#include <unistd.h>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

namespace {

using namespace lift3d;

std::string self_path(const char* argv0) {
  std::error_code ec;
  auto p = std::filesystem::read_symlink("/proc/self/exe", ec);
  return ec ? std::string(argv0) : p.string();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"lift3d: 2D foundation model features lifted to 3D for manipulation policies"};
  app.require_subcommand(1);

  std::string task = "reach", out, config_path, init_path, checkpoint, grid_path, name;
  int count = 0, episodes = 100, jobs = 1;
  std::uint64_t seed = 0, eval_seed = 500000;
  bool oracle = false;

  auto* gen = app.add_subcommand("gen-data", "Write a synthetic dataset split");
  gen->add_option("--task", task, "reach (demonstrations) or pretrain (image/depth/attention renders)")
      ->capture_default_str();
  gen->add_option("--count", count, "Number of records")->required();
  gen->add_option("--seed", seed, "First scene seed")->capture_default_str();
  gen->add_option("--out", out, "Output directory")->required();

  auto* pre = app.add_subcommand("pretrain", "Stage 1: masked depth reconstruction with distillation");
  pre->add_option("--config", config_path, "Run config (JSON)")->required();
  pre->add_option("--out", out, "Output directory")->required();

  auto* train = app.add_subcommand("train", "Stage 2: behavior cloning");
  train->add_option("--config", config_path, "Run config (JSON)")->required();
  train->add_option("--init", init_path, "Stage-1 checkpoint to initialize the encoder from");
  train->add_option("--out", out, "Output directory")->required();

  auto* eval = app.add_subcommand("eval", "Closed-loop success rate on seeded scenes");
  auto* ckpt_opt = eval->add_option("--checkpoint", checkpoint, "Policy checkpoint");
  auto* oracle_opt = eval->add_flag("--oracle", oracle, "Evaluate the scripted expert instead of a checkpoint");
  ckpt_opt->excludes(oracle_opt);
  eval->add_option("--episodes", episodes, "Episodes")->capture_default_str();
  eval->add_option("--seed", eval_seed, "First scene seed")->capture_default_str();

  auto* ablate = app.add_subcommand("ablate", "Run an ablation grid and write report.json / report.txt");
  ablate->add_option("--grid", grid_path, "Grid file (JSON)")->required();
  ablate->add_option("--out", out, "Output directory")->required();
  ablate->add_option("--jobs", jobs, "Configs run concurrently in separate processes")->capture_default_str();

  auto* one = app.add_subcommand("ablate-one", "Run a single resolved ablation config (used by ablate --jobs)");
  one->group("");
  one->add_option("--config", config_path)->required();
  one->add_option("--name", name)->required();
  one->add_option("--out", out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) {
      pipeline::gen_data(task, count, seed, out);
      std::cout << "wrote " << count << " " << task << " records to " << out << "\n";
    } else if (pre->parsed()) {
      pipeline::pretrain_command(config::load(config_path), out, &std::cout);
    } else if (train->parsed()) {
      std::optional<std::filesystem::path> init;
      if (!init_path.empty()) init = init_path;
      pipeline::train_command(config::load(config_path), init, out, &std::cout);
    } else if (eval->parsed()) {
      if (!oracle && checkpoint.empty()) throw ConfigError("eval needs --checkpoint or --oracle");
      std::optional<std::filesystem::path> path;
      if (!oracle) path = checkpoint;
      const auto result = pipeline::eval_command(path, episodes, eval_seed);
      std::printf("%.3f\n", result.success_rate);
    } else if (ablate->parsed()) {
      const auto report =
          pipeline::ablate_command(pipeline::load_grid(grid_path), out, jobs, self_path(argv[0]), &std::cout);
      std::cout << pipeline::report_table(report);
    } else if (one->parsed()) {
      nlohmann::json cfg;
      {
        const auto bytes = io::read_file(config_path);
        cfg = nlohmann::json::parse(bytes.begin(), bytes.end());
      }
      const auto row = pipeline::run_ablation_entry(name, cfg);
      const std::string text = row.dump(2);
      io::write_file_atomic(out, std::vector<unsigned char>(text.begin(), text.end()));
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
