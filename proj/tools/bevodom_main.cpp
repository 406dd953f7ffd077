// Command-line front-end: run odometry (with or without loop closure),
// generate synthetic datasets, evaluate ATE, dump BEV images, plot
// trajectories, and print the configuration reference.
#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "bevodom/odometry.hpp"
#include "bevodom/synthetic.hpp"

namespace fs = std::filesystem;
using namespace bevodom;

namespace {

RunConfig load_with_overrides(const std::string& config_path,
                              const std::vector<std::string>& overrides) {
  RunConfig cfg;
  if (!config_path.empty()) cfg = load_config(config_path);
  for (const std::string& kv : overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) {
      throw std::runtime_error("override must be key=value: " + kv);
    }
    apply_override(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  return cfg;
}

int cmd_run(const std::string& config_path, const std::string& dataset,
            const std::string& mode, uint64_t seed, const std::string& out,
            const std::vector<std::string>& overrides) {
  RunConfig cfg = load_with_overrides(config_path, overrides);
  if (!dataset.empty()) cfg.dataset_dir = dataset;
  if (!mode.empty()) cfg.mode = mode;
  if (seed != 0) cfg.seed = seed;
  if (!out.empty()) cfg.out_dir = out;
  if (cfg.dataset_dir.empty()) {
    std::cerr << "error: no dataset directory given\n";
    return 2;
  }

  const Dataset data = ingest(cfg.dataset_dir);
  fs::create_directories(cfg.out_dir);
  std::ofstream diag(cfg.out_dir + "/diagnostics.jsonl");
  std::ofstream loop_log(cfg.out_dir + "/loops.jsonl");

  const RunResult result = run(cfg, data, &diag, &loop_log);
  write_trajectory(cfg.out_dir + "/trajectory.txt", result.trajectory);
  if (cfg.mode == "loop") {
    write_trajectory(cfg.out_dir + "/trajectory_corrected.txt",
                     result.corrected);
  }

  std::cout << "frames: " << result.frames_total
            << "  skipped: " << result.frames_skipped
            << "  keyframes: " << result.keyframes
            << "  feature-updates: " << result.frames_feature_updates
            << "\n";
  if (cfg.mode == "loop") {
    std::cout << "accepted loops: " << result.accepted_loops
              << "  trajectory revision: " << result.trajectory_revision
              << "\n";
  }
  std::cout << "wrote " << cfg.out_dir << "/trajectory.txt\n";
  return 0;
}

int cmd_synth(const std::string& world_name, uint64_t seed,
              const std::string& out, const std::string& config_path,
              const std::vector<std::string>& overrides) {
  const RunConfig cfg = load_with_overrides(config_path, overrides);
  WorldSpec world = make_preset(world_name, seed);
  world.lidar = cfg.synth_lidar;
  // Presets pick their own range; keep it unless the user overrode it.
  const RunConfig defaults;
  if (cfg.synth_lidar.max_range == defaults.synth_lidar.max_range) {
    world.lidar.max_range = make_preset(world_name, seed).lidar.max_range;
  }
  world.imu = cfg.synth_imu;
  const SyntheticDataset data = generate_synthetic(world, seed);
  write_dataset(data, out);
  std::cout << "wrote " << data.scans.size() << " scans, "
            << data.imu.size() << " IMU samples to " << out << "\n";
  return 0;
}

int cmd_eval(const std::string& est_path, const std::string& gt_path) {
  const auto est = read_trajectory(est_path);
  const auto gt = read_trajectory(gt_path);
  const AteResult ate = evaluate_ate(est, gt);
  std::cout << "pairs: " << ate.pairs << "\n"
            << "ate_rmse_m: " << ate.rmse << "\n"
            << "mean_m: " << ate.mean << "\n"
            << "max_m: " << ate.max_error << "\n"
            << "per_axis_rmse_m: " << ate.per_axis_rmse.x() << " "
            << ate.per_axis_rmse.y() << " " << ate.per_axis_rmse.z() << "\n";
  return 0;
}

int cmd_bev_dump(const std::string& dataset, const std::string& out,
                 const std::string& config_path,
                 const std::vector<std::string>& overrides, int every) {
  const RunConfig cfg = load_with_overrides(config_path, overrides);
  const Dataset data = ingest(dataset);
  fs::create_directories(out);
  int written = 0;
  for (size_t i = 0; i < data.scans.size(); i += every) {
    std::vector<Vec3> pts;
    pts.reserve(data.scans[i].points.size());
    for (const TimedPoint& tp : data.scans[i].points) pts.push_back(tp.p);
    try {
      const BevProjection proj = project_scan(pts, cfg.bev);
      char name[64];
      std::snprintf(name, sizeof(name), "/bev_%05zu.pgm", i);
      write_pgm(proj.image, out + name);
      ++written;
    } catch (const EmptyImageError&) {
      std::cerr << "scan " << i << ": empty BEV image, skipped\n";
    }
  }
  std::cout << "wrote " << written << " graymaps to " << out << "\n";
  return 0;
}

int cmd_plot(const std::vector<std::string>& files, const std::string& out) {
  std::vector<std::pair<std::string, std::vector<TrajectoryRecord>>> named;
  for (const std::string& f : files) {
    named.emplace_back(fs::path(f).filename().string(), read_trajectory(f));
  }
  write_trajectory_svg(out, named);
  std::cout << "wrote " << out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"BEV-image-assisted LiDAR-inertial odometry toolkit"};
  app.require_subcommand(1);

  std::string config_path, dataset, mode, out, world_name = "square";
  std::string est_path, gt_path;
  uint64_t seed = 0;
  int every = 1;
  std::vector<std::string> overrides, plot_files;

  auto* run_cmd = app.add_subcommand("run", "run odometry on a dataset");
  run_cmd->add_option("--config", config_path, "config file");
  run_cmd->add_option("--dataset", dataset, "dataset directory");
  run_cmd->add_option("--mode", mode, "odometry | loop");
  run_cmd->add_option("--seed", seed, "seed override");
  run_cmd->add_option("--out", out, "output directory");
  run_cmd->add_option("--set", overrides, "config override key=value");

  auto* synth_cmd = app.add_subcommand("synth", "generate a synthetic dataset");
  synth_cmd->add_option("--world", world_name,
                        "static | corridor | square | urban");
  synth_cmd->add_option("--seed", seed, "generation seed");
  synth_cmd->add_option("--out", out, "output directory")->required();
  synth_cmd->add_option("--config", config_path, "config file (synth.* keys)");
  synth_cmd->add_option("--set", overrides, "config override key=value");

  auto* eval_cmd = app.add_subcommand("eval", "trajectory ATE vs ground truth");
  eval_cmd->add_option("estimate", est_path, "estimated trajectory")
      ->required();
  eval_cmd->add_option("groundtruth", gt_path, "ground-truth trajectory")
      ->required();

  auto* dump_cmd = app.add_subcommand("bev-dump", "write BEV graymaps");
  dump_cmd->add_option("--dataset", dataset, "dataset directory")->required();
  dump_cmd->add_option("--out", out, "output directory")->required();
  dump_cmd->add_option("--config", config_path, "config file");
  dump_cmd->add_option("--every", every, "write every n-th scan");
  dump_cmd->add_option("--set", overrides, "config override key=value");

  auto* plot_cmd = app.add_subcommand("plot", "trajectory comparison SVG");
  plot_cmd->add_option("files", plot_files, "trajectory files")->required();
  plot_cmd->add_option("--out", out, "output SVG path")->required();

  auto* ref_cmd =
      app.add_subcommand("config-ref", "print the configuration reference");

  CLI11_PARSE(app, argc, argv);

  try {
    if (run_cmd->parsed()) {
      return cmd_run(config_path, dataset, mode, seed, out, overrides);
    }
    if (synth_cmd->parsed()) {
      return cmd_synth(world_name, seed, out, config_path, overrides);
    }
    if (eval_cmd->parsed()) return cmd_eval(est_path, gt_path);
    if (dump_cmd->parsed()) {
      return cmd_bev_dump(dataset, out, config_path, overrides, every);
    }
    if (plot_cmd->parsed()) return cmd_plot(plot_files, out);
    if (ref_cmd->parsed()) {
      std::cout << config_reference();
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
