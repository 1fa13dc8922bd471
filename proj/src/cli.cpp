#include "repdib/cli.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>
#include <thread>

#include <CLI11.hpp>

#include "repdib/config.hpp"
#include "repdib/metrics.hpp"
#include "repdib/svg.hpp"
#include "repdib/trainer.hpp"

namespace repdib::cli {

namespace fs = std::filesystem;

namespace {

struct CommonArgs {
  std::string config_path;
  std::vector<std::string> sets;
  std::int64_t seed = -1;
  std::string out_dir;
  bool force = false;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_path, "Config JSON file");
  cmd->add_option("--set", args.sets, "Override as key=value (repeatable)");
  cmd->add_option("--seed", args.seed, "Seed override");
  cmd->add_option("--out", args.out_dir,
                  "Output directory (default $REPDIB_OUT or ./runs)");
  cmd->add_flag("--force", args.force, "Wipe and redo the run directory");
}

RunConfig resolve_config(const CommonArgs& args) {
  RunConfig cfg;
  if (!args.config_path.empty()) cfg = RunConfig::load(args.config_path);
  for (const auto& kv : args.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos)
      throw ContractError("override '" + kv + "' is not key=value");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (args.seed >= 0) cfg.seed = static_cast<std::uint64_t>(args.seed);
  cfg.validate();
  return cfg;
}

std::string resolve_out(const CommonArgs& args) {
  if (!args.out_dir.empty()) return args.out_dir;
  if (const char* env = std::getenv("REPDIB_OUT"); env && *env) return env;
  return "runs";
}

// Prepares the run directory: wipes it under --force, verifies an existing
// effective config matches, and writes the config back verbatim.
std::string prepare_run_dir(const RunConfig& cfg, const CommonArgs& args) {
  const std::string dir = resolve_out(args) + "/" + cfg.run_name();
  if (args.force && fs::exists(dir)) fs::remove_all(dir);
  fs::create_directories(dir);
  const std::string cfg_path = dir + "/config.json";
  if (fs::exists(cfg_path)) {
    RunConfig existing = RunConfig::load(cfg_path);
    if (!(existing == cfg))
      throw ContractError("run directory " + dir +
                          " holds a different config; use --force to redo");
  } else {
    cfg.save(cfg_path);
  }
  return dir;
}

int checkpoint_stage(const std::string& dir) {
  const std::string path = dir + "/checkpoint.bin";
  if (!fs::exists(path)) return -1;
  CheckpointReader reader(path);
  const auto& meta = reader.get("meta").data;
  std::size_t pos = 0;
  pull_u64(meta, pos);  // frame
  return static_cast<int>(pull_u64(meta, pos));
}

void require_checkpoint(const std::string& dir, int min_stage,
                        const char* command, const char* prior) {
  const std::string path = dir + "/checkpoint.bin";
  if (!fs::exists(path))
    throw ContractError(std::string(command) + ": missing checkpoint " + path +
                        "; run " + prior + " first");
  if (checkpoint_stage(dir) < min_stage)
    throw ContractError(std::string(command) + ": checkpoint " + path +
                        " has not completed " + prior);
}

// target_stage: 1..3 for stage commands and run-all.
int run_stages(const CommonArgs& args, int target_stage, const char* command) {
  RunConfig cfg = resolve_config(args);
  const std::string dir = prepare_run_dir(cfg, args);

  if (checkpoint_stage(dir) >= target_stage) {
    std::cout << command << ": " << dir << " already complete\n";
    return 0;
  }
  if (target_stage >= 2)
    require_checkpoint(dir, target_stage - 1, command,
                       target_stage == 2 ? "pretrain-bottleneck"
                                         : "pretrain-encoder");

  Trainer<float> trainer(cfg, dir);
  if (fs::exists(dir + "/checkpoint.bin"))
    trainer.load_checkpoint(dir + "/checkpoint.bin");
  if (target_stage >= 1) trainer.stage1();
  if (target_stage >= 2) trainer.stage2();
  if (target_stage >= 3) trainer.stage3();
  std::cout << command << ": wrote artifacts to " << dir << "\n";
  return 0;
}

int run_all_cmd(const CommonArgs& args) {
  RunConfig cfg = resolve_config(args);
  const std::string dir = prepare_run_dir(cfg, args);
  if (checkpoint_stage(dir) >= 3) {
    std::cout << "run-all: " << dir << " already complete\n";
    return 0;
  }
  Trainer<float> trainer(cfg, dir);
  if (fs::exists(dir + "/checkpoint.bin"))
    trainer.load_checkpoint(dir + "/checkpoint.bin");
  trainer.run_all();
  std::cout << "run-all: wrote artifacts to " << dir << "\n";
  return 0;
}

int eval_cmd(const CommonArgs& args) {
  RunConfig cfg = resolve_config(args);
  const std::string dir = resolve_out(args) + "/" + cfg.run_name();
  require_checkpoint(dir, 1, "eval", "a training stage");
  Trainer<float> trainer(cfg, dir);
  trainer.load_checkpoint(dir + "/checkpoint.bin");
  auto episodes = trainer.evaluate("manual");
  double mean = 0;
  for (const auto& e : episodes) mean += e.ret;
  mean /= static_cast<double>(episodes.size());
  std::cout << "eval: mean return " << format_g(mean) << " over "
            << episodes.size() << " episodes\n";
  return 0;
}

int export_embeddings_cmd(const CommonArgs& args, bool prequant) {
  RunConfig cfg = resolve_config(args);
  const std::string dir = resolve_out(args) + "/" + cfg.run_name();
  require_checkpoint(dir, 1, "export-embeddings", "a training stage");
  Trainer<float> trainer(cfg, dir);
  trainer.load_checkpoint(dir + "/checkpoint.bin");

  std::vector<EmbeddingRow> rows;
  for (int r = 0; r < MazeLayout::kSize; ++r)
    for (int c = 0; c < MazeLayout::kSize; ++c) {
      auto emb = trainer.embed_cell(r, c, prequant);
      rows.push_back({MazeLayout::cell_id(r, c), emb.codes, emb.z});
    }
  const std::string path = dir + "/embeddings.csv";
  std::ofstream os(path, std::ios::trunc);
  write_embeddings_csv(os, rows);
  std::cout << "export-embeddings: wrote " << path << "\n";
  return 0;
}

int distance_map_cmd(const CommonArgs& args, const std::string& anchor,
                     bool prequant) {
  RunConfig cfg = resolve_config(args);
  const std::string dir = resolve_out(args) + "/" + cfg.run_name();
  require_checkpoint(dir, 1, "distance-map", "a training stage");
  Trainer<float> trainer(cfg, dir);
  trainer.load_checkpoint(dir + "/checkpoint.bin");

  int ar = MazeEnv::kCenterRow, ac = MazeEnv::kCenterCol;
  if (!anchor.empty()) {
    if (std::sscanf(anchor.c_str(), "%d,%d", &ar, &ac) != 2 ||
        !MazeLayout::in_bounds(ar, ac))
      throw ContractError("distance-map: anchor must be row,col within the maze");
  }
  auto map = distance_map(
      [&](int r, int c) { return trainer.embed_cell(r, c, prequant).z; }, ar,
      ac);
  const std::string path = dir + "/distance_map.csv";
  std::ofstream os(path, std::ios::trunc);
  write_distance_map_csv(os, map);
  std::cout << "distance-map: wrote " << path << "\n";
  return 0;
}

int plot_cmd(const std::string& csv, const std::string& out,
             const std::string& kind, const std::string& x,
             const std::string& ys, const std::string& title) {
  if (kind == "heatmap") {
    std::ifstream is(csv);
    if (!is) throw ContractError("plot: cannot open " + csv);
    Tensor<double> m = read_distance_map_csv(is);
    std::ofstream os(out, std::ios::trunc);
    os << svg_heatmap(m, title.empty() ? csv : title);
  } else {
    std::vector<double> xs = csv_column_file(csv, x);
    std::vector<Series> series;
    std::istringstream names(ys);
    std::string name;
    while (std::getline(names, name, ',')) {
      Series s;
      s.label = name;
      s.x = xs;
      s.y = csv_column_file(csv, name);
      series.push_back(std::move(s));
    }
    if (series.empty()) throw ContractError("plot: no y columns given");
    std::ofstream os(out, std::ios::trunc);
    os << svg_line_chart(series, title.empty() ? csv : title, x, ys);
  }
  std::cout << "plot: wrote " << out << "\n";
  return 0;
}

struct AblateRun {
  RunConfig cfg;
  std::string combo;
  std::string dir;
  double final_return = 0.0;
  double coverage = 0.0;
};

// Mean return over the final greedy evaluation episodes of one run.
double final_return_of(const std::string& dir) {
  std::ifstream is(dir + "/eval.csv");
  if (!is) throw ContractError("ablate: missing " + dir + "/eval.csv");
  std::string header;
  std::getline(is, header);
  std::string line;
  double sum = 0;
  int n = 0;
  while (std::getline(is, line)) {
    if (line.find(",final,") == std::string::npos) continue;
    // frame,phase,episode,start_row,start_col,return,steps,reached
    std::istringstream ss(line);
    std::string field;
    for (int i = 0; i < 6 && std::getline(ss, field, ','); ++i) {
    }
    sum += std::stod(field);
    ++n;
  }
  if (n == 0) throw ContractError("ablate: no final evaluation rows in " + dir);
  return sum / n;
}

double pretrain_coverage_of(const std::string& dir) {
  std::ifstream is(dir + "/coverage.csv");
  if (!is) throw ContractError("ablate: missing " + dir + "/coverage.csv");
  std::string header, line;
  std::getline(is, header);
  double frac = 0.0;
  while (std::getline(is, line)) {
    std::istringstream ss(line);
    std::string stage, frame, visited, fraction;
    std::getline(ss, stage, ',');
    std::getline(ss, frame, ',');
    std::getline(ss, visited, ',');
    std::getline(ss, fraction, ',');
    if (stage == "2") frac = std::stod(fraction);
  }
  return frac;
}

int ablate_cmd(const CommonArgs& args, const std::vector<std::string>& axes,
               const std::string& seeds_arg, int jobs, bool allow_large) {
  RunConfig base = resolve_config(args);

  // cartesian product over the axis values
  std::vector<std::pair<std::string, std::vector<std::string>>> parsed;
  for (const auto& axis : axes) {
    const auto eq = axis.find('=');
    if (eq == std::string::npos)
      throw ContractError("ablate: axis '" + axis + "' is not key=v1,v2,...");
    std::vector<std::string> values;
    std::istringstream ss(axis.substr(eq + 1));
    std::string v;
    while (std::getline(ss, v, ',')) values.push_back(v);
    if (values.empty())
      throw ContractError("ablate: axis '" + axis + "' lists no values");
    parsed.emplace_back(axis.substr(0, eq), values);
  }
  if (parsed.empty()) throw ContractError("ablate: no axes given");

  std::vector<std::uint64_t> seeds;
  {
    std::istringstream ss(seeds_arg);
    std::string v;
    while (std::getline(ss, v, ',')) seeds.push_back(std::stoull(v));
    if (seeds.empty()) seeds.push_back(base.seed);
  }

  std::vector<std::vector<std::string>> combos{{}};
  for (const auto& [key, values] : parsed) {
    std::vector<std::vector<std::string>> next;
    for (const auto& combo : combos)
      for (const auto& v : values) {
        auto c = combo;
        c.push_back(key + "=" + v);
        next.push_back(std::move(c));
      }
    combos = std::move(next);
  }

  const std::size_t total_runs = combos.size() * seeds.size();
  if (total_runs > 64 && !allow_large)
    throw ContractError("ablate: " + std::to_string(total_runs) +
                        " runs exceed the safety limit of 64; pass "
                        "--allow-large to proceed");

  std::vector<AblateRun> runs;
  for (const auto& combo : combos)
    for (auto seed : seeds) {
      AblateRun run;
      run.cfg = base;
      for (const auto& kv : combo) {
        const auto eq = kv.find('=');
        run.cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
      }
      run.cfg.seed = seed;
      run.cfg.validate();
      std::string combo_name;
      for (const auto& kv : combo)
        combo_name += (combo_name.empty() ? "" : " ") + kv;
      run.combo = combo_name;
      runs.push_back(std::move(run));
    }

  const std::string out = resolve_out(args);
  std::atomic<std::size_t> cursor{0};
  std::vector<std::string> errors(runs.size());
  auto worker = [&] {
    while (true) {
      const std::size_t i = cursor.fetch_add(1);
      if (i >= runs.size()) return;
      AblateRun& run = runs[i];
      try {
        run.dir = out + "/" + run.cfg.run_name();
        if (args.force && fs::exists(run.dir)) fs::remove_all(run.dir);
        fs::create_directories(run.dir);
        const std::string cfg_path = run.dir + "/config.json";
        if (!fs::exists(cfg_path)) run.cfg.save(cfg_path);
        if (checkpoint_stage(run.dir) < 3) {
          Trainer<float> trainer(run.cfg, run.dir);
          if (fs::exists(run.dir + "/checkpoint.bin"))
            trainer.load_checkpoint(run.dir + "/checkpoint.bin");
          trainer.run_all();
        }
        run.final_return = final_return_of(run.dir);
        run.coverage = pretrain_coverage_of(run.dir);
      } catch (const std::exception& e) {
        errors[i] = e.what();
      }
    }
  };
  std::vector<std::thread> pool;
  for (int j = 0; j < std::max(1, jobs); ++j) pool.emplace_back(worker);
  for (auto& th : pool) th.join();
  for (const auto& err : errors)
    if (!err.empty()) throw ContractError("ablate: run failed: " + err);

  // one summary row per combo, seeds averaged
  fs::create_directories(out);
  const std::string summary_path = out + "/ablate_summary.csv";
  std::ofstream os(summary_path, std::ios::trunc);
  os << "combo,seeds,mean_final_return,std_final_return,mean_coverage\n";
  for (std::size_t c = 0; c < combos.size(); ++c) {
    std::vector<double> rets, covs;
    for (std::size_t s = 0; s < seeds.size(); ++s) {
      const auto& run = runs[c * seeds.size() + s];
      rets.push_back(run.final_return);
      covs.push_back(run.coverage);
    }
    const double mean =
        std::accumulate(rets.begin(), rets.end(), 0.0) / rets.size();
    double var = 0;
    for (double r : rets) var += (r - mean) * (r - mean);
    var /= rets.size();
    const double cov =
        std::accumulate(covs.begin(), covs.end(), 0.0) / covs.size();
    os << '"' << runs[c * seeds.size()].combo << '"' << "," << seeds.size()
       << "," << format_g(mean) << "," << format_g(std::sqrt(var)) << ","
       << format_g(cov) << "\n";
  }
  std::cout << "ablate: wrote " << summary_path << "\n";
  return 0;
}

}  // namespace

int run(const std::vector<std::string>& args) {
  std::vector<const char*> argv;
  argv.push_back("repdib");
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data());
}

int run(int argc, const char* const* argv) {
  CLI::App app{"RepDIB maze laboratory: discrete + variational information "
               "bottlenecks over self-supervised RL"};
  app.require_subcommand(1);

  CommonArgs common;
  std::string anchor, plot_csv, plot_out, plot_kind = "line", plot_x = "step";
  std::string plot_y = "loss_total", plot_title;
  std::vector<std::string> axes;
  std::string seeds_arg;
  int jobs = 1;
  bool allow_large = false, prequant = false;

  auto* c1 = app.add_subcommand("pretrain-bottleneck",
                                "Stage 1: train VQ and VIB modules");
  auto* c2 = app.add_subcommand("pretrain-encoder",
                                "Stage 2: reward-free representation learning");
  auto* c3 = app.add_subcommand("finetune", "Stage 3: task DQN on external reward");
  auto* call = app.add_subcommand("run-all", "All three stages in sequence");
  auto* ceval = app.add_subcommand("eval", "Greedy evaluation of a checkpoint");
  auto* cexp = app.add_subcommand("export-embeddings",
                                  "Embed all maze cells to CSV");
  auto* cdist = app.add_subcommand("distance-map",
                                   "Embedding distances to an anchor cell");
  auto* cplot = app.add_subcommand("plot", "Render a CSV as a static SVG");
  auto* cabl = app.add_subcommand("ablate", "Cartesian sweep over config axes");

  for (auto* cmd : {c1, c2, c3, call, ceval, cexp, cdist, cabl})
    add_common(cmd, common);
  cexp->add_flag("--prequant", prequant, "Export pre-quantization embeddings");
  cdist->add_flag("--prequant", prequant,
                  "Distances on pre-quantization embeddings");
  cdist->add_option("--anchor", anchor, "Anchor cell as row,col (default center)");
  cplot->add_option("--csv", plot_csv, "Input CSV")->required();
  cplot->add_option("--svg", plot_out, "Output SVG path")->required();
  cplot->add_option("--kind", plot_kind, "line or heatmap");
  cplot->add_option("--x", plot_x, "X column (line charts)");
  cplot->add_option("--y", plot_y, "Comma-separated Y columns (line charts)");
  cplot->add_option("--title", plot_title, "Chart title");
  cabl->add_option("axes", axes, "Axes as key=v1,v2,... (repeatable)");
  cabl->add_option("--seeds", seeds_arg, "Comma-separated seeds to average");
  cabl->add_option("--jobs", jobs, "Parallel runs");
  cabl->add_flag("--allow-large", allow_large, "Allow more than 64 runs");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (c1->parsed()) return run_stages(common, 1, "pretrain-bottleneck");
    if (c2->parsed()) return run_stages(common, 2, "pretrain-encoder");
    if (c3->parsed()) return run_stages(common, 3, "finetune");
    if (call->parsed()) return run_all_cmd(common);
    if (ceval->parsed()) return eval_cmd(common);
    if (cexp->parsed()) return export_embeddings_cmd(common, prequant);
    if (cdist->parsed()) return distance_map_cmd(common, anchor, prequant);
    if (cplot->parsed())
      return plot_cmd(plot_csv, plot_out, plot_kind, plot_x, plot_y, plot_title);
    if (cabl->parsed())
      return ablate_cmd(common, axes, seeds_arg, jobs, allow_large);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}

}  // namespace repdib::cli
