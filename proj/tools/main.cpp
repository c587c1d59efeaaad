// Command-line front end: simulate fleets, run the joint discovery +
// prognosis pipeline, recompute metrics from emitted CSVs, and sweep the
// J-score trade-off coefficient.

#include "dpmm_rul/io.hpp"
#include "dpmm_rul/metrics.hpp"
#include "dpmm_rul/pipeline.hpp"

#include <CLI11.hpp>

#include <iostream>

namespace {

using namespace dpmm_rul;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitRuntime = 3;

struct ScenarioOptions {
  std::string scenario = "sim-stationary";
  std::string cmapss_dir;
  std::string mode_labels;
  int modes = 4;
  int train_per_mode = 120;
  int test_per_mode = 30;
  int inject_iteration = 8;
  std::uint64_t seed = 1;
};

struct LoadedScenario {
  Fleet train;
  Fleet test;
  std::vector<StreamBatch> stream;
};

LoadedScenario load_scenario(const ScenarioOptions& opt, PipelineConfig& cfg) {
  LoadedScenario out;
  if (opt.scenario == "cmapss") {
    const std::filesystem::path dir(opt.cmapss_dir);
    const CmapssData data =
        load_cmapss(dir / "train_FD003.txt", dir / "test_FD003.txt",
                    dir / "RUL_FD003.txt",
                    opt.mode_labels.empty() ? std::filesystem::path{}
                                            : std::filesystem::path(opt.mode_labels));
    out.train = data.train;
    out.test = data.test;
    cfg.test_protocol = TestProtocol::LastWindow;
    return out;
  }
  cfg.test_protocol = TestProtocol::AllWindows;
  if (opt.scenario == "sim-stationary") {
    FleetConfig fc = default_fleet_config(opt.modes, opt.train_per_mode, opt.seed);
    out.train = generate_fleet(fc);
    fc.systems_per_mode = opt.test_per_mode;
    fc.seed = child_seed(opt.seed, 0x7465737453ULL);
    fc.id_prefix = "test-";
    out.test = generate_fleet(fc);
    return out;
  }
  if (opt.scenario == "sim-nonstationary") {
    const int base_modes = std::max(1, opt.modes - 1);
    FleetConfig fc = default_fleet_config(opt.modes, opt.train_per_mode, opt.seed);
    fc.emergence_schedule.emplace_back(opt.inject_iteration,
                                       fc.modes[static_cast<std::size_t>(base_modes)].name);
    out.train = generate_fleet(fc);
    out.stream = generate_emergent_batches(fc);
    fc.emergence_schedule.clear();
    fc.systems_per_mode = opt.test_per_mode;
    fc.seed = child_seed(opt.seed, 0x7465737453ULL);
    fc.id_prefix = "test-";
    out.test = generate_fleet(fc);
    return out;
  }
  throw CLI::ValidationError("unknown scenario '" + opt.scenario + "'");
}

void add_scenario_flags(CLI::App* cmd, ScenarioOptions& opt) {
  cmd->add_option("--scenario", opt.scenario,
                  "sim-stationary | sim-nonstationary | cmapss")
      ->check(CLI::IsMember({"sim-stationary", "sim-nonstationary", "cmapss"}));
  cmd->add_option("--modes", opt.modes, "number of simulated failure modes (1-4)");
  cmd->add_option("--train-per-mode", opt.train_per_mode);
  cmd->add_option("--test-per-mode", opt.test_per_mode);
  cmd->add_option("--inject-iteration", opt.inject_iteration,
                  "iteration after which the emergent mode arrives");
  cmd->add_option("--cmapss-dir", opt.cmapss_dir, "directory with FD003 files");
  cmd->add_option("--mode-labels", opt.mode_labels,
                  "optional 'unit label' file for C-MAPSS NMI");
  cmd->add_option("--seed", opt.seed);
}

void add_pipeline_flags(CLI::App* cmd, PipelineConfig& cfg, std::string& align,
                        std::string& score) {
  cmd->add_option("--align", align, "truncate-pad | temporal-warp")
      ->check(CLI::IsMember({"truncate-pad", "temporal-warp"}));
  cmd->add_option("--score", score, "j-score | elbo | rul-loss")
      ->check(CLI::IsMember({"j-score", "elbo", "rul-loss"}));
  cmd->add_option("--omega", cfg.omega);
  cmd->add_option("--max-iters", cfg.max_iters);
  cmd->add_option("--patience", cfg.convergence_patience);
  cmd->add_option("--cavi-sweeps", cfg.cavi_sweeps_per_iter);
  cmd->add_option("--window", cfg.window_len);
  cmd->add_option("--alpha", cfg.alpha);
  cmd->add_option("--pretrain-epochs", cfg.pretrain_epochs);
  cmd->add_option("--epochs-per-iter", cfg.epochs_per_iter);
  cmd->add_option("--learn-rate", cfg.learn_rate);
  cmd->add_option("--batch", cfg.batch_size);
  cmd->add_option("--rul-cap", cfg.rul_cap, "cap training labels when > 0");
  cmd->add_option("--truncation-cap", cfg.birth.truncation_cap);
  cmd->add_option("--threads", cfg.max_threads);
  cmd->add_flag("--normalize-obs", cfg.normalize_observations,
                "z-score aligned observations before clustering");
}

void apply_tags(PipelineConfig& cfg, const std::string& align, const std::string& score,
                std::uint64_t seed) {
  cfg.alignment =
      align == "temporal-warp" ? Alignment::TemporalWarp : Alignment::TruncatePad;
  if (score == "elbo") cfg.score = ScoreVariant::Elbo;
  else if (score == "rul-loss") cfg.score = ScoreVariant::RulLoss;
  else cfg.score = ScoreVariant::JScore;
  cfg.seed = seed;
}

int cmd_simulate(const std::string& config_path, const ScenarioOptions& opt,
                 const std::string& out_dir) {
  FleetConfig fc = config_path.empty()
                       ? default_fleet_config(opt.modes, opt.train_per_mode, opt.seed)
                       : parse_fleet_config(config_path);
  if (config_path.empty()) fc.seed = opt.seed;
  const Fleet fleet = generate_fleet(fc);
  export_fleet(fleet, out_dir);
  std::cout << "wrote " << fleet.size() << " systems to " << out_dir << "\n";
  return kExitOk;
}

int cmd_run(const ScenarioOptions& opt, PipelineConfig cfg) {
  const LoadedScenario data = load_scenario(opt, cfg);
  RunReport report = run_pipeline(cfg, data.train, data.test, data.stream);
  std::cout << "iterations " << report.records.size() << ", final modes "
            << report.final_mode_count << (report.converged ? " (converged)" : "")
            << "\n";
  if (!report.records.empty()) {
    const auto& last = report.records.back();
    std::cout << "silhouette " << format_double(last.silhouette) << ", test RMSE "
              << format_double(last.test_rmse);
    if (last.nmi >= 0.0) std::cout << ", NMI " << format_double(last.nmi);
    std::cout << "\n";
  }
  return kExitOk;
}

int cmd_evaluate(const std::string& pred_path, const std::string& assign_path,
                 const std::string& manifest_path) {
  const PredictionRows rows = read_predictions_csv(pred_path);
  std::cout << "rmse " << format_double(rmse(rows.pred, rows.truth)) << "\n";

  if (!assign_path.empty() && !manifest_path.empty()) {
    // manifest supplies true modes; assignments supply inferred ones
    std::ifstream m = detail::open_in(manifest_path);
    std::map<std::string, std::string> truth;
    std::string line;
    std::getline(m, line);
    while (std::getline(m, line)) {
      std::istringstream ss(line);
      std::string id, ft, mode;
      std::getline(ss, id, ',');
      std::getline(ss, ft, ',');
      std::getline(ss, mode);
      truth[id] = mode;
    }
    std::ifstream a = detail::open_in(assign_path);
    std::vector<int> zt, zp;
    std::map<std::string, int> names;
    std::getline(a, line);
    while (std::getline(a, line)) {
      std::istringstream ss(line);
      std::string id, mode;
      std::getline(ss, id, ',');
      std::getline(ss, mode, ',');
      const auto it = truth.find(id);
      if (it == truth.end()) continue;
      zt.push_back(names.emplace(it->second, static_cast<int>(names.size())).first->second);
      zp.push_back(std::stoi(mode));
    }
    if (!zt.empty()) std::cout << "nmi " << format_double(nmi(zt, zp)) << "\n";
  }
  return kExitOk;
}

int cmd_sweep_omega(const ScenarioOptions& opt, PipelineConfig cfg,
                    const std::vector<double>& grid, int folds,
                    const std::string& out_path) {
  LoadedScenario data = load_scenario(opt, cfg);
  // K-fold over training systems; held-out fold plays the test role
  std::vector<std::size_t> order(data.train.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(child_seed(cfg.seed, 0x73776fULL));
  std::shuffle(order.begin(), order.end(), rng.engine());

  std::vector<std::pair<double, double>> results;
  for (double omega : grid) {
    double acc = 0.0;
    for (int f = 0; f < folds; ++f) {
      Fleet fold_train, fold_val;
      for (std::size_t i = 0; i < order.size(); ++i) {
        if (static_cast<int>(i % static_cast<std::size_t>(folds)) == f)
          fold_val.push_back(data.train[order[i]]);
        else
          fold_train.push_back(data.train[order[i]]);
      }
      PipelineConfig fold_cfg = cfg;
      fold_cfg.omega = omega;
      fold_cfg.out_dir.clear();
      fold_cfg.seed = child_seed(cfg.seed, static_cast<std::uint64_t>(f));
      const RunReport rep = run_pipeline(fold_cfg, fold_train, fold_val, {});
      acc += rep.records.empty() ? 0.0 : rep.records.back().test_rmse;
    }
    results.emplace_back(omega, acc / folds);
    std::cout << "omega " << format_double(omega) << " mean-rmse "
              << format_double(acc / folds) << "\n";
  }
  if (!out_path.empty()) {
    detail::atomic_write(out_path, [&](std::ofstream& out) {
      out << "omega,mean_rmse\n";
      for (const auto& [w, r] : results)
        out << format_double(w) << ',' << format_double(r) << '\n';
    });
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Joint failure-mode discovery and RUL prognosis"};
  app.require_subcommand(1);

  ScenarioOptions opt;
  PipelineConfig cfg;
  std::string align = "truncate-pad", score = "j-score";
  std::string config_path, out_dir = "out", pred_path, assign_path, manifest_path;
  std::string sweep_out;
  std::vector<double> grid = {1e-4, 1e-3, 1e-2, 1e-1};
  int folds = 5;

  auto* sim = app.add_subcommand("simulate", "generate a synthetic fleet as CSV files");
  sim->add_option("--config", config_path, "plain-text key/value fleet config");
  sim->add_option("--out", out_dir)->required();
  add_scenario_flags(sim, opt);

  auto* run = app.add_subcommand("run", "run the full pipeline");
  add_scenario_flags(run, opt);
  add_pipeline_flags(run, cfg, align, score);
  run->add_option("--out", out_dir)->required();

  auto* eval = app.add_subcommand("evaluate", "recompute metrics from emitted CSVs");
  eval->add_option("--pred", pred_path)->required();
  eval->add_option("--assign", assign_path);
  eval->add_option("--manifest", manifest_path);

  auto* sweep = app.add_subcommand("sweep-omega", "K-fold cross-validation over omega");
  add_scenario_flags(sweep, opt);
  add_pipeline_flags(sweep, cfg, align, score);
  sweep->add_option("--grid", grid, "omega grid");
  sweep->add_option("--folds", folds);
  sweep->add_option("--out", sweep_out);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    apply_tags(cfg, align, score, opt.seed);
    cfg.out_dir = out_dir;
    if (sim->parsed()) return cmd_simulate(config_path, opt, out_dir);
    if (run->parsed()) return cmd_run(opt, cfg);
    if (eval->parsed()) return cmd_evaluate(pred_path, assign_path, manifest_path);
    if (sweep->parsed()) {
      cfg.out_dir.clear();
      return cmd_sweep_omega(opt, cfg, grid, folds, sweep_out);
    }
  } catch (const dpmm_rul::data_error& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}
