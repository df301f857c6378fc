// fbsde command-line runner.
//
//   fbsde simulate --config run.cfg --seed 7
//   fbsde estimate --config run.cfg --estimator pi_innovation --particles 5000
//   fbsde variance | control | sweep ...
//
// Every random stream derives from --seed; FBSDE_LOG (quiet | info | debug) only changes stderr.

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "fbsde/fbsde.hpp"

namespace fs = std::filesystem;
using namespace fbsde;

namespace {

enum class LogLevel { Quiet, Info, Debug };

LogLevel log_level() {
  static const LogLevel level = [] {
    const char* env = std::getenv("FBSDE_LOG");
    const std::string v = env ? env : "info";
    if (v == "quiet" || v == "0" || v == "off") return LogLevel::Quiet;
    if (v == "debug" || v == "2") return LogLevel::Debug;
    return LogLevel::Info;
  }();
  return level;
}

void log_info(const std::string& msg) {
  if (log_level() != LogLevel::Quiet) std::cerr << "fbsde: " << msg << '\n';
}

void log_debug(const std::string& msg) {
  if (log_level() == LogLevel::Debug) std::cerr << "fbsde[debug]: " << msg << '\n';
}

std::string utc_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

// Seed layout: every consumer gets its own derived stream.
namespace seeds {
constexpr std::uint64_t kObservation = 0;
constexpr std::uint64_t kEnsemble = 1;
constexpr std::uint64_t kFilter = 2;
constexpr std::uint64_t kRuns = 3;
}  // namespace seeds

struct Options {
  std::string config_path;
  std::uint64_t seed = 0;
  std::optional<std::size_t> particles;
  std::optional<std::string> out;
  std::optional<std::string> estimator;
  std::optional<std::string> mode;
};

class Run {
 public:
  Run(std::string subcommand, const Options& opt)
      : subcommand_(std::move(subcommand)), opt_(opt), started_(utc_now()) {
    doc_ = ConfigDocument::load(opt.config_path);
    require(doc_.has_section("model"), ErrorCode::ConfigParse, opt.config_path + ": missing [model] section");
    require(doc_.has_section("grid"), ErrorCode::ConfigParse, opt.config_path + ": missing [grid] section");
    model_ = build_model(doc_);
    grid_ = build_grid(doc_);
    est_ = build_estimator_config(doc_);
    ctl_ = build_control_config(doc_);
    out_cfg_ = build_output_config(doc_);
    if (opt.particles) est_.particles = *opt.particles;
    if (opt.estimator) est_.id = *opt.estimator;
    if (opt.mode) ctl_.mode = *opt.mode;
    require(est_.particles > 0, ErrorCode::InvalidArgument, "--particles must be positive");
    dir_ = opt.out ? fs::path(*opt.out) : fs::path(out_cfg_.dir);
    fs::create_directories(dir_);
    log_debug("config hash " + hex64(config_hash(doc_)) + ", output dir " + dir_.string());
  }

  [[nodiscard]] bool is_lg() const { return std::holds_alternative<LinearGaussianModelSpec>(model_); }
  [[nodiscard]] const LinearGaussianModelSpec& lg() const { return std::get<LinearGaussianModelSpec>(model_); }
  [[nodiscard]] ScalarModelSpec scalar() const { return as_scalar(model_); }
  [[nodiscard]] const TimeGrid& time() const { return grid_.time; }
  [[nodiscard]] std::uint64_t seed(std::uint64_t role) const { return derive_seed(opt_.seed, role); }
  [[nodiscard]] const EstimatorConfig& est() const { return est_; }
  [[nodiscard]] const ControlConfig& ctl() const { return ctl_; }
  [[nodiscard]] bool dump_ensembles() const { return out_cfg_.dump_ensembles; }

  // Space grid from [grid], or prior mean +- (6 sd + 4) with 801 nodes.
  [[nodiscard]] SpaceGrid space(const ScalarModelSpec& m) const {
    if (grid_.space) return *grid_.space;
    const double half = 6.0 * std::sqrt(m.prior.variance()) + 4.0;
    const SpaceGrid g(m.prior.mean() - half, m.prior.mean() + half, 801);
    log_debug("no space grid configured, using [" + std::to_string(g.x_min()) + ", " + std::to_string(g.x_max()) +
              "] with 801 nodes");
    return g;
  }

  [[nodiscard]] ObservationRecord observations() const {
    if (est_.obs_file.empty()) return simulate_truth_and_obs(scalar(), time(), seed(seeds::kObservation));
    const std::string& path = est_.obs_file;
    ObservationRecord obs = fs::path(path).extension() == ".csv" ? read_observation_csv(path)
                                                                  : load_observation_record(path);
    require(obs.grid == time(), ErrorCode::GridMismatch, "observation file '" + path + "' does not match [grid]");
    log_info("loaded observations from " + path);
    return obs;
  }

  template <typename Writer>
  void write(const std::string& name, Writer&& writer) {
    const fs::path path = dir_ / name;
    std::ofstream os(path, std::ios::binary);
    require(static_cast<bool>(os), ErrorCode::Io, "cannot write '" + path.string() + "'");
    writer(os);
    os.flush();
    require(static_cast<bool>(os), ErrorCode::Io, "write to '" + path.string() + "' failed");
    files_.push_back(name);
  }

  template <typename T>
  void dump(const std::string& name, const T& object) {
    dump_binary((dir_ / name).string(), object);
    files_.push_back(name);
  }

  void finish() {
    nlohmann::json manifest;
    manifest["subcommand"] = subcommand_;
    manifest["config"] = opt_.config_path;
    manifest["config_hash"] = hex64(config_hash(doc_));
    manifest["seed"] = opt_.seed;
    manifest["started"] = started_;
    manifest["finished"] = utc_now();
    manifest["files"] = files_;
    manifest["version"] = std::string(kVersion);
    std::ofstream os(dir_ / "manifest.json");
    os << manifest.dump(2) << '\n';
    require(static_cast<bool>(os), ErrorCode::Io, "cannot write manifest");
    log_info("wrote " + std::to_string(files_.size()) + " file(s) to " + dir_.string());
  }

 private:
  std::string subcommand_;
  Options opt_;
  std::string started_;
  ConfigDocument doc_;
  ModelSpec model_;
  GridConfig grid_;
  EstimatorConfig est_;
  ControlConfig ctl_;
  OutputConfig out_cfg_;
  fs::path dir_;
  std::vector<std::string> files_;
};

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

void cmd_simulate(Run& run) {
  const ObservationRecord obs = run.observations();
  run.write("obs.csv", [&](std::ostream& os) { write_csv(os, obs); });
  run.dump("obs.bin", obs);
  if (run.dump_ensembles()) {
    const ScalarModelSpec m = run.scalar();
    const std::size_t N = run.est().particles;
    const PathEnsemble g = simulate_girsanov_ensemble(m, run.time(), obs, N, run.seed(seeds::kEnsemble));
    const PathEnsemble p = simulate_innovation_ensemble(m, run.time(), obs, N, run.seed(seeds::kEnsemble));
    run.write("ensemble_girsanov.csv", [&](std::ostream& os) { write_csv(os, g); });
    run.write("ensemble_innovation.csv", [&](std::ostream& os) { write_csv(os, p); });
    run.dump("ensemble_girsanov.bin", g);
    run.dump("ensemble_innovation.bin", p);
  }
}

// ---------------------------------------------------------------------------
// estimate / sweep
// ---------------------------------------------------------------------------

EstimatorReport run_estimator(const Run& run, EstimatorId id, const ObservationRecord& obs, std::size_t N,
                              std::vector<PathEnsemble>* ensembles = nullptr) {
  const ScalarModelSpec m = run.scalar();
  const std::uint64_t ens_seed = run.seed(seeds::kEnsemble);
  switch (id) {
    case EstimatorId::SigmaObs: {
      const SpaceGrid space = run.space(m);
      const GridFunction y = solve_backward_kolmogorov(m, space, run.time());
      PathEnsemble ens = simulate_girsanov_ensemble(m, run.time(), obs, N, ens_seed);
      EstimatorReport rep = estimate_sigma_obs(m, obs, y, ens);
      if (ensembles) ensembles->push_back(std::move(ens));
      return rep;
    }
    case EstimatorId::PiInnovation: {
      const SpaceGrid space = run.space(m);
      const GridFunction y = solve_backward_kolmogorov(m, space, run.time());
      PiHSource source;
      if (run.est().pi_h_source == "kalman") {
        require(run.is_lg(), ErrorCode::ModeModelMismatch, "pi_h_source = kalman needs a linear-Gaussian model");
        const GaussianState st = kalman_bucy(run.lg(), obs);
        std::vector<double> ph(obs.grid.n_steps());
        for (std::size_t k = 0; k < ph.size(); ++k) ph[k] = (run.lg().H.transpose() * st.m[k])(0);
        source = PiHSource::external(std::move(ph));
      }
      InnovationOptions opts;
      opts.ess_floor = run.est().ess_floor;
      PathEnsemble ens = simulate_innovation_ensemble(m, run.time(), obs, N, ens_seed, source, opts);
      EstimatorReport rep = estimate_pi_innovation(m, y, ens);
      if (rep.weight_collapse_step)
        log_info("innovation weights collapsed (ESS below floor) at step " + std::to_string(*rep.weight_collapse_step));
      if (ensembles) ensembles->push_back(std::move(ens));
      return rep;
    }
    case EstimatorId::PiObs: {
      if (run.is_lg()) return estimate_pi_obs_lg(run.lg(), obs);
      const SpaceGrid space = run.space(m);
      PathEnsemble ens = simulate_girsanov_ensemble(m, run.time(), obs, N, ens_seed);
      EstimatorReport rep = estimate_pi_obs_fixed_point(m, obs, ensemble_pi_source(ens), space);
      rep.n_paths = N;
      if (ensembles) ensembles->push_back(std::move(ens));
      return rep;
    }
    case EstimatorId::SigmaObsError: {
      require(obs.has_truth(), ErrorCode::MissingTruthPath, "sigma_obs_error needs a synthetic truth path");
      const SpaceGrid space = run.space(m);
      const bool recorded = run.est().obs_error == "recorded";
      const GridFunction y = recorded ? solve_feynman_kac(m, space, run.time())
                                      : solve_observation_error_pde(m, space, run.time());
      PathEnsemble ens = simulate_girsanov_ensemble(m, run.time(), obs, N, ens_seed);
      EstimatorReport rep = estimate_sigma_obs_error(
          m, obs, y, ens, recorded ? ObservationErrorSource::Recorded : ObservationErrorSource::Simulated);
      if (ensembles) ensembles->push_back(std::move(ens));
      return rep;
    }
  }
  fail(ErrorCode::InvalidArgument, "unhandled estimator");
}

void cmd_estimate(Run& run) {
  const EstimatorId id = parse_estimator_id(run.est().id);
  const ObservationRecord obs = run.observations();
  std::vector<PathEnsemble> ensembles;
  const EstimatorReport rep = run_estimator(run, id, obs, run.est().particles, &ensembles);
  log_info(std::string(to_string(id)) + " estimate " + std::to_string(rep.point_estimate) + " (se " +
           std::to_string(rep.mc_std_err) + ")");
  run.write("estimate.csv", [&](std::ostream& os) {
    write_csv_header(os, rep);
    write_csv_row(os, rep);
  });
  run.write("control_path.csv", [&](std::ostream& os) {
    os << "t,u\n" << std::setprecision(17);
    for (std::size_t k = 0; k < rep.control_path.size(); ++k) os << obs.grid.time(k) << ',' << rep.control_path[k] << '\n';
  });
  if (run.is_lg() && run.lg().state_dim() == 1) {
    const GaussianState st = kalman_bucy(run.lg(), obs);
    run.write("kalman.csv", [&](std::ostream& os) { write_csv(os, st); });
  }
  if (run.dump_ensembles())
    for (const auto& ens : ensembles) run.dump("ensemble.bin", ens);
}

void cmd_sweep(Run& run) {
  const EstimatorId id = parse_estimator_id(run.est().id);
  std::vector<std::size_t> sizes = run.est().sweep_particles;
  if (sizes.empty()) sizes = {100, 1000, 10000};
  const ObservationRecord obs = run.observations();
  std::vector<EstimatorReport> rows;
  for (std::size_t N : sizes) {
    rows.push_back(run_estimator(run, id, obs, N));
    log_info("N = " + std::to_string(N) + ": estimate " + std::to_string(rows.back().point_estimate) + " (se " +
             std::to_string(rows.back().mc_std_err) + ")");
  }
  run.write("sweep.csv", [&](std::ostream& os) {
    write_csv_header(os, rows.front());
    for (const auto& r : rows) write_csv_row(os, r);
  });
}

// ---------------------------------------------------------------------------
// variance
// ---------------------------------------------------------------------------

void cmd_variance(Run& run) {
  const EstimatorId id = parse_estimator_id(run.est().id);
  require(id == EstimatorId::SigmaObs || id == EstimatorId::PiInnovation, ErrorCode::InvalidArgument,
          "variance supports sigma_obs and pi_innovation");
  const ScalarModelSpec m = run.scalar();
  const SpaceGrid space = run.space(m);
  const GridFunction y = solve_backward_kolmogorov(m, space, run.time());
  const ObservationRecord obs = run.observations();
  const std::size_t N = run.est().particles;
  const std::uint64_t s = run.seed(seeds::kEnsemble);
  const VarianceDecayReport rep =
      id == EstimatorId::SigmaObs
          ? variance_decay(m, y, simulate_girsanov_ensemble(m, run.time(), obs, N, s), DecayFlavor::Sigma)
          : variance_decay(m, y, simulate_innovation_ensemble(m, run.time(), obs, N, s), DecayFlavor::Pi);
  run.write("variance.csv", [&](std::ostream& os) { write_csv(os, rep); });
}

// ---------------------------------------------------------------------------
// control
// ---------------------------------------------------------------------------

Matrix terminal_hessian(const Run& run) {
  if (run.ctl().terminal_hessian) return *run.ctl().terminal_hessian;
  log_info("no terminal_hessian given, using the identity");
  return Matrix::Identity(run.lg().state_dim(), run.lg().state_dim());
}

// Scalar model whose terminal cost is the configured quadratic when a Hessian is given.
ScalarModelSpec control_model(const Run& run) {
  ScalarModelSpec m = run.scalar();
  if (run.ctl().terminal_hessian) {
    const Matrix& Q = *run.ctl().terminal_hessian;
    require(Q.size() == 1, ErrorCode::DimensionMismatch, "scalar control needs a 1x1 terminal_hessian");
    m.terminal = NamedFunction("quadratic", {{"q", Q(0, 0)}, {"center", run.ctl().terminal_center}});
  } else if (run.is_lg()) {
    m.terminal = NamedFunction("quadratic", {{"q", 1.0}, {"center", run.ctl().terminal_center}});
  }
  return m;
}

void write_runs(Run& run, const std::vector<ControlRunReport>& reports, std::optional<double> closed_form) {
  run.write("costs.csv", [&](std::ostream& os) {
    write_csv_header(os, reports.front());
    for (const auto& r : reports) write_csv_row(os, r);
  });
  std::vector<double> c;
  for (const auto& r : reports) c.push_back(r.realized_cost);
  const double n = static_cast<double>(c.size());
  const double mean = pairwise_sum(0, c.size(), [&](std::size_t i) { return c[i]; }) / n;
  const double ss = pairwise_sum(0, c.size(), [&](std::size_t i) { return (c[i] - mean) * (c[i] - mean); });
  const double se = c.size() > 1 ? std::sqrt(ss / (n - 1.0) / n) : 0.0;
  run.write("cost_summary.csv", [&](std::ostream& os) {
    os << "runs,mean_cost,std_err,closed_form\n" << std::setprecision(17);
    os << c.size() << ',' << mean << ',' << se << ',';
    if (closed_form) os << *closed_form;
    os << '\n';
  });
  log_info("mean realized cost " + std::to_string(mean) + " (se " + std::to_string(se) + ")");
}

void cmd_control(Run& run) {
  const std::string& mode = run.ctl().mode;
  const std::size_t runs = run.ctl().runs;
  if (mode == "hjb") {
    const ScalarModelSpec m = control_model(run);
    const SpaceGrid space = run.space(m);
    const HjbPolicyResult res = hjb_policy(m, space, run.time());
    run.write("policy.csv", [&](std::ostream& os) { write_grid_csv(os, space, run.time(), res.policy.a); });
    run.write("value.csv", [&](std::ostream& os) { write_csv(os, res.value); });
    return;
  }
  if (mode == "certainty_equivalence") {
    std::vector<ControlRunReport> reports;
    if (run.is_lg()) {
      const auto& lg = run.lg();
      const Matrix Qf = terminal_hessian(run);
      const ControlRiccati cr = lq_control_riccati(lg.A, lg.control_matrix(), Qf, run.time(), lg.sigma);
      const RiccatiSolution ric = riccati_filter(lg.A, lg.H, lg.sigma, lg.Sigma0, run.time());
      for (std::size_t r = 0; r < runs; ++r)
        reports.push_back(certainty_equivalence_run(lg, cr, Qf, ric, derive_seed(run.seed(seeds::kRuns), r)));
      write_runs(run, reports, lqg_expected_cost(lg, cr, ric));
    } else {
      const ScalarModelSpec m = control_model(run);
      const SpaceGrid space = run.space(m);
      const HjbPolicyResult res = hjb_policy(m, space, run.time());
      for (std::size_t r = 0; r < runs; ++r)
        reports.push_back(certainty_equivalence_run(m, res.policy, run.time(),
                                                    derive_seed(run.seed(seeds::kRuns), r), run.est().particles));
      write_runs(run, reports, std::nullopt);
    }
    return;
  }
  if (mode == "lqg_iteration") {
    require(run.is_lg(), ErrorCode::ModeModelMismatch, "lqg_iteration needs a linear-Gaussian model");
    const auto& lg = run.lg();
    const Matrix Qf = terminal_hessian(run);
    const LqgIterationResult res = lqg_alternating_iteration(lg, Qf, run.time());
    const ControlRiccati cr = lq_control_riccati(lg.A, lg.control_matrix(), Qf, run.time(), lg.sigma);
    double gain_error = 0.0;
    for (std::size_t k = 0; k < cr.K.size(); ++k)
      gain_error = std::max(gain_error, (res.K[k] - cr.K[k]).cwiseAbs().maxCoeff());
    run.write("lqg_trace.csv", [&](std::ostream& os) {
      os << "sweep,gain_change,expected_cost\n" << std::setprecision(17);
      for (std::size_t s = 0; s < res.sweeps; ++s)
        os << s + 1 << ',' << res.gain_change[s] << ',' << res.sweep_cost[s] << '\n';
    });
    run.write("lqg_summary.csv", [&](std::ostream& os) {
      os << "sweeps,final_gain_error,lqg_expected_cost\n" << std::setprecision(17);
      os << res.sweeps << ',' << gain_error << ',' << lqg_expected_cost(lg, cr, res.filter) << '\n';
    });
    log_info("converged in " + std::to_string(res.sweeps) + " sweeps, gain error " + std::to_string(gain_error));
    return;
  }
  if (mode == "separated_cost") {
    const ScalarModelSpec m = control_model(run);
    const SpaceGrid space = run.space(m);
    const HjbPolicyResult res = hjb_policy(m, space, run.time());
    const Policy policy = res.policy.as_policy();
    const RunningCost cost = [](std::size_t, double, double a) { return 0.5 * a * a; };
    const GridFunction y = solve_backward_with_source(m, policy, cost, space, run.time());
    std::vector<ControlRunReport> reports;
    for (std::size_t r = 0; r < runs; ++r) {
      const std::uint64_t s = derive_seed(run.seed(seeds::kRuns), r);
      const ObservationRecord obs = simulate_controlled_truth(m, policy, run.time(), s);
      reports.push_back(separated_cost_estimate(m, policy, cost, obs, y, run.est().particles, derive_seed(s, 1)));
    }
    write_runs(run, reports, std::nullopt);
    return;
  }
  fail(ErrorCode::InvalidArgument,
       "unknown control mode '" + mode + "' (hjb | certainty_equivalence | lqg_iteration | separated_cost)");
}

int exit_code(ErrorCode code) { return 10 + static_cast<int>(code); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Minimum-variance estimators and backward PDE tools for nonlinear filtering"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);

  Options opt;
  std::size_t particles = 0;
  std::string out, estimator, mode;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", opt.config_path, "config file")->required();
    sub->add_option("--seed", opt.seed, "master seed");
    sub->add_option("--particles", particles, "ensemble size")->check(CLI::PositiveNumber);
    sub->add_option("--out", out, "output directory");
    sub->add_option("--estimator", estimator, "sigma_obs | pi_innovation | pi_obs | sigma_obs_error");
    sub->add_option("--mode", mode, "control mode");
  };
  const std::vector<std::pair<std::string, std::string>> commands = {
      {"simulate", "simulate truth and observations"},
      {"estimate", "run one estimator on one observation record"},
      {"variance", "variance-decay diagnostics"},
      {"control", "control experiments"},
      {"sweep", "estimator over several ensemble sizes"},
  };
  for (const auto& [name, help] : commands) add_common(app.add_subcommand(name, help));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  auto* sub = app.get_subcommands().front();
  if (sub->count("--particles")) opt.particles = particles;
  if (sub->count("--out")) opt.out = out;
  if (sub->count("--estimator")) opt.estimator = estimator;
  if (sub->count("--mode")) opt.mode = mode;

  try {
    Run run(sub->get_name(), opt);
    const std::string& name = sub->get_name();
    if (name == "simulate") cmd_simulate(run);
    else if (name == "estimate") cmd_estimate(run);
    else if (name == "variance") cmd_variance(run);
    else if (name == "control") cmd_control(run);
    else if (name == "sweep") cmd_sweep(run);
    run.finish();
  } catch (const Error& e) {
    std::cerr << "fbsde: error: " << e.what() << '\n';
    return exit_code(e.code());
  } catch (const std::exception& e) {
    std::cerr << "fbsde: error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
