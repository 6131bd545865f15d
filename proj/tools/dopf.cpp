// dopf: centralized, sequential and co-simulated distributed AC OPF runs.
//
// Setting precedence, highest first: command-line flag, DOPF_* environment
// variable, module config file (--config), built-in default.

#include <zlib.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <Eigen/Core>
#include <fmt/format.h>

#include "dopf/aladin.hpp"
#include "dopf/cosim.hpp"
#include "dopf/io.hpp"
#include "dopf/opf.hpp"
#include "dopf/partition.hpp"
#include "dopf/version.hpp"

namespace fs = std::filesystem;
using namespace dopf;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailed = 1;
constexpr int kExitConfig = 2;

/// Raised for bad or missing settings; exit status 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Run failure with a classification for the error record; exit status 1.
class RunError : public std::runtime_error {
 public:
  RunError(std::string kind, const std::string& what, std::string module = "")
      : std::runtime_error(what), kind(std::move(kind)), module(std::move(module)) {}
  std::string kind;
  std::string module;
};

std::string crc_hex(std::string_view bytes) {
  uLong c = crc32(0L, Z_NULL, 0);
  c = crc32(c, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size()));
  return fmt::format("crc32:{:08x}", static_cast<std::uint32_t>(c));
}

// Settings ------------------------------------------------------------------

struct Setting {
  std::string flag;  // without dashes
  std::string env;
  std::string help;
  std::string value;
  CLI::Option* option = nullptr;
};

class Settings {
 public:
  void declare(CLI::App& app, const std::string& flag, const std::string& help) {
    std::string env = "DOPF_";
    for (char c : flag) env += c == '-' ? '_' : static_cast<char>(std::toupper(c));
    auto& s = items_[flag];
    s.flag = flag;
    s.env = env;
    s.help = help;
    s.option = app.add_option("--" + flag, s.value, help + " [env " + env + "]");
  }

  void set_file(Json file) { file_ = std::move(file); }

  /// Flag, then environment, then config file.
  std::optional<std::string> get(const std::string& flag) const {
    const auto& s = items_.at(flag);
    if (s.option->count() > 0) return s.value;
    if (const char* e = std::getenv(s.env.c_str()); e && *e) return std::string(e);
    const std::string key = underscore(flag);
    if (file_.is_object() && file_.contains(key)) {
      const Json& v = file_.at(key);
      return v.is_string() ? v.get<std::string>() : v.dump();
    }
    return std::nullopt;
  }

  std::string text(const std::string& flag, const std::string& fallback = "") const {
    return get(flag).value_or(fallback);
  }

  std::string required(const std::string& flag, const std::string& mode) const {
    auto v = get(flag);
    if (!v || v->empty()) throw ConfigError(fmt::format("--{} is required in {} mode", flag, mode));
    return *v;
  }

  double number(const std::string& flag, double fallback) const {
    auto v = get(flag);
    if (!v) return fallback;
    try {
      std::size_t used = 0;
      const double d = std::stod(*v, &used);
      if (used != v->size()) throw std::invalid_argument(*v);
      return d;
    } catch (const std::exception&) {
      throw ConfigError(fmt::format("--{}: '{}' is not a number", flag, *v));
    }
  }

  int integer(const std::string& flag, int fallback) const {
    auto v = get(flag);
    if (!v) return fallback;
    try {
      std::size_t used = 0;
      const int i = std::stoi(*v, &used);
      if (used != v->size()) throw std::invalid_argument(*v);
      return i;
    } catch (const std::exception&) {
      throw ConfigError(fmt::format("--{}: '{}' is not an integer", flag, *v));
    }
  }

  const Json& file() const { return file_; }

 private:
  static std::string underscore(std::string s) {
    for (char& c : s) {
      if (c == '-') c = '_';
    }
    return s;
  }

  std::map<std::string, Setting> items_;
  Json file_ = Json::object();
};

AladinConfig aladin_settings(const Settings& s) {
  AladinConfig c;
  try {
    if (s.file().contains("aladin")) c = aladin_config_from_json(s.file().at("aladin"));
    c.rho0 = s.number("rho0", c.rho0);
    c.eps = s.number("eps", c.eps);
    c.max_iter = s.integer("max-iter", c.max_iter);
    if (auto r = s.get("regularization")) c.regularization = regularization_from_string(*r);
    c.rho_max = std::max(c.rho_max, c.rho0);
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return c;
}

// Outputs -------------------------------------------------------------------

class Output {
 public:
  explicit Output(std::string dir) : dir_(std::move(dir)) {
    if (!dir_.empty()) fs::create_directories(dir_);
  }

  bool enabled() const { return !dir_.empty(); }
  std::string path(const std::string& name) const { return (fs::path(dir_) / name).string(); }

  void write(const std::string& name, const std::string& text) {
    if (!enabled()) return;
    write_text_file(path(name), text);
    hashes_[name] = crc_hex(text);
  }

  void write_json(const std::string& name, const Json& j) { write(name, j.dump(2) + "\n"); }

  const std::map<std::string, std::string>& hashes() const { return hashes_; }

 private:
  std::string dir_;
  std::map<std::string, std::string> hashes_;
};

Json versions() {
  return {{"dopf", kVersion},
          {"eigen", fmt::format("{}.{}.{}", EIGEN_WORLD_VERSION, EIGEN_MAJOR_VERSION,
                                EIGEN_MINOR_VERSION)},
          {"fmt", FMT_VERSION},
          {"zlib", ZLIB_VERSION},
          {"nlohmann_json", fmt::format("{}.{}.{}", NLOHMANN_JSON_VERSION_MAJOR,
                                        NLOHMANN_JSON_VERSION_MINOR, NLOHMANN_JSON_VERSION_PATCH)},
          {"compiler", __VERSION__}};
}

std::string file_hash(const std::string& path) {
  if (path.empty()) return "";
  return crc_hex(read_text_file(path));
}

void write_manifest(Output& out, const std::string& mode, const Json& config,
                    const std::vector<std::string>& argv, const std::string& case_path,
                    const std::string& regions_path) {
  if (!out.enabled()) return;
  Json m = {{"mode", mode},
            {"argv", argv},
            {"config", config},
            {"config_hash", crc_hex(config.dump())},
            {"case", case_path},
            {"case_hash", file_hash(case_path)},
            {"regions", regions_path},
            {"regions_hash", file_hash(regions_path)},
            {"versions", versions()},
            {"outputs", out.hashes()}};
  out.write_json("manifest.json", m);
}

void write_error(const std::string& out_dir, const std::string& mode, const std::string& kind,
                 const std::string& message, const std::string& module) {
  Json e = {{"mode", mode}, {"error_kind", kind}, {"message", message}, {"module", module}};
  std::cerr << e.dump() << "\n";
  if (out_dir.empty()) return;
  try {
    fs::create_directories(out_dir);
    write_text_file((fs::path(out_dir) / "error.json").string(), e.dump(2) + "\n");
  } catch (const std::exception&) {
  }
}

// Problem data --------------------------------------------------------------

struct Problem {
  NetworkCase grid;
  RegionAssignment assignment;
  std::vector<RegionModel> regions;
  CouplingSystem coupling;
};

NetworkCase load_grid(const std::string& path) {
  try {
    return normalize(load_case(path));
  } catch (const std::exception& e) {
    throw ConfigError(fmt::format("cannot load case {}: {}", path, e.what()));
  }
}

Problem load_problem(const std::string& case_path, const std::string& regions_path) {
  Problem p;
  p.grid = load_grid(case_path);
  try {
    p.assignment = regions_path.empty() ? single_region(p.grid) : load_region_map(regions_path);
    p.regions = decompose(p.grid, p.assignment);
  } catch (const std::exception& e) {
    throw ConfigError(fmt::format("cannot partition {}: {}", case_path, e.what()));
  }
  p.coupling = build_consensus(p.regions);
  return p;
}

/// Global state from regional solutions, reference angle shifted to zero.
Eigen::VectorXd aligned_state(const Problem& p, const std::vector<Eigen::VectorXd>& xs) {
  Eigen::VectorXd x =
      gather(p.regions, p.coupling, xs, p.grid.buses.size(), p.grid.generators.size()).x;
  const StateLayout layout{p.grid.buses.size(), p.grid.generators.size()};
  const double shift = x[static_cast<Eigen::Index>(layout.theta(p.grid.reference_index()))];
  for (std::size_t i = 0; i < layout.num_buses; ++i) x[static_cast<Eigen::Index>(layout.theta(i))] -= shift;
  return x;
}

Json iterates_json(const std::vector<std::vector<Eigen::VectorXd>>& rows) {
  Json out = Json::array();
  for (const auto& row : rows) {
    Json r = Json::array();
    for (const auto& x : row) r.push_back(vector_to_json(x));
    out.push_back(r);
  }
  return out;
}

std::string fig3_csv(const ConvergenceTrace& t, double reference_objective) {
  std::string out = "iter,state_deviation,objective_gap,primal_res,dual_res\n";
  for (const auto& r : t.rows) {
    out += fmt::format("{},{},{},{},{}\n", r.iter, r.x_gap,
                       std::abs((r.objective - reference_objective) / reference_objective), r.primal,
                       r.dual);
  }
  return out;
}

std::string timings_csv(const RunReport& r) {
  std::string out = "step,module_id,wall_s,calc_s,storage_s,sync_s\n";
  for (const auto& t : r.timings) {
    out += fmt::format("{},{},{},{},{},{}\n", t.step, t.module_id, t.wall_s, t.calc_s, t.storage_s,
                       t.sync_s);
  }
  return out;
}

Json timing_summary(const RunReport& r) {
  double calc = 0.0, storage = 0.0, sync = 0.0, wall = 0.0;
  for (const auto& t : r.timings) {
    calc += t.calc_s;
    storage += t.storage_s;
    sync += t.sync_s;
    wall += t.wall_s;
  }
  return {{"calculation_s", calc}, {"storage_s", storage}, {"synchronization_s", sync},
          {"module_wall_s", wall}, {"run_wall_s", r.wall_s}};
}

// Modes ---------------------------------------------------------------------

struct Context {
  Settings settings;
  std::vector<std::string> argv;
  std::string mode;
};

int run_centralized(const Context& ctx) {
  const Settings& s = ctx.settings;
  const std::string case_path = s.required("case", ctx.mode);
  Output out(s.text("out"));
  const NetworkCase grid = load_grid(case_path);
  const OpfResult r = solve_centralized_opf(grid);
  Json result = {{"mode", "centralized"},
                 {"status", to_string(r.solution.status)},
                 {"objective", r.objective},
                 {"kkt_residual", r.solution.kkt_residual},
                 {"iterations", r.solution.iterations},
                 {"x", vector_to_json(r.solution.x)}};
  out.write_json("solution.json", result);
  write_manifest(out, ctx.mode, {{"case", case_path}}, ctx.argv, case_path, "");
  fmt::print("status {} objective {:.10f} kkt {:.3e}\n", to_string(r.solution.status), r.objective,
             r.solution.kkt_residual);
  if (r.solution.status != NlpStatus::optimal) {
    throw RunError("solver_failure", "centralized solve ended with " + to_string(r.solution.status));
  }
  return kExitOk;
}

int run_sequential_mode(const Context& ctx, CLI::App& app) {
  const Settings& s = ctx.settings;
  const std::string case_path = s.required("case", ctx.mode);
  const std::string regions_path = s.text("regions");
  Output out(s.text("out"));
  const AladinConfig cfg = aladin_settings(s);
  const Problem p = load_problem(case_path, regions_path);

  std::optional<OpfResult> ref;
  if (app.get_option("--no-reference")->count() == 0) {
    ref = solve_centralized_opf(p.grid);
    if (ref->solution.status != NlpStatus::optimal) {
      throw RunError("solver_failure", "reference solve ended with " + to_string(ref->solution.status));
    }
  }
  ConvergenceTrace t;
  try {
    t = run_sequential(p.grid, p.assignment, cfg, ref ? &ref->solution.x : nullptr);
  } catch (const AladinError& e) {
    throw RunError("solver_failure", e.what(), e.region_id() < 0 ? kCoordinatorId : client_module_id(e.region_id()));
  }
  const TraceRow& last = t.rows.back();
  Json result = {{"mode", "sequential"},
                 {"converged", t.converged},
                 {"iterations", t.rows.size()},
                 {"objective", t.objective},
                 {"primal", last.primal},
                 {"dual", last.dual},
                 {"x", vector_to_json(aligned_state(p, t.iterates.back()))},
                 {"iterates", iterates_json(t.iterates)}};
  if (ref) result["reference_objective"] = ref->objective;
  out.write("trace.csv", trace_csv(t));
  if (ref) out.write("fig3.csv", fig3_csv(t, ref->objective));
  out.write_json("result.json", result);
  write_manifest(out, ctx.mode, {{"aladin", aladin_config_to_json(cfg)}, {"reference", ref.has_value()}},
                 ctx.argv, case_path, regions_path);
  fmt::print("{} after {} iterations: objective {:.10f} primal {:.3e} dual {:.3e}\n",
             t.converged ? "converged" : "stopped", t.rows.size(), t.objective, last.primal, last.dual);
  if (!out.enabled()) fmt::print("{}", trace_csv(t));
  return t.converged ? kExitOk : kExitFailed;
}

int run_split(const Context& ctx) {
  const Settings& s = ctx.settings;
  const std::string case_path = s.required("case", ctx.mode);
  const std::string regions_path = s.required("regions", ctx.mode);
  const std::string out_dir = s.required("out", ctx.mode);
  Output out(out_dir);
  const AladinConfig cfg = aladin_settings(s);
  const Problem p = load_problem(case_path, regions_path);
  const std::string master = s.text("master-addr", "127.0.0.1:7100");
  const std::string store = s.text("store", (fs::absolute(out_dir) / "store").string());
  const fs::path base = fs::absolute(out_dir);

  const auto files = make_region_files(p.regions, p.coupling);
  for (std::size_t l = 0; l < files.size(); ++l) {
    const std::string id = client_module_id(files[l].region.region_id);
    out.write(id + ".data.json", region_file_json(files[l]));
    out.write_json("module_" + id + ".json",
                   {{"module_id", id},
                    {"role", "client"},
                    {"master_addr", master},
                    {"store", store},
                    {"region", (base / (id + ".data.json")).string()},
                    {"eps", cfg.eps},
                    {"aladin", aladin_config_to_json(cfg)},
                    {"out", base.string()}});
  }
  out.write("coupling.json", coupling_json(p.coupling));
  out.write_json("module_coordinator.json", {{"module_id", kCoordinatorId},
                                             {"role", "coordinator"},
                                             {"master_addr", master},
                                             {"store", store},
                                             {"coupling", (base / "coupling.json").string()},
                                             {"eps", cfg.eps},
                                             {"aladin", aladin_config_to_json(cfg)},
                                             {"out", base.string()}});
  write_manifest(out, ctx.mode, {{"aladin", aladin_config_to_json(cfg)}, {"master_addr", master}, {"store", store}},
                 ctx.argv, case_path, regions_path);
  fmt::print("{} client files and one coordinator file in {}\n", files.size(), out_dir);
  return kExitOk;
}

int run_master(const Context& ctx) {
  const Settings& s = ctx.settings;
  Output out(s.text("out"));
  MasterConfig mc;
  try {
    mc.listen = parse_endpoint(s.text("listen", "127.0.0.1:7100"));
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  const int clients = s.integer("clients", 0);
  if (clients < 0) throw ConfigError("--clients must be >= 0");
  mc.num_clients = static_cast<std::size_t>(clients);
  mc.run_id = static_cast<std::uint64_t>(s.integer("run-id", 1));
  mc.step_timeout = std::chrono::milliseconds(static_cast<long long>(s.number("step-timeout", 60.0) * 1000));
  mc.connect_timeout = std::chrono::milliseconds(static_cast<long long>(s.number("connect-timeout", 60.0) * 1000));
  try {
    mc.validate();
  } catch (const CosimError& e) {
    throw ConfigError(e.what());
  }
  Master master(mc);
  const std::string port_file = s.text("port-file");
  if (!port_file.empty()) write_text_file(port_file, std::to_string(master.port()) + "\n");
  fmt::print("listening on {}:{}\n", mc.listen.host, master.port());
  std::fflush(stdout);

  const RunReport r = master.run();
  out.write_json("report.json", report_to_json(r));
  out.write("timings.csv", timings_csv(r));
  Json summary = timing_summary(r);
  out.write_json("timing_summary.json", summary);
  write_manifest(out, ctx.mode,
                 {{"listen", s.text("listen", "127.0.0.1:7100")},
                  {"clients", clients},
                  {"run_id", mc.run_id},
                  {"step_timeout_ms", mc.step_timeout.count()}},
                 ctx.argv, "", "");
  if (!r.completed) throw RunError(to_string(r.error), r.error_message, r.error_module);
  fmt::print("{} after {} iterations: objective {:.10f} primal {:.3e} dual {:.3e}\n",
             r.converged ? "converged" : "stopped", r.iterations, r.objective, r.primal, r.dual);
  fmt::print("time split: calculation {:.3f} s, storage {:.3f} s, synchronization {:.3f} s\n",
             summary["calculation_s"].get<double>(), summary["storage_s"].get<double>(),
             summary["synchronization_s"].get<double>());
  return r.converged ? kExitOk : kExitFailed;
}

int run_module_mode(const Context& ctx, Role role) {
  const Settings& s = ctx.settings;
  Output out(s.text("out"));
  const AladinConfig cfg = aladin_settings(s);
  auto store = std::make_shared<DirectoryStore>(s.required("store", ctx.mode));
  RunnerOptions ro;
  try {
    ro.master = parse_endpoint(s.required("master-addr", ctx.mode));
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  ro.connect_timeout = std::chrono::milliseconds(static_cast<long long>(s.number("connect-timeout", 60.0) * 1000));
  ro.hard_crash = true;

  std::unique_ptr<Module> module;
  ClientModule* client = nullptr;
  try {
    if (role == Role::client) {
      ClientSettings cs{cfg, stopped_client_policy_from_string(s.text("policy", "keep_solving"))};
      auto c = std::make_unique<ClientModule>(parse_region_file(read_text_file(s.required("region", ctx.mode))),
                                              cs, store);
      client = c.get();
      module = std::move(c);
    } else {
      CoordinatorSettings cs;
      cs.aladin = cfg;
      module = std::make_unique<CoordinatorModule>(parse_coupling(read_text_file(s.required("coupling", ctx.mode))),
                                                   cs, store);
    }
  } catch (const FormatError& e) {
    throw ConfigError(e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (const auto expected = s.get("module-id"); expected && *expected != module->module_id()) {
    throw ConfigError(fmt::format("config names module {}, data belongs to {}", *expected, module->module_id()));
  }
  FaultPlan faults;
  faults.crash_at_step = s.integer("crash-at-step", 0);
  module->set_faults(faults);

  const ModuleExit exit = run_module(*module, ro);
  if (client) out.write_json(module->module_id() + "_report.json", client->final_report());
  if (!exit.received_stop) {
    throw RunError(exit.connection_lost ? "connection_lost" : "timeout",
                   exit.error.empty() ? "module ended without sim_stop" : exit.error, module->module_id());
  }
  fmt::print("{} stopped after {} steps\n", module->module_id(), exit.steps);
  return kExitOk;
}

int run_cosim_local(const Context& ctx) {
  const Settings& s = ctx.settings;
  const std::string case_path = s.required("case", ctx.mode);
  const std::string regions_path = s.text("regions");
  const std::string out_dir = s.text("out");
  Output out(out_dir);
  const AladinConfig cfg = aladin_settings(s);
  const Problem p = load_problem(case_path, regions_path);
  LocalRunOptions opt;
  opt.aladin = cfg;
  opt.policy = stopped_client_policy_from_string(s.text("policy", "keep_solving"));
  opt.run_id = static_cast<std::uint64_t>(s.integer("run-id", 1));
  const std::string store = s.text("store", out_dir.empty() ? "" : (fs::path(out_dir) / "store").string());
  if (!store.empty()) opt.store = std::make_shared<DirectoryStore>(store);
  const LocalRunResult run = run_cosim_threads(make_region_files(p.regions, p.coupling), p.coupling, opt);
  const RunReport& r = run.report;

  out.write_json("report.json", report_to_json(r));
  out.write("timings.csv", timings_csv(r));
  out.write_json("timing_summary.json", timing_summary(r));
  if (r.completed) {
    // Rows of the sequential layout: one entry per region per iteration.
    std::vector<std::vector<Eigen::VectorXd>> rows;
    for (std::size_t k = 0; k < run.iterates.front().size(); ++k) {
      std::vector<Eigen::VectorXd> row;
      for (const auto& region : run.iterates) row.push_back(region.at(k));
      rows.push_back(std::move(row));
    }
    out.write_json("result.json", {{"mode", "cosim-local"},
                                   {"converged", r.converged},
                                   {"iterations", r.iterations},
                                   {"objective", r.objective},
                                   {"primal", r.primal},
                                   {"dual", r.dual},
                                   {"x", vector_to_json(aligned_state(p, rows.back()))},
                                   {"iterates", iterates_json(rows)}});
  }
  write_manifest(out, ctx.mode,
                 {{"aladin", aladin_config_to_json(cfg)}, {"policy", to_string(opt.policy)}, {"store", store}},
                 ctx.argv, case_path, regions_path);
  if (!r.completed) throw RunError(to_string(r.error), r.error_message, r.error_module);
  fmt::print("{} after {} iterations: objective {:.10f} primal {:.3e} dual {:.3e}\n",
             r.converged ? "converged" : "stopped", r.iterations, r.objective, r.primal, r.dual);
  return r.converged ? kExitOk : kExitFailed;
}

// Compare -------------------------------------------------------------------

struct RunSummary {
  double objective = std::numeric_limits<double>::quiet_NaN();
  double primal = std::numeric_limits<double>::quiet_NaN();
  double dual = std::numeric_limits<double>::quiet_NaN();
  std::optional<Eigen::VectorXd> x;
  std::vector<std::vector<Eigen::VectorXd>> iterates;
};

RunSummary load_summary(const std::string& path) {
  RunSummary s;
  const std::string text = read_text_file(path);
  if (fs::path(path).extension() == ".csv") {
    std::istringstream in(text);
    std::string line;
    std::getline(in, line);
    if (line.rfind("iter,objective,primal_res,dual_res", 0) != 0) {
      throw ConfigError(path + " is not a trace CSV");
    }
    std::string last;
    while (std::getline(in, line)) {
      if (!line.empty()) last = line;
    }
    if (last.empty()) throw ConfigError(path + " has no rows");
    std::vector<std::string> cells;
    std::istringstream row(last);
    for (std::string c; std::getline(row, c, ',');) cells.push_back(c);
    if (cells.size() < 4) throw ConfigError(path + ": short trace row");
    s.objective = std::stod(cells[1]);
    s.primal = std::stod(cells[2]);
    s.dual = std::stod(cells[3]);
    return s;
  }
  try {
    const Json j = Json::parse(text);
    s.objective = j.at("objective").get<double>();
    if (j.contains("primal")) s.primal = number_from_json(j.at("primal"));
    if (j.contains("dual")) s.dual = number_from_json(j.at("dual"));
    if (j.contains("x")) s.x = vector_from_json(j.at("x"));
    if (j.contains("iterates")) {
      for (const auto& row : j.at("iterates")) {
        std::vector<Eigen::VectorXd> r;
        for (const auto& x : row) r.push_back(vector_from_json(x));
        s.iterates.push_back(std::move(r));
      }
    }
  } catch (const Json::exception& e) {
    throw ConfigError(fmt::format("{}: {}", path, e.what()));
  }
  return s;
}

int run_compare(const Context& ctx, const std::string& a_path, const std::string& b_path,
                double gap_tol, double primal_tol, double dual_tol, double x_tol, double iterate_tol) {
  if (a_path.empty() || b_path.empty()) throw ConfigError("compare needs --a and --b");
  Output out(ctx.settings.text("out"));
  const RunSummary a = load_summary(a_path);
  const RunSummary b = load_summary(b_path);

  Json metrics;
  bool pass = true;
  auto check = [&](const char* name, double value, double tol) {
    metrics[name] = json_number(value);
    const bool ok = std::isnan(value) || value <= tol;
    if (!ok) pass = false;
    fmt::print("{:<16} {:.3e}  (<= {:.1e}) {}\n", name, value, tol,
               std::isnan(value) ? "n/a" : ok ? "ok" : "FAIL");
  };
  check("optimality_gap", std::abs((a.objective - b.objective) / b.objective), gap_tol);
  check("primal_residual", a.primal, primal_tol);
  check("dual_residual", a.dual, dual_tol);

  double x_dist = std::numeric_limits<double>::quiet_NaN();
  if (a.x && b.x) {
    if (a.x->size() != b.x->size()) throw ConfigError("state layouts differ between the two runs");
    x_dist = (*a.x - *b.x).cwiseAbs().maxCoeff();
  }
  check("state_distance", x_dist, x_tol);

  double it_dist = std::numeric_limits<double>::quiet_NaN();
  if (!a.iterates.empty() && !b.iterates.empty()) {
    if (a.iterates.size() != b.iterates.size()) {
      metrics["iterate_rows"] = {a.iterates.size(), b.iterates.size()};
      fmt::print("iteration counts differ: {} vs {}\n", a.iterates.size(), b.iterates.size());
      pass = false;
    }
    it_dist = 0.0;
    for (std::size_t k = 0; k < std::min(a.iterates.size(), b.iterates.size()); ++k) {
      if (a.iterates[k].size() != b.iterates[k].size()) throw ConfigError("region counts differ");
      for (std::size_t l = 0; l < a.iterates[k].size(); ++l) {
        if (a.iterates[k][l].size() != b.iterates[k][l].size()) throw ConfigError("region layouts differ");
        it_dist = std::max(it_dist, (a.iterates[k][l] - b.iterates[k][l]).cwiseAbs().maxCoeff());
      }
    }
  }
  check("iterate_distance", it_dist, iterate_tol);
  metrics["pass"] = pass;
  out.write_json("compare.json", metrics);
  write_manifest(out, ctx.mode, {{"a", a_path}, {"b", b_path}}, ctx.argv, "", "");
  fmt::print("{}\n", pass ? "PASS" : "FAIL");
  return pass ? kExitOk : kExitFailed;
}

int run_schema(const Context& ctx) {
  Json schema = cosim_schema();
  schema["region_file"] = {{"format", "dopf-region"},
                           {"version", 1},
                           {"keys", {"format", "version", "region", "coupling_block", "num_consensus"}}};
  schema["coupling_file"] = {{"format", "dopf-coupling"},
                             {"keys", {"format", "version", "A", "b", "rows_info", "dims"}}};
  Output out(ctx.settings.text("out"));
  out.write_json("schema.json", schema);
  fmt::print("{}\n", schema.dump(2));
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Distributed AC OPF with ALADIN: centralized, sequential and co-simulated runs"};
  app.set_version_flag("--version", kVersion);
  Context ctx;
  for (int i = 0; i < argc; ++i) ctx.argv.emplace_back(argv[i]);

  Settings& s = ctx.settings;
  s.declare(app, "mode",
            "centralized | sequential | split | master | client | coordinator | cosim-local | compare | schema");
  s.declare(app, "case", "MATPOWER case file");
  s.declare(app, "regions", "region map (bus_id region_id per line); single region when absent");
  s.declare(app, "rho0", "initial penalty rho");
  s.declare(app, "eps", "termination tolerance on primal and dual residuals");
  s.declare(app, "max-iter", "ALADIN iteration limit");
  s.declare(app, "regularization", "Hessian regularization: null_space | shift | clip");
  s.declare(app, "store", "exchange store directory");
  s.declare(app, "master-addr", "master address host:port (modules, split)");
  s.declare(app, "listen", "master listen address host:port (port 0 picks one)");
  s.declare(app, "out", "output directory");
  s.declare(app, "clients", "number of client modules the master waits for");
  s.declare(app, "run-id", "run id (store subdirectory)");
  s.declare(app, "step-timeout", "master per-step timeout in seconds");
  s.declare(app, "connect-timeout", "seconds to wait for connections");
  s.declare(app, "port-file", "master writes its bound port here");
  s.declare(app, "policy", "stopped-client policy: keep_solving | republish");
  s.declare(app, "region", "region file (client)");
  s.declare(app, "coupling", "coupling file (coordinator)");
  s.declare(app, "module-id", "expected module id (client, coordinator)");
  s.declare(app, "crash-at-step", "fault injection: kill this module at the given step");

  std::string config_path;
  app.add_option("--config", config_path, "module config JSON; lowest precedence after defaults");
  app.add_flag("--no-reference", "sequential: skip the centralized reference solve");
  std::string a_path, b_path;
  double gap_tol = 1e-6, primal_tol = 1e-6, dual_tol = 1e-5, x_tol = 1e-3, iterate_tol = 1e-9;
  app.add_option("--a", a_path, "compare: run under test (result JSON or trace CSV)");
  app.add_option("--b", b_path, "compare: reference (result or solution JSON, trace CSV)");
  app.add_option("--gap-tol", gap_tol, "compare: relative objective gap bound")->capture_default_str();
  app.add_option("--primal-tol", primal_tol, "compare: primal residual bound")->capture_default_str();
  app.add_option("--dual-tol", dual_tol, "compare: dual residual bound")->capture_default_str();
  app.add_option("--x-tol", x_tol, "compare: state distance bound")->capture_default_str();
  app.add_option("--iterate-tol", iterate_tol, "compare: per-iterate distance bound")->capture_default_str();
  app.footer(
      "Precedence: flag > DOPF_<FLAG> environment variable (dashes become underscores) > "
      "--config file key (dashes become underscores) > default.\n"
      "Exit status: 0 success, 1 run failed or did not converge, 2 configuration error.");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitOk : kExitConfig;
  }

  std::string out_dir;
  try {
    if (const char* env = std::getenv("DOPF_CONFIG"); config_path.empty() && env) config_path = env;
    if (!config_path.empty()) {
      try {
        s.set_file(Json::parse(read_text_file(config_path)));
      } catch (const std::exception& e) {
        throw ConfigError(fmt::format("cannot read config {}: {}", config_path, e.what()));
      }
      if (!s.file().is_object()) throw ConfigError("config file must hold a JSON object");
    }
    out_dir = s.text("out");
    ctx.mode = s.text("mode");
    if (ctx.mode.empty() && s.file().contains("role")) ctx.mode = s.file().at("role").get<std::string>();
    const std::string& mode = ctx.mode;
    if (mode == "centralized") return run_centralized(ctx);
    if (mode == "sequential") return run_sequential_mode(ctx, app);
    if (mode == "split") return run_split(ctx);
    if (mode == "master") return run_master(ctx);
    if (mode == "client") return run_module_mode(ctx, Role::client);
    if (mode == "coordinator") return run_module_mode(ctx, Role::coordinator);
    if (mode == "cosim-local") return run_cosim_local(ctx);
    if (mode == "compare") return run_compare(ctx, a_path, b_path, gap_tol, primal_tol, dual_tol, x_tol, iterate_tol);
    if (mode == "schema") return run_schema(ctx);
    throw ConfigError(mode.empty() ? "--mode is required" : "unknown mode '" + mode + "'");
  } catch (const ConfigError& e) {
    write_error(out_dir, ctx.mode, "config", e.what(), "");
    return kExitConfig;
  } catch (const RunError& e) {
    write_error(out_dir, ctx.mode, e.kind, e.what(), e.module);
    return kExitFailed;
  } catch (const std::exception& e) {
    write_error(out_dir, ctx.mode, "internal", e.what(), "");
    return kExitFailed;
  }
}
