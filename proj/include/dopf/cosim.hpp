#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "dopf/aladin.hpp"
#include "dopf/exchange.hpp"
#include "dopf/io.hpp"
#include "dopf/wire.hpp"

namespace dopf {

enum class Role { client, coordinator };

std::string to_string(Role role);
Role role_from_string(const std::string& name);

struct VectorSpec {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 1;
};

/// What a module tells the master about itself: exchanged vector names and
/// dimensions, nothing about the network it models.
struct ModuleDescriptor {
  std::string module_id;
  Role role = Role::client;
  std::vector<VectorSpec> inputs;
  std::vector<VectorSpec> outputs;
  std::string endpoint;

  /// Throws std::invalid_argument on duplicate interface names.
  void validate() const;
};

Json descriptor_to_json(const ModuleDescriptor& d);
ModuleDescriptor descriptor_from_json(const Json& j);

enum class CosimErrorKind {
  none,
  config,
  timeout,
  connection_lost,
  frame_error,
  protocol,
  missing_message,
  stale_message,
  corrupt_message,
  version_mismatch,
  store_io,
  solver_failure,
};

std::string to_string(CosimErrorKind kind);
CosimErrorKind cosim_error_from_string(const std::string& name);
CosimErrorKind classify(const ExchangeError& e);

class CosimError : public std::runtime_error {
 public:
  CosimError(CosimErrorKind kind, std::string module_id, const std::string& what);
  CosimErrorKind kind() const noexcept { return kind_; }
  const std::string& module_id() const noexcept { return module_id_; }

 private:
  CosimErrorKind kind_;
  std::string module_id_;
};

/// What a client does once its error is below eps while the run goes on.
enum class StoppedClientPolicy {
  keep_solving,  // stop only with the coordinator's final message
  republish,     // stop at once and rewrite the last packet every step
};

std::string to_string(StoppedClientPolicy policy);
StoppedClientPolicy stopped_client_policy_from_string(const std::string& name);

/// Step numbers are 1-based; 0 disables a fault.
struct FaultPlan {
  int crash_at_step = 0;       // drop the connection instead of answering
  int hang_at_step = 0;        // never answer
  int skip_write_at_step = 0;  // leave the previous message in the store
  int torn_write_at_step = 0;  // write half of the message in place
  std::chrono::milliseconds max_delay{0};  // uniform random delay before each reply
  std::uint64_t seed = 0;
};

class Module {
 public:
  virtual ~Module() = default;
  virtual const std::string& module_id() const = 0;
  virtual ModuleDescriptor descriptor() const = 0;
  /// Answers sim_setup, sim_step and sim_stop; failures become error replies.
  virtual WireMessage handle(const WireMessage& command) = 0;

  const FaultPlan& faults() const { return faults_; }
  void set_faults(const FaultPlan& f) { faults_ = f; }

 private:
  FaultPlan faults_;
};

struct ClientSettings {
  AladinConfig aladin;
  StoppedClientPolicy policy = StoppedClientPolicy::keep_solving;
};

/// Region-side module. The step k command reads the coordinator's deviation
/// stamped k-1 (none at k = 1), solves the local problem and publishes the
/// sensitivity packet stamped k.
class ClientModule final : public Module {
 public:
  ClientModule(RegionFile file, ClientSettings settings, std::shared_ptr<ExchangeStore> store);

  const std::string& module_id() const override { return id_; }
  ModuleDescriptor descriptor() const override;
  WireMessage handle(const WireMessage& command) override;

  bool running() const { return running_; }
  /// Local solutions, one per computed step.
  const std::vector<Eigen::VectorXd>& iterates() const { return iterates_; }
  /// Iterates and final error, written by the CLI on sim_stop.
  Json final_report() const;

 private:
  WireMessage step(const WireMessage& command);
  void publish(int iteration, const std::string& payload);

  RegionFile file_;
  ClientSettings settings_;
  std::shared_ptr<ExchangeStore> store_;
  std::string id_;
  std::uint64_t run_id_ = 0;
  bool setup_done_ = false;
  bool running_ = false;
  int last_step_ = 0;
  std::unique_ptr<LocalModel> local_;
  Eigen::VectorXd z_, x_, lambda_;
  double rho_ = 0.0;
  double last_dual_ = std::numeric_limits<double>::infinity();
  double error_ = std::numeric_limits<double>::infinity();
  double objective_ = std::numeric_limits<double>::quiet_NaN();
  std::string last_packet_;
  std::vector<Eigen::VectorXd> iterates_;
};

struct CoordinatorSettings {
  AladinConfig aladin;
  /// How long missing, stale or unreadable packets are retried.
  std::chrono::milliseconds read_wait{30000};
  std::chrono::milliseconds poll_interval{2};
};

/// Holds only the coupling. Step k >= 2 reads the packets stamped k-1,
/// evaluates the residuals and, unless the run is over, solves the coupled QP
/// and writes one deviation per client stamped k-1. Step 1 does nothing.
class CoordinatorModule final : public Module {
 public:
  CoordinatorModule(CouplingSystem coupling, CoordinatorSettings settings,
                    std::shared_ptr<ExchangeStore> store);

  const std::string& module_id() const override { return id_; }
  ModuleDescriptor descriptor() const override;
  WireMessage handle(const WireMessage& command) override;

 private:
  WireMessage step(const WireMessage& command);
  ExchangeMessage read_packet(std::size_t region, int iteration);

  CouplingSystem coupling_;
  CoordinatorSettings settings_;
  std::shared_ptr<ExchangeStore> store_;
  std::string id_ = kCoordinatorId;
  std::vector<std::vector<Eigen::Index>> rows_of_;  // consensus rows per region
  std::uint64_t run_id_ = 0;
  bool setup_done_ = false;
  int last_step_ = 0;
};

struct RunnerOptions {
  Endpoint master;
  std::chrono::milliseconds connect_timeout{60000};
  std::chrono::milliseconds idle_timeout{600000};
  bool hard_crash = false;  // crash fault kills the process
  std::function<void(std::string_view)> on_send;  // sees every frame sent
};

struct ModuleExit {
  bool received_stop = false;
  bool crashed = false;
  bool connection_lost = false;
  int steps = 0;
  std::string error;
};

/// Connects, sends hello, answers commands until sim_stop or disconnect.
ModuleExit run_module(Module& module, const RunnerOptions& options);

struct MasterConfig {
  Endpoint listen;
  std::size_t num_clients = 0;
  std::uint64_t run_id = 1;
  std::chrono::milliseconds step_timeout{60000};
  std::chrono::milliseconds connect_timeout{60000};
  std::chrono::milliseconds stop_timeout{2000};
  int max_steps = 0;  // 0: no limit beyond the modules' own

  /// Throws CosimError(config).
  void validate() const;
};

struct StepTiming {
  int step = 0;
  std::string module_id;
  double wall_s = 0.0;     // command sent to reply received, at the master
  double calc_s = 0.0;     // solver work in the module
  double storage_s = 0.0;  // store reads, writes and (de)serialization
  double sync_s = 0.0;     // the rest: transport and waiting
};

struct RunReport {
  std::uint64_t run_id = 0;
  bool completed = false;  // no error
  bool converged = false;
  int steps = 0;
  int iterations = 0;  // local solve rounds
  double objective = std::numeric_limits<double>::quiet_NaN();
  double primal = std::numeric_limits<double>::quiet_NaN();
  double dual = std::numeric_limits<double>::quiet_NaN();
  std::vector<StepTiming> timings;
  std::map<std::string, double> client_errors;
  std::vector<std::string> modules;
  std::vector<std::string> stop_sent;
  CosimErrorKind error = CosimErrorKind::none;
  std::string error_module;
  std::string error_message;
  double wall_s = 0.0;
};

Json report_to_json(const RunReport& r);

class Master {
 public:
  /// Binds the listening socket.
  explicit Master(MasterConfig config);
  ~Master();

  int port() const;
  /// Never throws for module or transport failures; they end up in the report.
  RunReport run();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

Json aladin_config_to_json(const AladinConfig& c);
AladinConfig aladin_config_from_json(const Json& j);

/// Every key the command channel and the exchange store can carry.
std::set<std::string> cosim_schema_keys();
/// Key names and record layouts, for the schema dump.
Json cosim_schema();

struct LocalRunOptions {
  AladinConfig aladin;
  StoppedClientPolicy policy = StoppedClientPolicy::keep_solving;
  std::shared_ptr<ExchangeStore> store;  // memory store when empty
  std::uint64_t run_id = 1;
  std::chrono::milliseconds step_timeout{60000};
  std::chrono::milliseconds read_wait{30000};
  std::map<std::string, FaultPlan> faults;  // by module id
  bool shuffle_start = false;  // start modules in random order
  std::uint64_t seed = 0;
  bool capture_wire = false;
};

struct LocalRunResult {
  RunReport report;
  std::vector<std::vector<Eigen::VectorXd>> iterates;  // per region, per computed step
  std::map<std::string, ModuleExit> exits;
  std::vector<std::string> wire;  // frames sent by modules when captured
};

/// Master plus one thread per module on loopback TCP. Region and coupling
/// data pass through their file formats, as they would between processes.
LocalRunResult run_cosim_threads(const std::vector<RegionFile>& regions,
                                 const CouplingSystem& coupling, const LocalRunOptions& options);

/// Region files of a decomposition.
std::vector<RegionFile> make_region_files(const std::vector<RegionModel>& regions,
                                          const CouplingSystem& coupling);

}  // namespace dopf
