#include "dopf/cosim.hpp"

#include <algorithm>
#include <condition_variable>
#include <csignal>
#include <deque>
#include <mutex>
#include <optional>
#include <random>
#include <thread>

#include <fmt/format.h>

namespace dopf {
namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

/// Accumulates elapsed time of a scope into `total`.
class ScopedTimer {
 public:
  explicit ScopedTimer(double& total) : total_(total), t0_(Clock::now()) {}
  ~ScopedTimer() { total_ += seconds_since(t0_); }
  ScopedTimer(const ScopedTimer&) = delete;
  ScopedTimer& operator=(const ScopedTimer&) = delete;

 private:
  double& total_;
  Clock::time_point t0_;
};

WireMessage reply_to(const WireMessage& command, const std::string& module_id) {
  WireMessage r;
  r.type = MessageType::reply;
  r.run_id = command.run_id;
  r.step = command.step;
  r.module_id = module_id;
  r.status = "ok";
  return r;
}

WireMessage error_reply(const WireMessage& command, const std::string& module_id,
                        CosimErrorKind kind, const std::string& message) {
  WireMessage r = reply_to(command, module_id);
  r.status = "error";
  r.detail = {{"error_kind", to_string(kind)}, {"message", message}};
  return r;
}

/// Runs `body`, turning exceptions into error replies.
template <typename F>
WireMessage answer(const WireMessage& command, const std::string& id, F&& body) {
  try {
    return body();
  } catch (const CosimError& e) {
    return error_reply(command, id, e.kind(), e.what());
  } catch (const ExchangeError& e) {
    return error_reply(command, id, classify(e), e.what());
  } catch (const AladinError& e) {
    return error_reply(command, id, CosimErrorKind::solver_failure, e.what());
  } catch (const std::exception& e) {
    return error_reply(command, id, CosimErrorKind::protocol, e.what());
  }
}

void check_sequence(const std::string& id, bool setup_done, std::uint64_t run_id,
                    int last_step, const WireMessage& command) {
  if (!setup_done) throw CosimError(CosimErrorKind::protocol, id, "sim_step before sim_setup");
  if (command.run_id != run_id) {
    throw CosimError(CosimErrorKind::protocol, id,
                     fmt::format("run {} commanded, set up for run {}", command.run_id, run_id));
  }
  if (command.step != last_step + 1) {
    throw CosimError(CosimErrorKind::protocol, id,
                     fmt::format("step {} after step {}", command.step, last_step));
  }
}

/// Store write honoring the skip and torn-write faults.
void write_with_faults(ExchangeStore& store, const ExchangeMessage& m, const FaultPlan& faults,
                       int step) {
  if (faults.skip_write_at_step == step) return;
  if (faults.torn_write_at_step == step) {
    const std::string bytes = message_bytes(m);
    store.put_torn(m.header.run_id, message_file_name(m.header.producer, m.header.consumer),
                   std::string_view(bytes).substr(0, bytes.size() / 2));
    return;
  }
  store_write(store, m);
}

Json specs_to_json(const std::vector<VectorSpec>& specs) {
  Json out = Json::array();
  for (const auto& s : specs) out.push_back({{"name", s.name}, {"rows", s.rows}, {"cols", s.cols}});
  return out;
}

std::vector<VectorSpec> specs_from_json(const Json& j) {
  std::vector<VectorSpec> specs;
  for (const auto& s : j) {
    specs.push_back({s.at("name").get<std::string>(), s.at("rows").get<std::size_t>(),
                     s.at("cols").get<std::size_t>()});
  }
  return specs;
}

std::vector<VectorSpec> packet_specs(const std::string& prefix, std::size_t n, std::size_t m_eq) {
  return {{prefix + "x", n, 1},           {prefix + "gradient", n, 1},
          {prefix + "jacobian", m_eq, n}, {prefix + "hessian", n, n},
          {prefix + "delta_lower", n, 1}, {prefix + "delta_upper", n, 1}};
}

std::vector<VectorSpec> deviation_specs(const std::string& prefix, std::size_t n, std::size_t m) {
  return {{prefix + "delta", n, 1}, {prefix + "lambda", m, 1}};
}

Json nlp_options_to_json(const NlpOptions& o) {
  return {{"tol", o.tol},
          {"max_iter", o.max_iter},
          {"mu_init", o.mu_init},
          {"mu_linear_factor", o.mu_linear_factor},
          {"mu_superlinear_power", o.mu_superlinear_power},
          {"fraction_to_boundary", o.fraction_to_boundary},
          {"bound_push", o.bound_push},
          {"reg_init", o.reg_init},
          {"reg_growth", o.reg_growth},
          {"reg_max", o.reg_max},
          {"constraint_reg", o.constraint_reg},
          {"max_objective_gradient", o.max_objective_gradient}};
}

NlpOptions nlp_options_from_json(const Json& j, NlpOptions o) {
  o.tol = j.value("tol", o.tol);
  o.max_iter = j.value("max_iter", o.max_iter);
  o.mu_init = j.value("mu_init", o.mu_init);
  o.mu_linear_factor = j.value("mu_linear_factor", o.mu_linear_factor);
  o.mu_superlinear_power = j.value("mu_superlinear_power", o.mu_superlinear_power);
  o.fraction_to_boundary = j.value("fraction_to_boundary", o.fraction_to_boundary);
  o.bound_push = j.value("bound_push", o.bound_push);
  o.reg_init = j.value("reg_init", o.reg_init);
  o.reg_growth = j.value("reg_growth", o.reg_growth);
  o.reg_max = j.value("reg_max", o.reg_max);
  o.constraint_reg = j.value("constraint_reg", o.constraint_reg);
  o.max_objective_gradient = j.value("max_objective_gradient", o.max_objective_gradient);
  return o;
}

}  // namespace

std::string to_string(Role role) { return role == Role::client ? "client" : "coordinator"; }

Role role_from_string(const std::string& name) {
  if (name == "client") return Role::client;
  if (name == "coordinator") return Role::coordinator;
  throw std::invalid_argument("unknown role '" + name + "'");
}

void ModuleDescriptor::validate() const {
  if (module_id.empty()) throw std::invalid_argument("module id is empty");
  std::set<std::string> names;
  for (const auto* list : {&inputs, &outputs}) {
    for (const auto& s : *list) {
      if (!names.insert(s.name).second) {
        throw std::invalid_argument(fmt::format("module {}: interface name '{}' repeated", module_id, s.name));
      }
    }
  }
}

Json descriptor_to_json(const ModuleDescriptor& d) {
  return {{"module_id", d.module_id},
          {"role", to_string(d.role)},
          {"inputs", specs_to_json(d.inputs)},
          {"outputs", specs_to_json(d.outputs)},
          {"endpoint", d.endpoint}};
}

ModuleDescriptor descriptor_from_json(const Json& j) {
  try {
    ModuleDescriptor d;
    d.module_id = j.at("module_id").get<std::string>();
    d.role = role_from_string(j.at("role").get<std::string>());
    d.inputs = specs_from_json(j.at("inputs"));
    d.outputs = specs_from_json(j.at("outputs"));
    d.endpoint = j.value("endpoint", "");
    return d;
  } catch (const Json::exception& e) {
    throw std::invalid_argument(std::string("bad module descriptor: ") + e.what());
  }
}

std::string to_string(CosimErrorKind kind) {
  switch (kind) {
    case CosimErrorKind::none: return "none";
    case CosimErrorKind::config: return "config";
    case CosimErrorKind::timeout: return "timeout";
    case CosimErrorKind::connection_lost: return "connection_lost";
    case CosimErrorKind::frame_error: return "frame_error";
    case CosimErrorKind::protocol: return "protocol";
    case CosimErrorKind::missing_message: return "missing_message";
    case CosimErrorKind::stale_message: return "stale_message";
    case CosimErrorKind::corrupt_message: return "corrupt_message";
    case CosimErrorKind::version_mismatch: return "version_mismatch";
    case CosimErrorKind::store_io: return "store_io";
    case CosimErrorKind::solver_failure: return "solver_failure";
  }
  return "unknown";
}

CosimErrorKind cosim_error_from_string(const std::string& name) {
  for (int k = 0; k <= static_cast<int>(CosimErrorKind::solver_failure); ++k) {
    const auto kind = static_cast<CosimErrorKind>(k);
    if (to_string(kind) == name) return kind;
  }
  return CosimErrorKind::protocol;
}

CosimErrorKind classify(const ExchangeError& e) {
  switch (e.kind()) {
    case ExchangeErrorKind::missing: return CosimErrorKind::missing_message;
    case ExchangeErrorKind::iteration_mismatch: return CosimErrorKind::stale_message;
    case ExchangeErrorKind::corrupt: return CosimErrorKind::corrupt_message;
    case ExchangeErrorKind::malformed: return CosimErrorKind::corrupt_message;
    case ExchangeErrorKind::version: return CosimErrorKind::version_mismatch;
    case ExchangeErrorKind::io: return CosimErrorKind::store_io;
  }
  return CosimErrorKind::protocol;
}

CosimError::CosimError(CosimErrorKind kind, std::string module_id, const std::string& what)
    : std::runtime_error(what), kind_(kind), module_id_(std::move(module_id)) {}

std::string to_string(StoppedClientPolicy policy) {
  return policy == StoppedClientPolicy::keep_solving ? "keep_solving" : "republish";
}

StoppedClientPolicy stopped_client_policy_from_string(const std::string& name) {
  if (name == "keep_solving") return StoppedClientPolicy::keep_solving;
  if (name == "republish") return StoppedClientPolicy::republish;
  throw std::invalid_argument("unknown stopped-client policy '" + name + "'");
}

// Client --------------------------------------------------------------------

ClientModule::ClientModule(RegionFile file, ClientSettings settings,
                           std::shared_ptr<ExchangeStore> store)
    : file_(std::move(file)),
      settings_(std::move(settings)),
      store_(std::move(store)),
      id_(client_module_id(file_.region.region_id)) {
  settings_.aladin.validate();
  if (!store_) throw std::invalid_argument("client needs an exchange store");
}

ModuleDescriptor ClientModule::descriptor() const {
  const std::size_t n = file_.region.dim();
  ModuleDescriptor d;
  d.module_id = id_;
  d.role = Role::client;
  d.inputs = deviation_specs("", n, file_.num_consensus);
  d.outputs = packet_specs("", n, 2 * file_.region.num_core);
  return d;
}

WireMessage ClientModule::handle(const WireMessage& command) {
  return answer(command, id_, [&]() -> WireMessage {
    switch (command.type) {
      case MessageType::sim_setup: {
        run_id_ = command.run_id;
        local_ = std::make_unique<LocalModel>(make_local_model(file_.region, settings_.aladin));
        z_ = region_flat_start(file_.region);
        x_ = z_;
        lambda_ = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(file_.num_consensus));
        rho_ = settings_.aladin.rho0;
        last_dual_ = std::numeric_limits<double>::infinity();
        error_ = std::numeric_limits<double>::infinity();
        objective_ = std::numeric_limits<double>::quiet_NaN();
        last_packet_.clear();
        iterates_.clear();
        last_step_ = 0;
        running_ = true;
        setup_done_ = true;
        return reply_to(command, id_);
      }
      case MessageType::sim_step:
        return step(command);
      case MessageType::sim_stop: {
        running_ = false;
        WireMessage r = reply_to(command, id_);
        r.detail = {{"error", json_number(error_)}, {"iterations", iterates_.size()}};
        return r;
      }
      default:
        throw CosimError(CosimErrorKind::protocol, id_,
                         "unexpected " + to_string(command.type) + " command");
    }
  });
}

void ClientModule::publish(int iteration, const std::string& payload) {
  write_with_faults(*store_, make_message(run_id_, iteration, id_, kCoordinatorId, payload),
                    faults(), iteration);
}

WireMessage ClientModule::step(const WireMessage& command) {
  check_sequence(id_, setup_done_, run_id_, last_step_, command);
  last_step_ = command.step;
  const int k = command.step;
  const AladinConfig& cfg = settings_.aladin;
  double calc_s = 0.0;
  double storage_s = 0.0;

  if (running_ && k >= 2) {
    DeviationPayload dev;
    {
      ScopedTimer t(storage_s);
      const ExchangeMessage m = store_read(*store_, run_id_, kCoordinatorId, id_, k - 1);
      dev = decode_deviation(m.payload);
    }
    error_ = std::max(last_dual_, dev.primal_residual);
    if (dev.final) {
      running_ = false;
    } else if (settings_.policy == StoppedClientPolicy::republish && error_ <= cfg.eps) {
      running_ = false;
    } else {
      if (dev.delta.size() != x_.size() || static_cast<std::size_t>(dev.lambda.size()) != file_.num_consensus) {
        throw CosimError(CosimErrorKind::corrupt_message, id_, "deviation has the wrong dimensions");
      }
      z_ = x_ + dev.delta;
      lambda_ = dev.lambda;
      rho_ = std::min(rho_ * cfg.rho_growth, cfg.rho_max);
    }
  }

  if (running_) {
    LocalSolution sol;
    SensitivityPacket packet;
    {
      ScopedTimer t(calc_s);
      sol = local_step(*local_, z_, file_.coupling_block, lambda_, rho_, cfg.local_nlp);
      packet = sensitivities(*local_, sol, cfg);
      x_ = sol.x;
      last_dual_ = x_.size() ? (x_ - z_).cwiseAbs().maxCoeff() : 0.0;
      objective_ = sol.objective;
      iterates_.push_back(x_);
    }
    ScopedTimer t(storage_s);
    last_packet_ = encode_packet({packet, last_dual_});
    publish(k, last_packet_);
  } else if (settings_.policy == StoppedClientPolicy::republish && !last_packet_.empty()) {
    ScopedTimer t(storage_s);
    publish(k, last_packet_);
  }

  WireMessage r = reply_to(command, id_);
  r.detail = {{"running", running_},
              {"error", json_number(error_)},
              {"objective", json_number(objective_)},
              {"iterations", iterates_.size()},
              {"calc_s", calc_s},
              {"storage_s", storage_s}};
  return r;
}

Json ClientModule::final_report() const {
  Json iterates = Json::array();
  for (const auto& x : iterates_) iterates.push_back(vector_to_json(x));
  return {{"module_id", id_},
          {"region_id", file_.region.region_id},
          {"error", json_number(error_)},
          {"objective", json_number(objective_)},
          {"iterates", iterates}};
}

// Coordinator ---------------------------------------------------------------

CoordinatorModule::CoordinatorModule(CouplingSystem coupling, CoordinatorSettings settings,
                                     std::shared_ptr<ExchangeStore> store)
    : coupling_(std::move(coupling)), settings_(std::move(settings)), store_(std::move(store)) {
  settings_.aladin.validate();
  if (!store_) throw std::invalid_argument("coordinator needs an exchange store");
  for (const auto& a : coupling_.A) {
    std::set<Eigen::Index> rows;
    for (Eigen::Index c = 0; c < a.outerSize(); ++c) {
      for (SparseMatrix::InnerIterator it(a, c); it; ++it) rows.insert(it.row());
    }
    rows_of_.emplace_back(rows.begin(), rows.end());
  }
}

ModuleDescriptor CoordinatorModule::descriptor() const {
  ModuleDescriptor d;
  d.module_id = id_;
  d.role = Role::coordinator;
  for (std::size_t l = 0; l < coupling_.num_regions(); ++l) {
    const std::string prefix = client_module_id(static_cast<int>(l)) + ".";
    // Equality row counts are not known to the coordinator before the first packet.
    for (auto s : packet_specs(prefix, coupling_.dims[l], 0)) d.inputs.push_back(s);
    for (auto s : deviation_specs(prefix, coupling_.dims[l], coupling_.rows())) d.outputs.push_back(s);
  }
  return d;
}

WireMessage CoordinatorModule::handle(const WireMessage& command) {
  return answer(command, id_, [&]() -> WireMessage {
    switch (command.type) {
      case MessageType::sim_setup:
        run_id_ = command.run_id;
        last_step_ = 0;
        setup_done_ = true;
        return reply_to(command, id_);
      case MessageType::sim_step:
        return step(command);
      case MessageType::sim_stop:
        return reply_to(command, id_);
      default:
        throw CosimError(CosimErrorKind::protocol, id_,
                         "unexpected " + to_string(command.type) + " command");
    }
  });
}

ExchangeMessage CoordinatorModule::read_packet(std::size_t region, int iteration) {
  const std::string producer = client_module_id(static_cast<int>(region));
  const auto deadline = Clock::now() + settings_.read_wait;
  for (;;) {
    try {
      return store_read(*store_, run_id_, producer, id_, iteration);
    } catch (const ExchangeError& e) {
      const bool retry = e.kind() == ExchangeErrorKind::missing ||
                         e.kind() == ExchangeErrorKind::iteration_mismatch ||
                         e.kind() == ExchangeErrorKind::corrupt;
      if (!retry || Clock::now() >= deadline) throw;
    }
    std::this_thread::sleep_for(settings_.poll_interval);
  }
}

WireMessage CoordinatorModule::step(const WireMessage& command) {
  check_sequence(id_, setup_done_, run_id_, last_step_, command);
  last_step_ = command.step;
  const int k = command.step;
  WireMessage r = reply_to(command, id_);
  if (k == 1) {
    r.detail = {{"running", false}, {"calc_s", 0.0}, {"storage_s", 0.0}};
    return r;
  }
  const int it = k - 1;
  const AladinConfig& cfg = settings_.aladin;
  const std::size_t regions = coupling_.num_regions();
  double calc_s = 0.0;
  double storage_s = 0.0;

  std::vector<SensitivityPacket> packets;
  std::vector<double> duals;
  {
    ScopedTimer t(storage_s);
    for (std::size_t l = 0; l < regions; ++l) {
      PacketPayload p = decode_packet(read_packet(l, it).payload, static_cast<int>(l));
      if (static_cast<std::size_t>(p.packet.x.size()) != coupling_.dims[l]) {
        throw CosimError(CosimErrorKind::corrupt_message, id_,
                         fmt::format("packet of region {} has dimension {}", l, p.packet.x.size()));
      }
      duals.push_back(p.dual_residual);
      packets.push_back(std::move(p.packet));
    }
  }

  double primal = 0.0;
  double dual = 0.0;
  bool converged = false;
  bool final = false;
  std::vector<double> region_primal(regions, 0.0);
  CoordinationResult step;
  {
    ScopedTimer t(calc_s);
    std::vector<Eigen::VectorXd> xs;
    for (const auto& p : packets) xs.push_back(p.x);
    const Eigen::VectorXd c = coupling_.residual(xs);
    primal = c.size() ? c.cwiseAbs().maxCoeff() : 0.0;
    for (double d : duals) dual = std::max(dual, d);
    for (std::size_t l = 0; l < regions; ++l) {
      for (Eigen::Index i : rows_of_[l]) region_primal[l] = std::max(region_primal[l], std::abs(c[i]));
    }
    converged = primal <= cfg.eps && dual <= cfg.eps;
    final = converged || it >= cfg.max_iter;
    if (!final) step = coordination_step(packets, coupling_, cfg.qp);
  }

  {
    ScopedTimer t(storage_s);
    for (std::size_t l = 0; l < regions; ++l) {
      DeviationPayload d;
      d.primal_residual = region_primal[l];
      d.final = final;
      d.converged = converged;
      if (!final) {
        d.delta = step.delta[l];
        d.lambda = step.lambda;
      }
      write_with_faults(*store_,
                        make_message(run_id_, it, id_, client_module_id(static_cast<int>(l)),
                                     encode_deviation(d)),
                        faults(), k);
    }
  }

  r.detail = {{"running", !final},
              {"iteration", it},
              {"primal", primal},
              {"dual", dual},
              {"converged", converged},
              {"calc_s", calc_s},
              {"storage_s", storage_s}};
  return r;
}

// Module runner -------------------------------------------------------------

ModuleExit run_module(Module& module, const RunnerOptions& options) {
  ModuleExit exit;
  Socket socket;
  auto send = [&](const WireMessage& m) {
    const std::string frame = encode_frame(m);
    if (options.on_send) options.on_send(frame);
    socket.send_all(frame);
  };
  try {
    socket = connect_to(options.master, options.connect_timeout);
    ModuleDescriptor d = module.descriptor();
    d.endpoint = socket.local_address();
    WireMessage hello;
    hello.type = MessageType::hello;
    hello.module_id = module.module_id();
    hello.status = "ok";
    hello.detail = descriptor_to_json(d);
    send(hello);
  } catch (const WireError& e) {
    exit.connection_lost = true;
    exit.error = e.what();
    return exit;
  }

  const FaultPlan& faults = module.faults();
  std::mt19937_64 rng(faults.seed);
  for (;;) {
    WireMessage command;
    try {
      command = socket.receive(options.idle_timeout);
    } catch (const WireError& e) {
      exit.connection_lost = e.kind() == WireErrorKind::closed;
      exit.error = e.what();
      return exit;
    }
    if (command.type == MessageType::sim_step) {
      if (faults.crash_at_step == command.step) {
        exit.crashed = true;
        if (options.hard_crash) std::raise(SIGKILL);
        socket.close();
        return exit;
      }
      if (faults.hang_at_step == command.step) continue;
    }
    if (faults.max_delay.count() > 0) {
      std::uniform_int_distribution<long long> delay(0, faults.max_delay.count());
      std::this_thread::sleep_for(std::chrono::milliseconds(delay(rng)));
    }
    const WireMessage reply = module.handle(command);
    if (command.type == MessageType::sim_stop) {
      exit.received_stop = true;
      try {
        send(reply);
      } catch (const WireError&) {
      }
      return exit;
    }
    try {
      send(reply);
    } catch (const WireError& e) {
      exit.connection_lost = true;
      exit.error = e.what();
      return exit;
    }
    if (command.type == MessageType::sim_step) ++exit.steps;
  }
}

// Master --------------------------------------------------------------------

void MasterConfig::validate() const {
  if (num_clients == 0) throw CosimError(CosimErrorKind::config, "", "master needs at least one client");
  if (step_timeout.count() <= 0 || connect_timeout.count() <= 0) {
    throw CosimError(CosimErrorKind::config, "", "timeouts must be positive");
  }
  if (max_steps < 0) throw CosimError(CosimErrorKind::config, "", "max_steps must be >= 0");
}

struct Master::Impl {
  struct Connection {
    Socket socket;
    std::thread reader;
    std::string id;
    Role role = Role::client;
    bool greeted = false;
    bool alive = true;
  };

  struct Event {
    std::size_t conn = 0;
    std::optional<WireMessage> message;
    WireErrorKind error = WireErrorKind::io;
    std::string what;
    Clock::time_point at;
  };

  MasterConfig config;
  Listener listener;
  std::vector<std::unique_ptr<Connection>> conns;
  std::mutex mutex;
  std::condition_variable cv;
  std::deque<Event> events;

  explicit Impl(MasterConfig c) : config(std::move(c)), listener(config.listen) {}

  ~Impl() {
    for (auto& c : conns) c->socket.shutdown();
    for (auto& c : conns) {
      if (c->reader.joinable()) c->reader.join();
    }
  }

  void push(Event e) {
    {
      std::lock_guard lock(mutex);
      events.push_back(std::move(e));
    }
    cv.notify_one();
  }

  std::optional<Event> pop(Clock::time_point deadline) {
    std::unique_lock lock(mutex);
    if (!cv.wait_until(lock, deadline, [&] { return !events.empty(); })) return std::nullopt;
    Event e = std::move(events.front());
    events.pop_front();
    return e;
  }

  void start_reader(std::size_t index) {
    Connection& c = *conns[index];
    c.reader = std::thread([this, index, &c] {
      for (;;) {
        try {
          WireMessage m = c.socket.receive();
          push({index, std::move(m), WireErrorKind::io, "", Clock::now()});
        } catch (const WireError& e) {
          push({index, std::nullopt, e.kind(), e.what(), Clock::now()});
          return;
        }
      }
    });
  }

  std::string name(std::size_t i) const {
    return conns[i]->id.empty() ? fmt::format("connection {}", i) : conns[i]->id;
  }

  [[noreturn]] void fail_transport(const Event& e) {
    conns[e.conn]->alive = false;
    const bool lost = e.error == WireErrorKind::closed || e.error == WireErrorKind::io;
    throw CosimError(lost ? CosimErrorKind::connection_lost : CosimErrorKind::frame_error,
                     name(e.conn), e.what);
  }

  void send(std::size_t i, const WireMessage& m) {
    try {
      conns[i]->socket.send(m);
    } catch (const WireError& e) {
      conns[i]->alive = false;
      throw CosimError(CosimErrorKind::connection_lost, name(i), e.what());
    }
  }

  WireMessage command(MessageType type, int step, std::size_t i) const {
    WireMessage m;
    m.type = type;
    m.run_id = config.run_id;
    m.step = step;
    m.module_id = conns[i]->id;
    m.status = "ok";
    return m;
  }

  void accept_modules() {
    const std::size_t total = config.num_clients + 1;
    const auto deadline = Clock::now() + config.connect_timeout;
    while (conns.size() < total) {
      const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - Clock::now());
      Socket s;
      try {
        s = listener.accept(std::max(left, std::chrono::milliseconds(0)));
      } catch (const WireError& e) {
        throw CosimError(CosimErrorKind::timeout, "",
                         fmt::format("{} of {} modules connected: {}", conns.size(), total, e.what()));
      }
      conns.push_back(std::make_unique<Connection>());
      conns.back()->socket = std::move(s);
      start_reader(conns.size() - 1);
    }
    std::size_t greeted = 0;
    std::set<std::string> ids;
    std::size_t coordinators = 0;
    while (greeted < total) {
      auto e = pop(deadline);
      if (!e) throw CosimError(CosimErrorKind::timeout, "", "modules did not say hello in time");
      if (!e->message) fail_transport(*e);
      Connection& c = *conns[e->conn];
      if (e->message->type != MessageType::hello || c.greeted) {
        throw CosimError(CosimErrorKind::protocol, name(e->conn),
                         "expected hello, got " + to_string(e->message->type));
      }
      ModuleDescriptor d;
      try {
        d = descriptor_from_json(e->message->detail);
        d.validate();
      } catch (const std::invalid_argument& ex) {
        throw CosimError(CosimErrorKind::config, e->message->module_id, ex.what());
      }
      if (d.module_id != e->message->module_id || !ids.insert(d.module_id).second) {
        throw CosimError(CosimErrorKind::config, d.module_id, "duplicate or inconsistent module id");
      }
      c.id = d.module_id;
      c.role = d.role;
      c.greeted = true;
      if (d.role == Role::coordinator) ++coordinators;
      ++greeted;
    }
    if (coordinators != 1) {
      throw CosimError(CosimErrorKind::config, "",
                       fmt::format("{} coordinators connected, exactly one required", coordinators));
    }
  }

  /// Waits for one reply per pending connection to `step`.
  template <typename F>
  void collect(std::set<std::size_t> pending, int step, F&& on_reply) {
    const auto deadline = Clock::now() + config.step_timeout;
    while (!pending.empty()) {
      auto e = pop(deadline);
      if (!e) {
        throw CosimError(CosimErrorKind::timeout, name(*pending.begin()),
                         fmt::format("no reply to step {} within {} ms", step,
                                     config.step_timeout.count()));
      }
      if (!e->message) fail_transport(*e);
      const WireMessage& m = *e->message;
      if (m.type != MessageType::reply || m.step != step || m.run_id != config.run_id ||
          !pending.count(e->conn)) {
        throw CosimError(CosimErrorKind::protocol, name(e->conn),
                         fmt::format("unexpected {} for step {} while waiting on step {}",
                                     to_string(m.type), m.step, step));
      }
      if (m.status != "ok") {
        const std::string kind = m.detail.value("error_kind", "protocol");
        throw CosimError(cosim_error_from_string(kind), name(e->conn),
                         m.detail.value("message", "module reported an error"));
      }
      on_reply(e->conn, m, e->at);
      pending.erase(e->conn);
    }
  }

  void broadcast_stop(RunReport& report, int step) {
    std::set<std::size_t> pending;
    for (std::size_t i = 0; i < conns.size(); ++i) {
      if (!conns[i]->alive) continue;
      try {
        conns[i]->socket.send(command(MessageType::sim_stop, step, i));
        report.stop_sent.push_back(name(i));
        pending.insert(i);
      } catch (const WireError&) {
        conns[i]->alive = false;
      }
    }
    const auto deadline = Clock::now() + config.stop_timeout;
    while (!pending.empty()) {
      auto e = pop(deadline);
      if (!e) break;
      pending.erase(e->conn);
    }
  }

  RunReport run() {
    RunReport report;
    report.run_id = config.run_id;
    const auto t0 = Clock::now();
    int step = 0;
    try {
      config.validate();
      accept_modules();
      std::size_t coordinator = 0;
      std::set<std::size_t> clients, all;
      for (std::size_t i = 0; i < conns.size(); ++i) {
        report.modules.push_back(conns[i]->id);
        all.insert(i);
        if (conns[i]->role == Role::coordinator) coordinator = i;
        else clients.insert(i);
      }

      for (std::size_t i : all) send(i, command(MessageType::sim_setup, 0, i));
      collect(all, 0, [](std::size_t, const WireMessage&, Clock::time_point) {});

      std::map<std::size_t, double> objective;
      for (;;) {
        ++step;
        if (config.max_steps > 0 && step > config.max_steps) {
          throw CosimError(CosimErrorKind::protocol, "", fmt::format("step limit {} reached", config.max_steps));
        }
        std::map<std::size_t, Clock::time_point> sent;
        auto timing = [&](std::size_t i, const WireMessage& m, Clock::time_point at) {
          StepTiming t;
          t.step = step;
          t.module_id = name(i);
          t.wall_s = std::chrono::duration<double>(at - sent[i]).count();
          t.calc_s = m.detail.value("calc_s", 0.0);
          t.storage_s = m.detail.value("storage_s", 0.0);
          t.sync_s = t.wall_s - t.calc_s - t.storage_s;
          report.timings.push_back(t);
        };

        sent[coordinator] = Clock::now();
        send(coordinator, command(MessageType::sim_step, step, coordinator));
        collect({coordinator}, step, [&](std::size_t i, const WireMessage& m, Clock::time_point at) {
          timing(i, m, at);
          if (m.detail.contains("primal")) {
            report.primal = m.detail.at("primal").get<double>();
            report.dual = m.detail.at("dual").get<double>();
            report.converged = m.detail.at("converged").get<bool>();
          }
        });

        for (std::size_t i : clients) {
          sent[i] = Clock::now();
          send(i, command(MessageType::sim_step, step, i));
        }
        bool any_running = false;
        collect(clients, step, [&](std::size_t i, const WireMessage& m, Clock::time_point at) {
          timing(i, m, at);
          const bool running = m.detail.value("running", false);
          any_running = any_running || running;
          report.client_errors[name(i)] = number_from_json(m.detail.value("error", Json("inf")));
          objective[i] = number_from_json(m.detail.value("objective", Json("nan")));
          report.iterations = std::max(report.iterations, m.detail.value("iterations", 0));
        });
        report.steps = step;
        if (!any_running) break;
      }
      report.objective = 0.0;
      for (const auto& [i, f] : objective) report.objective += f;
      report.completed = true;
    } catch (const CosimError& e) {
      report.error = e.kind();
      report.error_module = e.module_id();
      report.error_message = e.what();
      report.converged = false;
    }
    broadcast_stop(report, step + 1);
    report.wall_s = seconds_since(t0);
    return report;
  }
};

Master::Master(MasterConfig config) : impl_(std::make_unique<Impl>(std::move(config))) {}
Master::~Master() = default;
int Master::port() const { return impl_->listener.port(); }
RunReport Master::run() { return impl_->run(); }

Json report_to_json(const RunReport& r) {
  Json timings = Json::array();
  for (const auto& t : r.timings) {
    timings.push_back({{"step", t.step},
                       {"module_id", t.module_id},
                       {"wall_s", t.wall_s},
                       {"calc_s", t.calc_s},
                       {"storage_s", t.storage_s},
                       {"sync_s", t.sync_s}});
  }
  Json errors = Json::object();
  for (const auto& [id, e] : r.client_errors) errors[id] = json_number(e);
  return {{"run_id", r.run_id},
          {"completed", r.completed},
          {"converged", r.converged},
          {"steps", r.steps},
          {"iterations", r.iterations},
          {"objective", json_number(r.objective)},
          {"primal", json_number(r.primal)},
          {"dual", json_number(r.dual)},
          {"client_errors", errors},
          {"modules", r.modules},
          {"stop_sent", r.stop_sent},
          {"error_kind", to_string(r.error)},
          {"error_module", r.error_module},
          {"message", r.error_message},
          {"wall_s", r.wall_s},
          {"timings", timings}};
}

Json aladin_config_to_json(const AladinConfig& c) {
  return {{"rho0", c.rho0},
          {"rho_growth", c.rho_growth},
          {"rho_max", c.rho_max},
          {"sigma_voltage", c.sigma_voltage},
          {"sigma_power", c.sigma_power},
          {"eps", c.eps},
          {"max_iter", c.max_iter},
          {"mu", c.mu},
          {"reg_delta", c.reg_delta},
          {"regularization", to_string(c.regularization)},
          {"local_nlp", nlp_options_to_json(c.local_nlp)},
          {"qp", nlp_options_to_json(c.qp)}};
}

AladinConfig aladin_config_from_json(const Json& j) {
  AladinConfig c;
  try {
    c.rho0 = j.value("rho0", c.rho0);
    c.rho_growth = j.value("rho_growth", c.rho_growth);
    c.rho_max = j.value("rho_max", c.rho_max);
    c.sigma_voltage = j.value("sigma_voltage", c.sigma_voltage);
    c.sigma_power = j.value("sigma_power", c.sigma_power);
    c.eps = j.value("eps", c.eps);
    c.max_iter = j.value("max_iter", c.max_iter);
    c.mu = j.value("mu", c.mu);
    c.reg_delta = j.value("reg_delta", c.reg_delta);
    if (j.contains("regularization")) {
      c.regularization = regularization_from_string(j.at("regularization").get<std::string>());
    }
    if (j.contains("local_nlp")) c.local_nlp = nlp_options_from_json(j.at("local_nlp"), c.local_nlp);
    if (j.contains("qp")) c.qp = nlp_options_from_json(j.at("qp"), c.qp);
  } catch (const Json::exception& e) {
    throw std::invalid_argument(std::string("bad ALADIN settings: ") + e.what());
  }
  c.validate();
  return c;
}

Json cosim_schema() {
  return {{"wire_version", kWireVersion},
          {"max_frame_bytes", kMaxFrameBytes},
          {"frame", "4-byte big-endian body length, then a JSON body"},
          {"wire_body", {"v", "type", "run_id", "step", "module_id", "status", "detail"}},
          {"wire_types", {"hello", "sim_setup", "sim_step", "sim_stop", "reply"}},
          {"reply_detail",
           {"running", "error", "objective", "iterations", "iteration", "primal", "dual",
            "converged", "calc_s", "storage_s", "error_kind", "message"}},
          {"descriptor", {"module_id", "role", "inputs", "outputs", "endpoint"}},
          {"vector_spec", {"name", "rows", "cols"}},
          {"store_layout", "<run_id>/<producer>_to_<consumer>.msg"},
          {"exchange", exchange_schema()}};
}

std::set<std::string> cosim_schema_keys() {
  std::set<std::string> keys;
  const Json schema = cosim_schema();
  for (const char* part : {"wire_body", "reply_detail", "descriptor", "vector_spec"}) {
    for (const auto& k : schema.at(part)) keys.insert(k.get<std::string>());
  }
  for (const auto& [part, fields] : schema.at("exchange").items()) {
    if (!fields.is_array()) continue;
    for (const auto& k : fields) keys.insert(k.get<std::string>());
  }
  return keys;
}

// In-process run ------------------------------------------------------------

std::vector<RegionFile> make_region_files(const std::vector<RegionModel>& regions,
                                          const CouplingSystem& coupling) {
  std::vector<RegionFile> files;
  for (std::size_t l = 0; l < regions.size(); ++l) {
    files.push_back({regions[l], coupling.A[l], coupling.rows()});
  }
  return files;
}

LocalRunResult run_cosim_threads(const std::vector<RegionFile>& regions,
                                 const CouplingSystem& coupling, const LocalRunOptions& options) {
  auto store = options.store ? options.store : std::make_shared<MemoryStore>();
  MasterConfig mc;
  mc.listen = {"127.0.0.1", 0};
  mc.num_clients = regions.size();
  mc.run_id = options.run_id;
  mc.step_timeout = options.step_timeout;
  mc.connect_timeout = options.step_timeout;
  auto master = std::make_unique<Master>(mc);

  std::vector<std::unique_ptr<ClientModule>> clients;
  for (const auto& f : regions) {
    clients.push_back(std::make_unique<ClientModule>(parse_region_file(region_file_json(f)),
                                                     ClientSettings{options.aladin, options.policy},
                                                     store));
  }
  CoordinatorSettings cs;
  cs.aladin = options.aladin;
  cs.read_wait = options.read_wait;
  CoordinatorModule coordinator(parse_coupling(coupling_json(coupling)), cs, store);

  std::vector<Module*> modules;
  for (auto& c : clients) modules.push_back(c.get());
  modules.push_back(&coordinator);
  for (Module* m : modules) {
    const auto it = options.faults.find(m->module_id());
    if (it != options.faults.end()) m->set_faults(it->second);
  }
  if (options.shuffle_start) {
    std::mt19937_64 rng(options.seed);
    std::shuffle(modules.begin(), modules.end(), rng);
  }

  LocalRunResult result;
  std::mutex wire_mutex;
  RunnerOptions ro;
  ro.master = {"127.0.0.1", master->port()};
  ro.connect_timeout = options.step_timeout;
  ro.idle_timeout = options.step_timeout * 4;
  if (options.capture_wire) {
    ro.on_send = [&](std::string_view frame) {
      std::lock_guard lock(wire_mutex);
      result.wire.emplace_back(frame);
    };
  }
  std::vector<ModuleExit> exits(modules.size());
  std::vector<std::thread> threads;
  for (std::size_t i = 0; i < modules.size(); ++i) {
    threads.emplace_back([&, i] { exits[i] = run_module(*modules[i], ro); });
  }
  result.report = master->run();
  master.reset();  // closes the command channel of modules that never got sim_stop
  for (auto& t : threads) t.join();
  for (std::size_t i = 0; i < modules.size(); ++i) result.exits[modules[i]->module_id()] = exits[i];
  for (const auto& c : clients) result.iterates.push_back(c->iterates());
  return result;
}

}  // namespace dopf
