#include "dopf/exchange.hpp"

#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <fstream>
#include <sstream>

#include <fmt/format.h>
#include <zlib.h>

namespace dopf {
namespace {

std::uint32_t crc(std::string_view bytes) {
  uLong c = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; payloads stay far below 4 GiB.
  c = crc32(c, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size()));
  return static_cast<std::uint32_t>(c);
}

Json parse_payload(std::string_view payload) {
  try {
    return Json::parse(payload);
  } catch (const Json::parse_error& e) {
    throw ExchangeError(ExchangeErrorKind::malformed, std::string("payload is not JSON: ") + e.what());
  }
}

template <typename F>
auto guarded(F&& f) {
  try {
    return f();
  } catch (const FormatError& e) {
    throw ExchangeError(ExchangeErrorKind::malformed, e.what());
  } catch (const Json::exception& e) {
    throw ExchangeError(ExchangeErrorKind::malformed, e.what());
  }
}

}  // namespace

std::string client_module_id(int region_id) { return fmt::format("region{}", region_id); }

std::string message_file_name(const std::string& producer, const std::string& consumer) {
  return producer + "_to_" + consumer + ".msg";
}

std::string to_string(ExchangeErrorKind kind) {
  switch (kind) {
    case ExchangeErrorKind::missing: return "missing";
    case ExchangeErrorKind::iteration_mismatch: return "iteration_mismatch";
    case ExchangeErrorKind::corrupt: return "corrupt";
    case ExchangeErrorKind::version: return "version";
    case ExchangeErrorKind::malformed: return "malformed";
    case ExchangeErrorKind::io: return "io";
  }
  return "unknown";
}

ExchangeError::ExchangeError(ExchangeErrorKind kind, const std::string& what)
    : std::runtime_error(what), kind_(kind) {}

ExchangeMessage make_message(std::uint64_t run_id, int iteration, const std::string& producer,
                             const std::string& consumer, std::string payload) {
  ExchangeMessage m;
  m.header.run_id = run_id;
  m.header.iteration = iteration;
  m.header.producer = producer;
  m.header.consumer = consumer;
  m.header.checksum = crc(payload);
  m.header.payload_bytes = payload.size();
  m.payload = std::move(payload);
  return m;
}

std::string message_bytes(const ExchangeMessage& m) {
  const MessageHeader& h = m.header;
  Json header = {{"schema_version", h.schema_version}, {"run_id", h.run_id},
                 {"iteration", h.iteration},           {"producer", h.producer},
                 {"consumer", h.consumer},             {"checksum", h.checksum},
                 {"payload_bytes", h.payload_bytes}};
  return header.dump() + "\n" + m.payload;
}

ExchangeMessage parse_message(std::string_view bytes) {
  const auto nl = bytes.find('\n');
  if (nl == std::string_view::npos) {
    throw ExchangeError(ExchangeErrorKind::corrupt, "message has no header line");
  }
  Json header;
  try {
    header = Json::parse(bytes.substr(0, nl));
  } catch (const Json::parse_error&) {
    throw ExchangeError(ExchangeErrorKind::corrupt, "message header is unreadable");
  }
  ExchangeMessage m;
  try {
    m.header.schema_version = header.at("schema_version").get<int>();
    m.header.run_id = header.at("run_id").get<std::uint64_t>();
    m.header.iteration = header.at("iteration").get<int>();
    m.header.producer = header.at("producer").get<std::string>();
    m.header.consumer = header.at("consumer").get<std::string>();
    m.header.checksum = header.at("checksum").get<std::uint32_t>();
    m.header.payload_bytes = header.at("payload_bytes").get<std::size_t>();
  } catch (const Json::exception& e) {
    throw ExchangeError(ExchangeErrorKind::corrupt, std::string("bad message header: ") + e.what());
  }
  if (m.header.schema_version != kSchemaVersion) {
    throw ExchangeError(ExchangeErrorKind::version,
                        fmt::format("schema version {} where {} expected", m.header.schema_version,
                                    kSchemaVersion));
  }
  const std::string_view payload = bytes.substr(nl + 1);
  if (payload.size() != m.header.payload_bytes) {
    throw ExchangeError(ExchangeErrorKind::corrupt,
                        fmt::format("payload has {} bytes, header declares {}", payload.size(),
                                    m.header.payload_bytes));
  }
  if (crc(payload) != m.header.checksum) {
    throw ExchangeError(ExchangeErrorKind::corrupt, "payload checksum mismatch");
  }
  m.payload = std::string(payload);
  return m;
}

DirectoryStore::DirectoryStore(std::filesystem::path root) : root_(std::move(root)) {}

std::filesystem::path DirectoryStore::run_dir(std::uint64_t run_id) const {
  return root_ / std::to_string(run_id);
}

void DirectoryStore::put(std::uint64_t run_id, const std::string& name, std::string_view bytes) {
  static std::atomic<unsigned long> counter{0};
  std::error_code ec;
  const auto dir = run_dir(run_id);
  std::filesystem::create_directories(dir, ec);
  if (ec) throw ExchangeError(ExchangeErrorKind::io, "cannot create " + dir.string() + ": " + ec.message());
  const auto tmp = dir / fmt::format(".{}.{}.{}.tmp", name, ::getpid(), counter++);
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw ExchangeError(ExchangeErrorKind::io, "write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, dir / name, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw ExchangeError(ExchangeErrorKind::io, "rename failed for " + (dir / name).string());
  }
}

std::optional<std::string> DirectoryStore::get(std::uint64_t run_id, const std::string& name) {
  std::ifstream in(run_dir(run_id) / name, std::ios::binary);
  if (!in) return std::nullopt;
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> DirectoryStore::list(std::uint64_t run_id) {
  std::vector<std::string> names;
  std::error_code ec;
  for (const auto& entry : std::filesystem::directory_iterator(run_dir(run_id), ec)) {
    const std::string name = entry.path().filename().string();
    if (entry.is_regular_file() && entry.path().extension() == ".msg") names.push_back(name);
  }
  std::sort(names.begin(), names.end());
  return names;
}

void DirectoryStore::put_torn(std::uint64_t run_id, const std::string& name, std::string_view bytes) {
  std::error_code ec;
  std::filesystem::create_directories(run_dir(run_id), ec);
  std::ofstream out(run_dir(run_id) / name, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

void MemoryStore::put(std::uint64_t run_id, const std::string& name, std::string_view bytes) {
  std::lock_guard lock(mutex_);
  files_[{run_id, name}] = std::string(bytes);
  log_.emplace_back(bytes);
}

std::optional<std::string> MemoryStore::get(std::uint64_t run_id, const std::string& name) {
  std::lock_guard lock(mutex_);
  const auto it = files_.find({run_id, name});
  if (it == files_.end()) return std::nullopt;
  return it->second;
}

std::vector<std::string> MemoryStore::list(std::uint64_t run_id) {
  std::lock_guard lock(mutex_);
  std::vector<std::string> names;
  for (const auto& [key, bytes] : files_) {
    if (key.first == run_id) names.push_back(key.second);
  }
  return names;
}

void MemoryStore::put_torn(std::uint64_t run_id, const std::string& name, std::string_view bytes) {
  put(run_id, name, bytes);
}

std::vector<std::string> MemoryStore::written() const {
  std::lock_guard lock(mutex_);
  return log_;
}

void store_write(ExchangeStore& store, const ExchangeMessage& m) {
  store.put(m.header.run_id, message_file_name(m.header.producer, m.header.consumer),
            message_bytes(m));
}

ExchangeMessage store_read(ExchangeStore& store, std::uint64_t run_id, const std::string& producer,
                           const std::string& consumer, int expected_iteration) {
  const std::string name = message_file_name(producer, consumer);
  const auto bytes = store.get(run_id, name);
  if (!bytes) {
    throw ExchangeError(ExchangeErrorKind::missing, fmt::format("{} not found in run {}", name, run_id));
  }
  ExchangeMessage m = parse_message(*bytes);
  if (m.header.run_id != run_id || m.header.producer != producer || m.header.consumer != consumer) {
    throw ExchangeError(ExchangeErrorKind::malformed, name + " carries a foreign header");
  }
  if (m.header.iteration != expected_iteration) {
    throw ExchangeError(ExchangeErrorKind::iteration_mismatch,
                        fmt::format("{} is stamped iteration {}, expected {}", name,
                                    m.header.iteration, expected_iteration));
  }
  return m;
}

std::string encode_packet(const PacketPayload& p) {
  const SensitivityPacket& s = p.packet;
  Json j = {{"x", vector_to_json(s.x)},
            {"gradient", vector_to_json(s.gradient)},
            {"jacobian", sparse_to_json(s.jacobian)},
            {"hessian", sparse_to_json(s.hessian)},
            {"delta_lower", vector_to_json(s.delta_lower)},
            {"delta_upper", vector_to_json(s.delta_upper)},
            {"dual_residual", p.dual_residual}};
  return j.dump();
}

PacketPayload decode_packet(std::string_view payload, int region_id) {
  const Json j = parse_payload(payload);
  return guarded([&] {
    PacketPayload p;
    p.packet.region_id = region_id;
    p.packet.x = vector_from_json(j.at("x"));
    p.packet.gradient = vector_from_json(j.at("gradient"));
    p.packet.jacobian = sparse_from_json(j.at("jacobian"));
    p.packet.hessian = sparse_from_json(j.at("hessian"));
    p.packet.delta_lower = vector_from_json(j.at("delta_lower"));
    p.packet.delta_upper = vector_from_json(j.at("delta_upper"));
    p.dual_residual = j.at("dual_residual").get<double>();
    const Eigen::Index n = p.packet.x.size();
    if (p.packet.gradient.size() != n || p.packet.delta_lower.size() != n ||
        p.packet.delta_upper.size() != n || p.packet.jacobian.cols() != n ||
        p.packet.hessian.rows() != n || p.packet.hessian.cols() != n) {
      throw FormatError("packet dimensions disagree");
    }
    return p;
  });
}

std::string encode_deviation(const DeviationPayload& d) {
  Json j = {{"delta", vector_to_json(d.delta)},
            {"lambda", vector_to_json(d.lambda)},
            {"primal_residual", d.primal_residual},
            {"final", d.final},
            {"converged", d.converged}};
  return j.dump();
}

DeviationPayload decode_deviation(std::string_view payload) {
  const Json j = parse_payload(payload);
  return guarded([&] {
    DeviationPayload d;
    d.delta = vector_from_json(j.at("delta"));
    d.lambda = vector_from_json(j.at("lambda"));
    d.primal_residual = j.at("primal_residual").get<double>();
    d.final = j.at("final").get<bool>();
    d.converged = j.at("converged").get<bool>();
    return d;
  });
}

Json exchange_schema() {
  return {
      {"version", kSchemaVersion},
      {"header",
       {"schema_version", "run_id", "iteration", "producer", "consumer", "checksum",
        "payload_bytes"}},
      {"packet",
       {"x", "gradient", "jacobian", "hessian", "delta_lower", "delta_upper", "dual_residual"}},
      {"deviation", {"delta", "lambda", "primal_residual", "final", "converged"}},
      {"sparse_matrix", {"rows", "cols", "i", "j", "v"}},
  };
}

}  // namespace dopf
