#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

#include "dopf/aladin.hpp"
#include "dopf/io.hpp"

namespace dopf {

inline constexpr int kSchemaVersion = 1;
inline constexpr const char* kCoordinatorId = "coordinator";

/// Module id of the client for a region: "region<id>".
std::string client_module_id(int region_id);

/// "<producer>_to_<consumer>.msg"; one fixed file per direction and client.
std::string message_file_name(const std::string& producer, const std::string& consumer);

enum class ExchangeErrorKind { missing, iteration_mismatch, corrupt, version, malformed, io };

std::string to_string(ExchangeErrorKind kind);

class ExchangeError : public std::runtime_error {
 public:
  ExchangeError(ExchangeErrorKind kind, const std::string& what);
  ExchangeErrorKind kind() const noexcept { return kind_; }

 private:
  ExchangeErrorKind kind_;
};

struct MessageHeader {
  int schema_version = kSchemaVersion;
  std::uint64_t run_id = 0;
  int iteration = 0;
  std::string producer;
  std::string consumer;
  std::uint32_t checksum = 0;  // crc32 of the payload bytes
  std::size_t payload_bytes = 0;

  bool operator==(const MessageHeader&) const = default;
};

struct ExchangeMessage {
  MessageHeader header;
  std::string payload;
};

/// Fills checksum and payload size.
ExchangeMessage make_message(std::uint64_t run_id, int iteration, const std::string& producer,
                             const std::string& consumer, std::string payload);

/// Stored form: one line of header JSON, then the payload bytes.
std::string message_bytes(const ExchangeMessage& m);

/// Validates size, checksum and schema version.
ExchangeMessage parse_message(std::string_view bytes);

/// Key-value storage for message files, grouped by run.
class ExchangeStore {
 public:
  virtual ~ExchangeStore() = default;
  /// Readers see either the previous or the new content, never a mix.
  virtual void put(std::uint64_t run_id, const std::string& name, std::string_view bytes) = 0;
  virtual std::optional<std::string> get(std::uint64_t run_id, const std::string& name) = 0;
  virtual std::vector<std::string> list(std::uint64_t run_id) = 0;
  /// In-place partial write, used only to simulate a writer dying mid-file.
  virtual void put_torn(std::uint64_t run_id, const std::string& name, std::string_view bytes) = 0;
};

/// `<root>/<run_id>/<name>`, written through a temporary file and rename(2).
class DirectoryStore final : public ExchangeStore {
 public:
  explicit DirectoryStore(std::filesystem::path root);

  void put(std::uint64_t run_id, const std::string& name, std::string_view bytes) override;
  std::optional<std::string> get(std::uint64_t run_id, const std::string& name) override;
  std::vector<std::string> list(std::uint64_t run_id) override;
  void put_torn(std::uint64_t run_id, const std::string& name, std::string_view bytes) override;

  const std::filesystem::path& root() const { return root_; }
  std::filesystem::path run_dir(std::uint64_t run_id) const;

 private:
  std::filesystem::path root_;
};

/// In-process store that also keeps every byte ever written.
class MemoryStore final : public ExchangeStore {
 public:
  void put(std::uint64_t run_id, const std::string& name, std::string_view bytes) override;
  std::optional<std::string> get(std::uint64_t run_id, const std::string& name) override;
  std::vector<std::string> list(std::uint64_t run_id) override;
  void put_torn(std::uint64_t run_id, const std::string& name, std::string_view bytes) override;

  std::vector<std::string> written() const;

 private:
  mutable std::mutex mutex_;
  std::map<std::pair<std::uint64_t, std::string>, std::string> files_;
  std::vector<std::string> log_;
};

void store_write(ExchangeStore& store, const ExchangeMessage& m);

/// Reads producer -> consumer and checks the iteration stamp.
ExchangeMessage store_read(ExchangeStore& store, std::uint64_t run_id, const std::string& producer,
                           const std::string& consumer, int expected_iteration);

/// Client -> coordinator payload.
struct PacketPayload {
  SensitivityPacket packet;
  double dual_residual = 0.0;  // ||x_l - z_l||_inf
};

/// Coordinator -> client payload.
struct DeviationPayload {
  Eigen::VectorXd delta;
  Eigen::VectorXd lambda;
  double primal_residual = 0.0;  // over the consensus rows this region takes part in
  bool final = false;            // no further steps; delta and lambda are empty
  bool converged = false;
};

std::string encode_packet(const PacketPayload& p);
PacketPayload decode_packet(std::string_view payload, int region_id);

std::string encode_deviation(const DeviationPayload& d);
DeviationPayload decode_deviation(std::string_view payload);

/// Field names per record kind of the exchange store.
Json exchange_schema();

}  // namespace dopf
