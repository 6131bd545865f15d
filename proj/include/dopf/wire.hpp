#pragma once

#include <chrono>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

#include <json.hpp>

namespace dopf {

/// Largest command body accepted on the wire. Bulk data goes through the
/// exchange store, never through the command channel.
inline constexpr std::size_t kMaxFrameBytes = 1u << 20;
inline constexpr int kWireVersion = 1;

enum class MessageType { hello, sim_setup, sim_step, sim_stop, reply };

std::string to_string(MessageType type);

/// Command-channel message. The body is JSON:
/// {"v", "type", "run_id", "step", "module_id", "status", "detail"}.
struct WireMessage {
  MessageType type = MessageType::reply;
  std::uint64_t run_id = 0;
  int step = 0;
  std::string module_id;
  std::string status;
  nlohmann::json detail = nlohmann::json::object();

  bool operator==(const WireMessage&) const = default;
};

enum class WireErrorKind { truncated, oversize, malformed, unknown_type, version, closed, timeout, io };

std::string to_string(WireErrorKind kind);

class WireError : public std::runtime_error {
 public:
  WireError(WireErrorKind kind, const std::string& what);
  WireErrorKind kind() const noexcept { return kind_; }

 private:
  WireErrorKind kind_;
};

std::string encode_body(const WireMessage& m);
WireMessage decode_body(std::string_view body);

/// 4-byte big-endian body length followed by the body. Throws oversize when
/// the body exceeds kMaxFrameBytes.
std::string encode_frame(const WireMessage& m);

/// Decodes exactly one frame; the buffer length must match the prefix.
WireMessage decode_frame(std::string_view frame);

/// Connected TCP stream owning its descriptor.
class Socket {
 public:
  Socket() = default;
  explicit Socket(int fd) : fd_(fd) {}
  Socket(Socket&& other) noexcept;
  Socket& operator=(Socket&& other) noexcept;
  Socket(const Socket&) = delete;
  Socket& operator=(const Socket&) = delete;
  ~Socket();

  int fd() const { return fd_; }
  bool valid() const { return fd_ >= 0; }
  void close();
  /// shutdown(2) both directions; unblocks a reader in another thread.
  void shutdown();

  void send_all(std::string_view bytes);
  void send(const WireMessage& m) { send_all(encode_frame(m)); }

  /// Reads one frame. Throws WireError: closed on EOF before a frame starts,
  /// truncated on EOF inside a frame, oversize before reading an oversized
  /// body, timeout when nothing complete arrives in time (a negative timeout
  /// waits forever).
  WireMessage receive(std::chrono::milliseconds timeout = std::chrono::milliseconds(-1));

  /// "host:port" of the local end.
  std::string local_address() const;

 private:
  void read_exact(char* out, std::size_t n, std::chrono::steady_clock::time_point deadline,
                  bool has_deadline, bool frame_started);

  int fd_ = -1;
};

struct Endpoint {
  std::string host = "127.0.0.1";
  int port = 0;
};

/// Parses "host:port"; throws std::invalid_argument.
Endpoint parse_endpoint(const std::string& text);

class Listener {
 public:
  explicit Listener(const Endpoint& at);
  Listener(const Listener&) = delete;
  Listener& operator=(const Listener&) = delete;
  ~Listener();

  int port() const { return port_; }
  /// Throws WireError(timeout) when no peer connects in time.
  Socket accept(std::chrono::milliseconds timeout);

 private:
  int fd_ = -1;
  int port_ = 0;
};

/// Retries until `timeout` while the peer refuses the connection.
Socket connect_to(const Endpoint& to, std::chrono::milliseconds timeout);

}  // namespace dopf
