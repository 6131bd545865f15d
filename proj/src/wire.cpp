#include "dopf/wire.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <thread>

#include <fmt/format.h>

namespace dopf {
namespace {

using Clock = std::chrono::steady_clock;
using nlohmann::json;

std::string errno_text() { return std::strerror(errno); }

int remaining_ms(Clock::time_point deadline) {
  const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - Clock::now());
  return static_cast<int>(std::max<long long>(0, left.count()));
}

std::uint32_t read_length(const char* p) {
  const auto* u = reinterpret_cast<const unsigned char*>(p);
  return (std::uint32_t{u[0]} << 24) | (std::uint32_t{u[1]} << 16) | (std::uint32_t{u[2]} << 8) |
         std::uint32_t{u[3]};
}

sockaddr_in resolve(const Endpoint& e) {
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(static_cast<std::uint16_t>(e.port));
  if (inet_pton(AF_INET, e.host.c_str(), &addr.sin_addr) == 1) return addr;
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  if (getaddrinfo(e.host.c_str(), nullptr, &hints, &res) != 0 || !res) {
    throw WireError(WireErrorKind::io, "cannot resolve host '" + e.host + "'");
  }
  addr.sin_addr = reinterpret_cast<sockaddr_in*>(res->ai_addr)->sin_addr;
  freeaddrinfo(res);
  return addr;
}

}  // namespace

std::string to_string(MessageType type) {
  switch (type) {
    case MessageType::hello: return "hello";
    case MessageType::sim_setup: return "sim_setup";
    case MessageType::sim_step: return "sim_step";
    case MessageType::sim_stop: return "sim_stop";
    case MessageType::reply: return "reply";
  }
  return "unknown";
}

std::string to_string(WireErrorKind kind) {
  switch (kind) {
    case WireErrorKind::truncated: return "truncated";
    case WireErrorKind::oversize: return "oversize";
    case WireErrorKind::malformed: return "malformed";
    case WireErrorKind::unknown_type: return "unknown_type";
    case WireErrorKind::version: return "version";
    case WireErrorKind::closed: return "closed";
    case WireErrorKind::timeout: return "timeout";
    case WireErrorKind::io: return "io";
  }
  return "unknown";
}

WireError::WireError(WireErrorKind kind, const std::string& what)
    : std::runtime_error(what), kind_(kind) {}

std::string encode_body(const WireMessage& m) {
  json body = {{"v", kWireVersion},         {"type", to_string(m.type)},
               {"run_id", m.run_id},        {"step", m.step},
               {"module_id", m.module_id},  {"status", m.status},
               {"detail", m.detail}};
  return body.dump();
}

WireMessage decode_body(std::string_view text) {
  json body;
  try {
    body = json::parse(text);
  } catch (const json::parse_error& e) {
    throw WireError(WireErrorKind::malformed, std::string("frame body is not JSON: ") + e.what());
  }
  if (!body.is_object()) throw WireError(WireErrorKind::malformed, "frame body is not an object");
  try {
    if (body.at("v").get<int>() != kWireVersion) {
      throw WireError(WireErrorKind::version,
                      fmt::format("wire version {} not supported", body.at("v").dump()));
    }
    WireMessage m;
    const auto type = body.at("type").get<std::string>();
    if (type == "hello") m.type = MessageType::hello;
    else if (type == "sim_setup") m.type = MessageType::sim_setup;
    else if (type == "sim_step") m.type = MessageType::sim_step;
    else if (type == "sim_stop") m.type = MessageType::sim_stop;
    else if (type == "reply") m.type = MessageType::reply;
    else throw WireError(WireErrorKind::unknown_type, "unknown message type '" + type + "'");
    m.run_id = body.at("run_id").get<std::uint64_t>();
    m.step = body.at("step").get<int>();
    m.module_id = body.at("module_id").get<std::string>();
    m.status = body.at("status").get<std::string>();
    m.detail = body.value("detail", json::object());
    return m;
  } catch (const json::exception& e) {
    throw WireError(WireErrorKind::malformed, std::string("bad frame body: ") + e.what());
  }
}

std::string encode_frame(const WireMessage& m) {
  const std::string body = encode_body(m);
  if (body.size() > kMaxFrameBytes) {
    throw WireError(WireErrorKind::oversize,
                    fmt::format("frame body of {} bytes exceeds {}", body.size(), kMaxFrameBytes));
  }
  const auto n = static_cast<std::uint32_t>(body.size());
  std::string out(4, '\0');
  out[0] = static_cast<char>((n >> 24) & 0xff);
  out[1] = static_cast<char>((n >> 16) & 0xff);
  out[2] = static_cast<char>((n >> 8) & 0xff);
  out[3] = static_cast<char>(n & 0xff);
  return out + body;
}

WireMessage decode_frame(std::string_view frame) {
  if (frame.size() < 4) throw WireError(WireErrorKind::truncated, "frame shorter than its prefix");
  const std::uint32_t n = read_length(frame.data());
  if (n > kMaxFrameBytes) {
    throw WireError(WireErrorKind::oversize, fmt::format("frame length {} exceeds {}", n, kMaxFrameBytes));
  }
  if (frame.size() - 4 < n) {
    throw WireError(WireErrorKind::truncated,
                    fmt::format("frame declares {} bytes, {} present", n, frame.size() - 4));
  }
  if (frame.size() - 4 > n) {
    throw WireError(WireErrorKind::malformed,
                    fmt::format("frame declares {} bytes, {} present", n, frame.size() - 4));
  }
  return decode_body(frame.substr(4));
}

Socket::Socket(Socket&& other) noexcept : fd_(other.fd_) { other.fd_ = -1; }

Socket& Socket::operator=(Socket&& other) noexcept {
  if (this != &other) {
    close();
    fd_ = other.fd_;
    other.fd_ = -1;
  }
  return *this;
}

Socket::~Socket() { close(); }

void Socket::close() {
  if (fd_ >= 0) {
    ::close(fd_);
    fd_ = -1;
  }
}

void Socket::shutdown() {
  if (fd_ >= 0) ::shutdown(fd_, SHUT_RDWR);
}

void Socket::send_all(std::string_view bytes) {
  std::size_t sent = 0;
  while (sent < bytes.size()) {
    const ssize_t n = ::send(fd_, bytes.data() + sent, bytes.size() - sent, MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw WireError(WireErrorKind::closed, "send failed: " + errno_text());
    }
    sent += static_cast<std::size_t>(n);
  }
}

void Socket::read_exact(char* out, std::size_t n, Clock::time_point deadline, bool has_deadline,
                        bool frame_started) {
  std::size_t got = 0;
  while (got < n) {
    pollfd p{fd_, POLLIN, 0};
    const int r = ::poll(&p, 1, has_deadline ? remaining_ms(deadline) : -1);
    if (r < 0) {
      if (errno == EINTR) continue;
      throw WireError(WireErrorKind::io, "poll failed: " + errno_text());
    }
    if (r == 0) throw WireError(WireErrorKind::timeout, "timed out waiting for a frame");
    const ssize_t k = ::recv(fd_, out + got, n - got, 0);
    if (k < 0) {
      if (errno == EINTR) continue;
      if (errno == ECONNRESET && !frame_started && got == 0) {
        throw WireError(WireErrorKind::closed, "connection reset by peer");
      }
      throw WireError(frame_started || got > 0 ? WireErrorKind::truncated : WireErrorKind::closed,
                      "recv failed: " + errno_text());
    }
    if (k == 0) {
      if (!frame_started && got == 0) throw WireError(WireErrorKind::closed, "connection closed");
      throw WireError(WireErrorKind::truncated, "connection closed inside a frame");
    }
    got += static_cast<std::size_t>(k);
  }
}

WireMessage Socket::receive(std::chrono::milliseconds timeout) {
  const bool has_deadline = timeout.count() >= 0;
  const auto deadline = Clock::now() + (has_deadline ? timeout : std::chrono::milliseconds(0));
  char prefix[4];
  read_exact(prefix, 4, deadline, has_deadline, false);
  const std::uint32_t n = read_length(prefix);
  if (n > kMaxFrameBytes) {
    throw WireError(WireErrorKind::oversize, fmt::format("frame length {} exceeds {}", n, kMaxFrameBytes));
  }
  std::string body(n, '\0');
  read_exact(body.data(), n, deadline, has_deadline, true);
  return decode_body(body);
}

std::string Socket::local_address() const {
  sockaddr_in addr{};
  socklen_t len = sizeof(addr);
  if (::getsockname(fd_, reinterpret_cast<sockaddr*>(&addr), &len) != 0) return "";
  char host[INET_ADDRSTRLEN] = {};
  inet_ntop(AF_INET, &addr.sin_addr, host, sizeof(host));
  return fmt::format("{}:{}", host, ntohs(addr.sin_port));
}

Endpoint parse_endpoint(const std::string& text) {
  const auto colon = text.rfind(':');
  if (colon == std::string::npos || colon + 1 == text.size()) {
    throw std::invalid_argument("address '" + text + "' is not host:port");
  }
  Endpoint e;
  e.host = colon == 0 ? "127.0.0.1" : text.substr(0, colon);
  try {
    std::size_t used = 0;
    e.port = std::stoi(text.substr(colon + 1), &used);
    if (used != text.size() - colon - 1) throw std::invalid_argument("port");
  } catch (const std::exception&) {
    throw std::invalid_argument("address '" + text + "' has a bad port");
  }
  if (e.port < 0 || e.port > 65535) throw std::invalid_argument("port out of range in '" + text + "'");
  return e;
}

Listener::Listener(const Endpoint& at) {
  fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd_ < 0) throw WireError(WireErrorKind::io, "socket failed: " + errno_text());
  const int one = 1;
  ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
  sockaddr_in addr = resolve(at);
  if (::bind(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0 ||
      ::listen(fd_, 64) != 0) {
    const std::string msg = errno_text();
    ::close(fd_);
    throw WireError(WireErrorKind::io, fmt::format("cannot listen on {}:{}: {}", at.host, at.port, msg));
  }
  socklen_t len = sizeof(addr);
  ::getsockname(fd_, reinterpret_cast<sockaddr*>(&addr), &len);
  port_ = ntohs(addr.sin_port);
}

Listener::~Listener() {
  if (fd_ >= 0) ::close(fd_);
}

Socket Listener::accept(std::chrono::milliseconds timeout) {
  const auto deadline = Clock::now() + timeout;
  for (;;) {
    pollfd p{fd_, POLLIN, 0};
    const int r = ::poll(&p, 1, remaining_ms(deadline));
    if (r < 0 && errno == EINTR) continue;
    if (r < 0) throw WireError(WireErrorKind::io, "poll failed: " + errno_text());
    if (r == 0) throw WireError(WireErrorKind::timeout, "no module connected in time");
    const int fd = ::accept(fd_, nullptr, nullptr);
    if (fd < 0) {
      if (errno == EINTR || errno == ECONNABORTED) continue;
      throw WireError(WireErrorKind::io, "accept failed: " + errno_text());
    }
    const int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
    return Socket(fd);
  }
}

Socket connect_to(const Endpoint& to, std::chrono::milliseconds timeout) {
  const auto deadline = Clock::now() + timeout;
  const sockaddr_in addr = resolve(to);
  for (;;) {
    const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd < 0) throw WireError(WireErrorKind::io, "socket failed: " + errno_text());
    if (::connect(fd, reinterpret_cast<const sockaddr*>(&addr), sizeof(addr)) == 0) {
      const int one = 1;
      ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
      return Socket(fd);
    }
    const std::string msg = errno_text();
    ::close(fd);
    if (Clock::now() >= deadline) {
      throw WireError(WireErrorKind::timeout,
                      fmt::format("cannot connect to {}:{}: {}", to.host, to.port, msg));
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
  }
}

}  // namespace dopf
