#include <sys/socket.h>

#include <random>
#include <thread>

#include <gtest/gtest.h>

#include "dopf/io.hpp"
#include "dopf/wire.hpp"

namespace dopf {
namespace {

WireMessage sample(MessageType type, std::uint64_t run, int step) {
  WireMessage m;
  m.type = type;
  m.run_id = run;
  m.step = step;
  m.module_id = "region2";
  m.status = "ok";
  return m;
}

/// Connected loopback pair.
std::pair<Socket, Socket> socket_pair() {
  Listener listener({"127.0.0.1", 0});
  Socket client = connect_to({"127.0.0.1", listener.port()}, std::chrono::milliseconds(2000));
  Socket server = listener.accept(std::chrono::milliseconds(2000));
  return {std::move(client), std::move(server)};
}

std::string prefix(std::uint32_t n) {
  return {static_cast<char>(n >> 24), static_cast<char>((n >> 16) & 0xff),
          static_cast<char>((n >> 8) & 0xff), static_cast<char>(n & 0xff)};
}

/// Message whose encoded body has exactly `bytes` bytes.
WireMessage with_body_size(std::size_t bytes) {
  WireMessage m = sample(MessageType::reply, 1, 1);
  m.status.clear();
  const std::size_t base = encode_body(m).size();
  m.status = std::string(bytes - base, 'x');
  return m;
}

TEST(Wire, SimStopRoundTrip) {
  const WireMessage m = sample(MessageType::sim_stop, 7, 12);
  EXPECT_EQ(decode_frame(encode_frame(m)), m);
}

TEST(Wire, FrameLayoutIsBigEndianLengthThenBody) {
  const WireMessage m = sample(MessageType::sim_step, 3, 1);
  const std::string frame = encode_frame(m);
  const std::string body = encode_body(m);
  ASSERT_EQ(frame.size(), body.size() + 4);
  EXPECT_EQ(frame.substr(0, 4), prefix(static_cast<std::uint32_t>(body.size())));
  EXPECT_EQ(frame.substr(4), body);
  const Json j = Json::parse(body);
  EXPECT_EQ(j.at("type"), "sim_step");
  EXPECT_EQ(j.at("v"), kWireVersion);
}

TEST(Wire, RandomMessagesRoundTrip) {
  std::mt19937_64 rng(3);
  const MessageType types[] = {MessageType::hello, MessageType::sim_setup, MessageType::sim_step,
                               MessageType::sim_stop, MessageType::reply};
  for (int trial = 0; trial < 200; ++trial) {
    WireMessage m;
    m.type = types[rng() % 5];
    m.run_id = rng();
    m.step = static_cast<int>(rng() % 100000);
    m.module_id = "m" + std::to_string(rng() % 1000);
    m.status = trial % 3 ? "ok" : "error";
    m.detail = {{"error", static_cast<double>(rng() % 1000) / 7.0}, {"running", trial % 2 == 0}};
    EXPECT_EQ(decode_frame(encode_frame(m)), m);
  }
}

TEST(Wire, TruncatedFrameIsAFrameLengthError) {
  const std::string frame = encode_frame(sample(MessageType::sim_step, 1, 1));
  try {
    decode_frame(std::string_view(frame).substr(0, frame.size() - 3));
    FAIL();
  } catch (const WireError& e) {
    EXPECT_EQ(e.kind(), WireErrorKind::truncated);
  }
  EXPECT_THROW(decode_frame(frame.substr(0, 2)), WireError);
  EXPECT_THROW(decode_frame(frame + "x"), WireError);
}

TEST(Wire, UnknownTypeAndVersionAreRejected) {
  Json body = Json::parse(encode_body(sample(MessageType::sim_step, 1, 1)));
  body["type"] = "sim_pause";
  try {
    decode_body(body.dump());
    FAIL();
  } catch (const WireError& e) {
    EXPECT_EQ(e.kind(), WireErrorKind::unknown_type);
  }
  body["type"] = "sim_step";
  body["v"] = kWireVersion + 1;
  try {
    decode_body(body.dump());
    FAIL();
  } catch (const WireError& e) {
    EXPECT_EQ(e.kind(), WireErrorKind::version);
  }
  try {
    decode_body("{\"v\": 1");
    FAIL();
  } catch (const WireError& e) {
    EXPECT_EQ(e.kind(), WireErrorKind::malformed);
  }
}

TEST(Wire, CapBoundaryOnEncode) {
  ASSERT_EQ(encode_body(with_body_size(kMaxFrameBytes)).size(), kMaxFrameBytes);
  EXPECT_NO_THROW(encode_frame(with_body_size(kMaxFrameBytes - 1)));
  EXPECT_NO_THROW(encode_frame(with_body_size(kMaxFrameBytes)));
  try {
    encode_frame(with_body_size(kMaxFrameBytes + 1));
    FAIL();
  } catch (const WireError& e) {
    EXPECT_EQ(e.kind(), WireErrorKind::oversize);
  }
}

TEST(WireSocket, FramesTravelBothWays) {
  auto [a, b] = socket_pair();
  const WireMessage m = sample(MessageType::hello, 0, 0);
  a.send(m);
  EXPECT_EQ(b.receive(std::chrono::milliseconds(2000)), m);
  const WireMessage big = with_body_size(kMaxFrameBytes);
  std::thread writer([&] { b.send(big); });
  EXPECT_EQ(a.receive(std::chrono::milliseconds(5000)), big);
  writer.join();
}

TEST(WireSocket, OversizePrefixRejectedBeforeBodyArrives) {
  auto [a, b] = socket_pair();
  // Only the prefix is sent; reading the body would block until the timeout.
  a.send_all(prefix(static_cast<std::uint32_t>(kMaxFrameBytes + 1)));
  try {
    b.receive(std::chrono::milliseconds(5000));
    FAIL();
  } catch (const WireError& e) {
    EXPECT_EQ(e.kind(), WireErrorKind::oversize);
  }
}

TEST(WireSocket, TruncatedStreamAndCleanClose) {
  {
    auto [a, b] = socket_pair();
    const std::string frame = encode_frame(sample(MessageType::reply, 1, 1));
    a.send_all(frame.substr(0, 10));
    a.close();
    try {
      b.receive(std::chrono::milliseconds(2000));
      FAIL();
    } catch (const WireError& e) {
      EXPECT_EQ(e.kind(), WireErrorKind::truncated);
    }
  }
  {
    auto [a, b] = socket_pair();
    a.close();
    try {
      b.receive(std::chrono::milliseconds(2000));
      FAIL();
    } catch (const WireError& e) {
      EXPECT_EQ(e.kind(), WireErrorKind::closed);
    }
  }
}

TEST(WireSocket, ReceiveTimesOut) {
  auto [a, b] = socket_pair();
  const auto t0 = std::chrono::steady_clock::now();
  try {
    b.receive(std::chrono::milliseconds(100));
    FAIL();
  } catch (const WireError& e) {
    EXPECT_EQ(e.kind(), WireErrorKind::timeout);
  }
  EXPECT_LT(std::chrono::steady_clock::now() - t0, std::chrono::seconds(2));
}

TEST(Endpoint, Parsing) {
  const Endpoint e = parse_endpoint("10.0.0.2:7100");
  EXPECT_EQ(e.host, "10.0.0.2");
  EXPECT_EQ(e.port, 7100);
  EXPECT_EQ(parse_endpoint(":9").host, "127.0.0.1");
  EXPECT_THROW(parse_endpoint("localhost"), std::invalid_argument);
  EXPECT_THROW(parse_endpoint("h:70000"), std::invalid_argument);
  EXPECT_THROW(parse_endpoint("h:12x"), std::invalid_argument);
}

TEST(Endpoint, ConnectGivesUpAfterTimeout) {
  int port = 0;
  {
    Listener l({"127.0.0.1", 0});
    port = l.port();
  }
  EXPECT_THROW(connect_to({"127.0.0.1", port}, std::chrono::milliseconds(100)), WireError);
}

}  // namespace
}  // namespace dopf
