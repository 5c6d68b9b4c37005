#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "fedspike/federation.hpp"

namespace fedspike {

struct Endpoint {
  std::string host = "127.0.0.1";
  std::uint16_t port = 0;

  // "host:port"; a bare port means 127.0.0.1.
  static Endpoint parse(const std::string& text);
  std::string str() const { return host + ":" + std::to_string(port); }
};

// Blocking TCP stream carrying newline-delimited frames.
class LineSocket {
 public:
  explicit LineSocket(int fd) : fd_(fd) {}
  LineSocket(LineSocket&& other) noexcept : fd_(other.fd_), buffer_(std::move(other.buffer_)) { other.fd_ = -1; }
  LineSocket& operator=(LineSocket&& other) noexcept;
  LineSocket(const LineSocket&) = delete;
  LineSocket& operator=(const LineSocket&) = delete;
  ~LineSocket();

  static LineSocket connect(const Endpoint& endpoint, int timeout_ms);

  void send_line(const std::string& line);
  // Throws kTimeout when nothing arrives in time, kMalformedFrame when the
  // peer closes mid-frame or a frame exceeds the size limit.
  std::string receive_line(int timeout_ms);
  void close();
  bool open() const { return fd_ >= 0; }

 private:
  int fd_ = -1;
  std::string buffer_;
};

class Listener {
 public:
  explicit Listener(const Endpoint& endpoint);
  Listener(const Listener&) = delete;
  Listener& operator=(const Listener&) = delete;
  ~Listener();

  std::uint16_t port() const { return port_; }
  LineSocket accept(int timeout_ms);

 private:
  int fd_ = -1;
  std::uint16_t port_ = 0;
};

struct NetOptions {
  int connect_timeout_ms = 5000;
  int io_timeout_ms = 600000;
};

class SocketLink : public NodeLink {
 public:
  SocketLink(LineSocket socket, int timeout_ms) : socket_(std::move(socket)), timeout_ms_(timeout_ms) {}
  void send(const std::string& frame) override { socket_.send_line(frame); }
  std::string receive() override { return socket_.receive_line(timeout_ms_); }
  void close() override { socket_.close(); }

 private:
  LineSocket socket_;
  int timeout_ms_;
};

// Serves coordinator sessions on an already-bound listener. Every frame in
// either direction is appended to `log` (JSONL records) when non-null.
void serve_node(Listener& listener, NodeData data, int sessions, const NetOptions& options,
                std::vector<std::string>* log = nullptr);

// Connects to all nodes before any training starts; fewer than three
// reachable nodes is a kInsufficientNodes error.
FederationRun serve_coordinator(const std::vector<Endpoint>& nodes, const CoordinatorData& data,
                                const CoordinatorOptions& options, const NetOptions& net = {});

}  // namespace fedspike
