#include "fedspike/net.hpp"

#include <arpa/inet.h>
#include <cerrno>
#include <csignal>
#include <cstring>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

namespace fedspike {

namespace {

constexpr std::size_t kMaxFrameBytes = std::size_t{1} << 30;

sockaddr_in resolve(const Endpoint& e) {
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(e.port);
  if (e.host == "localhost") {
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  } else if (inet_pton(AF_INET, e.host.c_str(), &addr.sin_addr) != 1) {
    fail(ErrorKind::kConfig, "cannot parse IPv4 address '" + e.host + "'");
  }
  return addr;
}

bool wait_fd(int fd, short events, int timeout_ms) {
  pollfd p{fd, events, 0};
  for (;;) {
    const int r = ::poll(&p, 1, timeout_ms);
    if (r < 0 && errno == EINTR) continue;
    return r > 0;
  }
}

}  // namespace

Endpoint Endpoint::parse(const std::string& text) {
  Endpoint e;
  std::string port = text;
  if (auto colon = text.rfind(':'); colon != std::string::npos) {
    e.host = text.substr(0, colon);
    port = text.substr(colon + 1);
  }
  try {
    const unsigned long p = std::stoul(port);
    if (p > 65535) throw std::out_of_range("port");
    e.port = static_cast<std::uint16_t>(p);
  } catch (const std::exception&) {
    fail(ErrorKind::kConfig, "bad endpoint '" + text + "' (expected host:port)");
  }
  return e;
}

LineSocket& LineSocket::operator=(LineSocket&& other) noexcept {
  if (this != &other) {
    close();
    fd_ = other.fd_;
    buffer_ = std::move(other.buffer_);
    other.fd_ = -1;
  }
  return *this;
}

LineSocket::~LineSocket() { close(); }

void LineSocket::close() {
  if (fd_ >= 0) {
    ::close(fd_);
    fd_ = -1;
  }
}

LineSocket LineSocket::connect(const Endpoint& endpoint, int timeout_ms) {
  const sockaddr_in addr = resolve(endpoint);
  const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd < 0) fail(ErrorKind::kInsufficientNodes, std::string("socket: ") + std::strerror(errno));
  LineSocket s(fd);
  // Retry until the deadline so nodes that are still starting up are reached.
  const int step_ms = 50;
  for (int waited = 0;; waited += step_ms) {
    if (::connect(fd, reinterpret_cast<const sockaddr*>(&addr), sizeof addr) == 0) break;
    if (waited >= timeout_ms) {
      fail(ErrorKind::kInsufficientNodes, "cannot reach node at " + endpoint.str() + ": " + std::strerror(errno));
    }
    ::usleep(step_ms * 1000);
  }
  const int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
  return s;
}

void LineSocket::send_line(const std::string& line) {
  if (fd_ < 0) fail(ErrorKind::kMalformedFrame, "send on a closed connection");
  std::string data = line + '\n';
  std::size_t sent = 0;
  while (sent < data.size()) {
    const ssize_t n = ::send(fd_, data.data() + sent, data.size() - sent, MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EINTR) continue;
      fail(ErrorKind::kMalformedFrame, std::string("connection lost while sending: ") + std::strerror(errno));
    }
    sent += static_cast<std::size_t>(n);
  }
}

std::string LineSocket::receive_line(int timeout_ms) {
  if (fd_ < 0) fail(ErrorKind::kMalformedFrame, "receive on a closed connection");
  char chunk[65536];
  for (;;) {
    if (auto nl = buffer_.find('\n'); nl != std::string::npos) {
      std::string line = buffer_.substr(0, nl);
      buffer_.erase(0, nl + 1);
      if (!line.empty() && line.back() == '\r') line.pop_back();
      return line;
    }
    if (buffer_.size() > kMaxFrameBytes) fail(ErrorKind::kMalformedFrame, "frame exceeds size limit");
    if (!wait_fd(fd_, POLLIN, timeout_ms)) fail(ErrorKind::kTimeout, "no frame within " + std::to_string(timeout_ms) + " ms");
    const ssize_t n = ::recv(fd_, chunk, sizeof chunk, 0);
    if (n < 0) {
      if (errno == EINTR) continue;
      fail(ErrorKind::kMalformedFrame, std::string("receive failed: ") + std::strerror(errno));
    }
    if (n == 0) {
      fail(ErrorKind::kMalformedFrame, buffer_.empty() ? "peer closed the connection" : "peer closed mid-frame");
    }
    buffer_.append(chunk, static_cast<std::size_t>(n));
  }
}

Listener::Listener(const Endpoint& endpoint) {
  const sockaddr_in addr = resolve(endpoint);
  fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd_ < 0) fail(ErrorKind::kConfig, std::string("socket: ") + std::strerror(errno));
  const int one = 1;
  ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  if (::bind(fd_, reinterpret_cast<const sockaddr*>(&addr), sizeof addr) != 0 || ::listen(fd_, 8) != 0) {
    const std::string err = std::strerror(errno);
    ::close(fd_);
    fd_ = -1;
    fail(ErrorKind::kConfig, "cannot listen on " + endpoint.str() + ": " + err);
  }
  sockaddr_in bound{};
  socklen_t len = sizeof bound;
  ::getsockname(fd_, reinterpret_cast<sockaddr*>(&bound), &len);
  port_ = ntohs(bound.sin_port);
}

Listener::~Listener() {
  if (fd_ >= 0) ::close(fd_);
}

LineSocket Listener::accept(int timeout_ms) {
  if (!wait_fd(fd_, POLLIN, timeout_ms)) fail(ErrorKind::kTimeout, "no coordinator connected in time");
  const int fd = ::accept(fd_, nullptr, nullptr);
  if (fd < 0) fail(ErrorKind::kInsufficientNodes, std::string("accept: ") + std::strerror(errno));
  const int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
  return LineSocket(fd);
}

namespace {

void log_frame(std::vector<std::string>* log, const char* dir, const std::string& peer, const std::string& frame) {
  if (log) log->push_back(std::string("{\"dir\":\"") + dir + "\",\"peer\":\"" + peer + "\",\"frame\":" + frame + "}");
}

}  // namespace

void serve_node(Listener& listener, NodeData data, int sessions, const NetOptions& options,
                std::vector<std::string>* log) {
  for (int s = 0; s < sessions; ++s) {
    LineSocket sock = listener.accept(options.io_timeout_ms);
    NodeSession session(data);
    while (!session.finished()) {
      std::string line;
      try {
        line = sock.receive_line(options.io_timeout_ms);
      } catch (const Error& e) {
        // The coordinator hung up; nothing more to serve in this session.
        if (e.kind() == ErrorKind::kMalformedFrame) break;
        throw;
      }
      log_frame(log, "recv", "coordinator", line);
      std::vector<FederationMessage> replies;
      try {
        replies = session.handle(FederationMessage::decode(line));
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::kMalformedFrame && e.kind() != ErrorKind::kVersionMismatch) throw;
        const char* code = e.kind() == ErrorKind::kVersionMismatch ? "version-mismatch" : "malformed-frame";
        FederationMessage reject{MessageType::kError, session.node_id(), 0, {{"code", code}, {"message", e.what()}}};
        const std::string frame = reject.encode();
        log_frame(log, "send", "coordinator", frame);
        sock.send_line(frame);
        break;
      }
      for (const auto& reply : replies) {
        const std::string frame = reply.encode();
        log_frame(log, "send", "coordinator", frame);
        sock.send_line(frame);
      }
    }
    sock.close();
  }
}

FederationRun serve_coordinator(const std::vector<Endpoint>& nodes, const CoordinatorData& data,
                                const CoordinatorOptions& options, const NetOptions& net) {
  if (nodes.size() != static_cast<std::size_t>(kNumNodes)) {
    fail(ErrorKind::kInsufficientNodes, "need exactly " + std::to_string(kNumNodes) + " node endpoints, got " +
                                            std::to_string(nodes.size()));
  }
  std::vector<std::unique_ptr<NodeLink>> links;
  for (const auto& e : nodes) {
    links.push_back(std::make_unique<SocketLink>(LineSocket::connect(e, net.connect_timeout_ms), net.io_timeout_ms));
  }
  return run_coordinator(links, data, options);
}

}  // namespace fedspike
