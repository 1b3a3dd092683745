#include "tdprobe/net.hpp"

#include <arpa/inet.h>
#include <fcntl.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cmath>
#include <cstring>
#include <utility>

#include "tdprobe/errors.hpp"

namespace tdprobe {

namespace {

TdError net_error(const std::string &what) {
  return {ErrorKind::Network, "SocketError", what + ": " + std::strerror(errno)};
}

int poll_timeout_ms(double timeout_s) {
  if (timeout_s < 0) return -1;
  return static_cast<int>(std::ceil(timeout_s * 1000.0));
}

sockaddr_in make_addr(const std::string &host, std::uint16_t port) {
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(port);
  if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1)
    throw TdError(ErrorKind::Config, "BadAddress", "not an IPv4 address: " + host);
  return addr;
}

// Waits for one poll event; true when the event fired, false on timeout.
bool poll_one(int fd, short events, double timeout_s) {
  pollfd p{fd, events, 0};
  for (;;) {
    const int rc = ::poll(&p, 1, poll_timeout_ms(timeout_s));
    if (rc > 0) return true;  // includes POLLERR/POLLHUP; the caller's I/O call reports it
    if (rc == 0) return false;
    if (errno != EINTR) throw net_error("poll");
  }
}

}  // namespace

double mono_seconds() {
  return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch()).count();
}

Socket::~Socket() { close_fd(); }

Socket::Socket(Socket &&other) noexcept : fd_(std::exchange(other.fd_, -1)) {}

Socket &Socket::operator=(Socket &&other) noexcept {
  if (this != &other) {
    close_fd();
    fd_ = std::exchange(other.fd_, -1);
  }
  return *this;
}

void Socket::close_fd() {
  if (fd_ >= 0) {
    ::close(fd_);
    fd_ = -1;
  }
}

void Socket::shutdown_write() const {
  if (fd_ >= 0) ::shutdown(fd_, SHUT_WR);
}

void Socket::shutdown_both() const {
  if (fd_ >= 0) ::shutdown(fd_, SHUT_RDWR);
}

Socket listen_on(const std::string &host, std::uint16_t port, int backlog) {
  Socket s(::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0));
  if (!s.valid()) throw net_error("socket");
  const int one = 1;
  ::setsockopt(s.fd(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
  sockaddr_in addr = make_addr(host, port);
  if (::bind(s.fd(), reinterpret_cast<sockaddr *>(&addr), sizeof(addr)) != 0)
    throw net_error("bind " + host + ":" + std::to_string(port));
  if (::listen(s.fd(), backlog) != 0) throw net_error("listen");
  return s;
}

std::uint16_t local_port(const Socket &listener) {
  sockaddr_in addr{};
  socklen_t len = sizeof(addr);
  if (::getsockname(listener.fd(), reinterpret_cast<sockaddr *>(&addr), &len) != 0)
    throw net_error("getsockname");
  return ntohs(addr.sin_port);
}

std::string peer_address(const Socket &s) {
  sockaddr_in addr{};
  socklen_t len = sizeof(addr);
  if (::getpeername(s.fd(), reinterpret_cast<sockaddr *>(&addr), &len) != 0)
    throw net_error("getpeername");
  char text[INET_ADDRSTRLEN] = {};
  ::inet_ntop(AF_INET, &addr.sin_addr, text, sizeof(text));
  return text;
}

std::optional<Socket> accept_ready(const Socket &listener, double timeout_s) {
  if (!poll_one(listener.fd(), POLLIN, timeout_s)) return std::nullopt;
  const int fd = ::accept4(listener.fd(), nullptr, nullptr, SOCK_CLOEXEC);
  if (fd < 0) {
    if (errno == EAGAIN || errno == EWOULDBLOCK || errno == ECONNABORTED || errno == EINTR)
      return std::nullopt;
    throw net_error("accept");
  }
  return Socket(fd);
}

Socket connect_to(const std::string &host, std::uint16_t port, double timeout_s) {
  Socket s(::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0));
  if (!s.valid()) throw net_error("socket");
  const int flags = ::fcntl(s.fd(), F_GETFL, 0);
  ::fcntl(s.fd(), F_SETFL, flags | O_NONBLOCK);
  sockaddr_in addr = make_addr(host, port);
  const std::string endpoint = host + ":" + std::to_string(port);
  int rc = ::connect(s.fd(), reinterpret_cast<sockaddr *>(&addr), sizeof(addr));
  if (rc != 0) {
    if (errno != EINPROGRESS) throw net_error("connect " + endpoint);
    if (!poll_one(s.fd(), POLLOUT, timeout_s))
      throw TdError(ErrorKind::Network, "ConnectTimeout", endpoint);
    int err = 0;
    socklen_t len = sizeof(err);
    if (::getsockopt(s.fd(), SOL_SOCKET, SO_ERROR, &err, &len) != 0 || err != 0) {
      errno = err != 0 ? err : errno;
      throw net_error("connect " + endpoint);
    }
  }
  ::fcntl(s.fd(), F_SETFL, flags);
  return s;
}

void set_nodelay(const Socket &s) {
  const int one = 1;
  ::setsockopt(s.fd(), IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
}

bool wait_for_port(const std::string &host, std::uint16_t port, double timeout_s) {
  const double deadline = mono_seconds() + timeout_s;
  for (;;) {
    try {
      Socket probe = connect_to(host, port, 0.25);
      return true;
    } catch (const TdError &) {
    }
    if (mono_seconds() >= deadline) return false;
    ::usleep(20000);
  }
}

void send_all(const Socket &s, std::span<const std::uint8_t> data, double stall_timeout_s) {
  std::size_t sent = 0;
  while (sent < data.size()) {
    if (!poll_one(s.fd(), POLLOUT, stall_timeout_s))
      throw TdError(ErrorKind::Network, "SendStalled",
                    "no send progress for " + std::to_string(stall_timeout_s) + " s");
    const ssize_t n = ::send(s.fd(), data.data() + sent, data.size() - sent, MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EINTR || errno == EAGAIN || errno == EWOULDBLOCK) continue;
      throw net_error("send");
    }
    sent += static_cast<std::size_t>(n);
  }
}

std::optional<std::size_t> recv_some(const Socket &s, std::uint8_t *buf, std::size_t cap,
                                     double idle_timeout_s) {
  for (;;) {
    if (!poll_one(s.fd(), POLLIN, idle_timeout_s)) return std::nullopt;
    const ssize_t n = ::recv(s.fd(), buf, cap, 0);
    if (n >= 0) return static_cast<std::size_t>(n);
    if (errno == EINTR || errno == EAGAIN || errno == EWOULDBLOCK) continue;
    if (errno == ECONNRESET) return std::size_t{0};  // treat reset as EOF for accounting
    throw net_error("recv");
  }
}

bool BufferedReader::fill(double idle_timeout_s) {
  if (eof_) return false;
  if (pos_ == buf_.size()) {
    buf_.clear();
    pos_ = 0;
  }
  std::uint8_t chunk[16384];
  const auto n = recv_some(sock_, chunk, sizeof(chunk), idle_timeout_s);
  if (!n.has_value()) return false;
  if (*n == 0) {
    eof_ = true;
    return false;
  }
  buf_.insert(buf_.end(), chunk, chunk + *n);
  return true;
}

bool BufferedReader::read_line(std::string &out, double timeout_s) {
  const double deadline = mono_seconds() + timeout_s;
  for (;;) {
    for (std::size_t i = pos_; i < buf_.size(); ++i) {
      if (buf_[i] == '\n') {
        out.assign(buf_.begin() + static_cast<std::ptrdiff_t>(pos_),
                   buf_.begin() + static_cast<std::ptrdiff_t>(i));
        if (!out.empty() && out.back() == '\r') out.pop_back();
        pos_ = i + 1;
        return true;
      }
    }
    const double remain = deadline - mono_seconds();
    if (remain <= 0 || !fill(remain)) return false;
  }
}

std::optional<std::size_t> BufferedReader::read_some(std::uint8_t *out, std::size_t n,
                                                     double idle_timeout_s) {
  if (n == 0) return std::size_t{0};
  if (pos_ == buf_.size()) {
    if (eof_) return std::size_t{0};
    std::uint8_t chunk[16384];
    const auto got = recv_some(sock_, chunk, sizeof(chunk), idle_timeout_s);
    if (!got.has_value()) return std::nullopt;
    if (*got == 0) {
      eof_ = true;
      return std::size_t{0};
    }
    buf_.assign(chunk, chunk + *got);
    pos_ = 0;
  }
  const std::size_t take = std::min(n, buf_.size() - pos_);
  std::memcpy(out, buf_.data() + pos_, take);
  pos_ += take;
  return take;
}

bool BufferedReader::read_exact(std::uint8_t *out, std::size_t n, double idle_timeout_s) {
  std::size_t got = 0;
  while (got < n) {
    const auto chunk = read_some(out + got, n - got, idle_timeout_s);
    if (!chunk.has_value() || *chunk == 0) return false;
    got += *chunk;
  }
  return true;
}

void BufferedReader::unread(std::span<const std::uint8_t> bytes) {
  if (bytes.empty()) return;
  std::vector<std::uint8_t> next(bytes.begin(), bytes.end());
  next.insert(next.end(), buf_.begin() + static_cast<std::ptrdiff_t>(pos_), buf_.end());
  buf_ = std::move(next);
  pos_ = 0;
}

}  // namespace tdprobe
