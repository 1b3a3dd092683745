#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace tdprobe {

// Monotonic clock in seconds; the zero point is arbitrary.
double mono_seconds();

class Socket {
 public:
  Socket() = default;
  explicit Socket(int fd) : fd_(fd) {}
  ~Socket();
  Socket(const Socket &) = delete;
  Socket &operator=(const Socket &) = delete;
  Socket(Socket &&other) noexcept;
  Socket &operator=(Socket &&other) noexcept;

  int fd() const { return fd_; }
  bool valid() const { return fd_ >= 0; }
  void close_fd();
  void shutdown_write() const;
  void shutdown_both() const;

 private:
  int fd_ = -1;
};

Socket listen_on(const std::string &host, std::uint16_t port, int backlog = 32);
std::uint16_t local_port(const Socket &listener);
std::string peer_address(const Socket &s);

// Waits up to timeout_s for a pending connection; absent on timeout.
std::optional<Socket> accept_ready(const Socket &listener, double timeout_s);

Socket connect_to(const std::string &host, std::uint16_t port, double timeout_s);
void set_nodelay(const Socket &s);

// Polls until a TCP connect to host:port succeeds; false when timeout_s elapses.
bool wait_for_port(const std::string &host, std::uint16_t port, double timeout_s);

// Sends everything; throws when the peer errors or no progress is made for
// stall_timeout_s.
void send_all(const Socket &s, std::span<const std::uint8_t> data, double stall_timeout_s = 30.0);

// One recv: byte count (> 0), 0 on orderly EOF, absent when idle_timeout_s
// passes without data. Hard errors throw.
std::optional<std::size_t> recv_some(const Socket &s, std::uint8_t *buf, std::size_t cap,
                                     double idle_timeout_s);

// Pull-through buffer over one socket; supports line reads and byte push-back.
class BufferedReader {
 public:
  explicit BufferedReader(Socket &s) : sock_(s) {}

  // Reads through '\n' (stripped, with any '\r'); false on EOF or timeout.
  bool read_line(std::string &out, double timeout_s);
  // Same contract as recv_some but drains buffered bytes first.
  std::optional<std::size_t> read_some(std::uint8_t *out, std::size_t n, double idle_timeout_s);
  // All n bytes or false (EOF/timeout mid-read).
  bool read_exact(std::uint8_t *out, std::size_t n, double idle_timeout_s);
  // Pushes bytes to the front of the buffer (sniffed prefixes).
  void unread(std::span<const std::uint8_t> bytes);
  std::size_t buffered() const { return buf_.size() - pos_; }
  bool at_eof() const { return eof_ && pos_ == buf_.size(); }

 private:
  bool fill(double idle_timeout_s);  // false on EOF or timeout

  Socket &sock_;
  std::vector<std::uint8_t> buf_;
  std::size_t pos_ = 0;
  bool eof_ = false;
};

}  // namespace tdprobe
