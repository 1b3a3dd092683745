#pragma once

#include <stdexcept>
#include <string>

namespace tdprobe {

// Error categories map 1:1 onto CLI exit codes.
enum class ErrorKind { Config = 1, Network = 2, Protocol = 3 };

class TdError : public std::runtime_error {
 public:
  TdError(ErrorKind kind, std::string code, const std::string &message)
      : std::runtime_error(code + ": " + message), kind(kind), code(std::move(code)) {}

  ErrorKind kind;
  std::string code;  // stable machine-readable name, e.g. "MalformedTrace"
};

inline TdError malformed_trace(const std::string &locus, const std::string &message) {
  return {ErrorKind::Config, "MalformedTrace", locus + ": " + message};
}

inline TdError io_failure(const std::string &path, const std::string &message) {
  return {ErrorKind::Config, "IoFailure", path + ": " + message};
}

inline TdError hostname_too_long(const std::string &hostname) {
  return {ErrorKind::Config, "HostnameTooLong",
          hostname.substr(0, 64) + "... (" + std::to_string(hostname.size()) + " bytes)"};
}

inline TdError series_too_short(std::size_t bins, std::size_t needed) {
  return {ErrorKind::Config, "SeriesTooShort",
          std::to_string(bins) + " bins, need at least " + std::to_string(needed)};
}

inline TdError invalid_scenario(const std::string &message) {
  return {ErrorKind::Config, "InvalidScenario", message};
}

inline TdError side_channel_refused(const std::string &server_error) {
  return {ErrorKind::Protocol, "SideChannelRefused", server_error};
}

inline TdError data_connect_failed(const std::string &endpoint) {
  return {ErrorKind::Network, "DataConnectFailed", endpoint};
}

inline TdError upstream_connect_failed(const std::string &endpoint) {
  return {ErrorKind::Network, "UpstreamConnectFailed", endpoint};
}

}  // namespace tdprobe
