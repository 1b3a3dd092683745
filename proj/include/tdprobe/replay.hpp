#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "tdprobe/detector.hpp"
#include "tdprobe/trace.hpp"

namespace tdprobe {

enum class ReplayKind { Original, Control };

std::string to_string(ReplayKind kind);

struct ReplayRequest {
  std::string client_id;  // caller-chosen, non-empty
  std::string service_name;
  ReplayKind kind = ReplayKind::Original;
  std::uint32_t run_index = 0;
  bool use_sni_prefix = true;
  std::optional<std::uint16_t> dst_port_override;
  std::uint64_t hello_seed = 1;  // seeds the handshake prefix randomness
};

struct ReplayResult {
  ThroughputSeries throughput;  // server->client bytes measured at the client
  std::uint64_t total_bytes = 0;
  std::uint32_t duration_ms = 1;
  bool completed = false;
  std::optional<std::string> error_note;
  bool payload_match = true;
  // Per sent entry: actual send start minus schedule deadline, in ms.
  std::vector<std::int32_t> send_lateness_ms;
};

struct StoredService {
  ServiceTrace original;
  ServiceTrace control;
};

// Derives each service's control trace by bit reversal.
std::map<std::string, StoredService> make_trace_store(const std::vector<ServiceTrace> &originals);

struct ReplayServerConfig {
  std::string host = "127.0.0.1";
  std::uint16_t side_port = 0;  // 0 picks an ephemeral port
  std::uint16_t data_port = 0;
  // Legacy compatibility mode: one active replay per source address instead of
  // per (client_id, service, kind); breaks concurrent clients behind one NAT.
  bool ip_keyed = false;
  double idle_timeout_s = 10.0;
  std::uint64_t hello_seed = 7;  // seeds the handshake stub reply
};

// Accepts side-channel registrations ({"client_id","service","kind","run_index"}
// as one JSON line; reply {"ok":true,"data_port":N} or {"ok":false,"error":...})
// and serves one data connection per registration, replaying the stored trace.
class ReplayServer {
 public:
  struct RunRecord {
    std::string client_id;
    std::string service;
    ReplayKind kind = ReplayKind::Original;
    std::uint32_t run_index = 0;
    bool saw_client_hello = false;
    std::string sni;  // from the handshake prefix, when seen
    std::uint64_t bytes_sent = 0;
    std::uint64_t bytes_received = 0;
    bool payload_match = true;
    bool completed = false;
    std::vector<std::int32_t> send_lateness_ms;  // per sent entry, vs its deadline
  };

  ReplayServer(ReplayServerConfig config, std::map<std::string, StoredService> services);
  ~ReplayServer();
  ReplayServer(const ReplayServer &) = delete;
  ReplayServer &operator=(const ReplayServer &) = delete;

  void start();
  void stop();
  std::uint16_t side_port() const;
  std::uint16_t data_port() const;
  std::vector<RunRecord> run_records() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

// One replay run: registers over the side channel, opens the data connection
// (dst_port_override, else 443 when use_sni_prefix is set, else
// trace.dst_port), sends the handshake prefix for original replays when
// use_sni_prefix is set, then replays the trace with schedule-preserving
// timing while binning received bytes.
ReplayResult run_replay_client(const std::string &host, std::uint16_t side_port,
                               const ServiceTrace &trace, const ReplayRequest &request,
                               std::uint32_t bin_width_ms = 100, double idle_timeout_s = 10.0);

// n_runs sequential (original, control) pairs with increasing run_index; a
// failed run is recorded with completed=false and the sequence continues.
std::vector<std::pair<ReplayResult, ReplayResult>> run_back_to_back(
    const std::string &host, std::uint16_t side_port, const ServiceTrace &original,
    const ReplayRequest &request_base, int n_runs, std::uint32_t bin_width_ms = 100,
    double idle_timeout_s = 10.0);

std::vector<RunPair> to_run_pairs(const std::vector<std::pair<ReplayResult, ReplayResult>> &runs);

}  // namespace tdprobe
