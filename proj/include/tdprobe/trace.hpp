#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace tdprobe {

enum class Direction : std::uint8_t { ClientToServer, ServerToClient };

struct TraceEntry {
  Direction dir = Direction::ClientToServer;
  std::uint32_t delta_ms = 0;  // since the previous entry
  std::vector<std::uint8_t> payload;
};

// A recorded application-level exchange for one service. Entries are a
// linear script; cumulative time is the sum of deltas and must be > 0.
struct ServiceTrace {
  std::string service_name;
  std::string sni;  // empty for plaintext services and control traces
  std::uint16_t dst_port = 443;
  std::vector<TraceEntry> entries;

  std::uint64_t total_payload_bytes() const;
  std::uint64_t total_bytes(Direction dir) const;
  std::uint64_t cumulative_ms() const;

  // Throws MalformedTrace on any invariant violation; `origin` prefixes
  // the error locus (file path or "<memory>").
  void validate(const std::string &origin) const;
};

struct DashParams {
  std::uint64_t chunk_bytes = 125000;
  std::uint32_t chunk_interval_ms = 1000;
  std::uint32_t n_chunks = 10;
  std::uint32_t request_bytes = 200;
  std::uint64_t seed = 1;
};

// File format: single-line UTF-8 JSON, canonical key order, single space
// after ':' and ','. load/save round-trip is byte-identical.
ServiceTrace load_trace(const std::string &path);
void save_trace(const ServiceTrace &trace, const std::string &path);
std::string trace_to_json(const ServiceTrace &trace);
ServiceTrace trace_from_json(const std::string &text, const std::string &origin);

// Control-trace derivation: reverses the bit order within every payload
// byte, preserving entry count, lengths, directions and timing. Result
// has empty sni and service_name suffixed "-control".
ServiceTrace bit_reverse_trace(const ServiceTrace &trace);

// Deterministic DASH-like generator: per chunk, one client request then
// server data totaling chunk_bytes spread evenly across the interval.
// Payload bytes come from the seed; same seed, same bytes.
ServiceTrace synth_dash_trace(const DashParams &params, const std::string &service_name,
                              const std::string &sni, std::uint16_t dst_port);

// 8 * total payload bytes / cumulative seconds.
double offered_rate_bps(const ServiceTrace &trace);

}  // namespace tdprobe
