#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tdprobe/detector.hpp"
#include "tdprobe/trace.hpp"

namespace tdprobe {

enum class ClassifyMethod { Sni, DpiSignature, PortDefault };

std::string to_string(ClassifyMethod method);

struct Classification {
  std::string label;
  ClassifyMethod method = ClassifyMethod::PortDefault;
};

struct PayloadPattern {
  std::optional<std::size_t> offset;  // absent = match at any offset
  std::vector<std::uint8_t> bytes;
};

struct ClassifierRule {
  std::string label;
  std::vector<std::string> sni_suffixes;
  std::vector<PayloadPattern> payload_patterns;
};

struct RateLimit {
  std::uint64_t rate_bps = 0;
  std::uint64_t burst_bytes = 0;
};

struct ShapingPolicy {
  std::map<std::string, RateLimit> per_label;  // unlisted labels are unshaped
  std::map<std::string, double> qos_weights;   // unlisted labels weigh 1.0
  std::uint64_t link_capacity_bps = 0;         // used by the shared-link simulator

  const RateLimit *limit_for(const std::string &label) const;
  double weight_for(const std::string &label) const;
};

// Precedence: SNI suffix match, then DPI byte pattern, then port default
// ("HTTPS-unknown" on 443, "HTTP-unknown" on 80, "unknown" otherwise).
Classification classify(std::span<const std::uint8_t> first_bytes, std::uint16_t dst_port,
                        const std::vector<ClassifierRule> &rules);

// True when hostname equals the suffix or ends with ".<suffix>" (case-insensitive).
bool hostname_matches_suffix(const std::string &hostname, const std::string &suffix);

struct TokenBucket {
  double tokens = 0.0;       // bytes available; starts at burst on first use
  double last_refill = 0.0;  // seconds
  bool primed = false;
};

struct FlowState {
  std::string key;
  std::optional<Classification> classification;
  std::vector<std::uint8_t> inspected_bytes;
  TokenBucket bucket;
};

// Delay in seconds before n_bytes may be forwarded; 0 when tokens suffice or
// no limit applies to the bucket. Tokens for the send are consumed either way.
double token_bucket_delay(TokenBucket &bucket, const RateLimit &limit, double n_bytes, double now);

// Policy lookup by the flow's classification label, then token_bucket_delay.
double shape(FlowState &flow, std::uint64_t n_bytes, double now, const ShapingPolicy &policy);

// Weighted max-min fair allocation (water-filling): capacity is divided in
// proportion to weights, no flow receives more than its demand, and leftover
// capacity is redistributed among unsatisfied flows. Units are uniform (bps).
std::vector<double> weighted_max_min(const std::vector<double> &demands_bps,
                                     const std::vector<double> &weights, double capacity_bps);

struct SimFlow {
  std::string name;
  std::string label;                  // classification label, fixed for the run
  std::optional<ServiceTrace> trace;  // server->client bytes drive demand
  double constant_rate_bps = 0.0;     // used when no trace is given
};

struct SimConfig {
  std::uint32_t tick_ms = 10;
  std::uint32_t bin_ms = 100;
  double jitter_pct = 0.0;  // optional demand jitter, seeded
};

struct TickObservation {
  std::size_t tick = 0;
  std::vector<double> demand_bps;
  std::vector<double> alloc_bps;
};

using TickObserver = std::function<void(const TickObservation &)>;

// Deterministic virtual-clock fluid simulation of one shared link. Each tick,
// every flow demands min(its backlog drain rate, its token-bucket allowance);
// the link grants weighted max-min shares. Bit-reproducible for a fixed seed.
std::vector<ThroughputSeries> simulate_shared_link(const std::vector<SimFlow> &flows,
                                                   const ShapingPolicy &policy, std::uint32_t duration_ms,
                                                   std::uint64_t seed, const SimConfig &config = {},
                                                   const TickObserver &observer = {});

// {"rules":[...],"policy":{...}} — both sections optional.
struct RulesAndPolicy {
  std::vector<ClassifierRule> rules;
  ShapingPolicy policy;
};

RulesAndPolicy rules_policy_from_json(const std::string &text, const std::string &origin);
RulesAndPolicy load_rules_policy(const std::filesystem::path &path);
std::string rules_policy_to_json(const RulesAndPolicy &rp);

struct LabelCounter {
  std::uint64_t bytes = 0;  // server->client bytes forwarded under this label
  std::uint64_t flows = 0;
};

// Inline TCP forwarding proxy: classifies each inbound connection from its
// first client bytes, then applies per-label shaping to server->client data.
class ShaperProxy {
 public:
  struct Config {
    std::string listen_host = "127.0.0.1";
    std::uint16_t listen_port = 0;  // 0 picks an ephemeral port
    std::string upstream_host;
    std::uint16_t upstream_port = 0;
    std::vector<ClassifierRule> rules;
    ShapingPolicy policy;
    std::string status_path;            // empty disables status-file writes
    double classify_deadline_s = 2.0;   // silent flows fall to port default
    std::size_t inspect_limit = 8192;   // max client bytes buffered for classification
    std::uint32_t status_interval_ms = 500;
  };

  explicit ShaperProxy(Config config);
  ~ShaperProxy();
  ShaperProxy(const ShaperProxy &) = delete;
  ShaperProxy &operator=(const ShaperProxy &) = delete;

  void start();  // binds and begins accepting; throws on bind failure
  void stop();   // idempotent; joins all connection threads

  std::uint16_t port() const;
  std::map<std::string, LabelCounter> counters() const;
  std::string status_json() const;  // {"labels":{label:{"bytes":N,"flows":N}}}

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace tdprobe
