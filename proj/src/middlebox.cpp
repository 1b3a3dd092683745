#include "tdprobe/middlebox.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <condition_variable>
#include <cstring>
#include <fstream>
#include <mutex>
#include <random>
#include <thread>

#include <nlohmann/json.hpp>

#include "tdprobe/errors.hpp"
#include "tdprobe/net.hpp"
#include "tdprobe/tls_mimic.hpp"
#include "tdprobe/util.hpp"

namespace tdprobe {

namespace {

std::string lowercase(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

bool pattern_matches(std::span<const std::uint8_t> data, const PayloadPattern &pattern) {
  if (pattern.bytes.empty()) return false;
  if (pattern.offset.has_value()) {
    const std::size_t off = *pattern.offset;
    if (off + pattern.bytes.size() > data.size()) return false;
    return std::memcmp(data.data() + off, pattern.bytes.data(), pattern.bytes.size()) == 0;
  }
  return std::search(data.begin(), data.end(), pattern.bytes.begin(), pattern.bytes.end()) != data.end();
}

TdError malformed_rules(const std::string &origin, const std::string &message) {
  return {ErrorKind::Config, "MalformedRules", origin + ": " + message};
}

}  // namespace

std::string to_string(ClassifyMethod method) {
  switch (method) {
    case ClassifyMethod::Sni:
      return "Sni";
    case ClassifyMethod::DpiSignature:
      return "DpiSignature";
    case ClassifyMethod::PortDefault:
      return "PortDefault";
  }
  return "PortDefault";
}

const RateLimit *ShapingPolicy::limit_for(const std::string &label) const {
  const auto it = per_label.find(label);
  return it == per_label.end() ? nullptr : &it->second;
}

double ShapingPolicy::weight_for(const std::string &label) const {
  const auto it = qos_weights.find(label);
  return it == qos_weights.end() ? 1.0 : it->second;
}

bool hostname_matches_suffix(const std::string &hostname, const std::string &suffix) {
  std::string h = lowercase(hostname);
  std::string s = lowercase(suffix);
  if (!s.empty() && s.front() == '.') s.erase(s.begin());
  if (h.empty() || s.empty()) return false;
  if (h == s) return true;
  return h.size() > s.size() && h.compare(h.size() - s.size(), s.size(), s) == 0 &&
         h[h.size() - s.size() - 1] == '.';
}

Classification classify(std::span<const std::uint8_t> first_bytes, std::uint16_t dst_port,
                        const std::vector<ClassifierRule> &rules) {
  if (const auto sni = extract_sni(first_bytes); sni.has_value()) {
    for (const ClassifierRule &rule : rules)
      for (const std::string &suffix : rule.sni_suffixes)
        if (hostname_matches_suffix(*sni, suffix)) return {rule.label, ClassifyMethod::Sni};
  }
  for (const ClassifierRule &rule : rules)
    for (const PayloadPattern &pattern : rule.payload_patterns)
      if (pattern_matches(first_bytes, pattern)) return {rule.label, ClassifyMethod::DpiSignature};
  if (dst_port == 443) return {"HTTPS-unknown", ClassifyMethod::PortDefault};
  if (dst_port == 80) return {"HTTP-unknown", ClassifyMethod::PortDefault};
  return {"unknown", ClassifyMethod::PortDefault};
}

double token_bucket_delay(TokenBucket &bucket, const RateLimit &limit, double n_bytes, double now) {
  if (limit.rate_bps == 0) return 0.0;
  const double burst = static_cast<double>(limit.burst_bytes);
  const double rate_bytes_per_s = static_cast<double>(limit.rate_bps) / 8.0;
  if (!bucket.primed) {
    bucket.primed = true;
    bucket.tokens = burst;
    bucket.last_refill = now;
  }
  if (now > bucket.last_refill) {
    bucket.tokens = std::min(burst, bucket.tokens + rate_bytes_per_s * (now - bucket.last_refill));
    bucket.last_refill = now;
  }
  if (bucket.tokens >= n_bytes) {
    bucket.tokens -= n_bytes;
    return 0.0;
  }
  const double delay = (n_bytes - bucket.tokens) / rate_bytes_per_s;
  bucket.tokens = 0.0;
  bucket.last_refill = now + delay;  // the deficit is spent the moment it accrues
  return delay;
}

double shape(FlowState &flow, std::uint64_t n_bytes, double now, const ShapingPolicy &policy) {
  if (!flow.classification.has_value()) return 0.0;
  const RateLimit *limit = policy.limit_for(flow.classification->label);
  if (limit == nullptr) return 0.0;
  return token_bucket_delay(flow.bucket, *limit, static_cast<double>(n_bytes), now);
}

std::vector<double> weighted_max_min(const std::vector<double> &demands_bps,
                                     const std::vector<double> &weights, double capacity_bps) {
  if (demands_bps.size() != weights.size())
    throw TdError(ErrorKind::Config, "BadAllocationInput", "demand and weight counts differ");
  for (const double w : weights)
    if (!(w > 0.0)) throw TdError(ErrorKind::Config, "BadAllocationInput", "weights must be positive");

  const std::size_t n = demands_bps.size();
  std::vector<double> alloc(n, 0.0);
  std::vector<bool> active(n, false);
  for (std::size_t i = 0; i < n; ++i) active[i] = demands_bps[i] > 0.0;

  double remaining = capacity_bps;
  for (;;) {
    double active_weight = 0.0;
    std::size_t active_count = 0;
    for (std::size_t i = 0; i < n; ++i)
      if (active[i]) {
        active_weight += weights[i];
        ++active_count;
      }
    if (active_count == 0 || remaining <= 0.0) break;

    const double fill = remaining / active_weight;
    bool any_capped = false;
    for (std::size_t i = 0; i < n; ++i) {
      if (!active[i]) continue;
      if (demands_bps[i] <= weights[i] * fill) {
        alloc[i] = demands_bps[i];
        remaining -= demands_bps[i];
        active[i] = false;
        any_capped = true;
      }
    }
    if (!any_capped) {
      for (std::size_t i = 0; i < n; ++i)
        if (active[i]) alloc[i] = weights[i] * fill;
      break;
    }
  }
  return alloc;
}

std::vector<ThroughputSeries> simulate_shared_link(const std::vector<SimFlow> &flows,
                                                   const ShapingPolicy &policy, std::uint32_t duration_ms,
                                                   std::uint64_t seed, const SimConfig &config,
                                                   const TickObserver &observer) {
  if (flows.empty()) throw invalid_scenario("no flows");
  if (duration_ms == 0) throw invalid_scenario("duration must be positive");
  if (config.tick_ms == 0 || config.bin_ms == 0) throw invalid_scenario("tick and bin widths must be positive");
  if (policy.link_capacity_bps == 0) throw invalid_scenario("link_capacity_bps must be positive");

  const std::size_t n = flows.size();
  const std::size_t n_ticks = (duration_ms + config.tick_ms - 1) / config.tick_ms;
  const std::size_t n_bins = (duration_ms + config.bin_ms - 1) / config.bin_ms;
  const double dt = config.tick_ms / 1000.0;

  // Per-flow state: backlog queue, token bucket, trace arrivals bucketed by tick.
  std::vector<double> backlog(n, 0.0);
  std::vector<TokenBucket> buckets(n);
  std::vector<const RateLimit *> limits(n, nullptr);
  std::vector<double> weights(n, 1.0);
  std::vector<std::vector<double>> arrivals(n);
  std::vector<std::vector<double>> bin_acc(n, std::vector<double>(n_bins, 0.0));

  for (std::size_t i = 0; i < n; ++i) {
    const SimFlow &flow = flows[i];
    if (flow.label.empty()) throw invalid_scenario("flow \"" + flow.name + "\" has an empty label");
    if (!flow.trace.has_value() && !(flow.constant_rate_bps > 0.0))
      throw invalid_scenario("flow \"" + flow.name + "\" needs a trace or a positive rate");
    limits[i] = policy.limit_for(flow.label);
    weights[i] = policy.weight_for(flow.label);
    if (!(weights[i] > 0.0)) throw invalid_scenario("qos weight for \"" + flow.label + "\" must be positive");
    if (flow.trace.has_value()) {
      arrivals[i].assign(n_ticks, 0.0);
      std::uint64_t at_ms = 0;
      for (const TraceEntry &entry : flow.trace->entries) {
        at_ms += entry.delta_ms;
        if (entry.dir != Direction::ServerToClient) continue;
        const std::size_t tick = static_cast<std::size_t>(at_ms / config.tick_ms);
        if (tick < n_ticks) arrivals[i][tick] += static_cast<double>(entry.payload.size());
      }
    }
  }

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);

  std::vector<double> demand_bps(n, 0.0);
  for (std::size_t t = 0; t < n_ticks; ++t) {
    for (std::size_t i = 0; i < n; ++i) {
      if (flows[i].trace.has_value()) {
        backlog[i] += arrivals[i][t];
      } else {
        double rate = flows[i].constant_rate_bps;
        if (config.jitter_pct > 0.0) rate *= 1.0 + (config.jitter_pct / 100.0) * unit(rng);
        backlog[i] += rate / 8.0 * dt;
      }
      double sendable = backlog[i];
      if (limits[i] != nullptr) {
        TokenBucket &bucket = buckets[i];
        const double burst = static_cast<double>(limits[i]->burst_bytes);
        if (!bucket.primed) {
          bucket.primed = true;
          bucket.tokens = burst;
        }
        bucket.tokens = std::min(burst, bucket.tokens + static_cast<double>(limits[i]->rate_bps) / 8.0 * dt);
        sendable = std::min(sendable, bucket.tokens);
      }
      demand_bps[i] = sendable * 8.0 / dt;
    }

    const std::vector<double> alloc_bps =
        weighted_max_min(demand_bps, weights, static_cast<double>(policy.link_capacity_bps));

    const std::size_t bin = std::min<std::size_t>(t * config.tick_ms / config.bin_ms, n_bins - 1);
    for (std::size_t i = 0; i < n; ++i) {
      const double sent_bytes = alloc_bps[i] * dt / 8.0;
      backlog[i] = std::max(0.0, backlog[i] - sent_bytes);
      if (limits[i] != nullptr) buckets[i].tokens = std::max(0.0, buckets[i].tokens - sent_bytes);
      bin_acc[i][bin] += sent_bytes;
    }

    if (observer) {
      TickObservation obs;
      obs.tick = t;
      obs.demand_bps = demand_bps;
      obs.alloc_bps = alloc_bps;
      observer(obs);
    }
  }

  std::vector<ThroughputSeries> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i].bin_width_ms = config.bin_ms;
    out[i].bins.resize(n_bins);
    for (std::size_t k = 0; k < n_bins; ++k)
      out[i].bins[k] = static_cast<std::uint64_t>(std::llround(bin_acc[i][k]));
  }
  return out;
}

RulesAndPolicy rules_policy_from_json(const std::string &text, const std::string &origin) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception &e) {
    throw malformed_rules(origin, std::string("invalid JSON: ") + e.what());
  }
  if (!doc.is_object()) throw malformed_rules(origin, "top level must be an object");

  RulesAndPolicy rp;
  if (doc.contains("rules")) {
    const auto &rules = doc["rules"];
    if (!rules.is_array()) throw malformed_rules(origin, "\"rules\" must be an array");
    for (std::size_t i = 0; i < rules.size(); ++i) {
      const auto &r = rules[i];
      const std::string locus = "rules[" + std::to_string(i) + "]";
      if (!r.is_object()) throw malformed_rules(origin, locus + " must be an object");
      ClassifierRule rule;
      if (!r.contains("label") || !r["label"].is_string() || r["label"].get<std::string>().empty())
        throw malformed_rules(origin, locus + ".label must be a non-empty string");
      rule.label = r["label"].get<std::string>();
      if (r.contains("sni_suffixes")) {
        if (!r["sni_suffixes"].is_array()) throw malformed_rules(origin, locus + ".sni_suffixes must be an array");
        for (const auto &s : r["sni_suffixes"]) {
          if (!s.is_string() || s.get<std::string>().empty())
            throw malformed_rules(origin, locus + ".sni_suffixes entries must be non-empty strings");
          rule.sni_suffixes.push_back(s.get<std::string>());
        }
      }
      if (r.contains("payload_patterns")) {
        if (!r["payload_patterns"].is_array())
          throw malformed_rules(origin, locus + ".payload_patterns must be an array");
        for (std::size_t j = 0; j < r["payload_patterns"].size(); ++j) {
          const auto &p = r["payload_patterns"][j];
          const std::string plocus = locus + ".payload_patterns[" + std::to_string(j) + "]";
          if (!p.is_object() || !p.contains("hex") || !p["hex"].is_string())
            throw malformed_rules(origin, plocus + " needs a \"hex\" string");
          PayloadPattern pattern;
          const auto bytes = hex_decode(p["hex"].get<std::string>());
          if (!bytes.has_value() || bytes->empty())
            throw malformed_rules(origin, plocus + ".hex must be non-empty even-length hex");
          pattern.bytes = *bytes;
          if (p.contains("offset") && !p["offset"].is_null()) {
            if (p["offset"].is_string()) {
              if (p["offset"].get<std::string>() != "any")
                throw malformed_rules(origin, plocus + ".offset must be an integer or \"any\"");
            } else if (p["offset"].is_number_integer() && p["offset"].get<std::int64_t>() >= 0) {
              pattern.offset = static_cast<std::size_t>(p["offset"].get<std::int64_t>());
            } else {
              throw malformed_rules(origin, plocus + ".offset must be a non-negative integer or \"any\"");
            }
          }
          rule.payload_patterns.push_back(std::move(pattern));
        }
      }
      if (rule.sni_suffixes.empty() && rule.payload_patterns.empty())
        throw malformed_rules(origin, locus + " needs sni_suffixes or payload_patterns");
      rp.rules.push_back(std::move(rule));
    }
  }

  if (doc.contains("policy")) {
    const auto &pol = doc["policy"];
    if (!pol.is_object()) throw malformed_rules(origin, "\"policy\" must be an object");
    if (pol.contains("per_label")) {
      if (!pol["per_label"].is_object()) throw malformed_rules(origin, "policy.per_label must be an object");
      for (const auto &[label, entry] : pol["per_label"].items()) {
        if (!entry.is_object() || !entry.contains("rate_bps") || !entry.contains("burst_bytes") ||
            !entry["rate_bps"].is_number_integer() || !entry["burst_bytes"].is_number_integer())
          throw malformed_rules(origin, "policy.per_label[\"" + label + "\"] needs integer rate_bps and burst_bytes");
        RateLimit limit;
        const std::int64_t rate = entry["rate_bps"].get<std::int64_t>();
        const std::int64_t burst = entry["burst_bytes"].get<std::int64_t>();
        if (rate <= 0 || burst <= 0)
          throw malformed_rules(origin, "policy.per_label[\"" + label + "\"] rates and bursts must be positive");
        limit.rate_bps = static_cast<std::uint64_t>(rate);
        limit.burst_bytes = static_cast<std::uint64_t>(burst);
        rp.policy.per_label.emplace(label, limit);
      }
    }
    if (pol.contains("qos_weights")) {
      if (!pol["qos_weights"].is_object()) throw malformed_rules(origin, "policy.qos_weights must be an object");
      for (const auto &[label, w] : pol["qos_weights"].items()) {
        if (!w.is_number() || !(w.get<double>() > 0.0))
          throw malformed_rules(origin, "policy.qos_weights[\"" + label + "\"] must be a positive number");
        rp.policy.qos_weights.emplace(label, w.get<double>());
      }
    }
    if (pol.contains("link_capacity_bps")) {
      if (!pol["link_capacity_bps"].is_number_integer() || pol["link_capacity_bps"].get<std::int64_t>() <= 0)
        throw malformed_rules(origin, "policy.link_capacity_bps must be a positive integer");
      rp.policy.link_capacity_bps = static_cast<std::uint64_t>(pol["link_capacity_bps"].get<std::int64_t>());
    }
  }
  return rp;
}

RulesAndPolicy load_rules_policy(const std::filesystem::path &path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw io_failure(path.string(), "cannot open for reading");
  std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return rules_policy_from_json(text, path.string());
}

std::string rules_policy_to_json(const RulesAndPolicy &rp) {
  nlohmann::ordered_json doc;
  doc["rules"] = nlohmann::ordered_json::array();
  for (const ClassifierRule &rule : rp.rules) {
    nlohmann::ordered_json r;
    r["label"] = rule.label;
    r["sni_suffixes"] = rule.sni_suffixes;
    r["payload_patterns"] = nlohmann::ordered_json::array();
    for (const PayloadPattern &pattern : rule.payload_patterns) {
      nlohmann::ordered_json p;
      if (pattern.offset.has_value())
        p["offset"] = *pattern.offset;
      else
        p["offset"] = "any";
      p["hex"] = hex_encode(pattern.bytes);
      r["payload_patterns"].push_back(std::move(p));
    }
    doc["rules"].push_back(std::move(r));
  }
  // Unset policy parts are omitted so that classification-only rule files
  // round-trip (the loader rejects an explicit zero capacity).
  nlohmann::ordered_json pol = nlohmann::ordered_json::object();
  if (!rp.policy.per_label.empty()) {
    pol["per_label"] = nlohmann::ordered_json::object();
    for (const auto &[label, limit] : rp.policy.per_label)
      pol["per_label"][label] = {{"rate_bps", limit.rate_bps}, {"burst_bytes", limit.burst_bytes}};
  }
  if (!rp.policy.qos_weights.empty()) {
    pol["qos_weights"] = nlohmann::ordered_json::object();
    for (const auto &[label, w] : rp.policy.qos_weights) pol["qos_weights"][label] = w;
  }
  if (rp.policy.link_capacity_bps > 0) pol["link_capacity_bps"] = rp.policy.link_capacity_bps;
  if (!pol.empty()) doc["policy"] = std::move(pol);
  return doc.dump();
}

// ---------------------------------------------------------------------------
// ShaperProxy

namespace {

// True while the buffered prefix is still consistent with a TLS handshake
// record whose end has not arrived yet.
bool could_be_tls_prefix(std::span<const std::uint8_t> bytes) {
  if (bytes.empty()) return false;
  if (bytes[0] != 0x16) return false;
  if (bytes.size() >= 2 && bytes[1] != 0x03) return false;
  if (bytes.size() >= 3 && bytes[2] > 0x04) return false;
  return true;
}

}  // namespace

struct ShaperProxy::Impl {
  Config config;
  Socket listener;
  std::uint16_t bound_port = 0;
  std::atomic<bool> running{false};
  std::thread accept_thread;
  std::thread status_thread;

  mutable std::mutex mu;
  std::map<std::string, LabelCounter> counters;
  std::vector<std::thread> conn_threads;

  bool any_dpi_rules = false;

  void accept_loop();
  void handle_connection(Socket client);
  void status_loop();
  void write_status_file() const;
  std::string status_json_locked() const;  // caller holds mu
};

ShaperProxy::ShaperProxy(Config config) : impl_(std::make_unique<Impl>()) {
  impl_->config = std::move(config);
  for (const ClassifierRule &rule : impl_->config.rules)
    if (!rule.payload_patterns.empty()) impl_->any_dpi_rules = true;
}

ShaperProxy::~ShaperProxy() { stop(); }

void ShaperProxy::start() {
  impl_->listener = listen_on(impl_->config.listen_host, impl_->config.listen_port);
  impl_->bound_port = local_port(impl_->listener);
  impl_->running.store(true);
  impl_->accept_thread = std::thread([this] { impl_->accept_loop(); });
  if (!impl_->config.status_path.empty())
    impl_->status_thread = std::thread([this] { impl_->status_loop(); });
}

void ShaperProxy::stop() {
  if (!impl_->running.exchange(false)) return;
  impl_->listener.shutdown_both();
  if (impl_->accept_thread.joinable()) impl_->accept_thread.join();
  if (impl_->status_thread.joinable()) impl_->status_thread.join();
  std::vector<std::thread> threads;
  {
    std::lock_guard lock(impl_->mu);
    threads.swap(impl_->conn_threads);
  }
  for (std::thread &t : threads)
    if (t.joinable()) t.join();
  impl_->listener.close_fd();
  if (!impl_->config.status_path.empty()) impl_->write_status_file();
}

std::uint16_t ShaperProxy::port() const { return impl_->bound_port; }

std::map<std::string, LabelCounter> ShaperProxy::counters() const {
  std::lock_guard lock(impl_->mu);
  return impl_->counters;
}

std::string ShaperProxy::status_json() const {
  std::lock_guard lock(impl_->mu);
  return impl_->status_json_locked();
}

std::string ShaperProxy::Impl::status_json_locked() const {
  std::string out = "{\"labels\":{";
  bool first = true;
  for (const auto &[label, counter] : counters) {
    if (!first) out += ',';
    first = false;
    out += nlohmann::json(label).dump();  // quoted + escaped
    out += ":{\"bytes\":" + std::to_string(counter.bytes) + ",\"flows\":" + std::to_string(counter.flows) + "}";
  }
  out += "}}";
  return out;
}

void ShaperProxy::Impl::write_status_file() const {
  std::string payload;
  {
    std::lock_guard lock(mu);
    payload = status_json_locked();
  }
  const std::filesystem::path target(config.status_path);
  const std::filesystem::path tmp = target.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) return;  // status is best-effort; the in-process accessor stays authoritative
    f << payload << '\n';
  }
  std::error_code ec;
  std::filesystem::rename(tmp, target, ec);
}

void ShaperProxy::Impl::status_loop() {
  while (running.load()) {
    write_status_file();
    std::this_thread::sleep_for(std::chrono::milliseconds(config.status_interval_ms));
  }
}

void ShaperProxy::Impl::accept_loop() {
  while (running.load()) {
    std::optional<Socket> client;
    try {
      client = accept_ready(listener, 0.25);
    } catch (const TdError &) {
      break;  // listener shut down
    }
    if (!client.has_value()) continue;
    std::lock_guard lock(mu);
    if (!running.load()) break;
    conn_threads.emplace_back([this, c = std::make_shared<Socket>(std::move(*client))]() mutable {
      handle_connection(std::move(*c));
    });
  }
}

void ShaperProxy::Impl::handle_connection(Socket client) {
  set_nodelay(client);
  Socket upstream;
  try {
    upstream = connect_to(config.upstream_host, config.upstream_port, 5.0);
  } catch (const TdError &) {
    return;  // upstream unreachable: drop the client connection
  }
  set_nodelay(upstream);

  struct Shared {
    std::mutex mu;
    std::optional<Classification> final_class;
    std::uint64_t prefinal_sc_bytes = 0;
    FlowState flow;
  } shared;
  shared.flow.key = peer_address(client) + "->" + config.upstream_host + ":" +
                    std::to_string(config.upstream_port);

  auto finalize = [&](const Classification &c) {
    std::uint64_t carried = 0;
    {
      std::lock_guard lock(shared.mu);
      if (shared.final_class.has_value()) return;
      shared.final_class = c;
      shared.flow.classification = c;
      carried = shared.prefinal_sc_bytes;
    }
    std::lock_guard lock(mu);
    auto &counter = counters[c.label];
    counter.flows += 1;
    counter.bytes += carried;
  };

  // Client-to-server pump; owns classification.
  std::thread c2s([&] {
    std::vector<std::uint8_t> inspect;
    inspect.reserve(config.inspect_limit);
    const double deadline = mono_seconds() + config.classify_deadline_s;
    bool classified = false;
    bool client_eof = false;
    std::uint8_t buf[16384];

    auto try_decide = [&](bool terminal) -> std::optional<Classification> {
      const std::span<const std::uint8_t> bytes(inspect.data(), inspect.size());
      const bool at_limit = inspect.size() >= config.inspect_limit;
      if (terminal || at_limit) return classify(bytes, bound_port, config.rules);
      if (inspect.empty()) return std::nullopt;
      if (could_be_tls_prefix(bytes)) {
        const auto record = tls_record_size(bytes);
        if (!record.has_value() || *record > inspect.size()) return std::nullopt;  // wait for the record
        const Classification c = classify(bytes, bound_port, config.rules);
        if (c.method != ClassifyMethod::PortDefault) return c;
        if (!any_dpi_rules) return c;  // nothing later can change the verdict
        return std::nullopt;
      }
      const Classification c = classify(bytes, bound_port, config.rules);
      if (c.method == ClassifyMethod::DpiSignature) return c;
      if (!any_dpi_rules) return c;  // non-TLS start and no patterns to wait for
      return std::nullopt;
    };

    while (running.load() && !classified) {
      const double remain = deadline - mono_seconds();
      if (remain <= 0) {
        finalize(*try_decide(true));
        classified = true;
        break;
      }
      std::optional<std::size_t> n;
      try {
        n = recv_some(client, buf, sizeof(buf), remain);
      } catch (const TdError &) {
        return;
      }
      if (!n.has_value()) {
        finalize(*try_decide(true));
        classified = true;
        break;
      }
      if (*n == 0) {
        finalize(*try_decide(true));
        classified = true;
        client_eof = true;
        break;
      }
      const std::size_t room = config.inspect_limit > inspect.size() ? config.inspect_limit - inspect.size() : 0;
      inspect.insert(inspect.end(), buf, buf + std::min(*n, room));
      try {
        send_all(upstream, std::span<const std::uint8_t>(buf, *n));
      } catch (const TdError &) {
        return;
      }
      if (const auto decided = try_decide(false); decided.has_value()) {
        finalize(*decided);
        classified = true;
      }
    }
    if (client_eof) {
      upstream.shutdown_write();
      return;
    }
    // Transparent forwarding after classification.
    while (running.load()) {
      std::optional<std::size_t> n;
      try {
        n = recv_some(client, buf, sizeof(buf), 1.0);
      } catch (const TdError &) {
        return;
      }
      if (!n.has_value()) continue;
      if (*n == 0) {
        upstream.shutdown_write();
        return;
      }
      try {
        send_all(upstream, std::span<const std::uint8_t>(buf, *n));
      } catch (const TdError &) {
        return;
      }
    }
  });

  // Server-to-client pump; applies shaping once the flow is classified.
  std::thread s2c([&] {
    std::uint8_t buf[16384];
    while (running.load()) {
      std::optional<std::size_t> n;
      try {
        n = recv_some(upstream, buf, sizeof(buf), 1.0);
      } catch (const TdError &) {
        return;
      }
      if (!n.has_value()) continue;
      if (*n == 0) {
        client.shutdown_write();
        return;
      }
      bool is_final = false;
      std::string label;
      {
        std::lock_guard lock(shared.mu);
        if (shared.final_class.has_value()) {
          is_final = true;
          label = shared.final_class->label;
        } else {
          shared.prefinal_sc_bytes += *n;
        }
      }
      if (is_final) {
        const double delay = shape(shared.flow, *n, mono_seconds(), config.policy);
        if (delay > 0) std::this_thread::sleep_for(std::chrono::duration<double>(delay));
        {
          std::lock_guard lock(mu);
          counters[label].bytes += *n;
        }
      }
      try {
        send_all(client, std::span<const std::uint8_t>(buf, *n));
      } catch (const TdError &) {
        return;
      }
    }
  });

  c2s.join();
  s2c.join();
}

}  // namespace tdprobe
