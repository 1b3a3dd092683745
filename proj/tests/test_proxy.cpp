#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <numeric>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "tdprobe/detector.hpp"
#include "tdprobe/errors.hpp"
#include "tdprobe/middlebox.hpp"
#include "tdprobe/net.hpp"
#include "tdprobe/replay.hpp"
#include "tdprobe/trace.hpp"

using namespace tdprobe;

namespace {

ServiceTrace make_trace(const std::string &service, const std::string &sni,
                        std::uint64_t chunk_bytes = 12'500, std::uint32_t interval_ms = 100,
                        std::uint32_t n_chunks = 10) {
  DashParams params;
  params.chunk_bytes = chunk_bytes;
  params.chunk_interval_ms = interval_ms;
  params.n_chunks = n_chunks;
  params.request_bytes = 120;
  params.seed = 21;
  return synth_dash_trace(params, service, sni, 443);
}

ReplayRequest request_for(const std::string &client_id, const std::string &service,
                          ReplayKind kind, std::uint16_t data_port, bool sni_prefix) {
  ReplayRequest req;
  req.client_id = client_id;
  req.service_name = service;
  req.kind = kind;
  req.use_sni_prefix = sni_prefix;
  req.dst_port_override = data_port;
  return req;
}

std::vector<ClassifierRule> video_rules() {
  ClassifierRule tube;
  tube.label = "youtube";
  tube.sni_suffixes = {"youtube.com", "googlevideo.com"};
  ClassifierRule plain;
  plain.label = "plainvideo";
  PayloadPattern pat;
  pat.offset = 0;
  const std::string magic = "GET /vid";
  pat.bytes.assign(magic.begin(), magic.end());
  plain.payload_patterns = {pat};
  return {tube, plain};
}

double trimmed_mean_bps(const ThroughputSeries &series) {
  const auto rates = per_bin_rates_bps(series);
  return std::accumulate(rates.begin(), rates.end(), 0.0) / static_cast<double>(rates.size());
}

double raw_mean_bps(const ReplayResult &result) {
  return 8.0 * static_cast<double>(result.total_bytes) /
         (static_cast<double>(result.duration_ms) / 1000.0);
}

// Polls the proxy counters until the label reaches the expected byte count.
bool wait_for_bytes(const ShaperProxy &proxy, const std::string &label, std::uint64_t bytes,
                    double timeout_s) {
  const double deadline = mono_seconds() + timeout_s;
  while (mono_seconds() < deadline) {
    const auto counters = proxy.counters();
    const auto it = counters.find(label);
    if (it != counters.end() && it->second.bytes >= bytes) return true;
    std::this_thread::sleep_for(std::chrono::milliseconds(25));
  }
  return false;
}

}  // namespace

TEST_CASE("forwarding is transparent when no policy applies") {
  const ServiceTrace trace = make_trace("svc", "video.example");
  ReplayServer server(ReplayServerConfig{}, make_trace_store({trace}));
  server.start();

  ShaperProxy::Config pc;
  pc.upstream_host = "127.0.0.1";
  pc.upstream_port = server.data_port();
  ShaperProxy proxy(std::move(pc));
  proxy.start();

  const auto result =
      run_replay_client("127.0.0.1", server.side_port(), trace,
                        request_for("client-a", "svc", ReplayKind::Original, proxy.port(), true));
  CHECK(result.completed);
  CHECK(result.payload_match);
  CHECK(result.total_bytes == trace.total_bytes(Direction::ServerToClient));
  const double offered = offered_rate_bps(trace);
  const double mean = raw_mean_bps(result);
  CHECK(mean > 0.75 * offered);
  CHECK(mean < 1.25 * offered);

  proxy.stop();
  server.stop();
}

TEST_CASE("flows are labeled from the TLS server name, byte signatures, or the port") {
  const ServiceTrace tube_trace = make_trace("tube", "r4---sn.googlevideo.com");
  ServiceTrace plain_trace = make_trace("vid", "", 8'000, 80, 8);
  // Stamp the recognizable request signature onto the first client payload.
  const std::string magic = "GET /vid";
  REQUIRE(plain_trace.entries[0].dir == Direction::ClientToServer);
  REQUIRE(plain_trace.entries[0].payload.size() >= magic.size());
  std::copy(magic.begin(), magic.end(), plain_trace.entries[0].payload.begin());

  ReplayServer server(ReplayServerConfig{}, make_trace_store({tube_trace, plain_trace}));
  server.start();

  ShaperProxy::Config pc;
  pc.upstream_host = "127.0.0.1";
  pc.upstream_port = server.data_port();
  pc.rules = video_rules();
  ShaperProxy proxy(std::move(pc));
  proxy.start();

  const std::uint64_t tube_sc = tube_trace.total_bytes(Direction::ServerToClient);
  const std::uint64_t plain_sc = plain_trace.total_bytes(Direction::ServerToClient);

  const auto orig =
      run_replay_client("127.0.0.1", server.side_port(), tube_trace,
                        request_for("c-sni", "tube", ReplayKind::Original, proxy.port(), true));
  REQUIRE(orig.completed);
  const auto dpi =
      run_replay_client("127.0.0.1", server.side_port(), plain_trace,
                        request_for("c-dpi", "vid", ReplayKind::Original, proxy.port(), false));
  REQUIRE(dpi.completed);
  const auto ctrl =
      run_replay_client("127.0.0.1", server.side_port(), bit_reverse_trace(tube_trace),
                        request_for("c-ctl", "tube", ReplayKind::Control, proxy.port(), false));
  REQUIRE(ctrl.completed);

  // The hello handshake adds a short server reply ahead of the replayed bytes.
  CHECK(wait_for_bytes(proxy, "youtube", tube_sc + 47, 5.0));
  CHECK(wait_for_bytes(proxy, "plainvideo", plain_sc, 5.0));
  CHECK(wait_for_bytes(proxy, "unknown", tube_sc, 5.0));

  const auto counters = proxy.counters();
  REQUIRE(counters.count("youtube") == 1);
  REQUIRE(counters.count("plainvideo") == 1);
  REQUIRE(counters.count("unknown") == 1);
  CHECK(counters.at("youtube").flows == 1);
  CHECK(counters.at("youtube").bytes == tube_sc + 47);
  CHECK(counters.at("plainvideo").flows == 1);
  CHECK(counters.at("plainvideo").bytes == plain_sc);
  CHECK(counters.at("unknown").flows == 1);
  CHECK(counters.at("unknown").bytes == tube_sc);

  proxy.stop();
  server.stop();
}

TEST_CASE("shaping throttles the matching label while a concurrent flow runs clean") {
  const ServiceTrace trace = make_trace("svc", "youtube.com", 50'000, 50, 20);
  ReplayServer server(ReplayServerConfig{}, make_trace_store({trace}));
  server.start();

  ShaperProxy::Config pc;
  pc.upstream_host = "127.0.0.1";
  pc.upstream_port = server.data_port();
  pc.rules = {video_rules()[0]};
  pc.policy.per_label["youtube"] = RateLimit{2'000'000, 25'000};
  ShaperProxy proxy(std::move(pc));
  proxy.start();

  ReplayResult shaped, clean;
  std::thread shaped_thread([&] {
    shaped =
        run_replay_client("127.0.0.1", server.side_port(), trace,
                          request_for("c-shaped", "svc", ReplayKind::Original, proxy.port(), true),
                          100, 20.0);
  });
  // Stagger so each data connection pairs with its own registration.
  std::this_thread::sleep_for(std::chrono::milliseconds(700));
  const ServiceTrace control_trace = bit_reverse_trace(trace);
  std::thread clean_thread([&] {
    clean =
        run_replay_client("127.0.0.1", server.side_port(), control_trace,
                          request_for("c-clean", "svc", ReplayKind::Control, proxy.port(), false),
                          100, 20.0);
  });
  shaped_thread.join();
  clean_thread.join();

  REQUIRE(shaped.completed);
  REQUIRE(clean.completed);

  const double shaped_mean = trimmed_mean_bps(shaped.throughput);
  CHECK(shaped_mean > 1.7e6);
  CHECK(shaped_mean < 2.3e6);

  const double offered = offered_rate_bps(trace);
  const double clean_mean = raw_mean_bps(clean);
  CHECK(clean_mean > 0.75 * offered);
  CHECK(clean_mean < 1.25 * offered);
  CHECK(shaped_mean < 0.45 * clean_mean);

  proxy.stop();
  server.stop();
}

TEST_CASE("throttle accuracy, live counters, and the status file agree") {
  const ServiceTrace trace = make_trace("svc", "youtube.com", 50'000, 50, 20);
  ReplayServer server(ReplayServerConfig{}, make_trace_store({trace}));
  server.start();

  const auto status_path = std::filesystem::temp_directory_path() /
                           ("tdprobe_proxy_status_" + std::to_string(::getpid()) + ".json");
  std::filesystem::remove(status_path);

  ShaperProxy::Config pc;
  pc.upstream_host = "127.0.0.1";
  pc.upstream_port = server.data_port();
  pc.rules = {video_rules()[0]};
  pc.policy.per_label["youtube"] = RateLimit{2'000'000, 25'000};
  pc.status_path = status_path.string();
  pc.status_interval_ms = 100;
  ShaperProxy proxy(std::move(pc));
  proxy.start();

  const auto result =
      run_replay_client("127.0.0.1", server.side_port(), trace,
                        request_for("c-acc", "svc", ReplayKind::Original, proxy.port(), true), 100,
                        20.0);
  REQUIRE(result.completed);
  REQUIRE(result.payload_match);

  const double mean = trimmed_mean_bps(result.throughput);
  CHECK(mean > 1.7e6);
  CHECK(mean < 2.3e6);

  const std::uint64_t expected = trace.total_bytes(Direction::ServerToClient) + 47;
  CHECK(wait_for_bytes(proxy, "youtube", expected, 5.0));
  proxy.stop();

  // stop() writes a final snapshot, so the file must agree with the accessor.
  REQUIRE(std::filesystem::exists(status_path));
  std::ifstream f(status_path);
  std::stringstream buffer;
  buffer << f.rdbuf();
  const auto file_doc = nlohmann::json::parse(buffer.str());
  const auto live_doc = nlohmann::json::parse(proxy.status_json());
  CHECK(file_doc == live_doc);
  REQUIRE(file_doc.contains("labels"));
  REQUIRE(file_doc["labels"].contains("youtube"));
  CHECK(file_doc["labels"]["youtube"]["bytes"].get<std::uint64_t>() == expected);
  CHECK(file_doc["labels"]["youtube"]["flows"].get<std::uint64_t>() == 1);

  std::filesystem::remove(status_path);
  server.stop();
}

TEST_CASE("a silent client falls to the port default after the deadline and still forwards") {
  // Plain echo upstream: whatever arrives is sent straight back.
  Socket echo_listener = listen_on("127.0.0.1", 0);
  const std::uint16_t echo_port = local_port(echo_listener);
  std::atomic<bool> stop_echo{false};
  std::thread echo_thread([&] {
    auto conn = accept_ready(echo_listener, 5.0);
    if (!conn.has_value()) return;
    std::uint8_t buf[4096];
    while (!stop_echo.load()) {
      std::optional<std::size_t> n;
      try {
        n = recv_some(*conn, buf, sizeof(buf), 0.2);
      } catch (const TdError &) {
        return;
      }
      if (!n.has_value()) continue;
      if (*n == 0) return;
      try {
        send_all(*conn, std::span<const std::uint8_t>(buf, *n));
      } catch (const TdError &) {
        return;
      }
    }
  });

  ShaperProxy::Config pc;
  pc.upstream_host = "127.0.0.1";
  pc.upstream_port = echo_port;
  pc.rules = video_rules();
  pc.classify_deadline_s = 0.3;
  ShaperProxy proxy(std::move(pc));
  proxy.start();

  {
    Socket client = connect_to("127.0.0.1", proxy.port(), 3.0);
    std::this_thread::sleep_for(std::chrono::milliseconds(450));
    const std::string ping = "ping\n";
    send_all(client, std::span<const std::uint8_t>(
                         reinterpret_cast<const std::uint8_t *>(ping.data()), ping.size()));
    std::uint8_t back[5] = {};
    BufferedReader reader(client);
    REQUIRE(reader.read_exact(back, sizeof(back), 3.0));
    CHECK(std::string(reinterpret_cast<const char *>(back), sizeof(back)) == ping);
  }

  CHECK(wait_for_bytes(proxy, "unknown", 5, 3.0));
  const auto counters = proxy.counters();
  REQUIRE(counters.count("unknown") == 1);
  CHECK(counters.at("unknown").flows == 1);
  CHECK(counters.at("unknown").bytes == 5);

  stop_echo.store(true);
  echo_thread.join();
  proxy.stop();
}

TEST_CASE("a dead upstream drops clients quickly and leaves the proxy healthy") {
  // Reserve a port, then free it so nothing listens there.
  std::uint16_t dead_port = 0;
  {
    Socket tmp = listen_on("127.0.0.1", 0);
    dead_port = local_port(tmp);
  }

  ShaperProxy::Config pc;
  pc.upstream_host = "127.0.0.1";
  pc.upstream_port = dead_port;
  ShaperProxy proxy(std::move(pc));
  proxy.start();

  auto observe_drop = [&] {
    Socket client = connect_to("127.0.0.1", proxy.port(), 3.0);
    const double deadline = mono_seconds() + 8.0;
    std::uint8_t buf[64];
    while (mono_seconds() < deadline) {
      std::optional<std::size_t> n;
      try {
        n = recv_some(client, buf, sizeof(buf), 0.5);
      } catch (const TdError &) {
        return true;  // reset counts as a drop
      }
      if (n.has_value() && *n == 0) return true;  // orderly close
    }
    return false;
  };

  CHECK(observe_drop());
  CHECK(observe_drop());  // the accept loop must still be alive
  proxy.stop();
}

TEST_CASE("stop is idempotent and freed ports can be bound again") {
  std::uint16_t port = 0;
  {
    ShaperProxy::Config pc;
    pc.upstream_host = "127.0.0.1";
    pc.upstream_port = 9;  // never connected: no traffic in this test
    ShaperProxy first(std::move(pc));
    first.start();
    port = first.port();
    CHECK(port != 0);
    first.stop();
    first.stop();  // second stop is a no-op
  }

  ShaperProxy::Config pc;
  pc.listen_port = port;
  pc.upstream_host = "127.0.0.1";
  pc.upstream_port = 9;
  ShaperProxy second(std::move(pc));
  second.start();
  CHECK(second.port() == port);
  // Destructor without an explicit stop() must shut down cleanly.
}
