// Scenario-driven acceptance checks for the toolkit's shipped guarantees.
// Each criterion runs end to end — most through the real command-line binary
// and live sockets — and prints exactly one PASS/FAIL line.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <numeric>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "subprocess.hpp"
#include "tdprobe/detector.hpp"
#include "tdprobe/errors.hpp"
#include "tdprobe/middlebox.hpp"
#include "tdprobe/net.hpp"
#include "tdprobe/replay.hpp"
#include "tdprobe/tls_mimic.hpp"
#include "tdprobe/trace.hpp"

using namespace tdprobe;
using testproc::ChildProc;
using testproc::CmdResult;
using testproc::fresh_dir;
using testproc::run_cmd;
using testproc::run_tool;
using testproc::slurp;
using testproc::spit;

namespace {

struct Checker {
  std::vector<std::string> failures;

  void expect(bool ok, const std::string &what) {
    if (!ok) failures.push_back(what);
  }

  template <typename T>
  void expect_near(T actual, T lo, T hi, const std::string &what) {
    if (!(actual >= lo && actual <= hi))
      failures.push_back(what + " = " + std::to_string(actual) + ", want [" + std::to_string(lo) +
                         ", " + std::to_string(hi) + "]");
  }
};

ServiceTrace chunked_trace(const std::string &service, const std::string &sni,
                           std::uint64_t chunk_bytes, std::uint32_t interval_ms,
                           std::uint32_t n_chunks, std::uint64_t seed = 42) {
  DashParams params;
  params.chunk_bytes = chunk_bytes;
  params.chunk_interval_ms = interval_ms;
  params.n_chunks = n_chunks;
  params.request_bytes = 200;
  params.seed = seed;
  return synth_dash_trace(params, service, sni, 443);
}

std::vector<ClassifierRule> youtube_rules(bool with_dpi) {
  ClassifierRule tube;
  tube.label = "youtube";
  tube.sni_suffixes = {"youtube.com", "googlevideo.com"};
  std::vector<ClassifierRule> rules = {tube};
  if (with_dpi) {
    ClassifierRule plain;
    plain.label = "plainvideo";
    PayloadPattern pat;
    pat.offset = 0;
    const std::string magic = "GET /vid";
    pat.bytes.assign(magic.begin(), magic.end());
    plain.payload_patterns = {pat};
    rules.push_back(plain);
  }
  return rules;
}

void write_rules_file(const std::filesystem::path &path, const std::vector<ClassifierRule> &rules,
                      const ShapingPolicy &policy = {}) {
  RulesAndPolicy rp;
  rp.rules = rules;
  rp.policy = policy;
  spit(path, rules_policy_to_json(rp));
}

nlohmann::json read_json(const std::filesystem::path &path) {
  return nlohmann::json::parse(slurp(path));
}

double trimmed_mean_bps(const ThroughputSeries &series) {
  const auto rates = per_bin_rates_bps(series);
  return std::accumulate(rates.begin(), rates.end(), 0.0) / static_cast<double>(rates.size());
}

// Average of per-run trimmed means over runN_<side>.csv files.
double mean_across_runs(const std::filesystem::path &dir, const std::string &side, int runs) {
  double sum = 0.0;
  for (int i = 0; i < runs; ++i) {
    const auto series = read_series_csv(dir / ("run" + std::to_string(i) + "_" + side + ".csv"));
    sum += trimmed_mean_bps(series);
  }
  return sum / runs;
}

std::uint64_t label_bytes(const nlohmann::json &status, const std::string &label) {
  if (!status.contains("labels") || !status["labels"].contains(label)) return 0;
  return status["labels"][label]["bytes"].get<std::uint64_t>();
}

std::uint64_t label_flows(const nlohmann::json &status, const std::string &label) {
  if (!status.contains("labels") || !status["labels"].contains(label)) return 0;
  return status["labels"][label]["flows"].get<std::uint64_t>();
}

struct ServeHandle {
  std::unique_ptr<ChildProc> proc;
  std::uint16_t side_port = 0;
  std::uint16_t data_port = 0;
};

ServeHandle start_serve(const std::filesystem::path &traces_dir) {
  ServeHandle h;
  h.proc = std::make_unique<ChildProc>(std::vector<std::string>{
      testproc::tool_binary(), "serve", "--traces-dir", traces_dir.string(), "--side-port", "0",
      "--data-port", "0"});
  const auto ready = h.proc->read_line(10.0);
  if (!ready.has_value()) throw std::runtime_error("replay server never printed its ready line");
  const auto doc = nlohmann::json::parse(*ready);
  h.side_port = doc.at("side_port").get<std::uint16_t>();
  h.data_port = doc.at("data_port").get<std::uint16_t>();
  return h;
}

std::unique_ptr<ChildProc> start_shape(std::uint16_t listen_port, std::uint16_t upstream_port,
                                       const std::filesystem::path &rules,
                                       const std::filesystem::path &status_out) {
  auto proc = std::make_unique<ChildProc>(std::vector<std::string>{
      testproc::tool_binary(), "shape", "--listen",
      "127.0.0.1:" + std::to_string(listen_port), "--upstream",
      "127.0.0.1:" + std::to_string(upstream_port), "--rules", rules.string(), "--status-out",
      status_out.string()});
  const auto ready = proc->read_line(10.0);
  if (!ready.has_value()) throw std::runtime_error("shaper proxy never printed its ready line");
  return proc;
}

// ---------------------------------------------------------------------------
// 1. SNI-based classification: handshake-prefixed replays carry the service
//    label; without the prefix, port 443 traffic is generic HTTPS.

void criterion_sni_classification(Checker &c) {
  const auto dir = fresh_dir("acc1");
  const auto traces = dir / "traces";
  std::filesystem::create_directories(traces);
  const ServiceTrace trace = chunked_trace("ytclone", "youtube.com", 12'500, 100, 10);
  save_trace(trace, (traces / "ytclone.json").string());
  const std::uint64_t sc = trace.total_bytes(Direction::ServerToClient);
  const int runs = 3;

  // Unit-level: a real handshake prefix classifies by its server name; the
  // same port without one falls back to the generic HTTPS label.
  {
    const auto hello = build_client_hello(ClientHelloSpec::for_host("youtube.com", 7));
    const auto by_sni = classify(hello, 443, youtube_rules(false));
    c.expect(by_sni.label == "youtube", "handshake prefix got " + by_sni.label);
    c.expect(by_sni.method == ClassifyMethod::Sni, "handshake prefix should match by server name");
    const std::vector<std::uint8_t> opaque = {0x6a, 0x01, 0x44, 0xd2, 0x0f, 0x90};
    const auto fallback = classify(opaque, 443, youtube_rules(false));
    c.expect(fallback.label == "HTTPS-unknown", "opaque bytes on 443 got " + fallback.label);
    c.expect(fallback.method == ClassifyMethod::PortDefault, "opaque bytes should take the port rule");
  }

  auto serve = start_serve(traces);
  const auto rules = dir / "rules.json";
  write_rules_file(rules, youtube_rules(false));

  {
    const double t0 = mono_seconds();
    auto shape = start_shape(443, serve.data_port, rules, dir / "status_sni.json");
    const auto r = run_tool({"probe", "--server", "127.0.0.1", "--side-port",
                             std::to_string(serve.side_port), "--service", "ytclone", "--trace",
                             (traces / "ytclone.json").string(), "--runs", std::to_string(runs),
                             "--bin-ms", "50", "--out-dir", (dir / "out_sni").string(), "--json"});
    c.expect(r.exit_code == 0, "probe --sni exited " + std::to_string(r.exit_code));
    c.expect(shape->terminate() == 0, "shaper did not exit cleanly");
    const double elapsed = mono_seconds() - t0;
    c.expect(elapsed < 10.0, "sni probe took " + std::to_string(elapsed) + " s, want < 10");

    const auto status = read_json(dir / "status_sni.json");
    const double expected_orig = static_cast<double>(runs) * (static_cast<double>(sc) + 47.0);
    const auto yt = static_cast<double>(label_bytes(status, "youtube"));
    c.expect(yt >= 0.99 * expected_orig,
             "youtube bytes " + std::to_string(yt) + " < 99% of original traffic " +
                 std::to_string(expected_orig));
    c.expect(label_flows(status, "youtube") == static_cast<std::uint64_t>(runs),
             "youtube flow count is not every original replay");
    c.expect(label_bytes(status, "HTTPS-unknown") == static_cast<std::uint64_t>(runs) * sc,
             "control replays were not all classified HTTPS-unknown");
  }

  {
    const double t0 = mono_seconds();
    auto shape = start_shape(443, serve.data_port, rules, dir / "status_plain.json");
    const auto r = run_tool({"probe", "--server", "127.0.0.1", "--side-port",
                             std::to_string(serve.side_port), "--service", "ytclone", "--trace",
                             (traces / "ytclone.json").string(), "--runs", std::to_string(runs),
                             "--no-sni", "--bin-ms", "50", "--out-dir", (dir / "out_plain").string(),
                             "--json"});
    c.expect(r.exit_code == 0, "probe --no-sni exited " + std::to_string(r.exit_code));
    c.expect(shape->terminate() == 0, "shaper did not exit cleanly");
    const double elapsed = mono_seconds() - t0;
    c.expect(elapsed < 10.0, "no-sni probe took " + std::to_string(elapsed) + " s, want < 10");

    const auto status = read_json(dir / "status_plain.json");
    c.expect(label_bytes(status, "youtube") == 0, "no-sni run still hit the youtube label");
    c.expect(label_bytes(status, "HTTPS-unknown") == 2ULL * runs * sc,
             "not 100% of bytes under HTTPS-unknown");
    c.expect(label_flows(status, "HTTPS-unknown") == 2ULL * runs,
             "not every flow fell to the HTTPS port default");
  }

  c.expect(serve.proc->terminate() == 0, "replay server did not exit cleanly");
  std::filesystem::remove_all(dir);
}

// ---------------------------------------------------------------------------
// 2. End-to-end differentiation: a 2 Mbit/s cap on the labeled flows against
//    an 8 Mbit/s trace is detected, direction OriginalSlower.

void criterion_detects_throttling(Checker &c) {
  const double t0 = mono_seconds();
  const auto dir = fresh_dir("acc2");
  const auto traces = dir / "traces";
  std::filesystem::create_directories(traces);
  const ServiceTrace trace = chunked_trace("ytclone", "youtube.com", 300'000, 300, 10);
  save_trace(trace, (traces / "ytclone.json").string());

  ShapingPolicy policy;
  policy.per_label["youtube"] = RateLimit{2'000'000, 125'000};
  const auto rules = dir / "rules.json";
  write_rules_file(rules, youtube_rules(false), policy);

  auto serve = start_serve(traces);
  auto shape = start_shape(443, serve.data_port, rules, dir / "status.json");

  const int runs = 3;
  const auto out_dir = dir / "out";
  const auto r = run_tool({"probe", "--server", "127.0.0.1", "--side-port",
                           std::to_string(serve.side_port), "--service", "ytclone", "--trace",
                           (traces / "ytclone.json").string(), "--runs", std::to_string(runs),
                           "--out-dir", out_dir.string(), "--idle-timeout", "20", "--json"});
  c.expect(r.exit_code == 0, "probe exited " + std::to_string(r.exit_code));

  const auto verdict = nlohmann::json::parse(r.out);
  c.expect(verdict.at("differentiated").get<bool>(), "differentiated is not true");
  c.expect(verdict.at("direction").get<std::string>() == "OriginalSlower",
           "direction is " + verdict.at("direction").get<std::string>());
  c.expect(verdict.at("reason").get<std::string>() == "Detected",
           "reason is " + verdict.at("reason").get<std::string>());
  c.expect(verdict.at("runs_total").get<int>() == runs, "not every run completed");

  const double orig_mean = mean_across_runs(out_dir, "original", runs);
  const double ctrl_mean = mean_across_runs(out_dir, "control", runs);
  c.expect_near(orig_mean, 1.7e6, 2.3e6, "original mean bps");
  c.expect_near(ctrl_mean, 6.8e6, 9.2e6, "control mean bps");

  c.expect(shape->terminate() == 0, "shaper did not exit cleanly");
  c.expect(serve.proc->terminate() == 0, "replay server did not exit cleanly");
  const double elapsed = mono_seconds() - t0;
  c.expect(elapsed < 90.0, "criterion took " + std::to_string(elapsed) + " s, want < 90");
  std::filesystem::remove_all(dir);
}

// ---------------------------------------------------------------------------
// 3. A probe offered below the shaping rate measures the same throughput on
//    both replays and declines to flag differentiation.

void criterion_below_rate_blindness(Checker &c) {
  const double t0 = mono_seconds();
  const auto dir = fresh_dir("acc3");
  const auto traces = dir / "traces";
  std::filesystem::create_directories(traces);
  const ServiceTrace trace = chunked_trace("ytclone", "youtube.com", 12'500, 100, 30);
  save_trace(trace, (traces / "ytclone.json").string());

  ShapingPolicy policy;
  policy.per_label["youtube"] = RateLimit{2'000'000, 125'000};
  const auto rules = dir / "rules.json";
  write_rules_file(rules, youtube_rules(false), policy);

  auto serve = start_serve(traces);
  auto shape = start_shape(443, serve.data_port, rules, dir / "status.json");

  const int runs = 3;
  const auto out_dir = dir / "out";
  const auto r = run_tool({"probe", "--server", "127.0.0.1", "--side-port",
                           std::to_string(serve.side_port), "--service", "ytclone", "--trace",
                           (traces / "ytclone.json").string(), "--runs", std::to_string(runs),
                           "--out-dir", out_dir.string(), "--json"});
  c.expect(r.exit_code == 0, "probe exited " + std::to_string(r.exit_code));

  const auto verdict = nlohmann::json::parse(r.out);
  c.expect(!verdict.at("differentiated").get<bool>(), "differentiated should be false");
  c.expect(verdict.at("reason").get<std::string>() == "OfferedRateBelowPath",
           "reason is " + verdict.at("reason").get<std::string>());

  const double orig_mean = mean_across_runs(out_dir, "original", runs);
  const double ctrl_mean = mean_across_runs(out_dir, "control", runs);
  c.expect_near(orig_mean, 0.9e6, 1.1e6, "original mean bps");
  c.expect_near(ctrl_mean, 0.9e6, 1.1e6, "control mean bps");

  c.expect(shape->terminate() == 0, "shaper did not exit cleanly");
  c.expect(serve.proc->terminate() == 0, "replay server did not exit cleanly");
  const double elapsed = mono_seconds() - t0;
  c.expect(elapsed < 60.0, "criterion took " + std::to_string(elapsed) + " s, want < 60");
  std::filesystem::remove_all(dir);
}

// ---------------------------------------------------------------------------
// 4. Port-80 legacy mode: encrypted-looking replays land in HTTP-unknown;
//    a plaintext signature rule upgrades matching flows to a byte-pattern label.

void criterion_port80_legacy(Checker &c) {
  const double t0 = mono_seconds();

  // Unit-level: the classifier itself, no sockets.
  {
    const auto rules = youtube_rules(true);
    std::vector<std::uint8_t> junk = {0x9f, 0x02, 0x11, 0x5a, 0x33, 0x21, 0x7e, 0x90};
    const auto generic = classify(junk, 80, rules);
    c.expect(generic.label == "HTTP-unknown", "junk on port 80 got " + generic.label);
    c.expect(generic.method == ClassifyMethod::PortDefault, "junk should fall to the port rule");

    const std::string magic = "GET /vid HTTP/1.1\r\n";
    std::vector<std::uint8_t> plain(magic.begin(), magic.end());
    const auto dpi = classify(plain, 80, rules);
    c.expect(dpi.label == "plainvideo", "plaintext request got " + dpi.label);
    c.expect(dpi.method == ClassifyMethod::DpiSignature, "plaintext should match by signature");
  }

  // Integration: the actual probe path through a port-80 shaping proxy.
  const auto dir = fresh_dir("acc4");
  const auto traces = dir / "traces";
  std::filesystem::create_directories(traces);

  const ServiceTrace enc = chunked_trace("enc", "", 12'500, 100, 8, 71);
  save_trace(enc, (traces / "enc.json").string());
  ServiceTrace plain = chunked_trace("plainvid", "", 12'500, 100, 8, 72);
  const std::string magic = "GET /vid";
  std::copy(magic.begin(), magic.end(), plain.entries[0].payload.begin());
  save_trace(plain, (traces / "plainvid.json").string());

  const auto rules = dir / "rules.json";
  write_rules_file(rules, youtube_rules(true));

  auto serve = start_serve(traces);
  auto shape = start_shape(80, serve.data_port, rules, dir / "status.json");

  // One replay pair per service: enough traffic to classify, deliberately
  // below the three-run minimum a verdict needs, so the probe reports
  // InsufficientRuns and exits 1. This criterion scores the classifier.
  for (const std::string service : {"enc", "plainvid"}) {
    const auto r = run_tool({"probe", "--server", "127.0.0.1", "--side-port",
                             std::to_string(serve.side_port), "--service", service, "--trace",
                             (traces / (service + ".json")).string(), "--runs", "1",
                             "--legacy-port80", "--out-dir", (dir / ("out_" + service)).string(),
                             "--json"});
    c.expect(r.exit_code == 1, "probe " + service + " exited " + std::to_string(r.exit_code));
    const auto verdict = nlohmann::json::parse(r.out);
    c.expect(verdict.at("reason").get<std::string>() == "InsufficientRuns",
             "single-run probe " + service + " reported " + verdict.at("reason").get<std::string>());
  }

  c.expect(shape->terminate() == 0, "shaper did not exit cleanly");
  const auto status = read_json(dir / "status.json");
  const std::uint64_t enc_sc = enc.total_bytes(Direction::ServerToClient);
  const std::uint64_t plain_sc = plain.total_bytes(Direction::ServerToClient);
  // enc original + enc control + plainvid control stay generic HTTP traffic.
  c.expect(label_bytes(status, "HTTP-unknown") == 2 * enc_sc + plain_sc,
           "HTTP-unknown bytes are not the three unmatched flows");
  c.expect(label_flows(status, "HTTP-unknown") == 3, "HTTP-unknown flow count is not 3");
  c.expect(label_bytes(status, "plainvideo") == plain_sc,
           "plaintext original did not match the byte signature");
  c.expect(label_flows(status, "plainvideo") == 1, "plainvideo flow count is not 1");
  c.expect(label_bytes(status, "youtube") == 0, "port-80 flows must never look like youtube");

  c.expect(serve.proc->terminate() == 0, "replay server did not exit cleanly");
  const double elapsed = mono_seconds() - t0;
  c.expect(elapsed < 10.0, "criterion took " + std::to_string(elapsed) + " s, want < 10");
  std::filesystem::remove_all(dir);
}

// ---------------------------------------------------------------------------
// 5. Load effect on a weighted shared link: with no background load both
//    replays match; under load the lower-weight control starves first.

void criterion_load_effect(Checker &c) {
  const double t0 = mono_seconds();
  const auto dir = fresh_dir("acc5");

  auto scenario_for = [&](int background) {
    const auto path = dir / ("scenario" + std::to_string(background) + ".json");
    nlohmann::json doc = {
        {"duration_ms", 3000},
        {"bin_ms", 100},
        {"link_capacity_bps", 14'000'000},
        {"qos_weights", {{"youtube", 2.0}, {"unknown", 1.0}}},
        {"flows",
         {{{"name", "orig-a"}, {"label", "youtube"}, {"role", "original"}, {"rate_bps", 4e6}},
          {{"name", "orig-b"}, {"label", "youtube"}, {"role", "peer"}, {"rate_bps", 4e6}},
          {{"name", "ctrl"}, {"label", "unknown"}, {"role", "control"}, {"rate_bps", 4e6}}}},
        {"background", {{"count", background}, {"label", "youtube"}, {"rate_bps", 4e6}}},
    };
    spit(path, doc.dump(2));
    return path;
  };

  auto flow_mean = [](const std::filesystem::path &csv) {
    const auto series = read_series_csv(csv);
    const double seconds =
        static_cast<double>(series.bins.size()) * series.bin_width_ms / 1000.0;
    return 8.0 * static_cast<double>(series.total_bytes()) / seconds;
  };

  struct Rates {
    double orig_a, orig_b, ctrl;
  };
  auto run_scenario = [&](int background) {
    const auto out = dir / ("out" + std::to_string(background));
    const auto r = run_tool({"simulate", "--scenario", scenario_for(background).string(),
                             "--seed", "7", "--out-dir", out.string(), "--json"});
    if (r.exit_code != 0) throw std::runtime_error("simulate exited " + std::to_string(r.exit_code));
    return Rates{flow_mean(out / "orig-a.csv"), flow_mean(out / "orig-b.csv"),
                 flow_mean(out / "ctrl.csv")};
  };

  const Rates idle = run_scenario(0);
  c.expect(std::fabs(idle.orig_a - idle.ctrl) <= 0.02 * idle.orig_a,
           "unloaded link: original and control differ by more than 2%");
  c.expect_near(idle.orig_a, 0.98 * 4e6, 1.02 * 4e6, "unloaded original bps");
  c.expect_near(idle.ctrl, 0.98 * 4e6, 1.02 * 4e6, "unloaded control bps");

  const Rates one = run_scenario(1);
  c.expect_near(one.orig_a, 0.98 * 4e6, 1.02 * 4e6, "1-background original bps");
  c.expect_near(one.ctrl, 0.98 * 2e6, 1.02 * 2e6, "1-background control bps");

  const Rates loaded = run_scenario(2);
  c.expect(loaded.ctrl < 0.85 * loaded.orig_a,
           "loaded link: control should fall under 85% of the original");
  c.expect(std::fabs(loaded.orig_a - loaded.orig_b) <= 0.02 * loaded.orig_a,
           "loaded link: same-label flows diverge by more than 2%");
  c.expect_near(loaded.orig_a, 0.98 * 14e6 * 2 / 9, 1.02 * 14e6 * 2 / 9,
                "2-background original bps");
  c.expect_near(loaded.ctrl, 0.98 * 14e6 / 9, 1.02 * 14e6 / 9, "2-background control bps");

  const double elapsed = mono_seconds() - t0;
  c.expect(elapsed < 5.0, "criterion took " + std::to_string(elapsed) + " s, want < 5");
  std::filesystem::remove_all(dir);
}

// ---------------------------------------------------------------------------
// 6. Randomized property suites, delegated to their own binary.

void criterion_property_suites(Checker &c) {
  const char *bin = std::getenv("TDPROBE_PROPERTIES_BIN");
  c.expect(bin != nullptr && *bin != '\0', "TDPROBE_PROPERTIES_BIN is not set");
  if (bin == nullptr || *bin == '\0') return;
  const double t0 = mono_seconds();
  const CmdResult r = run_cmd({bin});
  const double elapsed = mono_seconds() - t0;
  c.expect(r.exit_code == 0, "property suite exited " + std::to_string(r.exit_code));
  c.expect(elapsed < 60.0, "property suite took " + std::to_string(elapsed) + " s, want < 60");
}

// ---------------------------------------------------------------------------
// 7. Timing preservation on an unloaded loopback: a 20 s schedule replays in
//    20 s ± 10% with every send within 50 ms of its deadline.

void criterion_timing_preservation(Checker &c) {
  const ServiceTrace trace = chunked_trace("longsvc", "", 125'000, 1000, 20);
  ReplayServer server(ReplayServerConfig{}, make_trace_store({trace}));
  server.start();

  ReplayRequest req;
  req.client_id = "timing-client";
  req.service_name = "longsvc";
  req.kind = ReplayKind::Original;
  req.use_sni_prefix = false;
  req.dst_port_override = server.data_port();
  const auto result = run_replay_client("127.0.0.1", server.side_port(), trace, req);

  c.expect(result.completed, "replay did not complete: " + result.error_note.value_or("?"));
  c.expect_near<int>(static_cast<int>(result.duration_ms), 18'000, 22'000, "duration_ms");

  const auto worst = [](const std::vector<std::int32_t> &lateness) {
    std::int32_t w = 0;
    for (const auto v : lateness) w = std::max(w, v);
    return w;
  };
  c.expect(!result.send_lateness_ms.empty(), "client recorded no send deadlines");
  c.expect(worst(result.send_lateness_ms) < 50,
           "client send lateness reached " + std::to_string(worst(result.send_lateness_ms)) + " ms");

  server.stop();
  const auto records = server.run_records();
  c.expect(records.size() == 1, "expected exactly one run record");
  if (records.size() == 1) {
    c.expect(records[0].completed, "server side did not complete");
    c.expect(!records[0].send_lateness_ms.empty(), "server recorded no send deadlines");
    c.expect(worst(records[0].send_lateness_ms) < 50,
             "server send lateness reached " +
                 std::to_string(worst(records[0].send_lateness_ms)) + " ms");
  }
}

// ---------------------------------------------------------------------------
// 8. Several clients behind one address: distinct client ids run concurrently;
//    the address-keyed compatibility mode reproduces the old single-client limit.

void criterion_nat_scenario(Checker &c) {
  const ServiceTrace trace = chunked_trace("svc", "", 12'500, 100, 10);

  {
    ReplayServer server(ReplayServerConfig{}, make_trace_store({trace}));
    server.start();
    auto request = [&](const std::string &id) {
      ReplayRequest req;
      req.client_id = id;
      req.service_name = "svc";
      req.kind = ReplayKind::Original;
      req.use_sni_prefix = false;
      req.dst_port_override = server.data_port();
      return req;
    };

    ReplayResult a, b;
    std::thread ta([&] {
      a = run_replay_client("127.0.0.1", server.side_port(), trace, request("client-a"));
    });
    std::thread tb([&] {
      b = run_replay_client("127.0.0.1", server.side_port(), trace, request("client-b"));
    });
    ta.join();
    tb.join();
    c.expect(a.completed, "client-a failed: " + a.error_note.value_or("?"));
    c.expect(b.completed, "client-b failed: " + b.error_note.value_or("?"));
    server.stop();
    c.expect(server.run_records().size() == 2, "expected two concurrent run records");
  }

  {
    ReplayServerConfig config;
    config.ip_keyed = true;
    ReplayServer server(config, make_trace_store({trace}));
    server.start();

    // First client: register and hold the side channel open.
    Socket first = connect_to("127.0.0.1", server.side_port(), 3.0);
    const std::string line =
        "{\"client_id\":\"client-a\",\"service\":\"svc\",\"kind\":\"original\",\"run_index\":0}\n";
    send_all(first, std::span<const std::uint8_t>(
                        reinterpret_cast<const std::uint8_t *>(line.data()), line.size()));
    BufferedReader reader(first);
    std::string reply;
    c.expect(reader.read_line(reply, 3.0), "first registration got no reply");
    c.expect(reply.find("\"ok\":true") != std::string::npos,
             "first registration refused: " + reply);

    // Second client, same source address, different id: must be refused.
    ReplayRequest req;
    req.client_id = "client-b";
    req.service_name = "svc";
    req.kind = ReplayKind::Original;
    req.use_sni_prefix = false;
    req.dst_port_override = server.data_port();
    bool refused = false;
    std::string detail;
    try {
      run_replay_client("127.0.0.1", server.side_port(), trace, req);
    } catch (const TdError &e) {
      refused = e.code == "SideChannelRefused" &&
                std::string(e.what()).find("DuplicateActiveReplay") != std::string::npos;
      detail = e.what();
    }
    c.expect(refused, "address-keyed mode accepted a second client: " + detail);
    server.stop();
  }
}

struct Criterion {
  int number;
  const char *label;
  void (*fn)(Checker &);
};

}  // namespace

int main() {
  const Criterion criteria[] = {
      {1, "handshake-prefix classification", criterion_sni_classification},
      {2, "end-to-end throttling detection", criterion_detects_throttling},
      {3, "below-rate blindness", criterion_below_rate_blindness},
      {4, "port-80 legacy mode", criterion_port80_legacy},
      {5, "weighted shared-link load effect", criterion_load_effect},
      {6, "randomized property suites", criterion_property_suites},
      {7, "timing preservation", criterion_timing_preservation},
      {8, "multi-client NAT scenario", criterion_nat_scenario},
  };

  int failed = 0;
  for (const auto &criterion : criteria) {
    Checker checker;
    try {
      criterion.fn(checker);
    } catch (const std::exception &e) {
      checker.failures.push_back(std::string("exception: ") + e.what());
    }
    if (checker.failures.empty()) {
      std::printf("CRITERION %d PASS — %s\n", criterion.number, criterion.label);
    } else {
      ++failed;
      std::string joined;
      for (const auto &f : checker.failures) joined += (joined.empty() ? "" : "; ") + f;
      std::printf("CRITERION %d FAIL — %s: %s\n", criterion.number, criterion.label,
                  joined.c_str());
    }
    std::fflush(stdout);
  }
  if (failed != 0) std::printf("%d of 8 criteria failed\n", failed);
  return failed == 0 ? 0 : 1;
}
