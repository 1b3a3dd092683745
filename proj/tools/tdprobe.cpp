#include <atomic>
#include <csignal>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "tdprobe/detector.hpp"
#include "tdprobe/errors.hpp"
#include "tdprobe/middlebox.hpp"
#include "tdprobe/net.hpp"
#include "tdprobe/replay.hpp"
#include "tdprobe/trace.hpp"

namespace {

using namespace tdprobe;

std::atomic<bool> g_stop{false};

void on_signal(int) { g_stop.store(true); }

nlohmann::json load_env_config() {
  const char *path = std::getenv("TDPROBE_CONFIG");
  if (path == nullptr || *path == '\0') return nlohmann::json::object();
  std::ifstream f(path, std::ios::binary);
  if (!f) throw io_failure(path, "TDPROBE_CONFIG file not readable");
  try {
    return nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception &e) {
    throw TdError(ErrorKind::Config, "MalformedConfig", std::string(path) + ": " + e.what());
  }
}

// Config-file values fill in flags the command line left unset; flags win.
template <typename T>
void apply_default(const CLI::App &cmd, const nlohmann::json &cfg, const std::string &flag, T &var) {
  const CLI::Option *opt = cmd.get_option_no_throw("--" + flag);
  if (opt != nullptr && opt->count() > 0) return;
  if (!cfg.is_object() || !cfg.contains(flag)) return;
  try {
    var = cfg.at(flag).get<T>();
  } catch (const nlohmann::json::exception &e) {
    throw TdError(ErrorKind::Config, "MalformedConfig", "key \"" + flag + "\": " + e.what());
  }
}

std::pair<std::string, std::uint16_t> parse_endpoint(const std::string &text) {
  const std::size_t colon = text.rfind(':');
  if (colon == std::string::npos || colon == 0 || colon + 1 >= text.size())
    throw TdError(ErrorKind::Config, "BadAddress", "expected host:port, got \"" + text + "\"");
  const std::string host = text.substr(0, colon);
  int port = 0;
  try {
    port = std::stoi(text.substr(colon + 1));
  } catch (const std::exception &) {
    port = -1;
  }
  if (port < 1 || port > 65535)
    throw TdError(ErrorKind::Config, "BadAddress", "bad port in \"" + text + "\"");
  return {host, static_cast<std::uint16_t>(port)};
}

std::string sanitize_filename(const std::string &name) {
  std::string out;
  for (const char c : name)
    out += (std::isalnum(static_cast<unsigned char>(c)) != 0 || c == '-' || c == '_') ? c : '_';
  return out.empty() ? std::string("flow") : out;
}

void require_value(const std::string &value, const std::string &flag) {
  if (value.empty())
    throw TdError(ErrorKind::Config, "MissingFlag", "--" + flag + " is required");
}

void wait_until_signaled() {
  while (!g_stop.load()) std::this_thread::sleep_for(std::chrono::milliseconds(100));
}

double mean_rate_bps(const ThroughputSeries &series, std::uint32_t warmup) {
  if (series.bins.size() < static_cast<std::size_t>(warmup) + 10) return 0.0;
  const auto rates = per_bin_rates_bps(series, warmup);
  double sum = 0.0;
  for (const double r : rates) sum += r;
  return sum / static_cast<double>(rates.size());
}

// ---------------------------------------------------------------------------

struct GenTraceArgs {
  std::uint64_t chunk_bytes = 125000;
  std::uint32_t chunk_interval_ms = 1000;
  std::uint32_t n_chunks = 10;
  std::uint32_t request_bytes = 200;
  std::string sni;
  std::string service = "service";
  std::uint16_t port = 443;
  std::uint64_t seed = 1;
  std::string out;
};

int cmd_gen_trace(const GenTraceArgs &args) {
  require_value(args.out, "out");
  DashParams params;
  params.chunk_bytes = args.chunk_bytes;
  params.chunk_interval_ms = args.chunk_interval_ms;
  params.n_chunks = args.n_chunks;
  params.request_bytes = args.request_bytes;
  params.seed = args.seed;
  const ServiceTrace trace = synth_dash_trace(params, args.service, args.sni, args.port);
  save_trace(trace, args.out);
  std::printf("offered_rate_bps %.0f\n", offered_rate_bps(trace));
  std::printf("wrote %s\n", args.out.c_str());
  return 0;
}

struct ServeArgs {
  std::uint16_t side_port = 0;
  std::uint16_t data_port = 0;
  std::string traces_dir;
  bool ip_keyed = false;
  double idle_timeout_s = 10.0;
  std::string host = "127.0.0.1";
};

int cmd_serve(const ServeArgs &args) {
  require_value(args.traces_dir, "traces-dir");
  std::vector<ServiceTrace> traces;
  for (const auto &entry : std::filesystem::directory_iterator(args.traces_dir)) {
    if (!entry.is_regular_file() || entry.path().extension() != ".json") continue;
    traces.push_back(load_trace(entry.path().string()));
  }
  if (traces.empty())
    throw TdError(ErrorKind::Config, "EmptyTraceStore",
                  "no .json traces under " + args.traces_dir);

  ReplayServerConfig config;
  config.host = args.host;
  config.side_port = args.side_port;
  config.data_port = args.data_port;
  config.ip_keyed = args.ip_keyed;
  config.idle_timeout_s = args.idle_timeout_s;
  ReplayServer server(config, make_trace_store(traces));
  server.start();
  std::printf("{\"side_port\":%u,\"data_port\":%u,\"services\":%zu}\n", server.side_port(),
              server.data_port(), traces.size());
  std::fflush(stdout);
  wait_until_signaled();
  server.stop();
  return 0;
}

struct ShapeArgs {
  std::string listen;
  std::string upstream;
  std::string rules_path;
  std::string status_out;
};

int cmd_shape(const ShapeArgs &args) {
  require_value(args.listen, "listen");
  require_value(args.upstream, "upstream");
  const auto [listen_host, listen_port] = parse_endpoint(args.listen);
  const auto [upstream_host, upstream_port] = parse_endpoint(args.upstream);

  ShaperProxy::Config config;
  config.listen_host = listen_host;
  config.listen_port = listen_port;
  config.upstream_host = upstream_host;
  config.upstream_port = upstream_port;
  config.status_path = args.status_out;
  if (!args.rules_path.empty()) {
    RulesAndPolicy rp = load_rules_policy(args.rules_path);
    config.rules = std::move(rp.rules);
    config.policy = std::move(rp.policy);
  }
  ShaperProxy proxy(std::move(config));
  proxy.start();
  std::printf("{\"listen_port\":%u}\n", proxy.port());
  std::fflush(stdout);
  wait_until_signaled();
  proxy.stop();
  return 0;
}

struct ProbeArgs {
  std::string server = "127.0.0.1";
  std::uint16_t side_port = 0;
  std::string service;
  std::string trace_path;
  int runs = 3;
  bool use_sni = true;
  bool legacy_port80 = false;
  std::uint32_t bin_ms = 100;
  std::string out_dir;
  bool json = false;
  std::string client_id = "cli-client";
  std::uint16_t port_override = 0;
  double idle_timeout_s = 10.0;
  std::uint64_t seed = 1;
};

int cmd_probe(const ProbeArgs &args) {
  require_value(args.service, "service");
  require_value(args.trace_path, "trace");
  require_value(args.out_dir, "out-dir");
  if (args.side_port == 0)
    throw TdError(ErrorKind::Config, "MissingFlag", "--side-port is required");
  if (args.runs < 1) throw TdError(ErrorKind::Config, "BadRequest", "--runs must be at least 1");

  const ServiceTrace trace = load_trace(args.trace_path);
  std::filesystem::create_directories(args.out_dir);

  // Fail fast with a network error when the side channel is unreachable.
  {
    Socket ping;
    try {
      ping = connect_to(args.server, args.side_port, 3.0);
    } catch (const TdError &) {
      throw TdError(ErrorKind::Network, "SideChannelUnreachable",
                    args.server + ":" + std::to_string(args.side_port));
    }
  }

  ReplayRequest base;
  base.client_id = args.client_id;
  base.service_name = args.service;
  base.use_sni_prefix = args.use_sni && !args.legacy_port80;
  base.hello_seed = args.seed;
  if (args.legacy_port80) base.dst_port_override = 80;
  if (args.port_override != 0) base.dst_port_override = args.port_override;

  const auto runs = run_back_to_back(args.server, args.side_port, trace, base, args.runs,
                                     args.bin_ms, args.idle_timeout_s);

  const std::filesystem::path out_dir(args.out_dir);
  for (std::size_t i = 0; i < runs.size(); ++i) {
    write_series_csv(runs[i].first.throughput,
                     out_dir / ("run" + std::to_string(i) + "_original.csv"));
    write_series_csv(runs[i].second.throughput,
                     out_dir / ("run" + std::to_string(i) + "_control.csv"));
  }

  const DetectConfig detect_config;
  const DetectionVerdict verdict =
      detect(to_run_pairs(runs), offered_rate_bps(trace), detect_config);
  const std::string verdict_json = verdict_to_json(verdict);
  {
    std::ofstream f(out_dir / "verdict.json", std::ios::binary | std::ios::trunc);
    f << verdict_json << '\n';
  }

  if (args.json) {
    std::printf("%s\n", verdict_json.c_str());
  } else {
    for (std::size_t i = 0; i < runs.size(); ++i) {
      const auto &[orig, ctrl] = runs[i];
      std::printf("run %zu: original %s mean %.0f bps over %u ms; control %s mean %.0f bps over %u ms\n",
                  i, orig.completed ? "ok" : "failed",
                  mean_rate_bps(orig.throughput, detect_config.warmup_bins), orig.duration_ms,
                  ctrl.completed ? "ok" : "failed",
                  mean_rate_bps(ctrl.throughput, detect_config.warmup_bins), ctrl.duration_ms);
    }
    std::printf("verdict: differentiated=%s direction=%s reason=%s ks=%.4f area_gap=%.4f runs=%d/%d\n",
                verdict.differentiated ? "true" : "false", to_string(verdict.direction).c_str(),
                to_string(verdict.reason).c_str(), verdict.ks_stat, verdict.area_gap,
                verdict.runs_flagged, verdict.runs_total);
    std::printf("wrote %s\n", (out_dir / "verdict.json").string().c_str());
  }
  return verdict.reason == VerdictReason::InsufficientRuns ? 1 : 0;
}

struct SimulateArgs {
  std::string scenario;
  std::uint64_t seed = 1;
  std::string out_dir;
  bool json = false;
};

struct Scenario {
  std::vector<SimFlow> flows;
  std::vector<std::string> roles;  // "original" | "control" | other, aligned with flows
  ShapingPolicy policy;
  std::uint32_t duration_ms = 10000;
  SimConfig sim;
};

Scenario load_scenario(const std::string &path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw io_failure(path, "cannot open scenario");
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception &e) {
    throw invalid_scenario(path + ": invalid JSON: " + e.what());
  }
  if (!doc.is_object()) throw invalid_scenario(path + ": top level must be an object");

  Scenario sc;
  try {
    if (doc.contains("duration_ms")) sc.duration_ms = doc.at("duration_ms").get<std::uint32_t>();
    if (doc.contains("tick_ms")) sc.sim.tick_ms = doc.at("tick_ms").get<std::uint32_t>();
    if (doc.contains("bin_ms")) sc.sim.bin_ms = doc.at("bin_ms").get<std::uint32_t>();
    if (doc.contains("jitter_pct")) sc.sim.jitter_pct = doc.at("jitter_pct").get<double>();
    if (doc.contains("link_capacity_bps"))
      sc.policy.link_capacity_bps = doc.at("link_capacity_bps").get<std::uint64_t>();
    if (doc.contains("qos_weights"))
      for (const auto &[label, w] : doc.at("qos_weights").items())
        sc.policy.qos_weights.emplace(label, w.get<double>());
    if (doc.contains("per_label"))
      for (const auto &[label, entry] : doc.at("per_label").items()) {
        RateLimit limit;
        limit.rate_bps = entry.at("rate_bps").get<std::uint64_t>();
        limit.burst_bytes = entry.at("burst_bytes").get<std::uint64_t>();
        sc.policy.per_label.emplace(label, limit);
      }
    if (!doc.contains("flows") || !doc.at("flows").is_array() || doc.at("flows").empty())
      throw invalid_scenario(path + ": \"flows\" must be a non-empty array");
    for (const auto &fl : doc.at("flows")) {
      SimFlow flow;
      flow.name = fl.at("name").get<std::string>();
      flow.label = fl.at("label").get<std::string>();
      if (fl.contains("trace")) {
        flow.trace = load_trace(fl.at("trace").get<std::string>());
      } else {
        flow.constant_rate_bps = fl.at("rate_bps").get<double>();
      }
      sc.roles.push_back(fl.contains("role") ? fl.at("role").get<std::string>() : "");
      sc.flows.push_back(std::move(flow));
    }
    if (doc.contains("background")) {
      const auto &bg = doc.at("background");
      const auto count = bg.at("count").get<std::uint32_t>();
      for (std::uint32_t i = 1; i <= count; ++i) {
        SimFlow flow;
        flow.name = "background-" + std::to_string(i);
        flow.label = bg.at("label").get<std::string>();
        flow.constant_rate_bps = bg.at("rate_bps").get<double>();
        sc.roles.push_back("background");
        sc.flows.push_back(std::move(flow));
      }
    }
  } catch (const nlohmann::json::exception &e) {
    throw invalid_scenario(path + ": " + e.what());
  }
  return sc;
}

int cmd_simulate(const SimulateArgs &args) {
  require_value(args.scenario, "scenario");
  require_value(args.out_dir, "out-dir");
  const Scenario sc = load_scenario(args.scenario);
  const auto series = simulate_shared_link(sc.flows, sc.policy, sc.duration_ms, args.seed, sc.sim);

  std::filesystem::create_directories(args.out_dir);
  const std::filesystem::path out_dir(args.out_dir);
  for (std::size_t i = 0; i < sc.flows.size(); ++i)
    write_series_csv(series[i], out_dir / (sanitize_filename(sc.flows[i].name) + ".csv"));

  // When the scenario marks one original/control pair, score it as one run.
  int orig_idx = -1, ctrl_idx = -1;
  for (std::size_t i = 0; i < sc.roles.size(); ++i) {
    if (sc.roles[i] == "original" && orig_idx < 0) orig_idx = static_cast<int>(i);
    if (sc.roles[i] == "control" && ctrl_idx < 0) ctrl_idx = static_cast<int>(i);
  }
  std::string verdict_json;
  if (orig_idx >= 0 && ctrl_idx >= 0) {
    RunPair pair;
    pair.original = series[static_cast<std::size_t>(orig_idx)];
    pair.control = series[static_cast<std::size_t>(ctrl_idx)];
    DetectConfig config;
    config.min_runs = 1;  // the simulation is deterministic; one pair suffices
    double offered = sc.flows[static_cast<std::size_t>(orig_idx)].constant_rate_bps;
    if (sc.flows[static_cast<std::size_t>(orig_idx)].trace.has_value())
      offered = offered_rate_bps(*sc.flows[static_cast<std::size_t>(orig_idx)].trace);
    const DetectionVerdict verdict = detect({pair}, offered, config);
    verdict_json = verdict_to_json(verdict);
    std::ofstream f(out_dir / "verdict.json", std::ios::binary | std::ios::trunc);
    f << verdict_json << '\n';
  }

  if (args.json) {
    std::printf("%s\n", verdict_json.empty() ? "{\"flows_written\":true}" : verdict_json.c_str());
  } else {
    for (std::size_t i = 0; i < sc.flows.size(); ++i) {
      const double mean = 8000.0 * static_cast<double>(series[i].total_bytes()) /
                          (static_cast<double>(series[i].bins.size()) * series[i].bin_width_ms);
      std::printf("flow %s label=%s mean %.0f bps\n", sc.flows[i].name.c_str(),
                  sc.flows[i].label.c_str(), mean);
    }
    if (!verdict_json.empty()) std::printf("%s\n", verdict_json.c_str());
  }
  return 0;
}

struct DetectArgs {
  std::vector<std::string> series;
  double offered_bps = 0.0;
  bool json = false;
};

int cmd_detect(const DetectArgs &args) {
  if (args.series.size() % 2 != 0)
    throw TdError(ErrorKind::Config, "BadRequest",
                  "--series takes original,control pairs (got an odd count)");
  std::vector<RunPair> pairs;
  std::uint32_t bin_width = 0;
  for (std::size_t i = 0; i + 1 < args.series.size(); i += 2) {
    RunPair pair;
    pair.original = read_series_csv(args.series[i]);
    pair.control = read_series_csv(args.series[i + 1]);
    for (const auto *s : {&pair.original, &pair.control}) {
      if (bin_width == 0) bin_width = s->bin_width_ms;
      if (s->bin_width_ms != bin_width)
        throw TdError(ErrorKind::Config, "BadRequest",
                      "series files disagree on bin width (" + std::to_string(s->bin_width_ms) +
                          " vs " + std::to_string(bin_width) + " ms)");
    }
    pairs.push_back(std::move(pair));
  }
  const DetectionVerdict verdict = detect(pairs, args.offered_bps, DetectConfig{});
  const std::string verdict_json = verdict_to_json(verdict);
  std::printf("%s\n", verdict_json.c_str());
  return verdict.reason == VerdictReason::InsufficientRuns ? 1 : 0;
}

}  // namespace

int main(int argc, char **argv) {
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  std::signal(SIGPIPE, SIG_IGN);

  CLI::App app{"Traffic-differentiation detection toolkit: record-and-replay probes, an emulated "
               "shaping middlebox, and throughput-comparison verdicts"};
  app.require_subcommand(1);

  GenTraceArgs gen;
  CLI::App *gen_cmd = app.add_subcommand("gen-trace", "Generate a synthetic chunked-streaming trace");
  gen_cmd->add_option("--chunk-bytes", gen.chunk_bytes, "Bytes per content chunk");
  gen_cmd->add_option("--chunk-interval-ms", gen.chunk_interval_ms, "Spacing between chunks");
  gen_cmd->add_option("--n-chunks", gen.n_chunks, "Number of request/response rounds");
  gen_cmd->add_option("--request-bytes", gen.request_bytes, "Client request size");
  gen_cmd->add_option("--sni", gen.sni, "Service hostname embedded in the trace");
  gen_cmd->add_option("--service", gen.service, "Service name");
  gen_cmd->add_option("--port", gen.port, "Destination port recorded in the trace");
  gen_cmd->add_option("--seed", gen.seed, "Payload generator seed");
  gen_cmd->add_option("--out", gen.out, "Output trace path");

  ServeArgs serve;
  CLI::App *serve_cmd = app.add_subcommand("serve", "Run the replay server");
  serve_cmd->add_option("--side-port", serve.side_port, "Side-channel port (0 = ephemeral)");
  serve_cmd->add_option("--data-port", serve.data_port, "Data port (0 = ephemeral)");
  serve_cmd->add_option("--traces-dir", serve.traces_dir, "Directory of trace .json files");
  serve_cmd->add_flag("--ip-keyed", serve.ip_keyed,
                      "Key active replays by source address (legacy compatibility)");
  serve_cmd->add_option("--idle-timeout", serve.idle_timeout_s, "Replay idle timeout in seconds");
  serve_cmd->add_option("--host", serve.host, "Bind address");

  ShapeArgs shape;
  CLI::App *shape_cmd = app.add_subcommand("shape", "Run the classifying shaper proxy");
  shape_cmd->add_option("--listen", shape.listen, "host:port to accept clients on");
  shape_cmd->add_option("--upstream", shape.upstream, "host:port to forward to");
  shape_cmd->add_option("--rules", shape.rules_path, "Rules and policy JSON file");
  shape_cmd->add_option("--status-out", shape.status_out, "Status JSON file, rewritten periodically");

  ProbeArgs probe;
  CLI::App *probe_cmd = app.add_subcommand("probe", "Run back-to-back replay pairs and detect");
  probe_cmd->add_option("--server", probe.server, "Replay server / proxy host");
  probe_cmd->add_option("--side-port", probe.side_port, "Side-channel port on the server");
  probe_cmd->add_option("--service", probe.service, "Service name to probe");
  probe_cmd->add_option("--trace", probe.trace_path, "Trace file for the original replay");
  probe_cmd->add_option("--runs", probe.runs, "Number of original/control pairs");
  probe_cmd->add_flag("--sni,!--no-sni", probe.use_sni, "Lead original replays with the SNI handshake prefix");
  probe_cmd->add_flag("--legacy-port80", probe.legacy_port80, "Replay on port 80 without the handshake prefix");
  probe_cmd->add_option("--bin-ms", probe.bin_ms, "Throughput bin width in ms");
  probe_cmd->add_option("--out-dir", probe.out_dir, "Directory for per-run CSVs and verdict.json");
  probe_cmd->add_flag("--json", probe.json, "Print only the verdict JSON on stdout");
  probe_cmd->add_option("--client-id", probe.client_id, "Side-channel client identity");
  probe_cmd->add_option("--port-override", probe.port_override, "Dial this data port instead of the default");
  probe_cmd->add_option("--idle-timeout", probe.idle_timeout_s, "Replay idle timeout in seconds");
  probe_cmd->add_option("--seed", probe.seed, "Handshake prefix seed");

  SimulateArgs sim;
  CLI::App *sim_cmd = app.add_subcommand("simulate", "Run the deterministic shared-link simulation");
  sim_cmd->add_option("--scenario", sim.scenario, "Scenario JSON file");
  sim_cmd->add_option("--seed", sim.seed, "Simulation seed");
  sim_cmd->add_option("--out-dir", sim.out_dir, "Directory for per-flow CSVs and verdict.json");
  sim_cmd->add_flag("--json", sim.json, "Print only the verdict JSON on stdout");

  DetectArgs det;
  CLI::App *det_cmd = app.add_subcommand("detect", "Offline detection from series CSV files");
  det_cmd->add_option("--series", det.series, "Series CSVs as original,control pairs, in run order");
  det_cmd->add_option("--offered-bps", det.offered_bps, "Offered rate of the probed trace");
  det_cmd->add_flag("--json", det.json, "Print only the verdict JSON on stdout");

  try {
    app.parse(argc, argv);

    const nlohmann::json cfg = load_env_config();
    if (app.got_subcommand(gen_cmd)) {
      apply_default(*gen_cmd, cfg, "chunk-bytes", gen.chunk_bytes);
      apply_default(*gen_cmd, cfg, "chunk-interval-ms", gen.chunk_interval_ms);
      apply_default(*gen_cmd, cfg, "n-chunks", gen.n_chunks);
      apply_default(*gen_cmd, cfg, "request-bytes", gen.request_bytes);
      apply_default(*gen_cmd, cfg, "sni", gen.sni);
      apply_default(*gen_cmd, cfg, "service", gen.service);
      apply_default(*gen_cmd, cfg, "port", gen.port);
      apply_default(*gen_cmd, cfg, "seed", gen.seed);
      apply_default(*gen_cmd, cfg, "out", gen.out);
      return cmd_gen_trace(gen);
    }
    if (app.got_subcommand(serve_cmd)) {
      apply_default(*serve_cmd, cfg, "side-port", serve.side_port);
      apply_default(*serve_cmd, cfg, "data-port", serve.data_port);
      apply_default(*serve_cmd, cfg, "traces-dir", serve.traces_dir);
      apply_default(*serve_cmd, cfg, "idle-timeout", serve.idle_timeout_s);
      apply_default(*serve_cmd, cfg, "host", serve.host);
      return cmd_serve(serve);
    }
    if (app.got_subcommand(shape_cmd)) {
      apply_default(*shape_cmd, cfg, "listen", shape.listen);
      apply_default(*shape_cmd, cfg, "upstream", shape.upstream);
      apply_default(*shape_cmd, cfg, "rules", shape.rules_path);
      apply_default(*shape_cmd, cfg, "status-out", shape.status_out);
      return cmd_shape(shape);
    }
    if (app.got_subcommand(probe_cmd)) {
      apply_default(*probe_cmd, cfg, "server", probe.server);
      apply_default(*probe_cmd, cfg, "side-port", probe.side_port);
      apply_default(*probe_cmd, cfg, "service", probe.service);
      apply_default(*probe_cmd, cfg, "trace", probe.trace_path);
      apply_default(*probe_cmd, cfg, "runs", probe.runs);
      apply_default(*probe_cmd, cfg, "bin-ms", probe.bin_ms);
      apply_default(*probe_cmd, cfg, "out-dir", probe.out_dir);
      apply_default(*probe_cmd, cfg, "client-id", probe.client_id);
      apply_default(*probe_cmd, cfg, "idle-timeout", probe.idle_timeout_s);
      apply_default(*probe_cmd, cfg, "seed", probe.seed);
      return cmd_probe(probe);
    }
    if (app.got_subcommand(sim_cmd)) {
      apply_default(*sim_cmd, cfg, "scenario", sim.scenario);
      apply_default(*sim_cmd, cfg, "seed", sim.seed);
      apply_default(*sim_cmd, cfg, "out-dir", sim.out_dir);
      return cmd_simulate(sim);
    }
    if (app.got_subcommand(det_cmd)) {
      apply_default(*det_cmd, cfg, "offered-bps", det.offered_bps);
      return cmd_detect(det);
    }
    return 1;
  } catch (const CLI::ParseError &e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  } catch (const TdError &e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return static_cast<int>(e.kind);
  } catch (const std::exception &e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
