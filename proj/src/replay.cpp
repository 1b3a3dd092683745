#include "tdprobe/replay.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstring>
#include <deque>
#include <mutex>
#include <set>
#include <thread>

#include <nlohmann/json.hpp>

#include "tdprobe/errors.hpp"
#include "tdprobe/net.hpp"
#include "tdprobe/tls_mimic.hpp"

namespace tdprobe {

namespace {

constexpr std::size_t kIoChunk = 16384;

struct EngineOutcome {
  bool ok = false;
  std::string note;
  std::uint64_t bytes_sent = 0;
  std::uint64_t bytes_received = 0;
  bool payload_match = true;
  std::vector<std::uint64_t> bins;
  std::vector<std::int32_t> send_lateness_ms;
  double elapsed_s = 0.0;
};

// Replays one side of a trace over an open connection: sends own-direction
// entries at their schedule deadlines (never early; lateness is absorbed, not
// compensated) while receiving and verifying the peer-direction byte stream.
EngineOutcome run_engine(Socket &sock, BufferedReader &reader, const ServiceTrace &trace,
                         Direction send_dir, double t0, std::uint32_t bin_width_ms,
                         double idle_timeout_s) {
  const Direction recv_dir =
      send_dir == Direction::ClientToServer ? Direction::ServerToClient : Direction::ClientToServer;

  std::atomic<bool> abort{false};
  bool send_ok = true, recv_ok = true;
  std::string send_note, recv_note;
  std::uint64_t bytes_sent = 0, bytes_received = 0;
  bool payload_match = true;
  std::vector<std::uint64_t> bins;
  std::vector<std::int32_t> lateness;
  double send_end = t0, recv_end = t0;

  std::thread sender([&] {
    double behind = 0.0;
    std::uint64_t cum_ms = 0;
    for (const TraceEntry &entry : trace.entries) {
      cum_ms += entry.delta_ms;
      if (entry.dir != send_dir) continue;
      const double deadline = t0 + static_cast<double>(cum_ms) / 1000.0;
      const double target = deadline + behind;
      for (;;) {
        const double now = mono_seconds();
        if (now >= target || abort.load()) break;
        std::this_thread::sleep_for(std::chrono::duration<double>(std::min(target - now, 0.05)));
      }
      if (abort.load()) {
        send_ok = false;
        send_note = "aborted";
        break;
      }
      lateness.push_back(static_cast<std::int32_t>(std::llround((mono_seconds() - deadline) * 1000.0)));
      try {
        send_all(sock, entry.payload, idle_timeout_s);
      } catch (const TdError &e) {
        send_ok = false;
        send_note = e.what();
        abort.store(true);
        break;
      }
      bytes_sent += entry.payload.size();
      behind = std::max(behind, mono_seconds() - deadline);
    }
    send_end = mono_seconds();
  });

  std::thread receiver([&] {
    std::vector<const TraceEntry *> expected;
    std::uint64_t expected_total = 0;
    for (const TraceEntry &entry : trace.entries)
      if (entry.dir == recv_dir) {
        expected.push_back(&entry);
        expected_total += entry.payload.size();
      }
    std::size_t entry_idx = 0, entry_off = 0;
    std::uint8_t buf[kIoChunk];
    while (bytes_received < expected_total) {
      if (abort.load()) {
        recv_ok = false;
        recv_note = "aborted";
        break;
      }
      std::optional<std::size_t> n;
      try {
        n = reader.read_some(buf, sizeof(buf), idle_timeout_s);
      } catch (const TdError &e) {
        recv_ok = false;
        recv_note = e.what();
        abort.store(true);
        break;
      }
      if (!n.has_value()) {
        recv_ok = false;
        recv_note = "Timeout";
        abort.store(true);
        break;
      }
      if (*n == 0) {
        recv_ok = false;
        recv_note = "PeerClosedEarly";
        abort.store(true);
        break;
      }
      const double now = mono_seconds();
      bytes_received += *n;
      if (bin_width_ms > 0) {
        const auto bin = static_cast<std::size_t>((now - t0) * 1000.0 / bin_width_ms);
        if (bin >= bins.size()) bins.resize(bin + 1, 0);
        bins[bin] += *n;
      }
      std::size_t off = 0;
      while (off < *n && entry_idx < expected.size()) {
        const auto &payload = expected[entry_idx]->payload;
        const std::size_t take = std::min(*n - off, payload.size() - entry_off);
        if (std::memcmp(buf + off, payload.data() + entry_off, take) != 0) payload_match = false;
        off += take;
        entry_off += take;
        if (entry_off == payload.size()) {
          ++entry_idx;
          entry_off = 0;
        }
      }
      if (off < *n) payload_match = false;  // bytes beyond the recorded stream
    }
    recv_end = mono_seconds();
  });

  sender.join();
  receiver.join();

  EngineOutcome out;
  out.ok = send_ok && recv_ok;
  if (!send_ok) out.note = send_note;
  if (!recv_ok) out.note = out.note.empty() ? recv_note : out.note + "; " + recv_note;
  out.bytes_sent = bytes_sent;
  out.bytes_received = bytes_received;
  out.payload_match = payload_match;
  out.bins = std::move(bins);
  out.send_lateness_ms = std::move(lateness);
  out.elapsed_s = std::max(send_end, recv_end) - t0;
  return out;
}

bool could_be_tls_prefix(std::span<const std::uint8_t> bytes) {
  if (bytes.empty()) return false;
  if (bytes[0] != 0x16) return false;
  if (bytes.size() >= 2 && bytes[1] != 0x03) return false;
  if (bytes.size() >= 3 && bytes[2] > 0x04) return false;
  return true;
}

std::string json_quote(const std::string &s) { return nlohmann::json(s).dump(); }

}  // namespace

std::string to_string(ReplayKind kind) {
  return kind == ReplayKind::Original ? "original" : "control";
}

std::map<std::string, StoredService> make_trace_store(const std::vector<ServiceTrace> &originals) {
  std::map<std::string, StoredService> store;
  for (const ServiceTrace &trace : originals)
    store[trace.service_name] = StoredService{trace, bit_reverse_trace(trace)};
  return store;
}

// ---------------------------------------------------------------------------
// Server

struct ReplayServer::Impl {
  struct Registration {
    std::string client_id;
    std::string service;
    ReplayKind kind = ReplayKind::Original;
    std::uint32_t run_index = 0;
    std::string active_key;
    bool claimed = false;  // guarded by mu
  };

  ReplayServerConfig config;
  std::map<std::string, StoredService> services;
  Socket side_listener;
  Socket data_listener;
  std::uint16_t side_port = 0;
  std::uint16_t data_port = 0;
  std::atomic<bool> running{false};

  mutable std::mutex mu;
  std::deque<std::shared_ptr<Registration>> pending;
  std::set<std::string> active_keys;
  std::vector<RunRecord> records;
  std::vector<std::thread> threads;
  std::set<std::shared_ptr<Socket>> live_socks;

  std::thread side_thread;
  std::thread data_thread;

  void side_loop();
  void data_loop();
  void handle_side(std::shared_ptr<Socket> sock);
  void handle_data(std::shared_ptr<Socket> sock);
  void spawn(std::shared_ptr<Socket> sock, bool is_side);
};

ReplayServer::ReplayServer(ReplayServerConfig config, std::map<std::string, StoredService> services)
    : impl_(std::make_unique<Impl>()) {
  impl_->config = std::move(config);
  impl_->services = std::move(services);
}

ReplayServer::~ReplayServer() { stop(); }

void ReplayServer::start() {
  if (impl_->services.empty())
    throw TdError(ErrorKind::Config, "EmptyTraceStore", "replay server needs at least one service");
  impl_->side_listener = listen_on(impl_->config.host, impl_->config.side_port);
  impl_->data_listener = listen_on(impl_->config.host, impl_->config.data_port);
  impl_->side_port = local_port(impl_->side_listener);
  impl_->data_port = local_port(impl_->data_listener);
  impl_->running.store(true);
  impl_->side_thread = std::thread([this] { impl_->side_loop(); });
  impl_->data_thread = std::thread([this] { impl_->data_loop(); });
}

void ReplayServer::stop() {
  if (!impl_->running.exchange(false)) return;
  impl_->side_listener.shutdown_both();
  impl_->data_listener.shutdown_both();
  if (impl_->side_thread.joinable()) impl_->side_thread.join();
  if (impl_->data_thread.joinable()) impl_->data_thread.join();
  std::vector<std::shared_ptr<Socket>> socks;
  {
    std::lock_guard lock(impl_->mu);
    socks.assign(impl_->live_socks.begin(), impl_->live_socks.end());
  }
  for (const auto &s : socks) s->shutdown_both();
  std::vector<std::thread> threads;
  {
    std::lock_guard lock(impl_->mu);
    threads.swap(impl_->threads);
  }
  for (std::thread &t : threads)
    if (t.joinable()) t.join();
  impl_->side_listener.close_fd();
  impl_->data_listener.close_fd();
}

std::uint16_t ReplayServer::side_port() const { return impl_->side_port; }
std::uint16_t ReplayServer::data_port() const { return impl_->data_port; }

std::vector<ReplayServer::RunRecord> ReplayServer::run_records() const {
  std::lock_guard lock(impl_->mu);
  return impl_->records;
}

void ReplayServer::Impl::spawn(std::shared_ptr<Socket> sock, bool is_side) {
  std::lock_guard lock(mu);
  if (!running.load()) return;
  live_socks.insert(sock);
  threads.emplace_back([this, sock, is_side] {
    if (is_side)
      handle_side(sock);
    else
      handle_data(sock);
    std::lock_guard inner(mu);
    live_socks.erase(sock);
  });
}

void ReplayServer::Impl::side_loop() {
  while (running.load()) {
    std::optional<Socket> conn;
    try {
      conn = accept_ready(side_listener, 0.25);
    } catch (const TdError &) {
      break;
    }
    if (!conn.has_value()) continue;
    spawn(std::make_shared<Socket>(std::move(*conn)), true);
  }
}

void ReplayServer::Impl::data_loop() {
  while (running.load()) {
    std::optional<Socket> conn;
    try {
      conn = accept_ready(data_listener, 0.25);
    } catch (const TdError &) {
      break;
    }
    if (!conn.has_value()) continue;
    spawn(std::make_shared<Socket>(std::move(*conn)), false);
  }
}

void ReplayServer::Impl::handle_side(std::shared_ptr<Socket> sock) {
  BufferedReader reader(*sock);
  std::string line;
  if (!reader.read_line(line, config.idle_timeout_s)) return;

  auto reply = [&](const std::string &payload) {
    const std::string with_newline = payload + "\n";
    try {
      send_all(*sock, std::span<const std::uint8_t>(
                          reinterpret_cast<const std::uint8_t *>(with_newline.data()), with_newline.size()));
    } catch (const TdError &) {
    }
  };
  auto refuse = [&](const std::string &error) {
    reply("{\"ok\":false,\"error\":" + json_quote(error) + "}");
  };

  std::string client_id, service, kind_text;
  std::uint32_t run_index = 0;
  try {
    const auto doc = nlohmann::json::parse(line);
    client_id = doc.at("client_id").get<std::string>();
    service = doc.at("service").get<std::string>();
    kind_text = doc.at("kind").get<std::string>();
    run_index = doc.at("run_index").get<std::uint32_t>();
  } catch (const nlohmann::json::exception &e) {
    refuse(std::string("BadRequest: ") + e.what());
    return;
  }
  if (client_id.empty() || (kind_text != "original" && kind_text != "control")) {
    refuse("BadRequest: client_id must be non-empty and kind original|control");
    return;
  }
  if (services.find(service) == services.end()) {
    refuse("UnknownService");
    return;
  }

  auto reg = std::make_shared<Registration>();
  reg->client_id = client_id;
  reg->service = service;
  reg->kind = kind_text == "original" ? ReplayKind::Original : ReplayKind::Control;
  reg->run_index = run_index;
  reg->active_key =
      config.ip_keyed ? peer_address(*sock) : client_id + "|" + service + "|" + kind_text;

  bool duplicate = false;
  {
    std::lock_guard lock(mu);
    if (active_keys.count(reg->active_key) != 0) {
      duplicate = true;
    } else {
      active_keys.insert(reg->active_key);
      pending.push_back(reg);
    }
  }
  if (duplicate) {
    refuse("DuplicateActiveReplay");
    return;
  }
  reply("{\"ok\":true,\"data_port\":" + std::to_string(data_port) + "}");

  // Hold the side channel open; an unclaimed registration dies with it.
  while (running.load()) {
    std::string ignored;
    if (!reader.read_line(ignored, 1.0) && reader.at_eof()) break;
  }
  std::lock_guard lock(mu);
  const auto it = std::find(pending.begin(), pending.end(), reg);
  if (it != pending.end()) {
    pending.erase(it);
    active_keys.erase(reg->active_key);
  }
}

void ReplayServer::Impl::handle_data(std::shared_ptr<Socket> sock) {
  std::shared_ptr<Registration> reg;
  {
    std::lock_guard lock(mu);
    if (pending.empty()) return;  // stray connection with no registration
    reg = pending.front();
    pending.pop_front();
    reg->claimed = true;
  }
  set_nodelay(*sock);

  const auto service_it = services.find(reg->service);
  const ServiceTrace &trace =
      reg->kind == ReplayKind::Original ? service_it->second.original : service_it->second.control;

  RunRecord record;
  record.client_id = reg->client_id;
  record.service = reg->service;
  record.kind = reg->kind;
  record.run_index = reg->run_index;

  BufferedReader reader(*sock);

  // Original replays may lead with a handshake prefix carrying the SNI; sniff
  // it, answer with the stub, and keep every other byte for the replay stream.
  if (reg->kind == ReplayKind::Original) {
    std::vector<std::uint8_t> sniffed;
    const double deadline = mono_seconds() + 1.0;
    std::uint8_t tmp[4096];
    while (sniffed.size() < 5) {
      if (!sniffed.empty() && !could_be_tls_prefix(sniffed)) break;
      const double remain = deadline - mono_seconds();
      if (remain <= 0) break;
      const auto n = reader.read_some(tmp, sizeof(tmp), remain);
      if (!n.has_value() || *n == 0) break;
      sniffed.insert(sniffed.end(), tmp, tmp + *n);
    }
    bool consumed_hello = false;
    if (sniffed.size() >= 5 && looks_like_tls_handshake(sniffed)) {
      const std::size_t record_len = *tls_record_size(sniffed);
      if (record_len <= 5 + 65535) {
        while (sniffed.size() < record_len) {
          const auto n = reader.read_some(tmp, sizeof(tmp), config.idle_timeout_s);
          if (!n.has_value() || *n == 0) break;
          sniffed.insert(sniffed.end(), tmp, tmp + *n);
        }
        if (sniffed.size() >= record_len) {
          const auto sni = extract_sni(std::span<const std::uint8_t>(sniffed.data(), record_len));
          if (sni.has_value()) {
            record.saw_client_hello = true;
            record.sni = *sni;
            const auto stub = build_server_hello_stub(config.hello_seed);
            try {
              send_all(*sock, stub);
            } catch (const TdError &) {
              std::lock_guard lock(mu);
              records.push_back(record);
              active_keys.erase(reg->active_key);
              return;
            }
            reader.unread(std::span<const std::uint8_t>(sniffed.data() + record_len,
                                                        sniffed.size() - record_len));
            consumed_hello = true;
          }
        }
      }
    }
    if (!consumed_hello) reader.unread(sniffed);
  }

  const double t0 = mono_seconds();
  const EngineOutcome outcome = run_engine(*sock, reader, trace, Direction::ServerToClient, t0,
                                           0 /* no binning */, config.idle_timeout_s);
  record.bytes_sent = outcome.bytes_sent;
  record.bytes_received = outcome.bytes_received;
  record.payload_match = outcome.payload_match;
  record.completed = outcome.ok;
  record.send_lateness_ms = outcome.send_lateness_ms;

  std::lock_guard lock(mu);
  records.push_back(record);
  active_keys.erase(reg->active_key);
}

// ---------------------------------------------------------------------------
// Client

ReplayResult run_replay_client(const std::string &host, std::uint16_t side_port,
                               const ServiceTrace &trace, const ReplayRequest &request,
                               std::uint32_t bin_width_ms, double idle_timeout_s) {
  if (request.client_id.empty())
    throw TdError(ErrorKind::Config, "BadRequest", "client_id must be non-empty");
  if (bin_width_ms == 0)
    throw TdError(ErrorKind::Config, "BadRequest", "bin_width_ms must be positive");

  const std::string side_endpoint = host + ":" + std::to_string(side_port);
  Socket side;
  try {
    side = connect_to(host, side_port, 5.0);
  } catch (const TdError &) {
    throw TdError(ErrorKind::Network, "SideChannelUnreachable", side_endpoint);
  }
  BufferedReader side_reader(side);
  const std::string kind_text = to_string(request.kind);
  const std::string line = "{\"client_id\":" + json_quote(request.client_id) +
                           ",\"service\":" + json_quote(request.service_name) + ",\"kind\":\"" +
                           kind_text + "\",\"run_index\":" + std::to_string(request.run_index) + "}\n";
  send_all(side, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t *>(line.data()),
                                               line.size()));
  std::string reply;
  if (!side_reader.read_line(reply, idle_timeout_s))
    throw TdError(ErrorKind::Network, "SideChannelTimeout", side_endpoint);
  std::string refusal;
  try {
    const auto doc = nlohmann::json::parse(reply);
    if (!doc.at("ok").get<bool>()) refusal = doc.at("error").get<std::string>();
  } catch (const nlohmann::json::exception &e) {
    throw TdError(ErrorKind::Protocol, "BadSideChannelReply", e.what());
  }
  if (!refusal.empty()) throw side_channel_refused(refusal);

  std::uint16_t port = trace.dst_port;
  if (request.use_sni_prefix) port = 443;
  if (request.dst_port_override.has_value()) port = *request.dst_port_override;

  Socket data;
  try {
    data = connect_to(host, port, 5.0);
  } catch (const TdError &) {
    throw data_connect_failed(host + ":" + std::to_string(port));
  }
  set_nodelay(data);
  BufferedReader data_reader(data);

  if (request.use_sni_prefix && request.kind == ReplayKind::Original && !trace.sni.empty()) {
    const auto hello =
        build_client_hello(ClientHelloSpec::for_host(trace.sni, request.hello_seed ^ request.run_index));
    send_all(data, hello);
    std::uint8_t header[5];
    if (!data_reader.read_exact(header, sizeof(header), idle_timeout_s))
      throw TdError(ErrorKind::Protocol, "NoHandshakeReply", "no stub reply before the replay");
    const auto record_len = tls_record_size(header);
    if (!record_len.has_value())
      throw TdError(ErrorKind::Protocol, "BadHandshakeReply", "reply does not start a handshake record");
    std::vector<std::uint8_t> rest(*record_len - 5);
    if (!data_reader.read_exact(rest.data(), rest.size(), idle_timeout_s))
      throw TdError(ErrorKind::Protocol, "BadHandshakeReply", "truncated stub reply");
  }

  const double t0 = mono_seconds();
  const EngineOutcome outcome =
      run_engine(data, data_reader, trace, Direction::ClientToServer, t0, bin_width_ms, idle_timeout_s);

  ReplayResult result;
  result.throughput.bin_width_ms = bin_width_ms;
  result.throughput.bins = outcome.bins;
  result.total_bytes = outcome.bytes_received;
  result.duration_ms = static_cast<std::uint32_t>(
      std::max<long long>(1, std::llround(outcome.elapsed_s * 1000.0)));
  result.completed = outcome.ok && outcome.payload_match;
  result.payload_match = outcome.payload_match;
  if (!outcome.ok)
    result.error_note = outcome.note;
  else if (!outcome.payload_match)
    result.error_note = "PayloadMismatch";
  result.send_lateness_ms = outcome.send_lateness_ms;
  return result;
}

std::vector<std::pair<ReplayResult, ReplayResult>> run_back_to_back(
    const std::string &host, std::uint16_t side_port, const ServiceTrace &original,
    const ReplayRequest &request_base, int n_runs, std::uint32_t bin_width_ms, double idle_timeout_s) {
  if (n_runs < 1) throw TdError(ErrorKind::Config, "BadRequest", "n_runs must be at least 1");
  const ServiceTrace control = bit_reverse_trace(original);

  std::vector<std::pair<ReplayResult, ReplayResult>> out;
  out.reserve(static_cast<std::size_t>(n_runs));
  for (int i = 0; i < n_runs; ++i) {
    auto one = [&](ReplayKind kind, const ServiceTrace &trace) -> ReplayResult {
      ReplayRequest request = request_base;
      request.kind = kind;
      request.run_index = request_base.run_index + static_cast<std::uint32_t>(i);
      try {
        return run_replay_client(host, side_port, trace, request, bin_width_ms, idle_timeout_s);
      } catch (const TdError &e) {
        ReplayResult failed;
        failed.throughput.bin_width_ms = bin_width_ms;
        failed.completed = false;
        failed.error_note = e.what();
        return failed;
      }
    };
    ReplayResult orig = one(ReplayKind::Original, original);
    ReplayResult ctrl = one(ReplayKind::Control, control);
    out.emplace_back(std::move(orig), std::move(ctrl));
  }
  return out;
}

std::vector<RunPair> to_run_pairs(const std::vector<std::pair<ReplayResult, ReplayResult>> &runs) {
  std::vector<RunPair> pairs;
  pairs.reserve(runs.size());
  for (const auto &[orig, ctrl] : runs) {
    RunPair pair;
    pair.original = orig.throughput;
    pair.control = ctrl.throughput;
    pair.original_completed = orig.completed;
    pair.control_completed = ctrl.completed;
    pairs.push_back(std::move(pair));
  }
  return pairs;
}

}  // namespace tdprobe
