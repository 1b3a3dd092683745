#include "tdprobe/trace.hpp"

#include <array>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "tdprobe/errors.hpp"
#include "tdprobe/util.hpp"

namespace tdprobe {

namespace {

constexpr std::array<std::uint8_t, 256> make_bit_reverse_table() {
  std::array<std::uint8_t, 256> table{};
  for (int v = 0; v < 256; ++v) {
    std::uint8_t r = 0;
    for (int bit = 0; bit < 8; ++bit) {
      if (v & (1 << bit)) r |= static_cast<std::uint8_t>(1 << (7 - bit));
    }
    table[static_cast<std::size_t>(v)] = r;
  }
  return table;
}

constexpr auto kBitReverse = make_bit_reverse_table();

void append_json_string(std::string &out, const std::string &s) {
  out.push_back('"');
  for (char c : s) {
    switch (c) {
      case '"': out += "\\\""; break;
      case '\\': out += "\\\\"; break;
      case '\n': out += "\\n"; break;
      case '\r': out += "\\r"; break;
      case '\t': out += "\\t"; break;
      default:
        if (static_cast<unsigned char>(c) < 0x20) {
          char buf[8];
          std::snprintf(buf, sizeof buf, "\\u%04x", c);
          out += buf;
        } else {
          out.push_back(c);
        }
    }
  }
  out.push_back('"');
}

}  // namespace

std::uint64_t ServiceTrace::total_payload_bytes() const {
  std::uint64_t total = 0;
  for (const auto &e : entries) total += e.payload.size();
  return total;
}

std::uint64_t ServiceTrace::total_bytes(Direction dir) const {
  std::uint64_t total = 0;
  for (const auto &e : entries)
    if (e.dir == dir) total += e.payload.size();
  return total;
}

std::uint64_t ServiceTrace::cumulative_ms() const {
  std::uint64_t total = 0;
  for (const auto &e : entries) total += e.delta_ms;
  return total;
}

void ServiceTrace::validate(const std::string &origin) const {
  if (service_name.empty()) throw malformed_trace(origin + ".service_name", "must be non-empty");
  if (!sni.empty() && !is_valid_hostname(sni)) throw malformed_trace(origin + ".sni", "not a valid hostname: " + sni);
  if (dst_port == 0) throw malformed_trace(origin + ".dst_port", "must be in [1, 65535]");
  if (entries.empty()) throw malformed_trace(origin + ".entries", "must be non-empty");
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (entries[i].payload.empty())
      throw malformed_trace(origin + ".entries[" + std::to_string(i) + "].payload_b64", "payload length must be >= 1");
  }
  if (cumulative_ms() == 0) throw malformed_trace(origin + ".entries", "cumulative time must be > 0");
}

std::string trace_to_json(const ServiceTrace &trace) {
  std::string out;
  out.reserve(64 + trace.entries.size() * 48 + trace.total_payload_bytes() * 4 / 3);
  out += "{\"service_name\": ";
  append_json_string(out, trace.service_name);
  out += ", \"sni\": ";
  append_json_string(out, trace.sni);
  out += ", \"dst_port\": ";
  out += std::to_string(trace.dst_port);
  out += ", \"entries\": [";
  for (std::size_t i = 0; i < trace.entries.size(); ++i) {
    const auto &e = trace.entries[i];
    if (i) out += ", ";
    out += "{\"dir\": \"";
    out += (e.dir == Direction::ClientToServer) ? "cs" : "sc";
    out += "\", \"delta_ms\": ";
    out += std::to_string(e.delta_ms);
    out += ", \"payload_b64\": \"";
    out += base64_encode(e.payload);
    out += "\"}";
  }
  out += "]}\n";
  return out;
}

ServiceTrace trace_from_json(const std::string &text, const std::string &origin) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error &e) {
    throw malformed_trace(origin, e.what());
  }
  if (!doc.is_object()) throw malformed_trace(origin, "top level must be a JSON object");

  auto require = [&](const char *key, nlohmann::json::value_t type, const char *type_name) -> const nlohmann::json & {
    auto it = doc.find(key);
    if (it == doc.end()) throw malformed_trace(origin + "." + key, "missing field");
    if (it->type() != type &&
        !(type == nlohmann::json::value_t::number_unsigned && it->is_number_integer() && it->get<std::int64_t>() >= 0))
      throw malformed_trace(origin + "." + key, std::string("expected ") + type_name);
    return *it;
  };

  ServiceTrace trace;
  trace.service_name = require("service_name", nlohmann::json::value_t::string, "string").get<std::string>();
  trace.sni = require("sni", nlohmann::json::value_t::string, "string").get<std::string>();
  const auto &port = require("dst_port", nlohmann::json::value_t::number_unsigned, "integer");
  std::int64_t port_v = port.get<std::int64_t>();
  if (port_v < 1 || port_v > 65535) throw malformed_trace(origin + ".dst_port", "must be in [1, 65535]");
  trace.dst_port = static_cast<std::uint16_t>(port_v);

  const auto &entries = require("entries", nlohmann::json::value_t::array, "array");
  trace.entries.reserve(entries.size());
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const std::string locus = origin + ".entries[" + std::to_string(i) + "]";
    const auto &item = entries[i];
    if (!item.is_object()) throw malformed_trace(locus, "expected object");
    TraceEntry entry;

    auto dir_it = item.find("dir");
    if (dir_it == item.end() || !dir_it->is_string()) throw malformed_trace(locus + ".dir", "expected \"cs\" or \"sc\"");
    const std::string dir = dir_it->get<std::string>();
    if (dir == "cs") entry.dir = Direction::ClientToServer;
    else if (dir == "sc") entry.dir = Direction::ServerToClient;
    else throw malformed_trace(locus + ".dir", "expected \"cs\" or \"sc\", got \"" + dir + "\"");

    auto delta_it = item.find("delta_ms");
    if (delta_it == item.end() || !delta_it->is_number_integer())
      throw malformed_trace(locus + ".delta_ms", "expected integer");
    std::int64_t delta = delta_it->get<std::int64_t>();
    if (delta < 0) throw malformed_trace(locus + ".delta_ms", "must be >= 0");
    entry.delta_ms = static_cast<std::uint32_t>(delta);

    auto payload_it = item.find("payload_b64");
    if (payload_it == item.end() || !payload_it->is_string())
      throw malformed_trace(locus + ".payload_b64", "expected base64 string");
    auto decoded = base64_decode(payload_it->get<std::string>());
    if (!decoded) throw malformed_trace(locus + ".payload_b64", "invalid base64");
    entry.payload = std::move(*decoded);

    trace.entries.push_back(std::move(entry));
  }

  trace.validate(origin);
  return trace;
}

ServiceTrace load_trace(const std::string &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_failure(path, "cannot open for reading");
  std::ostringstream buf;
  buf << in.rdbuf();
  return trace_from_json(buf.str(), path);
}

void save_trace(const ServiceTrace &trace, const std::string &path) {
  trace.validate("<save>");
  const std::string text = trace_to_json(trace);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw io_failure(path, "cannot open for writing");
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  out.flush();
  if (!out) throw io_failure(path, "write failed");
}

ServiceTrace bit_reverse_trace(const ServiceTrace &trace) {
  ServiceTrace out;
  out.service_name = trace.service_name + "-control";
  out.sni.clear();
  out.dst_port = trace.dst_port;
  out.entries.reserve(trace.entries.size());
  for (const auto &e : trace.entries) {
    TraceEntry r;
    r.dir = e.dir;
    r.delta_ms = e.delta_ms;
    r.payload.reserve(e.payload.size());
    for (auto b : e.payload) r.payload.push_back(kBitReverse[b]);
    out.entries.push_back(std::move(r));
  }
  return out;
}

ServiceTrace synth_dash_trace(const DashParams &params, const std::string &service_name,
                              const std::string &sni, std::uint16_t dst_port) {
  if (params.chunk_bytes == 0 || params.chunk_interval_ms == 0 || params.n_chunks == 0 || params.request_bytes == 0)
    throw TdError(ErrorKind::Config, "InvalidFlags", "DASH params must all be > 0");

  constexpr std::uint64_t kSegmentBytes = 16384;  // application write size

  const std::uint64_t segments = (params.chunk_bytes + kSegmentBytes - 1) / kSegmentBytes;
  const std::uint64_t total_bytes =
      static_cast<std::uint64_t>(params.n_chunks) * (params.chunk_bytes + params.request_bytes);
  auto bytes = seeded_bytes(params.seed, total_bytes);
  std::size_t cursor = 0;
  auto take = [&](std::uint64_t n) {
    std::vector<std::uint8_t> p(bytes.begin() + static_cast<std::ptrdiff_t>(cursor),
                                bytes.begin() + static_cast<std::ptrdiff_t>(cursor + n));
    cursor += n;
    return p;
  };

  ServiceTrace trace;
  trace.service_name = service_name;
  trace.sni = sni;
  trace.dst_port = dst_port;

  std::uint64_t prev_deadline = 0;
  for (std::uint32_t chunk = 0; chunk < params.n_chunks; ++chunk) {
    const std::uint64_t chunk_start = static_cast<std::uint64_t>(chunk) * params.chunk_interval_ms;

    TraceEntry request;
    request.dir = Direction::ClientToServer;
    request.delta_ms = static_cast<std::uint32_t>(chunk_start - prev_deadline);
    request.payload = take(params.request_bytes);
    trace.entries.push_back(std::move(request));
    prev_deadline = chunk_start;

    std::uint64_t sent = 0;
    for (std::uint64_t seg = 1; seg <= segments; ++seg) {
      const std::uint64_t seg_bytes = std::min(kSegmentBytes, params.chunk_bytes - sent);
      // segment deadlines span the interval so delivery finishes at the chunk boundary
      const std::uint64_t deadline =
          chunk_start + (seg * params.chunk_interval_ms + segments / 2) / segments;
      TraceEntry data;
      data.dir = Direction::ServerToClient;
      data.delta_ms = static_cast<std::uint32_t>(deadline - prev_deadline);
      data.payload = take(seg_bytes);
      trace.entries.push_back(std::move(data));
      prev_deadline = deadline;
      sent += seg_bytes;
    }
  }
  return trace;
}

double offered_rate_bps(const ServiceTrace &trace) {
  const std::uint64_t ms = trace.cumulative_ms();
  if (ms == 0) throw malformed_trace("<offered_rate>", "cumulative time must be > 0");
  return 8.0 * static_cast<double>(trace.total_payload_bytes()) / (static_cast<double>(ms) / 1000.0);
}

}  // namespace tdprobe
