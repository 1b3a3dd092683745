#include "tdprobe/tls_mimic.hpp"

#include <cstring>

#include "tdprobe/errors.hpp"
#include "tdprobe/util.hpp"

namespace tdprobe {

namespace {

void put_u8(std::vector<std::uint8_t> &out, std::uint8_t v) { out.push_back(v); }

void put_u16(std::vector<std::uint8_t> &out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v & 0xff));
}

void put_u24(std::vector<std::uint8_t> &out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>((v >> 16) & 0xff));
  out.push_back(static_cast<std::uint8_t>((v >> 8) & 0xff));
  out.push_back(static_cast<std::uint8_t>(v & 0xff));
}

// Bounds-checked big-endian reader; every accessor fails closed.
class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> data) : data_(data) {}

  bool read_u8(std::uint8_t &v) {
    if (pos_ + 1 > data_.size()) return false;
    v = data_[pos_++];
    return true;
  }
  bool read_u16(std::uint16_t &v) {
    if (pos_ + 2 > data_.size()) return false;
    v = static_cast<std::uint16_t>((data_[pos_] << 8) | data_[pos_ + 1]);
    pos_ += 2;
    return true;
  }
  bool read_u24(std::uint32_t &v) {
    if (pos_ + 3 > data_.size()) return false;
    v = (static_cast<std::uint32_t>(data_[pos_]) << 16) | (static_cast<std::uint32_t>(data_[pos_ + 1]) << 8) |
        data_[pos_ + 2];
    pos_ += 3;
    return true;
  }
  bool skip(std::size_t n) {
    if (pos_ + n > data_.size()) return false;
    pos_ += n;
    return true;
  }
  bool read_span(std::size_t n, std::span<const std::uint8_t> &out) {
    if (pos_ + n > data_.size()) return false;
    out = data_.subspan(pos_, n);
    pos_ += n;
    return true;
  }
  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

constexpr std::uint8_t kContentTypeHandshake = 0x16;
constexpr std::uint8_t kHandshakeClientHello = 0x01;
constexpr std::uint8_t kHandshakeServerHello = 0x02;
constexpr std::uint16_t kExtensionServerName = 0x0000;

}  // namespace

ClientHelloSpec ClientHelloSpec::for_host(std::string sni, std::uint64_t seed) {
  ClientHelloSpec spec;
  spec.sni = std::move(sni);
  auto r = seeded_bytes(seed, 32);
  std::memcpy(spec.client_random.data(), r.data(), 32);
  return spec;
}

std::vector<std::uint8_t> build_client_hello(const ClientHelloSpec &spec) {
  if (spec.sni.size() > 253) throw hostname_too_long(spec.sni);
  if (spec.sni.empty() || !is_valid_hostname(spec.sni))
    throw TdError(ErrorKind::Config, "InvalidHostname", spec.sni);
  if (spec.cipher_suite_ids.empty())
    throw TdError(ErrorKind::Config, "InvalidHelloSpec", "cipher suite list must be non-empty");
  if (spec.legacy_session_id.size() > 32)
    throw TdError(ErrorKind::Config, "InvalidHelloSpec", "session id longer than 32 bytes");

  // server_name extension body: list length, then one host_name entry
  std::vector<std::uint8_t> sni_ext;
  put_u16(sni_ext, static_cast<std::uint16_t>(spec.sni.size() + 3));  // server_name_list length
  put_u8(sni_ext, 0x00);                                              // name_type host_name
  put_u16(sni_ext, static_cast<std::uint16_t>(spec.sni.size()));
  sni_ext.insert(sni_ext.end(), spec.sni.begin(), spec.sni.end());

  std::vector<std::uint8_t> extensions;
  put_u16(extensions, kExtensionServerName);
  put_u16(extensions, static_cast<std::uint16_t>(sni_ext.size()));
  extensions.insert(extensions.end(), sni_ext.begin(), sni_ext.end());

  std::vector<std::uint8_t> body;
  put_u16(body, 0x0303);  // client_version
  body.insert(body.end(), spec.client_random.begin(), spec.client_random.end());
  put_u8(body, static_cast<std::uint8_t>(spec.legacy_session_id.size()));
  body.insert(body.end(), spec.legacy_session_id.begin(), spec.legacy_session_id.end());
  put_u16(body, static_cast<std::uint16_t>(spec.cipher_suite_ids.size() * 2));
  for (auto id : spec.cipher_suite_ids) put_u16(body, id);
  put_u8(body, 1);     // one compression method
  put_u8(body, 0x00);  // null
  put_u16(body, static_cast<std::uint16_t>(extensions.size()));
  body.insert(body.end(), extensions.begin(), extensions.end());

  std::vector<std::uint8_t> record;
  put_u8(record, kContentTypeHandshake);
  put_u16(record, 0x0301);
  put_u16(record, static_cast<std::uint16_t>(body.size() + 4));
  put_u8(record, kHandshakeClientHello);
  put_u24(record, static_cast<std::uint32_t>(body.size()));
  record.insert(record.end(), body.begin(), body.end());
  return record;
}

bool looks_like_tls_handshake(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 3) return false;
  return bytes[0] == kContentTypeHandshake && bytes[1] == 0x03 && bytes[2] <= 0x04;
}

std::optional<std::size_t> tls_record_size(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 5 || !looks_like_tls_handshake(bytes)) return std::nullopt;
  return 5u + ((static_cast<std::size_t>(bytes[3]) << 8) | bytes[4]);
}

std::optional<std::string> extract_sni(std::span<const std::uint8_t> record) {
  if (record.size() < 5) return std::nullopt;
  if (!looks_like_tls_handshake(record)) return std::nullopt;
  const std::size_t record_len = (static_cast<std::size_t>(record[3]) << 8) | record[4];
  if (record.size() < 5 + record_len) return std::nullopt;  // truncated record

  // Stay inside the declared record even if the buffer holds more.
  ByteReader r(record.subspan(5, record_len));

  std::uint8_t hs_type = 0;
  std::uint32_t hs_len = 0;
  if (!r.read_u8(hs_type) || hs_type != kHandshakeClientHello) return std::nullopt;
  if (!r.read_u24(hs_len) || hs_len > r.remaining()) return std::nullopt;

  ByteReader hello(record.subspan(5 + 4, hs_len));
  std::uint16_t version = 0;
  if (!hello.read_u16(version)) return std::nullopt;
  if (!hello.skip(32)) return std::nullopt;  // random

  std::uint8_t session_len = 0;
  if (!hello.read_u8(session_len) || session_len > 32 || !hello.skip(session_len)) return std::nullopt;

  std::uint16_t suites_len = 0;
  if (!hello.read_u16(suites_len) || suites_len % 2 != 0 || suites_len == 0 || !hello.skip(suites_len))
    return std::nullopt;

  std::uint8_t comp_len = 0;
  if (!hello.read_u8(comp_len) || comp_len == 0 || !hello.skip(comp_len)) return std::nullopt;

  if (hello.remaining() == 0) return std::nullopt;  // no extensions block
  std::uint16_t ext_total = 0;
  if (!hello.read_u16(ext_total) || ext_total > hello.remaining()) return std::nullopt;

  std::span<const std::uint8_t> ext_block;
  if (!hello.read_span(ext_total, ext_block)) return std::nullopt;
  ByteReader exts(ext_block);
  while (exts.remaining() > 0) {
    std::uint16_t ext_type = 0, ext_len = 0;
    if (!exts.read_u16(ext_type) || !exts.read_u16(ext_len)) return std::nullopt;
    std::span<const std::uint8_t> ext_data;
    if (!exts.read_span(ext_len, ext_data)) return std::nullopt;
    if (ext_type != kExtensionServerName) continue;

    ByteReader names(ext_data);
    std::uint16_t list_len = 0;
    if (!names.read_u16(list_len) || list_len > names.remaining()) return std::nullopt;
    ByteReader list(ext_data.subspan(2, list_len));
    while (list.remaining() > 0) {
      std::uint8_t name_type = 0;
      std::uint16_t name_len = 0;
      if (!list.read_u8(name_type) || !list.read_u16(name_len)) return std::nullopt;
      std::span<const std::uint8_t> name;
      if (!list.read_span(name_len, name)) return std::nullopt;
      if (name_type == 0x00) return std::string(name.begin(), name.end());
    }
    return std::nullopt;  // server_name extension without a host_name entry
  }
  return std::nullopt;
}

std::vector<std::uint8_t> build_server_hello_stub(std::uint64_t seed) {
  std::vector<std::uint8_t> body;
  put_u16(body, 0x0303);
  auto random = seeded_bytes(seed, 32);
  body.insert(body.end(), random.begin(), random.end());
  put_u8(body, 0);                          // empty session id
  put_u16(body, kDefaultCipherSuites[0]);   // selected suite
  put_u8(body, 0x00);                       // null compression

  std::vector<std::uint8_t> record;
  put_u8(record, kContentTypeHandshake);
  put_u16(record, 0x0301);
  put_u16(record, static_cast<std::uint16_t>(body.size() + 4));
  put_u8(record, kHandshakeServerHello);
  put_u24(record, static_cast<std::uint32_t>(body.size()));
  record.insert(record.end(), body.begin(), body.end());
  return record;
}

}  // namespace tdprobe
