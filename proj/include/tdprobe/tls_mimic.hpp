#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace tdprobe {

// TLS cipher suite ids advertised by default; a plausible modern client
// list, frozen so built hellos are stable across runs.
inline constexpr std::uint16_t kDefaultCipherSuites[] = {
    0x1301, 0x1302, 0x1303,          // TLS_AES_128/256_GCM, CHACHA20
    0xc02b, 0xc02f, 0xc02c, 0xc030,  // ECDHE ECDSA/RSA AES GCM
    0xcca9, 0xcca8,                  // ECDHE CHACHA20
    0xc013, 0xc014,                  // ECDHE AES CBC
    0x009c, 0x009d,                  // RSA AES GCM
    0x002f, 0x0035,                  // RSA AES CBC
};

struct ClientHelloSpec {
  std::string sni;  // non-empty, valid hostname, <= 253 bytes
  std::array<std::uint8_t, 32> client_random{};
  std::vector<std::uint16_t> cipher_suite_ids{std::begin(kDefaultCipherSuites), std::end(kDefaultCipherSuites)};
  std::vector<std::uint8_t> legacy_session_id;  // 0..32 bytes

  static ClientHelloSpec for_host(std::string sni, std::uint64_t seed);
};

// One TLS record (type 0x16, version 0x0301) holding a ClientHello
// (0x01, client version 0x0303) whose extensions block carries the
// server_name extension per RFC 6066. Throws HostnameTooLong.
std::vector<std::uint8_t> build_client_hello(const ClientHelloSpec &spec);

// Classifier's view of untrusted bytes: the host_name of the first
// server_name extension if `record` starts with a well-formed ClientHello
// record, otherwise nullopt. Never reads past declared lengths.
std::optional<std::string> extract_sni(std::span<const std::uint8_t> record);

// Minimal syntactically valid ServerHello record so a replay exchange can
// answer the hello prefix; no certificates, no key exchange.
std::vector<std::uint8_t> build_server_hello_stub(std::uint64_t seed);

// True if the span begins with a TLS handshake record header
// (0x16 0x03 0x00..0x04); used to decide whether more bytes may complete
// a parsable hello.
bool looks_like_tls_handshake(std::span<const std::uint8_t> bytes);

// Declared total record size (header + payload) if a full record header
// is present.
std::optional<std::size_t> tls_record_size(std::span<const std::uint8_t> bytes);

}  // namespace tdprobe
