#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace tdprobe {

// RFC 4648 base64 with padding.
std::string base64_encode(std::span<const std::uint8_t> data);
std::optional<std::vector<std::uint8_t>> base64_decode(std::string_view text);

// Syntactic DNS hostname check: non-empty dot-separated labels of
// [A-Za-z0-9-], total length <= 253 bytes.
bool is_valid_hostname(std::string_view name);

// FNV-1a 64-bit, incremental; used for byte-fidelity accounting of
// replayed streams where chunk boundaries do not line up with payloads.
class Fnv1a {
 public:
  void update(std::span<const std::uint8_t> data) {
    for (auto b : data) {
      hash_ ^= b;
      hash_ *= 0x100000001b3ULL;
    }
  }
  std::uint64_t value() const { return hash_; }

 private:
  std::uint64_t hash_ = 0xcbf29ce484222325ULL;
};

std::uint64_t fnv1a64(std::span<const std::uint8_t> data);

// Deterministic byte stream from a seed (mt19937_64 words, little-endian).
// Identical output across platforms for the same seed.
std::vector<std::uint8_t> seeded_bytes(std::uint64_t seed, std::size_t n);

std::optional<std::vector<std::uint8_t>> hex_decode(std::string_view text);
std::string hex_encode(std::span<const std::uint8_t> data);

}  // namespace tdprobe
