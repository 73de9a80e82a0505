#pragma once

// SHA-256 (FIPS 180-4) for content-addressing result artifacts.

#include <cstdint>
#include <cstddef>
#include <string>
#include <vector>

namespace raven {

std::string sha256_hex(const uint8_t* data, size_t n);

inline std::string sha256_hex(const std::vector<uint8_t>& v) {
  return sha256_hex(v.data(), v.size());
}
inline std::string sha256_hex(const std::string& s) {
  return sha256_hex(reinterpret_cast<const uint8_t*>(s.data()), s.size());
}

}  // namespace raven
