#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>

namespace efdiff {

// Streaming 64-bit FNV-1a. Used for run digests, not for security.
class Digest {
 public:
  Digest& update(std::span<const std::byte> bytes);
  Digest& update(std::string_view text);
  template <typename T>
  Digest& update_pod(const T& value) {
    return update(std::as_bytes(std::span<const T, 1>(&value, 1)));
  }
  template <typename T>
  Digest& update_values(std::span<const T> values) {
    return update(std::as_bytes(values));
  }

  std::uint64_t value() const { return state_; }
  std::string hex() const;

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

std::string digest_hex(std::string_view text);
std::string file_digest(const std::string& path);

// SplitMix64 finalizer; derives independent per-step seeds from a base seed.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0);

}  // namespace efdiff
