#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

namespace cbforge {

/// SHA-256 of `data` as lowercase hex.
std::string sha256_hex(std::string_view data);

std::string sha256_file(const std::filesystem::path& path);

/// 64-bit FNV-1a; stable across platforms, unlike std::hash.
std::uint64_t fnv1a64(std::string_view data);

/// Derives an independent substream seed from a master seed and a tag.
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t tag);

}  // namespace cbforge
