#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace latref::base64 {

// Standard alphabet with '=' padding.
std::string encode(std::span<const std::uint8_t> bytes);

// Strict standard-alphabet decoding (libsodium); throws DataError on bad input.
std::vector<std::uint8_t> decode(std::string_view text);

}  // namespace latref::base64
