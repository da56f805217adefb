#include "latref/base64.hpp"

#include <sodium.h>

#include <stdexcept>

#include "latref/errors.hpp"

namespace latref::base64 {

namespace {

void ensure_init() {
  static const bool ok = sodium_init() >= 0;
  if (!ok) throw std::runtime_error("libsodium failed to initialise");
}

}  // namespace

std::string encode(std::span<const std::uint8_t> bytes) {
  ensure_init();
  std::string out(sodium_base64_encoded_len(bytes.size(), sodium_base64_VARIANT_ORIGINAL), '\0');
  sodium_bin2base64(out.data(), out.size(), bytes.data(), bytes.size(), sodium_base64_VARIANT_ORIGINAL);
  out.resize(out.size() - 1);  // trailing NUL
  return out;
}

std::vector<std::uint8_t> decode(std::string_view text) {
  ensure_init();
  if (text.size() % 4 != 0) throw DataError("base64 length is not a multiple of 4");
  std::vector<std::uint8_t> out(text.size() / 4 * 3);
  std::size_t len = 0;
  const char* end = nullptr;
  if (sodium_base642bin(out.data(), out.size(), text.data(), text.size(), nullptr, &len, &end,
                        sodium_base64_VARIANT_ORIGINAL) != 0 ||
      end != text.data() + text.size()) {
    throw DataError("invalid base64 payload");
  }
  out.resize(len);
  return out;
}

}  // namespace latref::base64
