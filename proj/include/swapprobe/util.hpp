#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace swapprobe {

using Bytes = std::vector<std::uint8_t>;

Bytes read_file(const std::filesystem::path& path);
std::string read_text_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view contents);

std::string sha256_hex(const Bytes& data);
std::string sha256_hex(std::string_view data);

std::string base64_encode(const Bytes& data);
Bytes base64_decode(std::string_view text);

std::string trim(std::string_view s);
std::string to_lower(std::string_view s);

/// Splits on runs of ASCII whitespace; empty input yields no words.
std::vector<std::string> split_words(std::string_view s);

}  // namespace swapprobe
