#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

// UTF-8 and hashing helpers shared by the modules.
namespace attnbench::text {

// Decodes one code point at `pos`, advancing it. Invalid bytes decode as
// U+FFFD and consume a single byte.
char32_t decode_utf8(std::string_view s, std::size_t& pos);
void append_utf8(std::string& out, char32_t cp);

// Unicode White_Space property.
bool is_space(char32_t cp);
bool is_punctuation(char32_t cp);
char32_t to_lower(char32_t cp);

// Byte ranges [first, second) of whitespace-separated tokens.
std::vector<std::pair<std::size_t, std::size_t>> token_spans(std::string_view s);
std::size_t token_count(std::string_view s);

// Number of code points in the valid UTF-8 prefix `s`.
std::size_t code_point_count(std::string_view s);

std::string sha256_hex(std::string_view data);

std::uint64_t fnv1a64(std::string_view data);
std::uint64_t splitmix64(std::uint64_t x);

}  // namespace attnbench::text
