#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace unimt::utf8 {

/// Throws DecodeError naming the byte offset of the first invalid sequence.
void validate(std::string_view bytes);

/// Decodes validated UTF-8 into code points.
std::vector<char32_t> decode(std::string_view bytes);

void append(std::string& out, char32_t cp);
std::string encode(const std::vector<char32_t>& cps);

std::size_t count_code_points(std::string_view bytes);

bool is_space(char32_t cp);

}  // namespace unimt::utf8
