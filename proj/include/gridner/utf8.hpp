#pragma once

#include <string>

namespace gridner {

// Decodes UTF-8 to code points; throws DataError on malformed input.
std::u32string utf8_decode(const std::string& s);

std::string utf8_encode(const std::u32string& s);
std::string utf8_encode(char32_t c);

}  // namespace gridner
