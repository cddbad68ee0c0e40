#pragma once

// Reference implementations built differently from the library code, used
// as test oracles.

#include <cmath>
#include <cstdint>
#include <iomanip>
#include <regex>
#include <sstream>
#include <string>
#include <vector>

namespace wsn::testing {

// Topic filter semantics via a regular expression built from the filter.
inline bool regex_topic_match(const std::string& filter, const std::string& topic) {
    std::vector<std::string> levels;
    std::string cur;
    for (char c : filter) {
        if (c == '/') {
            levels.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    levels.push_back(cur);

    if ((levels[0] == "+" || levels[0] == "#") && !topic.empty() && topic[0] == '$')
        return false;

    std::string re;
    for (std::size_t i = 0; i < levels.size(); ++i) {
        const auto& l = levels[i];
        if (l == "#") {
            // "#" alone matches everything; "x/#" matches "x" and "x/anything".
            re = i == 0 ? ".*" : "(" + re + ")(/.*)?";
            break;
        }
        if (i)
            re += "/";
        if (l == "+") {
            re += "[^/]*";
        } else {
            for (char c : l) {
                if (std::isalnum(static_cast<unsigned char>(c)))
                    re += c;
                else
                    re += std::string("\\") + c;
            }
        }
    }
    return std::regex_match(topic, std::regex(re));
}

// Bit-at-a-time reflected CRC-32C (Castagnoli), polynomial 0x82F63B78.
inline std::uint32_t bitwise_crc32c(const std::uint8_t* p, std::size_t n) {
    std::uint32_t crc = 0xFFFFFFFFu;
    for (std::size_t i = 0; i < n; ++i) {
        crc ^= p[i];
        for (int k = 0; k < 8; ++k)
            crc = (crc >> 1) ^ (0x82F63B78u & (0u - (crc & 1u)));
    }
    return ~crc;
}

// Fixed six-decimal rendering with zeros trimmed, via iostreams.
inline std::string stream_format(double v) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(6) << v;
    auto s = os.str();
    while (s.back() == '0')
        s.pop_back();
    if (s.back() == '.')
        s.pop_back();
    if (s == "-0")
        s = "0";
    return s;
}

// Number of base-128 groups needed for n, by repeated division.
inline std::size_t varint_groups(std::uint32_t n) {
    std::size_t g = 1;
    while (n >= 128) {
        n /= 128;
        ++g;
    }
    return g;
}

} // namespace wsn::testing
