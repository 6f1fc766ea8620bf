#pragma once

// Small text helpers shared by the key=value and CSV formats.

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <utility>
#include <vector>

#include "urbanform/error.hpp"

namespace urbanform::text {

/// Shortest decimal form that parses back to the same double.
inline std::string format_double(double value) {
    if (std::isnan(value)) return "nan";
    if (std::isinf(value)) return value > 0 ? "inf" : "-inf";
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), value);
    return std::string(buf, res.ptr);
}

/// Fixed-precision form for human-facing reports.
inline std::string format_fixed(double value, int digits) {
    if (std::isnan(value)) return "nan";
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), value, std::chars_format::fixed, digits);
    return std::string(buf, res.ptr);
}

inline std::string_view trim(std::string_view s) {
    const auto* ws = " \t\r\n";
    auto b = s.find_first_not_of(ws);
    if (b == std::string_view::npos) return {};
    auto e = s.find_last_not_of(ws);
    return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split(std::string_view s, char sep) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        auto pos = s.find(sep, start);
        if (pos == std::string_view::npos) {
            out.emplace_back(s.substr(start));
            break;
        }
        out.emplace_back(s.substr(start, pos - start));
        start = pos + 1;
    }
    return out;
}

inline bool parse_double(std::string_view s, double& out) {
    s = trim(s);
    if (s == "nan" || s == "NaN") {
        out = std::nan("");
        return true;
    }
    auto res = std::from_chars(s.data(), s.data() + s.size(), out);
    return res.ec == std::errc{} && res.ptr == s.data() + s.size();
}

template <class Int>
bool parse_int(std::string_view s, Int& out) {
    s = trim(s);
    auto res = std::from_chars(s.data(), s.data() + s.size(), out);
    return res.ec == std::errc{} && res.ptr == s.data() + s.size();
}

inline double to_double(std::string_view s, std::string_view what) {
    double v = 0;
    if (!parse_double(s, v)) throw Error("cannot parse " + std::string(what) + " from '" + std::string(s) + "'");
    return v;
}

inline long long to_int(std::string_view s, std::string_view what) {
    long long v = 0;
    if (!parse_int(s, v)) throw Error("cannot parse " + std::string(what) + " from '" + std::string(s) + "'");
    return v;
}

/// Parses `key=value` lines, keeping file order. Blank lines and `#` comments are skipped.
inline std::vector<std::pair<std::string, std::string>> parse_key_values(std::string_view content) {
    std::vector<std::pair<std::string, std::string>> out;
    std::size_t line_no = 0;
    for (const auto& raw : split(content, '\n')) {
        ++line_no;
        auto line = trim(raw);
        if (line.empty() || line.front() == '#') continue;
        auto eq = line.find('=');
        if (eq == std::string_view::npos)
            throw Error("line " + std::to_string(line_no) + ": expected key=value, got '" + std::string(line) + "'");
        out.emplace_back(std::string(trim(line.substr(0, eq))), std::string(trim(line.substr(eq + 1))));
    }
    return out;
}

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open '" + path + "' for reading");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file(const std::string& path, std::string_view content) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open '" + path + "' for writing");
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw Error("write failed for '" + path + "'");
}

/// Splits a CSV document into rows of fields. No quoting support; fields never contain commas here.
inline std::vector<std::vector<std::string>> parse_csv(std::string_view content) {
    std::vector<std::vector<std::string>> rows;
    for (const auto& raw : split(content, '\n')) {
        auto line = trim(raw);
        if (line.empty()) continue;
        auto fields = split(line, ',');
        for (auto& f : fields) f = std::string(trim(f));
        rows.push_back(std::move(fields));
    }
    return rows;
}

}  // namespace urbanform::text
