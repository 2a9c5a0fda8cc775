#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace snf {

// Shortest round-trip decimal representation (std::to_chars).
std::string fmt_double(double v);
// Fixed-precision formatting used in human-readable tables.
std::string fmt_fixed(double v, int digits);
// Scientific "mantissa^exponent" style for very small p-values, else fixed.
std::string fmt_pvalue(double p);

double parse_double(std::string_view s);
std::uint64_t parse_u64(std::string_view s);
long long parse_i64(std::string_view s);

std::vector<std::string_view> split(std::string_view s, char sep);
std::string_view trim(std::string_view s);
bool starts_with(std::string_view s, std::string_view prefix);

// Parses "k1=v1 k2=v2 ..." (space separated) into ordered pairs.
std::vector<std::pair<std::string, std::string>> parse_kv_line(std::string_view line);

}  // namespace snf
