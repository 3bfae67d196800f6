#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace treetf {

/// Writes "warning: <msg>" to stderr unless warnings are silenced.
void warn(const std::string& msg);
void set_warnings_enabled(bool on);

std::string format_double(double v);
int parse_int(const std::string& s, const std::string& what);
double parse_double(const std::string& s, const std::string& what);
bool parse_bool(const std::string& s, const std::string& what);

std::vector<std::string> split_ws(std::string_view s);
std::string join(const std::vector<std::string>& parts, std::string_view sep);
std::string trim(std::string_view s);

/// "key = value" lines; '#' starts a comment, blank lines are skipped.
std::map<std::string, std::string> read_kv_file(const std::string& path);
std::map<std::string, std::string> parse_kv(const std::string& text);
std::string format_kv(const std::map<std::string, std::string>& kv);

/// 64-bit FNV-1a, rendered as 16 hex digits.
std::string fnv1a_hex(std::string_view bytes);

}  // namespace treetf
