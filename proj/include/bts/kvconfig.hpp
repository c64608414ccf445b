#pragma once

#include <charconv>
#include <cstdint>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>

#include "bts/common.hpp"

// Shared helpers for the whitespace-separated key=value config format used by
// checkpoints, training configs and the command-line tools. Values are written
// with std::to_chars (shortest round-trippable form) and parsed with
// std::from_chars, so save -> load -> save is byte-stable.
namespace bts::kvcfg {

inline std::string fmt_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline int parse_int(const std::string& key, const std::string& val) {
  int out = 0;
  auto res = std::from_chars(val.data(), val.data() + val.size(), out);
  require(res.ec == std::errc() && res.ptr == val.data() + val.size(),
          "config key '" + key + "' has non-integer value '" + val + "'");
  return out;
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& val) {
  std::uint64_t out = 0;
  auto res = std::from_chars(val.data(), val.data() + val.size(), out);
  require(res.ec == std::errc() && res.ptr == val.data() + val.size(),
          "config key '" + key + "' has non-integer value '" + val + "'");
  return out;
}

inline double parse_double(const std::string& key, const std::string& val) {
  double out = 0.0;
  auto res = std::from_chars(val.data(), val.data() + val.size(), out);
  require(res.ec == std::errc() && res.ptr == val.data() + val.size(),
          "config key '" + key + "' has non-numeric value '" + val + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& val) {
  if (val == "true" || val == "1") return true;
  if (val == "false" || val == "0") return false;
  throw std::invalid_argument("config key '" + key + "' has non-boolean value '" + val +
                              "' (expected true/false)");
}

// Splits `text` into key=value tokens, rejecting malformed entries and
// duplicate keys, and calls fn(key, value) for each one.
template <class Fn>
inline void for_each_entry(const std::string& text, Fn&& fn) {
  std::istringstream is(text);
  std::string tok;
  std::set<std::string> seen;
  while (is >> tok) {
    const size_t eq = tok.find('=');
    require(eq != std::string::npos && eq > 0 && eq + 1 < tok.size(),
            "malformed config entry '" + tok + "' (expected key=value)");
    const std::string key = tok.substr(0, eq);
    const std::string val = tok.substr(eq + 1);
    require(seen.insert(key).second, "duplicate config key '" + key + "'");
    fn(key, val);
  }
}

}  // namespace bts::kvcfg
