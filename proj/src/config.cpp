#include "egc/config.hpp"

#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace egc {

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

}  // namespace

KeyValueConfig KeyValueConfig::parse_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open config file '" + path + "'");
  KeyValueConfig cfg;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::runtime_error("config '" + path + "' line " +
                               std::to_string(lineno) + ": expected key = value");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) {
      throw std::runtime_error("config '" + path + "' line " +
                               std::to_string(lineno) + ": empty key");
    }
    cfg.values_[key] = value;  // last assignment wins
  }
  return cfg;
}

void KeyValueConfig::set_from_token(const std::string& token) {
  const auto eq = token.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw std::invalid_argument("expected key=value, got '" + token + "'");
  }
  set(trim(token.substr(0, eq)), trim(token.substr(eq + 1)));
}

void KeyValueConfig::set(const std::string& key, const std::string& value) {
  values_[key] = value;
}

bool KeyValueConfig::has(const std::string& key) const {
  return values_.count(key) != 0;
}

std::string KeyValueConfig::get_string(const std::string& key,
                                       const std::string& fallback) {
  auto it = values_.find(key);
  const std::string v = (it != values_.end()) ? it->second : fallback;
  if (it != values_.end()) consumed_.insert(key);
  resolved_[key] = v;
  return v;
}

double KeyValueConfig::get_double(const std::string& key, double fallback) {
  auto it = values_.find(key);
  double v = fallback;
  if (it != values_.end()) {
    try {
      std::size_t pos = 0;
      v = std::stod(it->second, &pos);
      if (pos != it->second.size()) throw std::invalid_argument("");
    } catch (...) {
      throw std::runtime_error("config key '" + key + "': invalid number '" +
                               it->second + "'");
    }
    consumed_.insert(key);
  }
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  resolved_[key] = buf;
  return v;
}

std::size_t KeyValueConfig::get_size(const std::string& key, std::size_t fallback) {
  return static_cast<std::size_t>(get_u64(key, fallback));
}

std::uint64_t KeyValueConfig::get_u64(const std::string& key,
                                      std::uint64_t fallback) {
  auto it = values_.find(key);
  std::uint64_t v = fallback;
  if (it != values_.end()) {
    try {
      std::size_t pos = 0;
      v = std::stoull(it->second, &pos);
      if (pos != it->second.size()) throw std::invalid_argument("");
    } catch (...) {
      throw std::runtime_error("config key '" + key + "': invalid integer '" +
                               it->second + "'");
    }
    consumed_.insert(key);
  }
  resolved_[key] = std::to_string(v);
  return v;
}

bool KeyValueConfig::get_bool(const std::string& key, bool fallback) {
  auto it = values_.find(key);
  bool v = fallback;
  if (it != values_.end()) {
    const std::string& s = it->second;
    if (s == "true" || s == "1" || s == "yes") v = true;
    else if (s == "false" || s == "0" || s == "no") v = false;
    else throw std::runtime_error("config key '" + key + "': invalid boolean '" + s + "'");
    consumed_.insert(key);
  }
  resolved_[key] = v ? "true" : "false";
  return v;
}

void KeyValueConfig::require_all_consumed() const {
  for (const auto& [key, value] : values_) {
    if (!consumed_.count(key)) {
      throw std::runtime_error("unknown config key '" + key + "'");
    }
  }
}

std::string KeyValueConfig::resolved_text() const {
  std::string out;
  for (const auto& [key, value] : resolved_) {
    out += key;
    out += " = ";
    out += value;
    out += '\n';
  }
  return out;
}

}  // namespace egc
