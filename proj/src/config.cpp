#include "texbridge/config.hpp"

#include <cctype>
#include <fstream>
#include <sstream>

#include "texbridge/errors.hpp"
#include "texbridge/hashing.hpp"

namespace texbridge {

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

// value text: quoted string, or bare token up to an inline comment
std::string parse_value(const std::string& raw, const std::string& where) {
  std::string v = trim(raw);
  if (!v.empty() && v[0] == '"') {
    size_t end = v.find('"', 1);
    if (end == std::string::npos) throw ConfigError(where + ": unterminated string");
    return v.substr(1, end - 1);
  }
  size_t hash = v.find('#');
  if (hash != std::string::npos) v = trim(v.substr(0, hash));
  if (v.empty()) throw ConfigError(where + ": empty value");
  return v;
}

std::string fmt_double(double d) {
  std::ostringstream os;
  os.precision(17);
  os << d;
  return os.str();
}

}  // namespace

Config Config::from_string(const std::string& text, const std::string& origin) {
  Config cfg;
  std::istringstream in(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string where = origin + ":" + std::to_string(lineno);
    std::string t = trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    if (t[0] == '[') {
      size_t end = t.find(']');
      if (end == std::string::npos) throw ConfigError(where + ": unterminated section header");
      section = trim(t.substr(1, end - 1));
      if (section.empty()) throw ConfigError(where + ": empty section name");
      continue;
    }
    size_t eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
    std::string key = trim(t.substr(0, eq));
    if (key.empty()) throw ConfigError(where + ": empty key");
    if (!section.empty()) key = section + "." + key;
    if (cfg.raw_.count(key)) throw ConfigError(where + ": duplicate key " + key);
    cfg.raw_[key] = parse_value(t.substr(eq + 1), where);
  }
  return cfg;
}

Config Config::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_string(ss.str(), path);
}

void Config::apply_override(const std::string& keyval) {
  size_t eq = keyval.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ConfigError("override must be key=value, got: " + keyval);
  std::string key = trim(keyval.substr(0, eq));
  std::string val = trim(keyval.substr(eq + 1));
  if (val.empty()) throw ConfigError("override has empty value: " + keyval);
  raw_[key] = val;  // overrides replace file values silently
}

std::string Config::raw_or_mark(const std::string& key, bool* present) {
  auto it = raw_.find(key);
  *present = it != raw_.end();
  if (*present) consumed_.insert(key);
  return *present ? it->second : std::string();
}

int64_t Config::get_int(const std::string& key, int64_t def) {
  bool present;
  std::string v = raw_or_mark(key, &present);
  int64_t out = def;
  if (present) {
    size_t pos = 0;
    try {
      out = std::stoll(v, &pos);
    } catch (const std::exception&) {
      throw ConfigError(key + ": expected integer, got '" + v + "'");
    }
    if (pos != v.size()) throw ConfigError(key + ": expected integer, got '" + v + "'");
  }
  resolved_[key] = std::to_string(out);
  return out;
}

double Config::get_double(const std::string& key, double def) {
  bool present;
  std::string v = raw_or_mark(key, &present);
  double out = def;
  if (present) {
    size_t pos = 0;
    try {
      out = std::stod(v, &pos);
    } catch (const std::exception&) {
      throw ConfigError(key + ": expected number, got '" + v + "'");
    }
    if (pos != v.size()) throw ConfigError(key + ": expected number, got '" + v + "'");
  }
  resolved_[key] = fmt_double(out);
  return out;
}

bool Config::get_bool(const std::string& key, bool def) {
  bool present;
  std::string v = raw_or_mark(key, &present);
  bool out = def;
  if (present) {
    if (v == "true")
      out = true;
    else if (v == "false")
      out = false;
    else
      throw ConfigError(key + ": expected true/false, got '" + v + "'");
  }
  resolved_[key] = out ? "true" : "false";
  return out;
}

std::string Config::get_string(const std::string& key, const std::string& def) {
  bool present;
  std::string v = raw_or_mark(key, &present);
  std::string out = present ? v : def;
  resolved_[key] = "\"" + out + "\"";
  return out;
}

std::string Config::resolved_echo() const {
  std::string out;
  for (const auto& [k, v] : resolved_) out += k + " = " + v + "\n";
  return out;
}

std::string Config::resolved_hash() const { return sha256_hex(resolved_echo()); }

std::string Config::resolved_echo(const std::vector<std::string>& sections) const {
  std::string out;
  for (const auto& [k, v] : resolved_)
    for (const auto& s : sections)
      if (k.rfind(s + ".", 0) == 0) {
        out += k + " = " + v + "\n";
        break;
      }
  return out;
}

void Config::require_consumed_in(const std::string& section) const {
  std::string unknown;
  for (const auto& [k, v] : raw_)
    if (k.rfind(section + ".", 0) == 0 && !consumed_.count(k))
      unknown += (unknown.empty() ? "" : ", ") + k;
  if (!unknown.empty())
    throw ConfigError("unknown config keys in [" + section + "]: " + unknown);
}

void Config::require_consumed() const {
  std::string unknown;
  for (const auto& [k, v] : raw_)
    if (!consumed_.count(k)) unknown += (unknown.empty() ? "" : ", ") + k;
  if (!unknown.empty()) throw ConfigError("unknown config keys: " + unknown);
}

}  // namespace texbridge
