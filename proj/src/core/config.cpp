#include "core/config.hpp"

#include <cerrno>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace countlab {

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

}  // namespace

Config Config::parse_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("config: cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_text(ss.str());
}

Config Config::parse_text(const std::string& text) {
  Config cfg;
  std::istringstream in(text);
  std::string line;
  std::string section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    if (t.front() == '[') {
      if (t.back() != ']')
        throw std::runtime_error("config: bad section header at line " + std::to_string(lineno));
      section = trim(t.substr(1, t.size() - 2));
      if (section.empty())
        throw std::runtime_error("config: empty section name at line " + std::to_string(lineno));
      continue;
    }
    size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error("config: expected key=value at line " + std::to_string(lineno));
    std::string key = trim(t.substr(0, eq));
    std::string val = trim(t.substr(eq + 1));
    if (key.empty())
      throw std::runtime_error("config: empty key at line " + std::to_string(lineno));
    std::string full = section.empty() ? key : section + "." + key;
    cfg.values_[full] = val;
  }
  return cfg;
}

std::string Config::get_str(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw std::runtime_error("config: missing key " + key);
  return it->second;
}

std::string Config::get_str(const std::string& key, const std::string& fallback) const {
  auto it = values_.find(key);
  return it == values_.end() ? fallback : it->second;
}

int64_t Config::get_int(const std::string& key) const {
  std::string v = get_str(key);
  errno = 0;
  char* end = nullptr;
  long long r = std::strtoll(v.c_str(), &end, 10);
  if (errno != 0 || end == v.c_str() || *end != '\0')
    throw std::runtime_error("config: key " + key + " is not an integer: " + v);
  return r;
}

int64_t Config::get_int(const std::string& key, int64_t fallback) const {
  return has(key) ? get_int(key) : fallback;
}

double Config::get_real(const std::string& key) const {
  std::string v = get_str(key);
  errno = 0;
  char* end = nullptr;
  double r = std::strtod(v.c_str(), &end);
  if (errno != 0 || end == v.c_str() || *end != '\0')
    throw std::runtime_error("config: key " + key + " is not a number: " + v);
  return r;
}

double Config::get_real(const std::string& key, double fallback) const {
  return has(key) ? get_real(key) : fallback;
}

bool Config::get_bool(const std::string& key, bool fallback) const {
  if (!has(key)) return fallback;
  std::string v = get_str(key);
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw std::runtime_error("config: key " + key + " is not a boolean: " + v);
}

void Config::set_int(const std::string& key, int64_t value) {
  values_[key] = std::to_string(value);
}

void Config::set_real(const std::string& key, double value) {
  std::ostringstream ss;
  ss.precision(17);
  ss << value;
  values_[key] = ss.str();
}

std::string Config::to_text() const {
  std::ostringstream out;
  std::string current;
  bool first = true;
  for (const auto& [key, val] : values_) {
    size_t dot = key.rfind('.');
    std::string section = dot == std::string::npos ? "" : key.substr(0, dot);
    std::string leaf = dot == std::string::npos ? key : key.substr(dot + 1);
    if (section != current || first) {
      if (!first) out << "\n";
      if (!section.empty()) out << "[" << section << "]\n";
      current = section;
      first = false;
    }
    out << leaf << " = " << val << "\n";
  }
  return out.str();
}

void Config::write_file(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("config: cannot write " + path);
  out << to_text();
}

}  // namespace countlab
