#pragma once

#include <cstdint>
#include <map>
#include <string>

namespace countlab {

// Flat key-value config with [section] headers. Keys are stored as
// "section.key". Values keep their text form; typed getters parse on
// access and reject malformed input.
class Config {
 public:
  static Config parse_file(const std::string& path);
  static Config parse_text(const std::string& text);

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  std::string get_str(const std::string& key) const;
  std::string get_str(const std::string& key, const std::string& fallback) const;
  int64_t get_int(const std::string& key) const;
  int64_t get_int(const std::string& key, int64_t fallback) const;
  double get_real(const std::string& key) const;
  double get_real(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;

  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  void set_int(const std::string& key, int64_t value);
  void set_real(const std::string& key, double value);

  // Serialized form groups keys back into sections, sorted for stable output.
  std::string to_text() const;
  void write_file(const std::string& path) const;

  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace countlab
