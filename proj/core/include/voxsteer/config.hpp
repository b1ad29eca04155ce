#pragma once

#include <map>
#include <string>
#include <vector>

#include "voxsteer/errors.hpp"

namespace voxsteer {

struct KeySpec {
  const char* name;
  const char* def;
  const char* help;
};

// Every configuration key consumed anywhere in the project. Reads of
// unregistered keys are contract errors, and unknown keys in files or
// overrides are startup errors, so typos cannot pass silently.
const std::vector<KeySpec>& config_registry();

class RunConfig {
 public:
  // Precedence: built-in default < config file < explicit override.
  // `file` may be empty; the VOXSTEER_CONFIG environment variable supplies a
  // default path when set.
  static RunConfig load(const std::string& file,
                        const std::vector<std::pair<std::string, std::string>>& overrides);

  std::string get(const std::string& key) const;
  int64_t get_int(const std::string& key) const;
  double get_double(const std::string& key) const;
  bool get_bool(const std::string& key) const;

  void set(const std::string& key, const std::string& value);  // registered keys only
  bool overridden(const std::string& key) const { return values_.count(key) != 0; }

  // Flat key=value dump of the effective configuration (defaults included).
  std::string dump() const;
  uint64_t hash() const;

  static std::string help_text();

 private:
  std::map<std::string, std::string> values_;
};

// Parses "key=value" (used by --set and config files).
std::pair<std::string, std::string> parse_kv(const std::string& line);

}  // namespace voxsteer
