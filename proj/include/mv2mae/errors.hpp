#pragma once

#include <stdexcept>
#include <string>

namespace mv2mae {

/// Invalid hyperparameter or configuration value. `key()` names the setting.
class ConfigError : public std::invalid_argument {
 public:
  ConfigError(std::string key, const std::string& what)
      : std::invalid_argument(key.empty() ? what : key + ": " + what), key_(std::move(key)) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

}  // namespace mv2mae
