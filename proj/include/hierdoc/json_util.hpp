#pragma once

#include <initializer_list>
#include <stdexcept>
#include <string>
#include <string_view>

#include <json.hpp>

namespace hierdoc {

// Invalid configuration; the message starts with the dotted field path.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// j[key] converted to T, or `fallback` when absent.
template <typename T>
T json_field(const nlohmann::json& j, std::string_view key, T fallback, std::string_view prefix) {
  const auto it = j.find(key);
  if (it == j.end()) return fallback;
  const std::string path = std::string(prefix) + "." + std::string(key);
  if constexpr (std::is_same_v<T, bool>) {
    if (!it->is_boolean()) throw ConfigError(path + ": expected a boolean");
  } else if constexpr (std::is_integral_v<T>) {
    if (!it->is_number_integer()) throw ConfigError(path + ": expected an integer");
    if constexpr (std::is_unsigned_v<T>) {
      if (it->is_number_integer() && !it->is_number_unsigned() && it->template get<long long>() < 0) {
        throw ConfigError(path + ": must not be negative");
      }
    }
  } else if constexpr (std::is_floating_point_v<T>) {
    if (!it->is_number()) throw ConfigError(path + ": expected a number");
  } else if constexpr (std::is_same_v<T, std::string>) {
    if (!it->is_string()) throw ConfigError(path + ": expected a string");
  }
  try {
    return it->template get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

inline void require_object(const nlohmann::json& j, std::string_view prefix) {
  if (!j.is_object()) throw ConfigError(std::string(prefix) + ": expected a JSON object");
}

inline void reject_unknown_keys(const nlohmann::json& j, std::string_view prefix,
                                std::initializer_list<std::string_view> known) {
  require_object(j, prefix);
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (auto k : known) ok = ok || k == key;
    if (!ok) throw ConfigError(std::string(prefix) + "." + key + ": unknown field");
  }
}

}  // namespace hierdoc
