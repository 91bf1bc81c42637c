#pragma once

// Strict JSON object reading for configuration files: every key must be
// known, every value must have the expected type.

#include <set>
#include <string>
#include <utility>

#include "json.hpp"
#include "w2r2/error.hpp"

namespace w2r2 {

class StrictObject {
 public:
  StrictObject(const nlohmann::json& j, std::string context) : j_(j), context_(std::move(context)) {
    if (!j_.is_object()) throw ConfigError(context_ + ": expected a JSON object");
  }

  // Leaves `out` untouched when the key is absent.
  template <class T>
  StrictObject& get(const char* key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return *this;
    try {
      if constexpr (std::is_floating_point_v<T>) {
        if (!it->is_number()) throw ConfigError("not a number");
      } else if constexpr (std::is_integral_v<T> && !std::is_same_v<T, bool>) {
        if (!it->is_number_integer()) throw ConfigError("not an integer");
        if constexpr (std::is_unsigned_v<T>) {
          if (it->is_number_integer() && !it->is_number_unsigned() && it->template get<long long>() < 0)
            throw ConfigError("must not be negative");
        }
      } else if constexpr (std::is_same_v<T, bool>) {
        if (!it->is_boolean()) throw ConfigError("not a boolean");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!it->is_string()) throw ConfigError("not a string");
      }
      out = it->template get<T>();
    } catch (const ConfigError& e) {
      throw ConfigError(context_ + ": key '" + key + "' " + e.what());
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(context_ + ": key '" + key + "': " + e.what());
    }
    return *this;
  }

  // Throws on any key that no get() asked for.
  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError(context_ + ": unknown key '" + it.key() + "'");
  }

 private:
  const nlohmann::json& j_;
  std::string context_;
  std::set<std::string> seen_;
};

}  // namespace w2r2
