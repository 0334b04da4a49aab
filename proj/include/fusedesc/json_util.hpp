#pragma once

#include <initializer_list>
#include <string>
#include <string_view>

#include <json.hpp>

#include "fusedesc/errors.hpp"

namespace fusedesc {

using Json = nlohmann::json;

namespace json_util {

// Rejects keys outside `allowed`; config documents are strict.
inline void reject_unknown_keys(const Json& j, std::initializer_list<std::string_view> allowed,
                                std::string_view where) {
  if (!j.is_object()) throw ConfigError(std::string(where) + ": expected a JSON object");
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (auto a : allowed) ok = ok || key == a;
    if (!ok) throw ConfigError(std::string(where) + ": unknown key \"" + key + "\"");
  }
}

template <class V>
void read(const Json& j, const char* key, V& out, std::string_view where) {
  auto it = j.find(key);
  if (it == j.end()) return;
  try {
    out = it->template get<V>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(std::string(where) + ": bad type for \"" + key + "\"");
  }
}

// Unsigned counts arrive as JSON numbers; negative values must not wrap.
template <class V>
void read_count(const Json& j, const char* key, V& out, std::string_view where) {
  auto it = j.find(key);
  if (it == j.end()) return;
  if (!it->is_number_integer() || it->template get<long long>() < 0) {
    throw ConfigError(std::string(where) + ": \"" + key + "\" must be a non-negative integer");
  }
  out = it->template get<V>();
}

}  // namespace json_util
}  // namespace fusedesc
