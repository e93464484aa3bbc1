#pragma once

#include <cstdio>
#include <stdexcept>
#include <string>

#include "json.hpp"

#include "vigraph/types.hpp"

namespace vigraph::jsonutil {

using nlohmann::json;

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("bad value for '") + key + "': " + e.what());
  }
}

inline json vec3(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }

inline Vec3 to_vec3(const json& j, const char* what) {
  if (!j.is_array() || j.size() != 3) {
    throw std::invalid_argument(std::string(what) + " must be an array of 3 numbers");
  }
  try {
    return Vec3(j[0].get<double>(), j[1].get<double>(), j[2].get<double>());
  } catch (const json::exception&) {
    throw std::invalid_argument(std::string(what) + " must be an array of 3 numbers");
  }
}

inline void read_vec3(const json& j, const char* key, Vec3& out) {
  if (j.contains(key)) out = to_vec3(j.at(key), key);
}

inline json object_or_empty(const json& j, const char* key) {
  if (!j.contains(key)) return json::object();
  if (!j.at(key).is_object()) {
    throw std::invalid_argument(std::string("'") + key + "' must be an object");
  }
  return j.at(key);
}

/// %.17g, so doubles round-trip through text.
inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace vigraph::jsonutil
