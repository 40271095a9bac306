#pragma once

#include <array>
#include <optional>
#include <string>
#include <string_view>

namespace gridner {

// The nine CMeEE entity categories, in canonical id order.
enum class EntityType : int {
  kBod = 0,
  kDis = 1,
  kSym = 2,
  kPro = 3,
  kEqu = 4,
  kDru = 5,
  kIte = 6,
  kDep = 7,
  kMic = 8,
};

inline constexpr int kNumEntityTypes = 9;

inline constexpr std::array<std::string_view, kNumEntityTypes> kEntityTypeNames =
    {"bod", "dis", "sym", "pro", "equ", "dru", "ite", "dep", "mic"};

inline std::string_view type_name(EntityType t) {
  return kEntityTypeNames[static_cast<size_t>(t)];
}

inline std::optional<EntityType> type_from_name(std::string_view name) {
  for (int i = 0; i < kNumEntityTypes; ++i) {
    if (kEntityTypeNames[static_cast<size_t>(i)] == name)
      return static_cast<EntityType>(i);
  }
  return std::nullopt;
}

}  // namespace gridner
