#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>

#include "error.hpp"

namespace lseg {

using LabelId = std::uint8_t;

inline constexpr LabelId kBackground = 0;
inline constexpr int kNumClasses = 13;        // per hemisphere, foreground only
inline constexpr int kNumLabels = 2 * kNumClasses;  // 26 foreground ids

enum class Hemisphere : std::uint8_t { Left = 1, Right = 2 };

/// Structure class shared by both hemispheres. Values are also the channel
/// indices of the lobule network output (channel 0 = background).
enum class StructureClass : std::uint8_t {
  I_II = 1,
  III,
  IV,
  V,
  VI,
  CrusI,
  CrusII,
  VIIB,
  VIIIA,
  VIIIB,
  IX,
  X,
  WM,
};

inline constexpr std::array<std::string_view, kNumClasses> kClassNames = {
    "Lobule I-II", "Lobule III", "Lobule IV",  "Lobule V",   "Lobule VI", "Crus I", "Crus II",
    "Lobule VIIB", "Lobule VIIIA", "Lobule VIIIB", "Lobule IX", "Lobule X", "White Matter"};

inline constexpr std::array<std::string_view, kNumClasses> kClassShort = {
    "I-II", "III", "IV", "V", "VI", "CrusI", "CrusII", "VIIB", "VIIIA", "VIIIB", "IX", "X", "WM"};

struct TaxonomyEntry {
  LabelId id;
  Hemisphere hemisphere;
  StructureClass cls;
  std::string name;
};

/// The 26 foreground cerebellum labels. Left ids are 1..13 and right ids
/// 14..26, both in StructureClass order.
class LabelTaxonomy {
 public:
  LabelTaxonomy() {
    for (int h = 0; h < 2; ++h) {
      for (int c = 1; c <= kNumClasses; ++c) {
        const auto id = static_cast<LabelId>(h * kNumClasses + c);
        const auto hemi = h == 0 ? Hemisphere::Left : Hemisphere::Right;
        entries_[id - 1] = TaxonomyEntry{id, hemi, static_cast<StructureClass>(c),
                                         std::string(h == 0 ? "Left " : "Right ") +
                                             std::string(kClassNames[c - 1])};
      }
    }
  }

  static constexpr LabelId lookup(Hemisphere h, StructureClass c) {
    return static_cast<LabelId>((static_cast<int>(h) - 1) * kNumClasses + static_cast<int>(c));
  }

  /// Index form of lookup(): hemisphere in {1,2}, class in {1..13}.
  static LabelId lookup(int hemisphere, int cls) {
    if (hemisphere < 1 || hemisphere > 2 || cls < 1 || cls > kNumClasses)
      throw ArgumentError("taxonomy lookup out of range");
    return static_cast<LabelId>((hemisphere - 1) * kNumClasses + cls);
  }

  static constexpr bool is_valid(LabelId id) { return id <= kNumLabels; }

  /// Swap hemisphere, keep class. Background maps to itself.
  static constexpr LabelId mirror(LabelId id) {
    if (id == kBackground) return kBackground;
    return id <= kNumClasses ? static_cast<LabelId>(id + kNumClasses)
                             : static_cast<LabelId>(id - kNumClasses);
  }

  static constexpr Hemisphere hemisphere_of(LabelId id) {
    return id <= kNumClasses ? Hemisphere::Left : Hemisphere::Right;
  }

  static constexpr StructureClass class_of(LabelId id) {
    return static_cast<StructureClass>((id - 1) % kNumClasses + 1);
  }

  const TaxonomyEntry& entry(LabelId id) const {
    if (id == kBackground || id > kNumLabels) throw ArgumentError("not a foreground label id");
    return entries_[id - 1];
  }

  const std::array<TaxonomyEntry, kNumLabels>& entries() const { return entries_; }

 private:
  std::array<TaxonomyEntry, kNumLabels> entries_{};
};

}  // namespace lseg
