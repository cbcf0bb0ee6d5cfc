#pragma once

#include <array>
#include <cstdint>
#include <vector>

namespace rtgen {

using TokenId = std::int32_t;
using TokenSequence = std::vector<TokenId>;

inline constexpr TokenId kPadToken = 0;
inline constexpr TokenId kEndToken = 1;

/// Normalized (cx, cy, w, h).
using BoxCxcywh = std::array<double, 4>;
/// Corner form (x1, y1, x2, y2).
using BoxXyxy = std::array<double, 4>;

inline BoxXyxy to_xyxy(const BoxCxcywh& b) {
  return {b[0] - 0.5 * b[2], b[1] - 0.5 * b[3], b[0] + 0.5 * b[2], b[1] + 0.5 * b[3]};
}

inline BoxCxcywh to_cxcywh(const BoxXyxy& b) {
  return {0.5 * (b[0] + b[2]), 0.5 * (b[1] + b[3]), b[2] - b[0], b[3] - b[1]};
}

}  // namespace rtgen
