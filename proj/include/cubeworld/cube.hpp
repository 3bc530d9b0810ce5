#pragma once

// 2x2x2 cube mechanics.
//
// Sticker layout: faces in the order U, D, F, B, L, R, four stickers per face
// read row-major while looking at the face from outside the cube:
//
//   U (B edge on top)   0 UBL   1 UBR   2 UFL   3 UFR
//   D (F edge on top)   4 DFL   5 DFR   6 DBL   7 DBR
//   F (U edge on top)   8 FUL   9 FUR  10 FDL  11 FDR
//   B (U edge on top)  12 BUR  13 BUL  14 BDR  15 BDL
//   L (U edge on top)  16 LUB  17 LUF  18 LDB  19 LDF
//   R (U edge on top)  20 RUF  21 RUB  22 RDF  23 RDB
//
// Colors are named after the face they occupy in the solved state. Only U, R
// and F are turned, so the D-B-L corner (stickers 6, 15, 18) never moves and
// fixes the global orientation.

#include <array>
#include <compare>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cubeworld/error.hpp"

namespace cubeworld {

inline constexpr int kNumStickers = 24;
inline constexpr int kNumColors = 6;
inline constexpr int kNumMoves = 9;
inline constexpr std::uint32_t kNumStates = 3'674'160;  // 7! * 3^6
inline constexpr int kGodsNumber = 11;

enum class Color : std::uint8_t { U = 0, D = 1, F = 2, B = 3, L = 4, R = 5 };

constexpr int to_int(Color c) { return static_cast<int>(c); }

inline Color color_from_int(int v) {
  if (v < 0 || v >= kNumColors) throw ValidationError("color index out of range: " + std::to_string(v));
  return static_cast<Color>(v);
}

constexpr char color_char(Color c) { return "UDFBLR"[to_int(c)]; }

enum class Face : std::uint8_t { U = 0, R = 1, F = 2 };

/// One of the nine half-turn-metric moves. Ids follow U, U2, U', R, R2, R', F, F2, F'.
struct Move {
  Face face = Face::U;
  std::uint8_t turns = 1;  // clockwise quarter turns, 1..3

  constexpr int id() const { return static_cast<int>(face) * 3 + (turns - 1); }

  static constexpr Move from_id(int id) {
    return Move{static_cast<Face>(id / 3), static_cast<std::uint8_t>(id % 3 + 1)};
  }

  constexpr Move inverse() const { return Move{face, static_cast<std::uint8_t>(4 - turns)}; }

  std::string name() const {
    std::string s(1, "URF"[static_cast<int>(face)]);
    if (turns == 2) s += '2';
    if (turns == 3) s += '\'';
    return s;
  }

  friend constexpr bool operator==(Move, Move) = default;
};

inline Move parse_move(std::string_view s) {
  for (int id = 0; id < kNumMoves; ++id) {
    if (Move::from_id(id).name() == s) return Move::from_id(id);
  }
  throw ValidationError("unknown move: " + std::string(s));
}

inline constexpr std::array<Move, kNumMoves> kAllMoves = [] {
  std::array<Move, kNumMoves> a{};
  for (int i = 0; i < kNumMoves; ++i) a[i] = Move::from_id(i);
  return a;
}();

using MoveSequence = std::vector<Move>;

inline std::string to_string(std::span<const Move> moves) {
  std::string s;
  for (const auto& m : moves) {
    if (!s.empty()) s += ' ';
    s += m.name();
  }
  return s;
}

struct CubeState {
  std::array<Color, kNumStickers> stickers{};

  bool is_solved() const;
  std::string to_string() const {
    std::string s;
    for (auto c : stickers) s += color_char(c);
    return s;
  }

  friend bool operator==(const CubeState&, const CubeState&) = default;
};

constexpr CubeState solved_state() {
  CubeState s;
  for (int i = 0; i < kNumStickers; ++i) s.stickers[i] = static_cast<Color>(i / 4);
  return s;
}

inline bool CubeState::is_solved() const { return *this == solved_state(); }

/// Ordinal of a reachable state: rank(corner permutation) * 3^6 + rank(twists).
struct StateIndex {
  std::uint32_t value = 0;
  friend constexpr auto operator<=>(StateIndex, StateIndex) = default;
};

inline constexpr StateIndex kSolvedIndex{0};

namespace detail {

struct Vec3 {
  int x, y, z;
  friend constexpr bool operator==(Vec3, Vec3) = default;
};

struct StickerGeometry {
  Vec3 corner;
  Vec3 normal;
};

inline constexpr std::array<StickerGeometry, kNumStickers> kGeometry = {{
    {{-1, 1, -1}, {0, 1, 0}},   {{1, 1, -1}, {0, 1, 0}},   {{-1, 1, 1}, {0, 1, 0}},   {{1, 1, 1}, {0, 1, 0}},
    {{-1, -1, 1}, {0, -1, 0}},  {{1, -1, 1}, {0, -1, 0}},  {{-1, -1, -1}, {0, -1, 0}}, {{1, -1, -1}, {0, -1, 0}},
    {{-1, 1, 1}, {0, 0, 1}},    {{1, 1, 1}, {0, 0, 1}},    {{-1, -1, 1}, {0, 0, 1}},   {{1, -1, 1}, {0, 0, 1}},
    {{1, 1, -1}, {0, 0, -1}},   {{-1, 1, -1}, {0, 0, -1}}, {{1, -1, -1}, {0, 0, -1}},  {{-1, -1, -1}, {0, 0, -1}},
    {{-1, 1, -1}, {-1, 0, 0}},  {{-1, 1, 1}, {-1, 0, 0}},  {{-1, -1, -1}, {-1, 0, 0}}, {{-1, -1, 1}, {-1, 0, 0}},
    {{1, 1, 1}, {1, 0, 0}},     {{1, 1, -1}, {1, 0, 0}},   {{1, -1, 1}, {1, 0, 0}},    {{1, -1, -1}, {1, 0, 0}},
}};

// Clockwise quarter turn of the given face, seen from outside that face.
constexpr Vec3 rotate(Face f, Vec3 v) {
  switch (f) {
    case Face::U: return {-v.z, v.y, v.x};
    case Face::R: return {v.x, v.z, -v.y};
    case Face::F: return {v.y, -v.x, v.z};
  }
  return v;
}

constexpr bool on_face(Face f, Vec3 corner) {
  switch (f) {
    case Face::U: return corner.y == 1;
    case Face::R: return corner.x == 1;
    case Face::F: return corner.z == 1;
  }
  return false;
}

using Permutation = std::array<std::uint8_t, kNumStickers>;

// src[j] = sticker whose color lands on position j after one clockwise quarter turn.
constexpr Permutation quarter_turn_sources(Face f) {
  Permutation src{};
  for (int j = 0; j < kNumStickers; ++j) src[j] = static_cast<std::uint8_t>(j);
  for (int i = 0; i < kNumStickers; ++i) {
    const auto& g = kGeometry[i];
    if (!on_face(f, g.corner)) continue;
    const Vec3 c = rotate(f, g.corner), n = rotate(f, g.normal);
    for (int j = 0; j < kNumStickers; ++j) {
      if (kGeometry[j].corner == c && kGeometry[j].normal == n) src[j] = static_cast<std::uint8_t>(i);
    }
  }
  return src;
}

constexpr Permutation compose(const Permutation& first, const Permutation& then) {
  Permutation out{};
  for (int j = 0; j < kNumStickers; ++j) out[j] = first[then[j]];
  return out;
}

inline constexpr std::array<Permutation, kNumMoves> kMoveSources = [] {
  std::array<Permutation, kNumMoves> out{};
  for (int f = 0; f < 3; ++f) {
    const Permutation q = quarter_turn_sources(static_cast<Face>(f));
    out[f * 3] = q;
    out[f * 3 + 1] = compose(q, q);
    out[f * 3 + 2] = compose(out[f * 3 + 1], q);
  }
  return out;
}();

// Corner slots, each listed as (U/D sticker, then clockwise around the corner).
// Slots 0..6 are movable; slot 7 is the fixed D-B-L corner.
inline constexpr int kNumCorners = 8;
inline constexpr int kMovableCorners = 7;
inline constexpr std::array<std::array<std::uint8_t, 3>, kNumCorners> kCornerFacelets = {{
    {3, 20, 9},    // UFR
    {2, 8, 17},    // UFL
    {0, 16, 13},   // UBL
    {1, 12, 21},   // UBR
    {5, 11, 22},   // DFR
    {4, 19, 10},   // DFL
    {7, 23, 14},   // DBR
    {6, 15, 18},   // DBL
}};

constexpr Color solved_color(int sticker) { return static_cast<Color>(sticker / 4); }

inline constexpr int kFactorial7 = 5040;
inline constexpr int kTwistCount = 729;  // 3^6

struct Cubies {
  std::array<std::uint8_t, kMovableCorners> perm{};   // cubie in each movable slot
  std::array<std::uint8_t, kMovableCorners> twist{};  // slot holding the cubie's U/D sticker
};

inline std::uint32_t rank_permutation(const std::array<std::uint8_t, kMovableCorners>& p) {
  std::uint32_t r = 0;
  for (int i = 0; i < kMovableCorners; ++i) {
    int smaller = 0;
    for (int j = i + 1; j < kMovableCorners; ++j) smaller += p[j] < p[i];
    r = r * static_cast<std::uint32_t>(kMovableCorners - i) + static_cast<std::uint32_t>(smaller);
  }
  return r;
}

inline std::array<std::uint8_t, kMovableCorners> unrank_permutation(std::uint32_t r) {
  std::array<std::uint8_t, kMovableCorners> digits{};
  for (int i = kMovableCorners - 1; i >= 0; --i) {
    const auto base = static_cast<std::uint32_t>(kMovableCorners - i);
    digits[i] = static_cast<std::uint8_t>(r % base);
    r /= base;
  }
  std::array<std::uint8_t, kMovableCorners> p{};
  std::uint8_t used = 0;
  for (int i = 0; i < kMovableCorners; ++i) {
    int k = digits[i];
    for (std::uint8_t v = 0; v < kMovableCorners; ++v) {
      if (used & (1u << v)) continue;
      if (k-- == 0) {
        p[i] = v;
        used |= static_cast<std::uint8_t>(1u << v);
        break;
      }
    }
  }
  return p;
}

inline std::uint32_t rank_twist(const std::array<std::uint8_t, kMovableCorners>& t) {
  std::uint32_t r = 0;
  for (int i = 0; i < kMovableCorners - 1; ++i) r = r * 3 + t[i];
  return r;
}

inline std::array<std::uint8_t, kMovableCorners> unrank_twist(std::uint32_t r) {
  std::array<std::uint8_t, kMovableCorners> t{};
  int sum = 0;
  for (int i = kMovableCorners - 2; i >= 0; --i) {
    t[i] = static_cast<std::uint8_t>(r % 3);
    sum += t[i];
    r /= 3;
  }
  t[kMovableCorners - 1] = static_cast<std::uint8_t>((3 - sum % 3) % 3);
  return t;
}

inline CubeState cubies_to_stickers(const Cubies& c) {
  CubeState s;
  const auto& fixed = kCornerFacelets[kMovableCorners];
  for (int k = 0; k < 3; ++k) s.stickers[fixed[k]] = solved_color(fixed[k]);
  for (int slot = 0; slot < kMovableCorners; ++slot) {
    const auto& home = kCornerFacelets[c.perm[slot]];
    for (int k = 0; k < 3; ++k) {
      s.stickers[kCornerFacelets[slot][(k + c.twist[slot]) % 3]] = solved_color(home[k]);
    }
  }
  return s;
}

inline Cubies stickers_to_cubies(const CubeState& s) {
  std::array<int, kNumColors> counts{};
  for (auto c : s.stickers) {
    if (to_int(c) >= kNumColors) throw ValidationError("sticker color out of range");
    ++counts[to_int(c)];
  }
  for (int c = 0; c < kNumColors; ++c) {
    if (counts[c] != 4) throw ValidationError("color " + std::string(1, color_char(Color(c))) + " appears " + std::to_string(counts[c]) + " times");
  }
  for (auto f : kCornerFacelets[kMovableCorners]) {
    if (s.stickers[f] != solved_color(f)) throw ValidationError("the D-B-L corner has moved");
  }
  Cubies out;
  std::uint8_t seen = 0;
  int twist_sum = 0;
  for (int slot = 0; slot < kMovableCorners; ++slot) {
    const auto& f = kCornerFacelets[slot];
    int ud = -1;
    for (int k = 0; k < 3; ++k) {
      const Color c = s.stickers[f[k]];
      if (c == Color::U || c == Color::D) {
        if (ud >= 0) throw ValidationError("corner with two U/D stickers");
        ud = k;
      }
    }
    if (ud < 0) throw ValidationError("corner without a U/D sticker");
    int cubie = -1;
    for (int h = 0; h < kMovableCorners && cubie < 0; ++h) {
      bool match = true;
      for (int k = 0; k < 3 && match; ++k) {
        match = s.stickers[f[(k + ud) % 3]] == solved_color(kCornerFacelets[h][k]);
      }
      if (match) cubie = h;
    }
    if (cubie < 0) throw ValidationError("sticker triple does not form a valid corner");
    if (seen & (1u << cubie)) throw ValidationError("duplicate corner");
    seen |= static_cast<std::uint8_t>(1u << cubie);
    out.perm[slot] = static_cast<std::uint8_t>(cubie);
    out.twist[slot] = static_cast<std::uint8_t>(ud);
    twist_sum += ud;
  }
  if (twist_sum % 3 != 0) throw ValidationError("corner twists do not sum to zero");
  return out;
}

struct IndexMoveTables {
  std::vector<std::array<std::uint16_t, kNumMoves>> perm;
  std::vector<std::array<std::uint16_t, kNumMoves>> twist;
};

const IndexMoveTables& index_move_tables();

}  // namespace detail

inline CubeState apply_move(const CubeState& s, Move m) {
  const auto& src = detail::kMoveSources[m.id()];
  CubeState out;
  for (int j = 0; j < kNumStickers; ++j) out.stickers[j] = s.stickers[src[j]];
  return out;
}

inline CubeState apply_sequence(CubeState s, std::span<const Move> moves) {
  for (const auto& m : moves) s = apply_move(s, m);
  return s;
}

/// Throws ValidationError for sticker arrays that are not reachable with U/R/F turns.
inline StateIndex encode_index(const CubeState& s) {
  const auto c = detail::stickers_to_cubies(s);
  return StateIndex{detail::rank_permutation(c.perm) * detail::kTwistCount + detail::rank_twist(c.twist)};
}

inline CubeState decode_index(StateIndex i) {
  if (i.value >= kNumStates) throw ValidationError("state index out of range: " + std::to_string(i.value));
  detail::Cubies c;
  c.perm = detail::unrank_permutation(i.value / detail::kTwistCount);
  c.twist = detail::unrank_twist(i.value % detail::kTwistCount);
  return detail::cubies_to_stickers(c);
}

namespace detail {

inline const IndexMoveTables& index_move_tables() {
  static const IndexMoveTables tables = [] {
    IndexMoveTables t;
    t.perm.resize(kFactorial7);
    t.twist.resize(kTwistCount);
    for (std::uint32_t p = 0; p < kFactorial7; ++p) {
      const CubeState s = decode_index(StateIndex{p * kTwistCount});
      for (int m = 0; m < kNumMoves; ++m) {
        t.perm[p][m] = static_cast<std::uint16_t>(encode_index(apply_move(s, Move::from_id(m))).value / kTwistCount);
      }
    }
    // Twists are stored per slot, so their transition does not depend on the permutation.
    for (std::uint32_t o = 0; o < kTwistCount; ++o) {
      const CubeState s = decode_index(StateIndex{o});
      for (int m = 0; m < kNumMoves; ++m) {
        t.twist[o][m] = static_cast<std::uint16_t>(encode_index(apply_move(s, Move::from_id(m))).value % kTwistCount);
      }
    }
    return t;
  }();
  return tables;
}

}  // namespace detail

/// Index-level move, equivalent to encode(apply_move(decode(i), m)) but table driven.
inline StateIndex apply_move(StateIndex i, Move m) {
  const auto& t = detail::index_move_tables();
  const std::uint32_t p = i.value / detail::kTwistCount, o = i.value % detail::kTwistCount;
  return StateIndex{static_cast<std::uint32_t>(t.perm[p][m.id()]) * detail::kTwistCount + t.twist[o][m.id()]};
}

inline StateIndex apply_sequence(StateIndex i, std::span<const Move> moves) {
  for (const auto& m : moves) i = apply_move(i, m);
  return i;
}

}  // namespace cubeworld
