#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <bit>
#include <cstdint>
#include <filesystem>
#include <random>
#include <thread>
#include <vector>

#include "cubeworld/binary_io.hpp"
#include "cubeworld/cube.hpp"

namespace cubeworld {

using Rng = std::mt19937_64;

/// Exact optimal (half-turn metric) distance of every reachable state.
class DistanceTable {
 public:
  static constexpr std::uint32_t kFileVersion = 1;
  static constexpr std::uint8_t kUnvisited = 0xFF;

  /// Level-synchronous BFS from solved. Each level is a pull sweep over the
  /// still-unvisited states, so any thread count yields the same bytes.
  static DistanceTable build(int threads = 1) {
    DistanceTable t;
    t.dist_.assign(kNumStates, kUnvisited);
    t.dist_[kSolvedIndex.value] = 0;
    threads = std::max(1, threads);
    for (std::uint8_t depth = 0;; ++depth) {
      std::atomic<std::uint64_t> added{0};
      auto sweep = [&](std::uint32_t lo, std::uint32_t hi) {
        std::uint64_t local = 0;
        for (std::uint32_t s = lo; s < hi; ++s) {
          std::atomic_ref<std::uint8_t> cell(t.dist_[s]);
          if (cell.load(std::memory_order_relaxed) != kUnvisited) continue;
          for (const auto& m : kAllMoves) {
            const auto n = apply_move(StateIndex{s}, m).value;
            if (std::atomic_ref<std::uint8_t>(t.dist_[n]).load(std::memory_order_relaxed) == depth) {
              cell.store(static_cast<std::uint8_t>(depth + 1), std::memory_order_relaxed);
              ++local;
              break;
            }
          }
        }
        added += local;
      };
      if (threads == 1) {
        sweep(0, kNumStates);
      } else {
        std::vector<std::jthread> pool;
        const std::uint32_t chunk = (kNumStates + threads - 1) / threads;
        for (int w = 0; w < threads; ++w) {
          const std::uint32_t lo = std::min<std::uint32_t>(kNumStates, chunk * w);
          const std::uint32_t hi = std::min<std::uint32_t>(kNumStates, lo + chunk);
          pool.emplace_back(sweep, lo, hi);
        }
      }
      if (added == 0) break;
    }
    return t;
  }

  static DistanceTable load(const std::filesystem::path& path) {
    io::Reader r(path);
    r.expect_magic("CUBEDIST");
    if (auto v = r.pod<std::uint32_t>(); v != kFileVersion) {
      throw FormatError(path.string() + ": unsupported distance table version " + std::to_string(v));
    }
    if (auto n = r.pod<std::uint32_t>(); n != kNumStates) {
      throw FormatError(path.string() + ": unexpected state count " + std::to_string(n));
    }
    DistanceTable t;
    t.dist_.resize(kNumStates);
    r.array(std::span<std::uint8_t>(t.dist_));
    r.expect_eof();
    for (auto d : t.dist_) {
      if (d > kGodsNumber) throw FormatError(path.string() + ": distance out of range");
    }
    return t;
  }

  void save(const std::filesystem::path& path) const {
    io::Writer w(path);
    w.magic("CUBEDIST");
    w.pod(kFileVersion);
    w.pod(kNumStates);
    w.array(std::span<const std::uint8_t>(dist_));
    w.commit();
  }

  int at(StateIndex i) const { return dist_[i.value]; }
  int distance(const CubeState& s) const { return at(encode_index(s)); }

  std::array<std::uint64_t, kGodsNumber + 1> histogram() const {
    std::array<std::uint64_t, kGodsNumber + 1> h{};
    for (auto d : dist_) ++h[d];
    return h;
  }

  int max_depth() const { return *std::max_element(dist_.begin(), dist_.end()); }

  std::span<const std::uint8_t> bytes() const { return dist_; }

  /// Bit m set iff move id m lowers the distance by one.
  std::uint16_t good_move_mask(StateIndex i) const {
    const int d = at(i);
    std::uint16_t mask = 0;
    if (d == 0) return mask;
    for (const auto& m : kAllMoves) {
      if (at(apply_move(i, m)) == d - 1) mask |= static_cast<std::uint16_t>(1u << m.id());
    }
    return mask;
  }

  std::vector<Move> good_moves(StateIndex i) const {
    std::vector<Move> out;
    const auto mask = good_move_mask(i);
    for (const auto& m : kAllMoves) {
      if (mask & (1u << m.id())) out.push_back(m);
    }
    return out;
  }
  std::vector<Move> good_moves(const CubeState& s) const { return good_moves(encode_index(s)); }

 private:
  std::vector<std::uint8_t> dist_;
};

enum class TiePolicy { kFirstInMoveOrder, kSeededUniform };

/// Greedy descent through the table. With kSeededUniform each step picks
/// uniformly among the good moves using `rng`.
inline MoveSequence optimal_solution(const DistanceTable& t, StateIndex i, TiePolicy policy = TiePolicy::kFirstInMoveOrder,
                                     Rng* rng = nullptr) {
  MoveSequence out;
  out.reserve(static_cast<std::size_t>(t.at(i)));
  while (t.at(i) > 0) {
    const auto mask = t.good_move_mask(i);
    int pick = std::countr_zero(static_cast<unsigned>(mask));
    if (policy == TiePolicy::kSeededUniform) {
      if (rng == nullptr) throw Error("seeded tie policy requires an rng");
      const int n = std::popcount(static_cast<unsigned>(mask));
      int k = std::uniform_int_distribution<int>(0, n - 1)(*rng);
      for (int m = 0; m < kNumMoves; ++m) {
        if ((mask & (1u << m)) && k-- == 0) {
          pick = m;
          break;
        }
      }
    }
    const Move m = Move::from_id(pick);
    out.push_back(m);
    i = apply_move(i, m);
  }
  return out;
}

inline MoveSequence optimal_solution(const DistanceTable& t, const CubeState& s, TiePolicy policy = TiePolicy::kFirstInMoveOrder,
                                     Rng* rng = nullptr) {
  return optimal_solution(t, encode_index(s), policy, rng);
}

inline StateIndex random_index(Rng& rng) {
  return StateIndex{std::uniform_int_distribution<std::uint32_t>(0, kNumStates - 1)(rng)};
}

inline CubeState random_state(std::uint64_t seed) {
  Rng rng(seed);
  return decode_index(random_index(rng));
}

inline Move random_move(Rng& rng) { return Move::from_id(std::uniform_int_distribution<int>(0, kNumMoves - 1)(rng)); }

inline CubeState scramble(std::uint64_t seed, int k) {
  Rng rng(seed);
  CubeState s = solved_state();
  for (int i = 0; i < k; ++i) s = apply_move(s, random_move(rng));
  return s;
}

}  // namespace cubeworld
