#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "cubeworld/distance_table.hpp"

namespace cw = cubeworld;
using cw::CubeState;
using cw::Move;

namespace {

const cw::DistanceTable& table() {
  static const cw::DistanceTable t = cw::DistanceTable::build();
  return t;
}

Move mv(const char* name) { return cw::parse_move(name); }

// Hand-written cycle listings: each cycle (a b c d) means the color on sticker a
// moves to sticker b, b to c, and so on. Written from the sticker layout diagram,
// independently of the geometric derivation used by the library.
using Cycles = std::vector<std::vector<int>>;

CubeState apply_cycles(const CubeState& s, const Cycles& cycles) {
  CubeState out = s;
  for (const auto& c : cycles) {
    for (std::size_t k = 0; k < c.size(); ++k) out.stickers[c[(k + 1) % c.size()]] = s.stickers[c[k]];
  }
  return out;
}

const Cycles kUCycles = {{0, 1, 3, 2}, {8, 16, 12, 20}, {9, 17, 13, 21}};
const Cycles kRCycles = {{20, 21, 23, 22}, {9, 1, 14, 5}, {11, 3, 12, 7}};
const Cycles kFCycles = {{8, 9, 11, 10}, {2, 20, 5, 19}, {3, 22, 4, 17}};

// A state where every sticker has a distinct label, so permutations are fully visible.
CubeState labelled() {
  CubeState s;
  for (int i = 0; i < cw::kNumStickers; ++i) s.stickers[i] = static_cast<cw::Color>(i);
  return s;
}

}  // namespace

TEST(Color, RoundTripsThroughIndex) {
  std::set<int> seen;
  for (int i = 0; i < cw::kNumColors; ++i) {
    EXPECT_EQ(cw::to_int(cw::color_from_int(i)), i);
    seen.insert(cw::color_char(cw::color_from_int(i)));
  }
  EXPECT_EQ(seen.size(), 6u);
  EXPECT_THROW(cw::color_from_int(6), cw::ValidationError);
}

TEST(MoveAlphabet, NineDistinctMovesWithInverses) {
  std::set<std::string> names;
  for (const auto& m : cw::kAllMoves) {
    names.insert(m.name());
    EXPECT_EQ(Move::from_id(m.id()), m);
    EXPECT_EQ(cw::parse_move(m.name()), m);
    if (m.turns == 2) {
      EXPECT_EQ(m.inverse(), m);
    } else {
      EXPECT_EQ(m.inverse().turns, 4 - m.turns);
    }
  }
  EXPECT_EQ(names.size(), 9u);
  EXPECT_EQ(cw::to_string(std::vector<Move>(cw::kAllMoves.begin(), cw::kAllMoves.end())), "U U2 U' R R2 R' F F2 F'");
  EXPECT_THROW(cw::parse_move("D"), cw::ValidationError);
}

TEST(CubeState, SolvedHasUniformFaces) {
  const auto s = cw::solved_state();
  EXPECT_TRUE(s.is_solved());
  for (int f = 0; f < 6; ++f) {
    for (int k = 0; k < 4; ++k) EXPECT_EQ(cw::to_int(s.stickers[f * 4 + k]), f);
  }
  EXPECT_EQ(s.to_string(), "UUUUDDDDFFFFBBBBLLLLRRRR");
}

TEST(ApplyMove, QuarterTurnsMatchHandWrittenCycles) {
  const auto s = labelled();
  EXPECT_EQ(cw::apply_move(s, mv("U")), apply_cycles(s, kUCycles));
  EXPECT_EQ(cw::apply_move(s, mv("R")), apply_cycles(s, kRCycles));
  EXPECT_EQ(cw::apply_move(s, mv("F")), apply_cycles(s, kFCycles));
}

TEST(ApplyMove, UOnSolvedState) {
  // Front top row takes the right face's colors, left takes front's, and so on.
  EXPECT_EQ(cw::apply_move(cw::solved_state(), mv("U")).to_string(), "UUUUDDDDRRFFLLBBFFLLBBRR");
}

TEST(ApplyMove, GroupLaws) {
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const auto s = cw::random_state(seed);
    for (const auto& m : cw::kAllMoves) {
      EXPECT_EQ(cw::apply_move(cw::apply_move(s, m), m.inverse()), s);
      if (m.turns == 1) {
        CubeState r = s;
        for (int k = 0; k < 4; ++k) r = cw::apply_move(r, m);
        EXPECT_EQ(r, s);
        const Move half{m.face, 2};
        EXPECT_EQ(cw::apply_move(s, half), cw::apply_move(cw::apply_move(s, m), m));
      }
    }
  }
  // U and R do not commute.
  const auto s = cw::solved_state();
  EXPECT_NE(cw::apply_sequence(s, std::vector{mv("U"), mv("R")}), cw::apply_sequence(s, std::vector{mv("R"), mv("U")}));
}

TEST(ApplyMove, PureAndInvariantPreserving) {
  cw::Rng rng(7);
  CubeState s = cw::solved_state();
  for (int step = 0; step < 1000; ++step) {
    const CubeState before = s;
    const auto m = cw::random_move(rng);
    const auto next = cw::apply_move(s, m);
    EXPECT_EQ(s, before);
    s = next;
    std::array<int, 6> counts{};
    for (auto c : s.stickers) ++counts[cw::to_int(c)];
    for (int c : counts) ASSERT_EQ(c, 4);
    ASSERT_EQ(s.stickers[6], cw::Color::D);
    ASSERT_EQ(s.stickers[15], cw::Color::B);
    ASSERT_EQ(s.stickers[18], cw::Color::L);
  }
}

TEST(ApplySequence, FoldsMoves) {
  const auto s = cw::random_state(3);
  EXPECT_EQ(cw::apply_sequence(s, std::vector<Move>{}), s);
  EXPECT_EQ(cw::apply_sequence(cw::solved_state(), std::vector{mv("U"), mv("U'")}), cw::solved_state());
}

TEST(StateIndex, SolvedIsZero) { EXPECT_EQ(cw::encode_index(cw::solved_state()), cw::kSolvedIndex); }

TEST(StateIndex, RandomRoundTrip) {
  for (std::uint64_t seed = 0; seed < 10000; ++seed) {
    const auto s = cw::random_state(seed);
    ASSERT_EQ(cw::decode_index(cw::encode_index(s)), s);
  }
}

TEST(StateIndex, FullSpaceIsABijection) {
  // encode(decode(i)) == i for every index implies decode is injective.
  for (std::uint32_t i = 0; i < cw::kNumStates; ++i) {
    ASSERT_EQ(cw::encode_index(cw::decode_index(cw::StateIndex{i})).value, i);
  }
  EXPECT_THROW(cw::decode_index(cw::StateIndex{cw::kNumStates}), cw::ValidationError);
}

TEST(StateIndex, IndexMovesAgreeWithStickerMoves) {
  for (std::uint64_t seed = 0; seed < 2000; ++seed) {
    const auto s = cw::random_state(seed);
    const auto i = cw::encode_index(s);
    for (const auto& m : cw::kAllMoves) ASSERT_EQ(cw::apply_move(i, m), cw::encode_index(cw::apply_move(s, m)));
  }
}

TEST(StateIndex, RejectsUnreachableStickers) {
  auto s = cw::solved_state();
  s.stickers[0] = cw::Color::R;  // five R, three U
  EXPECT_THROW(cw::encode_index(s), cw::ValidationError);

  // Swap two stickers of the fixed corner's neighbourhood: D-B-L corner changed.
  s = cw::solved_state();
  std::swap(s.stickers[6], s.stickers[7]);
  std::swap(s.stickers[15], s.stickers[14]);
  std::swap(s.stickers[18], s.stickers[23]);
  EXPECT_THROW(cw::encode_index(s), cw::ValidationError);

  // Twist a single corner in place: twist sum no longer divisible by 3.
  s = cw::solved_state();
  const auto u = s.stickers[3], r = s.stickers[20], f = s.stickers[9];
  s.stickers[3] = f;
  s.stickers[20] = u;
  s.stickers[9] = r;
  EXPECT_THROW(cw::encode_index(s), cw::ValidationError);

  // Mirror a corner (swap two of its stickers): not a real corner.
  s = cw::solved_state();
  std::swap(s.stickers[20], s.stickers[9]);
  EXPECT_THROW(cw::encode_index(s), cw::ValidationError);
}

// Independent breadth-first enumeration on sticker states up to depth 4.
TEST(DistanceTable, ShallowLevelsMatchStickerEnumeration) {
  std::set<std::string> seen{cw::solved_state().to_string()};
  std::vector<CubeState> frontier{cw::solved_state()};
  std::vector<std::uint64_t> counts{1};
  for (int depth = 1; depth <= 4; ++depth) {
    std::vector<CubeState> next;
    for (const auto& s : frontier) {
      for (const auto& m : cw::kAllMoves) {
        const auto n = cw::apply_move(s, m);
        if (seen.insert(n.to_string()).second) next.push_back(n);
      }
    }
    counts.push_back(next.size());
    for (const auto& s : next) ASSERT_EQ(table().distance(s), depth);
    frontier = std::move(next);
  }
  const auto h = table().histogram();
  for (int d = 0; d <= 4; ++d) EXPECT_EQ(h[d], counts[d]);
}

TEST(DistanceTable, FullHistogram) {
  const std::array<std::uint64_t, 12> expected = {1, 9, 54, 321, 1847, 9992, 50136, 227536, 870072, 1887748, 623800, 2644};
  EXPECT_EQ(table().histogram(), expected);
  std::uint64_t total = 0;
  for (auto v : expected) total += v;
  EXPECT_EQ(total, cw::kNumStates);
  EXPECT_EQ(table().max_depth(), 11);
}

TEST(DistanceTable, ParallelBuildIsByteIdentical) {
  const auto par = cw::DistanceTable::build(4);
  EXPECT_TRUE(std::ranges::equal(par.bytes(), table().bytes()));
}

TEST(DistanceTable, LipschitzAndDescentOverAllEdges) {
  const auto& t = table();
  for (std::uint32_t i = 0; i < cw::kNumStates; ++i) {
    const cw::StateIndex s{i};
    const int d = t.at(s);
    bool has_descent = false;
    for (const auto& m : cw::kAllMoves) {
      const int dn = t.at(cw::apply_move(s, m));
      ASSERT_LE(std::abs(d - dn), 1);
      has_descent |= dn == d - 1;
    }
    ASSERT_EQ(has_descent, d > 0);
  }
}

TEST(DistanceTable, Distances) {
  const auto& t = table();
  EXPECT_EQ(t.distance(cw::solved_state()), 0);
  EXPECT_EQ(t.distance(cw::apply_move(cw::solved_state(), mv("U"))), 1);
  for (std::uint64_t seed = 0; seed < 100; ++seed) EXPECT_LE(t.distance(cw::scramble(seed, 20)), 11);
}

TEST(DistanceTable, FileRoundTripAndRejection) {
  const auto dir = std::filesystem::temp_directory_path() / "cubeworld_cube_test";
  std::filesystem::create_directories(dir);
  const auto path = dir / "dist.bin";
  table().save(path);
  EXPECT_EQ(std::filesystem::file_size(path), 16u + cw::kNumStates);
  const auto loaded = cw::DistanceTable::load(path);
  EXPECT_TRUE(std::ranges::equal(loaded.bytes(), table().bytes()));

  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.put('X');
  }
  EXPECT_THROW(cw::DistanceTable::load(path), cw::FormatError);
  table().save(path);
  std::filesystem::resize_file(path, 1000);
  EXPECT_THROW(cw::DistanceTable::load(path), cw::FormatError);
  std::filesystem::remove_all(dir);
}

TEST(GoodMoves, Examples) {
  const auto& t = table();
  EXPECT_TRUE(t.good_moves(cw::solved_state()).empty());
  // Single quarter turn: only its inverse is distance-reducing among all nine successors.
  EXPECT_EQ(t.good_moves(cw::apply_move(cw::solved_state(), mv("U"))), std::vector<Move>{mv("U'")});
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const auto s = cw::random_state(seed);
    const auto good = t.good_moves(s);
    const int d = t.distance(s);
    for (const auto& m : cw::kAllMoves) {
      const bool is_good = std::find(good.begin(), good.end(), m) != good.end();
      EXPECT_EQ(is_good, t.distance(cw::apply_move(s, m)) == d - 1);
    }
    EXPECT_EQ(good.empty(), d == 0);
  }
}

TEST(OptimalSolution, Examples) {
  const auto& t = table();
  EXPECT_TRUE(cw::optimal_solution(t, cw::solved_state()).empty());
  EXPECT_EQ(cw::optimal_solution(t, cw::apply_move(cw::solved_state(), mv("R"))), std::vector<Move>{mv("R'")});
}

TEST(OptimalSolution, LengthEqualsDistanceAndSolves) {
  const auto& t = table();
  cw::Rng tie_rng(11);
  for (std::uint64_t seed = 0; seed < 10000; ++seed) {
    const auto s = cw::random_state(seed);
    const int d = t.distance(s);
    for (auto policy : {cw::TiePolicy::kFirstInMoveOrder, cw::TiePolicy::kSeededUniform}) {
      const auto sol = cw::optimal_solution(t, s, policy, &tie_rng);
      ASSERT_EQ(static_cast<int>(sol.size()), d);
      CubeState cur = s;
      for (std::size_t k = 0; k < sol.size(); ++k) {
        cur = cw::apply_move(cur, sol[k]);
        ASSERT_EQ(t.distance(cur), d - static_cast<int>(k) - 1);
      }
      ASSERT_TRUE(cur.is_solved());
    }
  }
}

TEST(OptimalSolution, SeededPolicyIsDeterministic) {
  const auto& t = table();
  const auto s = cw::random_state(5);
  cw::Rng a(99), b(99);
  EXPECT_EQ(cw::optimal_solution(t, s, cw::TiePolicy::kSeededUniform, &a),
            cw::optimal_solution(t, s, cw::TiePolicy::kSeededUniform, &b));
}

TEST(RandomState, ScrambleAndDeterminism) {
  EXPECT_TRUE(cw::scramble(123, 0).is_solved());
  EXPECT_EQ(cw::scramble(123, 15), cw::scramble(123, 15));
  EXPECT_EQ(cw::random_state(42), cw::random_state(42));
  EXPECT_NE(cw::random_state(42), cw::random_state(43));
}

TEST(RandomState, DepthFrequenciesFollowHistogram) {
  const auto& t = table();
  const auto h = t.histogram();
  const int n = 1'000'000;
  std::array<std::uint64_t, 12> seen{};
  cw::Rng rng(2024);
  for (int k = 0; k < n; ++k) ++seen[t.at(cw::random_index(rng))];
  for (int d = 0; d <= 11; ++d) {
    const double p = static_cast<double>(h[d]) / cw::kNumStates;
    const double sigma = std::sqrt(n * p * (1 - p));
    EXPECT_LE(std::abs(static_cast<double>(seen[d]) - n * p), 3 * sigma + 1) << "depth " << d;
  }
}
