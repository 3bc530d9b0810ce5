#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <string>
#include <vector>

#include "cubeworld/binary_io.hpp"
#include "cubeworld/distance_table.hpp"
#include "cubeworld/kv_text.hpp"

namespace cubeworld {

enum class TrajectoryKind : std::uint8_t { kSolution = 0, kRandom = 1 };

struct Trajectory {
  StateIndex initial;
  MoveSequence moves;
  TrajectoryKind kind = TrajectoryKind::kSolution;

  CubeState initial_state() const { return decode_index(initial); }
  friend bool operator==(const Trajectory&, const Trajectory&) = default;
};

/// Sorted, duplicate-free list of state indices.
using StateSet = std::vector<StateIndex>;

/// Dense membership bitmap over the whole state space.
class StateMask {
 public:
  StateMask() : bits_(kNumStates, false) {}
  explicit StateMask(const StateSet& s) : StateMask() {
    for (auto i : s) bits_[i.value] = true;
  }
  bool contains(StateIndex i) const { return bits_[i.value]; }
  void insert(StateIndex i) { bits_[i.value] = true; }

  StateSet to_set() const {
    StateSet out;
    for (std::uint32_t i = 0; i < kNumStates; ++i) {
      if (bits_[i]) out.push_back(StateIndex{i});
    }
    return out;
  }

 private:
  std::vector<bool> bits_;
};

using DepthHistogram = std::array<std::uint64_t, kGodsNumber + 1>;

inline DepthHistogram depth_histogram(const DistanceTable& t, const StateSet& s) {
  DepthHistogram h{};
  for (auto i : s) ++h[t.at(i)];
  return h;
}

/// Which endpoints of the depth-11 geodesics are kept in the validation set.
enum class ValidationVariant {
  kInclusive,       // every state on the geodesics, depth-11 seeds and solved included
  kWithoutSolved,   // drop the shared terminus
  kInteriorOnly,    // drop both the depth-11 seeds and solved
};

/// Backward sweep: layer d holds the states reached by a good move from layer d+1,
/// starting from every depth-11 state.
inline StateSet build_validation_set(const DistanceTable& t, ValidationVariant variant = ValidationVariant::kInclusive) {
  StateMask on_geodesic;
  std::vector<StateIndex> layer;
  for (std::uint32_t i = 0; i < kNumStates; ++i) {
    if (t.at(StateIndex{i}) == kGodsNumber) layer.push_back(StateIndex{i});
  }
  for (auto s : layer) on_geodesic.insert(s);
  for (int d = kGodsNumber - 1; d >= 0; --d) {
    std::vector<StateIndex> next;
    for (auto s : layer) {
      const auto mask = t.good_move_mask(s);
      for (const auto& m : kAllMoves) {
        if (!(mask & (1u << m.id()))) continue;
        const auto n = apply_move(s, m);
        if (!on_geodesic.contains(n)) {
          on_geodesic.insert(n);
          next.push_back(n);
        }
      }
    }
    layer = std::move(next);
  }
  StateSet out;
  for (std::uint32_t i = 0; i < kNumStates; ++i) {
    const StateIndex s{i};
    if (!on_geodesic.contains(s)) continue;
    const int d = t.at(s);
    if (variant != ValidationVariant::kInclusive && d == 0) continue;
    if (variant == ValidationVariant::kInteriorOnly && d == kGodsNumber) continue;
    out.push_back(s);
  }
  return out;
}

inline constexpr int kNearSolvedDistance = 2;  // states closer than this may appear in both splits

/// States whose canonical (first-in-move-order) solution path never touches a
/// validation state at distance >= 2, the start state included. With the
/// inclusive validation sweep this keeps only a handful of near-solved states.
inline StateSet canonical_path_training_set(const DistanceTable& t, const StateSet& validation) {
  const StateMask in_validation(validation);
  std::vector<std::uint8_t> blocked(kNumStates, 0);
  for (int d = 0; d <= kGodsNumber; ++d) {
    for (std::uint32_t i = 0; i < kNumStates; ++i) {
      const StateIndex s{i};
      if (t.at(s) != d) continue;
      bool b = d >= kNearSolvedDistance && in_validation.contains(s);
      if (!b && d > 0) {
        const int first = std::countr_zero(static_cast<unsigned>(t.good_move_mask(s)));
        b = blocked[apply_move(s, Move::from_id(first)).value] != 0;
      }
      blocked[i] = b ? 1 : 0;
    }
  }
  StateSet out;
  for (std::uint32_t i = 0; i < kNumStates; ++i) {
    if (!blocked[i]) out.push_back(StateIndex{i});
  }
  return out;
}

/// Every state outside the validation set, plus the near-solved states. This is
/// the reading under which the reported split sizes overlap by a handful of states.
inline StateSet complement_training_set(const DistanceTable& t, const StateSet& validation) {
  const StateMask in_validation(validation);
  StateSet out;
  for (std::uint32_t i = 0; i < kNumStates; ++i) {
    const StateIndex s{i};
    if (!in_validation.contains(s) || t.at(s) < kNearSolvedDistance) out.push_back(s);
  }
  return out;
}

enum class TrainingRule {
  kComplement,     // default; see complement_training_set
  kCanonicalPath,  // see canonical_path_training_set
};

inline StateSet build_training_set(const DistanceTable& t, const StateSet& validation,
                                   TrainingRule rule = TrainingRule::kComplement) {
  return rule == TrainingRule::kComplement ? complement_training_set(t, validation)
                                           : canonical_path_training_set(t, validation);
}

/// Seeded uniform partition; the first half receives the extra element for odd sizes.
inline std::pair<StateSet, StateSet> split_halves(const StateSet& train, std::uint64_t seed) {
  std::vector<StateIndex> shuffled = train;
  Rng rng(seed);
  std::shuffle(shuffled.begin(), shuffled.end(), rng);
  const auto half = (shuffled.size() + 1) / 2;
  StateSet a(shuffled.begin(), shuffled.begin() + static_cast<std::ptrdiff_t>(half));
  StateSet b(shuffled.begin() + static_cast<std::ptrdiff_t>(half), shuffled.end());
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  return {std::move(a), std::move(b)};
}

/// Uniformly drawn subset of `n` states (all of them when n >= size), sorted.
inline StateSet subsample(const StateSet& s, std::size_t n, std::uint64_t seed) {
  if (n >= s.size()) return s;
  std::vector<StateIndex> v = s;
  Rng rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, v.size() - 1);
    std::swap(v[i], v[pick(rng)]);
  }
  v.resize(n);
  std::sort(v.begin(), v.end());
  return v;
}

inline std::vector<Trajectory> solution_trajectories(const DistanceTable& t, const StateSet& states) {
  std::vector<Trajectory> out;
  out.reserve(states.size());
  for (auto s : states) out.push_back({s, optimal_solution(t, s), TrajectoryKind::kSolution});
  return out;
}

/// Random-move corpus for state-prediction pretraining. Initial states come from
/// `sources`; intermediate states are not stored, they are recomputed on use.
inline std::vector<Trajectory> gen_pretrain_data(const StateSet& sources, std::size_t n, int len, std::uint64_t seed) {
  if (sources.empty()) throw ValidationError("pretraining needs at least one source state");
  if (len < 0) throw ValidationError("negative trajectory length");
  Rng rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, sources.size() - 1);
  std::vector<Trajectory> out(n);
  for (auto& tr : out) {
    tr.kind = TrajectoryKind::kRandom;
    tr.initial = sources[pick(rng)];
    tr.moves.resize(static_cast<std::size_t>(len));
    for (auto& m : tr.moves) m = random_move(rng);
  }
  std::stable_sort(out.begin(), out.end(), [](const Trajectory& a, const Trajectory& b) { return a.initial < b.initial; });
  return out;
}

// ---------------------------------------------------------------------------
// Dataset files: "CUBEDATA", u32 version, u32 kind, u64 count, then per record
// u32 state index, u8 move count, move ids as u8.

inline constexpr std::uint32_t kDatasetVersion = 1;

inline void write_dataset(const std::filesystem::path& path, TrajectoryKind kind, std::span<const Trajectory> records) {
  io::Writer w(path);
  w.magic("CUBEDATA");
  w.pod(kDatasetVersion);
  w.pod(static_cast<std::uint32_t>(kind));
  w.pod(static_cast<std::uint64_t>(records.size()));
  std::vector<std::uint8_t> ids;
  for (const auto& r : records) {
    if (r.kind != kind) throw ValidationError("record kind does not match dataset kind");
    if (r.moves.size() > 255) throw ValidationError("trajectory too long for dataset format");
    w.pod(r.initial.value);
    w.pod(static_cast<std::uint8_t>(r.moves.size()));
    ids.clear();
    for (auto m : r.moves) ids.push_back(static_cast<std::uint8_t>(m.id()));
    w.array(std::span<const std::uint8_t>(ids));
  }
  w.commit();
}

struct Dataset {
  TrajectoryKind kind = TrajectoryKind::kSolution;
  std::vector<Trajectory> records;
};

/// With `oracle`, solution records are additionally checked to be optimal.
inline Dataset read_dataset(const std::filesystem::path& path, const DistanceTable* oracle = nullptr) {
  io::Reader r(path);
  r.expect_magic("CUBEDATA");
  if (auto v = r.pod<std::uint32_t>(); v != kDatasetVersion) {
    throw FormatError(path.string() + ": unsupported dataset version " + std::to_string(v));
  }
  const auto kind_raw = r.pod<std::uint32_t>();
  if (kind_raw > 1) throw FormatError(path.string() + ": unknown dataset kind");
  Dataset ds;
  ds.kind = static_cast<TrajectoryKind>(kind_raw);
  const auto count = r.pod<std::uint64_t>();
  if (count > r.remaining() / 5) throw FormatError(path.string() + ": record count exceeds file size");
  ds.records.resize(count);
  std::vector<std::uint8_t> ids;
  for (auto& rec : ds.records) {
    rec.kind = ds.kind;
    rec.initial = StateIndex{r.pod<std::uint32_t>()};
    if (rec.initial.value >= kNumStates) throw FormatError(path.string() + ": state index out of range");
    ids.resize(r.pod<std::uint8_t>());
    r.array(std::span<std::uint8_t>(ids));
    rec.moves.resize(ids.size());
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (ids[k] >= kNumMoves) throw FormatError(path.string() + ": invalid move id");
      rec.moves[k] = Move::from_id(ids[k]);
    }
    if (oracle != nullptr && ds.kind == TrajectoryKind::kSolution) {
      if (static_cast<int>(rec.moves.size()) != oracle->at(rec.initial) ||
          apply_sequence(rec.initial, rec.moves) != kSolvedIndex) {
        throw FormatError(path.string() + ": record is not an optimal solution");
      }
    }
  }
  r.expect_eof();
  return ds;
}

// ---------------------------------------------------------------------------

struct SplitManifest {
  static constexpr const char* kVersion = "cubeworld-splits/1";

  StateSet validation;
  StateSet train1;
  StateSet train2;
  std::uint64_t seed = 0;
  std::string version = kVersion;

  /// Sizes of every validation/training interpretation that was computed.
  std::vector<std::pair<std::string, std::uint64_t>> variant_counts;

  StateSet training() const {
    StateSet all;
    std::merge(train1.begin(), train1.end(), train2.begin(), train2.end(), std::back_inserter(all));
    return all;
  }

  KeyValueText summary(const DistanceTable& t) const {
    KeyValueText kv;
    kv.set("version", version);
    kv.set_number("seed", seed);
    kv.set_number("count.validation", validation.size());
    kv.set_number("count.train1", train1.size());
    kv.set_number("count.train2", train2.size());
    for (const auto& [name, n] : variant_counts) kv.set_number("variant." + name, n);
    kv.set_list("histogram.all", t.histogram());
    kv.set_list("histogram.validation", depth_histogram(t, validation));
    kv.set_list("histogram.train1", depth_histogram(t, train1));
    kv.set_list("histogram.train2", depth_histogram(t, train2));
    return kv;
  }
};

/// Builds every split and records the size of each interpretation.
inline SplitManifest build_splits(const DistanceTable& t, std::uint64_t seed) {
  SplitManifest m;
  m.seed = seed;
  m.validation = build_validation_set(t, ValidationVariant::kInclusive);
  const auto train = build_training_set(t, m.validation);
  m.variant_counts.emplace_back("validation_inclusive", m.validation.size());
  m.variant_counts.emplace_back("validation_without_solved", build_validation_set(t, ValidationVariant::kWithoutSolved).size());
  m.variant_counts.emplace_back("validation_interior_only", build_validation_set(t, ValidationVariant::kInteriorOnly).size());
  m.variant_counts.emplace_back("train_complement", train.size());
  m.variant_counts.emplace_back("train_canonical_path", canonical_path_training_set(t, m.validation).size());
  auto [a, b] = split_halves(train, seed);
  m.train1 = std::move(a);
  m.train2 = std::move(b);
  return m;
}

// ---------------------------------------------------------------------------
// State-set files: "CUBESETS", u32 version, u64 count, sorted u32 indices.

inline void write_state_set(const std::filesystem::path& path, const StateSet& states) {
  io::Writer w(path);
  w.magic("CUBESETS");
  w.pod(kDatasetVersion);
  w.pod(static_cast<std::uint64_t>(states.size()));
  std::vector<std::uint32_t> raw;
  raw.reserve(states.size());
  for (auto s : states) raw.push_back(s.value);
  w.array(std::span<const std::uint32_t>(raw));
  w.commit();
}

inline StateSet read_state_set(const std::filesystem::path& path) {
  io::Reader r(path);
  r.expect_magic("CUBESETS");
  if (auto v = r.pod<std::uint32_t>(); v != kDatasetVersion) {
    throw FormatError(path.string() + ": unsupported state-set version " + std::to_string(v));
  }
  const auto count = r.pod<std::uint64_t>();
  if (count > r.remaining() / 4) throw FormatError(path.string() + ": count exceeds file size");
  std::vector<std::uint32_t> raw(count);
  r.array(std::span<std::uint32_t>(raw));
  r.expect_eof();
  StateSet out;
  out.reserve(count);
  for (auto v : raw) {
    if (v >= kNumStates) throw FormatError(path.string() + ": state index out of range");
    if (!out.empty() && out.back().value >= v) throw FormatError(path.string() + ": state set not sorted");
    out.push_back(StateIndex{v});
  }
  return out;
}

/// Writes validation.states, train1.states, train2.states and splits.manifest into `dir`.
inline void save_splits(const std::filesystem::path& dir, const SplitManifest& m, const DistanceTable& t) {
  std::filesystem::create_directories(dir);
  write_state_set(dir / "validation.states", m.validation);
  write_state_set(dir / "train1.states", m.train1);
  write_state_set(dir / "train2.states", m.train2);
  m.summary(t).save(dir / "splits.manifest");
}

inline SplitManifest load_splits(const std::filesystem::path& dir) {
  const auto manifest = dir / "splits.manifest";
  if (!std::filesystem::exists(manifest)) throw MissingArtifactError("no splits in " + dir.string(), "data splits");
  const auto kv = KeyValueText::load(manifest);
  SplitManifest m;
  m.version = kv.get("version");
  if (m.version != SplitManifest::kVersion) throw FormatError(manifest.string() + ": unsupported split version " + m.version);
  m.seed = static_cast<std::uint64_t>(kv.get_int("seed"));
  for (const auto& [k, v] : kv.entries()) {
    if (k.rfind("variant.", 0) == 0) m.variant_counts.emplace_back(k.substr(8), std::stoull(v));
  }
  m.validation = read_state_set(dir / "validation.states");
  m.train1 = read_state_set(dir / "train1.states");
  m.train2 = read_state_set(dir / "train2.states");
  if (m.validation.size() != static_cast<std::size_t>(kv.get_int("count.validation")) ||
      m.train1.size() != static_cast<std::size_t>(kv.get_int("count.train1")) ||
      m.train2.size() != static_cast<std::size_t>(kv.get_int("count.train2"))) {
    throw FormatError(dir.string() + ": split files do not match their manifest");
  }
  return m;
}

}  // namespace cubeworld
