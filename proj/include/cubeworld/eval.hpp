#pragma once

// Task accuracy: a scramble of optimal distance N counts as solved when some
// prefix of the emitted moves, no longer than N + slack, reaches the solved
// state. The strict variant additionally requires the rollout to stop with EOS
// exactly at a solved state.

#include <functional>

#include "cubeworld/decode.hpp"
#include "cubeworld/metrics.hpp"

namespace cubeworld {

struct Rollout {
  MoveSequence moves;
  bool eos = false;
};

/// Produces one rollout per state, each with at most budgets[i] moves.
using RolloutFn = std::function<std::vector<Rollout>(std::span<const CubeState> states, std::span<const int> budgets)>;

struct AccuracyTable {
  std::array<long, kGodsNumber + 1> total{};
  std::array<long, kGodsNumber + 1> solved{};
  std::array<long, kGodsNumber + 1> strict{};

  double rate(int bucket) const { return total[bucket] ? static_cast<double>(solved[bucket]) / static_cast<double>(total[bucket]) : 0.0; }
  double strict_rate(int bucket) const {
    return total[bucket] ? static_cast<double>(strict[bucket]) / static_cast<double>(total[bucket]) : 0.0;
  }
  /// Pooled accuracy over buckets lo..hi inclusive.
  double pooled(int lo, int hi) const {
    long n = 0, s = 0;
    for (int b = lo; b <= hi; ++b) {
      n += total[b];
      s += solved[b];
    }
    return n ? static_cast<double>(s) / static_cast<double>(n) : 0.0;
  }
  long count(int lo, int hi) const {
    long n = 0;
    for (int b = lo; b <= hi; ++b) n += total[b];
    return n;
  }

  void write(MetricsWriter& w, const std::string& run, const std::string& metric = "task_accuracy") const {
    for (int b = 0; b <= kGodsNumber; ++b) {
      if (total[b] == 0) continue;
      w.value(run, metric, std::to_string(b), rate(b), total[b]);
      w.value(run, metric + "_strict", std::to_string(b), strict_rate(b), total[b]);
    }
    w.value(run, metric, "all", pooled(0, kGodsNumber), count(0, kGodsNumber));
  }
};

struct SolveCheck {
  bool prefix = false;
  bool strict = false;
};

inline SolveCheck check_solution(StateIndex start, const Rollout& r, int budget) {
  SolveCheck out;
  StateIndex s = start;
  if (s == kSolvedIndex) out.prefix = true;
  for (int k = 0; k < static_cast<int>(r.moves.size()) && k < budget; ++k) {
    s = apply_move(s, r.moves[static_cast<std::size_t>(k)]);
    if (s == kSolvedIndex) out.prefix = true;
  }
  out.strict = r.eos && static_cast<int>(r.moves.size()) <= budget && apply_sequence(start, r.moves) == kSolvedIndex;
  return out;
}

inline AccuracyTable eval_task_accuracy(const DistanceTable& t, std::span<const StateIndex> states, const RolloutFn& rollout,
                                        int slack = 3, std::size_t chunk = 512) {
  AccuracyTable table;
  for (std::size_t begin = 0; begin < states.size(); begin += chunk) {
    const auto part = states.subspan(begin, std::min(chunk, states.size() - begin));
    std::vector<CubeState> cubes;
    std::vector<int> budgets;
    for (auto s : part) {
      cubes.push_back(decode_index(s));
      budgets.push_back(t.at(s) + slack);
    }
    const auto rolls = rollout(cubes, budgets);
    for (std::size_t i = 0; i < part.size(); ++i) {
      const int n = t.at(part[i]);
      const auto c = check_solution(part[i], rolls[i], budgets[i]);
      ++table.total[n];
      table.solved[n] += c.prefix;
      table.strict[n] += c.strict;
    }
  }
  return table;
}

/// Greedy decoding from a model.
inline RolloutFn model_rollout(const Transformer<float>& model) {
  return [&model](std::span<const CubeState> states, std::span<const int> budgets) {
    DecodeOptions opts;
    const auto comps = decode_batch(model, states, opts, nullptr, budgets);
    std::vector<Rollout> out;
    for (const auto& c : comps) out.push_back({c.moves(), c.ended});
    return out;
  };
}

/// Plays the first good move at every step, then EOS.
inline RolloutFn oracle_rollout(const DistanceTable& t) {
  return [&t](std::span<const CubeState> states, std::span<const int>) {
    std::vector<Rollout> out;
    for (const auto& s : states) out.push_back({optimal_solution(t, s), true});
    return out;
  };
}

/// Uniformly random moves up to the budget, never EOS.
inline RolloutFn random_rollout(std::uint64_t seed) {
  auto rng = std::make_shared<Rng>(seed);
  return [rng](std::span<const CubeState> states, std::span<const int> budgets) {
    std::vector<Rollout> out(states.size());
    for (std::size_t i = 0; i < states.size(); ++i) {
      for (int k = 0; k < budgets[i]; ++k) out[i].moves.push_back(random_move(*rng));
    }
    return out;
  };
}

/// Up to `per_bucket` states of each complexity, drawn with a fixed seed; sorted.
inline StateSet stratified_sample(const DistanceTable& t, const StateSet& pool, std::size_t per_bucket, std::uint64_t seed) {
  std::array<StateSet, kGodsNumber + 1> by_depth;
  for (auto s : pool) by_depth[t.at(s)].push_back(s);
  StateSet out;
  for (int d = 0; d <= kGodsNumber; ++d) {
    const auto pick = subsample(by_depth[d], std::min(per_bucket, by_depth[d].size()), seed + static_cast<std::uint64_t>(d));
    out.insert(out.end(), pick.begin(), pick.end());
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace cubeworld
