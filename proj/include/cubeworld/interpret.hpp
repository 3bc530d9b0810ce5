#pragma once

// Linear probes on the residual stream and probe-based steering.
//
// A probe cell (layer l, timestep t) holds 24 matrices V_i (6 x d), stored
// stacked as one 144 x d matrix; row 6i + c reads color c of sticker i.
// Layers are numbered 1..L (residual stream after block l); timestep t is the
// token position after consuming t moves.

#include <map>
#include <random>
#include <sstream>

#include "cubeworld/binary_io.hpp"
#include "cubeworld/decode.hpp"
#include "cubeworld/kv_text.hpp"
#include "cubeworld/metrics.hpp"

namespace cubeworld {

using ProbeKey = std::pair<int, int>;  // (layer, timestep)

struct ActivationCell {
  Mat<float> X;                   // one row per record
  std::vector<CubeState> states;  // ground truth after t moves
};

struct ActivationDataset {
  std::vector<int> layers;
  std::map<ProbeKey, ActivationCell> cells;

  std::size_t records() const {
    std::size_t n = 0;
    for (const auto& [k, c] : cells) n += c.states.size();
    return n;
  }
};

/// Residual-stream vectors at every timestep of every trajectory, for the given layers.
inline ActivationDataset collect_activations(const Transformer<float>& model, std::span<const Trajectory> trajs, std::vector<int> layers,
                                             int batch = 256) {
  const int L = model.config().layers;
  for (int l : layers) {
    if (l < 0 || l > L) throw ValidationError("layer " + std::to_string(l) + " out of range");
  }
  std::array<std::size_t, kGodsNumber + 1> per_t{};
  for (const auto& tr : trajs) {
    if (tr.moves.size() > static_cast<std::size_t>(kGodsNumber)) throw ValidationError("trajectory longer than 11 moves");
    for (std::size_t t = 0; t <= tr.moves.size(); ++t) ++per_t[t];
  }
  ActivationDataset ds;
  ds.layers = layers;
  const int d = model.config().d_model;
  for (int l : layers) {
    for (int t = 0; t <= kGodsNumber; ++t) {
      if (per_t[t] == 0) continue;
      auto& c = ds.cells[{l, t}];
      c.X.resize(static_cast<Eigen::Index>(per_t[t]), d);
      c.states.reserve(per_t[t]);
    }
  }
  std::array<Eigen::Index, kGodsNumber + 1> fill{};
  ForwardPass<float> fp;
  ForwardOptions<float> opts;
  opts.move_logits = false;
  opts.capture_layers = layers;
  for (std::size_t begin = 0; begin < trajs.size(); begin += static_cast<std::size_t>(batch)) {
    const auto part = trajs.subspan(begin, std::min<std::size_t>(static_cast<std::size_t>(batch), trajs.size() - begin));
    std::vector<std::vector<Token>> seqs;
    for (const auto& tr : part) {
      auto s = prompt_tokens(tr.initial_state());
      for (auto m : tr.moves) s.push_back(move_token(m));
      seqs.push_back(std::move(s));
    }
    const auto tb = make_batch(seqs);
    fp.run(model, tb, opts);
    for (std::size_t b = 0; b < part.size(); ++b) {
      CubeState s = part[b].initial_state();
      for (std::size_t t = 0; t <= part[b].moves.size(); ++t) {
        if (t > 0) s = apply_move(s, part[b].moves[t - 1]);
        const int row = static_cast<int>(b) * tb.seq_len + kFirstDecisionPosition + static_cast<int>(t);
        for (int l : layers) {
          auto& c = ds.cells[{l, static_cast<int>(t)}];
          c.X.row(fill[t]) = fp.hidden(l).row(row);
          c.states.push_back(s);
        }
        ++fill[t];
      }
    }
  }
  return ds;
}

struct ProbeConfig {
  double lr = 1e-3;
  double weight_decay = 0.01;
  int batch = 32;
  int epochs = 1;
  int validation_size = 512;
  int patience = 10;
  int eval_every = 10;
  std::size_t min_samples = 64;  // smaller cells are left out and flagged
  std::uint64_t seed = 0;
};

struct ProbeCell {
  Mat<float> V;  // 144 x d
  std::array<bool, kNumStickers> trained{};
  std::size_t samples = 0;

  /// Every probe row is nonzero, so any source/target pair can be projected.
  bool usable() const { return V.size() > 0 && (V.rowwise().squaredNorm().array() > 0).all(); }
};

struct ProbeSet {
  int d_model = 0;
  std::map<ProbeKey, ProbeCell> cells;
  std::vector<ProbeKey> missing;  // requested cells without enough data
  KeyValueText metadata;

  bool has(int layer, int t) const { return cells.count({layer, t}) != 0; }
  const ProbeCell& at(int layer, int t) const {
    auto it = cells.find({layer, t});
    if (it == cells.end()) {
      throw MissingArtifactError("no probe for layer " + std::to_string(layer) + ", timestep " + std::to_string(t), "probes train");
    }
    return it->second;
  }
};

namespace detail {

/// Sum over stickers of the cross-entropy of X V^T; fills `per_sticker` with
/// mean losses and, when `grad` is set, the mean gradient wrt V.
inline void probe_loss(const Mat<float>& V, const Mat<float>& X, std::span<const CubeState> states, std::array<double, kNumStickers>& per_sticker,
                       Mat<float>* grad) {
  const Mat<float> logits = X * V.transpose();
  const auto n = X.rows();
  Mat<float> dlogits;
  if (grad) dlogits = Mat<float>::Zero(n, kStateLogits);
  per_sticker.fill(0.0);
  for (Eigen::Index r = 0; r < n; ++r) {
    for (int i = 0; i < kNumStickers; ++i) {
      const auto seg = logits.row(r).segment(i * kNumColors, kNumColors);
      const int y = to_int(states[static_cast<std::size_t>(r)].stickers[i]);
      const double mx = seg.maxCoeff();
      double z = 0;
      for (int c = 0; c < kNumColors; ++c) z += std::exp(seg[c] - mx);
      const double lse = mx + std::log(z);
      per_sticker[i] += lse - seg[y];
      if (grad) {
        for (int c = 0; c < kNumColors; ++c) {
          dlogits(r, i * kNumColors + c) = static_cast<float>((std::exp(seg[c] - lse) - (c == y ? 1.0 : 0.0)) / static_cast<double>(n));
        }
      }
    }
  }
  for (auto& v : per_sticker) v /= static_cast<double>(n);
  if (grad) grad->noalias() = dlogits.transpose() * X;
}

}  // namespace detail

/// Trains one probe cell: the 24 sticker probes share minibatches but stop
/// independently, each keeping its best held-out weights.
inline ProbeCell train_probe_cell(const ActivationCell& cell, const ProbeConfig& cfg, std::uint64_t seed) {
  const auto n = static_cast<std::size_t>(cell.X.rows());
  const int d = static_cast<int>(cell.X.cols());
  ProbeCell out;
  out.samples = n;
  out.V = Mat<float>::Zero(kStateLogits, d);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const std::size_t nval = std::min<std::size_t>(static_cast<std::size_t>(cfg.validation_size), n / 4);
  Mat<float> Xv(static_cast<Eigen::Index>(nval), d);
  std::vector<CubeState> Sv;
  for (std::size_t k = 0; k < nval; ++k) {
    Xv.row(static_cast<Eigen::Index>(k)) = cell.X.row(static_cast<Eigen::Index>(order[k]));
    Sv.push_back(cell.states[order[k]]);
  }
  const std::vector<std::size_t> train(order.begin() + static_cast<std::ptrdiff_t>(nval), order.end());

  Mat<float> V = out.V, m = Mat<float>::Zero(kStateLogits, d), v = m, grad;
  std::array<double, kNumStickers> best;
  best.fill(std::numeric_limits<double>::infinity());
  std::array<int, kNumStickers> bad{};
  std::array<bool, kNumStickers> active;
  active.fill(true);
  auto evaluate = [&] {
    std::array<double, kNumStickers> loss;
    detail::probe_loss(V, Xv, Sv, loss, nullptr);
    for (int i = 0; i < kNumStickers; ++i) {
      if (!active[i]) continue;
      if (loss[i] < best[i]) {
        best[i] = loss[i];
        bad[i] = 0;
        out.V.middleRows(i * kNumColors, kNumColors) = V.middleRows(i * kNumColors, kNumColors);
        out.trained[i] = true;
      } else if (++bad[i] > cfg.patience) {
        active[i] = false;
      }
    }
  };
  long step = 0;
  const double b1 = 0.9, b2 = 0.999;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (epoch > 0) std::shuffle(order.begin() + static_cast<std::ptrdiff_t>(nval), order.end(), rng);
    for (std::size_t begin = 0; begin < train.size(); begin += static_cast<std::size_t>(cfg.batch)) {
      if (std::none_of(active.begin(), active.end(), [](bool a) { return a; })) break;
      const std::size_t end = std::min(train.size(), begin + static_cast<std::size_t>(cfg.batch));
      Mat<float> Xb(static_cast<Eigen::Index>(end - begin), d);
      std::vector<CubeState> Sb;
      for (std::size_t k = begin; k < end; ++k) {
        const auto src = epoch == 0 ? train[k] : order[nval + k];
        Xb.row(static_cast<Eigen::Index>(k - begin)) = cell.X.row(static_cast<Eigen::Index>(src));
        Sb.push_back(cell.states[src]);
      }
      std::array<double, kNumStickers> loss;
      detail::probe_loss(V, Xb, Sb, loss, &grad);
      ++step;
      const double c1 = 1 - std::pow(b1, static_cast<double>(step)), c2 = 1 - std::pow(b2, static_cast<double>(step));
      for (int i = 0; i < kNumStickers; ++i) {
        if (!active[i]) continue;
        for (int r = i * kNumColors; r < (i + 1) * kNumColors; ++r) {
          for (int j = 0; j < d; ++j) {
            const double g = grad(r, j);
            m(r, j) = static_cast<float>(b1 * m(r, j) + (1 - b1) * g);
            v(r, j) = static_cast<float>(b2 * v(r, j) + (1 - b2) * g * g);
            const double upd = (m(r, j) / c1) / (std::sqrt(v(r, j) / c2) + 1e-8);
            V(r, j) = static_cast<float>(V(r, j) * (1 - cfg.lr * cfg.weight_decay) - cfg.lr * upd);
          }
        }
      }
      if (step % cfg.eval_every == 0) evaluate();
    }
  }
  evaluate();
  // Softmax ignores a component shared by a sticker's six rows; drop it so each
  // row carries only what separates its color from the others.
  for (int i = 0; i < kNumStickers; ++i) {
    auto block = out.V.middleRows(i * kNumColors, kNumColors);
    const RowVec<float> mean = block.colwise().mean();
    block.rowwise() -= mean;
  }
  return out;
}

inline ProbeSet train_probes(const ActivationDataset& ds, const ProbeConfig& cfg) {
  ProbeSet ps;
  for (const auto& [key, cell] : ds.cells) {
    ps.d_model = static_cast<int>(cell.X.cols());
    if (cell.states.size() < cfg.min_samples) {
      ps.missing.push_back(key);
      continue;
    }
    const std::uint64_t seed = cfg.seed * 1000003ULL + static_cast<std::uint64_t>(key.first) * 131ULL + static_cast<std::uint64_t>(key.second);
    ps.cells[key] = train_probe_cell(cell, cfg, seed);
  }
  for (int l : ds.layers) {
    for (int t = 0; t <= kGodsNumber; ++t) {
      if (!ds.cells.count({l, t})) ps.missing.emplace_back(l, t);
    }
  }
  std::sort(ps.missing.begin(), ps.missing.end());
  ps.metadata.set_number("probe.lr", cfg.lr);
  ps.metadata.set_number("probe.weight_decay", cfg.weight_decay);
  ps.metadata.set_number("probe.batch", cfg.batch);
  ps.metadata.set_number("probe.epochs", cfg.epochs);
  ps.metadata.set_number("probe.validation_size", cfg.validation_size);
  ps.metadata.set_number("probe.patience", cfg.patience);
  ps.metadata.set_number("probe.eval_every", cfg.eval_every);
  ps.metadata.set_number("probe.seed", cfg.seed);
  return ps;
}

struct ProbeScore {
  long correct = 0;
  long total = 0;  // sticker predictions
  double accuracy() const { return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0; }
};

/// Argmax-correct rate per (layer, timestep), over stickers and records.
inline std::map<ProbeKey, ProbeScore> probe_accuracy(const ProbeSet& probes, const ActivationDataset& ds) {
  std::map<ProbeKey, ProbeScore> out;
  for (const auto& [key, cell] : ds.cells) {
    auto it = probes.cells.find(key);
    if (it == probes.cells.end()) continue;
    const Mat<float> logits = cell.X * it->second.V.transpose();
    auto& s = out[key];
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
      for (int i = 0; i < kNumStickers; ++i) {
        Eigen::Index best;
        logits.row(r).segment(i * kNumColors, kNumColors).maxCoeff(&best);
        s.correct += best == to_int(cell.states[static_cast<std::size_t>(r)].stickers[i]);
        ++s.total;
      }
    }
  }
  return out;
}

/// Pools scores over timesteps, per layer.
inline std::map<int, ProbeScore> probe_accuracy_by_layer(const std::map<ProbeKey, ProbeScore>& scores) {
  std::map<int, ProbeScore> out;
  for (const auto& [key, s] : scores) {
    out[key.first].correct += s.correct;
    out[key.first].total += s.total;
  }
  return out;
}

// ---------------------------------------------------------------------------
// ProbeSet files: "CUBEPROB" u32 version, u32 d_model, string metadata,
// u32 cell count, then per cell: i32 layer, i32 t, u64 samples, u8 trained[24],
// f32 V[144 * d]; then u32 missing count and (i32 layer, i32 t) pairs.

inline constexpr std::uint32_t kProbeFileVersion = 1;

inline void save_probes(const std::filesystem::path& path, const ProbeSet& ps) {
  io::Writer w(path);
  w.magic("CUBEPROB");
  w.pod(kProbeFileVersion);
  w.pod(static_cast<std::uint32_t>(ps.d_model));
  w.string(ps.metadata.str());
  w.pod(static_cast<std::uint32_t>(ps.cells.size()));
  for (const auto& [key, c] : ps.cells) {
    w.pod(static_cast<std::int32_t>(key.first));
    w.pod(static_cast<std::int32_t>(key.second));
    w.pod(static_cast<std::uint64_t>(c.samples));
    for (bool b : c.trained) w.pod(static_cast<std::uint8_t>(b));
    w.array(std::span<const float>(c.V.data(), static_cast<std::size_t>(c.V.size())));
  }
  w.pod(static_cast<std::uint32_t>(ps.missing.size()));
  for (const auto& [l, t] : ps.missing) {
    w.pod(static_cast<std::int32_t>(l));
    w.pod(static_cast<std::int32_t>(t));
  }
  w.commit();
}

inline ProbeSet load_probes(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw MissingArtifactError("probe file " + path.string() + " not found", "probes train");
  io::Reader r(path);
  r.expect_magic("CUBEPROB");
  if (auto v = r.pod<std::uint32_t>(); v != kProbeFileVersion) {
    throw FormatError(path.string() + ": unsupported probe file version " + std::to_string(v));
  }
  ProbeSet ps;
  ps.d_model = static_cast<int>(r.pod<std::uint32_t>());
  if (ps.d_model <= 0 || ps.d_model > 65536) throw FormatError(path.string() + ": bad d_model");
  std::istringstream meta(r.string());
  ps.metadata = KeyValueText::parse(meta, path.string());
  const auto n = r.pod<std::uint32_t>();
  for (std::uint32_t k = 0; k < n; ++k) {
    const int l = r.pod<std::int32_t>(), t = r.pod<std::int32_t>();
    if (t < 0 || t > kGodsNumber || l < 0) throw FormatError(path.string() + ": bad probe cell index");
    ProbeCell c;
    c.samples = r.pod<std::uint64_t>();
    for (auto& b : c.trained) b = r.pod<std::uint8_t>() != 0;
    c.V.resize(kStateLogits, ps.d_model);
    r.array(std::span<float>(c.V.data(), static_cast<std::size_t>(c.V.size())));
    ps.cells[{l, t}] = std::move(c);
  }
  const auto nm = r.pod<std::uint32_t>();
  for (std::uint32_t k = 0; k < nm; ++k) {
    const int l = r.pod<std::int32_t>(), t = r.pod<std::int32_t>();
    ps.missing.emplace_back(l, t);
  }
  r.expect_eof();
  return ps;
}

// ---------------------------------------------------------------------------
// Interventions.

struct InterventionSample {
  Trajectory context;  // initial state and its optimal moves
  int t = 0;           // edit position: after t moves
  StateIndex source;   // state after t moves
  StateIndex target;   // same distance, no shared good move
  int complexity() const { return static_cast<int>(context.moves.size()); }
};

/// Checks the sample's constraints against the oracle.
inline void validate_sample(const DistanceTable& tab, const InterventionSample& s) {
  if (s.t < 0 || s.t > kGodsNumber || s.t > static_cast<int>(s.context.moves.size())) throw ValidationError("intervention timestep out of range");
  MoveSequence prefix(s.context.moves.begin(), s.context.moves.begin() + s.t);
  if (apply_sequence(s.context.initial, prefix) != s.source) throw ValidationError("intervention source does not match its context");
  if (tab.at(s.source) != tab.at(s.target)) throw ValidationError("intervention source and target differ in distance");
  if (tab.good_move_mask(s.source) & tab.good_move_mask(s.target)) throw ValidationError("intervention source and target share a good move");
}

struct InterventionSetReport {
  std::size_t total = 0;
  std::vector<std::pair<int, int>> empty_cells;  // (complexity, t) with no sample
  std::size_t no_target = 0;                     // draws skipped because no valid target was found
};

/// Stratified over (initial complexity c, timestep t < c): up to `per_cell`
/// validation states of complexity c each give one sample at timestep t, with
/// a uniformly drawn target of the same distance and disjoint good moves.
inline std::vector<InterventionSample> build_intervention_set(const DistanceTable& tab, const StateSet& validation, std::uint64_t seed,
                                                              std::size_t per_cell = 1000, InterventionSetReport* report = nullptr,
                                                              int max_tries = 100000) {
  std::array<StateSet, kGodsNumber + 1> pool;   // validation states by complexity
  std::array<StateSet, kGodsNumber + 1> space;  // every state by distance
  for (auto s : validation) pool[tab.at(s)].push_back(s);
  for (std::uint32_t i = 0; i < kNumStates; ++i) space[tab.at(StateIndex{i})].push_back(StateIndex{i});
  std::vector<InterventionSample> out;
  InterventionSetReport rep;
  Rng rng(seed);
  for (int c = 1; c <= kGodsNumber; ++c) {
    for (int t = 0; t < c; ++t) {
      const std::uint64_t cell_seed = seed * 7919ULL + static_cast<std::uint64_t>(c * 16 + t);
      const auto starts = subsample(pool[c], per_cell, cell_seed);
      std::size_t made = 0;
      for (auto s0 : starts) {
        const auto moves = optimal_solution(tab, s0);
        const StateIndex S = apply_sequence(s0, MoveSequence(moves.begin(), moves.begin() + t));
        const auto mask = tab.good_move_mask(S);
        const auto& cands = space[c - t];
        std::uniform_int_distribution<std::size_t> pick(0, cands.size() - 1);
        bool found = false;
        for (int k = 0; k < max_tries; ++k) {
          const StateIndex T = cands[pick(rng)];
          if ((tab.good_move_mask(T) & mask) == 0) {
            out.push_back({{s0, moves, TrajectoryKind::kSolution}, t, S, T});
            found = true;
            break;
          }
        }
        if (found) ++made;
        else ++rep.no_target;
      }
      if (made == 0) rep.empty_cells.emplace_back(c, t);
    }
  }
  rep.total = out.size();
  if (report) *report = rep;
  return out;
}

/// (I - sum_i v_i v_i^T / |v_i|^2) h, with the rank-one terms summed rather than applied in turn.
template <class Vec, class Rows>
RowVec<float> project_out(const Vec& h, const Rows& v) {
  RowVec<float> out = h;
  for (Eigen::Index i = 0; i < v.rows(); ++i) {
    const double n2 = v.row(i).squaredNorm();
    if (!(n2 > 0)) throw ValidationError("zero-norm probe direction");
    out -= static_cast<float>(v.row(i).dot(h) / n2) * v.row(i);
  }
  return out;
}

struct AlphaResult {
  std::array<double, kNumStickers> alpha{};
  bool flagged = false;
};

/// Minimal alpha_i >= 0 per sticker so that, adding alpha_i times the target
/// row, the target logit beats every other color by `margin` (each sticker
/// considered on its own). Infeasible stickers take `cap` and flag the result.
inline AlphaResult adaptive_alphas(const RowVec<float>& h, const Mat<float>& V, const std::array<Color, kNumStickers>& target,
                                   double margin, double cap) {
  AlphaResult out;
  for (int i = 0; i < kNumStickers; ++i) {
    const auto Vi = V.middleRows(i * kNumColors, kNumColors);
    const int y = to_int(target[i]);
    const Eigen::VectorXd base = (Vi * h.transpose()).cast<double>();
    const Eigen::VectorXd dir = (Vi * Vi.row(y).transpose()).cast<double>();
    double lo = 0, hi = std::numeric_limits<double>::infinity();
    bool feasible = true;
    for (int c = 0; c < kNumColors; ++c) {
      if (c == y) continue;
      const double a = dir[y] - dir[c];          // gain per unit alpha
      const double r = base[c] + margin - base[y];  // shortfall at alpha = 0
      if (a > 0) lo = std::max(lo, r / a);
      else if (a < 0) hi = std::min(hi, r / a);
      else if (r > 0) feasible = false;
    }
    if (!feasible || lo > hi || lo > cap) {
      out.alpha[i] = cap;
      out.flagged = true;
    } else {
      out.alpha[i] = lo;
    }
  }
  return out;
}

struct InterventionConfig {
  std::vector<int> layers;  // empty: the last three non-final layers
  double margin = 1.0;
  double alpha_cap = 1e4;
  bool renormalize = true;
  bool project = true;
  bool adaptive = true;         // false: every alpha is fixed_alpha
  double fixed_alpha = 0.0;
  int refine_rounds = 0;        // extra passes accounting for cross-sticker coupling
  bool random_target_colors = false;  // baseline: target colors drawn at random
  std::uint64_t seed = 0;
};

/// Layers 5..7 of an 8-layer model, i.e. the last three below the final one.
inline std::vector<int> default_intervention_layers(int num_layers) {
  std::vector<int> out;
  for (int l = std::max(1, num_layers - 3); l <= num_layers - 1; ++l) out.push_back(l);
  return out;
}

struct InterventionResult {
  int complexity = 0;  // distance of the edited state
  int t = 0;
  std::array<double, kNumMoves> pre{};
  std::array<double, kNumMoves> post{};
  bool success = false;
  double mass_delta = 0;
  bool flagged = false;
  bool margins_ok = true;         // per-sticker inequality, before renormalization
  bool joint_margins_ok = true;   // same margins read off the full edited vector
  bool top1_changed = false;
  double norm_error = 0;          // | |edited| - |original| | / |original|
};

namespace detail {

inline std::array<double, kNumMoves> move_distribution(const auto& logits) {
  std::array<double, kNumMoves> p{};
  double mx = -std::numeric_limits<double>::infinity();
  for (int m = 0; m < kNumMoves; ++m) mx = std::max(mx, static_cast<double>(logits[kFirstMoveToken + m]));
  double z = 0;
  for (int m = 0; m < kNumMoves; ++m) z += (p[m] = std::exp(static_cast<double>(logits[kFirstMoveToken + m]) - mx));
  for (auto& v : p) v /= z;
  return p;
}

inline int argmax(const std::array<double, kNumMoves>& p) {
  return static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
}

inline bool margins_hold(const RowVec<float>& h, const Mat<float>& V, const std::array<Color, kNumStickers>& y, double m, double tol) {
  const RowVec<float> logits = h * V.transpose();
  for (int i = 0; i < kNumStickers; ++i) {
    const int yi = to_int(y[i]);
    for (int c = 0; c < kNumColors; ++c) {
      if (c != yi && logits[i * kNumColors + yi] < logits[i * kNumColors + c] + m - tol) return false;
    }
  }
  return true;
}

}  // namespace detail

/// Edits one residual vector in place. Returns flags for the result record.
struct EditOutcome {
  bool flagged = false;
  bool margins_ok = true;
  bool joint_margins_ok = true;
  double norm_error = 0;
};

inline EditOutcome edit_residual(Eigen::Ref<RowVec<float>> h, const Mat<float>& V, const CubeState& source,
                                 const std::array<Color, kNumStickers>& target, const InterventionConfig& cfg) {
  EditOutcome eo;
  const RowVec<float> orig = h;
  const double norm = orig.norm();
  Mat<float> src_rows(kNumStickers, V.cols()), tgt_rows(kNumStickers, V.cols());
  for (int i = 0; i < kNumStickers; ++i) {
    src_rows.row(i) = V.row(i * kNumColors + to_int(source.stickers[i]));
    tgt_rows.row(i) = V.row(i * kNumColors + to_int(target[i]));
  }
  RowVec<float> hp = cfg.project ? project_out(orig, src_rows) : orig;
  std::array<double, kNumStickers> alpha;
  alpha.fill(cfg.fixed_alpha);
  if (cfg.adaptive) {
    const auto a = adaptive_alphas(hp, V, target, cfg.margin, cfg.alpha_cap);
    alpha = a.alpha;
    eo.flagged = a.flagged;
  }
  auto combine = [&] {
    RowVec<float> out = hp;
    for (int i = 0; i < kNumStickers; ++i) out += static_cast<float>(alpha[i]) * tgt_rows.row(i);
    return out;
  };
  RowVec<float> edited = combine();
  // Optional refinement: re-solve each alpha with the other stickers' additions included.
  for (int round = 0; cfg.adaptive && round < cfg.refine_rounds; ++round) {
    for (int i = 0; i < kNumStickers; ++i) {
      RowVec<float> others = edited - static_cast<float>(alpha[i]) * tgt_rows.row(i);
      const auto a = adaptive_alphas(others, V, target, cfg.margin, cfg.alpha_cap);
      alpha[i] = a.alpha[i];
      edited = others + static_cast<float>(alpha[i]) * tgt_rows.row(i);
    }
  }
  if (cfg.adaptive && !eo.flagged) {
    // Per-sticker inequality as solved: sticker i's logits from hp plus its own addition.
    for (int i = 0; i < kNumStickers && eo.margins_ok; ++i) {
      const RowVec<float> hi = (cfg.refine_rounds > 0 ? RowVec<float>(edited) : RowVec<float>(hp + static_cast<float>(alpha[i]) * tgt_rows.row(i)));
      const RowVec<float> li = hi * V.middleRows(i * kNumColors, kNumColors).transpose();
      const int y = to_int(target[i]);
      for (int c = 0; c < kNumColors; ++c) {
        if (c != y && li[y] < li[c] + cfg.margin - 1e-4) eo.margins_ok = false;
      }
    }
    eo.joint_margins_ok = detail::margins_hold(edited, V, target, cfg.margin, 1e-4);
  }
  if (cfg.renormalize) {
    const double en = edited.norm();
    if (en > 0) edited *= static_cast<float>(norm / en);
  }
  eo.norm_error = norm > 0 ? std::abs(edited.norm() - norm) / norm : 0.0;
  h = edited;
  return eo;
}

/// Runs every sample once without and once with the edit, in batches.
inline std::vector<InterventionResult> run_interventions(const Transformer<float>& model, const ProbeSet& probes, const DistanceTable& tab,
                                                         std::span<const InterventionSample> samples, InterventionConfig cfg,
                                                         int batch = 256) {
  if (cfg.layers.empty()) cfg.layers = default_intervention_layers(model.config().layers);
  for (int l : cfg.layers) {
    if (l < 1 || l >= model.config().layers) throw ValidationError("intervention layer " + std::to_string(l) + " out of range");
  }
  std::vector<InterventionResult> out;
  out.reserve(samples.size());
  Rng color_rng(cfg.seed);
  std::uniform_int_distribution<int> color(0, kNumColors - 1);
  ForwardPass<float> fp;
  for (std::size_t begin = 0; begin < samples.size(); begin += static_cast<std::size_t>(batch)) {
    const auto part = samples.subspan(begin, std::min<std::size_t>(static_cast<std::size_t>(batch), samples.size() - begin));
    std::vector<std::vector<Token>> seqs;
    std::vector<std::array<Color, kNumStickers>> targets;
    for (const auto& s : part) {
      for (int l : cfg.layers) probes.at(l, s.t);
      auto seq = prompt_tokens(s.context.initial_state());
      for (int k = 0; k < s.t; ++k) seq.push_back(move_token(s.context.moves[static_cast<std::size_t>(k)]));
      seqs.push_back(std::move(seq));
      std::array<Color, kNumStickers> y = decode_index(s.target).stickers;
      if (cfg.random_target_colors) {
        for (auto& c : y) c = color_from_int(color(color_rng));
      }
      targets.push_back(y);
    }
    const auto tb = make_batch(seqs);
    auto row_of = [&](std::size_t b) { return static_cast<int>(b) * tb.seq_len + kFirstDecisionPosition + part[b].t; };

    fp.run(model, tb);
    std::vector<std::array<double, kNumMoves>> pre;
    for (std::size_t b = 0; b < part.size(); ++b) pre.push_back(detail::move_distribution(fp.move_logits().row(row_of(b))));

    std::vector<EditOutcome> outcomes(part.size());
    ForwardOptions<float> opts;
    opts.hook = [&](int layer, Mat<float>& h) {
      if (std::find(cfg.layers.begin(), cfg.layers.end(), layer) == cfg.layers.end()) return;
      for (std::size_t b = 0; b < part.size(); ++b) {
        const auto& V = probes.at(layer, part[b].t).V;
        const auto eo = edit_residual(h.row(row_of(b)), V, decode_index(part[b].source), targets[b], cfg);
        auto& acc = outcomes[b];
        acc.flagged |= eo.flagged;
        acc.margins_ok &= eo.margins_ok;
        acc.joint_margins_ok &= eo.joint_margins_ok;
        acc.norm_error = std::max(acc.norm_error, eo.norm_error);
      }
    };
    fp.run(model, tb, opts);
    for (std::size_t b = 0; b < part.size(); ++b) {
      InterventionResult r;
      r.complexity = tab.at(part[b].source);
      r.t = part[b].t;
      r.pre = pre[b];
      r.post = detail::move_distribution(fp.move_logits().row(row_of(b)));
      const auto good = tab.good_move_mask(part[b].target);
      const int top = detail::argmax(r.post);
      r.success = (good >> top) & 1;
      r.top1_changed = top != detail::argmax(r.pre);
      for (int m = 0; m < kNumMoves; ++m) {
        if ((good >> m) & 1) r.mass_delta += r.post[m] - r.pre[m];
      }
      r.flagged = outcomes[b].flagged;
      r.margins_ok = outcomes[b].margins_ok;
      r.joint_margins_ok = outcomes[b].joint_margins_ok;
      r.norm_error = outcomes[b].norm_error;
      out.push_back(r);
    }
  }
  return out;
}

struct InterventionBucket {
  long count = 0;
  long successes = 0;
  double mass_delta_sum = 0;
  long flagged = 0;
  long margins_ok = 0;        // among non-flagged
  long joint_margins_ok = 0;  // among non-flagged
  long top1_changed = 0;

  double success_rate() const { return count ? static_cast<double>(successes) / static_cast<double>(count) : 0.0; }
  double mean_mass_delta() const { return count ? mass_delta_sum / static_cast<double>(count) : 0.0; }
  long unflagged() const { return count - flagged; }
};

/// Per complexity (index 0..11) plus the pooled total at index 12.
inline std::array<InterventionBucket, kGodsNumber + 2> intervention_metrics(std::span<const InterventionResult> results) {
  std::array<InterventionBucket, kGodsNumber + 2> out{};
  for (const auto& r : results) {
    for (auto* b : {&out[static_cast<std::size_t>(r.complexity)], &out[kGodsNumber + 1]}) {
      ++b->count;
      b->successes += r.success;
      b->mass_delta_sum += r.mass_delta;
      b->flagged += r.flagged;
      b->margins_ok += !r.flagged && r.margins_ok;
      b->joint_margins_ok += !r.flagged && r.joint_margins_ok;
      b->top1_changed += r.top1_changed;
    }
  }
  return out;
}

}  // namespace cubeworld
