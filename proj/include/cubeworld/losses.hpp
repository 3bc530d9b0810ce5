#pragma once

// Supervised objectives:
//   next-move  - mean cross-entropy of the move head over move/EOS targets
//   state      - per supervised position, sum over the 24 stickers of the
//                state-head cross-entropy; averaged over positions
//   joint      - weighted sum of the two (unit weights by default)
//
// Position convention: timestep t (moves consumed so far) lives at token
// position 23 + t, so t = 0 is the last color token.

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "cubeworld/model.hpp"

namespace cubeworld {

struct Example {
  std::vector<Token> inputs;             // prompt + moves; the trailing EOS is only a target
  std::vector<std::int8_t> move_target;  // per position, -1 when unsupervised
  std::vector<CubeState> states;         // states[t] is supervised at position 23 + t
};

/// Solution trajectories supervise moves and EOS; both kinds supervise states.
inline Example make_example(const Trajectory& traj) {
  Example ex;
  CubeState s = traj.initial_state();
  ex.inputs = prompt_tokens(s);
  ex.states.push_back(s);
  for (auto m : traj.moves) {
    ex.inputs.push_back(move_token(m));
    s = apply_move(s, m);
    ex.states.push_back(s);
  }
  ex.move_target.assign(ex.inputs.size(), -1);
  if (traj.kind == TrajectoryKind::kSolution) {
    for (std::size_t k = 0; k < traj.moves.size(); ++k) {
      ex.move_target[kFirstDecisionPosition + k] = static_cast<std::int8_t>(move_token(traj.moves[k]));
    }
    ex.move_target[kFirstDecisionPosition + traj.moves.size()] = kEosToken;
  }
  return ex;
}

inline std::vector<Example> make_examples(std::span<const Trajectory> trajs) {
  std::vector<Example> out;
  out.reserve(trajs.size());
  for (const auto& t : trajs) out.push_back(make_example(t));
  return out;
}

struct LossWeights {
  double move = 1.0;
  double state = 0.0;
};

inline constexpr LossWeights kNextMoveLoss{1.0, 0.0};
inline constexpr LossWeights kStateLoss{0.0, 1.0};
inline constexpr LossWeights kJointLoss{1.0, 1.0};

struct LossBreakdown {
  double total = 0;
  double move = 0;   // unweighted next-move loss
  double state = 0;  // unweighted state loss
  long move_count = 0;
  long state_count = 0;
  long state_correct = 0;  // argmax-correct sticker predictions, for accuracy reporting
};

namespace detail {

template <class Row>
double log_sum_exp(const Row& logits) {
  const double mx = static_cast<double>(logits.maxCoeff());
  double z = 0;
  for (Eigen::Index c = 0; c < logits.size(); ++c) z += std::exp(static_cast<double>(logits[c]) - mx);
  return mx + std::log(z);
}

template <class Row>
double cross_entropy(const Row& logits, int target) {
  return log_sum_exp(logits) - static_cast<double>(logits[target]);
}

/// Cross-entropy of one logit row; writes gscale * (softmax - onehot) into `grad`.
template <class Row, class GradRow>
double cross_entropy(const Row& logits, int target, double gscale, GradRow&& grad) {
  using T = typename std::decay_t<GradRow>::Scalar;
  const double lse = log_sum_exp(logits);
  for (Eigen::Index c = 0; c < logits.size(); ++c) {
    const double p = std::exp(static_cast<double>(logits[c]) - lse);
    grad[c] = static_cast<T>(gscale * (p - (c == target ? 1.0 : 0.0)));
  }
  return lse - static_cast<double>(logits[target]);
}

}  // namespace detail

/// Evaluates the weighted objective over `examples`, processing `micro_batch`
/// sequences per forward pass. When `grads` is non-null the gradient of the
/// total is accumulated into it.
template <class T>
LossBreakdown compute_loss(const Transformer<T>& model, std::span<const Example> examples, LossWeights w,
                           Gradients<T>* grads = nullptr, int micro_batch = 64) {
  LossBreakdown out;
  for (const auto& ex : examples) {
    for (auto t : ex.move_target) out.move_count += t >= 0;
    out.state_count += static_cast<long>(ex.states.size());
  }
  const bool want_move = w.move != 0.0, want_state = w.state != 0.0;
  if (want_move && out.move_count == 0) throw ValidationError("next-move loss over an empty mask");
  if (want_state && out.state_count == 0) throw ValidationError("state loss without supervised positions");

  ForwardPass<T> fp;
  for (std::size_t begin = 0; begin < examples.size(); begin += static_cast<std::size_t>(micro_batch)) {
    const auto chunk = examples.subspan(begin, std::min<std::size_t>(static_cast<std::size_t>(micro_batch), examples.size() - begin));
    std::vector<std::vector<Token>> seqs;
    for (const auto& ex : chunk) seqs.push_back(ex.inputs);
    const TokenBatch tb = make_batch(seqs);
    ForwardOptions<T> opts;
    opts.move_logits = want_move;
    opts.state_logits = want_state;
    opts.for_backward = grads != nullptr;
    fp.run(model, tb, opts);

    Mat<T> dmove, dstate;
    if (grads && want_move) dmove = Mat<T>::Zero(fp.move_logits().rows(), fp.move_logits().cols());
    if (grads && want_state) dstate = Mat<T>::Zero(fp.state_logits().rows(), fp.state_logits().cols());
    for (std::size_t b = 0; b < chunk.size(); ++b) {
      const auto& ex = chunk[b];
      const int row0 = static_cast<int>(b) * tb.seq_len;
      if (want_move) {
        const double g = w.move / static_cast<double>(out.move_count);
        for (std::size_t p = 0; p < ex.move_target.size(); ++p) {
          if (ex.move_target[p] < 0) continue;
          const auto r = row0 + static_cast<int>(p);
          auto logits = fp.move_logits().row(r);
          out.move += grads ? detail::cross_entropy(logits, ex.move_target[p], g, dmove.row(r))
                            : detail::cross_entropy(logits, ex.move_target[p]);
        }
      }
      if (want_state) {
        const double g = w.state / static_cast<double>(out.state_count);
        for (std::size_t t = 0; t < ex.states.size(); ++t) {
          const auto r = row0 + kFirstDecisionPosition + static_cast<int>(t);
          for (int i = 0; i < kNumStickers; ++i) {
            auto logits = fp.state_logits().row(r).segment(i * kNumColors, kNumColors);
            const int target = to_int(ex.states[t].stickers[i]);
            Eigen::Index best;
            logits.maxCoeff(&best);
            out.state_correct += best == target;
            out.state += grads ? detail::cross_entropy(logits, target, g, dstate.row(r).segment(i * kNumColors, kNumColors))
                               : detail::cross_entropy(logits, target);
          }
        }
      }
    }
    if (grads) fp.backward(model, dmove, dstate, *grads);
  }
  if (out.move_count > 0) out.move /= static_cast<double>(out.move_count);
  if (out.state_count > 0) out.state /= static_cast<double>(out.state_count);
  out.total = (want_move ? w.move * out.move : 0.0) + (want_state ? w.state * out.state : 0.0);
  if (!std::isfinite(out.total)) throw DivergenceError("non-finite loss");
  return out;
}

template <class T>
double loss_ft(const Transformer<T>& m, std::span<const Example> batch, Gradients<T>* g = nullptr) {
  return compute_loss(m, batch, kNextMoveLoss, g).total;
}
template <class T>
double loss_pt(const Transformer<T>& m, std::span<const Example> batch, Gradients<T>* g = nullptr) {
  return compute_loss(m, batch, kStateLoss, g).total;
}
template <class T>
double loss_joint(const Transformer<T>& m, std::span<const Example> batch, Gradients<T>* g = nullptr) {
  return compute_loss(m, batch, kJointLoss, g).total;
}

}  // namespace cubeworld
