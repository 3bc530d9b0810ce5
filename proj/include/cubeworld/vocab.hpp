#pragma once

// Fixed 17-symbol vocabulary:
//   0..5    colors (same ids as Color)
//   6..14   moves, in Move::id() order (U U2 U' R R2 R' F F2 F')
//   15      EOS
//   16      PAD

#include <array>
#include <cstdint>
#include <optional>
#include <vector>

#include "cubeworld/datagen.hpp"

namespace cubeworld {

inline constexpr int kVocabSize = 17;
inline constexpr int kFirstMoveToken = 6;
inline constexpr int kEosToken = 15;
inline constexpr int kPadToken = 16;
inline constexpr int kPromptLength = kNumStickers;
/// Position whose output predicts the first move (the last color token).
inline constexpr int kFirstDecisionPosition = kPromptLength - 1;

using Token = std::uint8_t;

constexpr Token color_token(Color c) { return static_cast<Token>(to_int(c)); }
constexpr Token move_token(Move m) { return static_cast<Token>(kFirstMoveToken + m.id()); }
constexpr bool is_move_token(int t) { return t >= kFirstMoveToken && t < kFirstMoveToken + kNumMoves; }
constexpr bool is_color_token(int t) { return t >= 0 && t < kNumColors; }
constexpr Move token_move(int t) { return Move::from_id(t - kFirstMoveToken); }

/// Move tokens and EOS: the only symbols the decoder may emit.
constexpr bool is_action_token(int t) { return is_move_token(t) || t == kEosToken; }

/// A tokenized trajectory. `loss_mask[p]` marks positions whose token is a
/// next-move target (move or EOS), i.e. predicted from position p - 1.
struct TokenSequence {
  std::vector<Token> tokens;
  std::vector<std::uint8_t> loss_mask;
  int length = 0;  // tokens before padding
};

inline std::vector<Token> prompt_tokens(const CubeState& s) {
  std::vector<Token> t(kPromptLength);
  for (int i = 0; i < kNumStickers; ++i) t[i] = color_token(s.stickers[i]);
  return t;
}

/// Solution trajectories end with EOS; random-move trajectories do not.
/// Pads with PAD up to `pad_to` when it is larger than the sequence.
inline TokenSequence tokenize(const Trajectory& traj, int max_length, int pad_to = 0) {
  TokenSequence seq;
  seq.tokens = prompt_tokens(traj.initial_state());
  for (auto m : traj.moves) seq.tokens.push_back(move_token(m));
  if (traj.kind == TrajectoryKind::kSolution) seq.tokens.push_back(kEosToken);
  seq.length = static_cast<int>(seq.tokens.size());
  if (seq.length > max_length) {
    throw ValidationError("trajectory of " + std::to_string(traj.moves.size()) + " moves exceeds max sequence length " +
                          std::to_string(max_length));
  }
  seq.loss_mask.assign(seq.tokens.size(), 0);
  for (int p = kPromptLength; p < seq.length; ++p) seq.loss_mask[p] = 1;
  if (pad_to > seq.length) {
    seq.tokens.resize(static_cast<std::size_t>(pad_to), kPadToken);
    seq.loss_mask.resize(static_cast<std::size_t>(pad_to), 0);
  }
  return seq;
}

inline Trajectory detokenize(const TokenSequence& seq) {
  if (seq.length < kPromptLength) throw ValidationError("sequence shorter than the prompt");
  CubeState s;
  for (int i = 0; i < kNumStickers; ++i) {
    if (!is_color_token(seq.tokens[i])) throw ValidationError("non-color token in prompt");
    s.stickers[i] = static_cast<Color>(seq.tokens[i]);
  }
  Trajectory traj{encode_index(s), {}, TrajectoryKind::kRandom};
  for (int p = kPromptLength; p < seq.length; ++p) {
    const int t = seq.tokens[p];
    if (t == kEosToken) {
      traj.kind = TrajectoryKind::kSolution;
      if (p != seq.length - 1) throw ValidationError("tokens after EOS");
      break;
    }
    if (!is_move_token(t)) throw ValidationError("unexpected token after prompt");
    traj.moves.push_back(token_move(t));
  }
  return traj;
}

}  // namespace cubeworld
