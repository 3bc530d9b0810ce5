#pragma once

// Batched autoregressive decoding with a key/value cache. All sequences in a
// batch advance in lockstep from the 24-token prompt; emitted symbols are
// restricted to the nine moves and EOS.

#include <random>
#include <span>
#include <vector>

#include "cubeworld/distance_table.hpp"
#include "cubeworld/model.hpp"

namespace cubeworld {

/// Log-softmax over the action tokens (moves + EOS) of one logit row; other
/// entries are -inf.
template <class Row>
std::array<double, kVocabSize> action_log_probs(const Row& logits, double temperature = 1.0) {
  std::array<double, kVocabSize> out;
  double mx = -std::numeric_limits<double>::infinity();
  for (int c = 0; c < kVocabSize; ++c) {
    if (is_action_token(c)) mx = std::max(mx, static_cast<double>(logits[c]) / temperature);
  }
  double z = 0;
  for (int c = 0; c < kVocabSize; ++c) {
    if (is_action_token(c)) z += std::exp(static_cast<double>(logits[c]) / temperature - mx);
  }
  const double lz = mx + std::log(z);
  for (int c = 0; c < kVocabSize; ++c) {
    out[c] = is_action_token(c) ? static_cast<double>(logits[c]) / temperature - lz : -std::numeric_limits<double>::infinity();
  }
  return out;
}

/// Incremental forward pass: feed one token per sequence per call.
template <class T>
class KvDecoder {
 public:
  KvDecoder(const Transformer<T>& model, int batch) : model_(&model), batch_(batch) {
    const auto& c = model.config();
    k_.assign(static_cast<std::size_t>(c.layers), Mat<T>::Zero(static_cast<Eigen::Index>(batch) * c.max_seq_len, c.d_model));
    v_ = k_;
  }

  int position() const { return pos_; }

  /// Consumes tokens[b] at the next position; returns move logits [batch, 17].
  const Mat<T>& step(std::span<const Token> tokens) {
    const auto& c = model_->config();
    const auto& L = model_->layout();
    if (static_cast<int>(tokens.size()) != batch_) throw ValidationError("decoder step: wrong batch size");
    if (pos_ >= c.max_seq_len) throw ValidationError("decoder ran past max_seq_len");
    const int d = c.d_model, H = c.heads, dh = c.head_dim(), S = c.max_seq_len, n = pos_ + 1;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));

    Mat<T> x(batch_, d);
    for (int b = 0; b < batch_; ++b) x.row(b) = model_->tensor(L.tok_emb).row(tokens[b]) + model_->tensor(L.pos_emb).row(pos_);
    Mat<T> ln, qkv, att(batch_, d), fc, act, th;
    RowVec<T> mean, rstd;
    RowVec<T> scores(n);
    for (int l = 0; l < c.layers; ++l) {
      const auto& bt = L.blocks[static_cast<std::size_t>(l)];
      auto& K = k_[static_cast<std::size_t>(l)];
      auto& V = v_[static_cast<std::size_t>(l)];
      detail::layernorm_forward(x, model_->tensor(bt.ln1_g), model_->tensor(bt.ln1_b), ln, mean, rstd);
      qkv.noalias() = ln * model_->tensor(bt.w_qkv);
      qkv.rowwise() += model_->tensor(bt.b_qkv).row(0);
      for (int b = 0; b < batch_; ++b) {
        K.row(b * S + pos_) = qkv.row(b).segment(d, d);
        V.row(b * S + pos_) = qkv.row(b).segment(2 * d, d);
        for (int h = 0; h < H; ++h) {
          const auto q = qkv.row(b).segment(h * dh, dh);
          const auto kb = K.block(b * S, h * dh, n, dh);
          const auto vb = V.block(b * S, h * dh, n, dh);
          scores.noalias() = (q * kb.transpose()) * scale;
          const T mx = scores.maxCoeff();
          scores = (scores.array() - mx).exp().matrix();
          scores /= scores.sum();
          att.row(b).segment(h * dh, dh).noalias() = scores * vb;
        }
      }
      x.noalias() += att * model_->tensor(bt.w_o);
      x.rowwise() += model_->tensor(bt.b_o).row(0);
      detail::layernorm_forward(x, model_->tensor(bt.ln2_g), model_->tensor(bt.ln2_b), ln, mean, rstd);
      fc.noalias() = ln * model_->tensor(bt.w_fc);
      fc.rowwise() += model_->tensor(bt.b_fc).row(0);
      detail::gelu_forward(fc, act, th);
      x.noalias() += act * model_->tensor(bt.w_proj);
      x.rowwise() += model_->tensor(bt.b_proj).row(0);
    }
    detail::layernorm_forward(x, model_->tensor(L.lnf_g), model_->tensor(L.lnf_b), ln, mean, rstd);
    logits_.noalias() = ln * model_->tensor(L.unembed).transpose();
    ++pos_;
    return logits_;
  }

 private:
  const Transformer<T>* model_;
  int batch_;
  int pos_ = 0;
  std::vector<Mat<T>> k_, v_;
  Mat<T> logits_;
};

enum class DecodeMode { kGreedy, kSample };

struct DecodeOptions {
  DecodeMode mode = DecodeMode::kGreedy;
  double temperature = 1.0;
  int max_moves = kGodsNumber;
  /// Append EOS (marked as forced) when a completion hits max_moves without one.
  bool force_eos = false;
};

struct Completion {
  std::vector<Token> tokens;        // generated symbols, EOS included when present
  std::vector<std::uint8_t> forced; // 1 for tokens appended rather than chosen
  bool ended = false;               // an EOS was generated or forced

  MoveSequence moves() const {
    MoveSequence out;
    for (auto t : tokens) {
      if (!is_move_token(t)) break;
      out.push_back(token_move(t));
    }
    return out;
  }
};

/// Decodes every prompt; `max_moves` may be overridden per prompt. Greedy ties
/// resolve to the lowest token id. Sampling draws prompts in order from `rng`.
template <class T>
std::vector<Completion> decode_batch(const Transformer<T>& model, std::span<const CubeState> prompts, const DecodeOptions& opts,
                                     Rng* rng = nullptr, std::span<const int> max_moves = {}) {
  const int B = static_cast<int>(prompts.size());
  std::vector<Completion> out(static_cast<std::size_t>(B));
  if (B == 0) return out;
  if (opts.mode == DecodeMode::kSample && rng == nullptr) throw ValidationError("sampling requires an rng");
  std::vector<int> limit(static_cast<std::size_t>(B), opts.max_moves);
  if (!max_moves.empty()) {
    if (static_cast<int>(max_moves.size()) != B) throw ValidationError("max_moves size mismatch");
    limit.assign(max_moves.begin(), max_moves.end());
  }
  const int budget = model.config().max_seq_len - kPromptLength + 1;  // generated tokens that fit
  int longest = 0;
  for (auto& m : limit) {
    m = std::clamp(m, 0, budget - 1);
    longest = std::max(longest, m);
  }
  if (longest == 0) {
    for (auto& c : out) {
      if (opts.force_eos) {
        c.tokens.push_back(kEosToken);
        c.forced.push_back(1);
        c.ended = true;
      }
    }
    return out;
  }

  KvDecoder<T> dec(model, B);
  std::vector<Token> feed(static_cast<std::size_t>(B));
  const Mat<T>* logits = nullptr;
  for (int p = 0; p < kPromptLength; ++p) {
    for (int b = 0; b < B; ++b) feed[b] = color_token(prompts[b].stickers[p]);
    logits = &dec.step(feed);
  }
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  for (int k = 0;; ++k) {
    bool any_open = false;
    for (int b = 0; b < B; ++b) {
      auto& c = out[b];
      feed[b] = kPadToken;
      if (c.ended || static_cast<int>(c.tokens.size()) >= limit[b]) continue;
      const auto lp = action_log_probs(logits->row(b), opts.mode == DecodeMode::kSample ? opts.temperature : 1.0);
      int choice = kEosToken;
      if (opts.mode == DecodeMode::kGreedy) {
        double best = -std::numeric_limits<double>::infinity();
        for (int t = 0; t < kVocabSize; ++t) {
          if (lp[t] > best) {
            best = lp[t];
            choice = t;
          }
        }
      } else {
        double u = unif(*rng), acc = 0;
        for (int t = 0; t < kVocabSize; ++t) {
          if (!is_action_token(t)) continue;
          acc += std::exp(lp[t]);
          choice = t;
          if (u < acc) break;
        }
      }
      c.tokens.push_back(static_cast<Token>(choice));
      c.forced.push_back(0);
      if (choice == kEosToken) {
        c.ended = true;
      } else {
        feed[b] = static_cast<Token>(choice);
        if (static_cast<int>(c.tokens.size()) < limit[b]) any_open = true;
      }
    }
    if (!any_open) break;
    logits = &dec.step(feed);
  }
  if (opts.force_eos) {
    for (auto& c : out) {
      if (!c.ended) {
        c.tokens.push_back(kEosToken);
        c.forced.push_back(1);
        c.ended = true;
      }
    }
  }
  return out;
}

template <class T>
MoveSequence decode(const Transformer<T>& model, const CubeState& state, const DecodeOptions& opts, Rng* rng = nullptr) {
  return decode_batch(model, std::span<const CubeState>(&state, 1), opts, rng).front().moves();
}

}  // namespace cubeworld
