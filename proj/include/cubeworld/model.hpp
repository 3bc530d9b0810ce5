#pragma once

// Decoder-only transformer with pre-norm blocks, learned positions, GELU MLP,
// an untied move unembedding and 24 per-sticker state heads.
//
// Hidden-state convention: h^0 is the embedding sum, h^l (l = 1..L) is the
// residual stream after block l. Both output heads read LayerNorm(h^L).
//
// Gradients are written by hand, layer by layer, and checked against central
// finite differences in the tests.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "cubeworld/error.hpp"
#include "cubeworld/vocab.hpp"

namespace cubeworld {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<Mat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const Mat<T>>;
template <class T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;

inline constexpr int kStateLogits = kNumStickers * kNumColors;

struct ModelConfig {
  int layers = 8;
  int heads = 8;
  int d_model = 512;
  // 24 + 11 + 1 = 36 covers every training sequence; two extra positions let
  // evaluation emit up to N + 3 moves for N = 11.
  int max_seq_len = kPromptLength + kGodsNumber + 3;
  std::uint64_t seed = 0;
  double init_std = 0.02;

  int d_ff() const { return 4 * d_model; }
  int head_dim() const { return d_model / heads; }

  void validate() const {
    if (layers < 1 || heads < 1 || d_model < 1) throw ValidationError("model dimensions must be positive");
    if (d_model % heads != 0) throw ValidationError("d_model must be divisible by the number of heads");
    if (max_seq_len < kPromptLength + kGodsNumber + 1) throw ValidationError("max_seq_len must be at least 36");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Full-size architecture.
inline ModelConfig full_model_config() { return ModelConfig{}; }

/// Default desk-scale architecture.
inline ModelConfig desk_model_config() {
  ModelConfig c;
  c.layers = 3;
  c.heads = 4;
  c.d_model = 128;
  return c;
}

struct TensorInfo {
  std::string name;
  int rows = 0;
  int cols = 0;
  std::size_t offset = 0;
  bool is_matrix = false;  // initialized with Gaussian noise (vs. gain/bias)

  std::size_t size() const { return static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols); }
};

struct BlockTensors {
  int ln1_g, ln1_b, w_qkv, b_qkv, w_o, b_o, ln2_g, ln2_b, w_fc, b_fc, w_proj, b_proj;
};

/// Names, shapes and offsets of every tensor inside the flat parameter buffer.
class ParamLayout {
 public:
  explicit ParamLayout(const ModelConfig& c) {
    c.validate();
    const int d = c.d_model, f = c.d_ff();
    tok_emb = add("tok_emb", kVocabSize, d, true);
    pos_emb = add("pos_emb", c.max_seq_len, d, true);
    for (int l = 0; l < c.layers; ++l) {
      const std::string p = "block" + std::to_string(l + 1) + ".";
      BlockTensors b{};
      b.ln1_g = add(p + "ln1.gain", 1, d, false);
      b.ln1_b = add(p + "ln1.bias", 1, d, false);
      b.w_qkv = add(p + "attn.w_qkv", d, 3 * d, true);
      b.b_qkv = add(p + "attn.b_qkv", 1, 3 * d, false);
      b.w_o = add(p + "attn.w_out", d, d, true);
      b.b_o = add(p + "attn.b_out", 1, d, false);
      b.ln2_g = add(p + "ln2.gain", 1, d, false);
      b.ln2_b = add(p + "ln2.bias", 1, d, false);
      b.w_fc = add(p + "mlp.w_fc", d, f, true);
      b.b_fc = add(p + "mlp.b_fc", 1, f, false);
      b.w_proj = add(p + "mlp.w_proj", f, d, true);
      b.b_proj = add(p + "mlp.b_proj", 1, d, false);
      blocks.push_back(b);
    }
    lnf_g = add("ln_final.gain", 1, d, false);
    lnf_b = add("ln_final.bias", 1, d, false);
    unembed = add("unembed", kVocabSize, d, true);
    state_heads = add("state_heads", kStateLogits, d, true);
  }

  const std::vector<TensorInfo>& tensors() const { return tensors_; }
  std::size_t total() const { return total_; }

  int find(const std::string& name) const {
    for (std::size_t i = 0; i < tensors_.size(); ++i) {
      if (tensors_[i].name == name) return static_cast<int>(i);
    }
    throw Error("no tensor named " + name);
  }

  int tok_emb, pos_emb, lnf_g, lnf_b, unembed, state_heads;
  std::vector<BlockTensors> blocks;

 private:
  int add(std::string name, int rows, int cols, bool matrix) {
    tensors_.push_back({std::move(name), rows, cols, total_, matrix});
    total_ += tensors_.back().size();
    return static_cast<int>(tensors_.size() - 1);
  }

  std::vector<TensorInfo> tensors_;
  std::size_t total_ = 0;
};

/// Model weights in one flat buffer; tensors are row-major views into it.
template <class T>
class Transformer {
 public:
  using Scalar = T;

  explicit Transformer(const ModelConfig& config) : config_(config), layout_(config), params_(layout_.total(), T(0)) {
    std::mt19937_64 rng(config.seed);
    std::normal_distribution<double> normal(0.0, config.init_std);
    for (const auto& t : layout_.tensors()) {
      auto* p = params_.data() + t.offset;
      const bool gain = t.name.ends_with(".gain");
      for (std::size_t k = 0; k < t.size(); ++k) {
        p[k] = t.is_matrix ? static_cast<T>(normal(rng)) : (gain ? T(1) : T(0));
      }
    }
  }

  const ModelConfig& config() const { return config_; }
  const ParamLayout& layout() const { return layout_; }

  std::vector<T>& params() { return params_; }
  const std::vector<T>& params() const { return params_; }

  MatMap<T> tensor(int id) {
    const auto& t = layout_.tensors()[static_cast<std::size_t>(id)];
    return MatMap<T>(params_.data() + t.offset, t.rows, t.cols);
  }
  ConstMatMap<T> tensor(int id) const {
    const auto& t = layout_.tensors()[static_cast<std::size_t>(id)];
    return ConstMatMap<T>(params_.data() + t.offset, t.rows, t.cols);
  }

  template <class U>
  Transformer<U> cast() const {
    Transformer<U> out(config_);
    for (std::size_t i = 0; i < params_.size(); ++i) out.params()[i] = static_cast<U>(params_[i]);
    return out;
  }

  bool all_finite() const {
    for (auto v : params_) {
      if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
  }

 private:
  ModelConfig config_;
  ParamLayout layout_;
  std::vector<T> params_;
};

/// Gradient buffer with the same layout as the parameters.
template <class T>
struct Gradients {
  explicit Gradients(const ParamLayout& l) : layout(l), data(l.total(), T(0)) {}

  MatMap<T> tensor(int id) {
    const auto& t = layout.tensors()[static_cast<std::size_t>(id)];
    return MatMap<T>(data.data() + t.offset, t.rows, t.cols);
  }
  void zero() { std::fill(data.begin(), data.end(), T(0)); }

  /// Throws DivergenceError naming the first tensor with a non-finite entry.
  void check_finite() const {
    for (const auto& t : layout.tensors()) {
      for (std::size_t k = 0; k < t.size(); ++k) {
        if (!std::isfinite(static_cast<double>(data[t.offset + k]))) {
          throw DivergenceError("non-finite gradient in " + t.name + " at element " + std::to_string(k));
        }
      }
    }
  }

  ParamLayout layout;
  std::vector<T> data;
};

/// Row-major [batch, seq_len] token ids; shorter sequences are PAD-filled.
struct TokenBatch {
  int batch = 0;
  int seq_len = 0;
  std::vector<Token> tokens;

  Token at(int b, int t) const { return tokens[static_cast<std::size_t>(b * seq_len + t)]; }
};

inline TokenBatch make_batch(std::span<const std::vector<Token>> seqs) {
  TokenBatch tb;
  tb.batch = static_cast<int>(seqs.size());
  for (const auto& s : seqs) tb.seq_len = std::max(tb.seq_len, static_cast<int>(s.size()));
  tb.tokens.assign(static_cast<std::size_t>(tb.batch * tb.seq_len), kPadToken);
  for (int b = 0; b < tb.batch; ++b) std::copy(seqs[b].begin(), seqs[b].end(), tb.tokens.begin() + b * tb.seq_len);
  return tb;
}

/// Residual-stream edit applied right after block `layer` (1-based). `h` holds
/// all batch*seq_len rows; row b * seq_len + t is position t of sequence b.
template <class T>
using ResidualHook = std::function<void(int layer, Mat<T>& h)>;

template <class T>
struct ForwardOptions {
  bool move_logits = true;
  bool state_logits = false;
  bool for_backward = false;        // keep the intermediates backward() needs
  std::vector<int> capture_layers;  // 0..L
  ResidualHook<T> hook;
};

namespace detail {

inline constexpr double kLayerNormEps = 1e-5;

template <class T>
void layernorm_forward(const Mat<T>& x, const ConstMatMap<T>& g, const ConstMatMap<T>& b, Mat<T>& out, RowVec<T>& mean,
                       RowVec<T>& rstd) {
  const auto d = static_cast<T>(x.cols());
  mean = (x.rowwise().sum() / d).transpose();
  out = x.colwise() - mean.transpose();
  rstd = ((out.array().square().rowwise().sum() / d + static_cast<T>(kLayerNormEps)).rsqrt()).transpose();
  out.array().colwise() *= rstd.transpose().array();
  out.array().rowwise() *= g.row(0).array();
  out.rowwise() += b.row(0);
}

template <class T>
void layernorm_backward(const Mat<T>& dout, const Mat<T>& x, const ConstMatMap<T>& g, const RowVec<T>& mean,
                        const RowVec<T>& rstd, Mat<T>& dx_accum, MatMap<T> dg, MatMap<T> db) {
  const auto d = static_cast<T>(x.cols());
  Mat<T> xhat = x.colwise() - mean.transpose();
  xhat.array().colwise() *= rstd.transpose().array();
  dg.row(0) += (dout.array() * xhat.array()).colwise().sum().matrix();
  db.row(0) += dout.colwise().sum();
  Mat<T> dxhat = dout;
  dxhat.array().rowwise() *= g.row(0).array();
  const auto m1 = (dxhat.rowwise().sum() / d).eval();
  const auto m2 = ((dxhat.array() * xhat.array()).rowwise().sum() / d).eval();
  dxhat.colwise() -= m1;
  dxhat.array() -= xhat.array().colwise() * m2.array();
  dxhat.array().colwise() *= rstd.transpose().array();
  dx_accum += dxhat;
}

// GELU, tanh approximation. `th` receives the tanh term for the backward pass.
template <class T>
void gelu_forward(const Mat<T>& x, Mat<T>& out, Mat<T>& th) {
  const T c = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  const T k = static_cast<T>(0.044715);
  th = (c * (x.array() + k * x.array().cube())).tanh().matrix();
  out = (T(0.5) * x.array() * (T(1) + th.array())).matrix();
}

template <class T>
void gelu_backward(const Mat<T>& x, const Mat<T>& th, Mat<T>& grad_inout) {
  const T c = static_cast<T>(0.7978845608028654);
  const T k = static_cast<T>(0.044715);
  grad_inout.array() *= T(0.5) * (T(1) + th.array()) +
                        T(0.5) * x.array() * (T(1) - th.array().square()) * c * (T(1) + T(3) * k * x.array().square());
}

}  // namespace detail

/// One forward evaluation over a TokenBatch; holds what backward() needs.
template <class T>
class ForwardPass {
 public:
  void run(const Transformer<T>& model, const TokenBatch& batch, const ForwardOptions<T>& opts = {}) {
    const auto& c = model.config();
    const auto& L = model.layout();
    if (batch.seq_len > c.max_seq_len) throw ValidationError("batch longer than max_seq_len");
    if (static_cast<int>(batch.tokens.size()) != batch.batch * batch.seq_len) throw ValidationError("token batch shape mismatch");
    batch_ = batch;
    keep_ = opts.for_backward;
    const int N = batch.batch * batch.seq_len, d = c.d_model;

    Mat<T> x(N, d);
    const auto E = model.tensor(L.tok_emb);
    const auto P = model.tensor(L.pos_emb);
    for (int b = 0; b < batch.batch; ++b) {
      for (int t = 0; t < batch.seq_len; ++t) {
        const int tok = batch.at(b, t);
        if (tok >= kVocabSize) throw ValidationError("token id out of range");
        x.row(b * batch.seq_len + t) = E.row(tok) + P.row(t);
      }
    }
    captured_.clear();
    auto capture = [&](int layer, const Mat<T>& h) {
      if (std::find(opts.capture_layers.begin(), opts.capture_layers.end(), layer) != opts.capture_layers.end()) {
        captured_[layer] = h;
      }
    };
    capture(0, x);

    blocks_.assign(keep_ ? static_cast<std::size_t>(c.layers) : 0, {});
    BlockCache scratch;
    for (int l = 0; l < c.layers; ++l) {
      BlockCache& bc = keep_ ? blocks_[static_cast<std::size_t>(l)] : scratch;
      block_forward(model, l, x, bc);
      if (opts.hook) opts.hook(l + 1, x);
      capture(l + 1, x);
    }
    final_in_ = std::move(x);
    detail::layernorm_forward(final_in_, model.tensor(L.lnf_g), model.tensor(L.lnf_b), final_out_, final_mean_, final_rstd_);
    if (opts.move_logits) move_logits_.noalias() = final_out_ * model.tensor(L.unembed).transpose();
    else move_logits_.resize(0, 0);
    if (opts.state_logits) state_logits_.noalias() = final_out_ * model.tensor(L.state_heads).transpose();
    else state_logits_.resize(0, 0);
  }

  /// [batch*seq_len, 17]
  const Mat<T>& move_logits() const { return move_logits_; }
  /// [batch*seq_len, 24*6]; sticker i owns columns 6i..6i+5.
  const Mat<T>& state_logits() const { return state_logits_; }
  /// Residual stream after block `layer` (0 = embeddings), [batch*seq_len, d].
  const Mat<T>& hidden(int layer) const {
    auto it = captured_.find(layer);
    if (it == captured_.end()) throw Error("layer " + std::to_string(layer) + " was not captured");
    return it->second;
  }
  const TokenBatch& batch() const { return batch_; }

  /// Accumulates parameter gradients for the given output gradients (either may be empty).
  void backward(const Transformer<T>& model, const Mat<T>& dmove, const Mat<T>& dstate, Gradients<T>& grads) const {
    if (!keep_) throw Error("forward pass was not run with for_backward");
    const auto& c = model.config();
    const auto& L = model.layout();
    const int N = batch_.batch * batch_.seq_len, d = c.d_model;

    Mat<T> dfinal = Mat<T>::Zero(N, d);
    if (dmove.size() > 0) {
      dfinal.noalias() += dmove * model.tensor(L.unembed);
      grads.tensor(L.unembed).noalias() += dmove.transpose() * final_out_;
    }
    if (dstate.size() > 0) {
      dfinal.noalias() += dstate * model.tensor(L.state_heads);
      grads.tensor(L.state_heads).noalias() += dstate.transpose() * final_out_;
    }
    Mat<T> dx = Mat<T>::Zero(N, d);
    detail::layernorm_backward(dfinal, final_in_, model.tensor(L.lnf_g), final_mean_, final_rstd_, dx, grads.tensor(L.lnf_g),
                               grads.tensor(L.lnf_b));
    for (int l = c.layers - 1; l >= 0; --l) block_backward(model, l, dx, grads);

    auto dE = grads.tensor(L.tok_emb);
    auto dP = grads.tensor(L.pos_emb);
    for (int b = 0; b < batch_.batch; ++b) {
      for (int t = 0; t < batch_.seq_len; ++t) {
        const auto r = b * batch_.seq_len + t;
        dE.row(batch_.at(b, t)) += dx.row(r);
        dP.row(t) += dx.row(r);
      }
    }
  }

 private:
  struct BlockCache {
    Mat<T> x_in, ln1, qkv, att_out, x_mid, ln2, fc_pre, fc_act, fc_tanh;
    RowVec<T> ln1_mean, ln1_rstd, ln2_mean, ln2_rstd;
    std::vector<Mat<T>> probs;  // per (b, head): [T, T] attention weights
  };

  void block_forward(const Transformer<T>& model, int l, Mat<T>& x, BlockCache& bc) {
    const auto& c = model.config();
    const auto& bt = model.layout().blocks[static_cast<std::size_t>(l)];
    const int B = batch_.batch, S = batch_.seq_len, H = c.heads, dh = c.head_dim(), d = c.d_model;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));

    bc.x_in = x;
    detail::layernorm_forward(x, model.tensor(bt.ln1_g), model.tensor(bt.ln1_b), bc.ln1, bc.ln1_mean, bc.ln1_rstd);
    bc.qkv.noalias() = bc.ln1 * model.tensor(bt.w_qkv);
    bc.qkv.rowwise() += model.tensor(bt.b_qkv).row(0);
    bc.att_out.resize(B * S, d);
    bc.probs.resize(static_cast<std::size_t>(B * H));
    for (int b = 0; b < B; ++b) {
      for (int h = 0; h < H; ++h) {
        const auto q = bc.qkv.block(b * S, h * dh, S, dh);
        const auto k = bc.qkv.block(b * S, d + h * dh, S, dh);
        const auto v = bc.qkv.block(b * S, 2 * d + h * dh, S, dh);
        Mat<T>& p = bc.probs[static_cast<std::size_t>(b * H + h)];
        p.noalias() = (q * k.transpose()) * scale;
        for (int i = 0; i < S; ++i) {
          const T mx = p.row(i).head(i + 1).maxCoeff();
          p.row(i).head(i + 1) = (p.row(i).head(i + 1).array() - mx).exp().matrix();
          p.row(i).head(i + 1) /= p.row(i).head(i + 1).sum();
          p.row(i).tail(S - i - 1).setZero();
        }
        bc.att_out.block(b * S, h * dh, S, dh).noalias() = p * v;
      }
    }
    x.noalias() += bc.att_out * model.tensor(bt.w_o);
    x.rowwise() += model.tensor(bt.b_o).row(0);
    bc.x_mid = x;
    detail::layernorm_forward(x, model.tensor(bt.ln2_g), model.tensor(bt.ln2_b), bc.ln2, bc.ln2_mean, bc.ln2_rstd);
    bc.fc_pre.noalias() = bc.ln2 * model.tensor(bt.w_fc);
    bc.fc_pre.rowwise() += model.tensor(bt.b_fc).row(0);
    detail::gelu_forward(bc.fc_pre, bc.fc_act, bc.fc_tanh);
    x.noalias() += bc.fc_act * model.tensor(bt.w_proj);
    x.rowwise() += model.tensor(bt.b_proj).row(0);
  }

  // dx: gradient w.r.t. the block output on entry, w.r.t. the block input on exit.
  void block_backward(const Transformer<T>& model, int l, Mat<T>& dx, Gradients<T>& grads) const {
    const auto& c = model.config();
    const auto& bt = model.layout().blocks[static_cast<std::size_t>(l)];
    const auto& bc = blocks_[static_cast<std::size_t>(l)];
    const int B = batch_.batch, S = batch_.seq_len, H = c.heads, dh = c.head_dim(), d = c.d_model;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));

    // MLP branch.
    grads.tensor(bt.w_proj).noalias() += bc.fc_act.transpose() * dx;
    grads.tensor(bt.b_proj).row(0) += dx.colwise().sum();
    Mat<T> dfc = dx * model.tensor(bt.w_proj).transpose();
    detail::gelu_backward(bc.fc_pre, bc.fc_tanh, dfc);
    grads.tensor(bt.w_fc).noalias() += bc.ln2.transpose() * dfc;
    grads.tensor(bt.b_fc).row(0) += dfc.colwise().sum();
    const Mat<T> dln2 = dfc * model.tensor(bt.w_fc).transpose();
    detail::layernorm_backward(dln2, bc.x_mid, model.tensor(bt.ln2_g), bc.ln2_mean, bc.ln2_rstd, dx, grads.tensor(bt.ln2_g),
                               grads.tensor(bt.ln2_b));

    // Attention branch.
    grads.tensor(bt.w_o).noalias() += bc.att_out.transpose() * dx;
    grads.tensor(bt.b_o).row(0) += dx.colwise().sum();
    const Mat<T> datt = dx * model.tensor(bt.w_o).transpose();
    Mat<T> dqkv(B * S, 3 * d);
    for (int b = 0; b < B; ++b) {
      for (int h = 0; h < H; ++h) {
        const auto q = bc.qkv.block(b * S, h * dh, S, dh);
        const auto k = bc.qkv.block(b * S, d + h * dh, S, dh);
        const auto v = bc.qkv.block(b * S, 2 * d + h * dh, S, dh);
        const Mat<T>& p = bc.probs[static_cast<std::size_t>(b * H + h)];
        const auto dout = datt.block(b * S, h * dh, S, dh);
        dqkv.block(b * S, 2 * d + h * dh, S, dh).noalias() = p.transpose() * dout;
        Mat<T> dp = dout * v.transpose();
        // Softmax backward; masked entries have p = 0 and stay 0.
        const auto rowdot = (dp.array() * p.array()).rowwise().sum().eval();
        Mat<T> ds = (p.array() * (dp.array().colwise() - rowdot)).matrix() * scale;
        dqkv.block(b * S, h * dh, S, dh).noalias() = ds * k;
        dqkv.block(b * S, d + h * dh, S, dh).noalias() = ds.transpose() * q;
      }
    }
    grads.tensor(bt.w_qkv).noalias() += bc.ln1.transpose() * dqkv;
    grads.tensor(bt.b_qkv).row(0) += dqkv.colwise().sum();
    const Mat<T> dln1 = dqkv * model.tensor(bt.w_qkv).transpose();
    detail::layernorm_backward(dln1, bc.x_in, model.tensor(bt.ln1_g), bc.ln1_mean, bc.ln1_rstd, dx, grads.tensor(bt.ln1_g),
                               grads.tensor(bt.ln1_b));
  }

  TokenBatch batch_;
  bool keep_ = false;
  std::vector<BlockCache> blocks_;
  std::map<int, Mat<T>> captured_;
  Mat<T> final_in_, final_out_, move_logits_, state_logits_;
  RowVec<T> final_mean_, final_rstd_;
};

}  // namespace cubeworld
