#pragma once

#include <cmath>
#include <vector>

#include "cubeworld/model.hpp"

namespace cubeworld {

struct AdamWConfig {
  double lr = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// AdamW with decoupled weight decay. Moments and step counts are kept per
/// tensor so a single tensor's state can be reset or frozen.
template <class T>
class AdamW {
 public:
  AdamW(const ParamLayout& layout, AdamWConfig cfg)
      : layout_(layout),
        cfg_(cfg),
        m_(layout.total(), 0.0f),
        v_(layout.total(), 0.0f),
        steps_(layout.tensors().size(), 0),
        trainable_(layout.tensors().size(), 1) {}

  const AdamWConfig& config() const { return cfg_; }
  void set_lr(double lr) { cfg_.lr = lr; }

  void set_trainable(int tensor, bool on) { trainable_[static_cast<std::size_t>(tensor)] = on; }
  bool trainable(int tensor) const { return trainable_[static_cast<std::size_t>(tensor)] != 0; }

  /// Clears moments and the step count of one tensor.
  void reset(int tensor) {
    const auto& t = layout_.tensors()[static_cast<std::size_t>(tensor)];
    std::fill_n(m_.begin() + static_cast<std::ptrdiff_t>(t.offset), t.size(), 0.0f);
    std::fill_n(v_.begin() + static_cast<std::ptrdiff_t>(t.offset), t.size(), 0.0f);
    steps_[static_cast<std::size_t>(tensor)] = 0;
  }

  void step(Transformer<T>& model, const Gradients<T>& g) {
    grads_finite_or_throw(g);
    auto& p = model.params();
    const double b1 = cfg_.beta1, b2 = cfg_.beta2;
    for (std::size_t id = 0; id < layout_.tensors().size(); ++id) {
      if (!trainable_[id]) continue;
      const auto& t = layout_.tensors()[id];
      const long k = ++steps_[id];
      const double c1 = 1.0 - std::pow(b1, static_cast<double>(k));
      const double c2 = 1.0 - std::pow(b2, static_cast<double>(k));
      const double decay = 1.0 - cfg_.lr * cfg_.weight_decay;
      for (std::size_t j = t.offset; j < t.offset + t.size(); ++j) {
        const double gj = static_cast<double>(g.data[j]);
        const double m = b1 * m_[j] + (1 - b1) * gj;
        const double v = b2 * v_[j] + (1 - b2) * gj * gj;
        m_[j] = static_cast<float>(m);
        v_[j] = static_cast<float>(v);
        const double update = (m / c1) / (std::sqrt(v / c2) + cfg_.eps);
        p[j] = static_cast<T>(static_cast<double>(p[j]) * decay - cfg_.lr * update);
      }
    }
    if (!model.all_finite()) throw DivergenceError("non-finite parameter after optimizer step");
  }

  // Raw state, for checkpointing.
  std::vector<float>& first_moments() { return m_; }
  std::vector<float>& second_moments() { return v_; }
  std::vector<long>& steps() { return steps_; }
  const std::vector<float>& first_moments() const { return m_; }
  const std::vector<float>& second_moments() const { return v_; }
  const std::vector<long>& steps() const { return steps_; }

 private:
  static void grads_finite_or_throw(const Gradients<T>& g) { g.check_finite(); }

  ParamLayout layout_;
  AdamWConfig cfg_;
  std::vector<float> m_, v_;
  std::vector<long> steps_;
  std::vector<char> trainable_;
};

}  // namespace cubeworld
