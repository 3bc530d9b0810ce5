#pragma once

// Supervised training: next-move fine-tuning (FT), state-prediction
// pretraining (PT) followed by FT, and joint training, with early stopping on
// a held-out draw.

#include <chrono>
#include <numeric>
#include <optional>
#include <random>

#include "cubeworld/checkpoint.hpp"
#include "cubeworld/losses.hpp"
#include "cubeworld/metrics.hpp"

namespace cubeworld {

enum class Objective { kFt, kPt, kJoint };

inline std::string to_string(Objective o) {
  switch (o) {
    case Objective::kFt: return "ft";
    case Objective::kPt: return "pt";
    case Objective::kJoint: return "joint";
  }
  return "?";
}

inline Objective parse_objective(const std::string& s) {
  if (s == "ft") return Objective::kFt;
  if (s == "pt") return Objective::kPt;
  if (s == "joint") return Objective::kJoint;
  throw ValidationError("unknown objective '" + s + "' (expected ft, pt or joint)");
}

inline LossWeights loss_weights(Objective o) {
  switch (o) {
    case Objective::kFt: return kNextMoveLoss;
    case Objective::kPt: return kStateLoss;
    case Objective::kJoint: return kJointLoss;
  }
  return kNextMoveLoss;
}

struct TrainConfig {
  Objective objective = Objective::kFt;
  double lr = 1e-5;
  double weight_decay = 0.01;
  int batch = 64;
  int validation_size = 512;
  int patience = 10;
  int max_epochs = 20;
  long max_steps = 0;  // 0: no cap beyond max_epochs
  int eval_every = 500;
  int log_every = 100;
  std::uint64_t seed = 0;

  void validate() const {
    if (batch < 1 || validation_size < 1 || eval_every < 1 || log_every < 1) throw ValidationError("train config values must be positive");
    if (patience < 0 || max_epochs < 1 || max_steps < 0) throw ValidationError("invalid stopping parameters");
    if (!(lr > 0)) throw ValidationError("learning rate must be positive");
  }

  KeyValueText to_kv(const std::string& prefix = "") const {
    KeyValueText kv;
    kv.set(prefix + "objective", to_string(objective));
    kv.set_number(prefix + "lr", lr);
    kv.set_number(prefix + "weight_decay", weight_decay);
    kv.set_number(prefix + "batch", batch);
    kv.set_number(prefix + "validation_size", validation_size);
    kv.set_number(prefix + "patience", patience);
    kv.set_number(prefix + "max_epochs", max_epochs);
    kv.set_number(prefix + "max_steps", max_steps);
    kv.set_number(prefix + "eval_every", eval_every);
    kv.set_number(prefix + "seed", seed);
    return kv;
  }
};

struct RunRecord {
  std::string name;
  KeyValueText config;
  std::vector<std::pair<long, double>> train_curve;  // (step, mean training loss since the previous point)
  std::vector<std::pair<long, double>> val_curve;
  long steps = 0;
  long best_step = 0;
  double best_val = std::numeric_limits<double>::infinity();
  std::string stop_reason;
  std::string checkpoint;

  KeyValueText summary() const {
    KeyValueText kv = config;
    kv.set("run", name);
    kv.set_number("steps", steps);
    kv.set_number("best_step", best_step);
    kv.set_number("best_val_loss", best_val);
    kv.set("stop_reason", stop_reason);
    if (!checkpoint.empty()) kv.set("checkpoint", checkpoint);
    return kv;
  }
};

/// Freezes the head the objective does not use, so it is neither updated nor decayed.
inline void set_heads_for(AdamW<float>& opt, const ParamLayout& layout, Objective o) {
  opt.set_trainable(layout.unembed, o != Objective::kPt);
  opt.set_trainable(layout.state_heads, o != Objective::kFt);
}

/// Index order for one epoch; a pure function of (seed, epoch).
inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), static_cast<std::uint32_t>(epoch), 0x7a11u};
  Rng rng(seq);
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

/// Optimizes `model` on `train` with the objective in `cfg`, evaluating on `val`
/// every `eval_every` steps. Stops once `patience` evaluations pass without
/// improvement, and leaves the best-evaluated weights in `model`.
inline RunRecord train_phase(Transformer<float>& model, AdamW<float>& opt, std::span<const Example> train,
                             std::span<const Example> val, const TrainConfig& cfg, const std::string& run,
                             MetricsWriter* metrics = nullptr) {
  cfg.validate();
  if (train.empty()) throw MissingArtifactError("no training examples for " + run, "data splits");
  if (val.empty()) throw MissingArtifactError("no validation examples for " + run, "data splits");
  const LossWeights w = loss_weights(cfg.objective);
  RunRecord rec;
  rec.name = run;
  rec.config = cfg.to_kv();

  auto evaluate = [&](long step) {
    const auto b = compute_loss(model, val, w, static_cast<Gradients<float>*>(nullptr), 256);
    rec.val_curve.emplace_back(step, b.total);
    if (metrics) {
      Json j{{"run", run}, {"step", step}, {"val_loss", b.total}};
      if (cfg.objective == Objective::kJoint) {
        j["val_move_loss"] = b.move;
        j["val_state_loss"] = b.state;
      }
      if (cfg.objective != Objective::kFt) {
        j["val_state_acc"] = static_cast<double>(b.state_correct) / static_cast<double>(b.state_count * kNumStickers);
      }
      metrics->write(j);
    }
    return b.total;
  };

  std::vector<float> best = model.params();
  rec.best_val = evaluate(0);
  rec.best_step = 0;
  int bad = 0;
  Gradients<float> grads(model.layout());
  double acc = 0, acc_move = 0, acc_state = 0;
  int acc_n = 0;
  long step = 0;
  rec.stop_reason = "max_epochs";
  for (int epoch = 0; epoch < cfg.max_epochs && rec.stop_reason == "max_epochs"; ++epoch) {
    const auto order = epoch_order(train.size(), cfg.seed, epoch);
    std::vector<Example> batch;
    for (std::size_t begin = 0; begin < order.size(); begin += static_cast<std::size_t>(cfg.batch)) {
      batch.clear();
      for (std::size_t k = begin; k < std::min(order.size(), begin + static_cast<std::size_t>(cfg.batch)); ++k) {
        batch.push_back(train[order[k]]);
      }
      grads.zero();
      const auto b = compute_loss(model, std::span<const Example>(batch), w, &grads, cfg.batch);
      opt.step(model, grads);
      ++step;
      acc += b.total;
      acc_move += b.move;
      acc_state += b.state;
      ++acc_n;
      if (step % cfg.log_every == 0) {
        rec.train_curve.emplace_back(step, acc / acc_n);
        if (metrics) {
          Json j{{"run", run}, {"step", step}, {"train_loss", acc / acc_n}};
          if (cfg.objective == Objective::kJoint) {
            j["train_move_loss"] = acc_move / acc_n;
            j["train_state_loss"] = acc_state / acc_n;
          }
          metrics->write(j);
        }
        acc = acc_move = acc_state = 0;
        acc_n = 0;
      }
      if (step % cfg.eval_every == 0) {
        const double v = evaluate(step);
        if (v < rec.best_val) {
          rec.best_val = v;
          rec.best_step = step;
          best = model.params();
          bad = 0;
        } else if (++bad > cfg.patience) {
          rec.stop_reason = "patience";
          break;
        }
      }
      if (cfg.max_steps > 0 && step >= cfg.max_steps) {
        rec.stop_reason = "max_steps";
        break;
      }
    }
  }
  // Score the final weights too, so a run that ends between evaluations keeps its progress.
  if (rec.val_curve.back().first != step) {
    const double v = evaluate(step);
    if (v < rec.best_val) {
      rec.best_val = v;
      rec.best_step = step;
      best = model.params();
    }
  }
  model.params() = best;
  rec.steps = step;
  if (metrics) {
    metrics->write(Json{{"run", run}, {"event", "stop"}, {"reason", rec.stop_reason}, {"steps", step}, {"best_step", rec.best_step},
                        {"best_val_loss", rec.best_val}});
  }
  return rec;
}

struct TrainedModel {
  Transformer<float> model;
  AdamW<float> optimizer;
  RunRecord record;
};

inline AdamW<float> make_optimizer(const Transformer<float>& m, const TrainConfig& cfg) {
  return AdamW<float>(m.layout(), AdamWConfig{.lr = cfg.lr, .weight_decay = cfg.weight_decay});
}

/// Single-objective run from a fresh initialization (FT, PT or joint).
inline TrainedModel run_objective(const ModelConfig& mc, const TrainConfig& cfg, std::span<const Example> train,
                                  std::span<const Example> val, const std::string& run, MetricsWriter* metrics = nullptr) {
  Transformer<float> model(mc);
  auto opt = make_optimizer(model, cfg);
  set_heads_for(opt, model.layout(), cfg.objective);
  auto rec = train_phase(model, opt, train, val, cfg, run, metrics);
  return {std::move(model), std::move(opt), std::move(rec)};
}

inline TrainedModel run_ft(const ModelConfig& mc, TrainConfig cfg, std::span<const Example> train, std::span<const Example> val,
                           const std::string& run = "ft", MetricsWriter* metrics = nullptr) {
  cfg.objective = Objective::kFt;
  return run_objective(mc, cfg, train, val, run, metrics);
}

inline TrainedModel run_joint(const ModelConfig& mc, TrainConfig cfg, std::span<const Example> train, std::span<const Example> val,
                              const std::string& run = "joint", MetricsWriter* metrics = nullptr) {
  cfg.objective = Objective::kJoint;
  return run_objective(mc, cfg, train, val, run, metrics);
}

/// Phase 2 of PT -> FT: keeps every weight and every optimizer moment except
/// those of the move unembedding, which restart from zero; the state heads are frozen.
inline TrainedModel finetune_pretrained(Transformer<float> model, AdamW<float> opt, TrainConfig cfg, std::span<const Example> train,
                                        std::span<const Example> val, const std::string& run, MetricsWriter* metrics = nullptr) {
  cfg.objective = Objective::kFt;
  opt.set_lr(cfg.lr);
  opt.reset(model.layout().unembed);
  set_heads_for(opt, model.layout(), Objective::kFt);
  auto rec = train_phase(model, opt, train, val, cfg, run, metrics);
  return {std::move(model), std::move(opt), std::move(rec)};
}

inline std::pair<TrainedModel, TrainedModel> run_pt_then_ft(const ModelConfig& mc, TrainConfig pt_cfg, const TrainConfig& ft_cfg,
                                                            std::span<const Example> pt_train, std::span<const Example> pt_val,
                                                            std::span<const Example> ft_train, std::span<const Example> ft_val,
                                                            const std::string& run = "pt_ft", MetricsWriter* metrics = nullptr) {
  pt_cfg.objective = Objective::kPt;
  auto pre = run_objective(mc, pt_cfg, pt_train, pt_val, run + "/pretrain", metrics);
  auto fine = finetune_pretrained(pre.model, pre.optimizer, ft_cfg, ft_train, ft_val, run, metrics);
  return {std::move(pre), std::move(fine)};
}

}  // namespace cubeworld
