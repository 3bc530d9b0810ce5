#pragma once

// GRPO post-training: G sampled rollouts per scramble, binary solve reward,
// group-normalized advantages and a single on-policy update per sampling round
// with a KL penalty towards a frozen reference policy.
//
// Per generated (non-forced) token with log-prob lp under the policy and ref
// under the reference:
//   loss = -A * lp + beta * (exp(ref - lp) - (ref - lp) - 1)
// averaged over the tokens of a completion, then over completions and groups.

#include <cmath>

#include "cubeworld/eval.hpp"
#include "cubeworld/optim.hpp"

namespace cubeworld {

struct GrpoConfig {
  int group_size = 8;
  double beta = 0.01;
  int max_generation = 13;  // generated tokens, EOS included
  double lr = 1e-5;
  double weight_decay = 0.01;
  int prompt_batch = 256;
  int eval_batch = 128;
  double temperature = 1.0;
  long steps = 100;
  int eval_every = 10;
  int micro_batch = 128;
  double collapse_ratio = 0.5;  // halt when the solve rate falls below this fraction of its best
  std::uint64_t seed = 0;

  void validate() const {
    if (group_size < 2) throw ValidationError("GRPO needs a group size of at least 2");
    if (max_generation < 1 || prompt_batch < 1 || eval_batch < 1 || steps < 0 || eval_every < 1 || micro_batch < 1) {
      throw ValidationError("invalid GRPO config");
    }
    if (!(temperature > 0) || beta < 0) throw ValidationError("invalid GRPO temperature or beta");
  }

  KeyValueText to_kv(const std::string& prefix = "grpo.") const {
    KeyValueText kv;
    kv.set_number(prefix + "group_size", group_size);
    kv.set_number(prefix + "beta", beta);
    kv.set_number(prefix + "max_generation", max_generation);
    kv.set_number(prefix + "lr", lr);
    kv.set_number(prefix + "weight_decay", weight_decay);
    kv.set_number(prefix + "prompt_batch", prompt_batch);
    kv.set_number(prefix + "eval_batch", eval_batch);
    kv.set_number(prefix + "temperature", temperature);
    kv.set_number(prefix + "steps", steps);
    kv.set_number(prefix + "eval_every", eval_every);
    kv.set_number(prefix + "seed", seed);
    return kv;
  }
};

/// 1 iff the moves before the first EOS take `start` to solved. Any other
/// symbol before EOS scores 0; a completion without EOS is judged on all of it.
inline int reward(StateIndex start, std::span<const Token> completion) {
  StateIndex s = start;
  for (auto t : completion) {
    if (t == kEosToken) break;
    if (!is_move_token(t)) return 0;
    s = apply_move(s, token_move(t));
  }
  return s == kSolvedIndex ? 1 : 0;
}

inline int reward(StateIndex start, const MoveSequence& moves) {
  std::vector<Token> toks;
  for (auto m : moves) toks.push_back(move_token(m));
  toks.push_back(kEosToken);
  return reward(start, toks);
}

/// (r - mean) / std with the population std; all zeros when the rewards are equal.
inline std::vector<double> group_advantages(std::span<const double> rewards) {
  const double n = static_cast<double>(rewards.size());
  double mean = 0;
  for (double r : rewards) mean += r;
  mean /= n;
  double var = 0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  var /= n;
  std::vector<double> out(rewards.size(), 0.0);
  if (var <= 0) return out;
  const double sd = std::sqrt(var);
  for (std::size_t i = 0; i < rewards.size(); ++i) out[i] = (rewards[i] - mean) / sd;
  return out;
}

struct RolloutGroup {
  StateIndex prompt;
  std::vector<Completion> completions;
  std::vector<double> rewards;
  std::vector<double> advantages;

  bool zero_variance() const {
    return std::all_of(rewards.begin(), rewards.end(), [&](double r) { return r == rewards.front(); });
  }
};

/// Samples G completions per prompt (prompts in order, completions in order).
inline std::vector<RolloutGroup> rollout(const Transformer<float>& policy, std::span<const StateIndex> prompts, const GrpoConfig& cfg,
                                         Rng& rng) {
  std::vector<CubeState> cubes;
  for (auto p : prompts) {
    const auto c = decode_index(p);
    for (int g = 0; g < cfg.group_size; ++g) cubes.push_back(c);
  }
  DecodeOptions opts;
  opts.mode = DecodeMode::kSample;
  opts.temperature = cfg.temperature;
  opts.max_moves = cfg.max_generation - 1;
  opts.force_eos = true;
  auto comps = decode_batch(policy, std::span<const CubeState>(cubes), opts, &rng);
  std::vector<RolloutGroup> groups(prompts.size());
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    auto& g = groups[i];
    g.prompt = prompts[i];
    for (int k = 0; k < cfg.group_size; ++k) {
      auto& c = comps[i * static_cast<std::size_t>(cfg.group_size) + static_cast<std::size_t>(k)];
      g.rewards.push_back(reward(g.prompt, c.tokens));
      g.completions.push_back(std::move(c));
    }
    g.advantages = group_advantages(g.rewards);
  }
  return groups;
}

struct GrpoLoss {
  double loss = 0;
  double kl = 0;          // mean per-token KL estimate
  double policy_term = 0; // mean of -A * lp
  long tokens = 0;
};

/// Loss (and, with `grads`, its gradient) over `groups`. The reference log-probs
/// are recomputed from `reference`.
template <class T>
GrpoLoss grpo_loss(const Transformer<T>& policy, const Transformer<T>& reference, std::span<const RolloutGroup> groups, double beta,
                   Gradients<T>* grads = nullptr, int micro_batch = 128) {
  struct Item {
    const RolloutGroup* group;
    std::size_t index;
    double weight;  // 1 / (tokens * G * groups)
  };
  std::vector<Item> items;
  for (const auto& g : groups) {
    const bool skip = beta == 0.0 && g.zero_variance();
    for (std::size_t k = 0; k < g.completions.size(); ++k) {
      const auto& c = g.completions[k];
      long n = 0;
      for (auto f : c.forced) n += f == 0;
      if (n == 0 || skip) continue;
      items.push_back({&g, k, 1.0 / (static_cast<double>(n) * static_cast<double>(g.completions.size()) * static_cast<double>(groups.size()))});
    }
  }
  GrpoLoss out;
  ForwardPass<T> fp, fr;
  for (std::size_t begin = 0; begin < items.size(); begin += static_cast<std::size_t>(micro_batch)) {
    const std::size_t end = std::min(items.size(), begin + static_cast<std::size_t>(micro_batch));
    std::vector<std::vector<Token>> seqs;
    for (std::size_t i = begin; i < end; ++i) {
      const auto& c = items[i].group->completions[items[i].index];
      auto s = prompt_tokens(decode_index(items[i].group->prompt));
      s.insert(s.end(), c.tokens.begin(), c.tokens.end() - 1);
      seqs.push_back(std::move(s));
    }
    const auto tb = make_batch(seqs);
    ForwardOptions<T> opts;
    opts.for_backward = grads != nullptr;
    fp.run(policy, tb, opts);
    fr.run(reference, tb, ForwardOptions<T>{});
    Mat<T> dlogits;
    if (grads) dlogits = Mat<T>::Zero(fp.move_logits().rows(), fp.move_logits().cols());
    for (std::size_t i = begin; i < end; ++i) {
      const auto& it = items[i];
      const auto& c = it.group->completions[it.index];
      const double adv = it.group->advantages[it.index];
      const int b = static_cast<int>(i - begin);
      for (std::size_t k = 0; k < c.tokens.size(); ++k) {
        if (c.forced[k]) continue;
        const int row = b * tb.seq_len + kFirstDecisionPosition + static_cast<int>(k);
        const int tok = c.tokens[k];
        const auto lp = action_log_probs(fp.move_logits().row(row));
        const auto lr = action_log_probs(fr.move_logits().row(row));
        const double d = lr[tok] - lp[tok];
        const double kl = std::exp(d) - d - 1.0;
        out.loss += it.weight * (-adv * lp[tok] + beta * kl);
        out.policy_term += it.weight * (-adv * lp[tok]);
        out.kl += kl;
        ++out.tokens;
        if (grads) {
          const double dlp = it.weight * (-adv + beta * (1.0 - std::exp(d)));
          for (int v = 0; v < kVocabSize; ++v) {
            if (!is_action_token(v)) continue;
            dlogits(row, v) += static_cast<T>(dlp * ((v == tok ? 1.0 : 0.0) - std::exp(lp[v])));
          }
        }
      }
    }
    if (grads) fp.backward(policy, dlogits, Mat<T>(), *grads);
  }
  if (out.tokens > 0) out.kl /= static_cast<double>(out.tokens);
  if (!std::isfinite(out.loss)) throw DivergenceError("non-finite GRPO loss");
  return out;
}

struct GrpoStepStats {
  long step = 0;
  double mean_reward = 0;
  double zero_variance_fraction = 0;
  double kl = 0;
  double loss = 0;
  bool skipped = false;  // no gradient signal: every group had zero variance and beta = 0
};

/// One sampling round and one optimizer update.
inline GrpoStepStats grpo_step(Transformer<float>& policy, const Transformer<float>& reference, AdamW<float>& opt,
                               std::span<const StateIndex> prompts, const GrpoConfig& cfg, Rng& rng) {
  const auto groups = rollout(policy, prompts, cfg, rng);
  GrpoStepStats st;
  double total = 0, zero = 0;
  for (const auto& g : groups) {
    for (double r : g.rewards) total += r;
    zero += g.zero_variance();
  }
  st.mean_reward = total / static_cast<double>(groups.size() * static_cast<std::size_t>(cfg.group_size));
  st.zero_variance_fraction = zero / static_cast<double>(groups.size());
  if (cfg.beta == 0.0 && zero == static_cast<double>(groups.size())) {
    st.skipped = true;
    return st;
  }
  Gradients<float> grads(policy.layout());
  const auto l = grpo_loss(policy, reference, std::span<const RolloutGroup>(groups), cfg.beta, &grads, cfg.micro_batch);
  st.loss = l.loss;
  st.kl = l.kl;
  opt.step(policy, grads);
  return st;
}

struct GrpoRun {
  Transformer<float> model;
  std::vector<GrpoStepStats> history;
  std::vector<std::pair<long, double>> solve_curve;
  std::string stop_reason;
};

/// Runs `cfg.steps` GRPO updates on prompts drawn from `train_states`, scoring
/// greedy solve rate on `eval_states` every `eval_every` steps. A solve-rate
/// collapse below `collapse_ratio` of the best value halts the run and returns
/// the best-scoring weights.
inline GrpoRun grpo_train(const Transformer<float>& start, const DistanceTable& t, const StateSet& train_states,
                          const StateSet& eval_states, const GrpoConfig& cfg, const std::string& run = "grpo",
                          MetricsWriter* metrics = nullptr) {
  cfg.validate();
  if (train_states.empty()) throw MissingArtifactError("no GRPO prompt states", "data splits");
  const Transformer<float> reference = start;
  GrpoRun out{start, {}, {}, "steps"};
  AdamW<float> opt(out.model.layout(), AdamWConfig{.lr = cfg.lr, .weight_decay = cfg.weight_decay});
  opt.set_trainable(out.model.layout().state_heads, false);
  Rng rng(cfg.seed);
  std::uniform_int_distribution<std::size_t> pick(0, train_states.size() - 1);

  auto evaluate = [&](long step) {
    const auto acc = eval_task_accuracy(t, eval_states, model_rollout(out.model), 3, static_cast<std::size_t>(cfg.eval_batch));
    const double rate = acc.pooled(0, kGodsNumber);
    out.solve_curve.emplace_back(step, rate);
    if (metrics) {
      Json j{{"run", run}, {"step", step}, {"solve_rate", rate}};
      Json by = Json::object();
      for (int b = 0; b <= kGodsNumber; ++b) {
        if (acc.total[b]) by[std::to_string(b)] = acc.rate(b);
      }
      j["solve_rate_by_complexity"] = by;
      metrics->write(j);
    }
    return rate;
  };

  double best_rate = evaluate(0);
  std::vector<float> best = out.model.params();
  for (long step = 1; step <= cfg.steps; ++step) {
    std::vector<StateIndex> prompts;
    for (int i = 0; i < cfg.prompt_batch; ++i) prompts.push_back(train_states[pick(rng)]);
    auto st = grpo_step(out.model, reference, opt, prompts, cfg, rng);
    st.step = step;
    out.history.push_back(st);
    if (metrics) {
      metrics->write(Json{{"run", run},
                          {"step", step},
                          {"mean_reward", st.mean_reward},
                          {"zero_variance_fraction", st.zero_variance_fraction},
                          {"kl", st.kl},
                          {"loss", st.loss},
                          {"skipped", st.skipped}});
    }
    if (step % cfg.eval_every == 0 || step == cfg.steps) {
      const double rate = evaluate(step);
      if (rate >= best_rate) {
        best_rate = rate;
        best = out.model.params();
      } else if (rate < cfg.collapse_ratio * best_rate) {
        out.stop_reason = "collapse";
        out.model.params() = best;
        break;
      }
    }
  }
  if (metrics) metrics->write(Json{{"run", run}, {"event", "stop"}, {"reason", out.stop_reason}});
  return out;
}

}  // namespace cubeworld
