#include <gtest/gtest.h>

#include <cmath>

#include "cubeworld/grpo.hpp"
#include "test_util.hpp"

using namespace testutil;

namespace {

cw::Completion completion(std::vector<cw::Token> tokens, bool forced_eos = false) {
  cw::Completion c;
  c.tokens = std::move(tokens);
  c.forced.assign(c.tokens.size(), 0);
  if (forced_eos) {
    c.tokens.push_back(cw::kEosToken);
    c.forced.push_back(1);
  }
  c.ended = true;
  return c;
}

cw::Token mv(int id) { return cw::move_token(cw::kAllMoves[static_cast<std::size_t>(id)]); }

// Two mixed groups and one with equal rewards; completions of varying length,
// including a forced EOS.
std::vector<cw::RolloutGroup> handmade_groups() {
  std::vector<cw::RolloutGroup> gs(3);
  gs[0].prompt = cw::StateIndex{1234};
  gs[0].completions = {completion({mv(0), mv(3), cw::kEosToken}), completion({mv(8), cw::kEosToken}), completion({mv(4), mv(4), mv(1)}, true),
                       completion({cw::kEosToken})};
  gs[0].rewards = {1, 0, 0, 1};
  gs[1].prompt = cw::StateIndex{987654};
  gs[1].completions = {completion({mv(2), cw::kEosToken}), completion({mv(5), mv(6), mv(7), cw::kEosToken}), completion({mv(1)}, true),
                       completion({mv(0), mv(0), cw::kEosToken})};
  gs[1].rewards = {0, 0, 1, 0};
  gs[2].prompt = cw::StateIndex{42};
  gs[2].completions = {completion({mv(3), cw::kEosToken}), completion({mv(6), cw::kEosToken}), completion({mv(2), mv(2), cw::kEosToken}),
                       completion({cw::kEosToken})};
  gs[2].rewards = {0, 0, 0, 0};
  for (auto& g : gs) g.advantages = cw::group_advantages(g.rewards);
  return gs;
}

std::vector<cw::StateIndex> states_at(int depth, std::size_t n) {
  std::vector<cw::StateIndex> out;
  for (std::uint32_t i = 0; i < cw::kNumStates && out.size() < n; ++i) {
    if (table().at(cw::StateIndex{i}) == depth) out.push_back(cw::StateIndex{i});
  }
  return out;
}

}  // namespace

TEST(Advantages, ClosedFormForOneWinner) {
  std::vector<double> r8(8, 0.0), r4(4, 0.0);
  r8[3] = 1;
  r4[0] = 1;
  const auto a8 = cw::group_advantages(r8);
  const auto a4 = cw::group_advantages(r4);
  EXPECT_NEAR(a8[3], std::sqrt(7.0), 1e-9);
  EXPECT_NEAR(a8[0], -1 / std::sqrt(7.0), 1e-9);
  EXPECT_NEAR(a4[0], std::sqrt(3.0), 1e-9);
  EXPECT_NEAR(a4[2], -1 / std::sqrt(3.0), 1e-9);
  double sum = 0;
  for (double a : a8) sum += a;
  EXPECT_NEAR(sum, 0.0, 1e-12);
}

TEST(Advantages, ClosedFormForTwoWinnersAmongEight) {
  std::vector<double> r(8, 0.0);
  r[1] = r[6] = 1;
  const auto a = cw::group_advantages(r);
  EXPECT_NEAR(a[1], std::sqrt(3.0), 1e-9);
  EXPECT_NEAR(a[6], std::sqrt(3.0), 1e-9);
  EXPECT_NEAR(a[0], -1 / std::sqrt(3.0), 1e-9);
}

TEST(Advantages, EqualRewardsGiveZeros) {
  for (double v : {0.0, 1.0}) {
    for (double a : cw::group_advantages(std::vector<double>(8, v))) EXPECT_EQ(a, 0.0);
  }
}

TEST(Reward, AgreesWithExhaustiveEnumerationUpToDistanceTwo) {
  std::vector<cw::MoveSequence> strings{{}};
  for (int a = 0; a < cw::kNumMoves; ++a) {
    strings.push_back({cw::kAllMoves[static_cast<std::size_t>(a)]});
    for (int b = 0; b < cw::kNumMoves; ++b) strings.push_back({cw::kAllMoves[static_cast<std::size_t>(a)], cw::kAllMoves[static_cast<std::size_t>(b)]});
  }
  ASSERT_EQ(strings.size(), 91u);
  long states = 0, checked = 0;
  for (std::uint32_t i = 0; i < cw::kNumStates; ++i) {
    const cw::StateIndex s{i};
    if (table().at(s) > 2) continue;
    ++states;
    for (const auto& str : strings) {
      const int expected = cw::apply_sequence(s, str) == cw::kSolvedIndex;
      EXPECT_EQ(cw::reward(s, str), expected);
      ++checked;
    }
  }
  EXPECT_EQ(states, 1 + 9 + 54);
  EXPECT_EQ(checked, 64 * 91);
}

TEST(Reward, StopsAtEosAndRejectsOtherSymbols) {
  const cw::StateIndex s = cw::apply_move(cw::kSolvedIndex, cw::kAllMoves[0]);  // U
  const cw::Token inverse = mv(2);                                         // U'
  EXPECT_EQ(cw::reward(s, std::vector<cw::Token>{inverse, cw::kEosToken}), 1);
  EXPECT_EQ(cw::reward(s, std::vector<cw::Token>{inverse, cw::kEosToken, mv(0)}), 1);
  EXPECT_EQ(cw::reward(s, std::vector<cw::Token>{inverse, mv(0), cw::kEosToken}), 0);
  EXPECT_EQ(cw::reward(s, std::vector<cw::Token>{inverse}), 1);
  EXPECT_EQ(cw::reward(s, std::vector<cw::Token>{cw::Token{3}, inverse, cw::kEosToken}), 0);
  EXPECT_EQ(cw::reward(s, std::vector<cw::Token>{cw::kPadToken}), 0);
  EXPECT_EQ(cw::reward(cw::kSolvedIndex, std::vector<cw::Token>{cw::kEosToken}), 1);
}

TEST(GrpoLoss, GradientMatchesFiniteDifferences) {
  auto policy = generic_model();
  auto reference = policy;
  cw::Rng rng(3);
  std::normal_distribution<double> n(0.0, 0.05);
  for (auto& p : reference.params()) p += n(rng);
  const auto groups = handmade_groups();
  for (double beta : {0.0, 0.1}) {
    const auto errors = gradcheck(policy, [&](const cw::Transformer<double>& m, cw::Gradients<double>* g) {
      return cw::grpo_loss(m, reference, std::span<const cw::RolloutGroup>(groups), beta, g, 5).loss;
    });
    for (const auto& e : errors) EXPECT_LT(e.rel, 1e-3) << e.name << " beta " << beta;
    std::printf("beta %.1f: max relative error %.3g\n", beta, worst(errors));
  }
}

TEST(GrpoLoss, KlIsNonNegativeAndVanishesAgainstItself) {
  auto policy = generic_model();
  auto groups = handmade_groups();
  const auto same = cw::grpo_loss(policy, policy, std::span<const cw::RolloutGroup>(groups), 0.5);
  EXPECT_NEAR(same.kl, 0.0, 1e-12);
  auto other = policy;
  for (auto& p : other.params()) p *= 0.9;
  const auto diff = cw::grpo_loss(policy, other, std::span<const cw::RolloutGroup>(groups), 0.5);
  EXPECT_GT(diff.kl, 0.0);
  for (auto& g : groups) std::fill(g.advantages.begin(), g.advantages.end(), 0.0);
  const auto zero = cw::grpo_loss(policy, policy, std::span<const cw::RolloutGroup>(groups), 0.5);
  EXPECT_NEAR(zero.loss, 0.0, 1e-12);
}

TEST(GrpoLoss, ZeroVarianceGroupsContributeNoGradient) {
  auto policy = generic_model();
  auto groups = handmade_groups();
  std::vector<cw::RolloutGroup> flat{groups[2], groups[2]};
  cw::Gradients<double> g(policy.layout());
  cw::grpo_loss(policy, policy, std::span<const cw::RolloutGroup>(flat), 0.0, &g);
  for (double v : g.data) ASSERT_EQ(v, 0.0);

  // With a mixed group present, the flat group only changes the averaging weight.
  cw::Gradients<double> with(policy.layout()), without(policy.layout());
  cw::grpo_loss(policy, policy, std::span<const cw::RolloutGroup>(groups.data(), 3), 0.0, &with);
  cw::grpo_loss(policy, policy, std::span<const cw::RolloutGroup>(groups.data(), 2), 0.0, &without);
  for (std::size_t i = 0; i < with.data.size(); ++i) ASSERT_NEAR(with.data[i] * 3, without.data[i] * 2, 1e-12);
}

TEST(GrpoStep, AllZeroVarianceLeavesParametersUntouched) {
  auto c = tiny_config();
  cw::Transformer<float> policy(c);
  const auto reference = policy;
  cw::AdamW<float> opt(policy.layout(), cw::AdamWConfig{.lr = 1e-2, .weight_decay = 0.1});
  cw::GrpoConfig cfg;
  cfg.beta = 0.0;
  cfg.group_size = 4;
  cfg.max_generation = 3;  // two moves cannot solve a distance-11 scramble
  const auto prompts = states_at(11, 16);
  cw::Rng rng(1);
  const auto before = policy.params();
  const auto st = cw::grpo_step(policy, reference, opt, prompts, cfg, rng);
  EXPECT_TRUE(st.skipped);
  EXPECT_EQ(st.zero_variance_fraction, 1.0);
  EXPECT_EQ(policy.params(), before);
}

TEST(GrpoStep, RaisesTheProbabilityOfRewardedCompletions) {
  cw::Transformer<float> policy(tiny_config());
  const auto reference = policy;
  cw::AdamW<float> opt(policy.layout(), cw::AdamWConfig{.lr = 1e-2, .weight_decay = 0.0});
  auto groups = handmade_groups();
  auto winner_logprob = [&](const cw::Transformer<float>& m) {
    std::vector<cw::RolloutGroup> one{groups[1]};
    for (auto& a : one[0].advantages) a = 0;
    one[0].advantages[2] = 1;  // loss = -lp of the winner, scaled
    return -cw::grpo_loss(m, m, std::span<const cw::RolloutGroup>(one), 0.0).loss;
  };
  const double before = winner_logprob(policy);
  cw::Gradients<float> g(policy.layout());
  cw::grpo_loss(policy, reference, std::span<const cw::RolloutGroup>(groups), 0.0, &g);
  opt.step(policy, g);
  EXPECT_GT(winner_logprob(policy), before);
}

TEST(Rollout, SameSeedSameGroups) {
  cw::Transformer<float> policy(tiny_config());
  cw::GrpoConfig cfg;
  cfg.group_size = 4;
  const auto prompts = states_at(3, 8);
  cw::Rng a(9), b(9);
  const auto ga = cw::rollout(policy, prompts, cfg, a);
  const auto gb = cw::rollout(policy, prompts, cfg, b);
  ASSERT_EQ(ga.size(), gb.size());
  for (std::size_t i = 0; i < ga.size(); ++i) {
    ASSERT_EQ(ga[i].completions.size(), 4u);
    for (std::size_t k = 0; k < 4; ++k) {
      EXPECT_EQ(ga[i].completions[k].tokens, gb[i].completions[k].tokens);
      EXPECT_LE(ga[i].completions[k].tokens.size(), static_cast<std::size_t>(cfg.max_generation));
      EXPECT_EQ(ga[i].completions[k].tokens.back(), cw::kEosToken);
    }
    EXPECT_EQ(ga[i].rewards, gb[i].rewards);
  }
}
