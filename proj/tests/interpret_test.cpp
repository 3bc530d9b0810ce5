#include <gtest/gtest.h>

#include <cmath>

#include "cubeworld/interpret.hpp"
#include "test_util.hpp"

using namespace testutil;

namespace {

// Activations that carry the state linearly: one-hot stickers through a random
// projection, plus optional noise.
cw::ActivationCell linear_cell(std::size_t n, int d, double noise, std::uint64_t seed) {
  cw::Rng rng(seed);
  std::normal_distribution<float> g(0.0f, 1.0f);
  cw::Mat<float> P(cw::kStateLogits, d);
  for (int i = 0; i < P.size(); ++i) P.data()[i] = g(rng);
  cw::ActivationCell c;
  c.X = cw::Mat<float>::Zero(static_cast<Eigen::Index>(n), d);
  for (std::size_t r = 0; r < n; ++r) {
    const auto s = cw::decode_index(cw::random_index(rng));
    c.states.push_back(s);
    for (int i = 0; i < cw::kNumStickers; ++i) c.X.row(static_cast<Eigen::Index>(r)) += P.row(i * cw::kNumColors + cw::to_int(s.stickers[i]));
    for (int j = 0; j < d; ++j) c.X(static_cast<Eigen::Index>(r), j) += static_cast<float>(noise) * g(rng);
  }
  return c;
}

// Best constant predictor, per sticker, pooled.
double majority_baseline(const cw::ActivationCell& c) {
  long hits = 0;
  for (int i = 0; i < cw::kNumStickers; ++i) {
    std::array<long, cw::kNumColors> counts{};
    for (const auto& s : c.states) ++counts[cw::to_int(s.stickers[i])];
    hits += *std::max_element(counts.begin(), counts.end());
  }
  return static_cast<double>(hits) / static_cast<double>(c.states.size() * cw::kNumStickers);
}

double cell_accuracy(const cw::ActivationCell& train, const cw::ActivationCell& test, cw::ProbeConfig cfg = {}) {
  cw::ActivationDataset tr, te;
  tr.layers = te.layers = {1};
  tr.cells[{1, 0}] = train;
  te.cells[{1, 0}] = test;
  const auto probes = cw::train_probes(tr, cfg);
  return cw::probe_accuracy(probes, te).at({1, 0}).accuracy();
}

}  // namespace

TEST(Activations, OneRecordPerTimestepAndLayer) {
  cw::Transformer<float> m(tiny_config());
  const auto trajs = some_solutions(20, 3);
  const auto ds = cw::collect_activations(m, trajs, {1, 2}, 7);
  std::size_t expected = 0;
  for (const auto& t : trajs) expected += t.moves.size() + 1;
  EXPECT_EQ(ds.records(), 2 * expected);
  // Timestep 0 is the scramble itself and matches a direct forward pass.
  const auto& c0 = ds.cells.at({2, 0});
  ASSERT_EQ(c0.states.size(), trajs.size());
  EXPECT_EQ(c0.states[0], trajs[0].initial_state());
  cw::ForwardPass<float> fp;
  cw::ForwardOptions<float> opts;
  opts.capture_layers = {2};
  const std::vector<std::vector<cw::Token>> one{cw::prompt_tokens(trajs[0].initial_state())};
  fp.run(m, cw::make_batch(one), opts);
  EXPECT_LT((fp.hidden(2).row(cw::kFirstDecisionPosition) - c0.X.row(0)).norm(), 1e-5);
  // The state after the last move is solved.
  const int n0 = static_cast<int>(trajs[0].moves.size());
  EXPECT_EQ(ds.cells.at({1, n0}).states[0], cw::decode_index(cw::kSolvedIndex));
  EXPECT_THROW(cw::collect_activations(m, trajs, {3}), cw::ValidationError);
}

TEST(Probes, RecoverLinearlyEncodedStates) {
  const auto train = linear_cell(6000, 160, 0.1, 1);
  const auto test = linear_cell(1000, 160, 0.1, 1);
  cw::ProbeConfig cfg;
  cfg.epochs = 5;
  EXPECT_GT(cell_accuracy(train, test, cfg), 0.97);
}

TEST(Probes, StayAtChanceOnUninformativeActivations) {
  auto train = linear_cell(6000, 48, 0.1, 1);
  auto test = linear_cell(1000, 48, 0.1, 1);
  // Shuffled labels.
  cw::Rng rng(4);
  std::shuffle(train.states.begin(), train.states.end(), rng);
  EXPECT_LT(cell_accuracy(train, test), majority_baseline(test) + 0.05);
  // Pure noise.
  std::normal_distribution<float> g;
  for (int i = 0; i < train.X.size(); ++i) train.X.data()[i] = g(rng);
  for (int i = 0; i < test.X.size(); ++i) test.X.data()[i] = g(rng);
  EXPECT_LT(cell_accuracy(train, test), majority_baseline(test) + 0.05);
}

TEST(Probes, SmallCellsAreReportedMissing) {
  cw::ActivationDataset ds;
  ds.layers = {1};
  ds.cells[{1, 0}] = linear_cell(10, 8, 0.0, 2);
  const auto ps = cw::train_probes(ds, {});
  EXPECT_FALSE(ps.has(1, 0));
  EXPECT_EQ(ps.missing.size(), 12u);
  EXPECT_THROW(ps.at(1, 0), cw::MissingArtifactError);
}

TEST(Probes, RowsAreCenteredAndNeverLeftAtZero) {
  cw::ActivationDataset ds;
  ds.layers = {1};
  ds.cells[{1, 2}] = linear_cell(800, 24, 0.5, 3);
  const auto ps = cw::train_probes(ds, {});
  const auto& V = ps.at(1, 2).V;
  for (int i = 0; i < cw::kNumStickers; ++i) {
    const auto block = V.middleRows(i * cw::kNumColors, cw::kNumColors);
    EXPECT_LT(block.colwise().sum().norm(), 1e-5 * block.norm()) << "sticker " << i;
    EXPECT_GT(block.norm(), 0.0f) << "sticker " << i;
  }
}

TEST(Probes, FileRoundTrip) {
  cw::ActivationDataset ds;
  ds.layers = {2};
  ds.cells[{2, 3}] = linear_cell(500, 16, 0.1, 5);
  const auto ps = cw::train_probes(ds, {});
  const auto path = temp_dir("cubeworld_interpret_test") / "p.bin";
  cw::save_probes(path, ps);
  const auto back = cw::load_probes(path);
  EXPECT_EQ(back.d_model, 16);
  EXPECT_EQ(back.at(2, 3).V, ps.at(2, 3).V);
  EXPECT_EQ(back.at(2, 3).trained, ps.at(2, 3).trained);
  EXPECT_EQ(back.missing, ps.missing);
  EXPECT_EQ(back.metadata.str(), ps.metadata.str());
  EXPECT_THROW(cw::load_probes(path.parent_path() / "absent.bin"), cw::MissingArtifactError);
}

TEST(Projection, RemovesOrthogonalDirections) {
  cw::Mat<float> v = cw::Mat<float>::Zero(3, 6);
  v(0, 0) = 2;
  v(1, 1) = 1;
  v(2, 2) = -3;
  cw::RowVec<float> h(6);
  h << 1, 2, 3, 4, 5, 6;
  const auto p = cw::project_out(h, v);
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(p.dot(v.row(i)), 0.0, 1e-6);
  EXPECT_NEAR((cw::project_out(p, v) - p).norm(), 0.0, 1e-6);
  EXPECT_FLOAT_EQ(p[3], 4);
  v(1, 1) = 0;
  EXPECT_THROW(cw::project_out(h, v), cw::ValidationError);
}

TEST(Projection, SumsRankOneTermsForOverlappingDirections) {
  cw::Mat<float> v(2, 2);
  v << 1, 0, 1, 1;
  cw::RowVec<float> h(2);
  h << 1, 1;
  const auto p = cw::project_out(h, v);
  // h - (1)(1,0) - (2/2)(1,1)
  EXPECT_NEAR(p[0], -1.0, 1e-6);
  EXPECT_NEAR(p[1], 0.0, 1e-6);
}

TEST(Alphas, ClosedFormWithOrthonormalProbes) {
  const cw::Mat<float> V = cw::Mat<float>::Identity(cw::kStateLogits, cw::kStateLogits);
  const cw::RowVec<float> h = cw::RowVec<float>::Zero(cw::kStateLogits);
  const auto target = cw::decode_index(cw::StateIndex{123456}).stickers;
  for (double m : {0.5, 1.0, 3.0}) {
    const auto a = cw::adaptive_alphas(h, V, target, m, 100);
    EXPECT_FALSE(a.flagged);
    for (double x : a.alpha) EXPECT_NEAR(x, m, 1e-9);
  }
  // Already satisfied margins need no push.
  cw::RowVec<float> strong = cw::RowVec<float>::Zero(cw::kStateLogits);
  for (int i = 0; i < cw::kNumStickers; ++i) strong[i * cw::kNumColors + cw::to_int(target[i])] = 5;
  for (double x : cw::adaptive_alphas(strong, V, target, 1.0, 100).alpha) EXPECT_EQ(x, 0.0);
  // Above the cap: flagged, capped.
  const auto capped = cw::adaptive_alphas(h, V, target, 10.0, 2.0);
  EXPECT_TRUE(capped.flagged);
  EXPECT_EQ(capped.alpha[0], 2.0);
}

TEST(Alphas, InfeasibleDirectionIsFlagged) {
  // Target row equals a competitor row: no alpha separates them.
  cw::Mat<float> V = cw::Mat<float>::Identity(cw::kStateLogits, cw::kStateLogits);
  const auto target = cw::decode_index(cw::kSolvedIndex).stickers;
  const int y = cw::to_int(target[0]);
  V.row((y + 1) % cw::kNumColors) = V.row(y);
  const auto a = cw::adaptive_alphas(cw::RowVec<float>::Zero(cw::kStateLogits), V, target, 1.0, 50);
  EXPECT_TRUE(a.flagged);
  EXPECT_EQ(a.alpha[0], 50);
}

TEST(Edit, MeetsMarginsAndKeepsTheNorm) {
  cw::Rng rng(8);
  std::normal_distribution<float> g;
  const int d = 200;
  cw::Mat<float> V(cw::kStateLogits, d);
  for (int i = 0; i < V.size(); ++i) V.data()[i] = g(rng) * 0.1f;
  cw::RowVec<float> h(d);
  for (int i = 0; i < d; ++i) h[i] = g(rng);
  const auto source = cw::decode_index(cw::StateIndex{777});
  const auto target = cw::decode_index(cw::StateIndex{3000000}).stickers;
  cw::InterventionConfig cfg;
  cw::RowVec<float> e = h;
  const auto out = cw::edit_residual(e, V, source, target, cfg);
  EXPECT_FALSE(out.flagged);
  EXPECT_TRUE(out.margins_ok);
  EXPECT_NEAR(e.norm(), h.norm(), 1e-3 * h.norm());
  EXPECT_LT(out.norm_error, 1e-5);
}

TEST(Edit, IdentityEditLeavesTheVectorUnchanged) {
  cw::Rng rng(9);
  std::normal_distribution<float> g;
  cw::Mat<float> V(cw::kStateLogits, 32);
  for (int i = 0; i < V.size(); ++i) V.data()[i] = g(rng);
  cw::RowVec<float> h(32);
  for (int i = 0; i < 32; ++i) h[i] = g(rng);
  const auto s = cw::decode_index(cw::StateIndex{31337});
  cw::InterventionConfig cfg;
  cfg.adaptive = false;
  cfg.project = false;
  cfg.fixed_alpha = 0;
  cw::RowVec<float> e = h;
  cw::edit_residual(e, V, s, s.stickers, cfg);
  EXPECT_LT((e - h).norm(), 1e-5 * h.norm());
}

TEST(InterventionSet, RespectsConstraintsAndStrata) {
  const auto& t = table();
  cw::StateSet pool;
  cw::Rng rng(2);
  for (int i = 0; i < 20000; ++i) pool.push_back(cw::random_index(rng));
  for (std::uint32_t i = 0; i < 200; ++i) pool.push_back(cw::StateIndex{i});
  std::sort(pool.begin(), pool.end());
  pool.erase(std::unique(pool.begin(), pool.end()), pool.end());
  cw::InterventionSetReport rep;
  const auto set = cw::build_intervention_set(t, pool, 5, 3, &rep);
  EXPECT_EQ(rep.total, set.size());
  std::map<std::pair<int, int>, int> cells;
  for (const auto& s : set) {
    EXPECT_NO_THROW(cw::validate_sample(t, s));
    EXPECT_LT(s.t, s.complexity());
    ++cells[{s.complexity(), s.t}];
  }
  for (const auto& [k, n] : cells) EXPECT_LE(n, 3);
  EXPECT_GT(cells.size(), 30u);
  const auto again = cw::build_intervention_set(t, pool, 5, 3);
  ASSERT_EQ(again.size(), set.size());
  for (std::size_t i = 0; i < set.size(); ++i) EXPECT_EQ(again[i].target, set[i].target);
}

TEST(Interventions, IdentityEditsDoNotChangePredictions) {
  cw::Transformer<float> m(tiny_config(3, 16, 2));
  const auto& t = table();
  cw::StateSet pool;
  for (std::uint32_t i = 0; i < 3000; i += 7) pool.push_back(cw::StateIndex{i * 1000});
  auto set = cw::build_intervention_set(t, pool, 1, 2);
  for (auto& s : set) s.target = s.source;
  cw::ProbeSet ps;
  ps.d_model = 16;
  cw::Rng rng(1);
  std::normal_distribution<float> g;
  for (int l : {1, 2}) {
    for (int step = 0; step <= cw::kGodsNumber; ++step) {
      cw::ProbeCell c;
      c.V.resize(cw::kStateLogits, 16);
      for (int i = 0; i < c.V.size(); ++i) c.V.data()[i] = g(rng);
      ps.cells[{l, step}] = c;
    }
  }
  cw::InterventionConfig cfg;
  cfg.adaptive = false;
  cfg.project = false;
  const auto res = cw::run_interventions(m, ps, t, set, cfg, 16);
  ASSERT_EQ(res.size(), set.size());
  for (const auto& r : res) {
    EXPECT_FALSE(r.top1_changed);
    for (int k = 0; k < cw::kNumMoves; ++k) EXPECT_NEAR(r.pre[k], r.post[k], 1e-5);
  }
  const auto buckets = cw::intervention_metrics(res);
  EXPECT_EQ(buckets[cw::kGodsNumber + 1].count, static_cast<long>(res.size()));
  EXPECT_EQ(buckets[cw::kGodsNumber + 1].top1_changed, 0);

  cw::InterventionConfig bad;
  bad.layers = {3};
  EXPECT_THROW(cw::run_interventions(m, ps, t, set, bad), cw::ValidationError);
}

TEST(Interventions, DefaultLayersAreTheLastThreeBelowTheTop) {
  EXPECT_EQ(cw::default_intervention_layers(8), (std::vector<int>{5, 6, 7}));
  EXPECT_EQ(cw::default_intervention_layers(3), (std::vector<int>{1, 2}));
}
