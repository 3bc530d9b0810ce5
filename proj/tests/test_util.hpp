#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <numeric>
#include <random>

#include "cubeworld/datagen.hpp"
#include "cubeworld/losses.hpp"

namespace cw = cubeworld;

namespace testutil {

inline const cw::DistanceTable& table() {
  static const cw::DistanceTable t = cw::DistanceTable::build();
  return t;
}

inline cw::ModelConfig tiny_config(int layers = 2, int d = 16, int heads = 2) {
  cw::ModelConfig c;
  c.layers = layers;
  c.d_model = d;
  c.heads = heads;
  c.seed = 7;
  return c;
}

inline std::vector<cw::Trajectory> some_solutions(std::size_t n, std::uint64_t seed) {
  cw::Rng rng(seed);
  cw::StateSet s;
  for (std::size_t i = 0; i < n; ++i) s.push_back(cw::random_index(rng));
  std::sort(s.begin(), s.end());
  s.erase(std::unique(s.begin(), s.end()), s.end());
  return cw::solution_trajectories(table(), s);
}

inline std::vector<cw::Example> mixed_batch() {
  auto trajs = some_solutions(3, 1);
  trajs.push_back({cw::kSolvedIndex, {}, cw::TrajectoryKind::kSolution});
  auto random = cw::gen_pretrain_data({cw::StateIndex{4242}, cw::StateIndex{99}}, 2, 5, 3);
  trajs.insert(trajs.end(), random.begin(), random.end());
  return cw::make_examples(trajs);
}

// Moves every parameter off its structured initial value so gains, biases and
// attention patterns are all generic.
inline cw::Transformer<double> generic_model() {
  auto c = tiny_config();
  c.init_std = 0.3;
  cw::Transformer<double> m(c);
  cw::Rng rng(11);
  std::normal_distribution<double> n(0.0, 0.1);
  for (auto& p : m.params()) p += n(rng);
  return m;
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto d = std::filesystem::temp_directory_path() / name;
  std::filesystem::create_directories(d);
  return d;
}

struct TensorError {
  std::string name;
  double rel;
};

// Central differences on every tensor (all entries of small tensors, a fixed
// random subset of larger ones), compared using ||fd - analytic|| / max(||fd||, ||analytic||).
template <class LossFn>
std::vector<TensorError> gradcheck(cw::Transformer<double>& m, LossFn loss, std::size_t per_tensor = 160) {
  cw::Gradients<double> g(m.layout());
  loss(m, &g);
  const double h = 1e-6;
  std::vector<TensorError> out;
  cw::Rng rng(5);
  for (const auto& t : m.layout().tensors()) {
    std::vector<std::size_t> idx(t.size());
    std::iota(idx.begin(), idx.end(), t.offset);
    if (idx.size() > per_tensor) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(per_tensor);
    }
    double diff = 0, na = 0, nf = 0;
    for (std::size_t j : idx) {
      const double keep = m.params()[j];
      m.params()[j] = keep + h;
      const double up = loss(m, nullptr);
      m.params()[j] = keep - h;
      const double down = loss(m, nullptr);
      m.params()[j] = keep;
      const double fd = (up - down) / (2 * h);
      diff += (fd - g.data[j]) * (fd - g.data[j]);
      na += g.data[j] * g.data[j];
      nf += fd * fd;
    }
    const double scale = std::max({std::sqrt(na), std::sqrt(nf), 1e-12});
    out.push_back({t.name, std::sqrt(diff) / scale});
  }
  return out;
}

}  // namespace testutil

namespace testutil {

inline double worst(const std::vector<TensorError>& errors) {
  double w = 0;
  for (const auto& e : errors) w = std::max(w, e.rel);
  return w;
}

}  // namespace testutil
