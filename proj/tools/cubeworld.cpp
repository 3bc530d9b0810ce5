#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>

#include "cubeworld/experiment.hpp"

namespace cw = cubeworld;
namespace fs = std::filesystem;

namespace {

struct Globals {
  std::string config_path;
  std::string out = "runs";
  std::string data_dir;
  bool deterministic = false;
  std::map<std::string, std::string> flags;  // config keys given on the command line
  CLI::App* app = nullptr;
};

cw::ExperimentConfig load_config(const Globals& g) {
  std::vector<cw::KeyValueText> layers;
  if (!g.config_path.empty()) {
    if (!fs::exists(g.config_path)) throw cw::ValidationError("config file " + g.config_path + " not found");
    layers.push_back(cw::KeyValueText::load(g.config_path));
  }
  cw::KeyValueText cli;
  for (const auto& f : cw::config_fields()) {
    if (g.app->count("--" + f.key) > 0) cli.set(f.key, g.flags.at(f.key));
  }
  layers.push_back(cli);
  auto c = cw::make_config(layers);
  if (g.deterministic) c.threads = 1;
  return c;
}

cw::DataStore store_for(const Globals& g) { return cw::DataStore(g.data_dir.empty() ? cw::DataStore::default_dir() : fs::path(g.data_dir)); }

fs::path checkpoint_for(const Globals& g, const std::string& run, const std::string& explicit_path) {
  return explicit_path.empty() ? cw::RunDir(g.out, run).checkpoint() : fs::path(explicit_path);
}

void print_accuracy(const cw::AccuracyTable& acc) {
  std::printf("complexity  count  solved  strict\n");
  for (int b = 0; b <= cw::kGodsNumber; ++b) {
    if (acc.total[b] == 0) continue;
    std::printf("%10d %6ld  %.4f  %.4f\n", b, acc.total[b], acc.rate(b), acc.strict_rate(b));
  }
  std::printf("       all %6ld  %.4f\n", acc.count(0, cw::kGodsNumber), acc.pooled(0, cw::kGodsNumber));
}

std::vector<std::uint64_t> parse_seeds(const std::string& s) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');) {
    if (item.empty()) continue;
    try {
      out.push_back(std::stoull(item));
    } catch (const std::logic_error&) {
      throw cw::ValidationError("bad seed list '" + s + "'");
    }
  }
  if (out.empty()) throw cw::ValidationError("empty seed list");
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Transformer world models on the 2x2x2 cube: data, training, GRPO, probes and interventions."};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  g.app = &app;
  app.add_option("--config", g.config_path, "key = value file; every key mirrors a --flag");
  app.add_option("--out", g.out, "directory holding run directories")->capture_default_str();
  app.add_option("--data-dir", g.data_dir, "data directory (default: $CUBEWORLD_DATA or ./data)");
  app.add_flag("--deterministic", g.deterministic, "single-threaded, timestamp-free outputs");
  for (const auto& f : cw::config_fields()) app.add_option("--" + f.key, g.flags[f.key], f.help);

  auto* distances = app.add_subcommand("distances", "distance oracle");
  distances->require_subcommand(1);
  auto* dist_build = distances->add_subcommand("build", "run the BFS and save distances.bin (no-op when present)");

  auto* data = app.add_subcommand("data", "dataset generation");
  data->require_subcommand(1);
  auto* data_splits = data->add_subcommand("splits", "validation / train1 / train2 splits");
  auto* data_pretrain = data->add_subcommand("pretrain", "random-move pretraining sequences");

  std::string objective = "ft", which = "d1", init, name, run, checkpoint, from = "ft", seeds = "0";
  auto* train = app.add_subcommand("train", "supervised training");
  train->add_option("--objective", objective, "ft, pt or joint")->check(CLI::IsMember({"ft", "pt", "joint"}))->capture_default_str();
  train->add_option("--data", which, "d1, d2 or both")->check(CLI::IsMember({"d1", "d2", "both"}))->capture_default_str();
  train->add_option("--init", init, "pretrained checkpoint to continue with the ft objective");
  train->add_option("--name", name, "run name (default: the objective)");

  auto* grpo = app.add_subcommand("grpo", "GRPO post-training on train2");
  grpo->add_option("--from", from, "run whose final checkpoint starts GRPO")->capture_default_str();
  grpo->add_option("--checkpoint", checkpoint, "explicit starting checkpoint");
  grpo->add_option("--name", name, "run name (default: <from>_grpo)");

  auto* probes = app.add_subcommand("probes", "linear state probes");
  probes->require_subcommand(1);
  auto* probes_train = probes->add_subcommand("train", "fit probes on a model's training activations");
  auto* probes_eval = probes->add_subcommand("eval", "probe accuracy on validation activations");
  for (auto* sc : {probes_train, probes_eval}) {
    sc->add_option("--run", run, "model run directory name")->required();
    sc->add_option("--checkpoint", checkpoint, "explicit checkpoint");
  }

  auto* intervene = app.add_subcommand("intervene", "probe-based steering of next-move predictions");
  intervene->add_option("--run", run, "model run directory name (needs probes)")->required();
  intervene->add_option("--checkpoint", checkpoint, "explicit checkpoint");

  auto* eval = app.add_subcommand("eval", "task accuracy by complexity");
  eval->add_option("--run", run, "model run directory name")->required();
  eval->add_option("--checkpoint", checkpoint, "explicit checkpoint");

  auto* report = app.add_subcommand("report", "plot-ready tables from metrics");
  report->add_option("--run", run, "report on <out>/<run> only");

  auto* matrix = app.add_subcommand("matrix", "all training configurations for each seed (resumable)");
  matrix->add_option("--seeds", seeds, "comma-separated seeds")->capture_default_str();
  matrix->add_option("--name", name, "matrix directory name (default: matrix)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    const auto c = load_config(g);
    auto store = store_for(g);
    const auto log = cw::log_to_stderr;

    if (dist_build->parsed()) {
      store.build_distances(c.threads, log);
      const auto h = store.distances().histogram();
      std::uint64_t total = 0;
      for (int d = 0; d <= cw::kGodsNumber; ++d) {
        std::printf("%2d %8llu\n", d, static_cast<unsigned long long>(h[d]));
        total += h[d];
      }
      std::printf("states %llu, max depth %d\n", static_cast<unsigned long long>(total), store.distances().max_depth());
    } else if (data_splits->parsed()) {
      store.build_splits(c.split_seed, log);
      std::cout << store.splits().summary(store.distances()).str();
    } else if (data_pretrain->parsed()) {
      store.build_pretrain(c, log);
    } else if (train->parsed()) {
      const auto o = cw::parse_objective(objective);
      const cw::RunDir dir(g.out, name.empty() ? objective : name);
      if (fs::exists(dir.metrics_path())) fs::remove(dir.metrics_path());
      cw::KeyValueText extra;
      extra.set("objective", objective);
      extra.set("data", which);
      if (!init.empty()) extra.set("init", init);
      dir.write_manifest("train", c, store, extra, g.deterministic);
      const auto model = cw::train_model(store, c, o, cw::parse_data_choice(which),
                                         init.empty() ? std::nullopt : std::optional<fs::path>(init), dir, log);
      if (o != cw::Objective::kPt) {
        auto mw = dir.metrics();
        print_accuracy(cw::evaluate_model(store, c, model, dir.name(), &mw));
      }
    } else if (grpo->parsed()) {
      const cw::RunDir dir(g.out, name.empty() ? from + "_grpo" : name);
      if (fs::exists(dir.metrics_path())) fs::remove(dir.metrics_path());
      const auto start = checkpoint_for(g, from, checkpoint);
      cw::KeyValueText extra;
      extra.set("init", start.string());
      dir.write_manifest("grpo", c, store, extra, g.deterministic);
      const auto model = cw::grpo_model(store, c, start, dir, log);
      auto mw = dir.metrics();
      print_accuracy(cw::evaluate_model(store, c, model, dir.name(), &mw));
    } else if (probes_train->parsed()) {
      const cw::RunDir dir(g.out, run);
      const auto ck = cw::load_checkpoint(checkpoint_for(g, run, checkpoint));
      const auto ps = cw::train_model_probes(store, c, ck.model, log);
      cw::save_probes(dir.probes(), ps);
      log("wrote " + dir.probes().string() + " (" + std::to_string(ps.cells.size()) + " cells, " + std::to_string(ps.missing.size()) +
          " without data)");
    } else if (probes_eval->parsed()) {
      const cw::RunDir dir(g.out, run);
      const auto ck = cw::load_checkpoint(checkpoint_for(g, run, checkpoint));
      const auto ps = cw::load_probes(dir.probes());
      auto mw = dir.metrics();
      const auto rep = cw::evaluate_model_probes(store, c, ck.model, ps, dir.name(), &mw);
      std::printf("layer  accuracy\n");
      for (const auto& [l, s] : rep.by_layer) std::printf("%5d  %.4f\n", l, s.accuracy());
    } else if (intervene->parsed()) {
      const cw::RunDir dir(g.out, run);
      const auto ck = cw::load_checkpoint(checkpoint_for(g, run, checkpoint));
      const auto ps = cw::load_probes(dir.probes());
      auto mw = dir.metrics();
      const auto rep = cw::intervene_model(store, c, ck.model, ps, dir.name(), &mw);
      std::printf("complexity  count  success  random-colors  mass-delta\n");
      for (int b = 0; b <= cw::kGodsNumber + 1; ++b) {
        const auto& e = rep.edits[static_cast<std::size_t>(b)];
        if (e.count == 0) continue;
        std::printf("%10s %6ld  %.4f   %.4f        %+.4f\n", b == cw::kGodsNumber + 1 ? "all" : std::to_string(b).c_str(), e.count,
                    e.success_rate(), rep.random_colors[static_cast<std::size_t>(b)].success_rate(), e.mean_mass_delta());
      }
    } else if (eval->parsed()) {
      const cw::RunDir dir(g.out, run);
      const auto ck = cw::load_checkpoint(checkpoint_for(g, run, checkpoint));
      auto mw = dir.metrics();
      print_accuracy(cw::evaluate_model(store, c, ck.model, dir.name(), &mw));
    } else if (report->parsed()) {
      const fs::path root = run.empty() ? fs::path(g.out) : fs::path(g.out) / run;
      const auto tables = cw::build_report(root, store.splits_dir() / "splits.manifest");
      cw::write_report(tables, root / "report");
      for (const auto& t : tables) std::printf("%s: %zu rows\n", (root / "report" / (t.name + ".csv")).string().c_str(), t.rows.size());
    } else if (matrix->parsed()) {
      const auto list = parse_seeds(seeds);
      const fs::path root = fs::path(g.out) / (name.empty() ? "matrix" : name);
      const auto res = cw::run_matrix(store, c, list, root, g.deterministic, log);
      std::printf("completed %zu, already done %zu, failed %zu\n", res.completed.size(), res.skipped.size(), res.failed.size());
      if (!res.failed.empty()) return 1;
    }
  } catch (const cw::MissingArtifactError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const cw::ValidationError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
