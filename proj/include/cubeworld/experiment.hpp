#pragma once

// Experiment plumbing shared by the command-line tool and the acceptance
// suite: layered configuration, the data directory, run directories, the
// per-model analyses, the run matrix and report tables.

#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <functional>
#include <map>
#include <set>

#include "cubeworld/grpo.hpp"
#include "cubeworld/interpret.hpp"
#include "cubeworld/train.hpp"

namespace cubeworld {

using Log = std::function<void(const std::string&)>;

inline void log_to_stderr(const std::string& s) { std::fprintf(stderr, "%s\n", s.c_str()); }

enum class DataChoice { kD1, kD2, kBoth };

inline std::string to_string(DataChoice d) {
  switch (d) {
    case DataChoice::kD1: return "d1";
    case DataChoice::kD2: return "d2";
    case DataChoice::kBoth: return "both";
  }
  return "?";
}

inline DataChoice parse_data_choice(const std::string& s) {
  if (s == "d1") return DataChoice::kD1;
  if (s == "d2") return DataChoice::kD2;
  if (s == "both") return DataChoice::kBoth;
  throw ValidationError("unknown data choice '" + s + "' (expected d1, d2 or both)");
}

struct ExperimentConfig {
  std::string scale = "desk";
  std::uint64_t seed = 0;
  std::uint64_t split_seed = 0;
  int threads = 1;
  ModelConfig model = desk_model_config();
  std::size_t ft_states = 100000;  // per training split, 0 = the whole split
  std::size_t pretrain_sequences = 100000;
  int pretrain_len = 12;
  long pretrain_max_steps = 8000;
  TrainConfig train;
  GrpoConfig grpo;
  std::size_t grpo_eval_per_bucket = 50;
  std::size_t eval_per_bucket = 200;
  int slack = 3;
  ProbeConfig probe;
  std::size_t probe_train_trajectories = 8000;
  std::size_t probe_eval_trajectories = 1000;
  std::size_t intervention_per_cell = 40;
  double margin = 1.0;
  double alpha_cap = 1e4;

  static ExperimentConfig desk() {
    ExperimentConfig c;
    c.train.lr = 1e-3;
    c.train.max_steps = 8000;
    c.train.eval_every = 250;
    c.train.log_every = 250;
    c.grpo.prompt_batch = 64;
    c.grpo.lr = 1e-4;
    c.grpo.steps = 100;
    return c;
  }

  static ExperimentConfig full() {
    ExperimentConfig c;
    c.scale = "full";
    c.model = full_model_config();
    c.ft_states = 0;
    c.pretrain_sequences = 2000000;
    c.pretrain_max_steps = 0;
    c.grpo_eval_per_bucket = 200;
    c.eval_per_bucket = 1000;
    c.probe_train_trajectories = 20000;
    c.probe_eval_trajectories = 4000;
    c.intervention_per_cell = 1000;
    return c;
  }

  static ExperimentConfig preset(const std::string& scale) {
    if (scale == "desk") return desk();
    if (scale == "full") return full();
    throw ValidationError("unknown scale '" + scale + "' (expected desk or full)");
  }

  TrainConfig train_config(Objective o) const {
    TrainConfig t = train;
    t.objective = o;
    t.seed = seed;
    if (o == Objective::kPt) t.max_steps = pretrain_max_steps;
    return t;
  }

  GrpoConfig grpo_config() const {
    GrpoConfig g = grpo;
    g.seed = seed;
    return g;
  }

  ProbeConfig probe_config() const {
    ProbeConfig p = probe;
    p.seed = seed;
    return p;
  }

  ModelConfig model_config() const {
    ModelConfig m = model;
    m.seed = seed;
    return m;
  }

  void validate() const {
    model.validate();
    train.validate();
    grpo.validate();
    if (pretrain_len < 1 || slack < 0 || threads < 1) throw ValidationError("invalid experiment config");
  }
};

// ---------------------------------------------------------------------------
// Every config key, usable both as a key in a config file and as a --key flag.

struct ConfigField {
  std::string key;
  std::string help;
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&)> set;
};

namespace detail {

template <class T>
T parse_value(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    T out{};
    if constexpr (std::is_same_v<T, std::string>) {
      return v;
    } else if constexpr (std::is_same_v<T, bool>) {
      if (v == "true" || v == "1") return true;
      if (v == "false" || v == "0") return false;
      throw std::invalid_argument(v);
    } else if constexpr (std::is_floating_point_v<T>) {
      out = static_cast<T>(std::stod(v, &used));
    } else if constexpr (std::is_unsigned_v<T>) {
      if (!v.empty() && v[0] == '-') throw std::invalid_argument(v);
      out = static_cast<T>(std::stoull(v, &used));
    } else {
      out = static_cast<T>(std::stoll(v, &used));
    }
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::logic_error&) {
    throw ValidationError("invalid value '" + v + "' for " + key);
  }
}

template <class T>
std::string format_value(const T& v) {
  if constexpr (std::is_same_v<T, std::string>) {
    return v;
  } else if constexpr (std::is_same_v<T, bool>) {
    return v ? "true" : "false";
  } else {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
  }
}

template <class F>
ConfigField bind_field(std::string key, std::string help, F ref) {
  using T = std::remove_cvref_t<decltype(ref(std::declval<ExperimentConfig&>()))>;
  return {key, std::move(help), [ref](const ExperimentConfig& c) { return format_value(ref(const_cast<ExperimentConfig&>(c))); },
          [ref, key](ExperimentConfig& c, const std::string& v) { ref(c) = parse_value<T>(key, v); }};
}

}  // namespace detail

inline const std::vector<ConfigField>& config_fields() {
  using detail::bind_field;
  using C = ExperimentConfig;
  static const std::vector<ConfigField> fields{
      bind_field("scale", "desk or full; selects the defaults every other key overrides", [](C& c) -> std::string& { return c.scale; }),
      bind_field("seed", "model init, data order and sampling seed", [](C& c) -> std::uint64_t& { return c.seed; }),
      bind_field("split-seed", "seed for the train1/train2 partition and data subsamples", [](C& c) -> std::uint64_t& { return c.split_seed; }),
      bind_field("threads", "threads for the distance-table BFS", [](C& c) -> int& { return c.threads; }),
      bind_field("layers", "transformer layers", [](C& c) -> int& { return c.model.layers; }),
      bind_field("d-model", "residual width", [](C& c) -> int& { return c.model.d_model; }),
      bind_field("heads", "attention heads", [](C& c) -> int& { return c.model.heads; }),
      bind_field("max-seq-len", "positions (>= 36)", [](C& c) -> int& { return c.model.max_seq_len; }),
      bind_field("init-std", "weight init standard deviation", [](C& c) -> double& { return c.model.init_std; }),
      bind_field("ft-states", "training states drawn per split (0 = all)", [](C& c) -> std::size_t& { return c.ft_states; }),
      bind_field("pretrain-sequences", "random-move pretraining sequences", [](C& c) -> std::size_t& { return c.pretrain_sequences; }),
      bind_field("pretrain-len", "moves per pretraining sequence", [](C& c) -> int& { return c.pretrain_len; }),
      bind_field("pretrain-max-steps", "step cap for pretraining (0 = none)", [](C& c) -> long& { return c.pretrain_max_steps; }),
      bind_field("lr", "supervised learning rate", [](C& c) -> double& { return c.train.lr; }),
      bind_field("weight-decay", "supervised AdamW weight decay", [](C& c) -> double& { return c.train.weight_decay; }),
      bind_field("batch", "supervised batch size", [](C& c) -> int& { return c.train.batch; }),
      bind_field("validation-size", "early-stopping validation draw", [](C& c) -> int& { return c.train.validation_size; }),
      bind_field("patience", "evaluations without improvement before stopping", [](C& c) -> int& { return c.train.patience; }),
      bind_field("max-epochs", "epoch cap", [](C& c) -> int& { return c.train.max_epochs; }),
      bind_field("max-steps", "step cap for supervised runs (0 = none)", [](C& c) -> long& { return c.train.max_steps; }),
      bind_field("eval-every", "steps between validation evaluations", [](C& c) -> int& { return c.train.eval_every; }),
      bind_field("log-every", "steps between training-loss records", [](C& c) -> int& { return c.train.log_every; }),
      bind_field("grpo-group-size", "rollouts per prompt", [](C& c) -> int& { return c.grpo.group_size; }),
      bind_field("grpo-beta", "KL coefficient", [](C& c) -> double& { return c.grpo.beta; }),
      bind_field("grpo-max-generation", "generated tokens per rollout, EOS included", [](C& c) -> int& { return c.grpo.max_generation; }),
      bind_field("grpo-lr", "GRPO learning rate", [](C& c) -> double& { return c.grpo.lr; }),
      bind_field("grpo-weight-decay", "GRPO weight decay", [](C& c) -> double& { return c.grpo.weight_decay; }),
      bind_field("grpo-prompt-batch", "prompts per GRPO step", [](C& c) -> int& { return c.grpo.prompt_batch; }),
      bind_field("grpo-eval-batch", "decode batch for GRPO evaluation", [](C& c) -> int& { return c.grpo.eval_batch; }),
      bind_field("grpo-temperature", "sampling temperature", [](C& c) -> double& { return c.grpo.temperature; }),
      bind_field("grpo-steps", "GRPO updates", [](C& c) -> long& { return c.grpo.steps; }),
      bind_field("grpo-eval-every", "GRPO steps between solve-rate evaluations", [](C& c) -> int& { return c.grpo.eval_every; }),
      bind_field("grpo-eval-per-bucket", "validation states per complexity for GRPO evaluation",
                 [](C& c) -> std::size_t& { return c.grpo_eval_per_bucket; }),
      bind_field("eval-per-bucket", "validation states per complexity for task accuracy", [](C& c) -> std::size_t& { return c.eval_per_bucket; }),
      bind_field("slack", "extra moves allowed over the optimal distance", [](C& c) -> int& { return c.slack; }),
      bind_field("probe-lr", "probe learning rate", [](C& c) -> double& { return c.probe.lr; }),
      bind_field("probe-weight-decay", "probe weight decay", [](C& c) -> double& { return c.probe.weight_decay; }),
      bind_field("probe-batch", "probe batch size", [](C& c) -> int& { return c.probe.batch; }),
      bind_field("probe-epochs", "probe epochs", [](C& c) -> int& { return c.probe.epochs; }),
      bind_field("probe-validation-size", "held-out records per probe cell", [](C& c) -> int& { return c.probe.validation_size; }),
      bind_field("probe-patience", "probe early-stopping patience", [](C& c) -> int& { return c.probe.patience; }),
      bind_field("probe-eval-every", "probe steps between evaluations", [](C& c) -> int& { return c.probe.eval_every; }),
      bind_field("probe-train-trajectories", "training trajectories for probe activations",
                 [](C& c) -> std::size_t& { return c.probe_train_trajectories; }),
      bind_field("probe-eval-trajectories", "validation trajectories for probe accuracy",
                 [](C& c) -> std::size_t& { return c.probe_eval_trajectories; }),
      bind_field("intervention-per-cell", "samples per (complexity, timestep) cell", [](C& c) -> std::size_t& { return c.intervention_per_cell; }),
      bind_field("margin", "intervention logit margin", [](C& c) -> double& { return c.margin; }),
      bind_field("alpha-cap", "largest intervention alpha", [](C& c) -> double& { return c.alpha_cap; }),
  };
  return fields;
}

/// Applies `layers` in order on top of the preset named by the last "scale" key.
inline ExperimentConfig make_config(std::span<const KeyValueText> layers) {
  std::string scale = "desk";
  for (const auto& kv : layers) scale = kv.get_or("scale", scale);
  ExperimentConfig c = ExperimentConfig::preset(scale);
  std::map<std::string, const ConfigField*> by_key;
  for (const auto& f : config_fields()) by_key[f.key] = &f;
  for (const auto& kv : layers) {
    for (const auto& [k, v] : kv.entries()) {
      auto it = by_key.find(k);
      if (it == by_key.end()) throw ValidationError("unknown config key '" + k + "'");
      it->second->set(c, v);
    }
  }
  c.validate();
  return c;
}

inline KeyValueText config_to_kv(const ExperimentConfig& c) {
  KeyValueText kv;
  for (const auto& f : config_fields()) kv.set(f.key, f.get(c));
  return kv;
}

// ---------------------------------------------------------------------------
// Data directory: distances.bin, splits/, pretrain.ds.

class DataStore {
 public:
  explicit DataStore(std::filesystem::path dir) : dir_(std::move(dir)) {}

  /// $CUBEWORLD_DATA when set, else ./data.
  static std::filesystem::path default_dir() {
    const char* env = std::getenv("CUBEWORLD_DATA");
    return env && *env ? std::filesystem::path(env) : std::filesystem::path("data");
  }

  const std::filesystem::path& dir() const { return dir_; }
  std::filesystem::path distances_path() const { return dir_ / "distances.bin"; }
  std::filesystem::path splits_dir() const { return dir_ / "splits"; }
  std::filesystem::path pretrain_path() const { return dir_ / "pretrain.ds"; }
  std::filesystem::path pretrain_manifest() const { return dir_ / "pretrain.manifest"; }

  /// Returns false when a valid table was already present.
  bool build_distances(int threads, const Log& log = log_to_stderr) {
    if (std::filesystem::exists(distances_path())) {
      try {
        table_ = DistanceTable::load(distances_path());
        log("distance table at " + distances_path().string() + " is up to date");
        return false;
      } catch (const FormatError& e) {
        log(std::string("rebuilding distance table: ") + e.what());
      }
    }
    std::filesystem::create_directories(dir_);
    table_ = DistanceTable::build(threads);
    table_->save(distances_path());
    log("wrote " + distances_path().string());
    return true;
  }

  const DistanceTable& distances() {
    if (!table_) {
      if (!std::filesystem::exists(distances_path())) {
        throw MissingArtifactError("no distance table in " + dir_.string(), "distances build");
      }
      table_ = DistanceTable::load(distances_path());
    }
    return *table_;
  }

  bool build_splits(std::uint64_t seed, const Log& log = log_to_stderr) {
    if (std::filesystem::exists(splits_dir() / "splits.manifest")) {
      auto existing = load_splits(splits_dir());
      if (existing.seed == seed) {
        splits_ = std::move(existing);
        log("splits in " + splits_dir().string() + " are up to date");
        return false;
      }
    }
    auto m = cubeworld::build_splits(distances(), seed);
    save_splits(splits_dir(), m, distances());
    splits_ = std::move(m);
    log("wrote splits to " + splits_dir().string());
    return true;
  }

  const SplitManifest& splits() {
    if (!splits_) splits_ = load_splits(splits_dir());
    return *splits_;
  }

  bool build_pretrain(const ExperimentConfig& c, const Log& log = log_to_stderr) {
    KeyValueText want;
    want.set_number("sequences", c.pretrain_sequences);
    want.set_number("len", c.pretrain_len);
    want.set_number("seed", c.split_seed);
    want.set_number("split_seed", splits().seed);
    if (std::filesystem::exists(pretrain_manifest()) && std::filesystem::exists(pretrain_path()) &&
        KeyValueText::load(pretrain_manifest()).str() == want.str()) {
      log("pretraining data at " + pretrain_path().string() + " is up to date");
      return false;
    }
    const auto trajs = gen_pretrain_data(splits().training(), c.pretrain_sequences, c.pretrain_len, c.split_seed);
    write_dataset(pretrain_path(), TrajectoryKind::kRandom, trajs);
    want.save(pretrain_manifest());
    pretrain_.reset();
    log("wrote " + std::to_string(trajs.size()) + " pretraining sequences to " + pretrain_path().string());
    return true;
  }

  const std::vector<Trajectory>& pretrain() {
    if (!pretrain_) {
      if (!std::filesystem::exists(pretrain_path())) throw MissingArtifactError("no pretraining data in " + dir_.string(), "data pretrain");
      pretrain_ = read_dataset(pretrain_path()).records;
    }
    return *pretrain_;
  }

 private:
  std::filesystem::path dir_;
  std::optional<DistanceTable> table_;
  std::optional<SplitManifest> splits_;
  std::optional<std::vector<Trajectory>> pretrain_;
};

// ---------------------------------------------------------------------------
// Data selections. Subsamples depend on the split seed only, so every model
// seed trains on the same states.

inline StateSet training_states(DataStore& store, const ExperimentConfig& c, DataChoice d) {
  const auto& sp = store.splits();
  auto pick = [&](const StateSet& s, std::uint64_t salt) {
    return c.ft_states == 0 || c.ft_states >= s.size() ? s : subsample(s, c.ft_states, c.split_seed * 1000 + salt);
  };
  if (d == DataChoice::kD1) return pick(sp.train1, 1);
  if (d == DataChoice::kD2) return pick(sp.train2, 2);
  StateSet a = pick(sp.train1, 1), b = pick(sp.train2, 2), out;
  std::merge(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(out));
  return out;
}

inline std::vector<Example> ft_examples(DataStore& store, const ExperimentConfig& c, DataChoice d) {
  return make_examples(solution_trajectories(store.distances(), training_states(store, c, d)));
}

/// Early-stopping draw of solution trajectories from the validation split.
inline std::vector<Example> ft_validation(DataStore& store, const ExperimentConfig& c) {
  const auto s = subsample(store.splits().validation, static_cast<std::size_t>(c.train.validation_size), c.split_seed * 1000 + 3);
  return make_examples(solution_trajectories(store.distances(), s));
}

/// Early-stopping draw for pretraining: random-move sequences from validation states.
inline std::vector<Example> pt_validation(DataStore& store, const ExperimentConfig& c) {
  const auto src = subsample(store.splits().validation, static_cast<std::size_t>(c.train.validation_size), c.split_seed * 1000 + 4);
  return make_examples(gen_pretrain_data(src, src.size(), c.pretrain_len, c.split_seed * 1000 + 5));
}

inline StateSet evaluation_states(DataStore& store, const ExperimentConfig& c, std::size_t per_bucket) {
  return stratified_sample(store.distances(), store.splits().validation, per_bucket, c.split_seed * 1000 + 6);
}

// ---------------------------------------------------------------------------
// Run directories: <out>/<name>/{manifest, checkpoints/, metrics, report/}.

class RunDir {
 public:
  RunDir(const std::filesystem::path& out, const std::string& name) : root_(out / name), name_(name) {
    if (name.empty()) throw ValidationError("run name must not be empty");
  }

  const std::string& name() const { return name_; }
  const std::filesystem::path& root() const { return root_; }
  std::filesystem::path manifest() const { return root_ / "manifest"; }
  std::filesystem::path checkpoints() const { return root_ / "checkpoints"; }
  std::filesystem::path checkpoint(const std::string& stem = "final") const { return checkpoints() / (stem + ".ckpt"); }
  std::filesystem::path metrics_path() const { return root_ / "metrics"; }
  std::filesystem::path report() const { return root_ / "report"; }
  std::filesystem::path probes() const { return root_ / "probes.bin"; }
  std::filesystem::path done_marker() const { return root_ / "done"; }

  void create() const {
    std::filesystem::create_directories(checkpoints());
    std::filesystem::create_directories(report());
  }

  /// Appends to the run's metrics stream.
  MetricsWriter metrics() const {
    create();
    return MetricsWriter(metrics_path(), true);
  }

  void write_manifest(const std::string& command, const ExperimentConfig& c, const DataStore& store, const KeyValueText& extra,
                      bool deterministic) const {
    create();
    KeyValueText kv;
    kv.set("command", command);
    kv.set("run", name_);
    kv.set("version.checkpoint", std::to_string(kCheckpointVersion));
    kv.set("version.dataset", std::to_string(kDatasetVersion));
    kv.set("version.splits", SplitManifest::kVersion);
    kv.set("version.probes", std::to_string(kProbeFileVersion));
    kv.set("data.dir", store.dir().string());
    kv.set("deterministic", deterministic ? "true" : "false");
    const auto config = config_to_kv(c);
    for (const auto& [k, v] : config.entries()) kv.set("config." + k, v);
    for (const auto& [k, v] : extra.entries()) kv.set(k, v);
    if (!deterministic) kv.set("written_at", std::to_string(static_cast<long long>(std::time(nullptr))));
    kv.save(manifest());
  }

 private:
  std::filesystem::path root_;
  std::string name_;
};

// ---------------------------------------------------------------------------
// Per-model analyses. Each appends summary records to `metrics` under `run`.

inline AccuracyTable evaluate_model(DataStore& store, const ExperimentConfig& c, const Transformer<float>& model, const std::string& run,
                                    MetricsWriter* metrics) {
  const auto states = evaluation_states(store, c, c.eval_per_bucket);
  const auto acc = eval_task_accuracy(store.distances(), states, model_rollout(model), c.slack);
  if (metrics) {
    acc.write(*metrics, run);
    metrics->value(run, "task_accuracy", "0-3", acc.pooled(0, 3), acc.count(0, 3));
    metrics->value(run, "task_accuracy", "0-6", acc.pooled(0, 6), acc.count(0, 6));
    metrics->value(run, "task_accuracy", "6-11", acc.pooled(6, kGodsNumber), acc.count(6, kGodsNumber));
  }
  return acc;
}

inline std::vector<int> all_layers(const Transformer<float>& m) {
  std::vector<int> out;
  for (int l = 0; l <= m.config().layers; ++l) out.push_back(l);
  return out;
}

inline int mid_layer(int num_layers) { return (num_layers + 1) / 2; }

inline ProbeSet train_model_probes(DataStore& store, const ExperimentConfig& c, const Transformer<float>& model, const Log& log) {
  const auto states = subsample(store.splits().training(), c.probe_train_trajectories, c.split_seed * 1000 + 7);
  const auto trajs = solution_trajectories(store.distances(), states);
  const auto ds = collect_activations(model, trajs, all_layers(model));
  log("probe activations: " + std::to_string(ds.records()) + " records");
  auto ps = train_probes(ds, c.probe_config());
  ps.metadata.set_number("probe.train_trajectories", trajs.size());
  return ps;
}

struct ProbeReport {
  std::map<ProbeKey, ProbeScore> cells;
  std::map<int, ProbeScore> by_layer;
};

inline ProbeReport evaluate_model_probes(DataStore& store, const ExperimentConfig& c, const Transformer<float>& model, const ProbeSet& ps,
                                         const std::string& run, MetricsWriter* metrics) {
  const auto states = subsample(store.splits().validation, c.probe_eval_trajectories, c.split_seed * 1000 + 8);
  const auto ds = collect_activations(model, solution_trajectories(store.distances(), states), all_layers(model));
  ProbeReport rep;
  rep.cells = probe_accuracy(ps, ds);
  rep.by_layer = probe_accuracy_by_layer(rep.cells);
  if (metrics) {
    for (const auto& [l, s] : rep.by_layer) metrics->value(run, "probe_accuracy", std::to_string(l), s.accuracy(), s.total);
    for (const auto& [k, s] : rep.cells) {
      metrics->value(run, "probe_accuracy_cell", std::to_string(k.first) + ":" + std::to_string(k.second), s.accuracy(), s.total);
    }
  }
  return rep;
}

struct InterventionReport {
  std::array<InterventionBucket, kGodsNumber + 2> edits{};
  std::array<InterventionBucket, kGodsNumber + 2> random_colors{};
  std::array<InterventionBucket, kGodsNumber + 2> identity{};   // T = S, alpha = 0, no projection
  std::array<InterventionBucket, kGodsNumber + 2> self_edit{};  // T = S through the full edit
  InterventionSetReport set;
  std::size_t without_probe = 0;  // samples dropped for lack of a usable probe cell
};

inline InterventionReport intervene_model(DataStore& store, const ExperimentConfig& c, const Transformer<float>& model, const ProbeSet& ps,
                                          const std::string& run, MetricsWriter* metrics) {
  const auto& tab = store.distances();
  InterventionReport rep;
  auto all = build_intervention_set(tab, store.splits().validation, c.split_seed * 1000 + 9, c.intervention_per_cell, &rep.set);
  const auto layers = default_intervention_layers(model.config().layers);
  std::vector<InterventionSample> samples;
  for (const auto& s : all) {
    if (std::all_of(layers.begin(), layers.end(), [&](int l) { return ps.has(l, s.t) && ps.at(l, s.t).usable(); })) samples.push_back(s);
  }
  rep.without_probe = all.size() - samples.size();
  InterventionConfig ic;
  ic.margin = c.margin;
  ic.alpha_cap = c.alpha_cap;
  ic.seed = c.seed;
  rep.edits = intervention_metrics(run_interventions(model, ps, tab, samples, ic));
  InterventionConfig rnd = ic;
  rnd.random_target_colors = true;
  rep.random_colors = intervention_metrics(run_interventions(model, ps, tab, samples, rnd));
  for (auto& s : samples) s.target = s.source;
  InterventionConfig identity = ic;
  identity.project = false;
  identity.adaptive = false;
  identity.fixed_alpha = 0;
  rep.identity = intervention_metrics(run_interventions(model, ps, tab, samples, identity));
  rep.self_edit = intervention_metrics(run_interventions(model, ps, tab, samples, ic));
  if (metrics) {
    metrics->value(run, "intervention_without_probe", "all", static_cast<double>(rep.without_probe), static_cast<long>(all.size()));
    for (int b = 0; b <= kGodsNumber + 1; ++b) {
      const auto& e = rep.edits[static_cast<std::size_t>(b)];
      if (e.count == 0) continue;
      const std::string bucket = b == kGodsNumber + 1 ? "all" : std::to_string(b);
      const auto& r = rep.random_colors[static_cast<std::size_t>(b)];
      const auto& id = rep.identity[static_cast<std::size_t>(b)];
      auto frac = [](long k, long n) { return n ? static_cast<double>(k) / static_cast<double>(n) : 0.0; };
      metrics->value(run, "intervention_success", bucket, e.success_rate(), e.count);
      metrics->value(run, "intervention_mass_delta", bucket, e.mean_mass_delta(), e.count);
      metrics->value(run, "intervention_flagged", bucket, frac(e.flagged, e.count), e.count);
      metrics->value(run, "intervention_margins_ok", bucket, frac(e.margins_ok, e.unflagged()), e.unflagged());
      metrics->value(run, "intervention_joint_margins_ok", bucket, frac(e.joint_margins_ok, e.unflagged()), e.unflagged());
      metrics->value(run, "intervention_success_random_colors", bucket, r.success_rate(), r.count);
      metrics->value(run, "identity_top1_changed", bucket, frac(id.top1_changed, id.count), id.count);
      const auto& se = rep.self_edit[static_cast<std::size_t>(b)];
      metrics->value(run, "self_edit_top1_changed", bucket, frac(se.top1_changed, se.count), se.count);
    }
  }
  return rep;
}

/// Task accuracy, probes and interventions for one trained model, in `dir`.
inline void analyze_model(DataStore& store, const ExperimentConfig& c, const Transformer<float>& model, const RunDir& dir,
                          const Log& log) {
  auto mw = dir.metrics();
  log(dir.name() + ": task accuracy");
  const auto acc = evaluate_model(store, c, model, dir.name(), &mw);
  log(dir.name() + ": accuracy <=3 " + std::to_string(acc.pooled(0, 3)) + ", <=6 " + std::to_string(acc.pooled(0, 6)));
  log(dir.name() + ": probes");
  const auto ps = train_model_probes(store, c, model, log);
  save_probes(dir.probes(), ps);
  evaluate_model_probes(store, c, model, ps, dir.name(), &mw);
  log(dir.name() + ": interventions");
  intervene_model(store, c, model, ps, dir.name(), &mw);
}

// ---------------------------------------------------------------------------
// Training commands.

inline KeyValueText checkpoint_metadata(const RunRecord& rec, const ExperimentConfig& c, const std::string& stage) {
  KeyValueText kv = rec.summary();
  kv.set("stage", stage);
  kv.set_number("seed", c.seed);
  return kv;
}

/// Trains one model and leaves it in `dir`/checkpoints/final.ckpt. With `init`
/// and objective ft, continues a pretrained checkpoint (phase 2 of PT -> FT).
inline Transformer<float> train_model(DataStore& store, const ExperimentConfig& c, Objective o, DataChoice d,
                                      const std::optional<std::filesystem::path>& init, const RunDir& dir, const Log& log) {
  auto mw = dir.metrics();
  const auto cfg = c.train_config(o);
  std::optional<TrainedModel> out;
  if (o == Objective::kPt) {
    if (init) throw ValidationError("pretraining starts from scratch; drop --init");
    const auto train = make_examples(store.pretrain());
    const auto val = pt_validation(store, c);
    log(dir.name() + ": pretraining on " + std::to_string(train.size()) + " sequences");
    out = run_objective(c.model_config(), cfg, train, val, dir.name(), &mw);
  } else {
    const auto train = ft_examples(store, c, d);
    const auto val = ft_validation(store, c);
    log(dir.name() + ": " + to_string(o) + " on " + std::to_string(train.size()) + " trajectories (" + to_string(d) + ")");
    if (init) {
      if (o != Objective::kFt) throw ValidationError("--init continues a pretrained model with the ft objective only");
      auto ck = load_checkpoint(*init);
      auto opt = ck.optimizer ? std::move(*ck.optimizer) : make_optimizer(ck.model, cfg);
      out = finetune_pretrained(std::move(ck.model), std::move(opt), cfg, train, val, dir.name(), &mw);
    } else {
      out = run_objective(c.model_config(), cfg, train, val, dir.name(), &mw);
    }
  }
  out->record.checkpoint = dir.checkpoint().string();
  auto meta = checkpoint_metadata(out->record, c, to_string(o));
  meta.set("data", o == Objective::kPt ? "pretrain" : to_string(d));
  if (init) meta.set("init", init->string());
  save_checkpoint(dir.checkpoint(), out->model, &out->optimizer, meta);
  log(dir.name() + ": stopped (" + out->record.stop_reason + ") after " + std::to_string(out->record.steps) + " steps, best val " +
      std::to_string(out->record.best_val));
  if (o == Objective::kPt) {
    const auto val = pt_validation(store, c);
    const auto b = compute_loss(out->model, std::span<const Example>(val), kStateLoss, static_cast<Gradients<float>*>(nullptr), 256);
    const double acc = static_cast<double>(b.state_correct) / static_cast<double>(b.state_count * kNumStickers);
    mw.value(dir.name(), "state_head_accuracy", "all", acc, b.state_count);
  }
  return std::move(out->model);
}

inline Transformer<float> grpo_model(DataStore& store, const ExperimentConfig& c, const std::filesystem::path& from, const RunDir& dir,
                                     const Log& log) {
  auto mw = dir.metrics();
  auto ck = load_checkpoint(from);
  const auto eval = evaluation_states(store, c, c.grpo_eval_per_bucket);
  log(dir.name() + ": GRPO from " + from.string());
  auto run = grpo_train(ck.model, store.distances(), store.splits().train2, eval, c.grpo_config(), dir.name(), &mw);
  KeyValueText meta = c.grpo_config().to_kv();
  meta.set("stage", "grpo");
  meta.set("init", from.string());
  meta.set("stop_reason", run.stop_reason);
  save_checkpoint(dir.checkpoint(), run.model, nullptr, meta);
  long silent = 0;
  for (const auto& h : run.history) silent += h.zero_variance_fraction == 1.0;
  log(dir.name() + ": " + std::to_string(run.history.size()) + " steps (" + std::to_string(silent) + " with every group at zero variance), " +
      run.stop_reason);
  return std::move(run.model);
}

// ---------------------------------------------------------------------------
// Run matrix: three strategies x {D1, D1 u D2, D1 then GRPO on D2} per seed.

struct MatrixCell {
  std::string name;
  std::string strategy;  // ft, ptft, joint
  std::string variant;   // d1, both, d1_grpo
};

inline const std::vector<MatrixCell>& matrix_cells() {
  static const std::vector<MatrixCell> cells{
      {"ft_d1", "ft", "d1"},       {"ft_both", "ft", "both"},       {"ft_d1_grpo", "ft", "d1_grpo"},
      {"ptft_d1", "ptft", "d1"},   {"ptft_both", "ptft", "both"},   {"ptft_d1_grpo", "ptft", "d1_grpo"},
      {"joint_d1", "joint", "d1"}, {"joint_both", "joint", "both"}, {"joint_d1_grpo", "joint", "d1_grpo"},
  };
  return cells;
}

struct MatrixResult {
  std::vector<std::string> completed;
  std::vector<std::string> skipped;  // already done
  std::vector<std::pair<std::string, std::string>> failed;
};

inline MatrixResult run_matrix(DataStore& store, const ExperimentConfig& base, std::span<const std::uint64_t> seeds,
                               const std::filesystem::path& root, bool deterministic, const Log& log = log_to_stderr) {
  MatrixResult res;
  std::filesystem::create_directories(root);
  auto cell = [&](const std::string& id, const RunDir& dir, const ExperimentConfig& c, const std::function<void()>& body) {
    if (std::filesystem::exists(dir.done_marker())) {
      res.skipped.push_back(id);
      return true;
    }
    try {
      if (std::filesystem::exists(dir.metrics_path())) std::filesystem::remove(dir.metrics_path());
      dir.write_manifest("matrix", c, store, KeyValueText{}, deterministic);
      body();
      std::ofstream(dir.done_marker()) << "done\n";
      res.completed.push_back(id);
      return true;
    } catch (const std::exception& e) {
      log(id + " failed: " + e.what());
      res.failed.emplace_back(id, e.what());
      return false;
    }
  };
  for (auto seed : seeds) {
    ExperimentConfig c = base;
    c.seed = seed;
    const auto sroot = root / ("seed" + std::to_string(seed));
    const RunDir pre(sroot, "pretrain");
    cell("seed" + std::to_string(seed) + "/pretrain", pre, c, [&] { train_model(store, c, Objective::kPt, DataChoice::kBoth, {}, pre, log); });
    for (const auto& mc : matrix_cells()) {
      const RunDir dir(sroot, mc.name);
      const std::string id = "seed" + std::to_string(seed) + "/" + mc.name;
      cell(id, dir, c, [&] {
        Transformer<float> model(c.model_config());
        if (mc.variant == "d1_grpo") {
          const RunDir src(sroot, mc.strategy + "_d1");
          if (!std::filesystem::exists(src.done_marker())) throw MissingArtifactError(src.name() + " did not complete", "matrix");
          model = grpo_model(store, c, src.checkpoint(), dir, log);
        } else {
          const DataChoice d = mc.variant == "d1" ? DataChoice::kD1 : DataChoice::kBoth;
          if (mc.strategy == "ft") model = train_model(store, c, Objective::kFt, d, {}, dir, log);
          if (mc.strategy == "joint") model = train_model(store, c, Objective::kJoint, d, {}, dir, log);
          if (mc.strategy == "ptft") {
            if (!std::filesystem::exists(pre.done_marker())) throw MissingArtifactError("pretraining did not complete", "matrix");
            model = train_model(store, c, Objective::kFt, d, pre.checkpoint(), dir, log);
          }
        }
        analyze_model(store, c, model, dir, log);
      });
    }
  }
  KeyValueText summary;
  summary.set_list("seeds", seeds);
  summary.set_number("completed", res.completed.size());
  summary.set_number("skipped", res.skipped.size());
  summary.set_number("failed", res.failed.size());
  for (const auto& [id, why] : res.failed) summary.set("failed." + id, why);
  summary.save(root / "matrix.manifest");
  return res;
}

// ---------------------------------------------------------------------------
// Report: plot-ready tables from every metrics stream under a directory.

struct PlotTable {
  std::string name;
  std::vector<std::string> columns;  // first column labels the rows
  std::vector<std::vector<std::string>> rows;

  std::string csv() const {
    std::string s;
    auto line = [&](const std::vector<std::string>& cells) {
      for (std::size_t i = 0; i < cells.size(); ++i) s += (i ? "," : "") + cells[i];
      s += '\n';
    };
    line(columns);
    for (const auto& r : rows) line(r);
    return s;
  }
};

namespace detail {

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

/// Mean of value records over every file (seeds), keyed by (run, metric, bucket).
using MetricMeans = std::map<std::tuple<std::string, std::string, std::string>, std::pair<double, int>>;

inline MetricMeans collect_metric_means(const std::filesystem::path& root) {
  MetricMeans out;
  if (!std::filesystem::exists(root)) return out;
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::recursive_directory_iterator(root)) {
    if (e.is_regular_file() && e.path().filename() == "metrics") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    for (const auto& j : read_metrics(f)) {
      if (!j.contains("metric") || !j.contains("value")) continue;
      auto& slot = out[{j["run"].get<std::string>(), j["metric"].get<std::string>(), j["bucket"].get<std::string>()}];
      slot.first += j["value"].get<double>();
      ++slot.second;
    }
  }
  return out;
}

inline std::vector<std::string> model_columns(const MetricMeans& m) {
  std::set<std::string> runs;
  for (const auto& [k, v] : m) runs.insert(std::get<0>(k));
  std::vector<std::string> out;
  for (const auto& c : matrix_cells()) {
    if (runs.erase(c.name)) out.push_back(c.name);
  }
  out.insert(out.end(), runs.begin(), runs.end());
  return out;
}

inline PlotTable metric_table(const std::string& name, const std::string& row_label, const std::string& metric,
                              const std::vector<std::string>& buckets, const MetricMeans& m, const std::vector<std::string>& runs) {
  PlotTable t{name, {row_label}, {}};
  std::vector<std::string> used;
  for (const auto& r : runs) {
    for (const auto& b : buckets) {
      if (m.count({r, metric, b})) {
        used.push_back(r);
        break;
      }
    }
  }
  t.columns.insert(t.columns.end(), used.begin(), used.end());
  for (const auto& b : buckets) {
    if (used.empty()) break;
    std::vector<std::string> row{b};
    for (const auto& r : used) {
      auto it = m.find({r, metric, b});
      row.push_back(it == m.end() ? "NA" : fmt(it->second.first / it->second.second));
    }
    t.rows.push_back(row);
  }
  return t;
}

}  // namespace detail

/// Four tables: task accuracy by complexity, probe accuracy by layer,
/// intervention success by complexity, and split depth histograms.
inline std::vector<PlotTable> build_report(const std::filesystem::path& root, const std::optional<std::filesystem::path>& splits_manifest) {
  const auto means = detail::collect_metric_means(root);
  const auto runs = detail::model_columns(means);
  std::vector<std::string> complexity, layers;
  for (int b = 0; b <= kGodsNumber; ++b) complexity.push_back(std::to_string(b));
  complexity.push_back("all");
  int max_layer = -1;
  for (const auto& [k, v] : means) {
    if (std::get<1>(k) == "probe_accuracy") max_layer = std::max(max_layer, std::stoi(std::get<2>(k)));
  }
  for (int l = 0; l <= max_layer; ++l) layers.push_back(std::to_string(l));
  std::vector<PlotTable> out;
  out.push_back(detail::metric_table("task_accuracy", "complexity", "task_accuracy", complexity, means, runs));
  out.push_back(detail::metric_table("probe_accuracy", "layer", "probe_accuracy", layers, means, runs));
  out.push_back(detail::metric_table("intervention_success", "complexity", "intervention_success", complexity, means, runs));
  PlotTable hist{"depth_histogram", {"depth"}, {}};
  if (splits_manifest && std::filesystem::exists(*splits_manifest)) {
    const auto kv = KeyValueText::load(*splits_manifest);
    const std::vector<std::string> names{"all", "validation", "train1", "train2"};
    std::vector<std::vector<double>> cols;
    for (const auto& n : names) {
      hist.columns.push_back(n);
      cols.push_back(kv.get_list("histogram." + n));
    }
    for (int d = 0; d <= kGodsNumber; ++d) {
      std::vector<std::string> row{std::to_string(d)};
      for (const auto& c : cols) row.push_back(d < static_cast<int>(c.size()) ? std::to_string(static_cast<long long>(c[static_cast<std::size_t>(d)])) : "NA");
      hist.rows.push_back(row);
    }
  }
  out.push_back(hist);
  return out;
}

inline void write_report(const std::vector<PlotTable>& tables, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  for (const auto& t : tables) {
    const auto path = dir / (t.name + ".csv");
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error("cannot write " + path.string());
    out << t.csv();
  }
}

}  // namespace cubeworld
