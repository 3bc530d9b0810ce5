#pragma once

// Checkpoint layout (little-endian):
//   "CUBEMODL" u32 version
//   config: u32 layers, heads, d_model, max_seq_len; u64 seed; f64 init_std
//   string metadata (key = value text)
//   u32 tensor count, then per tensor: string name, u32 rows, u32 cols, f32[rows*cols]
//   u8 has_optimizer; if set: f64 lr, beta1, beta2, eps, weight_decay,
//     then per tensor: i64 step, u8 trainable, f32 m[size], f32 v[size]

#include <filesystem>
#include <optional>
#include <sstream>

#include "cubeworld/binary_io.hpp"
#include "cubeworld/kv_text.hpp"
#include "cubeworld/optim.hpp"

namespace cubeworld {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  Transformer<float> model;
  std::optional<AdamW<float>> optimizer;
  KeyValueText metadata;
};

inline void save_checkpoint(const std::filesystem::path& path, const Transformer<float>& model,
                            const AdamW<float>* opt = nullptr, const KeyValueText& metadata = {}) {
  io::Writer w(path);
  w.magic("CUBEMODL");
  w.pod(kCheckpointVersion);
  const auto& c = model.config();
  for (int v : {c.layers, c.heads, c.d_model, c.max_seq_len}) w.pod(static_cast<std::uint32_t>(v));
  w.pod(static_cast<std::uint64_t>(c.seed));
  w.pod(c.init_std);
  w.string(metadata.str());
  const auto& tensors = model.layout().tensors();
  w.pod(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    w.string(t.name);
    w.pod(static_cast<std::uint32_t>(t.rows));
    w.pod(static_cast<std::uint32_t>(t.cols));
    w.array(std::span<const float>(model.params().data() + t.offset, t.size()));
  }
  w.pod(static_cast<std::uint8_t>(opt != nullptr));
  if (opt) {
    const auto& h = opt->config();
    for (double v : {h.lr, h.beta1, h.beta2, h.eps, h.weight_decay}) w.pod(v);
    for (std::size_t i = 0; i < tensors.size(); ++i) {
      const auto& t = tensors[i];
      w.pod(static_cast<std::int64_t>(opt->steps()[i]));
      w.pod(static_cast<std::uint8_t>(opt->trainable(static_cast<int>(i))));
      w.array(std::span<const float>(opt->first_moments().data() + t.offset, t.size()));
      w.array(std::span<const float>(opt->second_moments().data() + t.offset, t.size()));
    }
  }
  w.commit();
}

inline ModelConfig read_checkpoint_config(io::Reader& r) {
  r.expect_magic("CUBEMODL");
  if (auto v = r.pod<std::uint32_t>(); v != kCheckpointVersion) {
    throw FormatError(r.path().string() + ": unsupported checkpoint version " + std::to_string(v));
  }
  ModelConfig c;
  c.layers = static_cast<int>(r.pod<std::uint32_t>());
  c.heads = static_cast<int>(r.pod<std::uint32_t>());
  c.d_model = static_cast<int>(r.pod<std::uint32_t>());
  c.max_seq_len = static_cast<int>(r.pod<std::uint32_t>());
  c.seed = r.pod<std::uint64_t>();
  c.init_std = r.pod<double>();
  try {
    c.validate();
  } catch (const ValidationError& e) {
    throw FormatError(r.path().string() + ": invalid config block: " + e.what());
  }
  return c;
}

/// Loads a checkpoint. When `expected` is given the stored config must match it.
inline Checkpoint load_checkpoint(const std::filesystem::path& path, const std::optional<ModelConfig>& expected = {}) {
  if (!std::filesystem::exists(path)) throw MissingArtifactError("checkpoint " + path.string() + " not found", "train");
  io::Reader r(path);
  const ModelConfig c = read_checkpoint_config(r);
  if (expected && !(*expected == c)) throw FormatError(path.string() + ": checkpoint config does not match the requested model");
  std::istringstream meta(r.string());
  Checkpoint ck{Transformer<float>(c), std::nullopt, KeyValueText::parse(meta, path.string())};
  const auto& tensors = ck.model.layout().tensors();
  if (r.pod<std::uint32_t>() != tensors.size()) throw FormatError(path.string() + ": tensor count mismatch");
  for (const auto& t : tensors) {
    if (r.string() != t.name) throw FormatError(path.string() + ": unexpected tensor, wanted " + t.name);
    const auto rows = r.pod<std::uint32_t>(), cols = r.pod<std::uint32_t>();
    if (rows != static_cast<std::uint32_t>(t.rows) || cols != static_cast<std::uint32_t>(t.cols)) {
      throw FormatError(path.string() + ": shape mismatch for " + t.name);
    }
    r.array(std::span<float>(ck.model.params().data() + t.offset, t.size()));
  }
  if (r.pod<std::uint8_t>()) {
    AdamWConfig h;
    h.lr = r.pod<double>();
    h.beta1 = r.pod<double>();
    h.beta2 = r.pod<double>();
    h.eps = r.pod<double>();
    h.weight_decay = r.pod<double>();
    ck.optimizer.emplace(ck.model.layout(), h);
    for (std::size_t i = 0; i < tensors.size(); ++i) {
      const auto& t = tensors[i];
      ck.optimizer->steps()[i] = static_cast<long>(r.pod<std::int64_t>());
      ck.optimizer->set_trainable(static_cast<int>(i), r.pod<std::uint8_t>() != 0);
      r.array(std::span<float>(ck.optimizer->first_moments().data() + t.offset, t.size()));
      r.array(std::span<float>(ck.optimizer->second_moments().data() + t.offset, t.size()));
    }
  }
  r.expect_eof();
  if (!ck.model.all_finite()) throw FormatError(path.string() + ": non-finite parameters");
  return ck;
}

}  // namespace cubeworld
