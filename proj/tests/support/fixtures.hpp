#pragma once

#include <filesystem>
#include <string>

#include <unistd.h>

#include "unihetero/unihetero.hpp"

namespace unihetero::testing {

/// Small model that keeps unit tests fast; same world as the defaults.
inline ModelConfig tiny_model(std::size_t layers = 2, std::size_t dim = 32) {
  ModelConfig m;
  m.backbone.num_layers = layers;
  m.backbone.model_dim = dim;
  m.backbone.num_heads = 2;
  m.pixel.hidden = 32;
  m.pixel.depth = 1;
  m.pixel.time_dim = 8;
  m.projector.semantic_diffusion.hidden = 32;
  m.projector.semantic_diffusion.depth = 1;
  m.projector.semantic_diffusion.time_dim = 8;
  return m.resolve();
}

inline TrainConfig tiny_train(std::size_t steps = 20, std::size_t batch = 4, std::uint64_t seed = 0) {
  TrainConfig t;
  t.steps = steps;
  t.batch_size = batch;
  t.seed = seed;
  t.eval_questions = 16;
  t.eval_roundtrip = 2;
  t.heldout_size = 8;
  t.inference_steps = 2;
  t.head_warmup.steps = 20;
  t.head_warmup.batch = 16;
  return t;
}

inline ExperimentSpec spec_named(const std::string& id) {
  for (const auto& s : table1_specs())
    if (s.id == id) return s;
  for (const auto& s : table2_specs())
    if (s.id == id) return s;
  throw std::invalid_argument("no spec " + id);
}

/// Fresh per-process scratch directory.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("unihetero-" + name + "-" + std::to_string(::getpid()));
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline std::vector<const ToySample*> pointers(const std::vector<ToySample>& v) {
  std::vector<const ToySample*> out;
  for (const auto& s : v) out.push_back(&s);
  return out;
}

/// Two generation samples (mask rate 0.5) and one caption sample sharing one
/// image table, built from the first four samples of `corpus`.
inline TrainBatch<double> mixed_batch(const std::vector<ToySample>& corpus, const TrainConfig& cfg, std::uint64_t seed = 3) {
  const WorldConfig world;
  const std::size_t n = world.tokens(), ds = world.semantic_dim, dp = world.pixel_dim();
  const auto all = pointers(corpus);
  Rng rng(seed);
  auto b = make_batch<double>({all.begin(), all.begin() + 4}, cfg, world, rng, {SampleRole::Generation, 0.5});
  Rng rng2(seed + 1);
  auto u = make_batch<double>({all.begin(), all.begin() + 2}, cfg, world, rng2, {SampleRole::Caption, std::nullopt});
  TrainBatch<double> out;
  out.sequences = {b.sequences[0], b.sequences[1], u.sequences[0]};
  out.semantic = Tensor<double>({3 * n, ds});
  out.pixel = Tensor<double>({3 * n, dp});
  std::copy_n(b.semantic.ptr(), 2 * n * ds, out.semantic.ptr());
  std::copy_n(b.pixel.ptr(), 2 * n * dp, out.pixel.ptr());
  std::copy_n(u.semantic.ptr(), n * ds, out.semantic.ptr() + 2 * n * ds);
  std::copy_n(u.pixel.ptr(), n * dp, out.pixel.ptr() + 2 * n * dp);
  for (auto& slot : out.sequences[2].slots)
    if (slot.kind != SlotKind::Text) slot.image += 2 * n;
  out.roles = {SampleRole::Generation, SampleRole::Generation, SampleRole::Caption};
  out.masked_slots = 2 * ((n + 1) / 2);
  return out;
}

}  // namespace unihetero::testing
