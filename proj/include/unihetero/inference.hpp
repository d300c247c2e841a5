#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "unihetero/model.hpp"
#include "unihetero/sequences.hpp"

namespace unihetero {

/// Hidden states z for a set of sequences whose image slots index `image_table`.
template <class T>
Tensor<T> forward_hidden(const UnifiedModel<T>& model, const std::vector<Sequence>& seqs, const Tensor<T>& image_table,
                         PackedBatch* packed_out = nullptr) {
  const auto& bb = model.backbone();
  auto packed = pack_sequences(seqs, bb.config().max_seq_len, bb.config().vocab_size);
  const auto z = bb.forward(bb.embed(packed, image_table), packed);
  if (packed_out) *packed_out = std::move(packed);
  return z;
}

// ---------------------------------------------------------------- text

/// Continues `prefix` until <eos> (not returned) or until the sequence reaches
/// max_len. Greedy at temperature 0, softmax sampling otherwise.
template <class T>
std::vector<int> generate_text(const UnifiedModel<T>& model, Sequence prefix, const Tensor<T>& image_table, std::size_t max_len,
                               double temperature, Rng& rng) {
  NoGradScope<T> off;
  std::vector<int> out;
  if (!prefix.slots.empty() && prefix.slots.back().kind == SlotKind::Text && prefix.slots.back().token == Vocab::kEos) return out;
  prefix.targets.clear();
  const std::size_t vocab = model.backbone().config().vocab_size;
  while (prefix.size() < max_len) {
    const auto z = forward_hidden(model, {prefix}, image_table);
    const auto logits = model.backbone().logits(slice_rows(z, z.rows() - 1, z.rows()));
    int next = 0;
    if (temperature <= 0.0) {
      next = static_cast<int>(std::max_element(logits.ptr(), logits.ptr() + vocab) - logits.ptr());
    } else {
      std::vector<double> p(vocab);
      double mx = -1e300, z_sum = 0;
      for (std::size_t v = 0; v < vocab; ++v) mx = std::max(mx, static_cast<double>(logits[v]) / temperature);
      for (std::size_t v = 0; v < vocab; ++v) z_sum += p[v] = std::exp(static_cast<double>(logits[v]) / temperature - mx);
      double u = rng.uniform() * z_sum;
      next = static_cast<int>(vocab - 1);
      for (std::size_t v = 0; v < vocab; ++v) {
        u -= p[v];
        if (u < 0) {
          next = static_cast<int>(v);
          break;
        }
      }
    }
    if (next == Vocab::kEos) break;
    out.push_back(next);
    prefix.slots.push_back(Slot::text(next));
  }
  return out;
}

// ---------------------------------------------------------------- masked image generation

/// Number of still-masked slots after each step: masked[0] = tokens,
/// masked[S] = 0, strictly decreasing, and masked[s] = ceil(cos(pi/2 s/S) * tokens)
/// except where that would leave fewer slots than remaining steps or fail to
/// commit at least one slot.
struct UnmaskPlan {
  std::vector<std::size_t> masked;
  std::vector<std::size_t> commits;  // commits[s - 1] slots at step s
};

inline double mask_fraction(std::size_t s, std::size_t steps) {
  return std::cos(std::numbers::pi / 2.0 * static_cast<double>(s) / static_cast<double>(steps));
}

inline UnmaskPlan unmask_schedule(std::size_t steps, std::size_t tokens) {
  if (steps < 1) throw std::invalid_argument("unmask schedule: steps must be >= 1");
  if (steps > tokens)
    throw std::invalid_argument("unmask schedule: " + std::to_string(steps) + " steps cannot each commit one of " + std::to_string(tokens) + " slots");
  UnmaskPlan plan;
  plan.masked.push_back(tokens);
  for (std::size_t s = 1; s <= steps; ++s) {
    std::size_t m = 0;
    if (s < steps) {
      const auto ideal = static_cast<std::size_t>(std::ceil(mask_fraction(s, steps) * static_cast<double>(tokens) - 1e-9));
      m = std::min(std::max(ideal, steps - s), plan.masked.back() - 1);
    }
    plan.commits.push_back(plan.masked.back() - m);
    plan.masked.push_back(m);
  }
  return plan;
}

template <class T>
struct GenerationState {
  std::vector<int> prompt;
  Tensor<T> embeddings;   // [tokens, D] committed backbone inputs
  Tensor<T> predictions;  // [tokens, target_dim] invert-projector outputs
  Tensor<T> hidden;       // [tokens, D] z of each slot when it was committed
  std::vector<int> commit_step;                    // 1-based step per slot
  std::vector<std::vector<std::size_t>> schedule;  // slots committed at each step
};

namespace detail {

/// Runs one forward over the prompt with `masked` slots and commits the
/// given slots from their predictions.
template <class T>
void commit_slots(const UnifiedModel<T>& model, GenerationState<T>& st, const std::vector<bool>& masked,
                  const std::vector<std::size_t>& slots, int step, Rng& rng) {
  const auto seq = generation_sequence(st.prompt, 0, masked, false);
  const auto z = forward_hidden(model, {seq}, st.embeddings);
  const std::size_t begin = image_begin(seq);
  std::vector<std::size_t> rows;
  for (std::size_t s : slots) rows.push_back(begin + s);
  const auto zs = gather_rows(z, rows);
  const auto pred = model.invert().predict(zs, rng);
  const auto emb = model.commit_embedding(pred);
  const std::size_t d = st.embeddings.cols(), pd = st.predictions.cols();
  for (std::size_t i = 0; i < slots.size(); ++i) {
    const std::size_t s = slots[i];
    std::copy_n(emb.ptr() + i * d, d, st.embeddings.ptr() + s * d);
    std::copy_n(zs.ptr() + i * d, d, st.hidden.ptr() + s * d);
    std::copy_n(pred.ptr() + i * pd, pd, st.predictions.ptr() + s * pd);
    st.commit_step[s] = step;
  }
}

}  // namespace detail

/// MAR-style generation of the semantic image tokens for a caption prompt.
template <class T>
GenerationState<T> generate_image_semantic(const UnifiedModel<T>& model, const std::vector<int>& prompt, std::size_t steps, Rng& rng) {
  NoGradScope<T> off;
  const auto& cfg = model.config();
  const std::size_t n = cfg.world.tokens(), d = cfg.backbone.model_dim;
  const auto plan = unmask_schedule(steps, n);
  GenerationState<T> st{prompt, Tensor<T>({n, d}), Tensor<T>({n, cfg.projector.target_dim()}), Tensor<T>({n, d}),
                        std::vector<int>(n, 0), {}};
  std::vector<bool> masked(n, true);
  for (std::size_t s = 1; s <= steps; ++s) {
    std::vector<std::size_t> open;
    for (std::size_t i = 0; i < n; ++i)
      if (masked[i]) open.push_back(i);
    std::vector<std::size_t> chosen;
    for (std::size_t idx : rng.choose(open.size(), plan.commits[s - 1])) chosen.push_back(open[idx]);
    std::sort(chosen.begin(), chosen.end());
    detail::commit_slots(model, st, masked, chosen, static_cast<int>(s), rng);
    for (std::size_t i : chosen) masked[i] = false;
    st.schedule.push_back(chosen);
  }
  return st;
}

/// Per-slot pixel latents (row-major, tokens x pixel_dim) to a raster clipped to [0, 1].
template <class T>
std::vector<float> assemble_raster(const std::vector<T>& latents, const WorldConfig& world) {
  auto raster = PixelCodec(world).decode(std::vector<float>(latents.begin(), latents.end()));
  for (auto& v : raster) v = std::clamp(v, 0.0f, 1.0f);
  return raster;
}

/// Samples a pixel latent per slot conditioned on its z and assembles the
/// raster through the inverse patch transform, clipped to [0, 1].
template <class T>
std::vector<float> decode_image(const UnifiedModel<T>& model, const Tensor<T>& hidden, Rng& rng) {
  const auto& world = model.config().world;
  if (hidden.rank() != 2 || hidden.rows() != world.tokens())
    throw ShapeError("decode_image: expected " + std::to_string(world.tokens()) + " slot states, got " + shape_str(hidden.shape()));
  return assemble_raster(model.pixel_head().sample(hidden, rng), world);
}

/// Fraction of cells whose classified content (empty, or color and shape)
/// agrees with the scene the prompt describes. 0 for unparseable prompts.
inline double prompt_agreement(const std::vector<int>& prompt, const std::vector<float>& raster, const WorldConfig& world) {
  const auto scene = scene_from_caption(prompt, world.grid);
  if (!scene) return 0.0;
  const auto cells = classify_cells(raster, world);
  std::size_t ok = 0;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const auto& truth = scene->cells[i];
    if (!truth && !cells[i].occupied) ++ok;
    if (truth && cells[i].occupied && truth->color == cells[i].color && truth->shape == cells[i].shape) ++ok;
  }
  return static_cast<double>(ok) / static_cast<double>(cells.size());
}

/// Scores a generation by decoding it with a fixed seed.
template <class T>
double generation_score(const UnifiedModel<T>& model, const GenerationState<T>& st, std::uint64_t seed) {
  Rng rng(seed);
  return prompt_agreement(st.prompt, decode_image(model, st.hidden, rng), model.config().world);
}

enum class RefineOrder { Original, Random };

struct RefineConfig {
  std::size_t rounds = 0;
  double fraction = 0.0;
  RefineOrder order = RefineOrder::Random;
  std::uint64_t score_seed = 0;
};

struct RefineRound {
  std::size_t round = 0;
  std::vector<std::size_t> slots;
  double before = 0.0;
  double after = 0.0;
};

template <class T>
struct RefineResult {
  GenerationState<T> state;
  std::vector<RefineRound> trace;
};

namespace detail {

template <class T>
GenerationState<T> copy_state(const GenerationState<T>& s) {
  return {s.prompt, s.embeddings.clone(), s.predictions.clone(), s.hidden.clone(), s.commit_step, s.schedule};
}

}  // namespace detail

/// Re-masks ceil(fraction * tokens) random slots per round and regenerates
/// them: all at once (random order) or grouped by their original commit
/// step (original order). The trace keeps before/after scores even when a
/// round makes things worse.
template <class T>
RefineResult<T> refine(const UnifiedModel<T>& model, const GenerationState<T>& state, const RefineConfig& cfg, Rng& rng) {
  if (cfg.fraction < 0.0 || cfg.fraction > 1.0) throw std::invalid_argument("refine: fraction must lie in [0, 1]");
  NoGradScope<T> off;
  RefineResult<T> out{detail::copy_state(state), {}};
  const std::size_t n = model.config().world.tokens();
  const auto k = static_cast<std::size_t>(std::ceil(cfg.fraction * static_cast<double>(n) - 1e-9));
  for (std::size_t r = 0; r < cfg.rounds; ++r) {
    RefineRound round;
    round.round = r + 1;
    round.before = generation_score(model, out.state, cfg.score_seed);
    if (k > 0) {
      round.slots = rng.choose(n, k);
      std::sort(round.slots.begin(), round.slots.end());
      std::vector<bool> masked(n, false);
      for (std::size_t s : round.slots) masked[s] = true;
      std::vector<std::vector<std::size_t>> groups;
      if (cfg.order == RefineOrder::Random) {
        groups.push_back(round.slots);
      } else {
        std::vector<std::size_t> by_step = round.slots;
        std::stable_sort(by_step.begin(), by_step.end(),
                         [&](std::size_t a, std::size_t b) { return out.state.commit_step[a] < out.state.commit_step[b]; });
        for (std::size_t s : by_step) {
          if (groups.empty() || out.state.commit_step[groups.back().front()] != out.state.commit_step[s]) groups.emplace_back();
          groups.back().push_back(s);
        }
      }
      // Regenerated slots keep the commit step they were first generated at.
      const auto steps = out.state.commit_step;
      for (const auto& g : groups) {
        detail::commit_slots(model, out.state, masked, g, steps[g.front()], rng);
        for (std::size_t s : g) masked[s] = false;
      }
      out.state.commit_step = steps;
    }
    round.after = generation_score(model, out.state, cfg.score_seed);
    out.trace.push_back(std::move(round));
  }
  return out;
}

/// Text -> generated semantic tokens -> text.
template <class T>
std::vector<int> roundtrip_caption(const UnifiedModel<T>& model, const std::vector<int>& caption, std::size_t steps, Rng& rng,
                                   std::size_t max_len = 48) {
  const auto st = generate_image_semantic(model, caption, steps, rng);
  Sequence prefix;
  detail::push_text(prefix, Vocab::kBos);
  detail::push_text(prefix, Vocab::kBoi);
  detail::push_image(prefix, 0, model.config().world.tokens(), nullptr);
  detail::push_text(prefix, Vocab::kEoi);
  return generate_text(model, prefix, st.embeddings, max_len, 0.0, rng);
}

}  // namespace unihetero
