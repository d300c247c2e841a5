#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "unihetero/inference.hpp"

namespace unihetero {

// ---------------------------------------------------------------- QA benchmark

struct QaItem {
  const ToySample* sample = nullptr;
  QaPair qa;
};

/// Up to `limit` questions drawn in order from the samples (0 = all).
inline std::vector<QaItem> collect_questions(const std::vector<ToySample>& samples, std::size_t limit = 0) {
  std::vector<QaItem> out;
  for (const auto& s : samples)
    for (const auto& qa : s.qa) {
      if (limit && out.size() >= limit) return out;
      out.push_back({&s, qa});
    }
  return out;
}

using Answerer = std::function<int(const QaItem&)>;

inline double qa_accuracy(const std::vector<QaItem>& items, const Answerer& answer) {
  if (items.empty()) throw std::invalid_argument("qa_accuracy: empty question set");
  std::size_t ok = 0;
  for (const auto& it : items) ok += answer(it) == it.qa.answer ? 1 : 0;
  return static_cast<double>(ok) / static_cast<double>(items.size());
}

/// Reads the answer off the scene (upper bound, label soundness check).
inline int oracle_answer(const QaItem& item) { return answer_from_scene(item.sample->scene, item.qa.question).value_or(-1); }

/// Model answers: greedy over the candidate tokens of the question's kind.
template <class T>
std::vector<int> model_answers(const UnifiedModel<T>& model, const std::vector<QaItem>& items, std::size_t batch = 32) {
  NoGradScope<T> off;
  const auto& world = model.config().world;
  const std::size_t n = world.tokens(), ds = world.semantic_dim;
  std::vector<int> out;
  for (std::size_t start = 0; start < items.size(); start += batch) {
    const std::size_t end = std::min(items.size(), start + batch);
    std::vector<Sequence> seqs;
    Tensor<T> semantic({(end - start) * n, ds});
    for (std::size_t i = start; i < end; ++i) {
      const auto& f = items[i].sample->semantic;
      for (std::size_t j = 0; j < f.size(); ++j) semantic[(i - start) * n * ds + j] = static_cast<T>(f[j]);
      seqs.push_back(question_sequence(items[i].qa, (i - start) * n, n, false));
    }
    PackedBatch packed;
    const auto z = forward_hidden(model, seqs, model.projector()(semantic), &packed);
    std::vector<std::size_t> last;
    for (std::size_t i = 0; i < seqs.size(); ++i) last.push_back(packed.offsets[i] + seqs[i].size() - 1);
    const auto logits = model.backbone().logits(gather_rows(z, last));
    const std::size_t vocab = logits.cols();
    for (std::size_t i = start; i < end; ++i) {
      int best = -1;
      T best_v = -std::numeric_limits<T>::infinity();
      for (int c : answer_candidates(items[i].qa.kind, world.grid)) {
        const T v = logits[(i - start) * vocab + static_cast<std::size_t>(c)];
        if (v > best_v) {
          best_v = v;
          best = c;
        }
      }
      out.push_back(best);
    }
  }
  return out;
}

template <class T>
double model_qa_accuracy(const UnifiedModel<T>& model, const std::vector<QaItem>& items) {
  if (items.empty()) throw std::invalid_argument("qa_accuracy: empty question set");
  const auto answers = model_answers(model, items);
  std::size_t i = 0;
  return qa_accuracy(items, [&](const QaItem&) { return answers[i++]; });
}

// ---------------------------------------------------------------- scaling fit

struct ScalingFit {
  double a = 0.0;
  double b = 0.0;
  double rss = 0.0;
  std::size_t n = 0;
};

/// Ordinary least squares for y = a n + b.
inline ScalingFit fit_scaling(const std::vector<std::pair<double, double>>& points) {
  if (points.size() < 2) throw std::invalid_argument("fit_scaling: need at least 2 points");
  double mx = 0, my = 0;
  for (const auto& [x, y] : points) {
    mx += x;
    my += y;
  }
  mx /= static_cast<double>(points.size());
  my /= static_cast<double>(points.size());
  double sxx = 0, sxy = 0;
  for (const auto& [x, y] : points) {
    sxx += (x - mx) * (x - mx);
    sxy += (x - mx) * (y - my);
  }
  if (sxx == 0.0) throw std::invalid_argument("fit_scaling: all n are equal");
  ScalingFit f;
  f.a = sxy / sxx;
  f.b = my - f.a * mx;
  f.n = points.size();
  for (const auto& [x, y] : points) f.rss += (y - f.a * x - f.b) * (y - f.a * x - f.b);
  return f;
}

/// Drops the first `fraction` of points (by order) before fitting.
inline std::vector<std::pair<double, double>> after_burn_in(const std::vector<std::pair<double, double>>& points, double fraction) {
  const auto skip = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(points.size())));
  return {points.begin() + static_cast<std::ptrdiff_t>(std::min(skip, points.size())), points.end()};
}

/// Slope in units of 1e-4, e.g. 0.0066 -> "66×10⁻⁴".
inline std::string format_slope(double a) { return std::to_string(std::llround(a * 1e4)) + "×10⁻⁴"; }

// ---------------------------------------------------------------- round-trip attributes

struct ObjectAttributes {
  bool shape = false;
  bool color = false;
  bool position = false;
};

struct AttributeReport {
  std::vector<ObjectAttributes> objects;
  double aggregate = 0.0;
  bool parse_failure = false;
};

/// Matches each original object to the regenerated object at the same cell,
/// else to the nearest unmatched one, then compares attributes.
inline AttributeReport attribute_preservation(const std::vector<int>& original, const std::vector<int>& regenerated, std::size_t grid) {
  const auto orig = parse_caption(original, grid);
  if (!orig) throw std::invalid_argument("attribute_preservation: original caption does not parse");
  AttributeReport rep;
  rep.objects.resize(orig->size());
  const auto regen = parse_caption(regenerated, grid);
  if (!regen) {
    rep.parse_failure = true;
    return rep;
  }
  std::vector<bool> used(regen->size(), false);
  std::size_t kept = 0;
  for (std::size_t i = 0; i < orig->size(); ++i) {
    const auto& o = (*orig)[i];
    std::optional<std::size_t> best;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < regen->size(); ++j) {
      if (used[j]) continue;
      const double dr = static_cast<double>(o.row) - static_cast<double>((*regen)[j].row);
      const double dc = static_cast<double>(o.col) - static_cast<double>((*regen)[j].col);
      if (dr * dr + dc * dc < best_d) {
        best_d = dr * dr + dc * dc;
        best = j;
      }
    }
    if (!best) continue;
    used[*best] = true;
    const auto& r = (*regen)[*best];
    auto& a = rep.objects[i];
    a.shape = r.shape == o.shape;
    a.color = r.color == o.color;
    a.position = r.row == o.row && r.col == o.col;
    kept += a.shape + a.color + a.position;
  }
  rep.aggregate = static_cast<double>(kept) / static_cast<double>(3 * orig->size());
  return rep;
}

/// Mean attribute preservation when each caption is "regenerated" as another
/// sample's caption.
inline double shuffled_caption_baseline(const std::vector<std::vector<int>>& captions, std::size_t grid, Rng& rng) {
  if (captions.size() < 2) throw std::invalid_argument("shuffled baseline: need at least 2 captions");
  std::vector<std::size_t> perm(captions.size());
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
  rng.shuffle(perm);
  double total = 0;
  for (std::size_t i = 0; i < captions.size(); ++i) {
    // Pair with a different caption when the shuffle maps i to itself.
    const std::size_t j = perm[i] == i ? (i + 1) % captions.size() : perm[i];
    total += attribute_preservation(captions[i], captions[j], grid).aggregate;
  }
  return total / static_cast<double>(captions.size());
}

struct RoundtripSummary {
  double aggregate = 0.0;
  std::size_t parse_failures = 0;
  std::size_t exact = 0;
  std::size_t count = 0;
};

template <class T>
RoundtripSummary evaluate_roundtrip(const UnifiedModel<T>& model, const std::vector<std::vector<int>>& captions, std::size_t steps,
                                    std::uint64_t seed) {
  RoundtripSummary s;
  for (std::size_t i = 0; i < captions.size(); ++i) {
    Rng rng(mix_seed(seed, i));
    const auto regen = roundtrip_caption(model, captions[i], steps, rng);
    const auto rep = attribute_preservation(captions[i], regen, model.config().world.grid);
    s.aggregate += rep.aggregate;
    s.parse_failures += rep.parse_failure ? 1 : 0;
    s.exact += regen == captions[i] ? 1 : 0;
  }
  s.count = captions.size();
  if (s.count) s.aggregate /= static_cast<double>(s.count);
  return s;
}

// ---------------------------------------------------------------- pixels

struct PixelQuality {
  double latent_mse = 0.0;
  double attribute_accuracy = 0.0;
};

/// Latent MSE against the scene's true render, and the fraction of cells
/// (occupied in truth or in the classification) whose shape and color are right.
inline PixelQuality pixel_quality(const Scene& scene, const std::vector<float>& raster, const WorldConfig& world) {
  const auto truth = render(scene, world);
  if (raster.size() != truth.size()) throw std::invalid_argument("pixel_quality: raster size mismatch");
  const PixelCodec codec(world);
  const auto a = codec.encode(raster), b = codec.encode(truth);
  PixelQuality q;
  for (std::size_t i = 0; i < a.size(); ++i) q.latent_mse += (static_cast<double>(a[i]) - b[i]) * (static_cast<double>(a[i]) - b[i]);
  q.latent_mse /= static_cast<double>(a.size());
  const auto cells = classify_cells(raster, world);
  std::size_t considered = 0, ok = 0;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const auto& t = scene.cells[i];
    if (!t && !cells[i].occupied) continue;
    ++considered;
    if (t && cells[i].occupied && t->color == cells[i].color && t->shape == cells[i].shape) ++ok;
  }
  q.attribute_accuracy = considered ? static_cast<double>(ok) / static_cast<double>(considered) : 1.0;
  return q;
}

}  // namespace unihetero
