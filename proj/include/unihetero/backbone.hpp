#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "unihetero/core/layers.hpp"
#include "unihetero/core/ops.hpp"

namespace unihetero {

struct BackboneConfig {
  std::size_t num_layers = 4;
  std::size_t model_dim = 128;
  std::size_t num_heads = 4;
  std::size_t vocab_size = 0;
  bool qknorm = true;
  double zloss_weight = 1e-4;
  std::size_t max_seq_len = 256;

  std::size_t head_dim() const { return model_dim / num_heads; }

  void validate() const {
    if (num_heads == 0 || model_dim % num_heads != 0)
      throw std::invalid_argument("BackboneConfig: model_dim " + std::to_string(model_dim) + " not divisible by num_heads " + std::to_string(num_heads));
    if (head_dim() % 2 != 0) throw std::invalid_argument("BackboneConfig: head_dim must be even for rotary embeddings");
    if (vocab_size < 2) throw std::invalid_argument("BackboneConfig: vocab_size must be >= 2");
    if (num_layers == 0) throw std::invalid_argument("BackboneConfig: num_layers must be >= 1");
    if (zloss_weight < 0.0) throw std::invalid_argument("BackboneConfig: zloss_weight must be >= 0");
  }
};

// ---------------------------------------------------------------- sequence layout

enum class SlotKind : std::uint8_t { Text, Image, Mask };

/// One input position. Image and Mask slots reference a row of the batch's
/// image tables; Mask slots feed the learned mask embedding instead.
struct Slot {
  SlotKind kind = SlotKind::Text;
  int token = 0;
  std::size_t image = 0;

  static Slot text(int id) { return {SlotKind::Text, id, 0}; }
  static Slot picture(std::size_t row) { return {SlotKind::Image, 0, row}; }
  static Slot masked(std::size_t row) { return {SlotKind::Mask, 0, row}; }
};

/// Half-open range [begin, end) of positions holding one image.
struct ImageSpan {
  std::size_t begin = 0;
  std::size_t end = 0;
};

struct Sequence {
  std::vector<Slot> slots;
  std::vector<ImageSpan> spans;
  /// Next-token target for each position, -1 where no LM loss applies.
  std::vector<int> targets;
  bool generation = false;

  std::size_t size() const { return slots.size(); }
};

class LayoutError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline void validate_sequence(const Sequence& seq) {
  const std::size_t n = seq.slots.size();
  if (n == 0) throw LayoutError("sequence is empty");
  if (!seq.targets.empty() && seq.targets.size() != n) throw LayoutError("targets length differs from slot count");
  std::vector<std::uint8_t> covered(n, 0);
  for (const auto& span : seq.spans) {
    if (span.begin >= span.end || span.end > n)
      throw LayoutError("image span [" + std::to_string(span.begin) + ", " + std::to_string(span.end) + ") out of range");
    for (std::size_t i = span.begin; i < span.end; ++i) {
      if (covered[i]) throw LayoutError("image spans overlap at position " + std::to_string(i));
      covered[i] = 1;
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    const bool visual = seq.slots[i].kind != SlotKind::Text;
    if (visual && !covered[i]) throw LayoutError("image/mask slot outside any image span at position " + std::to_string(i));
    if (!visual && covered[i]) throw LayoutError("text slot inside an image span at position " + std::to_string(i));
  }
}

/// Row i may attend to column j iff j <= i, or i is an image position and j
/// lies in the same image span. Returned row-major, size L x L.
inline std::vector<std::uint8_t> build_attention_mask(const Sequence& seq) {
  validate_sequence(seq);
  const std::size_t n = seq.size();
  std::vector<std::uint8_t> mask(n * n, 0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j) mask[i * n + j] = 1;
  for (const auto& span : seq.spans)
    for (std::size_t i = span.begin; i < span.end; ++i)
      for (std::size_t j = span.begin; j < span.end; ++j) mask[i * n + j] = 1;
  return mask;
}

/// Several sequences flattened into one row matrix.
struct PackedBatch {
  std::size_t rows = 0;
  std::vector<std::size_t> offsets;    // first packed row of each sequence
  std::vector<std::size_t> positions;  // in-sequence position per row
  std::vector<std::size_t> token_ids;  // text id per row, 0 for visual rows
  std::vector<std::size_t> image_rows, image_index;  // unmasked image rows -> image table row
  std::vector<std::size_t> mask_rows, mask_index;    // masked rows -> image table row
  std::vector<std::size_t> target_rows;
  std::vector<int> targets;
  std::shared_ptr<const AttentionLayout> layout;
};

inline PackedBatch pack_sequences(const std::vector<Sequence>& seqs, std::size_t max_len, std::size_t vocab_size) {
  PackedBatch packed;
  auto layout = std::make_shared<AttentionLayout>();
  for (const auto& seq : seqs) {
    if (seq.size() > max_len)
      throw LayoutError("sequence length " + std::to_string(seq.size()) + " exceeds max " + std::to_string(max_len));
    const std::size_t base = packed.rows;
    packed.offsets.push_back(base);
    layout->push_back({base, seq.size(), build_attention_mask(seq)});
    for (std::size_t p = 0; p < seq.size(); ++p) {
      const auto& slot = seq.slots[p];
      packed.positions.push_back(p);
      switch (slot.kind) {
        case SlotKind::Text:
          if (slot.token < 0 || static_cast<std::size_t>(slot.token) >= vocab_size)
            throw LayoutError("token id " + std::to_string(slot.token) + " outside vocab");
          packed.token_ids.push_back(static_cast<std::size_t>(slot.token));
          break;
        case SlotKind::Image:
          packed.token_ids.push_back(0);
          packed.image_rows.push_back(base + p);
          packed.image_index.push_back(slot.image);
          break;
        case SlotKind::Mask:
          packed.token_ids.push_back(0);
          packed.mask_rows.push_back(base + p);
          packed.mask_index.push_back(slot.image);
          break;
      }
      if (!seq.targets.empty() && seq.targets[p] >= 0) {
        packed.target_rows.push_back(base + p);
        packed.targets.push_back(seq.targets[p]);
      }
    }
    packed.rows += seq.size();
  }
  packed.layout = std::move(layout);
  return packed;
}

// ---------------------------------------------------------------- model

template <class T>
struct TransformerLayer {
  Tensor<T> attn_norm;
  Linear<T> qkv;
  Tensor<T> q_norm, k_norm;
  Linear<T> proj;
  Tensor<T> mlp_norm;
  Linear<T> fc1, fc2;

  void collect(ParameterList<T>& out, const std::string& prefix) const {
    out.push_back({prefix + ".attn_norm", attn_norm});
    qkv.collect(out, prefix + ".qkv");
    out.push_back({prefix + ".q_norm", q_norm});
    out.push_back({prefix + ".k_norm", k_norm});
    proj.collect(out, prefix + ".proj");
    out.push_back({prefix + ".mlp_norm", mlp_norm});
    fc1.collect(out, prefix + ".fc1");
    fc2.collect(out, prefix + ".fc2");
  }
};

/// Pre-norm decoder with rotary positions, optional per-head RMS qk
/// normalization, and hybrid causal / in-span bidirectional attention.
template <class T>
class Backbone {
 public:
  Backbone(const BackboneConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    const std::size_t d = cfg_.model_dim;
    const double residual_gain = 1.0 / std::sqrt(2.0 * static_cast<double>(cfg_.num_layers));
    token_embedding_ = make_normal_parameter<T>({cfg_.vocab_size, d}, 1.0, rng);
    mask_embedding_ = make_normal_parameter<T>({1, d}, 1.0, rng);
    for (std::size_t l = 0; l < cfg_.num_layers; ++l) {
      TransformerLayer<T> layer;
      layer.attn_norm = make_parameter<T>({d}, T(1));
      layer.qkv = Linear<T>(d, 3 * d, rng, false);
      layer.q_norm = make_parameter<T>({cfg_.head_dim()}, T(1));
      layer.k_norm = make_parameter<T>({cfg_.head_dim()}, T(1));
      layer.proj = Linear<T>(d, d, rng, false, residual_gain);
      layer.mlp_norm = make_parameter<T>({d}, T(1));
      layer.fc1 = Linear<T>(d, 4 * d, rng, true);
      layer.fc2 = Linear<T>(4 * d, d, rng, true, residual_gain);
      layers_.push_back(std::move(layer));
    }
    final_norm_ = make_parameter<T>({d}, T(1));
    lm_head_ = make_normal_parameter<T>({d, cfg_.vocab_size}, 1.0 / std::sqrt(static_cast<double>(d)), rng);
  }

  const BackboneConfig& config() const { return cfg_; }

  /// Input rows: token embeddings at text slots, `image_embeddings` rows at
  /// image slots, the learned mask embedding at mask slots.
  Tensor<T> embed(const PackedBatch& batch, const Tensor<T>& image_embeddings) const {
    auto x = gather_rows(token_embedding_, batch.token_ids);
    if (!batch.image_rows.empty()) {
      if (!image_embeddings.defined() || image_embeddings.cols() != cfg_.model_dim)
        throw ShapeError("embed: image embeddings must have width " + std::to_string(cfg_.model_dim));
      x = scatter_rows(x, gather_rows(image_embeddings, batch.image_index), batch.image_rows);
    }
    if (!batch.mask_rows.empty()) {
      x = scatter_rows(x, gather_rows(mask_embedding_, std::vector<std::size_t>(batch.mask_rows.size(), 0)), batch.mask_rows);
    }
    return x;
  }

  /// Last hidden states z (after the final norm), one row per packed position.
  Tensor<T> forward(const Tensor<T>& x, const PackedBatch& batch) const {
    if (x.rank() != 2 || x.cols() != cfg_.model_dim || x.rows() != batch.rows)
      throw ShapeError("backbone.forward", x.shape(), Shape{batch.rows, cfg_.model_dim});
    const std::size_t n = batch.rows, d = cfg_.model_dim, h = cfg_.num_heads, hd = cfg_.head_dim();
    Tensor<T> hidden = x;
    for (const auto& layer : layers_) {
      const auto a = rmsnorm(hidden, layer.attn_norm);
      const auto qkv = layer.qkv(a);
      auto q = slice_cols(qkv, 0, d);
      auto k = slice_cols(qkv, d, 2 * d);
      const auto v = slice_cols(qkv, 2 * d, 3 * d);
      if (cfg_.qknorm) {
        q = reshape(rmsnorm(reshape(q, {n * h, hd}), layer.q_norm), {n, d});
        k = reshape(rmsnorm(reshape(k, {n * h, hd}), layer.k_norm), {n, d});
      }
      q = rope(q, batch.positions, h);
      k = rope(k, batch.positions, h);
      hidden = add(hidden, layer.proj(attention(q, k, v, h, batch.layout)));
      const auto m = rmsnorm(hidden, layer.mlp_norm);
      hidden = add(hidden, layer.fc2(gelu(layer.fc1(m))));
    }
    return rmsnorm(hidden, final_norm_);
  }

  Tensor<T> logits(const Tensor<T>& z_rows) const { return matmul(z_rows, lm_head_); }

  void collect(ParameterList<T>& out, const std::string& prefix) const {
    out.push_back({prefix + ".token_embedding", token_embedding_});
    out.push_back({prefix + ".mask_embedding", mask_embedding_});
    for (std::size_t l = 0; l < layers_.size(); ++l) layers_[l].collect(out, prefix + ".layers." + std::to_string(l));
    out.push_back({prefix + ".final_norm", final_norm_});
    out.push_back({prefix + ".lm_head", lm_head_});
  }

 private:
  BackboneConfig cfg_;
  Tensor<T> token_embedding_;
  Tensor<T> mask_embedding_;
  std::vector<TransformerLayer<T>> layers_;
  Tensor<T> final_norm_;
  Tensor<T> lm_head_;
};

template <class T>
struct TextLoss {
  Tensor<T> ce;
  Tensor<T> zloss;
  Tensor<T> total;  // ce + zloss
};

/// Cross-entropy plus z-loss: weight * mean over rows of logsumexp(logits)^2.
template <class T>
TextLoss<T> text_loss(const Tensor<T>& logits, const std::vector<int>& targets, double zloss_weight) {
  TextLoss<T> out;
  out.ce = cross_entropy(logits, targets);
  if (zloss_weight > 0.0) {
    const auto lse = logsumexp(logits);
    out.zloss = scale(mean(mul(lse, lse)), static_cast<T>(zloss_weight));
    out.total = add(out.ce, out.zloss);
  } else {
    out.zloss = Tensor<T>::scalar(T(0));
    out.total = out.ce;
  }
  return out;
}

}  // namespace unihetero
