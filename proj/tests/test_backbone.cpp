#include <gtest/gtest.h>

#include <cmath>

#include "support/gradcheck.hpp"
#include "unihetero/backbone.hpp"

using namespace unihetero;
using unihetero::testing::grad_check;
using unihetero::testing::project_to_scalar;
using unihetero::testing::random_tensor;

namespace {

// Layout strings: 't' text, 'i' image, 'm' mask; '|' closes an image span.
Sequence layout(const std::string& s, int vocab = 10) {
  Sequence seq;
  std::size_t image = 0;
  bool in_span = false;
  for (char c : s) {
    if (c == '|') {
      in_span = false;
      continue;
    }
    if (c == 't') {
      seq.slots.push_back(Slot::text(static_cast<int>(seq.slots.size()) % vocab));
      in_span = false;
      continue;
    }
    if (!in_span) seq.spans.push_back({seq.slots.size(), seq.slots.size()});
    in_span = true;
    seq.slots.push_back(c == 'i' ? Slot::picture(image++) : Slot::masked(image++));
    seq.spans.back().end = seq.slots.size();
  }
  seq.targets.assign(seq.slots.size(), -1);
  return seq;
}

// Independent rule evaluator: causal, plus full attention within a span.
bool allowed_by_rule(const Sequence& s, std::size_t i, std::size_t j) {
  if (j <= i) return true;
  for (const auto& sp : s.spans)
    if (i >= sp.begin && i < sp.end && j >= sp.begin && j < sp.end) return true;
  return false;
}

BackboneConfig small_config(std::size_t layers = 2) {
  BackboneConfig c;
  c.num_layers = layers;
  c.model_dim = 8;
  c.num_heads = 2;
  c.vocab_size = 10;
  return c;
}

template <class T>
Tensor<T> run(const Backbone<T>& bb, const std::vector<Sequence>& seqs, const Tensor<T>& images) {
  const auto packed = pack_sequences(seqs, 64, bb.config().vocab_size);
  return bb.forward(bb.embed(packed, images), packed);
}

}  // namespace

TEST(AttentionMask, SingleToken) {
  const auto m = build_attention_mask(layout("t"));
  ASSERT_EQ(m.size(), 1u);
  EXPECT_EQ(m[0], 1);
}

TEST(AttentionMask, HandEnumeratedHybridExample) {
  // [t1 i1 i2 t2]
  const auto m = build_attention_mask(layout("tiit"));
  const std::vector<std::uint8_t> expected = {1, 0, 0, 0,  //
                                              1, 1, 1, 0,  //
                                              1, 1, 1, 0,  //
                                              1, 1, 1, 1};
  EXPECT_EQ(m, expected);
}

TEST(AttentionMask, PureTextIsCausal) {
  const auto m = build_attention_mask(layout("ttttt"));
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 5; ++j) EXPECT_EQ(m[i * 5 + j], j <= i ? 1 : 0);
}

TEST(AttentionMask, RandomLayoutsMatchBruteForceRule) {
  Rng rng(21);
  for (int trial = 0; trial < 300; ++trial) {
    std::string s;
    const std::size_t n = 1 + rng.index(20);
    for (std::size_t k = 0; k < n; ++k) {
      const auto r = rng.index(6);
      s += r < 3 ? 't' : r < 4 ? 'i' : r < 5 ? 'm' : '|';
    }
    if (s.find_first_not_of('|') == std::string::npos) s += 't';
    const auto seq = layout(s);
    const auto m = build_attention_mask(seq);
    const std::size_t L = seq.size();
    for (std::size_t i = 0; i < L; ++i)
      for (std::size_t j = 0; j < L; ++j) ASSERT_EQ(m[i * L + j] != 0, allowed_by_rule(seq, i, j)) << s << " i=" << i << " j=" << j;
  }
}

TEST(Layout, ValidationRejectsMalformedSequences) {
  Sequence empty;
  EXPECT_THROW(validate_sequence(empty), LayoutError);
  auto stray = layout("tt");
  stray.slots[1] = Slot::picture(0);
  EXPECT_THROW(validate_sequence(stray), LayoutError);
  auto text_in_span = layout("tii");
  text_in_span.slots[1] = Slot::text(1);
  EXPECT_THROW(validate_sequence(text_in_span), LayoutError);
  auto overlap = layout("tii");
  overlap.spans.push_back({2, 3});
  EXPECT_THROW(validate_sequence(overlap), LayoutError);
  auto targets = layout("tt");
  targets.targets.pop_back();
  EXPECT_THROW(validate_sequence(targets), LayoutError);
}

TEST(Layout, PackingRecordsRowsAndTargets) {
  auto a = layout("tiit");
  a.targets[3] = 5;
  auto b = layout("tmt");
  b.targets[0] = 7;
  const auto p = pack_sequences({a, b}, 16, 10);
  EXPECT_EQ(p.rows, 7u);
  EXPECT_EQ(p.offsets, (std::vector<std::size_t>{0, 4}));
  EXPECT_EQ(p.positions, (std::vector<std::size_t>{0, 1, 2, 3, 0, 1, 2}));
  EXPECT_EQ(p.image_rows, (std::vector<std::size_t>{1, 2}));
  EXPECT_EQ(p.mask_rows, (std::vector<std::size_t>{5}));
  EXPECT_EQ(p.mask_index, (std::vector<std::size_t>{0}));
  EXPECT_EQ(p.target_rows, (std::vector<std::size_t>{3, 4}));
  EXPECT_EQ(p.targets, (std::vector<int>{5, 7}));
  EXPECT_THROW(pack_sequences({a}, 3, 10), LayoutError);
  auto bad = layout("t");
  bad.slots[0].token = 10;
  EXPECT_THROW(pack_sequences({bad}, 8, 10), LayoutError);
}

TEST(Backbone, ZeroWeightsGiveIdenticalOutputsAcrossPositions) {
  Rng rng(1);
  Backbone<double> bb(small_config(), rng);
  ParameterList<double> ps;
  bb.collect(ps, "bb");
  for (auto& p : ps)
    for (auto& v : p.tensor.data()) v = 0.0;
  const auto z = run(bb, {layout("tiitt")}, random_tensor<double>({2, 8}, rng));
  for (std::size_t r = 1; r < z.rows(); ++r)
    for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(z[r * 8 + c], z[c]);
}

TEST(Backbone, BatchEquivariance) {
  Rng rng(2);
  Backbone<double> bb(small_config(), rng);
  auto a = layout("tiitt"), b = layout("ttmmt");
  for (auto& s : b.slots)
    if (s.kind != SlotKind::Text) s.image += 2;
  const auto images = random_tensor<double>({4, 8}, rng);
  const auto ab = run(bb, {a, b}, images);
  const auto ba = run(bb, {b, a}, images);
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t c = 0; c < 8; ++c) {
      // GEMM kernels may round differently by row position, so equal to rounding.
      EXPECT_NEAR(ab[r * 8 + c], ba[(5 + r) * 8 + c], 1e-12);
      EXPECT_NEAR(ab[(5 + r) * 8 + c], ba[r * 8 + c], 1e-12);
    }
}

TEST(Backbone, QkNormIsNotVacuous) {
  auto on = small_config(), off = small_config();
  off.qknorm = false;
  Rng r1(3), r2(3), r3(4);
  Backbone<double> a(on, r1), b(off, r2);
  const auto images = random_tensor<double>({2, 8}, r3);
  const auto za = run(a, {layout("tiitt")}, images), zb = run(b, {layout("tiitt")}, images);
  double diff = 0;
  for (std::size_t i = 0; i < za.numel(); ++i) diff = std::max(diff, std::abs(za[i] - zb[i]));
  EXPECT_GT(diff, 0.0);
}

TEST(Backbone, CausalOutsideImageSpans) {
  Rng rng(5);
  Backbone<double> bb(small_config(), rng);
  const auto images = random_tensor<double>({2, 8}, rng);
  auto a = layout("ttiittt");
  auto b = a;
  b.slots[5].token = (b.slots[5].token + 3) % 10;
  const auto za = run(bb, {a}, images), zb = run(bb, {b}, images);
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(za[r * 8 + c], zb[r * 8 + c]) << "row " << r;
  bool changed = false;
  for (std::size_t c = 0; c < 8; ++c) changed |= za[5 * 8 + c] != zb[5 * 8 + c];
  EXPECT_TRUE(changed);
}

TEST(Backbone, FullAttentionInsideSpans) {
  Rng rng(6);
  Backbone<double> bb(small_config(), rng);
  const auto seq = layout("tiiiit");
  for (std::size_t slot = 0; slot < 4; ++slot) {
    auto images = random_tensor<double>({4, 8}, rng);
    const auto base = run(bb, {seq}, images);
    for (std::size_t c = 0; c < 8; ++c) images[slot * 8 + c] += 0.5;
    const auto moved = run(bb, {seq}, images);
    for (std::size_t pos = 1; pos <= 4; ++pos) {
      double diff = 0;
      for (std::size_t c = 0; c < 8; ++c) diff += std::abs(base[pos * 8 + c] - moved[pos * 8 + c]);
      EXPECT_GT(diff, 0.0) << "slot " << slot << " pos " << pos;
    }
    for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(base[c], moved[c]);
  }
}

TEST(Backbone, MaskSlotsUseLearnedEmbedding) {
  Rng rng(7);
  Backbone<double> bb(small_config(), rng);
  const auto images = random_tensor<double>({2, 8}, rng);
  auto images2 = images.clone();
  for (auto& v : images2.data()) v += 1.0;
  const auto seq = layout("tmmt");
  const auto a = run(bb, {seq}, images), b = run(bb, {seq}, images2);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a[i], b[i]);
}

TEST(TextLoss, ZLossOfUniformLogits) {
  // logZ = ln 4, zloss = lambda * (ln 4)^2 = 1.9218 lambda.
  Tensor<double> logits({3, 4});
  const double lambda = 1e-4;
  const auto l = text_loss(logits, {0, 1, 2}, lambda);
  EXPECT_NEAR(l.zloss.item(), lambda * std::log(4.0) * std::log(4.0), 1e-15);
  EXPECT_NEAR(l.zloss.item() / lambda, 1.9218, 1e-4);
  EXPECT_NEAR(l.ce.item(), std::log(4.0), 1e-12);
  EXPECT_NEAR(l.total.item(), l.ce.item() + l.zloss.item(), 1e-15);
}

TEST(TextLoss, ZeroLambdaDisablesZLoss) {
  Rng rng(8);
  const auto logits = random_tensor<double>({3, 4}, rng);
  EXPECT_EQ(text_loss(logits, {0, 1, 2}, 0.0).zloss.item(), 0.0);
}

TEST(TextLoss, ZLossNonNegativeAndZeroOnlyForNormalizedLogits) {
  Rng rng(9);
  for (int t = 0; t < 50; ++t) {
    const auto logits = random_tensor<double>({2, 5}, rng, 3.0);
    EXPECT_GE(text_loss(logits, {0, 1}, 1.0).zloss.item(), 0.0);
  }
  // Log-probabilities have logsumexp = 0.
  Tensor<double> logp({1, 2});
  logp[0] = std::log(0.25);
  logp[1] = std::log(0.75);
  EXPECT_NEAR(text_loss(logp, {0}, 1.0).zloss.item(), 0.0, 1e-30);
}

TEST(TextLoss, CrossEntropyVanishesWithMargin) {
  double prev = 1e9;
  for (double margin : {1.0, 5.0, 10.0, 20.0, 40.0}) {
    Tensor<double> logits({1, 4});
    logits[2] = margin;
    const double ce = text_loss(logits, {2}, 0.0).ce.item();
    EXPECT_LT(ce, prev);
    prev = ce;
  }
  EXPECT_LT(prev, 1e-15);
}

TEST(Backbone, TwoLayerGradientsMatchFiniteDifferences) {
  Rng rng(10);
  Backbone<double> bb(small_config(2), rng);
  auto images = random_tensor<double>({4, 8}, rng);
  auto a = layout("ttiitt"), b = layout("tmmtt");
  for (auto& s : b.slots)
    if (s.kind != SlotKind::Text) s.image += 2;
  a.targets = {1, 2, -1, -1, 4, 5};
  b.targets = {3, -1, -1, 6, 7};
  ParameterList<double> ps;
  bb.collect(ps, "backbone");
  ps.push_back({"images", images});
  const auto loss = [&] {
    const auto packed = pack_sequences({a, b}, 16, 10);
    const auto z = bb.forward(bb.embed(packed, images), packed);
    const auto logits = bb.logits(gather_rows(z, packed.target_rows));
    return add(text_loss(logits, packed.targets, 1e-2).total, project_to_scalar(z));
  };
  const auto r = grad_check<double>(loss, ps, 1e-5);
  EXPECT_LT(r.max_relative_error, 1e-6) << r.worst;
  EXPECT_GT(r.checked, 1000u);
}
