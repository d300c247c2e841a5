#include <gtest/gtest.h>

#include <filesystem>

#include "support/fixtures.hpp"

using namespace unihetero;
using namespace unihetero::testing;

namespace {

std::vector<std::string> leaf_paths(const nlohmann::json& j, const std::string& prefix = "") {
  std::vector<std::string> out;
  if (j.is_object()) {
    for (auto it = j.begin(); it != j.end(); ++it)
      for (auto& p : leaf_paths(it.value(), prefix + "/" + it.key())) out.push_back(p);
  } else {
    out.push_back(prefix);
  }
  return out;
}

nlohmann::json perturbed(nlohmann::json j, const std::string& path) {
  auto& v = j[nlohmann::json::json_pointer(path)];
  if (v.is_boolean())
    v = !v.get<bool>();
  else if (v.is_number_unsigned())
    v = v.get<std::uint64_t>() + 1;
  else if (v.is_number_integer())
    v = v.get<std::int64_t>() + 1;
  else if (v.is_number_float())
    v = v.get<double>() * 1.5 + 0.125;
  else if (v.is_string())
    v = v.get<std::string>() + "x";
  else
    throw std::logic_error("unhandled leaf " + path);
  return j;
}

}  // namespace

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  const auto dir = scratch_dir("ckpt-roundtrip");
  const auto rc = make_run_config(spec_named("exp3"), tiny_train());
  const nlohmann::json cfg = rc;
  UnifiedModel<float> a(rc.model);
  save_checkpoint(dir / "a.uhck", a.state(), cfg);

  auto other = rc;
  other.model.init_seed = 99;
  UnifiedModel<float> b(other.model);
  auto state = b.state();
  load_checkpoint(dir / "a.uhck", state, cfg);
  save_checkpoint(dir / "b.uhck", b.state(), cfg);
  EXPECT_EQ(read_file(dir / "a.uhck"), read_file(dir / "b.uhck"));
  const auto sa = a.state(), sb = b.state();
  for (std::size_t i = 0; i < sa.size(); ++i)
    for (std::size_t k = 0; k < sa[i].tensor.numel(); ++k) ASSERT_EQ(sa[i].tensor[k], sb[i].tensor[k]) << sa[i].name;
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, ContainerLayout) {
  Rng rng(1);
  ParameterList<float> ps;
  Tensor<float> t({2, 3}, std::vector<float>{1, 2, 3, 4, 5, 6});
  ps.push_back({"w", t});
  const Digest d = config_digest({{"k", 1}});
  const auto bytes = encode_checkpoint(ps, d);
  // magic, version, digest, count, name(len + 1 byte), dtype, rank, 2 extents, 6 floats
  EXPECT_EQ(bytes.size(), 4u + 4 + 32 + 4 + 4 + 1 + 1 + 4 + 8 + 24);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "UHCK");
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ(bytes[5] | bytes[6] | bytes[7], 0);
  EXPECT_TRUE(std::equal(d.begin(), d.end(), bytes.begin() + 8));
  const auto back = decode_checkpoint(bytes);
  EXPECT_EQ(back.digest, d);
  ASSERT_EQ(back.tensors.size(), 1u);
  EXPECT_EQ(back.tensors[0].name, "w");
  EXPECT_EQ(back.tensors[0].shape, (Shape{2, 3}));
  EXPECT_EQ(back.tensors[0].data, (std::vector<float>{1, 2, 3, 4, 5, 6}));
}

TEST(Checkpoint, DigestMismatchIsRefused) {
  const auto dir = scratch_dir("ckpt-digest");
  const auto rc = make_run_config(spec_named("exp3"), tiny_train());
  UnifiedModel<float> m(rc.model);
  save_checkpoint(dir / "m.uhck", m.state(), nlohmann::json(rc));
  auto other = rc;
  other.train.lr *= 2;
  auto state = m.state();
  try {
    load_checkpoint(dir / "m.uhck", state, nlohmann::json(other));
    FAIL() << "expected a digest mismatch";
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("digests to"), std::string::npos) << e.what();
  }
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, TruncatedAndCorruptFilesFail) {
  ParameterList<float> ps;
  ps.push_back({"w", Tensor<float>({4}, 1.0f)});
  auto bytes = encode_checkpoint(ps, config_digest(nlohmann::json::object()));
  for (std::size_t cut : {0ul, 3ul, 20ul, bytes.size() - 1}) {
    std::vector<std::uint8_t> part(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(cut));
    EXPECT_THROW(decode_checkpoint(part), std::runtime_error) << cut;
  }
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bad), CheckpointError);
  bad = bytes;
  bad[4] = 7;
  EXPECT_THROW(decode_checkpoint(bad), CheckpointError);
  bad = bytes;
  bad.push_back(0);
  EXPECT_THROW(decode_checkpoint(bad), CheckpointError);
}

TEST(Checkpoint, WarmHeadDoesNotFitTheSmallerHead) {
  const auto dir = scratch_dir("ckpt-shape");
  const auto exp3 = make_run_config(spec_named("exp3"), tiny_train());
  const auto exp4 = make_run_config(spec_named("exp4"), tiny_train());
  ASSERT_EQ(exp4.model.pixel.hidden, 2 * exp3.model.pixel.hidden);
  ASSERT_EQ(exp4.model.pixel.depth, 2 * exp3.model.pixel.depth);
  UnifiedModel<float> big(exp4.model), small(exp3.model);
  const nlohmann::json cfg = {{"warmup", true}};
  save_checkpoint(dir / "head.uhck", big.pixel_head_parameters(), cfg);
  auto target = small.pixel_head_parameters();
  try {
    assign_tensors(target, read_checkpoint(dir / "head.uhck", cfg).tensors);
    FAIL() << "expected a shape error";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("pixel_head."), std::string::npos) << e.what();
  }
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, MissingTensorIsNamed) {
  ParameterList<float> have, want;
  have.push_back({"a", Tensor<float>({2})});
  want.push_back({"a", Tensor<float>({2})});
  want.push_back({"b", Tensor<float>({2})});
  const auto stored = decode_checkpoint(encode_checkpoint(have, Digest{})).tensors;
  try {
    assign_tensors(want, stored);
    FAIL();
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find(" b"), std::string::npos);
  }
}

TEST(Checkpoint, DigestChangesWithEveryConfigField) {
  for (const auto& spec : {spec_named("exp1"), spec_named("exp4"), spec_named("diffu-mse")}) {
    const nlohmann::json base = make_run_config(spec, tiny_train());
    const auto d0 = config_digest(base);
    EXPECT_EQ(d0, config_digest(nlohmann::json::parse(base.dump())));
    const auto paths = leaf_paths(base);
    EXPECT_GT(paths.size(), 50u);
    for (const auto& p : paths) EXPECT_NE(config_digest(perturbed(base, p)), d0) << p;
  }
}

TEST(Checkpoint, SaveIsAtomic) {
  const auto dir = scratch_dir("ckpt-atomic");
  ParameterList<float> ps;
  ps.push_back({"w", Tensor<float>({3}, 2.0f)});
  save_checkpoint(dir / "c.uhck", ps, nlohmann::json::object());
  EXPECT_TRUE(std::filesystem::exists(dir / "c.uhck"));
  EXPECT_FALSE(std::filesystem::exists(dir / "c.uhck.tmp"));
  // A regular file where the directory should be makes the write fail.
  write_text(dir / "blocker", "x");
  EXPECT_THROW(save_checkpoint(dir / "blocker" / "c.uhck", ps, nlohmann::json::object()), std::exception);
  std::filesystem::remove_all(dir);
}
