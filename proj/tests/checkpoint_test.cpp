#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <functional>

#include "support/oracles.hpp"

using namespace dimerec;
namespace fs = std::filesystem;

namespace {

class CheckpointTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("dimerec_ckpt_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) +
                                        "_" + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir_);
    config_.d = 8;
    config_.max_len = 6;
    Rng rng(1);
    params_ = init_model(config_, 30, rng);
  }
  void TearDown() override { fs::remove_all(dir_); }

  void rewrite_manifest(const std::function<void(nlohmann::json&)>& edit) {
    auto m = ckpt::read_manifest(dir_);
    edit(m);
    std::ofstream(dir_ / ckpt::kManifestName) << m.dump();
  }

  fs::path dir_;
  TrainConfig config_;
  ModelParams params_;
};

}  // namespace

TEST_F(CheckpointTest, RoundTripIsExactAtFp32) {
  ckpt::save_checkpoint(dir_, params_, config_, "abc");
  const auto ck = ckpt::load_checkpoint(dir_, "abc");
  EXPECT_TRUE(ck.warnings.empty());
  auto rounded = params_;
  ckpt::round_to_fp32(rounded);
  const auto a = rounded.parameters();
  const auto b = ck.params.parameters();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i]->name, b[i]->name);
    EXPECT_EQ(a[i]->value, b[i]->value) << a[i]->name;
  }
  EXPECT_EQ(to_key_values(ck.config), to_key_values(config_));
  EXPECT_EQ(ck.schedule.steps, 20);
  EXPECT_EQ(ck.vocab_hash, "abc");
  // A second save of the loaded model writes identical bytes.
  const fs::path again = dir_ / "again";
  ckpt::save_checkpoint(again, ck.params, ck.config, "abc");
  auto slurp = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
  };
  EXPECT_EQ(slurp(again / ckpt::kPayloadName), slurp(dir_ / ckpt::kPayloadName));
}

TEST_F(CheckpointTest, PayloadSizeAndLayout) {
  ckpt::save_checkpoint(dir_, params_, config_, "");
  std::size_t floats = 0;
  for (const Parameter* p : params_.parameters()) floats += p->value.size();
  EXPECT_EQ(fs::file_size(dir_ / ckpt::kPayloadName), floats * 4);
  const auto m = ckpt::read_manifest(dir_);
  EXPECT_EQ(m.at("payload_bytes").get<std::size_t>(), floats * 4);
  EXPECT_EQ(m.at("dtype"), "float32");
}

TEST_F(CheckpointTest, DefaultConfigHasSevenGroups) {
  TrainConfig c;
  Rng rng(2);
  const auto p = init_model(c, 20, rng);
  const auto groups = ckpt::manifest_groups(ckpt::make_manifest(p, c, ""));
  EXPECT_EQ(groups, (std::vector<std::string>{"item_embedding", "gem.positional", "gem.w1", "gem.b1", "gem.w2", "gem.b2",
                                              "dam"}));
}

TEST_F(CheckpointTest, TruncatedPayloadNamesTensor) {
  ckpt::save_checkpoint(dir_, params_, config_, "");
  fs::resize_file(dir_ / ckpt::kPayloadName, fs::file_size(dir_ / ckpt::kPayloadName) - 10);
  try {
    ckpt::load_checkpoint(dir_);
    FAIL() << "expected truncation error";
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("truncated payload: tensor 'dam.b3'"), std::string::npos) << e.what();
  }
}

TEST_F(CheckpointTest, TrailingBytesRejected) {
  ckpt::save_checkpoint(dir_, params_, config_, "");
  std::ofstream(dir_ / ckpt::kPayloadName, std::ios::binary | std::ios::app) << "xxxx";
  EXPECT_THROW(ckpt::load_checkpoint(dir_), CheckpointError);
}

TEST_F(CheckpointTest, ShapeMismatchNamesTensor) {
  ckpt::save_checkpoint(dir_, params_, config_, "");
  rewrite_manifest([](nlohmann::json& m) { m["tensors"][2]["shape"] = {8, 31}; });
  try {
    ckpt::load_checkpoint(dir_);
    FAIL() << "expected shape error";
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("gem.w1"), std::string::npos) << e.what();
  }
}

TEST_F(CheckpointTest, CorruptManifest) {
  ckpt::save_checkpoint(dir_, params_, config_, "");
  std::ofstream(dir_ / ckpt::kManifestName) << "{\"format_version\": 1, \"tensors\": [";
  EXPECT_THROW(ckpt::load_checkpoint(dir_), CheckpointError);
}

TEST_F(CheckpointTest, MissingFieldsAndVersion) {
  ckpt::save_checkpoint(dir_, params_, config_, "");
  rewrite_manifest([](nlohmann::json& m) { m["format_version"] = 9; });
  EXPECT_THROW(ckpt::load_checkpoint(dir_), CheckpointError);
  ckpt::save_checkpoint(dir_, params_, config_, "");
  rewrite_manifest([](nlohmann::json& m) { m.erase("schedule"); });
  EXPECT_THROW(ckpt::load_checkpoint(dir_), CheckpointError);
  EXPECT_THROW(ckpt::load_checkpoint(dir_ / "nowhere"), CheckpointError);
}

TEST_F(CheckpointTest, VocabMismatchIsAWarning) {
  ckpt::save_checkpoint(dir_, params_, config_, "aaaa");
  const auto ck = ckpt::load_checkpoint(dir_, "bbbb");
  ASSERT_EQ(ck.warnings.size(), 1u);
  EXPECT_NE(ck.warnings[0].find("vocabulary"), std::string::npos);
}
