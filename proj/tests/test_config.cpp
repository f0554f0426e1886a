#include <gtest/gtest.h>

#include "support/small_config.hpp"
#include "upt/config.hpp"

using namespace upt;

namespace {

std::string error_of(const std::string& text) {
  try {
    parse_config(text);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Config, EmptyObjectGivesDefaults) {
  EXPECT_EQ(to_json(parse_config("{}")), to_json(RunConfig{}));
}

TEST(Config, EffectiveConfigRoundTrips) {
  RunConfig c;
  c.seed = 9;
  c.experiment.petl.placement = Placement::sequential_ln;
  c.experiment.petl.lora = false;
  c.experiment.loss.tau = 0.05;
  c.report.run_id = "x";
  const nlohmann::json j = to_json(c);
  EXPECT_EQ(to_json(config_from_json(j)), j);
}

TEST(Config, PartialSectionsKeepOtherDefaults) {
  const RunConfig c = parse_config(R"({"petl": {"lora_rank": 3}, "seeds": [4, 5]})");
  EXPECT_EQ(c.experiment.petl.lora_rank, 3u);
  EXPECT_EQ(c.experiment.petl.prefix_len, PETLConfig{}.prefix_len);
  EXPECT_EQ(c.seeds, (std::vector<std::uint64_t>{4, 5}));
}

TEST(Config, UnknownKeysAreNamed) {
  EXPECT_NE(error_of(R"({"bogus": 1})").find("'bogus'"), std::string::npos);
  EXPECT_NE(error_of(R"({"petl": {"rank": 1}})").find("'petl.rank'"), std::string::npos);
}

TEST(Config, WrongTypesAreNamed) {
  EXPECT_NE(error_of(R"({"tune": {"lr": "fast"}})").find("'tune.lr'"), std::string::npos);
  EXPECT_NE(error_of(R"({"image": 3})").find("image"), std::string::npos);
}

TEST(Config, InvalidValuesAreRejected) {
  EXPECT_FALSE(error_of(R"({"petl": {"placement": "diagonal"}})").empty());
  EXPECT_FALSE(error_of(R"({"seeds": []})").empty());
  EXPECT_FALSE(error_of(R"({"image": {"heads": 3}})").empty());
  EXPECT_FALSE(error_of("{not json").empty());
}

TEST(Config, MissingFileNamesThePath) {
  try {
    load_config("/no/such/config.json");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("/no/such/config.json"), std::string::npos);
  }
}

TEST(Config, ShippedConfigsMatchTheirSources) {
  EXPECT_EQ(to_json(load_config(UPT_CONFIG_DIR "/default.json")), to_json(RunConfig{}));
  RunConfig quick = testcfg::small_run();
  quick.report.run_id = "quick";
  EXPECT_EQ(to_json(load_config(UPT_CONFIG_DIR "/quick.json")), to_json(quick));
}
