// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "cfd/config.hpp"

TEST(Config, DefaultsAreConsistent) {
  const auto c = cfd::default_config();
  EXPECT_EQ(c.model.num_ids, c.data.identities);
  EXPECT_EQ(c.model.num_domains, c.data.train_domains);
  EXPECT_EQ(c.optim.epochs, 30u);
  EXPECT_EQ(c.seeds.size(), 5u);
}

TEST(Config, JsonRoundTrip) {
  auto c = cfd::apply_overrides(cfd::default_config(), {"model.attention=\"SC\"", "model.cfd_stages=[1,3]", "loss.margin=0.5"});
  nlohmann::json j = c;
  const auto back = j.get<cfd::RunConfig>();
  EXPECT_EQ(nlohmann::json(back), j);
  EXPECT_EQ(back.model.attention, cfd::AttentionKind::kSpatialChannel);
  EXPECT_EQ(back.model.cfd_stages, (std::set<int>{1, 3}));
  EXPECT_EQ(back.loss.margin, 0.5);
}

TEST(Config, OverridesParseValues) {
  auto c = cfd::apply_overrides(cfd::default_config(), {"optim.epochs=3", "model.decomposition=PFD", "loss.domain_loss=false"});
  EXPECT_EQ(c.optim.epochs, 3u);
  EXPECT_EQ(c.model.decomposition, cfd::Decomposition::kPFD);
  EXPECT_FALSE(c.domain_loss);
  EXPECT_EQ(c.effective_weights().lambda, (std::array<double, 4>{0, 0, 0, 0}));
}

TEST(Config, UnknownKeysAndBadValuesAreConfigErrors) {
  const auto d = cfd::default_config();
  EXPECT_THROW(cfd::apply_overrides(d, {"optim.epoch=3"}), cfd::ConfigError);
  EXPECT_THROW(cfd::apply_overrides(d, {"nothing"}), cfd::ConfigError);
  EXPECT_THROW(cfd::apply_overrides(d, {"model.decomposition=XYZ"}), cfd::ConfigError);
  EXPECT_THROW(cfd::apply_overrides(d, {"model.cfd_stages=[0,5]"}), cfd::ConfigError);
  EXPECT_THROW(cfd::apply_overrides(d, {"optim.kind=rmsprop"}), cfd::ConfigError);
  EXPECT_THROW(cfd::apply_overrides(d, {"model.widths=[4,4,4]"}), cfd::ConfigError);
  EXPECT_THROW(cfd::apply_overrides(d, {"optim.epochs=\"many\""}), cfd::ConfigError);
}

TEST(Config, FileMergesOntoDefaults) {
  const auto path = std::filesystem::temp_directory_path() / "cfd_config_test.json";
  {
    std::ofstream f(path);
    f << R"({"optim": {"epochs": 7}, "model": {"id_norm": "IN"}})";
  }
  const auto c = cfd::load_config(path.string());
  EXPECT_EQ(c.optim.epochs, 7u);
  EXPECT_EQ(c.model.id_norm, cfd::NormKind::kIN);
  EXPECT_EQ(c.optim.lr, cfd::default_config().optim.lr);
  {
    std::ofstream f(path);
    f << R"({"optim": {"epocs": 7}})";
  }
  EXPECT_THROW(cfd::load_config(path.string()), cfd::ConfigError);
  std::filesystem::remove(path);
  EXPECT_THROW(cfd::load_config(path.string()), cfd::IoError);
}
