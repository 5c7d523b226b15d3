// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <random>

#include "cfd/checkpoint.hpp"
#include "cfd/gradcheck_suite.hpp"
#include "cfd/model.hpp"

using Td = cfd::Tensor<double>;
using Tf = cfd::Tensor<float>;

namespace {

cfd::BackboneConfig tiny() {
  auto c = cfd::detail::tiny_backbone();
  c.num_ids = 5;
  c.num_domains = 3;
  return c;
}

std::vector<float> flat(const Tf& t) { return t.to_vector(); }

}  // namespace

TEST(Model, OutputShapes) {
  auto cfg = tiny();
  auto m = cfd::init_model<double>(cfg, 1);
  std::mt19937_64 rng(2);
  auto x = Td::uniform({6, 3, 8, 8}, 0, 1, rng);
  auto out = cfd::forward(x, m, {0, 0, 1, 1, 2, 2}, cfd::Mode::kTrain);
  EXPECT_EQ(out.embedding.shape(), (cfd::Shape{6, 8}));
  EXPECT_EQ(out.global_feature.shape(), (cfd::Shape{6, 8}));
  EXPECT_EQ(out.id_logits.shape(), (cfd::Shape{6, 5}));
  EXPECT_EQ(out.domain_stages, (std::vector<int>{1, 2, 3, 4}));
  for (const auto& l : out.domain_logits) EXPECT_EQ(l.shape(), (cfd::Shape{6, 3}));
  ASSERT_EQ(out.stage_features.size(), 4u);
  EXPECT_EQ(out.stage_features[3].shape(), (cfd::Shape{6, 8, 2, 2}));
}

TEST(Model, TrainModeNeedsTrainingDomains) {
  auto m = cfd::init_model<double>(tiny(), 1);
  auto x = Td::zeros({2, 3, 8, 8});
  EXPECT_THROW(cfd::forward(x, m, {}, cfd::Mode::kTrain), cfd::DomainError);
  EXPECT_THROW(cfd::forward(x, m, {0, 3}, cfd::Mode::kTrain), cfd::DomainError);
  EXPECT_THROW(cfd::forward(Td::zeros({2, 1, 8, 8}), m, {0, 0}, cfd::Mode::kTrain), cfd::ShapeError);
}

TEST(Model, StageSubsetControlsModulesAndHeads) {
  auto cfg = tiny();
  cfg.cfd_stages = {2, 4};
  auto m = cfd::init_model<double>(cfg, 1);
  EXPECT_FALSE(m.stages[0].cfd.has_value());
  EXPECT_TRUE(m.stages[1].cfd.has_value());
  auto out = cfd::forward(Td::zeros({3, 3, 8, 8}), m, {0, 1, 2}, cfd::Mode::kTrain);
  EXPECT_EQ(out.domain_stages, (std::vector<int>{2, 4}));
}

TEST(Model, BaselineIsPlainConvNet) {
  auto cfg = tiny();
  cfg.decomposition = cfd::Decomposition::kNone;
  cfg.input_norm = cfg.id_norm = cfd::NormKind::kNone;
  auto m = cfd::init_model<double>(cfg, 4);
  for (const auto& st : m.stages) {
    EXPECT_FALSE(st.cfd.has_value());
    EXPECT_FALSE(st.head.has_value());
  }
  std::mt19937_64 rng(5);
  auto x = Td::uniform({4, 3, 8, 8}, 0, 1, rng);
  auto out = cfd::forward(x, m, {0, 1, 2, 0}, cfd::Mode::kTrain);
  EXPECT_TRUE(out.domain_logits.empty());

  Td h = x;
  for (int s = 0; s < 4; ++s) {
    h = cfd::relu(cfd::conv2d(h, m.stages[s].conv1, cfg.strides[s], 1));
    h = cfd::relu(cfd::conv2d(h, m.stages[s].conv2, 1, 1));
  }
  auto g = cfd::gem(h, m.gem_p);
  EXPECT_EQ(out.global_feature.to_vector(), g.to_vector());
}

TEST(Model, DecompositionKindsShareTheFirstStageConvs) {
  auto cfg = tiny();
  auto cfd_model = cfd::init_model<double>(cfg, 9);
  cfg.decomposition = cfd::Decomposition::kPFD;
  auto pfd_model = cfd::init_model<double>(cfg, 9);
  EXPECT_EQ(cfd_model.stages[0].conv1.to_vector(), pfd_model.stages[0].conv1.to_vector());
  std::mt19937_64 rng(3);
  auto x = Td::uniform({3, 3, 8, 8}, 0, 1, rng);
  auto a = cfd::forward(x, cfd_model, {0, 1, 2}, cfd::Mode::kTrain);
  auto b = cfd::pfd_forward(x, pfd_model, {0, 1, 2}, cfd::Mode::kTrain);
  EXPECT_EQ(a.stage_features[0].to_vector(), b.stage_features[0].to_vector());
  EXPECT_THROW(cfd::pfd_forward(x, cfd_model, {0, 1, 2}, cfd::Mode::kTrain), cfd::ConfigError);
}

TEST(Model, EvalEmbeddingIgnoresDomainLabels) {
  auto m = cfd::init_model<float>(tiny(), 3);
  std::mt19937_64 rng(4);
  // Populate running statistics first.
  for (int i = 0; i < 3; ++i) cfd::forward(Tf::uniform({6, 3, 8, 8}, 0, 1, rng), m, {0, 0, 1, 1, 2, 2}, cfd::Mode::kTrain);
  auto x = Tf::uniform({4, 3, 8, 8}, 0, 1, rng);
  cfd::NoGradGuard ng;
  const auto ref = flat(cfd::forward(x, m, {}, cfd::Mode::kEval).embedding);
  for (std::size_t d : {0, 1, 2, 3, 11}) {
    std::vector<std::size_t> labels(4, d);
    EXPECT_EQ(flat(cfd::forward(x, m, labels, cfd::Mode::kEval).embedding), ref) << "label " << d;
  }
}

TEST(Model, InitIsDeterministicPerSeed) {
  auto a = cfd::init_model<float>(tiny(), 5), b = cfd::init_model<float>(tiny(), 5), c = cfd::init_model<float>(tiny(), 6);
  EXPECT_EQ(cfd::serialize_checkpoint(a), cfd::serialize_checkpoint(b));
  EXPECT_NE(cfd::serialize_checkpoint(a), cfd::serialize_checkpoint(c));
}

TEST(Model, DigestTracksLayout) {
  auto a = tiny(), b = tiny();
  EXPECT_EQ(a.digest(), b.digest());
  b.attention = cfd::AttentionKind::kSpatial;
  EXPECT_NE(a.digest(), b.digest());
}

TEST(Checkpoint, RoundTripIsByteIdentical) {
  auto m = cfd::init_model<float>(tiny(), 7);
  std::mt19937_64 rng(8);
  cfd::forward(Tf::uniform({6, 3, 8, 8}, 0, 1, rng), m, {0, 0, 1, 1, 2, 2}, cfd::Mode::kTrain);
  const auto bytes = cfd::serialize_checkpoint(m);
  auto restored = cfd::init_model<float>(tiny(), 99);
  cfd::deserialize_checkpoint(bytes, restored);
  EXPECT_EQ(cfd::serialize_checkpoint(restored), bytes);
  auto x = Tf::uniform({2, 3, 8, 8}, 0, 1, rng);
  cfd::NoGradGuard ng;
  EXPECT_EQ(flat(cfd::forward(x, m, {}, cfd::Mode::kEval).embedding),
            flat(cfd::forward(x, restored, {}, cfd::Mode::kEval).embedding));
}

TEST(Checkpoint, RejectsOtherConfig) {
  const auto bytes = cfd::serialize_checkpoint(cfd::init_model<float>(tiny(), 1));
  auto cfg = tiny();
  cfg.id_norm = cfd::NormKind::kIN;
  auto other = cfd::init_model<float>(cfg, 1);
  try {
    cfd::deserialize_checkpoint(bytes, other);
    FAIL() << "expected a digest error";
  } catch (const cfd::CheckpointError& e) {
    EXPECT_EQ(e.reason, cfd::CheckpointError::Reason::kDigest);
  }
}

TEST(Checkpoint, RejectsOtherVersionAndTruncation) {
  auto m = cfd::init_model<float>(tiny(), 1);
  const auto bytes = cfd::serialize_checkpoint(m);
  auto expect_reason = [&](const std::string& b, cfd::CheckpointError::Reason r) {
    try {
      cfd::deserialize_checkpoint(b, m);
      ADD_FAILURE() << "expected a checkpoint error";
    } catch (const cfd::CheckpointError& e) {
      EXPECT_EQ(e.reason, r);
    }
  };
  auto versioned = bytes;
  versioned.replace(versioned.find("version 1"), 9, "version 2");
  expect_reason(versioned, cfd::CheckpointError::Reason::kVersion);
  expect_reason(bytes.substr(0, bytes.size() - 3), cfd::CheckpointError::Reason::kTruncated);
  expect_reason(bytes.substr(0, 20), cfd::CheckpointError::Reason::kTruncated);
  expect_reason("nonsense\n", cfd::CheckpointError::Reason::kMalformed);
}
