#include <gtest/gtest.h>

#include "dynfuse/config.hpp"

using namespace dynfuse;

TEST(RunConfig, EmptyDocumentGivesDefaults) {
  const auto c = run_config_from_json(Json::object());
  EXPECT_EQ(c.seed, 0u);
  EXPECT_EQ(c.split_ratio, 0.8);
  EXPECT_EQ(c.data.count_per_class, 75u);
  EXPECT_EQ(c.data.dims, (Dims3{32, 32, 32}));
  EXPECT_EQ(c.model().variant, Variant::PostFusionA);
  EXPECT_EQ(c.model().input_dims, c.data.dims);
  EXPECT_EQ(c.train.epochs, 150u);
  EXPECT_EQ(c.train.batch_size, 16u);
  EXPECT_EQ(c.train.lr, 1e-4);
  EXPECT_EQ(c.train.precision, Precision::F64);
}

TEST(RunConfig, UnknownKeysRejectedAtEveryLevel) {
  for (const char* doc : {R"({"sed": 1})", R"({"data": {"dimz": [8,8,8]}})",
                          R"({"model": {"varient": "post_fusion_a"}})",
                          R"({"train": {"epoch": 3}})"}) {
    EXPECT_THROW(run_config_from_json(Json::parse(doc)), ConfigError) << doc;
  }
}

TEST(RunConfig, TypeAndValueErrors) {
  for (const char* doc :
       {R"({"seed": "x"})", R"({"train": {"epochs": 0}})", R"({"train": {"precision": "f16"}})",
        R"({"model": {"variant": "nope"}})", R"({"data": {"split_ratio": 1.5}})",
        R"({"data": {"preset": "huge"}})",
        R"({"data": {"dims": [8,8,8]}, "model": {"input_dims": [4,8,8]}})",
        R"({"data": {"cavity_class0": [0.1, 0.3]}})"}) {
    EXPECT_THROW(run_config_from_json(Json::parse(doc)), ConfigError) << doc;
  }
}

TEST(RunConfig, PresetsAndDerivedDims) {
  auto c = run_config_from_json(Json::parse(R"({"data": {"preset": "paper"}})"));
  EXPECT_EQ(c.data.dims, (Dims3{110, 110, 110}));
  EXPECT_EQ(c.model().input_dims, c.data.dims);
  c = run_config_from_json(
      Json::parse(R"({"data": {"dims": [8,16,16]}, "model": {"variant": "conv3d_baseline"}})"));
  EXPECT_EQ(c.model().input_dims, (Dims3{8, 16, 16}));
  EXPECT_FALSE(c.model().use_cbam);
}

TEST(RunConfig, SeedAndThreadsFlowIntoSubConfigs) {
  const auto c = run_config_from_json(Json::parse(R"({"seed": 9, "threads": 2})"));
  EXPECT_EQ(c.phantom().seed, 9u);
  EXPECT_EQ(c.train_config().seed, 9u);
  EXPECT_EQ(c.train_config().threads, 2u);
}

TEST(RunConfig, SerialisedFormReloadsIdentically) {
  const auto c = run_config_from_json(Json::parse(
      R"({"seed": 4, "data": {"count_per_class": 5, "dims": [8,8,8]},
          "model": {"variant": "post_fusion_b", "chunk_k": 3, "head": "svm"},
          "train": {"epochs": 2, "precision": "f32", "lr": 0.001}})"));
  const auto again = run_config_from_json(to_json(c));
  EXPECT_EQ(to_json(again).dump(), to_json(c).dump());
  EXPECT_EQ(again.model().head, HeadKind::Svm);
  EXPECT_EQ(again.train.precision, Precision::F32);
}
