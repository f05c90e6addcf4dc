#include <gtest/gtest.h>

#include <chrono>
#include <filesystem>

#include "scaledet/model.hpp"

namespace scaledet {
namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.channels = 16;
  cfg.heads = 2;
  cfg.decoder_blocks = 2;
  cfg.queries = 6;
  cfg.keypoints = 2;
  cfg.scales = {1, 3};
  cfg.image_width = 64;
  cfg.image_height = 32;
  cfg.encoder_blocks = 1;
  cfg.seed = 5;
  return cfg;
}

SceneSample tiny_sample(unsigned seed, int w = 64, int h = 32) {
  SceneConfig scfg;
  scfg.image_width = w;
  scfg.image_height = h;
  scfg.min_objects = 1;
  scfg.max_objects = 2;
  scfg.z_min = 8;
  scfg.z_max = 25;
  scfg.focal = 60;
  scfg.seed = seed;
  return generate_scene(scfg, 0);
}

TEST(Backbone, StrideSixteenShapes) {
  Model model(tiny_config());
  Var img64 = constant(Tensor::zeros({64, 64, 1}));
  Var out = model.backbone_forward(img64);
  EXPECT_EQ(out->value.shape(), (std::vector<int>{4, 4, 16}));
  Var img = constant(Tensor::zeros({192, 640, 1}));
  Var out2 = model.backbone_forward(img);
  EXPECT_EQ(out2->value.dim(0), 12);
  EXPECT_EQ(out2->value.dim(1), 40);
  EXPECT_THROW(model.backbone_forward(constant(Tensor::zeros({30, 64, 1}))),
               std::invalid_argument);
}

TEST(Backbone, DeterministicOnIdenticalImages) {
  Model model(tiny_config());
  std::mt19937_64 rng(9);
  Tensor img = Tensor::uniform({32, 64, 1}, rng, 0, 1);
  Var a = model.backbone_forward(constant(img));
  Var b = model.backbone_forward(constant(img));
  for (int i = 0; i < a->value.size(); ++i) EXPECT_EQ(a->value[i], b->value[i]);
}

TEST(Encoders, ShapesAndPositiveDenseDepth) {
  Model model(tiny_config());
  std::mt19937_64 rng(10);
  Var base = constant(Tensor::uniform({2, 4, 16}, rng));
  const auto maps = model.encoders_forward(base);
  EXPECT_EQ(maps.visual->value.shape(), (std::vector<int>{2, 4, 16}));
  EXPECT_EQ(maps.depth->value.shape(), (std::vector<int>{2, 4, 16}));
  EXPECT_EQ(maps.dense_depth->value.shape(), (std::vector<int>{2, 4}));
  for (int i = 0; i < maps.dense_depth->value.size(); ++i)
    EXPECT_GT(maps.dense_depth->value[i], 0.0);
  const auto again = model.encoders_forward(base);
  for (int i = 0; i < maps.visual->value.size(); ++i)
    EXPECT_EQ(maps.visual->value[i], again.visual->value[i]);
}

TEST(Decoder, DiagnosticsShapesPerBlock) {
  ModelConfig cfg = tiny_config();
  cfg.decoder_blocks = 3;
  cfg.queries = 50;
  Model model(cfg);
  const SceneSample sample = tiny_sample(1);
  const ForwardResult fwd = model.forward(sample, false);
  ASSERT_EQ(static_cast<int>(fwd.blocks.size()), 3);
  for (const auto& block : fwd.blocks) {
    EXPECT_EQ(block.scale_probs->value.shape(), (std::vector<int>{50, 2}));
    EXPECT_EQ(block.class_logits->value.dim(0), 50);
    EXPECT_EQ(block.lrtb->value.shape(), (std::vector<int>{50, 4}));
    for (int i = 0; i < block.lrtb->value.size(); ++i) EXPECT_GE(block.lrtb->value[i], 0.0);
    for (int i = 0; i < block.dims->value.size(); ++i) EXPECT_GT(block.dims->value[i], 0.0);
    for (int i = 0; i < block.d_reg->value.size(); ++i) EXPECT_GT(block.d_reg->value[i], 0.0);
    for (int i = 0; i < block.center->value.size(); ++i) {
      EXPECT_GE(block.center->value[i], 0.0);
      EXPECT_LE(block.center->value[i], 1.0);
    }
  }
}

TEST(Decoder, ZeroedHeadsGiveIdenticalBoxesAcrossQueries) {
  Model model(tiny_config());
  for (const auto& [name, p] : model.params().params()) {
    if (name.rfind("head.box", 0) == 0 && name.find("weight") != std::string::npos)
      p->value.fill(0.0);
  }
  const SceneSample sample = tiny_sample(2);
  const ForwardResult fwd = model.forward(sample, false);
  const auto& lrtb = fwd.final_block().lrtb->value;
  for (int q = 1; q < lrtb.dim(0); ++q)
    for (int c = 0; c < 4; ++c) EXPECT_NEAR(lrtb.at(q, c), lrtb.at(0, c), 1e-12);
}

TEST(ReadDmap, SpecExamples) {
  Tensor dense({2, 3});
  dense.fill(7.5);
  Var constant_map = constant(dense);
  Var cx = constant(Tensor::from({13.7, 40.0}, {2}));
  Var cy = constant(Tensor::from({5.0, 20.0}, {2}));
  Var out = read_dmap(constant_map, cx, cy);
  EXPECT_NEAR(out->value[0], 7.5, 1e-12);
  EXPECT_NEAR(out->value[1], 7.5, 1e-12);

  Tensor two({1, 2});
  two.at(0, 0) = 4.0;
  two.at(0, 1) = 8.0;
  // Cell centers sit at pixels 8 and 24; pixel 16 is midway.
  Var mid = read_dmap(constant(two), constant(Tensor::from({16.0}, {1})),
                      constant(Tensor::from({8.0}, {1})));
  EXPECT_NEAR(mid->value[0], 6.0, 1e-12);
  Var exact = read_dmap(constant(two), constant(Tensor::from({24.0}, {1})),
                        constant(Tensor::from({8.0}, {1})));
  EXPECT_NEAR(exact->value[0], 8.0, 1e-12);
}

TEST(ModelForward, DeterministicAndFinite) {
  Model model(tiny_config());
  const SceneSample sample = tiny_sample(3);
  const ForwardResult a = model.forward(sample, false);
  const ForwardResult b = model.forward(sample, false);
  for (int i = 0; i < a.final_block().class_logits->value.size(); ++i)
    EXPECT_EQ(a.final_block().class_logits->value[i], b.final_block().class_logits->value[i]);
  EXPECT_TRUE(a.final_block().features->value.all_finite());
  EXPECT_TRUE(a.dense_depth->value.all_finite());
}

TEST(ModelInit, SameSeedSameParameters) {
  Model a(tiny_config());
  Model b(tiny_config());
  const auto& pa = a.params().params();
  const auto& pb = b.params().params();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i].first, pb[i].first);
    for (int j = 0; j < pa[i].second->value.size(); ++j)
      EXPECT_EQ(pa[i].second->value[j], pb[i].second->value[j]);
  }
  ModelConfig other = tiny_config();
  other.seed = 6;
  Model c(other);
  bool any_diff = false;
  for (std::size_t i = 0; i < pa.size() && !any_diff; ++i)
    for (int j = 0; j < pa[i].second->value.size(); ++j)
      if (pa[i].second->value[j] != c.params().params()[i].second->value[j]) {
        any_diff = true;
        break;
      }
  EXPECT_TRUE(any_diff);
}

TEST(Checkpoint, RoundTripPreservesOutputs) {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "scaledet_test_ckpt";
  fs::create_directories(dir);
  Model model(tiny_config());
  const SceneSample sample = tiny_sample(4);
  const ForwardResult before = model.forward(sample, false);
  model.save_checkpoint(dir / "model.bin");
  Model loaded = Model::load_checkpoint(dir / "model.bin");
  const ForwardResult after = loaded.forward(sample, false);
  for (int i = 0; i < before.final_block().class_logits->value.size(); ++i)
    EXPECT_EQ(before.final_block().class_logits->value[i],
              after.final_block().class_logits->value[i]);
  for (int i = 0; i < before.dense_depth->value.size(); ++i)
    EXPECT_EQ(before.dense_depth->value[i], after.dense_depth->value[i]);
  // Truncated files and wrong magic are rejected.
  {
    std::ofstream f(dir / "bad.bin", std::ios::binary);
    f << "BOGUSDATA";
  }
  EXPECT_THROW(Model::load_checkpoint(dir / "bad.bin"), std::runtime_error);
  fs::remove_all(dir);
}

TEST(ModelConfigText, RoundTrip) {
  ModelConfig cfg = tiny_config();
  cfg.use_ssda = false;
  cfg.shared_head_offsets = true;
  const ModelConfig back = ModelConfig::from_text(cfg.to_text());
  EXPECT_EQ(back.channels, cfg.channels);
  EXPECT_EQ(back.scales, cfg.scales);
  EXPECT_EQ(back.use_ssda, false);
  EXPECT_EQ(back.shared_head_offsets, true);
  EXPECT_EQ(back.seed, cfg.seed);
  EXPECT_THROW(ModelConfig::from_text("nonsense=1\n"), std::runtime_error);
}

TEST(ModelDefaults, MatchConfiguredArchitecture) {
  const ModelConfig cfg;
  EXPECT_EQ(cfg.heads, 8);
  EXPECT_EQ(cfg.decoder_blocks, 3);
  EXPECT_EQ(cfg.queries, 50);
  EXPECT_EQ(cfg.scales, (std::vector<int>{1, 3, 5, 7, 9}));
  EXPECT_EQ(cfg.channels % cfg.heads, 0);
}

TEST(ModelTiming, DefaultConfigForwardBackwardUnderFiveSeconds) {
  ModelConfig cfg;  // default 640 x 192, C = 64
  cfg.seed = 1;
  Model model(cfg);
  SceneConfig scfg;
  scfg.seed = 1;
  const SceneSample sample = generate_scene(scfg, 0);
  const auto start = std::chrono::steady_clock::now();
  model.params().zero_grad();
  const ForwardResult fwd = model.forward(sample, true);
  Var loss = mean_all(fwd.final_block().features);
  backward(loss);
  const double seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  EXPECT_LT(seconds, 5.0);
}

}  // namespace
}  // namespace scaledet
