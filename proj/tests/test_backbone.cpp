#include <gtest/gtest.h>

#include <cmath>

#include "fixtures.hpp"
#include "latent_loop/backbone.hpp"
#include "latent_loop/pretrain.hpp"
#include "latent_loop/synthetic.hpp"
#include "reference_model.hpp"

using namespace latent_loop;

namespace {

EncoderConfig small_config() {
  EncoderConfig c = EncoderConfig::micro();
  c.layers = 3;
  c.width_vision = 12;
  c.width_text = 8;
  c.embed_dim = 6;
  return c;
}

}  // namespace

TEST(FrozenForward, MatchesStraightLineReferenceExactly) {
  const EncoderConfig cfg = small_config();
  const EncoderWeights w = EncoderWeights::initialize(cfg, 11);
  SplitMix64 rng(4);
  for (int trial = 0; trial < 5; ++trial) {
    for (Modality m : {Modality::vision, Modality::text}) {
      const TokenSequence x = fixtures::random_sequence(m, cfg, rng);
      const FrozenEncoding got = frozen_forward(x, w);
      EXPECT_EQ(got.embedding, reference::frozen_embedding(x, w)) << modality_name(m);
      EXPECT_EQ(got.block_evaluations, cfg.layers);
    }
  }
}

TEST(FrozenForward, EmbeddingIsUnitNorm) {
  const EncoderConfig cfg = EncoderConfig::toy();
  const EncoderWeights w = EncoderWeights::initialize(cfg, 0);
  SplitMix64 rng(1);
  for (Modality m : {Modality::vision, Modality::text}) {
    const FrozenEncoding e = frozen_forward(fixtures::random_sequence(m, cfg, rng), w);
    ASSERT_EQ(e.embedding.size(), cfg.embed_dim);
    double sq = 0.0;
    for (double v : e.embedding.values()) sq += v * v;
    EXPECT_NEAR(std::sqrt(sq), 1.0, 1e-12);
  }
}

TEST(FrozenForward, TextReadsTheEosRow) {
  const EncoderConfig cfg = small_config();
  const EncoderWeights w = EncoderWeights::initialize(cfg, 2);
  const TokenSequence a = TokenSequence::text({1, 2}, cfg);
  EXPECT_EQ(a.eos, 3u);
  EXPECT_EQ(a.readout_index(), 3u);
  const TokenSequence b = TokenSequence::text({1, 2, 3}, cfg);
  EXPECT_NE(frozen_forward(a, w).embedding, frozen_forward(b, w).embedding);
}

TEST(EncoderConfig, ValidationRejectsBadShapes) {
  EncoderConfig c = EncoderConfig::toy();
  c.heads = 5;
  EXPECT_THROW(c.validate(), ConfigError);
  c = EncoderConfig::toy();
  c.embed_dim = 64;
  EXPECT_THROW(c.validate(), ConfigError);
  c = EncoderConfig::toy();
  c.layers = 1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = EncoderConfig::toy();
  c.logit_scale = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_NO_THROW(EncoderConfig::toy().validate());
  EXPECT_NO_THROW(EncoderConfig::micro().validate());
}

TEST(TokenSequence, ValidationRejectsMalformedInputs) {
  const EncoderConfig cfg = small_config();
  const EncoderWeights w = EncoderWeights::initialize(cfg, 0);
  TokenSequence bad = TokenSequence::vision({0, 1, 2, cfg.codebook + 1}, cfg);
  EXPECT_THROW(frozen_forward(bad, w), InputError);
  TokenSequence no_cls = TokenSequence::vision({0, 1, 2, 3}, cfg);
  no_cls.ids[0] = 0;
  EXPECT_THROW(frozen_forward(no_cls, w), InputError);
  TokenSequence too_long = TokenSequence::vision({0, 1, 2, 3, 4}, cfg);
  EXPECT_THROW(frozen_forward(too_long, w), InputError);
  TokenSequence two_eos = TokenSequence::text({cfg.eos_token(), 1, 2}, cfg);
  EXPECT_THROW(frozen_forward(two_eos, w), InputError);
}

TEST(EncoderWeights, InitializationIsSeeded) {
  const EncoderConfig cfg = small_config();
  EXPECT_EQ(EncoderWeights::initialize(cfg, 3).fingerprint(), EncoderWeights::initialize(cfg, 3).fingerprint());
  EXPECT_NE(EncoderWeights::initialize(cfg, 3).fingerprint(), EncoderWeights::initialize(cfg, 4).fingerprint());
}

TEST(EncoderWeights, CheckpointRoundTrip) {
  const EncoderConfig cfg = small_config();
  const EncoderWeights w = EncoderWeights::initialize(cfg, 9);
  const auto dir = fixtures::temp_dir("backbone_roundtrip");
  w.save(dir / "w.perlw");
  const EncoderWeights back = EncoderWeights::load(dir / "w.perlw");
  EXPECT_EQ(back.fingerprint(), w.fingerprint());
  EXPECT_EQ(back.config.layers, cfg.layers);
  EXPECT_EQ(back.config.width_vision, cfg.width_vision);
  EXPECT_DOUBLE_EQ(back.logit_scale(), cfg.logit_scale);
}

TEST(EncoderWeights, LoadRejectsMissingAndMisshapenArrays) {
  const EncoderConfig cfg = small_config();
  auto arrays = EncoderWeights::initialize(cfg, 9).to_arrays();
  auto missing = arrays;
  missing.pop_back();
  EXPECT_THROW(EncoderWeights::from_arrays(missing), InputError);
  auto misshapen = arrays;
  misshapen.back().value = Tensor(Shape{1});
  EXPECT_THROW(EncoderWeights::from_arrays(misshapen), InputError);
  EXPECT_THROW(EncoderWeights::load(fixtures::temp_dir("backbone_missing") / "absent.perlw"), InputError);
}

TEST(Pretrain, ZeroStepsReturnsInitialization) {
  const EncoderConfig cfg = small_config();
  SyntheticTaskSpec gen;
  gen.codebook = cfg.codebook;
  PretrainConfig pc;
  pc.steps = 0;
  EXPECT_EQ(pretrain_backbone(gen, cfg, pc, 5).fingerprint(), EncoderWeights::initialize(cfg, 5).fingerprint());
}

TEST(Pretrain, IsDeterministicAndReducesLoss) {
  const EncoderConfig cfg = small_config();
  SyntheticTaskSpec gen;
  gen.codebook = cfg.codebook;
  gen.latent_dim = 4;
  PretrainConfig pc;
  pc.steps = 30;
  pc.batch = 6;
  pc.lr = 1e-2;
  std::vector<double> log_a, log_b;
  const EncoderWeights a = pretrain_backbone(gen, cfg, pc, 1, &log_a);
  const EncoderWeights b = pretrain_backbone(gen, cfg, pc, 1, &log_b);
  EXPECT_EQ(a.fingerprint(), b.fingerprint());
  EXPECT_EQ(log_a, log_b);
  ASSERT_EQ(log_a.size(), pc.steps);
  double head = 0.0, tail = 0.0;
  for (std::size_t i = 0; i < 5; ++i) head += log_a[i];
  for (std::size_t i = pc.steps - 5; i < pc.steps; ++i) tail += log_a[i];
  EXPECT_LT(tail, head);
}

TEST(Pretrain, RejectsIncompatibleGenerator) {
  const EncoderConfig cfg = small_config();
  SyntheticTaskSpec gen;
  gen.codebook = cfg.codebook + 1;
  EXPECT_THROW(pretrain_backbone(gen, cfg, PretrainConfig{}, 0), ConfigError);
}
