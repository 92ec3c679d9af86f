#include <gtest/gtest.h>

#include <vector>

#include "fixtures.hpp"
#include "latent_loop/perl.hpp"
#include "reference_model.hpp"

using namespace latent_loop;

namespace {

PerlConfig make_config(std::vector<std::size_t> depths, std::size_t steps, Sharing sharing) {
  PerlConfig c;
  c.injection_depths = std::move(depths);
  c.steps = steps;
  c.sharing = sharing;
  return c;
}

void expect_matches_reference(const EncoderWeights& w, const PerlConfig& cfg, const ProjectorSet& phi,
                              std::uint64_t seed) {
  SplitMix64 rng(seed);
  for (Modality m : {Modality::vision, Modality::text}) {
    const TokenSequence x = fixtures::random_sequence(m, w.config, rng);
    const RefinementTrace got = multi_depth_refine(x, w, phi, cfg);
    const reference::Result want = reference::refine(x, w, phi, cfg.injection_depths, cfg.steps);
    ASSERT_EQ(got.embeddings.size(), cfg.steps + 1);
    for (std::size_t k = 0; k <= cfg.steps; ++k) {
      EXPECT_EQ(got.pooled[k], want.pooled[k]) << modality_name(m) << " step " << k;
      EXPECT_EQ(got.embeddings[k], want.embeddings[k]) << modality_name(m) << " step " << k;
    }
    ASSERT_EQ(got.thoughts.size(), want.thoughts.size());
    for (std::size_t k = 0; k < got.thoughts.size(); ++k) EXPECT_EQ(got.thoughts[k], want.thoughts[k]);
  }
}

}  // namespace

TEST(ParameterCount, FullScaleWidthsAtRankOne) {
  const EncoderConfig big = EncoderConfig::clip_b16_dims();
  PerlConfig cfg;
  EXPECT_EQ(projector_parameter_count(big.width_vision, 1), 3841u);
  EXPECT_EQ(projector_parameter_count(big.width_text, 1), 2561u);
  EXPECT_EQ(parameter_count(cfg, big.width_vision, big.width_text), 6402u);
  cfg.text = false;
  EXPECT_EQ(parameter_count(cfg, big.width_vision, big.width_text), 3841u);
}

TEST(ParameterCount, ScalesWithSharingSlots) {
  const EncoderConfig toy = EncoderConfig::toy();
  const std::size_t one = parameter_count(make_config({3, 7}, 4, Sharing::shared), toy.width_vision, toy.width_text);
  EXPECT_EQ(parameter_count(make_config({3, 7}, 4, Sharing::per_step), toy.width_vision, toy.width_text), 4 * one);
  EXPECT_EQ(parameter_count(make_config({3, 7}, 4, Sharing::per_layer), toy.width_vision, toy.width_text), 2 * one);
  EXPECT_EQ(parameter_count(make_config({3, 7}, 4, Sharing::per_layer_step), toy.width_vision, toy.width_text),
            8 * one);
  const PerlConfig c = make_config({3, 7}, 4, Sharing::per_layer_step);
  const ProjectorSet phi(c, toy.width_vision, toy.width_text, 0);
  EXPECT_EQ(phi.parameter_count(), parameter_count(c, toy.width_vision, toy.width_text));
}

TEST(ProjectorParams, RankControlsCount) {
  EXPECT_EQ(projector_parameter_count(48, 1), (48u + 1) + (48 + 48) + 96);
  EXPECT_EQ(projector_parameter_count(48, 4), (4u * 48 + 4) + (48 * 4 + 48) + 96);
}

TEST(BlockEvalCount, ClosedForm) {
  EXPECT_EQ(block_eval_count(7, 4, 12), 32u);
  EXPECT_NEAR(block_eval_ratio(7, 4, 12), 2.6667, 1e-4);
  EXPECT_EQ(block_eval_count(12, 6, 12), 12u);
  EXPECT_EQ(block_eval_count(0, 0, 12), 12u);
  EXPECT_EQ(block_eval_count(0, 3, 12), 48u);
  EXPECT_THROW(block_eval_count(13, 1, 12), ContractError);
}

TEST(Refine, CountsBlockEvaluationsAndReadoutRows) {
  const EncoderConfig cfg = EncoderConfig::micro();
  const EncoderWeights w = EncoderWeights::initialize(cfg, 1);
  for (std::size_t depth = 0; depth <= cfg.layers; ++depth) {
    const PerlConfig pc = make_config({depth}, 3, Sharing::shared);
    const ProjectorSet phi(pc, cfg.width_vision, cfg.width_text, 2);
    SplitMix64 rng(depth);
    const TokenSequence text = fixtures::random_prompt(cfg, rng);
    const RefinementTrace t = refine(text, w, phi, pc);
    EXPECT_EQ(t.block_evaluations, block_eval_count(depth, 3, cfg.layers));
    ASSERT_EQ(t.readout_rows.size(), 4u);
    for (std::size_t k = 0; k <= 3; ++k) EXPECT_EQ(t.readout_rows[k], text.eos + k);
  }
}

TEST(Refine, StepZeroIsTheFrozenPass) {
  const EncoderConfig cfg = EncoderConfig::micro();
  const EncoderWeights w = EncoderWeights::initialize(cfg, 5);
  const PerlConfig pc = make_config({2}, 2, Sharing::shared);
  const ProjectorSet phi = fixtures::strong_projectors(pc, cfg, 3);
  SplitMix64 rng(8);
  for (Modality m : {Modality::vision, Modality::text}) {
    const TokenSequence x = fixtures::random_sequence(m, cfg, rng);
    const RefinementTrace t = refine(x, w, phi, pc);
    EXPECT_EQ(t.embeddings[0], frozen_forward(x, w).embedding);
    EXPECT_NE(t.embeddings[2], t.embeddings[0]);
  }
}

TEST(Refine, MatchesUnrolledReferenceAcrossSharingModes) {
  const EncoderConfig cfg = EncoderConfig::micro();
  const EncoderWeights w = EncoderWeights::initialize(cfg, 21);
  std::uint64_t seed = 0;
  for (Sharing s : {Sharing::shared, Sharing::per_step, Sharing::per_layer, Sharing::per_layer_step}) {
    for (std::size_t depth : {0u, 1u, 3u, 4u}) {
      const PerlConfig pc = make_config({depth}, 2, s);
      ++seed;
      expect_matches_reference(w, pc, fixtures::strong_projectors(pc, cfg, seed), seed);
    }
  }
}

TEST(MultiDepthRefine, MatchesUnrolledReference) {
  const EncoderConfig cfg = EncoderConfig::micro();
  const EncoderWeights w = EncoderWeights::initialize(cfg, 22);
  std::uint64_t seed = 100;
  for (Sharing s : {Sharing::shared, Sharing::per_layer, Sharing::per_layer_step}) {
    for (const std::vector<std::size_t>& depths :
         {std::vector<std::size_t>{1, 2}, std::vector<std::size_t>{0, 2, 4}, std::vector<std::size_t>{1, 3}}) {
      const PerlConfig pc = make_config(depths, 2, s);
      ++seed;
      expect_matches_reference(w, pc, fixtures::strong_projectors(pc, cfg, seed), seed);
    }
  }
}

TEST(MultiDepthRefine, SingleDepthEqualsRefine) {
  const EncoderConfig cfg = EncoderConfig::micro();
  const EncoderWeights w = EncoderWeights::initialize(cfg, 23);
  const PerlConfig pc = make_config({2}, 3, Sharing::per_step);
  const ProjectorSet phi = fixtures::strong_projectors(pc, cfg, 4);
  SplitMix64 rng(2);
  const TokenSequence x = fixtures::random_image(cfg, rng);
  EXPECT_EQ(multi_depth_refine(x, w, phi, pc).embeddings, refine(x, w, phi, pc).embeddings);
  EXPECT_THROW(refine(x, w, phi, make_config({1, 2}, 3, Sharing::per_step)), ContractError);
}

TEST(MultiDepthRefine, CountsEverySegmentPerStep) {
  const EncoderConfig cfg = EncoderConfig::micro();
  const EncoderWeights w = EncoderWeights::initialize(cfg, 24);
  const PerlConfig pc = make_config({1, 3}, 2, Sharing::shared);
  const ProjectorSet phi(pc, cfg.width_vision, cfg.width_text, 0);
  SplitMix64 rng(3);
  const RefinementTrace t = multi_depth_refine(fixtures::random_image(cfg, rng), w, phi, pc);
  EXPECT_EQ(t.block_evaluations, block_eval_count(1, 2, cfg.layers));
  // Both depths prepend k thoughts on step k.
  EXPECT_EQ(t.readout_rows, (std::vector<std::size_t>{0, 2, 4}));
}

TEST(PerlConfig, Validation) {
  EXPECT_THROW(make_config({}, 1, Sharing::shared).validate(12), ConfigError);
  EXPECT_THROW(make_config({13}, 1, Sharing::shared).validate(12), ConfigError);
  EXPECT_THROW(make_config({5, 5}, 1, Sharing::shared).validate(12), ConfigError);
  EXPECT_THROW(make_config({6, 5}, 1, Sharing::shared).validate(12), ConfigError);
  EXPECT_NO_THROW(make_config({12}, 1, Sharing::shared).validate(12));
  EXPECT_NO_THROW(make_config({0}, 1, Sharing::shared).validate(12));
  PerlConfig zero_rank;
  zero_rank.rank = 0;
  EXPECT_THROW(zero_rank.validate(12), ConfigError);
  EXPECT_EQ(parse_sharing("per_layer_step"), Sharing::per_layer_step);
  EXPECT_THROW(parse_sharing("per-layer"), ConfigError);
}

TEST(Refine, InjectionAtFullDepthOnlyMovesThroughFinalNorm) {
  const EncoderConfig cfg = EncoderConfig::micro();
  const EncoderWeights w = EncoderWeights::initialize(cfg, 25);
  const PerlConfig pc = make_config({cfg.layers}, 3, Sharing::shared);
  const ProjectorSet phi = fixtures::strong_projectors(pc, cfg, 6);
  SplitMix64 rng(5);
  const TokenSequence x = fixtures::random_image(cfg, rng);
  const RefinementTrace t = refine(x, w, phi, pc);
  EXPECT_EQ(t.block_evaluations, cfg.layers);
  // No block sees the thoughts, so the readout row never changes.
  for (const Tensor& e : t.embeddings) EXPECT_EQ(e, t.embeddings[0]);
}

TEST(Refine, InactiveModalityRunsFrozen) {
  const EncoderConfig cfg = EncoderConfig::micro();
  const EncoderWeights w = EncoderWeights::initialize(cfg, 26);
  PerlConfig pc = make_config({2}, 3, Sharing::shared);
  pc.text = false;
  const ProjectorSet phi = fixtures::strong_projectors(pc, cfg, 7);
  EXPECT_FALSE(phi.has(Modality::text));
  SplitMix64 rng(6);
  const TokenSequence prompt = fixtures::random_prompt(cfg, rng);
  const RefinementTrace t = refine(prompt, w, phi, pc);
  EXPECT_EQ(t.embeddings.size(), 1u);
  EXPECT_EQ(t.embeddings[0], frozen_forward(prompt, w).embedding);
}

TEST(ProjectorSet, SelectFollowsSharingGrid) {
  const PerlConfig pc = make_config({1, 3}, 4, Sharing::per_layer_step);
  const ProjectorSet phi(pc, 8, 8, 0);
  EXPECT_EQ(phi.instances(Modality::vision), 8u);
  EXPECT_EQ(phi.slot(Modality::vision, 1, 2), 1u * 4 + 2);
  const ProjectorSet shared(make_config({1, 3}, 4, Sharing::shared), 8, 8, 0);
  EXPECT_EQ(shared.slot(Modality::vision, 1, 3), 0u);
  const ProjectorSet per_step(make_config({1, 3}, 4, Sharing::per_step), 8, 8, 0);
  EXPECT_EQ(per_step.slot(Modality::text, 1, 3), 3u);
}

TEST(ProjectorSet, SaveLoadRoundTripAndMismatchDetection) {
  const EncoderConfig cfg = EncoderConfig::micro();
  const PerlConfig pc = make_config({1, 3}, 2, Sharing::per_layer);
  const ProjectorSet phi = fixtures::strong_projectors(pc, cfg, 8);
  const auto dir = fixtures::temp_dir("projector_roundtrip");
  phi.save(dir / "phi.perlw");
  const ProjectorSet back = ProjectorSet::load(dir / "phi.perlw");
  EXPECT_EQ(back.to_arrays().size(), phi.to_arrays().size());
  const auto a = phi.to_arrays(), b = back.to_arrays();
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].name, b[i].name);
    EXPECT_EQ(a[i].value, b[i].value);
  }
  EXPECT_NO_THROW(back.check_matches(pc, cfg));
  EXPECT_THROW(back.check_matches(make_config({1, 3}, 2, Sharing::per_layer_step), cfg), ConfigError);
  PerlConfig wider = pc;
  wider.rank = 2;
  EXPECT_THROW(back.check_matches(wider, cfg), ConfigError);
}
