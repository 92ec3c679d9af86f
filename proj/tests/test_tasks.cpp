#include <gtest/gtest.h>

#include <algorithm>
#include <set>

#include "fixtures.hpp"
#include "latent_loop/protocols.hpp"
#include "latent_loop/synthetic.hpp"

using namespace latent_loop;

namespace {

SyntheticTaskSpec micro_spec(std::uint64_t seed = 0) {
  SyntheticTaskSpec s;
  s.classes = 6;
  s.latent_dim = 4;
  s.codebook = EncoderConfig::micro().codebook;
  s.shots = 2;
  s.query_per_class = 3;
  s.seed = seed;
  return s;
}

std::size_t brute_force_argmax(const Tensor& v) {
  std::size_t best = 0;
  double best_value = v[0];
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (v[i] > best_value) {
      best_value = v[i];
      best = i;
    }
  }
  return best;
}

}  // namespace

TEST(GenerateTask, SameSeedSameTask) {
  const EncoderConfig enc = EncoderConfig::micro();
  const FewShotTask a = generate_task(micro_spec(3), enc);
  const FewShotTask b = generate_task(micro_spec(3), enc);
  const FewShotTask c = generate_task(micro_spec(4), enc);
  EXPECT_EQ(a.prototypes, b.prototypes);
  ASSERT_EQ(a.query.size(), b.query.size());
  for (std::size_t i = 0; i < a.query.size(); ++i) EXPECT_EQ(a.query[i].tokens.ids, b.query[i].tokens.ids);
  EXPECT_NE(a.prototypes, c.prototypes);
}

TEST(GenerateTask, SizesAndLabels) {
  const EncoderConfig enc = EncoderConfig::micro();
  const FewShotTask t = generate_task(micro_spec(), enc);
  EXPECT_EQ(t.classes(), 6u);
  EXPECT_EQ(t.support.size(), 12u);
  EXPECT_EQ(t.query.size(), 18u);
  for (const auto& q : t.query) {
    EXPECT_LT(q.label, 6u);
    EXPECT_NO_THROW(q.tokens.validate(enc));
  }
  for (const auto& p : t.prompts) EXPECT_NO_THROW(p.validate(enc));
}

TEST(GenerateTask, ZeroNoiseGivesIdenticalImagesPerClass) {
  const EncoderConfig enc = EncoderConfig::micro();
  SyntheticTaskSpec spec = micro_spec();
  spec.noise = 0.0;
  const FewShotTask t = generate_task(spec, enc);
  for (const auto& q : t.query) {
    for (const auto& s : t.support) {
      if (s.label == q.label) {
        EXPECT_EQ(s.tokens.ids, q.tokens.ids);
      }
    }
  }
}

TEST(GenerateTask, NoiseAddsVariation) {
  const EncoderConfig enc = EncoderConfig::micro();
  SyntheticTaskSpec spec = micro_spec();
  spec.noise = 2.0;
  spec.query_per_class = 20;
  const FewShotTask t = generate_task(spec, enc);
  std::set<std::vector<std::size_t>> distinct;
  for (const auto& q : t.query)
    if (q.label == 0) distinct.insert(q.tokens.ids);
  EXPECT_GT(distinct.size(), 1u);
}

TEST(GenerateTask, RejectsIncompatibleVocabulary) {
  EncoderConfig enc = EncoderConfig::micro();
  SyntheticTaskSpec spec = micro_spec();
  spec.codebook = enc.codebook + 2;
  EXPECT_THROW(generate_task(spec, enc), ConfigError);
  enc.codebook = 2;
  enc.text_length = 5;
  spec.codebook = 2;
  EXPECT_THROW(generate_task(spec, enc), ConfigError);
  spec = micro_spec();
  spec.classes = 1;
  EXPECT_THROW(generate_task(spec, EncoderConfig::micro()), ConfigError);
}

TEST(GenerateTask, ShiftMovesPrototypes) {
  const EncoderConfig enc = EncoderConfig::micro();
  SyntheticTaskSpec spec = micro_spec();
  const FewShotTask plain = generate_task(spec, enc);
  spec.shift_prototype = 0.5;
  const FewShotTask shifted = generate_task(spec, enc);
  EXPECT_NE(plain.prototypes, shifted.prototypes);
  EXPECT_LT(max_abs_diff(plain.prototypes, shifted.prototypes), 5.0);
}

TEST(SplitBaseNovel, PartitionsClassesAndFiltersSupport) {
  const EncoderConfig enc = EncoderConfig::micro();
  SyntheticTaskSpec spec = micro_spec();
  spec.classes = 10;
  const FewShotTask t = split_base_novel(generate_task(spec, enc), 0.5, 1);
  EXPECT_EQ(t.base.size(), 5u);
  EXPECT_EQ(t.novel.size(), 5u);
  std::set<std::size_t> all(t.base.begin(), t.base.end());
  all.insert(t.novel.begin(), t.novel.end());
  EXPECT_EQ(all.size(), 10u);
  EXPECT_TRUE(std::is_sorted(t.base.begin(), t.base.end()));
  for (const auto& s : t.support) EXPECT_TRUE(t.is_base(s.label));
  EXPECT_EQ(t.support.size(), 5u * spec.shots);
  EXPECT_EQ(t.query.size(), 10u * spec.query_per_class);
}

TEST(SplitBaseNovel, TwoClassesSplitOneAndOne) {
  const EncoderConfig enc = EncoderConfig::micro();
  SyntheticTaskSpec spec = micro_spec();
  spec.classes = 2;
  const FewShotTask t = split_base_novel(generate_task(spec, enc), 0.5, 0);
  EXPECT_EQ(t.base.size(), 1u);
  EXPECT_EQ(t.novel.size(), 1u);
  EXPECT_THROW(split_base_novel(generate_task(spec, enc), 0.0, 0), ConfigError);
}

TEST(SplitBaseNovel, SeedChangesPartition) {
  const EncoderConfig enc = EncoderConfig::micro();
  SyntheticTaskSpec spec = micro_spec();
  spec.classes = 16;
  const FewShotTask base = generate_task(spec, enc);
  std::set<std::vector<std::size_t>> partitions;
  for (std::uint64_t seed = 0; seed < 5; ++seed) partitions.insert(split_base_novel(base, 0.5, seed).base);
  EXPECT_GT(partitions.size(), 1u);
}

TEST(HarmonicMean, ValuesAndBounds) {
  EXPECT_DOUBLE_EQ(harmonic_mean(80.0, 80.0), 80.0);
  EXPECT_DOUBLE_EQ(harmonic_mean(60.0, 90.0), 72.0);
  EXPECT_DOUBLE_EQ(harmonic_mean(100.0, 100.0), 100.0);
  for (double a : {1.0, 25.0, 50.0, 99.0}) {
    for (double b : {2.0, 40.0, 75.0}) {
      const double h = harmonic_mean(a, b);
      EXPECT_LE(h, (a + b) / 2.0 + 1e-12);
      EXPECT_GE(h, std::min(a, b) - 1e-12);
    }
  }
  EXPECT_THROW(harmonic_mean(0.0, 50.0), DomainError);
  EXPECT_THROW(harmonic_mean(50.0, -1.0), DomainError);
}

TEST(Evaluate, AccuracyMatchesBruteForceArgmax) {
  const EncoderConfig enc = EncoderConfig::micro();
  const EncoderWeights w = EncoderWeights::initialize(enc, 3);
  const FewShotTask t = split_base_novel(generate_task(micro_spec(2), enc), 0.5, 2);
  PerlConfig cfg;
  cfg.injection_depths = {2};
  cfg.steps = 2;
  const ProjectorSet phi = fixtures::strong_projectors(cfg, enc, 9);
  const PerlModel model{&w, &phi, cfg};
  for (Side side : {Side::base, Side::novel, Side::all}) {
    const EvalResult r = evaluate(t, side, model);
    const auto classes = side_classes(t, side);
    std::size_t correct = 0, count = 0;
    for (const auto& q : t.query) {
      if (std::find(classes.begin(), classes.end(), q.label) == classes.end()) continue;
      std::vector<double> scores;
      const Tensor v = refine(q.tokens, w, phi, cfg).embeddings.back();
      for (std::size_t c : classes) {
        const Tensor tc = refine(t.prompts[c], w, phi, cfg).embeddings.back();
        double s = 0.0;
        for (std::size_t j = 0; j < v.size(); ++j) s += v[j] * tc[j];
        scores.push_back(s);
      }
      correct += classes[brute_force_argmax(Tensor::vector(scores))] == q.label;
      ++count;
    }
    EXPECT_DOUBLE_EQ(r.accuracy, 100.0 * static_cast<double>(correct) / static_cast<double>(count))
        << side_name(side);
    EXPECT_EQ(r.traces.size(), count);
    for (const auto& tr : r.traces) EXPECT_EQ(tr.logits.size(), cfg.steps + 1);
  }
}

TEST(Evaluate, ZeroShotOverrideIgnoresProjectors) {
  const EncoderConfig enc = EncoderConfig::micro();
  const EncoderWeights w = EncoderWeights::initialize(enc, 4);
  const FewShotTask t = split_base_novel(generate_task(micro_spec(3), enc), 0.5, 3);
  PerlConfig cfg;
  cfg.injection_depths = {2};
  const ProjectorSet phi = fixtures::strong_projectors(cfg, enc, 1);
  const PerlModel with{&w, &phi, cfg};
  const PerlModel without{&w, nullptr, cfg};
  EXPECT_EQ(evaluate(t, Side::all, with, 0).accuracy, evaluate(t, Side::all, without, 0).accuracy);
}

TEST(Evaluate, SingleCandidateIsAlwaysCorrect) {
  const EncoderConfig enc = EncoderConfig::micro();
  const EncoderWeights w = EncoderWeights::initialize(enc, 5);
  SyntheticTaskSpec spec = micro_spec(4);
  spec.classes = 2;
  const FewShotTask t = split_base_novel(generate_task(spec, enc), 0.5, 0);
  PerlConfig cfg;
  cfg.injection_depths = {2};
  cfg.steps = 0;
  const PerlModel model{&w, nullptr, cfg};
  EXPECT_DOUBLE_EQ(evaluate(t, Side::base, model).accuracy, 100.0);
  EXPECT_DOUBLE_EQ(base_to_novel(t, model).hm, 100.0);
}

TEST(Evaluate, EmptyQuerySetIsAContractError) {
  const EncoderConfig enc = EncoderConfig::micro();
  const EncoderWeights w = EncoderWeights::initialize(enc, 6);
  FewShotTask t = split_base_novel(generate_task(micro_spec(5), enc), 0.5, 0);
  t.query.clear();
  PerlConfig cfg;
  cfg.injection_depths = {2};
  cfg.steps = 0;
  EXPECT_THROW(evaluate(t, Side::base, PerlModel{&w, nullptr, cfg}), ContractError);
  FewShotTask whole = generate_task(micro_spec(5), enc);
  EXPECT_THROW(evaluate(whole, Side::novel, PerlModel{&w, nullptr, cfg}), ContractError);
}

TEST(CrossTask, TargetEqualToSourceReproducesSourceAccuracy) {
  const EncoderConfig enc = EncoderConfig::micro();
  const EncoderWeights w = EncoderWeights::initialize(enc, 7);
  PerlConfig cfg;
  cfg.injection_depths = {2};
  cfg.steps = 1;
  TrainConfig tc;
  tc.lr = 1e-2;
  const SyntheticTaskSpec src = micro_spec(6);
  const CrossTaskResult r = cross_task_protocol(src, {src, src}, w, cfg, tc);
  ASSERT_EQ(r.targets.size(), 2u);
  EXPECT_DOUBLE_EQ(r.targets[0], r.source);
  EXPECT_DOUBLE_EQ(r.mean_target, r.source);
  EXPECT_THROW(cross_task_protocol(src, {}, w, cfg, tc), ContractError);
}

TEST(TaskFiles, SaveLoadRoundTrip) {
  const EncoderConfig enc = EncoderConfig::micro();
  const FewShotTask t = split_base_novel(generate_task(micro_spec(8), enc), 0.5, 8);
  const auto dir = fixtures::temp_dir("task_roundtrip");
  save_task(t, dir / "task");
  const FewShotTask back = load_task(dir / "task");
  EXPECT_EQ(back.base, t.base);
  EXPECT_EQ(back.novel, t.novel);
  EXPECT_EQ(back.prototypes, t.prototypes);
  ASSERT_EQ(back.support.size(), t.support.size());
  ASSERT_EQ(back.query.size(), t.query.size());
  for (std::size_t i = 0; i < t.query.size(); ++i) {
    EXPECT_EQ(back.query[i].tokens.ids, t.query[i].tokens.ids);
    EXPECT_EQ(back.query[i].label, t.query[i].label);
  }
  for (std::size_t c = 0; c < t.classes(); ++c) {
    EXPECT_EQ(back.prompts[c].ids, t.prompts[c].ids);
    EXPECT_EQ(back.prompts[c].eos, t.prompts[c].eos);
  }
  EXPECT_EQ(back.spec.seed, t.spec.seed);
  EXPECT_THROW(load_task(dir / "absent"), InputError);
}
