#pragma once

#include <cstdint>
#include <vector>

#include "latent_loop/autograd.hpp"
#include "latent_loop/backbone.hpp"
#include "latent_loop/optim.hpp"
#include "latent_loop/synthetic.hpp"

namespace latent_loop {

struct PretrainConfig {
  std::size_t steps = 150;
  std::size_t batch = 16;
  double lr = 2e-3;
};

/// Symmetric InfoNCE over generator-sampled image/prompt pairs, logits
/// scaled by the frozen logit scale. Every pair uses a freshly sampled
/// prototype, so no task class is seen during pretraining. steps == 0
/// returns the seeded initialization.
inline EncoderWeights pretrain_backbone(const SyntheticTaskSpec& generator, const EncoderConfig& cfg,
                                        const PretrainConfig& pc, std::uint64_t seed,
                                        std::vector<double>* loss_log = nullptr) {
  synthetic::check_compatible(generator, cfg);
  EncoderWeights w = EncoderWeights::initialize(cfg, seed);
  if (pc.steps == 0) return w;
  if (pc.batch < 2) throw ConfigError("contrastive pretraining needs a batch of at least 2");
  const Codebook book(generator.world_seed, generator.codebook, generator.latent_dim);
  auto rng = SplitMix64::stream(seed, "pretrain.pairs");
  std::vector<ParamSlot> slots;
  w.for_each([&](const std::string& name, Tensor& t) { slots.push_back({name, &t}); });
  OptimizerState state;
  const AdamWConfig opt{pc.lr, 0.9, 0.999, 1e-8, 0.0};
  std::vector<double> proto(generator.latent_dim);
  for (std::size_t step = 0; step < pc.steps; ++step) {
    Graph g;
    BoundTower vis = bind_trainable(g, w, Modality::vision);
    BoundTower txt = bind_trainable(g, w, Modality::text);
    std::vector<Var> image_emb, text_emb;
    for (std::size_t b = 0; b < pc.batch; ++b) {
      for (auto& v : proto) v = rng.normal();
      const TokenSequence img = synthetic::image(book, proto, generator.effective_noise(), cfg, rng);
      const TokenSequence txt_seq = synthetic::prompt(book, proto, cfg);
      BlockCounter counter;
      image_emb.push_back(project(pool(run_blocks(embed(img, vis), vis, 0, cfg.layers, counter), img, 0, vis), vis));
      text_emb.push_back(
          project(pool(run_blocks(embed(txt_seq, txt), txt, 0, cfg.layers, counter), txt_seq, 0, txt), txt));
    }
    Var logits = scale(matmul(concat_rows(image_emb), transpose(concat_rows(text_emb))), cfg.logit_scale);
    Var logits_t = transpose(logits);
    std::vector<Var> terms;
    for (std::size_t b = 0; b < pc.batch; ++b) {
      terms.push_back(cross_entropy(row(logits, b), b));
      terms.push_back(cross_entropy(row(logits_t, b), b));
    }
    Var loss = mean(concat_rows(terms));
    if (loss_log) loss_log->push_back(loss.value().item());
    adamw_step(slots, g.backward(loss), state, opt);
  }
  return w;
}

}  // namespace latent_loop
