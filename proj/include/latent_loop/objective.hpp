#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "latent_loop/autograd.hpp"
#include "latent_loop/backbone.hpp"
#include "latent_loop/errors.hpp"
#include "latent_loop/keyvalue.hpp"
#include "latent_loop/optim.hpp"
#include "latent_loop/perl.hpp"
#include "latent_loop/synthetic.hpp"

namespace latent_loop {

struct TrainConfig {
  double lr = 1e-4;
  std::size_t batch = 4;
  std::size_t epochs = 1;
  double lambda = 1.0;
  double weight_decay = 0.01;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(lambda >= 0.0)) throw ConfigError("anchor weight lambda must be non-negative");
    if (batch == 0) throw ConfigError("batch size must be at least 1");
    if (!(lr >= 0.0)) throw ConfigError("learning rate must be non-negative");
  }
};

/// Frozen backbone plus thought projectors and the refinement layout.
struct PerlModel {
  const EncoderWeights* weights = nullptr;
  const ProjectorSet* projectors = nullptr;
  PerlConfig config;
};

/// tau * T v for unit-norm v (d) and class rows T (C x d).
inline Var class_logits(Var image_embedding, Var class_embeddings, double tau) {
  if (class_embeddings.value().rank() != 2 || class_embeddings.value().dim(1) != image_embedding.value().size()) {
    throw DimensionError("class_logits: image embedding " + shape_string(image_embedding.shape()) +
                         " against class matrix " + shape_string(class_embeddings.shape()));
  }
  return scale(matvec(class_embeddings, image_embedding), tau);
}

inline Tensor class_logits(const Tensor& image_embedding, const Tensor& class_embeddings, double tau) {
  Graph g;
  return class_logits(g.constant(image_embedding), g.constant(class_embeddings), tau).value();
}

struct Example {
  const TokenSequence* tokens = nullptr;
  std::size_t label = 0;  // index into the candidate class list
};

/// Loss nodes for one batch.
struct LossTerms {
  Var total;
  Var cls;
  Var anchor;  // lambda (1 - mean cos(v0, vK))
  Var mean_cos;
  std::vector<Var> logits;  // per example, at the final step
};

struct LossValues {
  double total = 0.0;
  double cls = 0.0;
  double anchor = 0.0;
  double mean_cos = 0.0;
};

/// Builds  mean_i CE(tau v_i^K (T^K)^T, y_i) + lambda (1 - mean_i cos(v_i^0, v_i^K)).
///
/// The class prompts are refined once for the whole batch. Step-0
/// embeddings depend only on frozen weights, so they carry no gradient.
inline LossTerms build_perl_loss(Graph& g, std::span<const Example> batch, std::span<const TokenSequence* const> prompts,
                                 const EncoderWeights& w, const BoundProjectors& vision_phi,
                                 const BoundProjectors& text_phi, const PerlConfig& cfg, double lambda) {
  if (batch.empty()) throw ContractError("perl_loss needs a non-empty batch");
  if (prompts.empty()) throw ContractError("perl_loss needs at least one candidate class");
  BoundTower vis = bind_frozen(g, w, Modality::vision);
  BoundTower txt = bind_frozen(g, w, Modality::text);
  std::vector<Var> class_rows;
  for (const TokenSequence* p : prompts) {
    auto r = segmented_refine(embed(*p, txt), *p, txt, &text_phi, cfg.injection_depths, cfg.steps_for(Modality::text));
    class_rows.push_back(r.embeddings.back());
  }
  Var classes = concat_rows(class_rows);
  LossTerms out;
  std::vector<Var> ce, cos;
  for (const Example& ex : batch) {
    if (ex.label >= prompts.size()) throw IndexError("example label outside candidate classes");
    auto r = segmented_refine(embed(*ex.tokens, vis), *ex.tokens, vis, &vision_phi, cfg.injection_depths,
                              cfg.steps_for(Modality::vision));
    Var logits = class_logits(r.embeddings.back(), classes, w.logit_scale());
    out.logits.push_back(logits);
    ce.push_back(cross_entropy(logits, ex.label));
    cos.push_back(cosine_similarity(r.embeddings.front(), r.embeddings.back()));
  }
  out.cls = mean(concat_rows(ce));
  out.mean_cos = mean(concat_rows(cos));
  out.anchor = scale(add_constant(scale(out.mean_cos, -1.0), 1.0), lambda);
  out.total = add(out.cls, out.anchor);
  return out;
}

inline LossValues values_of(const LossTerms& t) {
  return {t.total.value().item(), t.cls.value().item(), t.anchor.value().item(), t.mean_cos.value().item()};
}

/// Loss value and components for a batch, without gradients.
inline LossValues perl_loss(std::span<const Example> batch, std::span<const TokenSequence* const> prompts,
                            const PerlModel& model, double lambda) {
  Graph g;
  auto vphi = bind_projectors(g, *model.projectors, Modality::vision, false);
  auto tphi = bind_projectors(g, *model.projectors, Modality::text, false);
  return values_of(build_perl_loss(g, batch, prompts, *model.weights, vphi, tphi, model.config, lambda));
}

struct TrainLogRow {
  std::size_t step = 0;
  LossValues loss;
};

struct TrainResult {
  ProjectorSet projectors;
  std::vector<TrainLogRow> log;
};

/// Fast adaptation on the support set: seeded Fisher-Yates order, batches
/// of `batch` (last partial batch kept), one AdamW step per batch.
inline TrainResult train_few_shot(const FewShotTask& task, const EncoderWeights& w, const PerlConfig& cfg,
                                  const TrainConfig& tc) {
  tc.validate();
  cfg.validate(w.config.layers);
  if (task.support.empty()) throw ContractError("support set is empty");
  for (const auto& s : task.support) {
    if (!task.is_base(s.label)) throw ContractError("support set contains a non-base class");
  }
  const std::uint64_t before = w.fingerprint();

  TrainResult result{ProjectorSet(cfg, w.config.width_vision, w.config.width_text, tc.seed), {}};
  std::vector<ParamSlot> slots = result.projectors.slots();
  OptimizerState state;
  const AdamWConfig opt{tc.lr, 0.9, 0.999, 1e-8, tc.weight_decay};

  std::vector<const TokenSequence*> prompts;
  for (std::size_t c : task.base) prompts.push_back(&task.prompts.at(c));
  auto label_index = [&](std::size_t label) {
    return static_cast<std::size_t>(std::find(task.base.begin(), task.base.end(), label) - task.base.begin());
  };

  auto rng = SplitMix64::stream(tc.seed, "train.shuffle");
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < tc.epochs; ++epoch) {
    std::vector<std::size_t> order(task.support.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    shuffle(order, rng);
    for (std::size_t start = 0; start < order.size(); start += tc.batch) {
      std::vector<Example> batch;
      for (std::size_t i = start; i < std::min(order.size(), start + tc.batch); ++i) {
        const auto& s = task.support[order[i]];
        batch.push_back({&s.tokens, label_index(s.label)});
      }
      Graph g;
      auto vphi = bind_projectors(g, result.projectors, Modality::vision, true);
      auto tphi = bind_projectors(g, result.projectors, Modality::text, true);
      LossTerms terms = build_perl_loss(g, batch, prompts, w, vphi, tphi, cfg, tc.lambda);
      GradientMap grads = g.backward(terms.total);
      result.log.push_back({++step, values_of(terms)});
      if (!slots.empty()) adamw_step(slots, grads, state, opt);
    }
  }
  if (w.fingerprint() != before) throw ContractError("frozen backbone changed during adaptation");
  return result;
}

inline constexpr const char* kTrainLogHeader = "step,loss_total,loss_cls,loss_anchor,mean_cos_v0_vK";

inline void write_train_log(const std::filesystem::path& path, const std::vector<TrainLogRow>& rows) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot write " + path.string());
  out << kTrainLogHeader << '\n';
  for (const auto& r : rows) {
    out << r.step << ',' << format_double(r.loss.total) << ',' << format_double(r.loss.cls) << ','
        << format_double(r.loss.anchor) << ',' << format_double(r.loss.mean_cos) << '\n';
  }
}

}  // namespace latent_loop
