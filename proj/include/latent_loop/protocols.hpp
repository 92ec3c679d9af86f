#pragma once

#include <algorithm>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "latent_loop/objective.hpp"
#include "latent_loop/perl.hpp"
#include "latent_loop/synthetic.hpp"

namespace latent_loop {

enum class Side { base, novel, all };

inline std::string_view side_name(Side s) {
  switch (s) {
    case Side::base: return "base";
    case Side::novel: return "novel";
    case Side::all: return "all";
  }
  return "all";
}

inline std::vector<std::size_t> side_classes(const FewShotTask& task, Side side) {
  switch (side) {
    case Side::base: return task.base;
    case Side::novel: return task.novel;
    case Side::all: {
      std::vector<std::size_t> all(task.classes());
      std::iota(all.begin(), all.end(), std::size_t{0});
      return all;
    }
  }
  return {};
}

struct EvalResult {
  double accuracy = 0.0;  // percent
  std::vector<std::size_t> candidates;
  std::vector<std::size_t> labels;   // index into candidates
  std::vector<RefinementTrace> traces;  // image traces, logits per step filled
  std::vector<RefinementTrace> class_traces;
};

inline std::size_t argmax(const Tensor& v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

// Embedding used at step k by a trace that may have stopped earlier.
inline const Tensor& embedding_at(const RefinementTrace& t, std::size_t k) {
  return t.embeddings[std::min(k, t.embeddings.size() - 1)];
}

inline Tensor class_matrix_at(const std::vector<RefinementTrace>& class_traces, std::size_t k) {
  const std::size_t d = class_traces.front().embeddings.front().size();
  Tensor m({class_traces.size(), d});
  for (std::size_t c = 0; c < class_traces.size(); ++c) {
    const Tensor& e = embedding_at(class_traces[c], k);
    std::copy(e.values().begin(), e.values().end(), m.row(c).begin());
  }
  return m;
}

/// Accuracy on one side of the task with candidate classes restricted to
/// that side. `steps` overrides K (0 gives the frozen zero-shot model).
inline EvalResult evaluate(const FewShotTask& task, Side side, const PerlModel& model,
                           std::optional<std::size_t> steps = std::nullopt) {
  PerlConfig cfg = model.config;
  if (steps) cfg.steps = *steps;
  EvalResult r;
  r.candidates = side_classes(task, side);
  if (r.candidates.empty()) throw ContractError("no classes on the " + std::string(side_name(side)) + " side");
  const auto queries = task.query_for(r.candidates);
  if (queries.empty()) throw ContractError("empty query set on the " + std::string(side_name(side)) + " side");
  const ProjectorSet empty;
  const ProjectorSet& params = model.projectors ? *model.projectors : empty;

  for (std::size_t c : r.candidates) r.class_traces.push_back(run_refinement(task.prompts.at(c), *model.weights, params, cfg));
  const std::size_t total_steps = cfg.steps;
  std::vector<Tensor> class_mats;
  for (std::size_t k = 0; k <= total_steps; ++k) class_mats.push_back(class_matrix_at(r.class_traces, k));

  std::size_t correct = 0;
  for (const auto& q : queries) {
    RefinementTrace t = run_refinement(q.tokens, *model.weights, params, cfg);
    for (std::size_t k = 0; k <= total_steps; ++k)
      t.logits.push_back(class_logits(embedding_at(t, k), class_mats[k], model.weights->logit_scale()));
    const std::size_t label =
        static_cast<std::size_t>(std::find(r.candidates.begin(), r.candidates.end(), q.label) - r.candidates.begin());
    correct += argmax(t.logits.back()) == label;
    r.labels.push_back(label);
    r.traces.push_back(std::move(t));
  }
  r.accuracy = 100.0 * static_cast<double>(correct) / static_cast<double>(queries.size());
  return r;
}

struct BaseNovelResult {
  double base = 0.0;
  double novel = 0.0;
  double hm = 0.0;
};

inline BaseNovelResult base_to_novel(const FewShotTask& task, const PerlModel& model,
                                     std::optional<std::size_t> steps = std::nullopt) {
  BaseNovelResult r;
  r.base = evaluate(task, Side::base, model, steps).accuracy;
  r.novel = evaluate(task, Side::novel, model, steps).accuracy;
  r.hm = (r.base > 0.0 && r.novel > 0.0) ? harmonic_mean(r.base, r.novel) : 0.0;
  return r;
}

struct CrossTaskResult {
  double source = 0.0;
  std::vector<double> targets;
  double mean_target = 0.0;
  ProjectorSet projectors;
};

/// Adapt once on every class of the source task, then evaluate the same
/// projectors on each target task without further training.
inline CrossTaskResult cross_task_protocol(const SyntheticTaskSpec& source, const std::vector<SyntheticTaskSpec>& targets,
                                           const EncoderWeights& w, const PerlConfig& cfg, const TrainConfig& tc) {
  if (targets.empty()) throw ContractError("cross-task protocol needs at least one target task");
  const FewShotTask src = generate_task(source, w.config);
  CrossTaskResult r;
  r.projectors = train_few_shot(src, w, cfg, tc).projectors;
  const PerlModel model{&w, &r.projectors, cfg};
  r.source = evaluate(src, Side::all, model).accuracy;
  double total = 0.0;
  for (const auto& spec : targets) {
    r.targets.push_back(evaluate(generate_task(spec, w.config), Side::all, model).accuracy);
    total += r.targets.back();
  }
  r.mean_target = total / static_cast<double>(r.targets.size());
  return r;
}

}  // namespace latent_loop
