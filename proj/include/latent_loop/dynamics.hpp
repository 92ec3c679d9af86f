#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

#include "latent_loop/autograd.hpp"
#include "latent_loop/backbone.hpp"
#include "latent_loop/errors.hpp"
#include "latent_loop/keyvalue.hpp"
#include "latent_loop/objective.hpp"
#include "latent_loop/perl.hpp"
#include "latent_loop/protocols.hpp"

namespace latent_loop {

struct StepMetrics {
  std::size_t step = 0;
  double accuracy = 0.0;       // fraction in [0, 1]
  double confidence = 0.0;     // mean softmax probability of the true class
  double brier = 0.0;          // mean sum_c (p_c - onehot_c)^2
  double jacobian_norm = 0.0;  // mean Frobenius norm, 0 when not supplied
};

inline constexpr double kKlFloor = 1e-12;

inline Tensor probabilities(const Tensor& logits) { return kernels::softmax_rows(logits); }

/// Per-step summary over examples. `step_logits[i][k]` holds example i's
/// logits at step k; `jacobian[i][k]` (optional) its Jacobian norm.
inline std::vector<StepMetrics> step_metrics(const std::vector<std::vector<Tensor>>& step_logits,
                                             const std::vector<std::size_t>& labels,
                                             const std::vector<std::vector<double>>* jacobian = nullptr) {
  if (step_logits.size() != labels.size()) {
    throw ContractError("step_metrics: " + std::to_string(step_logits.size()) + " traces for " +
                        std::to_string(labels.size()) + " labels");
  }
  if (step_logits.empty()) throw ContractError("step_metrics needs at least one example");
  const std::size_t steps = step_logits.front().size();
  for (const auto& t : step_logits)
    if (t.size() != steps) throw ContractError("every trace must carry the same number of steps");
  if (jacobian && jacobian->size() != labels.size()) throw ContractError("jacobian rows do not match examples");

  std::vector<StepMetrics> out(steps);
  const double n = static_cast<double>(labels.size());
  for (std::size_t k = 0; k < steps; ++k) {
    StepMetrics& m = out[k];
    m.step = k;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      const Tensor p = probabilities(step_logits[i][k]);
      if (labels[i] >= p.size()) throw IndexError("label outside logit vector");
      m.accuracy += argmax(step_logits[i][k]) == labels[i] ? 1.0 : 0.0;
      m.confidence += p[labels[i]];
      double brier = 0.0;
      for (std::size_t c = 0; c < p.size(); ++c) {
        const double diff = p[c] - (c == labels[i] ? 1.0 : 0.0);
        brier += diff * diff;
      }
      m.brier += brier;
      if (jacobian) m.jacobian_norm += (*jacobian)[i].at(k);
    }
    m.accuracy /= n;
    m.confidence /= n;
    m.brier /= n;
    m.jacobian_norm /= n;
  }
  return out;
}

/// KL(p_k || p_0) for every step, natural log, probabilities floored at 1e-12.
inline std::vector<double> kl_to_step0(const std::vector<Tensor>& step_logits) {
  if (step_logits.empty()) throw ContractError("kl_to_step0 needs at least the step-0 logits");
  const Tensor p0 = probabilities(step_logits.front());
  std::vector<double> out;
  for (const Tensor& logits : step_logits) {
    const Tensor pk = probabilities(logits);
    double kl = 0.0;
    for (std::size_t c = 0; c < pk.size(); ++c) {
      if (pk[c] == 0.0) continue;
      kl += pk[c] * (std::log(std::max(pk[c], kKlFloor)) - std::log(std::max(p0[c], kKlFloor)));
    }
    out.push_back(kl);
  }
  return out;
}

enum class Transition { correct_to_correct, wrong_to_correct, wrong_to_wrong, correct_to_wrong };

inline constexpr std::array<Transition, 4> kTransitions = {Transition::correct_to_correct, Transition::wrong_to_correct,
                                                           Transition::wrong_to_wrong, Transition::correct_to_wrong};

inline std::string_view transition_name(Transition t) {
  switch (t) {
    case Transition::correct_to_correct: return "correct-to-correct";
    case Transition::wrong_to_correct: return "wrong-to-correct";
    case Transition::wrong_to_wrong: return "wrong-to-wrong";
    case Transition::correct_to_wrong: return "correct-to-wrong";
  }
  return "";
}

struct TransitionRecord {
  std::size_t example = 0;
  std::vector<std::size_t> predictions;
  Transition group = Transition::correct_to_correct;
  std::vector<double> kl;
};

inline TransitionRecord make_transition_record(std::size_t example, const std::vector<Tensor>& step_logits,
                                               std::size_t label) {
  TransitionRecord r;
  r.example = example;
  for (const Tensor& l : step_logits) r.predictions.push_back(argmax(l));
  const bool first = r.predictions.front() == label;
  const bool last = r.predictions.back() == label;
  r.group = first ? (last ? Transition::correct_to_correct : Transition::correct_to_wrong)
                  : (last ? Transition::wrong_to_correct : Transition::wrong_to_wrong);
  r.kl = kl_to_step0(step_logits);
  return r;
}

struct TransitionGroup {
  Transition group = Transition::correct_to_correct;
  std::size_t count = 0;
  std::vector<double> mean_kl;  // empty when count == 0
};

/// Mean KL trajectory per transition group, always in kTransitions order.
inline std::vector<TransitionGroup> group_transitions(const std::vector<TransitionRecord>& records) {
  if (records.empty()) throw ContractError("group_transitions needs at least one record");
  const std::size_t steps = records.front().kl.size();
  std::vector<TransitionGroup> out;
  for (Transition t : kTransitions) {
    TransitionGroup g{t, 0, {}};
    std::vector<double> total(steps, 0.0);
    for (const auto& r : records) {
      if (r.group != t) continue;
      if (r.kl.size() != steps) throw ContractError("transition records disagree on step count");
      ++g.count;
      for (std::size_t k = 0; k < steps; ++k) total[k] += r.kl[k];
    }
    if (g.count > 0) {
      for (auto& v : total) v /= static_cast<double>(g.count);
      g.mean_kl = std::move(total);
    }
    out.push_back(std::move(g));
  }
  return out;
}

/// Gradient of one class logit with respect to the embedded image tokens
/// (T x d_v) at every step 0..K, where K + 1 = class_matrices.size().
/// Class embeddings enter as constants.
inline std::vector<Tensor> input_gradients(const PerlModel& model, const TokenSequence& image,
                                           const std::vector<Tensor>& class_matrices, std::size_t target) {
  if (image.modality != Modality::vision) throw ContractError("input gradients are defined for images only");
  if (class_matrices.empty()) throw ContractError("input gradients need at least the step-0 class matrix");
  const EncoderWeights& w = *model.weights;
  image.validate(w.config);
  Graph g;
  BoundTower tower = bind_frozen(g, w, Modality::vision);
  Var embedded = g.input(embed(image, tower).value(), "input");
  const ProjectorSet empty;
  BoundProjectors phi = bind_projectors(g, model.projectors ? *model.projectors : empty, Modality::vision, false);
  auto r = segmented_refine(embedded, image, tower, &phi, model.config.injection_depths, class_matrices.size() - 1);
  std::vector<Tensor> grads;
  for (std::size_t k = 0; k < class_matrices.size(); ++k) {
    Var logits = class_logits(r.embeddings[k], g.constant(class_matrices[k]), w.logit_scale());
    const std::size_t n = logits.value().size();
    if (target >= n) throw IndexError("target class outside logits");
    Tensor pick(Shape{n});
    pick[target] = 1.0;
    grads.push_back(g.backward(dot(logits, g.constant(std::move(pick)))).at("input"));
  }
  return grads;
}

inline double frobenius_norm(const Tensor& t) {
  double s = 0.0;
  for (double v : t.values()) s += v * v;
  return std::sqrt(s);
}

/// Frobenius norm of the target logit's gradient with respect to the input
/// embedding matrix.
inline double jacobian_norm(const Tensor& input_gradient) { return frobenius_norm(input_gradient); }

/// Per-patch saliency: |gradient| summed over the embedding width for each
/// patch row (CLS excluded), scaled so the largest entry is 1.
inline std::vector<double> contribution_map(const Tensor& input_gradient) {
  if (input_gradient.rank() != 2 || input_gradient.dim(0) < 2) {
    throw ContractError("contribution_map expects a CLS + patches gradient matrix");
  }
  std::vector<double> scores(input_gradient.dim(0) - 1, 0.0);
  for (std::size_t p = 0; p < scores.size(); ++p)
    for (double v : input_gradient.row(p + 1)) scores[p] += std::abs(v);
  const double mx = *std::max_element(scores.begin(), scores.end());
  if (mx > 0.0)
    for (auto& s : scores) s /= mx;
  return scores;
}

// ---------------------------------------------------------------------------
// Output files
// ---------------------------------------------------------------------------

inline constexpr const char* kMetricsHeader = "setting,dataset,step,accuracy,confidence,brier,jacobian_norm";
inline constexpr const char* kTransitionHeader = "setting,group,step,mean_kl,count";

inline void write_metrics_rows(std::ostream& out, std::string_view setting, std::string_view dataset,
                               const std::vector<StepMetrics>& rows) {
  for (const auto& m : rows) {
    out << setting << ',' << dataset << ',' << m.step << ',' << format_double(m.accuracy) << ','
        << format_double(m.confidence) << ',' << format_double(m.brier) << ',' << format_double(m.jacobian_norm)
        << '\n';
  }
}

inline void write_transition_rows(std::ostream& out, std::string_view setting,
                                  const std::vector<TransitionGroup>& groups, std::size_t steps) {
  for (const auto& g : groups) {
    for (std::size_t k = 0; k < steps; ++k) {
      out << setting << ',' << transition_name(g.group) << ',' << k << ','
          << (g.count ? format_double(g.mean_kl[k]) : std::string()) << ',' << g.count << '\n';
    }
  }
}

/// Plain PGM (P2): patches laid out row-major on a square-ish grid, 0..255.
inline std::string pgm_text(const std::vector<double>& scores) {
  const std::size_t n = scores.size();
  const std::size_t width = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(n))));
  const std::size_t height = (n + width - 1) / width;
  std::string out = "P2\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  for (std::size_t r = 0; r < height; ++r) {
    for (std::size_t c = 0; c < width; ++c) {
      const std::size_t i = r * width + c;
      const double s = i < n ? std::clamp(scores[i], 0.0, 1.0) : 0.0;
      if (c) out += ' ';
      out += std::to_string(static_cast<int>(std::lround(s * 255.0)));
    }
    out += '\n';
  }
  return out;
}

inline void write_pgm(const std::filesystem::path& path, const std::vector<double>& scores) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot write " + path.string());
  out << pgm_text(scores);
}

}  // namespace latent_loop
