#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "latent_loop/autograd.hpp"
#include "latent_loop/backbone.hpp"
#include "latent_loop/objective.hpp"
#include "latent_loop/perl.hpp"
#include "latent_loop/synthetic.hpp"

namespace latent_loop {

struct GradcheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  std::string fault;  // op whose analytic gradient gets corrupted; empty for none
  std::uint64_t seed = 0;
};

struct GradcheckCase {
  std::string op;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  bool passed = true;
};

struct GradcheckReport {
  std::vector<GradcheckCase> cases;

  bool passed() const {
    return std::all_of(cases.begin(), cases.end(), [](const GradcheckCase& c) { return c.passed; });
  }
};

inline const std::vector<std::string>& gradcheck_ops() {
  static const std::vector<std::string> ops = {"matmul",        "layer_norm", "gelu",    "softmax",  "attention",
                                               "cross_entropy", "cosine",     "thought", "perl_loss"};
  return ops;
}

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
}

namespace detail {

inline void corrupt(std::vector<Tensor>& grads) {
  for (auto& g : grads)
    for (auto& v : g.values()) v = v * 1.01 + 1e-3;
}

// Scalar objective over a list of tensors; the builder sees every tensor as a
// graph node and returns a scalar.
using ScalarBuilder = std::function<Var(Graph&, const std::vector<Var>&)>;

inline GradcheckCase check_builder(const std::string& op, std::vector<Tensor> inputs, const ScalarBuilder& build,
                                   const GradcheckOptions& opts) {
  std::vector<Tensor> analytic;
  {
    Graph g;
    std::vector<Var> vars;
    for (std::size_t i = 0; i < inputs.size(); ++i) vars.push_back(g.input(inputs[i], "x" + std::to_string(i)));
    GradientMap grads = g.backward(build(g, vars));
    for (std::size_t i = 0; i < inputs.size(); ++i) analytic.push_back(grads.at("x" + std::to_string(i)));
  }
  if (opts.fault == op) corrupt(analytic);

  auto evaluate = [&] {
    Graph g;
    std::vector<Var> vars;
    for (const auto& t : inputs) vars.push_back(g.constant_ref(t));
    return build(g, vars).value().item();
  };
  GradcheckCase c{op, 0.0, 0, true};
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (std::size_t j = 0; j < inputs[i].size(); ++j) {
      const double saved = inputs[i][j];
      inputs[i][j] = saved + opts.step;
      const double up = evaluate();
      inputs[i][j] = saved - opts.step;
      const double down = evaluate();
      inputs[i][j] = saved;
      c.max_rel_error = std::max(c.max_rel_error, relative_error(analytic[i][j], (up - down) / (2.0 * opts.step)));
      ++c.checked;
    }
  }
  c.passed = c.max_rel_error <= opts.tolerance;
  return c;
}

// Weighted sum with fixed random weights, so every output entry matters.
inline Var project_to_scalar(Graph& g, Var y, SplitMix64& rng) {
  return sum(mul(y, g.constant(Tensor::randn(y.shape(), rng))));
}

inline GradcheckCase check_perl_loss(const GradcheckOptions& opts) {
  const EncoderConfig ec = EncoderConfig::micro();
  const EncoderWeights w = EncoderWeights::initialize(ec, opts.seed);
  SyntheticTaskSpec spec;
  spec.classes = 3;
  spec.codebook = ec.codebook;
  spec.shots = 1;
  spec.query_per_class = 1;
  spec.seed = opts.seed;
  const FewShotTask task = generate_task(spec, ec);

  PerlConfig cfg;
  cfg.injection_depths = {1, 2};
  cfg.steps = 2;
  cfg.sharing = Sharing::per_layer_step;
  ProjectorSet phi(cfg, ec.width_vision, ec.width_text, opts.seed);
  // Larger weights than the default init so every path carries signal.
  auto rng = SplitMix64::stream(opts.seed, "gradcheck.perl_loss");
  std::vector<ParamSlot> slots = phi.slots();
  for (auto& s : slots)
    for (auto& v : s.value->values()) v += 0.3 * rng.normal();

  std::vector<Example> batch;
  for (const auto& s : task.support) batch.push_back({&s.tokens, s.label});
  std::vector<const TokenSequence*> prompts;
  for (const auto& p : task.prompts) prompts.push_back(&p);
  const double lambda = 0.7;

  std::vector<Tensor> analytic;
  {
    Graph g;
    auto vphi = bind_projectors(g, phi, Modality::vision, true);
    auto tphi = bind_projectors(g, phi, Modality::text, true);
    GradientMap grads = g.backward(build_perl_loss(g, batch, prompts, w, vphi, tphi, cfg, lambda).total);
    for (const auto& s : slots) analytic.push_back(grads.at(s.name));
  }
  if (opts.fault == "perl_loss") corrupt(analytic);

  const PerlModel model{&w, &phi, cfg};
  GradcheckCase c{"perl_loss", 0.0, 0, true};
  for (std::size_t i = 0; i < slots.size(); ++i) {
    Tensor& t = *slots[i].value;
    for (std::size_t j = 0; j < t.size(); ++j) {
      const double saved = t[j];
      t[j] = saved + opts.step;
      const double up = perl_loss(batch, prompts, model, lambda).total;
      t[j] = saved - opts.step;
      const double down = perl_loss(batch, prompts, model, lambda).total;
      t[j] = saved;
      c.max_rel_error = std::max(c.max_rel_error, relative_error(analytic[i][j], (up - down) / (2.0 * opts.step)));
      ++c.checked;
    }
  }
  c.passed = c.max_rel_error <= opts.tolerance;
  return c;
}

}  // namespace detail

/// Central finite differences against reverse-mode gradients for one op.
inline GradcheckCase gradcheck_op(const std::string& op, const GradcheckOptions& opts = {}) {
  auto rng = SplitMix64::stream(opts.seed, "gradcheck." + op);
  auto randn = [&](Shape s, double sd = 1.0) { return Tensor::randn(std::move(s), rng, sd); };
  auto weights = SplitMix64::stream(opts.seed, "gradcheck.weights." + op);

  if (op == "matmul") {
    return detail::check_builder(op, {randn({3, 4}), randn({4, 2})}, [&](Graph& g, const std::vector<Var>& x) {
      auto r = weights;
      return detail::project_to_scalar(g, matmul(x[0], x[1]), r);
    }, opts);
  }
  if (op == "layer_norm") {
    return detail::check_builder(op, {randn({3, 5}), randn({5}), randn({5})}, [&](Graph& g, const std::vector<Var>& x) {
      auto r = weights;
      return detail::project_to_scalar(g, layer_norm(x[0], x[1], x[2], 1e-5), r);
    }, opts);
  }
  if (op == "gelu") {
    return detail::check_builder(op, {randn({3, 4}, 1.5)}, [&](Graph& g, const std::vector<Var>& x) {
      auto r = weights;
      return detail::project_to_scalar(g, gelu(x[0]), r);
    }, opts);
  }
  if (op == "softmax") {
    return detail::check_builder(op, {randn({3, 4})}, [&](Graph& g, const std::vector<Var>& x) {
      auto r = weights;
      return detail::project_to_scalar(g, softmax(x[0]), r);
    }, opts);
  }
  if (op == "attention") {
    const std::size_t t = 4, d = 6;
    std::vector<Tensor> in = {randn({t, d})};
    for (int i = 0; i < 4; ++i) {
      in.push_back(randn({d, d}, 0.4));
      in.push_back(randn({d}, 0.1));
    }
    return detail::check_builder(op, std::move(in), [&](Graph& g, const std::vector<Var>& x) {
      auto r = weights;
      const BoundAttention a{x[1], x[2], x[3], x[4], x[5], x[6], x[7], x[8]};
      return detail::project_to_scalar(g, multi_head_attention(x[0], a, 2), r);
    }, opts);
  }
  if (op == "cross_entropy") {
    return detail::check_builder(op, {randn({6}, 2.0)}, [](Graph&, const std::vector<Var>& x) {
      return cross_entropy(x[0], 2);
    }, opts);
  }
  if (op == "cosine") {
    return detail::check_builder(op, {randn({5}), randn({5})}, [](Graph&, const std::vector<Var>& x) {
      return cosine_similarity(x[0], x[1]);
    }, opts);
  }
  if (op == "thought") {
    const std::size_t d = 6, rank = 2;
    Tensor gamma = randn({d}, 0.3);
    for (auto& v : gamma.values()) v += 1.0;
    std::vector<Tensor> in = {randn({d}),         std::move(gamma),   randn({d}, 0.3), randn({rank, d}, 0.5),
                              randn({rank}, 0.3), randn({d, rank}, 0.5), randn({d}, 0.3)};
    return detail::check_builder(op, std::move(in), [&](Graph& g, const std::vector<Var>& x) {
      auto r = weights;
      const BoundProjector p{x[1], x[2], x[3], x[4], x[5], x[6]};
      return detail::project_to_scalar(g, thought(x[0], p), r);
    }, opts);
  }
  if (op == "perl_loss") return detail::check_perl_loss(opts);
  throw ConfigError("unknown gradcheck op '" + op + "'");
}

inline GradcheckReport run_gradcheck(const GradcheckOptions& opts = {}) {
  if (!opts.fault.empty()) {
    const auto& ops = gradcheck_ops();
    if (std::find(ops.begin(), ops.end(), opts.fault) == ops.end()) {
      throw ConfigError("fault injection names unknown op '" + opts.fault + "'");
    }
  }
  GradcheckReport report;
  for (const auto& op : gradcheck_ops()) report.cases.push_back(gradcheck_op(op, opts));
  return report;
}

}  // namespace latent_loop
