#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "latent_loop/autograd.hpp"
#include "latent_loop/backbone.hpp"
#include "latent_loop/checkpoint.hpp"
#include "latent_loop/errors.hpp"
#include "latent_loop/optim.hpp"
#include "latent_loop/rng.hpp"

namespace latent_loop {

/// How thought projectors are shared across injection depths and steps.
enum class Sharing { shared, per_step, per_layer, per_layer_step };

inline std::string_view sharing_name(Sharing s) {
  switch (s) {
    case Sharing::shared: return "shared";
    case Sharing::per_step: return "per_step";
    case Sharing::per_layer: return "per_layer";
    case Sharing::per_layer_step: return "per_layer_step";
  }
  return "shared";
}

inline Sharing parse_sharing(std::string_view name) {
  if (name == "shared") return Sharing::shared;
  if (name == "per_step") return Sharing::per_step;
  if (name == "per_layer") return Sharing::per_layer;
  if (name == "per_layer_step") return Sharing::per_layer_step;
  throw ConfigError("unknown sharing mode '" + std::string(name) + "'");
}

struct PerlConfig {
  std::vector<std::size_t> injection_depths{7};
  std::size_t steps = 4;  // K
  std::size_t rank = 1;   // r
  Sharing sharing = Sharing::shared;
  bool vision = true;
  bool text = true;

  bool active(Modality m) const { return m == Modality::vision ? vision : text; }
  std::size_t steps_for(Modality m) const { return active(m) ? steps : 0; }
  bool per_depth() const { return sharing == Sharing::per_layer || sharing == Sharing::per_layer_step; }
  bool per_step() const { return sharing == Sharing::per_step || sharing == Sharing::per_layer_step; }
  std::size_t depth_slots() const { return per_depth() ? injection_depths.size() : 1; }
  std::size_t step_slots() const { return per_step() ? steps : 1; }

  void validate(std::size_t layers) const {
    if (injection_depths.empty()) throw ConfigError("at least one injection depth is required");
    for (std::size_t i = 0; i < injection_depths.size(); ++i) {
      if (injection_depths[i] > layers) {
        throw ConfigError("injection depth " + std::to_string(injection_depths[i]) + " outside [0, " +
                          std::to_string(layers) + "]");
      }
      if (i > 0 && injection_depths[i] <= injection_depths[i - 1]) {
        throw ConfigError("injection depths must be strictly increasing");
      }
    }
    if (rank == 0) throw ConfigError("projector rank must be positive");
  }
};

/// phi_m: LayerNorm affine, then a rank-r two-layer MLP with biases.
struct ProjectorParams {
  Tensor gamma, beta;  // d
  Tensor w1, b1;       // r x d, r
  Tensor w2, b2;       // d x r, d

  static ProjectorParams initialize(std::size_t width, std::size_t rank, SplitMix64& rng, double stddev = 0.02) {
    ProjectorParams p;
    p.gamma = Tensor({width}, 1.0);
    p.beta = Tensor({width});
    p.w1 = Tensor::randn({rank, width}, rng, stddev);
    p.b1 = Tensor({rank});
    p.w2 = Tensor::randn({width, rank}, rng, stddev);
    p.b2 = Tensor({width});
    return p;
  }

  template <typename Self, typename Fn>
  static void visit(Self& self, const std::string& prefix, Fn&& fn) {
    fn(prefix + "gamma", self.gamma);
    fn(prefix + "beta", self.beta);
    fn(prefix + "w1", self.w1);
    fn(prefix + "b1", self.b1);
    fn(prefix + "w2", self.w2);
    fn(prefix + "b2", self.b2);
  }
};

/// (r d + r) + (d r + d) + 2 d; equals 5 d + 1 at r = 1.
constexpr std::size_t projector_parameter_count(std::size_t width, std::size_t rank) {
  return (rank * width + rank) + (width * rank + width) + 2 * width;
}

/// Trainable parameter count of a configuration.
inline std::size_t parameter_count(const PerlConfig& cfg, std::size_t width_vision, std::size_t width_text) {
  const std::size_t instances = cfg.depth_slots() * cfg.step_slots();
  std::size_t total = 0;
  if (cfg.vision) total += instances * projector_parameter_count(width_vision, cfg.rank);
  if (cfg.text) total += instances * projector_parameter_count(width_text, cfg.rank);
  return total;
}

/// J + (K + 1)(L - J) transformer block applications per modality.
constexpr std::size_t block_eval_count(std::size_t depth, std::size_t steps, std::size_t layers) {
  if (depth > layers) throw ContractError("injection depth beyond encoder depth");
  return depth + (steps + 1) * (layers - depth);
}

constexpr double block_eval_ratio(std::size_t depth, std::size_t steps, std::size_t layers) {
  return static_cast<double>(block_eval_count(depth, steps, layers)) / static_cast<double>(layers);
}

/// All projector instances for both modalities, laid out as a
/// depth-slot x step-slot grid per modality.
class ProjectorSet {
 public:
  ProjectorSet() = default;

  ProjectorSet(const PerlConfig& cfg, std::size_t width_vision, std::size_t width_text, std::uint64_t seed)
      : depth_slots_(cfg.depth_slots()), step_slots_(cfg.step_slots()), sharing_(cfg.sharing) {
    for (Modality m : {Modality::vision, Modality::text}) {
      if (!cfg.active(m)) continue;
      auto rng = SplitMix64::stream(seed, m == Modality::vision ? "phi.vision" : "phi.text");
      auto& grid = grid_for(m);
      const std::size_t width = m == Modality::vision ? width_vision : width_text;
      for (std::size_t i = 0; i < depth_slots_ * step_slots_; ++i) grid.push_back(ProjectorParams::initialize(width, cfg.rank, rng));
    }
  }

  bool has(Modality m) const { return !grid_for(m).empty(); }
  std::size_t instances(Modality m) const { return grid_for(m).size(); }
  std::size_t depth_slots() const { return depth_slots_; }
  std::size_t step_slots() const { return step_slots_; }
  Sharing sharing() const { return sharing_; }

  /// Projector used at injection depth `depth_index` on step `step_index`
  /// (both zero-based).
  const ProjectorParams& select(Modality m, std::size_t depth_index, std::size_t step_index) const {
    return grid_for(m)[slot(m, depth_index, step_index)];
  }

  const ProjectorParams& instance(Modality m, std::size_t slot_index) const { return grid_for(m).at(slot_index); }
  ProjectorParams& instance(Modality m, std::size_t slot_index) { return grid_for(m).at(slot_index); }

  std::size_t slot(Modality m, std::size_t depth_index, std::size_t step_index) const {
    const auto& grid = grid_for(m);
    if (grid.empty()) throw ContractError(std::string(modality_name(m)) + " has no thought projector");
    const bool per_depth = sharing_ == Sharing::per_layer || sharing_ == Sharing::per_layer_step;
    const bool per_step = sharing_ == Sharing::per_step || sharing_ == Sharing::per_layer_step;
    if ((per_depth && depth_index >= depth_slots_) || (per_step && step_index >= step_slots_)) {
      throw ContractError("projector index (" + std::to_string(depth_index) + ", " + std::to_string(step_index) +
                          ") outside the " + std::to_string(depth_slots_) + "x" + std::to_string(step_slots_) +
                          " grid");
    }
    return (per_depth ? depth_index : 0) * step_slots_ + (per_step ? step_index : 0);
  }

  static std::string prefix(Modality m, std::size_t depth_slot, std::size_t step_slot) {
    return "phi." + std::string(modality_name(m)) + "." + std::to_string(depth_slot) + "." +
           std::to_string(step_slot) + ".";
  }

  template <typename Fn>
  void for_each(Fn&& fn) {
    for_each_impl(*this, fn);
  }
  template <typename Fn>
  void for_each(Fn&& fn) const {
    for_each_impl(*this, fn);
  }

  std::vector<ParamSlot> slots() {
    std::vector<ParamSlot> out;
    for_each([&](const std::string& name, Tensor& t) { out.push_back({name, &t}); });
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each([&](const std::string&, const Tensor& t) { n += t.size(); });
    return n;
  }

  std::vector<NamedArray> to_arrays() const {
    std::vector<NamedArray> out;
    out.push_back({"meta.projectors", Tensor::vector({double(depth_slots_), double(step_slots_),
                                                      double(static_cast<int>(sharing_)), double(has(Modality::vision)),
                                                      double(has(Modality::text))})});
    for_each([&](const std::string& name, const Tensor& t) { out.push_back({name, t}); });
    return out;
  }

  static ProjectorSet from_arrays(const std::vector<NamedArray>& arrays) {
    const Tensor& meta = checkpoint::find(arrays, "meta.projectors");
    if (meta.size() != 5) throw InputError("projector checkpoint has malformed meta.projectors");
    ProjectorSet s;
    s.depth_slots_ = static_cast<std::size_t>(meta[0]);
    s.step_slots_ = static_cast<std::size_t>(meta[1]);
    s.sharing_ = static_cast<Sharing>(static_cast<int>(meta[2]));
    for (Modality m : {Modality::vision, Modality::text}) {
      if (meta[m == Modality::vision ? 3 : 4] == 0.0) continue;
      auto& grid = s.grid_for(m);
      for (std::size_t d = 0; d < s.depth_slots_; ++d)
        for (std::size_t k = 0; k < s.step_slots_; ++k) {
          ProjectorParams p;
          ProjectorParams::visit(p, prefix(m, d, k),
                                 [&](const std::string& name, Tensor& t) { t = checkpoint::find(arrays, name); });
          grid.push_back(std::move(p));
        }
    }
    return s;
  }

  void save(const std::filesystem::path& path) const { checkpoint::save(path, to_arrays()); }
  static ProjectorSet load(const std::filesystem::path& path) { return from_arrays(checkpoint::load(path)); }

  // Checks the set can serve `cfg` on a backbone with the given widths.
  void check_matches(const PerlConfig& cfg, const EncoderConfig& enc) const {
    for (Modality m : {Modality::vision, Modality::text}) {
      if (cfg.steps_for(m) == 0) continue;
      if (!has(m)) throw ConfigError(std::string(modality_name(m)) + " refinement requested but no projector exists");
      if (grid_for(m).front().gamma.size() != enc.width(m)) {
        throw ConfigError(std::string(modality_name(m)) + " projector width does not match backbone");
      }
      if (grid_for(m).front().w1.dim(0) != cfg.rank) {
        throw ConfigError(std::string(modality_name(m)) + " projector rank does not match configured rank " +
                          std::to_string(cfg.rank));
      }
    }
    if (sharing_ != cfg.sharing || depth_slots_ != cfg.depth_slots() || step_slots_ < cfg.step_slots()) {
      throw ConfigError("projector layout does not match sharing/depth/step configuration");
    }
  }

 private:
  template <typename Self, typename Fn>
  static void for_each_impl(Self& self, Fn& fn) {
    for (Modality m : {Modality::vision, Modality::text}) {
      auto& grid = self.grid_for(m);
      for (std::size_t i = 0; i < grid.size(); ++i)
        ProjectorParams::visit(grid[i], prefix(m, i / self.step_slots_, i % self.step_slots_), fn);
    }
  }

  std::vector<ProjectorParams>& grid_for(Modality m) { return m == Modality::vision ? vision_ : text_; }
  const std::vector<ProjectorParams>& grid_for(Modality m) const { return m == Modality::vision ? vision_ : text_; }

  std::size_t depth_slots_ = 1;
  std::size_t step_slots_ = 1;
  Sharing sharing_ = Sharing::shared;
  std::vector<ProjectorParams> vision_;
  std::vector<ProjectorParams> text_;
};

// ---------------------------------------------------------------------------
// Graph side
// ---------------------------------------------------------------------------

struct BoundProjector {
  Var gamma, beta, w1, b1, w2, b2;
};

inline constexpr double kProjectorLnEps = 1e-5;

/// z = W2 gelu(W1 LN(h) + b1) + b2
inline Var thought(Var h, const BoundProjector& p) {
  if (h.value().size() != p.gamma.value().size()) {
    throw ConfigError("thought projector width " + std::to_string(p.gamma.value().size()) + " applied to state of " +
                      std::to_string(h.value().size()));
  }
  Var normed = layer_norm(h, p.gamma, p.beta, kProjectorLnEps);
  Var hidden = gelu(add(matvec(p.w1, normed), p.b1));
  return add(matvec(p.w2, hidden), p.b2);
}

/// Projectors of one modality bound into a graph, in ProjectorSet slot order.
struct BoundProjectors {
  const ProjectorSet* set = nullptr;
  Modality modality = Modality::vision;
  std::vector<BoundProjector> grid;

  const BoundProjector& select(std::size_t depth_index, std::size_t step_index) const {
    return grid.at(set->slot(modality, depth_index, step_index));
  }
};

inline BoundProjectors bind_projectors(Graph& g, const ProjectorSet& set, Modality m, bool trainable) {
  BoundProjectors b{&set, m, {}};
  if (!set.has(m)) return b;
  for (std::size_t i = 0; i < set.instances(m); ++i) {
    const std::size_t d = i / set.step_slots(), k = i % set.step_slots();
    const ProjectorParams& p = set.instance(m, i);
    std::vector<Var> vars;
    ProjectorParams::visit(p, ProjectorSet::prefix(m, d, k), [&](const std::string& name, const Tensor& t) {
      vars.push_back(trainable ? g.parameter(t, name) : g.constant_ref(t));
    });
    b.grid.push_back({vars[0], vars[1], vars[2], vars[3], vars[4], vars[5]});
  }
  return b;
}

/// Graph nodes produced by a refinement run.
struct RefinementVars {
  std::vector<Var> pooled;      // h^(0..K)
  std::vector<Var> thoughts;    // thoughts of the last injection depth, z^(1..K)
  std::vector<Var> embeddings;  // projected, normalized h^(0..K)
  std::vector<std::size_t> readout_rows;
  std::size_t block_evaluations = 0;
  std::size_t clamped_norms = 0;
};

/// Recurrent latent refinement over a split encoder.
///
/// The blocks below the first injection depth run once and their output is
/// cached. Step 0 is the frozen pass. On step k each injection depth gets a
/// new thought from the readout state that depth's segment produced on step
/// k - 1; the depth's thoughts z^(1..k) are prepended to the running
/// sequence before its segment runs. Readout always uses the original
/// CLS/EOS row, shifted by the number of prepended thoughts.
inline RefinementVars segmented_refine(Var embedded, const TokenSequence& x, const BoundTower& tower,
                                       const BoundProjectors* projectors, const std::vector<std::size_t>& depths,
                                       std::size_t steps) {
  const std::size_t layers = tower.layers();
  if (depths.empty()) throw ConfigError("at least one injection depth is required");
  for (std::size_t i = 0; i < depths.size(); ++i) {
    if (depths[i] > layers || (i > 0 && depths[i] <= depths[i - 1])) {
      throw ConfigError("injection depths must be strictly increasing and at most " + std::to_string(layers));
    }
  }
  if (steps > 0 && (!projectors || projectors->grid.empty())) throw ContractError("refinement steps need a projector");
  const std::size_t segments = depths.size();
  auto segment_end = [&](std::size_t i) { return i + 1 < segments ? depths[i + 1] : layers; };

  RefinementVars out;
  BlockCounter counter;
  const Var base = run_blocks(embedded, tower, 0, depths.front(), counter);

  std::vector<Var> states(segments);
  std::vector<std::vector<Var>> thoughts(segments);
  for (std::size_t k = 0; k <= steps; ++k) {
    Var running = base;
    std::size_t prepended = 0;
    for (std::size_t i = 0; i < segments; ++i) {
      if (k > 0) {
        thoughts[i].push_back(thought(states[i], projectors->select(i, k - 1)));
        std::vector<Var> parts(thoughts[i].begin(), thoughts[i].end());
        parts.push_back(running);
        running = concat_rows(parts);
        prepended += k;
      }
      running = run_blocks(running, tower, depths[i], segment_end(i), counter);
      states[i] = pool(running, x, prepended, tower);
    }
    out.readout_rows.push_back(readout_row(x, prepended));
    out.pooled.push_back(states.back());
    bool clamped = false;
    out.embeddings.push_back(project(states.back(), tower, &clamped));
    out.clamped_norms += clamped;
  }
  out.thoughts = thoughts.back();
  out.block_evaluations = counter.evaluations;
  return out;
}

// ---------------------------------------------------------------------------
// Value side
// ---------------------------------------------------------------------------

/// Per-example record of one modality's refinement.
struct RefinementTrace {
  Modality modality = Modality::vision;
  std::vector<Tensor> pooled;      // h^(0..K)
  std::vector<Tensor> thoughts;    // z^(1..K)
  std::vector<Tensor> embeddings;  // v^(0..K) or t^(0..K), unit norm
  std::vector<std::size_t> readout_rows;
  std::size_t block_evaluations = 0;
  std::size_t clamped_norms = 0;
  std::vector<Tensor> logits;  // per step, filled when paired with a classifier

  std::size_t steps() const { return thoughts.size(); }
};

inline RefinementTrace to_trace(const RefinementVars& vars, Modality m) {
  RefinementTrace t;
  t.modality = m;
  for (const Var& v : vars.pooled) t.pooled.push_back(v.value());
  for (const Var& v : vars.thoughts) t.thoughts.push_back(v.value());
  for (const Var& v : vars.embeddings) t.embeddings.push_back(v.value());
  t.readout_rows = vars.readout_rows;
  t.block_evaluations = vars.block_evaluations;
  t.clamped_norms = vars.clamped_norms;
  return t;
}

inline RefinementTrace run_refinement(const TokenSequence& x, const EncoderWeights& w, const ProjectorSet& params,
                                      const PerlConfig& cfg) {
  cfg.validate(w.config.layers);
  x.validate(w.config);
  const std::size_t steps = cfg.steps_for(x.modality);
  if (steps > 0) params.check_matches(cfg, w.config);
  Graph g;
  BoundTower tower = bind_frozen(g, w, x.modality);
  BoundProjectors proj = bind_projectors(g, params, x.modality, false);
  return to_trace(segmented_refine(embed(x, tower), x, tower, &proj, cfg.injection_depths, steps), x.modality);
}

/// Single-depth refinement: S = B(x) once, then K recurrent passes of R.
inline RefinementTrace refine(const TokenSequence& x, const EncoderWeights& w, const ProjectorSet& params,
                              const PerlConfig& cfg) {
  if (cfg.injection_depths.size() != 1) {
    throw ContractError("refine takes exactly one injection depth; use multi_depth_refine");
  }
  return run_refinement(x, w, params, cfg);
}

/// Refinement with thoughts injected at several depths per step.
inline RefinementTrace multi_depth_refine(const TokenSequence& x, const EncoderWeights& w, const ProjectorSet& params,
                                          const PerlConfig& cfg) {
  return run_refinement(x, w, params, cfg);
}

}  // namespace latent_loop
