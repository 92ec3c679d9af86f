#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <string>
#include <vector>

#include "latent_loop/backbone.hpp"
#include "latent_loop/checkpoint.hpp"
#include "latent_loop/errors.hpp"
#include "latent_loop/keyvalue.hpp"
#include "latent_loop/rng.hpp"
#include "latent_loop/tensor.hpp"

namespace latent_loop {

/// Parameters of the synthetic classification world.
///
/// A shared codebook of `codebook` latent vectors (fixed by `world_seed`)
/// defines the token vocabulary. Each class has a Gaussian prototype in the
/// latent space. An image is CLS followed by patch tokens, each the nearest
/// code to `prototype + noise * eps`. A class prompt lists the codes nearest
/// to the prototype, closest first.
struct SyntheticTaskSpec {
  std::size_t classes = 16;
  std::size_t latent_dim = 8;
  double noise = 1.0;
  std::size_t codebook = 64;
  std::size_t shots = 16;
  std::size_t query_per_class = 20;
  double shift_prototype = 0.0;  // std of prototype jitter for shifted variants
  double shift_noise = 0.0;      // relative noise inflation for shifted variants
  std::uint64_t world_seed = 7;
  std::uint64_t seed = 0;

  double effective_noise() const { return noise * (1.0 + shift_noise); }

  void validate() const {
    if (classes < 2) throw ConfigError("synthetic task needs at least 2 classes");
    if (!(noise >= 0.0) || !(shift_prototype >= 0.0) || !(shift_noise >= 0.0)) {
      throw ConfigError("noise and shift scales must be non-negative");
    }
    if (latent_dim == 0 || codebook == 0) throw ConfigError("latent_dim and codebook must be positive");
  }
};

/// The latent vectors behind token ids, shared by pretraining and every task.
class Codebook {
 public:
  Codebook(std::uint64_t world_seed, std::size_t size, std::size_t latent_dim) {
    auto rng = SplitMix64::stream(world_seed, "world.codebook");
    codes_ = Tensor::randn({size, latent_dim}, rng);
  }

  std::size_t size() const { return codes_.dim(0); }
  std::size_t latent_dim() const { return codes_.dim(1); }
  const Tensor& codes() const { return codes_; }

  std::size_t nearest(std::span<const double> point) const {
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < size(); ++c) {
      const double d = distance2(point, c);
      if (d < best_d) {
        best_d = d;
        best = c;
      }
    }
    return best;
  }

  // The `count` codes closest to `point`, closest first (ties broken by id).
  std::vector<std::size_t> nearest_k(std::span<const double> point, std::size_t count) const {
    if (count > size()) {
      throw ConfigError("codebook of " + std::to_string(size()) + " entries cannot supply " + std::to_string(count) +
                        " distinct prompt words");
    }
    std::vector<std::size_t> ids(size());
    std::iota(ids.begin(), ids.end(), std::size_t{0});
    std::vector<double> dist(size());
    for (std::size_t c = 0; c < size(); ++c) dist[c] = distance2(point, c);
    std::stable_sort(ids.begin(), ids.end(), [&](std::size_t a, std::size_t b) { return dist[a] < dist[b]; });
    ids.resize(count);
    return ids;
  }

 private:
  double distance2(std::span<const double> point, std::size_t c) const {
    double d = 0.0;
    for (std::size_t j = 0; j < point.size(); ++j) {
      const double diff = point[j] - codes_.at(c, j);
      d += diff * diff;
    }
    return d;
  }

  Tensor codes_;
};

struct LabeledImage {
  TokenSequence tokens;
  std::size_t label = 0;
};

/// A few-shot classification task with a base/novel class partition.
struct FewShotTask {
  SyntheticTaskSpec spec;
  Tensor prototypes;                  // classes x latent_dim
  std::vector<TokenSequence> prompts;  // one per class
  std::vector<LabeledImage> support;   // base classes only
  std::vector<LabeledImage> query;     // every class
  std::vector<std::size_t> base;
  std::vector<std::size_t> novel;

  std::size_t classes() const { return prompts.size(); }

  bool is_base(std::size_t label) const { return std::find(base.begin(), base.end(), label) != base.end(); }

  std::vector<LabeledImage> query_for(const std::vector<std::size_t>& classes) const {
    std::vector<LabeledImage> out;
    for (const auto& q : query)
      if (std::find(classes.begin(), classes.end(), q.label) != classes.end()) out.push_back(q);
    return out;
  }
};

namespace synthetic {

inline std::vector<std::size_t> sample_patches(const Codebook& book, std::span<const double> prototype, double noise,
                                               std::size_t patches, SplitMix64& rng) {
  std::vector<std::size_t> ids(patches);
  std::vector<double> point(prototype.size());
  for (auto& id : ids) {
    for (std::size_t j = 0; j < point.size(); ++j) point[j] = prototype[j] + noise * rng.normal();
    id = book.nearest(point);
  }
  return ids;
}

inline TokenSequence image(const Codebook& book, std::span<const double> prototype, double noise,
                           const EncoderConfig& cfg, SplitMix64& rng) {
  return TokenSequence::vision(sample_patches(book, prototype, noise, cfg.patches, rng), cfg);
}

inline TokenSequence prompt(const Codebook& book, std::span<const double> prototype, const EncoderConfig& cfg) {
  return TokenSequence::text(book.nearest_k(prototype, cfg.text_length - 2), cfg);
}

inline void check_compatible(const SyntheticTaskSpec& spec, const EncoderConfig& cfg) {
  spec.validate();
  if (spec.codebook != cfg.codebook) {
    throw ConfigError("task codebook of " + std::to_string(spec.codebook) + " does not match backbone vocabulary of " +
                      std::to_string(cfg.codebook));
  }
  if (cfg.text_length < 3 || spec.codebook < cfg.text_length - 2) {
    throw ConfigError("codebook of " + std::to_string(spec.codebook) + " is smaller than the " +
                      std::to_string(cfg.text_length - 2) + " prompt words needed");
  }
}

}  // namespace synthetic

/// Samples a task. Every class starts on the base side; use
/// split_base_novel to partition.
inline FewShotTask generate_task(const SyntheticTaskSpec& spec, const EncoderConfig& cfg) {
  synthetic::check_compatible(spec, cfg);
  const Codebook book(spec.world_seed, spec.codebook, spec.latent_dim);
  FewShotTask task;
  task.spec = spec;
  auto proto_rng = SplitMix64::stream(spec.seed, "task.prototypes");
  task.prototypes = Tensor::randn({spec.classes, spec.latent_dim}, proto_rng);
  if (spec.shift_prototype > 0.0) {
    auto shift_rng = SplitMix64::stream(spec.seed, "task.shift");
    for (auto& v : task.prototypes.values()) v += spec.shift_prototype * shift_rng.normal();
  }
  const double noise = spec.effective_noise();
  for (std::size_t c = 0; c < spec.classes; ++c) task.prompts.push_back(synthetic::prompt(book, task.prototypes.row(c), cfg));
  auto support_rng = SplitMix64::stream(spec.seed, "task.support");
  for (std::size_t c = 0; c < spec.classes; ++c)
    for (std::size_t s = 0; s < spec.shots; ++s)
      task.support.push_back({synthetic::image(book, task.prototypes.row(c), noise, cfg, support_rng), c});
  auto query_rng = SplitMix64::stream(spec.seed, "task.query");
  for (std::size_t c = 0; c < spec.classes; ++c)
    for (std::size_t s = 0; s < spec.query_per_class; ++s)
      task.query.push_back({synthetic::image(book, task.prototypes.row(c), noise, cfg, query_rng), c});
  task.base.resize(spec.classes);
  std::iota(task.base.begin(), task.base.end(), std::size_t{0});
  return task;
}

/// Seeded partition of the classes; the support set keeps base classes only.
inline FewShotTask split_base_novel(FewShotTask task, double fraction, std::uint64_t seed) {
  const std::size_t classes = task.classes();
  if (classes < 2) throw ContractError("base/novel split needs at least 2 classes");
  if (!(fraction > 0.0) || fraction > 1.0) throw ConfigError("base fraction must be in (0, 1]");
  std::vector<std::size_t> order(classes);
  std::iota(order.begin(), order.end(), std::size_t{0});
  auto rng = SplitMix64::stream(seed, "task.split");
  shuffle(order, rng);
  std::size_t n_base = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(classes) + 1e-9));
  n_base = std::clamp<std::size_t>(n_base, 1, classes);
  task.base.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_base));
  task.novel.assign(order.begin() + static_cast<std::ptrdiff_t>(n_base), order.end());
  std::sort(task.base.begin(), task.base.end());
  std::sort(task.novel.begin(), task.novel.end());
  std::erase_if(task.support, [&](const LabeledImage& s) { return !task.is_base(s.label); });
  return task;
}

/// 2ab / (a + b) for accuracies in percent.
inline double harmonic_mean(double base_acc, double novel_acc) {
  if (!(base_acc > 0.0) || !(novel_acc > 0.0)) throw DomainError("harmonic mean needs positive accuracies");
  return 2.0 * base_acc * novel_acc / (base_acc + novel_acc);
}

// ---------------------------------------------------------------------------
// Task files: <stem>.perlw (token arrays) + <stem>.meta (key: value sidecar)
// ---------------------------------------------------------------------------

namespace task_io {

inline Tensor tokens_to_tensor(const std::vector<LabeledImage>& images, std::size_t length) {
  Tensor t({std::max<std::size_t>(images.size(), 1), length});
  for (std::size_t i = 0; i < images.size(); ++i)
    for (std::size_t j = 0; j < length; ++j) t.at(i, j) = static_cast<double>(images[i].tokens.ids.at(j));
  return t;
}

inline Tensor labels_to_tensor(const std::vector<LabeledImage>& images) {
  Tensor t({std::max<std::size_t>(images.size(), 1)});
  for (std::size_t i = 0; i < images.size(); ++i) t[i] = static_cast<double>(images[i].label);
  return t;
}

inline std::vector<LabeledImage> images_from(const Tensor& tokens, const Tensor& labels, std::size_t count) {
  std::vector<LabeledImage> out;
  for (std::size_t i = 0; i < count; ++i) {
    TokenSequence s;
    s.modality = Modality::vision;
    for (std::size_t j = 0; j < tokens.dim(1); ++j) s.ids.push_back(static_cast<std::size_t>(tokens.at(i, j)));
    out.push_back({std::move(s), static_cast<std::size_t>(labels[i])});
  }
  return out;
}

inline KeyValueText sidecar(const FewShotTask& task) {
  const auto& s = task.spec;
  KeyValueText kv;
  kv.set("classes", std::to_string(s.classes));
  kv.set("latent_dim", std::to_string(s.latent_dim));
  kv.set("noise", format_double(s.noise));
  kv.set("codebook", std::to_string(s.codebook));
  kv.set("shots", std::to_string(s.shots));
  kv.set("query_per_class", std::to_string(s.query_per_class));
  kv.set("shift_prototype", format_double(s.shift_prototype));
  kv.set("shift_noise", format_double(s.shift_noise));
  kv.set("world_seed", std::to_string(s.world_seed));
  kv.set("seed", std::to_string(s.seed));
  kv.set("support_count", std::to_string(task.support.size()));
  kv.set("query_count", std::to_string(task.query.size()));
  kv.set("base", join(task.base));
  kv.set("novel", join(task.novel));
  return kv;
}

}  // namespace task_io

inline void save_task(const FewShotTask& task, const std::filesystem::path& stem) {
  std::vector<NamedArray> arrays;
  arrays.push_back({"prototypes", task.prototypes});
  const std::size_t text_len = task.prompts.front().ids.size();
  Tensor prompts({task.classes(), text_len});
  Tensor eos({task.classes()});
  for (std::size_t c = 0; c < task.classes(); ++c) {
    for (std::size_t j = 0; j < text_len; ++j) prompts.at(c, j) = static_cast<double>(task.prompts[c].ids[j]);
    eos[c] = static_cast<double>(task.prompts[c].eos);
  }
  arrays.push_back({"prompts.tokens", prompts});
  arrays.push_back({"prompts.eos", eos});
  const std::size_t img_len = task.query.front().tokens.ids.size();
  arrays.push_back({"support.tokens", task_io::tokens_to_tensor(task.support, img_len)});
  arrays.push_back({"support.labels", task_io::labels_to_tensor(task.support)});
  arrays.push_back({"query.tokens", task_io::tokens_to_tensor(task.query, img_len)});
  arrays.push_back({"query.labels", task_io::labels_to_tensor(task.query)});
  checkpoint::save(std::filesystem::path(stem).replace_extension(".perlw"), arrays);
  task_io::sidecar(task).save(std::filesystem::path(stem).replace_extension(".meta"));
}

inline FewShotTask load_task(const std::filesystem::path& stem) {
  const auto arrays = checkpoint::load(std::filesystem::path(stem).replace_extension(".perlw"));
  const auto kv = KeyValueText::load(std::filesystem::path(stem).replace_extension(".meta"));
  FewShotTask task;
  auto& s = task.spec;
  s.classes = parse_u64(kv.at("classes"), "classes");
  s.latent_dim = parse_u64(kv.at("latent_dim"), "latent_dim");
  s.noise = parse_double(kv.at("noise"), "noise");
  s.codebook = parse_u64(kv.at("codebook"), "codebook");
  s.shots = parse_u64(kv.at("shots"), "shots");
  s.query_per_class = parse_u64(kv.at("query_per_class"), "query_per_class");
  s.shift_prototype = parse_double(kv.at("shift_prototype"), "shift_prototype");
  s.shift_noise = parse_double(kv.at("shift_noise"), "shift_noise");
  s.world_seed = parse_u64(kv.at("world_seed"), "world_seed");
  s.seed = parse_u64(kv.at("seed"), "seed");
  task.prototypes = checkpoint::find(arrays, "prototypes");
  const Tensor& prompts = checkpoint::find(arrays, "prompts.tokens");
  const Tensor& eos = checkpoint::find(arrays, "prompts.eos");
  for (std::size_t c = 0; c < prompts.dim(0); ++c) {
    TokenSequence p;
    p.modality = Modality::text;
    for (std::size_t j = 0; j < prompts.dim(1); ++j) p.ids.push_back(static_cast<std::size_t>(prompts.at(c, j)));
    p.eos = static_cast<std::size_t>(eos[c]);
    task.prompts.push_back(std::move(p));
  }
  task.support = task_io::images_from(checkpoint::find(arrays, "support.tokens"), checkpoint::find(arrays, "support.labels"),
                                      parse_u64(kv.at("support_count"), "support_count"));
  task.query = task_io::images_from(checkpoint::find(arrays, "query.tokens"), checkpoint::find(arrays, "query.labels"),
                                    parse_u64(kv.at("query_count"), "query_count"));
  task.base = parse_index_list(kv.at("base"), "base");
  task.novel = parse_index_list(kv.at("novel"), "novel");
  return task;
}

}  // namespace latent_loop
