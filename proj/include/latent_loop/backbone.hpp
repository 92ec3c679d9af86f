#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "latent_loop/autograd.hpp"
#include "latent_loop/checkpoint.hpp"
#include "latent_loop/errors.hpp"
#include "latent_loop/rng.hpp"
#include "latent_loop/tensor.hpp"

namespace latent_loop {

enum class Modality { vision, text };

inline std::string_view modality_name(Modality m) { return m == Modality::vision ? "vision" : "text"; }

inline Modality parse_modality(std::string_view name) {
  if (name == "vision") return Modality::vision;
  if (name == "text") return Modality::text;
  throw ConfigError("unknown modality '" + std::string(name) + "'");
}

/// Shape of the toy dual encoder.
///
/// Vision tokens: ids [0, codebook) are patch codes and `codebook` is CLS.
/// Text tokens: ids [0, codebook) are word codes, `codebook` is BOS and
/// `codebook + 1` is EOS.
struct EncoderConfig {
  std::size_t layers = 12;
  std::size_t width_vision = 48;
  std::size_t width_text = 32;
  std::size_t embed_dim = 16;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 4;
  std::size_t patches = 16;
  std::size_t text_length = 8;
  std::size_t codebook = 64;
  double logit_scale = 10.0;
  double ln_eps = 1e-5;

  static EncoderConfig toy() { return {}; }

  // CLIP ViT-B/16 widths. Only used for parameter accounting, never instantiated.
  static EncoderConfig clip_b16_dims() {
    EncoderConfig c;
    c.width_vision = 768;
    c.width_text = 512;
    c.embed_dim = 512;
    c.heads = 8;
    return c;
  }

  // Small enough for finite-difference suites.
  static EncoderConfig micro() {
    EncoderConfig c;
    c.layers = 4;
    c.width_vision = 8;
    c.width_text = 8;
    c.embed_dim = 8;
    c.heads = 2;
    c.mlp_ratio = 2;
    c.patches = 4;
    c.text_length = 5;
    c.codebook = 8;
    c.logit_scale = 5.0;
    return c;
  }

  std::size_t width(Modality m) const { return m == Modality::vision ? width_vision : width_text; }
  std::size_t sequence_length(Modality m) const { return m == Modality::vision ? patches + 1 : text_length; }
  std::size_t vocab(Modality m) const { return m == Modality::vision ? codebook + 1 : codebook + 2; }
  std::size_t cls_token() const { return codebook; }
  std::size_t bos_token() const { return codebook; }
  std::size_t eos_token() const { return codebook + 1; }

  void validate() const {
    if (layers < 2) throw ConfigError("encoder needs at least 2 blocks");
    if (heads == 0 || width_vision % heads != 0 || width_text % heads != 0) {
      throw ConfigError("hidden widths " + std::to_string(width_vision) + "/" + std::to_string(width_text) +
                        " not divisible by " + std::to_string(heads) + " heads");
    }
    if (embed_dim == 0 || embed_dim > std::min(width_vision, width_text)) {
      throw ConfigError("shared embedding width must be in [1, min(d_v, d_t)]");
    }
    if (patches == 0 || text_length < 3 || codebook == 0 || mlp_ratio == 0) {
      throw ConfigError("degenerate sequence or vocabulary size");
    }
    if (!(logit_scale > 0.0)) throw ConfigError("logit scale must be positive");
  }
};

/// A tokenized input. The readout (CLS for vision, EOS for text) is an index
/// into the original sequence, before any thought tokens are prepended.
struct TokenSequence {
  Modality modality = Modality::vision;
  std::vector<std::size_t> ids;
  std::size_t eos = 0;

  static TokenSequence vision(const std::vector<std::size_t>& patch_ids, const EncoderConfig& cfg) {
    TokenSequence s{Modality::vision, {cfg.cls_token()}, 0};
    s.ids.insert(s.ids.end(), patch_ids.begin(), patch_ids.end());
    return s;
  }

  static TokenSequence text(const std::vector<std::size_t>& word_ids, const EncoderConfig& cfg) {
    TokenSequence s{Modality::text, {cfg.bos_token()}, 0};
    s.ids.insert(s.ids.end(), word_ids.begin(), word_ids.end());
    s.eos = s.ids.size();
    s.ids.push_back(cfg.eos_token());
    return s;
  }

  std::size_t readout_index() const { return modality == Modality::vision ? 0 : eos; }

  void validate(const EncoderConfig& cfg) const {
    const std::size_t vocab = cfg.vocab(modality);
    for (std::size_t id : ids) {
      if (id >= vocab) {
        throw InputError("token id " + std::to_string(id) + " outside " + std::string(modality_name(modality)) +
                         " vocabulary of " + std::to_string(vocab));
      }
    }
    if (ids.size() > cfg.sequence_length(modality)) throw InputError("sequence longer than positional table");
    if (modality == Modality::vision) {
      if (ids.empty() || ids[0] != cfg.cls_token()) throw InputError("vision sequence must start with CLS");
    } else {
      std::size_t count = 0;
      for (std::size_t id : ids) count += id == cfg.eos_token();
      if (count != 1 || eos >= ids.size() || ids[eos] != cfg.eos_token()) {
        throw InputError("text sequence must contain exactly one EOS at its recorded index");
      }
    }
  }
};

struct AttentionWeights {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
};

struct BlockWeights {
  Tensor ln1_gamma, ln1_beta;
  AttentionWeights attn;
  Tensor ln2_gamma, ln2_beta;
  Tensor fc1, fc1_bias, fc2, fc2_bias;
};

struct TowerWeights {
  Tensor token_embedding, position_embedding;
  std::vector<BlockWeights> blocks;
  Tensor final_gamma, final_beta;
  Tensor projection;  // d_m x d
};

namespace detail {

// Visits every tensor of a tower in a fixed order with its checkpoint name.
template <typename TowerT, typename Fn>
void visit_tower(TowerT& t, const std::string& prefix, Fn&& fn) {
  fn(prefix + ".token_embedding", t.token_embedding);
  fn(prefix + ".position_embedding", t.position_embedding);
  for (std::size_t i = 0; i < t.blocks.size(); ++i) {
    auto& b = t.blocks[i];
    const std::string p = prefix + ".block." + std::to_string(i) + ".";
    fn(p + "ln1.gamma", b.ln1_gamma);
    fn(p + "ln1.beta", b.ln1_beta);
    fn(p + "attn.wq", b.attn.wq);
    fn(p + "attn.bq", b.attn.bq);
    fn(p + "attn.wk", b.attn.wk);
    fn(p + "attn.bk", b.attn.bk);
    fn(p + "attn.wv", b.attn.wv);
    fn(p + "attn.bv", b.attn.bv);
    fn(p + "attn.wo", b.attn.wo);
    fn(p + "attn.bo", b.attn.bo);
    fn(p + "ln2.gamma", b.ln2_gamma);
    fn(p + "ln2.beta", b.ln2_beta);
    fn(p + "mlp.fc1", b.fc1);
    fn(p + "mlp.fc1_bias", b.fc1_bias);
    fn(p + "mlp.fc2", b.fc2);
    fn(p + "mlp.fc2_bias", b.fc2_bias);
  }
  fn(prefix + ".final_ln.gamma", t.final_gamma);
  fn(prefix + ".final_ln.beta", t.final_beta);
  fn(prefix + ".projection", t.projection);
}

inline TowerWeights init_tower(const EncoderConfig& cfg, Modality m, SplitMix64& rng) {
  const std::size_t w = cfg.width(m);
  const std::size_t hidden = w * cfg.mlp_ratio;
  const double std_in = 1.0 / std::sqrt(static_cast<double>(w));
  const double std_hidden = 1.0 / std::sqrt(static_cast<double>(hidden));
  const double residual = 1.0 / std::sqrt(2.0 * static_cast<double>(cfg.layers));
  TowerWeights t;
  t.token_embedding = Tensor::randn({cfg.vocab(m), w}, rng, 1.0);
  t.position_embedding = Tensor::randn({cfg.sequence_length(m), w}, rng, 0.1);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    BlockWeights b;
    b.ln1_gamma = Tensor({w}, 1.0);
    b.ln1_beta = Tensor({w});
    b.attn.wq = Tensor::randn({w, w}, rng, std_in);
    b.attn.bq = Tensor({w});
    b.attn.wk = Tensor::randn({w, w}, rng, std_in);
    b.attn.bk = Tensor({w});
    b.attn.wv = Tensor::randn({w, w}, rng, std_in);
    b.attn.bv = Tensor({w});
    b.attn.wo = Tensor::randn({w, w}, rng, std_in * residual);
    b.attn.bo = Tensor({w});
    b.ln2_gamma = Tensor({w}, 1.0);
    b.ln2_beta = Tensor({w});
    b.fc1 = Tensor::randn({w, hidden}, rng, std_in);
    b.fc1_bias = Tensor({hidden});
    b.fc2 = Tensor::randn({hidden, w}, rng, std_hidden * residual);
    b.fc2_bias = Tensor({w});
    t.blocks.push_back(std::move(b));
  }
  t.final_gamma = Tensor({w}, 1.0);
  t.final_beta = Tensor({w});
  t.projection = Tensor::randn({w, cfg.embed_dim}, rng, std_in);
  return t;
}

}  // namespace detail

/// Frozen dual-encoder parameters.
struct EncoderWeights {
  EncoderConfig config;
  TowerWeights vision;
  TowerWeights text;

  const TowerWeights& tower(Modality m) const { return m == Modality::vision ? vision : text; }
  TowerWeights& tower(Modality m) { return m == Modality::vision ? vision : text; }
  double logit_scale() const { return config.logit_scale; }

  static EncoderWeights initialize(const EncoderConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    EncoderWeights w;
    w.config = cfg;
    auto vrng = SplitMix64::stream(seed, "init.vision");
    auto trng = SplitMix64::stream(seed, "init.text");
    w.vision = detail::init_tower(cfg, Modality::vision, vrng);
    w.text = detail::init_tower(cfg, Modality::text, trng);
    return w;
  }

  template <typename Fn>
  void for_each(Fn&& fn) {
    detail::visit_tower(vision, "vision", fn);
    detail::visit_tower(text, "text", fn);
  }
  template <typename Fn>
  void for_each(Fn&& fn) const {
    detail::visit_tower(vision, "vision", fn);
    detail::visit_tower(text, "text", fn);
  }

  std::vector<NamedArray> to_arrays() const {
    const EncoderConfig& c = config;
    std::vector<NamedArray> out;
    out.push_back({"meta.config",
                   Tensor::vector({double(c.layers), double(c.width_vision), double(c.width_text),
                                   double(c.embed_dim), double(c.heads), double(c.mlp_ratio), double(c.patches),
                                   double(c.text_length), double(c.codebook), c.ln_eps})});
    out.push_back({"logit_scale", Tensor::scalar(c.logit_scale)});
    for_each([&](const std::string& name, const Tensor& t) { out.push_back({name, t}); });
    return out;
  }

  static EncoderWeights from_arrays(const std::vector<NamedArray>& arrays) {
    const Tensor& meta = checkpoint::find(arrays, "meta.config");
    if (meta.size() != 10) throw InputError("backbone checkpoint has malformed meta.config");
    EncoderConfig c;
    auto as_size = [&](std::size_t i) { return static_cast<std::size_t>(meta[i]); };
    c.layers = as_size(0);
    c.width_vision = as_size(1);
    c.width_text = as_size(2);
    c.embed_dim = as_size(3);
    c.heads = as_size(4);
    c.mlp_ratio = as_size(5);
    c.patches = as_size(6);
    c.text_length = as_size(7);
    c.codebook = as_size(8);
    c.ln_eps = meta[9];
    c.logit_scale = checkpoint::find(arrays, "logit_scale").item();
    c.validate();
    EncoderWeights w = initialize(c, 0);
    w.for_each([&](const std::string& name, Tensor& t) {
      const Tensor& src = checkpoint::find(arrays, name);
      if (src.shape() != t.shape()) {
        throw InputError("array '" + name + "' has shape " + shape_string(src.shape()) + ", expected " +
                         shape_string(t.shape()));
      }
      t = src;
    });
    return w;
  }

  void save(const std::filesystem::path& path) const { checkpoint::save(path, to_arrays()); }
  static EncoderWeights load(const std::filesystem::path& path) { return from_arrays(checkpoint::load(path)); }

  std::uint64_t fingerprint() const {
    const auto bytes = checkpoint::encode(to_arrays());
    return fnv1a64(bytes.data(), bytes.size());
  }
};

// ---------------------------------------------------------------------------
// Graph bindings
// ---------------------------------------------------------------------------

struct BoundAttention {
  Var wq, bq, wk, bk, wv, bv, wo, bo;
};

struct BoundBlock {
  Var ln1_gamma, ln1_beta;
  BoundAttention attn;
  Var ln2_gamma, ln2_beta;
  Var fc1, fc1_bias, fc2, fc2_bias;
};

/// One encoder tower's weights as nodes of a Graph.
struct BoundTower {
  Modality modality = Modality::vision;
  std::size_t heads = 1;
  double ln_eps = 1e-5;
  Var token_embedding, position_embedding;
  std::vector<BoundBlock> blocks;
  Var final_gamma, final_beta;
  Var projection;

  std::size_t layers() const { return blocks.size(); }
};

namespace detail {

template <typename TowerT, typename BindFn>
BoundTower bind_tower(TowerT& t, const EncoderConfig& cfg, Modality m, BindFn&& bind) {
  BoundTower b;
  b.modality = m;
  b.heads = cfg.heads;
  b.ln_eps = cfg.ln_eps;
  std::vector<Var> flat;
  visit_tower(t, std::string(modality_name(m)), [&](const std::string& name, const Tensor& tensor) {
    flat.push_back(bind(name, tensor));
  });
  std::size_t i = 0;
  b.token_embedding = flat[i++];
  b.position_embedding = flat[i++];
  for (std::size_t l = 0; l < t.blocks.size(); ++l) {
    BoundBlock blk;
    for (Var* slot : {&blk.ln1_gamma, &blk.ln1_beta, &blk.attn.wq, &blk.attn.bq, &blk.attn.wk, &blk.attn.bk,
                      &blk.attn.wv, &blk.attn.bv, &blk.attn.wo, &blk.attn.bo, &blk.ln2_gamma, &blk.ln2_beta,
                      &blk.fc1, &blk.fc1_bias, &blk.fc2, &blk.fc2_bias}) {
      *slot = flat[i++];
    }
    b.blocks.push_back(blk);
  }
  b.final_gamma = flat[i++];
  b.final_beta = flat[i++];
  b.projection = flat[i++];
  return b;
}

}  // namespace detail

// Frozen weights: referenced as constants, never receive gradient storage.
inline BoundTower bind_frozen(Graph& g, const EncoderWeights& w, Modality m) {
  return detail::bind_tower(w.tower(m), w.config, m,
                            [&](const std::string&, const Tensor& t) { return g.constant_ref(t); });
}

// Every tensor becomes a named requires_grad leaf (used only by pretraining).
inline BoundTower bind_trainable(Graph& g, const EncoderWeights& w, Modality m) {
  return detail::bind_tower(w.tower(m), w.config, m,
                            [&](const std::string& name, const Tensor& t) { return g.parameter(t, name); });
}

// ---------------------------------------------------------------------------
// Forward pieces
// ---------------------------------------------------------------------------

/// Counts transformer block applications.
struct BlockCounter {
  std::size_t evaluations = 0;
};

inline Var embed(const TokenSequence& x, const BoundTower& tower) {
  const Tensor& table = tower.position_embedding.value();
  if (x.ids.size() > table.dim(0)) {
    throw InputError("sequence of " + std::to_string(x.ids.size()) + " tokens exceeds positional table of " +
                     std::to_string(table.dim(0)));
  }
  std::vector<std::size_t> positions(x.ids.size());
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = i;
  return add(gather_rows(tower.token_embedding, x.ids), gather_rows(tower.position_embedding, positions));
}

/// Per-head attention readout, concatenated, before the output projection.
inline Var attention_readout(Var seq, const BoundAttention& w, std::size_t heads,
                             const std::vector<bool>* mask = nullptr) {
  const std::size_t d = seq.value().dim(1);
  if (heads == 0 || d % heads != 0) {
    throw ConfigError("width " + std::to_string(d) + " not divisible by " + std::to_string(heads) + " heads");
  }
  const std::size_t dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  Var q = add_bias(matmul(seq, w.wq), w.bq);
  Var k = add_bias(matmul(seq, w.wk), w.bk);
  Var v = add_bias(matmul(seq, w.wv), w.bv);
  std::vector<Var> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    Var qh = slice_cols(q, h * dh, (h + 1) * dh);
    Var kh = slice_cols(k, h * dh, (h + 1) * dh);
    Var vh = slice_cols(v, h * dh, (h + 1) * dh);
    Var scores = scale(matmul(qh, transpose(kh)), inv_sqrt);
    outs.push_back(matmul(softmax(scores, mask), vh));
  }
  return heads == 1 ? outs.front() : concat_cols(outs);
}

/// Scaled dot-product attention over all heads followed by the output
/// projection. `mask[i*T+j] == true` lets position i attend to j.
inline Var multi_head_attention(Var seq, const BoundAttention& w, std::size_t heads,
                                const std::vector<bool>* mask = nullptr) {
  return add_bias(matmul(attention_readout(seq, w, heads, mask), w.wo), w.bo);
}

// Pre-norm block: x + Attn(LN(x)), then x + MLP(LN(x)).
inline Var transformer_block(Var x, const BoundBlock& b, std::size_t heads, double eps,
                             const std::vector<bool>* mask = nullptr) {
  Var attn = multi_head_attention(layer_norm(x, b.ln1_gamma, b.ln1_beta, eps), b.attn, heads, mask);
  x = add(x, attn);
  Var hidden = gelu(add_bias(matmul(layer_norm(x, b.ln2_gamma, b.ln2_beta, eps), b.fc1), b.fc1_bias));
  return add(x, add_bias(matmul(hidden, b.fc2), b.fc2_bias));
}

/// Applies blocks [from, to) and adds (to - from) to the counter.
inline Var run_blocks(Var seq, const BoundTower& tower, std::size_t from, std::size_t to, BlockCounter& counter,
                      const std::vector<bool>* mask = nullptr) {
  if (from > to || to > tower.layers()) {
    throw ContractError("run_blocks range [" + std::to_string(from) + ", " + std::to_string(to) +
                        ") outside 0.." + std::to_string(tower.layers()));
  }
  for (std::size_t l = from; l < to; ++l) seq = transformer_block(seq, tower.blocks[l], tower.heads, tower.ln_eps, mask);
  counter.evaluations += to - from;
  return seq;
}

/// Row of the running sequence holding the original CLS/EOS token when
/// `prepended` thought tokens sit in front of it.
inline std::size_t readout_row(const TokenSequence& x, std::size_t prepended) {
  return x.readout_index() + prepended;
}

/// Final-LayerNorm readout at the original CLS/EOS position.
inline Var pool(Var seq, const TokenSequence& x, std::size_t prepended, const BoundTower& tower) {
  const std::size_t index = readout_row(x, prepended);
  if (seq.value().rank() != 2 || index >= seq.value().dim(0)) {
    throw ContractError("pool index " + std::to_string(index) + " outside sequence " + shape_string(seq.shape()));
  }
  return layer_norm(row(seq, index), tower.final_gamma, tower.final_beta, tower.ln_eps);
}

/// pi_m h, normalized to unit length.
inline Var project(Var pooled, const BoundTower& tower, bool* clamped = nullptr) {
  return l2_normalize(vecmat(pooled, tower.projection), kNormFloor, clamped);
}

/// Plain frozen forward: embedding of the pooled readout after all L blocks.
struct FrozenEncoding {
  Tensor pooled;
  Tensor embedding;
  std::size_t block_evaluations = 0;
};

inline FrozenEncoding frozen_forward(const TokenSequence& x, const EncoderWeights& w) {
  x.validate(w.config);
  Graph g;
  BoundTower tower = bind_frozen(g, w, x.modality);
  BlockCounter counter;
  Var seq = run_blocks(embed(x, tower), tower, 0, tower.layers(), counter);
  Var h = pool(seq, x, 0, tower);
  Var e = project(h, tower);
  return {h.value(), e.value(), counter.evaluations};
}

}  // namespace latent_loop
