#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "upt/adapters.hpp"
#include "upt/attention.hpp"
#include "upt/gradcheck.hpp"
#include "upt/tensor.hpp"

namespace upt {

// Reserved text vocabulary entries.
inline constexpr int kBosId = 0;
inline constexpr int kEosId = 1;
inline constexpr int kMaskId = 2;
inline constexpr int kFirstContentId = 3;

struct ImageEncoderConfig {
  std::size_t image_h = 16;
  std::size_t image_w = 8;
  std::size_t patch = 4;
  std::size_t in_dim = 16;  // features per patch supplied by the harness
  std::size_t d = 32;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 4;
  std::size_t d_out = 64;

  std::size_t num_patches() const { return image_h * image_w / (patch * patch); }
  std::size_t seq_len() const { return num_patches() + 1; }

  void validate() const {
    if (patch == 0 || (image_h * image_w) % (patch * patch) != 0) {
      throw ConfigError("image " + std::to_string(image_h) + "x" + std::to_string(image_w) +
                        " is not divisible into " + std::to_string(patch) + "px patches");
    }
    if (heads == 0 || d % heads != 0) throw ConfigError("image width not divisible by heads");
    if (in_dim == 0 || layers == 0 || d_out == 0 || mlp_ratio == 0) {
      throw ConfigError("image encoder dimensions must be positive");
    }
  }
};

struct TextEncoderConfig {
  std::size_t vocab = 64;
  std::size_t max_len = 12;  // including BOS and EOS
  std::size_t d = 32;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 4;
  std::size_t d_out = 64;
  double mask_rate = 0.15;

  void validate() const {
    if (vocab <= static_cast<std::size_t>(kFirstContentId)) throw ConfigError("text vocab too small");
    if (max_len < 3) throw ConfigError("text max_len must leave room for BOS, EOS and a token");
    if (heads == 0 || d % heads != 0) throw ConfigError("text width not divisible by heads");
    if (mask_rate < 0.0 || mask_rate > 1.0) throw ConfigError("mask_rate must lie in [0, 1]");
    if (layers == 0 || d_out == 0 || mlp_ratio == 0) {
      throw ConfigError("text encoder dimensions must be positive");
    }
  }
};

struct PETLConfig {
  std::size_t prefix_len = 2;
  std::size_t lora_rank = 2;
  std::size_t adapter_bottleneck = 4;
  double s_p_init = 10.0;
  Placement placement = Placement::parallel_ln;
  bool sprefix = true;
  bool lora = true;
  bool l_adapter = true;

  bool any() const { return sprefix || lora || l_adapter; }
  bool ln_tuning() const { return l_adapter && placement == Placement::ln_tuning; }
  bool uses_adapters() const { return l_adapter && placement != Placement::ln_tuning; }

  static PETLConfig disabled() {
    PETLConfig c;
    c.sprefix = c.lora = c.l_adapter = false;
    return c;
  }
};

// ---------------------------------------------------------------------------
// Transformer block.

struct MlpWeights {
  ParamTensor fc1;       // [d x hidden]
  ParamTensor fc1_bias;  // [hidden]
  ParamTensor fc2;       // [hidden x d]
  ParamTensor fc2_bias;  // [d]
};

struct MlpCache {
  Tensor x, pre, hidden;
};

inline Tensor add_row_bias(Tensor y, const Tensor& bias) {
  for (std::size_t i = 0; i < y.rows(); ++i)
    for (std::size_t j = 0; j < y.cols(); ++j) y(i, j) += bias[j];
  return y;
}

inline Tensor column_sums(const Tensor& g) {
  Tensor s(Shape{g.cols()});
  for (std::size_t i = 0; i < g.rows(); ++i)
    for (std::size_t j = 0; j < g.cols(); ++j) s[j] += g(i, j);
  return s;
}

inline Tensor mlp_forward(const Tensor& x, const MlpWeights& m, MlpCache* cache = nullptr) {
  Tensor pre = add_row_bias(matmul(x, m.fc1.value), m.fc1_bias.value);
  Tensor hidden = activation(Activation::gelu, pre);
  Tensor y = add_row_bias(matmul(hidden, m.fc2.value), m.fc2_bias.value);
  if (cache) *cache = {x, std::move(pre), std::move(hidden)};
  return y;
}

inline Tensor mlp_backward(const Tensor& grad_y, MlpWeights& m, const MlpCache& c) {
  m.fc2.accumulate_lazy([&] { return matmul_tn(c.hidden, grad_y); });
  m.fc2_bias.accumulate(column_sums(grad_y));
  const Tensor d_pre = activation_backward(Activation::gelu, c.pre, matmul_nt(grad_y, m.fc2.value));
  m.fc1.accumulate_lazy([&] { return matmul_tn(c.x, d_pre); });
  m.fc1_bias.accumulate(column_sums(d_pre));
  return matmul_nt(d_pre, m.fc1.value);
}

struct Block {
  AttentionWeights attn;
  LayerNormParams ln1, ln2;
  MlpWeights mlp;
  // PETL hooks, present only when attached.
  std::optional<PrefixBank> prefix;
  std::optional<LoraPair> lora_k, lora_v;
  std::optional<AdapterBlock> adapter1, adapter2;  // at the MHA and MLP sites

  static Block random(std::size_t d, std::size_t heads, std::size_t mlp_ratio, Rng& rng) {
    const std::size_t hidden = d * mlp_ratio;
    Block b;
    b.attn = AttentionWeights::random(d, heads, rng);
    b.ln1 = LayerNormParams::identity(d);
    b.ln2 = LayerNormParams::identity(d);
    b.mlp.fc1 = ParamTensor(gaussian({d, hidden}, 1.0 / std::sqrt(double(d)), rng));
    b.mlp.fc1_bias = ParamTensor(Tensor(Shape{hidden}));
    b.mlp.fc2 = ParamTensor(gaussian({hidden, d}, 1.0 / std::sqrt(double(hidden)), rng));
    b.mlp.fc2_bias = ParamTensor(Tensor(Shape{d}));
    return b;
  }

  PetlAttention attention_hooks(const PETLConfig& petl) const {
    PetlAttention hooks;
    if (petl.sprefix && prefix) hooks.prefix = &*prefix;
    if (petl.lora && lora_k) hooks.lora_k = &*lora_k;
    if (petl.lora && lora_v) hooks.lora_v = &*lora_v;
    return hooks;
  }
};

struct BlockCache {
  SiteCache site1, site2;
  AttentionCache attn;
  MlpCache mlp;
};

// Pre-LN residual block with PETL hooks at LN1, LN2 and inside MHA:
//   x̂ = x + MHA_petl(LN1_petl(x)),  out = x̂ + MLP(LN2_petl(x̂)).
inline Tensor block_forward(const Tensor& x, const Block& b, const PETLConfig& petl, MaskKind mask,
                            BlockCache* cache = nullptr) {
  if (x.cols() != b.attn.width()) {
    throw ShapeError("block input " + shape_str(x.shape()) + " does not match width " +
                     std::to_string(b.attn.width()));
  }
  BlockCache local;
  BlockCache& c = cache ? *cache : local;
  const PetlAttention hooks = b.attention_hooks(petl);
  const bool adapters = petl.uses_adapters();
  const AdapterBlock* a1 = adapters && b.adapter1 ? &*b.adapter1 : nullptr;
  const AdapterBlock* a2 = adapters && b.adapter2 ? &*b.adapter2 : nullptr;
  Tensor mid = detail::site_forward(
      x, [&](const Tensor& z) { return sprefix_attend(z, b.attn, hooks, mask, &c.attn); }, b.ln1,
      a1, petl.placement, &c.site1);
  return detail::site_forward(
      mid, [&](const Tensor& z) { return mlp_forward(z, b.mlp, &c.mlp); }, b.ln2, a2,
      petl.placement, &c.site2);
}

inline Tensor block_backward(const Tensor& grad_y, Block& b, const PETLConfig& petl, MaskKind mask,
                             const BlockCache& c) {
  const bool adapters = petl.uses_adapters();
  AdapterBlock* a1 = adapters && b.adapter1 ? &*b.adapter1 : nullptr;
  AdapterBlock* a2 = adapters && b.adapter2 ? &*b.adapter2 : nullptr;
  PrefixBank* prefix = petl.sprefix && b.prefix ? &*b.prefix : nullptr;
  LoraPair* lk = petl.lora && b.lora_k ? &*b.lora_k : nullptr;
  LoraPair* lv = petl.lora && b.lora_v ? &*b.lora_v : nullptr;
  Tensor d_mid = detail::site_backward(
      grad_y, [&](const Tensor& g) { return mlp_backward(g, b.mlp, c.mlp); }, b.ln2, a2,
      petl.placement, c.site2);
  return detail::site_backward(
      d_mid,
      [&](const Tensor& g) {
        return sprefix_attend_backward(g, c.attn, b.attn, prefix, lk, lv, mask);
      },
      b.ln1, a1, petl.placement, c.site1);
}

// ---------------------------------------------------------------------------
// Towers.

enum class TowerKind { image, text };

struct Tower {
  TowerKind kind = TowerKind::image;
  std::size_t heads = 1;
  std::size_t max_len = 0;   // text only
  double mask_rate = 0.0;    // text only
  ParamTensor embed;         // image: patch projection [in_dim x d]; text: token table [vocab x d]
  ParamTensor cls;           // image only: [1 x d]
  ParamTensor pos;           // [seq x d]
  std::vector<Block> blocks;
  LayerNormParams ln_final;
  ParamTensor proj;          // [d x d_out]
  bool merged = false;       // LoRA folded into W_k / W_v

  std::size_t width() const { return pos.value.cols(); }
  const char* prefix_name() const { return kind == TowerKind::image ? "image" : "text"; }

  template <class Fn>
  void visit(Fn&& fn) {
    visit_impl(*this, fn);
  }
  template <class Fn>
  void visit(Fn&& fn) const {
    visit_impl(*this, fn);
  }

 private:
  template <class Self, class Fn>
  static void visit_impl(Self& t, Fn& fn) {
    const std::string root = t.prefix_name();
    fn(root + ".embed", t.embed);
    if (t.kind == TowerKind::image) fn(root + ".cls", t.cls);
    fn(root + ".pos", t.pos);
    for (std::size_t i = 0; i < t.blocks.size(); ++i) {
      auto& b = t.blocks[i];
      const std::string p = root + ".blocks." + std::to_string(i) + ".";
      fn(p + "attn.w_q", b.attn.w_q);
      fn(p + "attn.w_k", b.attn.w_k);
      fn(p + "attn.w_v", b.attn.w_v);
      fn(p + "attn.w_o", b.attn.w_o);
      fn(p + "ln1.gain", b.ln1.gain);
      fn(p + "ln1.bias", b.ln1.bias);
      fn(p + "ln2.gain", b.ln2.gain);
      fn(p + "ln2.bias", b.ln2.bias);
      fn(p + "mlp.fc1", b.mlp.fc1);
      fn(p + "mlp.fc1_bias", b.mlp.fc1_bias);
      fn(p + "mlp.fc2", b.mlp.fc2);
      fn(p + "mlp.fc2_bias", b.mlp.fc2_bias);
      if (b.prefix) {
        fn(p + "prefix.keys", b.prefix->keys);
        fn(p + "prefix.values", b.prefix->values);
        fn(p + "prefix.scale", b.prefix->scale);
      }
      for (auto [name, lora] : {std::pair{"lora_k", &b.lora_k}, std::pair{"lora_v", &b.lora_v}}) {
        if (!*lora) continue;
        fn(p + name + ".down", (*lora)->down);
        fn(p + name + ".up", (*lora)->up);
        fn(p + name + ".scale", (*lora)->scale);
      }
      for (auto [name, ad] :
           {std::pair{"adapter1", &b.adapter1}, std::pair{"adapter2", &b.adapter2}}) {
        if (!*ad) continue;
        fn(p + name + ".down", (*ad)->down);
        fn(p + name + ".up", (*ad)->up);
        fn(p + name + ".scale", (*ad)->scale);
      }
    }
    fn(root + ".ln_final.gain", t.ln_final.gain);
    fn(root + ".ln_final.bias", t.ln_final.bias);
    fn(root + ".proj", t.proj);
  }
};

inline bool is_petl_param(const std::string& name) {
  return name.find(".prefix.") != std::string::npos || name.find(".lora_") != std::string::npos ||
         name.find(".adapter") != std::string::npos;
}

inline bool is_site_layernorm(const std::string& name) {
  return name.find(".ln1.") != std::string::npos || name.find(".ln2.") != std::string::npos;
}

inline Tower make_image_tower(const ImageEncoderConfig& cfg, Rng& rng) {
  cfg.validate();
  Tower t;
  t.kind = TowerKind::image;
  t.heads = cfg.heads;
  t.embed = ParamTensor(gaussian({cfg.in_dim, cfg.d}, 1.0 / std::sqrt(double(cfg.in_dim)), rng));
  t.cls = ParamTensor(gaussian({1, cfg.d}, 0.1, rng));
  t.pos = ParamTensor(gaussian({cfg.seq_len(), cfg.d}, 0.1, rng));
  for (std::size_t i = 0; i < cfg.layers; ++i)
    t.blocks.push_back(Block::random(cfg.d, cfg.heads, cfg.mlp_ratio, rng));
  t.ln_final = LayerNormParams::identity(cfg.d);
  t.proj = ParamTensor(gaussian({cfg.d, cfg.d_out}, 1.0 / std::sqrt(double(cfg.d)), rng));
  return t;
}

inline Tower make_text_tower(const TextEncoderConfig& cfg, Rng& rng) {
  cfg.validate();
  Tower t;
  t.kind = TowerKind::text;
  t.heads = cfg.heads;
  t.max_len = cfg.max_len;
  t.mask_rate = cfg.mask_rate;
  t.embed = ParamTensor(gaussian({cfg.vocab, cfg.d}, 1.0, rng));
  t.pos = ParamTensor(gaussian({cfg.max_len, cfg.d}, 0.1, rng));
  for (std::size_t i = 0; i < cfg.layers; ++i)
    t.blocks.push_back(Block::random(cfg.d, cfg.heads, cfg.mlp_ratio, rng));
  t.ln_final = LayerNormParams::identity(cfg.d);
  t.proj = ParamTensor(gaussian({cfg.d, cfg.d_out}, 1.0 / std::sqrt(double(cfg.d)), rng));
  return t;
}

// ---------------------------------------------------------------------------
// Encoding.

struct TowerCache {
  Tensor input;             // image: patch features
  std::vector<int> tokens;  // text: framed (and possibly masked) ids
  std::vector<BlockCache> blocks;
  std::size_t pooled_index = 0;
  Tensor pooled;            // block output at the pooled position [1 x d]
  LayerNormCache ln;
  Tensor normalized;        // ln_final(pooled)
  Tensor projected;         // before L2 normalization [1 x d_out]
  Tensor embedding;         // unit norm [1 x d_out]
};

namespace detail {

inline Tensor run_blocks(Tensor h, const Tower& t, const PETLConfig& petl, MaskKind mask,
                         TowerCache* cache) {
  if (cache) cache->blocks.resize(t.blocks.size());
  for (std::size_t i = 0; i < t.blocks.size(); ++i)
    h = block_forward(h, t.blocks[i], petl, mask, cache ? &cache->blocks[i] : nullptr);
  return h;
}

inline Tensor pool_and_project(const Tensor& h, std::size_t index, const Tower& t,
                               TowerCache* cache) {
  Tensor pooled = slice_rows(h, index, 1);
  LayerNormCache ln;
  Tensor normalized = layer_norm(pooled, t.ln_final.gain.value, t.ln_final.bias.value,
                                 t.ln_final.eps, &ln);
  Tensor projected = matmul(normalized, t.proj.value);
  Tensor embedding = l2_normalize(projected);
  if (cache) {
    cache->pooled_index = index;
    cache->pooled = std::move(pooled);
    cache->ln = std::move(ln);
    cache->normalized = std::move(normalized);
    cache->projected = std::move(projected);
    cache->embedding = embedding;
  }
  return embedding;
}

}  // namespace detail

// Patch features [N x in_dim] -> unit-norm embedding [1 x d_out]. The CLS
// token is prepended, positions added, and the CLS output is projected.
inline Tensor encode_image(const Tensor& patches, const Tower& t, const PETLConfig& petl,
                           TowerCache* cache = nullptr) {
  if (t.kind != TowerKind::image) throw ContractError("encode_image needs the image tower");
  const std::size_t n = t.pos.value.rows() - 1;
  if (patches.rows() != n || patches.cols() != t.embed.value.rows()) {
    throw ShapeError("image patches " + shape_str(patches.shape()) + " do not match " +
                     shape_str({n, t.embed.value.rows()}));
  }
  const std::size_t d = t.width();
  Tensor h(n + 1, d);
  const Tensor embedded = matmul(patches, t.embed.value);
  for (std::size_t j = 0; j < d; ++j) h(0, j) = t.cls.value[j] + t.pos.value(0, j);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) h(i + 1, j) = embedded(i, j) + t.pos.value(i + 1, j);
  if (cache) cache->input = patches;
  h = detail::run_blocks(std::move(h), t, petl, MaskKind::none, cache);
  return detail::pool_and_project(h, 0, t, cache);
}

// BOS + content + EOS, truncating the content so the framed length is at most
// max_len with EOS kept as the final token.
inline std::vector<int> frame_tokens(std::span<const int> content, std::size_t max_len,
                                     std::size_t vocab) {
  std::vector<int> framed{kBosId};
  const std::size_t keep = std::min(content.size(), max_len - 2);
  for (std::size_t i = 0; i < keep; ++i) {
    if (content[i] < 0 || static_cast<std::size_t>(content[i]) >= vocab) {
      throw ContractError("token id " + std::to_string(content[i]) + " outside vocab of " +
                          std::to_string(vocab));
    }
    framed.push_back(content[i]);
  }
  framed.push_back(kEosId);
  return framed;
}

// Token ids (without BOS/EOS) -> unit-norm embedding [1 x d_out] read at the
// EOS position under causal attention. With training=true each content token
// is independently replaced by the MASK id with probability mask_rate.
inline Tensor encode_text(std::span<const int> content, const Tower& t, const PETLConfig& petl,
                          bool training, Rng* rng, TowerCache* cache = nullptr) {
  if (t.kind != TowerKind::text) throw ContractError("encode_text needs the text tower");
  std::vector<int> tokens = frame_tokens(content, t.max_len, t.embed.value.rows());
  if (training && t.mask_rate > 0.0) {
    if (!rng) throw ContractError("training-mode text encoding needs a random generator");
    std::bernoulli_distribution coin(t.mask_rate);
    for (std::size_t i = 1; i + 1 < tokens.size(); ++i)
      if (coin(*rng)) tokens[i] = kMaskId;
  }
  const std::size_t n = tokens.size(), d = t.width();
  Tensor h(n, d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j)
      h(i, j) = t.embed.value(static_cast<std::size_t>(tokens[i]), j) + t.pos.value(i, j);
  if (cache) cache->tokens = tokens;
  h = detail::run_blocks(std::move(h), t, petl, MaskKind::causal, cache);
  return detail::pool_and_project(h, n - 1, t, cache);
}

// Backward of encode_image / encode_text given dL/d(embedding).
inline void encode_backward(const Tensor& grad_embedding, Tower& t, const PETLConfig& petl,
                            const TowerCache& c) {
  const Tensor d_proj_out = l2_normalize_backward(c.projected, c.embedding, grad_embedding);
  t.proj.accumulate_lazy([&] { return matmul_tn(c.normalized, d_proj_out); });
  const Tensor d_norm = matmul_nt(d_proj_out, t.proj.value);
  LayerNormGrads g = layer_norm_backward(d_norm, t.ln_final.gain.value, c.ln);
  t.ln_final.gain.accumulate(g.dgain);
  t.ln_final.bias.accumulate(g.dbias);

  const std::size_t seq = t.kind == TowerKind::image ? c.input.rows() + 1 : c.tokens.size();
  const MaskKind mask = t.kind == TowerKind::image ? MaskKind::none : MaskKind::causal;
  Tensor dh(seq, t.width());
  for (std::size_t j = 0; j < t.width(); ++j) dh(c.pooled_index, j) = g.dx[j];
  for (std::size_t i = t.blocks.size(); i-- > 0;)
    dh = block_backward(dh, t.blocks[i], petl, mask, c.blocks[i]);

  if (t.pos.trainable) {
    Tensor dpos(t.pos.shape());
    for (std::size_t i = 0; i < seq; ++i)
      for (std::size_t j = 0; j < t.width(); ++j) dpos(i, j) = dh(i, j);
    t.pos.accumulate(dpos);
  }
  if (t.kind == TowerKind::image) {
    t.cls.accumulate(slice_rows(dh, 0, 1));
    if (t.embed.trainable) t.embed.accumulate(matmul_tn(c.input, slice_rows(dh, 1, seq - 1)));
  } else if (t.embed.trainable) {
    Tensor dembed(t.embed.shape());
    for (std::size_t i = 0; i < seq; ++i)
      for (std::size_t j = 0; j < t.width(); ++j)
        dembed(static_cast<std::size_t>(c.tokens[i]), j) += dh(i, j);
    t.embed.accumulate(dembed);
  }
}

// ---------------------------------------------------------------------------
// Two-tower model and PETL attachment.

struct DualEncoder {
  ImageEncoderConfig image_cfg;
  TextEncoderConfig text_cfg;
  PETLConfig petl = PETLConfig::disabled();
  Tower image;
  Tower text;

  static DualEncoder init(const ImageEncoderConfig& icfg, const TextEncoderConfig& tcfg, Rng& rng) {
    DualEncoder m{icfg, tcfg, PETLConfig::disabled(), make_image_tower(icfg, rng),
                  make_text_tower(tcfg, rng)};
    return m;
  }

  template <class Fn>
  void visit(Fn&& fn) {
    image.visit(fn);
    text.visit(fn);
  }
  template <class Fn>
  void visit(Fn&& fn) const {
    image.visit(fn);
    text.visit(fn);
  }

  std::vector<NamedParam> params();
  bool merged() const { return image.merged || text.merged; }
};

inline std::vector<NamedParam> DualEncoder::params() {
  std::vector<NamedParam> out;
  visit([&](const std::string& name, ParamTensor& p) { out.push_back({name, &p}); });
  return out;
}

inline void zero_grads(DualEncoder& m) {
  m.visit([](const std::string&, ParamTensor& p) { p.zero_grad(); });
}

// Every tensor trainable: the pretraining (full-tuning) regime.
inline void set_full_tuning(DualEncoder& m) {
  m.visit([](const std::string&, ParamTensor& p) { p.trainable = true; });
}

// Applies the frozen-backbone partition for m.petl: backbone frozen, attached
// PETL tensors trainable, site layernorms trainable only under LN-tuning.
inline void apply_partition(DualEncoder& m) {
  const bool ln_tuning = m.petl.ln_tuning();
  m.visit([&](const std::string& name, ParamTensor& p) {
    if (is_petl_param(name)) {
      p.trainable = true;
    } else {
      p.trainable = ln_tuning && is_site_layernorm(name);
    }
    p.zero_grad();
  });
}

inline void attach_tower_petl(Tower& t, const PETLConfig& petl, Rng& rng) {
  const std::size_t d = t.width();
  for (Block& b : t.blocks) {
    b.prefix.reset();
    b.lora_k.reset();
    b.lora_v.reset();
    b.adapter1.reset();
    b.adapter2.reset();
    if (petl.sprefix) b.prefix = PrefixBank::init(petl.prefix_len, d, petl.s_p_init, rng);
    if (petl.lora) {
      b.lora_k = LoraPair::init(d, petl.lora_rank, rng);
      b.lora_v = LoraPair::init(d, petl.lora_rank, rng);
    }
    if (petl.uses_adapters()) {
      b.adapter1 = AdapterBlock::init(d, petl.adapter_bottleneck, rng);
      b.adapter2 = AdapterBlock::init(d, petl.adapter_bottleneck, rng);
    }
  }
}

// Freezes the backbone and attaches freshly initialized PETL modules to both
// towers per `petl`.
inline void attach_petl(DualEncoder& m, const PETLConfig& petl, Rng& rng) {
  m.petl = petl;
  attach_tower_petl(m.image, petl, rng);
  attach_tower_petl(m.text, petl, rng);
  apply_partition(m);
}

inline void detach_petl(DualEncoder& m) {
  Rng unused(0);
  PETLConfig off = PETLConfig::disabled();
  off.placement = m.petl.placement;
  m.petl = off;
  attach_tower_petl(m.image, off, unused);
  attach_tower_petl(m.text, off, unused);
  apply_partition(m);
}

// Folds every LoRA pair into its frozen W_k / W_v and removes the pairs.
inline void merge_model_lora(DualEncoder& m) {
  if (m.merged()) throw StateError("model is already LoRA-merged");
  bool any = false;
  for (Tower* t : {&m.image, &m.text}) {
    for (Block& b : t->blocks) {
      if (b.lora_k) {
        b.attn.w_k.value = merge_lora(b.attn.w_k.value, *b.lora_k);
        any = true;
      }
      if (b.lora_v) {
        b.attn.w_v.value = merge_lora(b.attn.w_v.value, *b.lora_v);
        any = true;
      }
      b.lora_k.reset();
      b.lora_v.reset();
    }
  }
  if (!any) throw StateError("model has no LoRA tensors to merge");
  m.image.merged = m.text.merged = true;
  m.petl.lora = false;
}

// ---------------------------------------------------------------------------
// Parameter accounting.

struct ParamInfo {
  std::string name;
  Shape shape;
  bool trainable = false;
  bool petl = false;

  std::size_t count() const { return shape_numel(shape); }
  friend bool operator==(const ParamInfo&, const ParamInfo&) = default;
};

struct ParamPartition {
  std::vector<ParamInfo> frozen;
  std::vector<ParamInfo> trainable;
  std::size_t frozen_count = 0;
  std::size_t trainable_count = 0;

  std::size_t total() const { return frozen_count + trainable_count; }
  double trainable_fraction() const {
    return total() == 0 ? 0.0 : static_cast<double>(trainable_count) / static_cast<double>(total());
  }
};

inline ParamPartition partition_from(const std::vector<ParamInfo>& infos) {
  ParamPartition p;
  for (const auto& info : infos) {
    if (info.trainable) {
      p.trainable.push_back(info);
      p.trainable_count += info.count();
    } else {
      p.frozen.push_back(info);
      p.frozen_count += info.count();
    }
  }
  return p;
}

inline std::vector<ParamInfo> describe_params(const DualEncoder& m) {
  std::vector<ParamInfo> infos;
  m.visit([&](const std::string& name, const ParamTensor& p) {
    infos.push_back({name, p.shape(), p.trainable, is_petl_param(name)});
  });
  return infos;
}

// Introspects an allocated model.
inline ParamPartition partition_params(const DualEncoder& m) {
  return partition_from(describe_params(m));
}

namespace detail {

struct TowerDims {
  const char* root;
  bool image;
  std::size_t input_rows;  // in_dim or vocab
  std::size_t seq;
  std::size_t d, layers, mlp_ratio, d_out;
};

inline void inventory_tower(const TowerDims& t, const PETLConfig& petl,
                            std::vector<ParamInfo>& out) {
  const bool ln_tuning = petl.ln_tuning();
  auto add = [&](const std::string& name, Shape shape) {
    const bool petl_param = is_petl_param(name);
    out.push_back({name, std::move(shape), petl_param || (ln_tuning && is_site_layernorm(name)),
                   petl_param});
  };
  const std::string root = t.root;
  const std::size_t d = t.d, hidden = t.d * t.mlp_ratio;
  add(root + ".embed", {t.input_rows, d});
  if (t.image) add(root + ".cls", {1, d});
  add(root + ".pos", {t.seq, d});
  for (std::size_t i = 0; i < t.layers; ++i) {
    const std::string p = root + ".blocks." + std::to_string(i) + ".";
    for (const char* w : {"attn.w_q", "attn.w_k", "attn.w_v", "attn.w_o"}) add(p + w, {d, d});
    for (const char* ln : {"ln1.gain", "ln1.bias", "ln2.gain", "ln2.bias"}) add(p + ln, {d});
    add(p + "mlp.fc1", {d, hidden});
    add(p + "mlp.fc1_bias", {hidden});
    add(p + "mlp.fc2", {hidden, d});
    add(p + "mlp.fc2_bias", {d});
    if (petl.sprefix) {
      add(p + "prefix.keys", {petl.prefix_len, d});
      add(p + "prefix.values", {petl.prefix_len, d});
      add(p + "prefix.scale", {1});
    }
    if (petl.lora) {
      for (const char* name : {"lora_k", "lora_v"}) {
        add(p + name + ".down", {d, petl.lora_rank});
        add(p + name + ".up", {petl.lora_rank, d});
        add(p + name + ".scale", {1});
      }
    }
    if (petl.uses_adapters()) {
      for (const char* name : {"adapter1", "adapter2"}) {
        add(p + name + ".down", {d, petl.adapter_bottleneck});
        add(p + name + ".up", {petl.adapter_bottleneck, d});
        add(p + name + ".scale", {1});
      }
    }
  }
  add(root + ".ln_final.gain", {d});
  add(root + ".ln_final.bias", {d});
  add(root + ".proj", {d, t.d_out});
}

}  // namespace detail

// The tensor inventory a DualEncoder with these configs would hold after
// attach_petl, computed without allocating it (usable at full CLIP scale).
inline std::vector<ParamInfo> param_inventory(const ImageEncoderConfig& icfg,
                                              const TextEncoderConfig& tcfg,
                                              const PETLConfig& petl) {
  std::vector<ParamInfo> out;
  detail::inventory_tower({"image", true, icfg.in_dim, icfg.seq_len(), icfg.d, icfg.layers,
                           icfg.mlp_ratio, icfg.d_out},
                          petl, out);
  detail::inventory_tower({"text", false, tcfg.vocab, tcfg.max_len, tcfg.d, tcfg.layers,
                           tcfg.mlp_ratio, tcfg.d_out},
                          petl, out);
  return out;
}

}  // namespace upt
