#pragma once

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "upt/tensor.hpp"

namespace upt {

enum class MaskKind { none, causal };

struct AttentionWeights {
  ParamTensor w_q, w_k, w_v, w_o;  // each [d x d]
  std::size_t heads = 1;

  std::size_t width() const { return w_q.value.rows(); }
  std::size_t head_dim() const { return width() / heads; }

  void validate() const {
    const std::size_t d = width();
    if (heads == 0 || d % heads != 0) {
      throw ConfigError("attention width " + std::to_string(d) + " is not divisible by " +
                        std::to_string(heads) + " heads");
    }
    for (const ParamTensor* w : {&w_q, &w_k, &w_v, &w_o}) {
      if (w->shape() != Shape{d, d}) {
        throw ShapeError("attention weight " + shape_str(w->shape()) + " is not " +
                         shape_str({d, d}));
      }
    }
  }

  static AttentionWeights random(std::size_t d, std::size_t heads, Rng& rng) {
    const double std = 1.0 / std::sqrt(static_cast<double>(d));
    AttentionWeights w{ParamTensor(gaussian({d, d}, std, rng)),
                       ParamTensor(gaussian({d, d}, std, rng)),
                       ParamTensor(gaussian({d, d}, std, rng)),
                       ParamTensor(gaussian({d, d}, std, rng)), heads};
    w.validate();
    return w;
  }
};

// Low-rank update W + s * down * up applied to a frozen projection.
struct LoraPair {
  ParamTensor down;   // [d x r]
  ParamTensor up;     // [r x d]
  ParamTensor scale;  // s, shape [1]

  std::size_t rank() const { return down.value.cols(); }

  void validate(std::size_t d) const {
    if (rank() >= d) {
      throw ConfigError("LoRA rank " + std::to_string(rank()) + " must be below width " +
                        std::to_string(d));
    }
    if (down.shape() != Shape{d, rank()} || up.shape() != Shape{rank(), d} || scale.size() != 1) {
      throw ShapeError("LoRA factors " + shape_str(down.shape()) + "/" + shape_str(up.shape()) +
                       " do not fit width " + std::to_string(d));
    }
  }

  // down ~ N(0, 0.02), up = 0, s = 1: the adapted projection starts equal to
  // the frozen one.
  static LoraPair init(std::size_t d, std::size_t rank, Rng& rng) {
    if (rank >= d) {
      throw ConfigError("LoRA rank " + std::to_string(rank) + " must be below width " +
                        std::to_string(d));
    }
    return {ParamTensor(gaussian({d, rank}, 0.02, rng)), ParamTensor(Tensor(rank, d)),
            ParamTensor(Tensor::scalar(1.0))};
  }
};

// Prefix key/value tokens plus the learnable prefix-attention scale S_p.
struct PrefixBank {
  ParamTensor keys;    // P_k [l x d]
  ParamTensor values;  // P_v [l x d]
  ParamTensor scale;   // S_p, shape [1]

  std::size_t length() const { return keys.value.size() == 0 ? 0 : keys.value.rows(); }

  void validate(std::size_t d) const {
    const std::size_t l = length();
    if (l > 0 && values.shape() != Shape{l, d}) {
      throw ConfigError("prefix of length " + std::to_string(l) + " has values " +
                        shape_str(values.shape()) + ", expected " + shape_str({l, d}));
    }
    if (l > 0 && keys.shape() != Shape{l, d}) {
      throw ShapeError("prefix keys " + shape_str(keys.shape()) + " do not fit width " +
                       std::to_string(d));
    }
    if (scale.size() != 1) throw ShapeError("prefix scale must be a scalar");
  }

  static PrefixBank init(std::size_t length, std::size_t d, double scale_init, Rng& rng) {
    return {ParamTensor(gaussian({length, d}, 0.02, rng)),
            ParamTensor(gaussian({length, d}, 0.02, rng)),
            ParamTensor(Tensor::scalar(scale_init))};
  }
};

// ---------------------------------------------------------------------------
// LoRA projection.

struct LoraCache {
  Tensor low;    // x * down
  Tensor delta;  // x * down * up
};

// y = xW + s * x * down * up. With lora == nullptr this is the plain xW.
inline Tensor lora_project(const Tensor& x, const Tensor& weight, const LoraPair* lora,
                           LoraCache* cache = nullptr) {
  Tensor y = matmul(x, weight);
  if (!lora) return y;
  lora->validate(weight.rows());
  Tensor low = matmul(x, lora->down.value);
  Tensor delta = matmul(low, lora->up.value);
  y.axpy(lora->scale.value.item(), delta);
  if (cache) *cache = {std::move(low), std::move(delta)};
  return y;
}

inline Tensor lora_project_backward(const Tensor& grad_y, const Tensor& x, ParamTensor& weight,
                                    LoraPair* lora, const LoraCache& cache) {
  weight.accumulate_lazy([&] { return matmul_tn(x, grad_y); });
  Tensor dx = matmul_nt(grad_y, weight.value);
  if (!lora) return dx;
  const double s = lora->scale.value.item();
  lora->scale.accumulate(0, dot(cache.delta, grad_y));
  Tensor d_delta = grad_y;
  d_delta *= s;
  lora->up.accumulate(matmul_tn(cache.low, d_delta));
  Tensor d_low = matmul_nt(d_delta, lora->up.value);
  lora->down.accumulate(matmul_tn(x, d_low));
  dx += matmul_nt(d_low, lora->down.value);
  return dx;
}

// Folds the low-rank update into a plain weight: W + s * down * up.
inline Tensor merge_lora(const Tensor& weight, const LoraPair& lora) {
  lora.validate(weight.rows());
  Tensor delta = matmul(lora.down.value, lora.up.value);
  Tensor merged = weight;
  merged.axpy(lora.scale.value.item(), delta);
  return merged;
}

// ---------------------------------------------------------------------------
// Multi-head attention with optional prefix tokens and LoRA on K/V.

struct PetlAttention {
  const PrefixBank* prefix = nullptr;
  const LoraPair* lora_k = nullptr;
  const LoraPair* lora_v = nullptr;
};

struct AttentionCache {
  Tensor x, q, k, v;
  Tensor context;              // concatenated head outputs, before W_o
  std::vector<Tensor> probs;   // per head [n x (l + n)], post-softmax, before S_p
  LoraCache lora_k, lora_v;
  std::size_t prefix_len = 0;
  double prefix_scale = 1.0;
};

inline bool masked(MaskKind mask, std::size_t query, std::size_t key) {
  return mask == MaskKind::causal && key > query;
}

// Softmax over the concatenated logits [x W_q P_kᵀ ; x W_q K'ᵀ] per head and
// query row. The prefix columns of the normalized weights are then multiplied
// by S_p before they meet [P_v ; V'], giving
//   h = (1 - λ) h_content + S_p λ softmax(x W_q P_kᵀ) P_v.
inline Tensor sprefix_attend(const Tensor& x, const AttentionWeights& w, const PetlAttention& petl,
                             MaskKind mask, AttentionCache* cache = nullptr) {
  w.validate();
  const std::size_t n = x.rows(), d = w.width(), heads = w.heads, dh = w.head_dim();
  if (x.cols() != d) {
    throw ShapeError("attention input " + shape_str(x.shape()) + " does not match width " +
                     std::to_string(d));
  }
  if (petl.prefix) petl.prefix->validate(d);
  const std::size_t l = petl.prefix ? petl.prefix->length() : 0;
  const double s_p = petl.prefix ? petl.prefix->scale.value.item() : 1.0;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  LoraCache kc, vc;
  Tensor q = matmul(x, w.w_q.value);
  Tensor k = lora_project(x, w.w_k.value, petl.lora_k, &kc);
  Tensor v = lora_project(x, w.w_v.value, petl.lora_v, &vc);

  Tensor context(n, d);
  std::vector<Tensor> probs(heads, Tensor(n, l + n));
  std::vector<double> logits(l + n);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t c0 = h * dh;
    Tensor& p = probs[h];
    for (std::size_t i = 0; i < n; ++i) {
      const double* qi = &q(i, c0);
      double mx = -INFINITY;
      for (std::size_t t = 0; t < l; ++t) {
        const double* pk = &petl.prefix->keys.value(t, c0);
        double acc = 0.0;
        for (std::size_t c = 0; c < dh; ++c) acc += qi[c] * pk[c];
        logits[t] = acc * inv_sqrt;
        mx = std::max(mx, logits[t]);
      }
      for (std::size_t j = 0; j < n; ++j) {
        if (masked(mask, i, j)) continue;
        const double* kj = &k(j, c0);
        double acc = 0.0;
        for (std::size_t c = 0; c < dh; ++c) acc += qi[c] * kj[c];
        logits[l + j] = acc * inv_sqrt;
        mx = std::max(mx, logits[l + j]);
      }
      double total = 0.0;
      for (std::size_t t = 0; t < l + n; ++t) {
        if (t >= l && masked(mask, i, t - l)) continue;
        p(i, t) = std::exp(logits[t] - mx);
        total += p(i, t);
      }
      for (std::size_t t = 0; t < l + n; ++t) p(i, t) /= total;

      double* out = &context(i, c0);
      for (std::size_t j = 0; j < n; ++j) {
        const double a = p(i, l + j);
        if (a == 0.0) continue;
        const double* vj = &v(j, c0);
        for (std::size_t c = 0; c < dh; ++c) out[c] += a * vj[c];
      }
      for (std::size_t t = 0; t < l; ++t) {
        const double a = s_p * p(i, t);
        const double* pv = &petl.prefix->values.value(t, c0);
        for (std::size_t c = 0; c < dh; ++c) out[c] += a * pv[c];
      }
    }
  }
  Tensor y = matmul(context, w.w_o.value);
  if (cache) {
    *cache = {x, std::move(q), std::move(k), std::move(v), std::move(context), std::move(probs),
              std::move(kc), std::move(vc), l, s_p};
  }
  return y;
}

inline Tensor attend(const Tensor& x, const AttentionWeights& w, MaskKind mask,
                     AttentionCache* cache = nullptr) {
  return sprefix_attend(x, w, {}, mask, cache);
}

// Backward of sprefix_attend. Accumulates into every trainable tensor among
// the weights, prefix and LoRA pairs and returns dL/dx.
inline Tensor sprefix_attend_backward(const Tensor& grad_y, const AttentionCache& cache,
                                      AttentionWeights& w, PrefixBank* prefix, LoraPair* lora_k,
                                      LoraPair* lora_v, MaskKind mask) {
  const std::size_t n = cache.x.rows(), d = w.width(), heads = w.heads, dh = w.head_dim();
  const std::size_t l = cache.prefix_len;
  const double s_p = cache.prefix_scale;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  if (l > 0 && (!prefix || prefix->length() != l)) {
    throw ContractError("backward needs the prefix bank used in the forward pass");
  }

  w.w_o.accumulate_lazy([&] { return matmul_tn(cache.context, grad_y); });
  const Tensor d_context = matmul_nt(grad_y, w.w_o.value);

  Tensor dq(n, d), dk(n, d), dv(n, d);
  Tensor d_pk(Shape{l, d}), d_pv(Shape{l, d});
  double d_scale = 0.0;
  std::vector<double> da(l + n);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t c0 = h * dh;
    const Tensor& p = cache.probs[h];
    for (std::size_t i = 0; i < n; ++i) {
      const double* g = &d_context(i, c0);
      // dL/d(probabilities) for the pre-scale softmax row.
      for (std::size_t t = 0; t < l; ++t) {
        const double* pv = &prefix->values.value(t, c0);
        double acc = 0.0;
        for (std::size_t c = 0; c < dh; ++c) acc += g[c] * pv[c];
        d_scale += p(i, t) * acc;
        da[t] = s_p * acc;
        double* dpv = &d_pv(t, c0);
        const double a = s_p * p(i, t);
        for (std::size_t c = 0; c < dh; ++c) dpv[c] += a * g[c];
      }
      for (std::size_t j = 0; j < n; ++j) {
        const double a = p(i, l + j);
        if (masked(mask, i, j)) {
          da[l + j] = 0.0;
          continue;
        }
        const double* vj = &cache.v(j, c0);
        double acc = 0.0;
        for (std::size_t c = 0; c < dh; ++c) acc += g[c] * vj[c];
        da[l + j] = acc;
        double* dvj = &dv(j, c0);
        for (std::size_t c = 0; c < dh; ++c) dvj[c] += a * g[c];
      }
      double inner = 0.0;
      for (std::size_t t = 0; t < l + n; ++t) inner += p(i, t) * da[t];

      const double* qi = &cache.q(i, c0);
      double* dqi = &dq(i, c0);
      for (std::size_t t = 0; t < l; ++t) {
        const double dlogit = p(i, t) * (da[t] - inner) * inv_sqrt;
        if (dlogit == 0.0) continue;
        const double* pk = &prefix->keys.value(t, c0);
        double* dpk = &d_pk(t, c0);
        for (std::size_t c = 0; c < dh; ++c) {
          dqi[c] += dlogit * pk[c];
          dpk[c] += dlogit * qi[c];
        }
      }
      for (std::size_t j = 0; j < n; ++j) {
        if (masked(mask, i, j)) continue;
        const double dlogit = p(i, l + j) * (da[l + j] - inner) * inv_sqrt;
        if (dlogit == 0.0) continue;
        const double* kj = &cache.k(j, c0);
        double* dkj = &dk(j, c0);
        for (std::size_t c = 0; c < dh; ++c) {
          dqi[c] += dlogit * kj[c];
          dkj[c] += dlogit * qi[c];
        }
      }
    }
  }
  if (prefix && l > 0) {
    prefix->keys.accumulate(d_pk);
    prefix->values.accumulate(d_pv);
    prefix->scale.accumulate(0, d_scale);
  }

  w.w_q.accumulate_lazy([&] { return matmul_tn(cache.x, dq); });
  Tensor dx = matmul_nt(dq, w.w_q.value);
  dx += lora_project_backward(dk, cache.x, w.w_k, lora_k, cache.lora_k);
  dx += lora_project_backward(dv, cache.x, w.w_v, lora_v, cache.lora_v);
  return dx;
}

// ---------------------------------------------------------------------------
// Analysis helpers: the prefix gate, the decomposed two-term form, and the
// LoRA expansion of Q K'ᵀ V'.

// Gate λ per head (rows) and query position (columns): the share of the
// softmax exp-mass that falls on prefix keys.
inline Tensor prefix_lambda(const Tensor& x, const AttentionWeights& w, const PetlAttention& petl,
                            MaskKind mask) {
  const std::size_t l = petl.prefix ? petl.prefix->length() : 0;
  if (l == 0) throw ConfigError("prefix gate is undefined without prefix tokens");
  const std::size_t n = x.rows(), heads = w.heads, dh = w.head_dim();
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  const Tensor q = matmul(x, w.w_q.value);
  const Tensor k = lora_project(x, w.w_k.value, petl.lora_k);
  Tensor gate(heads, n);
  for (std::size_t h = 0; h < heads; ++h) {
    const Tensor qh = slice_cols(q, h * dh, dh);
    const Tensor prefix_logits = matmul_nt(qh, slice_cols(petl.prefix->keys.value, h * dh, dh));
    const Tensor content_logits = matmul_nt(qh, slice_cols(k, h * dh, dh));
    for (std::size_t i = 0; i < n; ++i) {
      double mx = -INFINITY;
      for (std::size_t t = 0; t < l; ++t) mx = std::max(mx, prefix_logits(i, t) * inv_sqrt);
      for (std::size_t j = 0; j <= (mask == MaskKind::causal ? i : n - 1); ++j)
        mx = std::max(mx, content_logits(i, j) * inv_sqrt);
      double prefix_mass = 0.0, content_mass = 0.0;
      for (std::size_t t = 0; t < l; ++t) prefix_mass += std::exp(prefix_logits(i, t) * inv_sqrt - mx);
      for (std::size_t j = 0; j < n; ++j) {
        if (masked(mask, i, j)) continue;
        content_mass += std::exp(content_logits(i, j) * inv_sqrt - mx);
      }
      gate(h, i) = prefix_mass / (prefix_mass + content_mass);
    }
  }
  return gate;
}

struct DecomposedAttention {
  Tensor context;  // per-head outputs concatenated, before W_o
  Tensor output;   // context * W_o
};

// Evaluates the gated two-term form with separate softmaxes over the prefix
// logits and the content logits:
//   h = (1 - λ) softmax(Q K'ᵀ) V' + S_p λ softmax(Q P_kᵀ) P_v.
inline DecomposedAttention sprefix_decomposed(const Tensor& x, const AttentionWeights& w,
                                              const PetlAttention& petl, MaskKind mask) {
  const std::size_t n = x.rows(), d = w.width(), heads = w.heads, dh = w.head_dim();
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  const Tensor gate = prefix_lambda(x, w, petl, mask);
  const double s_p = petl.prefix->scale.value.item();
  const Tensor q = matmul(x, w.w_q.value);
  const Tensor k = lora_project(x, w.w_k.value, petl.lora_k);
  const Tensor v = lora_project(x, w.w_v.value, petl.lora_v);
  Tensor context(n, d);
  for (std::size_t h = 0; h < heads; ++h) {
    const Tensor qh = slice_cols(q, h * dh, dh);
    Tensor content_logits = matmul_nt(qh, slice_cols(k, h * dh, dh));
    content_logits *= inv_sqrt;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (masked(mask, i, j)) content_logits(i, j) = -INFINITY;
    Tensor prefix_logits = matmul_nt(qh, slice_cols(petl.prefix->keys.value, h * dh, dh));
    prefix_logits *= inv_sqrt;
    const Tensor content = matmul(softmax_rows(content_logits), slice_cols(v, h * dh, dh));
    const Tensor task = matmul(softmax_rows(prefix_logits),
                               slice_cols(petl.prefix->values.value, h * dh, dh));
    for (std::size_t i = 0; i < n; ++i) {
      const double lam = gate(h, i);
      for (std::size_t c = 0; c < dh; ++c)
        context(i, h * dh + c) = (1.0 - lam) * content(i, c) + s_p * lam * task(i, c);
    }
  }
  Tensor output = matmul(context, w.w_o.value);
  return {std::move(context), std::move(output)};
}

// The four terms of Q (K + ΔK)ᵀ (V + ΔV):
//   Q Kᵀ V,  Q Kᵀ ΔV,  Q ΔKᵀ V,  Q ΔKᵀ ΔV.
inline std::array<Tensor, 4> lora_expansion_terms(const Tensor& q, const Tensor& k, const Tensor& v,
                                                  const Tensor& dk, const Tensor& dv) {
  const Tensor qk = matmul_nt(q, k);
  const Tensor qdk = matmul_nt(q, dk);
  return {matmul(qk, v), matmul(qk, dv), matmul(qdk, v), matmul(qdk, dv)};
}

}  // namespace upt
