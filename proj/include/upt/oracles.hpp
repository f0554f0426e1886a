#pragma once

#include <algorithm>
#include <map>
#include <string>
#include <vector>

#include "upt/attention.hpp"
#include "upt/config.hpp"
#include "upt/encoder.hpp"
#include "upt/gradcheck.hpp"
#include "upt/objective.hpp"

namespace upt {

// Finite-difference and closed-form checks run by `upt gradcheck`.
//
// Gradients are grouped into classes by tensor role (prefix keys, LoRA up,
// adapter scale, ...) and each class reports its worst relative error over
// every seed and objective that exercises it.

struct GradientClassResult {
  std::string name;
  double worst_rel_error = 0.0;
  std::size_t coords_checked = 0;
};

struct EquivalenceResult {
  std::string name;
  double max_abs_error = 0.0;
  double tolerance = 0.0;
  bool passed() const { return max_abs_error <= tolerance; }
};

struct OracleReport {
  double tolerance = 1e-4;
  std::vector<GradientClassResult> gradients;
  std::vector<EquivalenceResult> equivalences;
  std::vector<std::string> frozen_violations;  // frozen tensors that received gradient

  bool gradients_passed() const {
    return std::all_of(gradients.begin(), gradients.end(),
                       [&](const auto& g) { return g.worst_rel_error <= tolerance; });
  }
  bool passed() const {
    return gradients_passed() && frozen_violations.empty() &&
           std::all_of(equivalences.begin(), equivalences.end(), [](const auto& e) { return e.passed(); });
  }
};

// Tensor-name suffix -> gradient class.
inline std::string gradient_class(const std::string& name) {
  static const std::vector<std::pair<std::string, std::string>> table{
      {"prefix.keys", "prefix.keys"},   {"prefix.values", "prefix.values"},
      {"prefix.scale", "prefix.scale"}, {"lora_k.down", "lora.down"},
      {"lora_v.down", "lora.down"},     {"lora_k.up", "lora.up"},
      {"lora_v.up", "lora.up"},         {"lora_k.scale", "lora.scale"},
      {"lora_v.scale", "lora.scale"},   {"adapter1.down", "adapter.down"},
      {"adapter2.down", "adapter.down"}, {"adapter1.up", "adapter.up"},
      {"adapter2.up", "adapter.up"},    {"adapter1.scale", "adapter.scale"},
      {"adapter2.scale", "adapter.scale"}, {"gain", "layernorm.gain"},
      {"bias", "layernorm.bias"},       {"sdm.image", "sdm.image_embedding"},
      {"sdm.text", "sdm.text_embedding"}};
  for (const auto& [suffix, cls] : table)
    if (name.size() >= suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0)
      return cls;
  return name;
}

namespace oracle_detail {

inline constexpr std::size_t kWidth = 16;
inline constexpr std::size_t kHeads = 2;
inline constexpr std::size_t kTokens = 5;
inline constexpr std::size_t kPrefix = 3;
inline constexpr std::size_t kRank = 2;
inline constexpr std::size_t kBottleneck = 4;

inline void randomize(ParamTensor& p, double std, Rng& rng) { p.value = gaussian(p.shape(), std, rng); }

inline void freeze(AttentionWeights& w) {
  for (ParamTensor* p : {&w.w_q, &w.w_k, &w.w_v, &w.w_o}) p->trainable = false;
}

class Collector {
 public:
  explicit Collector(OracleReport& report) : report_(report) {}

  void add(const GradCheckReport& r) {
    for (const auto& t : r.tensors) {
      if (t.frozen) {
        if (t.max_abs_grad != 0.0) report_.frozen_violations.push_back(t.name);
        continue;
      }
      auto& g = classes_[gradient_class(t.name)];
      g.name = gradient_class(t.name);
      g.worst_rel_error = std::max(g.worst_rel_error, t.max_rel_error);
      g.coords_checked += t.coords_checked;
    }
  }

  void finish() {
    for (auto& [name, g] : classes_) report_.gradients.push_back(g);
  }

 private:
  OracleReport& report_;
  std::map<std::string, GradientClassResult> classes_;
};

// S-Prefix attention with LoRA on K/V; the backbone projections are frozen.
inline GradCheckReport attention_case(std::uint64_t seed, const GradcheckSettings& s) {
  Rng rng(derive_seed(seed, 101));
  AttentionWeights w = AttentionWeights::random(kWidth, kHeads, rng);
  freeze(w);
  PrefixBank prefix = PrefixBank::init(kPrefix, kWidth, 10.0, rng);
  randomize(prefix.keys, 0.5, rng);
  randomize(prefix.values, 0.5, rng);
  LoraPair lk = LoraPair::init(kWidth, kRank, rng), lv = LoraPair::init(kWidth, kRank, rng);
  for (LoraPair* l : {&lk, &lv}) {
    randomize(l->down, 0.3, rng);
    randomize(l->up, 0.3, rng);
    l->scale.value[0] = 0.7;
  }
  const Tensor x = gaussian({kTokens, kWidth}, 1.0, rng);
  const Tensor weights = gaussian({kTokens, kWidth}, 1.0, rng);
  const MaskKind mask = seed % 2 ? MaskKind::causal : MaskKind::none;

  auto objective = [&](bool accumulate) {
    AttentionCache cache;
    const Tensor y = sprefix_attend(x, w, {&prefix, &lk, &lv}, mask, &cache);
    if (accumulate) {
      sprefix_attend_backward(weights, cache, w, &prefix, &lk, &lv, mask);
      if (s.inject_fault) prefix.values.grad *= 1.01;
    }
    return dot(y, weights);
  };
  std::vector<NamedParam> params{
      {"attn.w_q", &w.w_q},           {"attn.w_k", &w.w_k},         {"attn.w_v", &w.w_v},
      {"attn.w_o", &w.w_o},           {"prefix.keys", &prefix.keys}, {"prefix.values", &prefix.values},
      {"prefix.scale", &prefix.scale}, {"lora_k.down", &lk.down},    {"lora_k.up", &lk.up},
      {"lora_k.scale", &lk.scale},    {"lora_v.down", &lv.down},     {"lora_v.up", &lv.up},
      {"lora_v.scale", &lv.scale}};
  return check_gradient(objective, params, {s.step, s.samples_per_tensor, seed});
}

// One residual block under an adapter placement (or LN-tuning).
inline GradCheckReport placement_case(std::uint64_t seed, Placement placement,
                                      const GradcheckSettings& s) {
  Rng rng(derive_seed(seed, 202 + static_cast<std::uint64_t>(placement)));
  Block b = Block::random(kWidth, kHeads, 2, rng);
  freeze(b.attn);
  for (ParamTensor* p : {&b.mlp.fc1, &b.mlp.fc1_bias, &b.mlp.fc2, &b.mlp.fc2_bias}) p->trainable = false;
  PETLConfig petl = PETLConfig::disabled();
  petl.placement = placement;
  petl.l_adapter = true;
  const bool ln_tuning = placement == Placement::ln_tuning;
  for (LayerNormParams* ln : {&b.ln1, &b.ln2}) {
    randomize(ln->gain, 0.5, rng);
    randomize(ln->bias, 0.5, rng);
    ln->gain.trainable = ln->bias.trainable = ln_tuning;
  }
  if (!ln_tuning) {
    b.adapter1 = AdapterBlock::init(kWidth, kBottleneck, rng);
    b.adapter2 = AdapterBlock::init(kWidth, kBottleneck, rng);
    for (AdapterBlock* a : {&*b.adapter1, &*b.adapter2}) {
      randomize(a->up, 0.3, rng);
      a->scale.value[0] = 0.8;
    }
  }
  const Tensor x = gaussian({kTokens, kWidth}, 1.0, rng);
  const Tensor weights = gaussian({kTokens, kWidth}, 1.0, rng);
  const MaskKind mask = seed % 2 ? MaskKind::causal : MaskKind::none;

  auto objective = [&](bool accumulate) {
    BlockCache cache;
    const Tensor y = block_forward(x, b, petl, mask, &cache);
    if (accumulate) block_backward(weights, b, petl, mask, cache);
    return dot(y, weights);
  };
  const std::string p = std::string(placement_name(placement)) + ".";
  std::vector<NamedParam> params{{p + "attn.w_q", &b.attn.w_q}, {p + "mlp.fc1", &b.mlp.fc1},
                                 {p + "ln1.gain", &b.ln1.gain}, {p + "ln1.bias", &b.ln1.bias},
                                 {p + "ln2.gain", &b.ln2.gain}, {p + "ln2.bias", &b.ln2.bias}};
  if (!ln_tuning) {
    for (auto [name, a] : {std::pair{"adapter1", &*b.adapter1}, std::pair{"adapter2", &*b.adapter2}}) {
      params.push_back({p + name + ".down", &a->down});
      params.push_back({p + name + ".up", &a->up});
      params.push_back({p + name + ".scale", &a->scale});
    }
  }
  return check_gradient(objective, params, {s.step, s.samples_per_tensor, seed});
}

// Bidirectional SDM through row L2 normalization, w.r.t. both raw embedding
// matrices. Identities repeat so label rows have several matches.
inline GradCheckReport sdm_case(std::uint64_t seed, const GradcheckSettings& s) {
  Rng rng(derive_seed(seed, 303));
  ParamTensor image(gaussian({5, 6}, 1.0, rng)), text(gaussian({5, 6}, 1.0, rng));
  const std::vector<int> ids{0, 0, 1, 2, 2};
  const Tensor labels = identity_labels(ids, ids);
  LossConfig cfg;
  cfg.tau = 0.1;

  auto normalize_rows = [](const Tensor& u) {
    Tensor e = u;
    for (std::size_t i = 0; i < u.rows(); ++i) {
      const Tensor r = l2_normalize(slice_rows(u, i, 1));
      std::copy(r.data().begin(), r.data().end(), e.row(i).begin());
    }
    return e;
  };
  auto objective = [&](bool accumulate) {
    const Tensor fi = normalize_rows(image.value), ft = normalize_rows(text.value);
    const EmbeddingLoss loss = bidirectional_sdm(fi, ft, labels, cfg);
    if (accumulate) {
      for (std::size_t i = 0; i < fi.rows(); ++i) {
        const Tensor gi = l2_normalize_backward(slice_rows(image.value, i, 1), slice_rows(fi, i, 1),
                                                slice_rows(loss.d_image, i, 1));
        const Tensor gt = l2_normalize_backward(slice_rows(text.value, i, 1), slice_rows(ft, i, 1),
                                                slice_rows(loss.d_text, i, 1));
        for (std::size_t j = 0; j < gi.size(); ++j) {
          image.accumulate(i * gi.size() + j, gi[j]);
          text.accumulate(i * gt.size() + j, gt[j]);
        }
      }
    }
    return loss.loss;
  };
  std::vector<NamedParam> params{{"sdm.image", &image}, {"sdm.text", &text}};
  return check_gradient(objective, params, {s.step, s.samples_per_tensor, seed});
}

// Whole two-tower model with every PETL module attached; frozen backbone.
inline GradCheckReport model_case(std::uint64_t seed, const GradcheckSettings& s) {
  Rng rng(derive_seed(seed, 404));
  ImageEncoderConfig icfg;
  icfg.image_h = icfg.image_w = 4;
  icfg.patch = 2;
  icfg.in_dim = 6;
  icfg.d = kWidth;
  icfg.layers = 2;
  icfg.heads = kHeads;
  icfg.mlp_ratio = 2;
  icfg.d_out = 8;
  TextEncoderConfig tcfg;
  tcfg.vocab = 12;
  tcfg.max_len = 6;
  tcfg.d = kWidth;
  tcfg.layers = 2;
  tcfg.heads = kHeads;
  tcfg.mlp_ratio = 2;
  tcfg.d_out = 8;
  DualEncoder m = DualEncoder::init(icfg, tcfg, rng);
  PETLConfig petl;
  petl.prefix_len = kPrefix;
  petl.lora_rank = kRank;
  petl.adapter_bottleneck = kBottleneck;
  constexpr Placement kRotation[] = {Placement::parallel_ln, Placement::sequential_ln,
                                     Placement::parallel_sublayer, Placement::sequential_sublayer};
  petl.placement = kRotation[seed % 4];
  attach_petl(m, petl, rng);
  m.visit([&](const std::string& name, ParamTensor& p) {
    if (name.ends_with("lora_k.up") || name.ends_with("lora_v.up") || name.ends_with("adapter1.up") ||
        name.ends_with("adapter2.up"))
      randomize(p, 0.3, rng);
  });

  std::vector<Tensor> patches;
  std::vector<std::vector<int>> texts{{3, 4, 5}, {6, 7}, {8, 9, 10, 11}};
  for (int i = 0; i < 3; ++i) patches.push_back(gaussian({icfg.num_patches(), icfg.in_dim}, 1.0, rng));
  const std::vector<int> ids{0, 1, 1};
  LossConfig cfg;
  cfg.tau = 0.1;

  auto objective = [&](bool accumulate) {
    std::vector<TowerCache> ic(3), tc(3);
    Tensor fi(3, icfg.d_out), ft(3, tcfg.d_out);
    for (std::size_t i = 0; i < 3; ++i) {
      const Tensor e = encode_image(patches[i], m.image, m.petl, &ic[i]);
      std::copy(e.data().begin(), e.data().end(), fi.row(i).begin());
      const Tensor t = encode_text(texts[i], m.text, m.petl, false, nullptr, &tc[i]);
      std::copy(t.data().begin(), t.data().end(), ft.row(i).begin());
    }
    const EmbeddingLoss loss = bidirectional_sdm(fi, ft, identity_labels(ids, ids), cfg);
    if (accumulate) {
      for (std::size_t i = 0; i < 3; ++i) {
        encode_backward(slice_rows(loss.d_image, i, 1), m.image, m.petl, ic[i]);
        encode_backward(slice_rows(loss.d_text, i, 1), m.text, m.petl, tc[i]);
      }
      if (s.inject_fault) {
        m.visit([](const std::string& name, ParamTensor& p) {
          if (name.ends_with("prefix.values")) p.grad *= 1.01;
        });
      }
    }
    return loss.loss;
  };
  const auto params = m.params();
  return check_gradient(objective, params, {s.step, s.samples_per_tensor, seed});
}

}  // namespace oracle_detail

// ---------------------------------------------------------------------------
// Closed-form equivalences, each returning the worst absolute deviation.

// Concatenated-softmax S-Prefix vs the gated two-term form.
inline double prefix_decomposition_error(std::size_t instances, std::uint64_t seed) {
  using namespace oracle_detail;
  double worst = 0.0;
  for (std::size_t k = 0; k < instances; ++k) {
    Rng rng(derive_seed(seed, 500 + k));
    AttentionWeights w = AttentionWeights::random(kWidth, kHeads, rng);
    PrefixBank prefix = PrefixBank::init(1 + k % 4, kWidth, 0.5 + double(k % 7) * 2.0, rng);
    randomize(prefix.keys, 1.0, rng);
    randomize(prefix.values, 1.0, rng);
    LoraPair lk = LoraPair::init(kWidth, kRank, rng);
    randomize(lk.up, 0.3, rng);
    const Tensor x = gaussian({2 + k % 5, kWidth}, 1.0, rng);
    const MaskKind mask = k % 2 ? MaskKind::causal : MaskKind::none;
    const PetlAttention hooks{&prefix, &lk, nullptr};
    const Tensor fused = sprefix_attend(x, w, hooks, mask);
    worst = std::max(worst, max_abs_diff(fused, sprefix_decomposed(x, w, hooks, mask).output));
  }
  return worst;
}

// With S_p = 0 each head's output is (1 - λ) times plain attention.
inline double zero_scale_error(std::size_t instances, std::uint64_t seed) {
  using namespace oracle_detail;
  double worst = 0.0;
  for (std::size_t k = 0; k < instances; ++k) {
    Rng rng(derive_seed(seed, 700 + k));
    AttentionWeights w = AttentionWeights::random(kWidth, kHeads, rng);
    PrefixBank prefix = PrefixBank::init(kPrefix, kWidth, 0.0, rng);
    randomize(prefix.keys, 1.0, rng);
    const Tensor x = gaussian({kTokens, kWidth}, 1.0, rng);
    const MaskKind mask = k % 2 ? MaskKind::causal : MaskKind::none;
    AttentionCache with, without;
    sprefix_attend(x, w, {&prefix, nullptr, nullptr}, mask, &with);
    attend(x, w, mask, &without);
    const Tensor gate = prefix_lambda(x, w, {&prefix, nullptr, nullptr}, mask);
    const std::size_t dh = w.head_dim();
    for (std::size_t i = 0; i < x.rows(); ++i)
      for (std::size_t c = 0; c < kWidth; ++c)
        worst = std::max(worst, std::abs(with.context(i, c) - (1.0 - gate(c / dh, i)) * without.context(i, c)));
  }
  return worst;
}

// A zero-length prefix must leave attention bit-identical.
inline double empty_prefix_error(std::size_t instances, std::uint64_t seed) {
  using namespace oracle_detail;
  double worst = 0.0;
  for (std::size_t k = 0; k < instances; ++k) {
    Rng rng(derive_seed(seed, 900 + k));
    AttentionWeights w = AttentionWeights::random(kWidth, kHeads, rng);
    PrefixBank empty = PrefixBank::init(0, kWidth, 10.0, rng);
    const Tensor x = gaussian({kTokens, kWidth}, 1.0, rng);
    const MaskKind mask = k % 2 ? MaskKind::causal : MaskKind::none;
    const Tensor a = sprefix_attend(x, w, {&empty, nullptr, nullptr}, mask);
    const Tensor b = attend(x, w, mask);
    worst = std::max(worst, a == b ? 0.0 : std::max(max_abs_diff(a, b), 1e-300));
  }
  return worst;
}

// Attention with LoRA factors vs attention with the factors merged into W.
inline double lora_merge_error(std::size_t instances, std::uint64_t seed) {
  using namespace oracle_detail;
  double worst = 0.0;
  for (std::size_t k = 0; k < instances; ++k) {
    Rng rng(derive_seed(seed, 1100 + k));
    AttentionWeights w = AttentionWeights::random(kWidth, kHeads, rng);
    LoraPair lk = LoraPair::init(kWidth, kRank, rng), lv = LoraPair::init(kWidth, kRank, rng);
    randomize(lk.up, 0.5, rng);
    randomize(lv.up, 0.5, rng);
    lk.scale.value[0] = 1.5;
    const Tensor x = gaussian({kTokens, kWidth}, 1.0, rng);
    const Tensor unmerged = sprefix_attend(x, w, {nullptr, &lk, &lv}, MaskKind::causal);
    AttentionWeights merged = w;
    merged.w_k.value = merge_lora(w.w_k.value, lk);
    merged.w_v.value = merge_lora(w.w_v.value, lv);
    worst = std::max(worst, max_abs_diff(unmerged, attend(x, merged, MaskKind::causal)));
  }
  return worst;
}

// Q (K + ΔK)ᵀ (V + ΔV) against the sum of its four expansion terms.
inline double lora_expansion_error(std::size_t instances, std::uint64_t seed) {
  double worst = 0.0;
  for (std::size_t k = 0; k < instances; ++k) {
    Rng rng(derive_seed(seed, 1300 + k));
    const Tensor q = gaussian({4, 6}, 1.0, rng), key = gaussian({5, 6}, 1.0, rng);
    const Tensor v = gaussian({5, 3}, 1.0, rng);
    const Tensor dk = gaussian({5, 6}, 0.3, rng), dv = gaussian({5, 3}, 0.3, rng);
    const Tensor full = matmul(matmul_nt(q, key + dk), v + dv);
    Tensor sum(full.shape());
    for (const Tensor& t : lora_expansion_terms(q, key, v, dk, dv)) sum += t;
    worst = std::max(worst, max_abs_diff(full, sum));
  }
  return worst;
}

inline OracleReport run_oracle_suite(const GradcheckSettings& s) {
  using namespace oracle_detail;
  OracleReport report;
  report.tolerance = s.tolerance;
  Collector collect(report);
  for (std::uint64_t seed = 0; seed < s.seeds; ++seed) {
    collect.add(attention_case(seed, s));
    for (Placement p : {Placement::parallel_ln, Placement::sequential_ln, Placement::parallel_sublayer,
                        Placement::sequential_sublayer, Placement::ln_tuning})
      collect.add(placement_case(seed, p, s));
    collect.add(sdm_case(seed, s));
    collect.add(model_case(seed, s));
  }
  collect.finish();
  report.equivalences = {
      {"prefix_decomposition", prefix_decomposition_error(100, 1), 1e-10},
      {"zero_prefix_scale", zero_scale_error(20, 2), 1e-10},
      {"empty_prefix", empty_prefix_error(10, 3), 0.0},
      {"lora_merge", lora_merge_error(20, 4), 1e-10},
      {"lora_expansion", lora_expansion_error(20, 5), 1e-10},
  };
  return report;
}

}  // namespace upt
