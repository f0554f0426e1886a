// Acceptance checks: one PASS/FAIL line per criterion, nonzero exit on any failure.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include "support/reference.hpp"
#include "support/small_config.hpp"
#include "upt/upt.hpp"

using namespace upt;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = true;
  std::string detail;
};

int failures = 0;

void report(int id, const char* name, const Outcome& o) {
  std::printf("[%s] %d %s: %s\n", o.pass ? "PASS" : "FAIL", id, name, o.detail.c_str());
  std::fflush(stdout);
  failures += !o.pass;
}

template <class... Args>
std::string fmt(const char* f, Args... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

ref::Matrix to_ref(const Tensor& t) {
  ref::Matrix m(t.rows(), std::vector<double>(t.cols()));
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t j = 0; j < t.cols(); ++j) m[i][j] = t(i, j);
  return m;
}

// ---------------------------------------------------------------------------

Outcome gradient_oracle() {
  GradcheckSettings s;
  s.seeds = 5;
  s.tolerance = 1e-4;
  const auto t0 = Clock::now();
  const OracleReport r = run_oracle_suite(s);
  const double secs = seconds_since(t0);
  const std::set<std::string> required{"prefix.keys", "prefix.values", "prefix.scale", "lora.down",
                                       "lora.up",     "lora.scale",    "adapter.down", "adapter.up",
                                       "adapter.scale", "layernorm.gain", "layernorm.bias"};
  std::set<std::string> seen;
  double worst = 0.0;
  for (const auto& g : r.gradients) {
    if (required.count(g.name) && g.coords_checked > 0) seen.insert(g.name);
    worst = std::max(worst, g.worst_rel_error);
  }
  Outcome o;
  o.pass = r.gradients_passed() && r.frozen_violations.empty() && seen == required && secs < 60.0;
  o.detail = fmt("%zu/%zu classes, worst rel err %.2e over %zu seeds, %.1fs", seen.size(), required.size(), worst,
                 s.seeds, secs);
  return o;
}

// Gated two-term form written out from scratch: per head and query,
// h = (1 - λ) softmax(q Kᵀ) V + S_p λ softmax(q P_kᵀ) P_v, then W_o.
Tensor reference_prefix_attention(const Tensor& x, const AttentionWeights& w, const PrefixBank& p, MaskKind mask) {
  const ref::Matrix xr = to_ref(x);
  const ref::Matrix q = ref::matmul(xr, to_ref(w.w_q.value)), k = ref::matmul(xr, to_ref(w.w_k.value)),
                    v = ref::matmul(xr, to_ref(w.w_v.value));
  const ref::Matrix pk = to_ref(p.keys.value), pv = to_ref(p.values.value);
  const std::size_t n = x.rows(), d = w.width(), dh = w.head_dim(), l = p.length();
  const double sp = p.scale.value[0];
  ref::Matrix ctx(n, std::vector<double>(d, 0.0));
  for (std::size_t h = 0; h < w.heads; ++h) {
    const std::size_t c0 = h * dh;
    auto score = [&](const std::vector<double>& a, const std::vector<double>& b) {
      double s = 0.0;
      for (std::size_t c = c0; c < c0 + dh; ++c) s += a[c] * b[c];
      return std::exp(s / std::sqrt(double(dh)));
    };
    for (std::size_t i = 0; i < n; ++i) {
      double zc = 0.0, zp = 0.0;
      for (std::size_t j = 0; j < n; ++j)
        if (!(mask == MaskKind::causal && j > i)) zc += score(q[i], k[j]);
      for (std::size_t t = 0; t < l; ++t) zp += score(q[i], pk[t]);
      const double lambda = zp / (zp + zc);
      for (std::size_t c = c0; c < c0 + dh; ++c) {
        double content = 0.0, prefix = 0.0;
        for (std::size_t j = 0; j < n; ++j)
          if (!(mask == MaskKind::causal && j > i)) content += score(q[i], k[j]) / zc * v[j][c];
        for (std::size_t t = 0; t < l; ++t) prefix += score(q[i], pk[t]) / zp * pv[t][c];
        ctx[i][c] = (1.0 - lambda) * content + sp * lambda * prefix;
      }
    }
  }
  const ref::Matrix y = ref::matmul(ctx, to_ref(w.w_o.value));
  Tensor out(n, d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < d; ++c) out(i, c) = y[i][c];
  return out;
}

Outcome prefix_equivalence() {
  double worst = 0.0;
  for (std::size_t k = 0; k < 100; ++k) {
    Rng rng(derive_seed(2, k));
    const AttentionWeights w = AttentionWeights::random(16, 2, rng);
    PrefixBank p = PrefixBank::init(1 + k % 4, 16, 1.0, rng);
    p.keys.value = gaussian(p.keys.shape(), 1.0, rng);
    p.values.value = gaussian(p.values.shape(), 1.0, rng);
    const Tensor x = gaussian({2 + k % 6, 16}, 1.0, rng);
    const MaskKind mask = k % 2 ? MaskKind::causal : MaskKind::none;
    const Tensor fused = sprefix_attend(x, w, {&p, nullptr, nullptr}, mask);
    worst = std::max(worst, max_abs_diff(fused, reference_prefix_attention(x, w, p, mask)));
  }
  return {worst < 1e-10, fmt("100 instances at S_p=1, max abs diff %.2e (tol 1e-10)", worst)};
}

Outcome prefix_value_scaling() {
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Tensor grads[2];
    for (int k = 0; k < 2; ++k) {
      Rng rng(derive_seed(3, seed));
      AttentionWeights w = AttentionWeights::random(16, 2, rng);
      PrefixBank p = PrefixBank::init(3, 16, k == 0 ? 1.0 : 10.0, rng);
      p.keys.value = gaussian(p.keys.shape(), 1.0, rng);
      p.values.value = gaussian(p.values.shape(), 1.0, rng);
      const Tensor x = gaussian({5, 16}, 1.0, rng), upstream = gaussian({5, 16}, 1.0, rng);
      AttentionCache cache;
      sprefix_attend(x, w, {&p, nullptr, nullptr}, MaskKind::causal, &cache);
      sprefix_attend_backward(upstream, cache, w, &p, nullptr, nullptr, MaskKind::causal);
      grads[k] = p.values.grad;
    }
    for (std::size_t i = 0; i < grads[0].size(); ++i)
      worst = std::max(worst, std::abs(grads[1][i] - 10.0 * grads[0][i]) / std::abs(10.0 * grads[0][i]));
  }
  return {worst < 1e-9, fmt("10 instances, max rel err %.2e (tol 1e-9)", worst)};
}

Tensor test_similarity(const DualEncoder& m, const Corpus& c) { return embed_split(m, c, Split::test).similarity(); }

struct CliResult {
  int code;
  std::string out;
};

CliResult cli(std::vector<std::string> args) {
  args.insert(args.begin(), "upt");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str() + err.str()};
}

Outcome lora_merge() {
  // Library level: a tuned model with non-trivial LoRA factors.
  const RunConfig cfg = testcfg::small_run();
  const ExperimentConfig& e = cfg.experiment;
  Rng rng(41);
  DualEncoder m = DualEncoder::init(e.image, e.text, rng);
  apply_partition(m);
  attach_petl(m, e.petl, rng);
  m.visit([&](const std::string& name, ParamTensor& p) {
    if (p.trainable) p.value = gaussian(p.shape(), name.find("scale") != std::string::npos ? 0.5 : 0.1, rng);
  });
  DualEncoder merged = m;
  merge_model_lora(merged);
  const Corpus c = downstream_corpus(e, 1);
  const double sim_diff = max_abs_diff(test_similarity(m, c), test_similarity(merged, c));

  // Tool level: pretrain, tune, eval, merge, eval again.
  const fs::path dir = fs::temp_directory_path() / "upt_acceptance_merge";
  fs::remove_all(dir);
  fs::create_directories(dir);
  auto p = [&](const char* n) { return (dir / n).string(); };
  std::ofstream(dir / "cfg.json") << to_json(cfg).dump(2);
  bool ok = cli({"pretrain", "--config", p("cfg.json"), "--out", p("bb.bin")}).code == 0 &&
            cli({"tune", "--config", p("cfg.json"), "--backbone", p("bb.bin"), "--out", p("d.bin")}).code == 0 &&
            cli({"merge", "--config", p("cfg.json"), "--backbone", p("bb.bin"), "--delta", p("d.bin"), "--out",
                 p("full.bin")})
                    .code == 0;
  double metric_diff = 1.0;
  if (ok) {
    const CliResult a = cli({"eval", "--config", p("cfg.json"), "--backbone", p("bb.bin"), "--delta", p("d.bin"),
                             "--format", "json"});
    const CliResult b = cli({"eval", "--config", p("cfg.json"), "--backbone", p("full.bin"), "--format", "json"});
    ok = a.code == 0 && b.code == 0;
    if (ok) {
      const auto ja = nlohmann::json::parse(a.out)["rows"][0], jb = nlohmann::json::parse(b.out)["rows"][0];
      metric_diff = 0.0;
      for (const char* k : {"r1", "r5", "r10", "map"})
        metric_diff = std::max(metric_diff, std::abs(ja[k].get<double>() - jb[k].get<double>()));
    }
  }
  fs::remove_all(dir);
  Outcome o;
  o.pass = ok && sim_diff < 1e-9 && metric_diff < 1e-9;
  o.detail = fmt("similarity diff %.2e, CLI merge round trip %s, metric diff %.2e (tol 1e-9)", sim_diff,
                 ok ? "ok" : "failed", metric_diff);
  return o;
}

Outcome four_term_expansion() {
  double worst = 0.0;
  for (std::size_t k = 0; k < 100; ++k) {
    Rng rng(derive_seed(5, k));
    const Tensor q = gaussian({4, 6}, 1.0, rng), key = gaussian({5, 6}, 1.0, rng), v = gaussian({5, 3}, 1.0, rng);
    const Tensor dk = gaussian({5, 6}, 0.3, rng), dv = gaussian({5, 3}, 0.3, rng);
    ref::Matrix kk = to_ref(key), vv = to_ref(v);
    for (std::size_t i = 0; i < 5; ++i) {
      for (std::size_t j = 0; j < 6; ++j) kk[i][j] += dk(i, j);
      for (std::size_t j = 0; j < 3; ++j) vv[i][j] += dv(i, j);
    }
    const ref::Matrix direct = ref::matmul(ref::matmul(to_ref(q), ref::transpose(kk)), vv);
    Tensor sum(4, 3);
    for (const Tensor& t : lora_expansion_terms(q, key, v, dk, dv)) sum += t;
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 3; ++j) worst = std::max(worst, std::abs(direct[i][j] - sum(i, j)));
  }
  return {worst < 1e-9, fmt("100 instances, max abs diff %.2e (tol 1e-9)", worst)};
}

Tensor random_labels(std::size_t n, Rng& rng) {
  std::uniform_int_distribution<int> id(0, 3);
  std::vector<int> a(n), b(n);
  for (auto& v : a) v = id(rng);
  b = a;
  std::shuffle(b.begin(), b.end(), rng);
  return identity_labels(a, b);
}

Outcome sdm_properties() {
  Rng rng(6);
  double worst_equal = 0.0, min_loss = INFINITY;
  for (int k = 0; k < 100; ++k) {
    const Tensor q = true_distribution(random_labels(6, rng));
    worst_equal = std::max(worst_equal, std::abs(sdm_loss(q, q, 1e-8, 0.02).loss));
  }
  for (int k = 0; k < 300; ++k) {
    LossConfig cfg;
    cfg.tau = k % 3 == 0 ? 1.0 : 0.02;
    min_loss = std::min(min_loss, bidirectional_sdm_similarity(gaussian({6, 6}, 0.5, rng), random_labels(6, rng), cfg).loss);
  }
  // Similarity gradient against central differences of the reference loss.
  double worst_fd = 0.0;
  for (int k = 0; k < 10; ++k) {
    LossConfig cfg;
    cfg.tau = 0.1;
    const Tensor s = gaussian({5, 5}, 0.3, rng), y = random_labels(5, rng);
    const Tensor grad = bidirectional_sdm_similarity(s, y, cfg).grad;
    const ref::Matrix yr = to_ref(y);
    auto f = [&](const std::vector<double>& flat) {
      ref::Matrix m(5, std::vector<double>(5));
      for (std::size_t i = 0; i < 25; ++i) m[i / 5][i % 5] = flat[i];
      return ref::sdm_direction(m, yr, cfg.tau, cfg.epsilon) +
             ref::sdm_direction(ref::transpose(m), ref::transpose(yr), cfg.tau, cfg.epsilon);
    };
    for (std::size_t i = 0; i < 25; ++i) {
      const double numeric = ref::central_difference(f, s.data(), i);
      worst_fd = std::max(worst_fd, std::abs(grad[i] - numeric) / std::max(1.0, std::abs(numeric)));
    }
  }
  Tensor f(6, 8);
  for (std::size_t i = 0; i < 6; ++i) f(i, i) = 1.0;
  const std::vector<int> ids{0, 1, 2, 3, 4, 5};
  const double separated = bidirectional_sdm(f, f, identity_labels(ids, ids), LossConfig{}).loss;
  Outcome o;
  o.pass = worst_equal <= 1e-5 && min_loss >= -1e-5 && worst_fd < 1e-4 && separated < 1e-6;
  o.detail = fmt("|L(q,q)| %.1e, min loss %.1e, FD rel err %.1e, separated batch %.1e", worst_equal, min_loss,
                 worst_fd, separated);
  return o;
}

Outcome metrics_exact() {
  Rng rng(7);
  std::uniform_int_distribution<int> id(0, 19), grid(-4, 4);
  std::size_t mismatches = 0;
  for (int k = 0; k < 100; ++k) {
    Tensor s(50, 80);
    std::vector<int> qi(50), gi(80);
    for (auto& g : gi) g = id(rng);
    for (std::size_t q = 0; q < 50; ++q) qi[q] = gi[(q * 7) % 80];
    for (double& v : s.data()) v = grid(rng) * 0.25;
    const ref::Matrix r = to_ref(s);
    for (std::size_t kk : {1u, 5u, 10u}) mismatches += rank_k(s, qi, gi, kk) != ref::recall_at_k(r, qi, gi, kk);
    for (std::size_t q = 0; q < 50; ++q)
      mismatches += average_precision(s.row(q), gi, qi[q]) != ref::average_precision(r[q], gi, qi[q]);
  }
  const double hand = average_precision(std::vector<double>{0.9, 0.8, 0.7, 0.1}, {1, 0, 1, 0}, 1);
  return {mismatches == 0 && hand == 5.0 / 6.0,
          fmt("100 tied 50x80 instances, %zu mismatches; hand AP %.17g", mismatches, hand)};
}

Outcome transparency_and_frozen() {
  const ExperimentConfig e = testcfg::small_run().experiment;
  Rng rng(8);
  const DualEncoder base = DualEncoder::init(e.image, e.text, rng);
  const Corpus c = downstream_corpus(e, 1);
  const EmbeddedSplit ref_emb = embed_split(base, c, Split::test);
  double worst = 0.0;
  for (Placement pl : {Placement::parallel_ln, Placement::sequential_ln, Placement::parallel_sublayer,
                       Placement::sequential_sublayer}) {
    PETLConfig petl;
    petl.prefix_len = 0;
    petl.placement = pl;
    DualEncoder m = base;
    Rng prng(9);
    attach_petl(m, petl, prng);
    const EmbeddedSplit emb = embed_split(m, c, Split::test);
    worst = std::max({worst, max_abs_diff(emb.images, ref_emb.images), max_abs_diff(emb.texts, ref_emb.texts)});
  }
  const TransferResult r = run_transfer_experiment(e, 4);
  return {worst <= 1e-12 && r.backbone_unchanged,
          fmt("max embedding diff %.2e over 4 placements; frozen hash %s after tuning", worst,
              r.backbone_unchanged ? "unchanged" : "CHANGED")};
}

Outcome transfer() {
  const RunConfig cfg;
  const ExperimentConfig& e = cfg.experiment;
  const auto t0 = Clock::now();
  bool margins = true, frozen = true;
  double worst_fraction = 0.0, zs = 0.0, tuned = 0.0;
  std::string per_seed;
  for (std::uint64_t seed : {1, 2, 3}) {
    const TransferResult r = run_transfer_experiment(e, seed);
    margins &= r.tuned.r1 >= r.zero_shot.r1 + 0.20;
    frozen &= r.backbone_unchanged;
    worst_fraction = std::max(worst_fraction, r.partition.trainable_fraction());
    zs += r.zero_shot.r1 / 3.0;
    tuned += r.tuned.r1 / 3.0;
    per_seed += fmt(" s%llu:%.3f->%.3f", static_cast<unsigned long long>(seed), r.zero_shot.r1, r.tuned.r1);
  }
  const double secs = seconds_since(t0);
  Outcome o;
  o.pass = margins && frozen && worst_fraction < 0.10 && secs < 300.0;
  o.detail = fmt("R@1 zero-shot %.3f -> tuned %.3f (%s ), trainable %.2f%%, %.0fs", zs, tuned, per_seed.c_str(),
                 100.0 * worst_fraction, secs);

  // Unified vs single-module tuning on seed 1; informational only.
  const Corpus pre = pretrain_corpus(e, 1), down = downstream_corpus(e, 1);
  const DualEncoder backbone = pretrain_backbone(e, 1, pre);
  std::string ablation;
  for (unsigned bits : {4u, 2u, 1u, 7u}) {
    ExperimentConfig sub = e;
    sub.petl.sprefix = bits & 4u;
    sub.petl.lora = bits & 2u;
    sub.petl.l_adapter = bits & 1u;
    DualEncoder m = backbone;
    tune_petl(m, sub, 1, down);
    ablation += fmt(" %s=%.3f", bits == 4 ? "sprefix" : bits == 2 ? "lora" : bits == 1 ? "adapter" : "unified",
                    evaluate(m, down, Split::test).r1);
  }
  std::printf("      ablation (seed 1, R@1, not asserted):%s\n", ablation.c_str());
  return o;
}

std::size_t closed_form_per_layer(std::size_t d, std::size_t l, std::size_t r, std::size_t b) {
  return (2 * l * d + 1) + 2 * (2 * d * r + 1) + 2 * (2 * d * b + 1);
}

Outcome partition_counts() {
  const ExperimentConfig e = RunConfig{}.experiment;
  Rng rng(10);
  DualEncoder m = DualEncoder::init(e.image, e.text, rng);
  apply_partition(m);
  attach_petl(m, e.petl, rng);
  const ParamPartition part = partition_params(m);
  const std::size_t expected =
      e.image.layers * closed_form_per_layer(e.image.d, e.petl.prefix_len, e.petl.lora_rank, e.petl.adapter_bottleneck) +
      e.text.layers * closed_form_per_layer(e.text.d, e.petl.prefix_len, e.petl.lora_rank, e.petl.adapter_bottleneck);
  const bool inventory_agrees = partition_from(param_inventory(e.image, e.text, e.petl)).trainable_count ==
                                part.trainable_count;

  ImageEncoderConfig icfg;
  icfg.image_h = 384;
  icfg.image_w = 128;
  icfg.patch = 16;
  icfg.in_dim = 3 * 16 * 16;
  icfg.d = 768;
  icfg.layers = 12;
  icfg.heads = 12;
  icfg.d_out = 512;
  TextEncoderConfig tcfg;
  tcfg.vocab = 49408;
  tcfg.max_len = 77;
  tcfg.d = 512;
  tcfg.layers = 12;
  tcfg.heads = 8;
  tcfg.d_out = 512;
  PETLConfig petl;
  petl.prefix_len = 10;
  petl.lora_rank = 32;
  petl.adapter_bottleneck = 8;
  const ParamPartition big = partition_from(param_inventory(icfg, tcfg, petl));

  Outcome o;
  o.pass = part.trainable_count == expected && inventory_agrees && big.trainable_fraction() < 0.10;
  o.detail = fmt("toy %zu trainable (closed form %zu) of %zu; large %zu of %zu (%.2f%%)", part.trainable_count,
                 expected, part.total(), big.trainable_count, big.total(), 100.0 * big.trainable_fraction());
  return o;
}

}  // namespace

int main() {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"gradient oracle", gradient_oracle},
      {"prefix equivalence", prefix_equivalence},
      {"prefix value gradient scaling", prefix_value_scaling},
      {"LoRA merge", lora_merge},
      {"four-term expansion", four_term_expansion},
      {"SDM properties", sdm_properties},
      {"retrieval metrics", metrics_exact},
      {"zero-init transparency and frozen backbone", transparency_and_frozen},
      {"transfer experiment", transfer},
      {"parameter partition", partition_counts},
  };
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    report(static_cast<int>(i + 1), criteria[i].first, o);
  }
  std::printf("%s: %d of %zu criteria failed\n", failures ? "FAILED" : "ALL PASSED", failures, criteria.size());
  return failures ? 1 : 0;
}
