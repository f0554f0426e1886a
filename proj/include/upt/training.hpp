#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "upt/encoder.hpp"
#include "upt/metrics.hpp"
#include "upt/objective.hpp"
#include "upt/optim.hpp"
#include "upt/synthetic.hpp"

namespace upt {

struct TrainConfig {
  AdamConfig adam;
  std::size_t batch = 32;
  std::size_t epochs = 10;
};

struct TrainLog {
  std::vector<double> epoch_loss;  // mean batch loss per epoch
};

// One optimizer step on a batch of pairs. Returns the batch loss.
inline double train_step(DualEncoder& m, std::span<const Sample* const> batch,
                         const LossConfig& loss_cfg, const AdamConfig& adam, AdamState& state,
                         Rng& rng) {
  const std::size_t b = batch.size();
  std::vector<TowerCache> image_caches(b), text_caches(b);
  Tensor image_emb(b, m.image_cfg.d_out), text_emb(b, m.text_cfg.d_out);
  std::vector<int> ids(b);
  for (std::size_t i = 0; i < b; ++i) {
    const Sample& s = *batch[i];
    ids[i] = s.identity;
    const Tensor e = encode_image(s.patches, m.image, m.petl, &image_caches[i]);
    std::copy(e.data().begin(), e.data().end(), image_emb.row(i).begin());
    const Tensor t = encode_text(s.tokens, m.text, m.petl, true, &rng, &text_caches[i]);
    std::copy(t.data().begin(), t.data().end(), text_emb.row(i).begin());
  }
  const EmbeddingLoss loss = embedding_loss(image_emb, text_emb, identity_labels(ids, ids), loss_cfg);
  for (std::size_t i = 0; i < b; ++i) {
    encode_backward(slice_rows(loss.d_image, i, 1), m.image, m.petl, image_caches[i]);
    encode_backward(slice_rows(loss.d_text, i, 1), m.text, m.petl, text_caches[i]);
  }
  const auto params = m.params();
  adam_step(params, state, adam);
  zero_grads(m);
  return loss.loss;
}

// Minibatch training of whatever tensors are currently trainable.
inline TrainLog train(DualEncoder& m, const std::vector<const Sample*>& data, const TrainConfig& cfg,
                      const LossConfig& loss_cfg, Rng& rng) {
  if (data.empty()) throw ConfigError("training split is empty");
  if (cfg.batch < 2) throw ConfigError("batch size must be at least 2");
  TrainLog log;
  AdamState state;
  std::vector<const Sample*> order = data;
  zero_grads(m);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    std::size_t steps = 0;
    for (std::size_t start = 0; start + 1 < order.size(); start += cfg.batch) {
      const std::size_t n = std::min(cfg.batch, order.size() - start);
      if (n < 2) break;
      total += train_step(m, std::span(order).subspan(start, n), loss_cfg, cfg.adam, state, rng);
      ++steps;
    }
    log.epoch_loss.push_back(steps ? total / double(steps) : 0.0);
  }
  return log;
}

// ---------------------------------------------------------------------------
// Evaluation: text queries against the image gallery of one split.

struct EmbeddedSplit {
  Tensor images;  // [gallery x d_out]
  Tensor texts;   // [queries x d_out]
  std::vector<int> gallery_ids;
  std::vector<int> query_ids;

  Tensor similarity() const { return matmul_nt(texts, images); }
};

inline EmbeddedSplit embed_split(const DualEncoder& m, const Corpus& corpus, Split split) {
  const auto gallery = corpus.gallery(split);
  const auto queries = corpus.pairs(split);
  if (gallery.empty() || queries.empty()) {
    throw EvaluationError(std::string("split '") + std::string(split_name(split)) + "' is empty");
  }
  EmbeddedSplit out{Tensor(gallery.size(), m.image_cfg.d_out), Tensor(queries.size(), m.text_cfg.d_out),
                    {}, {}};
  for (std::size_t i = 0; i < gallery.size(); ++i) {
    const Tensor e = encode_image(gallery[i]->patches, m.image, m.petl);
    std::copy(e.data().begin(), e.data().end(), out.images.row(i).begin());
    out.gallery_ids.push_back(gallery[i]->identity);
  }
  for (std::size_t i = 0; i < queries.size(); ++i) {
    const Tensor e = encode_text(queries[i]->tokens, m.text, m.petl, false, nullptr);
    std::copy(e.data().begin(), e.data().end(), out.texts.row(i).begin());
    out.query_ids.push_back(queries[i]->identity);
  }
  return out;
}

inline RetrievalResult evaluate(const DualEncoder& m, const Corpus& corpus, Split split) {
  const EmbeddedSplit e = embed_split(m, corpus, split);
  return evaluate_retrieval(e.similarity(), e.query_ids, e.gallery_ids);
}

// FNV-1a over the raw bytes of every frozen tensor, in visit order.
inline std::uint64_t frozen_hash(const DualEncoder& m) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  m.visit([&](const std::string& name, const ParamTensor& p) {
    if (p.trainable) return;
    for (char c : name) h = (h ^ static_cast<unsigned char>(c)) * 0x100000001b3ULL;
    for (double v : p.value.data()) {
      const auto bits = std::bit_cast<std::uint64_t>(v);
      for (int k = 0; k < 8; ++k) h = (h ^ ((bits >> (8 * k)) & 0xff)) * 0x100000001b3ULL;
    }
  });
  return h;
}

// ---------------------------------------------------------------------------
// Pretrain -> zero-shot -> PETL tuning on a shifted domain.

struct ExperimentConfig {
  ImageEncoderConfig image;
  TextEncoderConfig text;
  PETLConfig petl;
  LossConfig loss;
  SyntheticSpec pretrain_data;
  SyntheticSpec downstream_data;
  TrainConfig pretrain;
  TrainConfig tune;

  void validate() const {
    image.validate();
    text.validate();
    loss.validate();
    for (const SyntheticSpec* s : {&pretrain_data, &downstream_data}) {
      s->validate();
      if (s->required_vocab() > text.vocab) {
        throw ConfigError("synthetic data needs a vocab of " + std::to_string(s->required_vocab()) +
                          ", text vocab is " + std::to_string(text.vocab));
      }
    }
    if (pretrain_data.world_seed != downstream_data.world_seed) {
      throw ConfigError("pretraining and downstream data must share world_seed");
    }
  }
};

// Random streams of one run, all derived from the run seed.
enum class Stream : std::uint64_t { init = 1, pretrain_data, pretrain_loop, downstream_data, petl_init, tune_loop };

inline Rng stream_rng(std::uint64_t seed, Stream s) {
  return Rng(derive_seed(seed, static_cast<std::uint64_t>(s)));
}

// The data spec actually generated for a run: identities and noise follow the
// run seed, the world (codebooks, observation maps) follows world_seed.
inline SyntheticSpec seeded_spec(SyntheticSpec spec, std::uint64_t seed, Stream s) {
  spec.seed = derive_seed(seed, derive_seed(spec.seed, static_cast<std::uint64_t>(s)));
  return spec;
}

inline Corpus make_corpus(const SyntheticSpec& spec, const ImageEncoderConfig& image) {
  return generate_dataset(spec, image.num_patches(), image.in_dim);
}

inline Corpus pretrain_corpus(const ExperimentConfig& cfg, std::uint64_t seed) {
  return make_corpus(seeded_spec(cfg.pretrain_data, seed, Stream::pretrain_data), cfg.image);
}

inline Corpus downstream_corpus(const ExperimentConfig& cfg, std::uint64_t seed) {
  return make_corpus(seeded_spec(cfg.downstream_data, seed, Stream::downstream_data), cfg.image);
}

// Full tuning on the pretraining corpus; returns a frozen backbone.
inline DualEncoder pretrain_backbone(const ExperimentConfig& cfg, std::uint64_t seed,
                                     const Corpus& corpus, TrainLog* log = nullptr) {
  cfg.validate();
  Rng init = stream_rng(seed, Stream::init);
  DualEncoder m = DualEncoder::init(cfg.image, cfg.text, init);
  set_full_tuning(m);
  Rng loop = stream_rng(seed, Stream::pretrain_loop);
  TrainLog l = train(m, corpus.pairs(Split::train), cfg.pretrain, cfg.loss, loop);
  if (log) *log = std::move(l);
  apply_partition(m);
  return m;
}

// Attaches PETL per cfg.petl and tunes it on the downstream train split.
inline TrainLog tune_petl(DualEncoder& m, const ExperimentConfig& cfg, std::uint64_t seed,
                          const Corpus& corpus) {
  if (m.merged()) throw StateError("cannot tune a LoRA-merged model");
  Rng init = stream_rng(seed, Stream::petl_init);
  attach_petl(m, cfg.petl, init);
  if (!cfg.petl.any()) return {};
  Rng loop = stream_rng(seed, Stream::tune_loop);
  return train(m, corpus.pairs(Split::train), cfg.tune, cfg.loss, loop);
}

struct TransferResult {
  std::uint64_t seed = 0;
  RetrievalResult pretrain_in_domain;  // pretraining test split
  RetrievalResult zero_shot;           // downstream test split, no PETL
  RetrievalResult tuned;               // downstream test split, PETL tuned
  ParamPartition partition;
  TrainLog pretrain_log, tune_log;
  bool backbone_unchanged = false;
};

inline TransferResult run_transfer_experiment(const ExperimentConfig& cfg, std::uint64_t seed) {
  TransferResult r;
  r.seed = seed;
  const Corpus pre = pretrain_corpus(cfg, seed);
  DualEncoder m = pretrain_backbone(cfg, seed, pre, &r.pretrain_log);
  r.pretrain_in_domain = evaluate(m, pre, Split::test);
  const Corpus down = downstream_corpus(cfg, seed);
  r.zero_shot = evaluate(m, down, Split::test);
  const std::uint64_t before = frozen_hash(m);
  r.tune_log = tune_petl(m, cfg, seed, down);
  r.backbone_unchanged = frozen_hash(m) == before;
  r.partition = partition_params(m);
  r.tuned = evaluate(m, down, Split::test);
  return r;
}

}  // namespace upt
