#include <gtest/gtest.h>

#include "support/small_config.hpp"
#include "upt/archive.hpp"
#include "upt/config.hpp"

using namespace upt;

namespace {

struct Fixture {
  ExperimentConfig e = testcfg::small_run().experiment;
  DualEncoder backbone;
  DualEncoder tuned;

  Fixture() {
    Rng rng(4);
    backbone = DualEncoder::init(e.image, e.text, rng);
    apply_partition(backbone);
    tuned = backbone;
    attach_petl(tuned, e.petl, rng);
    // Perturb the PETL tensors so the delta is not just its initial values.
    tuned.visit([&](const std::string&, ParamTensor& p) {
      if (p.trainable)
        for (double& v : p.value.data()) v += 0.01;
    });
  }
};

Tensor similarity_of(const DualEncoder& m, const Corpus& c) { return embed_split(m, c, Split::test).similarity(); }

}  // namespace

TEST(Archive, EncodeDecodeIsExact) {
  Fixture f;
  WeightArchive a = full_archive(f.tuned, petl_to_json(f.e.petl).dump());
  EXPECT_EQ(decode_archive(encode_archive(a)), a);
  const WeightArchive b = backbone_archive(f.backbone);
  EXPECT_EQ(decode_archive(encode_archive(b)), b);
}

TEST(Archive, BackbonePlusDeltaRestoresTheModel) {
  Fixture f;
  const WeightArchive base = decode_archive(encode_archive(backbone_archive(f.backbone)));
  const WeightArchive delta = decode_archive(encode_archive(delta_archive(f.tuned, content_hash(base))));
  for (const auto& t : delta.tensors) EXPECT_TRUE(is_petl_param(t.name) || t.trainable) << t.name;
  DualEncoder m = model_from_backbone(base, f.e.image, f.e.text);
  apply_delta(m, delta, content_hash(base), f.e.petl);
  const Corpus c = downstream_corpus(f.e, 1);
  EXPECT_TRUE(similarity_of(m, c) == similarity_of(f.tuned, c));
  EXPECT_EQ(frozen_hash(m), frozen_hash(f.tuned));
}

TEST(Archive, DamagedBytesAreCorrupt) {
  Fixture f;
  const std::string bytes = encode_archive(backbone_archive(f.backbone));
  EXPECT_THROW(decode_archive(bytes.substr(0, bytes.size() / 2)), CorruptArchiveError);
  EXPECT_THROW(decode_archive(bytes.substr(0, 4)), CorruptArchiveError);
  std::string flipped = bytes;
  flipped[flipped.size() / 2] ^= 0x10;
  EXPECT_THROW(decode_archive(flipped), CorruptArchiveError);
  std::string magic = bytes;
  magic[0] = 'X';
  EXPECT_THROW(decode_archive(magic), CorruptArchiveError);
  EXPECT_THROW(decode_archive(""), CorruptArchiveError);
}

TEST(Archive, FingerprintsGuardArchitectureAndBackbone) {
  Fixture f;
  const WeightArchive base = backbone_archive(f.backbone);
  ImageEncoderConfig wider = f.e.image;
  wider.d = 32;
  EXPECT_THROW(model_from_backbone(base, wider, f.e.text), FingerprintError);

  const WeightArchive delta = delta_archive(f.tuned, content_hash(base));
  DualEncoder m = model_from_backbone(base, f.e.image, f.e.text);
  EXPECT_THROW(apply_delta(m, delta, content_hash(base) + 1, f.e.petl), FingerprintError);
  PETLConfig other = f.e.petl;
  other.lora_rank = 3;
  EXPECT_THROW(apply_delta(m, delta, content_hash(base), other), FingerprintError);
}

TEST(Archive, StateErrors) {
  Fixture f;
  const WeightArchive base = backbone_archive(f.backbone);
  const WeightArchive delta = delta_archive(f.tuned, content_hash(base));
  EXPECT_THROW(model_from_backbone(delta, f.e.image, f.e.text), StateError);
  DualEncoder merged = f.tuned;
  merge_model_lora(merged);
  EXPECT_THROW(backbone_archive(merged), StateError);
  const WeightArchive full = full_archive(merged, petl_to_json(f.e.petl).dump());
  EXPECT_TRUE(full.merged);
  EXPECT_TRUE(decode_archive(encode_archive(full)).merged);
}

TEST(Archive, MergedFullArchiveMatchesUnmerged) {
  Fixture f;
  DualEncoder merged = f.tuned;
  merge_model_lora(merged);
  // Merging drops LoRA from the layout, so the merged PETL config describes the archive.
  EXPECT_FALSE(merged.petl.lora);
  const WeightArchive full = decode_archive(encode_archive(full_archive(merged, petl_to_json(merged.petl).dump())));
  EXPECT_THROW(model_from_full(full, f.e.image, f.e.text, f.e.petl), CorruptArchiveError);
  const DualEncoder back = model_from_full(full, f.e.image, f.e.text, merged.petl);
  EXPECT_TRUE(back.merged());
  const Corpus c = downstream_corpus(f.e, 1);
  EXPECT_LT(max_abs_diff(similarity_of(back, c), similarity_of(f.tuned, c)), 1e-9);
}

TEST(Archive, MissingFileIsAConfigError) {
  EXPECT_THROW(load_archive("/nonexistent/dir/model.bin"), ConfigError);
}
