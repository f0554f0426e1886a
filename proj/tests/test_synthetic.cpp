#include <gtest/gtest.h>

#include <map>
#include <sstream>

#include "upt/synthetic.hpp"

using namespace upt;

namespace {

SyntheticSpec small_spec() {
  SyntheticSpec s;
  s.num_identities = 12;
  s.test_identities = 6;
  return s;
}

}  // namespace

TEST(Synthetic, DeterministicForAFixedSpec) {
  EXPECT_EQ(generate_dataset(small_spec(), 8, 16), generate_dataset(small_spec(), 8, 16));
  SyntheticSpec other = small_spec();
  other.seed = 2;
  EXPECT_FALSE(generate_dataset(small_spec(), 8, 16) == generate_dataset(other, 8, 16));
}

TEST(Synthetic, SplitsAreDisjointAndSized) {
  const SyntheticSpec spec = small_spec();
  const Corpus c = generate_dataset(spec, 8, 16);
  std::set<int> train, test;
  for (const auto* s : c.pairs(Split::train)) train.insert(s->identity);
  for (const auto* s : c.pairs(Split::test)) test.insert(s->identity);
  EXPECT_EQ(train.size(), spec.num_identities);
  EXPECT_EQ(test.size(), spec.test_identities);
  for (int id : test) EXPECT_EQ(train.count(id), 0u);
  const std::size_t per_id = spec.images_per_identity * spec.texts_per_image;
  EXPECT_EQ(c.samples.size(), (spec.num_identities + spec.test_identities) * per_id);
  EXPECT_EQ(c.gallery(Split::test).size(), spec.test_identities * spec.images_per_identity);
}

TEST(Synthetic, TokensStayInsideTheVocabulary) {
  const SyntheticSpec spec = small_spec();
  const Corpus c = generate_dataset(spec, 8, 16);
  for (const auto& s : c.samples) {
    EXPECT_GE(s.tokens.size(), spec.num_attributes);
    EXPECT_LE(s.tokens.size(), spec.num_attributes + spec.max_fillers);
    for (int t : s.tokens) {
      EXPECT_GE(t, kFirstContentId);
      EXPECT_LT(static_cast<std::size_t>(t), spec.required_vocab());
    }
  }
}

TEST(Synthetic, IdentitiesHaveDistinctAttributeSets) {
  const SyntheticSpec spec = small_spec();
  const Corpus c = generate_dataset(spec, 8, 16);
  const int first_attr = kFirstContentId + static_cast<int>(spec.filler_tokens);
  std::map<int, std::multiset<int>> by_id;
  for (const auto& s : c.samples) {
    std::multiset<int> attrs;
    for (int t : s.tokens) {
      if (t >= first_attr) attrs.insert(t);
    }
    auto [it, fresh] = by_id.emplace(s.identity, attrs);
    if (!fresh) {
      EXPECT_EQ(it->second, attrs) << "identity " << s.identity;
    }
  }
  std::set<std::multiset<int>> distinct;
  for (const auto& [id, attrs] : by_id) distinct.insert(attrs);
  EXPECT_EQ(distinct.size(), by_id.size());
}

TEST(Synthetic, JsonlRoundTripIsExact) {
  const Corpus c = generate_dataset(small_spec(), 8, 16);
  std::stringstream ss;
  write_jsonl(c, ss);
  EXPECT_EQ(read_jsonl(ss), c);
}

TEST(Synthetic, JsonlErrorsNameTheLine) {
  std::stringstream ss("{\"identity\":1}\n");
  try {
    read_jsonl(ss);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("line 1"), std::string::npos);
  }
}

TEST(Synthetic, DomainShiftChangesImagesOnly) {
  SyntheticSpec shifted = small_spec();
  shifted.domain_shift = 0.6;
  const Corpus a = generate_dataset(small_spec(), 8, 16), b = generate_dataset(shifted, 8, 16);
  ASSERT_EQ(a.samples.size(), b.samples.size());
  double diff = 0.0;
  for (std::size_t i = 0; i < a.samples.size(); ++i) {
    EXPECT_EQ(a.samples[i].tokens, b.samples[i].tokens);
    EXPECT_EQ(a.samples[i].identity, b.samples[i].identity);
    diff = std::max(diff, max_abs_diff(a.samples[i].patches, b.samples[i].patches));
  }
  EXPECT_GT(diff, 0.1);
}

TEST(Synthetic, DeriveSeedSeparatesStreams) {
  EXPECT_NE(derive_seed(1, 1), derive_seed(1, 2));
  EXPECT_NE(derive_seed(1, 1), derive_seed(2, 1));
  EXPECT_EQ(derive_seed(5, 3), derive_seed(5, 3));
}

TEST(Synthetic, InvalidSpecsAreRejected) {
  SyntheticSpec s = small_spec();
  s.domain_shift = 1.5;
  EXPECT_THROW(s.validate(), ConfigError);
  s = small_spec();
  s.num_attributes = 1;
  s.values_per_attribute = 4;
  EXPECT_THROW(s.validate(), ConfigError);
  EXPECT_THROW(parse_split("val"), ConfigError);
}
