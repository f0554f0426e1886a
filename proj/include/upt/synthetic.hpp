#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <cstdint>
#include <fstream>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "upt/encoder.hpp"
#include "upt/tensor.hpp"

namespace upt {

// Identity-paired synthetic corpus. Each identity is a tuple of discrete
// attribute values. Images render every attribute code into fixed patches
// through per-patch observation maps; texts spell the attributes as symbols
// in random order with filler tokens mixed in.
struct SyntheticSpec {
  std::size_t num_identities = 64;  // train split
  std::size_t test_identities = 32;
  std::size_t images_per_identity = 2;
  std::size_t texts_per_image = 2;
  std::size_t latent_dim = 8;        // width of each attribute-value code
  std::size_t num_attributes = 4;
  std::size_t values_per_attribute = 8;
  std::size_t filler_tokens = 4;     // distinct nuisance symbols
  std::size_t max_fillers = 2;       // per text
  double noise = 0.1;
  double domain_shift = 0.0;         // 0 = pretraining distribution
  std::uint64_t seed = 1;            // identities and nuisance
  std::uint64_t world_seed = 7;      // codebooks and observation maps

  std::size_t required_vocab() const {
    return static_cast<std::size_t>(kFirstContentId) + filler_tokens +
           num_attributes * values_per_attribute;
  }

  void validate() const {
    if (num_attributes == 0 || values_per_attribute == 0 || latent_dim == 0) {
      throw ConfigError("synthetic attributes and latent_dim must be positive");
    }
    if (images_per_identity == 0 || texts_per_image == 0) {
      throw ConfigError("synthetic corpus needs at least one image and text per identity");
    }
    if (domain_shift < 0.0 || domain_shift > 1.0) {
      throw ConfigError("domain_shift must lie in [0, 1]");
    }
    double combos = 1.0;
    for (std::size_t a = 0; a < num_attributes; ++a) combos *= double(values_per_attribute);
    if (combos < double(num_identities + test_identities)) {
      throw ConfigError("not enough attribute combinations for the requested identities");
    }
  }
};

enum class Split { train, test };

inline std::string_view split_name(Split s) { return s == Split::train ? "train" : "test"; }

inline Split parse_split(std::string_view name) {
  if (name == "train") return Split::train;
  if (name == "test") return Split::test;
  throw ConfigError("unknown split tag '" + std::string(name) + "'");
}

// One image-text pair.
struct Sample {
  int identity = 0;
  int image_id = 0;
  Split split = Split::train;
  Tensor patches;           // [num_patches x patch_dim]
  std::vector<int> tokens;  // content ids, no BOS/EOS

  friend bool operator==(const Sample&, const Sample&) = default;
};

struct Corpus {
  std::vector<Sample> samples;

  std::vector<const Sample*> pairs(Split split) const {
    std::vector<const Sample*> out;
    for (const auto& s : samples)
      if (s.split == split) out.push_back(&s);
    return out;
  }

  // First sample of every distinct image in the split, in order.
  std::vector<const Sample*> gallery(Split split) const {
    std::vector<const Sample*> out;
    std::set<int> seen;
    for (const auto& s : samples)
      if (s.split == split && seen.insert(s.image_id).second) out.push_back(&s);
    return out;
  }

  friend bool operator==(const Corpus&, const Corpus&) = default;
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
  return splitmix64(base ^ splitmix64(stream + 0x632be59bd9b4e019ULL));
}

// Codebooks and observation maps shared by every corpus with the same world
// seed, so pretraining and downstream data describe the same identities.
struct SyntheticWorld {
  std::vector<std::vector<Tensor>> codes;  // [attribute][value] -> [1 x latent_dim]
  std::vector<Tensor> observation;         // per patch [latent_dim x patch_dim]

  static SyntheticWorld make(const SyntheticSpec& spec, std::size_t num_patches,
                             std::size_t patch_dim) {
    Rng rng(spec.world_seed);
    SyntheticWorld w;
    w.codes.resize(spec.num_attributes);
    for (auto& values : w.codes)
      for (std::size_t v = 0; v < spec.values_per_attribute; ++v)
        values.push_back(l2_normalize(gaussian({1, spec.latent_dim}, 1.0, rng)));
    for (std::size_t p = 0; p < num_patches; ++p)
      w.observation.push_back(
          gaussian({spec.latent_dim, patch_dim}, 1.0 / std::sqrt(double(spec.latent_dim)), rng));

    // The shift rotates the observation space: coordinates are paired in a
    // world-fixed random order and each pair turns by shift * pi/2.
    if (spec.domain_shift > 0.0) {
      std::vector<std::size_t> axes(patch_dim);
      std::iota(axes.begin(), axes.end(), std::size_t{0});
      std::shuffle(axes.begin(), axes.end(), rng);
      const double angle = spec.domain_shift * std::numbers::pi / 2.0;
      const double c = std::cos(angle), s = std::sin(angle);
      for (Tensor& o : w.observation) {
        for (std::size_t k = 0; k + 1 < patch_dim; k += 2) {
          const std::size_t a = axes[k], b = axes[k + 1];
          for (std::size_t r = 0; r < o.rows(); ++r) {
            const double x = o(r, a), y = o(r, b);
            o(r, a) = c * x - s * y;
            o(r, b) = s * x + c * y;
          }
        }
      }
    }
    return w;
  }
};

inline int attribute_token(const SyntheticSpec& spec, std::size_t attribute, std::size_t value) {
  return kFirstContentId + static_cast<int>(spec.filler_tokens + attribute * spec.values_per_attribute + value);
}

// Deterministic for a fixed spec. Identities [0, num_identities) are the train
// split, the next test_identities form the test split.
inline Corpus generate_dataset(const SyntheticSpec& spec, std::size_t num_patches,
                               std::size_t patch_dim) {
  spec.validate();
  const SyntheticWorld world = SyntheticWorld::make(spec, num_patches, patch_dim);
  Rng rng(spec.seed);
  std::uniform_int_distribution<std::size_t> pick_value(0, spec.values_per_attribute - 1);
  std::normal_distribution<double> noise(0.0, spec.noise);

  const std::size_t total_ids = spec.num_identities + spec.test_identities;
  std::set<std::vector<std::size_t>> used;
  std::vector<std::vector<std::size_t>> latents;
  while (latents.size() < total_ids) {
    std::vector<std::size_t> code(spec.num_attributes);
    for (auto& v : code) v = pick_value(rng);
    if (used.insert(code).second) latents.push_back(std::move(code));
  }

  Corpus corpus;
  int image_id = 0;
  for (std::size_t id = 0; id < total_ids; ++id) {
    const Split split = id < spec.num_identities ? Split::train : Split::test;
    const auto& code = latents[id];
    for (std::size_t img = 0; img < spec.images_per_identity; ++img, ++image_id) {
      Tensor patches(num_patches, patch_dim);
      for (std::size_t p = 0; p < num_patches; ++p) {
        const std::size_t attribute = p % spec.num_attributes;
        const Tensor feature = matmul(world.codes[attribute][code[attribute]], world.observation[p]);
        for (std::size_t j = 0; j < patch_dim; ++j) patches(p, j) = feature[j] + noise(rng);
      }
      for (std::size_t t = 0; t < spec.texts_per_image; ++t) {
        std::vector<int> tokens;
        for (std::size_t a = 0; a < spec.num_attributes; ++a)
          tokens.push_back(attribute_token(spec, a, code[a]));
        std::shuffle(tokens.begin(), tokens.end(), rng);
        if (spec.filler_tokens > 0 && spec.max_fillers > 0) {
          std::uniform_int_distribution<std::size_t> count(0, spec.max_fillers);
          std::uniform_int_distribution<int> filler(kFirstContentId,
                                                    kFirstContentId + int(spec.filler_tokens) - 1);
          const std::size_t k = count(rng);
          for (std::size_t f = 0; f < k; ++f) {
            std::uniform_int_distribution<std::size_t> where(0, tokens.size());
            tokens.insert(tokens.begin() + static_cast<std::ptrdiff_t>(where(rng)), filler(rng));
          }
        }
        corpus.samples.push_back({static_cast<int>(id), image_id, split, patches, std::move(tokens)});
      }
    }
  }
  return corpus;
}

// ---------------------------------------------------------------------------
// JSONL: one object per pair,
//   {"identity":3,"image_id":7,"split":"train","patches":[[...],...],"tokens":[...]}

inline void write_jsonl(const Corpus& corpus, std::ostream& os) {
  for (const auto& s : corpus.samples) {
    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t r = 0; r < s.patches.rows(); ++r) {
      auto row = s.patches.row(r);
      rows.push_back(std::vector<double>(row.begin(), row.end()));
    }
    nlohmann::json rec{{"identity", s.identity},
                       {"image_id", s.image_id},
                       {"split", std::string(split_name(s.split))},
                       {"patches", std::move(rows)},
                       {"tokens", s.tokens}};
    os << rec.dump() << '\n';
  }
}

inline Corpus read_jsonl(std::istream& is) {
  Corpus corpus;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto rec = nlohmann::json::parse(line);
      Sample s;
      s.identity = rec.at("identity").get<int>();
      s.image_id = rec.at("image_id").get<int>();
      s.split = parse_split(rec.at("split").get<std::string>());
      const auto& rows = rec.at("patches");
      const std::size_t n = rows.size(), m = n ? rows.at(0).size() : 0;
      s.patches = Tensor(n, m);
      for (std::size_t r = 0; r < n; ++r) {
        if (rows.at(r).size() != m) throw ShapeError("ragged patch rows");
        for (std::size_t c = 0; c < m; ++c) s.patches(r, c) = rows.at(r).at(c).get<double>();
      }
      s.tokens = rec.at("tokens").get<std::vector<int>>();
      corpus.samples.push_back(std::move(s));
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("dataset line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return corpus;
}

inline void save_jsonl(const Corpus& corpus, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw ConfigError("cannot write dataset to " + path);
  write_jsonl(corpus, os);
}

inline Corpus load_jsonl(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read dataset " + path);
  return read_jsonl(is);
}

}  // namespace upt
