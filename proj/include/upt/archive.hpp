#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "upt/encoder.hpp"
#include "upt/error.hpp"
#include "upt/tensor.hpp"

namespace upt {

// Weight archive, all integers little-endian:
//
//   magic            6 bytes  "UPTWR1"
//   version          u16      1
//   kind             u8       0 backbone, 1 delta, 2 full
//   flags            u8       bit 0: LoRA merged into W_k / W_v
//   arch_fingerprint u64      backbone architecture (both towers)
//   petl_fingerprint u64      PETL layout, 0 for backbones
//   backbone_ref     u64      content hash of the backbone a delta applies to
//   metadata         u32 len + bytes (JSON text)
//   tensor_count     u32
//   per tensor       u16 name len, name, u8 trainable, u8 ndim, u64 dims[ndim],
//                    u64 byte offset into the payload
//   payload_bytes    u64
//   payload          f64 little-endian values
//   checksum         u64      FNV-1a of every preceding byte

inline constexpr std::string_view kArchiveMagic = "UPTWR1";
inline constexpr std::uint16_t kArchiveVersion = 1;

enum class ArchiveKind : std::uint8_t { backbone = 0, delta = 1, full = 2 };

inline std::string_view archive_kind_name(ArchiveKind k) {
  switch (k) {
    case ArchiveKind::backbone: return "backbone";
    case ArchiveKind::delta: return "delta";
    case ArchiveKind::full: return "full";
  }
  return "?";
}

struct ArchiveTensor {
  std::string name;
  bool trainable = false;
  Tensor value;

  friend bool operator==(const ArchiveTensor&, const ArchiveTensor&) = default;
};

struct WeightArchive {
  ArchiveKind kind = ArchiveKind::backbone;
  bool merged = false;
  std::uint64_t arch_fingerprint = 0;
  std::uint64_t petl_fingerprint = 0;
  std::uint64_t backbone_ref = 0;
  std::string metadata;
  std::vector<ArchiveTensor> tensors;

  friend bool operator==(const WeightArchive&, const WeightArchive&) = default;
};

class Fnv1a {
 public:
  void add(std::string_view bytes) {
    for (char c : bytes) h_ = (h_ ^ static_cast<unsigned char>(c)) * 0x100000001b3ULL;
  }
  void add_u64(std::uint64_t v) {
    for (int k = 0; k < 8; ++k) h_ = (h_ ^ ((v >> (8 * k)) & 0xff)) * 0x100000001b3ULL;
  }
  std::uint64_t value() const { return h_; }

 private:
  std::uint64_t h_ = 0xcbf29ce484222325ULL;
};

inline std::uint64_t fnv1a(std::string_view bytes) {
  Fnv1a h;
  h.add(bytes);
  return h.value();
}

// Hash of tensor names, shapes and values; identifies a backbone for deltas.
inline std::uint64_t content_hash(const WeightArchive& a) {
  Fnv1a h;
  for (const auto& t : a.tensors) {
    h.add(t.name);
    h.add_u64(t.value.ndim());
    for (std::size_t dim : t.value.shape()) h.add_u64(dim);
    for (double v : t.value.data()) h.add_u64(std::bit_cast<std::uint64_t>(v));
  }
  return h.value();
}

namespace detail {

class ByteWriter {
 public:
  void bytes(std::string_view s) { out_.append(s); }
  template <class T>
  void uint(T v) {
    for (std::size_t k = 0; k < sizeof(T); ++k)
      out_.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * k)) & 0xff));
  }
  void f64(double v) { uint(std::bit_cast<std::uint64_t>(v)); }
  std::string& str() { return out_; }

 private:
  std::string out_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view in) : in_(in) {}

  std::string_view bytes(std::size_t n) {
    need(n);
    auto s = in_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  template <class T>
  T uint() {
    need(sizeof(T));
    std::uint64_t v = 0;
    for (std::size_t k = 0; k < sizeof(T); ++k)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in_[pos_ + k])) << (8 * k);
    pos_ += sizeof(T);
    return static_cast<T>(v);
  }
  double f64() { return std::bit_cast<double>(uint<std::uint64_t>()); }
  std::size_t remaining() const { return in_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (in_.size() - pos_ < n) throw CorruptArchiveError("archive is truncated");
  }
  std::string_view in_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_archive(const WeightArchive& a) {
  detail::ByteWriter w;
  w.bytes(kArchiveMagic);
  w.uint<std::uint16_t>(kArchiveVersion);
  w.uint<std::uint8_t>(static_cast<std::uint8_t>(a.kind));
  w.uint<std::uint8_t>(a.merged ? 1 : 0);
  w.uint<std::uint64_t>(a.arch_fingerprint);
  w.uint<std::uint64_t>(a.petl_fingerprint);
  w.uint<std::uint64_t>(a.backbone_ref);
  w.uint<std::uint32_t>(static_cast<std::uint32_t>(a.metadata.size()));
  w.bytes(a.metadata);
  w.uint<std::uint32_t>(static_cast<std::uint32_t>(a.tensors.size()));
  std::uint64_t offset = 0;
  for (const auto& t : a.tensors) {
    if (t.name.size() > 0xffff) throw ContractError("tensor name too long: " + t.name);
    w.uint<std::uint16_t>(static_cast<std::uint16_t>(t.name.size()));
    w.bytes(t.name);
    w.uint<std::uint8_t>(t.trainable ? 1 : 0);
    w.uint<std::uint8_t>(static_cast<std::uint8_t>(t.value.ndim()));
    for (std::size_t dim : t.value.shape()) w.uint<std::uint64_t>(dim);
    w.uint<std::uint64_t>(offset);
    offset += 8 * t.value.size();
  }
  w.uint<std::uint64_t>(offset);
  for (const auto& t : a.tensors)
    for (double v : t.value.data()) w.f64(v);
  const std::uint64_t checksum = fnv1a(w.str());
  w.uint<std::uint64_t>(checksum);
  return std::move(w.str());
}

inline WeightArchive decode_archive(std::string_view bytes) {
  if (bytes.size() < kArchiveMagic.size() || bytes.substr(0, kArchiveMagic.size()) != kArchiveMagic) {
    throw CorruptArchiveError("not a weight archive (bad magic)");
  }
  if (bytes.size() < kArchiveMagic.size() + 8) throw CorruptArchiveError("archive is truncated");
  const std::string_view body = bytes.substr(0, bytes.size() - 8);
  detail::ByteReader tail(bytes.substr(bytes.size() - 8));
  if (fnv1a(body) != tail.uint<std::uint64_t>()) {
    throw CorruptArchiveError("archive checksum mismatch");
  }

  detail::ByteReader r(body);
  r.bytes(kArchiveMagic.size());
  if (const auto version = r.uint<std::uint16_t>(); version != kArchiveVersion) {
    throw CorruptArchiveError("unsupported archive version " + std::to_string(version));
  }
  WeightArchive a;
  const auto kind = r.uint<std::uint8_t>();
  if (kind > 2) throw CorruptArchiveError("unknown archive kind " + std::to_string(kind));
  a.kind = static_cast<ArchiveKind>(kind);
  a.merged = (r.uint<std::uint8_t>() & 1) != 0;
  a.arch_fingerprint = r.uint<std::uint64_t>();
  a.petl_fingerprint = r.uint<std::uint64_t>();
  a.backbone_ref = r.uint<std::uint64_t>();
  a.metadata = std::string(r.bytes(r.uint<std::uint32_t>()));

  struct Entry {
    Shape shape;
    std::uint64_t offset;
  };
  const auto count = r.uint<std::uint32_t>();
  std::vector<Entry> entries;
  for (std::uint32_t i = 0; i < count; ++i) {
    ArchiveTensor t;
    t.name = std::string(r.bytes(r.uint<std::uint16_t>()));
    t.trainable = r.uint<std::uint8_t>() != 0;
    Shape shape(r.uint<std::uint8_t>());
    for (auto& dim : shape) dim = r.uint<std::uint64_t>();
    entries.push_back({std::move(shape), r.uint<std::uint64_t>()});
    a.tensors.push_back(std::move(t));
  }
  const auto payload_bytes = r.uint<std::uint64_t>();
  if (payload_bytes != r.remaining() || payload_bytes % 8 != 0) {
    throw CorruptArchiveError("archive payload size does not match its header");
  }
  const std::string_view payload = r.bytes(payload_bytes);
  for (std::size_t i = 0; i < a.tensors.size(); ++i) {
    const std::uint64_t n = shape_numel(entries[i].shape);
    if (entries[i].offset > payload_bytes || n > (payload_bytes - entries[i].offset) / 8) {
      throw CorruptArchiveError("tensor '" + a.tensors[i].name + "' lies outside the payload");
    }
    detail::ByteReader values(payload.substr(entries[i].offset, 8 * n));
    std::vector<double> data(n);
    for (auto& v : data) v = values.f64();
    a.tensors[i].value = Tensor(entries[i].shape, std::move(data));
  }
  return a;
}

inline void save_archive(const WeightArchive& a, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ConfigError("cannot write archive " + path);
  const std::string bytes = encode_archive(a);
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw ConfigError("failed writing archive " + path);
}

inline WeightArchive load_archive(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot read archive " + path);
  const std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return decode_archive(bytes);
}

// ---------------------------------------------------------------------------
// Fingerprints.

inline std::uint64_t architecture_fingerprint(const ImageEncoderConfig& i, const TextEncoderConfig& t) {
  std::string s = "image";
  for (std::size_t v : {i.image_h, i.image_w, i.patch, i.in_dim, i.d, i.layers, i.heads, i.mlp_ratio, i.d_out})
    s += ":" + std::to_string(v);
  s += "|text";
  for (std::size_t v : {t.vocab, t.max_len, t.d, t.layers, t.heads, t.mlp_ratio, t.d_out})
    s += ":" + std::to_string(v);
  return fnv1a(s);
}

// Layout of the attached PETL tensors (initial values such as S_p excluded).
inline std::uint64_t petl_fingerprint(const PETLConfig& p) {
  std::string s = "petl";
  for (std::size_t v : {p.prefix_len, p.lora_rank, p.adapter_bottleneck}) s += ":" + std::to_string(v);
  s += ":" + std::string(placement_name(p.placement));
  s += ":" + std::to_string(p.sprefix) + std::to_string(p.lora) + std::to_string(p.l_adapter);
  return fnv1a(s);
}

// ---------------------------------------------------------------------------
// Model <-> archive.

namespace detail {

template <class Pred>
WeightArchive collect(const DualEncoder& m, ArchiveKind kind, Pred keep) {
  WeightArchive a;
  a.kind = kind;
  a.merged = m.merged();
  a.arch_fingerprint = architecture_fingerprint(m.image_cfg, m.text_cfg);
  m.visit([&](const std::string& name, const ParamTensor& p) {
    if (keep(name, p)) a.tensors.push_back({name, p.trainable, p.value});
  });
  return a;
}

inline void require_arch(const WeightArchive& a, const ImageEncoderConfig& i, const TextEncoderConfig& t) {
  if (a.arch_fingerprint != architecture_fingerprint(i, t)) {
    throw FingerprintError("archive was written for a different encoder architecture");
  }
}

// Copies archive tensors into the model by name. Every model tensor selected
// by `expect` must be present exactly once with a matching shape.
template <class Pred>
void restore(DualEncoder& m, const WeightArchive& a, Pred expect) {
  std::map<std::string, const ArchiveTensor*> by_name;
  for (const auto& t : a.tensors)
    if (!by_name.emplace(t.name, &t).second) throw CorruptArchiveError("duplicate tensor " + t.name);
  std::size_t used = 0;
  m.visit([&](const std::string& name, ParamTensor& p) {
    if (!expect(name)) return;
    auto it = by_name.find(name);
    if (it == by_name.end()) throw CorruptArchiveError("archive lacks tensor " + name);
    if (it->second->value.shape() != p.shape()) {
      throw CorruptArchiveError("tensor " + name + " has shape " + shape_str(it->second->value.shape()) +
                                ", expected " + shape_str(p.shape()));
    }
    p.value = it->second->value;
    p.trainable = it->second->trainable;
    p.zero_grad();
    ++used;
  });
  if (used != a.tensors.size()) throw CorruptArchiveError("archive holds tensors the model does not");
}

}  // namespace detail

// Frozen backbone tensors only (any attached PETL is left out).
inline WeightArchive backbone_archive(const DualEncoder& m) {
  if (m.merged()) throw StateError("a LoRA-merged model is saved as a full archive");
  return detail::collect(m, ArchiveKind::backbone,
                         [](const std::string& name, const ParamTensor&) { return !is_petl_param(name); });
}

// Trainable tensors of a tuned model: attached PETL modules, plus the site
// layernorms under LN-tuning.
inline WeightArchive delta_archive(const DualEncoder& m, std::uint64_t backbone_ref) {
  WeightArchive a = detail::collect(m, ArchiveKind::delta,
                                    [](const std::string&, const ParamTensor& p) { return p.trainable; });
  a.petl_fingerprint = petl_fingerprint(m.petl);
  a.backbone_ref = backbone_ref;
  return a;
}

// Every tensor, with the PETL layout recorded so the model can be rebuilt.
inline WeightArchive full_archive(const DualEncoder& m, std::string petl_metadata) {
  WeightArchive a = detail::collect(m, ArchiveKind::full,
                                    [](const std::string&, const ParamTensor&) { return true; });
  a.petl_fingerprint = petl_fingerprint(m.petl);
  a.metadata = std::move(petl_metadata);
  return a;
}

// Builds a model from a backbone archive; the architecture must match.
inline DualEncoder model_from_backbone(const WeightArchive& a, const ImageEncoderConfig& icfg,
                                       const TextEncoderConfig& tcfg) {
  if (a.kind != ArchiveKind::backbone) {
    throw StateError("expected a backbone archive, got a " + std::string(archive_kind_name(a.kind)) +
                     " archive");
  }
  detail::require_arch(a, icfg, tcfg);
  Rng unused(0);
  DualEncoder m = DualEncoder::init(icfg, tcfg, unused);
  detail::restore(m, a, [](const std::string&) { return true; });
  apply_partition(m);
  return m;
}

// Attaches the PETL layout `petl` to a backbone model and loads the delta.
inline void apply_delta(DualEncoder& m, const WeightArchive& delta, std::uint64_t backbone_ref,
                        const PETLConfig& petl) {
  if (delta.kind != ArchiveKind::delta) {
    throw StateError("expected a delta archive, got a " + std::string(archive_kind_name(delta.kind)) +
                     " archive");
  }
  if (m.merged()) throw StateError("cannot apply a delta to a LoRA-merged model");
  detail::require_arch(delta, m.image_cfg, m.text_cfg);
  if (delta.petl_fingerprint != petl_fingerprint(petl)) {
    throw FingerprintError("delta was tuned with a different PETL configuration");
  }
  if (delta.backbone_ref != backbone_ref) {
    throw FingerprintError("delta was tuned on a different backbone");
  }
  Rng unused(0);
  attach_petl(m, petl, unused);
  detail::restore(m, delta, [&](const std::string& name) {
    return is_petl_param(name) || (petl.ln_tuning() && is_site_layernorm(name));
  });
}

// Rebuilds a model from a full archive; `petl` must describe its layout.
inline DualEncoder model_from_full(const WeightArchive& a, const ImageEncoderConfig& icfg,
                                   const TextEncoderConfig& tcfg, const PETLConfig& petl) {
  if (a.kind != ArchiveKind::full) throw StateError("expected a full archive");
  detail::require_arch(a, icfg, tcfg);
  if (a.petl_fingerprint != petl_fingerprint(petl)) {
    throw CorruptArchiveError("full archive metadata does not match its PETL fingerprint");
  }
  Rng unused(0);
  DualEncoder m = DualEncoder::init(icfg, tcfg, unused);
  attach_petl(m, petl, unused);
  m.image.merged = m.text.merged = a.merged;
  detail::restore(m, a, [](const std::string&) { return true; });
  return m;
}

}  // namespace upt
