#pragma once

#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "upt/training.hpp"

namespace upt {

struct GradcheckSettings {
  std::size_t seeds = 5;
  std::size_t samples_per_tensor = 32;
  double step = 1e-4;
  double tolerance = 1e-4;
  bool inject_fault = false;  // corrupts the analytic P_v gradient

  friend bool operator==(const GradcheckSettings&, const GradcheckSettings&) = default;
};

struct ReportSettings {
  std::string run_id = "run";
  bool timing = false;  // fill wall_time_s; off keeps reports byte-reproducible

  friend bool operator==(const ReportSettings&, const ReportSettings&) = default;
};

struct DataPaths {
  std::string pretrain;    // JSONL corpus; empty = generate from pretrain_data
  std::string downstream;  // JSONL corpus; empty = generate from downstream_data
  std::string export_dir;  // when set, generated corpora are written here

  friend bool operator==(const DataPaths&, const DataPaths&) = default;
};

struct RunConfig {
  std::uint64_t seed = 1;
  std::vector<std::uint64_t> seeds{1, 2, 3};  // ablations and repeated runs
  ExperimentConfig experiment;
  GradcheckSettings gradcheck;
  ReportSettings report;
  DataPaths data;

  RunConfig() {
    experiment.pretrain_data.num_identities = 192;
    experiment.pretrain_data.seed = 11;
    experiment.downstream_data.seed = 29;
    experiment.downstream_data.domain_shift = 0.6;
    experiment.pretrain.epochs = 20;
    experiment.pretrain.adam.lr = 1e-3;
    experiment.tune.epochs = 20;
    experiment.tune.adam.lr = 3e-3;
  }

  void validate() const {
    experiment.validate();
    if (seeds.empty()) throw ConfigError("seeds must not be empty");
    if (gradcheck.seeds == 0 || gradcheck.samples_per_tensor == 0) {
      throw ConfigError("gradcheck needs at least one seed and one sample");
    }
  }
};

namespace detail {

// Reads known keys of one JSON object and rejects anything else.
class Section {
 public:
  Section(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError("config section '" + path_ + "' must be an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError("config key '" + where(key) + "' has the wrong type");
    }
  }

  Section sub(const char* key) {
    seen_.insert(key);
    static const nlohmann::json empty = nlohmann::json::object();
    return Section(j_.contains(key) ? j_.at(key) : empty, where(key));
  }

  void finish() const {
    for (const auto& item : j_.items())
      if (!seen_.count(item.key())) throw ConfigError("unknown config key '" + where(item.key().c_str()) + "'");
  }

 private:
  std::string where(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline void read_image(Section s, ImageEncoderConfig& c) {
  s.get("image_h", c.image_h);
  s.get("image_w", c.image_w);
  s.get("patch", c.patch);
  s.get("in_dim", c.in_dim);
  s.get("d", c.d);
  s.get("layers", c.layers);
  s.get("heads", c.heads);
  s.get("mlp_ratio", c.mlp_ratio);
  s.get("d_out", c.d_out);
  s.finish();
}

inline void read_text(Section s, TextEncoderConfig& c) {
  s.get("vocab", c.vocab);
  s.get("max_len", c.max_len);
  s.get("d", c.d);
  s.get("layers", c.layers);
  s.get("heads", c.heads);
  s.get("mlp_ratio", c.mlp_ratio);
  s.get("d_out", c.d_out);
  s.get("mask_rate", c.mask_rate);
  s.finish();
}

inline void read_petl(Section s, PETLConfig& c) {
  s.get("prefix_len", c.prefix_len);
  s.get("lora_rank", c.lora_rank);
  s.get("adapter_bottleneck", c.adapter_bottleneck);
  s.get("s_p_init", c.s_p_init);
  std::string placement(placement_name(c.placement));
  s.get("placement", placement);
  c.placement = parse_placement(placement);
  s.get("sprefix", c.sprefix);
  s.get("lora", c.lora);
  s.get("l_adapter", c.l_adapter);
  s.finish();
}

inline void read_loss(Section s, LossConfig& c) {
  s.get("tau", c.tau);
  s.get("epsilon", c.epsilon);
  std::string kind(loss_kind_name(c.kind));
  s.get("kind", kind);
  c.kind = parse_loss_kind(kind);
  s.finish();
}

inline void read_train(Section s, TrainConfig& c) {
  s.get("lr", c.adam.lr);
  s.get("beta1", c.adam.beta1);
  s.get("beta2", c.adam.beta2);
  s.get("eps", c.adam.eps);
  s.get("batch", c.batch);
  s.get("epochs", c.epochs);
  s.finish();
}

inline void read_data(Section s, SyntheticSpec& c) {
  s.get("num_identities", c.num_identities);
  s.get("test_identities", c.test_identities);
  s.get("images_per_identity", c.images_per_identity);
  s.get("texts_per_image", c.texts_per_image);
  s.get("latent_dim", c.latent_dim);
  s.get("num_attributes", c.num_attributes);
  s.get("values_per_attribute", c.values_per_attribute);
  s.get("filler_tokens", c.filler_tokens);
  s.get("max_fillers", c.max_fillers);
  s.get("noise", c.noise);
  s.get("domain_shift", c.domain_shift);
  s.get("seed", c.seed);
  s.get("world_seed", c.world_seed);
  s.finish();
}

inline nlohmann::json data_json(const SyntheticSpec& c) {
  return {{"num_identities", c.num_identities},
          {"test_identities", c.test_identities},
          {"images_per_identity", c.images_per_identity},
          {"texts_per_image", c.texts_per_image},
          {"latent_dim", c.latent_dim},
          {"num_attributes", c.num_attributes},
          {"values_per_attribute", c.values_per_attribute},
          {"filler_tokens", c.filler_tokens},
          {"max_fillers", c.max_fillers},
          {"noise", c.noise},
          {"domain_shift", c.domain_shift},
          {"seed", c.seed},
          {"world_seed", c.world_seed}};
}

inline nlohmann::json train_json(const TrainConfig& c) {
  return {{"lr", c.adam.lr},     {"beta1", c.adam.beta1}, {"beta2", c.adam.beta2},
          {"eps", c.adam.eps},   {"batch", c.batch},      {"epochs", c.epochs}};
}

}  // namespace detail

inline nlohmann::json petl_to_json(const PETLConfig& c) {
  return {{"prefix_len", c.prefix_len},
          {"lora_rank", c.lora_rank},
          {"adapter_bottleneck", c.adapter_bottleneck},
          {"s_p_init", c.s_p_init},
          {"placement", std::string(placement_name(c.placement))},
          {"sprefix", c.sprefix},
          {"lora", c.lora},
          {"l_adapter", c.l_adapter}};
}

inline PETLConfig petl_from_json(const nlohmann::json& j) {
  PETLConfig c;
  detail::read_petl(detail::Section(j, "petl"), c);
  return c;
}

// The effective configuration, every field present.
inline nlohmann::json to_json(const RunConfig& c) {
  const ExperimentConfig& e = c.experiment;
  return {
      {"seed", c.seed},
      {"seeds", c.seeds},
      {"image",
       {{"image_h", e.image.image_h}, {"image_w", e.image.image_w}, {"patch", e.image.patch},
        {"in_dim", e.image.in_dim}, {"d", e.image.d}, {"layers", e.image.layers},
        {"heads", e.image.heads}, {"mlp_ratio", e.image.mlp_ratio}, {"d_out", e.image.d_out}}},
      {"text",
       {{"vocab", e.text.vocab}, {"max_len", e.text.max_len}, {"d", e.text.d},
        {"layers", e.text.layers}, {"heads", e.text.heads}, {"mlp_ratio", e.text.mlp_ratio},
        {"d_out", e.text.d_out}, {"mask_rate", e.text.mask_rate}}},
      {"petl", petl_to_json(e.petl)},
      {"loss",
       {{"tau", e.loss.tau}, {"epsilon", e.loss.epsilon},
        {"kind", std::string(loss_kind_name(e.loss.kind))}}},
      {"pretrain", detail::train_json(e.pretrain)},
      {"tune", detail::train_json(e.tune)},
      {"pretrain_data", detail::data_json(e.pretrain_data)},
      {"downstream_data", detail::data_json(e.downstream_data)},
      {"gradcheck",
       {{"seeds", c.gradcheck.seeds}, {"samples_per_tensor", c.gradcheck.samples_per_tensor},
        {"step", c.gradcheck.step}, {"tolerance", c.gradcheck.tolerance},
        {"inject_fault", c.gradcheck.inject_fault}}},
      {"report", {{"run_id", c.report.run_id}, {"timing", c.report.timing}}},
      {"data",
       {{"pretrain", c.data.pretrain}, {"downstream", c.data.downstream},
        {"export_dir", c.data.export_dir}}},
  };
}

// Missing keys keep their defaults; unknown keys and wrong types throw
// ConfigError naming the offending key.
inline RunConfig config_from_json(const nlohmann::json& j) {
  RunConfig c;
  ExperimentConfig& e = c.experiment;
  detail::Section root(j, "");
  root.get("seed", c.seed);
  root.get("seeds", c.seeds);
  detail::read_image(root.sub("image"), e.image);
  detail::read_text(root.sub("text"), e.text);
  detail::read_petl(root.sub("petl"), e.petl);
  detail::read_loss(root.sub("loss"), e.loss);
  detail::read_train(root.sub("pretrain"), e.pretrain);
  detail::read_train(root.sub("tune"), e.tune);
  detail::read_data(root.sub("pretrain_data"), e.pretrain_data);
  detail::read_data(root.sub("downstream_data"), e.downstream_data);
  {
    auto s = root.sub("gradcheck");
    s.get("seeds", c.gradcheck.seeds);
    s.get("samples_per_tensor", c.gradcheck.samples_per_tensor);
    s.get("step", c.gradcheck.step);
    s.get("tolerance", c.gradcheck.tolerance);
    s.get("inject_fault", c.gradcheck.inject_fault);
    s.finish();
  }
  {
    auto s = root.sub("report");
    s.get("run_id", c.report.run_id);
    s.get("timing", c.report.timing);
    s.finish();
  }
  {
    auto s = root.sub("data");
    s.get("pretrain", c.data.pretrain);
    s.get("downstream", c.data.downstream);
    s.get("export_dir", c.data.export_dir);
    s.finish();
  }
  root.finish();
  c.validate();
  return c;
}

inline RunConfig parse_config(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& err) {
    throw ConfigError(std::string("config is not valid JSON: ") + err.what());
  }
  return config_from_json(j);
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str());
}

}  // namespace upt
