#pragma once

// Flat "key = value" experiment configuration (schema train_v1).
//
//   # comment
//   version = train_v1
//   epochs = 30
//   margin-mode = adaptive
//
// Every key is also a CLI flag of the same name (`--epochs 30`); the table in
// config_fields() is the single source for both. Unknown keys, duplicate keys
// and a missing or wrong version line are errors.

#include "sewcal/trainer.hpp"

#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace sewcal {

inline constexpr const char* kConfigVersion = "train_v1";

struct ConfigField {
  std::string key;
  std::string help;
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
  bool is_flag = false;  // boolean switch
};

namespace detail {

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline double parse_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  require(used == v.size() && !v.empty(), ErrorKind::kParse, "key '" + key + "': expected a number, got '" + v + "'");
  return out;
}

inline long long parse_int(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  long long out = 0;
  try {
    out = std::stoll(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  require(used == v.size() && !v.empty(), ErrorKind::kParse, "key '" + key + "': expected an integer, got '" + v + "'");
  return out;
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  unsigned long long out = 0;
  try {
    if (!v.empty() && v[0] != '-') out = std::stoull(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  require(used == v.size() && !v.empty(), ErrorKind::kParse,
          "key '" + key + "': expected a non-negative integer, got '" + v + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw Error(ErrorKind::kParse, "key '" + key + "': expected true/false, got '" + v + "'");
}

inline std::string format_double(double x) {
  std::ostringstream os;
  os.precision(17);
  os << x;
  return os.str();
}

template <typename T>
ConfigField real_field(std::string key, std::string help, T ExperimentConfig::*group, double T::*member) {
  return {key, std::move(help),
          [=](ExperimentConfig& c, const std::string& v) { (c.*group).*member = parse_double(key, v); },
          [=](const ExperimentConfig& c) { return format_double((c.*group).*member); }};
}

template <typename T, typename I>
ConfigField int_field(std::string key, std::string help, T ExperimentConfig::*group, I T::*member) {
  return {key, std::move(help),
          [=](ExperimentConfig& c, const std::string& v) { (c.*group).*member = static_cast<I>(parse_int(key, v)); },
          [=](const ExperimentConfig& c) { return std::to_string((c.*group).*member); }};
}

template <typename T>
ConfigField bool_field(std::string key, std::string help, T ExperimentConfig::*group, bool T::*member) {
  return {key, std::move(help),
          [=](ExperimentConfig& c, const std::string& v) { (c.*group).*member = parse_bool(key, v); },
          [=](const ExperimentConfig& c) { return std::string((c.*group).*member ? "true" : "false"); }, true};
}

}  // namespace detail

inline const std::vector<ConfigField>& config_fields() {
  using E = ExperimentConfig;
  using namespace detail;
  static const std::vector<ConfigField> fields = [] {
    std::vector<ConfigField> f;
    f.push_back({"corpus", "corpus JSON path (relative paths resolve against the working directory)",
                 [](E& c, const std::string& v) { c.corpus_path = v; }, [](const E& c) { return c.corpus_path; }});
    f.push_back({"out-dir", "output directory for checkpoints and reports",
                 [](E& c, const std::string& v) { c.out_dir = v; }, [](const E& c) { return c.out_dir; }});
    f.push_back({"seed", "training seed",
                 [](E& c, const std::string& v) { c.train.seed = parse_u64("seed", v); },
                 [](const E& c) { return std::to_string(c.train.seed); }});
    f.push_back(int_field("threads", "worker threads for per-sample work", &E::train, &TrainConfig::threads));
    f.push_back(int_field("epochs", "training epochs", &E::train, &TrainConfig::epochs));
    f.push_back(int_field("batch-size", "batch size (even; batch-size/2 identities x 2)", &E::train,
                          &TrainConfig::batch_size));
    f.push_back(real_field("learning-rate", "Adam learning rate", &E::train, &TrainConfig::learning_rate));
    f.push_back(real_field("beta1", "Adam first-moment decay", &E::train, &TrainConfig::beta1));
    f.push_back(real_field("beta2", "Adam second-moment decay", &E::train, &TrainConfig::beta2));
    f.push_back(real_field("adam-eps", "Adam epsilon", &E::train, &TrainConfig::adam_eps));
    f.push_back(real_field("lambda1", "weight of the Sew loss", &E::train, &TrainConfig::lambda1));
    f.push_back(real_field("lambda2", "weight of the MCM loss", &E::train, &TrainConfig::lambda2));
    f.push_back(bool_field("sew", "enable the Sew loss", &E::train, &TrainConfig::sew_on));
    f.push_back(bool_field("mcm", "enable masked caption modeling", &E::train, &TrainConfig::mcm_on));
    f.push_back(bool_field("mask-only", "mask captions but skip decoder and MCM loss", &E::train,
                           &TrainConfig::mask_only));
    f.push_back(bool_field("attn-only", "run the decoder on unmasked captions without MCM loss", &E::train,
                           &TrainConfig::attn_only));
    f.push_back(real_field("alpha", "logit scale", &E::sew, &SewConfig::alpha));
    f.push_back({"margin-mode", "fixed | adaptive",
                 [](E& c, const std::string& v) {
                   if (v == "fixed") c.sew.margin_mode = MarginMode::kFixed;
                   else if (v == "adaptive") c.sew.margin_mode = MarginMode::kAdaptive;
                   else throw Error(ErrorKind::kParse, "key 'margin-mode': expected fixed|adaptive, got '" + v + "'");
                 },
                 [](const E& c) { return std::string(c.sew.margin_mode == MarginMode::kFixed ? "fixed" : "adaptive"); }});
    f.push_back(real_field("fixed-margin", "margin used when margin-mode = fixed", &E::sew, &SewConfig::fixed_margin));
    f.push_back(real_field("margin-min", "adaptive margin lower bound", &E::sew, &SewConfig::margin_min));
    f.push_back(real_field("margin-max", "adaptive margin upper bound", &E::sew, &SewConfig::margin_max));
    f.push_back(int_field("len-min", "caption length mapped to margin-min", &E::sew, &SewConfig::len_min));
    f.push_back(int_field("len-max", "caption length mapped to margin-max", &E::sew, &SewConfig::len_max));
    f.push_back(bool_field("count-special-tokens", "count [CLS] in caption length", &E::sew,
                           &SewConfig::count_special_tokens));
    f.push_back(real_field("mask-ratio", "per-token masking probability", &E::mcm, &MCMConfig::mask_ratio));
    f.push_back(int_field("decoder-blocks", "decoder depth", &E::mcm, &MCMConfig::decoder_blocks));
    f.push_back(bool_field("force-min-one", "mask at least one token per caption", &E::mcm,
                           &MCMConfig::force_min_one));
    f.push_back(int_field("embed-dim", "embedding width d", &E::encoder, &EncoderConfig::embed_dim));
    f.push_back(int_field("depth", "transformer blocks per encoder", &E::encoder, &EncoderConfig::depth));
    f.push_back(int_field("heads", "attention heads", &E::encoder, &EncoderConfig::heads));
    f.push_back(int_field("mlp-ratio", "MLP hidden width / d", &E::encoder, &EncoderConfig::mlp_ratio));
    f.push_back(int_field("max-text-tokens", "text positions c2", &E::encoder, &EncoderConfig::max_text_tokens));
    return f;
  }();
  return fields;
}

inline const ConfigField* find_config_field(const std::string& key) {
  for (const auto& f : config_fields()) {
    if (f.key == key) return &f;
  }
  return nullptr;
}

inline void set_config_value(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
  const auto* f = find_config_field(key);
  require(f != nullptr, ErrorKind::kSchema, "unknown config key '" + key + "'");
  f->set(cfg, value);
}

// Applies the keys of `text` on top of `cfg`.
inline void parse_config_into(ExperimentConfig& cfg, const std::string& text) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  bool have_version = false;
  std::set<std::string> seen;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto where = "line " + std::to_string(lineno) + ": ";
    const auto eq = line.find('=');
    require(eq != std::string::npos, ErrorKind::kParse, where + "expected 'key = value'");
    const auto key = detail::trim(line.substr(0, eq));
    const auto value = detail::trim(line.substr(eq + 1));
    require(!key.empty(), ErrorKind::kParse, where + "empty key");
    require(seen.insert(key).second, ErrorKind::kSchema, where + "duplicate key '" + key + "'");
    if (key == "version") {
      require(value == kConfigVersion, ErrorKind::kSchema,
              where + "unsupported version '" + value + "' (expected " + kConfigVersion + ")");
      have_version = true;
      continue;
    }
    try {
      set_config_value(cfg, key, value);
    } catch (const Error& e) {
      throw Error(e.kind(), where + e.what());
    }
  }
  require(have_version, ErrorKind::kSchema, std::string("missing 'version = ") + kConfigVersion + "' line");
}

inline ExperimentConfig parse_config(const std::string& text) {
  ExperimentConfig cfg;
  parse_config_into(cfg, text);
  return cfg;
}

inline ExperimentConfig load_config(const std::string& path) { return parse_config(detail::read_file(path)); }

// Every key, in table order; parse_config(serialize_config(c)) reproduces c.
inline std::string serialize_config(const ExperimentConfig& cfg) {
  std::string out = std::string("version = ") + kConfigVersion + "\n";
  for (const auto& f : config_fields()) out += f.key + " = " + f.get(cfg) + "\n";
  return out;
}

inline void validate(const ExperimentConfig& cfg) {
  cfg.train.validate();
  cfg.sew.validate();
  cfg.mcm.validate();
  cfg.encoder.validate();
}

}  // namespace sewcal
