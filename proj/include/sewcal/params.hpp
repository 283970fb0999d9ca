#pragma once

// Model configuration, the named parameter store and the checkpoint format.

#include "sewcal/core.hpp"

#include <json.hpp>

#include <array>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

namespace sewcal {

struct EncoderConfig {
  int embed_dim = 32;
  int depth = 2;
  int heads = 4;
  int mlp_ratio = 4;
  int max_image_tokens = 17;  // g*g + 1
  int max_text_tokens = 32;

  void validate() const {
    require(embed_dim >= 1 && heads >= 1 && embed_dim % heads == 0, ErrorKind::kValue,
            "embed_dim must be divisible by heads");
    require(depth >= 1, ErrorKind::kValue, "encoder depth must be >= 1");
    require(mlp_ratio >= 1, ErrorKind::kValue, "mlp_ratio must be >= 1");
    require(max_image_tokens >= 2 && max_text_tokens >= 1, ErrorKind::kValue, "token limits too small");
  }
  bool operator==(const EncoderConfig&) const = default;
};

struct ModelConfig {
  EncoderConfig encoder;
  int patch_vocab_size = 0;
  int text_vocab_size = 0;
  int num_classes = 0;
  int decoder_blocks = 1;

  void validate() const {
    encoder.validate();
    require(patch_vocab_size >= 1 && text_vocab_size >= 1, ErrorKind::kValue, "vocabulary sizes must be positive");
    require(num_classes >= 1, ErrorKind::kValue, "num_classes must be positive");
    require(decoder_blocks >= 1, ErrorKind::kValue, "decoder_blocks must be >= 1");
  }
  bool operator==(const ModelConfig&) const = default;
};

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"embed_dim", c.encoder.embed_dim},
          {"depth", c.encoder.depth},
          {"heads", c.encoder.heads},
          {"mlp_ratio", c.encoder.mlp_ratio},
          {"max_image_tokens", c.encoder.max_image_tokens},
          {"max_text_tokens", c.encoder.max_text_tokens},
          {"patch_vocab_size", c.patch_vocab_size},
          {"text_vocab_size", c.text_vocab_size},
          {"num_classes", c.num_classes},
          {"decoder_blocks", c.decoder_blocks}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.encoder.embed_dim = j.at("embed_dim").get<int>();
    c.encoder.depth = j.at("depth").get<int>();
    c.encoder.heads = j.at("heads").get<int>();
    c.encoder.mlp_ratio = j.at("mlp_ratio").get<int>();
    c.encoder.max_image_tokens = j.at("max_image_tokens").get<int>();
    c.encoder.max_text_tokens = j.at("max_text_tokens").get<int>();
    c.patch_vocab_size = j.at("patch_vocab_size").get<int>();
    c.text_vocab_size = j.at("text_vocab_size").get<int>();
    c.num_classes = j.at("num_classes").get<int>();
    c.decoder_blocks = j.at("decoder_blocks").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kSchema, std::string("bad model config: ") + e.what());
  }
  return c;
}

inline constexpr const char* kDecoderPrefix = "dec.";

enum class InitKind { kWeight, kTable, kOnes, kZeros };

struct ParamSpec {
  std::string name;
  int rows = 0;
  int cols = 0;
  bool trainable = true;
  InitKind init = InitKind::kWeight;
};

namespace detail {

inline void push_block(std::vector<ParamSpec>& out, const std::string& p, int d, int hidden, bool cross) {
  auto ln = [&](const std::string& n) {
    out.push_back({p + n + ".g", 1, d, true, InitKind::kOnes});
    out.push_back({p + n + ".b", 1, d, true, InitKind::kZeros});
  };
  auto attn = [&](const std::string& n) {
    // No key bias: softmax over keys cancels it, so it would never train.
    for (const char* m : {"q", "k", "v", "o"}) {
      out.push_back({p + n + ".w" + m, d, d, true, InitKind::kWeight});
      if (*m != 'k') out.push_back({p + n + ".b" + m, 1, d, true, InitKind::kZeros});
    }
  };
  ln("ln1");
  attn("attn");
  if (cross) {
    ln("ln_x");
    attn("xattn");
  }
  ln("ln2");
  out.push_back({p + "mlp.w1", d, hidden, true, InitKind::kWeight});
  out.push_back({p + "mlp.b1", 1, hidden, true, InitKind::kZeros});
  out.push_back({p + "mlp.w2", hidden, d, true, InitKind::kWeight});
  out.push_back({p + "mlp.b2", 1, d, true, InitKind::kZeros});
}

}  // namespace detail

// Fixed enumeration order of every parameter array. Weights are stored
// [in x out] and applied as x * W.
inline std::vector<ParamSpec> param_layout(const ModelConfig& cfg) {
  const int d = cfg.encoder.embed_dim;
  const int hidden = d * cfg.encoder.mlp_ratio;
  std::vector<ParamSpec> out;
  out.push_back({"img.cls", 1, d, true, InitKind::kTable});
  out.push_back({"img.patch_embed", cfg.patch_vocab_size, d, true, InitKind::kTable});
  out.push_back({"img.pos", cfg.encoder.max_image_tokens, d, true, InitKind::kTable});
  for (int b = 0; b < cfg.encoder.depth; ++b) detail::push_block(out, "img.blk" + std::to_string(b) + ".", d, hidden, false);
  out.push_back({"img.ln_f.g", 1, d, true, InitKind::kOnes});
  out.push_back({"img.ln_f.b", 1, d, true, InitKind::kZeros});

  out.push_back({"txt.word_embed", cfg.text_vocab_size, d, true, InitKind::kTable});
  out.push_back({"txt.pos", cfg.encoder.max_text_tokens, d, true, InitKind::kTable});
  for (int b = 0; b < cfg.encoder.depth; ++b) detail::push_block(out, "txt.blk" + std::to_string(b) + ".", d, hidden, false);
  out.push_back({"txt.ln_f.g", 1, d, true, InitKind::kOnes});
  out.push_back({"txt.ln_f.b", 1, d, true, InitKind::kZeros});

  out.push_back({"mask_token", 1, d, true, InitKind::kTable});
  out.push_back({"cls.omega", cfg.num_classes, d, true, InitKind::kTable});

  for (const char* m : {"img", "txt"}) {
    const std::string p = std::string("bn.") + m + ".";
    out.push_back({p + "scale", 1, d, true, InitKind::kOnes});
    out.push_back({p + "shift", 1, d, true, InitKind::kZeros});
    out.push_back({p + "running_mean", 1, d, false, InitKind::kZeros});
    out.push_back({p + "running_var", 1, d, false, InitKind::kOnes});
  }

  for (int b = 0; b < cfg.decoder_blocks; ++b) {
    detail::push_block(out, std::string(kDecoderPrefix) + "blk" + std::to_string(b) + ".", d, hidden, true);
  }
  out.push_back({std::string(kDecoderPrefix) + "ln_f.g", 1, d, true, InitKind::kOnes});
  out.push_back({std::string(kDecoderPrefix) + "ln_f.b", 1, d, true, InitKind::kZeros});
  out.push_back({std::string(kDecoderPrefix) + "head.w", d, cfg.text_vocab_size, true, InitKind::kWeight});
  out.push_back({std::string(kDecoderPrefix) + "head.b", 1, cfg.text_vocab_size, true, InitKind::kZeros});
  return out;
}

struct ParamArray {
  std::string name;
  Matrix value;
  bool trainable = true;
  bool operator==(const ParamArray& o) const {
    return name == o.name && trainable == o.trainable && value.rows() == o.value.rows() &&
           value.cols() == o.value.cols() && value == o.value;
  }
};

// Per-array gradients aligned with ModelParams::arrays(); an empty matrix
// means "no gradient reached this array".
using ParamGrads = std::vector<Matrix>;

class ModelParams {
 public:
  ModelParams() = default;
  explicit ModelParams(ModelConfig cfg) : config_(cfg) {}

  void add(ParamArray a) {
    require(!index_.count(a.name), ErrorKind::kValue, "duplicate parameter '" + a.name + "'");
    index_.emplace(a.name, static_cast<int>(arrays_.size()));
    arrays_.push_back(std::move(a));
  }

  const ModelConfig& config() const { return config_; }
  const std::vector<ParamArray>& arrays() const { return arrays_; }
  std::vector<ParamArray>& arrays() { return arrays_; }

  bool has(const std::string& name) const { return index_.count(name) != 0; }

  int index(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error(ErrorKind::kIndex, "no parameter named '" + name + "'");
    return it->second;
  }

  const Matrix& operator[](const std::string& name) const { return arrays_[static_cast<std::size_t>(index(name))].value; }
  Matrix& mut(const std::string& name) { return arrays_[static_cast<std::size_t>(index(name))].value; }

  std::size_t flat_size() const {
    std::size_t n = 0;
    for (const auto& a : arrays_) n += static_cast<std::size_t>(a.value.size());
    return n;
  }

  // (array index, offset within array) of flat coordinate i.
  std::pair<int, Eigen::Index> locate(std::size_t i) const {
    for (std::size_t a = 0; a < arrays_.size(); ++a) {
      const auto n = static_cast<std::size_t>(arrays_[a].value.size());
      if (i < n) return {static_cast<int>(a), static_cast<Eigen::Index>(i)};
      i -= n;
    }
    throw Error(ErrorKind::kIndex, "flat parameter index out of range");
  }

  double flat(std::size_t i) const {
    const auto [a, off] = locate(i);
    return arrays_[static_cast<std::size_t>(a)].value.data()[off];
  }
  double& flat(std::size_t i) {
    const auto [a, off] = locate(i);
    return arrays_[static_cast<std::size_t>(a)].value.data()[off];
  }

  ParamGrads zero_grads() const {
    ParamGrads g(arrays_.size());
    for (std::size_t i = 0; i < arrays_.size(); ++i) {
      g[i] = Matrix::Zero(arrays_[i].value.rows(), arrays_[i].value.cols());
    }
    return g;
  }

  ModelParams without_decoder() const {
    ModelParams out(config_);
    for (const auto& a : arrays_) {
      if (a.name.rfind(kDecoderPrefix, 0) != 0) out.add(a);
    }
    return out;
  }

  bool has_decoder() const {
    for (const auto& a : arrays_) {
      if (a.name.rfind(kDecoderPrefix, 0) == 0) return true;
    }
    return false;
  }

  bool operator==(const ModelParams& o) const { return config_ == o.config_ && arrays_ == o.arrays_; }

 private:
  ModelConfig config_;
  std::vector<ParamArray> arrays_;
  std::unordered_map<std::string, int> index_;
};

// Scaled-uniform initialization, drawn in layout order from one stream:
//   weights [in x out]         U(-1/sqrt(in), 1/sqrt(in))
//   tables (embeddings, positions, CLS, mask token, classifier)
//                              U(-sqrt(3/d), sqrt(3/d))   (unit-ish row norm)
//   norm gains / BN scale / running var = 1, biases / shifts / running mean = 0
inline ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ModelParams p(cfg);
  Rng rng(derive_seed(seed, 0x1A17));
  const double table_bound = std::sqrt(3.0 / cfg.encoder.embed_dim);
  for (const auto& s : param_layout(cfg)) {
    Matrix m(s.rows, s.cols);
    switch (s.init) {
      case InitKind::kOnes: m.setOnes(); break;
      case InitKind::kZeros: m.setZero(); break;
      case InitKind::kWeight: {
        const double a = 1.0 / std::sqrt(static_cast<double>(s.rows));
        for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-a, a);
        break;
      }
      case InitKind::kTable:
        for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-table_bound, table_bound);
        break;
    }
    p.add({s.name, std::move(m), s.trainable});
  }
  return p;
}

// ---------------------------------------------------------------------------
// Checkpoint container (all integers little-endian):
//   magic      8 bytes  "SEWCKPT\0"
//   version    u32      1
//   meta_len   u32, then meta_len bytes of UTF-8 JSON (model config)
//   count      u32
//   count x { name_len u32, name bytes, trainable u8, ndim u32 (=2),
//             rows u64, cols u64, rows*cols IEEE-754 f64 row-major }
// ---------------------------------------------------------------------------

inline constexpr std::array<char, 8> kCheckpointMagic = {'S', 'E', 'W', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline void put_f64(std::string& out, double d) {
  std::uint64_t bits;
  std::memcpy(&bits, &d, sizeof bits);
  put_u64(out, bits);
}

class ByteReader {
 public:
  explicit ByteReader(const std::string& data) : data_(data) {}
  std::uint64_t uint(int bytes) {
    need(static_cast<std::size_t>(bytes));
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + static_cast<std::size_t>(i)])) << (8 * i);
    pos_ += static_cast<std::size_t>(bytes);
    return v;
  }
  double f64() {
    const std::uint64_t bits = uint(8);
    double d;
    std::memcpy(&d, &bits, sizeof d);
    return d;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == data_.size(); }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) throw Error(ErrorKind::kParse, "checkpoint truncated");
  }
  const std::string& data_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_checkpoint(const ModelParams& p) {
  std::string out(kCheckpointMagic.begin(), kCheckpointMagic.end());
  detail::put_u32(out, kCheckpointVersion);
  const std::string meta = to_json(p.config()).dump();
  detail::put_u32(out, static_cast<std::uint32_t>(meta.size()));
  out += meta;
  detail::put_u32(out, static_cast<std::uint32_t>(p.arrays().size()));
  for (const auto& a : p.arrays()) {
    detail::put_u32(out, static_cast<std::uint32_t>(a.name.size()));
    out += a.name;
    out.push_back(a.trainable ? 1 : 0);
    detail::put_u32(out, 2);
    detail::put_u64(out, static_cast<std::uint64_t>(a.value.rows()));
    detail::put_u64(out, static_cast<std::uint64_t>(a.value.cols()));
    for (Eigen::Index i = 0; i < a.value.size(); ++i) detail::put_f64(out, a.value.data()[i]);
  }
  return out;
}

inline ModelParams deserialize_checkpoint(const std::string& data) {
  detail::ByteReader in(data);
  const std::string magic = in.bytes(8);
  require(magic == std::string(kCheckpointMagic.begin(), kCheckpointMagic.end()), ErrorKind::kParse,
          "not a checkpoint (bad magic)");
  const auto version = in.uint(4);
  require(version == kCheckpointVersion, ErrorKind::kSchema, "unsupported checkpoint version " + std::to_string(version));
  const auto meta_len = static_cast<std::size_t>(in.uint(4));
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(in.bytes(meta_len));
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorKind::kParse, std::string("checkpoint metadata: ") + e.what());
  }
  ModelParams p(model_config_from_json(meta));
  const auto count = in.uint(4);
  for (std::uint64_t i = 0; i < count; ++i) {
    ParamArray a;
    a.name = in.bytes(static_cast<std::size_t>(in.uint(4)));
    a.trainable = in.uint(1) != 0;
    const auto ndim = in.uint(4);
    require(ndim == 2, ErrorKind::kSchema, "parameter '" + a.name + "' is not 2-D");
    const auto rows = static_cast<Eigen::Index>(in.uint(8));
    const auto cols = static_cast<Eigen::Index>(in.uint(8));
    a.value.resize(rows, cols);
    for (Eigen::Index k = 0; k < a.value.size(); ++k) a.value.data()[k] = in.f64();
    p.add(std::move(a));
  }
  require(in.done(), ErrorKind::kParse, "trailing bytes after checkpoint");
  return p;
}

inline void save_checkpoint(const ModelParams& p, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::kIo, "cannot write '" + path + "'");
  const auto bytes = serialize_checkpoint(p);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorKind::kIo, "short write to '" + path + "'");
}

inline ModelParams load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::kIo, "cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize_checkpoint(ss.str());
}

}  // namespace sewcal
