#pragma once

// Synthetic person/caption corpus, word-level tokenizer and the person-search
// annotation loader.
//
// A synthetic "image" is a g x g grid of patch ids. Every attribute slot of an
// identity owns fixed grid cells; instance noise replaces cells with clutter
// ids. Captions are templated phrases over a random subset of the identity's
// attributes padded with neutral filler words, so caption length and caption
// informativeness grow together.

#include "sewcal/core.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace sewcal {

inline constexpr int kPadId = 0;
inline constexpr int kClsId = 1;
inline constexpr int kUnkId = 2;
inline constexpr int kNumSpecialTokens = 3;
inline constexpr const char* kCorpusVersion = "corpus_v1";

class Vocabulary {
 public:
  Vocabulary() : Vocabulary(std::vector<std::string>{}) {}

  // Special tokens [PAD] [CLS] [UNK] always occupy ids 0, 1, 2; `words`
  // follow in order. Duplicate words keep their first id.
  explicit Vocabulary(const std::vector<std::string>& words) {
    add("[PAD]");
    add("[CLS]");
    add("[UNK]");
    for (const auto& w : words) add(w);
  }

  int id(const std::string& word) const {
    auto it = index_.find(word);
    return it == index_.end() ? kUnkId : it->second;
  }

  bool contains(const std::string& word) const { return index_.count(word) != 0; }
  const std::string& word(int id) const { return words_.at(static_cast<std::size_t>(id)); }
  int size() const { return static_cast<int>(words_.size()); }
  const std::vector<std::string>& words() const { return words_; }

  // Words without the special tokens; the value stored in corpus files.
  std::vector<std::string> plain_words() const {
    return {words_.begin() + kNumSpecialTokens, words_.end()};
  }

  bool operator==(const Vocabulary& o) const { return words_ == o.words_; }

 private:
  void add(const std::string& w) {
    if (index_.count(w)) return;
    index_.emplace(w, static_cast<int>(words_.size()));
    words_.push_back(w);
  }

  std::vector<std::string> words_;
  std::unordered_map<std::string, int> index_;
};

struct TokenizedCaption {
  std::vector<int> token_ids;  // starts with kClsId, never padded
  int identity_id = 0;
  std::string text;

  int length() const { return static_cast<int>(token_ids.size()); }
  bool operator==(const TokenizedCaption&) const = default;
};

// Lowercase, strip ASCII punctuation, split on whitespace, map unknown words
// to [UNK] and prepend [CLS].
inline TokenizedCaption tokenize(const std::string& text, const Vocabulary& vocab) {
  TokenizedCaption out;
  out.text = text;
  out.token_ids.push_back(kClsId);
  std::string cleaned;
  cleaned.reserve(text.size());
  for (unsigned char c : text) {
    if (std::ispunct(c)) continue;
    cleaned.push_back(static_cast<char>(std::tolower(c)));
  }
  std::istringstream words(cleaned);
  std::string w;
  while (words >> w) out.token_ids.push_back(vocab.id(w));
  return out;
}

struct AttributeSlot {
  std::string name;
  std::vector<std::string> values;
  bool operator==(const AttributeSlot&) const = default;
};

struct AttributeProfile {
  int identity_id = 0;
  std::vector<std::pair<std::string, int>> slots;  // (slot name, value index)
  bool operator==(const AttributeProfile&) const = default;
};

struct SyntheticPersonImage {
  std::vector<int> patch_tokens;  // row-major g x g; empty for external images
  int identity_id = 0;
  std::uint64_t instance_noise_seed = 0;
  std::string file_path;
  bool operator==(const SyntheticPersonImage&) const = default;
};

struct Corpus {
  int grid_size = 0;
  int patch_vocab_size = 0;
  Vocabulary vocab;
  std::vector<AttributeSlot> schema;
  std::vector<AttributeProfile> profiles;
  std::vector<SyntheticPersonImage> images;
  std::vector<TokenizedCaption> captions;
  std::vector<std::pair<int, int>> pairs;  // (image index, caption index)
  std::vector<int> train_identities;
  std::vector<int> test_identities;

  int num_identities() const {
    std::set<int> ids;
    for (const auto& im : images) ids.insert(im.identity_id);
    return static_cast<int>(ids.size());
  }
  // Classifier width: labels must lie in [0, num_classes()).
  int num_classes() const {
    int m = -1;
    for (const auto& im : images) m = std::max(m, im.identity_id);
    for (const auto& c : captions) m = std::max(m, c.identity_id);
    return m + 1;
  }
  bool operator==(const Corpus&) const = default;
};

enum class Split { kTrain, kTest };

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "test") return Split::kTest;
  throw Error(ErrorKind::kValue, "unknown split '" + s + "' (expected train|test)");
}

inline const std::vector<int>& split_identities(const Corpus& c, Split s) {
  return s == Split::kTrain ? c.train_identities : c.test_identities;
}

// Pair indices whose identity belongs to the split, in corpus order.
inline std::vector<int> pairs_in_split(const Corpus& c, Split s) {
  const auto& ids = split_identities(c, s);
  const std::set<int> keep(ids.begin(), ids.end());
  std::vector<int> out;
  for (std::size_t p = 0; p < c.pairs.size(); ++p) {
    if (keep.count(c.images[static_cast<std::size_t>(c.pairs[p].first)].identity_id)) {
      out.push_back(static_cast<int>(p));
    }
  }
  return out;
}

inline std::vector<AttributeSlot> default_attribute_schema() {
  const std::vector<std::string> colors = {"red",   "blue",  "green", "black",
                                           "white", "yellow", "gray", "pink"};
  return {
      {"gender", {"man", "woman"}},
      {"hair", {"short", "long", "curly", "bald"}},
      {"top_color", colors},
      {"top_type", {"shirt", "jacket", "sweater", "coat", "hoodie"}},
      {"bottom_color", colors},
      {"bottom_type", {"pants", "jeans", "shorts", "skirt"}},
      {"shoes_color", {"black", "white", "brown", "gray"}},
      {"accessory", {"backpack", "handbag", "umbrella", "hat", "bicycle"}},
  };
}

struct CorpusConfig {
  int num_identities = 32;
  int images_per_identity = 4;
  int captions_per_image = 2;
  int verbosity_min = 8;  // caption length in tokens, [CLS] included
  int verbosity_max = 28;
  int grid_size = 4;
  double noise_prob = 0.15;
  int noise_tokens = 8;
  int test_identities = -1;  // held-out identities; -1 means num_identities / 4
  std::vector<AttributeSlot> schema = default_attribute_schema();
};

namespace detail {

inline const std::vector<std::string>& filler_words() {
  static const std::vector<std::string> words = {
      "the",  "person", "is",    "walking", "this", "pedestrian", "appears",
      "to",   "be",     "young", "looks",   "seen", "standing",   "near",
      "street", "along", "road",  "outside", "also", "there"};
  return words;
}

// Connectives used by the caption templates.
inline const std::vector<std::string>& template_words() {
  static const std::vector<std::string> words = {"a", "with", "hair", "wearing", "and",
                                                 "shoes", "carrying", "has"};
  return words;
}

inline int slot_index(const std::vector<AttributeSlot>& schema, const std::string& name) {
  for (std::size_t i = 0; i < schema.size(); ++i) {
    if (schema[i].name == name) return static_cast<int>(i);
  }
  return -1;
}

// Patch id of (slot, value): slots are laid out consecutively after the
// clutter ids.
inline int patch_id(const std::vector<AttributeSlot>& schema, int noise_tokens, int slot, int value) {
  int base = noise_tokens;
  for (int s = 0; s < slot; ++s) base += static_cast<int>(schema[static_cast<std::size_t>(s)].values.size());
  return base + value;
}

}  // namespace detail

inline int patch_vocab_size(const CorpusConfig& cfg) {
  int n = cfg.noise_tokens;
  for (const auto& s : cfg.schema) n += static_cast<int>(s.values.size());
  return n;
}

// Vocabulary for synthetic captions: attribute words, template words, fillers.
inline Vocabulary synthetic_vocabulary(const std::vector<AttributeSlot>& schema) {
  std::vector<std::string> words;
  for (const auto& s : schema) words.insert(words.end(), s.values.begin(), s.values.end());
  for (const auto& w : detail::template_words()) words.push_back(w);
  for (const auto& w : detail::filler_words()) words.push_back(w);
  return Vocabulary(words);
}

// Grid cell -> owning slot. Cells are dealt round-robin over slots so that
// every slot appears at least floor(g*g / slots) times.
inline std::vector<int> grid_layout(int grid_size, int num_slots) {
  std::vector<int> owner(static_cast<std::size_t>(grid_size * grid_size));
  for (std::size_t i = 0; i < owner.size(); ++i) owner[i] = static_cast<int>(i % static_cast<std::size_t>(num_slots));
  return owner;
}

inline SyntheticPersonImage render_image(const AttributeProfile& profile, const CorpusConfig& cfg,
                                         std::uint64_t instance_noise_seed) {
  SyntheticPersonImage img;
  img.identity_id = profile.identity_id;
  img.instance_noise_seed = instance_noise_seed;
  const auto layout = grid_layout(cfg.grid_size, static_cast<int>(cfg.schema.size()));
  Rng rng(instance_noise_seed);
  img.patch_tokens.resize(layout.size());
  for (std::size_t cell = 0; cell < layout.size(); ++cell) {
    const int slot = layout[cell];
    const int value = profile.slots[static_cast<std::size_t>(slot)].second;
    const bool clutter = rng.bernoulli(cfg.noise_prob);
    const int noise = rng.below(std::max(cfg.noise_tokens, 1));
    img.patch_tokens[cell] = (clutter && cfg.noise_tokens > 0)
                                 ? noise
                                 : detail::patch_id(cfg.schema, cfg.noise_tokens, slot, value);
  }
  return img;
}

namespace detail {

inline std::vector<std::string> attribute_phrase(const std::vector<AttributeSlot>& schema,
                                                 const AttributeProfile& p, const std::string& slot,
                                                 Rng& rng) {
  auto value_of = [&](const std::string& name) -> std::string {
    const int s = slot_index(schema, name);
    if (s < 0) return {};
    return schema[static_cast<std::size_t>(s)].values[static_cast<std::size_t>(p.slots[static_cast<std::size_t>(s)].second)];
  };
  if (slot == "hair") return {"with", value_of("hair"), "hair"};
  if (slot == "top") {
    if (rng.bernoulli(0.25)) return {"wearing", "a", value_of("top_type")};
    return {"wearing", "a", value_of("top_color"), value_of("top_type")};
  }
  if (slot == "bottom") {
    if (rng.bernoulli(0.25)) return {"and", value_of("bottom_type")};
    return {"and", value_of("bottom_color"), value_of("bottom_type")};
  }
  if (slot == "shoes") return {"with", value_of("shoes_color"), "shoes"};
  if (slot == "accessory") return {"carrying", "a", value_of("accessory")};
  return {};
}

}  // namespace detail

// Caption of approximately `target_len` tokens ([CLS] included). Longer
// targets mention more attributes; remaining room is filled with fillers.
inline std::string compose_caption(const std::vector<AttributeSlot>& schema,
                                   const AttributeProfile& profile, int target_len, int len_min,
                                   int len_max, Rng& rng) {
  const bool default_like = detail::slot_index(schema, "gender") >= 0 &&
                            detail::slot_index(schema, "top_type") >= 0;
  std::vector<std::string> words;
  if (default_like) {
    const int g = detail::slot_index(schema, "gender");
    words = {"a", schema[static_cast<std::size_t>(g)].values[static_cast<std::size_t>(profile.slots[static_cast<std::size_t>(g)].second)]};
    std::vector<std::string> groups = {"top", "bottom", "hair", "shoes", "accessory"};
    rng.shuffle(groups);
    // top is always mentioned first among the shuffled remainder.
    std::stable_partition(groups.begin(), groups.end(), [](const std::string& s) { return s == "top"; });
    const double frac = len_max > len_min
                            ? std::clamp(static_cast<double>(target_len - len_min) / (len_max - len_min), 0.0, 1.0)
                            : 1.0;
    const int mention = 1 + static_cast<int>(std::lround(frac * static_cast<double>(groups.size() - 1)));
    for (int i = 0; i < mention; ++i) {
      auto phrase = detail::attribute_phrase(schema, profile, groups[static_cast<std::size_t>(i)], rng);
      if (static_cast<int>(words.size() + phrase.size()) + 1 > target_len && i > 0) break;
      words.insert(words.end(), phrase.begin(), phrase.end());
    }
  } else {
    // Generic schema: "<value> <value> ..." over a random subset.
    std::vector<int> order(schema.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    rng.shuffle(order);
    for (int s : order) {
      if (static_cast<int>(words.size()) + 2 > target_len) break;
      words.push_back(schema[static_cast<std::size_t>(s)].values[static_cast<std::size_t>(profile.slots[static_cast<std::size_t>(s)].second)]);
    }
  }
  const auto& fillers = detail::filler_words();
  while (static_cast<int>(words.size()) + 1 < target_len) {
    const auto& f = fillers[static_cast<std::size_t>(rng.below(static_cast<int>(fillers.size())))];
    const auto pos = static_cast<std::ptrdiff_t>(rng.below(static_cast<int>(words.size()) + 1));
    words.insert(words.begin() + pos, f);
  }
  std::string text;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) text += ' ';
    text += words[i];
  }
  text += '.';
  return text;
}

inline Corpus generate_corpus(const CorpusConfig& cfg, std::uint64_t seed) {
  require(cfg.num_identities >= 2, ErrorKind::kValue, "corpus needs at least 2 identities");
  require(!cfg.schema.empty(), ErrorKind::kValue, "attribute schema is empty");
  for (const auto& s : cfg.schema) {
    require(!s.values.empty(), ErrorKind::kValue, "attribute slot '" + s.name + "' has an empty vocabulary");
  }
  require(cfg.verbosity_min <= cfg.verbosity_max, ErrorKind::kValue, "verbosity range has min > max");
  require(cfg.verbosity_min >= 2, ErrorKind::kValue, "verbosity_min must be at least 2");
  require(cfg.images_per_identity >= 1 && cfg.captions_per_image >= 1, ErrorKind::kValue,
          "images_per_identity and captions_per_image must be positive");
  require(cfg.grid_size >= 1, ErrorKind::kValue, "grid_size must be positive");
  const int num_test = cfg.test_identities < 0 ? cfg.num_identities / 4 : cfg.test_identities;
  require(num_test < cfg.num_identities, ErrorKind::kValue, "test_identities must be below num_identities");

  Corpus corpus;
  corpus.grid_size = cfg.grid_size;
  corpus.patch_vocab_size = patch_vocab_size(cfg);
  corpus.vocab = synthetic_vocabulary(cfg.schema);
  corpus.schema = cfg.schema;

  std::set<std::vector<int>> seen;
  for (int id = 0; id < cfg.num_identities; ++id) {
    AttributeProfile p;
    p.identity_id = id;
    std::uint64_t attempt = 0;
    std::vector<int> values;
    do {
      Rng rng(derive_seed(seed, 1, static_cast<std::uint64_t>(id), attempt++));
      values.clear();
      for (const auto& s : cfg.schema) values.push_back(rng.below(static_cast<int>(s.values.size())));
    } while (seen.count(values) && attempt < 1000);
    seen.insert(values);
    for (std::size_t s = 0; s < cfg.schema.size(); ++s) p.slots.emplace_back(cfg.schema[s].name, values[s]);
    corpus.profiles.push_back(std::move(p));
  }

  for (int id = 0; id < cfg.num_identities; ++id) {
    const auto& profile = corpus.profiles[static_cast<std::size_t>(id)];
    for (int im = 0; im < cfg.images_per_identity; ++im) {
      const auto noise_seed = derive_seed(seed, 2, static_cast<std::uint64_t>(id), static_cast<std::uint64_t>(im));
      corpus.images.push_back(render_image(profile, cfg, noise_seed));
      const int image_index = static_cast<int>(corpus.images.size()) - 1;
      for (int c = 0; c < cfg.captions_per_image; ++c) {
        Rng rng(derive_seed(seed, 3, static_cast<std::uint64_t>(id), static_cast<std::uint64_t>(im),
                            static_cast<std::uint64_t>(c)));
        const int target = cfg.verbosity_min + rng.below(cfg.verbosity_max - cfg.verbosity_min + 1);
        auto cap = tokenize(compose_caption(cfg.schema, profile, target, cfg.verbosity_min, cfg.verbosity_max, rng),
                            corpus.vocab);
        cap.identity_id = id;
        corpus.captions.push_back(std::move(cap));
        corpus.pairs.emplace_back(image_index, static_cast<int>(corpus.captions.size()) - 1);
      }
    }
  }

  std::vector<int> ids(static_cast<std::size_t>(cfg.num_identities));
  for (int i = 0; i < cfg.num_identities; ++i) ids[static_cast<std::size_t>(i)] = i;
  Rng split_rng(derive_seed(seed, 4));
  split_rng.shuffle(ids);
  corpus.test_identities.assign(ids.begin(), ids.begin() + num_test);
  corpus.train_identities.assign(ids.begin() + num_test, ids.end());
  std::sort(corpus.test_identities.begin(), corpus.test_identities.end());
  std::sort(corpus.train_identities.begin(), corpus.train_identities.end());
  return corpus;
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

inline nlohmann::json corpus_to_json(const Corpus& c) {
  using nlohmann::json;
  json j;
  j["version"] = kCorpusVersion;
  j["grid_size"] = c.grid_size;
  j["patch_vocab_size"] = c.patch_vocab_size;
  j["vocab"] = c.vocab.plain_words();
  j["schema"] = json::array();
  for (const auto& s : c.schema) j["schema"].push_back({{"name", s.name}, {"values", s.values}});
  j["profiles"] = json::array();
  for (const auto& p : c.profiles) {
    json slots = json::array();
    for (const auto& [name, v] : p.slots) slots.push_back({name, v});
    j["profiles"].push_back({{"identity", p.identity_id}, {"slots", slots}});
  }
  j["images"] = json::array();
  for (const auto& im : c.images) {
    j["images"].push_back({{"identity", im.identity_id},
                           {"noise_seed", im.instance_noise_seed},
                           {"file_path", im.file_path},
                           {"patches", im.patch_tokens}});
  }
  j["captions"] = json::array();
  for (const auto& cap : c.captions) {
    j["captions"].push_back({{"identity", cap.identity_id}, {"text", cap.text}, {"tokens", cap.token_ids}});
  }
  j["pairs"] = c.pairs;
  j["train_identities"] = c.train_identities;
  j["test_identities"] = c.test_identities;
  return j;
}

inline std::string serialize_corpus(const Corpus& c) { return corpus_to_json(c).dump(1) + "\n"; }

namespace detail {

inline const nlohmann::json& required_key(const nlohmann::json& obj, const char* key) {
  if (!obj.is_object() || !obj.contains(key)) {
    throw Error(ErrorKind::kSchema, std::string("missing required key \"") + key + "\"");
  }
  return obj.at(key);
}

inline int line_of_offset(const std::string& text, std::size_t offset) {
  offset = std::min(offset, text.size());
  return 1 + static_cast<int>(std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(offset), '\n'));
}

inline nlohmann::json parse_json_text(const std::string& text, const std::string& origin) {
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorKind::kParse, origin + ": line " + std::to_string(line_of_offset(text, e.byte)) +
                                       ": malformed JSON: " + e.what());
  }
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::kIo, "cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, const std::string& data) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::kIo, "cannot write '" + path + "'");
  out << data;
  if (!out) throw Error(ErrorKind::kIo, "short write to '" + path + "'");
}

}  // namespace detail

inline Corpus corpus_from_json(const nlohmann::json& j) {
  using detail::required_key;
  const auto version = required_key(j, "version").get<std::string>();
  require(version == kCorpusVersion, ErrorKind::kSchema, "unsupported corpus version '" + version + "'");
  Corpus c;
  try {
    c.grid_size = required_key(j, "grid_size").get<int>();
    c.patch_vocab_size = required_key(j, "patch_vocab_size").get<int>();
    c.vocab = Vocabulary(required_key(j, "vocab").get<std::vector<std::string>>());
    for (const auto& s : required_key(j, "schema")) {
      c.schema.push_back({required_key(s, "name").get<std::string>(),
                          required_key(s, "values").get<std::vector<std::string>>()});
    }
    for (const auto& p : required_key(j, "profiles")) {
      AttributeProfile prof;
      prof.identity_id = required_key(p, "identity").get<int>();
      for (const auto& s : required_key(p, "slots")) {
        prof.slots.emplace_back(s.at(0).get<std::string>(), s.at(1).get<int>());
      }
      c.profiles.push_back(std::move(prof));
    }
    for (const auto& im : required_key(j, "images")) {
      SyntheticPersonImage img;
      img.identity_id = required_key(im, "identity").get<int>();
      img.instance_noise_seed = required_key(im, "noise_seed").get<std::uint64_t>();
      img.file_path = required_key(im, "file_path").get<std::string>();
      img.patch_tokens = required_key(im, "patches").get<std::vector<int>>();
      c.images.push_back(std::move(img));
    }
    for (const auto& cap : required_key(j, "captions")) {
      TokenizedCaption t;
      t.identity_id = required_key(cap, "identity").get<int>();
      t.text = required_key(cap, "text").get<std::string>();
      t.token_ids = required_key(cap, "tokens").get<std::vector<int>>();
      c.captions.push_back(std::move(t));
    }
    c.pairs = required_key(j, "pairs").get<std::vector<std::pair<int, int>>>();
    c.train_identities = required_key(j, "train_identities").get<std::vector<int>>();
    c.test_identities = required_key(j, "test_identities").get<std::vector<int>>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kSchema, std::string("corpus field has the wrong type: ") + e.what());
  }
  for (const auto& cap : c.captions) {
    for (int t : cap.token_ids) {
      require(t >= 0 && t < c.vocab.size(), ErrorKind::kSchema, "caption token id out of vocabulary range");
    }
  }
  for (const auto& [im, cap] : c.pairs) {
    require(im >= 0 && im < static_cast<int>(c.images.size()) && cap >= 0 &&
                cap < static_cast<int>(c.captions.size()),
            ErrorKind::kSchema, "pair index out of range");
  }
  return c;
}

inline void save_corpus(const Corpus& c, const std::string& path) {
  detail::write_file(path, serialize_corpus(c));
}

inline Corpus load_corpus(const std::string& path) {
  return corpus_from_json(detail::parse_json_text(detail::read_file(path), path));
}

// Person-search annotation format: a JSON array of
//   {"file_path": str, "id": int, "captions": [str, ...], "split"?: str}
// Images carry no patch grid. Identity splits follow the first record seen
// for each id; a missing "split" means train.
inline Corpus annotations_from_text(const std::string& text, const Vocabulary& vocab,
                                    const std::string& origin = "<annotations>") {
  const auto j = detail::parse_json_text(text, origin);
  require(j.is_array(), ErrorKind::kSchema, "annotation file must be a JSON array of records");
  Corpus c;
  c.vocab = vocab;
  std::map<int, Split> id_split;
  for (const auto& rec : j) {
    SyntheticPersonImage img;
    try {
      img.file_path = detail::required_key(rec, "file_path").get<std::string>();
      img.identity_id = detail::required_key(rec, "id").get<int>();
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::kSchema, std::string("annotation field has the wrong type: ") + e.what());
    }
    const auto& caps = detail::required_key(rec, "captions");
    require(caps.is_array(), ErrorKind::kSchema, "\"captions\" must be an array of strings");
    Split split = Split::kTrain;
    if (rec.contains("split")) {
      const auto s = rec.at("split").get<std::string>();
      split = (s == "test" || s == "val" || s == "valid" || s == "validation") ? Split::kTest : Split::kTrain;
    }
    id_split.emplace(img.identity_id, split);
    c.images.push_back(std::move(img));
    const int image_index = static_cast<int>(c.images.size()) - 1;
    for (const auto& s : caps) {
      require(s.is_string(), ErrorKind::kSchema, "\"captions\" must be an array of strings");
      auto cap = tokenize(s.get<std::string>(), vocab);
      cap.identity_id = c.images.back().identity_id;
      c.captions.push_back(std::move(cap));
      c.pairs.emplace_back(image_index, static_cast<int>(c.captions.size()) - 1);
    }
  }
  for (const auto& [id, split] : id_split) {
    (split == Split::kTrain ? c.train_identities : c.test_identities).push_back(id);
  }
  return c;
}

inline Corpus load_annotations(const std::string& path, const Vocabulary& vocab) {
  return annotations_from_text(detail::read_file(path), vocab, path);
}

}  // namespace sewcal
