#include "sewcal/data_synth.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <set>

using namespace sewcal;

namespace {

CorpusConfig small_config(int ids, int images, int captions) {
  CorpusConfig cc;
  cc.num_identities = ids;
  cc.images_per_identity = images;
  cc.captions_per_image = captions;
  cc.test_identities = 0;
  return cc;
}

ErrorKind kind_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "expected an Error";
  return ErrorKind::kValue;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("sewcal_test_" + name);
}

}  // namespace

TEST(Tokenize, LowercasesAndStripsPunctuation) {
  const Vocabulary vocab({"red", "coat"});
  const auto t = tokenize("Red coat.", vocab);
  EXPECT_EQ(t.token_ids, (std::vector<int>{kClsId, vocab.id("red"), vocab.id("coat")}));
  EXPECT_EQ(t.length(), 3);
}

TEST(Tokenize, EmptyTextIsClsOnly) {
  const auto t = tokenize("", Vocabulary({"red"}));
  EXPECT_EQ(t.token_ids, std::vector<int>{kClsId});
  EXPECT_EQ(t.length(), 1);
}

TEST(Tokenize, UnknownWordsMapToUnk) {
  const Vocabulary vocab({"blue"});
  EXPECT_EQ(tokenize("blue zzz", vocab).token_ids, (std::vector<int>{kClsId, vocab.id("blue"), kUnkId}));
}

TEST(Vocabulary, SpecialIdsAreFixed) {
  const Vocabulary v({"a", "b", "a"});
  EXPECT_EQ(v.id("[PAD]"), kPadId);
  EXPECT_EQ(v.id("[CLS]"), kClsId);
  EXPECT_EQ(v.id("[UNK]"), kUnkId);
  EXPECT_EQ(v.size(), 5);
  EXPECT_EQ(v.plain_words(), (std::vector<std::string>{"a", "b"}));
}

TEST(GenerateCorpus, MinimalCounts) {
  const auto c = generate_corpus(small_config(2, 1, 1), 7);
  EXPECT_EQ(c.images.size(), 2u);
  EXPECT_EQ(c.captions.size(), 2u);
  EXPECT_EQ(c.pairs.size(), 2u);
}

TEST(GenerateCorpus, DefaultCounts) {
  const auto c = generate_corpus(CorpusConfig{}, 1);
  EXPECT_EQ(c.images.size(), 128u);
  EXPECT_EQ(c.captions.size(), 256u);
  EXPECT_EQ(c.test_identities.size(), 8u);
  EXPECT_EQ(c.train_identities.size(), 24u);
}

TEST(GenerateCorpus, SeedsProduceDifferentCaptions) {
  const auto a = generate_corpus(CorpusConfig{}, 1);
  const auto b = generate_corpus(CorpusConfig{}, 2);
  bool differ = false;
  for (std::size_t i = 0; i < a.captions.size(); ++i) differ |= a.captions[i].token_ids != b.captions[i].token_ids;
  EXPECT_TRUE(differ);
}

TEST(GenerateCorpus, RejectsBadConfigs) {
  auto one_id = small_config(1, 1, 1);
  EXPECT_EQ(kind_of([&] { generate_corpus(one_id, 0); }), ErrorKind::kValue);
  auto empty_slot = small_config(4, 1, 1);
  empty_slot.schema[2].values.clear();
  EXPECT_EQ(kind_of([&] { generate_corpus(empty_slot, 0); }), ErrorKind::kValue);
  auto no_schema = small_config(4, 1, 1);
  no_schema.schema.clear();
  EXPECT_EQ(kind_of([&] { generate_corpus(no_schema, 0); }), ErrorKind::kValue);
  auto inverted = small_config(4, 1, 1);
  inverted.verbosity_min = 20;
  inverted.verbosity_max = 10;
  EXPECT_EQ(kind_of([&] { generate_corpus(inverted, 0); }), ErrorKind::kValue);
}

TEST(GenerateCorpus, DeterministicSerialization) {
  for (std::uint64_t seed : {0ull, 3ull, 99ull}) {
    EXPECT_EQ(serialize_corpus(generate_corpus(CorpusConfig{}, seed)),
              serialize_corpus(generate_corpus(CorpusConfig{}, seed)));
  }
}

TEST(GenerateCorpus, ProfilesConsistentAndValid) {
  const auto c = generate_corpus(CorpusConfig{}, 5);
  std::set<std::vector<std::pair<std::string, int>>> distinct;
  for (const auto& p : c.profiles) {
    ASSERT_EQ(p.slots.size(), c.schema.size());
    for (std::size_t s = 0; s < p.slots.size(); ++s) {
      EXPECT_EQ(p.slots[s].first, c.schema[s].name);
      EXPECT_GE(p.slots[s].second, 0);
      EXPECT_LT(p.slots[s].second, static_cast<int>(c.schema[s].values.size()));
    }
    distinct.insert(p.slots);
  }
  EXPECT_EQ(distinct.size(), c.profiles.size());
}

TEST(GenerateCorpus, ImagesDeterministicInProfileAndNoiseSeed) {
  CorpusConfig cc;
  const auto c = generate_corpus(cc, 11);
  for (const auto& im : c.images) {
    ASSERT_EQ(im.patch_tokens.size(), static_cast<std::size_t>(cc.grid_size * cc.grid_size));
    const auto again = render_image(c.profiles[static_cast<std::size_t>(im.identity_id)], cc, im.instance_noise_seed);
    EXPECT_EQ(again.patch_tokens, im.patch_tokens);
    for (int t : im.patch_tokens) {
      EXPECT_GE(t, 0);
      EXPECT_LT(t, c.patch_vocab_size);
    }
  }
}

TEST(GenerateCorpus, CaptionsWellFormed) {
  const auto c = generate_corpus(CorpusConfig{}, 2);
  for (const auto& cap : c.captions) {
    ASSERT_FALSE(cap.token_ids.empty());
    EXPECT_EQ(cap.token_ids.front(), kClsId);
    EXPECT_EQ(cap.length(), static_cast<int>(cap.token_ids.size()));
    for (int id : cap.token_ids) {
      EXPECT_GE(id, 0);
      EXPECT_LT(id, c.vocab.size());
      EXPECT_NE(id, kPadId);
    }
  }
  std::vector<int> per_image(c.images.size(), 0);
  for (const auto& [im, ci] : c.pairs) {
    ++per_image[static_cast<std::size_t>(im)];
    EXPECT_EQ(c.images[static_cast<std::size_t>(im)].identity_id, c.captions[static_cast<std::size_t>(ci)].identity_id);
  }
  for (int n : per_image) EXPECT_EQ(n, 2);
}

// Reverse lookup: every attribute word of a caption must be a value of its
// identity's profile.
TEST(GenerateCorpus, CaptionsMentionOnlyTrueAttributes) {
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    const auto c = generate_corpus(CorpusConfig{}, seed);
    std::set<std::string> attribute_words;
    for (const auto& s : c.schema) attribute_words.insert(s.values.begin(), s.values.end());
    for (const auto& cap : c.captions) {
      const auto& profile = c.profiles[static_cast<std::size_t>(cap.identity_id)];
      std::set<std::string> truth;
      for (std::size_t s = 0; s < profile.slots.size(); ++s) {
        truth.insert(c.schema[s].values[static_cast<std::size_t>(profile.slots[s].second)]);
      }
      for (std::size_t k = 1; k < cap.token_ids.size(); ++k) {
        const auto& w = c.vocab.word(cap.token_ids[k]);
        if (attribute_words.count(w)) {
          EXPECT_TRUE(truth.count(w)) << "'" << w << "' in: " << cap.text;
        }
      }
    }
  }
}

TEST(GenerateCorpus, LengthCoverage) {
  CorpusConfig cc;
  const auto c = generate_corpus(cc, 3);
  ASSERT_GE(c.captions.size(), 256u);
  int lo = 1 << 30, hi = 0;
  for (const auto& cap : c.captions) {
    lo = std::min(lo, cap.length());
    hi = std::max(hi, cap.length());
  }
  EXPECT_LE(lo, cc.verbosity_min + 2);
  EXPECT_GE(hi, cc.verbosity_max - 2);
}

TEST(GenerateCorpus, SplitsDisjointAndComplete) {
  const auto c = generate_corpus(CorpusConfig{}, 8);
  std::set<int> train(c.train_identities.begin(), c.train_identities.end());
  for (int id : c.test_identities) EXPECT_FALSE(train.count(id));
  EXPECT_EQ(train.size() + c.test_identities.size(), static_cast<std::size_t>(c.num_identities()));
  EXPECT_EQ(pairs_in_split(c, Split::kTrain).size() + pairs_in_split(c, Split::kTest).size(), c.pairs.size());
}

TEST(CorpusIo, RoundTripThroughFile) {
  const auto c = generate_corpus(CorpusConfig{}, 4);
  const auto path = temp_path("corpus.json");
  save_corpus(c, path.string());
  EXPECT_EQ(load_corpus(path.string()), c);
  std::filesystem::remove(path);
}

TEST(CorpusIo, VersionIsChecked) {
  auto j = corpus_to_json(generate_corpus(small_config(2, 1, 1), 1));
  EXPECT_EQ(j["version"], kCorpusVersion);
  j["version"] = "corpus_v0";
  EXPECT_EQ(kind_of([&] { corpus_from_json(j); }), ErrorKind::kSchema);
}

TEST(Annotations, OneRecordTwoCaptions) {
  const Vocabulary vocab({"red", "coat"});
  const auto c = annotations_from_text(R"([{"file_path": "a.jpg", "id": 3, "captions": ["Red coat.", "a coat"]}])", vocab);
  EXPECT_EQ(c.images.size(), 1u);
  EXPECT_EQ(c.captions.size(), 2u);
  EXPECT_TRUE(c.images[0].patch_tokens.empty());
  EXPECT_EQ(c.images[0].file_path, "a.jpg");
  EXPECT_EQ(c.train_identities, std::vector<int>{3});
}

TEST(Annotations, DistinctIdentities) {
  const auto c = annotations_from_text(R"([
    {"file_path": "a", "id": 5, "captions": ["x"]},
    {"file_path": "b", "id": 5, "captions": ["y"]},
    {"file_path": "c", "id": 9, "captions": ["z"], "split": "test"}])",
                                       Vocabulary());
  EXPECT_EQ(c.num_identities(), 2);
  EXPECT_EQ(c.train_identities, std::vector<int>{5});
  EXPECT_EQ(c.test_identities, std::vector<int>{9});
}

TEST(Annotations, MissingKeyIsSchemaErrorNamingKey) {
  try {
    annotations_from_text(R"([{"file_path": "a", "captions": ["x"]}])", Vocabulary());
    FAIL() << "expected schema error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kSchema);
    EXPECT_NE(std::string(e.what()).find("\"id\""), std::string::npos) << e.what();
  }
}

TEST(Annotations, MalformedJsonReportsLine) {
  try {
    annotations_from_text("[\n  {\"file_path\": \"a\",\n  \"id\": 1,,\n}]", Vocabulary());
    FAIL() << "expected parse error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kParse);
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos) << e.what();
  }
}

TEST(Annotations, LoadFromFile) {
  const auto path = temp_path("ann.json");
  detail::write_file(path.string(), R"([{"file_path": "p", "id": 0, "captions": ["red"]}])");
  const auto c = load_annotations(path.string(), Vocabulary({"red"}));
  EXPECT_EQ(c.captions.at(0).token_ids, (std::vector<int>{kClsId, 3}));
  std::filesystem::remove(path);
}
