#include "sewcal/config.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <set>

using namespace sewcal;

namespace {

ErrorKind kind_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "expected an Error";
  return ErrorKind::kValue;
}

std::string message_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(ConfigFields, KeysUniqueAndDocumented) {
  std::set<std::string> keys;
  for (const auto& f : config_fields()) {
    EXPECT_TRUE(keys.insert(f.key).second) << f.key;
    EXPECT_FALSE(f.help.empty()) << f.key;
    EXPECT_EQ(f.key.find_first_of(" =#_"), std::string::npos) << f.key;
    EXPECT_EQ(find_config_field(f.key), &f);
  }
  EXPECT_EQ(find_config_field("version"), nullptr);
  for (const char* k : {"seed", "epochs", "lambda1", "lambda2", "sew", "mcm", "mask-only", "attn-only", "alpha",
                        "margin-mode", "mask-ratio", "decoder-blocks"}) {
    EXPECT_NE(find_config_field(k), nullptr) << k;
  }
}

TEST(ConfigParse, DefaultsWithVersionOnly) {
  const auto cfg = parse_config("version = train_v1\n");
  EXPECT_EQ(serialize_config(cfg), serialize_config(ExperimentConfig{}));
}

TEST(ConfigParse, ValuesCommentsAndWhitespace) {
  const auto cfg = parse_config(
      "# experiment\n"
      "version = train_v1\n"
      "  epochs=12   # short run\n"
      "\n"
      "lambda2 = 0.25\n"
      "margin-mode = fixed\n"
      "fixed-margin = 0.3\n"
      "mcm = false\n"
      "corpus = data/corpus.json\n");
  EXPECT_EQ(cfg.train.epochs, 12);
  EXPECT_EQ(cfg.train.lambda2, 0.25);
  EXPECT_EQ(cfg.sew.margin_mode, MarginMode::kFixed);
  EXPECT_EQ(cfg.sew.fixed_margin, 0.3);
  EXPECT_FALSE(cfg.train.mcm_on);
  EXPECT_EQ(cfg.corpus_path, "data/corpus.json");
}

TEST(ConfigParse, RoundTripOfRandomConfigs) {
  Rng rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    ExperimentConfig cfg;
    cfg.train.seed = rng.next_u64();
    cfg.train.learning_rate = rng.uniform(1e-5, 1e-2);
    cfg.train.lambda1 = rng.uniform();
    cfg.train.mcm_on = rng.bernoulli(0.5);
    cfg.sew.alpha = rng.uniform(1.0, 64.0);
    cfg.sew.margin_mode = rng.bernoulli(0.5) ? MarginMode::kFixed : MarginMode::kAdaptive;
    cfg.mcm.mask_ratio = rng.uniform();
    cfg.encoder.embed_dim = 4 * (1 + rng.below(8));
    cfg.out_dir = "runs/r" + std::to_string(trial);
    const std::string text = serialize_config(cfg);
    const auto back = parse_config(text);
    EXPECT_EQ(serialize_config(back), text);
    EXPECT_EQ(back.train.seed, cfg.train.seed);
    EXPECT_EQ(back.train.learning_rate, cfg.train.learning_rate);
    EXPECT_EQ(back.sew.alpha, cfg.sew.alpha);
    EXPECT_EQ(back.mcm.mask_ratio, cfg.mcm.mask_ratio);
  }
}

TEST(ConfigParse, UnknownKeyIsSchemaError) {
  EXPECT_EQ(kind_of([] { parse_config("version = train_v1\nepoch = 3\n"); }), ErrorKind::kSchema);
  const auto msg = message_of([] { parse_config("version = train_v1\nepoch = 3\n"); });
  EXPECT_NE(msg.find("line 2"), std::string::npos) << msg;
  EXPECT_NE(msg.find("'epoch'"), std::string::npos) << msg;
}

TEST(ConfigParse, VersionRequiredAndChecked) {
  EXPECT_EQ(kind_of([] { parse_config("epochs = 3\n"); }), ErrorKind::kSchema);
  EXPECT_EQ(kind_of([] { parse_config("version = train_v2\n"); }), ErrorKind::kSchema);
}

TEST(ConfigParse, DuplicatesRejected) {
  EXPECT_EQ(kind_of([] { parse_config("version = train_v1\nepochs = 3\nepochs = 4\n"); }), ErrorKind::kSchema);
  EXPECT_EQ(kind_of([] { parse_config("version = train_v1\nversion = train_v1\n"); }), ErrorKind::kSchema);
}

TEST(ConfigParse, MalformedValuesAreParseErrors) {
  for (const char* body : {"epochs = three", "epochs = 3.5", "seed = -1", "alpha = 1e", "sew = maybe", "margin-mode = linear",
                           "no equals sign", "= 4"}) {
    const std::string text = std::string("version = train_v1\n") + body + "\n";
    EXPECT_EQ(kind_of([&] { parse_config(text); }), ErrorKind::kParse) << body;
  }
}

TEST(ConfigParse, LoadFromFile) {
  const auto path = std::filesystem::temp_directory_path() / "sewcal_test_cfg.cfg";
  detail::write_file(path.string(), "version = train_v1\nbatch-size = 8\n");
  EXPECT_EQ(load_config(path.string()).train.batch_size, 8);
  std::filesystem::remove(path);
  EXPECT_EQ(kind_of([&] { load_config(path.string()); }), ErrorKind::kIo);
}

TEST(ConfigValidate, RejectsInconsistentSettings) {
  EXPECT_NO_THROW(validate(ExperimentConfig{}));
  auto a = ExperimentConfig{};
  a.train.mask_only = a.train.attn_only = true;
  EXPECT_THROW(validate(a), Error);
  auto b = ExperimentConfig{};
  b.encoder.embed_dim = 30;  // not divisible by 4 heads
  EXPECT_THROW(validate(b), Error);
  auto c = ExperimentConfig{};
  c.mcm.mask_ratio = -0.1;
  EXPECT_THROW(validate(c), Error);
}
