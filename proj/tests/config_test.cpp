#include <atac/config.hpp>

#include <gtest/gtest.h>

#include <cstdlib>
#include <sstream>
#include <string>

using namespace atac;

namespace {

RunConfig parse_text(const std::string& text) {
  RunConfig cfg;
  std::istringstream in(text);
  parse_config_text(cfg, in, "mem");
  return cfg;
}

}  // namespace

TEST(ConfigRoundTrip, SerializeParseSerializeIsByteIdentical) {
  RunConfig cfg;
  const std::string once = serialize_config(cfg);
  EXPECT_EQ(serialize_config(parse_text(once)), once);

  cfg.seed = 999;
  cfg.strict = false;
  cfg.out_dir = "runs/x";
  cfg.train_manifest = "data/train.tsv";
  cfg.stage_channels = {8, 16, 32};
  cfg.lr = 0.00375;
  cfg.two_pass = false;
  cfg.texture = "noise";
  const std::string twice = serialize_config(cfg);
  EXPECT_EQ(serialize_config(parse_text(twice)), twice);
}

TEST(ConfigRoundTrip, SectionsAppearInCanonicalOrder) {
  const std::string text = serialize_config(RunConfig{});
  const char* sections[] = {"[run]", "[data]", "[model]", "[train]", "[loss]", "[scoring]",
                            "[synth]"};
  std::size_t pos = 0;
  for (const char* s : sections) {
    const auto at = text.find(s, pos);
    ASSERT_NE(at, std::string::npos) << s;
    pos = at;
  }
  EXPECT_EQ(text.rfind("[run]\nseed = 0\n", 0), 0u);
}

TEST(ConfigParse, EachValueKindParses) {
  RunConfig cfg;
  apply_kv(cfg, "run", "seed", "42");
  apply_kv(cfg, "run", "strict", "false");
  apply_kv(cfg, "run", "out_dir", "elsewhere");
  apply_kv(cfg, "train", "lr", "0.5");
  apply_kv(cfg, "model", "stage_channels", "4,8,16");
  EXPECT_EQ(cfg.seed, 42u);
  EXPECT_FALSE(cfg.strict);
  EXPECT_EQ(cfg.out_dir, "elsewhere");
  EXPECT_DOUBLE_EQ(cfg.lr, 0.5);
  EXPECT_EQ(cfg.stage_channels, (std::vector<std::size_t>{4, 8, 16}));
}

TEST(ConfigParse, BadValuesNameTheKey) {
  RunConfig cfg;
  EXPECT_THROW(apply_kv(cfg, "run", "seed", "abc"), ConfigError);
  EXPECT_THROW(apply_kv(cfg, "train", "lr", "fast"), ConfigError);
  EXPECT_THROW(apply_kv(cfg, "loss", "hinge", "maybe"), ConfigError);
  EXPECT_THROW(apply_kv(cfg, "model", "stage_channels", ""), ConfigError);
  try {
    apply_kv(cfg, "run", "seed", "-3");
    FAIL() << "negative seed accepted";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("seed"), std::string::npos);
  }
}

TEST(ConfigParse, UnknownKeysAreRejected) {
  RunConfig cfg;
  EXPECT_THROW(apply_kv(cfg, "run", "sneed", "1"), ConfigError);
  EXPECT_THROW(apply_kv(cfg, "orbit", "seed", "1"), ConfigError);
  try {
    apply_kv(cfg, "run", "speed", "1");
    FAIL() << "unknown key accepted";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("run.speed"), std::string::npos);
  }
}

TEST(ConfigParse, ErrorsCarryOriginAndLineNumber) {
  const auto expect_mentions = [](const std::string& text, const std::string& needle) {
    RunConfig cfg;
    std::istringstream in(text);
    try {
      parse_config_text(cfg, in, "mem");
      FAIL() << "parse accepted: " << text;
    } catch (const ConfigError& e) {
      EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
    }
  };
  expect_mentions("[run]\nseed = 1\nnonsense\n", "mem:3");
  expect_mentions("[run\n", "bad section header");
  expect_mentions("seed = 1\n", "before any [section]");
  expect_mentions("[run]\nseed 1\n", "key = value");
}

TEST(ConfigParse, ToleratesCommentsPaddingAndCrlf) {
  RunConfig cfg = parse_text("# leading comment\r\n[run]\r\n   seed   =   9   \r\n\r\n"
                             "[train]\nlr = 0.25\n# trailing comment\n");
  EXPECT_EQ(cfg.seed, 9u);
  EXPECT_DOUBLE_EQ(cfg.lr, 0.25);
}

TEST(ConfigParse, MissingFileIsAnError) {
  EXPECT_THROW(load_config("/nonexistent/atac.cfg"), ConfigError);
}

TEST(ConfigEnv, SeedFallsBackToTheEnvironment) {
  unsetenv("ATAC_SEED");
  EXPECT_EQ(default_config().seed, 0u);
  setenv("ATAC_SEED", "123", 1);
  EXPECT_EQ(default_config().seed, 123u);
  setenv("ATAC_SEED", "pi", 1);
  EXPECT_THROW(default_config(), ConfigError);
  unsetenv("ATAC_SEED");
}

TEST(ConfigValidate, DefaultsPassAndOutOfRangeValuesFail) {
  validate_config(RunConfig{});
  const auto rejects = [](auto&& tweak) {
    RunConfig cfg;
    tweak(cfg);
    EXPECT_THROW(validate_config(cfg), ConfigError);
  };
  rejects([](RunConfig& c) { c.ref_mode = "zesty"; });
  rejects([](RunConfig& c) { c.texture = "plaid"; });
  rejects([](RunConfig& c) { c.defect = "dent"; });
  rejects([](RunConfig& c) { c.omega = 0.0; });
  rejects([](RunConfig& c) { c.omega = 1.0; });
  rejects([](RunConfig& c) { c.topk_fraction = 0.0; });
  rejects([](RunConfig& c) { c.topk_fraction = 1.5; });
  rejects([](RunConfig& c) { c.k = 0.0; });
  rejects([](RunConfig& c) { c.batch_size = 0; });
  rejects([](RunConfig& c) { c.lr = 0.0; });
  rejects([](RunConfig& c) { c.cutmix_rate = 1.5; });
  rejects([](RunConfig& c) { c.defect_intensity = -0.1; });
  rejects([](RunConfig& c) { c.crop_min_frac = 1.5; });
}

TEST(ConfigConvert, FieldsCarryAcrossToTheComponentConfigs) {
  RunConfig cfg;
  cfg.resolution = 32;
  cfg.channels = 1;
  cfg.stage_channels = {4, 8};
  cfg.attention_channels = 8;
  cfg.omega = 0.3;
  cfg.topk_fraction = 0.2;
  cfg.two_pass = false;
  cfg.crop_margin = 0.05;
  cfg.crop_min_frac = 0.5;
  cfg.k = 7.0;
  cfg.hinge = false;
  cfg.texture = "noise";
  cfg.defect = "patch-swap";
  cfg.seed = 17;
  cfg.ref_mode = "sampled";
  cfg.cutmix_rate = 0.75;
  cfg.lr = 0.02;
  cfg.epochs = 5;

  auto m = model_config(cfg);
  EXPECT_EQ(m.input_resolution, 32u);
  EXPECT_EQ(m.stage_channels, (std::vector<std::size_t>{4, 8}));
  EXPECT_EQ(m.attention_channels, 8u);
  EXPECT_EQ(m.map_resolution(), 8u);

  auto s = scoring_config(cfg);
  EXPECT_DOUBLE_EQ(s.omega, 0.3);
  EXPECT_DOUBLE_EQ(s.topk_fraction, 0.2);
  EXPECT_FALSE(s.two_pass);
  EXPECT_DOUBLE_EQ(s.crop.margin_frac, 0.05);
  EXPECT_DOUBLE_EQ(s.crop.min_frac, 0.5);

  auto l = loss_config(cfg);
  EXPECT_DOUBLE_EQ(l.k, 7.0);
  EXPECT_FALSE(l.hinge);

  auto sy = synth_config(cfg);
  EXPECT_EQ(sy.texture, SynthConfig::Texture::noise);
  EXPECT_EQ(sy.defect, SynthConfig::Defect::patch_swap);
  EXPECT_EQ(sy.seed, 17u);
  EXPECT_EQ(sy.resolution, 32u);

  auto t = train_options(cfg);
  EXPECT_DOUBLE_EQ(t.schedule.base_lr, 0.02);
  EXPECT_EQ(t.schedule.total_epochs, 5u);
  EXPECT_EQ(t.ref_mode, RefMode::sampled);
  EXPECT_DOUBLE_EQ(t.cutmix_rate, 0.75);
  EXPECT_EQ(t.seed, 17u);
  EXPECT_DOUBLE_EQ(t.loss.k, 7.0);
  EXPECT_FALSE(t.scoring.two_pass);
}

TEST(ConfigConvert, ModelShapeProblemsSurfaceAsConfigErrors) {
  RunConfig cfg;
  cfg.resolution = 30;  // not divisible by the stage downsampling
  cfg.stage_channels = {4, 8};
  EXPECT_THROW(model_config(cfg), ConfigError);
  RunConfig cfg2;
  cfg2.kernel_size = 4;
  EXPECT_THROW(model_config(cfg2), ConfigError);
}
