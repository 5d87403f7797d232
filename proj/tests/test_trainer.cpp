#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <limits>
#include <unistd.h>

#include "rine/trainer.hpp"

namespace fs = std::filesystem;
using rine::Tensor;
using rine::TrainConfig;

namespace {

rine::ViTConfig tiny_vit() { return {.width = 8, .blocks = 3, .patch = 4, .heads = 2, .image_side = 8}; }

rine::MemoryDataset toy_memory(std::size_t per_class, std::size_t side, double amplitude, std::uint64_t seed) {
  rine::MemoryDataset mem;
  const rine::Rng base(seed);
  for (std::size_t i = 0; i < per_class; ++i) {
    for (int fake = 0; fake < 2; ++fake) {
      rine::Rng rng = base.derive(2 * i + fake);
      mem.push_back({rine::toy_image(rng, side, amplitude, fake == 1), fake, std::to_string(fake) + "_" + std::to_string(i)});
    }
  }
  return mem;
}

TrainConfig small_config() {
  TrainConfig c;
  c.batch_size = 16;
  c.epochs = 2;
  c.augment = false;
  c.head.projected = 8;
  c.head.depth = 2;
  c.seed = 5;
  return c;
}

rine::HeadConfig scalar_head() { return {.blocks = 1, .width = 1, .projected = 1, .depth = 1, .use_tie = false}; }

}  // namespace

TEST(Schedule, DecaysOnlyForLongRuns) {
  TrainConfig c;
  c.lr = 1e-3;
  c.epochs = 12;
  for (std::size_t e = 1; e <= 5; ++e) EXPECT_EQ(c.lr_at(e), 1e-3);
  for (std::size_t e = 6; e <= 10; ++e) EXPECT_EQ(c.lr_at(e), 1e-3 / 10);
  for (std::size_t e = 11; e <= 12; ++e) EXPECT_EQ(c.lr_at(e), 1e-3 / 10 / 10);
  c.epochs = 5;
  EXPECT_EQ(c.lr_at(5), 1e-3);
}

TEST(Config, JsonRoundTripAndPartialOverride) {
  TrainConfig c = small_config();
  c.loss.xi = 0.4;
  EXPECT_EQ(TrainConfig::from_json(c.to_json()).to_json(), c.to_json());
  const auto partial = TrainConfig::from_json({{"lr", 0.01}, {"head", {{"depth", 3}}}});
  EXPECT_EQ(partial.lr, 0.01);
  EXPECT_EQ(partial.head.depth, 3u);
  EXPECT_EQ(partial.head.projected, 1024u);
  EXPECT_EQ(partial.batch_size, 128u);
  EXPECT_NE(c.digest(), partial.digest());
}

TEST(Config, Validation) {
  TrainConfig c;
  c.batch_size = 1;
  EXPECT_THROW(c.validate(), rine::ParameterError);
  c = TrainConfig{};
  c.cache_features = true;
  EXPECT_THROW(c.validate(), rine::ParameterError);
}

TEST(Adam, ZeroGradientFromRestKeepsParams) {
  rine::Rng rng(1);
  auto p = rine::init_params<float>(scalar_head(), rng);
  const auto before = p;
  auto state = rine::AdamState::zeros_like(p);
  const auto zero = rine::HeadParams<float>::zeros_like(p);
  rine::adam_step(p, zero, state, 1e-3, TrainConfig{});
  EXPECT_TRUE(p == before);
}

TEST(Adam, ZeroGradientDecaysMoments) {
  rine::Rng rng(1);
  auto p = rine::init_params<float>(scalar_head(), rng);
  auto state = rine::AdamState::zeros_like(p);
  state.m.for_each([](const std::string&, Tensor& t) { t.fill(1.0f); });
  state.v.for_each([](const std::string&, Tensor& t) { t.fill(1.0f); });
  const auto zero = rine::HeadParams<float>::zeros_like(p);
  rine::adam_step(p, zero, state, 1e-3, TrainConfig{});
  EXPECT_NEAR(state.m.hidden1.weight[0], 0.9f, 1e-7);
  EXPECT_NEAR(state.v.hidden1.weight[0], 0.999f, 1e-7);
}

TEST(Adam, FirstStepOfUnitGradient) {
  rine::Rng rng(2);
  auto p = rine::init_params<float>(scalar_head(), rng);
  const auto before = p;
  auto state = rine::AdamState::zeros_like(p);
  auto g = rine::HeadParams<float>::zeros_like(p);
  g.for_each([](const std::string&, Tensor& t) { t.fill(1.0f); });
  rine::adam_step(p, g, state, 1e-3, TrainConfig{});
  // float storage: allow a couple of ulps at the parameter's magnitude
  EXPECT_NEAR(p.output.weight[0] - before.output.weight[0], -1e-3, 1e-7);
  EXPECT_NEAR(p.output.bias[0] - before.output.bias[0], -1e-3, 1e-7);
  EXPECT_EQ(state.step, 1u);
}

TEST(Adam, NonFiniteGradientNamesTensor) {
  rine::Rng rng(3);
  auto p = rine::init_params<float>(scalar_head(), rng);
  const auto before = p;
  auto state = rine::AdamState::zeros_like(p);
  auto g = rine::HeadParams<float>::zeros_like(p);
  g.hidden2.bias[0] = std::numeric_limits<float>::quiet_NaN();
  try {
    rine::adam_step(p, g, state, 1e-3, TrainConfig{});
    FAIL();
  } catch (const rine::ParameterError& e) {
    EXPECT_NE(std::string(e.what()).find("head.hidden2.bias"), std::string::npos);
  }
  EXPECT_EQ(p, before);
  EXPECT_EQ(state.step, 0u);
}

TEST(Adam, IdenticalRunsIdenticalTrajectories) {
  const auto mem = toy_memory(20, 8, 0.5, 1);
  const auto bb = rine::make_random_backbone(tiny_vit(), 1);
  const auto a = rine::train(mem, rine::make_encoder(bb), small_config());
  const auto b = rine::train(mem, rine::make_encoder(bb), small_config());
  EXPECT_EQ(a.params, b.params);
  EXPECT_EQ(a.history, b.history);
}

TEST(Train, StepCountIsCeilOfBatches) {
  const auto mem = toy_memory(21, 8, 0.5, 2);  // 42 samples
  const auto bb = rine::make_random_backbone(tiny_vit(), 2);
  auto c = small_config();
  c.epochs = 1;
  const auto s = rine::train(mem, rine::make_encoder(bb), c);
  EXPECT_EQ(s.history.size(), 3u);
  EXPECT_EQ(s.adam.step, 3u);
  EXPECT_EQ(rine::steps_per_epoch(42, 16), 3u);
}

TEST(Train, BackboneIsUntouched) {
  const auto mem = toy_memory(10, 8, 0.5, 3);
  const auto bb = rine::make_random_backbone(tiny_vit(), 3);
  const auto copy = bb.weights();
  rine::train(mem, rine::make_encoder(bb), small_config());
  EXPECT_EQ(bb.weights(), copy);
}

TEST(Train, ZeroXiEqualsNoContrastive) {
  const auto mem = toy_memory(12, 8, 0.5, 4);
  const auto bb = rine::make_random_backbone(tiny_vit(), 4);
  auto c = small_config();
  c.loss.xi = 0.0;
  const auto s = rine::train(mem, rine::make_encoder(bb), c);
  for (const auto& row : s.history) EXPECT_EQ(row.contrastive, 0.0);
  c.loss.tau = 0.5;  // irrelevant once xi is zero
  EXPECT_EQ(rine::train(mem, rine::make_encoder(bb), c).params, s.params);
}

TEST(Train, CachedFeaturesMatchOnTheFly) {
  const auto mem = toy_memory(12, 8, 0.5, 5);
  const auto bb = rine::make_random_backbone(tiny_vit(), 5);
  auto c = small_config();
  const auto live = rine::train(mem, rine::make_encoder(bb), c);
  c.cache_features = true;
  const auto cached = rine::train(mem, rine::make_encoder(bb), c);
  EXPECT_EQ(live.params, cached.params);
  EXPECT_EQ(live.history, cached.history);
}

TEST(Train, AugmentationIsReproducible) {
  const auto mem = toy_memory(8, 8, 0.5, 6);
  const auto bb = rine::make_random_backbone(tiny_vit(), 6);
  auto c = small_config();
  c.augment = true;
  const auto a = rine::train(mem, rine::make_encoder(bb), c);
  const auto b = rine::train(mem, rine::make_encoder(bb), c);
  EXPECT_EQ(a.params, b.params);
}

TEST(Train, LastBlockOnlyEqualsFinalClsBackbone) {
  const auto mem = toy_memory(12, 8, 0.5, 7);
  const auto bb = rine::make_random_backbone(tiny_vit(), 7);
  auto c = small_config();
  c.head.last_block_only = true;
  const auto sliced = rine::train(mem, rine::make_encoder(bb), c);

  rine::Encoder final_only = rine::make_encoder(bb);
  final_only.blocks = 1;
  final_only.encode = [&bb](Tensor px) {
    const Tensor k = bb.encode(std::move(px));
    const std::size_t b = k.dim(0), n = k.dim(1), d = k.dim(2);
    Tensor out({b, 1, d});
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t e = 0; e < d; ++e) out.at(i, 0, e) = k.at(i, n - 1, e);
    return out;
  };
  auto c1 = small_config();
  const auto direct = rine::train(mem, final_only, c1);
  EXPECT_EQ(sliced.params, direct.params);
  EXPECT_EQ(sliced.history, direct.history);
}

TEST(Train, SingleClassFallsBackToCrossEntropy) {
  rine::MemoryDataset mem;
  const auto all = toy_memory(10, 8, 0.5, 8);
  for (std::size_t i = 0; i < all.size(); ++i) {
    if (all.label(i) == 0) mem.push_back(*all.load(i));
  }
  const auto bb = rine::make_random_backbone(tiny_vit(), 8);
  const auto s = rine::train(mem, rine::make_encoder(bb), small_config());
  for (const auto& row : s.history) EXPECT_EQ(row.contrastive, 0.0);
}

TEST(Train, EmptyDatasetIsAnError) {
  const auto bb = rine::make_random_backbone(tiny_vit(), 9);
  EXPECT_THROW(rine::train(rine::MemoryDataset{}, rine::make_encoder(bb), small_config()), rine::DataError);
}

TEST(Train, MismatchedHeadWidthIsAnError) {
  const auto bb = rine::make_random_backbone(tiny_vit(), 9);
  auto c = small_config();
  c.head.width = 7;
  EXPECT_THROW(rine::resolve_config(c, rine::make_encoder(bb)), rine::ParameterError);
}

TEST(Train, ToyRunHalvesCrossEntropy) {
  const auto mem = toy_memory(2000, 32, 0.5, 11);
  const auto bb = rine::make_random_backbone({.width = 64, .blocks = 6, .patch = 8, .heads = 4, .image_side = 32}, 12);
  TrainConfig c;
  c.augment = false;
  c.cache_features = true;
  c.head.projected = 128;
  c.head.depth = 1;
  const auto s = rine::train(mem, rine::make_encoder(bb), c);
  ASSERT_EQ(s.history.size(), 32u);
  EXPECT_LE(s.history.back().ce, 0.5 * s.history.front().ce);
}

class CheckpointTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("rine_trainer_" + std::to_string(::getpid()));
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  fs::path dir_;
};

TEST_F(CheckpointTest, ResumeIsBitExact) {
  const auto mem = toy_memory(20, 8, 0.5, 13);
  const auto bb = rine::make_random_backbone(tiny_vit(), 13);
  auto c = small_config();
  c.augment = true;
  c.epochs = 3;
  const auto enc = rine::make_encoder(bb);
  const auto full = rine::train(mem, enc, c);
  for (std::uint64_t stop : {1u, 3u, 5u}) {
    rine::TrainOptions first;
    first.max_steps = stop;
    const auto part = rine::train(mem, enc, c, first);
    ASSERT_EQ(part.adam.step, stop);
    const auto path = dir_ / ("ck" + std::to_string(stop) + ".rine");
    rine::save_checkpoint(part, rine::resolve_config(c, enc), path);
    const auto loaded = rine::load_checkpoint(path, rine::resolve_config(c, enc));
    rine::TrainOptions rest;
    rest.resume = &loaded;
    const auto resumed = rine::train(mem, enc, c, rest);
    EXPECT_EQ(resumed.params, full.params) << "stop " << stop;
    EXPECT_EQ(resumed.adam.m, full.adam.m);
    EXPECT_EQ(resumed.adam.v, full.adam.v);
    EXPECT_EQ(resumed.history, full.history);
  }
}

TEST_F(CheckpointTest, ConfigMismatchIsRejected) {
  const auto mem = toy_memory(4, 8, 0.5, 14);
  const auto bb = rine::make_random_backbone(tiny_vit(), 14);
  const auto c = rine::resolve_config(small_config(), rine::make_encoder(bb));
  const auto s = rine::train(mem, rine::make_encoder(bb), c);
  rine::save_checkpoint(s, c, dir_ / "ck.rine");
  auto other = c;
  other.lr = 0.5;
  EXPECT_THROW(rine::load_checkpoint(dir_ / "ck.rine", other), rine::LoadError);
}

TEST_F(CheckpointTest, RunDirectoryLayout) {
  const auto mem = toy_memory(4, 8, 0.5, 15);
  const auto bb = rine::make_random_backbone(tiny_vit(), 15);
  const auto c = rine::resolve_config(small_config(), rine::make_encoder(bb));
  const auto s = rine::train(mem, rine::make_encoder(bb), c);
  rine::write_run(dir_ / "run", s, c);
  for (const auto* f : {"config.json", "history.csv", "checkpoint.rine", "head.rine"}) {
    EXPECT_TRUE(fs::exists(dir_ / "run" / f)) << f;
  }
  EXPECT_EQ(rine::load_head(dir_ / "run" / "head.rine", c.head).params, s.params);
  const auto csv = rine::history_to_csv(s.history);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "step,ce_loss,cont_loss,lr");
}

TEST(Grid, DefaultAxesEnumerate48) {
  const auto configs = rine::enumerate_grid(TrainConfig{}, rine::GridAxes{});
  EXPECT_EQ(configs.size(), 48u);
  EXPECT_EQ(configs.front().loss.xi, 0.1);
  EXPECT_EQ(configs.back().head.projected, 1024u);
}

TEST(Grid, RiggedValidationPicksForcedConfig) {
  const auto configs = rine::enumerate_grid(TrainConfig{}, rine::GridAxes{});
  auto rigged = [](const TrainConfig& c) {
    if (c.loss.xi == 0.4 && c.head.depth == 2 && c.head.projected == 256) return rine::Validation{1.0, 1.0};
    if (c.head.projected == 512) throw rine::Error("out of memory");
    return rine::Validation{0.5, 0.5 + 0.01 * static_cast<double>(c.head.depth)};
  };
  const auto ranked = rine::rank_configs(configs, rigged);
  ASSERT_EQ(ranked.size(), 48u);
  EXPECT_EQ(ranked[0].config.loss.xi, 0.4);
  EXPECT_EQ(ranked[0].config.head.depth, 2u);
  EXPECT_EQ(ranked[0].config.head.projected, 256u);
  std::size_t failed = 0;
  for (std::size_t i = 0; i < ranked.size(); ++i) {
    if (ranked[i].error) {
      ++failed;
    } else {
      EXPECT_EQ(failed, 0u) << "failed configs must come last";
    }
  }
  EXPECT_EQ(failed, 12u);
  const auto again = rine::rank_configs(configs, rigged);
  for (std::size_t i = 0; i < ranked.size(); ++i) EXPECT_EQ(again[i].config.to_json(), ranked[i].config.to_json());
}

TEST(Grid, EndToEndOnTinyData) {
  const auto train = toy_memory(12, 8, 0.5, 16), val = toy_memory(6, 8, 0.5, 17);
  const auto bb = rine::make_random_backbone(tiny_vit(), 16);
  rine::GridAxes axes{.xi = {0.1, 0.2}, .depth = {1}, .projected = {4, 8}};
  const auto results = rine::grid_search(train, val, bb, rine::enumerate_grid(small_config(), axes));
  ASSERT_EQ(results.size(), 4u);
  for (std::size_t i = 1; i < results.size(); ++i) EXPECT_GE(results[i - 1].score(), results[i].score());
}
