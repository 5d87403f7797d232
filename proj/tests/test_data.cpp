#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>
#include <unistd.h>

#include "oracles.hpp"
#include "rine/data.hpp"
#include "rine/metrics.hpp"

namespace fs = std::filesystem;
using rine::ImageSample;
using rine::Tensor;

namespace {

class DataTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("rine_data_" + std::to_string(::getpid()));
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  fs::path dir_;
};

Tensor smooth_image(std::size_t side, std::uint64_t seed) {
  rine::Rng rng(seed);
  return rine::toy_image(rng, side, 0.0, false);
}

Tensor random_image(std::size_t h, std::size_t w, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  Tensor t({3, h, w});
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (auto& v : t.values()) v = u(gen);
  return t;
}

double mean_abs_diff(const Tensor& a, const Tensor& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
  return s / static_cast<double>(a.size());
}

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// |Σ (−1)^(x+y) p(x,y)| summed over channels: energy at the Nyquist corner.
double checker_energy(const Tensor& px) {
  const std::size_t h = px.dim(1), w = px.dim(2);
  double total = 0;
  for (std::size_t c = 0; c < 3; ++c) {
    double s = 0;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) s += ((x + y) % 2 ? -1.0 : 1.0) * px.at(c, y, x);
    total += std::abs(s);
  }
  return total / static_cast<double>(h * w);
}

double oracle_ap(const fs::path& root) {
  const rine::DirectoryDataset ds(root);
  std::vector<double> scores;
  std::vector<int> labels;
  rine::for_each_sample(ds, [&](ImageSample s) {
    scores.push_back(checker_energy(s.pixels));
    labels.push_back(s.label);
  });
  return oracle::average_precision(scores, labels);
}

}  // namespace

TEST_F(DataTest, DirectoryOrderAndLabels) {
  fs::create_directories(dir_ / "0_real");
  fs::create_directories(dir_ / "1_fake");
  for (int i = 0; i < 3; ++i) rine::write_png(dir_ / "0_real" / ("r" + std::to_string(i) + ".png"), random_image(4, 4, i));
  for (int i = 0; i < 2; ++i) rine::write_png(dir_ / "1_fake" / ("f" + std::to_string(i) + ".png"), random_image(4, 4, 9 + i));
  std::ofstream(dir_ / "1_fake" / "notes.txt") << "ignored";
  const rine::DirectoryDataset ds(dir_);
  ASSERT_EQ(ds.size(), 5u);
  std::vector<int> labels;
  for (std::size_t i = 0; i < ds.size(); ++i) labels.push_back(ds.label(i));
  EXPECT_EQ(labels, (std::vector<int>{0, 0, 0, 1, 1}));
  EXPECT_EQ(ds.id(0), "0_real/r0.png");
  const rine::DirectoryDataset again(dir_);
  for (std::size_t i = 0; i < ds.size(); ++i) EXPECT_EQ(ds.id(i), again.id(i));
}

TEST_F(DataTest, CorruptFileIsSkippedAndCounted) {
  fs::create_directories(dir_ / "0_real");
  fs::create_directories(dir_ / "1_fake");
  for (int i = 0; i < 5; ++i) rine::write_png(dir_ / "0_real" / ("r" + std::to_string(i) + ".png"), random_image(4, 4, i));
  for (int i = 0; i < 4; ++i) rine::write_png(dir_ / "1_fake" / ("f" + std::to_string(i) + ".png"), random_image(4, 4, 9 + i));
  std::ofstream(dir_ / "1_fake" / "broken.png") << "not an image";
  const rine::DirectoryDataset ds(dir_);
  std::size_t seen = 0;
  const auto skipped = rine::for_each_sample(ds, [&](ImageSample) { ++seen; });
  EXPECT_EQ(seen, 9u);
  EXPECT_EQ(skipped, 1u);
  EXPECT_EQ(ds.skipped(), 1u);
}

TEST_F(DataTest, EmptyClassDirectoryIsAnError) {
  fs::create_directories(dir_ / "0_real");
  fs::create_directories(dir_ / "1_fake");
  rine::write_png(dir_ / "0_real" / "a.png", random_image(4, 4, 1));
  EXPECT_THROW(rine::DirectoryDataset{dir_}, rine::DataError);
  EXPECT_THROW(rine::DirectoryDataset{dir_ / "missing"}, rine::DataError);
}

TEST_F(DataTest, PngRoundTripIsQuantizationExact) {
  const auto img = random_image(5, 7, 3);
  rine::write_png(dir_ / "x.png", img);
  const auto back = rine::decode_image(dir_ / "x.png");
  ASSERT_EQ(back.shape(), img.shape());
  for (std::size_t i = 0; i < img.size(); ++i) EXPECT_NEAR(back[i], img[i], 0.5 / 255 + 1e-6);
}

TEST(Primitives, JpegQuality100IsMild) {
  const auto img = smooth_image(64, 1);
  EXPECT_LT(mean_abs_diff(rine::jpeg_roundtrip(img, 100), img), 0.02);
  EXPECT_THROW(rine::jpeg_roundtrip(img, 0), rine::ParameterError);
}

TEST(Primitives, ZeroSigmaBlurIsIdentity) {
  const auto img = random_image(8, 8, 2);
  EXPECT_EQ(rine::gaussian_blur(img, 0.0), img);
  const auto blurred = rine::gaussian_blur(img, 2.0);
  EXPECT_GT(mean_abs_diff(blurred, img), 0.05);
}

TEST(Primitives, FlipIsInvolution) {
  const auto img = random_image(6, 9, 3);
  EXPECT_EQ(rine::hflip(rine::hflip(img)), img);
  EXPECT_EQ(rine::hflip(img).at(0, 0), img.at(0, 8));
}

TEST(Primitives, NoiseZeroSigmaIsIdentity) {
  const auto img = random_image(6, 6, 4);
  rine::Rng rng(1);
  EXPECT_EQ(rine::add_gaussian_noise(img, 0.0, rng), img);
  const auto noisy = rine::add_gaussian_noise(img, 0.5, rng);
  for (float v : noisy.values()) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
}

TEST(Primitives, FitToSidePadsCentred) {
  Tensor img({3, 2, 2}, 1.0f);
  const auto out = rine::fit_to_side(img, 4);
  EXPECT_EQ(out.at(0, 0, 0), 0.0f);
  EXPECT_EQ(out.at(0, 1, 1), 1.0f);
  EXPECT_EQ(out.at(2, 2, 2), 1.0f);
  EXPECT_EQ(out.at(2, 3, 3), 0.0f);
}

TEST(PreprocessEval, CentreCrop) {
  const ImageSample s{random_image(224, 224, 5), 1, "a"};
  EXPECT_EQ(rine::preprocess_eval(s).pixels, s.pixels);
  const ImageSample big{random_image(226, 226, 6), 0, "b"};
  const auto out = rine::preprocess_eval(big);
  EXPECT_EQ(out.pixels, rine::crop(big.pixels, 1, 1, 224));
  EXPECT_EQ(rine::preprocess_eval(out).pixels, out.pixels);
  EXPECT_THROW(rine::preprocess_eval({random_image(223, 300, 7), 0, "c"}), rine::DataError);
}

TEST(Augment, NoRandomStepsAndCentredCropIsCentreCrop) {
  const ImageSample s{random_image(230, 228, 8), 0, "x"};
  rine::AugmentConfig cfg;
  rine::AugmentPlan plan;
  plan.crop_top = 3;
  plan.crop_left = 2;
  EXPECT_EQ(rine::apply_augment(s, plan, cfg).pixels, rine::center_crop(s.pixels, 224));
  cfg.blur_prob = cfg.jpeg_prob = cfg.flip_prob = 0.0;
  rine::Rng rng(1);
  const auto drawn = rine::draw_augment(rng, 230, 228, cfg);
  EXPECT_FALSE(drawn.blur_sigma || drawn.jpeg_quality || drawn.flip);
}

TEST(Augment, FlipTwiceWithSameCropIsIdentity) {
  const ImageSample s{random_image(226, 226, 9), 0, "x"};
  rine::AugmentConfig cfg;
  rine::AugmentPlan plan;
  plan.crop_top = 1;
  plan.flip = true;
  const auto once = rine::apply_augment(s, plan, cfg);
  EXPECT_EQ(rine::hflip(once.pixels), rine::crop(s.pixels, 1, 0, 224));
}

TEST(Augment, DrawsWithinRanges) {
  rine::AugmentConfig cfg;
  rine::Rng rng(2);
  int blurs = 0, jpegs = 0, flips = 0;
  for (int i = 0; i < 4000; ++i) {
    const auto p = rine::draw_augment(rng, 240, 250, cfg);
    if (p.blur_sigma) {
      ++blurs;
      EXPECT_GE(*p.blur_sigma, 0.0);
      EXPECT_LE(*p.blur_sigma, 3.0);
    }
    if (p.jpeg_quality) {
      ++jpegs;
      EXPECT_GE(*p.jpeg_quality, 30);
      EXPECT_LE(*p.jpeg_quality, 100);
    }
    flips += p.flip;
    EXPECT_LE(p.crop_top, 16u);
    EXPECT_LE(p.crop_left, 26u);
  }
  EXPECT_NEAR(blurs / 4000.0, 0.5, 0.04);
  EXPECT_NEAR(jpegs / 4000.0, 0.5, 0.04);
  EXPECT_NEAR(flips / 4000.0, 0.5, 0.04);
}

TEST(Augment, SmallImageIsRejected) {
  rine::Rng rng(3);
  EXPECT_THROW(rine::augment_train({random_image(200, 240, 1), 0, "s"}, rng), rine::DataError);
}

TEST(Perturb, GateClosedIsBitIdenticalPassthrough) {
  const ImageSample s{random_image(32, 32, 10), 1, "p"};
  rine::PerturbConfig cfg;
  cfg.probability = 0.0;
  cfg.output_side = 32;
  for (auto kind : {rine::PerturbKind::blur, rine::PerturbKind::crop, rine::PerturbKind::compress,
                    rine::PerturbKind::noise, rine::PerturbKind::combined}) {
    rine::Rng rng(4);
    EXPECT_EQ(rine::perturb(s, kind, rng, cfg).pixels, s.pixels) << rine::to_string(kind);
  }
}

TEST(Perturb, ZeroNoiseIsIdentity) {
  const ImageSample s{random_image(16, 16, 11), 0, "n"};
  rine::PerturbPlan plan;
  plan.noise_sigma = 0.0;
  EXPECT_EQ(rine::apply_perturb(s, plan, {}).pixels, s.pixels);
}

TEST(Perturb, CombinedEqualsManualComposition) {
  const ImageSample s{smooth_image(32, 12), 0, "c"};
  rine::PerturbConfig cfg;
  cfg.probability = 1.0;
  cfg.output_side = 32;
  rine::Rng rng(5);
  const auto plan = rine::draw_perturb(rine::PerturbKind::combined, rng, 32, 32, cfg);
  ASSERT_TRUE(plan.blur_sigma && plan.crop_origin && plan.jpeg_quality && plan.noise_sigma);
  Tensor manual = rine::gaussian_blur(s.pixels, *plan.blur_sigma);
  manual = rine::fit_to_side(rine::crop(manual, plan.crop_origin->first, plan.crop_origin->second, 28), 32);
  manual = rine::jpeg_roundtrip(manual, *plan.jpeg_quality);
  rine::Rng noise(plan.noise_seed);
  manual = rine::add_gaussian_noise(manual, *plan.noise_sigma, noise);
  EXPECT_EQ(rine::apply_perturb(s, plan, cfg).pixels, manual);
  rine::Rng again(5);
  EXPECT_EQ(rine::perturb(s, rine::PerturbKind::combined, again, cfg).pixels, manual);
}

TEST(Perturb, SingleKindTouchesOnlyItsComponent) {
  rine::PerturbConfig cfg;
  cfg.probability = 1.0;
  rine::Rng rng(6);
  const auto plan = rine::draw_perturb(rine::PerturbKind::noise, rng, 224, 224, cfg);
  EXPECT_TRUE(plan.noise_sigma);
  EXPECT_FALSE(plan.blur_sigma || plan.crop_origin || plan.jpeg_quality);
  EXPECT_LE(*plan.noise_sigma, 0.05);
  EXPECT_THROW(rine::parse_perturb_kind("resize"), rine::ParameterError);
}

TEST(Perturb, CropKeepsEncoderSide) {
  rine::PerturbConfig cfg;
  cfg.probability = 1.0;
  rine::Rng rng(7);
  const auto out = rine::perturb({random_image(224, 224, 13), 0, "c"}, rine::PerturbKind::crop, rng, cfg);
  EXPECT_EQ(out.pixels.shape(), (rine::Shape{3, 224, 224}));
}

TEST(LoadBatch, KeepsIndexOrderAndDropsFailures) {
  rine::MemoryDataset mem;
  for (int i = 0; i < 20; ++i) mem.push_back({random_image(4, 4, i), i % 2, "m" + std::to_string(i)});
  std::vector<std::size_t> idx{5, 3, 17, 0, 9};
  const auto batch = rine::load_batch(mem, idx, [](ImageSample s) { return s; });
  ASSERT_EQ(batch.size(), 5u);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(batch[i].id, "m" + std::to_string(idx[i]));
  const auto stacked = rine::stack_pixels(batch);
  EXPECT_EQ(stacked.shape(), (rine::Shape{5, 3, 4, 4}));
  EXPECT_THROW(rine::load_batch(mem, idx, [](ImageSample s) -> ImageSample { throw rine::DataError(s.id); }),
               rine::DataError);
}

TEST_F(DataTest, ToyCorpusIsByteReproducible) {
  rine::ToyDatasetConfig cfg{.per_class = 5, .side = 16, .amplitude = 0.5, .seed = 3};
  rine::synth_toy_dataset(dir_ / "a", cfg);
  rine::synth_toy_dataset(dir_ / "b", cfg);
  for (const auto& sub : {"0_real/real_00003.png", "1_fake/fake_00004.png", "manifest.json"}) {
    EXPECT_EQ(file_bytes(dir_ / "a" / sub), file_bytes(dir_ / "b" / sub)) << sub;
  }
  const auto manifest = nlohmann::json::parse(file_bytes(dir_ / "a" / "manifest.json"));
  EXPECT_EQ(manifest.at("seed"), 3);
  EXPECT_EQ(manifest.at("counts").at("fake"), 5);
}

TEST_F(DataTest, ToyArtifactSeparatesOnlyWhenPresent) {
  rine::synth_toy_dataset(dir_ / "on", {.per_class = 500, .side = 32, .amplitude = 0.5, .seed = 4});
  rine::synth_toy_dataset(dir_ / "off", {.per_class = 500, .side = 32, .amplitude = 0.0, .seed = 4});
  EXPECT_GT(oracle_ap(dir_ / "on"), 0.99);
  EXPECT_NEAR(oracle_ap(dir_ / "off"), 0.5, 0.05);
}
