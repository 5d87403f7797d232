#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "rine/rng.hpp"
#include "rine/tensor.hpp"

namespace rine {

// Pixels are 3×H×W floats in [0,1]; label 0 is real, 1 is fake.
struct ImageSample {
  Tensor pixels;
  int label = 0;
  std::string id;

  std::size_t height() const { return pixels.dim(1); }
  std::size_t width() const { return pixels.dim(2); }
};

// Random-access collection of labelled images, decoded on demand.
class ImageSource {
 public:
  virtual ~ImageSource() = default;
  virtual std::size_t size() const = 0;
  virtual int label(std::size_t i) const = 0;
  virtual const std::string& id(std::size_t i) const = 0;
  // nullopt if the image cannot be decoded.
  virtual std::optional<ImageSample> load(std::size_t i) const = 0;
};

// root/0_real/* and root/1_fake/* (png, jpg, jpeg), ordered by path.
class DirectoryDataset final : public ImageSource {
 public:
  struct Entry {
    std::filesystem::path path;
    int label;
    std::string id;  // path relative to root
  };

  // Throws DataError if a class directory is missing or has no images.
  explicit DirectoryDataset(std::filesystem::path root);

  std::size_t size() const override { return entries_.size(); }
  int label(std::size_t i) const override { return entries_[i].label; }
  const std::string& id(std::size_t i) const override { return entries_[i].id; }
  std::optional<ImageSample> load(std::size_t i) const override;

  const std::filesystem::path& root() const { return root_; }
  const std::vector<Entry>& entries() const { return entries_; }
  // Number of failed decodes so far.
  std::size_t skipped() const { return skipped_.load(); }

 private:
  std::filesystem::path root_;
  std::vector<Entry> entries_;
  mutable std::atomic<std::size_t> skipped_{0};
};

class MemoryDataset final : public ImageSource {
 public:
  MemoryDataset() = default;
  explicit MemoryDataset(std::vector<ImageSample> samples) : samples_(std::move(samples)) {}

  std::size_t size() const override { return samples_.size(); }
  int label(std::size_t i) const override { return samples_[i].label; }
  const std::string& id(std::size_t i) const override { return samples_[i].id; }
  std::optional<ImageSample> load(std::size_t i) const override { return samples_[i]; }
  void push_back(ImageSample s) { samples_.push_back(std::move(s)); }

 private:
  std::vector<ImageSample> samples_;
};

// Decodes every sample in order, skipping (and counting) failures.
template <typename Fn>
std::size_t for_each_sample(const ImageSource& source, Fn&& fn) {
  std::size_t skipped = 0;
  for (std::size_t i = 0; i < source.size(); ++i) {
    if (auto sample = source.load(i)) {
      fn(std::move(*sample));
    } else {
      ++skipped;
    }
  }
  return skipped;
}

// Loads `indices` (in parallel), applies `transform` to each decoded sample,
// and returns them in index order; failed decodes are dropped.
std::vector<ImageSample> load_batch(const ImageSource& source, const std::vector<std::size_t>& indices,
                                    const std::function<ImageSample(ImageSample)>& transform);
// Equal-sized samples → b×3×H×W.
Tensor stack_pixels(const std::vector<ImageSample>& samples);

// --- image primitives; none of these resample pixels -----------------------

// Throws DataError when the file cannot be decoded.
Tensor decode_image(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Tensor& pixels);
// Encode as baseline JPEG at `quality` and decode again.
Tensor jpeg_roundtrip(const Tensor& pixels, int quality);
Tensor gaussian_blur(const Tensor& pixels, double sigma);
Tensor crop(const Tensor& pixels, std::size_t top, std::size_t left, std::size_t side);
Tensor center_crop(const Tensor& pixels, std::size_t side);
Tensor hflip(const Tensor& pixels);
// Centre crop when larger than side, centred zero padding when smaller.
Tensor fit_to_side(const Tensor& pixels, std::size_t side);
Tensor add_gaussian_noise(const Tensor& pixels, double sigma, Rng& rng);

// --- training augmentation --------------------------------------------------

struct AugmentConfig {
  std::size_t crop_side = 224;
  double blur_prob = 0.5;
  double blur_sigma_max = 3.0;
  double jpeg_prob = 0.5;
  int jpeg_quality_min = 30;
  int jpeg_quality_max = 100;
  double flip_prob = 0.5;

  nlohmann::json to_json() const;
  static AugmentConfig from_json(const nlohmann::json& j);
};

// The random decisions of one augmentation, drawn up front.
struct AugmentPlan {
  std::optional<double> blur_sigma;
  std::optional<int> jpeg_quality;
  std::size_t crop_top = 0;
  std::size_t crop_left = 0;
  bool flip = false;
};

AugmentPlan draw_augment(Rng& rng, std::size_t height, std::size_t width, const AugmentConfig& config);
// blur → JPEG → crop → flip.
ImageSample apply_augment(const ImageSample& sample, const AugmentPlan& plan, const AugmentConfig& config);
ImageSample augment_train(const ImageSample& sample, Rng& rng, const AugmentConfig& config = {});

// Deterministic centre crop to `side`; throws DataError when smaller.
ImageSample preprocess_eval(const ImageSample& sample, std::size_t side = 224);

// --- robustness perturbations -----------------------------------------------

enum class PerturbKind { blur, crop, compress, noise, combined };

PerturbKind parse_perturb_kind(const std::string& name);
std::string to_string(PerturbKind kind);

struct PerturbConfig {
  double probability = 0.5;
  double blur_sigma_max = 3.0;
  double crop_fraction = 0.875;
  int jpeg_quality_min = 30;
  int jpeg_quality_max = 100;
  double noise_sigma_min = 0.0;
  double noise_sigma_max = 0.05;
  std::size_t output_side = 224;  // crop output is brought back to this side

  nlohmann::json to_json() const;
  static PerturbConfig from_json(const nlohmann::json& j);
};

struct PerturbPlan {
  std::optional<double> blur_sigma;
  std::optional<std::pair<std::size_t, std::size_t>> crop_origin;  // (top, left)
  std::optional<int> jpeg_quality;
  std::optional<double> noise_sigma;
  std::uint64_t noise_seed = 0;
};

PerturbPlan draw_perturb(PerturbKind kind, Rng& rng, std::size_t height, std::size_t width,
                         const PerturbConfig& config);
// blur → crop → compress → noise; an empty plan is an exact passthrough.
ImageSample apply_perturb(const ImageSample& sample, const PerturbPlan& plan, const PerturbConfig& config);
ImageSample perturb(const ImageSample& sample, PerturbKind kind, Rng& rng, const PerturbConfig& config = {});

// --- synthetic corpus ---------------------------------------------------------

struct ToyDatasetConfig {
  std::size_t per_class = 100;
  std::size_t side = 32;
  double amplitude = 0.5;
  std::uint64_t seed = 0;
};

// Smooth random colour field; fakes add a ±amplitude/2 checkerboard.
Tensor toy_image(Rng& rng, std::size_t side, double amplitude, bool fake);

// Writes root/0_real, root/1_fake (PNG) and root/manifest.json.
void synth_toy_dataset(const std::filesystem::path& root, const ToyDatasetConfig& config);

}  // namespace rine
