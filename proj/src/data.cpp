#include "rine/data.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <fstream>
#include <numbers>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#include <spdlog/spdlog.h>

namespace rine {

namespace {

void require_image(const Tensor& pixels, const char* op) {
  if (pixels.rank() != 3 || pixels.dim(0) != 3) {
    throw ShapeError(std::string(op) + " expects 3×H×W pixels, got " + shape_to_string(pixels.shape()));
  }
}

// CHW RGB float → HWC BGR float, the channel order OpenCV codecs assume.
cv::Mat to_mat(const Tensor& pixels) {
  const int h = static_cast<int>(pixels.dim(1)), w = static_cast<int>(pixels.dim(2));
  cv::Mat mat(h, w, CV_32FC3);
  const std::size_t plane = pixels.dim(1) * pixels.dim(2);
  for (int y = 0; y < h; ++y) {
    auto* row = mat.ptr<cv::Vec3f>(y);
    for (int x = 0; x < w; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * pixels.dim(2) + x;
      row[x] = cv::Vec3f(pixels[2 * plane + i], pixels[plane + i], pixels[i]);
    }
  }
  return mat;
}

Tensor from_mat(const cv::Mat& bgr) {
  cv::Mat mat;
  if (bgr.depth() == CV_8U) {
    bgr.convertTo(mat, CV_32FC3, 1.0 / 255.0);
  } else {
    mat = bgr;
  }
  const std::size_t h = mat.rows, w = mat.cols, plane = h * w;
  Tensor pixels({3, h, w});
  for (std::size_t y = 0; y < h; ++y) {
    const auto* row = mat.ptr<cv::Vec3f>(static_cast<int>(y));
    for (std::size_t x = 0; x < w; ++x) {
      pixels[y * w + x] = row[x][2];
      pixels[plane + y * w + x] = row[x][1];
      pixels[2 * plane + y * w + x] = row[x][0];
    }
  }
  return pixels;
}

cv::Mat to_mat8(const Tensor& pixels) {
  cv::Mat mat8;
  to_mat(pixels).convertTo(mat8, CV_8UC3, 255.0);
  return mat8;
}

bool is_image_file(const std::filesystem::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

void require_side(const ImageSample& s, std::size_t side, const char* op) {
  require_image(s.pixels, op);
  if (s.height() < side || s.width() < side) {
    throw DataError(std::string(op) + ": image " + s.id + " is " + std::to_string(s.height()) + "×" +
                    std::to_string(s.width()) + ", smaller than " + std::to_string(side) +
                    " (resizing is not offered)");
  }
}

}  // namespace

// --- datasets ----------------------------------------------------------------

DirectoryDataset::DirectoryDataset(std::filesystem::path root) : root_(std::move(root)) {
  for (const auto& [dir, label] : {std::pair{"0_real", 0}, std::pair{"1_fake", 1}}) {
    const auto class_dir = root_ / dir;
    if (!std::filesystem::is_directory(class_dir)) {
      throw DataError("dataset " + root_.string() + " has no " + dir + " directory");
    }
    std::size_t found = 0;
    for (const auto& item : std::filesystem::directory_iterator(class_dir)) {
      if (!item.is_regular_file() || !is_image_file(item.path())) continue;
      entries_.push_back({item.path(), label, std::filesystem::relative(item.path(), root_).generic_string()});
      ++found;
    }
    if (found == 0) throw DataError("class directory " + class_dir.string() + " contains no images");
  }
  std::sort(entries_.begin(), entries_.end(), [](const Entry& a, const Entry& b) { return a.id < b.id; });
}

std::optional<ImageSample> DirectoryDataset::load(std::size_t i) const {
  const auto& e = entries_.at(i);
  try {
    return ImageSample{decode_image(e.path), e.label, e.id};
  } catch (const DataError& err) {
    ++skipped_;
    spdlog::warn("skipping {}: {}", e.path.string(), err.what());
    return std::nullopt;
  }
}

std::vector<ImageSample> load_batch(const ImageSource& source, const std::vector<std::size_t>& indices,
                                    const std::function<ImageSample(ImageSample)>& transform) {
  std::vector<std::optional<ImageSample>> slots(indices.size());
  const auto count = static_cast<std::ptrdiff_t>(indices.size());
  std::exception_ptr failure;
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < count; ++i) {
    try {
      if (auto sample = source.load(indices[i])) slots[i] = transform(std::move(*sample));
    } catch (...) {
#pragma omp critical(rine_load_batch)
      if (!failure) failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);
  std::vector<ImageSample> out;
  out.reserve(indices.size());
  for (auto& slot : slots) {
    if (slot) out.push_back(std::move(*slot));
  }
  return out;
}

Tensor stack_pixels(const std::vector<ImageSample>& samples) {
  if (samples.empty()) throw ShapeError("stack_pixels: empty batch");
  const Shape& first = samples.front().pixels.shape();
  Tensor out({samples.size(), first[0], first[1], first[2]});
  const std::size_t stride = samples.front().pixels.size();
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].pixels.shape() != first) {
      throw ShapeError("stack_pixels: sample " + samples[i].id + " is " +
                       shape_to_string(samples[i].pixels.shape()) + ", expected " + shape_to_string(first));
    }
    std::copy_n(samples[i].pixels.data(), stride, out.data() + i * stride);
  }
  return out;
}

// --- primitives -----------------------------------------------------------------

Tensor decode_image(const std::filesystem::path& path) {
  cv::Mat mat;
  try {
    mat = cv::imread(path.string(), cv::IMREAD_COLOR);
  } catch (const cv::Exception& e) {
    throw DataError("cannot decode " + path.string() + ": " + e.what());
  }
  if (mat.empty()) throw DataError("cannot decode " + path.string());
  return from_mat(mat);
}

void write_png(const std::filesystem::path& path, const Tensor& pixels) {
  require_image(pixels, "write_png");
  if (!cv::imwrite(path.string(), to_mat8(pixels))) throw Error("cannot write " + path.string());
}

Tensor jpeg_roundtrip(const Tensor& pixels, int quality) {
  require_image(pixels, "jpeg_roundtrip");
  if (quality < 1 || quality > 100) throw ParameterError("JPEG quality must be in [1, 100]");
  std::vector<unsigned char> buffer;
  cv::imencode(".jpg", to_mat8(pixels), buffer, {cv::IMWRITE_JPEG_QUALITY, quality});
  return from_mat(cv::imdecode(buffer, cv::IMREAD_COLOR));
}

Tensor gaussian_blur(const Tensor& pixels, double sigma) {
  require_image(pixels, "gaussian_blur");
  if (!(sigma > 0.0)) return pixels;
  cv::Mat out;
  cv::GaussianBlur(to_mat(pixels), out, cv::Size(0, 0), sigma, sigma, cv::BORDER_REFLECT_101);
  return from_mat(out);
}

Tensor crop(const Tensor& pixels, std::size_t top, std::size_t left, std::size_t side) {
  require_image(pixels, "crop");
  const std::size_t h = pixels.dim(1), w = pixels.dim(2);
  if (top + side > h || left + side > w) {
    throw ShapeError("crop window " + std::to_string(side) + " at (" + std::to_string(top) + "," +
                     std::to_string(left) + ") exceeds " + std::to_string(h) + "×" + std::to_string(w));
  }
  Tensor out({3, side, side});
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t y = 0; y < side; ++y) {
      const float* src = pixels.data() + (c * h + top + y) * w + left;
      std::copy(src, src + side, out.data() + (c * side + y) * side);
    }
  }
  return out;
}

Tensor center_crop(const Tensor& pixels, std::size_t side) {
  require_image(pixels, "center_crop");
  const std::size_t h = pixels.dim(1), w = pixels.dim(2);
  if (h < side || w < side) {
    throw DataError("center_crop: " + std::to_string(h) + "×" + std::to_string(w) + " is smaller than " +
                    std::to_string(side));
  }
  return crop(pixels, (h - side) / 2, (w - side) / 2, side);
}

Tensor hflip(const Tensor& pixels) {
  require_image(pixels, "hflip");
  Tensor out = pixels;
  const std::size_t w = pixels.dim(2);
  for (std::size_t row = 0; row < 3 * pixels.dim(1); ++row) {
    std::reverse(out.data() + row * w, out.data() + (row + 1) * w);
  }
  return out;
}

Tensor fit_to_side(const Tensor& pixels, std::size_t side) {
  require_image(pixels, "fit_to_side");
  const std::size_t h = pixels.dim(1), w = pixels.dim(2);
  if (h >= side && w >= side) return center_crop(pixels, side);
  Tensor out({3, side, side});
  // Place the (possibly cropped) source centred on a black canvas.
  const std::size_t src_h = std::min(h, side), src_w = std::min(w, side);
  const std::size_t src_top = (h - src_h) / 2, src_left = (w - src_w) / 2;
  const std::size_t dst_top = (side - src_h) / 2, dst_left = (side - src_w) / 2;
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t y = 0; y < src_h; ++y) {
      const float* src = pixels.data() + (c * h + src_top + y) * w + src_left;
      std::copy(src, src + src_w, out.data() + (c * side + dst_top + y) * side + dst_left);
    }
  }
  return out;
}

Tensor add_gaussian_noise(const Tensor& pixels, double sigma, Rng& rng) {
  require_image(pixels, "add_gaussian_noise");
  if (!(sigma > 0.0)) return pixels;
  Tensor out = pixels;
  for (auto& v : out.values()) v = std::clamp(static_cast<float>(v + rng.normal(0.0, sigma)), 0.0f, 1.0f);
  return out;
}

// --- augmentation ----------------------------------------------------------------

nlohmann::json AugmentConfig::to_json() const {
  return {{"crop_side", crop_side},           {"blur_prob", blur_prob},
          {"blur_sigma_max", blur_sigma_max}, {"jpeg_prob", jpeg_prob},
          {"jpeg_quality_min", jpeg_quality_min}, {"jpeg_quality_max", jpeg_quality_max},
          {"flip_prob", flip_prob}};
}

AugmentConfig AugmentConfig::from_json(const nlohmann::json& j) {
  AugmentConfig c;
  c.crop_side = j.value("crop_side", c.crop_side);
  c.blur_prob = j.value("blur_prob", c.blur_prob);
  c.blur_sigma_max = j.value("blur_sigma_max", c.blur_sigma_max);
  c.jpeg_prob = j.value("jpeg_prob", c.jpeg_prob);
  c.jpeg_quality_min = j.value("jpeg_quality_min", c.jpeg_quality_min);
  c.jpeg_quality_max = j.value("jpeg_quality_max", c.jpeg_quality_max);
  c.flip_prob = j.value("flip_prob", c.flip_prob);
  return c;
}

AugmentPlan draw_augment(Rng& rng, std::size_t height, std::size_t width, const AugmentConfig& config) {
  if (height < config.crop_side || width < config.crop_side) {
    throw DataError("augment: image " + std::to_string(height) + "×" + std::to_string(width) +
                    " is smaller than crop side " + std::to_string(config.crop_side));
  }
  AugmentPlan plan;
  if (rng.bernoulli(config.blur_prob)) plan.blur_sigma = rng.uniform(0.0, config.blur_sigma_max);
  if (rng.bernoulli(config.jpeg_prob)) {
    plan.jpeg_quality = static_cast<int>(rng.uniform_int(config.jpeg_quality_min, config.jpeg_quality_max));
  }
  plan.crop_top = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(height - config.crop_side)));
  plan.crop_left = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(width - config.crop_side)));
  plan.flip = rng.bernoulli(config.flip_prob);
  return plan;
}

ImageSample apply_augment(const ImageSample& sample, const AugmentPlan& plan, const AugmentConfig& config) {
  require_side(sample, config.crop_side, "augment_train");
  ImageSample out{sample.pixels, sample.label, sample.id};
  if (plan.blur_sigma) out.pixels = gaussian_blur(out.pixels, *plan.blur_sigma);
  if (plan.jpeg_quality) out.pixels = jpeg_roundtrip(out.pixels, *plan.jpeg_quality);
  out.pixels = crop(out.pixels, plan.crop_top, plan.crop_left, config.crop_side);
  if (plan.flip) out.pixels = hflip(out.pixels);
  return out;
}

ImageSample augment_train(const ImageSample& sample, Rng& rng, const AugmentConfig& config) {
  require_side(sample, config.crop_side, "augment_train");
  return apply_augment(sample, draw_augment(rng, sample.height(), sample.width(), config), config);
}

ImageSample preprocess_eval(const ImageSample& sample, std::size_t side) {
  require_side(sample, side, "preprocess_eval");
  return {center_crop(sample.pixels, side), sample.label, sample.id};
}

// --- perturbations ------------------------------------------------------------------

PerturbKind parse_perturb_kind(const std::string& name) {
  if (name == "blur") return PerturbKind::blur;
  if (name == "crop") return PerturbKind::crop;
  if (name == "compress") return PerturbKind::compress;
  if (name == "noise") return PerturbKind::noise;
  if (name == "combined") return PerturbKind::combined;
  throw ParameterError("unknown perturbation \"" + name + "\" (blur, crop, compress, noise, combined)");
}

std::string to_string(PerturbKind kind) {
  switch (kind) {
    case PerturbKind::blur: return "blur";
    case PerturbKind::crop: return "crop";
    case PerturbKind::compress: return "compress";
    case PerturbKind::noise: return "noise";
    case PerturbKind::combined: return "combined";
  }
  return "unknown";
}

nlohmann::json PerturbConfig::to_json() const {
  return {{"probability", probability},         {"blur_sigma_max", blur_sigma_max},
          {"crop_fraction", crop_fraction},     {"jpeg_quality_min", jpeg_quality_min},
          {"jpeg_quality_max", jpeg_quality_max}, {"noise_sigma_min", noise_sigma_min},
          {"noise_sigma_max", noise_sigma_max}, {"output_side", output_side}};
}

PerturbConfig PerturbConfig::from_json(const nlohmann::json& j) {
  PerturbConfig c;
  c.probability = j.value("probability", c.probability);
  c.blur_sigma_max = j.value("blur_sigma_max", c.blur_sigma_max);
  c.crop_fraction = j.value("crop_fraction", c.crop_fraction);
  c.jpeg_quality_min = j.value("jpeg_quality_min", c.jpeg_quality_min);
  c.jpeg_quality_max = j.value("jpeg_quality_max", c.jpeg_quality_max);
  c.noise_sigma_min = j.value("noise_sigma_min", c.noise_sigma_min);
  c.noise_sigma_max = j.value("noise_sigma_max", c.noise_sigma_max);
  c.output_side = j.value("output_side", c.output_side);
  return c;
}

PerturbPlan draw_perturb(PerturbKind kind, Rng& rng, std::size_t height, std::size_t width,
                         const PerturbConfig& config) {
  PerturbPlan plan;
  const bool all = kind == PerturbKind::combined;
  // One gate per component; a single kind has exactly one.
  if (all || kind == PerturbKind::blur) {
    if (rng.bernoulli(config.probability)) plan.blur_sigma = rng.uniform(0.0, config.blur_sigma_max);
  }
  if (all || kind == PerturbKind::crop) {
    if (rng.bernoulli(config.probability)) {
      const auto extent = static_cast<std::size_t>(std::floor(config.crop_fraction * std::min(height, width)));
      plan.crop_origin = {static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(height - extent))),
                          static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(width - extent)))};
    }
  }
  if (all || kind == PerturbKind::compress) {
    if (rng.bernoulli(config.probability)) {
      plan.jpeg_quality = static_cast<int>(rng.uniform_int(config.jpeg_quality_min, config.jpeg_quality_max));
    }
  }
  if (all || kind == PerturbKind::noise) {
    if (rng.bernoulli(config.probability)) {
      plan.noise_sigma = rng.uniform(config.noise_sigma_min, config.noise_sigma_max);
      plan.noise_seed = rng.next_u64();
    }
  }
  return plan;
}

ImageSample apply_perturb(const ImageSample& sample, const PerturbPlan& plan, const PerturbConfig& config) {
  require_image(sample.pixels, "perturb");
  ImageSample out{sample.pixels, sample.label, sample.id};
  if (plan.blur_sigma) out.pixels = gaussian_blur(out.pixels, *plan.blur_sigma);
  if (plan.crop_origin) {
    const auto extent = static_cast<std::size_t>(
        std::floor(config.crop_fraction * std::min(out.height(), out.width())));
    out.pixels = fit_to_side(crop(out.pixels, plan.crop_origin->first, plan.crop_origin->second, extent),
                             config.output_side);
  }
  if (plan.jpeg_quality) out.pixels = jpeg_roundtrip(out.pixels, *plan.jpeg_quality);
  if (plan.noise_sigma) {
    Rng noise(plan.noise_seed);
    out.pixels = add_gaussian_noise(out.pixels, *plan.noise_sigma, noise);
  }
  return out;
}

ImageSample perturb(const ImageSample& sample, PerturbKind kind, Rng& rng, const PerturbConfig& config) {
  require_image(sample.pixels, "perturb");
  return apply_perturb(sample, draw_perturb(kind, rng, sample.height(), sample.width(), config), config);
}

// --- toy corpus ----------------------------------------------------------------------

Tensor toy_image(Rng& rng, std::size_t side, double amplitude, bool fake) {
  Tensor pixels({3, side, side});
  const double two_pi = 2.0 * std::numbers::pi;
  for (std::size_t c = 0; c < 3; ++c) {
    // Three low-frequency waves around mid-grey keep the field inside [0.26, 0.74].
    struct Wave {
      double a, fx, fy, phase;
    };
    Wave waves[3];
    for (auto& wv : waves) {
      wv.a = rng.uniform(-0.08, 0.08);
      wv.fx = static_cast<double>(rng.uniform_int(0, 2));
      wv.fy = static_cast<double>(rng.uniform_int(0, 2));
      wv.phase = rng.uniform(0.0, two_pi);
    }
    for (std::size_t y = 0; y < side; ++y) {
      for (std::size_t x = 0; x < side; ++x) {
        double v = 0.5;
        for (const auto& wv : waves) {
          v += wv.a * std::sin(two_pi * (wv.fx * x + wv.fy * y) / static_cast<double>(side) + wv.phase);
        }
        if (fake) v += 0.5 * amplitude * (((x + y) % 2 == 0) ? 1.0 : -1.0);
        pixels[(c * side + y) * side + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return pixels;
}

void synth_toy_dataset(const std::filesystem::path& root, const ToyDatasetConfig& config) {
  if (config.side == 0 || config.per_class == 0) throw ParameterError("toy dataset needs side and count ≥ 1");
  std::filesystem::create_directories(root / "0_real");
  std::filesystem::create_directories(root / "1_fake");
  const Rng base(config.seed);
  const auto count = static_cast<std::ptrdiff_t>(config.per_class);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < count; ++i) {
    char name[32];
    for (int fake = 0; fake < 2; ++fake) {
      Rng rng = base.derive(static_cast<std::uint64_t>(2 * i + fake));
      std::snprintf(name, sizeof name, "%s_%05td.png", fake ? "fake" : "real", i);
      write_png(root / (fake ? "1_fake" : "0_real") / name, toy_image(rng, config.side, config.amplitude, fake));
    }
  }
  const nlohmann::json manifest = {{"seed", config.seed},
                                   {"amplitude", config.amplitude},
                                   {"side", config.side},
                                   {"counts", {{"real", config.per_class}, {"fake", config.per_class}}}};
  std::ofstream(root / "manifest.json") << manifest.dump(2) << '\n';
}

}  // namespace rine
