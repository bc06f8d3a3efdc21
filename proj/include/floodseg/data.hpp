#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "floodseg/tensor.hpp"

namespace floodseg {

/// image [3,H,W] in [0,1]; mask [1,H,W] with values in {0,1} (1 = water).
struct Sample {
  Tensor image;
  Tensor mask;
  std::string id;
};

struct Batch {
  Tensor images;  // [B,3,H,W]
  Tensor masks;   // [B,1,H,W]
  std::vector<std::string> ids;
};

struct TargetSize {
  std::int64_t height = 256;
  std::int64_t width = 256;
};

/// Mask threshold for 8-bit sources: value > 127 is water.
inline constexpr float kMaskThreshold8 = 127.0f;

/// Decodes and bilinearly resizes an image to [3,H,W] in [0,1]; gray sources
/// are replicated to three channels.
Tensor load_image(const std::filesystem::path& image_path, TargetSize target = {});

/// Decodes, resizes (bilinear image, nearest mask) and normalises one pair.
/// Colour masks are reduced to luma 0.299R + 0.587G + 0.114B before thresholding.
Sample load_sample(const std::filesystem::path& image_path, const std::filesystem::path& mask_path,
                   TargetSize target = {});

/// Throws unless image/mask shapes agree and the mask is strictly binary.
void validate_sample(const Sample& s);

// ---------------------------------------------------------------- augmentation

enum class AugOp : std::uint8_t { kRot90, kRot180, kRot270, kHFlip, kVFlip, kScale, kBlur, kGrayscale };

inline constexpr AugOp kAllAugOps[] = {AugOp::kRot90, AugOp::kRot180, AugOp::kRot270, AugOp::kHFlip,
                                       AugOp::kVFlip, AugOp::kScale,  AugOp::kBlur,   AugOp::kGrayscale};

std::string_view aug_op_name(AugOp op);
bool is_geometric(AugOp op);

struct AugmentationPolicy {
  std::vector<AugOp> ops;  // applied in kAllAugOps order regardless of listing order
  float scale_min = 0.8f;
  float scale_max = 1.25f;
  float probability = 0.5f;

  static AugmentationPolicy all() { return {{std::begin(kAllAugOps), std::end(kAllAugOps)}}; }
  static AugmentationPolicy none() { return {}; }
  bool enabled(AugOp op) const;
};

/// Each enabled op fires independently with `probability`. Geometric ops move
/// image and mask together; blur and grayscale touch the image only.
Sample augment(const Sample& sample, const AugmentationPolicy& policy, Rng& rng);

// Individual transforms on [C,H,W] tensors, exposed for testing.
Tensor rotate90(const Tensor& chw, int quarter_turns);  // counter-clockwise
Tensor flip_horizontal(const Tensor& chw);
Tensor flip_vertical(const Tensor& chw);
/// Resize by `factor` (bilinear or nearest) then centre-crop or zero-pad back to H x W.
Tensor scale_about_center(const Tensor& chw, float factor, bool nearest);
/// 3x3 binomial [1 2 1; 2 4 2; 1 2 1] / 16 with edge replication.
Tensor binomial_blur(const Tensor& chw);
Tensor grayscale(const Tensor& chw);

// ---------------------------------------------------------------- split and batching

struct Split {
  std::vector<std::string> train;
  std::vector<std::string> val;
};

/// Seeded Fisher-Yates shuffle, then floor(fraction * N) ids to train (clamped
/// so both sides are non-empty).
Split split_dataset(std::span<const std::string> ids, double train_fraction, std::uint64_t seed);

/// Fisher-Yates permutation of [0, n).
std::vector<std::size_t> shuffled_indices(std::size_t n, Rng& rng);

/// Index groups of at most batch_size; the last partial group is kept.
std::vector<std::vector<std::size_t>> batch_indices(std::size_t n, std::size_t batch_size, bool shuffle, Rng& rng);

/// Stacks samples (which must share H x W) into one batch.
Batch collate(std::span<const Sample> samples);

std::vector<Batch> batches(std::span<const Sample> samples, std::size_t batch_size, bool shuffle, Rng& rng);

// ---------------------------------------------------------------- synthetic data

/// Textured brown/green background with 1-3 blue-tinted noisy ellipses as
/// water; the mask is the exact ellipse union. Pixel values are quantised to
/// k/255 so writing and reloading is lossless. Sample k depends only on (seed, k).
std::vector<Sample> generate_synthetic(std::size_t n, TargetSize size, std::uint64_t seed);

/// Writes <root>/images/<id>.png and <root>/masks/<id>.png.
void write_samples(const std::filesystem::path& root, std::span<const Sample> samples);

// ---------------------------------------------------------------- manifest

enum class SplitTag { kTrain, kVal };

struct ManifestEntry {
  std::filesystem::path image;
  std::filesystem::path mask;
  SplitTag split = SplitTag::kTrain;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;
  std::uint64_t seed = 0;
  TargetSize target;
};

struct Pairing {
  std::vector<std::pair<std::filesystem::path, std::filesystem::path>> pairs;  // sorted by stem
  std::vector<std::string> unpaired;  // human-readable offenders
};

/// Pairs <images>/*.{png,jpg,jpeg} with <masks>/*.png by filename stem.
/// Throws ManifestError if either directory is missing.
Pairing pair_directory(const std::filesystem::path& images, const std::filesystem::path& masks);

DatasetManifest make_manifest(const Pairing& pairing, double train_fraction, std::uint64_t seed, TargetSize target);

/// Paths are written relative to the manifest's directory where possible.
void write_manifest(const std::filesystem::path& file, const DatasetManifest& manifest);
/// Relative paths are resolved against the manifest's directory.
DatasetManifest read_manifest(const std::filesystem::path& file);

std::vector<Sample> load_split(const DatasetManifest& manifest, SplitTag split);

}  // namespace floodseg
