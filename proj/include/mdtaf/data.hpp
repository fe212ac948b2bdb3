#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mdtaf/tensor.hpp"

namespace mdtaf {

// 8-bit binary PNM: P5 (gray, channels 1) or P6 (RGB, channels 3), maxval 255.
struct PnmImage {
  int width = 0;
  int height = 0;
  int channels = 1;
  std::vector<std::uint8_t> pixels;  // row-major, channels interleaved
};

// Throws IoError, MagicError (not P5/P6) or FormatError naming the file.
PnmImage read_pnm(const std::string& path);
void write_pnm(const PnmImage& image, const std::string& path);

enum class ShapeFamily { kEllipses, kBlobs, kLobes };

std::string to_string(ShapeFamily family);
ShapeFamily shape_family_from_string(const std::string& name);

struct SynthSpec {
  int height = 64;
  int width = 64;
  int channels = 3;
  ShapeFamily family = ShapeFamily::kEllipses;
  double fg_mean = 0.55;
  double bg_mean = 0.45;
  double noise_sigma = 0.08;
  int blur_radius = 1;
  std::uint64_t seed = 0;
  int count = 8;

  // Throws ConfigError.
  void validate() const;
  // |fg_mean - bg_mean| / noise_sigma; empty when sigma is 0.
  std::optional<double> snr() const;
};

// Foreground fraction of every generated mask lies in this range.
inline constexpr double kMinForeground = 0.05;
inline constexpr double kMaxForeground = 0.40;

nlohmann::json to_json(const SynthSpec& spec);
SynthSpec synth_spec_from_json(const nlohmann::json& j, SynthSpec base = {});

struct SegSample {
  std::string id;
  Tensor<float> image;  // [C, H, W] in [0, 1]
  Tensor<float> mask;   // [1, H, W] in {0, 1}
};

// Derives the independent seed of sample `index`.
std::uint64_t sample_seed(std::uint64_t dataset_seed, std::uint64_t index);

// Renders one sample as 8-bit planes, exactly as written to disk.
struct RenderedSample {
  PnmImage image;
  PnmImage mask;  // values 0 or 255
};
RenderedSample render_sample(const SynthSpec& spec, std::uint64_t index);

// Writes images/NNNN.ppm|pgm, masks/NNNN.pgm and manifest.jsonl
// ({id, image_path, mask_path, snr}, paths relative to out_dir). Returns the
// manifest records.
std::vector<nlohmann::json> generate_dataset(const SynthSpec& spec, const std::string& out_dir, int threads = 1);

struct LoadOptions {
  // Resize target; 0 keeps the stored size. Images bilinear, masks nearest.
  int height = 0;
  int width = 0;
  // 0 keeps the stored channel count; 1 averages RGB, 3 replicates gray.
  int channels = 0;
  int threads = 1;
};

// Reads <dir>/manifest.jsonl. Masks are binarized at >= 128. Errors name the
// sample id: IoError (missing file), FormatError (bad header) and ShapeError
// (image/mask size mismatch).
std::vector<SegSample> load_dataset(const std::string& dir, const LoadOptions& options = {});

SegSample to_sample(const std::string& id, const PnmImage& image, const PnmImage& mask);

// Nearest-neighbour resize of a [C, H, W] plane stack; keeps values exactly.
Tensor<float> resize_nearest(const Tensor<float>& x, std::int64_t height, std::int64_t width);

struct Batch {
  Tensor<float> images;  // [B, C, H, W]
  Tensor<float> masks;   // [B, 1, H, W]
};

// Stacks the selected samples; all must share one shape.
Batch make_batch(const std::vector<SegSample>& samples, const std::vector<std::size_t>& indices);

// Mean foreground fraction over a dataset.
double foreground_fraction(const std::vector<SegSample>& samples);

}  // namespace mdtaf
