#include "mdtaf/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numbers>
#include <random>
#include <sstream>
#include <thread>

#include "mdtaf/ops.hpp"

namespace mdtaf {

namespace fs = std::filesystem;

namespace {

std::string read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("failed reading " + path);
  return bytes;
}

// Next whitespace-delimited header token, skipping '#' comments.
std::string header_token(const std::string& bytes, std::size_t& pos, const std::string& path) {
  for (;;) {
    while (pos < bytes.size() && std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    if (pos < bytes.size() && bytes[pos] == '#') {
      while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      continue;
    }
    break;
  }
  const auto start = pos;
  while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos])) && bytes[pos] != '#') ++pos;
  if (start == pos) throw FormatError(path + ": truncated PNM header");
  return bytes.substr(start, pos - start);
}

int header_int(const std::string& bytes, std::size_t& pos, const std::string& path, const char* what) {
  const auto tok = header_token(bytes, pos, path);
  if (tok.size() > 9 || !std::all_of(tok.begin(), tok.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); })) {
    throw FormatError(path + ": bad PNM " + what + " '" + tok + "'");
  }
  return std::stoi(tok);
}

std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

using Rng = std::mt19937_64;

double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

struct Ellipse {
  double cx, cy, a, b, theta;
  bool contains(double x, double y) const {
    const double dx = x - cx, dy = y - cy;
    const double c = std::cos(theta), s = std::sin(theta);
    const double u = (dx * c + dy * s) / a, v = (-dx * s + dy * c) / b;
    return u * u + v * v <= 1.0;
  }
};

std::vector<std::uint8_t> paint(int h, int w, const std::vector<Ellipse>& shapes) {
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(h) * w, 0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (const auto& e : shapes) {
        if (e.contains(x + 0.5, y + 0.5)) {
          mask[static_cast<std::size_t>(y) * w + x] = 1;
          break;
        }
      }
    }
  }
  return mask;
}

std::vector<std::uint8_t> ellipses(int h, int w, Rng& rng) {
  const int k = 1 + static_cast<int>(rng() % 3);
  std::vector<Ellipse> shapes;
  for (int i = 0; i < k; ++i) {
    shapes.push_back({uniform(rng, 0.2, 0.8) * w, uniform(rng, 0.2, 0.8) * h, uniform(rng, 0.08, 0.25) * w,
                      uniform(rng, 0.08, 0.25) * h, uniform(rng, 0.0, std::numbers::pi)});
  }
  return paint(h, w, shapes);
}

// Thresholded sum of Gaussian bumps.
std::vector<std::uint8_t> blobs(int h, int w, Rng& rng) {
  const int k = 3 + static_cast<int>(rng() % 4);
  struct Bump {
    double cx, cy, s;
  };
  std::vector<Bump> bumps;
  const double m = std::min(h, w);
  for (int i = 0; i < k; ++i) {
    bumps.push_back({uniform(rng, 0.2, 0.8) * w, uniform(rng, 0.2, 0.8) * h, uniform(rng, 0.05, 0.12) * m});
  }
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(h) * w, 0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double field = 0;
      for (const auto& b : bumps) {
        const double dx = x + 0.5 - b.cx, dy = y + 0.5 - b.cy;
        field += std::exp(-(dx * dx + dy * dy) / (2 * b.s * b.s));
      }
      mask[static_cast<std::size_t>(y) * w + x] = field >= 0.5 ? 1 : 0;
    }
  }
  return mask;
}

// Two tall, mirrored ellipses either side of the midline.
std::vector<std::uint8_t> lobes(int h, int w, Rng& rng) {
  const double off = uniform(rng, 0.17, 0.24) * w;
  const double cy = (0.5 + uniform(rng, -0.06, 0.06)) * h;
  const double a = uniform(rng, 0.09, 0.14) * w, b = uniform(rng, 0.22, 0.32) * h;
  const double tilt = uniform(rng, -0.2, 0.2);
  const double skew = uniform(rng, 0.9, 1.1);
  return paint(h, w, {{0.5 * w - off, cy, a, b, tilt}, {0.5 * w + off, cy, a * skew, b / skew, -tilt}});
}

std::vector<std::uint8_t> make_mask(const SynthSpec& spec, Rng& rng) {
  const int h = spec.height, w = spec.width;
  const auto area = static_cast<double>(h) * w;
  for (int attempt = 0; attempt < 64; ++attempt) {
    std::vector<std::uint8_t> mask;
    switch (spec.family) {
      case ShapeFamily::kEllipses: mask = ellipses(h, w, rng); break;
      case ShapeFamily::kBlobs: mask = blobs(h, w, rng); break;
      case ShapeFamily::kLobes: mask = lobes(h, w, rng); break;
    }
    const double frac = static_cast<double>(std::count(mask.begin(), mask.end(), 1)) / area;
    if (frac >= kMinForeground && frac <= kMaxForeground) return mask;
  }
  // Deterministic fallback, about a fifth of the image.
  return paint(h, w, {{0.5 * w, 0.5 * h, 0.25 * w, 0.25 * h, 0.0}});
}

// Mean over the (2r+1)^2 window clipped to the image.
std::vector<double> box_blur(const std::vector<double>& v, int h, int w, int r) {
  if (r == 0) return v;
  std::vector<double> out(v.size());
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double acc = 0;
      int n = 0;
      for (int yy = std::max(0, y - r); yy <= std::min(h - 1, y + r); ++yy) {
        for (int xx = std::max(0, x - r); xx <= std::min(w - 1, x + r); ++xx) {
          acc += v[static_cast<std::size_t>(yy) * w + xx];
          ++n;
        }
      }
      out[static_cast<std::size_t>(y) * w + x] = acc / n;
    }
  }
  return out;
}

std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

// Runs fn(i) for i in [0, n) over up to `threads` workers and rethrows the
// lowest-index failure.
template <typename Fn>
void parallel_for(std::size_t n, int threads, Fn fn) {
  std::vector<std::exception_ptr> errors(n);
  auto work = [&](std::size_t begin, std::size_t stride) {
    for (std::size_t i = begin; i < n; i += stride) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const auto workers = static_cast<std::size_t>(std::clamp<std::int64_t>(threads, 1, std::max<std::int64_t>(1, n)));
  if (workers <= 1) {
    work(0, 1);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < workers; ++t) pool.emplace_back(work, t, workers);
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

// Re-raises a load failure with the sample id in front, keeping its type.
[[noreturn]] void rethrow_for(const std::string& id) {
  try {
    throw;
  } catch (const MagicError& e) {
    throw MagicError("sample " + id + ": " + e.what());
  } catch (const FormatError& e) {
    throw FormatError("sample " + id + ": " + e.what());
  } catch (const IoError& e) {
    throw IoError("sample " + id + ": " + e.what());
  } catch (const ShapeError& e) {
    throw ShapeError("sample " + id + ": " + e.what());
  } catch (...) {
    throw;
  }
}

std::string sample_id(std::uint64_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "sample_%04llu", static_cast<unsigned long long>(index));
  return buf;
}

}  // namespace

PnmImage read_pnm(const std::string& path) {
  const auto bytes = read_bytes(path);
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6')) {
    throw MagicError(path + ": not a binary PGM/PPM (expected P5 or P6)");
  }
  PnmImage img;
  img.channels = bytes[1] == '5' ? 1 : 3;
  std::size_t pos = 2;
  img.width = header_int(bytes, pos, path, "width");
  img.height = header_int(bytes, pos, path, "height");
  const int maxval = header_int(bytes, pos, path, "maxval");
  if (img.width <= 0 || img.height <= 0) throw FormatError(path + ": zero image extent");
  if (maxval != 255) throw FormatError(path + ": maxval " + std::to_string(maxval) + " unsupported (need 255)");
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) {
    throw FormatError(path + ": missing whitespace after PNM header");
  }
  ++pos;
  const auto n = static_cast<std::size_t>(img.width) * img.height * img.channels;
  if (bytes.size() - pos < n) throw FormatError(path + ": truncated pixel data");
  img.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                    bytes.begin() + static_cast<std::ptrdiff_t>(pos + n));
  return img;
}

void write_pnm(const PnmImage& image, const std::string& path) {
  if (image.channels != 1 && image.channels != 3) throw ShapeError("PNM needs 1 or 3 channels");
  if (image.pixels.size() != static_cast<std::size_t>(image.width) * image.height * image.channels) {
    throw ShapeError("PNM pixel count does not match " + std::to_string(image.width) + "x" +
                     std::to_string(image.height));
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out << (image.channels == 1 ? "P5" : "P6") << '\n' << image.width << ' ' << image.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.pixels.data()), static_cast<std::streamsize>(image.pixels.size()));
  if (!out) throw IoError("failed writing " + path);
}

std::string to_string(ShapeFamily family) {
  switch (family) {
    case ShapeFamily::kEllipses: return "ellipses";
    case ShapeFamily::kBlobs: return "blobs";
    case ShapeFamily::kLobes: return "lobes";
  }
  return "?";
}

ShapeFamily shape_family_from_string(const std::string& name) {
  if (name == "ellipses") return ShapeFamily::kEllipses;
  if (name == "blobs") return ShapeFamily::kBlobs;
  if (name == "lobes") return ShapeFamily::kLobes;
  throw ConfigError("unknown shape family '" + name + "' (ellipses, blobs, lobes)");
}

void SynthSpec::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("synth spec: " + msg); };
  if (height < 16 || width < 16) fail("height and width must be at least 16");
  if (channels != 1 && channels != 3) fail("channels must be 1 or 3");
  if (fg_mean < 0 || fg_mean > 1 || bg_mean < 0 || bg_mean > 1) fail("intensity means must lie in [0, 1]");
  if (fg_mean == bg_mean) fail("fg_mean and bg_mean must differ");
  if (!(noise_sigma >= 0)) fail("noise_sigma must be non-negative");
  if (blur_radius < 0) fail("blur_radius must be non-negative");
  if (count < 1) fail("count must be positive");
}

std::optional<double> SynthSpec::snr() const {
  if (noise_sigma == 0) return std::nullopt;
  return std::abs(fg_mean - bg_mean) / noise_sigma;
}

nlohmann::json to_json(const SynthSpec& spec) {
  return {{"height", spec.height},       {"width", spec.width},
          {"channels", spec.channels},   {"family", to_string(spec.family)},
          {"fg_mean", spec.fg_mean},     {"bg_mean", spec.bg_mean},
          {"noise_sigma", spec.noise_sigma}, {"blur_radius", spec.blur_radius},
          {"seed", spec.seed},           {"count", spec.count}};
}

SynthSpec synth_spec_from_json(const nlohmann::json& j, SynthSpec spec) {
  if (!j.is_object()) throw ConfigError("synth spec must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "height") spec.height = value.get<int>();
      else if (key == "width") spec.width = value.get<int>();
      else if (key == "channels") spec.channels = value.get<int>();
      else if (key == "family") spec.family = shape_family_from_string(value.get<std::string>());
      else if (key == "fg_mean") spec.fg_mean = value.get<double>();
      else if (key == "bg_mean") spec.bg_mean = value.get<double>();
      else if (key == "noise_sigma") spec.noise_sigma = value.get<double>();
      else if (key == "blur_radius") spec.blur_radius = value.get<int>();
      else if (key == "seed") spec.seed = value.get<std::uint64_t>();
      else if (key == "count") spec.count = value.get<int>();
      else throw ConfigError("unknown synth spec key '" + key + "'");
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("synth spec key '" + key + "': " + e.what());
    }
  }
  spec.validate();
  return spec;
}

std::uint64_t sample_seed(std::uint64_t dataset_seed, std::uint64_t index) {
  std::uint64_t state = dataset_seed;
  const auto a = splitmix64(state);
  state = a ^ index;
  return splitmix64(state);
}

RenderedSample render_sample(const SynthSpec& spec, std::uint64_t index) {
  spec.validate();
  Rng rng(sample_seed(spec.seed, index));
  const int h = spec.height, w = spec.width;
  const auto plane = static_cast<std::size_t>(h) * w;
  const auto bits = make_mask(spec, rng);

  std::vector<double> clean(plane);
  for (std::size_t i = 0; i < plane; ++i) clean[i] = bits[i] ? spec.fg_mean : spec.bg_mean;
  clean = box_blur(clean, h, w, spec.blur_radius);

  RenderedSample out;
  out.image = {w, h, spec.channels, std::vector<std::uint8_t>(plane * spec.channels)};
  std::normal_distribution<double> noise(0.0, spec.noise_sigma > 0 ? spec.noise_sigma : 1.0);
  for (std::size_t i = 0; i < plane; ++i) {
    for (int c = 0; c < spec.channels; ++c) {
      const double n = spec.noise_sigma > 0 ? noise(rng) : 0.0;
      out.image.pixels[i * spec.channels + c] = to_byte(clean[i] + n);
    }
  }
  out.mask = {w, h, 1, std::vector<std::uint8_t>(plane)};
  for (std::size_t i = 0; i < plane; ++i) out.mask.pixels[i] = bits[i] ? 255 : 0;
  return out;
}

std::vector<nlohmann::json> generate_dataset(const SynthSpec& spec, const std::string& out_dir, int threads) {
  spec.validate();
  std::error_code ec;
  fs::create_directories(fs::path(out_dir) / "images", ec);
  if (!ec) fs::create_directories(fs::path(out_dir) / "masks", ec);
  if (ec) throw IoError("cannot create dataset directory " + out_dir + ": " + ec.message());

  const auto n = static_cast<std::size_t>(spec.count);
  std::vector<nlohmann::json> records(n);
  const auto snr = spec.snr();
  const std::string ext = spec.channels == 1 ? ".pgm" : ".ppm";
  parallel_for(n, threads, [&](std::size_t i) {
    const auto id = sample_id(i);
    const auto r = render_sample(spec, i);
    const auto image_rel = "images/" + id + ext;
    const auto mask_rel = "masks/" + id + ".pgm";
    write_pnm(r.image, (fs::path(out_dir) / image_rel).string());
    write_pnm(r.mask, (fs::path(out_dir) / mask_rel).string());
    records[i] = {{"id", id}, {"image_path", image_rel}, {"mask_path", mask_rel},
                  {"snr", snr ? nlohmann::json(*snr) : nlohmann::json(nullptr)}};
  });

  const auto manifest = (fs::path(out_dir) / "manifest.jsonl").string();
  std::ofstream out(manifest, std::ios::trunc);
  if (!out) throw IoError("cannot write " + manifest);
  for (const auto& r : records) out << r.dump() << '\n';
  if (!out) throw IoError("failed writing " + manifest);
  return records;
}

SegSample to_sample(const std::string& id, const PnmImage& image, const PnmImage& mask) {
  if (mask.channels != 1) throw FormatError("mask must be single-channel (P5)");
  if (image.width != mask.width || image.height != mask.height) {
    throw ShapeError("image is " + std::to_string(image.width) + "x" + std::to_string(image.height) + ", mask is " +
                     std::to_string(mask.width) + "x" + std::to_string(mask.height));
  }
  const std::int64_t h = image.height, w = image.width, c = image.channels;
  const auto plane = static_cast<std::size_t>(h * w);
  SegSample s;
  s.id = id;
  s.image = Tensor<float>({c, h, w});
  auto img = s.image.mutable_data();
  for (std::size_t i = 0; i < plane; ++i) {
    for (std::int64_t k = 0; k < c; ++k) {
      img[static_cast<std::size_t>(k) * plane + i] = static_cast<float>(image.pixels[i * c + k]) / 255.0f;
    }
  }
  s.mask = Tensor<float>({1, h, w});
  auto m = s.mask.mutable_data();
  for (std::size_t i = 0; i < plane; ++i) m[i] = mask.pixels[i] >= 128 ? 1.0f : 0.0f;
  return s;
}

Tensor<float> resize_nearest(const Tensor<float>& x, std::int64_t height, std::int64_t width) {
  if (x.rank() != 3) throw ShapeError("resize_nearest expects [C,H,W], got " + shape_str(x.shape()));
  if (height <= 0 || width <= 0) throw ShapeError("resize_nearest target must be positive");
  const auto c = x.dim(0), h = x.dim(1), w = x.dim(2);
  Tensor<float> out({c, height, width});
  auto src = x.data();
  auto dst = out.mutable_data();
  for (std::int64_t k = 0; k < c; ++k) {
    for (std::int64_t y = 0; y < height; ++y) {
      const auto sy = std::min(h - 1, (y * h) / height);
      for (std::int64_t xx = 0; xx < width; ++xx) {
        const auto sx = std::min(w - 1, (xx * w) / width);
        dst[static_cast<std::size_t>((k * height + y) * width + xx)] = src[static_cast<std::size_t>((k * h + sy) * w + sx)];
      }
    }
  }
  return out;
}

std::vector<SegSample> load_dataset(const std::string& dir, const LoadOptions& options) {
  if (options.channels != 0 && options.channels != 1 && options.channels != 3) {
    throw ConfigError("load channels must be 0, 1 or 3");
  }
  if (options.height < 0 || options.width < 0 || (options.height == 0) != (options.width == 0)) {
    throw ConfigError("load resize needs both height and width, or neither");
  }
  const auto manifest = (fs::path(dir) / "manifest.jsonl").string();
  std::ifstream in(manifest);
  if (!in) throw IoError("cannot open manifest " + manifest);

  struct Entry {
    std::string id, image, mask;
  };
  std::vector<Entry> entries;
  std::string line;
  for (int lineno = 1; std::getline(in, line); ++lineno) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      entries.push_back({j.at("id").get<std::string>(), j.at("image_path").get<std::string>(),
                         j.at("mask_path").get<std::string>()});
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(manifest + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (entries.empty()) throw FormatError("manifest " + manifest + " lists no samples");

  auto resolve = [&](const std::string& p) {
    return fs::path(p).is_absolute() ? p : (fs::path(dir) / p).string();
  };
  std::vector<SegSample> samples(entries.size());
  parallel_for(entries.size(), options.threads, [&](std::size_t i) {
    const auto& e = entries[i];
    try {
      auto s = to_sample(e.id, read_pnm(resolve(e.image)), read_pnm(resolve(e.mask)));
      if (options.channels != 0 && options.channels != s.image.dim(0)) {
        const auto h = s.image.dim(1), w = s.image.dim(2);
        const auto plane = static_cast<std::size_t>(h * w);
        Tensor<float> conv({options.channels, h, w});
        auto src = s.image.data();
        auto dst = conv.mutable_data();
        if (options.channels == 3) {
          for (std::size_t k = 0; k < 3; ++k) std::copy(src.begin(), src.end(), dst.begin() + k * plane);
        } else {
          for (std::size_t p = 0; p < plane; ++p) dst[p] = (src[p] + src[plane + p] + src[2 * plane + p]) / 3.0f;
        }
        s.image = conv;
      }
      if (options.height > 0 && (options.height != s.image.dim(1) || options.width != s.image.dim(2))) {
        auto img4 = ops::reshape(s.image, {1, s.image.dim(0), s.image.dim(1), s.image.dim(2)});
        auto r = ops::bilinear_resize(img4, options.height, options.width);
        s.image = ops::reshape(r, {r.dim(1), r.dim(2), r.dim(3)}).clone();
        s.mask = resize_nearest(s.mask, options.height, options.width);
      }
      samples[i] = std::move(s);
    } catch (const Error&) {
      rethrow_for(e.id);
    }
  });
  return samples;
}

Batch make_batch(const std::vector<SegSample>& samples, const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw ShapeError("make_batch needs at least one sample");
  const auto& first = samples.at(indices[0]);
  const auto c = first.image.dim(0), h = first.image.dim(1), w = first.image.dim(2);
  const auto b = static_cast<std::int64_t>(indices.size());
  Batch batch{Tensor<float>({b, c, h, w}), Tensor<float>({b, 1, h, w})};
  auto img = batch.images.mutable_data();
  auto msk = batch.masks.mutable_data();
  const auto isz = static_cast<std::size_t>(c * h * w), msz = static_cast<std::size_t>(h * w);
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const auto& s = samples.at(indices[k]);
    if (s.image.shape() != first.image.shape() || s.mask.shape() != first.mask.shape()) {
      throw ShapeError("sample " + s.id + " has image " + shape_str(s.image.shape()) + ", batch expects " +
                       shape_str(first.image.shape()));
    }
    std::copy(s.image.data().begin(), s.image.data().end(), img.begin() + static_cast<std::ptrdiff_t>(k * isz));
    std::copy(s.mask.data().begin(), s.mask.data().end(), msk.begin() + static_cast<std::ptrdiff_t>(k * msz));
  }
  return batch;
}

double foreground_fraction(const std::vector<SegSample>& samples) {
  if (samples.empty()) return 0.0;
  double acc = 0;
  for (const auto& s : samples) {
    double fg = 0;
    for (auto v : s.mask.data()) fg += v;
    acc += fg / static_cast<double>(s.mask.numel());
  }
  return acc / static_cast<double>(samples.size());
}

}  // namespace mdtaf
