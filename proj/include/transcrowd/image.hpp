// SPDX-License-Identifier: Apache-2.0
//
// RGB images in [0, 1], binary PNM I/O, and the image-to-sequence steps:
// resize, tiling, patch flattening and training-time augmentation.

#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <vector>

#include "transcrowd/rng.hpp"
#include "transcrowd/tensor.hpp"

namespace transcrowd {

inline constexpr std::size_t kChannels = 3;

struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> pixels;  // row-major HWC

  Image() = default;
  Image(std::size_t h, std::size_t w, float fill = 0.0f) : height(h), width(w), pixels(h * w * kChannels, fill) {}

  float& at(std::size_t y, std::size_t x, std::size_t c) { return pixels[(y * width + x) * kChannels + c]; }
  float at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * width + x) * kChannels + c]; }

  friend bool operator==(const Image&, const Image&) = default;
};

enum class PnmErrorKind { Io, BadMagic, BadHeader, BadMaxval, Truncated };

class PnmError : public std::runtime_error {
 public:
  PnmError(PnmErrorKind kind, std::size_t offset, const std::string& what)
      : std::runtime_error(what + " at byte " + std::to_string(offset)), kind_(kind), offset_(offset) {}
  PnmErrorKind kind() const { return kind_; }
  std::size_t offset() const { return offset_; }

 private:
  PnmErrorKind kind_;
  std::size_t offset_;
};

namespace detail {

inline std::vector<unsigned char> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw PnmError(PnmErrorKind::Io, 0, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

class PnmHeaderReader {
 public:
  explicit PnmHeaderReader(const std::vector<unsigned char>& bytes) : bytes_(bytes) {}

  void expect_magic(const char* magic) {
    if (bytes_.size() < 2 || bytes_[0] != magic[0] || bytes_[1] != magic[1]) {
      throw PnmError(PnmErrorKind::BadMagic, 0, std::string("expected magic ") + magic);
    }
    pos_ = 2;
  }

  std::size_t read_uint(const char* field) {
    skip_space_and_comments();
    const std::size_t start = pos_;
    std::size_t value = 0;
    while (pos_ < bytes_.size() && std::isdigit(bytes_[pos_])) {
      value = value * 10 + static_cast<std::size_t>(bytes_[pos_] - '0');
      if (value > (1u << 24)) throw PnmError(PnmErrorKind::BadHeader, start, std::string(field) + " too large");
      ++pos_;
    }
    if (pos_ == start) {
      if (pos_ >= bytes_.size()) throw PnmError(PnmErrorKind::Truncated, pos_, std::string("header ends before ") + field);
      throw PnmError(PnmErrorKind::BadHeader, pos_, std::string("expected ") + field);
    }
    return value;
  }

  // Exactly one whitespace byte separates maxval from the raster.
  std::size_t raster_offset() {
    if (pos_ >= bytes_.size()) throw PnmError(PnmErrorKind::Truncated, pos_, "header ends before raster");
    if (!std::isspace(bytes_[pos_])) throw PnmError(PnmErrorKind::BadHeader, pos_, "expected whitespace after maxval");
    return pos_ + 1;
  }

  std::size_t position() const { return pos_; }

 private:
  void skip_space_and_comments() {
    while (pos_ < bytes_.size()) {
      if (bytes_[pos_] == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else if (std::isspace(bytes_[pos_])) {
        ++pos_;
      } else {
        break;
      }
    }
  }

  const std::vector<unsigned char>& bytes_;
  std::size_t pos_ = 0;
};

struct PnmRaster {
  std::size_t width = 0, height = 0;
  const unsigned char* data = nullptr;
};

inline PnmRaster parse_pnm(const std::vector<unsigned char>& bytes, const char* magic, std::size_t channels) {
  PnmHeaderReader reader(bytes);
  reader.expect_magic(magic);
  PnmRaster raster;
  raster.width = reader.read_uint("width");
  raster.height = reader.read_uint("height");
  const std::size_t maxval_offset = reader.position();
  const std::size_t maxval = reader.read_uint("maxval");
  if (maxval != 255) throw PnmError(PnmErrorKind::BadMaxval, maxval_offset, "maxval " + std::to_string(maxval) + " is not 255");
  if (raster.width == 0 || raster.height == 0) throw PnmError(PnmErrorKind::BadHeader, maxval_offset, "zero image dimension");
  const std::size_t offset = reader.raster_offset();
  const std::size_t need = raster.width * raster.height * channels;
  if (bytes.size() - std::min(bytes.size(), offset) < need) {
    throw PnmError(PnmErrorKind::Truncated, bytes.size(),
                   "raster truncated: need " + std::to_string(need) + " bytes from offset " + std::to_string(offset));
  }
  raster.data = bytes.data() + offset;
  return raster;
}

inline unsigned char quantize(float v) {
  return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

inline void write_pnm(const std::filesystem::path& path, const char* magic, std::size_t width, std::size_t height,
                      const std::vector<unsigned char>& raster) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw PnmError(PnmErrorKind::Io, 0, "cannot write " + path.string());
  out << magic << '\n' << width << ' ' << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(raster.data()), static_cast<std::streamsize>(raster.size()));
  if (!out) throw PnmError(PnmErrorKind::Io, 0, "write failed for " + path.string());
}

}  // namespace detail

inline Image decode_ppm(const std::vector<unsigned char>& bytes) {
  const auto raster = detail::parse_pnm(bytes, "P6", kChannels);
  Image img(raster.height, raster.width);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = static_cast<float>(raster.data[i]) / 255.0f;
  return img;
}

// Binary P6, maxval 255.
inline Image load_ppm(const std::filesystem::path& path) { return decode_ppm(detail::read_file_bytes(path)); }

inline void save_ppm(const Image& img, const std::filesystem::path& path) {
  std::vector<unsigned char> raster(img.pixels.size());
  std::transform(img.pixels.begin(), img.pixels.end(), raster.begin(), detail::quantize);
  detail::write_pnm(path, "P6", img.width, img.height, raster);
}

struct GrayImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<unsigned char> bytes;
};

inline GrayImage load_pgm(const std::filesystem::path& path) {
  const auto bytes = detail::read_file_bytes(path);
  const auto raster = detail::parse_pnm(bytes, "P5", 1);
  GrayImage img{raster.height, raster.width, {}};
  img.bytes.assign(raster.data, raster.data + raster.width * raster.height);
  return img;
}

inline void save_pgm(const GrayImage& img, const std::filesystem::path& path) {
  detail::write_pnm(path, "P5", img.width, img.height, img.bytes);
}

// Bilinear with half-pixel centres (align_corners = false).
inline Image resize_bilinear(const Image& img, std::size_t out_h, std::size_t out_w) {
  if (out_h == 0 || out_w == 0) throw std::invalid_argument("resize_bilinear: output size must be positive");
  if (out_h == img.height && out_w == img.width) return img;
  Image out(out_h, out_w);
  const double sy = static_cast<double>(img.height) / static_cast<double>(out_h);
  const double sx = static_cast<double>(img.width) / static_cast<double>(out_w);
  auto source = [](std::size_t dst, double scale, std::size_t limit, std::size_t& i0, std::size_t& i1, float& w) {
    const double s = std::max(0.0, (static_cast<double>(dst) + 0.5) * scale - 0.5);
    i0 = std::min(static_cast<std::size_t>(s), limit - 1);
    i1 = std::min(i0 + 1, limit - 1);
    w = static_cast<float>(s - static_cast<double>(i0));
  };
  for (std::size_t y = 0; y < out_h; ++y) {
    std::size_t y0, y1;
    float wy;
    source(y, sy, img.height, y0, y1, wy);
    for (std::size_t x = 0; x < out_w; ++x) {
      std::size_t x0, x1;
      float wx;
      source(x, sx, img.width, x0, x1, wx);
      for (std::size_t c = 0; c < kChannels; ++c) {
        const float top = img.at(y0, x0, c) * (1.0f - wx) + img.at(y0, x1, c) * wx;
        const float bottom = img.at(y1, x0, c) * (1.0f - wx) + img.at(y1, x1, c) * wx;
        out.at(y, x, c) = top * (1.0f - wy) + bottom * wy;
      }
    }
  }
  return out;
}

inline Image crop(const Image& img, std::size_t top, std::size_t left, std::size_t h, std::size_t w) {
  if (top + h > img.height || left + w > img.width) throw std::out_of_range("crop: window outside image");
  Image out(h, w);
  for (std::size_t y = 0; y < h; ++y) {
    const auto src = img.pixels.begin() + static_cast<std::ptrdiff_t>(((top + y) * img.width + left) * kChannels);
    std::copy(src, src + static_cast<std::ptrdiff_t>(w * kChannels),
              out.pixels.begin() + static_cast<std::ptrdiff_t>(y * w * kChannels));
  }
  return out;
}

// Non-overlapping side×side tiles in row-major grid order.
inline std::vector<Image> tile_grid(const Image& img, std::size_t side) {
  if (side == 0 || img.height % side != 0 || img.width % side != 0) {
    throw std::invalid_argument("tile_grid: " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                                " is not divisible into " + std::to_string(side) + "-pixel tiles; resize first");
  }
  std::vector<Image> tiles;
  for (std::size_t ty = 0; ty < img.height / side; ++ty)
    for (std::size_t tx = 0; tx < img.width / side; ++tx) tiles.push_back(crop(img, ty * side, tx * side, side, side));
  return tiles;
}

inline Image assemble_tiles(const std::vector<Image>& tiles, std::size_t rows, std::size_t cols) {
  if (tiles.size() != rows * cols || tiles.empty()) throw std::invalid_argument("assemble_tiles: tile count mismatch");
  const std::size_t th = tiles.front().height, tw = tiles.front().width;
  Image out(rows * th, cols * tw);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      const Image& t = tiles[r * cols + c];
      for (std::size_t y = 0; y < th; ++y)
        std::copy(t.pixels.begin() + static_cast<std::ptrdiff_t>(y * tw * kChannels),
                  t.pixels.begin() + static_cast<std::ptrdiff_t>((y + 1) * tw * kChannels),
                  out.pixels.begin() + static_cast<std::ptrdiff_t>(((r * th + y) * out.width + c * tw) * kChannels));
    }
  return out;
}

inline constexpr std::size_t kResizedHeight = 768;
inline constexpr std::size_t kResizedWidth = 1152;
inline constexpr std::size_t kTileSide = 384;

// 768×1152 (H×W) -> six 384×384 tiles, 2 rows × 3 columns.
inline std::vector<Image> split_tiles(const Image& img) {
  if (img.height != kResizedHeight || img.width != kResizedWidth) {
    throw std::invalid_argument("split_tiles: expected 768x1152 (HxW), got " + std::to_string(img.height) + "x" +
                                std::to_string(img.width) + "; resize first");
  }
  return tile_grid(img, kTileSide);
}

// Per-channel standardisation applied while flattening patches.
struct Normalization {
  bool enabled = true;
  std::array<float, kChannels> mean{0.485f, 0.456f, 0.406f};
  std::array<float, kChannels> stddev{0.229f, 0.224f, 0.225f};

  float apply(float v, std::size_t c) const { return enabled ? (v - mean[c]) / stddev[c] : v; }
};

inline std::size_t patch_dim(std::size_t patch) { return patch * patch * kChannels; }

namespace detail {

inline void check_patchable(const Image& img, std::size_t patch) {
  if (patch == 0 || img.height % patch != 0 || img.width % patch != 0) {
    throw std::invalid_argument("patchify: " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                                " not divisible by patch size " + std::to_string(patch));
  }
}

inline void flatten_patches(const Image& img, std::size_t patch, const Normalization& norm, float* out) {
  const std::size_t gw = img.width / patch;
  const std::size_t gh = img.height / patch;
  for (std::size_t gy = 0; gy < gh; ++gy)
    for (std::size_t gx = 0; gx < gw; ++gx)
      for (std::size_t y = 0; y < patch; ++y)
        for (std::size_t x = 0; x < patch; ++x)
          for (std::size_t c = 0; c < kChannels; ++c)
            *out++ = norm.apply(img.at(gy * patch + y, gx * patch + x, c), c);
}

}  // namespace detail

// [N, K*K*3]; patch i is the i-th cell of the row-major patch grid, flattened
// row-major over (y, x, channel).
inline Tensor patchify(const Image& img, std::size_t patch) {
  detail::check_patchable(img, patch);
  const std::size_t n = (img.height / patch) * (img.width / patch);
  std::vector<float> out(n * patch_dim(patch));
  detail::flatten_patches(img, patch, Normalization{false}, out.data());
  return Tensor({n, patch_dim(patch)}, std::move(out));
}

inline Image unpatchify(const Tensor& seq, std::size_t height, std::size_t width, std::size_t patch) {
  if (patch == 0 || height % patch || width % patch || seq.shape() != Shape{(height / patch) * (width / patch), patch_dim(patch)}) {
    throw ShapeError("unpatchify: sequence " + shape_str(seq.shape()) + " does not tile a " + std::to_string(height) +
                     "x" + std::to_string(width) + " image");
  }
  Image img(height, width);
  const float* src = seq.data().data();
  const std::size_t gw = width / patch;
  for (std::size_t gy = 0; gy < height / patch; ++gy)
    for (std::size_t gx = 0; gx < gw; ++gx)
      for (std::size_t y = 0; y < patch; ++y)
        for (std::size_t x = 0; x < patch; ++x)
          for (std::size_t c = 0; c < kChannels; ++c) img.at(gy * patch + y, gx * patch + x, c) = *src++;
  return img;
}

inline Image hflip(const Image& img) {
  Image out(img.height, img.width);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < kChannels; ++c) out.at(y, img.width - 1 - x, c) = img.at(y, x, c);
  return out;
}

inline Image grayscale(const Image& img) {
  Image out(img.height, img.width);
  for (std::size_t p = 0; p < img.height * img.width; ++p) {
    const float* px = img.pixels.data() + p * kChannels;
    const float lum = std::clamp(0.299f * px[0] + 0.587f * px[1] + 0.114f * px[2], 0.0f, 1.0f);
    std::fill_n(out.pixels.begin() + static_cast<std::ptrdiff_t>(p * kChannels), kChannels, lum);
  }
  return out;
}

struct AugmentOptions {
  double p_flip = 0.5;
  double p_gray = 0.1;
};

// Labels are untouched by construction: only pixels go in and out.
inline Image augment(const Image& img, Rng& rng, const AugmentOptions& options = {}) {
  const bool flip = rng.bernoulli(options.p_flip);
  const bool gray = rng.bernoulli(options.p_gray);
  Image out = flip ? hflip(img) : img;
  return gray ? grayscale(out) : out;
}

// Sequences for a minibatch plus count labels. Image i contributes
// tile_counts[i] consecutive sequences whose predictions are summed before
// comparison with its count. No per-person locations are carried.
struct PatchBatch {
  Tensor data;  // [total tiles, N, K*K*3]
  std::vector<float> labels;
  std::vector<std::size_t> tile_counts;

  std::size_t images() const { return labels.size(); }
  std::size_t seq_len() const { return data.dim(1); }
  std::size_t patch_dim() const { return data.dim(2); }
};

// `tile_counts` defaults to one tile per image.
inline PatchBatch make_patch_batch(const std::vector<Image>& tiles, std::vector<float> labels, std::size_t patch,
                                   const Normalization& norm, std::vector<std::size_t> tile_counts = {}) {
  if (tile_counts.empty()) tile_counts.assign(labels.size(), 1);
  std::size_t total = 0;
  for (std::size_t t : tile_counts) total += t;
  if (labels.empty() || tile_counts.size() != labels.size() || tiles.size() != total) {
    throw std::invalid_argument("make_patch_batch: " + std::to_string(tiles.size()) + " tiles for " +
                                std::to_string(labels.size()) + " labels");
  }
  for (float g : labels) {
    if (!(g >= 0.0f)) throw std::invalid_argument("make_patch_batch: labels must be non-negative");
  }
  const Image& first = tiles.front();
  detail::check_patchable(first, patch);
  const std::size_t n = (first.height / patch) * (first.width / patch);
  const std::size_t pd = patch_dim(patch);
  std::vector<float> data(tiles.size() * n * pd);
  for (std::size_t i = 0; i < tiles.size(); ++i) {
    if (tiles[i].height != first.height || tiles[i].width != first.width) {
      throw std::invalid_argument("make_patch_batch: tiles differ in size");
    }
    detail::flatten_patches(tiles[i], patch, norm, data.data() + i * n * pd);
  }
  return PatchBatch{Tensor({tiles.size(), n, pd}, std::move(data)), std::move(labels), std::move(tile_counts)};
}

}  // namespace transcrowd
