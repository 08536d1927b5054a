// SPDX-License-Identifier: Apache-2.0
//
// Synthetic dot crowds with count-only labels, and their on-disk layout: a
// directory of PPM files plus labels.tsv (`<filename>\t<count>` per line).

#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "transcrowd/image.hpp"
#include "transcrowd/rng.hpp"

namespace transcrowd {

enum class Quadrant { TopLeft, TopRight, BottomLeft, BottomRight };

struct SynthSpec {
  std::size_t canvas = 64;
  int count_min = 0;
  int count_max = 30;
  double radius = 2.0;
  double noise = 0.2;  // background amplitude in [0, 1]
  std::uint64_t seed = 0;
  // Confines every dot centre to one quadrant when set.
  std::optional<Quadrant> region;
};

struct Sample {
  Image image;
  float count = 0.0f;
};

inline void validate(const SynthSpec& spec) {
  if (spec.count_min < 0 || spec.count_min > spec.count_max) throw std::invalid_argument("synth: invalid count range");
  if (spec.radius < 1.0) throw std::invalid_argument("synth: radius must be >= 1");
  if (spec.noise < 0.0 || spec.noise > 1.0) throw std::invalid_argument("synth: noise must lie in [0, 1]");
  if (static_cast<double>(spec.canvas) < 2.0 * spec.radius + 1.0) {
    throw std::invalid_argument("synth: canvas of " + std::to_string(spec.canvas) + " px is too small for radius " +
                                std::to_string(spec.radius));
  }
}

// One image of the stream; image i depends only on (seed, i).
inline Sample synth_one(const SynthSpec& spec, std::size_t index) {
  validate(spec);
  Rng rng(derive_seed(spec.seed, 0x5157, index));
  const auto count = static_cast<int>(rng.uniform_int(spec.count_min, spec.count_max));
  const std::size_t side = spec.canvas;
  Image img(side, side);
  for (float& v : img.pixels) v = static_cast<float>(rng.uniform() * spec.noise);

  // Dot profile exp(-d^2 / 2σ^2), σ = radius / 2, truncated at 3σ.
  const double sigma = 0.5 * spec.radius;
  const double reach = 3.0 * sigma;
  double lo_x = 0.0, lo_y = 0.0, hi_x = static_cast<double>(side), hi_y = static_cast<double>(side);
  if (spec.region) {
    const double half = 0.5 * static_cast<double>(side);
    const bool right = *spec.region == Quadrant::TopRight || *spec.region == Quadrant::BottomRight;
    const bool bottom = *spec.region == Quadrant::BottomLeft || *spec.region == Quadrant::BottomRight;
    lo_x = right ? half : 0.0;
    lo_y = bottom ? half : 0.0;
    hi_x = lo_x + half;
    hi_y = lo_y + half;
    // Keep each profile's support inside the quadrant.
    const double inset = std::min(reach, 0.25 * half);
    lo_x += inset, lo_y += inset, hi_x -= inset, hi_y -= inset;
  }

  std::vector<float> intensity(side * side, 0.0f);
  for (int d = 0; d < count; ++d) {
    const double cx = rng.uniform(lo_x, hi_x);
    const double cy = rng.uniform(lo_y, hi_y);
    const auto y0 = static_cast<std::ptrdiff_t>(std::floor(cy - reach));
    const auto y1 = static_cast<std::ptrdiff_t>(std::ceil(cy + reach));
    const auto x0 = static_cast<std::ptrdiff_t>(std::floor(cx - reach));
    const auto x1 = static_cast<std::ptrdiff_t>(std::ceil(cx + reach));
    for (std::ptrdiff_t y = std::max<std::ptrdiff_t>(0, y0); y <= std::min<std::ptrdiff_t>(side - 1, y1); ++y)
      for (std::ptrdiff_t x = std::max<std::ptrdiff_t>(0, x0); x <= std::min<std::ptrdiff_t>(side - 1, x1); ++x) {
        const double dx = static_cast<double>(x) + 0.5 - cx;
        const double dy = static_cast<double>(y) + 0.5 - cy;
        intensity[static_cast<std::size_t>(y) * side + static_cast<std::size_t>(x)] +=
            static_cast<float>(std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma)));
      }
  }
  for (std::size_t p = 0; p < side * side; ++p)
    for (std::size_t c = 0; c < kChannels; ++c) {
      float& v = img.pixels[p * kChannels + c];
      v = std::clamp(v + intensity[p], 0.0f, 1.0f);
    }
  return Sample{std::move(img), static_cast<float>(count)};
}

inline std::vector<Sample> synth_generate(const SynthSpec& spec, std::size_t n_images) {
  validate(spec);
  std::vector<Sample> out;
  out.reserve(n_images);
  for (std::size_t i = 0; i < n_images; ++i) out.push_back(synth_one(spec, i));
  return out;
}

struct LabeledFile {
  std::string filename;
  float count = 0.0f;
};

inline std::string format_float(float v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline std::vector<LabeledFile> write_dataset(const std::filesystem::path& dir, const std::vector<Sample>& samples) {
  std::filesystem::create_directories(dir);
  std::vector<LabeledFile> files;
  std::ofstream labels(dir / "labels.tsv");
  if (!labels) throw std::runtime_error("cannot write " + (dir / "labels.tsv").string());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "img_%05zu.ppm", i);
    save_ppm(samples[i].image, dir / name);
    labels << name << '\t' << format_float(samples[i].count) << '\n';
    files.push_back({name, samples[i].count});
  }
  if (!labels.flush()) throw std::runtime_error("write failed for labels.tsv");
  return files;
}

inline std::vector<LabeledFile> read_labels(const std::filesystem::path& dir) {
  std::ifstream in(dir / "labels.tsv");
  if (!in) throw std::runtime_error("cannot open " + (dir / "labels.tsv").string());
  std::vector<LabeledFile> files;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw std::runtime_error("labels.tsv:" + std::to_string(lineno) + ": missing tab");
    LabeledFile f{line.substr(0, tab), 0.0f};
    const char* first = line.data() + tab + 1;
    const char* last = line.data() + line.size();
    const auto res = std::from_chars(first, last, f.count);
    if (res.ec != std::errc{} || res.ptr != last || !(f.count >= 0.0f)) {
      throw std::runtime_error("labels.tsv:" + std::to_string(lineno) + ": bad count");
    }
    files.push_back(std::move(f));
  }
  return files;
}

inline std::vector<Sample> read_dataset(const std::filesystem::path& dir) {
  std::vector<Sample> out;
  for (const auto& f : read_labels(dir)) out.push_back({load_ppm(dir / f.filename), f.count});
  return out;
}

}  // namespace transcrowd
