// SPDX-License-Identifier: Apache-2.0
//
// Count metrics, whole-image prediction, attention maps and the per-epoch
// convergence log.

#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "transcrowd/image.hpp"
#include "transcrowd/model.hpp"
#include "transcrowd/synth.hpp"

namespace transcrowd {

struct CountMetrics {
  double mae = 0.0;
  double mse = 0.0;  // root of the mean squared error
};

// MAE = (1/N) Σ|P − G|, MSE = sqrt((1/N) Σ|P − G|²).
inline CountMetrics mae_mse(std::span<const double> preds, std::span<const double> gts) {
  if (preds.empty() || preds.size() != gts.size()) {
    throw std::invalid_argument("mae_mse: need equal, nonempty inputs (got " + std::to_string(preds.size()) + " and " +
                                std::to_string(gts.size()) + ")");
  }
  double abs_sum = 0.0, sq_sum = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const double e = std::fabs(preds[i] - gts[i]);
    abs_sum += e;
    sq_sum += e * e;
  }
  const auto n = static_cast<double>(preds.size());
  return {abs_sum / n, std::sqrt(sq_sum / n)};
}

struct EvalReport {
  std::vector<std::string> images;
  std::vector<double> predicted;  // clamped at 0
  std::vector<double> truth;
  CountMetrics metrics;

  std::size_t size() const { return predicted.size(); }
};

// `image\tpred\tgt` rows, then `MAE\t<v>` and `MSE\t<v>`.
inline void write_report_tsv(const EvalReport& report, std::ostream& out) {
  out << "image\tpred\tgt\n";
  for (std::size_t i = 0; i < report.size(); ++i)
    out << report.images[i] << '\t' << report.predicted[i] << '\t' << report.truth[i] << '\n';
  out << "MAE\t" << report.metrics.mae << '\n' << "MSE\t" << report.metrics.mse << '\n';
}

// Raw (unclamped) per-image counts: the sum of tile predictions.
inline double predict_raw(const Model& model, const Image& img, const Normalization& norm) {
  const auto tiles = to_tiles(img, model.config.image);
  const PatchBatch batch =
      make_patch_batch(tiles, {0.0f}, model.config.patch, norm, std::vector<std::size_t>{tiles.size()});
  const ForwardResult fr = forward(model, batch.data);
  double total = 0.0;
  for (float v : fr.predictions.data()) total += v;
  return total;
}

// Resize-and-tile, per-tile forward, sum, clamp at 0.
inline double predict_image(const Model& model, const Image& img, const Normalization& norm = {}) {
  return std::max(0.0, predict_raw(model, img, norm));
}

inline EvalReport evaluate(const Model& model, const std::vector<Sample>& data, const Normalization& norm = {},
                           const std::vector<std::string>& names = {}) {
  if (data.empty()) throw std::invalid_argument("evaluate: empty dataset");
  EvalReport report;
  for (std::size_t i = 0; i < data.size(); ++i) {
    report.images.push_back(i < names.size() ? names[i] : std::to_string(i));
    report.predicted.push_back(predict_image(model, data[i].image, norm));
    report.truth.push_back(data[i].count);
  }
  report.metrics = mae_mse(report.predicted, report.truth);
  return report;
}

struct AttentionMap {
  std::size_t rows = 0, cols = 0;
  std::vector<float> values;  // row-major, in [0, 1]
  std::string provenance;

  float at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
};

// Min-max to [0, 1]; a constant input maps to all zeros.
inline void min_max_normalize(std::vector<float>& v) {
  if (v.empty()) return;
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  const float mn = *lo, range = *hi - *lo;
  if (!(range > 0.0f)) {
    std::fill(v.begin(), v.end(), 0.0f);
    return;
  }
  for (float& x : v) x = std::clamp((x - mn) / range, 0.0f, 1.0f);
}

// Last layer, heads averaged. Token variant: the regression token's query row
// over the patch keys. GAP variant: each key's mean weight over all queries.
// `batch_index` selects one image from batched records.
inline AttentionMap attention_map(const std::vector<AttentionRecord>& records, HeadVariant variant, std::size_t grid_rows,
                                  std::size_t grid_cols, std::size_t batch_index = 0) {
  if (records.empty()) throw std::invalid_argument("attention_map: no attention records");
  std::size_t last = 0;
  for (const auto& r : records) last = std::max(last, r.layer);

  const std::size_t offset = variant == HeadVariant::Token ? 1 : 0;
  const std::size_t patches = grid_rows * grid_cols;
  std::vector<double> acc(patches, 0.0);
  std::size_t heads = 0;
  for (const auto& r : records) {
    if (r.layer != last) continue;
    const Tensor& w = r.weights;
    const std::size_t s = w.dim(-1);
    if (w.rank() != 3 || s != patches + offset || batch_index >= w.dim(0)) {
      throw ShapeError("attention_map: weights " + shape_str(w.shape()) + " do not fit a " + std::to_string(grid_rows) +
                       "x" + std::to_string(grid_cols) + " grid");
    }
    const float* base = w.data().data() + batch_index * s * s;
    if (variant == HeadVariant::Token) {
      for (std::size_t k = 0; k < patches; ++k) acc[k] += base[k + 1];
    } else {
      for (std::size_t q = 0; q < s; ++q)
        for (std::size_t k = 0; k < patches; ++k) acc[k] += base[q * s + k] / static_cast<double>(s);
    }
    ++heads;
  }
  AttentionMap map{grid_rows, grid_cols, std::vector<float>(patches), {}};
  for (std::size_t k = 0; k < patches; ++k) map.values[k] = static_cast<float>(acc[k] / static_cast<double>(heads));
  min_max_normalize(map.values);
  map.provenance = "layer=" + std::to_string(last) + " heads=mean(" + std::to_string(heads) + ") " +
                   (variant == HeadVariant::Token ? "query=reg_token" : "query=mean_over_tokens");
  return map;
}

// Forward one image (its first tile) with attention capture and build its map.
inline AttentionMap image_attention_map(const Model& model, const Image& img, const Normalization& norm = {}) {
  const auto tiles = to_tiles(img, model.config.image);
  const PatchBatch batch = make_patch_batch({tiles.front()}, {0.0f}, model.config.patch, norm);
  const ForwardResult fr = forward(model, batch.data, true);
  return attention_map(fr.records, model.config.head, model.config.grid(), model.config.grid());
}

// Binary P5, byte = round(255 · weight).
inline void export_pgm(const AttentionMap& map, const std::filesystem::path& path) {
  GrayImage img{map.rows, map.cols, std::vector<unsigned char>(map.values.size())};
  std::transform(map.values.begin(), map.values.end(), img.bytes.begin(), detail::quantize);
  save_pgm(img, path);
}

// Append-only `epoch\ttrain_loss\teval_mae` TSV, flushed after every record.
class ConvergenceLog {
 public:
  explicit ConvergenceLog(const std::filesystem::path& path) : path_(path), out_(path, std::ios::trunc) {
    if (!out_) throw std::runtime_error("cannot open convergence log " + path.string());
    out_ << "epoch\ttrain_loss\teval_mae\n";
    flush();
  }

  void append(std::size_t epoch, double train_loss, double eval_mae) {
    out_ << epoch << '\t' << train_loss << '\t' << eval_mae << '\n';
    flush();
  }

  const std::filesystem::path& path() const { return path_; }

 private:
  void flush() {
    if (!out_.flush()) throw std::runtime_error("write failed for convergence log " + path_.string());
  }

  std::filesystem::path path_;
  std::ofstream out_;
};

}  // namespace transcrowd
