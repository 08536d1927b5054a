// SPDX-License-Identifier: Apache-2.0
//
// Adam with decoupled weight decay, deterministic batch scheduling and the
// training step. All randomness is keyed by (seed, global step), so a run
// resumed from a checkpoint replays exactly what an uninterrupted run does.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "transcrowd/image.hpp"
#include "transcrowd/model.hpp"
#include "transcrowd/rng.hpp"
#include "transcrowd/synth.hpp"
#include "transcrowd/tensor.hpp"

namespace transcrowd {

struct AdamConfig {
  float lr = 1e-5f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  float weight_decay = 1e-4f;
};

struct AdamMoments {
  std::vector<float> m, v;
};

struct AdamState {
  std::map<std::string, AdamMoments> moments;  // keyed by parameter name
  std::uint64_t step = 0;
};

class MissingGradient : public std::runtime_error {
 public:
  explicit MissingGradient(const std::string& name)
      : std::runtime_error("adam_step: parameter '" + name + "' has no gradient"), name_(name) {}
  const std::string& name() const { return name_; }

 private:
  std::string name_;
};

// θ ← θ − lr·wd·θ, then the bias-corrected Adam update.
inline void adam_step(const std::vector<NamedTensor>& params, AdamState& state, const AdamConfig& cfg) {
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) throw MissingGradient(p.name);
  }
  const std::uint64_t t = ++state.step;
  const double c1 = 1.0 - std::pow(static_cast<double>(cfg.beta1), static_cast<double>(t));
  const double c2 = 1.0 - std::pow(static_cast<double>(cfg.beta2), static_cast<double>(t));
  const float decay = cfg.lr * cfg.weight_decay;
  for (const auto& p : params) {
    Tensor param = p.tensor;
    auto theta = param.mutable_data();
    const auto grad = param.grad();
    AdamMoments& mom = state.moments[p.name];
    if (mom.m.size() != theta.size()) {
      mom.m.assign(theta.size(), 0.0f);
      mom.v.assign(theta.size(), 0.0f);
    }
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const float g = grad[i];
      mom.m[i] = cfg.beta1 * mom.m[i] + (1.0f - cfg.beta1) * g;
      mom.v[i] = cfg.beta2 * mom.v[i] + (1.0f - cfg.beta2) * g * g;
      const double mhat = mom.m[i] / c1;
      const double vhat = mom.v[i] / c2;
      theta[i] -= decay * theta[i];
      theta[i] -= static_cast<float>(cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps));
    }
  }
}

struct TrainConfig {
  ModelConfig model;
  AdamConfig adam;
  std::size_t batch = 24;
  std::size_t epochs = 1;
  std::uint64_t seed = 0;
  bool augment = true;
  AugmentOptions augment_options;
  Normalization normalization;
  std::size_t checkpoint_every = 0;  // epochs; 0 = only at the end

  // Desk-scale profile: toy model, M = 8, learning rate raised for training
  // from random initialisation.
  static TrainConfig toy(HeadVariant head = HeadVariant::Gap) {
    TrainConfig c;
    c.model = ModelConfig::toy(head);
    c.batch = 8;
    c.adam.lr = 1e-3f;
    return c;
  }
};

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// One forward/backward/update on `batch`; returns the loss before the update.
inline float train_step(Model& model, const PatchBatch& batch, AdamState& state, const AdamConfig& cfg) {
  if (batch.images() == 0) throw std::invalid_argument("train_step: empty batch");
  const auto params = model.parameters();
  Graph graph;
  Graph::Scope scope(graph);
  for (auto p : params) p.tensor.zero_grad();
  ForwardResult fr = forward(model, batch.data);
  Tensor loss = l1_loss(sum_tiles(fr.predictions, batch.tile_counts), batch.labels);
  const float value = loss.item();
  if (!std::isfinite(value)) {
    std::ostringstream os;
    os << "train_step: non-finite loss at step " << state.step << "; max |activation| per layer:";
    for (std::size_t l = 0; l < fr.layer_max_abs.size(); ++l) os << " L" << l << '=' << fr.layer_max_abs[l];
    throw TrainingDiverged(os.str());
  }
  graph.backward(loss);
  adam_step(params, state, cfg);
  return value;
}

// Which samples form the batch at a given global step: one seeded shuffle per
// epoch, consecutive slices of it per step (the last one may be short).
class BatchSchedule {
 public:
  BatchSchedule(std::size_t dataset_size, std::size_t batch, std::uint64_t seed)
      : size_(dataset_size), batch_(batch), seed_(seed) {
    if (size_ == 0) throw std::invalid_argument("BatchSchedule: empty dataset");
    if (batch_ == 0) throw std::invalid_argument("BatchSchedule: batch size must be >= 1");
  }

  std::size_t steps_per_epoch() const { return (size_ + batch_ - 1) / batch_; }
  std::uint64_t epoch_of(std::uint64_t step) const { return step / steps_per_epoch(); }

  std::vector<std::size_t> indices(std::uint64_t step) const {
    const std::uint64_t epoch = epoch_of(step);
    std::vector<std::size_t> order(size_);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(seed_, 0x5u, epoch));
    for (std::size_t i = size_; i > 1; --i) {
      const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i - 1)));
      std::swap(order[i - 1], order[j]);
    }
    const std::size_t begin = static_cast<std::size_t>(step % steps_per_epoch()) * batch_;
    const std::size_t end = std::min(size_, begin + batch_);
    return {order.begin() + static_cast<std::ptrdiff_t>(begin), order.begin() + static_cast<std::ptrdiff_t>(end)};
  }

 private:
  std::size_t size_, batch_;
  std::uint64_t seed_;
};

// Tiles, augments (per tile) and flattens the chosen samples.
inline PatchBatch compose_batch(const std::vector<Sample>& data, const std::vector<std::size_t>& indices,
                                const TrainConfig& cfg, std::uint64_t step) {
  Rng rng(derive_seed(cfg.seed, 0xA6u, step));
  std::vector<Image> tiles;
  std::vector<float> labels;
  std::vector<std::size_t> counts;
  for (std::size_t i : indices) {
    auto t = to_tiles(data.at(i).image, cfg.model.image);
    counts.push_back(t.size());
    labels.push_back(data[i].count);
    for (Image& tile : t) tiles.push_back(cfg.augment ? augment(tile, rng, cfg.augment_options) : std::move(tile));
  }
  return make_patch_batch(tiles, std::move(labels), cfg.model.patch, cfg.normalization, std::move(counts));
}

struct EpochSummary {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
};

// Runs whole epochs from the epoch containing state.step until `epochs` have
// completed or `on_epoch` returns false.
inline void train_epochs(Model& model, AdamState& state, const std::vector<Sample>& data, const TrainConfig& cfg,
                         const std::function<bool(const EpochSummary&)>& on_epoch = {}) {
  const BatchSchedule schedule(data.size(), cfg.batch, cfg.seed);
  while (schedule.epoch_of(state.step) < cfg.epochs) {
    const std::uint64_t epoch = schedule.epoch_of(state.step);
    double total = 0.0;
    std::size_t steps = 0;
    while (schedule.epoch_of(state.step) == epoch) {
      const std::uint64_t step = state.step;
      total += train_step(model, compose_batch(data, schedule.indices(step), cfg, step), state, cfg.adam);
      ++steps;
    }
    if (on_epoch && !on_epoch({static_cast<std::size_t>(epoch + 1), total / static_cast<double>(steps)})) break;
  }
}

}  // namespace transcrowd
