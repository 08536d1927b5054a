// SPDX-License-Identifier: Apache-2.0
//
// Central finite-difference check of the recorded backward rules.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <functional>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "transcrowd/rng.hpp"
#include "transcrowd/tensor.hpp"

namespace transcrowd {

class NondeterministicFunction : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct GradCheckOptions {
  float step = 1e-3f;
  // Coordinates probed per tensor; 0 probes all of them. Sampled coordinates
  // are drawn without replacement from `seed`.
  std::size_t max_coords_per_tensor = 0;
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
  std::string worst;  // "<tensor index>[<flat index>]"
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

namespace detail {

inline float evaluate_scalar(const std::function<Tensor()>& f) {
  Tensor out = f();
  return out.item();
}

inline std::vector<std::size_t> probe_indices(std::size_t n, std::size_t limit, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (limit == 0 || limit >= n) return idx;
  for (std::size_t i = 0; i < limit; ++i) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(i), static_cast<std::int64_t>(n - 1)));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(limit);
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace detail

// Compares the gradient recorded by backward() against
// (f(θ + h e_i) − f(θ − h e_i)) / 2h for each probed coordinate of each
// tensor in `params`, reporting max |a − n| / max(1, |a|, |n|).
// f must build its result from `params`; all of them must require gradients.
inline GradCheckResult grad_check(const std::function<Tensor()>& f, std::vector<Tensor> params,
                                  const GradCheckOptions& options = {}) {
  if (!(options.step > 0.0f)) throw std::invalid_argument("grad_check: step must be positive");
  for (const Tensor& p : params) {
    if (!p.requires_grad()) throw std::invalid_argument("grad_check: parameter does not require grad");
  }

  const float f0 = detail::evaluate_scalar(f);
  const float f1 = detail::evaluate_scalar(f);
  if (std::memcmp(&f0, &f1, sizeof(float)) != 0) {
    throw NondeterministicFunction("grad_check: two evaluations at the same point differ (" + std::to_string(f0) +
                                   " vs " + std::to_string(f1) + ")");
  }

  std::vector<std::vector<float>> analytic;
  {
    Graph graph;
    Graph::Scope scope(graph);
    for (Tensor& p : params) p.zero_grad();
    Tensor loss = f();
    if (loss.on_graph()) graph.backward(loss);
    for (Tensor& p : params) {
      if (p.has_grad())
        analytic.emplace_back(p.grad().begin(), p.grad().end());
      else
        analytic.emplace_back(p.numel(), 0.0f);
      p.zero_grad();
    }
  }

  GradCheckResult result;
  Rng rng(options.seed);
  const double h = options.step;
  for (std::size_t t = 0; t < params.size(); ++t) {
    Tensor& p = params[t];
    auto values = p.mutable_data();
    for (std::size_t i : detail::probe_indices(p.numel(), options.max_coords_per_tensor, rng)) {
      const float saved = values[i];
      values[i] = saved + options.step;
      const double plus = detail::evaluate_scalar(f);
      values[i] = saved - options.step;
      const double minus = detail::evaluate_scalar(f);
      values[i] = saved;
      const double numeric = (plus - minus) / (2.0 * h);
      const double a = analytic[t][i];
      const double rel = std::fabs(a - numeric) / std::max({1.0, std::fabs(a), std::fabs(numeric)});
      ++result.coordinates;
      if (result.worst.empty() || rel > result.max_rel_error) {
        result.max_rel_error = rel;
        result.worst = std::to_string(t) + "[" + std::to_string(i) + "]";
        result.worst_analytic = a;
        result.worst_numeric = numeric;
      }
    }
  }
  return result;
}

inline double grad_check(const std::function<Tensor()>& f, const Tensor& param, float step = 1e-3f) {
  return grad_check(f, std::vector<Tensor>{param}, GradCheckOptions{step, 0, 0}).max_rel_error;
}

}  // namespace transcrowd
