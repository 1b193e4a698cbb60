// Copyright 2026 seqvr authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "seqvr/core/nn.hpp"

namespace seqvr {

enum class OptimKind { kAdam, kSgd };

struct OptimConfig {
  OptimKind kind = OptimKind::kAdam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // 0 disables clipping.
  double clip_global_norm = 0.0;
};

/// First/second-moment adaptive optimizer (plain SGD selectable) over one
/// ParamSet, with per-parameter learning rates via a name-based selector.
/// Iteration order and accumulation order are fixed, so updates are
/// bit-reproducible for identical gradients.
template <typename T>
class Optimizer {
 public:
  using LrSelector = std::function<double(const std::string&)>;

  Optimizer(ParamSet<T>& params, OptimConfig cfg, LrSelector lr_for)
      : params_(&params), cfg_(cfg), lr_for_(std::move(lr_for)) {
    if (cfg_.kind == OptimKind::kAdam) {
      m_.reserve(params.size());
      v_.reserve(params.size());
      for (std::size_t i = 0; i < params.size(); ++i) {
        m_.push_back(Tensor<T>(params.param(i).value().shape()));
        v_.push_back(Tensor<T>(params.param(i).value().shape()));
      }
    }
  }

  std::int64_t step_count() const { return t_; }
  void set_step_count(std::int64_t t) { t_ = t; }

  Tensor<T>& moment1(std::size_t i) { return m_[i]; }
  Tensor<T>& moment2(std::size_t i) { return v_[i]; }
  bool has_state() const { return cfg_.kind == OptimKind::kAdam; }

  /// Applies one update from `grads`, scaled by `lr_scale` (the decay
  /// schedule multiplier). Missing gradients are treated as zero.
  void step(const GradStore<T>& grads, double lr_scale = 1.0) {
    ++t_;
    double scale = 1.0;
    if (cfg_.clip_global_norm > 0.0) {
      double sq = 0.0;
      for (std::size_t i = 0; i < params_->size(); ++i) {
        const Tensor<T>* g = grads.find(params_->param(i).node().get());
        if (g == nullptr) continue;
        for (std::int64_t j = 0; j < g->numel(); ++j) {
          const double x = static_cast<double>(g->at(j));
          sq += x * x;
        }
      }
      const double norm = std::sqrt(sq);
      if (norm > cfg_.clip_global_norm) scale = cfg_.clip_global_norm / norm;
    }
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_->size(); ++i) {
      const Tensor<T>* g = grads.find(params_->param(i).node().get());
      if (g == nullptr) continue;
      const double lr = lr_for_(params_->name(i)) * lr_scale;
      Tensor<T>& p = params_->param(i).mutable_value();
      if (cfg_.kind == OptimKind::kSgd) {
        for (std::int64_t j = 0; j < p.numel(); ++j)
          p.at(j) -= static_cast<T>(lr * scale * static_cast<double>(g->at(j)));
        continue;
      }
      Tensor<T>& m = m_[i];
      Tensor<T>& v = v_[i];
      for (std::int64_t j = 0; j < p.numel(); ++j) {
        const double gj = scale * static_cast<double>(g->at(j));
        const double mj = cfg_.beta1 * static_cast<double>(m.at(j)) + (1.0 - cfg_.beta1) * gj;
        const double vj = cfg_.beta2 * static_cast<double>(v.at(j)) + (1.0 - cfg_.beta2) * gj * gj;
        m.at(j) = static_cast<T>(mj);
        v.at(j) = static_cast<T>(vj);
        const double mhat = mj / bc1;
        const double vhat = vj / bc2;
        p.at(j) -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + cfg_.eps));
      }
    }
  }

 private:
  ParamSet<T>* params_;
  OptimConfig cfg_;
  LrSelector lr_for_;
  std::int64_t t_ = 0;
  std::vector<Tensor<T>> m_;
  std::vector<Tensor<T>> v_;
};

/// Cosine decay from 1.0 down to floor_ratio over total steps; constant
/// schedule when total <= 0.
inline double cosine_lr_scale(std::int64_t step, std::int64_t total, double floor_ratio) {
  if (total <= 0) return 1.0;
  const double t = std::min(1.0, static_cast<double>(step) / static_cast<double>(total));
  const double c = 0.5 * (1.0 + std::cos(3.14159265358979323846 * t));
  return floor_ratio + (1.0 - floor_ratio) * c;
}

}  // namespace seqvr
