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

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "seqvr/core/ops.hpp"
#include "seqvr/core/rng.hpp"

namespace seqvr {

/// Named parameter leaves in registration order. Registration order is part
/// of the determinism contract: the optimizer and the checkpoint writer both
/// iterate it.
template <typename T>
class ParamSet {
 public:
  Var<T>& add(const std::string& name, Tensor<T> init) {
    for (const auto& p : params_)
      require(p.first != name, "duplicate parameter name: " + name);
    params_.emplace_back(name, Var<T>(std::move(init), /*requires_grad=*/true));
    return params_.back().second;
  }

  std::size_t size() const { return params_.size(); }
  const std::string& name(std::size_t i) const { return params_[i].first; }
  Var<T>& param(std::size_t i) { return params_[i].second; }
  const Var<T>& param(std::size_t i) const { return params_[i].second; }

  Var<T>* find(const std::string& name) {
    for (auto& p : params_)
      if (p.first == name) return &p.second;
    return nullptr;
  }

  std::int64_t total_elements() const {
    std::int64_t n = 0;
    for (const auto& p : params_) n += p.second.value().numel();
    return n;
  }

  bool all_finite() const {
    for (const auto& p : params_)
      if (!p.second.value().all_finite()) return false;
    return true;
  }

  /// 64-bit FNV-1a over the raw parameter bytes, in registration order.
  std::uint64_t checksum() const {
    std::uint64_t h = 1469598103934665603ULL;
    for (const auto& p : params_) {
      const auto& t = p.second.value();
      const unsigned char* bytes = reinterpret_cast<const unsigned char*>(t.data());
      const std::size_t n = static_cast<std::size_t>(t.numel()) * sizeof(T);
      for (std::size_t i = 0; i < n; ++i) {
        h ^= bytes[i];
        h *= 1099511628211ULL;
      }
    }
    return h;
  }

  void copy_values_from(const ParamSet& other) {
    require(size() == other.size(), "copy_values_from: parameter count mismatch");
    for (std::size_t i = 0; i < params_.size(); ++i) {
      require(params_[i].first == other.params_[i].first, "copy_values_from: name mismatch");
      params_[i].second.mutable_value() = other.params_[i].second.value();
    }
  }

 private:
  std::vector<std::pair<std::string, Var<T>>> params_;
};

namespace init {

/// Xavier/Glorot normal for a [Co,Ci,Kh,Kw] conv weight.
template <typename T>
Tensor<T> xavier_conv(std::vector<int> shape, Rng& rng) {
  Tensor<T> w(shape);
  const double fan_in = static_cast<double>(shape[1]) * shape[2] * shape[3];
  const double fan_out = static_cast<double>(shape[0]) * shape[2] * shape[3];
  const double stddev = std::sqrt(2.0 / (fan_in + fan_out));
  rng.fill_normal(w, 0.0, stddev);
  return w;
}

template <typename T>
Tensor<T> zeros(std::vector<int> shape) {
  return Tensor<T>(std::move(shape));
}

}  // namespace init

enum class WeightInit { kXavier, kZero };

/// 3x3-style convolution layer. Construction registers weight (and bias) in
/// the owning ParamSet; forward works on Var or Tensor inputs.
template <typename T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(ParamSet<T>& params, const std::string& name, int in_ch, int out_ch, int k, int stride,
         Rng& rng, WeightInit w_init = WeightInit::kXavier, bool bias = true,
         T bias_value = T(0)) {
    stride_ = stride;
    pad_ = (k - 1) / 2;
    Tensor<T> w = (w_init == WeightInit::kZero)
                      ? init::zeros<T>({out_ch, in_ch, k, k})
                      : init::xavier_conv<T>({out_ch, in_ch, k, k}, rng);
    weight_ = &params.add(name + "/w", std::move(w));
    if (bias) {
      Tensor<T> b({out_ch}, bias_value);
      bias_ = &params.add(name + "/b", std::move(b));
    }
  }

  template <typename V>
  V forward(const V& x) const {
    if (bias_ != nullptr)
      return conv2d(x, as_operand<V, T>(*weight_), as_operand<V, T>(*bias_), stride_, pad_);
    return conv2d(x, as_operand<V, T>(*weight_), stride_, pad_);
  }

  const Var<T>& weight() const { return *weight_; }
  bool has_bias() const { return bias_ != nullptr; }

 private:
  Var<T>* weight_ = nullptr;
  Var<T>* bias_ = nullptr;
  int stride_ = 1;
  int pad_ = 0;
};

}  // namespace seqvr
