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

#include <cstdio>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "seqvr/core/autograd.hpp"
#include "seqvr/core/ops.hpp"
#include "seqvr/core/rng.hpp"

namespace testutil {

/// Central-difference check of d(scalar f)/d(leaf) against the autograd
/// result. `build` must construct the graph from the given leaf each call.
/// Returns the max relative error over all leaf elements (normalized by
/// max(|analytic|, |numeric|, floor)).
inline double grad_check(
    const std::function<seqvr::Var<double>(const seqvr::Var<double>&)>& build,
    const seqvr::Tensor<double>& leaf_value, double eps = 1e-6, double floor = 1e-6) {
  using namespace seqvr;
  Var<double> leaf = Var<double>::leaf(leaf_value);
  Var<double> loss = build(leaf);
  GradStore<double> store;
  backward(loss, store);
  const Tensor<double>* analytic = store.find(leaf.node().get());
  Tensor<double> zero(leaf_value.shape());
  if (analytic == nullptr) analytic = &zero;

  double max_rel = 0.0;
  for (std::int64_t i = 0; i < leaf_value.numel(); ++i) {
    Tensor<double> plus = leaf_value, minus = leaf_value;
    plus.at(i) += eps;
    minus.at(i) -= eps;
    const double fp = build(Var<double>::constant(plus)).value().at(0);
    const double fm = build(Var<double>::constant(minus)).value().at(0);
    const double numeric = (fp - fm) / (2.0 * eps);
    const double a = analytic->at(i);
    const double denom = std::max({std::abs(a), std::abs(numeric), floor});
    max_rel = std::max(max_rel, std::abs(a - numeric) / denom);
  }
  return max_rel;
}

inline seqvr::Tensor<double> random_tensor(std::vector<int> shape, seqvr::Rng& rng, double lo,
                                           double hi) {
  seqvr::Tensor<double> t(std::move(shape));
  rng.fill_uniform(t, lo, hi);
  return t;
}

/// Unique scratch directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("seqvr_test_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::string str() const { return path_.string(); }

 private:
  std::filesystem::path path_;
};

}  // namespace testutil
