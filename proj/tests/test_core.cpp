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

#include <catch2/catch_amalgamated.hpp>

#include "seqvr/core/checkpoint.hpp"
#include "seqvr/core/nn.hpp"
#include "seqvr/core/ops.hpp"
#include "seqvr/core/optim.hpp"
#include "testutil.hpp"

using namespace seqvr;
using testutil::grad_check;
using testutil::random_tensor;

TEST_CASE("tensor basics") {
  Tensor<float> t({2, 3, 4}, 1.5f);
  CHECK(t.numel() == 24);
  CHECK(t(1, 2, 3) == 1.5f);
  t(0, 0, 0) = 2.0f;
  CHECK(t.max_value() == 2.0f);
  CHECK(t.all_finite());
  CHECK_THROWS_AS(Tensor<float>({0, 1}), Error);
}

TEST_CASE("autograd chain rule on elementwise graph") {
  // f = mean(tanh(x) * sigmoid(x) + x)
  Rng rng(11);
  auto x0 = random_tensor({3, 4, 5}, rng, -1.0, 1.0);
  const double err = grad_check(
      [](const Var<double>& x) { return mean_all(add(mul(tanh_op(x), sigmoid(x)), x)); }, x0);
  CHECK(err < 1e-7);
}

TEST_CASE("conv2d matches finite differences in x, w, b") {
  Rng rng(5);
  auto x0 = random_tensor({2, 6, 7}, rng, -1.0, 1.0);
  auto w0 = random_tensor({3, 2, 3, 3}, rng, -0.5, 0.5);
  auto b0 = random_tensor({3}, rng, -0.2, 0.2);

  SECTION("grad wrt input") {
    const double err = grad_check(
        [&](const Var<double>& x) {
          return mean_all(conv2d(x, Var<double>::constant(w0), Var<double>::constant(b0), 1, 1));
        },
        x0);
    CHECK(err < 1e-7);
  }
  SECTION("grad wrt weight, stride 2") {
    const double err = grad_check(
        [&](const Var<double>& w) {
          return mean_all(abs_op(conv2d(Var<double>::constant(x0), w, 2, 1)));
        },
        w0);
    CHECK(err < 1e-6);
  }
  SECTION("grad wrt bias") {
    const double err = grad_check(
        [&](const Var<double>& b) {
          return mean_all(conv2d(Var<double>::constant(x0), Var<double>::constant(w0), b, 1, 1));
        },
        b0);
    CHECK(err < 1e-8);
  }
}

TEST_CASE("warp with zero flow is the identity") {
  Rng rng(7);
  for (int trial = 0; trial < 16; ++trial) {
    auto x = random_tensor({3, 5 + trial % 4, 6 + trial % 3}, rng, 0.0, 1.0);
    Tensor<double> flow({2, x.dim(1), x.dim(2)});
    auto out = warp(x, flow, Border::kClamp);
    CHECK(bitwise_equal(out, x));
    auto outz = warp(x, flow, Border::kZeros);
    CHECK(bitwise_equal(outz, x));
  }
}

TEST_CASE("warp hand oracles on 1-D rows") {
  // row [10,20,30]/255, uniform flow (1,0), clamp -> [20,30,30]/255
  Tensor<double> row({1, 1, 3}, {10 / 255.0, 20 / 255.0, 30 / 255.0});
  Tensor<double> flow1({2, 1, 3}, {1, 1, 1, 0, 0, 0});
  auto w1 = warp(row, flow1, Border::kClamp);
  CHECK(w1.at(0) == Catch::Approx(20 / 255.0).margin(1e-12));
  CHECK(w1.at(1) == Catch::Approx(30 / 255.0).margin(1e-12));
  CHECK(w1.at(2) == Catch::Approx(30 / 255.0).margin(1e-12));

  // row [0,10]/255, flow (0.5,0), clamp -> [5,10]/255
  Tensor<double> row2({1, 1, 2}, {0.0, 10 / 255.0});
  Tensor<double> flow2({2, 1, 2}, {0.5, 0.5, 0, 0});
  auto w2 = warp(row2, flow2, Border::kClamp);
  CHECK(w2.at(0) == Catch::Approx(5 / 255.0).margin(1e-12));
  CHECK(w2.at(1) == Catch::Approx(10 / 255.0).margin(1e-12));
}

TEST_CASE("warp gradients match finite differences") {
  Rng rng(13);
  auto x0 = random_tensor({2, 6, 6}, rng, 0.0, 1.0);
  // Interior flows, away from the integer-lattice kinks of bilinear sampling.
  Tensor<double> f0({2, 6, 6});
  for (std::int64_t i = 0; i < f0.numel(); ++i) f0.at(i) = 0.3 + 0.25 * rng.uniform();

  for (Border border : {Border::kClamp, Border::kZeros}) {
    const double ex = grad_check(
        [&](const Var<double>& x) {
          return sum_all(warp(x, Var<double>::constant(f0), border));
        },
        x0);
    CHECK(ex < 1e-7);
    const double ef = grad_check(
        [&](const Var<double>& f) {
          return sum_all(mul(warp(Var<double>::constant(x0), f, border),
                             Var<double>::constant(x0)));
        },
        f0);
    CHECK(ef < 1e-4);
  }
}

TEST_CASE("softmax over channel axis") {
  Rng rng(3);
  auto x = random_tensor({5, 4, 4}, rng, -2.0, 2.0);
  auto sm = softmax_ch(x);
  for (int y = 0; y < 4; ++y)
    for (int xx = 0; xx < 4; ++xx) {
      double s = 0;
      for (int c = 0; c < 5; ++c) s += sm(c, y, xx);
      CHECK(s == Catch::Approx(1.0).margin(1e-12));
    }
  // shift invariance
  auto shifted = affine(x, 1.0, 3.7);
  CHECK(max_abs_diff(softmax_ch(shifted), sm) < 1e-12);
  // gradient
  const double err = grad_check(
      [&](const Var<double>& v) {
        return mean_all(mul(softmax_ch(v), Var<double>::constant(x)));
      },
      x);
  CHECK(err < 1e-6);
}

TEST_CASE("structure ops: concat, sum_channels, mul_bc, diff, shift") {
  Rng rng(17);
  auto a = random_tensor({2, 3, 4}, rng, -1, 1);
  auto b = random_tensor({3, 3, 4}, rng, -1, 1);
  auto cat = concat_ch<double>({a, b});
  CHECK(cat.dim(0) == 5);
  CHECK(cat(2, 1, 2) == b(0, 1, 2));

  const double e1 = grad_check(
      [&](const Var<double>& x) {
        auto c = concat_ch<double>({x, Var<double>::constant(b)});
        return mean_all(mul(c, c));
      },
      a);
  CHECK(e1 < 1e-6);

  const double e2 = grad_check(
      [&](const Var<double>& x) { return mean_all(abs_op(sum_channels(x))); }, b);
  CHECK(e2 < 1e-6);

  auto w = random_tensor({1, 3, 4}, rng, 0.1, 1.0);
  const double e3 = grad_check(
      [&](const Var<double>& x) { return mean_all(mul_bc(x, Var<double>::constant(w))); }, a);
  CHECK(e3 < 1e-8);
  const double e4 = grad_check(
      [&](const Var<double>& x) { return mean_all(mul_bc(Var<double>::constant(a), x)); }, w);
  CHECK(e4 < 1e-8);

  const double e5 =
      grad_check([&](const Var<double>& x) { return mean_all(abs_op(diff_x(x))); }, a);
  const double e6 =
      grad_check([&](const Var<double>& x) { return mean_all(abs_op(diff_y(x))); }, a);
  CHECK(e5 < 1e-6);
  CHECK(e6 < 1e-6);

  const double e7 = grad_check(
      [&](const Var<double>& x) {
        return mean_all(mul(shift2d(x, 1, -1), Var<double>::constant(a)));
      },
      a);
  CHECK(e7 < 1e-8);
}

TEST_CASE("upsample preserves constants and is linear") {
  Tensor<double> c({3, 4, 4}, 0.42);
  auto up = upsample_bilinear(c, 4);
  CHECK(up.dim(1) == 16);
  CHECK(max_abs_diff(up, Tensor<double>({3, 16, 16}, 0.42)) < 1e-12);

  Rng rng(31);
  auto x = random_tensor({2, 3, 3}, rng, -1, 1);
  const double err = grad_check(
      [&](const Var<double>& v) {
        auto u = upsample_bilinear(v, 2);
        return mean_all(mul(u, u));
      },
      x);
  CHECK(err < 1e-6);
}

TEST_CASE("pixel_shuffle layout and gradient") {
  Tensor<double> x({4, 1, 1}, {1, 2, 3, 4});
  auto y = pixel_shuffle(x, 2);
  CHECK(y.shape() == std::vector<int>{1, 2, 2});
  CHECK(y.at(0) == 1);  // (dy,dx) = (0,0)
  CHECK(y.at(1) == 2);  // (0,1)
  CHECK(y.at(2) == 3);  // (1,0)
  CHECK(y.at(3) == 4);

  Rng rng(19);
  auto v = random_tensor({8, 3, 2}, rng, -1, 1);
  const double err = grad_check(
      [&](const Var<double>& t) {
        auto u = pixel_shuffle(t, 2);
        return mean_all(mul(u, u));
      },
      v);
  CHECK(err < 1e-7);
}

TEST_CASE("remaining op gradients") {
  Rng rng(23);
  auto x = random_tensor({2, 4, 4}, rng, -1.0, 1.0);
  CHECK(grad_check([](const Var<double>& v) { return mean_all(relu(v)); }, x) < 1e-5);
  CHECK(grad_check([](const Var<double>& v) { return mean_all(leaky_relu(v, 0.1)); }, x) < 1e-5);
  CHECK(grad_check([](const Var<double>& v) { return mean_all(charbonnier(v, 1e-3)); }, x) < 1e-5);
  CHECK(grad_check([](const Var<double>& v) { return sum_all(scale(v, 2.5)); }, x) < 1e-9);
  CHECK(grad_check(
            [&](const Var<double>& v) {
              return mean_all(sub(v, Var<double>::constant(x)));
            },
            random_tensor({2, 4, 4}, rng, -1, 1)) < 1e-9);
  // scalar broadcast
  auto s0 = Tensor<double>::scalar(0.7);
  CHECK(grad_check(
            [&](const Var<double>& s) {
              return mean_all(mul_scalar(Var<double>::constant(x), s));
            },
            s0) < 1e-8);
}

TEST_CASE("requires_grad pruning keeps constant graphs closed") {
  Tensor<float> x({1, 2, 2}, 0.5f);
  Var<float> a = Var<float>::constant(x);
  Var<float> b = mul(a, a);
  CHECK_FALSE(b.requires_grad());
  CHECK(b.node()->parents.empty());
  Var<float> l = Var<float>::leaf(x);
  Var<float> c = mul(l, a);
  CHECK(c.requires_grad());
  CHECK(c.node()->parents.size() == 2);
}

TEST_CASE("adam minimizes a quadratic deterministically") {
  auto run = [] {
    ParamSet<float> params;
    Rng rng(42);
    Tensor<float> init({4});
    rng.fill_uniform(init, -2.0, 2.0);
    Var<float>& theta = params.add("theta", init);
    OptimConfig cfg;
    Optimizer<float> opt(params, cfg, [](const std::string&) { return 0.05; });
    for (int i = 0; i < 300; ++i) {
      Var<float> loss = mean_all(mul(theta, theta));
      GradStore<float> store;
      backward(loss, store);
      opt.step(store);
    }
    return params.param(0).value();
  };
  auto t1 = run();
  auto t2 = run();
  CHECK(bitwise_equal(t1, t2));
  for (int i = 0; i < 4; ++i) CHECK(std::abs(t1.at(i)) < 1e-2);
}

TEST_CASE("checkpoint round trip with optimizer state") {
  testutil::TempDir tmp("ckpt");
  ParamSet<float> params;
  Rng rng(9);
  Tensor<float> w({3, 2, 3, 3});
  rng.fill_normal(w, 0.0, 0.1);
  params.add("layer/w", w);
  params.add("layer/b", Tensor<float>({3}, 0.25f));
  OptimConfig cfg;
  Optimizer<float> opt(params, cfg, [](const std::string&) { return 1e-3; });
  // one step so moments are non-trivial
  GradStore<float> store;
  Var<float> loss = mean_all(mul(params.param(0), params.param(0)));
  backward(loss, store);
  opt.step(store);

  nlohmann::ordered_json arch{{"kind", "test"}, {"c", 3}};
  const std::string path = tmp.str() + "/m.bin";
  write_checkpoint(path, snapshot_params(params, arch, &opt));

  ParamSet<float> loaded;
  loaded.add("layer/w", Tensor<float>({3, 2, 3, 3}));
  loaded.add("layer/b", Tensor<float>({3}));
  Optimizer<float> opt2(loaded, cfg, [](const std::string&) { return 1e-3; });
  Checkpoint ckpt = read_checkpoint(path);
  validate_arch(ckpt, arch, path);
  restore_params(ckpt, loaded, &opt2);
  CHECK(bitwise_equal(loaded.param(0).value(), params.param(0).value()));
  CHECK(bitwise_equal(loaded.param(1).value(), params.param(1).value()));
  CHECK(opt2.step_count() == 1);
  CHECK(bitwise_equal(opt2.moment1(0), opt.moment1(0)));
  CHECK(loaded.checksum() == params.checksum());

  nlohmann::ordered_json wrong{{"kind", "test"}, {"c", 4}};
  CHECK_THROWS_AS(validate_arch(ckpt, wrong, path), Error);
}

TEST_CASE("gradients accumulate across shared subexpressions") {
  // f = mean(x*x + x*x) -> df/dx = 4x/n
  Tensor<double> x0({1, 2, 2}, {0.5, -1.0, 2.0, 0.25});
  Var<double> x = Var<double>::leaf(x0);
  auto sq = mul(x, x);
  auto loss = mean_all(add(sq, sq));
  GradStore<double> store;
  backward(loss, store);
  const Tensor<double>* g = store.find(x.node().get());
  REQUIRE(g != nullptr);
  for (int i = 0; i < 4; ++i) CHECK(g->at(i) == Catch::Approx(4.0 * x0.at(i) / 4.0).margin(1e-12));
}
