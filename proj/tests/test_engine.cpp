#include <gtest/gtest.h>

#include <random>

#include "scaledet/graph.hpp"
#include "scaledet/nn.hpp"
#include "scaledet/tensor.hpp"
#include "test_util.hpp"

namespace scaledet {
namespace {

using testutil::max_grad_rel_error;

constexpr double kGradTol = 1e-4;

Tensor random_tensor(std::vector<int> shape, unsigned seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  return Tensor::uniform(std::move(shape), rng, lo, hi);
}

TEST(TensorTest, ShapeAndAccess) {
  Tensor t({2, 3});
  t.at(1, 2) = 5.0;
  EXPECT_EQ(t.size(), 6);
  EXPECT_DOUBLE_EQ(t.at(1, 2), 5.0);
  EXPECT_DOUBLE_EQ(t[5], 5.0);
  EXPECT_THROW(Tensor({0, 3}), std::invalid_argument);
  EXPECT_THROW(t.reshaped({4, 2}), std::invalid_argument);
}

TEST(GraphTest, BackwardThroughSharedSubexpression) {
  // f = (x + x) * x = 2x^2, df/dx = 4x
  Var x = leaf(Tensor::scalar(3.0));
  Var f = mul(add(x, x), x);
  x->ensure_grad();
  x->grad.fill(0.0);
  backward(f);
  EXPECT_DOUBLE_EQ(f->value[0], 18.0);
  EXPECT_DOUBLE_EQ(x->grad[0], 12.0);
}

TEST(GraphTest, ConstantsDoNotTrackGradients) {
  Var c = constant(Tensor::scalar(2.0));
  Var x = leaf(Tensor::scalar(1.0));
  Var f = mul(c, x);
  EXPECT_TRUE(f->requires_grad);
  Var g = mul(c, c);
  EXPECT_FALSE(g->requires_grad);
}

TEST(GraphTest, ElementwiseGradients) {
  Var a = leaf(random_tensor({3, 4}, 1));
  Var b = leaf(random_tensor({3, 4}, 2, 0.5, 2.0));
  auto check = [&](const std::function<Var()>& f) {
    EXPECT_LT(max_grad_rel_error(f, {a, b}), kGradTol);
  };
  check([&] { return sum_all(mul(add(a, b), sub(a, b))); });
  check([&] { return sum_all(div(a, b)); });
  check([&] { return sum_all(exp_op(scale(a, 0.5))); });
  check([&] { return sum_all(log_op(b)); });
  check([&] { return sum_all(sigmoid(a)); });
  check([&] { return sum_all(softplus(a)); });
  check([&] { return sum_all(sqrt_op(b)); });
  check([&] { return sum_all(mul(relu(add_scalar(a, 0.01)), b)); });
  check([&] { return sum_all(abs_op(add_scalar(a, 0.01))); });
  check([&] { return sum_all(min_ew(a, b)); });
  check([&] { return sum_all(max_ew(a, b)); });
  check([&] { return sum_all(clamp_min(a, 0.1)); });
}

TEST(GraphTest, ShapeOpGradients) {
  Var a = leaf(random_tensor({3, 4}, 3));
  Var b = leaf(random_tensor({2, 4}, 4));
  EXPECT_LT(max_grad_rel_error([&] { return sum_all(mul(reshape(a, {4, 3}), reshape(a, {4, 3}))); },
                               {a}),
            kGradTol);
  EXPECT_LT(max_grad_rel_error([&] { return sum_all(transpose(a)); }, {a}), kGradTol);
  EXPECT_LT(max_grad_rel_error([&] { return sum_all(mul(slice_cols(a, 1, 3), slice_cols(a, 0, 2))); },
                               {a}),
            kGradTol);
  EXPECT_LT(max_grad_rel_error([&] { return sum_all(mul(concat_rows({a, b}), concat_rows({a, b}))); },
                               {a, b}),
            kGradTol);
  EXPECT_LT(max_grad_rel_error(
                [&] { return sum_all(mul(concat_cols({a, a}), concat_cols({a, a}))); }, {a}),
            kGradTol);
  EXPECT_LT(max_grad_rel_error([&] { return sum_all(mul(gather_rows(a, {2, 0, 0, 1}),
                                                        gather_rows(a, {1, 1, 2, 0}))); },
                               {a}),
            kGradTol);
}

TEST(GraphTest, BroadcastAndReductionGradients) {
  Var x = leaf(random_tensor({3, 4}, 5));
  Var v = leaf(random_tensor({4}, 6));
  Var s = leaf(random_tensor({3}, 7));
  auto check = [&](const std::function<Var()>& f) {
    EXPECT_LT(max_grad_rel_error(f, {x, v, s}), kGradTol);
  };
  check([&] { return sum_all(mul(add_rowvec(x, v), x)); });
  check([&] { return sum_all(mul(mul_rowvec(x, v), x)); });
  check([&] { return sum_all(mul(scale_rows(x, s), x)); });
  check([&] { return sum_all(mul(sub_colvec(x, s), x)); });
  check([&] { return sum_all(mul(reshape(sum_cols(x), {3, 1}), reshape(s, {3, 1}))); });
  check([&] { return sum_all(mul(sum_rows(x), v)); });
  check([&] { return sum_all(mul(sum_groups(x, 3), constant(random_tensor({1, 4}, 8)))); });
  check([&] { return mean_all(mul(x, x)); });
  check([&] { return sum_all(mul(stack_scalars({mean_all(x), sum_all(mul(v, v))}),
                                 constant(random_tensor({2}, 9)))); });
}

TEST(GraphTest, MatmulMatchesEigenAndGradients) {
  Var a = leaf(random_tensor({3, 5}, 10));
  Var b = leaf(random_tensor({5, 2}, 11));
  Var c = matmul(a, b);
  double expect = 0.0;
  for (int k = 0; k < 5; ++k) expect += a->value.at(1, k) * b->value.at(k, 0);
  EXPECT_NEAR(c->value.at(1, 0), expect, 1e-12);
  EXPECT_LT(max_grad_rel_error([&] { return sum_all(mul(matmul(a, b), matmul(a, b))); }, {a, b}),
            kGradTol);
}

TEST(GraphTest, SoftmaxRowsPropertiesAndGradient) {
  Var a = leaf(random_tensor({4, 5}, 12, -2.0, 2.0));
  Var p = softmax_rows(a);
  for (int i = 0; i < 4; ++i) {
    double s = 0.0;
    for (int j = 0; j < 5; ++j) {
      EXPECT_GE(p->value.at(i, j), 0.0);
      s += p->value.at(i, j);
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  Var shifted = softmax_rows(add_scalar(a, 3.7));
  for (int i = 0; i < p->value.size(); ++i)
    EXPECT_NEAR(p->value[i], shifted->value[i], 1e-12);
  Tensor w = random_tensor({4, 5}, 13);
  EXPECT_LT(max_grad_rel_error([&] { return sum_all(mul(softmax_rows(a), constant(w))); }, {a}),
            kGradTol);
}

TEST(GraphTest, LayerNormGradient) {
  Var x = leaf(random_tensor({3, 6}, 14));
  Var gamma = leaf(random_tensor({6}, 15, 0.5, 1.5));
  Var beta = leaf(random_tensor({6}, 16));
  Tensor w = random_tensor({3, 6}, 17);
  EXPECT_LT(max_grad_rel_error(
                [&] { return sum_all(mul(layer_norm_rows(x, gamma, beta), constant(w))); },
                {x, gamma, beta}),
            kGradTol);
}

TEST(GraphTest, BilinearSampleValuesAndGradients) {
  // 2x3 map, C=1, values = row * 10 + col.
  Tensor map({2, 3, 1});
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 3; ++j) map.at(i, j, 0) = 10.0 * i + j;
  Var m = leaf(map);
  Var px = leaf(Tensor::from({0.5, 2.0, -5.0}, {3}));
  Var py = leaf(Tensor::from({0.0, 0.5, 0.25}, {3}));
  Var s = bilinear_sample(m, px, py);
  EXPECT_NEAR(s->value.at(0, 0), 0.5, 1e-12);    // midway between cells 0 and 1
  EXPECT_NEAR(s->value.at(1, 0), 7.0, 1e-12);    // midway down the last column
  EXPECT_NEAR(s->value.at(2, 0), 2.5, 1e-12);    // clamped to the left border
  // The interpolant is piecewise bilinear; check gradients away from the
  // integer-coordinate kinks.
  Var gx = leaf(Tensor::from({0.4, 1.7, 0.3}, {3}));
  Var gy = leaf(Tensor::from({0.3, 0.6, 0.75}, {3}));
  Tensor w = random_tensor({3, 1}, 18);
  EXPECT_LT(max_grad_rel_error([&] { return sum_all(mul(bilinear_sample(m, gx, gy), constant(w))); },
                               {m, gx, gy}),
            kGradTol);
}

TEST(GraphTest, MaskMeanSampleGradient) {
  Var m = leaf(random_tensor({4, 4, 2}, 19));
  Var cx = leaf(Tensor::from({1.3, 2.6}, {2}));
  Var cy = leaf(Tensor::from({1.7, 0.4}, {2}));
  Tensor w = random_tensor({2, 2}, 20);
  EXPECT_LT(max_grad_rel_error(
                [&] { return sum_all(mul(mask_mean_sample(m, cx, cy, 3, 2), constant(w))); },
                {m, cx, cy}),
            kGradTol);
  EXPECT_THROW(mask_mean_sample(m, cx, cy, 2, 1), std::invalid_argument);
}

TEST(GraphTest, Conv2dShapeAndGradient) {
  Var x = leaf(random_tensor({6, 8, 2}, 21));
  Var w = leaf(random_tensor({3, 3, 2, 4}, 22, -0.5, 0.5));
  Var b = leaf(random_tensor({4}, 23));
  Var y = conv2d(x, w, b, 2);
  EXPECT_EQ(y->value.dim(0), 3);
  EXPECT_EQ(y->value.dim(1), 4);
  EXPECT_EQ(y->value.dim(2), 4);
  Tensor mask = random_tensor({3 * 4 * 4}, 24);
  EXPECT_LT(max_grad_rel_error(
                [&] {
                  Var out = conv2d(x, w, b, 2);
                  return sum_all(mul(reshape(out, {3 * 4 * 4}), constant(mask)));
                },
                {x, w, b}),
            kGradTol);
}

TEST(GraphTest, Conv2dStrideOneCrossCheck) {
  // 1x1 kernel, stride 1 reduces to a per-pixel linear map.
  Var x = leaf(random_tensor({3, 3, 2}, 25));
  Var w = leaf(random_tensor({1, 1, 2, 3}, 26));
  Var b = leaf(Tensor::zeros({3}));
  Var y = conv2d(x, w, b, 1);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int co = 0; co < 3; ++co) {
        double expect = 0.0;
        for (int ci = 0; ci < 2; ++ci) expect += x->value.at(i, j, ci) * w->value.at(0, 0, ci, co);
        EXPECT_NEAR(y->value.at(i, j, co), expect, 1e-12);
      }
}

TEST(NnTest, LinearAndMlpGradients) {
  ParamStore store;
  std::mt19937_64 rng(27);
  Linear lin(store, "lin", 4, 3, rng);
  Mlp mlp(store, "mlp", 4, 8, 2, rng);
  Var x = leaf(random_tensor({5, 4}, 28));
  std::vector<Var> leaves = {x, lin.weight, lin.bias, mlp.fc1.weight, mlp.fc1.bias,
                             mlp.fc2.weight, mlp.fc2.bias};
  EXPECT_LT(max_grad_rel_error(
                [&] { return sum_all(mul(lin.forward(x), lin.forward(x))); }, leaves),
            kGradTol);
  EXPECT_LT(max_grad_rel_error([&] { return sum_all(mlp.forward(x)); }, leaves), kGradTol);
}

TEST(NnTest, BatchNormTrainingStatsAndGradient) {
  ParamStore store;
  BatchNorm bn(store, "bn", 3);
  Var x = leaf(random_tensor({6, 3}, 29, -2.0, 2.0));
  Var y = bn.forward(x, true);
  // Normalized output has near-zero mean and near-unit variance per channel.
  for (int j = 0; j < 3; ++j) {
    double mean = 0.0;
    for (int i = 0; i < 6; ++i) mean += y->value.at(i, j);
    EXPECT_NEAR(mean / 6.0, 0.0, 1e-9);
  }
  Tensor w = random_tensor({6, 3}, 30);
  // Re-runs update running stats, which does not affect training-mode output.
  EXPECT_LT(max_grad_rel_error(
                [&] { return sum_all(mul(bn.forward(x, true), constant(w))); },
                {x, bn.gamma, bn.beta}),
            kGradTol);
}

TEST(NnTest, BatchNormEvalUsesRunningStats) {
  ParamStore store;
  BatchNorm bn(store, "bn", 2);
  (*bn.running_mean)[0] = 1.0;
  (*bn.running_mean)[1] = -1.0;
  (*bn.running_var)[0] = 4.0;
  (*bn.running_var)[1] = 0.25;
  Var x = constant(Tensor::from({3.0, 0.0}, {1, 2}));
  Var y = bn.forward(x, false);
  EXPECT_NEAR(y->value.at(0, 0), (3.0 - 1.0) / std::sqrt(4.0 + 1e-5), 1e-9);
  EXPECT_NEAR(y->value.at(0, 1), 1.0 / std::sqrt(0.25 + 1e-5), 1e-9);
  // Single-row training batches also fall back to running statistics.
  Var z = bn.forward(x, true);
  EXPECT_NEAR(z->value.at(0, 0), y->value.at(0, 0), 1e-12);
}

TEST(NnTest, MultiHeadAttentionGradient) {
  ParamStore store;
  std::mt19937_64 rng(31);
  MultiHeadAttention mha(store, "mha", 8, 2, rng);
  Var x = leaf(random_tensor({4, 8}, 32));
  std::vector<Var> leaves = {x};
  for (const auto& [name, p] : store.params()) leaves.push_back(p);
  Tensor w = random_tensor({4, 8}, 33);
  EXPECT_LT(max_grad_rel_error(
                [&] { return sum_all(mul(mha.forward(x, x, x), constant(w))); }, leaves),
            kGradTol);
}

TEST(NnTest, AdamConvergesOnQuadratic) {
  ParamStore store;
  Var p = store.add("p", Tensor::from({5.0, -3.0}, {2}));
  AdamOptimizer opt(0.1);
  for (int step = 0; step < 300; ++step) {
    store.zero_grad();
    Var loss = sum_all(mul(p, p));
    backward(loss);
    opt.step(store);
  }
  EXPECT_NEAR(p->value[0], 0.0, 1e-3);
  EXPECT_NEAR(p->value[1], 0.0, 1e-3);
}

TEST(NnTest, SinusoidalEncodingShapeAndRange) {
  Tensor pe = sinusoidal_position_encoding(3, 5, 8);
  EXPECT_EQ(pe.dim(0), 15);
  EXPECT_EQ(pe.dim(1), 8);
  EXPECT_LE(pe.max_abs(), 1.0 + 1e-12);
}

}  // namespace
}  // namespace scaledet
