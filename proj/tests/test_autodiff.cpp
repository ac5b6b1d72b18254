#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "bevplan/autodiff.hpp"
#include "bevplan/conv.hpp"
#include "bevplan/nn.hpp"
#include "bevplan/rng.hpp"
#include "oracle_utils.hpp"

using namespace bevplan;
using bevplan::testing::max_rel_grad_error;

namespace {

template <typename S>
Var<S> random_param(Rng& rng, Shape shape, S scale = S(1)) {
  Tensor<S> t(std::move(shape));
  rng.fill_normal(t, S(0), scale);
  return Var<S>(std::move(t), true);
}

}  // namespace

TEST_CASE("matmul against identity returns the input") {
  Tensor<float> a({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor<float> eye({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  auto r = matmul(constant(a), constant(eye));
  for (int64_t i = 0; i < 6; ++i) CHECK(r.value()[i] == a[i]);
}

TEST_CASE("matmul rejects incompatible shapes with a report") {
  auto a = constant(Tensor<float>({2, 3}));
  auto b = constant(Tensor<float>({2, 3}));
  CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("(2,3)"), ShapeError);
}

TEST_CASE("softmax of a zero vector is uniform") {
  auto r = softmax(constant(Tensor<float>({1, 4})));
  for (int i = 0; i < 4; ++i) CHECK(r.value()[i] == doctest::Approx(0.25).epsilon(1e-6));
}

TEST_CASE("cross entropy of a confident correct prediction") {
  // independent high-precision oracle
  long double expected =
      bevplan::testing::lse_oracle({10.0L, -10.0L}) - 10.0L;  // ~2.061e-9
  Tensor<double> logits({1, 2}, {10.0, -10.0});
  auto loss = cross_entropy(constant(logits), {0});
  CHECK(loss.item() == doctest::Approx(static_cast<double>(expected)).epsilon(1e-6));

  // the float path keeps precision through the log1p tail
  Tensor<float> logits_f({1, 2}, {10.0f, -10.0f});
  auto loss_f = cross_entropy(constant(logits_f), {0});
  CHECK(loss_f.item() == doctest::Approx(static_cast<double>(expected)).epsilon(1e-3));
}

TEST_CASE("cross entropy rejects out-of-vocabulary targets") {
  auto logits = constant(Tensor<float>({1, 4}));
  CHECK_THROWS_AS(cross_entropy(logits, {4}), ShapeError);
}

TEST_CASE("backward of sum gives ones") {
  Var<float> x(Tensor<float>({3}, {5, -1, 2}), true);
  backward(sum(x));
  for (int i = 0; i < 3; ++i) CHECK(x.grad()[i] == 1.0f);
}

TEST_CASE("backward of mse against zero target gives x") {
  // d/dx mean(x^2) over 2 elements = x
  Var<float> x(Tensor<float>({2}, {3, 4}), true);
  backward(mse(x, constant(Tensor<float>({2}))));
  CHECK(x.grad()[0] == doctest::Approx(3.0f));
  CHECK(x.grad()[1] == doctest::Approx(4.0f));
}

TEST_CASE("backward requires a scalar loss") {
  Var<float> x(Tensor<float>({3}), true);
  auto y = relu(x);
  CHECK_THROWS_AS(backward(y), AutodiffError);
}

TEST_CASE("repeated backward accumulates until cleared") {
  Var<float> x(Tensor<float>({2}, {1, 1}), true);
  backward(sum(x));
  backward(sum(x));
  CHECK(x.grad()[0] == 2.0f);
  x.zero_grad();
  backward(sum(x));
  CHECK(x.grad()[0] == 1.0f);
}

TEST_CASE("sum of two losses equals sum of individual gradients") {
  Rng rng(3);
  Var<double> x(Tensor<double>({4}), true);
  rng.fill_normal(x.value_mut());
  auto t1 = constant(Tensor<double>::full({4}, 0.3));
  auto t2 = constant(Tensor<double>::full({4}, -1.1));

  backward(add(mse(x, t1), l1(x, t2)));
  Tensor<double> combined = x.grad();

  x.zero_grad();
  backward(mse(x, t1));
  Tensor<double> g1 = x.grad();
  x.zero_grad();
  backward(l1(x, t2));
  for (int i = 0; i < 4; ++i)
    CHECK(combined[i] == doctest::Approx(g1[i] + x.grad()[i]).epsilon(1e-12));
}

TEST_CASE("straight-through passes gradients unchanged") {
  Rng rng(11);
  Var<double> e(Tensor<double>({2, 3}), true);
  rng.fill_normal(e.value_mut());
  Tensor<double> q({2, 3});
  rng.fill_normal(q);

  auto st = straight_through(e, q);
  for (int64_t i = 0; i < 6; ++i) CHECK(st.value()[i] == q[i]);
  auto target = constant(Tensor<double>::full({2, 3}, 0.5));
  backward(mse(st, target));
  Tensor<double> grad_via_st = e.grad();

  // same downstream loss applied to a direct variable holding q
  Var<double> qv(q, true);
  backward(mse(qv, target));
  for (int64_t i = 0; i < 6; ++i)
    CHECK(grad_via_st[i] == doctest::Approx(qv.grad()[i]).epsilon(1e-12));
}

// ---------------------------------------------------------------------------
// Finite-difference suite (64-bit verification mode), per-op
// ---------------------------------------------------------------------------

TEST_CASE("finite differences: dense ops") {
  Rng rng(17);
  const double h = 1e-5, tol = 1e-6;

  SUBCASE("matmul + add_rowvec") {
    auto a = random_param<double>(rng, {3, 4});
    auto w = random_param<double>(rng, {4, 2});
    auto b = random_param<double>(rng, {2});
    auto t = constant(Tensor<double>::full({3, 2}, 0.7));
    auto fn = [&] { return mse(add_rowvec(matmul(a, w), b), t); };
    CHECK(max_rel_grad_error<double>(fn, {a, w, b}, h) < tol);
  }
  SUBCASE("elementwise mul / sub / scale / add_scalar") {
    auto a = random_param<double>(rng, {5});
    auto b = random_param<double>(rng, {5});
    auto fn = [&] { return mean(mul(add_scalar(scale(a, 1.7), 0.3), sub(b, a))); };
    CHECK(max_rel_grad_error<double>(fn, {a, b}, h) < tol);
  }
  SUBCASE("nonlinearities") {
    auto x = random_param<double>(rng, {12});
    auto fn = [&] { return mean(add(relu(x), add(silu(x), sigmoid(x)))); };
    CHECK(max_rel_grad_error<double>(fn, {x}, h) < tol);
  }
  SUBCASE("layer_norm") {
    auto x = random_param<double>(rng, {3, 6});
    auto g = random_param<double>(rng, {6});
    auto b = random_param<double>(rng, {6});
    auto t = constant(Tensor<double>::full({3, 6}, 0.1));
    auto fn = [&] { return mse(layer_norm(x, g, b), t); };
    CHECK(max_rel_grad_error<double>(fn, {x, g, b}, h) < tol);
  }
  SUBCASE("softmax") {
    auto x = random_param<double>(rng, {2, 5});
    auto t = constant(Tensor<double>::full({2, 5}, 0.2));
    auto fn = [&] { return mse(softmax(x), t); };
    CHECK(max_rel_grad_error<double>(fn, {x}, h) < tol);
  }
  SUBCASE("cross_entropy mean and sum") {
    auto x = random_param<double>(rng, {4, 6});
    std::vector<int> targets{1, 0, 5, 3};
    auto fn_mean = [&] { return cross_entropy(x, targets, Reduction::Mean); };
    CHECK(max_rel_grad_error<double>(fn_mean, {x}, h) < tol);
    auto fn_sum = [&] { return cross_entropy(x, targets, Reduction::Sum); };
    CHECK(max_rel_grad_error<double>(fn_sum, {x}, h) < tol);
  }
  SUBCASE("embedding") {
    auto table = random_param<double>(rng, {7, 3});
    std::vector<int> ids{2, 2, 0, 6};
    auto t = constant(Tensor<double>::full({4, 3}, -0.4));
    auto fn = [&] { return mse(embedding(table, ids), t); };
    CHECK(max_rel_grad_error<double>(fn, {table}, h) < tol);
  }
  SUBCASE("concat + narrow + reshape + transpose") {
    auto a = random_param<double>(rng, {2, 3});
    auto b = random_param<double>(rng, {2, 2});
    auto fn = [&] {
      auto c = concat<double>({a, b}, 1);             // (2,5)
      auto n = narrow(c, 1, 1, 3);                    // (2,3)
      auto r = reshape(transpose2d(n), {2, 3});       // (2,3)
      return mean(mul(r, r));
    };
    CHECK(max_rel_grad_error<double>(fn, {a, b}, h) < tol);
  }
  SUBCASE("reductions") {
    auto x = random_param<double>(rng, {4, 3});
    auto t = constant(Tensor<double>::full({3}, 0.9));
    auto fn = [&] { return add(mse(mean_rows(x), t), scale(sum(x), 0.01)); };
    CHECK(max_rel_grad_error<double>(fn, {x}, h) < tol);
  }
  SUBCASE("l1") {
    auto x = random_param<double>(rng, {6});
    auto t = constant(Tensor<double>::full({6}, 0.123));
    auto fn = [&] { return l1(x, t); };
    CHECK(max_rel_grad_error<double>(fn, {x}, h) < tol);
  }
  SUBCASE("gather_cells") {
    auto x = random_param<double>(rng, {2, 3, 4, 4});
    std::vector<CellIndex> cells{{0, 1, 2}, {1, 3, 0}, {0, 0, 0}};
    auto t = constant(Tensor<double>::full({3, 3}, 0.5));
    auto fn = [&] { return mse(gather_cells(x, cells), t); };
    CHECK(max_rel_grad_error<double>(fn, {x}, h) < tol);
  }
}

TEST_CASE("finite differences: convolutions") {
  Rng rng(23);
  const double h = 1e-5, tol = 1e-6;

  SUBCASE("conv2d stride 2 pad 1") {
    auto x = random_param<double>(rng, {2, 3, 6, 6});
    auto w = random_param<double>(rng, {4, 3, 3, 3});
    auto b = random_param<double>(rng, {4});
    auto t = constant(Tensor<double>::full({2, 4, 3, 3}, 0.2));
    auto fn = [&] { return mse(conv2d(x, w, b, 2, 1), t); };
    CHECK(max_rel_grad_error<double>(fn, {x, w, b}, h) < tol);
  }
  SUBCASE("conv2d_transpose stride 2 pad 1 kernel 4") {
    auto x = random_param<double>(rng, {2, 3, 3, 3});
    auto w = random_param<double>(rng, {3, 2, 4, 4});
    auto b = random_param<double>(rng, {2});
    auto t = constant(Tensor<double>::full({2, 2, 6, 6}, -0.1));
    auto fn = [&] { return mse(conv2d_transpose(x, w, b, 2, 1), t); };
    CHECK(max_rel_grad_error<double>(fn, {x, w, b}, h) < tol);
  }
  SUBCASE("output extent formula") {
    CHECK(conv_out_extent(64, 3, 2, 1) == 32);
    CHECK(conv_out_extent(5, 3, 1, 0) == 3);
    CHECK(conv_transpose_out_extent(8, 4, 2, 1) == 16);
    CHECK(conv_transpose_out_extent(32, 4, 2, 1) == 64);
  }
  SUBCASE("transpose inverts conv geometry") {
    for (int in : {8, 16, 25, 32})
      CHECK(conv_transpose_out_extent(conv_out_extent(2 * in, 4, 2, 1), 4, 2, 1) == 2 * in);
  }
}

TEST_CASE("random 2-layer network matches finite differences in 32-bit mode") {
  Rng rng(29);
  auto w1 = random_param<float>(rng, {5, 8}, 0.5f);
  auto b1 = random_param<float>(rng, {8}, 0.1f);
  auto w2 = random_param<float>(rng, {8, 3}, 0.5f);
  auto b2 = random_param<float>(rng, {3}, 0.1f);
  Tensor<float> xin({4, 5});
  rng.fill_normal(xin);
  Tensor<float> tgt({4, 3});
  rng.fill_normal(tgt);
  auto fn = [&] {
    auto h1 = relu(add_rowvec(matmul(constant(xin), w1), b1));
    auto out = add_rowvec(matmul(h1, w2), b2);
    return mse(out, constant(tgt));
  };
  CHECK(max_rel_grad_error<float>(fn, {w1, b1, w2, b2}, 1e-3, 1e-2) < 1e-3);
}

TEST_CASE("forward and backward are deterministic under a fixed seed") {
  auto run = [] {
    Rng rng(123);
    auto w = random_param<float>(rng, {6, 6});
    Tensor<float> x({2, 6});
    rng.fill_normal(x);
    auto loss = mean(silu(matmul(constant(x), w)));
    backward(loss);
    std::vector<float> out(w.grad().raw());
    out.push_back(loss.item());
    return out;
  };
  auto a = run();
  auto b = run();
  CHECK(a == b);
}
