#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "bevplan/rng.hpp"
#include "bevplan/tensor.hpp"

using namespace bevplan;

TEST_CASE("shape bookkeeping and row-major indexing") {
  Tensor<float> t({2, 3, 4});
  CHECK(t.size() == 24);
  CHECK(t.rank() == 3);
  t(1, 2, 3) = 7.5f;
  CHECK(t[1 * 12 + 2 * 4 + 3] == 7.5f);

  // row-major flattening is bijective with flat offsets
  int64_t flat = 0;
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 4; ++k) {
        t(i, j, k) = static_cast<float>(flat);
        CHECK(t[flat] == static_cast<float>(flat));
        ++flat;
      }
}

TEST_CASE("constructor rejects mismatched data length") {
  CHECK_THROWS_AS(Tensor<float>({2, 2}, std::vector<float>{1, 2, 3}), ShapeError);
}

TEST_CASE("eigen views share storage") {
  Tensor<double> t({2, 2}, {1, 2, 3, 4});
  auto m = t.mat(2, 2);
  CHECK(m(0, 1) == 2.0);
  m(1, 0) = -5.0;
  CHECK(t(1, 0) == -5.0);
  CHECK_THROWS_AS(t.mat(3, 2), ShapeError);
}

TEST_CASE("cast preserves values") {
  Tensor<float> t({3}, {1.5f, -2.0f, 0.25f});
  auto d = t.cast<double>();
  CHECK(d[1] == -2.0);
}

TEST_CASE("rng determinism and ranges") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

  Rng r(7);
  double mean = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    double u = r.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    mean += u;
  }
  CHECK(mean / n == doctest::Approx(0.5).epsilon(0.02));

  double m2 = 0;
  mean = 0;
  for (int i = 0; i < n; ++i) {
    double x = r.normal();
    mean += x;
    m2 += x * x;
  }
  mean /= n;
  CHECK(mean == doctest::Approx(0.0).epsilon(0.05));
  CHECK(m2 / n - mean * mean == doctest::Approx(1.0).epsilon(0.05));
}

TEST_CASE("seed_combine decorrelates streams") {
  Rng a(seed_combine(1, 2));
  Rng b(seed_combine(1, 3));
  CHECK(a.next_u64() != b.next_u64());
}
