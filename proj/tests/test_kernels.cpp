#include <algorithm>
#include <cstring>
#include <vector>

#include "doctest.h"
#include "fedpull/kernels.hpp"
#include "fedpull/rng.hpp"

using namespace fedpull;

namespace {

std::vector<float> random_vec(Rng& rng, std::size_t n) {
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(rng.uniform(-1.0, 1.0));
  return v;
}

bool bitwise_equal(const std::vector<float>& a, const std::vector<float>& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

}  // namespace

TEST_CASE("matmul: serial matches a naive triple loop, omp matches serial bitwise") {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 1 + rng.below(40), k = 1 + rng.below(40), m = 1 + rng.below(40);
    const auto x = random_vec(rng, n * k), w = random_vec(rng, k * m);
    std::vector<float> ys(n * m), yo(n * m);
    kernels::serial::matmul(x.data(), w.data(), ys.data(), n, k, m);
    kernels::omp::matmul(x.data(), w.data(), yo.data(), n, k, m);
    CHECK(bitwise_equal(ys, yo));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) {
        double s = 0;
        for (std::size_t p = 0; p < k; ++p) s += double(x[i * k + p]) * w[p * m + j];
        CHECK(ys[i * m + j] == doctest::Approx(s).epsilon(1e-4));
      }

    // x * w^T where wt holds w transposed.
    std::vector<float> wt(m * k);
    for (std::size_t p = 0; p < k; ++p)
      for (std::size_t j = 0; j < m; ++j) wt[j * k + p] = w[p * m + j];
    std::vector<float> zs(n * m), zo(n * m);
    kernels::serial::matmul_bt(x.data(), wt.data(), zs.data(), n, k, m);
    kernels::omp::matmul_bt(x.data(), wt.data(), zo.data(), n, k, m);
    CHECK(bitwise_equal(zs, zo));
    for (std::size_t i = 0; i < n * m; ++i) CHECK(zs[i] == doctest::Approx(ys[i]).epsilon(1e-4));
  }
}

TEST_CASE("matmul_at_acc accumulates x^T dy") {
  Rng rng(4);
  const std::size_t n = 7, k = 5, m = 3;
  const auto x = random_vec(rng, n * k), dy = random_vec(rng, n * m);
  std::vector<float> g(k * m, 1.0f);
  kernels::serial::matmul_at_acc(x.data(), dy.data(), g.data(), n, k, m);
  for (std::size_t p = 0; p < k; ++p)
    for (std::size_t j = 0; j < m; ++j) {
      double s = 1.0;
      for (std::size_t i = 0; i < n; ++i) s += double(x[i * k + p]) * dy[i * m + j];
      CHECK(g[p * m + j] == doctest::Approx(s).epsilon(1e-5));
    }
}

TEST_CASE("weighted_sum: serial and omp agree bitwise above the parallel cutoff") {
  Rng rng(5);
  for (std::size_t n : {std::size_t{10}, std::size_t{5000}, std::size_t{20000}}) {
    std::vector<std::vector<float>> in;
    std::vector<std::span<const float>> spans;
    std::vector<double> w;
    for (int c = 0; c < 4; ++c) {
      in.push_back(random_vec(rng, n));
      w.push_back(rng.uniform());
    }
    for (const auto& v : in) spans.emplace_back(v);
    std::vector<float> a(n), b(n);
    kernels::serial::weighted_sum(spans, w, a);
    kernels::omp::weighted_sum(spans, w, b);
    CHECK(bitwise_equal(a, b));
    double s = 0;
    for (int c = 0; c < 4; ++c) s += w[static_cast<std::size_t>(c)] * in[static_cast<std::size_t>(c)][n - 1];
    CHECK(a[n - 1] == static_cast<float>(s));
  }
}

TEST_CASE("rng helpers are deterministic and in range") {
  Rng a(9), b(9);
  for (int i = 0; i < 100; ++i) CHECK(a.next() == b.next());
  Rng r(1);
  for (int i = 0; i < 1000; ++i) {
    const auto x = r.below(7);
    CHECK(x < 7);
    const double u = r.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
  }
  std::vector<int> v{0, 1, 2, 3, 4, 5, 6, 7};
  Rng s(2);
  s.shuffle(std::span<int>(v));
  std::vector<int> sorted = v;
  std::sort(sorted.begin(), sorted.end());
  CHECK(sorted == std::vector<int>{0, 1, 2, 3, 4, 5, 6, 7});
  CHECK(mix_seed(1, 2) != mix_seed(2, 1));
}
