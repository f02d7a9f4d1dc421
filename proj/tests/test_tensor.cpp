#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "core/tensor.hpp"
#include "test_util.hpp"

using namespace lfsum;
using lfsum::testing::check_gradients;
using lfsum::testing::random_tensor;
using lfsum::testing::rel_err;

namespace {

void clear_tapes() {
  TapeT<float>::active().clear();
  TapeT<double>::active().clear();
}

}  // namespace

TEST_CASE("matmul identity leaves the matrix unchanged") {
  clear_tapes();
  auto eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  auto a = Tensor::from_data({2, 2}, {3.5f, -2, 7, 0.25f});
  auto out = matmul(eye, a);
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) CHECK(out.at(i, j) == a.at(i, j));
}

TEST_CASE("matmul zero right operand gives zeros") {
  clear_tapes();
  auto a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  auto z = Tensor::zeros({2, 1});
  auto out = matmul(a, z);
  CHECK(out.at(0, 0) == 0.0f);
  CHECK(out.at(1, 0) == 0.0f);
}

TEST_CASE("matmul hand-checked product") {
  clear_tapes();
  auto a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  auto b = Tensor::from_data({2, 1}, {5, 6});
  auto out = matmul(a, b);
  CHECK(out.at(0, 0) == doctest::Approx(17).epsilon(1e-6));
  CHECK(out.at(1, 0) == doctest::Approx(39).epsilon(1e-6));
}

TEST_CASE("matmul shape mismatch names both shapes") {
  clear_tapes();
  auto a = Tensor::zeros({2, 3});
  auto b = Tensor::zeros({4, 5});
  try {
    matmul(a, b);
    FAIL("expected a shape error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::shape);
    CHECK(std::string(e.what()).find("[2x3]") != std::string::npos);
    CHECK(std::string(e.what()).find("[4x5]") != std::string::npos);
  }
}

TEST_CASE("matmul associativity on random triples") {
  clear_tapes();
  std::mt19937_64 rng(11);
  for (int rep = 0; rep < 20; ++rep) {
    auto a = random_tensor<float>({4, 5}, rng);
    auto b = random_tensor<float>({5, 3}, rng);
    auto c = random_tensor<float>({3, 6}, rng);
    auto left = matmul(matmul(a, b), c);
    auto right = matmul(a, matmul(b, c));
    for (size_t i = 0; i < left.numel(); ++i)
      CHECK(std::abs(left.data()[i] - right.data()[i]) <= 1e-5);
  }
}

TEST_CASE("softmax of a constant row is uniform") {
  clear_tapes();
  auto x = Tensor::from_data({1, 3}, {0.7f, 0.7f, 0.7f});
  auto p = softmax_rows(x);
  for (int j = 0; j < 3; ++j) CHECK(p.at(0, j) == doctest::Approx(1.0 / 3).epsilon(1e-6));
}

TEST_CASE("softmax with one masked survivor is one-hot") {
  clear_tapes();
  auto x = Tensor::from_data({1, 2}, {-4.2f, 55.0f});
  BoolMat mask(1, 2, false);
  mask.at(0, 0) = 1;  // y masked out
  auto p = softmax_rows(x, &mask);
  CHECK(p.at(0, 0) == 1.0f);
  CHECK(p.at(0, 1) == 0.0f);
}

TEST_CASE("softmax hand-evaluated two-way split") {
  // e/(e+1) = 0.731058..., 1/(e+1) = 0.268941...
  clear_tapes();
  auto x = Tensor::from_data({1, 2}, {1.0f, 0.0f});
  auto p = softmax_rows(x);
  CHECK(std::abs(p.at(0, 0) - 0.7311f) <= 1e-4);
  CHECK(std::abs(p.at(0, 1) - 0.2689f) <= 1e-4);
}

TEST_CASE("softmax rejects a fully masked row") {
  clear_tapes();
  auto x = Tensor::zeros({2, 2});
  BoolMat mask(2, 2, true);
  mask.at(1, 0) = 0;
  mask.at(1, 1) = 0;
  CHECK_THROWS_AS(softmax_rows(x, &mask), Error);
}

TEST_CASE("softmax rows sum to one and shift invariance holds") {
  clear_tapes();
  std::mt19937_64 rng(5);
  for (int rep = 0; rep < 50; ++rep) {
    auto x = random_tensor<float>({4, 7}, rng, -3.0f, 3.0f);
    auto p = softmax_rows(x);
    auto shifted = x.clone_detached();
    for (auto& v : shifted.data()) v += 13.25f;
    auto q = softmax_rows(shifted);
    for (int i = 0; i < 4; ++i) {
      double sum = 0;
      for (int j = 0; j < 7; ++j) sum += p.at(i, j);
      CHECK(std::abs(sum - 1.0) <= 1e-6);
      for (int j = 0; j < 7; ++j) CHECK(std::abs(p.at(i, j) - q.at(i, j)) <= 1e-6);
    }
  }
}

TEST_CASE("backward of sum is all ones") {
  clear_tapes();
  auto x = Tensor::from_data({2, 3}, {1, -2, 3, 0.5f, 4, -7}).set_requires_grad(true);
  auto loss = sum_all(x);
  Tape::active().backward(loss);
  for (float g : x.grad()) CHECK(g == 1.0f);
  Tape::active().clear();
}

TEST_CASE("backward of sum of squares is 2x") {
  clear_tapes();
  auto x = Tensor::from_data({2}, {1, 2}).set_requires_grad(true);
  auto loss = sum_all(mul(x, x));
  Tape::active().backward(loss);
  CHECK(x.grad()[0] == doctest::Approx(2).epsilon(1e-6));
  CHECK(x.grad()[1] == doctest::Approx(4).epsilon(1e-6));
  Tape::active().clear();
}

TEST_CASE("second backward without reset is an error") {
  clear_tapes();
  auto x = Tensor::from_data({2}, {1, 2}).set_requires_grad(true);
  auto loss = sum_all(x);
  Tape::active().backward(loss);
  try {
    Tape::active().backward(loss);
    FAIL("expected a state error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::state);
  }
  Tape::active().clear();
}

TEST_CASE("backward rejects non-scalar and detached losses") {
  clear_tapes();
  auto x = Tensor::from_data({2}, {1, 2}).set_requires_grad(true);
  auto y = add(x, x);
  CHECK_THROWS_AS(Tape::active().backward(y), Error);   // non-scalar
  auto leaf = Tensor::scalar(3.0f).set_requires_grad(true);
  CHECK_THROWS_AS(Tape::active().backward(leaf), Error);  // no producing op
  Tape::active().clear();
}

TEST_CASE("finite differences of linear and quadratic maps") {
  clear_tapes();
  auto x = Tensor::from_data({2, 2}, {0.3f, -1, 2, 0.125f});
  auto fd = finite_difference_grad<float>(
      [](const Tensor& t) {
        double acc = 0;
        for (float v : t.data()) acc += v;
        return acc;
      },
      x, 1e-3);
  for (float g : fd.data()) CHECK(std::abs(g - 1.0f) <= 1e-6);

  auto x3 = Tensor::scalar(3.0f);
  auto fd2 = finite_difference_grad<float>(
      [](const Tensor& t) { return double(t.data()[0]) * double(t.data()[0]); }, x3,
      1e-3);
  CHECK(std::abs(fd2.data()[0] - 6.0f) <= 1e-5);
  CHECK(fd2.numel() == 1);
  CHECK(finite_difference_grad<float>([](const Tensor&) { return 0.0; }, x3, 1e-3)
            .numel() == 1);
  CHECK_THROWS_AS(finite_difference_grad<float>(
                      [](const Tensor&) { return 0.0; }, x3, 0.0),
                  Error);
}

// Backward rules for every differentiable op against the finite-difference
// oracle, instantiated in double so the oracle itself is clean.
TEST_CASE("gradients match finite differences per op") {
  clear_tapes();
  std::mt19937_64 rng(42);
  using D = double;
  const double eps = 1e-3, tol = 1e-4;

  SUBCASE("add/sub/mul/scale") {
    check_gradients<D>(
        [](std::vector<TensorT<D>>& in) {
          return sum_all(mul(add(in[0], in[1]), sub(in[0], scale(in[1], 0.7))));
        },
        {random_tensor<D>({3, 4}, rng), random_tensor<D>({3, 4}, rng)}, eps, tol);
  }
  SUBCASE("matmul both sides") {
    check_gradients<D>(
        [](std::vector<TensorT<D>>& in) { return sum_all(matmul(in[0], in[1])); },
        {random_tensor<D>({4, 3}, rng), random_tensor<D>({3, 5}, rng)}, eps, tol);
  }
  SUBCASE("matmul_nt both sides") {
    check_gradients<D>(
        [](std::vector<TensorT<D>>& in) {
          auto s = matmul_nt(in[0], in[1]);
          return sum_all(mul(s, s));
        },
        {random_tensor<D>({4, 3}, rng), random_tensor<D>({5, 3}, rng)}, eps, tol);
  }
  SUBCASE("softmax with mask") {
    BoolMat mask(3, 5, true);
    mask.at(0, 2) = 0;
    mask.at(2, 0) = 0;
    mask.at(2, 4) = 0;
    auto weights = random_tensor<D>({3, 5}, rng);
    check_gradients<D>(
        [mask, weights](std::vector<TensorT<D>>& in) {
          return sum_all(mul(softmax_rows(in[0], &mask), weights));
        },
        {random_tensor<D>({3, 5}, rng)}, eps, tol);
  }
  SUBCASE("gelu") {
    check_gradients<D>(
        [](std::vector<TensorT<D>>& in) { return sum_all(gelu(in[0])); },
        {random_tensor<D>({4, 4}, rng, -2.0, 2.0)}, eps, tol);
  }
  SUBCASE("layer norm x, gamma, beta") {
    check_gradients<D>(
        [](std::vector<TensorT<D>>& in) {
          auto w = layer_norm_rows(in[0], in[1], in[2]);
          return sum_all(mul(w, w));
        },
        {random_tensor<D>({3, 6}, rng), random_tensor<D>({6}, rng, 0.5, 1.5),
         random_tensor<D>({6}, rng)},
        eps, tol);
  }
  SUBCASE("embedding, slices, concat, bias broadcast") {
    std::vector<int> ids = {1, 0, 3, 1};
    check_gradients<D>(
        [&ids](std::vector<TensorT<D>>& in) {
          auto e = embedding_rows(in[0], ids);
          auto left = slice_cols(e, 0, 2);
          auto right = slice_cols(e, 2, 2);
          auto cat = concat_cols<D>({right, left});
          auto rows = slice_rows(cat, 1, 3);
          return mean_all(add_row_broadcast(rows, in[1]));
        },
        {random_tensor<D>({4, 4}, rng), random_tensor<D>({4}, rng)}, eps, tol);
  }
  SUBCASE("composite graph") {
    check_gradients<D>(
        [](std::vector<TensorT<D>>& in) {
          auto h = gelu(matmul(in[0], in[1]));
          auto p = softmax_rows(h);
          return mean_all(mul(p, matmul(in[0], in[1])));
        },
        {random_tensor<D>({4, 3}, rng), random_tensor<D>({3, 4}, rng)}, eps, tol);
  }
}

TEST_CASE("float backward tracks the float finite-difference oracle loosely") {
  // The float path quantizes the loss to 24-bit precision, so the oracle
  // carries noise around 1e-4 per entry; this guards against rule mixups, the
  // double suite above pins exactness.
  clear_tapes();
  std::mt19937_64 rng(7);
  auto a = random_tensor<float>({3, 3}, rng).set_requires_grad(true);
  auto b = random_tensor<float>({3, 3}, rng).set_requires_grad(true);
  auto loss = mean_all(gelu(matmul(a, b)));
  Tape::active().backward(loss);
  auto fd = finite_difference_grad<float>(
      [&](const Tensor&) {
        return double(mean_all(gelu(matmul(a, b))).value());
      },
      a, 1e-2);
  for (size_t i = 0; i < fd.numel(); ++i)
    CHECK(std::abs(double(a.grad()[i]) - double(fd.data()[i])) <= 2e-3);
  Tape::active().clear();
}

TEST_CASE("identical inputs give bit-identical outputs") {
  clear_tapes();
  std::mt19937_64 rng1(99), rng2(99);
  auto a1 = random_tensor<float>({6, 6}, rng1);
  auto a2 = random_tensor<float>({6, 6}, rng2);
  auto o1 = softmax_rows(matmul(a1, a1));
  auto o2 = softmax_rows(matmul(a2, a2));
  REQUIRE(o1.numel() == o2.numel());
  for (size_t i = 0; i < o1.numel(); ++i) CHECK(o1.data()[i] == o2.data()[i]);
}

TEST_CASE("tensor invariants: shape/data agreement and finite outputs") {
  clear_tapes();
  CHECK_THROWS_AS(Tensor::from_data({2, 2}, {1, 2, 3}), Error);
  CHECK_THROWS_AS(Tensor::zeros({0, 2}), Error);
  std::mt19937_64 rng(3);
  auto x = random_tensor<float>({5, 5}, rng, -30.0f, 30.0f);
  auto p = softmax_rows(x);
  auto h = gelu(matmul(p, x));
  for (float v : h.data()) CHECK(std::isfinite(v));
}
