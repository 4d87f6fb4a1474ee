#include <cmath>
#include <functional>

#include "doctest.h"
#include "support/gradcheck.hpp"
#include "xaqa/rng.hpp"
#include "xaqa/tensor.hpp"

using namespace xaqa;

namespace {

Tensor random_matrix(Rng& rng, std::size_t m, std::size_t n, bool requires_grad = true) {
  std::vector<double> v(m * n);
  for (double& x : v) x = rng.gaussian();
  return Tensor::from_values({m, n}, std::move(v), requires_grad);
}

// FD check for a scalar-valued op chain over one parameter tensor.
void check_unary(const std::function<Tensor(const Tensor&)>& op, Tensor input,
                 double tolerance = 1e-4) {
  Graph graph;
  {
    Graph::Scope scope(graph);
    graph.backward(ops::sum(op(input)));
  }
  std::vector<std::pair<std::string, Tensor>> params{{"x", input}};
  auto loss = [&] { return ops::sum(op(input)).value(); };
  auto result = testsupport::check_gradients(params, loss, tolerance);
  CHECK_MESSAGE(result.ok, "worst ", result.worst_rel, " at ", result.worst_where);
}

}  // namespace

TEST_SUITE("tensor") {

TEST_CASE("matmul identity") {
  Tensor eye = Tensor::matrix(2, 2, {1, 0, 0, 1});
  Tensor m = Tensor::matrix(2, 2, {3.5, -1, 2, 7});
  Tensor c = ops::matmul(eye, m);
  for (std::size_t i = 0; i < 4; ++i) CHECK(c[i] == m[i]);
}

TEST_CASE("matmul hand product") {
  // [[1,2],[3,4]] x [[1],[1]] = [[3],[7]]
  Tensor a = Tensor::matrix(2, 2, {1, 2, 3, 4});
  Tensor b = Tensor::matrix(2, 1, {1, 1});
  Tensor c = ops::matmul(a, b);
  CHECK(c.at(0, 0) == 3.0);
  CHECK(c.at(1, 0) == 7.0);
}

TEST_CASE("matmul shape mismatch names both shapes") {
  Tensor a = Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6});
  Tensor b = Tensor::matrix(2, 2, {1, 2, 3, 4});
  CHECK_THROWS_WITH_AS(ops::matmul(a, b), doctest::Contains("[2x3]"), ShapeError);
}

TEST_CASE("matmul gradient matches finite differences") {
  Rng rng(11);
  Tensor a = random_matrix(rng, 3, 3);
  Tensor b = random_matrix(rng, 3, 3);
  Graph graph;
  {
    Graph::Scope scope(graph);
    graph.backward(ops::sum(ops::matmul(a, b)));
  }
  std::vector<std::pair<std::string, Tensor>> params{{"a", a}, {"b", b}};
  auto loss = [&] { return ops::sum(ops::matmul(a, b)).value(); };
  auto result = testsupport::check_gradients(params, loss, 1e-6);
  CHECK_MESSAGE(result.ok, "worst ", result.worst_rel, " at ", result.worst_where);
}

TEST_CASE("softmax rows") {
  SUBCASE("symmetry") {
    Tensor p = ops::softmax_rows(Tensor::matrix(1, 3, {0, 0, 0}));
    for (std::size_t j = 0; j < 3; ++j) CHECK(p[j] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  }
  SUBCASE("scalar oracle for [1,2,3]") {
    // Independent route: direct exp / sum of exps, no max subtraction.
    const double e1 = std::exp(1.0), e2 = std::exp(2.0), e3 = std::exp(3.0);
    const double z = e1 + e2 + e3;
    Tensor p = ops::softmax_rows(Tensor::matrix(1, 3, {1, 2, 3}));
    CHECK(p[0] == doctest::Approx(e1 / z).epsilon(1e-12));
    CHECK(p[1] == doctest::Approx(e2 / z).epsilon(1e-12));
    CHECK(p[2] == doctest::Approx(e3 / z).epsilon(1e-12));
    CHECK(p[0] == doctest::Approx(0.09003057317038046).epsilon(1e-9));
    CHECK(p[1] == doctest::Approx(0.24472847105479764).epsilon(1e-9));
    CHECK(p[2] == doctest::Approx(0.66524095577482190).epsilon(1e-9));
  }
  SUBCASE("max subtraction prevents overflow") {
    Tensor p = ops::softmax_rows(Tensor::matrix(1, 3, {1000, 0, 0}));
    CHECK(p[0] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(p[1] == doctest::Approx(0.0));
    CHECK(std::isfinite(p[0]));
  }
  SUBCASE("NaN input rejected") {
    CHECK_THROWS_AS(ops::softmax_rows(Tensor::matrix(1, 2, {std::nan(""), 0.0})), NumericError);
  }
  SUBCASE("rows sum to one on random input") {
    Rng rng(5);
    Tensor p = ops::softmax_rows(random_matrix(rng, 7, 13, false));
    for (std::size_t i = 0; i < 7; ++i) {
      double total = 0.0;
      for (std::size_t j = 0; j < 13; ++j) {
        total += p.at(i, j);
        CHECK(p.at(i, j) >= 0.0);
        CHECK(p.at(i, j) <= 1.0);
      }
      CHECK(total == doctest::Approx(1.0).epsilon(1e-9));
    }
  }
  SUBCASE("gradient") {
    Rng rng(17);
    check_unary([](const Tensor& x) { return ops::softmax_rows(x); }, random_matrix(rng, 4, 6));
  }
}

TEST_CASE("cross entropy") {
  SUBCASE("matching one-hot is ~zero") {
    Tensor probs = Tensor::vector({0, 1, 0});
    Tensor target = Tensor::vector({0, 1, 0});
    CHECK(ops::cross_entropy(probs, target).value() <= 1e-11);
  }
  SUBCASE("uniform vs one-hot gives log 4") {
    Tensor probs = Tensor::vector({0.25, 0.25, 0.25, 0.25});
    Tensor target = Tensor::vector({0, 0, 1, 0});
    CHECK(ops::cross_entropy(probs, target).value() ==
          doctest::Approx(1.3862943611198906).epsilon(1e-9));
  }
  SUBCASE("soft target closed form gives log 2") {
    Tensor probs = Tensor::vector({0.5, 0.5});
    Tensor target = Tensor::vector({0.5, 0.5});
    CHECK(ops::cross_entropy(probs, target).value() ==
          doctest::Approx(0.6931471805599453).epsilon(1e-9));
  }
  SUBCASE("length mismatch") {
    CHECK_THROWS_AS(ops::cross_entropy(Tensor::vector({1, 0}), Tensor::vector({1, 0, 0})),
                    ShapeError);
  }
  SUBCASE("gradient w.r.t. probs") {
    Rng rng(23);
    std::vector<double> raw(6);
    for (double& x : raw) x = 0.05 + rng.uniform();
    Tensor probs = Tensor::vector(raw, true);
    Tensor target = Tensor::vector({0.1, 0.2, 0.3, 0.1, 0.2, 0.1});
    Graph graph;
    {
      Graph::Scope scope(graph);
      graph.backward(ops::cross_entropy(probs, target));
    }
    std::vector<std::pair<std::string, Tensor>> params{{"probs", probs}};
    auto loss = [&] { return ops::cross_entropy(probs, target).value(); };
    auto result = testsupport::check_gradients(params, loss);
    CHECK_MESSAGE(result.ok, "worst ", result.worst_rel, " at ", result.worst_where);
  }
}

TEST_CASE("backward basics") {
  SUBCASE("sum gradient is ones") {
    Tensor x = Tensor::vector({1, 2, 3, 4, 5}, true);
    Graph graph;
    {
      Graph::Scope scope(graph);
      graph.backward(ops::sum(x));
    }
    for (double g : x.grad()) CHECK(g == 1.0);
  }
  SUBCASE("product rule on scalars") {
    Tensor x = Tensor::scalar(3.0, true);
    Tensor y = Tensor::scalar(-2.5, true);
    Graph graph;
    {
      Graph::Scope scope(graph);
      graph.backward(ops::mul(x, y));
    }
    CHECK(x.grad()[0] == -2.5);
    CHECK(y.grad()[0] == 3.0);
  }
  SUBCASE("non-scalar loss rejected") {
    Tensor x = Tensor::vector({1, 2}, true);
    Graph graph;
    Graph::Scope scope(graph);
    CHECK_THROWS_AS(graph.backward(x), ContractError);
  }
  SUBCASE("two consumers accumulate") {
    // loss = sum(x*x) + sum(3x): d/dx = 2x + 3
    Tensor x = Tensor::vector({1.5, -2.0}, true);
    Graph graph;
    {
      Graph::Scope scope(graph);
      Tensor loss = ops::add(ops::sum(ops::mul(x, x)), ops::sum(ops::scale(x, 3.0)));
      graph.backward(loss);
    }
    CHECK(x.grad()[0] == doctest::Approx(2.0 * 1.5 + 3.0).epsilon(1e-12));
    CHECK(x.grad()[1] == doctest::Approx(2.0 * -2.0 + 3.0).epsilon(1e-12));
  }
}

TEST_CASE("layer norm") {
  SUBCASE("constant row maps to bias") {
    Tensor x = Tensor::matrix(1, 4, {7, 7, 7, 7});
    Tensor gain = Tensor::matrix(1, 4, {1, 1, 1, 1});
    Tensor bias = Tensor::matrix(1, 4, {0, 0, 0, 0});
    Tensor y = ops::layer_norm(x, gain, bias);
    for (std::size_t j = 0; j < 4; ++j) CHECK(y[j] == doctest::Approx(0.0));
  }
  SUBCASE("gradient through x, gain and bias") {
    Rng rng(31);
    Tensor x = random_matrix(rng, 3, 8);
    Tensor gain = random_matrix(rng, 1, 8);
    Tensor bias = random_matrix(rng, 1, 8);
    Graph graph;
    {
      Graph::Scope scope(graph);
      graph.backward(
          ops::sum(ops::mul(ops::layer_norm(x, gain, bias), ops::layer_norm(x, gain, bias))));
    }
    std::vector<std::pair<std::string, Tensor>> params{{"x", x}, {"gain", gain}, {"bias", bias}};
    auto loss = [&] {
      Tensor y = ops::layer_norm(x, gain, bias);
      return ops::sum(ops::mul(y, y)).value();
    };
    auto result = testsupport::check_gradients(params, loss);
    CHECK_MESSAGE(result.ok, "worst ", result.worst_rel, " at ", result.worst_where);
  }
}

TEST_CASE("gelu and relu") {
  CHECK(ops::gelu(Tensor::scalar(0.0)).value() == 0.0);
  CHECK(ops::gelu(Tensor::scalar(3.0)).value() == doctest::Approx(3.0).epsilon(1e-2));
  CHECK(ops::relu(Tensor::vector({-1, 2})).values()[0] == 0.0);
  CHECK(ops::relu(Tensor::vector({-1, 2})).values()[1] == 2.0);

  Rng rng(41);
  check_unary([](const Tensor& x) { return ops::gelu(x); }, random_matrix(rng, 3, 5));
  // keep relu inputs away from the kink at 0
  std::vector<double> v(12);
  for (double& x : v) x = (rng.chance(0.5) ? 1.0 : -1.0) * (0.05 + rng.uniform());
  check_unary([](const Tensor& x) { return ops::relu(x); },
              Tensor::from_values({3, 4}, std::move(v), true));
}

TEST_CASE("embedding gather") {
  Tensor table = Tensor::matrix(4, 2, {0, 1, 10, 11, 20, 21, 30, 31});
  Tensor row = ops::embedding_gather(table, {3});
  CHECK(row.at(0, 0) == 30.0);
  CHECK(row.at(0, 1) == 31.0);
  CHECK_THROWS_AS(ops::embedding_gather(table, {4}), ContractError);

  SUBCASE("duplicate ids accumulate gradient") {
    Tensor param = Tensor::from_values({3, 2}, {1, 2, 3, 4, 5, 6}, true);
    Graph graph;
    {
      Graph::Scope scope(graph);
      graph.backward(ops::sum(ops::embedding_gather(param, {1, 1, 2})));
    }
    CHECK(param.grad()[2] == 2.0);  // row 1 used twice
    CHECK(param.grad()[4] == 1.0);
  }
}

TEST_CASE("log transpose slice concat pick") {
  Rng rng(53);
  SUBCASE("log values and gradient") {
    std::vector<double> v(6);
    for (double& x : v) x = 0.1 + rng.uniform();
    Tensor t = Tensor::from_values({2, 3}, v, true);
    CHECK(ops::log(t)[0] == doctest::Approx(std::log(v[0])).epsilon(1e-12));
    CHECK_THROWS_AS(ops::log(Tensor::scalar(-1.0)), NumericError);
    check_unary([](const Tensor& x) { return ops::log(x); }, t);
  }
  SUBCASE("transpose round trip and gradient") {
    Tensor a = random_matrix(rng, 2, 5);
    Tensor t = ops::transpose(a);
    CHECK(t.rows() == 5);
    CHECK(t.at(3, 1) == a.at(1, 3));
    check_unary([](const Tensor& x) { return ops::transpose(x); }, a);
  }
  SUBCASE("slice and concat cols invert each other") {
    Tensor a = random_matrix(rng, 3, 6);
    Tensor left = ops::slice_cols(a, 0, 2);
    Tensor right = ops::slice_cols(a, 2, 6);
    Tensor back = ops::concat_cols({left, right});
    for (std::size_t i = 0; i < a.numel(); ++i) CHECK(back[i] == a[i]);
    check_unary([](const Tensor& x) { return ops::slice_cols(x, 1, 4); }, a);
  }
  SUBCASE("concat rows and pick_row gradients") {
    Tensor a = random_matrix(rng, 2, 4);
    Tensor b = random_matrix(rng, 3, 4);
    Tensor cat = ops::concat_rows({a, b});
    CHECK(cat.rows() == 5);
    CHECK(cat.at(3, 2) == b.at(1, 2));
    check_unary([](const Tensor& x) { return ops::pick_row(x, 1); }, a);
    Graph graph;
    {
      Graph::Scope scope(graph);
      graph.backward(ops::sum(ops::pick_row(ops::concat_rows({a, b}), 4)));
    }
    CHECK(b.grad()[2 * 4 + 1] == 1.0);  // cat row 4 is b row 2
    CHECK(a.grad()[0] == 0.0);
  }
  SUBCASE("add_rowvec broadcast and gradient") {
    Tensor a = random_matrix(rng, 3, 4);
    Tensor bias = random_matrix(rng, 1, 4);
    Tensor y = ops::add_rowvec(a, bias);
    CHECK(y.at(2, 1) == doctest::Approx(a.at(2, 1) + bias.at(0, 1)).epsilon(1e-15));
    Graph graph;
    {
      Graph::Scope scope(graph);
      graph.backward(ops::sum(ops::add_rowvec(a, bias)));
    }
    CHECK(bias.grad()[2] == 3.0);  // one contribution per row
  }
}

TEST_CASE("forward determinism") {
  Rng rng(61);
  Tensor a = random_matrix(rng, 4, 4, false);
  Tensor b = random_matrix(rng, 4, 4, false);
  Tensor first = ops::softmax_rows(ops::matmul(a, b));
  Tensor second = ops::softmax_rows(ops::matmul(a, b));
  for (std::size_t i = 0; i < first.numel(); ++i) CHECK(first[i] == second[i]);
}

TEST_CASE("ops without an active graph record nothing") {
  Tensor x = Tensor::vector({1, 2, 3}, true);
  Tensor y = ops::scale(x, 2.0);
  CHECK_FALSE(y.requires_grad());
  Graph graph;
  CHECK(graph.size() == 0);
}

TEST_CASE("finite-difference property over random op chains") {
  // every differentiable op in one composite chain, 20 random trials
  Rng rng(71);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = random_matrix(rng, 3, 6);
    Tensor w = random_matrix(rng, 6, 6);
    Tensor gain = Tensor::full({1, 6}, 1.0, true);
    Tensor bias = Tensor::full({1, 6}, 0.0, true);
    auto forward = [&] {
      Tensor h = ops::layer_norm(ops::gelu(ops::matmul(x, w)), gain, bias);
      Tensor p = ops::softmax_rows(ops::scale(h, 0.7));
      return ops::cross_entropy(ops::pick_row(p, 1),
                                Tensor::vector({0.2, 0.1, 0.3, 0.1, 0.2, 0.1}));
    };
    Graph graph;
    {
      Graph::Scope scope(graph);
      graph.backward(forward());
    }
    std::vector<std::pair<std::string, Tensor>> params{
        {"x", x}, {"w", w}, {"gain", gain}, {"bias", bias}};
    auto loss = [&] { return forward().value(); };
    auto result = testsupport::check_gradients(params, loss);
    CHECK_MESSAGE(result.ok, "trial ", trial, " worst ", result.worst_rel, " at ",
                  result.worst_where);
  }
}

}  // TEST_SUITE
