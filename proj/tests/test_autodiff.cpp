#include <doctest.h>

#include <array>
#include <random>

#include "oracles.hpp"
#include "piecewise/autodiff.hpp"

using namespace piecewise;
using namespace piecewise::ad;

namespace {

Matrix row(std::initializer_list<double> v) {
  Matrix m(1, static_cast<Index>(v.size()));
  Index i = 0;
  for (double x : v) m(0, i++) = x;
  return m;
}

Matrix random_matrix(Index r, Index c, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Matrix m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

}  // namespace

TEST_CASE("relu forward") {
  Graph g;
  const NodeId x = g.input("x", 1, 3);
  const NodeId y = g.relu(x);
  Bindings b;
  b.bind(x, row({-1, 0, 2}));
  CHECK(evaluate(g, b).value(y) == row({0, 0, 2}));
}

TEST_CASE("log-softmax of equal logits is ln 1/2") {
  Graph g;
  const NodeId x = g.input("x", 1, 2);
  const NodeId y = g.log_softmax(x);
  Bindings b;
  b.bind(x, row({0, 0}));
  const Matrix v = evaluate(g, b).value(y);
  CHECK(v(0, 0) == doctest::Approx(std::log(0.5)).epsilon(1e-15));
  CHECK(v(0, 1) == doctest::Approx(std::log(0.5)).epsilon(1e-15));
}

TEST_CASE("training batchnorm of [1, 3] is about [-1, 1]") {
  Graph g;
  const NodeId x = g.input("x", 2, 1);
  const NodeId gamma = g.constant(Matrix::Ones(1, 1));
  const NodeId beta = g.constant(Matrix::Zero(1, 1));
  const NodeId y = g.batchnorm_train(x, gamma, beta);
  Bindings b;
  Matrix in(2, 1);
  in << 1, 3;
  b.bind(x, in);
  const Matrix v = evaluate(g, b).value(y);
  const double expected = 1.0 / std::sqrt(1.0 + 1e-5);
  CHECK(v(0, 0) == doctest::Approx(-expected).epsilon(1e-12));
  CHECK(v(1, 0) == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("gradient of sum(relu(x)) at [-1, 2] is [0, 1]") {
  Graph g;
  const NodeId x = g.input("x", 1, 2);
  const NodeId out = g.sum(g.relu(x));
  Bindings b;
  b.bind(x, row({-1, 2}));
  const Evaluation e = evaluate(g, b);
  const std::array<NodeId, 1> wrt{x};
  CHECK(backward(g, e, out, wrt).at(x) == row({0, 1}));
}

TEST_CASE("relu subgradient at zero is zero") {
  Graph g;
  const NodeId x = g.input("x", 1, 1);
  const NodeId out = g.sum(g.relu(x));
  Bindings b;
  b.bind(x, row({0}));
  const std::array<NodeId, 1> wrt{x};
  CHECK(backward(g, evaluate(g, b), out, wrt).at(x)(0, 0) == 0.0);
}

TEST_CASE("gradient of sum(W x) has rows equal to x") {
  Graph g;
  const NodeId w = g.parameter("W", 3, 2);
  const NodeId x = g.input("x", 2, 1);
  const NodeId out = g.sum(g.matmul(w, x));
  std::mt19937_64 rng(1);
  Bindings b;
  b.bind(w, random_matrix(3, 2, rng));
  Matrix xv(2, 1);
  xv << 1, 2;
  b.bind(x, xv);
  const std::array<NodeId, 1> wrt{w};
  const Matrix gw = backward(g, evaluate(g, b), out, wrt).at(w);
  for (Index r = 0; r < 3; ++r) CHECK(gw.row(r) == row({1, 2}));
}

TEST_CASE("every primitive matches central differences") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    Graph g;
    const NodeId a = g.parameter("a", 3, 4);
    const NodeId c = g.parameter("c", 3, 4);
    const NodeId w = g.parameter("w", 5, 4);
    const NodeId bias = g.parameter("bias", 1, 5);
    const NodeId gamma = g.parameter("gamma", 1, 5);
    const NodeId beta = g.parameter("beta", 1, 5);
    const NodeId m = g.parameter("m", 4, 2);

    std::vector<NodeId> terms;
    terms.push_back(g.sum(g.add(a, c)));
    terms.push_back(g.sum(g.sub(a, c)));
    terms.push_back(g.sum(g.mul(a, c)));
    terms.push_back(g.sum(g.div(a, g.exp(c))));
    terms.push_back(g.mean(g.scale(a, 2.5)));
    terms.push_back(g.sum(g.log(g.exp(a))));
    terms.push_back(g.sum(g.sqrt(g.exp(a))));
    terms.push_back(g.sum(g.clamp(a, -10.0, 10.0)));
    terms.push_back(g.sum(g.mul(g.log_softmax(a), c)));
    terms.push_back(g.sum(g.mul(g.col_sum(a), g.col_sum(c))));
    terms.push_back(g.sum(g.mul(g.row_sum(a), g.row_sum(c))));
    terms.push_back(g.sum(g.diag(g.matmul(a, g.transpose(c)))));
    terms.push_back(g.sum(g.matmul(a, m)));
    terms.push_back(g.sum(g.gather_rows(a, {2, 0, 2})));
    const NodeId aff = g.affine(a, w, bias);
    terms.push_back(g.sum(g.mul(g.batchnorm_train(aff, gamma, beta), g.exp(aff))));
    Matrix rm = random_matrix(1, 5, rng);
    Matrix rv = random_matrix(1, 5, rng, 0.5, 2.0);
    terms.push_back(g.sum(g.mul(g.batchnorm_eval(aff, gamma, beta, rm, rv), aff)));
    terms.push_back(g.sum(g.normalize_columns(g.exp(a))));
    terms.push_back(g.sum(g.mul(g.normalize_columns(g.exp(c)), a)));

    NodeId total = terms.front();
    for (std::size_t i = 1; i < terms.size(); ++i) total = g.add(total, terms[i]);

    Bindings b;
    for (NodeId leaf : {a, c, w, bias, gamma, beta, m}) {
      const Node& n = g.node(leaf);
      b.bind(leaf, random_matrix(n.rows, n.cols, rng));
    }
    const std::array<NodeId, 7> wrt{a, c, w, bias, gamma, beta, m};
    const GradientCheckReport rep = gradient_check(g, total, b, wrt, 1e-5, 1e-6);
    CHECK_MESSAGE(rep.passed, "worst relative error " << rep.worst());
  }
}

TEST_CASE("relu, max and segment max pass away from kinks") {
  std::mt19937_64 rng(11);
  int checked = 0;
  for (int trial = 0; trial < 50 && checked < 20; ++trial) {
    Graph g;
    const NodeId a = g.parameter("a", 6, 1);
    const NodeId w = g.parameter("w", 6, 1);
    const NodeId r = g.relu(g.mul(a, w));
    const NodeId total = g.add(g.max(g.mul(a, a)), g.add(g.sum(g.segment_max(r, 3)), g.sum(r)));
    Bindings b;
    b.bind(a, random_matrix(6, 1, rng));
    b.bind(w, random_matrix(6, 1, rng));
    if (nonsmooth_margin(g, evaluate(g, b)) <= 10 * 1e-5) continue;
    ++checked;
    const std::array<NodeId, 2> wrt{a, w};
    CHECK(gradient_check(g, total, b, wrt, 1e-5, 1e-6).passed);
  }
  CHECK(checked == 20);
}

TEST_CASE("linear graph passes the gradient check") {
  Graph g;
  const NodeId x = g.parameter("x", 2, 3);
  const NodeId out = g.sum(g.scale(x, 3.0));
  std::mt19937_64 rng(3);
  Bindings b;
  b.bind(x, random_matrix(2, 3, rng));
  const std::array<NodeId, 1> wrt{x};
  const auto rep = gradient_check(g, out, b, wrt, 1e-5, 1e-6);
  CHECK(rep.passed);
  CHECK(rep.leaves.size() == 1);
}

TEST_CASE("corrupted adjoint fails the gradient check") {
  Graph g;
  const NodeId x = g.parameter("x", 1, 3);
  const NodeId y = g.exp(x);
  const NodeId out = g.sum(y);
  std::mt19937_64 rng(5);
  Bindings b;
  b.bind(x, random_matrix(1, 3, rng));
  const std::array<NodeId, 1> wrt{x};
  const AdjointHook corrupt = [y](NodeId id, Matrix& adj) {
    if (id == y) adj *= 1.01;
  };
  CHECK_FALSE(gradient_check(g, out, b, wrt, 1e-5, 1e-6, corrupt).passed);
  CHECK(gradient_check(g, out, b, wrt, 1e-5, 1e-6).passed);
}

TEST_CASE("stop-gradient blocks the adjoint") {
  Graph g;
  const NodeId x = g.parameter("x", 1, 2);
  const NodeId out = g.sum(g.mul(g.stop_gradient(x), g.stop_gradient(x)));
  Bindings b;
  b.bind(x, row({1.5, -2.0}));
  const std::array<NodeId, 1> wrt{x};
  CHECK(backward(g, evaluate(g, b), out, wrt).at(x) == Matrix::Zero(1, 2));
}

TEST_CASE("max ties go to the lowest index") {
  Graph g;
  const NodeId x = g.parameter("x", 1, 3);
  const NodeId out = g.max(x);
  Bindings b;
  b.bind(x, row({2, 2, 1}));
  const std::array<NodeId, 1> wrt{x};
  CHECK(backward(g, evaluate(g, b), out, wrt).at(x) == row({1, 0, 0}));
}

TEST_CASE("structured errors") {
  SUBCASE("shape mismatch names the node") {
    Graph g;
    const NodeId a = g.input("a", 2, 3);
    const NodeId c = g.input("c", 3, 3);
    CHECK_THROWS_AS(g.add(a, c), ShapeError);
    try {
      g.matmul(a, a);
      FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
      CHECK(!e.node().empty());
    }
  }
  SUBCASE("bound value with the wrong shape") {
    Graph g;
    const NodeId a = g.input("a", 2, 2);
    g.sum(a);
    Bindings b;
    b.bind(a, Matrix::Zero(3, 2));
    CHECK_THROWS_AS(evaluate(g, b), ShapeError);
  }
  SUBCASE("unbound leaf") {
    Graph g;
    const NodeId a = g.input("a", 1, 1);
    g.sum(a);
    CHECK_THROWS_AS(evaluate(g, Bindings{}), ContractViolation);
  }
  SUBCASE("non-finite intermediate") {
    Graph g;
    const NodeId a = g.input("a", 1, 1);
    g.exp(g.exp(a));
    Bindings b;
    b.bind(a, row({1000}));
    CHECK_THROWS_AS(evaluate(g, b), OverflowError);
  }
  SUBCASE("non-finite binding") {
    Bindings b;
    Graph g;
    const NodeId a = g.input("a", 1, 1);
    CHECK_THROWS_AS(b.bind(a, row({std::nan("")})), OverflowError);
  }
  SUBCASE("non-scalar output") {
    Graph g;
    const NodeId a = g.parameter("a", 1, 2);
    Bindings b;
    b.bind(a, row({1, 2}));
    const std::array<NodeId, 1> wrt{a};
    CHECK_THROWS_AS(backward(g, evaluate(g, b), a, wrt), ContractViolation);
  }
}

TEST_CASE("evaluation is deterministic") {
  std::mt19937_64 rng(9);
  Graph g;
  const NodeId a = g.parameter("a", 8, 8);
  const NodeId out = g.sum(g.log_softmax(g.matmul(a, g.transpose(a))));
  Bindings b;
  b.bind(a, random_matrix(8, 8, rng));
  const std::array<NodeId, 1> wrt{a};
  const Evaluation e1 = evaluate(g, b);
  const Evaluation e2 = evaluate(g, b);
  CHECK(e1.scalar(out) == e2.scalar(out));
  CHECK(backward(g, e1, out, wrt).at(a) == backward(g, e2, out, wrt).at(a));
}
