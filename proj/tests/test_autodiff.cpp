#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <array>

#include "phonemeda/autodiff.hpp"

using namespace phonemeda;
using ad::OpAttrs;
using ad::OpKind;
using ad::Tape;
using ad::Tensor;
using ad::Var;

namespace {

Tensor<double> random_tensor(std::vector<int> shape, uint64_t seed, double lo = -1.0,
                             double hi = 1.0, double keep_away_from = 0.0) {
  Tensor<double> t(std::move(shape), true);
  Rng rng(seed);
  for (auto& v : t.data) {
    do {
      v = rng.uniform(lo, hi);
    } while (std::abs(v) < keep_away_from);
  }
  return t;
}

}  // namespace

TEST_CASE("matmul shape algebra") {
  Tape<double> tape;
  Var a = tape.constant_fill({2, 3}, 1.0);
  Var b = tape.constant_fill({3, 4}, 1.0);
  Var c = tape.matmul(a, b);
  CHECK(tape.shape(c) == std::vector<int>{2, 4});
  for (double v : tape.value(c)) CHECK(v == doctest::Approx(3.0));
}

TEST_CASE("shape mismatches name the op and dims") {
  Tape<double> tape;
  Var a = tape.constant_fill({2, 3}, 1.0);
  Var b = tape.constant_fill({4, 2}, 1.0);
  try {
    tape.matmul(a, b);
    FAIL("expected ShapeMismatch");
  } catch (const Error& e) {
    CHECK(e.code() == Err::ShapeMismatch);
    CHECK(std::string(e.what()).find("matmul") != std::string::npos);
    CHECK(std::string(e.what()).find("[2x3]") != std::string::npos);
  }
  try {
    tape.add(a, b);
    FAIL("expected ShapeMismatch");
  } catch (const Error& e) {
    CHECK(e.code() == Err::ShapeMismatch);
    CHECK(std::string(e.what()).find("add") != std::string::npos);
  }
}

TEST_CASE("leaky_relu uses the 0.01 slope") {
  Tape<double> tape;
  Var x = tape.constant({3}, {-1.0, 0.5, -2.0});
  Var y = tape.leaky_relu(x, 0.01);
  CHECK(tape.value(y)[0] == doctest::Approx(-0.01));
  CHECK(tape.value(y)[1] == doctest::Approx(0.5));
  CHECK(tape.value(y)[2] == doctest::Approx(-0.02));
}

TEST_CASE("softmax of a zero vector is uniform") {
  Tape<double> tape;
  Var x = tape.constant_fill({31}, 0.0);
  Var s = tape.softmax(x);
  for (double v : tape.value(s)) CHECK(v == doctest::Approx(1.0 / 31.0).epsilon(1e-12));
}

TEST_CASE("softmax rows sum to one and stay positive") {
  Tensor<double> x = random_tensor({6, 9}, 21, -30.0, 30.0);
  Tape<double> tape;
  Var s = tape.softmax(tape.leaf(x));
  const auto& v = tape.value(s);
  for (int r = 0; r < 6; ++r) {
    double sum = 0.0;
    for (int c = 0; c < 9; ++c) {
      CHECK(v[static_cast<size_t>(r) * 9 + c] > 0.0);
      sum += v[static_cast<size_t>(r) * 9 + c];
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("tanh derivative at zero is one") {
  Tensor<double> x({1}, true);
  x.data[0] = 0.0;
  Tape<double> tape;
  Var y = tape.sum(tape.tanh_op(tape.leaf(x)));
  tape.backward(y);
  CHECK(x.grad[0] == doctest::Approx(1.0));
}

TEST_CASE("gradient of sum(hadamard(a, b)) with respect to a is b") {
  Tensor<double> a = random_tensor({2, 5}, 1);
  Tensor<double> b = random_tensor({2, 5}, 2);
  Tape<double> tape;
  Var loss = tape.sum(tape.hadamard(tape.leaf(a), tape.leaf(b)));
  tape.backward(loss);
  for (size_t i = 0; i < a.grad.size(); ++i) CHECK(a.grad[i] == doctest::Approx(b.data[i]));
}

TEST_CASE("backward requires a scalar loss") {
  Tensor<double> a = random_tensor({2, 2}, 3);
  Tape<double> tape;
  Var x = tape.leaf(a);
  try {
    tape.backward(x);
    FAIL("expected NonScalarLoss");
  } catch (const Error& e) {
    CHECK(e.code() == Err::NonScalarLoss);
  }
}

TEST_CASE("grad_check: sum of squares is exact to 1e-9") {
  Tensor<double> x = random_tensor({5, 7}, 4, -1.0, 1.0, /*keep away from zero*/ 0.1);
  std::array<Tensor<double>*, 1> inputs{&x};
  auto report = ad::grad_check<double>(
      [&](Tape<double>& tape) {
        Var v = tape.leaf(x);
        return tape.sum(tape.hadamard(v, v));
      },
      inputs, /*step=*/1e-3, /*tol=*/1e-9);
  CHECK(report.pass);
  CHECK(report.max_rel_error < 1e-9);
}

TEST_CASE("grad_check covers every op in the op set") {
  const double step = 1e-5, tol = 1e-4;

  auto check1 = [&](const char* name, auto builder, Tensor<double>& x) {
    std::array<Tensor<double>*, 1> inputs{&x};
    auto report = ad::grad_check<double>(
        [&](Tape<double>& tape) { return tape.sum(builder(tape, tape.leaf(x))); }, inputs, step,
        tol);
    INFO(name, " max rel error ", report.max_rel_error);
    CHECK(report.pass);
  };

  Tensor<double> x57 = random_tensor({5, 7}, 10, -1.0, 1.0, 0.05);

  check1("tanh", [](Tape<double>& t, Var v) { return t.tanh_op(v); }, x57);
  check1("sigmoid", [](Tape<double>& t, Var v) { return t.sigmoid(v); }, x57);
  check1("leaky_relu", [](Tape<double>& t, Var v) { return t.leaky_relu(v, 0.01); }, x57);
  check1("softmax", [](Tape<double>& t, Var v) { return t.softmax(v); }, x57);
  check1("transpose", [](Tape<double>& t, Var v) { return t.transpose(v); }, x57);
  check1("scale", [](Tape<double>& t, Var v) { return t.scale(v, -2.5); }, x57);
  check1("slice", [](Tape<double>& t, Var v) { return t.slice(v, 1, 2, 6); }, x57);
  check1("reshape", [](Tape<double>& t, Var v) { return t.reshape(v, {7, 5}); }, x57);

  Tensor<double> positive = random_tensor({5, 7}, 11, 0.2, 2.0);
  check1("log", [](Tape<double>& t, Var v) { return t.log_op(v, 1e-12); }, positive);

  // weight the sum so softmax gets a non-uniform upstream gradient
  {
    Tensor<double> x = random_tensor({5, 7}, 12, -2.0, 2.0);
    Tensor<double> w = random_tensor({5, 7}, 13);
    w.requires_grad = false;
    std::array<Tensor<double>*, 1> inputs{&x};
    auto report = ad::grad_check<double>(
        [&](Tape<double>& tape) {
          return tape.sum(tape.hadamard(tape.softmax(tape.leaf(x)), tape.leaf(w)));
        },
        inputs, step, tol);
    INFO("softmax weighted, max rel error ", report.max_rel_error);
    CHECK(report.pass);
  }

  // binary ops
  {
    Tensor<double> a = random_tensor({5, 7}, 14);
    Tensor<double> b = random_tensor({7, 4}, 15);
    std::array<Tensor<double>*, 2> inputs{&a, &b};
    auto report = ad::grad_check<double>(
        [&](Tape<double>& tape) { return tape.sum(tape.matmul(tape.leaf(a), tape.leaf(b))); },
        inputs, step, tol);
    INFO("matmul max rel error ", report.max_rel_error);
    CHECK(report.pass);
  }
  {
    Tensor<double> a = random_tensor({5, 7}, 16);
    Tensor<double> b = random_tensor({5, 7}, 17);
    std::array<Tensor<double>*, 2> inputs{&a, &b};
    auto add_report = ad::grad_check<double>(
        [&](Tape<double>& tape) { return tape.sum(tape.add(tape.leaf(a), tape.leaf(b))); },
        inputs, step, tol);
    CHECK(add_report.pass);
    auto had_report = ad::grad_check<double>(
        [&](Tape<double>& tape) { return tape.sum(tape.hadamard(tape.leaf(a), tape.leaf(b))); },
        inputs, step, tol);
    CHECK(had_report.pass);
  }

  // concat routes gradients to both sources
  {
    Tensor<double> a = random_tensor({5, 3}, 18);
    Tensor<double> b = random_tensor({5, 7}, 19);
    Tensor<double> w = random_tensor({5, 10}, 20);
    w.requires_grad = false;
    std::array<Tensor<double>*, 2> inputs{&a, &b};
    auto report = ad::grad_check<double>(
        [&](Tape<double>& tape) {
          std::array<Var, 2> parts{tape.leaf(a), tape.leaf(b)};
          return tape.sum(tape.hadamard(tape.concat(parts, 1), tape.leaf(w)));
        },
        inputs, step, tol);
    INFO("concat max rel error ", report.max_rel_error);
    CHECK(report.pass);
  }

  // conv2d including bias
  {
    Tensor<double> x = random_tensor({2, 6, 3}, 21);
    Tensor<double> k = random_tensor({3, 2, 5, 1}, 22);
    Tensor<double> b = random_tensor({3}, 23);
    std::array<Tensor<double>*, 3> inputs{&x, &k, &b};
    auto report = ad::grad_check<double>(
        [&](Tape<double>& tape) {
          return tape.sum(tape.conv2d(tape.leaf(x), tape.leaf(k), tape.leaf(b), 2, 0));
        },
        inputs, step, tol);
    INFO("conv2d max rel error ", report.max_rel_error);
    CHECK(report.pass);
  }
}

TEST_CASE("grad_check: batch_norm in training mode over a batch of 8") {
  Tensor<double> x = random_tensor({4, 8}, 30);  // 4 channels, batch of 8
  Tensor<double> gamma = random_tensor({4}, 31, 0.5, 1.5);
  Tensor<double> beta = random_tensor({4}, 32);
  ad::BatchNormBuffers<double> running(4);
  std::array<Tensor<double>*, 3> inputs{&x, &gamma, &beta};
  auto report = ad::grad_check<double>(
      [&](Tape<double>& tape) {
        // no running-stat update: grad_check re-evaluates the function
        return tape.sum(tape.batch_norm(tape.leaf(x), tape.leaf(gamma), tape.leaf(beta), &running,
                                        /*training=*/true, /*update_running=*/false));
      },
      inputs, 1e-5, 1e-4);
  INFO("batch_norm max rel error ", report.max_rel_error);
  CHECK(report.pass);
}

TEST_CASE("grad_check: batch_norm inference mode uses running statistics") {
  Tensor<double> x = random_tensor({4, 6}, 33);
  Tensor<double> gamma = random_tensor({4}, 34, 0.5, 1.5);
  Tensor<double> beta = random_tensor({4}, 35);
  ad::BatchNormBuffers<double> running(4);
  Rng rng(36);
  for (auto& v : running.mean) v = rng.uniform(-0.5, 0.5);
  for (auto& v : running.var) v = rng.uniform(0.5, 2.0);
  std::array<Tensor<double>*, 3> inputs{&x, &gamma, &beta};
  auto report = ad::grad_check<double>(
      [&](Tape<double>& tape) {
        return tape.sum(tape.batch_norm(tape.leaf(x), tape.leaf(gamma), tape.leaf(beta), &running,
                                        /*training=*/false, /*update_running=*/false));
      },
      inputs, 1e-5, 1e-4);
  CHECK(report.pass);
}

TEST_CASE("batch_norm updates running statistics with momentum 0.1") {
  Tensor<double> x({2, 4}, false);
  x.data = {1.0, 2.0, 3.0, 4.0, /*ch 2*/ -1.0, -1.0, -1.0, -1.0};
  Tensor<double> gamma({2}, false);
  gamma.data = {1.0, 1.0};
  Tensor<double> beta({2}, false);
  ad::BatchNormBuffers<double> running(2);  // mean 0, var 1
  Tape<double> tape;
  tape.batch_norm(tape.leaf(x), tape.leaf(gamma), tape.leaf(beta), &running, true, true, 0.1,
                  1e-5);
  CHECK(running.mean[0] == doctest::Approx(0.9 * 0.0 + 0.1 * 2.5));
  // channel 1 sample variance (unbiased): 5/3
  CHECK(running.var[0] == doctest::Approx(0.9 * 1.0 + 0.1 * (5.0 / 3.0)));
  CHECK(running.mean[1] == doctest::Approx(0.1 * -1.0));
  CHECK(running.var[1] == doctest::Approx(0.9 * 1.0));
}

TEST_CASE("concat followed by split is the identity and routes gradients") {
  Tensor<double> a = random_tensor({3, 4}, 40);
  Tensor<double> b = random_tensor({3, 6}, 41);
  Tape<double> tape;
  std::array<Var, 2> parts{tape.leaf(a), tape.leaf(b)};
  Var joined = tape.concat(parts, 1);
  auto [left, right] = tape.split(joined, 1, 4);
  CHECK(tape.value(left) == a.data);
  CHECK(tape.value(right) == b.data);

  // gradient of sum(left) only reaches a
  Var loss = tape.sum(left);
  tape.backward(loss);
  for (double g : a.grad) CHECK(g == doctest::Approx(1.0));
  for (double g : b.grad) CHECK(g == doctest::Approx(0.0));
}

TEST_CASE("conv2d with 5x1 kernel, stride 1 and 2x0 padding preserves the padded axis") {
  Rng rng(50);
  for (int h = 1; h <= 20; ++h) {
    Tape<double> tape;
    const int w = 1 + static_cast<int>(rng.below(6));
    Var x = tape.constant_fill({1, h, w}, 0.5);
    Var k = tape.constant_fill({3, 1, 5, 1}, 0.1);
    Var y = tape.conv2d(x, k, Var{}, 2, 0);
    CHECK(tape.shape(y) == std::vector<int>{3, h, w});
  }
}

TEST_CASE("a tensor feeding two nodes accumulates both gradient contributions") {
  Tensor<double> x = random_tensor({3, 3}, 60);
  std::array<Tensor<double>*, 1> inputs{&x};
  auto report = ad::grad_check<double>(
      [&](Tape<double>& tape) {
        Var v = tape.leaf(x);
        // x used twice: once through tanh, once through scale
        return tape.sum(tape.add(tape.tanh_op(v), tape.scale(v, 3.0)));
      },
      inputs, 1e-5, 1e-4);
  CHECK(report.pass);

  // and the analytic gradient is the sum of both paths
  x.zero_grad();
  Tape<double> tape;
  Var v = tape.leaf(x);
  Var loss = tape.sum(tape.add(tape.tanh_op(v), tape.scale(v, 3.0)));
  tape.backward(loss);
  for (size_t i = 0; i < x.data.size(); ++i) {
    const double th = std::tanh(x.data[i]);
    CHECK(x.grad[i] == doctest::Approx(1.0 - th * th + 3.0));
  }
}

TEST_CASE("generic apply dispatches the documented op set") {
  Tape<double> tape;
  Var a = tape.constant_fill({2, 2}, 2.0);
  Var b = tape.constant_fill({2, 2}, 3.0);

  std::array<Var, 2> two{a, b};
  CHECK(tape.value(tape.apply(OpKind::Add, two))[0] == doctest::Approx(5.0));
  CHECK(tape.value(tape.apply(OpKind::Hadamard, two))[0] == doctest::Approx(6.0));
  CHECK(tape.value(tape.apply(OpKind::Matmul, two))[0] == doctest::Approx(12.0));

  std::array<Var, 1> one{a};
  OpAttrs<double> attrs;
  attrs.scalar = 10.0;
  CHECK(tape.value(tape.apply(OpKind::Scale, one, attrs))[0] == doctest::Approx(20.0));
  CHECK(tape.value(tape.apply(OpKind::Sum, one))[0] == doctest::Approx(8.0));

  try {
    tape.apply(OpKind::Leaf, one);
    FAIL("expected ShapeMismatch");
  } catch (const Error& e) {
    CHECK(e.code() == Err::ShapeMismatch);
  }
}

TEST_CASE("gradients of unused parameters stay zero") {
  Tensor<double> used = random_tensor({2, 2}, 70);
  Tensor<double> unused = random_tensor({2, 2}, 71);
  Tape<double> tape;
  tape.leaf(unused);  // on the tape but not connected to the loss
  Var loss = tape.sum(tape.leaf(used));
  tape.backward(loss);
  for (double g : used.grad) CHECK(g == doctest::Approx(1.0));
  for (double g : unused.grad) CHECK(g == 0.0);
}
