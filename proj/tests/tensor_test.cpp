#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstring>
#include <map>

#include "aiap/rng.hpp"
#include "aiap/tensor.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace aiap;
using testutil::max_rel_err_fd;
using testutil::random_tensor;

using T64 = Tensor64;

TEST_CASE("elementwise basics") {
  auto x = T64::leaf({}, {2.0});
  auto y = T64::leaf({}, {3.0});
  {
    Tape64 tape;
    auto z = add(x, y);
    CHECK(z.item() == doctest::Approx(5.0));
    tape.backward(z);
    CHECK(x.grad_value() == doctest::Approx(1.0));
    CHECK(y.grad_value() == doctest::Approx(1.0));
  }

  auto one = T64::scalar(1.0);
  CHECK(log(one).item() == doctest::Approx(1e-12).epsilon(1e-3));

  // z = log(|x - y|) with the epsilon guard inside log
  auto x3 = T64::leaf({}, {3.0});
  auto y1 = T64::leaf({}, {1.0});
  auto build = [&]() { return log(abs(sub(x3, y1))); };
  CHECK(max_rel_err_fd<double>(build, {x3, y1}) < 1e-6);
}

TEST_CASE("elementwise shape errors name both shapes") {
  auto a = T64::zeros({2, 3});
  auto b = T64::zeros({4, 5});
  try {
    add(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    std::string msg = e.what();
    CHECK(msg.find("[2,3]") != std::string::npos);
    CHECK(msg.find("[4,5]") != std::string::npos);
  }
}

TEST_CASE("broadcasting across singleton dims") {
  auto a = T64::from({2, 3}, {1, 2, 3, 4, 5, 6});
  auto col = T64::from({2, 1}, {10, 100});
  auto r = mul(a, col);
  CHECK(r.value(0) == 10);
  CHECK(r.value(5) == 600);

  auto s = add(a, T64::scalar(1.0));
  CHECK(s.value(4) == 6);

  // gradient sums over broadcast positions
  auto c = T64::leaf({2, 1}, {1.0, 2.0});
  {
    Tape64 tape;
    auto loss = sum(mul(a, c));
    tape.backward(loss);
    CHECK(c.grad_value(0) == doctest::Approx(6.0));
    CHECK(c.grad_value(1) == doctest::Approx(15.0));
  }
}

TEST_CASE("strict finite mode rejects non-finite input") {
  auto bad = T64::from({2}, {1.0, std::numeric_limits<double>::infinity()});
  strict_finite_mode() = true;
  CHECK_THROWS_AS(add(bad, bad), NumericError);
  strict_finite_mode() = false;
  CHECK_NOTHROW(add(bad, bad));
}

TEST_CASE("reduce: sum, mean, max") {
  auto v = T64::leaf({3}, {1, 2, 3});
  {
    Tape64 tape;
    auto s = sum(v);
    CHECK(s.item() == doctest::Approx(6.0));
    tape.backward(s);
    auto g = v.grad_values();
    CHECK(g[0] == 1.0);
    CHECK(g[1] == 1.0);
    CHECK(g[2] == 1.0);
  }

  auto c = T64::filled({4, 4}, 2.5);
  CHECK(mean(c).item() == doctest::Approx(2.5));

  Rng rng(11);
  auto m = random_tensor<double>({4, 4}, rng);
  auto build = [&]() { return reduce_max(m); };
  CHECK(max_rel_err_fd<double>(build, {m}) < 1e-6);

  // axis reduction
  auto a = T64::from({2, 3}, {1, 2, 3, 4, 5, 6});
  auto rows = sum(a, {1});
  CHECK(rows.shape() == Shape{2});
  CHECK(rows.value(0) == 6);
  CHECK(rows.value(1) == 15);
}

TEST_CASE("conv2d identity and constant-input sums") {
  // 1x1 kernel with weight 1 is the identity map
  Rng rng(3);
  auto x = random_tensor<double>({1, 5, 5}, rng);
  auto k1 = T64::from({1, 1, 1, 1}, {1.0});
  auto y = conv2d(x, k1);
  for (int i = 0; i < 25; ++i) CHECK(y.value(i) == doctest::Approx(x.value(i)));

  // 3x3 all-ones kernel, same padding, constant input c: interior = 9c
  auto c = T64::filled({1, 6, 6}, 0.5);
  auto k9 = T64::filled({1, 1, 3, 3}, 1.0);
  auto z = conv2d(c, k9);
  CHECK(z.shape() == Shape{1, 6, 6});
  CHECK(z.value(1 * 6 + 1) == doctest::Approx(4.5));
  CHECK(z.value(2 * 6 + 3) == doctest::Approx(4.5));
  CHECK(z.value(0) == doctest::Approx(0.5 * 4));  // corner sees 2x2 support
}

TEST_CASE("conv2d kernel gradient matches finite differences") {
  Rng rng(17);
  auto x = random_tensor<double>({2, 8, 8}, rng);
  auto k = random_tensor<double>({3, 2, 3, 3}, rng, -0.5, 0.5);
  auto b = random_tensor<double>({3}, rng, -0.1, 0.1);
  auto build = [&]() {
    auto y = conv2d(x, k, &b);
    return sum(mul(y, y));
  };
  CHECK(max_rel_err_fd<double>(build, {k}) < 1e-5);
  CHECK(max_rel_err_fd<double>(build, {x, b}, 1e-5, 24) < 1e-5);
}

TEST_CASE("conv2d stride and valid padding shapes") {
  auto x = T64::zeros({1, 9, 9});
  auto k = T64::zeros({2, 1, 3, 3});
  CHECK(conv2d(x, k, nullptr, 1, Padding::Valid).shape() == Shape{2, 7, 7});
  CHECK(conv2d(x, k, nullptr, 2, Padding::Same).shape() == Shape{2, 5, 5});
  auto tiny = T64::zeros({1, 2, 2});
  auto big = T64::zeros({1, 1, 5, 5});
  CHECK_THROWS_AS(conv2d(tiny, big, nullptr, 1, Padding::Valid), ShapeError);
}

TEST_CASE("softmax2d") {
  auto c = T64::filled({2, 2}, 3.0);
  auto p = softmax2d(c);
  for (int i = 0; i < 4; ++i) CHECK(p.value(i) == doctest::Approx(0.25));

  auto f = T64::zeros({3, 3});
  f.mutable_values()[4] = 50.0;
  auto q = softmax2d(f);
  CHECK(q.value(4) > 1.0 - 1e-9);

  // shift invariance
  auto f2 = T64::from({2, 2}, {0.1, 0.7, -0.3, 0.2});
  auto f3 = add(f2, T64::scalar(11.0));
  auto p2 = softmax2d(f2);
  auto p3 = softmax2d(f3);
  for (int i = 0; i < 4; ++i) CHECK(p2.value(i) == doctest::Approx(p3.value(i)).epsilon(1e-12));

  double total = 0;
  for (int i = 0; i < 4; ++i) total += p2.value(i);
  CHECK(total == doctest::Approx(1.0).epsilon(1e-9));

  // Jacobian-vector product vs finite differences
  Rng rng(5);
  auto field = random_tensor<double>({3, 3}, rng);
  auto w = random_tensor<double>({3, 3}, rng, -1, 1, false);
  auto build = [&]() { return sum(mul(softmax2d(field), w)); };
  CHECK(max_rel_err_fd<double>(build, {field}) < 1e-6);
}

TEST_CASE("stop_grad") {
  auto x = T64::leaf({}, {5.0});
  auto y = stop_grad(x);
  CHECK(y.item() == 5.0);
  {
    Tape64 tape;
    auto z = stop_grad(x);
    tape.backward(z);
    CHECK(x.grad_value() == 0.0);
  }

  auto x3 = T64::leaf({}, {3.0});
  {
    Tape64 tape;
    auto z = mul(x3, stop_grad(x3));
    CHECK(z.item() == doctest::Approx(9.0));
    tape.backward(z);
    CHECK(x3.grad_value() == doctest::Approx(3.0));
  }

  // loss reached only through stop_grad: all leaf grads exactly zero
  auto a = T64::leaf({2}, {1.0, 2.0});
  {
    Tape64 tape;
    auto loss = sum(mul(stop_grad(a), stop_grad(a)));
    tape.backward(loss);
    CHECK(a.grad_value(0) == 0.0);
    CHECK(a.grad_value(1) == 0.0);
  }
}

TEST_CASE("straight_thru definitional examples") {
  auto x = T64::leaf({}, {2.0});
  auto y = T64::leaf({}, {5.0});
  {
    Tape64 tape;
    auto z = straight_thru(x, y);
    CHECK(z.item() == 5.0);
    tape.backward(z);
    CHECK(x.grad_value() == 1.0);
    CHECK(y.grad_value() == 0.0);
  }

  // straight_thru(x, x) behaves as x in both passes
  auto w = T64::leaf({3}, {0.5, -1.0, 2.0});
  {
    Tape64 tape;
    auto z = straight_thru(w, w);
    for (int i = 0; i < 3; ++i) CHECK(z.value(i) == w.value(i));
    tape.backward(sum(mul(z, T64::from({3}, {1, 2, 3}))));
    CHECK(w.grad_value(0) == doctest::Approx(1.0));
    CHECK(w.grad_value(1) == doctest::Approx(2.0));
    CHECK(w.grad_value(2) == doctest::Approx(3.0));
  }

  // L = straight_thru(soft, hard)^2
  auto soft = T64::leaf({}, {0.4});
  auto hard = T64::from({}, {1.0});
  {
    Tape64 tape;
    auto st = straight_thru(soft, hard);
    auto loss = mul(st, st);
    CHECK(loss.item() == doctest::Approx(1.0));
    tape.backward(loss);
    CHECK(soft.grad_value() == doctest::Approx(2.0));
  }

  auto bad = T64::zeros({2});
  CHECK_THROWS_AS(straight_thru(bad, T64::zeros({3})), ShapeError);
}

TEST_CASE("backward driver") {
  auto x = T64::leaf({}, {3.0});
  {
    Tape64 tape;
    auto z = mul(x, x);
    tape.backward(z);
    CHECK(x.grad_value() == doctest::Approx(6.0));
  }

  // linear chain of 10 elementwise ops vs finite differences
  auto y = T64::leaf({}, {0.8});
  auto build = [&]() {
    auto t = y;
    t = add(t, T64::scalar(0.3));
    t = mul(t, T64::scalar(1.7));
    t = sigmoid(t);
    t = add(t, T64::scalar(0.2));
    t = log(t);
    t = mul(t, t);
    t = tanh(t);
    t = sub(t, T64::scalar(-0.4));
    t = sqrt(t);
    t = div(t, T64::scalar(1.3));
    return t;
  };
  CHECK(max_rel_err_fd<double>(build, {y}) < 1e-6);

  // non-scalar loss and tape reuse are errors
  auto v = T64::leaf({2}, {1.0, 2.0});
  {
    Tape64 tape;
    auto z = mul(v, v);
    CHECK_THROWS_AS(tape.backward(z), TapeError);
  }
  {
    Tape64 tape;
    auto z = sum(mul(v, v));
    tape.backward(z);
    CHECK_THROWS_AS(tape.backward(z), TapeError);
  }
}

TEST_CASE("structural ops: slice, concat, stack, at, reshape") {
  auto a = T64::leaf({2, 3}, {1, 2, 3, 4, 5, 6});
  auto s = slice(a, 1, 1, 2);
  CHECK(s.shape() == Shape{2, 2});
  CHECK(s.value(0) == 2);
  CHECK(s.value(3) == 6);

  auto b = T64::from({1, 3}, {7, 8, 9});
  auto cat = concat<double>({a.detached(), b}, 0);
  CHECK(cat.shape() == Shape{3, 3});
  CHECK(cat.value(8) == 9);

  auto s1 = T64::leaf({}, {1.5});
  auto s2 = T64::leaf({}, {-2.0});
  {
    Tape64 tape;
    auto vec = stack_scalars<double>({s1, s2});
    CHECK(vec.shape() == Shape{2});
    auto loss = sum(mul(vec, T64::from({2}, {2.0, 3.0})));
    tape.backward(loss);
    CHECK(s1.grad_value() == doctest::Approx(2.0));
    CHECK(s2.grad_value() == doctest::Approx(3.0));
  }

  {
    Tape64 tape;
    auto e = at(a, 4);
    CHECK(e.item() == 5.0);
    tape.backward(e);
    CHECK(a.grad_value(4) == 1.0);
    CHECK(a.grad_value(0) == 0.0);
  }

  auto r = reshape(a, {3, 2});
  CHECK(r.shape() == Shape{3, 2});
  CHECK(r.value(5) == 6);
  CHECK_THROWS_AS(reshape(a, {4, 2}), ShapeError);

  // gradient flows through slice+concat round trip
  auto build = [&]() {
    auto left = slice(a, 1, 0, 1);
    auto right = slice(a, 1, 1, 2);
    auto back = concat<double>({left, right}, 1);
    return sum(mul(back, back));
  };
  CHECK(max_rel_err_fd<double>(build, {a}) < 1e-6);
}

TEST_CASE("categorical_sample") {
  auto p = T64::from({1, 4}, {1.0, 0.0, 0.0, 0.0});
  Rng rng(1);
  auto s = categorical_sample(p, rng);
  CHECK(s.row == 0);
  CHECK(s.col == 0);
  CHECK(s.prob.item() == 1.0);

  // uniform 2x2: empirical frequencies over 1e5 draws within 0.25 +/- 0.01
  auto u = T64::filled({2, 2}, 0.25);
  Rng rng2(42);
  std::map<int, int> counts;
  const int draws = 100000;
  for (int i = 0; i < draws; ++i) {
    auto r = categorical_sample(u, rng2);
    counts[r.row * 2 + r.col]++;
  }
  for (int i = 0; i < 4; ++i)
    CHECK(std::abs(counts[i] / double(draws) - 0.25) < 0.01);

  // fixed seed: identical index sequence across two runs
  std::vector<int> seq1, seq2;
  {
    Rng r(777);
    for (int i = 0; i < 100; ++i) {
      auto s2 = categorical_sample(u, r);
      seq1.push_back(s2.row * 2 + s2.col);
    }
  }
  {
    Rng r(777);
    for (int i = 0; i < 100; ++i) {
      auto s2 = categorical_sample(u, r);
      seq2.push_back(s2.row * 2 + s2.col);
    }
  }
  CHECK(seq1 == seq2);

  auto bad = T64::from({1, 2}, {0.9, 0.5});
  Rng r3(1);
  CHECK_THROWS_AS(categorical_sample(bad, r3), ValueError);

  // gradient reaches the selected entry through the returned probability
  auto logits = T64::leaf({2, 2}, {3.0, 0.0, 0.0, 0.0});
  {
    Tape64 tape;
    auto probs = softmax2d(logits);
    Rng r4(5);
    auto pick = categorical_sample(probs, r4);
    tape.backward(pick.prob);
    bool any = false;
    for (int i = 0; i < 4; ++i) any = any || logits.grad_value(i) != 0.0;
    CHECK(any);
  }
}

TEST_CASE("finite differences across the full op set") {
  // 20+ random instances spanning every differentiable op kind
  Rng rng(2024);
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    auto a = random_tensor<double>({3, 4}, rng, 0.2, 1.8);
    auto b = random_tensor<double>({3, 4}, rng, 0.3, 1.5);
    auto build = [&]() {
      auto t = add(a, b);
      t = mul(t, sub(a, T64::scalar(2.2)));
      t = div(t, add(b, T64::scalar(1.0)));
      t = add(t, pow(a, T64::scalar(2.0)));
      t = add(t, log(add(a, b)));
      t = add(t, exp(mul(b, T64::scalar(0.3))));
      t = add(t, sqrt(add(a, T64::scalar(0.5))));
      t = add(t, abs(sub(a, b)));
      t = add(t, relu(sub(b, a)));
      t = add(t, sigmoid(a));
      t = add(t, tanh(b));
      t = add(t, softplus(sub(a, b)));
      t = add(t, maximum(a, b));
      t = add(t, minimum(a, b));
      return mean(t);
    };
    worst = std::max(worst, max_rel_err_fd<double>(build, {a, b}, 1e-5, 8, 99 + trial));
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("tape replay determinism is bit-exact") {
  Rng rng(8);
  auto x = random_tensor<double>({4, 4}, rng);
  auto k = random_tensor<double>({2, 1, 3, 3}, rng);

  auto run = [&]() {
    x.zero_grad();
    k.zero_grad();
    Tape64 tape;
    auto img = reshape(x.detached(), {1, 4, 4});
    img.set_requires_grad(true);
    auto y = conv2d(img, k);
    auto p = softmax2d(reshape(slice(y, 0, 0, 1), {4, 4}));
    auto loss = sum(mul(p, y.rank() ? reshape(slice(y, 0, 1, 1), {4, 4}) : p));
    tape.backward(loss);
    return k.grad_values();
  };
  auto g1 = run();
  auto g2 = run();
  CHECK(std::memcmp(g1.data(), g2.data(), g1.size() * sizeof(double)) == 0);
}

TEST_CASE("empty reduction is an error") {
  CHECK_THROWS(sum(T64::from({0}, {})));
}
