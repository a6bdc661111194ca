#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "alea/adam.hpp"
#include "alea/grad_check.hpp"
#include "alea/ops.hpp"
#include "alea/util.hpp"

using namespace alea;

namespace {

Matrixd random_matrix(std::mt19937_64& rng, Index r, Index c, double lo = -2.0, double hi = 2.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Matrixd m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

Tensord leaf(std::mt19937_64& rng, Index r, Index c) { return Tensord(random_matrix(rng, r, c), true); }

double check(const std::function<Tensord()>& f, std::vector<Tensord> params) {
  GradCheckOptions o;
  o.eps = 1e-5;
  o.coords_per_param = 1000;
  return grad_check<double>(f, std::span<Tensord>(params), o).max_rel_error;
}

// Long double reference for a softmax row.
std::vector<long double> softmax_ref(const std::vector<double>& x) {
  long double mx = x[0];
  for (double v : x) mx = std::max(mx, static_cast<long double>(v));
  std::vector<long double> out;
  long double z = 0;
  for (double v : x) z += std::exp(static_cast<long double>(v) - mx);
  for (double v : x) out.push_back(std::exp(static_cast<long double>(v) - mx) / z);
  return out;
}

}  // namespace

TEST_CASE("matmul") {
  Tensorf a(Matrixf{{1, 2}});
  Tensorf b(Matrixf{{3}, {4}});
  CHECK(matmul(a, b).item() == doctest::Approx(11.0));

  Matrixf m{{1, 2}, {3, 4}};
  CHECK(matmul(Tensorf(m), Tensorf(Matrixf::Identity(2, 2))).value() == m);
  CHECK(matmul(Tensorf(m), Tensorf(Matrixf::Zero(2, 2))).value().isZero());
  CHECK_THROWS_AS(matmul(Tensorf(Matrixf::Zero(2, 3)), Tensorf(Matrixf::Zero(2, 3))), Error);
}

TEST_CASE("softmax_rows") {
  Tensord x(Matrixd{{0, 0, 0}});
  auto y = softmax_rows(x).value();
  for (Index j = 0; j < 3; ++j) CHECK(y(0, j) == doctest::Approx(1.0 / 3.0));

  Tensorf big(Matrixf{{5.0f, 1005.0f}});
  auto yb = softmax_rows(big).value();
  CHECK(yb(0, 0) < 1e-6f);
  CHECK(yb(0, 1) == doctest::Approx(1.0));

  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    Matrixd row = random_matrix(rng, 1, 11, -6, 6);
    Matrixf rowf = row.cast<float>();
    std::vector<double> xs;
    for (Index j = 0; j < row.cols(); ++j) xs.push_back(static_cast<double>(rowf(0, j)));
    auto ref = softmax_ref(xs);
    auto got = softmax_rows(Tensorf(rowf)).value();
    double total = 0;
    for (Index j = 0; j < row.cols(); ++j) {
      CHECK(std::abs(static_cast<double>(got(0, j)) - static_cast<double>(ref[static_cast<std::size_t>(j)])) < 1e-6);
      total += got(0, j);
    }
    CHECK(std::abs(total - 1.0) < 1e-6);
  }

  Tensorf bad(Matrixf{{0.0f, std::nanf("")}});
  CHECK_THROWS_AS(softmax_rows(bad), Error);
}

TEST_CASE("cross_entropy_nll") {
  const std::vector<std::uint8_t> one{1};
  Tensorf certain(Matrixf{{0.0f, 100.0f, 0.0f}});
  const std::vector<int> t1{1};
  CHECK(cross_entropy_nll(certain, std::span<const int>(t1), std::span<const std::uint8_t>(one)).item() <
        1e-6f);

  Tensorf uniform(Matrixf::Zero(1, 8));
  const std::vector<int> t3{3};
  CHECK(cross_entropy_nll(uniform, std::span<const int>(t3), std::span<const std::uint8_t>(one)).item() ==
        doctest::Approx(std::log(8.0)).epsilon(1e-6));

  // Scalar loop over masked-in rows.
  std::mt19937_64 rng(3);
  Matrixd logits = random_matrix(rng, 6, 9, -3, 3);
  std::vector<int> targets{0, 4, 8, 2, 2, 7};
  std::vector<std::uint8_t> mask{1, 0, 1, 1, 0, 1};
  long double expected = 0;
  int active = 0;
  for (int t = 0; t < 6; ++t) {
    if (!mask[static_cast<std::size_t>(t)]) continue;
    long double z = 0;
    for (int v = 0; v < 9; ++v) z += std::exp(static_cast<long double>(logits(t, v)));
    expected += std::log(z) - logits(t, targets[static_cast<std::size_t>(t)]);
    ++active;
  }
  expected /= active;
  CHECK(cross_entropy_nll(Tensord(logits), std::span<const int>(targets), std::span<const std::uint8_t>(mask))
            .item() == doctest::Approx(static_cast<double>(expected)).epsilon(1e-12));

  std::vector<std::uint8_t> none(6, 0);
  CHECK_THROWS_AS(cross_entropy_nll(Tensord(logits), std::span<const int>(targets), std::span<const std::uint8_t>(none)),
                  Error);
}

TEST_CASE("kl_divergence") {
  std::mt19937_64 rng(11);
  Matrixd p = random_matrix(rng, 4, 6, -3, 3);
  std::vector<std::uint8_t> mask(4, 1);
  const std::span<const std::uint8_t> m(mask);
  CHECK(std::abs(kl_divergence(Tensord(p), Tensord(p), m).item()) < 1e-7);

  Tensorf extreme(Matrixf{{60.0f, -60.0f}});
  Tensorf flat(Matrixf::Zero(1, 2));
  std::vector<std::uint8_t> one{1};
  CHECK(kl_divergence(extreme, flat, std::span<const std::uint8_t>(one)).item() ==
        doctest::Approx(std::log(2.0)).epsilon(1e-6));

  // Long double summation oracle.
  Matrixd q = random_matrix(rng, 4, 6, -3, 3);
  Matrixf pf = p.cast<float>(), qf = q.cast<float>();
  long double expected = 0;
  for (Index t = 0; t < 4; ++t) {
    long double zp = 0, zq = 0;
    for (Index v = 0; v < 6; ++v) {
      zp += std::exp(static_cast<long double>(pf(t, v)));
      zq += std::exp(static_cast<long double>(qf(t, v)));
    }
    for (Index v = 0; v < 6; ++v) {
      const long double lp = pf(t, v) - std::log(zp);
      const long double lq = qf(t, v) - std::log(zq);
      expected += std::exp(lp) * (lp - lq);
    }
  }
  expected /= 4;
  CHECK(std::abs(kl_divergence(Tensorf(pf), Tensorf(qf), m).item() - static_cast<double>(expected)) < 1e-6);

  for (int trial = 0; trial < 50; ++trial) {
    Tensorf a(random_matrix(rng, 3, 5, -4, 4).cast<float>());
    Tensorf b(random_matrix(rng, 3, 5, -4, 4).cast<float>());
    std::vector<std::uint8_t> m3(3, 1);
    CHECK(kl_divergence(a, b, std::span<const std::uint8_t>(m3)).item() >= -1e-7f);
  }

  // The reference side receives no gradient.
  Tensord pl(p, true), ql(q, true);
  kl_divergence(pl, ql, m).backward();
  CHECK(pl.has_grad());
  CHECK_FALSE(ql.has_grad());
  CHECK_THROWS_AS(kl_divergence(Tensord(p), Tensord(Matrixd::Zero(4, 5)), m), Error);
}

TEST_CASE("backward basics") {
  std::mt19937_64 rng(5);
  Tensord x = leaf(rng, 3, 4);
  sum(x).backward();
  CHECK(x.grad().isApprox(Matrixd::Ones(3, 4)));

  Tensord y = leaf(rng, 2, 5);
  sum(mul(y, y)).backward();
  CHECK(y.grad().isApprox(2.0 * y.value()));

  // Two backward passes without zeroing double the gradient exactly.
  Tensord z = leaf(rng, 2, 2);
  auto loss = sum(mul(z, z));
  loss.backward();
  Matrixd once = z.grad();
  loss.backward();
  CHECK(z.grad() == 2.0 * once);

  // A tensor feeding two consumers receives both partials.
  Tensord w = leaf(rng, 2, 3);
  add(sum(scale(w, 3.0)), sum(mul(w, w))).backward();
  CHECK(w.grad().isApprox((3.0 + 2.0 * w.value().array()).matrix()));

  CHECK_THROWS_AS(leaf(rng, 2, 2).backward(), Error);
}

TEST_CASE("primitive gradients match finite differences") {
  std::mt19937_64 rng(21);
  const double tol = 1e-3;
  {
    auto a = leaf(rng, 3, 4), b = leaf(rng, 4, 2);
    CHECK(check([&] { return sum(mul(matmul(a, b), matmul(a, b))); }, {a, b}) < tol);
  }
  {
    auto a = leaf(rng, 3, 4), b = leaf(rng, 3, 4), bias = leaf(rng, 1, 4);
    auto w = Tensord(random_matrix(rng, 3, 4));
    CHECK(check([&] { return sum(mul(add_row(add(a, b), bias), w)); }, {a, b, bias}) < tol);
  }
  {
    auto x = leaf(rng, 3, 5);
    auto w = Tensord(random_matrix(rng, 3, 5));
    CHECK(check([&] { return sum(mul(gelu(x), w)); }, {x}) < tol);
    CHECK(check([&] { return mean(mul(scale(x, 0.7), x)); }, {x}) < tol);
    CHECK(check([&] { return sum(mul(softmax_rows(x), w)); }, {x}) < tol);
  }
  {
    auto x = leaf(rng, 4, 6), g = leaf(rng, 1, 6), b = leaf(rng, 1, 6);
    auto w = Tensord(random_matrix(rng, 4, 6));
    CHECK(check([&] { return sum(mul(layer_norm(x, g, b), w)); }, {x, g, b}) < tol);
  }
  {
    auto table = leaf(rng, 7, 3);
    std::vector<int> ids{2, 0, 2, 6};
    auto w = Tensord(random_matrix(rng, 4, 3));
    CHECK(check([&] { return sum(mul(gather_rows(table, std::span<const int>(ids)), w)); }, {table}) < tol);
  }
  {
    auto a = leaf(rng, 2, 3), b = leaf(rng, 3, 3);
    auto w = Tensord(random_matrix(rng, 3, 3));
    CHECK(check(
              [&] {
                std::vector<Tensord> parts{a, b};
                auto c = concat_rows(std::span<const Tensord>(parts));
                return sum(mul(slice_rows(c, 1, 3), w));
              },
              {a, b}) < tol);
  }
  {
    auto q = leaf(rng, 5, 8), k = leaf(rng, 5, 8), v = leaf(rng, 5, 8);
    auto w = Tensord(random_matrix(rng, 5, 8));
    CHECK(check([&] { return sum(mul(causal_attention(q, k, v, 2), w)); }, {q, k, v}) < tol);
  }
  {
    auto logits = leaf(rng, 5, 7);
    std::vector<int> t{1, 6, 0, 3, 3};
    std::vector<std::uint8_t> m{1, 1, 0, 1, 1};
    CHECK(check([&] { return cross_entropy_nll(logits, std::span<const int>(t), std::span<const std::uint8_t>(m)); },
                {logits}) < tol);
    auto ref = Tensord(random_matrix(rng, 5, 7));
    CHECK(check([&] { return kl_divergence(logits, ref, std::span<const std::uint8_t>(m)); }, {logits}) < tol);
  }
  {
    auto x = leaf(rng, 1, 1), y = leaf(rng, 1, 1);
    CHECK(check(
              [&] {
                std::vector<Tensord> terms{mul(x, y), scale(x, 2.0)};
                return add_scalars(std::span<const Tensord>(terms));
              },
              {x, y}) < tol);
  }
}

TEST_CASE("grad_check on a linear function is exact") {
  std::mt19937_64 rng(2);
  auto x = leaf(rng, 3, 3);
  auto w = Tensord(random_matrix(rng, 3, 3));
  CHECK(check([&] { return sum(mul(x, w)); }, {x}) <= 1e-5);
}

TEST_CASE("gelu and layer_norm reference values") {
  // 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))) at x = 1.
  auto g = gelu(Tensord(Matrixd{{0.0, 1.0}})).value();
  CHECK(g(0, 0) == 0.0);
  CHECK(g(0, 1) == doctest::Approx(0.8411919906082768).epsilon(1e-12));

  Tensord x(Matrixd{{1.0, 2.0, 3.0}});
  auto y = layer_norm(x, Tensord(Matrixd::Ones(1, 3)), Tensord(Matrixd::Zero(1, 3)), 1e-5).value();
  const double s = 1.0 / std::sqrt(2.0 / 3.0 + 1e-5);
  CHECK(y(0, 0) == doctest::Approx(-s));
  CHECK(y(0, 1) == doctest::Approx(0.0));
  CHECK(y(0, 2) == doctest::Approx(s));
}

TEST_CASE("no-grad mode builds no graph") {
  Tensord x(Matrixd::Ones(2, 2), true);
  NoGradGuard guard;
  auto y = sum(mul(x, x));
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("adam") {
  AdamOptions o;
  o.lr = 0.1;
  {
    std::vector<Tensord> p{Tensord(Matrixd{{1.5, -2.0}}, true)};
    auto state = make_adam_state<double>(std::span<const Tensord>(p), o);
    p[0].node()->grad = Matrixd::Zero(1, 2);
    adam_step<double>(std::span<Tensord>(p), state);
    CHECK(p[0].value() == Matrixd{{1.5, -2.0}});
    CHECK(state.step == 1);
  }
  {
    // Bias correction makes the first step lr * g / (|g| + eps).
    std::vector<Tensord> p{Tensord(Matrixd{{0.5}}, true)};
    auto state = make_adam_state<double>(std::span<const Tensord>(p), o);
    p[0].node()->grad = Matrixd{{1.0}};
    adam_step<double>(std::span<Tensord>(p), state);
    CHECK(p[0].item() == doctest::Approx(0.5 - 0.1 / (1.0 + 1e-8)).epsilon(1e-12));
  }
  {
    std::vector<Tensord> p{Tensord(Matrixd{{1.0}}, true)};
    auto state = make_adam_state<double>(std::span<const Tensord>(p), o);
    for (int i = 0; i < 200; ++i) {
      p[0].clear_grad();
      sum(mul(p[0], p[0])).backward();
      adam_step<double>(std::span<Tensord>(p), state);
    }
    CHECK(std::abs(p[0].item()) < 1e-2);
    CHECK(state.step == 200);
  }
  {
    std::vector<Tensord> p{Tensord(Matrixd::Zero(2, 2), true)};
    auto state = make_adam_state<double>(std::span<const Tensord>(p), o);
    std::vector<Tensord> other{Tensord(Matrixd::Zero(2, 2), true), Tensord(Matrixd::Zero(1, 1), true)};
    CHECK_THROWS_AS(adam_step<double>(std::span<Tensord>(other), state), Error);
  }
}

TEST_CASE("sha256 and seed derivation") {
  CHECK(sha256_hex(std::string_view("abc")) ==
        "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  CHECK(sha256_hex(std::string_view("")) ==
        "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  CHECK(derive_seed(42, "pretrain") == derive_seed(42, "pretrain"));
  CHECK(derive_seed(42, "pretrain") != derive_seed(42, "edit"));
  CHECK(derive_seed(42, "pretrain") != derive_seed(43, "pretrain"));
}
