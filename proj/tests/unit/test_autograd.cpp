#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>

#include "hierdoc/autograd.hpp"
#include "oracles.hpp"

using namespace hierdoc;
using oracle::Mat;
using oracle::Vec;

namespace {

Array<double> random_array(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Array<double> a(std::move(shape));
  for (auto& v : a.values()) v = n(rng);
  return a;
}

// Weighted sum so every output element gets a distinct upstream gradient.
ad::Var weighted_sum(ad::Tape<double>& t, ad::Var y, const Array<double>& w) {
  return ad::sum(t, ad::mul(t, y, t.constant(w)));
}

void require_gradcheck(const oracle::GradCheck& g) {
  INFO(g.worst);
  CHECK(g.checked > 0);
  CHECK(g.max_rel_error <= 1e-4);
}

}  // namespace

TEST_CASE("array buffers are 64-byte aligned") {
  auto aligned = [](const void* p) { return reinterpret_cast<std::uintptr_t>(p) % 64 == 0; };
  for (std::size_t n : {1, 3, 17, 1000}) {
    CHECK(aligned(Array<float>({n}).data()));
    CHECK(aligned(Array<double>({n, 2}).data()));
  }
  const std::vector<float> v = {1, 2, 3};
  const Array<float> copied({3}, v);
  CHECK(aligned(copied.data()));
  CHECK(aligned(copied.cast<double>().data()));
  CHECK(aligned(copied.reshaped({1, 3}).data()));
}

TEST_CASE("softmax examples") {
  const Array<double> u = softmax(Array<double>({3}, 0.0));
  for (double v : u.values()) CHECK(v == doctest::Approx(1.0 / 3).epsilon(1e-15));

  std::mt19937_64 rng(1);
  const Array<double> x = random_array({5}, rng);
  Array<double> shifted = x;
  for (auto& v : shifted.values()) v += 1000.0;
  const Array<double> a = softmax(x), b = softmax(shifted);
  for (std::size_t i = 0; i < 5; ++i) CHECK(std::abs(a[i] - b[i]) <= 1e-6);

  const Vec want = oracle::softmax(oracle::to_vec(x));
  for (std::size_t i = 0; i < 5; ++i) CHECK(std::abs(a[i] - want[i]) <= 1e-10);
}

TEST_CASE("softmax along a leading axis and errors") {
  std::mt19937_64 rng(2);
  const Array<double> x = random_array({3, 4}, rng);
  const Array<double> s = softmax(x, 0);
  for (std::size_t c = 0; c < 4; ++c) {
    double total = 0;
    for (std::size_t r = 0; r < 3; ++r) total += s(r, c);
    CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
  }
  CHECK_THROWS_AS(softmax(x, 2), std::invalid_argument);
  Array<double> bad = x;
  bad[3] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(softmax(bad), NumericError);
}

TEST_CASE("layer_norm examples") {
  const Array<double> ones({4}, 1.0), zeros({4}, 0.0);
  const Array<double> c = layer_norm(Array<double>({1, 4}, 5.0), ones, zeros);
  for (double v : c.values()) CHECK(v == 0.0);

  const Array<double> r = layer_norm(Array<double>({1, 2}, {1.0, -1.0}), Array<double>({2}, 1.0),
                                     Array<double>({2}, 0.0));
  CHECK(r[0] == doctest::Approx(1.0).epsilon(1e-10));
  CHECK(r[1] == doctest::Approx(-1.0).epsilon(1e-10));

  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const Array<double> x = random_array({3, 7}, rng, 2.0), g = random_array({7}, rng),
                        b = random_array({7}, rng);
    const Array<double> got = layer_norm(x, g, b, 1e-12);
    const Mat want = oracle::layer_norm(oracle::to_mat(x), oracle::to_vec(g), oracle::to_vec(b), 1e-12);
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 7; ++j) CHECK(std::abs(got(i, j) - want[i][j]) <= 1e-10);
  }
  CHECK_THROWS_AS(layer_norm(Array<double>({2, 3}), ones, zeros), std::invalid_argument);
}

TEST_CASE("multi_head_attention examples") {
  std::mt19937_64 rng(4);
  const Array<double> q = random_array({2, 4}, rng), k = random_array({3, 4}, rng),
                      v = random_array({3, 4}, rng);
  const std::vector<std::uint8_t> one_key = {0, 1, 0};
  const Array<double> single = multi_head_attention(q, k, v, one_key, 2);
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t c = 0; c < 4; ++c) CHECK(std::abs(single(r, c) - v(1, c)) <= 1e-12);

  Array<double> same_k = Array<double>::matrix(3, 4, 0.3);
  const Array<double> uniform = multi_head_attention(q, same_k, v, {}, 1);
  for (std::size_t c = 0; c < 4; ++c) {
    const double mean = (v(0, c) + v(1, c) + v(2, c)) / 3.0;
    CHECK(std::abs(uniform(0, c) - mean) <= 1e-12);
  }

  for (int trial = 0; trial < 50; ++trial) {
    const Array<double> q3 = random_array({3, 2}, rng), k3 = random_array({3, 2}, rng),
                        v3 = random_array({3, 2}, rng);
    const Array<double> got = multi_head_attention(q3, k3, v3, {}, 1);
    const Mat want =
        oracle::attention(oracle::to_mat(q3), oracle::to_mat(k3), oracle::to_mat(v3), {}, 1);
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 2; ++j) CHECK(std::abs(got(i, j) - want[i][j]) <= 1e-10);
  }

  CHECK_THROWS_AS(multi_head_attention(q, k, v, {}, 3), std::invalid_argument);
  const std::vector<std::uint8_t> none = {0, 0, 0};
  CHECK_THROWS_AS(multi_head_attention(q, k, v, none, 2), std::invalid_argument);
}

TEST_CASE("masked keys receive zero weight") {
  std::mt19937_64 rng(5);
  const Array<double> q = random_array({4, 4}, rng), k = random_array({5, 4}, rng);
  Array<double> v = random_array({5, 4}, rng);
  const std::vector<std::uint8_t> mask = {1, 1, 0, 1, 0};
  const Array<double> a = multi_head_attention(q, k, v, mask, 2);
  v(2, 1) += 50.0;
  v(4, 3) -= 7.0;
  Array<double> k2 = k;
  k2(4, 0) = 99.0;
  const Array<double> b = multi_head_attention(q, k2, v, mask, 2);
  CHECK(a == b);
}

TEST_CASE("backward trivial examples") {
  ad::ParameterSet<double> ps;
  auto& x = ps.add("x", Array<double>({2, 3}, 0.7));
  auto& unused = ps.add("unused", Array<double>({4}, 1.0));
  ps.zero_grad();
  ad::Tape<double> t;
  t.parameter(unused);
  t.backward(ad::sum(t, t.parameter(x)));
  for (double g : x.grad.values()) CHECK(g == 1.0);
  for (double g : unused.grad.values()) CHECK(g == 0.0);

  ad::Tape<double> t2;
  CHECK_THROWS_AS(t2.backward(t2.parameter(x)), std::invalid_argument);
}

TEST_CASE("fan-out accumulates additively") {
  ad::ParameterSet<double> ps;
  auto& x = ps.add("x", Array<double>({3}, {1.0, 2.0, 3.0}));
  ps.zero_grad();
  ad::Tape<double> t;
  const ad::Var v = t.parameter(x);
  t.backward(ad::sum(t, ad::mul(t, v, v)));  // d/dx x^2 = 2x
  CHECK(x.grad[0] == 2.0);
  CHECK(x.grad[2] == 6.0);
}

TEST_CASE("primitive gradients match finite differences") {
  std::mt19937_64 rng(11);
  ad::ParameterSet<double> ps;
  auto& a = ps.add("a", random_array({3, 4}, rng));
  auto& b = ps.add("b", random_array({4, 5}, rng));
  auto& bias = ps.add("bias", random_array({5}, rng));
  auto& c = ps.add("c", random_array({3, 4}, rng));
  auto& tile = ps.add("tile", random_array({1, 4}, rng));
  const Array<double> w35 = random_array({3, 5}, rng), w34 = random_array({3, 4}, rng);

  SUBCASE("matmul") {
    require_gradcheck(oracle::check_gradients(ps, [&](ad::Tape<double>& t) {
      return weighted_sum(t, ad::matmul(t, t.parameter(a), t.parameter(b)), w35);
    }));
  }
  SUBCASE("linear") {
    require_gradcheck(oracle::check_gradients(ps, [&](ad::Tape<double>& t) {
      return weighted_sum(t, ad::linear(t, t.parameter(a), t.parameter(b), t.parameter(bias)), w35);
    }));
  }
  SUBCASE("add, mul, scale, add_tiled") {
    require_gradcheck(oracle::check_gradients(ps, [&](ad::Tape<double>& t) {
      ad::Var y = ad::add(t, t.parameter(a), ad::mul(t, t.parameter(a), t.parameter(c)));
      y = ad::add_tiled(t, ad::scale(t, y, 0.5), t.parameter(tile));
      return weighted_sum(t, y, w34);
    }));
  }
  SUBCASE("pointwise nonlinearities") {
    require_gradcheck(oracle::check_gradients(ps, [&](ad::Tape<double>& t) {
      const ad::Var x = t.parameter(a);
      ad::Var y = ad::add(t, ad::tanh(t, x), ad::sigmoid(t, x));
      y = ad::add(t, y, ad::gelu(t, x));
      y = ad::add(t, y, ad::relu(t, ad::add(t, x, t.constant(Array<double>({3, 4}, 0.05)))));
      return weighted_sum(t, y, w34);
    }));
  }
  SUBCASE("layer_norm") {
    auto& gain = ps.add("gain", random_array({4}, rng));
    auto& beta = ps.add("beta", random_array({4}, rng));
    require_gradcheck(oracle::check_gradients(ps, [&](ad::Tape<double>& t) {
      return weighted_sum(
          t, ad::layer_norm(t, t.parameter(a), t.parameter(gain), t.parameter(beta), 1e-12), w34);
    }));
  }
  SUBCASE("softmax_rows") {
    require_gradcheck(oracle::check_gradients(ps, [&](ad::Tape<double>& t) {
      return weighted_sum(t, ad::softmax_rows(t, t.parameter(a)), w34);
    }));
  }
  SUBCASE("embedding, gather_rows, slice_cols, mean_groups") {
    auto& table = ps.add("table", random_array({6, 4}, rng));
    const std::vector<std::int32_t> ids = {5, 0, 5, 2};
    const Array<double> w = random_array({2, 2}, rng);
    require_gradcheck(oracle::check_gradients(ps, [&](ad::Tape<double>& t) {
      ad::Var e = ad::embedding(t, t.parameter(table), std::span<const std::int32_t>(ids));
      e = ad::gather_rows(t, e, {3, 1, 0, 0});
      e = ad::slice_cols(t, e, 1, 2);
      return weighted_sum(t, ad::mean_groups(t, e, 2), w);
    }));
  }
  SUBCASE("dropout with a fixed mask") {
    require_gradcheck(oracle::check_gradients(ps, [&](ad::Tape<double>& t) {
      std::mt19937_64 mask_rng(99);
      return weighted_sum(t, ad::dropout(t, t.parameter(a), 0.3, &mask_rng), w34);
    }));
  }
  SUBCASE("cross_entropy") {
    const std::vector<int> labels = {1, 4, 0};
    require_gradcheck(oracle::check_gradients(ps, [&](ad::Tape<double>& t) {
      return ad::cross_entropy(t, ad::matmul(t, t.parameter(a), t.parameter(b)),
                               std::span<const int>(labels));
    }));
  }
  SUBCASE("attention with mask, groups and heads") {
    auto& q = ps.add("q", random_array({4, 4}, rng));
    auto& k = ps.add("k", random_array({6, 4}, rng));
    auto& v = ps.add("v", random_array({6, 4}, rng));
    const std::vector<std::uint8_t> mask = {1, 1, 0, 1, 1, 1};
    const Array<double> w = random_array({4, 4}, rng);
    require_gradcheck(oracle::check_gradients(ps, [&](ad::Tape<double>& t) {
      ad::AttentionOptions opts;
      opts.groups = 2;
      opts.heads = 2;
      return weighted_sum(t,
                          ad::attention(t, t.parameter(q), t.parameter(k), t.parameter(v),
                                        std::span<const std::uint8_t>(mask), opts),
                          w);
    }));
  }
}

TEST_CASE("inference tape keeps no closures but gives equal values") {
  std::mt19937_64 rng(12);
  ad::ParameterSet<double> ps;
  auto& a = ps.add("a", random_array({3, 3}, rng));
  ad::Tape<double> rec, inf(false);
  const Array<double> x = rec.value(ad::gelu(rec, rec.parameter(a)));
  const Array<double> y = inf.value(ad::gelu(inf, inf.parameter(a)));
  CHECK(x == y);
  CHECK_FALSE(inf.recording());
}
