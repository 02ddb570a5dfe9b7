#include <cmath>
#include <numeric>

#include "doctest.h"
#include "pfeed/autodiff.hpp"
#include "pfeed/errors.hpp"
#include "support.hpp"

using namespace pfeed;
using testing::DTensor;
using testing::fd_relative_error;
using testing::random_tensor;

TEST_SUITE("autodiff") {

TEST_CASE("matmul values") {
  auto a = DTensor::from({2, 2}, {1, 2, 3, 4});
  auto ones = DTensor::from({2, 1}, {1, 1});
  auto c = ad::matmul(a, ones);
  CHECK(c.shape() == ad::Shape{2, 1});
  CHECK(c.at(0) == 3);
  CHECK(c.at(1) == 7);

  auto eye = DTensor::from({2, 2}, {1, 0, 0, 1});
  auto m = DTensor::from({2, 2}, {0.5, -2, 7, 1.25});
  auto im = ad::matmul(eye, m);
  for (std::size_t i = 0; i < 4; ++i) CHECK(im.at(i) == m.at(i));
}

TEST_CASE("matmul shape mismatch") {
  auto a = DTensor::zeros({2, 3});
  auto b = DTensor::zeros({2, 3});
  CHECK_THROWS_AS(ad::matmul(a, b), DimensionError);
}

TEST_CASE("gradient of sum(A B) w.r.t. A is the row sums of B, broadcast") {
  std::mt19937_64 rng(1);
  auto a = random_tensor({3, 4}, rng);
  auto b = random_tensor({4, 2}, rng);
  ad::sum(ad::matmul(a, b)).backward();
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t k = 0; k < 4; ++k) {
      CHECK(a.grad()[i * 4 + k] == doctest::Approx(b.at(k * 2) + b.at(k * 2 + 1)).epsilon(1e-12));
    }
  }
}

TEST_CASE("elementwise values and domains") {
  auto z = ad::exp(DTensor::zeros({3}));
  for (std::size_t i = 0; i < 3; ++i) CHECK(z.at(i) == 1.0);

  auto x = DTensor::from({1}, {-1.0}, true);
  auto r = ad::relu(x);
  CHECK(r.item() == 0.0);
  ad::sum(r).backward();
  CHECK(x.grad()[0] == 0.0);

  auto two = DTensor::from({1}, {2.0}, true);
  ad::sum(ad::log(two)).backward();
  CHECK(two.grad()[0] == doctest::Approx(0.5).epsilon(1e-15));

  CHECK_THROWS_AS(ad::log(DTensor::from({2}, {1.0, 0.0})), DomainError);
  CHECK_THROWS_AS(ad::log(DTensor::from({1}, {-3.0})), DomainError);
  CHECK_THROWS_AS(ad::div(DTensor::from({2}, {1.0, 2.0}), DTensor::from({2}, {1.0, 0.0})), DomainError);
  CHECK_THROWS_AS(ad::add(DTensor::zeros({2}), DTensor::zeros({3})), DimensionError);
}

TEST_CASE("scalar operands combine with any shape") {
  auto a = DTensor::from({2, 2}, {1, 2, 3, 4});
  auto s = DTensor::scalar(10.0);
  auto c = ad::mul(a, s);
  CHECK(c.at(3) == 40);
  auto d = ad::sub(s, a);
  CHECK(d.at(0) == 9);
}

TEST_CASE("reductions") {
  CHECK(ad::sum(DTensor::zeros({4, 2})).item() == 0.0);
  CHECK(ad::mean(DTensor::from({3}, {1, 2, 3})).item() == 2.0);

  auto x = DTensor::from({3}, {1, 5, 2}, true);
  ad::sum(x).backward();
  for (auto g : x.grad()) CHECK(g == 1.0);

  auto y = DTensor::from({2, 3}, {1, 9, 2, 8, 0, 3}, true);
  auto m = ad::max(y, 1);
  CHECK(m.shape() == ad::Shape{2});
  CHECK(m.at(0) == 9);
  CHECK(m.at(1) == 8);
  ad::sum(m).backward();
  const std::vector<double> expect{0, 1, 0, 1, 0, 0};
  for (std::size_t i = 0; i < 6; ++i) CHECK(y.grad()[i] == expect[i]);

  auto s0 = ad::sum(DTensor::from({2, 3}, {1, 2, 3, 4, 5, 6}), 0);
  CHECK(s0.shape() == ad::Shape{3});
  CHECK(s0.at(2) == 9);
  CHECK_THROWS_AS(ad::sum(DTensor::zeros({2, 3}), 2), DimensionError);
}

TEST_CASE("softmax cross entropy") {
  CHECK(ad::softmax_cross_entropy_row(DTensor::full({8}, 0.3), 5).item() ==
        doctest::Approx(std::log(8.0)).epsilon(1e-14));
  CHECK(ad::softmax_cross_entropy_row(DTensor::from({1}, {42.0}), 0).item() == 0.0);
  const double expect = -std::log(std::exp(2.0) / (std::exp(2.0) + 2.0));
  CHECK(ad::softmax_cross_entropy_row(DTensor::from({3}, {2, 0, 0}), 0).item() ==
        doctest::Approx(expect).epsilon(1e-14));
  CHECK(expect == doctest::Approx(0.2395).epsilon(1e-3));

  // Large logits stay finite thanks to max subtraction.
  auto big = ad::softmax_cross_entropy_row(DTensor::from({2}, {1000.0, 0.0}), 1);
  CHECK(std::isfinite(big.item()));
  CHECK(big.item() == doctest::Approx(1000.0));

  // Gradient is softmax minus one-hot.
  auto l = DTensor::from({3}, {0.5, -1, 2}, true);
  ad::softmax_cross_entropy_row(l, 2).backward();
  double z = std::exp(0.5) + std::exp(-1.0) + std::exp(2.0);
  CHECK(l.grad()[0] == doctest::Approx(std::exp(0.5) / z));
  CHECK(l.grad()[2] == doctest::Approx(std::exp(2.0) / z - 1));
}

TEST_CASE("backward semantics") {
  auto x = DTensor::from({3}, {1, 2, 3}, true);
  ad::sum(x).backward();
  for (auto g : x.grad()) CHECK(g == 1.0);

  auto v = DTensor::from({1}, {3.0}, true);
  ad::sum(ad::mul(v, v)).backward();
  CHECK(v.grad()[0] == 6.0);

  // Repeated backward accumulates until zero_grad.
  auto w = DTensor::from({1}, {2.0}, true);
  auto loss = ad::sum(ad::scale(w, 3.0));
  loss.backward();
  loss.backward();
  CHECK(w.grad()[0] == 6.0);
  w.zero_grad();
  CHECK(w.grad()[0] == 0.0);
}

TEST_CASE("non-scalar loss is rejected") {
  auto x = DTensor::from({2}, {1, 2}, true);
  CHECK_THROWS_AS(ad::scale(x, 2.0).backward(), ContractError);
}

TEST_CASE("shared subexpressions accumulate") {
  auto a = DTensor::from({3}, {0.3, -0.7, 1.1}, true);
  auto b = DTensor::from({3}, {0.3, -0.7, 1.1}, true);
  auto f = [](const DTensor& x) { return ad::tanh(ad::mul(x, x)); };
  auto fa = f(a);
  ad::sum(ad::add(fa, fa)).backward();
  ad::sum(ad::scale(f(b), 2.0)).backward();
  for (std::size_t i = 0; i < 3; ++i) CHECK(a.grad()[i] == doctest::Approx(b.grad()[i]).epsilon(1e-14));
}

TEST_CASE("NoGradGuard records nothing") {
  auto x = DTensor::from({2}, {1, 2}, true);
  DTensor y;
  {
    ad::NoGradGuard guard;
    CHECK_FALSE(ad::grad_recording_enabled());
    y = ad::sum(ad::mul(x, x));
  }
  CHECK(ad::grad_recording_enabled());
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("finite-difference agreement for every differentiable op") {
  std::mt19937_64 rng(7);
  auto a = random_tensor({3, 4}, rng);
  auto b = random_tensor({4, 2}, rng);
  auto c = random_tensor({3, 4}, rng);
  auto pos = random_tensor({3, 4}, rng, 0.5, 2.0);
  auto vec = random_tensor({4}, rng);
  auto w = random_tensor({3, 4}, rng);  // fixed weights make every output element matter
  auto weighted = [&](const DTensor& t) {
    if (t.numel() == w.numel()) return ad::sum(ad::mul(ad::reshape(t, w.shape()), w));
    return ad::sum(ad::mul(t, t));
  };
  const std::vector<std::pair<std::string, std::function<DTensor()>>> cases = {
      {"matmul", [&] { return ad::sum(ad::mul(ad::matmul(a, b), ad::matmul(a, b))); }},
      {"transpose", [&] { return ad::sum(ad::matmul(ad::transpose(c), a)); }},
      {"add", [&] { return weighted(ad::add(a, c)); }},
      {"sub", [&] { return weighted(ad::sub(a, c)); }},
      {"mul", [&] { return weighted(ad::mul(a, c)); }},
      {"div", [&] { return weighted(ad::div(a, pos)); }},
      {"exp", [&] { return weighted(ad::exp(a)); }},
      {"log", [&] { return weighted(ad::log(pos)); }},
      {"tanh", [&] { return weighted(ad::tanh(a)); }},
      {"relu", [&] { return weighted(ad::relu(ad::add(a, DTensor::scalar(0.05)))); }},
      {"scale", [&] { return weighted(ad::scale(a, -2.5)); }},
      {"gelu", [&] { return weighted(ad::gelu(ad::scale(a, 3.0))); }},
      {"sum axis", [&] { return ad::add(ad::sum(ad::tanh(ad::sum(a, 0))), ad::sum(ad::tanh(ad::sum(c, 1)))); }},
      {"mean", [&] { return ad::mul(ad::mean(ad::mul(a, c)), ad::mean(a)); }},
      {"mean axis", [&] { return ad::sum(ad::mul(ad::mean(a, 1), ad::mean(c, 1))); }},
      {"max axis", [&] { return ad::sum(ad::mul(ad::max(a, 0), ad::max(a, 0))); }},
      {"softmax rows",
       [&] {
         std::vector<std::size_t> p{1, 2, 0};
         return ad::softmax_cross_entropy_rows(ad::matmul(a, ad::transpose(c)), std::span<const std::size_t>(p));
       }},
      {"add_bias", [&] { return weighted(ad::add_bias(a, vec)); }},
      {"gather_rows",
       [&] {
         std::vector<std::size_t> idx{2, 0, 2};
         return weighted(ad::gather_rows(a, std::span<const std::size_t>(idx)));
       }},
      {"concat",
       [&] {
         std::vector<DTensor> rows{a, c}, cols{a, c};
         auto r = ad::concat_rows(std::span<const DTensor>(rows));
         auto k = ad::concat_cols(std::span<const DTensor>(cols));
         return ad::add(ad::sum(ad::mul(r, r)), ad::sum(ad::tanh(k)));
       }},
      {"rowwise_dot", [&] { return ad::sum(ad::tanh(ad::rowwise_dot(a, c))); }},
      {"l2_normalize_rows", [&] { return weighted(ad::l2_normalize_rows(a)); }},
      {"layer_norm", [&] { return weighted(ad::layer_norm(a, vec, ad::scale(vec, 0.5))); }},
      {"reshape", [&] { return ad::sum(ad::matmul(ad::reshape(a, {4, 3}), ad::reshape(c, {3, 4}))); }},
  };
  for (const auto& [name, f] : cases) {
    CAPTURE(name);
    CHECK(fd_relative_error(f, {a, b, c, pos, vec}) < 1e-6);
  }
}

TEST_CASE("attention stays within its segment") {
  std::mt19937_64 rng(3);
  const std::size_t d = 4;
  auto qkv = random_tensor({5, 3 * d}, rng);
  std::vector<ad::Segment> segs{{0, 2}, {2, 3}};
  auto out = ad::multi_head_attention(qkv, std::span<const ad::Segment>(segs), 2);
  CHECK(out.shape() == ad::Shape{5, d});

  // Changing a row of the second segment leaves the first segment untouched.
  auto copy = DTensor::from(qkv.shape(), std::vector<double>(qkv.data().begin(), qkv.data().end()));
  copy.mutable_data()[4 * 3 * d + 1] += 1.0;
  auto out2 = ad::multi_head_attention(copy, std::span<const ad::Segment>(segs), 2);
  for (std::size_t i = 0; i < 2 * d; ++i) CHECK(out.at(i) == out2.at(i));
  bool changed = false;
  for (std::size_t i = 2 * d; i < 5 * d; ++i) changed |= out.at(i) != out2.at(i);
  CHECK(changed);

  auto wout = random_tensor({5, d}, rng);
  CHECK(fd_relative_error(
            [&] {
              return ad::sum(
                  ad::mul(ad::multi_head_attention(qkv, std::span<const ad::Segment>(segs), 2), wout));
            },
            {qkv}) < 1e-6);
}

TEST_CASE("layer norm normalizes rows") {
  auto x = DTensor::from({2, 4}, {1, 2, 3, 4, -5, 0, 5, 10});
  auto y = ad::layer_norm(x, DTensor::full({4}, 1.0), DTensor::zeros({4}));
  for (std::size_t r = 0; r < 2; ++r) {
    double m = 0, v = 0;
    for (std::size_t j = 0; j < 4; ++j) m += y.at(r * 4 + j) / 4;
    for (std::size_t j = 0; j < 4; ++j) v += (y.at(r * 4 + j) - m) * (y.at(r * 4 + j) - m) / 4;
    CHECK(m == doctest::Approx(0).epsilon(1e-12));
    CHECK(v == doctest::Approx(1).epsilon(1e-4));
  }
}

TEST_CASE("dropout") {
  std::mt19937_64 rng(5);
  auto x = DTensor::full({1000}, 1.0);
  auto same = ad::dropout(x, 0.0, rng);
  for (std::size_t i = 0; i < 1000; ++i) CHECK(same.at(i) == 1.0);
  auto y = ad::dropout(x, 0.5, rng);
  std::size_t zeros = 0;
  for (std::size_t i = 0; i < 1000; ++i) {
    CHECK((y.at(i) == 0.0 || y.at(i) == 2.0));
    zeros += y.at(i) == 0.0;
  }
  CHECK(zeros > 400);
  CHECK(zeros < 600);
  CHECK_THROWS_AS(ad::dropout(x, 1.0, rng), ContractError);
}

TEST_CASE("forward is bitwise deterministic") {
  std::mt19937_64 r1(9), r2(9);
  auto a = random_tensor({6, 5}, r1), b = random_tensor({6, 5}, r2);
  auto f = [](const DTensor& t) { return ad::layer_norm(ad::gelu(ad::matmul(t, ad::transpose(t))), DTensor::full({6}, 1.0), DTensor::zeros({6})); };
  auto ya = f(a), yb = f(b);
  for (std::size_t i = 0; i < ya.numel(); ++i) CHECK(ya.at(i) == yb.at(i));
}

TEST_CASE("library gradient_check agrees") {
  std::mt19937_64 rng(2);
  std::vector<DTensor> params{random_tensor({3, 3}, rng)};
  auto p = params[0];
  CHECK(ad::gradient_check([&] { return ad::sum(ad::tanh(ad::matmul(p, p))); }, params) < 1e-7);
}

TEST_CASE("constructor contracts") {
  CHECK_THROWS_AS(DTensor::from({2, 2}, {1, 2, 3}), DimensionError);
  CHECK_THROWS_AS(DTensor::zeros({0, 3}), DimensionError);
  CHECK_THROWS_AS(DTensor::zeros({2}).item(), DimensionError);
  CHECK_THROWS_AS(ad::reshape(DTensor::zeros({2, 3}), {4, 2}), DimensionError);
}

}  // TEST_SUITE
