#include <cmath>

#include "doctest.h"
#include "pfeed/encoder.hpp"
#include "pfeed/errors.hpp"
#include "support.hpp"

using namespace pfeed;
using model::Encoder;
using model::EncoderConfig;
using model::Role;

namespace {

EncoderConfig tiny(model::EncoderMode mode = model::EncoderMode::simo) {
  EncoderConfig c;
  c.layers = 1;
  c.heads = 2;
  c.hidden_dim = 8;
  c.vocab_size = 24;
  c.max_seq = 9;
  c.mode = mode;
  return c;
}

template <typename V>
double norm(const V& v) {
  double s = 0;
  for (auto x : v) s += double(x) * double(x);
  return std::sqrt(s);
}

}  // namespace

TEST_SUITE("encoder") {

TEST_CASE("parameter count") {
  // Token table 24x8, positions 9x8, one block of 872 scalars, final norm 16,
  // output projection 8x8+8, loss scale 1.
  Encoder<double> enc(tiny(), 1);
  CHECK(enc.parameter_count() == 1225);
  CHECK(tiny().closed_form_parameter_count() == 1225);
  CHECK(enc.parameter_names().size() == enc.parameters().size());
  CHECK(enc.log_beta().item() == doctest::Approx(std::log(10.0)));
}

TEST_CASE("outputs are unit vectors, even for empty metadata") {
  Encoder<float> enc(tiny(), 3);
  auto e = enc.forward_simo({});
  CHECK(e.q_view.size() == 8);
  CHECK(norm(e.q_view) == doctest::Approx(1).epsilon(1e-5));
  CHECK(norm(e.q_buy) == doctest::Approx(1).epsilon(1e-5));
  CHECK(norm(e.target) == doctest::Approx(1).epsilon(1e-5));

  Encoder<float> siso(tiny(model::EncoderMode::siso), 3);
  CHECK(norm(siso.forward_siso({}, Role::view_query)) == doctest::Approx(1).epsilon(1e-5));
  CHECK(norm(siso.forward_siso({7, 8, 9}, Role::target)) == doctest::Approx(1).epsilon(1e-5));
}

TEST_CASE("query selection follows the relation") {
  Encoder<float> enc(tiny(), 3);
  auto e = enc.forward_simo({5, 6});
  CHECK(&e.query(Relation::view) == &e.q_view);
  CHECK(&e.query(Relation::buy) == &e.q_buy);
  CHECK(model::query_role(Relation::view) == Role::view_query);
  CHECK(model::query_role(Relation::buy) == Role::buy_query);
}

TEST_CASE("determinism") {
  Encoder<float> a(tiny(), 11), b(tiny(), 11), c(tiny(), 12);
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    auto x = a.parameters()[i].data(), y = b.parameters()[i].data();
    CHECK(std::equal(x.begin(), x.end(), y.begin()));
  }
  auto e1 = a.forward_simo({5, 6, 7});
  auto e2 = a.forward_simo({5, 6, 7});
  CHECK(e1.q_view == e2.q_view);
  CHECK(e1.target == e2.target);
  CHECK(c.forward_simo({5, 6, 7}).q_view != e1.q_view);
}

TEST_CASE("token order matters") {
  Encoder<double> enc(tiny(), 4);
  CHECK(enc.forward_simo({5, 6, 7}).target != enc.forward_simo({7, 6, 5}).target);
}

TEST_CASE("SIMO roles differ, and batching matches single passes") {
  Encoder<double> enc(tiny(), 5);
  std::vector<tok::TokenIds> items{{5, 6}, {9}, {}, {10, 11, 12, 13}};
  auto all = enc.embed_all_roles(items);
  CHECK(all.shape() == ad::Shape{12, 8});
  for (std::size_t i = 0; i < items.size(); ++i) {
    auto single = enc.forward_simo(items[i]);
    for (std::size_t j = 0; j < 8; ++j) {
      CHECK(all.at((3 * i) * 8 + j) == doctest::Approx(single.q_view[j]).epsilon(1e-5));
      CHECK(all.at((3 * i + 2) * 8 + j) == doctest::Approx(single.target[j]).epsilon(1e-5));
    }
  }
  auto e = enc.forward_simo({5, 6});
  CHECK(e.q_view != e.target);
}

TEST_CASE("SISO output depends only on its own role token") {
  Encoder<double> enc(tiny(model::EncoderMode::siso), 6);
  std::vector<tok::TokenIds> items{{5, 6}, {5, 6}};
  std::vector<Role> roles{Role::view_query, Role::target};
  auto out = enc.embed_roles(items, roles);
  auto v = enc.forward_siso({5, 6}, Role::view_query);
  auto t = enc.forward_siso({5, 6}, Role::target);
  for (std::size_t j = 0; j < 8; ++j) {
    CHECK(out.at(j) == doctest::Approx(v[j]).epsilon(1e-12));
    CHECK(out.at(8 + j) == doctest::Approx(t[j]).epsilon(1e-12));
  }
  CHECK(v != t);
}

TEST_CASE("embed_items matches forward_simo") {
  Encoder<float> enc(tiny(), 8);
  std::vector<tok::TokenIds> items{{5}, {6, 7}, {8, 9, 10}};
  std::vector<std::string> ids{"a", "b", "c"};
  auto out = enc.embed_items(items, ids, 2);
  REQUIRE(out.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(out[i].item_id == ids[i]);
    auto ref = enc.forward_simo(items[i]);
    for (std::size_t j = 0; j < 8; ++j) CHECK(out[i].q_buy[j] == doctest::Approx(ref.q_buy[j]).epsilon(1e-5));
  }
}

TEST_CASE("overlength input is truncated, not rejected") {
  Encoder<float> enc(tiny(), 9);
  tok::TokenIds longer(40, 7);
  auto e = enc.forward_simo(longer);
  CHECK(norm(e.target) == doctest::Approx(1).epsilon(1e-5));
}

TEST_CASE("input contracts") {
  Encoder<float> enc(tiny(), 9);
  CHECK_THROWS_AS(enc.forward_simo({24}), InputError);
  CHECK_THROWS_AS(enc.forward_simo({-1}), InputError);
  auto bad = tiny();
  bad.heads = 3;
  CHECK_THROWS_AS(bad.validate(), ContractError);
  bad = tiny();
  bad.max_seq = 2;
  CHECK_THROWS_AS(bad.validate(), ContractError);
}

TEST_CASE("checkpoint round trip") {
  testing::TempDir dir("enc");
  Encoder<float> enc(tiny(), 13);
  enc.save(dir / "m.pfw");
  auto back = Encoder<float>::load(dir / "m.pfw");
  CHECK(back.config().hidden_dim == 8);
  CHECK(back.config().mode == model::EncoderMode::simo);
  CHECK(back.forward_simo({5, 6}).q_buy == enc.forward_simo({5, 6}).q_buy);
  CHECK_THROWS_AS(Encoder<float>::load(dir / "absent.pfw"), InputError);
}

TEST_CASE("FLOP model favours one pass over three") {
  auto c = tiny();
  auto s = tiny(model::EncoderMode::siso);
  CHECK(model::forward_flops(c, 10, 3) < 3 * model::forward_flops(s, 8, 1));
  CHECK(model::attention_flops(c, 20) > 2 * model::attention_flops(c, 10));
}

}  // TEST_SUITE
