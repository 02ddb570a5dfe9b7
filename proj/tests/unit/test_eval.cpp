#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "pfeed/errors.hpp"
#include "pfeed/eval.hpp"
#include "support.hpp"

using namespace pfeed;
using mining::QueryTargetPair;

namespace {

std::vector<float> normalized(std::vector<float> v) {
  float s = 0;
  for (float x : v) s += x * x;
  for (float& x : v) x /= std::sqrt(s);
  return v;
}

model::ItemEmbeddings emb(std::string id, std::vector<float> q, std::vector<float> t) {
  return {std::move(id), normalized(q), normalized(q), normalized(t)};
}

QueryTargetPair pair(std::string q, std::string t, Relation r = Relation::view) {
  return {std::move(q), r, std::move(t), 1, 0.5};
}

const eval::World& world() {
  static const eval::World w = eval::generate_synthetic_world(eval::WorldConfig{});
  return w;
}

}  // namespace

TEST_SUITE("eval") {

TEST_CASE("recall: trivial cases") {
  index::EmbeddingTable table({emb("q", {1, 0, 0}, {0, 0, 1}), emb("t", {0, 0, 1}, {1, 0, 0}),
                               emb("d1", {0, 0, 1}, {0, 1, 0}), emb("d2", {0, 0, 1}, {0, 0, 1})});
  std::vector<QueryTargetPair> pairs{pair("q", "t")};
  std::vector<std::string> distractors{"d1", "d2"};
  CHECK(eval::recall_at_k(pairs, table, distractors, 1).overall.value() == 1.0);
  CHECK(eval::recall_at_k(pairs, table, distractors, 3).overall.value() == 1.0);
  std::vector<QueryTargetPair> missing{pair("q", "none")};
  CHECK_THROWS_AS(eval::recall_at_k(missing, table, distractors, 1), InputError);
}

TEST_CASE("ranks against an exhaustive oracle") {
  std::mt19937_64 rng(1);
  std::normal_distribution<float> g;
  std::vector<model::ItemEmbeddings> items;
  for (int i = 0; i < 9; ++i) items.push_back(emb("i" + std::to_string(i), {g(rng), g(rng), g(rng)}, {g(rng), g(rng), g(rng)}));
  index::EmbeddingTable table(items);
  std::vector<QueryTargetPair> pairs{pair("i0", "i1"), pair("i2", "i3", Relation::buy), pair("i3", "i0")};
  std::vector<std::string> distractors{"i4", "i5", "i6", "i7", "i8"};
  auto ranks = eval::target_ranks(pairs, table, distractors);
  auto score = [&](const std::string& q, Relation r, const std::string& t) {
    double s = 0;
    for (int j = 0; j < 3; ++j) s += double(table.at(q).query(r)[j]) * table.at(t).target[j];
    return s;
  };
  for (std::size_t p = 0; p < pairs.size(); ++p) {
    const double pos = score(pairs[p].query_id, pairs[p].relation, pairs[p].target_id);
    std::size_t expect = 1;
    for (const auto& d : distractors) expect += score(pairs[p].query_id, pairs[p].relation, d) >= pos;
    CHECK(ranks[p] == expect);
  }
  // Recall never decreases with k, and never increases with more distractors.
  double prev = 0;
  for (std::size_t k = 1; k <= 6; ++k) {
    const double r = eval::recall_at_k(pairs, table, distractors, k).overall.value();
    CHECK(r >= prev);
    prev = r;
  }
  CHECK(prev == 1.0);
  std::vector<std::string> fewer{"i4", "i5"};
  for (std::size_t k = 1; k <= 3; ++k) {
    CHECK(eval::recall_at_k(pairs, table, distractors, k).overall.value() <=
          eval::recall_at_k(pairs, table, fewer, k).overall.value());
  }
}

TEST_CASE("overall recall is the count-weighted mean of the datasets") {
  std::mt19937_64 rng(2);
  std::normal_distribution<float> g;
  std::vector<model::ItemEmbeddings> items;
  std::vector<std::string> ids;
  for (int i = 0; i < 40; ++i) {
    ids.push_back("i" + std::to_string(i));
    items.push_back(emb(ids.back(), {g(rng), g(rng), g(rng), g(rng)}, {g(rng), g(rng), g(rng), g(rng)}));
  }
  index::EmbeddingTable table(items);
  std::vector<QueryTargetPair> pairs;
  for (int i = 0; i < 30; ++i) pairs.push_back(pair(ids[i], ids[i + 5], i % 3 ? Relation::view : Relation::buy));
  auto r = eval::recall_at_k(pairs, table, ids, 8);
  CHECK(r.overall.total == r.view.total + r.buy.total);
  CHECK(r.overall.value() == doctest::Approx((r.view.value() * r.view.total + r.buy.value() * r.buy.total) /
                                             r.overall.total));
  std::vector<std::size_t> ranks{1, 5, 11, 10};
  CHECK(eval::recall_from_ranks(ranks, 10).hits == 3);
}

TEST_CASE("baseline") {
  CHECK(eval::random_baseline(10, 999) == doctest::Approx(0.01));
  CHECK(eval::baseline_sigma(10, 999, 100) == doctest::Approx(std::sqrt(0.01 * 0.99 / 100)));
  std::vector<std::string> ids{"a", "b", "c", "d", "e"};
  auto d = eval::sample_distractors(ids, 3, 5);
  CHECK(d.size() == 3);
  CHECK(d == eval::sample_distractors(ids, 3, 5));
}

TEST_CASE("relationship categories") {
  std::vector<QueryTargetPair> one{pair("A", "X")};
  auto l1 = eval::classify_relationships(one);
  CHECK(l1[0] == eval::Relationship::one_to_one);
  CHECK(eval::relationship_distribution(l1)[0] == 1);

  std::vector<QueryTargetPair> fan{pair("A", "X"), pair("A", "Y")};
  for (auto l : eval::classify_relationships(fan)) CHECK(l == eval::Relationship::one_to_many);

  std::vector<QueryTargetPair> mixed{pair("A", "X"), pair("B", "X"), pair("A", "Y")};
  auto l3 = eval::classify_relationships(mixed);
  CHECK(l3[0] == eval::Relationship::many_to_many);
  CHECK(l3[1] == eval::Relationship::many_to_one);
  CHECK(l3[2] == eval::Relationship::one_to_many);
  CHECK(eval::to_string(eval::Relationship::many_to_one) == "mx1");
  CHECK(eval::relationship_distribution(l3) == std::array<std::size_t, 4>{0, 1, 1, 1});
}

TEST_CASE("popularity segments") {
  std::vector<QueryTargetPair> train;
  for (int i = 0; i < 200; ++i) train.push_back(pair("p" + std::to_string(1000 + i), "hub"));
  auto counts = eval::interaction_counts(train);
  CHECK(counts.size() == 201);
  CHECK(counts.at("hub") == 200);
  std::vector<QueryTargetPair> test{pair("x", "hub"), pair("x", "p1000"), pair("x", "p1199"), pair("x", "new")};
  auto seg = eval::segment_by_popularity(test, counts);
  CHECK(seg[0] == eval::Segment::head);
  // ceil(1% of 201) = 3 head items: the hub and the two smallest ids.
  CHECK(seg[1] == eval::Segment::head);
  CHECK(seg[2] == eval::Segment::tail);
  CHECK(seg[3] == eval::Segment::cold_start);
  CHECK(eval::to_string(eval::Segment::cold_start) == "cold-start");
}

TEST_CASE("synthetic world has the planted structure") {
  const auto& w = world();
  eval::WorldConfig c;
  CHECK(w.catalog.size() == c.categories * c.items_per_category);
  CHECK(w.events.size() > 0);
  CHECK(eval::within_category_view_rate(w) == doctest::Approx(0.9).epsilon(0.034));

  mining::MiningOptions o;
  o.top_n = 200;
  auto buy = mining::mine_buy_buy(w.events, o);
  REQUIRE(buy.size() == 200);
  CHECK(eval::complement_rate(w, buy) >= 0.95);

  auto again = eval::generate_synthetic_world(c);
  CHECK(again.events.size() == w.events.size());
  CHECK(again.catalog.ids() == w.catalog.ids());
  for (std::size_t i = 0; i < w.events.size(); i += 97) {
    CHECK(again.events[i].item_id == w.events[i].item_id);
    CHECK(again.events[i].timestamp == w.events[i].timestamp);
  }
  c.seed = 8;
  CHECK(eval::generate_synthetic_world(c).events.size() != w.events.size());
}

TEST_CASE("reports") {
  testing::TempDir dir("report");
  eval::Report empty;
  eval::write_report_jsonl(dir / "e.jsonl", empty);
  CHECK(eval::read_report_jsonl(dir / "e.jsonl").metrics.empty());

  eval::Report r;
  r.config = {{"k", 10}};
  eval::add_metric(r, "dataset", "view", 10, {3, 4});
  eval::add_metric(r, "segment", "head", 10, {0, 0});
  CHECK(r.metrics[0].recall == 0.75);
  eval::write_report_jsonl(dir / "r.jsonl", r);
  auto back = eval::read_report_jsonl(dir / "r.jsonl");
  CHECK(back.metrics == r.metrics);
  CHECK(back.config == r.config);
  auto table = eval::format_table(r);
  CHECK(table.find("view") != std::string::npos);
  CHECK(table.find("0.75") != std::string::npos);
}

}  // TEST_SUITE
