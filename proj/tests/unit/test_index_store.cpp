#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "pfeed/errors.hpp"
#include "pfeed/instrumentation.hpp"
#include "pfeed/similarity_store.hpp"
#include "pfeed/vector_index.hpp"
#include "support.hpp"

using namespace pfeed;

namespace {

std::vector<float> unit_rows(std::size_t n, std::size_t d, std::mt19937_64& rng) {
  std::normal_distribution<float> g;
  std::vector<float> v(n * d);
  for (std::size_t i = 0; i < n; ++i) {
    float s = 0;
    for (std::size_t j = 0; j < d; ++j) s += (v[i * d + j] = g(rng)) * v[i * d + j];
    for (std::size_t j = 0; j < d; ++j) v[i * d + j] /= std::sqrt(s);
  }
  return v;
}

std::vector<std::string> ids_of(std::size_t n, const std::string& prefix = "i") {
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < n; ++i) ids.push_back(prefix + std::to_string(1000 + i));
  return ids;
}

std::vector<float> unit(std::initializer_list<float> xs) {
  std::vector<float> v(xs);
  float s = 0;
  for (float x : v) s += x * x;
  for (float& x : v) x /= std::sqrt(s);
  return v;
}

std::vector<float> unit_from(std::vector<float> v) {
  float s = 0;
  for (float x : v) s += x * x;
  for (float& x : v) x /= std::sqrt(s);
  return v;
}

model::ItemEmbeddings emb(std::string id, std::vector<float> qv, std::vector<float> qb, std::vector<float> t) {
  return {std::move(id), unit_from(qv), unit_from(qb), unit_from(t)};
}

}  // namespace

TEST_SUITE("vector_index") {

TEST_CASE("single row, self query and m >= n") {
  auto v = unit({1, 2, 2});
  auto idx = index::VectorIndex::build({"only"}, v, 3);
  auto hits = idx.search(v, 5);
  REQUIRE(hits.size() == 1);
  CHECK(hits[0].id == "only");
  CHECK(hits[0].score == doctest::Approx(1.0).epsilon(1e-6));

  std::mt19937_64 rng(1);
  auto x = unit_rows(20, 4, rng);
  auto many = index::VectorIndex::build(ids_of(20), x, 4);
  CHECK(many.search(std::span<const float>(x.data() + 4 * 7, 4), 100).size() == 20);
  CHECK(many.search(std::span<const float>(x.data() + 4 * 7, 4), 1)[0].id == "i1007");
}

TEST_CASE("exact search matches brute force with id tie-breaks") {
  std::mt19937_64 rng(2);
  const std::size_t n = 200, d = 8;
  auto x = unit_rows(n, d, rng);
  // Duplicate a few rows to force ties.
  for (std::size_t i = 0; i < 10; ++i) std::copy_n(x.begin(), d, x.begin() + (50 + i) * d);
  auto ids = ids_of(n);
  std::shuffle(ids.begin(), ids.end(), rng);
  auto idx = index::VectorIndex::build(ids, x, d);
  for (std::size_t q = 0; q < 20; ++q) {
    std::span<const float> query(x.data() + q * d, d);
    std::vector<std::pair<double, std::string>> all;
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0;
      for (std::size_t j = 0; j < d; ++j) s += double(query[j]) * x[i * d + j];
      all.emplace_back(s, ids[i]);
    }
    std::sort(all.begin(), all.end(), [](auto& a, auto& b) {
      return std::abs(a.first - b.first) > 1e-6 ? a.first > b.first : a.second < b.second;
    });
    auto hits = idx.search(query, 15);
    for (std::size_t k = 0; k < 15; ++k) {
      CHECK(hits[k].id == all[k].second);
      CHECK(hits[k].score == doctest::Approx(all[k].first).epsilon(1e-5));
    }
  }
}

TEST_CASE("batch search equals repeated search") {
  std::mt19937_64 rng(3);
  auto x = unit_rows(100, 6, rng);
  auto q = unit_rows(7, 6, rng);
  auto idx = index::VectorIndex::build(ids_of(100), x, 6, {index::Variant::ivf, 8, 3, 1, 25});
  auto batch = idx.batch_search(q, 9);
  for (std::size_t i = 0; i < 7; ++i) CHECK(batch[i] == idx.search(std::span<const float>(q.data() + 6 * i, 6), 9));
}

TEST_CASE("ivf edge cases") {
  std::mt19937_64 rng(4);
  const std::size_t n = 60, d = 5;
  auto x = unit_rows(n, d, rng);
  auto exact = index::VectorIndex::build(ids_of(n), x, d);
  auto one = index::VectorIndex::build(ids_of(n), x, d, {index::Variant::ivf, 1, 1, 0, 25});
  CHECK(one.clusters() == 1);
  for (auto a : one.assignments()) CHECK(a == 0);
  auto full = index::VectorIndex::build(ids_of(n), x, d, {index::Variant::ivf, n, n, 0, 25});
  for (std::size_t q = 0; q < n; q += 7) {
    std::span<const float> query(x.data() + q * d, d);
    CHECK(full.search(query, 10) == exact.search(query, 10));
    CHECK(one.search(query, 10) == exact.search(query, 10));
  }
  CHECK(full.probe_order(std::span<const float>(x.data(), d)).size() == n);
}

TEST_CASE("k-means ends at a fixed point of Lloyd's iteration") {
  std::mt19937_64 rng(5);
  std::normal_distribution<float> g(0, 0.05f);
  const std::size_t d = 3, n = 90, k = 3;
  std::vector<float> x;
  const float centers[3][3] = {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) x.push_back(centers[i % 3][j] + g(rng));
  std::vector<std::uint32_t> a;
  auto cent = index::kmeans(x, n, d, k, 9, 100, a);
  REQUIRE(cent.size() == k * d);
  auto dist = [&](std::size_t i, std::size_t c) {
    double s = 0;
    for (std::size_t j = 0; j < d; ++j) s += (x[i * d + j] - cent[c * d + j]) * (x[i * d + j] - cent[c * d + j]);
    return s;
  };
  std::vector<double> sums(k * d);
  std::vector<int> counts(k);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < k; ++c) CHECK(dist(i, a[i]) <= dist(i, c) + 1e-9);
    ++counts[a[i]];
    for (std::size_t j = 0; j < d; ++j) sums[a[i] * d + j] += x[i * d + j];
  }
  for (std::size_t c = 0; c < k; ++c) {
    REQUIRE(counts[c] > 0);
    for (std::size_t j = 0; j < d; ++j) CHECK(cent[c * d + j] == doctest::Approx(sums[c * d + j] / counts[c]).epsilon(1e-5));
  }
  std::vector<std::uint32_t> again;
  CHECK(index::kmeans(x, n, d, k, 9, 100, again) == cent);
  CHECK(again == a);
  CHECK_THROWS_AS(index::kmeans(x, n, d, n + 1, 9, 25, again), ContractError);
}

TEST_CASE("contracts") {
  std::vector<float> v = unit({1, 0});
  CHECK_THROWS_AS(index::VectorIndex::build({"a", "b"}, v, 2), InputError);
  auto idx = index::VectorIndex::build({"a"}, v, 2);
  std::vector<float> q3{1, 0, 0};
  CHECK_THROWS_AS(idx.search(q3, 1), DimensionError);
  std::vector<float> notunit{2, 0};
  CHECK_THROWS_AS(index::VectorIndex::build({"a"}, notunit, 2), ContractError);
  CHECK(index::parse_variant("ivf") == index::Variant::ivf);
  CHECK_THROWS(index::parse_variant("hnsw"));
}

TEST_CASE("index and embedding files round trip") {
  testing::TempDir dir("idx");
  std::mt19937_64 rng(6);
  auto x = unit_rows(40, 4, rng);
  auto idx = index::VectorIndex::build(ids_of(40), x, 4, {index::Variant::ivf, 5, 2, 3, 25});
  idx.save(dir / "i.pfi");
  auto back = index::VectorIndex::load(dir / "i.pfi");
  CHECK(back.variant() == index::Variant::ivf);
  CHECK(back.nprobe() == 2);
  CHECK(back.assignments() == idx.assignments());
  CHECK(back.search(std::span<const float>(x.data(), 4), 6) == idx.search(std::span<const float>(x.data(), 4), 6));

  std::vector<model::ItemEmbeddings> e{emb("a", {1, 0}, {0, 1}, {1, 1}), emb("b", {0, 1}, {1, 0}, {1, -1})};
  index::write_embeddings(dir / "e.pfe", e);
  auto eb = index::read_embeddings(dir / "e.pfe");
  REQUIRE(eb.size() == 2);
  CHECK(eb[1].item_id == "b");
  CHECK(eb[1].target == e[1].target);

  std::ofstream(dir / "junk.pfi") << "nope";
  CHECK_THROWS_AS(index::VectorIndex::load(dir / "junk.pfi"), InputError);
}

TEST_CASE("searches are counted") {
  auto v = unit({1, 0});
  auto idx = index::VectorIndex::build({"a"}, v, 2);
  const auto before = instrumentation::snapshot().index_searches;
  idx.search(v, 1);
  CHECK(instrumentation::snapshot().index_searches == before + 1);
}

}  // TEST_SUITE

TEST_SUITE("similarity_store") {

TEST_CASE("nearest-rank percentile") {
  std::vector<double> s;
  for (int i = 1; i <= 100; ++i) s.push_back(i / 100.0);
  std::reverse(s.begin(), s.end());
  CHECK(store::nearest_rank_percentile(s, 1) == 0.01);
  CHECK(store::nearest_rank_percentile(s, 100) == 1.0);
  CHECK(store::nearest_rank_percentile(s, 50) == 0.5);
  CHECK(store::nearest_rank_percentile(s, 0.5) == 0.01);
  CHECK(store::nearest_rank_percentile({0.3, 0.3, 0.3}, 40) == 0.3);
  CHECK_THROWS(store::nearest_rank_percentile({}, 1));
  CHECK_THROWS(store::nearest_rank_percentile({1.0}, 0));
  CHECK_THROWS(store::nearest_rank_percentile({1.0}, 101));
}

TEST_CASE("threshold from validation pairs") {
  index::EmbeddingTable table({emb("a", {1, 0}, {0, 1}, {1, 0}), emb("b", {0, 1}, {1, 0}, {0, 1}),
                               emb("c", {1, 1}, {1, -1}, {1, 1})});
  std::vector<mining::QueryTargetPair> v{{"a", Relation::view, "b", 1, 0}, {"a", Relation::buy, "b", 1, 0},
                                         {"c", Relation::view, "a", 1, 0}};
  auto scores = store::pair_scores(v, table);
  CHECK(scores[0] == doctest::Approx(0.0).epsilon(1e-6));
  CHECK(scores[1] == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(scores[2] == doctest::Approx(std::sqrt(0.5)).epsilon(1e-6));
  auto t = store::compute_threshold(v, table, 1);
  CHECK(t.tau == doctest::Approx(0.0));
  CHECK(t.sample_count == 3);
  std::vector<mining::QueryTargetPair> missing{{"a", Relation::view, "zz", 1, 0}};
  CHECK_THROWS_AS(store::compute_threshold(missing, table), InputError);
}

TEST_CASE("precompute against a brute-force oracle") {
  std::vector<model::ItemEmbeddings> items{
      emb("p", {1, 0, 0}, {0, 1, 0}, {1, 0.1f, 0}),  emb("q", {0.9f, 0.4f, 0}, {0, 0, 1}, {0.8f, 0.6f, 0}),
      emb("r", {0, 1, 0}, {1, 0, 0}, {0, 1, 0.2f}),  emb("s", {0, 0, 1}, {0.5f, 0.5f, 0}, {0.1f, 0, 1}),
      emb("t", {1, 1, 1}, {1, -1, 0}, {0.6f, 0.6f, 0.5f})};
  index::EmbeddingTable table(items);
  auto idx = index::build_target_index(table, {});
  const double tau = 0.3;
  const std::size_t m = 2;
  auto st = store::precompute(idx, table, tau, {m});
  std::size_t keys = 0;
  for (const auto& it : items) {
    for (auto r : {Relation::view, Relation::buy}) {
      std::vector<std::pair<double, std::string>> all;
      for (const auto& o : items) {
        if (o.item_id == it.item_id) continue;
        double s = 0;
        for (std::size_t j = 0; j < 3; ++j) s += double(it.query(r)[j]) * o.target[j];
        s = store::quantize_score(s);
        if (s > tau) all.emplace_back(-s, o.item_id);
      }
      std::sort(all.begin(), all.end());
      if (all.size() > m) all.resize(m);
      auto got = st.lookup(it.item_id, r);
      REQUIRE(got.size() == all.size());
      keys += !all.empty();
      for (std::size_t k = 0; k < all.size(); ++k) {
        CHECK(got[k].target_id == all[k].second);
        CHECK(got[k].score == doctest::Approx(-all[k].first).epsilon(1e-9));
      }
    }
  }
  CHECK(st.size() == keys);
  CHECK(st.tau() == tau);
}

TEST_CASE("precompute extremes") {
  std::mt19937_64 rng(8);
  std::vector<model::ItemEmbeddings> items;
  for (int i = 0; i < 12; ++i) {
    auto x = unit_rows(3, 4, rng);
    items.push_back({"i" + std::to_string(10 + i), {x.begin(), x.begin() + 4}, {x.begin() + 4, x.begin() + 8},
                     {x.begin() + 8, x.end()}});
  }
  index::EmbeddingTable table(items);
  auto idx = index::build_target_index(table, {});
  CHECK(store::precompute(idx, table, 1.01, {12}).empty());
  auto full = store::precompute(idx, table, -1.01, {12});
  CHECK(full.size() == 24);
  for (const auto& e : full.entries()) {
    CHECK(e.results.size() == 11);
    for (const auto& r : e.results) CHECK(r.target_id != e.item_id);
  }
}

TEST_CASE("lookup, duplicate keys and formats") {
  testing::TempDir dir("store");
  std::vector<store::Entry> entries{{"b", Relation::buy, {{"c", 0.5}, {"a", 0.25}}},
                                    {"a", Relation::view, {{"b", 0.75}}}};
  store::SimilarityStore st(entries, 0.1);
  CHECK(st.lookup("b", Relation::buy).size() == 2);
  CHECK(st.lookup("b", Relation::buy)[0].target_id == "c");
  CHECK(st.lookup("b", Relation::view).empty());
  CHECK(st.lookup("zz", Relation::view).empty());
  CHECK(st.entries()[0].item_id == "a");
  CHECK(st.result_count() == 3);

  auto dup = entries;
  dup.push_back(entries[0]);
  CHECK_THROWS_AS(store::SimilarityStore(dup, 0.1), InputError);

  st.write_text(dir / "s.tsv", "# header");
  st.write_binary(dir / "s.pfs");
  CHECK(store::SimilarityStore::read_text(dir / "s.tsv") == st);
  CHECK(store::SimilarityStore::read_binary(dir / "s.pfs") == st);
  CHECK(store::SimilarityStore::load(dir / "s.tsv") == st);
  CHECK(store::SimilarityStore::load(dir / "s.pfs") == st);
  CHECK(store::quantize_score(0.1234567) == 0.123457);
}

}  // TEST_SUITE
