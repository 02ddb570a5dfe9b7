#include <algorithm>
#include <set>

#include "doctest.h"
#include "httplib.h"
#include "pfeed/errors.hpp"
#include "pfeed/feed_engine.hpp"
#include "pfeed/feed_server.hpp"
#include "pfeed/instrumentation.hpp"

using namespace pfeed;
using feed::Surface;
using nlohmann::json;

namespace {

Item item(std::string id, std::string cat, bool deal = false, std::int64_t release = 0, double pop = 0) {
  return Item{std::move(id), "title", {"root", std::move(cat)}, deal, release, pop};
}

Event ev(std::string c, std::string i, EventType t, std::int64_t ts) { return {std::move(c), std::move(i), t, ts, "s"}; }

Catalog small_catalog() {
  std::vector<Item> items;
  for (int i = 0; i < 12; ++i) items.push_back(item("a" + std::to_string(10 + i), i < 6 ? "x" : "y", i % 4 == 0, i, i));
  return Catalog(items);
}

store::SimilarityStore small_store() {
  std::vector<store::Entry> e{
      {"a10", Relation::view, {{"a11", 0.9}, {"a12", 0.8}, {"a13", 0.7}}},
      {"a14", Relation::view, {{"a12", 0.95}, {"a15", 0.6}}},
      {"a16", Relation::buy, {{"a17", 0.5}, {"a18", 0.4}}},
  };
  return store::SimilarityStore(e, 0.1);
}

feed::FeedOptions opts(std::size_t size = 20) {
  feed::FeedOptions o;
  o.feed_size = size;
  o.max_consecutive = 100;
  return o;
}

}  // namespace

TEST_SUITE("feed_engine") {

TEST_CASE("profile ingestion") {
  auto cat = small_catalog();
  feed::CustomerProfile p;
  p.customer_id = "c";
  CHECK(feed::ingest_event(p, ev("c", "a10", EventType::view, 5), cat));
  REQUIRE(p.queries.size() == 1);
  CHECK(p.queries[0].category == "root > x");

  CHECK(feed::ingest_event(p, ev("c", "a10", EventType::view, 9), cat));
  REQUIRE(p.queries.size() == 1);
  CHECK(p.queries[0].timestamp == 9);

  // View and buy of one item are distinct queries; a buy also records the item.
  CHECK(feed::ingest_event(p, ev("c", "a10", EventType::buy, 10), cat));
  CHECK(p.queries.size() == 2);
  CHECK(p.queries[0].relation == Relation::buy);
  CHECK(p.bought_items.count("a10"));

  // Stale duplicate leaves the order alone.
  CHECK(feed::ingest_event(p, ev("c", "a10", EventType::view, 1), cat));
  CHECK(p.queries[0].relation == Relation::buy);
  CHECK(p.queries[1].timestamp == 9);

  CHECK_FALSE(feed::ingest_event(p, ev("c", "nope", EventType::view, 11), cat));
  CHECK(p.queries.size() == 2);
}

TEST_CASE("profile cap keeps the newest queries") {
  std::vector<Item> items;
  for (int i = 0; i < 105; ++i) items.push_back(item("i" + std::to_string(100 + i), "x"));
  Catalog cat(items);
  feed::CustomerProfile p;
  for (int i = 0; i < 105; ++i) feed::ingest_event(p, ev("c", "i" + std::to_string(100 + i), EventType::view, i), cat);
  REQUIRE(p.queries.size() == 100);
  CHECK(p.queries.front().item_id == "i204");
  CHECK(p.queries.back().item_id == "i105");
  for (std::size_t i = 1; i < p.queries.size(); ++i) CHECK(p.queries[i - 1].timestamp > p.queries[i].timestamp);
}

TEST_CASE("profile book counts unknown items") {
  auto cat = small_catalog();
  feed::ProfileBook book;
  book.ingest(ev("b", "a10", EventType::view, 1), cat);
  book.ingest(ev("a", "a11", EventType::view, 1), cat);
  book.ingest(ev("a", "zzz", EventType::view, 2), cat);
  CHECK(book.size() == 2);
  CHECK(book.skipped() == 1);
  CHECK(book.customer_ids() == std::vector<std::string>{"a", "b"});
  CHECK(book.find("none") == nullptr);
}

TEST_CASE("eligible sets") {
  std::vector<Item> items;
  for (int i = 0; i < 10; ++i) items.push_back(item("n" + std::to_string(i), "c", false, 100 + i, 10 - i));
  Catalog cat(items);
  CHECK(feed::build_eligible_set(cat, Surface::all).size() == 10);
  CHECK(feed::build_eligible_set(cat, Surface::deals).size() == 0);
  auto fresh = feed::build_eligible_set(cat, Surface::fresh);
  CHECK(fresh.sorted() == std::vector<std::string>{"n9"});
  auto popular = feed::build_eligible_set(cat, Surface::popular);
  CHECK(popular.sorted() == std::vector<std::string>{"n0", "n1"});
  auto deals = feed::build_eligible_set(small_catalog(), Surface::deals);
  CHECK(deals.sorted() == std::vector<std::string>{"a10", "a14", "a18"});
  CHECK(feed::parse_surface("new") == Surface::fresh);
  CHECK(feed::to_string(Surface::fresh) == "new");
  CHECK_THROWS(feed::parse_surface("old"));
}

TEST_CASE("single query gives its eligible results in score order") {
  auto cat = small_catalog();
  auto st = small_store();
  feed::CustomerProfile p;
  feed::ingest_event(p, ev("c", "a10", EventType::view, 1), cat);
  auto f = feed::compose_feed(p, st, feed::build_eligible_set(cat, Surface::all), cat, opts());
  REQUIRE(f.size() == 3);
  CHECK(f[0].item_id == "a11");
  CHECK(f[2].item_id == "a13");
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(f[i].rank == i + 1);
    CHECK(f[i].source.item_id == "a10");
  }
  CHECK(feed::compose_feed(p, st, feed::build_eligible_set(cat, Surface::all), cat, opts(2)).size() == 2);
}

TEST_CASE("shared target goes to the newer query; bought and ineligible items are dropped") {
  auto cat = small_catalog();
  auto st = small_store();
  feed::CustomerProfile p;
  feed::ingest_event(p, ev("c", "a10", EventType::view, 1), cat);
  feed::ingest_event(p, ev("c", "a14", EventType::view, 2), cat);
  auto all = feed::build_eligible_set(cat, Surface::all);
  auto f = feed::compose_feed(p, st, all, cat, opts());
  std::set<std::string> seen;
  for (const auto& it : f) {
    CHECK(seen.insert(it.item_id).second);
    if (it.item_id == "a12") CHECK(it.source.item_id == "a14");
  }
  CHECK(f[0].source.item_id == "a14");

  feed::ingest_event(p, ev("c", "a11", EventType::buy, 3), cat);
  for (const auto& it : feed::compose_feed(p, st, all, cat, opts())) CHECK(it.item_id != "a11");

  feed::EligibleSet only(Surface::deals, {"a13"});
  auto d = feed::compose_feed(p, st, only, cat, opts());
  REQUIRE(d.size() == 1);
  CHECK(d[0].item_id == "a13");

  auto o = opts();
  o.business_filter = [](const feed::FeedItem& it) { return it.score < 0.85; };
  for (const auto& it : feed::compose_feed(p, st, all, cat, o)) CHECK(it.score < 0.85);
}

TEST_CASE("category runs are broken up without losing items") {
  std::vector<Item> items{item("q", "x")};
  std::vector<store::Result> res;
  for (int i = 0; i < 6; ++i) {
    items.push_back(item("x" + std::to_string(i), "x"));
    res.push_back({"x" + std::to_string(i), 0.9 - 0.01 * i});
  }
  items.push_back(item("y0", "y"));
  res.push_back({"y0", 0.1});
  Catalog cat(items);
  store::SimilarityStore st({{"q", Relation::view, res}}, 0);
  feed::CustomerProfile p;
  feed::ingest_event(p, ev("c", "q", EventType::view, 1), cat);
  auto o = opts();
  o.max_consecutive = 3;
  auto f = feed::compose_feed(p, st, feed::build_eligible_set(cat, Surface::all), cat, o);
  REQUIRE(f.size() == 7);
  CHECK(f[3].item_id == "y0");
  std::size_t run = 0;
  for (std::size_t i = 0; i + 1 < f.size(); ++i) {
    run = cat.find(f[i].item_id)->category() == cat.find(f[i + 1].item_id)->category() ? run + 1 : 0;
    if (i < 4) CHECK(run < 3);
  }
}

TEST_CASE("refresh never touches the encoder or index") {
  auto cat = small_catalog();
  auto st = small_store();
  feed::ProfileBook book;
  book.ingest(ev("c1", "a10", EventType::view, 1), cat);
  book.ingest(ev("c2", "a16", EventType::buy, 1), cat);
  auto all = feed::build_eligible_set(cat, Surface::all);
  const auto before = instrumentation::snapshot();
  auto feeds = feed::batch_refresh(book, st, all, cat, opts());
  CHECK(feeds.size() == 2);
  CHECK(feed::batch_refresh(feed::ProfileBook{}, st, all, cat, opts()).empty());

  feed::FeedMap copy = feeds;
  feed::incremental_refresh({}, book, st, all, cat, opts(), copy);
  CHECK(copy == feeds);
  book.ingest(ev("c1", "a14", EventType::view, 2), cat);
  std::vector<std::string> active{"c1"};
  feed::incremental_refresh(active, book, st, all, cat, opts(), copy);
  CHECK(copy["c1"] == feed::compose_feed(*book.find("c1"), st, all, cat, opts()));
  CHECK(copy["c2"] == feeds["c2"]);
  std::vector<std::string> unknown{"ghost"};
  CHECK_THROWS_AS(feed::incremental_refresh(unknown, book, st, all, cat, opts(), copy), ContractError);

  const auto after = instrumentation::snapshot();
  CHECK(after.encoder_forward_calls == before.encoder_forward_calls);
  CHECK(after.index_searches == before.index_searches);
}

TEST_CASE("service caches feeds until refreshed") {
  auto svc = std::make_shared<feed::FeedService>(small_catalog(), std::make_shared<store::SimilarityStore>(small_store()),
                                                 opts());
  svc->ingest(ev("c", "a10", EventType::view, 1));
  CHECK_FALSE(svc->feed("ghost", Surface::all).has_value());
  svc->refresh_all();
  auto f = svc->feed("c", Surface::all);
  REQUIRE(f);
  CHECK(f->front().source.item_id == "a10");
  svc->ingest(ev("c", "a14", EventType::view, 2));
  CHECK(svc->feed("c", Surface::all)->front().source.item_id == "a10");
  CHECK(svc->refresh_active() == 1);
  CHECK(svc->feed("c", Surface::all)->front().source.item_id == "a14");
  CHECK(svc->feed("c", Surface::all, 1)->size() == 1);
  CHECK(svc->refresh_active() == 0);
}

}  // TEST_SUITE

TEST_SUITE("feed_server") {

TEST_CASE("event json round trip") {
  Event e{"c", "a10", EventType::buy, 42, "s9"};
  auto back = feed::event_from_json(feed::to_json(e));
  CHECK(back.customer_id == "c");
  CHECK(back.type == EventType::buy);
  CHECK(back.timestamp == 42);
  CHECK_THROWS_AS(feed::event_from_json(json{{"customer_id", "c"}}), InputError);
}

TEST_CASE("http routes") {
  auto svc = std::make_shared<feed::FeedService>(small_catalog(), std::make_shared<store::SimilarityStore>(small_store()),
                                                 opts());
  svc->ingest(ev("c", "a10", EventType::view, 1));
  svc->refresh_all();
  feed::FeedServer server(svc);
  const int port = server.start("127.0.0.1", 0);
  httplib::Client cli("127.0.0.1", port);

  auto health = cli.Get("/health");
  REQUIRE(health);
  CHECK(health->status == 200);

  auto r = cli.Get("/feed/c?surface=all&size=2");
  REQUIRE(r);
  CHECK(r->status == 200);
  auto body = json::parse(r->body);
  REQUIRE(body.is_array());
  CHECK(body.size() == 2);
  for (const auto& it : body) {
    for (const char* k : {"item_id", "score", "source_item_id", "source_relation", "rank"}) CHECK(it.contains(k));
  }
  CHECK(body[0]["rank"] == 1);

  CHECK(cli.Get("/feed/ghost")->status == 404);
  CHECK(cli.Get("/feed/c?surface=bogus")->status == 400);
  CHECK(cli.Get("/feed/c?size=0")->status == 400);
  CHECK(cli.Post("/event", "{not json", "application/json")->status == 400);

  auto skipped = cli.Post("/event", feed::to_json(ev("c", "zzz", EventType::view, 3)).dump(), "application/json");
  CHECK(skipped->status == 204);
  CHECK(skipped->has_header("X-Pfeed-Skipped"));

  auto ok = cli.Post("/event", feed::to_json(ev("c", "a14", EventType::view, 3)).dump(), "application/json");
  CHECK(ok->status == 204);
  auto refreshed = cli.Post("/refresh", "", "application/json");
  CHECK(json::parse(refreshed->body)["refreshed"] == 1);
  auto after = json::parse(cli.Get("/feed/c")->body);
  CHECK(after[0]["source_item_id"] == "a14");
  server.stop();
}

}  // TEST_SUITE
