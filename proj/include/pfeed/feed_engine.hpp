#pragma once

// Customer profiles built from events, and feeds composed from the
// precomputed similarity store. Refreshing feeds never touches the encoder or
// the vector index.

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <shared_mutex>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "pfeed/catalog.hpp"
#include "pfeed/similarity_store.hpp"

namespace pfeed::feed {

enum class Surface : std::uint8_t { all, deals, fresh, popular };

/// Wire names: all, deals, new, popular.
std::string_view to_string(Surface s);
Surface parse_surface(std::string_view s);

struct Query {
  std::string item_id;
  Relation relation = Relation::view;
  std::string category;
  std::int64_t timestamp = 0;

  friend bool operator==(const Query&, const Query&) = default;
};

struct CustomerProfile {
  std::string customer_id;
  std::vector<Query> queries;  // most recent first
  std::set<std::string> bought_items;
};

struct ProfileOptions {
  std::size_t max_queries = 100;
};

/// Adds the event as the newest query of its (item, relation), dropping an
/// older duplicate and evicting the oldest queries beyond the cap. An event
/// older than an existing duplicate leaves the queries unchanged. Returns
/// false (and changes nothing) when the item is not in the catalog.
bool ingest_event(CustomerProfile& profile, const Event& event, const Catalog& catalog,
                  const ProfileOptions& options = {});

class ProfileBook {
 public:
  explicit ProfileBook(ProfileOptions options = {}) : options_(options) {}

  bool ingest(const Event& event, const Catalog& catalog);
  const CustomerProfile* find(std::string_view customer_id) const;
  std::size_t size() const { return profiles_.size(); }
  std::size_t skipped() const { return skipped_; }
  /// Customer ids in ascending order.
  std::vector<std::string> customer_ids() const;
  const std::unordered_map<std::string, CustomerProfile>& profiles() const { return profiles_; }

 private:
  ProfileOptions options_;
  std::unordered_map<std::string, CustomerProfile> profiles_;
  std::size_t skipped_ = 0;
};

class EligibleSet {
 public:
  EligibleSet() = default;
  EligibleSet(Surface surface, std::unordered_set<std::string> members)
      : surface_(surface), members_(std::move(members)) {}

  Surface surface() const { return surface_; }
  bool contains(std::string_view id) const { return members_.count(std::string(id)) > 0; }
  std::size_t size() const { return members_.size(); }
  const std::unordered_set<std::string>& members() const { return members_; }
  /// Members in ascending id order.
  std::vector<std::string> sorted() const;

 private:
  Surface surface_ = Surface::all;
  std::unordered_set<std::string> members_;
};

/// all: every item. deals: items flagged as deals. new: per category, the
/// newest ceil(10%) by release date. popular: per category, the top ceil(20%)
/// by popularity. Ties go to the smaller id.
EligibleSet build_eligible_set(const Catalog& catalog, Surface surface);

struct FeedItem {
  std::string item_id;
  double score = 0;
  Query source;
  std::size_t rank = 0;  // 1-based

  friend bool operator==(const FeedItem&, const FeedItem&) = default;
};

struct FeedOptions {
  std::size_t feed_size = 20;
  std::size_t max_consecutive = 3;  // same-category run limit
  /// Business rule; items for which it returns false are dropped.
  std::function<bool(const FeedItem&)> business_filter;
};

/// Per query (newest first): stored results that are eligible, not bought and
/// pass the business filter. A target shared by several queries stays with
/// the newest one. Lists are merged round-robin in query order, then
/// re-ordered so no more than `max_consecutive` items of one category follow
/// each other; deferred items are not dropped, and the first item of each
/// query never overtakes the first item of a newer query.
std::vector<FeedItem> compose_feed(const CustomerProfile& profile, const store::SimilarityStore& store,
                                   const EligibleSet& eligible, const Catalog& catalog, const FeedOptions& options);

using FeedMap = std::map<std::string, std::vector<FeedItem>>;

FeedMap batch_refresh(const ProfileBook& profiles, const store::SimilarityStore& store, const EligibleSet& eligible,
                      const Catalog& catalog, const FeedOptions& options);

/// Recomputes `feeds` for the active customers only. Throws ContractError for
/// an unknown customer.
void incremental_refresh(std::span<const std::string> active, const ProfileBook& profiles,
                         const store::SimilarityStore& store, const EligibleSet& eligible, const Catalog& catalog,
                         const FeedOptions& options, FeedMap& feeds);

/// Thread-safe state behind the HTTP service: profiles, the current store
/// snapshot and cached feeds per surface.
class FeedService {
 public:
  FeedService(Catalog catalog, std::shared_ptr<const store::SimilarityStore> store, FeedOptions options,
              ProfileOptions profile_options = {});

  /// Ingests without refreshing; the customer becomes active.
  bool ingest(const Event& event);
  /// Builds every cached feed from scratch.
  void refresh_all();
  /// Refreshes cached feeds of customers seen since the last refresh; returns
  /// their number.
  std::size_t refresh_active();
  /// nullopt for an unknown customer. `size` 0 means the configured size.
  std::optional<std::vector<FeedItem>> feed(std::string_view customer_id, Surface surface, std::size_t size = 0);
  void swap_store(std::shared_ptr<const store::SimilarityStore> store);
  std::shared_ptr<const store::SimilarityStore> store() const;
  std::size_t customers() const;
  std::size_t skipped_events() const;
  const Catalog& catalog() const { return catalog_; }

 private:
  const EligibleSet& eligible(Surface s) const { return eligible_[static_cast<std::size_t>(s)]; }

  Catalog catalog_;
  FeedOptions options_;
  std::vector<EligibleSet> eligible_;
  mutable std::shared_mutex mutex_;
  std::shared_ptr<const store::SimilarityStore> store_;
  ProfileBook profiles_;
  std::set<std::string> active_;
  std::vector<FeedMap> cache_;  // per surface
};

}  // namespace pfeed::feed
