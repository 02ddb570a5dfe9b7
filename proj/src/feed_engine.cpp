#include "pfeed/feed_engine.hpp"

#include <algorithm>
#include <list>

#include "pfeed/errors.hpp"

namespace pfeed::feed {

std::string_view to_string(Surface s) {
  switch (s) {
    case Surface::all: return "all";
    case Surface::deals: return "deals";
    case Surface::fresh: return "new";
    case Surface::popular: return "popular";
  }
  return "?";
}

Surface parse_surface(std::string_view s) {
  for (Surface v : {Surface::all, Surface::deals, Surface::fresh, Surface::popular}) {
    if (to_string(v) == s) return v;
  }
  throw InputError("unknown surface '" + std::string(s) + "' (expected all, deals, new or popular)");
}

bool ingest_event(CustomerProfile& profile, const Event& event, const Catalog& catalog, const ProfileOptions& options) {
  const Item* item = catalog.find(event.item_id);
  if (!item) return false;
  if (profile.customer_id.empty()) profile.customer_id = event.customer_id;
  const Relation rel = relation_of(event.type);
  if (event.type == EventType::buy) profile.bought_items.insert(event.item_id);

  auto& qs = profile.queries;
  auto dup = std::find_if(qs.begin(), qs.end(),
                          [&](const Query& q) { return q.item_id == event.item_id && q.relation == rel; });
  if (dup != qs.end()) {
    if (dup->timestamp > event.timestamp) return true;
    qs.erase(dup);
  }
  // Newest first; among equal timestamps the later arrival goes first.
  auto pos = std::find_if(qs.begin(), qs.end(), [&](const Query& q) { return q.timestamp <= event.timestamp; });
  qs.insert(pos, Query{event.item_id, rel, item->category(), event.timestamp});
  if (qs.size() > options.max_queries) qs.resize(options.max_queries);
  return true;
}

bool ProfileBook::ingest(const Event& event, const Catalog& catalog) {
  if (!catalog.find(event.item_id)) {
    ++skipped_;
    return false;
  }
  auto& p = profiles_[event.customer_id];
  return ingest_event(p, event, catalog, options_);
}

const CustomerProfile* ProfileBook::find(std::string_view customer_id) const {
  auto it = profiles_.find(std::string(customer_id));
  return it == profiles_.end() ? nullptr : &it->second;
}

std::vector<std::string> ProfileBook::customer_ids() const {
  std::vector<std::string> ids;
  ids.reserve(profiles_.size());
  for (const auto& [id, p] : profiles_) ids.push_back(id);
  std::sort(ids.begin(), ids.end());
  return ids;
}

std::vector<std::string> EligibleSet::sorted() const {
  std::vector<std::string> out(members_.begin(), members_.end());
  std::sort(out.begin(), out.end());
  return out;
}

EligibleSet build_eligible_set(const Catalog& catalog, Surface surface) {
  std::unordered_set<std::string> members;
  if (surface == Surface::all || surface == Surface::deals) {
    for (const auto& item : catalog.items()) {
      if (surface == Surface::all || item.deal) members.insert(item.id);
    }
    return EligibleSet(surface, std::move(members));
  }
  std::map<std::string, std::vector<const Item*>> by_category;
  for (const auto& item : catalog.items()) by_category[item.category()].push_back(&item);
  const std::size_t percent = surface == Surface::fresh ? 10 : 20;
  for (auto& [cat, items] : by_category) {
    std::sort(items.begin(), items.end(), [&](const Item* a, const Item* b) {
      if (surface == Surface::fresh) {
        if (a->release_date != b->release_date) return a->release_date > b->release_date;
      } else if (a->popularity != b->popularity) {
        return a->popularity > b->popularity;
      }
      return a->id < b->id;
    });
    const std::size_t take = (items.size() * percent + 99) / 100;
    for (std::size_t i = 0; i < take; ++i) members.insert(items[i]->id);
  }
  return EligibleSet(surface, std::move(members));
}

namespace {

struct Candidate {
  const store::Result* result;
  std::size_t query;
  const std::string* category;
  bool lead;
};

}  // namespace

std::vector<FeedItem> compose_feed(const CustomerProfile& profile, const store::SimilarityStore& store,
                                   const EligibleSet& eligible, const Catalog& catalog, const FeedOptions& options) {
  static const std::string kNoCategory;
  std::vector<std::vector<Candidate>> lists(profile.queries.size());
  std::unordered_set<std::string_view> claimed;
  for (std::size_t qi = 0; qi < profile.queries.size(); ++qi) {
    const auto& q = profile.queries[qi];
    for (const auto& r : store.lookup(q.item_id, q.relation)) {
      if (claimed.count(r.target_id)) continue;
      if (!eligible.contains(r.target_id) || profile.bought_items.count(r.target_id)) continue;
      if (options.business_filter && !options.business_filter(FeedItem{r.target_id, r.score, q, 0})) continue;
      claimed.insert(r.target_id);
      const Item* item = catalog.find(r.target_id);
      lists[qi].push_back({&r, qi, item ? nullptr : &kNoCategory, lists[qi].empty()});
    }
  }

  // Round-robin over queries, newest first.
  std::list<Candidate> pending;
  for (std::size_t round = 0;; ++round) {
    bool any = false;
    for (const auto& l : lists) {
      if (round < l.size()) {
        pending.push_back(l[round]);
        any = true;
      }
    }
    if (!any) break;
  }

  std::unordered_map<std::string_view, std::string> category_cache;
  auto category_of = [&](const Candidate& c) -> const std::string& {
    if (c.category) return *c.category;
    auto it = category_cache.find(c.result->target_id);
    if (it == category_cache.end()) {
      it = category_cache.emplace(c.result->target_id, catalog.find(c.result->target_id)->category()).first;
    }
    return it->second;
  };

  std::vector<FeedItem> feed;
  std::string run_category;
  std::size_t run_length = 0;
  while (feed.size() < options.feed_size && !pending.empty()) {
    auto chosen = pending.end();
    bool lead_pending = false;
    for (auto it = pending.begin(); it != pending.end(); ++it) {
      const bool fits = options.max_consecutive == 0 || run_length < options.max_consecutive ||
                        category_of(*it) != run_category;
      if (fits && !(it->lead && lead_pending)) {
        chosen = it;
        break;
      }
      if (it->lead) lead_pending = true;
    }
    if (chosen == pending.end()) chosen = pending.begin();
    const std::string& cat = category_of(*chosen);
    if (!feed.empty() && cat == run_category) {
      ++run_length;
    } else {
      run_category = cat;
      run_length = 1;
    }
    feed.push_back({chosen->result->target_id, chosen->result->score, profile.queries[chosen->query], feed.size() + 1});
    pending.erase(chosen);
  }
  return feed;
}

FeedMap batch_refresh(const ProfileBook& profiles, const store::SimilarityStore& store, const EligibleSet& eligible,
                      const Catalog& catalog, const FeedOptions& options) {
  FeedMap out;
  for (const auto& [id, profile] : profiles.profiles()) out[id] = compose_feed(profile, store, eligible, catalog, options);
  return out;
}

void incremental_refresh(std::span<const std::string> active, const ProfileBook& profiles,
                         const store::SimilarityStore& store, const EligibleSet& eligible, const Catalog& catalog,
                         const FeedOptions& options, FeedMap& feeds) {
  for (const auto& id : active) {
    const auto* profile = profiles.find(id);
    if (!profile) throw ContractError("incremental refresh: unknown customer '" + id + "'");
    feeds[id] = compose_feed(*profile, store, eligible, catalog, options);
  }
}

FeedService::FeedService(Catalog catalog, std::shared_ptr<const store::SimilarityStore> store, FeedOptions options,
                         ProfileOptions profile_options)
    : catalog_(std::move(catalog)),
      options_(std::move(options)),
      store_(std::move(store)),
      profiles_(profile_options),
      cache_(4) {
  if (!store_) throw ContractError("feed service: no similarity store");
  for (Surface s : {Surface::all, Surface::deals, Surface::fresh, Surface::popular}) {
    eligible_.push_back(build_eligible_set(catalog_, s));
  }
}

bool FeedService::ingest(const Event& event) {
  std::unique_lock lock(mutex_);
  const bool ok = profiles_.ingest(event, catalog_);
  if (ok) active_.insert(event.customer_id);
  return ok;
}

void FeedService::refresh_all() {
  std::unique_lock lock(mutex_);
  for (std::size_t s = 0; s < cache_.size(); ++s) {
    cache_[s] = batch_refresh(profiles_, *store_, eligible_[s], catalog_, options_);
  }
  active_.clear();
}

std::size_t FeedService::refresh_active() {
  std::unique_lock lock(mutex_);
  const std::vector<std::string> active(active_.begin(), active_.end());
  for (std::size_t s = 0; s < cache_.size(); ++s) {
    incremental_refresh(active, profiles_, *store_, eligible_[s], catalog_, options_, cache_[s]);
  }
  active_.clear();
  return active.size();
}

std::optional<std::vector<FeedItem>> FeedService::feed(std::string_view customer_id, Surface surface,
                                                       std::size_t size) {
  const std::string id(customer_id);
  const auto s = static_cast<std::size_t>(surface);
  if (size == 0) size = options_.feed_size;
  {
    std::shared_lock lock(mutex_);
    const auto* profile = profiles_.find(id);
    if (!profile) return std::nullopt;
    if (size > options_.feed_size) {
      FeedOptions bigger = options_;
      bigger.feed_size = size;
      return compose_feed(*profile, *store_, eligible_[s], catalog_, bigger);
    }
    auto it = cache_[s].find(id);
    if (it != cache_[s].end()) {
      const auto& f = it->second;
      return std::vector<FeedItem>(f.begin(), f.begin() + static_cast<std::ptrdiff_t>(std::min(size, f.size())));
    }
  }
  std::unique_lock lock(mutex_);
  const auto* profile = profiles_.find(id);
  if (!profile) return std::nullopt;
  auto& f = cache_[s][id];
  f = compose_feed(*profile, *store_, eligible_[s], catalog_, options_);
  return std::vector<FeedItem>(f.begin(), f.begin() + static_cast<std::ptrdiff_t>(std::min(size, f.size())));
}

void FeedService::swap_store(std::shared_ptr<const store::SimilarityStore> store) {
  if (!store) throw ContractError("feed service: no similarity store");
  std::unique_lock lock(mutex_);
  store_ = std::move(store);
}

std::shared_ptr<const store::SimilarityStore> FeedService::store() const {
  std::shared_lock lock(mutex_);
  return store_;
}

std::size_t FeedService::customers() const {
  std::shared_lock lock(mutex_);
  return profiles_.size();
}

std::size_t FeedService::skipped_events() const {
  std::shared_lock lock(mutex_);
  return profiles_.skipped();
}

}  // namespace pfeed::feed
