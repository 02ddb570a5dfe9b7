#pragma once

// Positive item-to-item pairs mined from view/buy logs, plus uniform negatives.

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "pfeed/catalog.hpp"

namespace pfeed::mining {

struct QueryTargetPair {
  std::string query_id;
  Relation relation = Relation::view;
  std::string target_id;
  std::size_t count = 0;
  double association = 0;  // count(q,t) / sqrt(count(q) * count(t))

  friend bool operator==(const QueryTargetPair&, const QueryTargetPair&) = default;
};

struct MiningOptions {
  std::size_t top_n = 1000;
  std::size_t min_count = 2;
  std::int64_t horizon_days = 90;  // buy-buy only
};

/// Candidates (v, view, b) for every distinct viewed item v and bought item
/// b != v of each converting session. Marginals count the sessions in which
/// an item takes part in at least one candidate in that role.
std::vector<QueryTargetPair> mine_view_buy(std::span<const Event> events, const MiningOptions& options);

/// Candidates (a, buy, b) for purchases of the same customer with
/// 0 < t(b) - t(a) <= horizon. Counted once per customer.
std::vector<QueryTargetPair> mine_buy_buy(std::span<const Event> events, const MiningOptions& options);

/// Orders by association desc, count desc, then query id and target id.
void rank_pairs(std::vector<QueryTargetPair>& pairs);

/// k distinct indices from [0, n), uniform without replacement.
std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k, std::mt19937_64& rng);
/// k distinct catalog item ids, uniform without replacement.
std::vector<std::string> sample_negative_items(std::span<const std::string> catalog_ids, std::size_t k,
                                               std::uint64_t seed);

struct PairSplits {
  std::vector<QueryTargetPair> train;
  std::vector<QueryTargetPair> validation;
  std::vector<QueryTargetPair> test;
};

/// Seeded shuffle, then 80/10/10.
PairSplits split_pairs(std::vector<QueryTargetPair> pairs, std::uint64_t seed, double train_fraction = 0.8,
                       double validation_fraction = 0.1);

// query_id  relation  target_id  count  association
void write_pairs(const std::filesystem::path& path, std::span<const QueryTargetPair> pairs,
                 std::string_view header = {});
std::vector<QueryTargetPair> read_pairs(const std::filesystem::path& path);

void write_ids(const std::filesystem::path& path, std::span<const std::string> ids, std::string_view header = {});
std::vector<std::string> read_ids(const std::filesystem::path& path);

}  // namespace pfeed::mining
