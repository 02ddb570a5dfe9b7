#pragma once

// Offline evaluation: recall@K against distractors, relationship categories,
// popularity segments, a synthetic world with planted structure, and reports.

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "pfeed/catalog.hpp"
#include "pfeed/pair_miner.hpp"
#include "pfeed/vector_index.hpp"

namespace pfeed::eval {

struct EvalConfig {
  std::size_t k = 10;
  std::size_t distractor_count = 10000;
  std::uint64_t seed = 0;
  double train_fraction = 0.8;
  double validation_fraction = 0.1;

  void validate() const;
};

/// 1 + number of distractors d != t with Q(q, r) . T(d) >= Q(q, r) . T(t).
std::vector<std::size_t> target_ranks(std::span<const mining::QueryTargetPair> pairs,
                                      const index::EmbeddingTable& table, std::span<const std::string> distractors);

struct Recall {
  std::size_t hits = 0;
  std::size_t total = 0;
  double value() const { return total ? double(hits) / double(total) : 0.0; }
};

struct RecallBreakdown {
  Recall overall;
  Recall view;
  Recall buy;
};

RecallBreakdown recall_at_k(std::span<const mining::QueryTargetPair> pairs, const index::EmbeddingTable& table,
                            std::span<const std::string> distractors, std::size_t k);
/// Fraction of ranks within k.
Recall recall_from_ranks(std::span<const std::size_t> ranks, std::size_t k);

/// k / (distractors + 1), and the binomial standard deviation of a recall
/// estimate over `n` pairs at that rate.
double random_baseline(std::size_t k, std::size_t distractors);
double baseline_sigma(std::size_t k, std::size_t distractors, std::size_t n);

/// Distractors drawn uniformly from `ids` without replacement.
std::vector<std::string> sample_distractors(std::span<const std::string> ids, std::size_t count, std::uint64_t seed);

enum class Relationship : std::uint8_t { one_to_one, one_to_many, many_to_one, many_to_many };
std::string_view to_string(Relationship r);  // 1x1, 1xn, mx1, mxn

/// Labels from the query's out-degree and the target's in-degree within `pairs`.
std::vector<Relationship> classify_relationships(std::span<const mining::QueryTargetPair> pairs);
/// Count per label, in label order.
std::array<std::size_t, 4> relationship_distribution(std::span<const Relationship> labels);

enum class Segment : std::uint8_t { cold_start, tail, head };
std::string_view to_string(Segment s);

/// Pairs mentioning each item, in either role.
std::map<std::string, std::size_t> interaction_counts(std::span<const mining::QueryTargetPair> train_pairs);
/// cold-start: target absent from the counts; head: target among the top
/// ceil(1%) items by count (ties by id); tail: the rest.
std::vector<Segment> segment_by_popularity(std::span<const mining::QueryTargetPair> test_pairs,
                                           const std::map<std::string, std::size_t>& counts);

// Synthetic world.

struct WorldConfig {
  std::size_t categories = 40;
  std::size_t items_per_category = 50;
  std::size_t line_size = 5;          // items per product line
  std::size_t customers = 4000;
  std::size_t sessions = 24000;
  std::uint64_t seed = 7;
  double within_category = 0.9;       // view drawn from the bought item's category
  double same_line = 0.5;             // ...and from its product line
  double non_converting = 0.25;       // sessions without a purchase
  double follow_up = 0.5;             // purchase followed by a complement purchase
  double partner = 0.7;               // follow-up is the planted partner item
  std::int64_t follow_up_max_days = 30;
  double zipf_exponent = 0.8;
  double deal_rate = 0.15;

  void validate() const;
};

struct World {
  Catalog catalog;
  std::vector<Event> events;
  std::vector<std::size_t> item_category;  // per catalog index
  std::vector<std::size_t> complement;     // category -> complement category
  std::vector<std::size_t> partner;        // item -> planted follow-up item
};

World generate_synthetic_world(const WorldConfig& config);

/// Fraction of (viewed, bought) pairs of distinct items in converting
/// sessions that share a category.
double within_category_view_rate(const World& world);
/// Fraction of buy-buy pairs whose target lies in the query's complement category.
double complement_rate(const World& world, std::span<const mining::QueryTargetPair> pairs);

// Reports.

struct Metric {
  std::string section;  // e.g. dataset, segment, relationship, config
  std::string group;    // e.g. view, buy, overall, head, 1x1, simo-64
  std::size_t k = 10;
  std::size_t count = 0;
  std::size_t hits = 0;
  double recall = 0;

  friend bool operator==(const Metric&, const Metric&) = default;
};

struct Report {
  nlohmann::json config = nlohmann::json::object();
  std::vector<Metric> metrics;
};

void add_metric(Report& report, std::string section, std::string group, std::size_t k, const Recall& r);
/// First line {"config": ...}, then one JSON object per metric.
void write_report_jsonl(const std::filesystem::path& path, const Report& report);
Report read_report_jsonl(const std::filesystem::path& path);
std::string format_table(const Report& report);
void write_report_table(const std::filesystem::path& path, const Report& report);

}  // namespace pfeed::eval
