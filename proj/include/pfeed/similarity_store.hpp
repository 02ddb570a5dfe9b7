#pragma once

// Precomputed (item, relation) -> top-M targets lookup table, thresholded by
// a percentile of known positive-pair scores.

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "pfeed/catalog.hpp"
#include "pfeed/pair_miner.hpp"
#include "pfeed/vector_index.hpp"

namespace pfeed::store {

struct ThresholdSpec {
  double tau = 0;
  double percentile = 1.0;
  std::size_t sample_count = 0;
};

/// The ceil(p/100 * n)-th smallest value (at least the first), p in (0, 100].
double nearest_rank_percentile(std::vector<double> values, double percentile);

/// Q(q, r) . T(t) for each pair; throws InputError on a missing embedding.
std::vector<double> pair_scores(std::span<const mining::QueryTargetPair> pairs, const index::EmbeddingTable& table);

ThresholdSpec compute_threshold(std::span<const mining::QueryTargetPair> validation,
                                const index::EmbeddingTable& table, double percentile = 1.0);

struct Result {
  std::string target_id;
  double score = 0;  // rounded to 6 decimals

  friend bool operator==(const Result&, const Result&) = default;
};

struct Entry {
  std::string item_id;
  Relation relation = Relation::view;
  std::vector<Result> results;

  friend bool operator==(const Entry&, const Entry&) = default;
};

/// Scores are kept at the precision of the text format.
double quantize_score(double s);

class SimilarityStore {
 public:
  SimilarityStore() = default;
  /// Entries are re-ordered by (item id, relation); a key may appear once.
  SimilarityStore(std::vector<Entry> entries, double tau);

  double tau() const { return tau_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t result_count() const;

  /// Stored results for the key; empty on a miss.
  std::span<const Result> lookup(std::string_view item_id, Relation relation) const;

  // Text: "# tau=<value>" header, then item_id  relation  (target_id  score)*
  void write_text(const std::filesystem::path& path, std::string_view header = {}) const;
  static SimilarityStore read_text(const std::filesystem::path& path);
  // "PFS1": f64 tau, u64 entries, then per entry id, u32 relation, u32 count,
  // and (id, f64 score) per result.
  void write_binary(const std::filesystem::path& path) const;
  static SimilarityStore read_binary(const std::filesystem::path& path);
  /// Picks the format from the file's first bytes.
  static SimilarityStore load(const std::filesystem::path& path);

  friend bool operator==(const SimilarityStore& a, const SimilarityStore& b) {
    return a.tau_ == b.tau_ && a.entries_ == b.entries_;
  }

 private:
  void reindex();

  double tau_ = 0;
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::array<std::int32_t, 2>> slots_;
};

struct PrecomputeOptions {
  std::size_t m = 10;
};

/// For every item of `table` and both relations: top M+1 by Q(item, r) . T,
/// self-match dropped, scores rounded, kept only when > tau, truncated to M.
/// Keys without results are omitted.
SimilarityStore precompute(const index::VectorIndex& index, const index::EmbeddingTable& table, double tau,
                           const PrecomputeOptions& options = {});

}  // namespace pfeed::store
