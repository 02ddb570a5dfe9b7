#pragma once

// Top-M inner-product search over unit vectors: an exhaustive index and an
// inverted-file index partitioned by k-means.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "pfeed/encoder.hpp"

namespace pfeed::index {

enum class Variant : std::uint32_t { exact = 0, ivf = 1 };

std::string_view to_string(Variant v);
Variant parse_variant(std::string_view s);

struct Hit {
  std::string id;
  float score = 0;

  friend bool operator==(const Hit&, const Hit&) = default;
};

struct BuildParams {
  Variant variant = Variant::exact;
  std::size_t clusters = 1;  // ivf only
  std::size_t nprobe = 1;    // ivf only
  std::uint64_t seed = 0;
  std::size_t max_iterations = 25;
};

class VectorIndex {
 public:
  VectorIndex() = default;

  /// `vectors` is row-major [ids.size() x dim]; every row must be unit norm.
  static VectorIndex build(std::vector<std::string> ids, std::vector<float> vectors, std::size_t dim,
                           const BuildParams& params = {});

  Variant variant() const { return variant_; }
  std::size_t dim() const { return dim_; }
  std::size_t size() const { return ids_.size(); }
  const std::vector<std::string>& ids() const { return ids_; }
  std::span<const float> vector(std::size_t row) const { return {vectors_.data() + row * dim_, dim_}; }
  std::size_t clusters() const { return centroids_.size() / (dim_ ? dim_ : 1); }
  std::size_t nprobe() const { return nprobe_; }
  void set_nprobe(std::size_t nprobe);
  const std::vector<std::uint32_t>& assignments() const { return assignments_; }
  std::span<const float> centroid(std::size_t c) const { return {centroids_.data() + c * dim_, dim_}; }

  /// Highest inner products first; equal scores by id ascending.
  std::vector<Hit> search(std::span<const float> query, std::size_t m) const;
  /// `queries` is row-major [q x dim]; result i equals search(row i).
  std::vector<std::vector<Hit>> batch_search(std::span<const float> queries, std::size_t m) const;
  /// Cluster ids probed for `query`, nearest centroid first.
  std::vector<std::size_t> probe_order(std::span<const float> query) const;

  /// "PFI1": u32 variant, u32 dim, u64 n, ids, float32 rows, then for ivf
  /// u32 clusters, u32 nprobe, float32 centroids, u32 assignment per row.
  void save(const std::filesystem::path& path) const;
  static VectorIndex load(const std::filesystem::path& path);

 private:
  void finalize();
  void top_m(const float* scores, const std::uint32_t* rows, std::size_t count, std::size_t m,
             std::vector<Hit>& out) const;

  Variant variant_ = Variant::exact;
  std::size_t dim_ = 0;
  std::size_t nprobe_ = 1;
  std::vector<std::string> ids_;
  std::vector<float> vectors_;
  std::vector<float> centroids_;
  std::vector<std::uint32_t> assignments_;
  // Derived on build/load.
  std::vector<std::uint32_t> id_rank_;                 // position of each row in id order
  std::vector<std::vector<std::uint32_t>> members_;    // rows per cluster, ascending
};

/// k-means on rows of `x` [n x dim]; returns row-major centroids and fills
/// `assignment`. Empty clusters are re-seeded with the point farthest from
/// its centroid.
std::vector<float> kmeans(std::span<const float> x, std::size_t n, std::size_t dim, std::size_t k,
                          std::uint64_t seed, std::size_t max_iterations, std::vector<std::uint32_t>& assignment);

// "PFE1" embeddings file: u32 dim, u64 n, then per item an id string and the
// view-query, buy-query and target vectors as float32.
void write_embeddings(const std::filesystem::path& path, std::span<const model::ItemEmbeddings> embeddings);
std::vector<model::ItemEmbeddings> read_embeddings(const std::filesystem::path& path);

/// Embeddings addressable by item id.
class EmbeddingTable {
 public:
  EmbeddingTable() = default;
  explicit EmbeddingTable(std::vector<model::ItemEmbeddings> items);

  const std::vector<model::ItemEmbeddings>& items() const { return items_; }
  std::size_t size() const { return items_.size(); }
  std::size_t dim() const { return items_.empty() ? 0 : items_.front().target.size(); }
  const model::ItemEmbeddings* find(std::string_view id) const;
  /// Throws InputError for an unknown id.
  const model::ItemEmbeddings& at(std::string_view id) const;

 private:
  std::vector<model::ItemEmbeddings> items_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Index over the target vectors of `items` (all of them when `subset` is empty).
VectorIndex build_target_index(const EmbeddingTable& table, const BuildParams& params,
                               std::span<const std::string> subset = {});

}  // namespace pfeed::index
