#include "pfeed/vector_index.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>

#include "pfeed/errors.hpp"
#include "pfeed/instrumentation.hpp"
#include "pfeed/io.hpp"
#include "pfeed/pair_miner.hpp"

namespace pfeed::index {

namespace {

constexpr std::size_t kLanes = 16;

// Fixed evaluation order so a row scores identically in every code path.
inline float dot(const float* a, const float* b, std::size_t d) {
  float acc[kLanes] = {};
  std::size_t i = 0;
  for (; i + kLanes <= d; i += kLanes) {
    for (std::size_t l = 0; l < kLanes; ++l) acc[l] += a[i + l] * b[i + l];
  }
  float tail = 0;
  for (; i < d; ++i) tail += a[i] * b[i];
  float s = 0;
  for (std::size_t l = 0; l < kLanes; ++l) s += acc[l];
  return s + tail;
}

inline double squared_distance(const float* a, const float* b, std::size_t d) {
  double s = 0;
  for (std::size_t i = 0; i < d; ++i) {
    const double diff = double(a[i]) - double(b[i]);
    s += diff * diff;
  }
  return s;
}

std::size_t nearest_centroid(const float* x, const std::vector<float>& centroids, std::size_t k, std::size_t d,
                             double* distance = nullptr) {
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < k; ++c) {
    const double dist = squared_distance(x, centroids.data() + c * d, d);
    if (dist < best_d) {
      best_d = dist;
      best = c;
    }
  }
  if (distance) *distance = best_d;
  return best;
}

}  // namespace

std::string_view to_string(Variant v) { return v == Variant::exact ? "exact" : "ivf"; }

Variant parse_variant(std::string_view s) {
  if (s == "exact") return Variant::exact;
  if (s == "ivf") return Variant::ivf;
  throw InputError("unknown index variant '" + std::string(s) + "' (expected exact or ivf)");
}

std::vector<float> kmeans(std::span<const float> x, std::size_t n, std::size_t dim, std::size_t k,
                          std::uint64_t seed, std::size_t max_iterations, std::vector<std::uint32_t>& assignment) {
  if (k < 1 || k > n) throw ContractError("kmeans: need 1 <= clusters <= rows");
  std::mt19937_64 rng(seed);
  std::vector<float> centroids(k * dim);
  const auto init = mining::sample_without_replacement(n, k, rng);
  for (std::size_t c = 0; c < k; ++c) std::copy_n(x.data() + init[c] * dim, dim, centroids.data() + c * dim);

  assignment.assign(n, 0);
  std::vector<double> distance(n);
  std::vector<double> sums(k * dim);
  std::vector<std::size_t> counts(k);
  for (std::size_t iter = 0; iter < max_iterations; ++iter) {
    bool changed = iter == 0;
    for (std::size_t i = 0; i < n; ++i) {
      const auto c = static_cast<std::uint32_t>(nearest_centroid(x.data() + i * dim, centroids, k, dim, &distance[i]));
      if (c != assignment[i]) changed = true;
      assignment[i] = c;
    }
    if (!changed) break;
    std::fill(sums.begin(), sums.end(), 0.0);
    std::fill(counts.begin(), counts.end(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t c = assignment[i];
      ++counts[c];
      for (std::size_t j = 0; j < dim; ++j) sums[c * dim + j] += x[i * dim + j];
    }
    // Farthest points first; each empty cluster takes the next one.
    std::vector<std::size_t> far;
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] > 0) {
        for (std::size_t j = 0; j < dim; ++j) {
          centroids[c * dim + j] = static_cast<float>(sums[c * dim + j] / double(counts[c]));
        }
        continue;
      }
      if (far.empty()) {
        far.resize(n);
        std::iota(far.begin(), far.end(), std::size_t{0});
        std::stable_sort(far.begin(), far.end(), [&](std::size_t a, std::size_t b) { return distance[a] > distance[b]; });
        std::reverse(far.begin(), far.end());  // pop from the back
      }
      const std::size_t p = far.back();
      far.pop_back();
      std::copy_n(x.data() + p * dim, dim, centroids.data() + c * dim);
      distance[p] = 0;
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    assignment[i] = static_cast<std::uint32_t>(nearest_centroid(x.data() + i * dim, centroids, k, dim));
  }
  return centroids;
}

VectorIndex VectorIndex::build(std::vector<std::string> ids, std::vector<float> vectors, std::size_t dim,
                               const BuildParams& params) {
  if (ids.empty()) throw InputError("index: no vectors to index");
  if (dim == 0 || vectors.size() != ids.size() * dim) {
    throw InputError("index: expected " + std::to_string(ids.size()) + " x " + std::to_string(dim) +
                     " values, got " + std::to_string(vectors.size()));
  }
  for (std::size_t r = 0; r < ids.size(); ++r) {
    double s = 0;
    for (std::size_t j = 0; j < dim; ++j) s += double(vectors[r * dim + j]) * vectors[r * dim + j];
    if (std::abs(std::sqrt(s) - 1.0) > 1e-5) throw ContractError("index: row '" + ids[r] + "' is not unit norm");
  }
  VectorIndex idx;
  idx.variant_ = params.variant;
  idx.dim_ = dim;
  idx.ids_ = std::move(ids);
  idx.vectors_ = std::move(vectors);
  if (params.variant == Variant::ivf) {
    const std::size_t n = idx.ids_.size();
    if (params.clusters < 1 || params.clusters > n) throw ContractError("index: ivf needs 1 <= clusters <= n");
    idx.centroids_ = kmeans(idx.vectors_, n, dim, params.clusters, params.seed, params.max_iterations, idx.assignments_);
    idx.nprobe_ = std::clamp<std::size_t>(params.nprobe, 1, params.clusters);
  }
  idx.finalize();
  return idx;
}

void VectorIndex::finalize() {
  const std::size_t n = ids_.size();
  std::vector<std::uint32_t> order(n);
  std::iota(order.begin(), order.end(), 0u);
  std::sort(order.begin(), order.end(), [&](std::uint32_t a, std::uint32_t b) { return ids_[a] < ids_[b]; });
  id_rank_.assign(n, 0);
  for (std::size_t r = 0; r < n; ++r) id_rank_[order[r]] = static_cast<std::uint32_t>(r);
  members_.clear();
  if (variant_ == Variant::ivf) {
    members_.resize(clusters());
    for (std::size_t i = 0; i < n; ++i) members_.at(assignments_[i]).push_back(static_cast<std::uint32_t>(i));
  }
}

void VectorIndex::set_nprobe(std::size_t nprobe) {
  if (variant_ != Variant::ivf) return;
  if (nprobe < 1 || nprobe > clusters()) throw ContractError("index: nprobe must lie in [1, clusters]");
  nprobe_ = nprobe;
}

void VectorIndex::top_m(const float* scores, const std::uint32_t* rows, std::size_t count, std::size_t m,
                        std::vector<Hit>& out) const {
  std::vector<std::uint32_t> pos(count);
  std::iota(pos.begin(), pos.end(), 0u);
  auto better = [&](std::uint32_t a, std::uint32_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return id_rank_[rows ? rows[a] : a] < id_rank_[rows ? rows[b] : b];
  };
  const std::size_t take = std::min(m, count);
  std::partial_sort(pos.begin(), pos.begin() + static_cast<std::ptrdiff_t>(take), pos.end(), better);
  out.clear();
  out.reserve(take);
  for (std::size_t i = 0; i < take; ++i) {
    const std::uint32_t row = rows ? rows[pos[i]] : pos[i];
    out.push_back({ids_[row], scores[pos[i]]});
  }
}

std::vector<std::size_t> VectorIndex::probe_order(std::span<const float> query) const {
  const std::size_t k = clusters();
  std::vector<double> dist(k);
  for (std::size_t c = 0; c < k; ++c) dist[c] = squared_distance(query.data(), centroids_.data() + c * dim_, dim_);
  std::vector<std::size_t> order(k);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return dist[a] < dist[b]; });
  return order;
}

std::vector<Hit> VectorIndex::search(std::span<const float> query, std::size_t m) const {
  if (query.size() != dim_) throw DimensionError("index: query has dimension " + std::to_string(query.size()) +
                                                 ", index has " + std::to_string(dim_));
  if (m < 1) throw ContractError("index: m must be >= 1");
  instrumentation::index_searches().fetch_add(1, std::memory_order_relaxed);
  std::vector<Hit> out;
  if (variant_ == Variant::exact) {
    std::vector<float> scores(size());
    for (std::size_t r = 0; r < size(); ++r) scores[r] = dot(vectors_.data() + r * dim_, query.data(), dim_);
    top_m(scores.data(), nullptr, scores.size(), m, out);
    return out;
  }
  std::vector<std::uint32_t> rows;
  const auto order = probe_order(query);
  for (std::size_t p = 0; p < nprobe_; ++p) {
    const auto& mem = members_[order[p]];
    rows.insert(rows.end(), mem.begin(), mem.end());
  }
  std::vector<float> scores(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) scores[i] = dot(vectors_.data() + rows[i] * dim_, query.data(), dim_);
  top_m(scores.data(), rows.data(), rows.size(), m, out);
  return out;
}

std::vector<std::vector<Hit>> VectorIndex::batch_search(std::span<const float> queries, std::size_t m) const {
  if (queries.size() % dim_ != 0) throw DimensionError("index: query block is not a multiple of the dimension");
  const std::size_t q = queries.size() / dim_;
  std::vector<std::vector<Hit>> out(q);
  if (variant_ != Variant::exact) {
    for (std::size_t i = 0; i < q; ++i) out[i] = search(queries.subspan(i * dim_, dim_), m);
    return out;
  }
  if (m < 1) throw ContractError("index: m must be >= 1");
  // Score a block of queries per pass over the stored rows.
  constexpr std::size_t kBlock = 32;
  const std::size_t n = size();
  std::vector<float> scores(kBlock * n);
  for (std::size_t start = 0; start < q; start += kBlock) {
    const std::size_t b = std::min(kBlock, q - start);
    for (std::size_t r = 0; r < n; ++r) {
      const float* row = vectors_.data() + r * dim_;
      for (std::size_t j = 0; j < b; ++j) scores[j * n + r] = dot(row, queries.data() + (start + j) * dim_, dim_);
    }
    for (std::size_t j = 0; j < b; ++j) top_m(scores.data() + j * n, nullptr, n, m, out[start + j]);
    instrumentation::index_searches().fetch_add(b, std::memory_order_relaxed);
  }
  return out;
}

void VectorIndex::save(const std::filesystem::path& path) const {
  io::write_atomic(
      path,
      [&](std::ostream& os) {
        os.write("PFI1", 4);
        io::write_u32(os, static_cast<std::uint32_t>(variant_));
        io::write_u32(os, static_cast<std::uint32_t>(dim_));
        io::write_u64(os, ids_.size());
        for (const auto& id : ids_) io::write_string(os, id);
        io::write_f32_block(os, vectors_);
        if (variant_ == Variant::ivf) {
          io::write_u32(os, static_cast<std::uint32_t>(clusters()));
          io::write_u32(os, static_cast<std::uint32_t>(nprobe_));
          io::write_f32_block(os, centroids_);
          for (auto a : assignments_) io::write_u32(os, a);
        }
      },
      true);
}

VectorIndex VectorIndex::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InputError("cannot open index " + path.string());
  io::expect_magic(is, "PFI1", path);
  VectorIndex idx;
  const auto variant = io::read_u32(is);
  if (variant > 1) throw InputError(path.string() + ": unknown index variant " + std::to_string(variant));
  idx.variant_ = static_cast<Variant>(variant);
  idx.dim_ = io::read_u32(is);
  const auto n = io::read_u64(is);
  if (idx.dim_ == 0 || n == 0) throw InputError(path.string() + ": empty index");
  idx.ids_.reserve(n);
  for (std::uint64_t i = 0; i < n; ++i) idx.ids_.push_back(io::read_string(is));
  idx.vectors_.resize(n * idx.dim_);
  io::read_f32_block(is, idx.vectors_);
  if (idx.variant_ == Variant::ivf) {
    const std::size_t k = io::read_u32(is);
    idx.nprobe_ = io::read_u32(is);
    if (k < 1 || k > n || idx.nprobe_ < 1 || idx.nprobe_ > k) throw InputError(path.string() + ": bad ivf header");
    idx.centroids_.resize(k * idx.dim_);
    io::read_f32_block(is, idx.centroids_);
    idx.assignments_.resize(n);
    for (auto& a : idx.assignments_) {
      a = io::read_u32(is);
      if (a >= k) throw InputError(path.string() + ": assignment out of range");
    }
  }
  idx.finalize();
  return idx;
}

void write_embeddings(const std::filesystem::path& path, std::span<const model::ItemEmbeddings> embeddings) {
  const std::size_t dim = embeddings.empty() ? 0 : embeddings.front().target.size();
  io::write_atomic(
      path,
      [&](std::ostream& os) {
        os.write("PFE1", 4);
        io::write_u32(os, static_cast<std::uint32_t>(dim));
        io::write_u64(os, embeddings.size());
        for (const auto& e : embeddings) {
          if (e.q_view.size() != dim || e.q_buy.size() != dim || e.target.size() != dim) {
            throw DimensionError("embeddings: inconsistent dimension for '" + e.item_id + "'");
          }
          io::write_string(os, e.item_id);
          io::write_f32_block(os, e.q_view);
          io::write_f32_block(os, e.q_buy);
          io::write_f32_block(os, e.target);
        }
      },
      true);
}

std::vector<model::ItemEmbeddings> read_embeddings(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InputError("cannot open embeddings " + path.string());
  io::expect_magic(is, "PFE1", path);
  const std::size_t dim = io::read_u32(is);
  const auto n = io::read_u64(is);
  std::vector<model::ItemEmbeddings> out(n);
  for (auto& e : out) {
    e.item_id = io::read_string(is);
    for (auto* v : {&e.q_view, &e.q_buy, &e.target}) {
      v->resize(dim);
      io::read_f32_block(is, *v);
    }
  }
  return out;
}

EmbeddingTable::EmbeddingTable(std::vector<model::ItemEmbeddings> items) : items_(std::move(items)) {
  const std::size_t d = dim();
  for (std::size_t i = 0; i < items_.size(); ++i) {
    const auto& e = items_[i];
    if (e.q_view.size() != d || e.q_buy.size() != d || e.target.size() != d) {
      throw DimensionError("embeddings: inconsistent dimension for '" + e.item_id + "'");
    }
    if (!index_.emplace(e.item_id, i).second) throw InputError("embeddings: duplicate item '" + e.item_id + "'");
  }
}

const model::ItemEmbeddings* EmbeddingTable::find(std::string_view id) const {
  auto it = index_.find(std::string(id));
  return it == index_.end() ? nullptr : &items_[it->second];
}

const model::ItemEmbeddings& EmbeddingTable::at(std::string_view id) const {
  if (const auto* e = find(id)) return *e;
  throw InputError("no embedding for item '" + std::string(id) + "'");
}

VectorIndex build_target_index(const EmbeddingTable& table, const BuildParams& params,
                               std::span<const std::string> subset) {
  std::vector<std::string> ids;
  std::vector<float> vectors;
  auto add = [&](const model::ItemEmbeddings& e) {
    ids.push_back(e.item_id);
    vectors.insert(vectors.end(), e.target.begin(), e.target.end());
  };
  if (subset.empty()) {
    for (const auto& e : table.items()) add(e);
  } else {
    for (const auto& id : subset) add(table.at(id));
  }
  return VectorIndex::build(std::move(ids), std::move(vectors), table.dim(), params);
}

}  // namespace pfeed::index
