#include "pfeed/similarity_store.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "pfeed/errors.hpp"
#include "pfeed/io.hpp"

namespace pfeed::store {

double nearest_rank_percentile(std::vector<double> values, double percentile) {
  if (values.empty()) throw InputError("percentile of an empty sample");
  if (!(percentile > 0 && percentile <= 100)) throw ContractError("percentile must lie in (0, 100]");
  std::sort(values.begin(), values.end());
  const double n = static_cast<double>(values.size());
  // Guard the product against representation error, e.g. 0.07 * 100.
  auto rank = static_cast<std::size_t>(std::ceil(percentile / 100.0 * n - 1e-9));
  rank = std::clamp<std::size_t>(rank, 1, values.size());
  return values[rank - 1];
}

std::vector<double> pair_scores(std::span<const mining::QueryTargetPair> pairs, const index::EmbeddingTable& table) {
  std::vector<double> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) {
    const auto& q = table.at(p.query_id).query(p.relation);
    const auto& t = table.at(p.target_id).target;
    double s = 0;
    for (std::size_t j = 0; j < q.size(); ++j) s += double(q[j]) * double(t[j]);
    out.push_back(s);
  }
  return out;
}

ThresholdSpec compute_threshold(std::span<const mining::QueryTargetPair> validation,
                                const index::EmbeddingTable& table, double percentile) {
  if (validation.empty()) throw InputError("threshold: no validation pairs");
  auto scores = pair_scores(validation, table);
  const std::size_t n = scores.size();
  return {nearest_rank_percentile(std::move(scores), percentile), percentile, n};
}

double quantize_score(double s) { return std::round(s * 1e6) / 1e6; }

SimilarityStore::SimilarityStore(std::vector<Entry> entries, double tau) : tau_(tau), entries_(std::move(entries)) {
  std::sort(entries_.begin(), entries_.end(), [](const Entry& a, const Entry& b) {
    if (a.item_id != b.item_id) return a.item_id < b.item_id;
    return a.relation < b.relation;
  });
  reindex();
}

void SimilarityStore::reindex() {
  slots_.clear();
  slots_.reserve(entries_.size());
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    auto& slot = slots_.try_emplace(entries_[i].item_id, std::array<std::int32_t, 2>{-1, -1}).first->second;
    auto& cell = slot[static_cast<std::size_t>(entries_[i].relation)];
    if (cell >= 0) {
      throw InputError("store: duplicate key (" + entries_[i].item_id + ", " +
                       std::string(to_string(entries_[i].relation)) + ")");
    }
    cell = static_cast<std::int32_t>(i);
  }
}

std::size_t SimilarityStore::result_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.results.size();
  return n;
}

std::span<const Result> SimilarityStore::lookup(std::string_view item_id, Relation relation) const {
  auto it = slots_.find(std::string(item_id));
  if (it == slots_.end()) return {};
  const auto i = it->second[static_cast<std::size_t>(relation)];
  if (i < 0) return {};
  return entries_[static_cast<std::size_t>(i)].results;
}

void SimilarityStore::write_text(const std::filesystem::path& path, std::string_view header) const {
  io::write_atomic(path, [&](std::ostream& os) {
    if (!header.empty()) os << "# " << header << '\n';
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", tau_);
    os << "# tau=" << buf << '\n';
    for (const auto& e : entries_) {
      os << e.item_id << '\t' << to_string(e.relation);
      for (const auto& r : e.results) {
        std::snprintf(buf, sizeof buf, "%.6f", r.score);
        os << '\t' << r.target_id << '\t' << buf;
      }
      os << '\n';
    }
  });
}

SimilarityStore SimilarityStore::read_text(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw InputError("cannot open store " + path.string());
  double tau = 0;
  bool have_tau = false;
  std::vector<Entry> entries;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (line[0] == '#') {
      if (line.rfind("# tau=", 0) == 0) {
        tau = io::parse_double(std::string_view(line).substr(6));
        have_tau = true;
      }
      continue;
    }
    const auto f = io::split(line, '\t');
    if (f.size() < 2 || f.size() % 2 != 0) {
      throw InputError(path.string() + ":" + std::to_string(lineno) + ": malformed store record");
    }
    Entry e{std::string(f[0]), parse_relation(f[1]), {}};
    for (std::size_t i = 2; i < f.size(); i += 2) e.results.push_back({std::string(f[i]), io::parse_double(f[i + 1])});
    entries.push_back(std::move(e));
  }
  if (!have_tau) throw InputError(path.string() + ": missing '# tau=' header");
  return SimilarityStore(std::move(entries), tau);
}

void SimilarityStore::write_binary(const std::filesystem::path& path) const {
  io::write_atomic(
      path,
      [&](std::ostream& os) {
        os.write("PFS1", 4);
        io::write_f64(os, tau_);
        io::write_u64(os, entries_.size());
        for (const auto& e : entries_) {
          io::write_string(os, e.item_id);
          io::write_u32(os, static_cast<std::uint32_t>(e.relation));
          io::write_u32(os, static_cast<std::uint32_t>(e.results.size()));
          for (const auto& r : e.results) {
            io::write_string(os, r.target_id);
            io::write_f64(os, r.score);
          }
        }
      },
      true);
}

SimilarityStore SimilarityStore::read_binary(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InputError("cannot open store " + path.string());
  io::expect_magic(is, "PFS1", path);
  const double tau = io::read_f64(is);
  const auto n = io::read_u64(is);
  std::vector<Entry> entries(n);
  for (auto& e : entries) {
    e.item_id = io::read_string(is);
    const auto rel = io::read_u32(is);
    if (rel > 1) throw InputError(path.string() + ": bad relation tag");
    e.relation = static_cast<Relation>(rel);
    e.results.resize(io::read_u32(is));
    for (auto& r : e.results) {
      r.target_id = io::read_string(is);
      r.score = io::read_f64(is);
    }
  }
  return SimilarityStore(std::move(entries), tau);
}

SimilarityStore SimilarityStore::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InputError("cannot open store " + path.string());
  char magic[4] = {};
  is.read(magic, 4);
  if (is && std::string_view(magic, 4) == "PFS1") return read_binary(path);
  return read_text(path);
}

SimilarityStore precompute(const index::VectorIndex& index, const index::EmbeddingTable& table, double tau,
                           const PrecomputeOptions& options) {
  if (options.m < 1) throw ContractError("precompute: M must be >= 1");
  const std::size_t d = table.dim();
  if (!table.size()) return SimilarityStore({}, tau);
  if (d != index.dim()) throw DimensionError("precompute: embedding and index dimensions differ");
  std::vector<float> queries;
  queries.reserve(2 * table.size() * d);
  for (const auto& e : table.items()) {
    queries.insert(queries.end(), e.q_view.begin(), e.q_view.end());
    queries.insert(queries.end(), e.q_buy.begin(), e.q_buy.end());
  }
  const auto hits = index.batch_search(queries, options.m + 1);
  std::vector<Entry> entries;
  for (std::size_t i = 0; i < table.size(); ++i) {
    const auto& item = table.items()[i].item_id;
    for (Relation r : {Relation::view, Relation::buy}) {
      Entry e{item, r, {}};
      for (const auto& h : hits[2 * i + static_cast<std::size_t>(r)]) {
        if (h.id == item) continue;
        const double s = quantize_score(h.score);
        if (s > tau) e.results.push_back({h.id, s});
      }
      std::sort(e.results.begin(), e.results.end(), [](const Result& a, const Result& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.target_id < b.target_id;
      });
      if (e.results.size() > options.m) e.results.resize(options.m);
      if (!e.results.empty()) entries.push_back(std::move(e));
    }
  }
  return SimilarityStore(std::move(entries), tau);
}

}  // namespace pfeed::store
