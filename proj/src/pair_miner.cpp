#include "pfeed/pair_miner.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <map>
#include <numeric>
#include <ostream>
#include <set>
#include <unordered_map>

#include "pfeed/errors.hpp"
#include "pfeed/io.hpp"

namespace pfeed::mining {

namespace {

using PairKey = std::pair<std::string, std::string>;

struct Aggregate {
  std::map<PairKey, std::size_t> joint;
  std::unordered_map<std::string, std::size_t> query_marginal;
  std::unordered_map<std::string, std::size_t> target_marginal;

  // Adds one unit (a session or a customer) worth of distinct candidate pairs.
  void add_unit(const std::set<PairKey>& candidates) {
    std::set<std::string> queries, targets;
    for (const auto& key : candidates) {
      ++joint[key];
      queries.insert(key.first);
      targets.insert(key.second);
    }
    for (const auto& q : queries) ++query_marginal[q];
    for (const auto& t : targets) ++target_marginal[t];
  }

  std::vector<QueryTargetPair> emit(Relation relation, const MiningOptions& options) const {
    std::vector<QueryTargetPair> out;
    for (const auto& [key, count] : joint) {
      if (count < options.min_count) continue;
      const double denom = std::sqrt(static_cast<double>(query_marginal.at(key.first)) *
                                     static_cast<double>(target_marginal.at(key.second)));
      out.push_back({key.first, relation, key.second, count, static_cast<double>(count) / denom});
    }
    rank_pairs(out);
    if (out.size() > options.top_n) out.resize(options.top_n);
    return out;
  }
};

}  // namespace

void rank_pairs(std::vector<QueryTargetPair>& pairs) {
  std::sort(pairs.begin(), pairs.end(), [](const QueryTargetPair& a, const QueryTargetPair& b) {
    if (a.association != b.association) return a.association > b.association;
    if (a.count != b.count) return a.count > b.count;
    if (a.query_id != b.query_id) return a.query_id < b.query_id;
    return a.target_id < b.target_id;
  });
}

std::vector<QueryTargetPair> mine_view_buy(std::span<const Event> events, const MiningOptions& options) {
  struct Session {
    std::set<std::string> views;
    std::set<std::string> buys;
  };
  std::map<std::pair<std::string, std::string>, Session> sessions;
  for (const auto& e : events) {
    auto& s = sessions[{e.customer_id, e.session_id}];
    (e.type == EventType::view ? s.views : s.buys).insert(e.item_id);
  }
  Aggregate agg;
  for (const auto& [key, s] : sessions) {
    if (s.buys.empty()) continue;
    std::set<PairKey> candidates;
    for (const auto& v : s.views)
      for (const auto& b : s.buys)
        if (v != b) candidates.emplace(v, b);
    if (!candidates.empty()) agg.add_unit(candidates);
  }
  return agg.emit(Relation::view, options);
}

std::vector<QueryTargetPair> mine_buy_buy(std::span<const Event> events, const MiningOptions& options) {
  std::map<std::string, std::vector<std::pair<std::int64_t, std::string>>> purchases;
  for (const auto& e : events) {
    if (e.type == EventType::buy) purchases[e.customer_id].emplace_back(e.timestamp, e.item_id);
  }
  const std::int64_t horizon = options.horizon_days * 86400;
  Aggregate agg;
  for (auto& [customer, buys] : purchases) {
    std::sort(buys.begin(), buys.end());
    std::set<PairKey> candidates;
    for (std::size_t i = 0; i < buys.size(); ++i) {
      for (std::size_t j = i + 1; j < buys.size(); ++j) {
        const std::int64_t gap = buys[j].first - buys[i].first;
        if (gap > horizon) break;
        if (gap > 0 && buys[i].second != buys[j].second) candidates.emplace(buys[i].second, buys[j].second);
      }
    }
    if (!candidates.empty()) agg.add_unit(candidates);
  }
  return agg.emit(Relation::buy, options);
}

std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k, std::mt19937_64& rng) {
  if (k > n) throw InputError("cannot sample " + std::to_string(k) + " distinct items from " + std::to_string(n));
  // Partial Fisher-Yates over a sparse permutation.
  std::unordered_map<std::size_t, std::size_t> swapped;
  auto at = [&](std::size_t i) {
    auto it = swapped.find(i);
    return it == swapped.end() ? i : it->second;
  };
  std::vector<std::size_t> out;
  out.reserve(k);
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = std::uniform_int_distribution<std::size_t>(i, n - 1)(rng);
    const std::size_t vi = at(i), vj = at(j);
    swapped[j] = vi;
    swapped[i] = vj;
    out.push_back(vj);
  }
  return out;
}

std::vector<std::string> sample_negative_items(std::span<const std::string> catalog_ids, std::size_t k,
                                               std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::string> out;
  for (auto i : sample_without_replacement(catalog_ids.size(), k, rng)) out.push_back(catalog_ids[i]);
  return out;
}

PairSplits split_pairs(std::vector<QueryTargetPair> pairs, std::uint64_t seed, double train_fraction,
                       double validation_fraction) {
  if (train_fraction < 0 || validation_fraction < 0 || train_fraction + validation_fraction > 1) {
    throw ContractError("split fractions must be non-negative and sum to at most 1");
  }
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t i = order.size(); i > 1; --i) {
    std::swap(order[i - 1], order[std::uniform_int_distribution<std::size_t>(0, i - 1)(rng)]);
  }
  const auto n = pairs.size();
  const auto n_train = static_cast<std::size_t>(std::floor(train_fraction * static_cast<double>(n)));
  const auto n_val = static_cast<std::size_t>(std::floor(validation_fraction * static_cast<double>(n)));
  PairSplits out;
  for (std::size_t i = 0; i < n; ++i) {
    auto& dst = i < n_train ? out.train : (i < n_train + n_val ? out.validation : out.test);
    dst.push_back(std::move(pairs[order[i]]));
  }
  return out;
}

void write_pairs(const std::filesystem::path& path, std::span<const QueryTargetPair> pairs, std::string_view header) {
  io::write_atomic(path, [&](std::ostream& os) {
    if (!header.empty()) os << "# " << header << '\n';
    os << "# query_id\trelation\ttarget_id\tcount\tassociation\n";
    os << std::setprecision(12);
    for (const auto& p : pairs) {
      os << p.query_id << '\t' << to_string(p.relation) << '\t' << p.target_id << '\t' << p.count << '\t'
         << p.association << '\n';
    }
  });
}

std::vector<QueryTargetPair> read_pairs(const std::filesystem::path& path) {
  std::vector<QueryTargetPair> out;
  io::for_each_record(path, [&](const std::vector<std::string_view>& f, std::size_t line) {
    if (f.size() != 5) throw InputError(path.string() + ":" + std::to_string(line) + ": expected 5 pair fields");
    out.push_back({std::string(f[0]), parse_relation(f[1]), std::string(f[2]),
                   static_cast<std::size_t>(io::parse_int(f[3])), io::parse_double(f[4])});
  });
  return out;
}

void write_ids(const std::filesystem::path& path, std::span<const std::string> ids, std::string_view header) {
  io::write_atomic(path, [&](std::ostream& os) {
    if (!header.empty()) os << "# " << header << '\n';
    for (const auto& id : ids) os << id << '\n';
  });
}

std::vector<std::string> read_ids(const std::filesystem::path& path) {
  std::vector<std::string> out;
  io::for_each_record(path, [&](const std::vector<std::string_view>& f, std::size_t) { out.emplace_back(f[0]); });
  return out;
}

}  // namespace pfeed::mining
