#include "pfeed/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "pfeed/errors.hpp"
#include "pfeed/io.hpp"

namespace pfeed::eval {

void EvalConfig::validate() const {
  if (k < 1) throw ContractError("eval: k must be >= 1");
  if (train_fraction < 0 || validation_fraction < 0 || train_fraction + validation_fraction >= 1) {
    throw ContractError("eval: split fractions must leave a test share");
  }
}

namespace {

double dot(const std::vector<float>& a, const std::vector<float>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += double(a[i]) * double(b[i]);
  return s;
}

}  // namespace

std::vector<std::size_t> target_ranks(std::span<const mining::QueryTargetPair> pairs,
                                      const index::EmbeddingTable& table, std::span<const std::string> distractors) {
  std::vector<const model::ItemEmbeddings*> dist;
  dist.reserve(distractors.size());
  for (const auto& d : distractors) dist.push_back(&table.at(d));
  std::vector<std::size_t> ranks;
  ranks.reserve(pairs.size());
  for (const auto& p : pairs) {
    const auto& q = table.at(p.query_id).query(p.relation);
    const double s = dot(q, table.at(p.target_id).target);
    std::size_t rank = 1;
    for (const auto* d : dist) {
      if (d->item_id != p.target_id && dot(q, d->target) >= s) ++rank;
    }
    ranks.push_back(rank);
  }
  return ranks;
}

Recall recall_from_ranks(std::span<const std::size_t> ranks, std::size_t k) {
  Recall r;
  r.total = ranks.size();
  for (auto x : ranks) r.hits += x <= k ? 1 : 0;
  return r;
}

RecallBreakdown recall_at_k(std::span<const mining::QueryTargetPair> pairs, const index::EmbeddingTable& table,
                            std::span<const std::string> distractors, std::size_t k) {
  if (k < 1) throw ContractError("recall: k must be >= 1");
  const auto ranks = target_ranks(pairs, table, distractors);
  RecallBreakdown out;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const bool hit = ranks[i] <= k;
    auto& rel = pairs[i].relation == Relation::view ? out.view : out.buy;
    for (Recall* r : {&out.overall, &rel}) {
      ++r->total;
      r->hits += hit ? 1 : 0;
    }
  }
  return out;
}

double random_baseline(std::size_t k, std::size_t distractors) {
  return std::min(1.0, double(k) / double(distractors + 1));
}

double baseline_sigma(std::size_t k, std::size_t distractors, std::size_t n) {
  const double p = random_baseline(k, distractors);
  return n ? std::sqrt(p * (1 - p) / double(n)) : 0.0;
}

std::vector<std::string> sample_distractors(std::span<const std::string> ids, std::size_t count, std::uint64_t seed) {
  return mining::sample_negative_items(ids, std::min(count, ids.size()), seed);
}

std::string_view to_string(Relationship r) {
  switch (r) {
    case Relationship::one_to_one: return "1x1";
    case Relationship::one_to_many: return "1xn";
    case Relationship::many_to_one: return "mx1";
    case Relationship::many_to_many: return "mxn";
  }
  return "?";
}

std::vector<Relationship> classify_relationships(std::span<const mining::QueryTargetPair> pairs) {
  std::unordered_map<std::string, std::size_t> out_degree, in_degree;
  std::set<std::pair<std::string, std::string>> seen;
  for (const auto& p : pairs) {
    if (!seen.emplace(p.query_id, p.target_id).second) continue;
    ++out_degree[p.query_id];
    ++in_degree[p.target_id];
  }
  std::vector<Relationship> labels;
  labels.reserve(pairs.size());
  for (const auto& p : pairs) {
    const bool many_targets = out_degree[p.query_id] > 1;
    const bool many_queries = in_degree[p.target_id] > 1;
    if (!many_targets && !many_queries) labels.push_back(Relationship::one_to_one);
    else if (many_targets && !many_queries) labels.push_back(Relationship::one_to_many);
    else if (!many_targets) labels.push_back(Relationship::many_to_one);
    else labels.push_back(Relationship::many_to_many);
  }
  return labels;
}

std::array<std::size_t, 4> relationship_distribution(std::span<const Relationship> labels) {
  std::array<std::size_t, 4> counts{};
  for (auto l : labels) ++counts[static_cast<std::size_t>(l)];
  return counts;
}

std::string_view to_string(Segment s) {
  switch (s) {
    case Segment::cold_start: return "cold-start";
    case Segment::tail: return "tail";
    case Segment::head: return "head";
  }
  return "?";
}

std::map<std::string, std::size_t> interaction_counts(std::span<const mining::QueryTargetPair> train_pairs) {
  std::map<std::string, std::size_t> counts;
  for (const auto& p : train_pairs) {
    ++counts[p.query_id];
    ++counts[p.target_id];
  }
  return counts;
}

std::vector<Segment> segment_by_popularity(std::span<const mining::QueryTargetPair> test_pairs,
                                           const std::map<std::string, std::size_t>& counts) {
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  const std::size_t head_n = (ranked.size() + 99) / 100;
  std::unordered_set<std::string> head;
  for (std::size_t i = 0; i < head_n; ++i) head.insert(ranked[i].first);
  std::vector<Segment> out;
  out.reserve(test_pairs.size());
  for (const auto& p : test_pairs) {
    if (!counts.count(p.target_id)) out.push_back(Segment::cold_start);
    else if (head.count(p.target_id)) out.push_back(Segment::head);
    else out.push_back(Segment::tail);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic world

void WorldConfig::validate() const {
  if (categories < 2) throw ContractError("world: need at least 2 categories");
  if (items_per_category < 2 || line_size < 1) throw ContractError("world: need >= 2 items per category");
  if (customers < 1 || sessions < 1) throw ContractError("world: customers and sessions must be positive");
  for (double p : {within_category, same_line, non_converting, follow_up, partner, deal_rate}) {
    if (p < 0 || p > 1) throw ContractError("world: probabilities must lie in [0, 1]");
  }
  if (follow_up_max_days < 1) throw ContractError("world: follow_up_max_days must be >= 1");
}

namespace {

// Explicit arithmetic on raw engine output, so worlds match across standard libraries.
class Draw {
 public:
  explicit Draw(std::uint64_t seed) : rng_(seed) {}
  std::size_t below(std::size_t n) { return static_cast<std::size_t>(rng_() % n); }
  double unit() { return double(rng_() >> 11) * 0x1.0p-53; }
  bool chance(double p) { return unit() < p; }
  std::size_t weighted(const std::vector<double>& cumulative) {
    const double u = unit() * cumulative.back();
    return static_cast<std::size_t>(std::upper_bound(cumulative.begin(), cumulative.end(), u) - cumulative.begin());
  }

 private:
  std::mt19937_64 rng_;
};

class WordMaker {
 public:
  explicit WordMaker(Draw& d) : d_(d) {}
  std::string make() {
    static const char* kSyl[] = {"ka", "lo", "mi", "ra", "ve", "tu", "shi", "no", "be", "da", "fi", "go", "ze",
                                 "pu", "xa", "qi", "wo", "ny", "el", "or", "an", "tri", "sol", "mar", "vex", "lin",
                                 "dor", "pel", "cam", "rux", "zen", "bo", "hu", "ja", "ko", "ti"};
    constexpr std::size_t n = sizeof(kSyl) / sizeof(kSyl[0]);
    for (;;) {
      std::string w;
      const std::size_t parts = 2 + d_.below(2);
      for (std::size_t i = 0; i < parts; ++i) w += kSyl[d_.below(n)];
      if (used_.insert(w).second) return w;
    }
  }

 private:
  Draw& d_;
  std::set<std::string> used_;
};

std::string pad(std::size_t v, int width) {
  std::ostringstream os;
  os << std::setw(width) << std::setfill('0') << v;
  return os.str();
}

}  // namespace

World generate_synthetic_world(const WorldConfig& cfg) {
  cfg.validate();
  Draw d(cfg.seed);
  WordMaker words(d);
  const std::size_t C = cfg.categories, P = cfg.items_per_category, n = C * P;
  const std::size_t lines_per_cat = (P + cfg.line_size - 1) / cfg.line_size;

  std::vector<std::string> brands(30), noise(300);
  for (auto& w : brands) w = words.make();
  for (auto& w : noise) w = words.make();
  std::vector<std::string> depts((C + 7) / 8);
  for (auto& w : depts) w = words.make();

  World world;
  std::vector<Item> items;
  items.reserve(n);
  world.item_category.resize(n);
  for (std::size_t c = 0; c < C; ++c) {
    const std::string noun = words.make(), adjective = words.make();
    std::vector<std::string> line_words(lines_per_cat), line_brands(lines_per_cat);
    for (std::size_t l = 0; l < lines_per_cat; ++l) {
      line_words[l] = words.make();
      line_brands[l] = brands[d.below(brands.size())];
    }
    for (std::size_t j = 0; j < P; ++j) {
      const std::size_t l = j / cfg.line_size;
      Item it;
      it.id = "i" + pad(c * P + j, 5);
      it.title = line_brands[l] + " " + line_words[l] + " " + adjective + " " + noun + " " + noise[d.below(noise.size())] +
                 " " + char('a' + d.below(26)) + std::to_string(100 + d.below(900));
      it.category_path = {depts[c / 8], noun};
      it.deal = d.chance(cfg.deal_rate);
      it.release_date = 18000 + static_cast<std::int64_t>(d.below(1500));
      world.item_category[items.size()] = c;
      items.push_back(std::move(it));
    }
  }

  // Zipf popularity over a random order of the catalog.
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[d.below(i)]);
  std::vector<double> weight(n);
  for (std::size_t r = 0; r < n; ++r) weight[order[r]] = 1.0 / std::pow(double(r + 1), cfg.zipf_exponent);
  std::vector<double> cumulative(n);
  double acc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    acc += weight[i];
    cumulative[i] = acc;
    items[i].popularity = std::round(weight[i] * 1e6) / 1e3;
  }

  // Complement categories: successor on a random cycle, so no category maps to itself.
  std::vector<std::size_t> cycle(C);
  for (std::size_t i = 0; i < C; ++i) cycle[i] = i;
  for (std::size_t i = C; i > 1; --i) std::swap(cycle[i - 1], cycle[d.below(i)]);
  world.complement.resize(C);
  for (std::size_t i = 0; i < C; ++i) world.complement[cycle[i]] = cycle[(i + 1) % C];
  world.partner.resize(n);
  for (std::size_t i = 0; i < n; ++i) world.partner[i] = world.complement[i / P] * P + i % P;

  struct SessionSpec {
    std::size_t customer;
    std::int64_t time;
    std::size_t target;
    bool converts;
    int depth;
  };
  constexpr std::int64_t kStart = 1'600'000'000;
  constexpr std::int64_t kDay = 86400;
  std::vector<SessionSpec> specs;
  specs.reserve(cfg.sessions * 2);
  for (std::size_t s = 0; s < cfg.sessions; ++s) {
    specs.push_back({d.below(cfg.customers), kStart + static_cast<std::int64_t>(d.below(180 * kDay)),
                     d.weighted(cumulative), !d.chance(cfg.non_converting), 0});
  }

  std::vector<Event> events;
  std::size_t session_no = 0;
  for (std::size_t s = 0; s < specs.size(); ++s) {
    const SessionSpec spec = specs[s];
    const std::size_t b = spec.target;
    const std::size_t c = b / P;
    const std::string customer = "c" + pad(spec.customer, 5);
    const std::string session = "s" + pad(session_no++, 6);
    // Distinct viewed items other than the target.
    const std::size_t views = 2 + d.below(4);
    std::set<std::size_t> viewed;
    for (std::size_t attempt = 0; viewed.size() < views && attempt < 50; ++attempt) {
      std::size_t v;
      if (d.chance(cfg.within_category)) {
        if (d.chance(cfg.same_line)) {
          const std::size_t line_start = (b % P) / cfg.line_size * cfg.line_size;
          const std::size_t line_len = std::min(cfg.line_size, P - line_start);
          if (line_len < 2) continue;
          v = c * P + line_start + d.below(line_len);
        } else {
          v = c * P + d.below(P);
        }
      } else {
        const std::size_t other = (c + 1 + d.below(C - 1)) % C;
        v = other * P + d.below(P);
      }
      if (v == b) continue;
      viewed.insert(v);
    }
    std::vector<std::size_t> view_order(viewed.begin(), viewed.end());
    for (std::size_t i = view_order.size(); i > 1; --i) std::swap(view_order[i - 1], view_order[d.below(i)]);
    std::int64_t t = spec.time;
    for (auto v : view_order) {
      events.push_back({customer, items[v].id, EventType::view, t, session});
      t += 30 + static_cast<std::int64_t>(d.below(300));
    }
    if (!spec.converts) continue;
    events.push_back({customer, items[b].id, EventType::buy, t, session});
    if (spec.depth < 3 && d.chance(cfg.follow_up)) {
      const std::size_t next = d.chance(cfg.partner) ? world.partner[b] : world.complement[c] * P + d.below(P);
      const std::int64_t later = t + kDay * (1 + static_cast<std::int64_t>(d.below(cfg.follow_up_max_days))) +
                                 static_cast<std::int64_t>(d.below(kDay));
      specs.push_back({spec.customer, later, next, true, spec.depth + 1});
    }
  }
  std::stable_sort(events.begin(), events.end(), [](const Event& a, const Event& b) {
    if (a.customer_id != b.customer_id) return a.customer_id < b.customer_id;
    return a.timestamp < b.timestamp;
  });
  world.catalog = Catalog(std::move(items));
  world.events = std::move(events);
  return world;
}

double within_category_view_rate(const World& world) {
  std::map<std::pair<std::string, std::string>, std::pair<std::set<std::size_t>, std::set<std::size_t>>> sessions;
  for (const auto& e : world.events) {
    const auto idx = world.catalog.index_of(e.item_id);
    if (!idx) continue;
    auto& s = sessions[{e.customer_id, e.session_id}];
    (e.type == EventType::view ? s.first : s.second).insert(*idx);
  }
  std::size_t same = 0, total = 0;
  for (const auto& [key, s] : sessions) {
    for (auto b : s.second) {
      for (auto v : s.first) {
        if (v == b) continue;
        ++total;
        same += world.item_category[v] == world.item_category[b] ? 1 : 0;
      }
    }
  }
  return total ? double(same) / double(total) : 0.0;
}

double complement_rate(const World& world, std::span<const mining::QueryTargetPair> pairs) {
  std::size_t ok = 0, total = 0;
  for (const auto& p : pairs) {
    if (p.relation != Relation::buy) continue;
    const auto q = world.catalog.index_of(p.query_id), t = world.catalog.index_of(p.target_id);
    if (!q || !t) continue;
    ++total;
    ok += world.item_category[*t] == world.complement[world.item_category[*q]] ? 1 : 0;
  }
  return total ? double(ok) / double(total) : 0.0;
}

// ---------------------------------------------------------------------------
// Reports

void add_metric(Report& report, std::string section, std::string group, std::size_t k, const Recall& r) {
  report.metrics.push_back({std::move(section), std::move(group), k, r.total, r.hits, r.value()});
}

void write_report_jsonl(const std::filesystem::path& path, const Report& report) {
  io::write_atomic(path, [&](std::ostream& os) {
    os << nlohmann::json{{"config", report.config}}.dump() << '\n';
    for (const auto& m : report.metrics) {
      os << nlohmann::json{{"section", m.section}, {"group", m.group}, {"k", m.k},
                           {"count", m.count},     {"hits", m.hits},   {"recall", m.recall}}
                .dump()
         << '\n';
    }
  });
}

Report read_report_jsonl(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw InputError("cannot open report " + path.string());
  Report r;
  std::string line;
  bool first = true;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    if (first && j.contains("config")) {
      r.config = j.at("config");
      first = false;
      continue;
    }
    first = false;
    r.metrics.push_back({j.at("section").get<std::string>(), j.at("group").get<std::string>(),
                         j.at("k").get<std::size_t>(), j.at("count").get<std::size_t>(),
                         j.at("hits").get<std::size_t>(), j.at("recall").get<double>()});
  }
  return r;
}

std::string format_table(const Report& report) {
  std::ostringstream os;
  os << "# config: " << report.config.dump() << '\n';
  if (report.metrics.empty()) return os.str();
  std::size_t ws = 7, wg = 5;
  for (const auto& m : report.metrics) {
    ws = std::max(ws, m.section.size());
    wg = std::max(wg, m.group.size());
  }
  auto row = [&](const std::string& s, const std::string& g, const std::string& k, const std::string& n,
                 const std::string& h, const std::string& r) {
    os << std::left << std::setw(int(ws)) << s << "  " << std::setw(int(wg)) << g << "  " << std::right
       << std::setw(4) << k << "  " << std::setw(7) << n << "  " << std::setw(7) << h << "  " << std::setw(8) << r
       << '\n';
  };
  row("section", "group", "k", "count", "hits", "recall");
  for (const auto& m : report.metrics) {
    std::ostringstream rv;
    rv << std::fixed << std::setprecision(4) << m.recall;
    row(m.section, m.group, std::to_string(m.k), std::to_string(m.count), std::to_string(m.hits), rv.str());
  }
  return os.str();
}

void write_report_table(const std::filesystem::path& path, const Report& report) {
  io::write_atomic(path, [&](std::ostream& os) { os << format_table(report); });
}

}  // namespace pfeed::eval
