#include "pfeed/pipeline.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <unordered_map>

#include "pfeed/errors.hpp"
#include "pfeed/io.hpp"

namespace pfeed::pipeline {

using nlohmann::json;
namespace fs = std::filesystem;

fs::path Paths::resolve(const std::string& p) const {
  fs::path path(p);
  return path.is_absolute() ? path : fs::path(work_dir) / path;
}

PipelineConfig::PipelineConfig() {
  // Desk scale: a small encoder that trains in about a minute on one core
  // over the default synthetic world.
  model.layers = 2;
  model.heads = 4;
  model.hidden_dim = 64;
  training.epochs = 5;
  mining.top_n = 1250;
  negative_items = 1000;
  eval.distractor_count = 1000;
}

void PipelineConfig::validate() const {
  world.validate();
  auto m = model;
  m.vocab_size = vocab_size;
  m.max_seq = max_tokens + m.prefix_length();
  m.validate();
  training.validate();
  eval.validate();
  if (vocab_size <= tok::kReservedCount) throw ContractError("vocab_size must exceed the reserved tokens");
  if (max_tokens < 1) throw ContractError("max_tokens must be >= 1");
  if (mining.top_n < 1) throw ContractError("mining.top_n must be >= 1");
  if (training.uses_uniform() && negative_items < 1) throw ContractError("negative_items must be >= 1");
  if (index.variant == index::Variant::ivf && index.clusters && index.nprobe > index.clusters) {
    throw ContractError("index.nprobe must not exceed index.clusters");
  }
  if (feed.m < 1) throw ContractError("feed.m must be >= 1");
  if (feed.max_queries < 1) throw ContractError("feed.max_queries must be >= 1");
  if (feed.feed_size < 1) throw ContractError("feed.feed_size must be >= 1");
  if (feed.max_consecutive < 1) throw ContractError("feed.max_consecutive must be >= 1");
  if (!(feed.percentile > 0 && feed.percentile <= 100)) throw ContractError("feed.percentile must be in (0, 100]");
  if (feed.port < 0 || feed.port > 65535) throw ContractError("feed.port must be in [0, 65535]");
  if (!(feed.refresh_seconds > 0)) throw ContractError("feed.refresh_seconds must be > 0");
  if (paths.work_dir.empty()) throw ContractError("paths.work_dir must be non-empty");
}

std::uint64_t derive_seed(std::uint64_t root, std::string_view stage) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : stage) h = (h ^ c) * 1099511628211ull;
  std::uint64_t z = root ^ h;
  z += 0x9e3779b97f4a7c15ull;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// ---------------------------------------------------------------------------
// Configuration

json to_json(const PipelineConfig& c) {
  const auto& p = c.paths;
  const auto& w = c.world;
  return json{
      {"seed", c.seed},
      {"paths",
       {{"work_dir", p.work_dir}, {"catalog", p.catalog}, {"events", p.events}, {"pairs", p.pairs},
        {"train_pairs", p.train_pairs}, {"validation_pairs", p.validation_pairs}, {"test_pairs", p.test_pairs},
        {"negatives", p.negatives}, {"vocab", p.vocab}, {"checkpoint", p.checkpoint}, {"trace", p.trace},
        {"embeddings", p.embeddings}, {"index", p.index}, {"store", p.store}, {"feeds", p.feeds},
        {"report", p.report}}},
      {"world",
       {{"categories", w.categories}, {"items_per_category", w.items_per_category}, {"line_size", w.line_size},
        {"customers", w.customers}, {"sessions", w.sessions}, {"within_category", w.within_category},
        {"same_line", w.same_line}, {"non_converting", w.non_converting}, {"follow_up", w.follow_up},
        {"partner", w.partner}, {"follow_up_max_days", w.follow_up_max_days}, {"zipf_exponent", w.zipf_exponent},
        {"deal_rate", w.deal_rate}}},
      {"mining",
       {{"top_n", c.mining.top_n}, {"min_count", c.mining.min_count}, {"horizon_days", c.mining.horizon_days}}},
      {"negative_items", c.negative_items},
      {"vocab_size", c.vocab_size},
      {"max_tokens", c.max_tokens},
      {"model",
       {{"mode", std::string(model::to_string(c.model.mode))}, {"layers", c.model.layers}, {"heads", c.model.heads},
        {"hidden_dim", c.model.hidden_dim}, {"ffn_dim", c.model.ffn_dim}, {"dropout", c.model.dropout}}},
      {"training",
       {{"batch_size", c.training.batch_size}, {"uniform_negatives", c.training.uniform_negatives},
        {"sampling", std::string(train::to_string(c.training.sampling))}, {"epochs", c.training.epochs},
        {"learning_rate", c.training.learning_rate}, {"clip_norm", c.training.clip_norm},
        {"beta_init", c.training.beta_init}, {"optimizer", c.training.optimizer},
        {"max_steps", c.training.max_steps}}},
      {"eval",
       {{"k", c.eval.k}, {"distractor_count", c.eval.distractor_count}, {"train_fraction", c.eval.train_fraction},
        {"validation_fraction", c.eval.validation_fraction}}},
      {"index",
       {{"variant", std::string(index::to_string(c.index.variant))}, {"clusters", c.index.clusters},
        {"nprobe", c.index.nprobe}}},
      {"feed",
       {{"m", c.feed.m}, {"max_queries", c.feed.max_queries}, {"feed_size", c.feed.feed_size},
        {"max_consecutive", c.feed.max_consecutive}, {"surface", std::string(feed::to_string(c.feed.surface))},
        {"percentile", c.feed.percentile}, {"host", c.feed.host}, {"port", c.feed.port},
        {"refresh_seconds", c.feed.refresh_seconds}}},
  };
}

namespace {

// Copies `from` into `into`, which holds the defaults: every key must already
// exist there and carry a compatible type.
void merge_checked(json& into, const json& from, const std::string& where) {
  if (!from.is_object()) throw ContractError("config: " + (where.empty() ? "document" : where) + " must be an object");
  for (const auto& [key, value] : from.items()) {
    const std::string path = where.empty() ? key : where + "." + key;
    auto it = into.find(key);
    if (it == into.end()) throw ContractError("config: unknown field '" + path + "'");
    json& slot = *it;
    bool ok = false;
    if (slot.is_object()) {
      merge_checked(slot, value, path);
      continue;
    }
    if (slot.is_number_unsigned()) ok = value.is_number_unsigned();
    else if (slot.is_number_integer()) ok = value.is_number_integer();
    else if (slot.is_number_float()) ok = value.is_number();
    else if (slot.is_string()) ok = value.is_string();
    else if (slot.is_boolean()) ok = value.is_boolean();
    if (!ok) {
      const char* want = slot.is_number_unsigned() ? "a non-negative integer"
                         : slot.is_number_integer() ? "an integer"
                         : slot.is_number_float()   ? "a number"
                         : slot.is_string()         ? "a string"
                                                    : "a boolean";
      throw ContractError("config: field '" + path + "' must be " + want);
    }
    slot = value;
  }
}

PipelineConfig from_merged(const json& m);

}  // namespace

PipelineConfig config_from_json(const json& j) {
  json m = to_json(PipelineConfig{});
  merge_checked(m, j, "");
  try {
    return from_merged(m);
  } catch (const InputError& e) {  // bad enum spellings
    throw ContractError(std::string("config: ") + e.what());
  }
}

namespace {

PipelineConfig from_merged(const json& m) {
  PipelineConfig c;
  c.seed = m["seed"];
  const auto& p = m["paths"];
  c.paths.work_dir = p["work_dir"];
  c.paths.catalog = p["catalog"];
  c.paths.events = p["events"];
  c.paths.pairs = p["pairs"];
  c.paths.train_pairs = p["train_pairs"];
  c.paths.validation_pairs = p["validation_pairs"];
  c.paths.test_pairs = p["test_pairs"];
  c.paths.negatives = p["negatives"];
  c.paths.vocab = p["vocab"];
  c.paths.checkpoint = p["checkpoint"];
  c.paths.trace = p["trace"];
  c.paths.embeddings = p["embeddings"];
  c.paths.index = p["index"];
  c.paths.store = p["store"];
  c.paths.feeds = p["feeds"];
  c.paths.report = p["report"];
  const auto& w = m["world"];
  c.world.categories = w["categories"];
  c.world.items_per_category = w["items_per_category"];
  c.world.line_size = w["line_size"];
  c.world.customers = w["customers"];
  c.world.sessions = w["sessions"];
  c.world.within_category = w["within_category"];
  c.world.same_line = w["same_line"];
  c.world.non_converting = w["non_converting"];
  c.world.follow_up = w["follow_up"];
  c.world.partner = w["partner"];
  c.world.follow_up_max_days = w["follow_up_max_days"];
  c.world.zipf_exponent = w["zipf_exponent"];
  c.world.deal_rate = w["deal_rate"];
  c.mining.top_n = m["mining"]["top_n"];
  c.mining.min_count = m["mining"]["min_count"];
  c.mining.horizon_days = m["mining"]["horizon_days"];
  c.negative_items = m["negative_items"];
  c.vocab_size = m["vocab_size"];
  c.max_tokens = m["max_tokens"];
  const auto& md = m["model"];
  c.model.mode = model::parse_encoder_mode(md["mode"].get<std::string>());
  c.model.layers = md["layers"];
  c.model.heads = md["heads"];
  c.model.hidden_dim = md["hidden_dim"];
  c.model.ffn_dim = md["ffn_dim"];
  c.model.dropout = md["dropout"];
  const auto& t = m["training"];
  c.training.batch_size = t["batch_size"];
  c.training.uniform_negatives = t["uniform_negatives"];
  c.training.sampling = train::parse_sampling(t["sampling"].get<std::string>());
  c.training.epochs = t["epochs"];
  c.training.learning_rate = t["learning_rate"];
  c.training.clip_norm = t["clip_norm"];
  c.training.beta_init = t["beta_init"];
  c.training.optimizer = t["optimizer"];
  c.training.max_steps = t["max_steps"];
  const auto& e = m["eval"];
  c.eval.k = e["k"];
  c.eval.distractor_count = e["distractor_count"];
  c.eval.train_fraction = e["train_fraction"];
  c.eval.validation_fraction = e["validation_fraction"];
  c.index.variant = index::parse_variant(m["index"]["variant"].get<std::string>());
  c.index.clusters = m["index"]["clusters"];
  c.index.nprobe = m["index"]["nprobe"];
  const auto& f = m["feed"];
  c.feed.m = f["m"];
  c.feed.max_queries = f["max_queries"];
  c.feed.feed_size = f["feed_size"];
  c.feed.max_consecutive = f["max_consecutive"];
  c.feed.surface = feed::parse_surface(f["surface"].get<std::string>());
  c.feed.percentile = f["percentile"];
  c.feed.host = f["host"];
  c.feed.port = f["port"];
  c.feed.refresh_seconds = f["refresh_seconds"];
  return c;
}

}  // namespace

PipelineConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw InputError(path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

void apply_override(json& j, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0) {
    throw ContractError("override '" + std::string(assignment) + "' must look like key.path=value");
  }
  const std::string key(assignment.substr(0, eq));
  const std::string raw(assignment.substr(eq + 1));
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  if (!j.is_object()) j = json::object();
  json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ContractError("override '" + key + "' has an empty path component");
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    json& next = (*node)[part];
    if (!next.is_object()) next = json::object();
    node = &next;
    start = dot + 1;
  }
}

std::string provenance(const PipelineConfig& config, std::string_view stage) {
  // The work directory says where artifacts live, not how they were made.
  auto j = to_json(config);
  j["paths"].erase("work_dir");
  return "pfeed " + std::string(stage) + " seed=" + std::to_string(config.seed) + " config=" + j.dump();
}

// ---------------------------------------------------------------------------
// Stage plumbing

namespace {

fs::path require(const PipelineConfig& c, const std::string& p, std::string_view producer) {
  auto path = c.paths.resolve(p);
  if (!fs::exists(path)) {
    throw MissingArtifact("missing " + path.string() + ": run `pfeed " + std::string(producer) + "` first");
  }
  return path;
}

fs::path output(const PipelineConfig& c, const std::string& p) {
  auto path = c.paths.resolve(p);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  return path;
}

eval::WorldConfig world_config(const PipelineConfig& c) {
  auto w = c.world;
  w.seed = derive_seed(c.seed, "synth");
  return w;
}

model::EncoderConfig encoder_config(const PipelineConfig& c, std::size_t vocab_size) {
  auto m = c.model;
  m.vocab_size = vocab_size;
  m.max_seq = c.max_tokens + m.prefix_length();
  return m;
}

train::TrainConfig train_config(const PipelineConfig& c) {
  auto t = c.training;
  t.seed = derive_seed(c.seed, "train");
  return t;
}

std::vector<std::string> corpus_of(const Catalog& catalog) {
  std::vector<std::string> corpus;
  corpus.reserve(catalog.size());
  for (const auto& item : catalog.items()) corpus.push_back(metadata_text(item));
  return corpus;
}

std::vector<tok::TokenIds> tokenize(const Catalog& catalog, const tok::Vocabulary& vocab, std::size_t max_tokens) {
  std::vector<tok::TokenIds> out;
  out.reserve(catalog.size());
  for (const auto& item : catalog.items()) out.push_back(vocab.encode(metadata_text(item), max_tokens));
  return out;
}

std::size_t catalog_index(const Catalog& catalog, const std::string& id) {
  auto i = catalog.index_of(id);
  if (!i) throw InputError("item '" + id + "' is not in the catalog");
  return *i;
}

train::TrainData make_train_data(const Catalog& catalog, std::vector<tok::TokenIds> tokens,
                                 std::span<const mining::QueryTargetPair> pairs,
                                 std::span<const std::string> negatives) {
  train::TrainData d;
  d.item_tokens = std::move(tokens);
  d.pairs.reserve(pairs.size());
  for (const auto& p : pairs) {
    d.pairs.push_back({catalog_index(catalog, p.query_id), p.relation, catalog_index(catalog, p.target_id)});
  }
  for (const auto& n : negatives) d.negative_pool.push_back(catalog_index(catalog, n));
  return d;
}

struct Mined {
  std::vector<mining::QueryTargetPair> view, buy;
};

Mined mine(std::span<const Event> events, const mining::MiningOptions& options) {
  return {mining::mine_view_buy(events, options), mining::mine_buy_buy(events, options)};
}

std::vector<mining::QueryTargetPair> concat(const Mined& m) {
  auto all = m.view;
  all.insert(all.end(), m.buy.begin(), m.buy.end());
  return all;
}

std::vector<std::string> negatives_of(const PipelineConfig& c, const Catalog& catalog) {
  const auto ids = catalog.ids();
  return mining::sample_negative_items(ids, std::min(c.negative_items, ids.size()), derive_seed(c.seed, "negatives"));
}

index::BuildParams build_params(const PipelineConfig& c, std::size_t n) {
  index::BuildParams b;
  b.variant = c.index.variant;
  b.seed = derive_seed(c.seed, "index");
  if (b.variant == index::Variant::ivf) {
    b.clusters = c.index.clusters ? c.index.clusters
                                  : std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(std::sqrt(double(n)))));
    b.clusters = std::min(b.clusters, n);
    b.nprobe = c.index.nprobe ? std::min(c.index.nprobe, b.clusters) : std::max<std::size_t>(1, b.clusters / 4);
  }
  return b;
}

feed::FeedOptions feed_options(const PipelineConfig& c) {
  feed::FeedOptions o;
  o.feed_size = c.feed.feed_size;
  o.max_consecutive = c.feed.max_consecutive;
  return o;
}

feed::ProfileBook load_profiles(const PipelineConfig& c, const Catalog& catalog) {
  feed::ProfileBook book(feed::ProfileOptions{c.feed.max_queries});
  for (const auto& e : read_events(require(c, c.paths.events, "synth"))) book.ingest(e, catalog);
  return book;
}

// customer_id  rank  item_id  score  source_item_id  source_relation
void write_feeds(const fs::path& path, const feed::FeedMap& feeds, std::string_view header) {
  io::write_atomic(path, [&](std::ostream& os) {
    if (!header.empty()) os << "# " << header << '\n';
    os << "# customer_id\trank\titem_id\tscore\tsource_item_id\tsource_relation\n";
    char buf[32];
    for (const auto& [customer, items] : feeds) {
      for (const auto& f : items) {
        std::snprintf(buf, sizeof buf, "%.6f", f.score);
        os << customer << '\t' << f.rank << '\t' << f.item_id << '\t' << buf << '\t' << f.source.item_id << '\t'
           << to_string(f.source.relation) << '\n';
      }
    }
  });
}

feed::FeedMap read_feeds(const fs::path& path) {
  feed::FeedMap feeds;
  io::for_each_record(path, [&](const std::vector<std::string_view>& f, std::size_t line) {
    if (f.size() != 6) throw InputError(path.string() + ":" + std::to_string(line) + ": expected 6 fields");
    feed::FeedItem item;
    item.rank = static_cast<std::size_t>(io::parse_int(f[1]));
    item.item_id = std::string(f[2]);
    item.score = io::parse_double(f[3]);
    item.source.item_id = std::string(f[4]);
    item.source.relation = parse_relation(f[5]);
    feeds[std::string(f[0])].push_back(std::move(item));
  });
  return feeds;
}

std::shared_ptr<const store::SimilarityStore> load_store(const PipelineConfig& c) {
  return std::make_shared<const store::SimilarityStore>(
      store::SimilarityStore::load(require(c, c.paths.store, "precompute")));
}

bool binary_store_path(const fs::path& p) { return p.extension() == ".pfs" || p.extension() == ".bin"; }

}  // namespace

json run_synth(const PipelineConfig& config) {
  config.validate();
  const auto world = eval::generate_synthetic_world(world_config(config));
  const auto header = provenance(config, "synth");
  write_catalog(output(config, config.paths.catalog), world.catalog, header);
  write_events(output(config, config.paths.events), world.events, header);
  return {{"items", world.catalog.size()}, {"events", world.events.size()}};
}

json run_mine(const PipelineConfig& config) {
  config.validate();
  const auto catalog = read_catalog(require(config, config.paths.catalog, "synth"));
  const auto events = read_events(require(config, config.paths.events, "synth"));
  const auto mined = mine(events, config.mining);
  const auto all = concat(mined);
  if (all.empty()) throw InputError("mine: no pairs reach mining.min_count");
  const auto splits = mining::split_pairs(all, derive_seed(config.seed, "split"), config.eval.train_fraction,
                                          config.eval.validation_fraction);
  const auto negatives = negatives_of(config, catalog);
  const auto header = provenance(config, "mine");
  mining::write_pairs(output(config, config.paths.pairs), all, header);
  mining::write_pairs(output(config, config.paths.train_pairs), splits.train, header);
  mining::write_pairs(output(config, config.paths.validation_pairs), splits.validation, header);
  mining::write_pairs(output(config, config.paths.test_pairs), splits.test, header);
  mining::write_ids(output(config, config.paths.negatives), negatives, header);
  return {{"view_buy", mined.view.size()},     {"buy_buy", mined.buy.size()},
          {"train", splits.train.size()},      {"validation", splits.validation.size()},
          {"test", splits.test.size()},        {"negatives", negatives.size()}};
}

json run_tokenizer_train(const PipelineConfig& config) {
  config.validate();
  const auto catalog = read_catalog(require(config, config.paths.catalog, "synth"));
  const auto vocab = tok::Vocabulary::train(corpus_of(catalog), config.vocab_size);
  vocab.save(output(config, config.paths.vocab));
  return {{"vocab_size", vocab.size()}};
}

json run_train(const PipelineConfig& config, const train::StepCallback& on_step) {
  config.validate();
  const auto catalog = read_catalog(require(config, config.paths.catalog, "synth"));
  const auto vocab = tok::Vocabulary::load(require(config, config.paths.vocab, "tokenizer-train"));
  const auto pairs = mining::read_pairs(require(config, config.paths.train_pairs, "mine"));
  const auto negatives = mining::read_ids(require(config, config.paths.negatives, "mine"));
  if (pairs.empty()) throw InputError("train: the training split is empty");
  const auto data = make_train_data(catalog, tokenize(catalog, vocab, config.max_tokens), pairs, negatives);
  model::Encoder<float> encoder(encoder_config(config, vocab.size()), derive_seed(config.seed, "init"));
  const auto trace = train::fit(encoder, data, train_config(config), on_step);
  encoder.save(output(config, config.paths.checkpoint));
  train::write_trace(output(config, config.paths.trace), trace, provenance(config, "train"));
  json summary{{"steps", trace.size()}, {"parameters", encoder.parameter_count()}};
  if (!trace.empty()) {
    summary["first_loss"] = trace.front().loss;
    summary["final_loss"] = trace.back().loss;
    summary["beta"] = trace.back().beta;
  }
  return summary;
}

json run_embed(const PipelineConfig& config) {
  config.validate();
  const auto catalog = read_catalog(require(config, config.paths.catalog, "synth"));
  const auto vocab = tok::Vocabulary::load(require(config, config.paths.vocab, "tokenizer-train"));
  const auto encoder = model::Encoder<float>::load(require(config, config.paths.checkpoint, "train"));
  if (encoder.config().vocab_size != vocab.size()) {
    throw InputError("embed: checkpoint vocabulary size differs from " + config.paths.vocab);
  }
  const auto tokens = tokenize(catalog, vocab, encoder.config().max_seq - encoder.config().prefix_length());
  const auto ids = catalog.ids();
  const auto t0 = std::chrono::steady_clock::now();
  const auto emb = encoder.embed_items(tokens, ids);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  index::write_embeddings(output(config, config.paths.embeddings), emb);
  return {{"items", emb.size()}, {"dim", encoder.config().hidden_dim}, {"seconds", seconds}};
}

json run_index(const PipelineConfig& config) {
  config.validate();
  index::EmbeddingTable table(index::read_embeddings(require(config, config.paths.embeddings, "embed")));
  const auto params = build_params(config, table.size());
  const auto idx = index::build_target_index(table, params);
  idx.save(output(config, config.paths.index));
  return {{"variant", std::string(index::to_string(idx.variant()))},
          {"items", idx.size()},
          {"clusters", idx.clusters()},
          {"nprobe", idx.nprobe()}};
}

json run_precompute(const PipelineConfig& config) {
  config.validate();
  index::EmbeddingTable table(index::read_embeddings(require(config, config.paths.embeddings, "embed")));
  const auto idx = index::VectorIndex::load(require(config, config.paths.index, "index"));
  const auto validation = mining::read_pairs(require(config, config.paths.validation_pairs, "mine"));
  if (validation.empty()) throw InputError("precompute: the validation split is empty");
  const auto threshold = store::compute_threshold(validation, table, config.feed.percentile);
  store::PrecomputeOptions opts;
  opts.m = config.feed.m;
  const auto st = store::precompute(idx, table, threshold.tau, opts);
  const auto path = output(config, config.paths.store);
  if (binary_store_path(path)) st.write_binary(path);
  else st.write_text(path, provenance(config, "precompute"));
  return {{"tau", threshold.tau}, {"entries", st.size()}, {"results", st.result_count()}};
}

json run_feed(const PipelineConfig& config, const std::string& customer_id) {
  config.validate();
  const auto catalog = read_catalog(require(config, config.paths.catalog, "synth"));
  const auto st = load_store(config);
  const auto book = load_profiles(config, catalog);
  const auto* profile = book.find(customer_id);
  if (!profile) throw InputError("unknown customer '" + customer_id + "'");
  const auto eligible = feed::build_eligible_set(catalog, config.feed.surface);
  const auto items = feed::compose_feed(*profile, *st, eligible, catalog, feed_options(config));
  json arr = json::array();
  for (const auto& f : items) {
    arr.push_back({{"item_id", f.item_id},
                   {"score", f.score},
                   {"source_item_id", f.source.item_id},
                   {"source_relation", std::string(to_string(f.source.relation))},
                   {"rank", f.rank}});
  }
  return {{"customer_id", customer_id}, {"surface", std::string(feed::to_string(config.feed.surface))},
          {"items", arr}};
}

json run_refresh(const PipelineConfig& config, const std::string& mode, const std::string& active_file) {
  config.validate();
  if (mode != "batch" && mode != "incremental") throw ContractError("refresh: mode must be batch or incremental");
  std::vector<std::string> active;
  if (mode == "incremental") {
    if (active_file.empty()) throw ContractError("refresh: incremental mode needs an active-customer file");
    active = mining::read_ids(active_file);
  }
  const auto catalog = read_catalog(require(config, config.paths.catalog, "synth"));
  const auto st = load_store(config);
  const auto book = load_profiles(config, catalog);
  const auto eligible = feed::build_eligible_set(catalog, config.feed.surface);
  const auto opts = feed_options(config);
  const auto t0 = std::chrono::steady_clock::now();
  feed::FeedMap feeds;
  if (mode == "batch") {
    feeds = feed::batch_refresh(book, *st, eligible, catalog, opts);
  } else {
    feeds = read_feeds(require(config, config.paths.feeds, "refresh --mode batch"));
    feed::incremental_refresh(active, book, *st, eligible, catalog, opts, feeds);
  }
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  // Empty feeds carry no rows; dropping them keeps batch and incremental
  // output byte-identical.
  for (auto it = feeds.begin(); it != feeds.end();) it = it->second.empty() ? feeds.erase(it) : std::next(it);
  write_feeds(output(config, config.paths.feeds), feeds, provenance(config, "refresh"));
  return {{"mode", mode},
          {"customers", mode == "batch" ? book.size() : active.size()},
          {"feeds", feeds.size()},
          {"seconds", seconds}};
}

namespace {

void add_breakdown(eval::Report& report, const std::string& section, const std::vector<std::string>& groups,
                   const std::vector<std::size_t>& ranks, std::size_t k) {
  std::map<std::string, std::vector<std::size_t>> by;
  for (std::size_t i = 0; i < ranks.size(); ++i) by[groups[i]].push_back(ranks[i]);
  for (const auto& [g, r] : by) eval::add_metric(report, section, g, k, eval::recall_from_ranks(r, k));
}

}  // namespace

json run_eval(const PipelineConfig& config, bool untrained) {
  config.validate();
  const auto catalog = read_catalog(require(config, config.paths.catalog, "synth"));
  const auto vocab = tok::Vocabulary::load(require(config, config.paths.vocab, "tokenizer-train"));
  const auto all_pairs = mining::read_pairs(require(config, config.paths.pairs, "mine"));
  const auto train_pairs = mining::read_pairs(require(config, config.paths.train_pairs, "mine"));
  const auto test = mining::read_pairs(require(config, config.paths.test_pairs, "mine"));
  if (test.empty()) throw InputError("eval: the test split is empty");
  auto encoder = untrained ? model::Encoder<float>(encoder_config(config, vocab.size()), derive_seed(config.seed, "init"))
                           : model::Encoder<float>::load(require(config, config.paths.checkpoint, "train"));
  const auto tokens = tokenize(catalog, vocab, encoder.config().max_seq - encoder.config().prefix_length());
  const auto ids = catalog.ids();
  index::EmbeddingTable table(encoder.embed_items(tokens, ids));
  const auto distractors = eval::sample_distractors(ids, config.eval.distractor_count, derive_seed(config.seed, "eval"));
  const auto ranks = eval::target_ranks(test, table, distractors);
  const std::size_t k = config.eval.k;

  eval::Report report;
  report.config = to_json(config);
  report.config["untrained"] = untrained;
  eval::add_metric(report, "dataset", "overall", k, eval::recall_from_ranks(ranks, k));
  std::vector<std::string> groups(test.size());
  for (std::size_t i = 0; i < test.size(); ++i) groups[i] = std::string(to_string(test[i].relation));
  add_breakdown(report, "dataset", groups, ranks, k);

  const auto counts = eval::interaction_counts(train_pairs);
  const auto segments = eval::segment_by_popularity(test, counts);
  for (std::size_t i = 0; i < test.size(); ++i) groups[i] = std::string(eval::to_string(segments[i]));
  add_breakdown(report, "segment", groups, ranks, k);

  // Degrees come from every mined pair of the pair's own dataset.
  std::map<std::tuple<std::string, Relation, std::string>, eval::Relationship> label_of;
  for (Relation r : {Relation::view, Relation::buy}) {
    std::vector<mining::QueryTargetPair> ds;
    for (const auto& p : all_pairs) if (p.relation == r) ds.push_back(p);
    const auto labels = eval::classify_relationships(ds);
    for (std::size_t i = 0; i < ds.size(); ++i) label_of[{ds[i].query_id, r, ds[i].target_id}] = labels[i];
  }
  for (std::size_t i = 0; i < test.size(); ++i) {
    auto it = label_of.find({test[i].query_id, test[i].relation, test[i].target_id});
    if (it == label_of.end()) throw InputError("eval: test pair missing from " + config.paths.pairs);
    groups[i] = std::string(to_string(test[i].relation)) + "/" + std::string(eval::to_string(it->second));
  }
  add_breakdown(report, "relationship", groups, ranks, k);

  const std::string config_group = std::string(model::to_string(encoder.config().mode)) + "-" +
                                   std::to_string(encoder.config().hidden_dim) + "/" +
                                   std::string(train::to_string(config.training.sampling));
  eval::add_metric(report, "config", config_group, k, eval::recall_from_ranks(ranks, k));

  const auto base = config.paths.resolve(config.paths.report).string();
  fs::path jsonl = base + ".jsonl", table_path = base + ".txt";
  if (jsonl.has_parent_path()) fs::create_directories(jsonl.parent_path());
  eval::write_report_jsonl(jsonl, report);
  eval::write_report_table(table_path, report);

  const auto overall = eval::recall_from_ranks(ranks, k);
  const double baseline = eval::random_baseline(k, distractors.size());
  const double sigma = eval::baseline_sigma(k, distractors.size(), test.size());
  return {{"recall", overall.value()},    {"hits", overall.hits},       {"pairs", overall.total},
          {"k", k},                       {"distractors", distractors.size()},
          {"baseline", baseline},         {"sigma", sigma},
          {"z", sigma > 0 ? (overall.value() - baseline) / sigma : 0.0},
          {"untrained", untrained},       {"report", jsonl.string()}};
}

std::shared_ptr<feed::FeedService> make_feed_service(const PipelineConfig& config) {
  config.validate();
  auto catalog = read_catalog(require(config, config.paths.catalog, "synth"));
  auto events = read_events(require(config, config.paths.events, "synth"));
  auto service = std::make_shared<feed::FeedService>(std::move(catalog), load_store(config), feed_options(config),
                                                     feed::ProfileOptions{config.feed.max_queries});
  for (const auto& e : events) service->ingest(e);
  service->refresh_all();
  return service;
}

// ---------------------------------------------------------------------------
// In-memory helpers

Dataset build_dataset(const PipelineConfig& config) {
  config.validate();
  Dataset d;
  auto world = eval::generate_synthetic_world(world_config(config));
  d.catalog = std::move(world.catalog);
  d.events = std::move(world.events);
  auto mined = mine(d.events, config.mining);
  d.splits = mining::split_pairs(concat(mined), derive_seed(config.seed, "split"), config.eval.train_fraction,
                                 config.eval.validation_fraction);
  d.view_pairs = std::move(mined.view);
  d.buy_pairs = std::move(mined.buy);
  d.vocab = tok::Vocabulary::train(corpus_of(d.catalog), config.vocab_size);
  d.item_tokens = tokenize(d.catalog, d.vocab, config.max_tokens);
  d.negatives = negatives_of(config, d.catalog);
  return d;
}

train::TrainData training_data(const Dataset& data) {
  return make_train_data(data.catalog, data.item_tokens, data.splits.train, data.negatives);
}

std::vector<std::string> distractors_for(const Dataset& data, const eval::EvalConfig& eval_config) {
  const auto ids = data.catalog.ids();
  return eval::sample_distractors(ids, eval_config.distractor_count, derive_seed(eval_config.seed, "eval"));
}

ExperimentResult run_experiment(const Dataset& data, const model::EncoderConfig& model_config,
                                const train::TrainConfig& train_config, const eval::EvalConfig& eval_config,
                                bool train_model) {
  auto mc = model_config;
  mc.vocab_size = data.vocab.size();
  std::size_t longest = 1;
  for (const auto& t : data.item_tokens) longest = std::max(longest, t.size());
  mc.max_seq = std::max(mc.max_seq, longest + mc.prefix_length());
  model::Encoder<float> encoder(mc, derive_seed(train_config.seed, "init"));
  ExperimentResult out;
  if (train_model) out.trace = train::fit(encoder, training_data(data), train_config);
  const auto ids = data.catalog.ids();
  const auto t0 = std::chrono::steady_clock::now();
  out.embeddings = encoder.embed_items(data.item_tokens, ids);
  out.embed_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  index::EmbeddingTable table(out.embeddings);
  const auto distractors = distractors_for(data, eval_config);
  out.ranks = eval::target_ranks(data.splits.test, table, distractors);
  out.recall.overall = eval::recall_from_ranks(out.ranks, eval_config.k);
  for (std::size_t i = 0; i < out.ranks.size(); ++i) {
    auto& r = data.splits.test[i].relation == Relation::view ? out.recall.view : out.recall.buy;
    ++r.total;
    if (out.ranks[i] <= eval_config.k) ++r.hits;
  }
  return out;
}

}  // namespace pfeed::pipeline
