#pragma once

// Stage functions behind the command line: configuration, file wiring between
// stages, and in-memory helpers for experiments.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "pfeed/encoder.hpp"
#include "pfeed/errors.hpp"
#include "pfeed/eval.hpp"
#include "pfeed/feed_engine.hpp"
#include "pfeed/pair_miner.hpp"
#include "pfeed/similarity_store.hpp"
#include "pfeed/tokenizer.hpp"
#include "pfeed/trainer.hpp"
#include "pfeed/vector_index.hpp"

namespace pfeed::pipeline {

/// Raised when a stage's input has not been produced yet.
class MissingArtifact : public pfeed::InputError {
 public:
  using pfeed::InputError::InputError;
};

struct Paths {
  std::string work_dir = "pfeed-work";
  std::string catalog = "catalog.tsv";
  std::string events = "events.tsv";
  std::string pairs = "pairs.tsv";
  std::string train_pairs = "pairs.train.tsv";
  std::string validation_pairs = "pairs.validation.tsv";
  std::string test_pairs = "pairs.test.tsv";
  std::string negatives = "negatives.txt";
  std::string vocab = "vocab.txt";
  std::string checkpoint = "model.pfw";
  std::string trace = "trace.tsv";
  std::string embeddings = "embeddings.pfe";
  std::string index = "index.pfi";
  std::string store = "store.tsv";
  std::string feeds = "feeds.tsv";
  std::string report = "report";  // .jsonl and .txt are appended

  /// Relative paths resolve against work_dir.
  std::filesystem::path resolve(const std::string& p) const;
};

struct IndexParams {
  index::Variant variant = index::Variant::exact;
  std::size_t clusters = 0;  // 0: sqrt(n)
  std::size_t nprobe = 0;    // 0: clusters / 4
};

struct FeedParams {
  std::size_t m = 10;
  std::size_t max_queries = 100;
  std::size_t feed_size = 20;
  std::size_t max_consecutive = 3;
  feed::Surface surface = feed::Surface::all;
  double percentile = 1.0;
  std::string host = "127.0.0.1";
  int port = 8080;
  double refresh_seconds = 120;
};

struct PipelineConfig {
  std::uint64_t seed = 7;
  Paths paths;
  eval::WorldConfig world;
  mining::MiningOptions mining;
  std::size_t negative_items = 5000;
  std::size_t vocab_size = tok::kDefaultVocabSize;
  std::size_t max_tokens = tok::kDefaultMaxLen;
  model::EncoderConfig model;
  train::TrainConfig training;
  eval::EvalConfig eval;
  IndexParams index;
  FeedParams feed;

  PipelineConfig();
  void validate() const;
};

/// Independent stream per stage, all derived from the root seed.
std::uint64_t derive_seed(std::uint64_t root, std::string_view stage);

nlohmann::json to_json(const PipelineConfig& config);
/// Fields absent from `j` keep their defaults; unknown fields are rejected.
PipelineConfig config_from_json(const nlohmann::json& j);
PipelineConfig load_config(const std::filesystem::path& path);
/// "a.b.c=value"; the value is read as JSON when it parses, else as a string.
void apply_override(nlohmann::json& j, std::string_view assignment);

/// Line written at the top of every text artifact.
std::string provenance(const PipelineConfig& config, std::string_view stage);

// Stages. Each validates its config and inputs before writing anything and
// returns a short JSON summary.
nlohmann::json run_synth(const PipelineConfig& config);
nlohmann::json run_mine(const PipelineConfig& config);
nlohmann::json run_tokenizer_train(const PipelineConfig& config);
nlohmann::json run_train(const PipelineConfig& config, const train::StepCallback& on_step = {});
nlohmann::json run_embed(const PipelineConfig& config);
nlohmann::json run_index(const PipelineConfig& config);
nlohmann::json run_precompute(const PipelineConfig& config);
/// Feed of one customer from the logged events and the stored table.
nlohmann::json run_feed(const PipelineConfig& config, const std::string& customer_id);
/// batch: every customer; incremental: the ids listed in `active_file`,
/// merged into the existing feeds file.
nlohmann::json run_refresh(const PipelineConfig& config, const std::string& mode, const std::string& active_file);
nlohmann::json run_eval(const PipelineConfig& config, bool untrained);

/// Service preloaded with the catalog, the store and the logged events.
std::shared_ptr<feed::FeedService> make_feed_service(const PipelineConfig& config);

// In-memory experiment helpers.

struct Dataset {
  Catalog catalog;
  std::vector<Event> events;
  tok::Vocabulary vocab;
  std::vector<tok::TokenIds> item_tokens;  // per catalog index
  std::vector<mining::QueryTargetPair> view_pairs;  // all mined, per dataset
  std::vector<mining::QueryTargetPair> buy_pairs;
  mining::PairSplits splits;
  std::vector<std::string> negatives;
};

/// Synthetic world -> mined pairs -> vocabulary -> tokens -> split.
Dataset build_dataset(const PipelineConfig& config);
train::TrainData training_data(const Dataset& data);

struct ExperimentResult {
  eval::RecallBreakdown recall;
  std::vector<std::size_t> ranks;  // per test pair
  std::vector<train::TraceRow> trace;
  double embed_seconds = 0;
  std::vector<model::ItemEmbeddings> embeddings;
};

/// Optionally trains a fresh encoder, embeds the catalog and measures recall
/// on the test split against `eval_config.distractor_count` distractors.
ExperimentResult run_experiment(const Dataset& data, const model::EncoderConfig& model_config,
                                const train::TrainConfig& train_config, const eval::EvalConfig& eval_config,
                                bool train_model = true);

std::vector<std::string> distractors_for(const Dataset& data, const eval::EvalConfig& eval_config);

}  // namespace pfeed::pipeline
