#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "pfeed/errors.hpp"
#include "pfeed/pipeline.hpp"
#include "support.hpp"

using namespace pfeed;
namespace pp = pfeed::pipeline;
using nlohmann::json;

TEST_SUITE("pipeline") {

TEST_CASE("config round trip and defaults") {
  pp::PipelineConfig c;
  c.training.epochs = 3;
  c.feed.surface = feed::Surface::deals;
  c.model.mode = model::EncoderMode::siso;
  auto j = pp::to_json(c);
  auto back = pp::config_from_json(j);
  CHECK(pp::to_json(back) == j);
  CHECK(back.training.epochs == 3);
  CHECK(back.feed.surface == feed::Surface::deals);
  CHECK(pp::to_json(pp::config_from_json(json::object())) == pp::to_json(pp::PipelineConfig{}));
}

TEST_CASE("unknown and mistyped fields are rejected") {
  CHECK_THROWS_AS(pp::config_from_json(json{{"trainig", {{"epochs", 2}}}}), ContractError);
  CHECK_THROWS_AS(pp::config_from_json(json{{"training", {{"epochs", "two"}}}}), ContractError);
  CHECK_THROWS_AS(pp::config_from_json(json{{"training", {{"epochs", -1}}}}), ContractError);
  CHECK_THROWS_AS(pp::config_from_json(json{{"training", {{"sampling", "sometimes"}}}}), ContractError);
}

TEST_CASE("overrides") {
  json j = json::object();
  pp::apply_override(j, "training.epochs=4");
  pp::apply_override(j, "training.sampling=uniform");
  pp::apply_override(j, "feed.percentile=2.5");
  CHECK(j["training"]["epochs"] == 4);
  CHECK(j["training"]["sampling"] == "uniform");
  auto c = pp::config_from_json(j);
  CHECK(c.training.epochs == 4);
  CHECK(c.training.sampling == train::Sampling::uniform);
  CHECK(c.feed.percentile == 2.5);
  CHECK_THROWS_AS(pp::apply_override(j, "no-equals-sign"), ContractError);
}

TEST_CASE("config files") {
  testing::TempDir dir("cfg");
  std::ofstream(dir / "c.json") << R"({"seed": 11, "mining": {"top_n": 50}})";
  auto c = pp::load_config(dir / "c.json");
  CHECK(c.seed == 11);
  CHECK(c.mining.top_n == 50);
  CHECK(c.mining.min_count == pp::PipelineConfig{}.mining.min_count);
  std::ofstream(dir / "bad.json") << "{";
  CHECK_THROWS(pp::load_config(dir / "bad.json"));
  CHECK_THROWS(pp::load_config(dir / "absent.json"));
}

TEST_CASE("stage seeds are distinct and stable") {
  std::set<std::uint64_t> seen;
  for (const char* s : {"synth", "split", "negatives", "init", "train", "index", "eval"}) {
    CHECK(pp::derive_seed(7, s) == pp::derive_seed(7, s));
    CHECK(seen.insert(pp::derive_seed(7, s)).second);
    CHECK(pp::derive_seed(7, s) != pp::derive_seed(8, s));
  }
}

TEST_CASE("provenance line") {
  pp::PipelineConfig c;
  auto line = pp::provenance(c, "mine");
  CHECK(line.rfind("pfeed mine seed=7 config=", 0) == 0);
  CHECK(line.find('\n') == std::string::npos);
}

TEST_CASE("missing upstream artifacts name the producing stage") {
  testing::TempDir dir("missing");
  pp::PipelineConfig c;
  c.paths.work_dir = dir.path.string();
  try {
    pp::run_mine(c);
    FAIL("expected MissingArtifact");
  } catch (const pp::MissingArtifact& e) {
    CHECK(std::string(e.what()).find("run `pfeed synth` first") != std::string::npos);
  }
  CHECK_THROWS_AS(pp::run_train(c), pp::MissingArtifact);
  CHECK_THROWS_AS(pp::run_precompute(c), pp::MissingArtifact);
}

TEST_CASE("invalid configuration writes nothing") {
  testing::TempDir dir("invalid");
  pp::PipelineConfig c;
  c.paths.work_dir = (dir.path / "work").string();
  c.world.categories = 0;
  CHECK_THROWS_AS(pp::run_synth(c), ContractError);
  CHECK_FALSE(std::filesystem::exists(dir.path / "work"));
}

TEST_CASE("synth and mine on a small world") {
  testing::TempDir dir("stages");
  pp::PipelineConfig c;
  c.paths.work_dir = dir.path.string();
  c.world.categories = 6;
  c.world.items_per_category = 20;
  c.world.customers = 300;
  c.world.sessions = 2000;
  c.mining.top_n = 100;
  c.negative_items = 50;
  auto s = pp::run_synth(c);
  CHECK(s["items"] == 120);
  std::ifstream in(dir / "catalog.tsv");
  std::string first;
  std::getline(in, first);
  CHECK(first.rfind("# pfeed synth seed=7", 0) == 0);

  pp::run_mine(c);
  auto train = mining::read_pairs(dir / "pairs.train.tsv");
  auto val = mining::read_pairs(dir / "pairs.validation.tsv");
  auto test = mining::read_pairs(dir / "pairs.test.tsv");
  auto all = mining::read_pairs(dir / "pairs.tsv");
  CHECK(train.size() + val.size() + test.size() == all.size());
  CHECK(mining::read_ids(dir / "negatives.txt").size() == 50);

  // In-memory and on-disk builds agree.
  auto data = pp::build_dataset(c);
  CHECK(data.catalog.size() == 120);
  REQUIRE(data.splits.test.size() == test.size());
  for (std::size_t i = 0; i < test.size(); ++i) {
    CHECK(data.splits.test[i].query_id == test[i].query_id);
    CHECK(data.splits.test[i].target_id == test[i].target_id);
    CHECK(data.splits.test[i].association == doctest::Approx(test[i].association).epsilon(1e-6));
  }
}

}  // TEST_SUITE
