// pfeed command line: one subcommand per pipeline stage, a JSON config file
// and dotted-path overrides.

#include <atomic>
#include <chrono>
#include <csignal>
#include <iostream>
#include <thread>

#include "CLI11.hpp"
#include "json.hpp"
#include "pfeed/errors.hpp"
#include "pfeed/feed_server.hpp"
#include "pfeed/pipeline.hpp"

namespace {

using nlohmann::json;
namespace pp = pfeed::pipeline;

std::atomic<bool> g_stop{false};

void on_signal(int) { g_stop = true; }

// A flag that, when given, overrides one config field.
struct Override {
  std::string key;
  CLI::Option* option = nullptr;
  std::function<json()> value;
};

template <typename T>
Override flag(CLI::App* app, const std::string& name, const std::string& key, T& var, const std::string& help) {
  auto* opt = app->add_option(name, var, help)->capture_default_str();
  return {key, opt, [&var] { return json(var); }};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pfeed: personalized feeds from precomputed item-to-item similarities"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  const pp::PipelineConfig d;  // defaults shown by --help

  std::string config_path;
  std::vector<std::string> sets;
  std::string work_dir = d.paths.work_dir;
  std::uint64_t seed = d.seed;
  app.add_option("--config", config_path, "JSON config file (fields absent from it keep their defaults)");
  app.add_option("--set", sets, "Override a config field by dotted path, e.g. --set training.epochs=3")
      ->capture_default_str();
  std::vector<Override> overrides;
  overrides.push_back(flag(&app, "--work-dir", "paths.work_dir", work_dir, "Directory for relative artifact paths"));
  overrides.push_back(flag(&app, "--seed", "seed", seed, "Root seed; every stage derives its own stream from it"));

  auto* synth = app.add_subcommand("synth", "Generate the synthetic catalog and event log");
  std::size_t customers = d.world.customers, sessions = d.world.sessions;
  overrides.push_back(flag(synth, "--customers", "world.customers", customers, "Customers"));
  overrides.push_back(flag(synth, "--sessions", "world.sessions", sessions, "Sessions"));

  auto* mine = app.add_subcommand("mine", "Mine view-buy and buy-buy pairs, split them and sample negatives");
  std::size_t top_n = d.mining.top_n, min_count = d.mining.min_count;
  overrides.push_back(flag(mine, "--top-n", "mining.top_n", top_n, "Pairs kept per dataset"));
  overrides.push_back(flag(mine, "--min-count", "mining.min_count", min_count, "Minimum co-occurrence count"));

  auto* tok = app.add_subcommand("tokenizer-train", "Learn the subword vocabulary from catalog metadata");
  std::size_t vocab_size = d.vocab_size;
  overrides.push_back(flag(tok, "--vocab-size", "vocab_size", vocab_size, "Vocabulary size"));

  auto* trn = app.add_subcommand("train", "Train the encoder contrastively");
  std::size_t epochs = d.training.epochs, batch = d.training.batch_size, negs = d.training.uniform_negatives;
  std::string sampling(pfeed::train::to_string(d.training.sampling)), mode(pfeed::model::to_string(d.model.mode));
  double lr = d.training.learning_rate;
  std::size_t hidden = d.model.hidden_dim;
  bool quiet = false;
  overrides.push_back(flag(trn, "--epochs", "training.epochs", epochs, "Epochs"));
  overrides.push_back(flag(trn, "--batch-size", "training.batch_size", batch, "Mini-batch size"));
  overrides.push_back(flag(trn, "--uniform-negatives", "training.uniform_negatives", negs, "Uniform negatives per step"));
  overrides.push_back(flag(trn, "--sampling", "training.sampling", sampling,
                           "in_batch | uniform | mixed | mixed_plus_self"));
  overrides.push_back(flag(trn, "--learning-rate", "training.learning_rate", lr, "Adam step size"));
  overrides.push_back(flag(trn, "--mode", "model.mode", mode, "simo | siso"));
  overrides.push_back(flag(trn, "--hidden-dim", "model.hidden_dim", hidden, "Embedding width"));
  trn->add_flag("--quiet", quiet, "Do not print per-step losses");

  app.add_subcommand("embed", "Embed the whole catalog in all three roles");

  auto* idx = app.add_subcommand("index", "Build the nearest-neighbour index over target embeddings");
  std::string variant(pfeed::index::to_string(d.index.variant));
  std::size_t clusters = d.index.clusters, nprobe = d.index.nprobe;
  overrides.push_back(flag(idx, "--variant", "index.variant", variant, "exact | ivf"));
  overrides.push_back(flag(idx, "--clusters", "index.clusters", clusters, "IVF lists (0: sqrt(n))"));
  overrides.push_back(flag(idx, "--nprobe", "index.nprobe", nprobe, "IVF lists probed (0: clusters/4)"));

  auto* pre = app.add_subcommand("precompute", "Build the (item, relation) -> top-M similarity store");
  std::size_t m = d.feed.m;
  double percentile = d.feed.percentile;
  overrides.push_back(flag(pre, "--m", "feed.m", m, "Results kept per (item, relation)"));
  overrides.push_back(flag(pre, "--percentile", "feed.percentile", percentile,
                           "Validation-score percentile used as the threshold"));

  auto* fd = app.add_subcommand("feed", "Print one customer's feed");
  std::string customer;
  std::string surface(pfeed::feed::to_string(d.feed.surface));
  std::size_t feed_size = d.feed.feed_size;
  fd->add_option("--customer", customer, "Customer id")->required();
  overrides.push_back(flag(fd, "--surface", "feed.surface", surface, "all | deals | new | popular"));
  overrides.push_back(flag(fd, "--size", "feed.feed_size", feed_size, "Feed length"));

  auto* srv = app.add_subcommand("serve", "Serve feeds over HTTP");
  int port = d.feed.port;
  std::string host = d.feed.host, store_path = d.paths.store, catalog_path = d.paths.catalog;
  double refresh_seconds = d.feed.refresh_seconds;
  overrides.push_back(flag(srv, "--port", "feed.port", port, "Port (0: any free port)"));
  overrides.push_back(flag(srv, "--host", "feed.host", host, "Bind address"));
  overrides.push_back(flag(srv, "--store", "paths.store", store_path, "Similarity store"));
  overrides.push_back(flag(srv, "--catalog", "paths.catalog", catalog_path, "Catalog"));
  overrides.push_back(flag(srv, "--refresh-every", "feed.refresh_seconds", refresh_seconds,
                           "Seconds between refreshes of active customers"));

  auto* ref = app.add_subcommand("refresh", "Recompute stored feeds");
  std::string refresh_mode = "batch", active_file;
  double every = 0;
  std::size_t iterations = 0;
  ref->add_option("--mode", refresh_mode, "batch | incremental")
      ->check(CLI::IsMember({"batch", "incremental"}))
      ->capture_default_str();
  ref->add_option("--active", active_file, "File of active customer ids, one per line (incremental)");
  ref->add_option("--every", every, "Repeat every N seconds (0: run once)")->capture_default_str();
  ref->add_option("--iterations", iterations, "Stop after N runs when repeating (0: until interrupted)")
      ->capture_default_str();

  auto* ev = app.add_subcommand("eval", "Recall@K on the test split with popularity and relationship breakdowns");
  bool untrained = false;
  std::size_t k = d.eval.k, distractors = d.eval.distractor_count;
  ev->add_flag("--untrained", untrained, "Evaluate a freshly initialised encoder instead of the checkpoint");
  overrides.push_back(flag(ev, "--k", "eval.k", k, "Cutoff"));
  overrides.push_back(flag(ev, "--distractors", "eval.distractor_count", distractors, "Distractor items"));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  const std::string cmd = app.get_subcommands().front()->get_name();
  try {
    json j = json::object();
    if (!config_path.empty()) j = pp::to_json(pp::load_config(config_path));
    for (const auto& o : overrides) {
      if (o.option->count() > 0) pp::apply_override(j, o.key + "=" + o.value().dump());
    }
    for (const auto& s : sets) pp::apply_override(j, s);
    const auto config = pp::config_from_json(j);
    config.validate();

    json out;
    if (cmd == "synth") out = pp::run_synth(config);
    else if (cmd == "mine") out = pp::run_mine(config);
    else if (cmd == "tokenizer-train") out = pp::run_tokenizer_train(config);
    else if (cmd == "train") {
      pfeed::train::StepCallback cb;
      if (!quiet) {
        cb = [](const pfeed::train::TraceRow& r) {
          std::fprintf(stderr, "step %zu  loss %.4f  l1 %.4f  l2 %.4f  beta %.3f  grad %.3f\n", r.step, r.loss, r.l1,
                       r.l2, r.beta, r.grad_norm);
        };
      }
      out = pp::run_train(config, cb);
    } else if (cmd == "embed") out = pp::run_embed(config);
    else if (cmd == "index") out = pp::run_index(config);
    else if (cmd == "precompute") out = pp::run_precompute(config);
    else if (cmd == "feed") out = pp::run_feed(config, customer);
    else if (cmd == "eval") out = pp::run_eval(config, untrained);
    else if (cmd == "refresh") {
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      std::size_t runs = 0;
      while (true) {
        out = pp::run_refresh(config, refresh_mode, active_file);
        ++runs;
        if (every <= 0 || (iterations && runs >= iterations)) break;
        std::cout << out.dump() << std::endl;
        const auto until = std::chrono::steady_clock::now() + std::chrono::duration<double>(every);
        while (!g_stop && std::chrono::steady_clock::now() < until) {
          std::this_thread::sleep_for(std::chrono::milliseconds(50));
        }
        if (g_stop) break;
      }
    } else if (cmd == "serve") {
      auto service = pp::make_feed_service(config);
      pfeed::feed::FeedServer server(
          service, std::chrono::milliseconds(static_cast<long long>(config.feed.refresh_seconds * 1000)));
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      const int bound = server.start(config.feed.host, config.feed.port);
      std::cout << json{{"listening", config.feed.host + ":" + std::to_string(bound)},
                        {"customers", service->customers()}}
                       .dump()
                << std::endl;
      while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(100));
      server.stop();
      return 0;
    }
    std::cout << out.dump() << std::endl;
    return 0;
  } catch (const pfeed::ContractError& e) {
    std::cerr << "pfeed " << cmd << ": invalid configuration: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "pfeed " << cmd << ": error: " << e.what() << '\n';
    return 1;
  }
}
