#pragma once

// Plain HTTP front end for FeedService.
//   GET  /feed/{customer_id}?surface=all|deals|new|popular&size=K
//   POST /event      (JSON event body) -> 204
//   POST /refresh    refreshes feeds of recently active customers
//   GET  /health     -> 200

#include <atomic>
#include <chrono>
#include <memory>
#include <string>
#include <thread>

#include "json.hpp"

#include "pfeed/feed_engine.hpp"

namespace httplib {
class Server;
}

namespace pfeed::feed {

nlohmann::json to_json(const FeedItem& item);
nlohmann::json to_json(std::span<const FeedItem> feed);
/// Throws InputError on a missing or mistyped field.
Event event_from_json(const nlohmann::json& body);
nlohmann::json to_json(const Event& event);

class FeedServer {
 public:
  /// `refresh_every` of zero disables the background refresh loop.
  FeedServer(std::shared_ptr<FeedService> service, std::chrono::milliseconds refresh_every = {});
  ~FeedServer();
  FeedServer(const FeedServer&) = delete;
  FeedServer& operator=(const FeedServer&) = delete;

  /// Binds to host:port (port 0 picks a free one) and returns the bound port.
  int bind(const std::string& host, int port);
  /// Serves until stop(); blocks the calling thread.
  void run();
  /// bind + run on a background thread; returns once accepting.
  int start(const std::string& host, int port);
  void stop();

 private:
  void routes();

  std::shared_ptr<FeedService> service_;
  std::unique_ptr<httplib::Server> http_;
  std::chrono::milliseconds refresh_every_;
  std::thread worker_;
  std::thread refresher_;
  std::atomic<bool> stopping_{false};
};

}  // namespace pfeed::feed
