#include "pfeed/feed_server.hpp"

#include "httplib.h"
#include "pfeed/errors.hpp"

namespace pfeed::feed {

using nlohmann::json;

json to_json(const FeedItem& item) {
  return json{{"item_id", item.item_id},
              {"score", item.score},
              {"source_item_id", item.source.item_id},
              {"source_relation", std::string(to_string(item.source.relation))},
              {"rank", item.rank}};
}

json to_json(std::span<const FeedItem> feed) {
  json arr = json::array();
  for (const auto& f : feed) arr.push_back(to_json(f));
  return arr;
}

Event event_from_json(const json& body) {
  if (!body.is_object()) throw InputError("event body must be a JSON object");
  auto str = [&](const char* key, bool required) -> std::string {
    auto it = body.find(key);
    if (it == body.end()) {
      if (required) throw InputError(std::string("event field '") + key + "' is missing");
      return {};
    }
    if (!it->is_string()) throw InputError(std::string("event field '") + key + "' must be a string");
    return it->get<std::string>();
  };
  Event e;
  e.customer_id = str("customer_id", true);
  e.item_id = str("item_id", true);
  e.type = parse_event_type(str("event_type", true));
  e.session_id = str("session_id", false);
  auto ts = body.find("timestamp");
  if (ts == body.end() || !ts->is_number_integer()) throw InputError("event field 'timestamp' must be an integer");
  e.timestamp = ts->get<std::int64_t>();
  if (e.timestamp < 0) throw InputError("event timestamp must be >= 0");
  if (e.customer_id.empty() || e.item_id.empty()) throw InputError("event ids must be non-empty");
  return e;
}

json to_json(const Event& e) {
  return json{{"customer_id", e.customer_id},
              {"item_id", e.item_id},
              {"event_type", std::string(to_string(e.type))},
              {"timestamp", e.timestamp},
              {"session_id", e.session_id}};
}

namespace {

void reply_error(httplib::Response& res, int status, const std::string& message) {
  res.status = status;
  res.set_content(json{{"error", message}}.dump(), "application/json");
}

}  // namespace

FeedServer::FeedServer(std::shared_ptr<FeedService> service, std::chrono::milliseconds refresh_every)
    : service_(std::move(service)), http_(std::make_unique<httplib::Server>()), refresh_every_(refresh_every) {
  if (!service_) throw ContractError("feed server: no service");
  routes();
}

FeedServer::~FeedServer() { stop(); }

void FeedServer::routes() {
  http_->Get("/health", [this](const httplib::Request&, httplib::Response& res) {
    res.set_content(json{{"status", "ok"}, {"customers", service_->customers()}}.dump(), "application/json");
  });

  http_->Get(R"(/feed/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
    const std::string customer = req.matches[1];
    Surface surface = Surface::all;
    std::size_t size = 0;
    try {
      if (req.has_param("surface")) surface = parse_surface(req.get_param_value("surface"));
      if (req.has_param("size")) {
        const auto v = std::stoll(req.get_param_value("size"));
        if (v < 1) throw InputError("size must be >= 1");
        size = static_cast<std::size_t>(v);
      }
    } catch (const std::exception& e) {
      return reply_error(res, 400, e.what());
    }
    const auto feed = service_->feed(customer, surface, size);
    if (!feed) return reply_error(res, 404, "unknown customer '" + customer + "'");
    res.set_content(to_json(std::span<const FeedItem>(*feed)).dump(), "application/json");
  });

  http_->Post("/event", [this](const httplib::Request& req, httplib::Response& res) {
    Event e;
    try {
      e = event_from_json(json::parse(req.body));
    } catch (const std::exception& ex) {
      return reply_error(res, 400, ex.what());
    }
    if (!service_->ingest(e)) res.set_header("X-Pfeed-Skipped", "unknown item");
    res.status = 204;
  });

  http_->Post("/refresh", [this](const httplib::Request&, httplib::Response& res) {
    const auto n = service_->refresh_active();
    res.set_content(json{{"refreshed", n}}.dump(), "application/json");
  });
}

int FeedServer::bind(const std::string& host, int port) {
  if (port == 0) return http_->bind_to_any_port(host);
  if (!http_->bind_to_port(host, port)) throw InputError("cannot bind " + host + ":" + std::to_string(port));
  return port;
}

void FeedServer::run() {
  if (refresh_every_.count() > 0 && !refresher_.joinable()) {
    refresher_ = std::thread([this] {
      auto next = std::chrono::steady_clock::now() + refresh_every_;
      while (!stopping_) {
        std::this_thread::sleep_for(std::chrono::milliseconds(20));
        if (std::chrono::steady_clock::now() >= next) {
          service_->refresh_active();
          next += refresh_every_;
        }
      }
    });
  }
  http_->listen_after_bind();
}

int FeedServer::start(const std::string& host, int port) {
  const int bound = bind(host, port);
  if (bound <= 0) throw InputError("cannot bind " + host);
  worker_ = std::thread([this] { run(); });
  http_->wait_until_ready();
  return bound;
}

void FeedServer::stop() {
  stopping_ = true;
  if (http_) http_->stop();
  if (worker_.joinable()) worker_.join();
  if (refresher_.joinable()) refresher_.join();
}

}  // namespace pfeed::feed
